use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::simworld::{self, Camera, Expert, Shape, TaskId, Variation, RENDER_SIZE};

/// Number of label classes of the shapes generator.
pub const SHAPE_CLASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Colored primitives on textured backgrounds, labelled by shape class.
    Shapes,
    /// Randomized simulator scenes; even indices use the wrist camera, odd
    /// indices the third-person camera of the same scene.
    SimRenders,
}

impl std::str::FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(Generator::Shapes),
            "sim-renders" | "sim" => Ok(Generator::SimRenders),
            _ => Err(Error::InvalidArgument(format!("unknown generator `{s}` (shapes, sim-renders)"))),
        }
    }
}

fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn random_color(rng: &mut impl Rng) -> [u8; 3] {
    [rng.random_range(20..236), rng.random_range(20..236), rng.random_range(20..236)]
}

fn luma(c: [u8; 3]) -> f64 {
    0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64
}

fn shade(c: [u8; 3], delta: i32) -> [u8; 3] {
    c.map(|v| (v as i32 + delta).clamp(0, 255) as u8)
}

fn textured_background(rng: &mut impl Rng, size: usize) -> RgbImage {
    let base = random_color(rng);
    let mut img = RgbImage::filled(size, size, base);
    let amp = rng.random_range(10..30);
    match rng.random_range(0..3) {
        0 => {
            let period = rng.random_range(4.0..12.0);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (s, c) = angle.sin_cos();
            for y in 0..size {
                for x in 0..size {
                    let t = (x as f64 * c + y as f64 * s) / period;
                    let d = if t.rem_euclid(1.0) < 0.5 { amp } else { -amp };
                    img.set_pixel(x, y, shade(base, d));
                }
            }
        }
        1 => {
            let cell = rng.random_range(3..10);
            for y in 0..size {
                for x in 0..size {
                    let d = if (x / cell + y / cell) % 2 == 0 { amp } else { -amp };
                    img.set_pixel(x, y, shade(base, d));
                }
            }
        }
        _ => {
            for y in 0..size {
                for x in 0..size {
                    img.set_pixel(x, y, shade(base, rng.random_range(-amp..=amp)));
                }
            }
        }
    }
    img
}

fn shapes_item(seed: u64, index: u64) -> (RgbImage, usize) {
    let mut rng = item_rng(seed, index);
    let size = RENDER_SIZE;
    let label = (index % SHAPE_CLASSES as u64) as usize;
    let mut img = textured_background(&mut rng, size);
    let bg = img.pixel(0, 0);
    let color = loop {
        let c = random_color(&mut rng);
        if (luma(c) - luma(bg)).abs() > 50.0 {
            break c;
        }
    };
    let r = rng.random_range(0.15..0.32) * size as f64;
    let cx = rng.random_range(r..size as f64 - r);
    let cy = rng.random_range(r..size as f64 - r);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = theta.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, cy - (y as f64 + 0.5));
            let (u, v) = ((c * dx + s * dy) / r, (-s * dx + c * dy) / r);
            if u.abs() <= 1.0 && v.abs() <= 1.0 && Shape::ALL[label].contains(u, v) {
                img.set_pixel(x, y, color);
            }
        }
    }
    (img, label)
}

fn sim_item(seed: u64, index: u64) -> Result<RgbImage> {
    let scene = index / 2;
    let mut rng = item_rng(seed, scene);
    let task = TaskId::ALL[rng.random_range(0..TaskId::ALL.len())];
    let mut state = simworld::reset(task, Variation::Random, rng.random())?;
    state.background = rng.random_range(0..6);
    let mut expert = Expert::new(0.02, rng.random());
    for _ in 0..rng.random_range(0..task.max_steps() / 2) {
        let a = expert.act(&state)?;
        state = simworld::step(&state, &a)?;
    }
    let camera = if index.is_multiple_of(2) { Camera::Wrist } else { Camera::Third };
    Ok(simworld::render(&state, camera))
}

/// One generated image (and its label for the shapes generator). Items are
/// independent, so any index can be regenerated on its own.
pub fn synth_image(generator: Generator, seed: u64, index: u64) -> Result<(RgbImage, Option<usize>)> {
    match generator {
        Generator::Shapes => {
            let (img, label) = shapes_item(seed, index);
            Ok((img, Some(label)))
        }
        Generator::SimRenders => Ok((sim_item(seed, index)?, None)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSet {
    pub images: Vec<RgbImage>,
    pub labels: Option<Vec<usize>>,
}

/// `n` procedural images, generated in parallel in index order.
pub fn synth_corpus(n: usize, seed: u64, generator: Generator) -> Result<SynthSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic corpus needs n > 0".into()));
    }
    let items: Vec<(RgbImage, Option<usize>)> = (0..n as u64)
        .into_par_iter()
        .map(|i| synth_image(generator, seed, i))
        .collect::<Result<_>>()?;
    let labels = items.iter().map(|(_, l)| *l).collect::<Option<Vec<_>>>();
    Ok(SynthSet {
        images: items.into_iter().map(|(img, _)| img).collect(),
        labels,
    })
}

impl SynthSet {
    /// Writes `000000.png`, `000001.png`, ... and `labels.json` if labelled.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.images
            .par_iter()
            .enumerate()
            .try_for_each(|(i, img)| img.save_png(&dir.join(format!("{i:06}.png"))))?;
        if let Some(labels) = &self.labels {
            let path = dir.join("labels.json");
            std::fs::write(&path, serde_json::to_vec(labels)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}
