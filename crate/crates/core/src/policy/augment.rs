use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::RgbImage;

pub const CROP_PAD: i64 = 4;
const JITTER: f64 = 0.2;

/// Training-time image augmentations. Evaluation inputs are never augmented.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentations {
    /// Random shift of up to 4 px with edge replication.
    pub random_crop: bool,
    /// Random brightness, contrast and saturation scaling of up to 20%.
    pub color_jitter: bool,
}

impl Augmentations {
    pub const NONE: Augmentations = Augmentations {
        random_crop: false,
        color_jitter: false,
    };
    pub const ALL: Augmentations = Augmentations {
        random_crop: true,
        color_jitter: true,
    };

    pub fn any(&self) -> bool {
        self.random_crop || self.color_jitter
    }

    pub fn apply(&self, img: &RgbImage, rng: &mut impl Rng) -> RgbImage {
        let mut out = img.clone();
        if self.random_crop {
            out = shift(&out, rng.random_range(-CROP_PAD..=CROP_PAD), rng.random_range(-CROP_PAD..=CROP_PAD));
        }
        if self.color_jitter {
            out = jitter(
                &out,
                1.0 + rng.random_range(-JITTER..=JITTER),
                1.0 + rng.random_range(-JITTER..=JITTER),
                1.0 + rng.random_range(-JITTER..=JITTER),
            );
        }
        out
    }
}

/// Content moved by `(dx, dy)` pixels; exposed borders repeat the edge.
pub fn shift(img: &RgbImage, dx: i64, dy: i64) -> RgbImage {
    let (w, h) = (img.width as i64, img.height as i64);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let sx = (x - dx).clamp(0, w - 1) as usize;
            let sy = (y - dy).clamp(0, h - 1) as usize;
            out.set_pixel(x as usize, y as usize, img.pixel(sx, sy));
        }
    }
    out
}

pub fn jitter(img: &RgbImage, brightness: f64, contrast: f64, saturation: f64) -> RgbImage {
    let n = (img.width * img.height) as f64;
    let mean_luma = img.data.chunks(3).map(luma).sum::<f64>() / n;
    let mut out = img.clone();
    for px in out.data.chunks_mut(3) {
        let l = luma(px);
        for c in px.iter_mut() {
            let v = *c as f64 * brightness;
            let v = l * brightness + (v - l * brightness) * saturation;
            let v = mean_luma * brightness + (v - mean_luma * brightness) * contrast;
            *c = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

fn luma(px: &[u8]) -> f64 {
    0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
}
