use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::simworld::{self, Camera, EmbodimentKind, Expert, SimState, TaskId, Variation, RATE_HZ};

pub const DEMO_SCHEMA: u32 = 1;
pub const DEMO_FILE: &str = "demo.json";
/// Per-step joint tolerance of a replay.
pub const REPLAY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoSource {
    Scripted,
    Teleop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub t: u64,
    /// Joint angles before the action, radians.
    pub proprio: Vec<f64>,
    /// Delta joint angles, radians.
    pub action: Vec<f64>,
    /// Gripper command (1 closes); absent for embodiments without one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gripper: Option<f64>,
    /// Wrist-camera frame, relative to the demo directory.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_third: Option<String>,
}

/// Contents of `demo.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub schema_version: u32,
    pub task: TaskId,
    pub embodiment: EmbodimentKind,
    pub rate_hz: f64,
    pub source: DemoSource,
    pub variation: Option<usize>,
    pub seed: u64,
    pub success: bool,
    pub initial_state: SimState,
    pub steps: Vec<DemoStep>,
}

/// A demonstration with its frames in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub record: DemoRecord,
    pub wrist: Vec<RgbImage>,
    /// Empty when the third-person view was not recorded.
    pub third: Vec<RgbImage>,
}

fn frame_name(dir: &str, t: usize) -> String {
    format!("{dir}/{t:06}.png")
}

/// Accumulates steps while an episode runs.
#[derive(Debug, Clone)]
pub struct DemoRecorder {
    demo: Demo,
    record_third: bool,
}

impl DemoRecorder {
    pub fn new(initial: &SimState, source: DemoSource, seed: u64, record_third: bool) -> Self {
        DemoRecorder {
            demo: Demo {
                record: DemoRecord {
                    schema_version: DEMO_SCHEMA,
                    task: initial.task,
                    embodiment: initial.task.embodiment_kind(),
                    rate_hz: RATE_HZ,
                    source,
                    variation: initial.variation,
                    seed,
                    success: false,
                    initial_state: initial.clone(),
                    steps: Vec::new(),
                },
                wrist: Vec::new(),
                third: Vec::new(),
            },
            record_third,
        }
    }

    pub fn len(&self) -> usize {
        self.demo.record.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demo.record.steps.is_empty()
    }

    /// Records the observation of `state` and the simulator action applied to it.
    pub fn push(&mut self, state: &SimState, sim_action: &[f64]) -> Result<()> {
        let emb = state.embodiment();
        if sim_action.len() != emb.action_dim() {
            return Err(Error::Shape(format!("action of length {} for {}", sim_action.len(), emb.kind.name())));
        }
        let n = emb.n_joints();
        let t = self.len();
        self.demo.record.steps.push(DemoStep {
            t: t as u64,
            proprio: state.joints.clone(),
            action: sim_action[..n].to_vec(),
            gripper: (emb.kind == EmbodimentKind::Arm3).then(|| sim_action[n]),
            image: frame_name("frames", t),
            image_third: self.record_third.then(|| frame_name("frames_third", t)),
        });
        self.demo.wrist.push(simworld::render(state, Camera::Wrist));
        if self.record_third {
            self.demo.third.push(simworld::render(state, Camera::Third));
        }
        Ok(())
    }

    pub fn finish(mut self, success: bool) -> Demo {
        self.demo.record.success = success;
        self.demo
    }
}

impl Demo {
    pub fn len(&self) -> usize {
        self.record.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record.steps.is_empty()
    }

    pub fn task(&self) -> TaskId {
        self.record.task
    }

    /// Simulator action of step `t`: joint deltas plus the gripper command.
    pub fn sim_action(&self, t: usize) -> Vec<f64> {
        let s = &self.record.steps[t];
        let mut a = s.action.clone();
        a.extend(s.gripper);
        a
    }

    /// Policy proprioception at step `t`: joints, plus the gripper opening
    /// implied by the previous command for the arm.
    pub fn policy_proprio(&self, t: usize) -> Vec<f64> {
        let mut p = self.record.steps[t].proprio.clone();
        if self.record.embodiment == EmbodimentKind::Arm3 {
            let opening = if t == 0 {
                self.record.initial_state.gripper
            } else {
                match self.record.steps[t - 1].gripper {
                    Some(g) if g > 0.5 => 0.0,
                    _ => 1.0,
                }
            };
            p.push(opening);
        }
        p
    }

    pub fn frames(&self, camera: Camera) -> Result<&[RgbImage]> {
        match camera {
            Camera::Wrist => Ok(&self.wrist),
            Camera::Third if self.third.len() == self.len() => Ok(&self.third),
            Camera::Third => Err(Error::InvalidArgument("demo has no third-person frames".into())),
        }
    }

    /// Structural checks: dimensions per step, frame counts, rate.
    pub fn validate(&self) -> Result<()> {
        let r = &self.record;
        if r.schema_version != DEMO_SCHEMA {
            return Err(Error::Config(format!("unsupported demo schema_version {}", r.schema_version)));
        }
        if r.embodiment != r.task.embodiment_kind() {
            return Err(Error::Embodiment {
                expected: r.task.embodiment_kind().name().into(),
                found: r.embodiment.name().into(),
            });
        }
        if !(r.rate_hz > 0.0) {
            return Err(Error::Config(format!("rate_hz {} is not positive", r.rate_hz)));
        }
        let emb = r.task.embodiment();
        let n = emb.n_joints();
        let arm = emb.kind == EmbodimentKind::Arm3;
        for (i, s) in r.steps.iter().enumerate() {
            let bad = |reason: String| Error::CorruptStep { step: i, reason };
            if s.t != i as u64 {
                return Err(bad(format!("step index {} out of sequence", s.t)));
            }
            if s.proprio.len() != n || s.action.len() != n {
                return Err(bad(format!(
                    "proprio has {} and action {} entries, embodiment has {n} joints",
                    s.proprio.len(),
                    s.action.len()
                )));
            }
            if s.gripper.is_some() != arm {
                return Err(bad("gripper command presence does not match the embodiment".into()));
            }
            if s.proprio.iter().chain(&s.action).chain(s.gripper.iter()).any(|v| !v.is_finite()) {
                return Err(bad("non-finite value".into()));
            }
        }
        if self.wrist.len() != r.steps.len() || !(self.third.is_empty() || self.third.len() == r.steps.len()) {
            return Err(Error::Config("frame count does not match step count".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir.join("frames")).map_err(|e| Error::io(dir, e))?;
        if !self.third.is_empty() {
            std::fs::create_dir_all(dir.join("frames_third")).map_err(|e| Error::io(dir, e))?;
        }
        for (s, img) in self.record.steps.iter().zip(&self.wrist) {
            img.save_png(&dir.join(&s.image))?;
        }
        for (s, img) in self.record.steps.iter().zip(&self.third) {
            if let Some(p) = &s.image_third {
                img.save_png(&dir.join(p))?;
            }
        }
        let path = dir.join(DEMO_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self.record)?).map_err(|e| Error::io(path, e))
    }

    /// Reads `demo.json` only, without frames.
    pub fn load_record(dir: &Path) -> Result<DemoRecord> {
        let path = dir.join(DEMO_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load(dir: &Path) -> Result<Demo> {
        let record = Self::load_record(dir)?;
        let load = |rel: &str, step: usize| {
            RgbImage::load_png(&dir.join(rel)).map_err(|e| Error::CorruptStep { step, reason: e.to_string() })
        };
        let wrist = record.steps.iter().enumerate().map(|(i, s)| load(&s.image, i)).collect::<Result<Vec<_>>>()?;
        let third = if record.steps.iter().all(|s| s.image_third.is_some()) && !record.steps.is_empty() {
            record
                .steps
                .iter()
                .enumerate()
                .map(|(i, s)| load(s.image_third.as_deref().unwrap(), i))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let demo = Demo { record, wrist, third };
        demo.validate()?;
        Ok(demo)
    }
}

/// Demo directories under `root` (those holding a `demo.json`), sorted.
pub fn demo_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = e.map_err(|e| Error::io(root, e))?.path();
        if p.join(DEMO_FILE).is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_demos(root: &Path) -> Result<Vec<Demo>> {
    demo_dirs(root)?.par_iter().map(|d| Demo::load(d)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayVerdict {
    pub pass: bool,
    pub steps: usize,
    /// First step whose recorded joints differ from the re-simulated ones,
    /// with the largest absolute difference.
    pub divergence: Option<(usize, f64)>,
    pub success: bool,
    pub reason: String,
}

/// Re-executes the recorded actions from the recorded initial state.
pub fn replay(record: &DemoRecord) -> Result<ReplayVerdict> {
    let mut state = record.initial_state.clone();
    if state.task != record.task {
        return Err(Error::CorruptStep { step: 0, reason: "initial state belongs to another task".into() });
    }
    let emb = state.embodiment();
    let mut divergence = None;
    for (i, s) in record.steps.iter().enumerate() {
        let diff = s
            .proprio
            .iter()
            .zip(&state.joints)
            .map(|(a, b)| (a - b).abs())
            .fold(if s.proprio.len() == state.joints.len() { 0.0 } else { f64::INFINITY }, f64::max);
        if diff >= REPLAY_TOL && divergence.is_none() {
            divergence = Some((i, diff));
        }
        let mut a = s.action.clone();
        a.extend(s.gripper);
        if a.len() != emb.action_dim() {
            return Err(Error::CorruptStep { step: i, reason: format!("action has {} entries", a.len()) });
        }
        state = simworld::step(&state, &a).map_err(|e| Error::CorruptStep { step: i, reason: e.to_string() })?;
    }
    let success = simworld::success(&state);
    let reason = match (divergence, success) {
        (Some((i, d)), _) => format!("state diverges at step {i} by {d:.3e} rad"),
        (None, false) => "final state does not satisfy the success predicate".into(),
        (None, true) => "ok".into(),
    };
    Ok(ReplayVerdict {
        pass: divergence.is_none() && success,
        steps: record.steps.len(),
        divergence,
        success,
        reason,
    })
}

/// Per-attempt episode seed.
fn attempt_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k)
}

/// One scripted episode from a random reset. Returns the demo if the
/// expert succeeded within the task's step budget.
pub fn scripted_episode(task: TaskId, seed: u64, sigma: f64, record_third: bool) -> Result<Option<Demo>> {
    let mut state = simworld::reset(task, Variation::Random, seed)?;
    let mut expert = Expert::new(sigma, seed);
    let mut rec = DemoRecorder::new(&state, DemoSource::Scripted, seed, record_third);
    for _ in 0..task.max_steps() {
        let a = expert.act(&state)?;
        rec.push(&state, &a)?;
        state = simworld::step(&state, &a)?;
        if simworld::success(&state) {
            return Ok(Some(rec.finish(true)));
        }
    }
    Ok(None)
}

/// `n` successful scripted demos. Attempts are numbered from 0 and failed
/// attempts skipped, so the first `m` demos of a larger collection equal a
/// collection of `m`.
pub fn collect_demos(task: TaskId, n: usize, seed: u64, sigma: f64, record_third: bool) -> Result<Vec<Demo>> {
    let mut out = Vec::with_capacity(n);
    let mut next = 0u64;
    while out.len() < n {
        let batch = ((n - out.len()) + 4) as u64;
        let results: Vec<Result<Option<Demo>>> = (next..next + batch)
            .into_par_iter()
            .map(|k| scripted_episode(task, attempt_seed(seed, k), sigma, record_third))
            .collect();
        for r in results {
            if let Some(d) = r? {
                if out.len() < n {
                    out.push(d);
                }
            }
        }
        next += batch;
        if next > 20 * n as u64 + 100 {
            return Err(Error::InvalidArgument(format!("scripted expert keeps failing on {task}")));
        }
    }
    Ok(out)
}
