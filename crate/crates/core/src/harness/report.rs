use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalRecord;
use crate::error::{Error, Result};
use crate::simworld::TaskId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub task: TaskId,
    pub seeds: usize,
    pub successes: usize,
    pub trials: usize,
    /// Success rate of each seed, in seed order of appearance.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub model: String,
    pub supervision: String,
    pub params_m: u32,
    pub success_pct: f64,
}

pub const REFERENCE_TASK: &str = "PickFruit";
pub const REFERENCE_NOTE: &str =
    "real-robot success rates from the original study; not reproducible in this simulator and never compared against";

/// Real-robot PickFruit success rates: `(model, supervision, params in M, %)`.
pub const TABLE1: [(&str, &str, u32, f64); 5] = [
    ("R3M", "video-text", 23, 31.3),
    ("CLIP", "image-text", 86, 18.8),
    ("MVP ViT-S", "image-only", 22, 68.8),
    ("MVP ViT-B", "image-only", 86, 93.8),
    ("MVP ViT-L", "image-only", 307, 100.0),
];

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
/// A single value has zero error.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Per `(model, task)` success statistics, in order of first appearance.
pub fn summarize(records: &[EvalRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no evaluation records".into()));
    }
    let mut keys: Vec<(String, TaskId)> = Vec::new();
    for r in records {
        if !keys.iter().any(|(m, t)| *m == r.model && *t == r.task) {
            keys.push((r.model.clone(), r.task));
        }
    }
    Ok(keys
        .into_iter()
        .map(|(model, task)| {
            let mine: Vec<&EvalRecord> = records.iter().filter(|r| r.model == model && r.task == task).collect();
            let mut seeds: Vec<u64> = Vec::new();
            for r in &mine {
                if !seeds.contains(&r.seed) {
                    seeds.push(r.seed);
                }
            }
            let per_seed: Vec<f64> = seeds
                .iter()
                .map(|s| {
                    let runs: Vec<&&EvalRecord> = mine.iter().filter(|r| r.seed == *s).collect();
                    runs.iter().filter(|r| r.success).count() as f64 / runs.len() as f64
                })
                .collect();
            let (mean, stderr) = mean_stderr(&per_seed);
            SummaryRow {
                model,
                task,
                seeds: seeds.len(),
                successes: mine.iter().filter(|r| r.success).count(),
                trials: mine.len(),
                per_seed,
                mean,
                stderr,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub records: Vec<EvalRecord>,
    pub summary: Vec<SummaryRow>,
    pub curves: Vec<Curve>,
    pub reference_task: String,
    pub reference_note: String,
    pub reference: Vec<ReferenceRow>,
}

const REPORT_FILE: &str = "report.json";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl Report {
    pub fn new(records: Vec<EvalRecord>, summary: Vec<SummaryRow>, curves: Vec<Curve>) -> Self {
        Report {
            records,
            summary,
            curves,
            reference_task: REFERENCE_TASK.into(),
            reference_note: REFERENCE_NOTE.into(),
            reference: TABLE1
                .iter()
                .map(|(m, s, p, r)| ReferenceRow {
                    model: m.to_string(),
                    supervision: s.to_string(),
                    params_m: *p,
                    success_pct: *r,
                })
                .collect(),
        }
    }

    /// Summarizes `records` and wraps them in a report.
    pub fn from_records(records: Vec<EvalRecord>, curves: Vec<Curve>) -> Result<Self> {
        let summary = summarize(&records)?;
        Ok(Self::new(records, summary, curves))
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("model,task,seeds,successes,trials,mean,stderr\n");
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{:.6}",
                csv_field(&r.model),
                r.task,
                r.seeds,
                r.successes,
                r.trials,
                r.mean,
                r.stderr
            );
        }
        s
    }

    pub fn records_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    fn reference_csv(&self) -> String {
        let mut s = format!("# {}: {}\nmodel,supervision,params_m,success_pct,reproducible\n", self.reference_task, self.reference_note);
        for r in &self.reference {
            let _ = writeln!(s, "{},{},{},{:.1},false", csv_field(&r.model), r.supervision, r.params_m, r.success_pct);
        }
        s
    }

    /// Writes `records.jsonl`, `summary.csv`, `curves/*.csv`,
    /// `reference.csv` and the full `report.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let write = |p: &Path, s: &str| std::fs::write(p, s).map_err(|e| Error::io(p, e));
        let curves = dir.join("curves");
        std::fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;
        write(&dir.join("records.jsonl"), &self.records_jsonl()?)?;
        write(&dir.join("summary.csv"), &self.summary_csv())?;
        write(&dir.join("reference.csv"), &self.reference_csv())?;
        for c in &self.curves {
            let mut s = String::from("x,mean,stderr\n");
            for p in &c.points {
                let _ = writeln!(s, "{},{:.6},{:.6}", p.x, p.mean, p.stderr);
            }
            write(&curves.join(format!("{}.csv", c.name)), &s)?;
        }
        write(&dir.join(REPORT_FILE), &serde_json::to_string_pretty(self)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(REPORT_FILE);
        let s = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&s).map_err(|e| Error::format(&p, e.to_string()))
    }

    /// Reads evaluation records from a `records.jsonl` file.
    pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        s.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
            .collect()
    }
}
