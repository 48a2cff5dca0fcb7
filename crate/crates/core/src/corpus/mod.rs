//! Pre-training corpora: frame subsampling of image sequences, proportional
//! mixing of sources into a fingerprinted manifest, synthetic generators and
//! image loading.

mod synth;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::numerics::Tensor;

pub use synth::{synth_corpus, synth_image, Generator, SynthSet, SHAPE_CLASSES};

pub const MANIFEST_SCHEMA: u32 = 1;

/// Relative sizes of the egocentric-video, still-image and interaction
/// sources (2.6M : 1.2M : 0.7M frames).
pub const DEFAULT_PROPORTIONS: [f64; 3] = [2.6 / 4.5, 1.2 / 4.5, 0.7 / 4.5];

/// Indices of frames taken at `target_fps` from a sequence recorded at
/// `native_rate`, starting at t = 0.
pub fn sample_frames(length_s: f64, native_rate: f64, target_fps: f64) -> Result<Vec<usize>> {
    if !(native_rate > 0.0 && target_fps > 0.0) || !(length_s >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rates must be positive and length non-negative (length {length_s}, native {native_rate}, target {target_fps})"
        )));
    }
    if target_fps > native_rate {
        return Err(Error::InvalidArgument(format!(
            "target rate {target_fps} fps exceeds native rate {native_rate} fps"
        )));
    }
    let available = (length_s * native_rate + 1e-9).floor() as usize + 1;
    let count = ((length_s * target_fps + 1e-9).floor() as usize + 1).min(available);
    Ok((0..count)
        .map(|k| ((k as f64 * native_rate / target_fps).round() as usize).min(available - 1))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SourceKind {
    /// Directory of sequences (subdirectories of PNG frames, or the directory
    /// itself when it holds frames directly) recorded at `native_rate`.
    FrameSequence { path: PathBuf, fps: f64, native_rate: f64 },
    StillImages { path: PathBuf },
    Synthetic { generator: Generator, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: SourceKind,
}

impl SourceSpec {
    pub fn synthetic(name: &str, generator: Generator, seed: u64) -> Self {
        SourceSpec {
            name: name.into(),
            kind: SourceKind::Synthetic { generator, seed },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("source name is empty".into()));
        }
        if let SourceKind::FrameSequence { fps, native_rate, .. } = self.kind {
            if fps > native_rate {
                return Err(Error::Config(format!(
                    "source `{}`: fps {fps} exceeds native rate {native_rate}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entry {
    pub source: String,
    pub frame_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<u64>,
    /// Hex SHA-256 of the source name, frame id and content.
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub sources: Vec<SourceSpec>,
    pub proportions: Vec<f64>,
    pub entries: Vec<Entry>,
    pub counts: BTreeMap<String, usize>,
    /// Hex SHA-256 of the sorted entry hashes.
    pub fingerprint: String,
}

fn entry_hash(source: &str, frame_id: &str, content: &[u8]) -> String {
    let mut h = Sha256::new();
    for part in [source.as_bytes(), frame_id.as_bytes(), content] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    hex::encode(h.finalize())
}

fn image_content(img: &RgbImage) -> Vec<u8> {
    let mut v = Vec::with_capacity(16 + img.data.len());
    v.extend((img.width as u64).to_le_bytes());
    v.extend((img.height as u64).to_le_bytes());
    v.extend(&img.data);
    v
}

fn fingerprint_of(entries: &[Entry]) -> String {
    let mut hashes: Vec<&str> = entries.iter().map(|e| e.hash.as_str()).collect();
    hashes.sort_unstable();
    let mut h = Sha256::new();
    for e in hashes {
        h.update(e.as_bytes());
    }
    hex::encode(h.finalize())
}

fn pngs_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Files a file-backed source offers, in manifest order.
fn candidate_files(kind: &SourceKind) -> Result<Vec<PathBuf>> {
    match kind {
        SourceKind::StillImages { path } => pngs_in(path),
        SourceKind::FrameSequence { path, fps, native_rate } => {
            let mut seqs = subdirs(path)?;
            if seqs.is_empty() {
                seqs.push(path.clone());
            }
            let mut out = Vec::new();
            for seq in seqs {
                let frames = pngs_in(&seq)?;
                if frames.is_empty() {
                    continue;
                }
                let length = (frames.len() - 1) as f64 / native_rate;
                out.extend(sample_frames(length, *native_rate, *fps)?.into_iter().map(|i| frames[i].clone()));
            }
            Ok(out)
        }
        SourceKind::Synthetic { .. } => Ok(Vec::new()),
    }
}

fn frame_id(root: &Path, file: &Path) -> String {
    file.strip_prefix(root).unwrap_or(file).to_string_lossy().replace('\\', "/")
}

fn source_entries(spec: &SourceSpec, count: usize) -> Result<Vec<Entry>> {
    match &spec.kind {
        SourceKind::Synthetic { generator, seed } => (0..count as u64)
            .into_par_iter()
            .map(|i| {
                let (img, _) = synth_image(*generator, *seed, i)?;
                let id = format!("{i:06}");
                Ok(Entry {
                    hash: entry_hash(&spec.name, &id, &image_content(&img)),
                    source: spec.name.clone(),
                    frame_id: id,
                    path: None,
                    index: Some(i),
                })
            })
            .collect(),
        SourceKind::StillImages { path } | SourceKind::FrameSequence { path, .. } => {
            let files = candidate_files(&spec.kind)?;
            if files.is_empty() {
                return Err(Error::InvalidArgument(format!("source `{}` has no images", spec.name)));
            }
            if files.len() < count {
                return Err(Error::InvalidArgument(format!(
                    "source `{}` offers {} images, {count} requested",
                    spec.name,
                    files.len()
                )));
            }
            files[..count]
                .par_iter()
                .map(|f| {
                    let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
                    let id = frame_id(path, f);
                    Ok(Entry {
                        hash: entry_hash(&spec.name, &id, &bytes),
                        source: spec.name.clone(),
                        frame_id: id,
                        path: Some(f.clone()),
                        index: None,
                    })
                })
                .collect()
        }
    }
}

/// Largest-remainder split of `total` by `proportions`. Equal remainders go
/// to the source whose name sorts first.
pub fn allocate(names: &[&str], proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut left = total.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..names.len()).collect();
    let frac = |i: usize| exact[i] - counts[i] as f64;
    order.sort_by(|&a, &b| {
        let (fa, fb) = (frac(a), frac(b));
        if (fa - fb).abs() > 1e-9 {
            fb.total_cmp(&fa)
        } else {
            names[a].cmp(names[b])
        }
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Mixes `total` entries from `sources` in the given proportions. Entries
/// are grouped by source name, so the manifest does not depend on the
/// order sources are listed in.
pub fn build_corpus(sources: &[SourceSpec], proportions: &[f64], total: usize) -> Result<CorpusManifest> {
    if sources.is_empty() || sources.len() != proportions.len() {
        return Err(Error::Config(format!(
            "{} sources with {} proportions",
            sources.len(),
            proportions.len()
        )));
    }
    let sum: f64 = proportions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || proportions.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Config(format!("proportions must be non-negative and sum to 1, got {proportions:?}")));
    }
    let mut names = HashSet::new();
    for s in sources {
        s.validate()?;
        if !names.insert(s.name.as_str()) {
            return Err(Error::Config(format!("duplicate source name `{}`", s.name)));
        }
    }
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.sort_by(|&a, &b| sources[a].name.cmp(&sources[b].name));
    let sorted: Vec<SourceSpec> = order.iter().map(|&i| sources[i].clone()).collect();
    let props: Vec<f64> = order.iter().map(|&i| proportions[i]).collect();
    let name_refs: Vec<&str> = sorted.iter().map(|s| s.name.as_str()).collect();
    let counts = allocate(&name_refs, &props, total);

    let mut entries = Vec::with_capacity(total);
    let mut per_source = BTreeMap::new();
    for (spec, &n) in sorted.iter().zip(&counts) {
        entries.extend(source_entries(spec, n)?);
        per_source.insert(spec.name.clone(), n);
    }
    Ok(CorpusManifest {
        schema_version: MANIFEST_SCHEMA,
        fingerprint: fingerprint_of(&entries),
        sources: sorted,
        proportions: props,
        entries,
        counts: per_source,
    })
}

/// Fully synthetic three-source mix at the default proportions.
pub fn desk_corpus(total: usize, seed: u64) -> Result<CorpusManifest> {
    let sources = [
        SourceSpec::synthetic("egocentric-sim", Generator::SimRenders, seed),
        SourceSpec::synthetic("still-shapes", Generator::Shapes, seed.wrapping_add(1)),
        SourceSpec::synthetic("interaction-sim", Generator::SimRenders, seed.wrapping_add(2)),
    ];
    build_corpus(&sources, &DEFAULT_PROPORTIONS, total)
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: CorpusManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.schema_version != MANIFEST_SCHEMA {
            return Err(Error::format(path, format!("unsupported schema_version {}", m.schema_version)));
        }
        m.check().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(m)
    }

    /// Structural checks: unique entries, consistent counts and fingerprint.
    pub fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert((&e.source, &e.frame_id)) {
                return Err(Error::Config(format!("duplicate entry {}/{}", e.source, e.frame_id)));
            }
        }
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.source.clone()).or_insert(0usize) += 1;
        }
        counts.retain(|_, v| *v > 0);
        let declared: BTreeMap<_, _> = self.counts.iter().filter(|(_, v)| **v > 0).map(|(k, v)| (k.clone(), *v)).collect();
        if counts != declared {
            return Err(Error::Config("per-source counts do not match entries".into()));
        }
        if fingerprint_of(&self.entries) != self.fingerprint {
            return Err(Error::Config("fingerprint does not match entries".into()));
        }
        Ok(())
    }

    fn source(&self, name: &str) -> Result<&SourceSpec> {
        self.sources
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("entry refers to unknown source `{name}`")))
    }

    /// Decodes or regenerates one entry, verifying its content hash.
    pub fn load_entry(&self, entry: &Entry) -> Result<RgbImage> {
        let spec = self.source(&entry.source)?;
        let (img, content) = match (&spec.kind, &entry.path, entry.index) {
            (SourceKind::Synthetic { generator, seed }, _, Some(i)) => {
                let (img, _) = synth_image(*generator, *seed, i)?;
                let c = image_content(&img);
                (img, c)
            }
            (SourceKind::StillImages { .. } | SourceKind::FrameSequence { .. }, Some(p), _) => {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                (RgbImage::decode_png(&bytes).map_err(|e| Error::format(p, e.to_string()))?, bytes)
            }
            _ => {
                return Err(Error::Config(format!(
                    "entry {}/{} has no usable location",
                    entry.source, entry.frame_id
                )))
            }
        };
        if entry_hash(&entry.source, &entry.frame_id, &content) != entry.hash {
            return Err(Error::Config(format!(
                "content of {}/{} changed since the manifest was built",
                entry.source, entry.frame_id
            )));
        }
        Ok(img)
    }

    /// All entries center-cropped to `image_size` and scaled to [-1, 1], in
    /// manifest order.
    pub fn load_images(&self, image_size: usize) -> Result<Vec<Tensor>> {
        self.entries
            .par_iter()
            .map(|e| {
                let img = self.load_entry(e)?;
                let img = if img.width == image_size && img.height == image_size {
                    img
                } else {
                    img.center_crop_resize(image_size)
                };
                Ok(img.to_tensor())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
