//! Dataset assembly: generate, score and store every candidate pair.
//!
//! Each candidate `(triplet i, seed j)` draws its generation recipe and
//! noise seed from its own RNG stream `i · seeds_per_triplet + j` of the
//! master seed, so the output does not depend on scheduling or pool size.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backbone::{BackboneConfig, PaletteBackbone};
use super::catalog::{geometry_for, PromptTriplet};
use super::filter::{score_and_filter, PairedSample, Scores, Thresholds};
use super::ptp::{ptp_generate_pair, sample_generation_config, GenerationDraw};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::schedule::{NoiseSchedule, TimestepPlan};
use crate::tensor::{Dims, VideoLatent};
use crate::vten::{read_video, write_video};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const META_FILE: &str = "meta.json";
pub const INPUT_FILE: &str = "input.vten";
pub const EDITED_FILE: &str = "edited.vten";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seeds_per_triplet: usize,
    pub thresholds: Thresholds,
    pub backbone: BackboneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            height: 16,
            width: 16,
            seeds_per_triplet: 2,
            thresholds: Thresholds::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

/// Per-sample metadata record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub triplet: PromptTriplet,
    pub triplet_index: usize,
    pub seed_index: usize,
    pub noise_seed: u64,
    pub draw: GenerationDraw,
    pub scores: Scores,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub candidates: usize,
    pub kept: Vec<String>,
    pub acceptance_rate: f64,
    pub samples: Vec<ManifestEntry>,
}

pub fn sample_dir_name(triplet_index: usize, seed_index: usize) -> String {
    format!("sample_{triplet_index:04}_{seed_index}")
}

/// Generates and scores one candidate without touching the disk.
pub fn generate_candidate(
    triplet: &PromptTriplet,
    triplet_index: usize,
    seed_index: usize,
    master_seed: u64,
    cfg: &DatasetConfig,
    schedule: &NoiseSchedule,
    embedder: &dyn Embedder,
) -> Result<(PairedSample, SampleMeta)> {
    let stream = (triplet_index * cfg.seeds_per_triplet + seed_index) as u64;
    let mut rng = SeededRng::with_stream(master_seed, stream);
    let draw = sample_generation_config(&mut rng);
    let noise_seed = rng.next_u64();
    let geometry = geometry_for(&triplet.input, cfg.frames, cfg.height, cfg.width);
    let backbone = PaletteBackbone::new(geometry, cfg.backbone, schedule.clone());
    let plan = TimestepPlan::uniform(draw.steps, schedule.len())?;
    let dims = Dims::new(1, 3, cfg.frames, cfg.height, cfg.width);
    let pair = ptp_generate_pair(&backbone, schedule, triplet, dims, noise_seed, &draw.settings(), &plan)?;
    let sample =
        score_and_filter(PairedSample::new(pair.input, pair.edited, triplet.clone()), embedder, &cfg.thresholds)?;
    let meta = SampleMeta {
        triplet: triplet.clone(),
        triplet_index,
        seed_index,
        noise_seed,
        draw,
        scores: sample.scores.expect("score_and_filter sets scores"),
        kept: sample.kept,
    };
    Ok((sample, meta))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Generates the whole dataset into `out`, one subdirectory per candidate,
/// and writes the manifest last. Runs on the current rayon pool.
pub fn gen_dataset(
    triplets: &[PromptTriplet],
    cfg: &DatasetConfig,
    master_seed: u64,
    schedule: &NoiseSchedule,
    embedder: &dyn Embedder,
    out: &Path,
) -> Result<Manifest> {
    if triplets.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    if cfg.seeds_per_triplet == 0 || cfg.frames == 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(Error::Param("dataset needs at least one seed per triplet and a non-empty video size".into()));
    }
    fs::create_dir_all(out)?;
    let jobs: Vec<(usize, usize)> =
        (0..triplets.len()).flat_map(|i| (0..cfg.seeds_per_triplet).map(move |j| (i, j))).collect();
    let entries = jobs
        .par_iter()
        .map(|&(i, j)| -> Result<ManifestEntry> {
            let (sample, meta) = generate_candidate(&triplets[i], i, j, master_seed, cfg, schedule, embedder)?;
            let name = sample_dir_name(i, j);
            let dir = out.join(&name);
            fs::create_dir_all(&dir)?;
            write_video(&dir.join(INPUT_FILE), &sample.input)?;
            write_video(&dir.join(EDITED_FILE), &sample.edited)?;
            write_json(&dir.join(META_FILE), &meta)?;
            Ok(ManifestEntry { dir: name, kept: meta.kept })
        })
        .collect::<Result<Vec<_>>>()?;
    let kept: Vec<String> = entries.iter().filter(|e| e.kept).map(|e| e.dir.clone()).collect();
    let manifest = Manifest {
        master_seed,
        candidates: entries.len(),
        acceptance_rate: kept.len() as f64 / entries.len() as f64,
        kept,
        samples: entries,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dataset: &Path) -> Result<Manifest> {
    let path = dataset.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// One stored sample, loaded back.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSample {
    pub dir: PathBuf,
    pub meta: SampleMeta,
    pub input: VideoLatent,
    pub edited: VideoLatent,
}

/// Loads every kept sample listed in the manifest, in manifest order.
pub fn load_kept(dataset: &Path) -> Result<Vec<StoredSample>> {
    let manifest = read_manifest(dataset)?;
    manifest
        .kept
        .iter()
        .map(|name| {
            let dir = dataset.join(name);
            let meta: SampleMeta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
            Ok(StoredSample {
                input: read_video(&dir.join(INPUT_FILE))?,
                edited: read_video(&dir.join(EDITED_FILE))?,
                meta,
                dir,
            })
        })
        .collect()
}

/// Aggregate statistics over a stored dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub candidates: usize,
    pub kept: usize,
    pub acceptance_rate: f64,
    /// Mean scores over all candidates, then over kept ones.
    pub mean_scores: Option<Scores>,
    pub mean_kept_scores: Option<Scores>,
}

fn mean_scores<'a>(it: impl Iterator<Item = &'a Scores>) -> Option<Scores> {
    let mut n = 0usize;
    let mut acc = [0.0f64; 4];
    for s in it {
        n += 1;
        for (a, v) in acc.iter_mut().zip([s.text_in, s.text_out, s.direction, s.frame]) {
            *a += v;
        }
    }
    (n > 0).then(|| {
        let n = n as f64;
        Scores { text_in: acc[0] / n, text_out: acc[1] / n, direction: acc[2] / n, frame: acc[3] / n }
    })
}

pub fn dataset_stats(dataset: &Path) -> Result<DatasetStats> {
    let manifest = read_manifest(dataset)?;
    let metas = manifest
        .samples
        .iter()
        .map(|e| Ok(serde_json::from_str::<SampleMeta>(&fs::read_to_string(dataset.join(&e.dir).join(META_FILE))?)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetStats {
        candidates: manifest.candidates,
        kept: manifest.kept.len(),
        acceptance_rate: manifest.acceptance_rate,
        mean_scores: mean_scores(metas.iter().map(|m| &m.scores)),
        mean_kept_scores: mean_scores(metas.iter().filter(|m| m.kept).map(|m| &m.scores)),
    })
}
