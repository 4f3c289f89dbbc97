use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use vdiff_core::datagen::catalog::geometry_for;
use vdiff_core::datagen::dataset::{dataset_stats, DatasetStats};
use vdiff_core::datagen::{
    default_catalog, format_catalog, gen_dataset, parse_catalog, render_scene, Manifest, PromptTriplet, SceneSpec,
};
use vdiff_core::embed::ToyEmbedder;
use vdiff_core::vten::write_video;
use vdiff_core::VideoLatent;

use crate::config::RunConfig;

/// Acceptance rates of large-scale filtered paired-video corpora, for context.
pub const REFERENCE_ACCEPTANCE: [(&str, f64); 2] = [("image-caption source", 0.0549), ("video-caption source", 0.1749)];

pub fn load_catalog(cfg: &RunConfig) -> Result<Vec<PromptTriplet>> {
    match &cfg.datagen.catalog {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).with_context(|| format!("cannot read catalog {}", path.display()))?;
            Ok(parse_catalog(&text).with_context(|| format!("in catalog {}", path.display()))?)
        }
        None => Ok(default_catalog()),
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let triplets = load_catalog(cfg)?;
    let schedule = cfg.noise_schedule()?;
    let embedder = ToyEmbedder::default();
    let dc = cfg.datagen.dataset_config();
    let manifest = cfg.pool()?.install(|| gen_dataset(&triplets, &dc, cfg.seed, &schedule, &embedder, out))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    #[serde(flatten)]
    pub stats: DatasetStats,
    pub reference_acceptance: Vec<(String, f64)>,
}

pub fn stats(dataset: &Path) -> Result<StatsReport> {
    Ok(StatsReport {
        stats: dataset_stats(dataset)?,
        reference_acceptance: REFERENCE_ACCEPTANCE.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    })
}

pub fn write_catalog(out: &Path) -> Result<usize> {
    let cat = default_catalog();
    std::fs::write(out, format_catalog(&cat))?;
    Ok(cat.len())
}

/// Source of a rendered video: an explicit scene or a prompt whose scene
/// geometry is derived deterministically.
pub enum RenderSource<'a> {
    Scene(&'a Path),
    Prompt { prompt: &'a str, pan: Option<(i64, i64)> },
}

pub fn render(source: RenderSource<'_>, frames: usize, h: usize, w: usize, out: &Path) -> Result<VideoLatent> {
    let spec: SceneSpec = match source {
        RenderSource::Scene(path) => {
            let text =
                std::fs::read_to_string(path).with_context(|| format!("cannot read scene {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid scene {}", path.display()))?
        }
        RenderSource::Prompt { prompt, pan } => {
            let mut spec = geometry_for(prompt, frames, h, w);
            if let Some(p) = pan {
                spec.pan = p;
            }
            spec
        }
    };
    let video = render_scene(&spec, h, w)?;
    write_video(out, &video)?;
    Ok(video)
}
