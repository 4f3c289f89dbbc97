use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use vdiff_core::datagen::{render_scene, SceneSpec, Shape, Texture};
use vdiff_core::denoiser::{CoherentGaussianDenoiser, ConditionPair};
use vdiff_core::embed::ToyEmbedder;
use vdiff_core::flow::{frame_consistency, mamse, FlowConfig};
use vdiff_core::guidance::GuidanceConfig;
use vdiff_core::lvsc::{sample_long_video, CorrectionMode, LongVideoPlan, LongVideoSettings, NoObserver};
use vdiff_core::palette::Color;
use vdiff_core::text::PromptEmbedding;
use vdiff_core::vten::read_video;
use vdiff_core::{SeededRng, VideoLatent};

use crate::config::RunConfig;

pub const METRICS: [&str; 2] = ["mamse", "frame-consistency"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub video: PathBuf,
    pub metric: String,
    pub value: f64,
}

/// Parses a comma-separated metric list, rejecting unknown names.
pub fn parse_metrics(list: &str) -> Result<Vec<String>> {
    list.split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(|m| {
            if METRICS.contains(&m) {
                Ok(m.to_string())
            } else {
                bail!("unknown metric `{m}` (known: {})", METRICS.join(", "))
            }
        })
        .collect()
}

/// Mean MAMSE over the given frame pairs, or over all consecutive pairs.
pub fn video_mamse(video: &VideoLatent, boundaries: Option<&[(usize, usize)]>, flow: &FlowConfig) -> Result<f64> {
    let f = video.dims().f;
    let pairs: Vec<(usize, usize)> = match boundaries {
        Some(b) => b.to_vec(),
        None => (1..f).map(|k| (k - 1, k)).collect(),
    };
    if pairs.is_empty() {
        bail!("mamse needs at least two frames");
    }
    let mut total = 0.0;
    for &p in &pairs {
        total += mamse(video, p, flow)?;
    }
    Ok(total / pairs.len() as f64)
}

pub fn eval(
    cfg: &RunConfig,
    videos: &[PathBuf],
    metrics: &[String],
    boundaries: Option<&[(usize, usize)]>,
) -> Result<Vec<MetricRecord>> {
    let embedder = ToyEmbedder::default();
    let mut out = Vec::new();
    for path in videos {
        let video = read_video(path).with_context(|| format!("cannot read {}", path.display()))?.clamp(0.0, 1.0);
        for m in metrics {
            let value = match m.as_str() {
                "mamse" => video_mamse(&video, boundaries, &cfg.long_video.flow)?,
                "frame-consistency" => frame_consistency(&video, &embedder)?,
                other => bail!("unknown metric `{other}`"),
            };
            out.push(MetricRecord { video: path.clone(), metric: m.clone(), value });
        }
    }
    Ok(out)
}

/// Reference boundary MAMSE (%) and frame consistency of the three
/// long-video settings at full scale, reported for context only.
pub const REFERENCE_ROWS: [(&str, f64, f64); 3] =
    [("none", 2.02, 0.9072), ("lvsc", 1.44, 0.9093), ("lvsc-mc", 1.37, 0.9095)];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: &'static str,
    pub mode: CorrectionMode,
    /// Corpus median of the per-video mean boundary MAMSE, in percent.
    pub median_boundary_mamse: f64,
    pub median_frame_consistency: f64,
    pub reference_mamse: f64,
    pub reference_frame_consistency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub videos: usize,
    pub frames: usize,
    pub batch_frames: usize,
    pub reference_frames: usize,
    pub rows: Vec<AblationRow>,
    /// Per-video mean boundary MAMSE, one vector per row.
    pub per_video: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationSettings {
    pub videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub batch_frames: usize,
    pub reference_frames: usize,
    pub guidance: GuidanceConfig,
    pub seed: u64,
}

impl AblationSettings {
    pub fn from_config(cfg: &RunConfig, videos: usize, size: usize) -> Result<Self> {
        Ok(Self {
            videos,
            frames: cfg.long_video.total_frames,
            height: size,
            width: size,
            batch_frames: cfg.long_video.batch_frames,
            reference_frames: cfg.long_video.reference_frames,
            guidance: GuidanceConfig::new(1.2, 1.0)?,
            seed: cfg.seed,
        })
    }
}

const PANS: [(i64, i64); 8] = [(0, 1), (1, 0), (0, -1), (-1, 0), (1, 1), (0, 2), (2, 0), (1, -1)];

/// A corpus of static shapes filmed by a panning camera.
pub fn panning_corpus(n: usize, frames: usize, seed: u64) -> Vec<SceneSpec> {
    (0..n)
        .map(|i| {
            let mut rng = SeededRng::with_stream(seed, i as u64);
            let background = Color::ALL[rng.index(Color::ALL.len())];
            let mut object_color = Color::ALL[rng.index(Color::ALL.len())];
            if object_color == background {
                object_color =
                    Color::ALL[(object_color.index() + 1 + rng.index(Color::ALL.len() - 1)) % Color::ALL.len()];
            }
            SceneSpec {
                shape: Shape::ALL[rng.index(3)],
                object_color,
                size: rng.uniform_range(0.15, 0.25) as f32,
                start: (rng.uniform_range(0.35, 0.65) as f32, rng.uniform_range(0.35, 0.65) as f32),
                velocity: (0.0, 0.0),
                background,
                texture: Texture::ALL[rng.index(Texture::ALL.len())],
                pan: PANS[i % PANS.len()],
                frames,
                allow_exit: false,
            }
        })
        .collect()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Long-video ablation on a panning corpus: every video is re-sampled by a
/// pan-aware Gaussian denoiser conditioned on the rendered video, once per
/// correction setting, and the boundary frames are compared with MAMSE.
/// Motion-compensated flows are estimated on the conditioning video.
pub fn ablation(cfg: &RunConfig, st: &AblationSettings) -> Result<AblationReport> {
    if st.videos == 0 {
        bail!("ablation needs at least one video");
    }
    let schedule = cfg.noise_schedule()?;
    let plan = cfg.timestep_plan()?;
    let lplan = LongVideoPlan::new(st.frames, st.batch_frames, st.reference_frames)?;
    let flow = cfg.long_video.flow;
    let embedder = ToyEmbedder::default();
    let modes = [CorrectionMode::Independent, CorrectionMode::Lvsc, CorrectionMode::LvscMc];
    let corpus = panning_corpus(st.videos, st.frames, st.seed);
    let per_scene: Vec<Result<Vec<(f64, f64)>>> = cfg.pool()?.install(|| {
        corpus
            .par_iter()
            .enumerate()
            .map(|(i, scene)| {
                let video = render_scene(scene, st.height, st.width)?;
                let den = CoherentGaussianDenoiser::new(schedule.clone(), scene.pan);
                let cond = ConditionPair::full(video, PromptEmbedding::encode(&scene.describe()));
                let seed = SeededRng::with_stream(st.seed ^ 0xAB1A_7104, i as u64).next_u64();
                modes
                    .iter()
                    .map(|&mode| {
                        let settings = LongVideoSettings { plan: lplan, mode, flow };
                        let out = sample_long_video(
                            &den,
                            &schedule,
                            &cond,
                            st.guidance,
                            &plan,
                            &settings,
                            seed,
                            &mut NoObserver,
                        )?
                        .clamp(0.0, 1.0);
                        let m = video_mamse(&out, Some(&lplan.boundaries()), &flow)?;
                        Ok((m, frame_consistency(&out, &embedder)?))
                    })
                    .collect()
            })
            .collect()
    });
    let per_scene = per_scene.into_iter().collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut per_video = Vec::new();
    for (r, &mode) in modes.iter().enumerate() {
        let m: Vec<f64> = per_scene.iter().map(|v| v[r].0).collect();
        let c: Vec<f64> = per_scene.iter().map(|v| v[r].1).collect();
        let (setting, ref_m, ref_c) = REFERENCE_ROWS[r];
        rows.push(AblationRow {
            setting,
            mode,
            median_boundary_mamse: median(&m),
            median_frame_consistency: median(&c),
            reference_mamse: ref_m,
            reference_frame_consistency: ref_c,
        });
        per_video.push(m);
    }
    Ok(AblationReport {
        videos: st.videos,
        frames: st.frames,
        batch_frames: st.batch_frames,
        reference_frames: st.reference_frames,
        rows,
        per_video,
    })
}
