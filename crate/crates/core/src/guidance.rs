//! Dual-condition classifier-free guidance, the DDIM sampling loop and the
//! guidance/resolution sweep with pick-by-score.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionPair, Denoiser};
use crate::embed::{cosine, Embedder};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::schedule::{ddim_step, NoiseSchedule, TimestepPlan};
use crate::tensor::VideoLatent;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub s_v: f32,
    pub s_t: f32,
}

impl GuidanceConfig {
    pub fn new(s_v: f32, s_t: f32) -> Result<Self> {
        let g = Self { s_v, s_t };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_v >= 1.0 && self.s_t >= 1.0 && self.s_v.is_finite() && self.s_t.is_finite()) {
            return Err(Error::Param(format!(
                "guidance scales must be finite and >= 1, got s_V={} s_T={}",
                self.s_v, self.s_t
            )));
        }
        Ok(())
    }
}

/// `ε(∅,∅) + s_V·(ε(c_V,∅) − ε(∅,∅)) + s_T·(ε(c_V,c_T) − ε(c_V,∅))`,
/// evaluated per element in `f64`.
pub fn combine_guidance(
    uncond: &VideoLatent,
    video_only: &VideoLatent,
    full: &VideoLatent,
    g: GuidanceConfig,
) -> Result<VideoLatent> {
    uncond.check_same_dims(video_only, "guidance")?;
    uncond.check_same_dims(full, "guidance")?;
    let (sv, st) = (g.s_v as f64, g.s_t as f64);
    let data = uncond
        .data()
        .iter()
        .zip(video_only.data())
        .zip(full.data())
        .map(|((&u, &v), &f)| {
            let (u, v, f) = (u as f64, v as f64, f as f64);
            (u + sv * (v - u) + st * (f - v)) as f32
        })
        .collect();
    VideoLatent::new(uncond.dims(), data).map_err(|_| Error::NonFinite("guidance"))
}

/// Guided noise prediction; both conditions must be present.
pub fn cfg_predict<D: Denoiser + ?Sized>(
    den: &D,
    z_t: &VideoLatent,
    t: usize,
    cond: &ConditionPair,
    g: GuidanceConfig,
) -> Result<VideoLatent> {
    cond.require_full()?;
    g.validate()?;
    let uncond = den.predict(z_t, t, &ConditionPair::null())?;
    let video_only = den.predict(z_t, t, &cond.without_text())?;
    let full = den.predict(z_t, t, cond)?;
    combine_guidance(&uncond, &video_only, &full, g)
}

/// Runs the guided DDIM loop from `z_init`.
pub fn sample_from<D: Denoiser + ?Sized>(
    den: &D,
    s: &NoiseSchedule,
    z_init: VideoLatent,
    cond: &ConditionPair,
    g: GuidanceConfig,
    plan: &TimestepPlan,
) -> Result<VideoLatent> {
    plan.validate_for(s)?;
    let mut z = z_init;
    for (_, t, t_prev) in plan.steps() {
        let eps = cfg_predict(den, &z, t, cond, g)?;
        z = ddim_step(&z, &eps, t, t_prev, s)?;
    }
    Ok(z)
}

/// Samples a video with the shape of the video condition, starting from
/// seeded Gaussian noise.
pub fn sample_video<D: Denoiser + ?Sized>(
    den: &D,
    s: &NoiseSchedule,
    cond: &ConditionPair,
    g: GuidanceConfig,
    plan: &TimestepPlan,
    seed: u64,
) -> Result<VideoLatent> {
    let (cv, _) = cond.require_full()?;
    let z = SeededRng::new(seed).gaussian(cv.dims());
    sample_from(den, s, z, cond, g, plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub s_v: Vec<f32>,
    pub resolutions: Vec<(usize, usize)>,
    pub s_t: f32,
}

impl SweepGrid {
    pub fn single(s_v: f32, s_t: f32, resolution: (usize, usize)) -> Self {
        Self { s_v: vec![s_v], resolutions: vec![resolution], s_t }
    }

    /// Cells in enumeration order: `s_V` outer, resolution inner.
    pub fn cells(&self) -> Result<Vec<(GuidanceConfig, (usize, usize))>> {
        if self.s_v.is_empty() || self.resolutions.is_empty() {
            return Err(Error::Param("sweep grid must be non-empty".into()));
        }
        let mut out = Vec::with_capacity(self.s_v.len() * self.resolutions.len());
        for &sv in &self.s_v {
            let g = GuidanceConfig::new(sv, self.s_t)?;
            for &r in &self.resolutions {
                if r.0 == 0 || r.1 == 0 {
                    return Err(Error::Param(format!("resolution {r:?} must be positive")));
                }
                out.push((g, r));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub s_v: f32,
    pub s_t: f32,
    pub height: usize,
    pub width: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub records: Vec<SweepRecord>,
    /// Per-cell samples at the condition's resolution, in cell order.
    pub samples: Vec<VideoLatent>,
    pub best: usize,
}

impl SweepOutcome {
    pub fn best_sample(&self) -> &VideoLatent {
        &self.samples[self.best]
    }

    pub fn best_record(&self) -> &SweepRecord {
        &self.records[self.best]
    }
}

/// Mean over frames of `cos(embed(frame), embed(prompt))`, frames clamped to `[0, 1]`.
pub fn prompt_score(video: &VideoLatent, embedder: &dyn Embedder, prompt: &str) -> Result<f64> {
    let text = embedder.embed_text(prompt)?;
    let v = video.clamp(0.0, 1.0);
    let d = v.dims();
    let mut total = 0.0;
    for b in 0..d.b {
        for f in 0..d.f {
            total += cosine(&embedder.embed_image(&v.frame(b, f))?, &text);
        }
    }
    Ok(total / (d.b * d.f) as f64)
}

/// Samples once per grid cell (same seed for every cell), scores each result
/// against `prompt` and returns the best; ties go to the earliest cell.
#[allow(clippy::too_many_arguments)]
pub fn sweep_and_pick<D: Denoiser + ?Sized>(
    den: &D,
    s: &NoiseSchedule,
    cond: &ConditionPair,
    grid: &SweepGrid,
    plan: &TimestepPlan,
    embedder: &dyn Embedder,
    prompt: &str,
    seed: u64,
) -> Result<SweepOutcome> {
    let (cv, _) = cond.require_full()?;
    let cells = grid.cells()?;
    let (h0, w0) = (cv.dims().h, cv.dims().w);
    let results: Vec<Result<(SweepRecord, VideoLatent)>> = cells
        .par_iter()
        .map(|&(g, (h, w))| {
            let cell_cond = ConditionPair::new(Some(cv.resize(h, w)?), cond.text.clone());
            let sample = sample_video(den, s, &cell_cond, g, plan, seed)?.resize(h0, w0)?;
            let score = prompt_score(&sample, embedder, prompt).map_err(|e| Error::SweepCell {
                s_v: g.s_v,
                h,
                w,
                source: Box::new(e),
            })?;
            Ok((SweepRecord { s_v: g.s_v, s_t: g.s_t, height: h, width: w, score }, sample))
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut samples = Vec::with_capacity(results.len());
    for r in results {
        let (rec, sample) = r?;
        records.push(rec);
        samples.push(sample);
    }
    let mut best = 0;
    for (i, r) in records.iter().enumerate() {
        if r.score > records[best].score {
            best = i;
        }
    }
    Ok(SweepOutcome { records, samples, best })
}
