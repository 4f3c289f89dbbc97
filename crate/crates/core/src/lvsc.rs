//! Long-video sampling with cross-batch score correction.
//!
//! A long video is sampled in batches of `F` frames. Every batch after the
//! first carries the last `N` decoded frames of the previous batch as
//! references. At each denoising step the references are renoised with fresh
//! noise, their exact noise is recovered in closed form, and the average
//! residual between that noise and the model's guided prediction on the
//! references is added to the prediction on the new frames before the DDIM
//! update. The motion-compensated variant warps each reference's residual
//! along optical flow into every new frame before averaging.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionPair, Denoiser};
use crate::error::{Error, Result};
use crate::flow::{estimate_flow, warp_plane, FlowConfig, FlowField};
use crate::guidance::{cfg_predict, GuidanceConfig};
use crate::rng::SeededRng;
use crate::schedule::{ddim_step, forward_diffuse, infer_reference_noise, NoiseSchedule, TimestepPlan};
use crate::tensor::VideoLatent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongVideoPlan {
    pub total_frames: usize,
    pub batch_frames: usize,
    pub reference_frames: usize,
}

/// One batch: optional reference frames followed by new frames (global indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    pub references: Option<Range<usize>>,
    pub new: Range<usize>,
}

impl Segment {
    /// All frames the batch processes, references first.
    pub fn span(&self) -> Range<usize> {
        match &self.references {
            Some(r) => r.start..self.new.end,
            None => self.new.clone(),
        }
    }
}

impl LongVideoPlan {
    pub fn new(total_frames: usize, batch_frames: usize, reference_frames: usize) -> Result<Self> {
        if total_frames == 0 {
            return Err(Error::Plan("total frame count must be positive".into()));
        }
        if reference_frames == 0 || reference_frames >= batch_frames {
            return Err(Error::Plan(format!(
                "reference count {reference_frames} must satisfy 1 <= N < F = {batch_frames}"
            )));
        }
        Ok(Self { total_frames, batch_frames, reference_frames })
    }

    /// First batch: `F` new frames; each later batch: `N` references plus up
    /// to `F − N` new frames. New frames cover `0..total` exactly once.
    pub fn segments(&self) -> Vec<Segment> {
        let (f, n) = (self.batch_frames, self.reference_frames);
        let mut out = vec![Segment { index: 0, references: None, new: 0..f.min(self.total_frames) }];
        let mut end = out[0].new.end;
        while end < self.total_frames {
            let new_end = (end + f - n).min(self.total_frames);
            out.push(Segment { index: out.len(), references: Some(end - n..end), new: end..new_end });
            end = new_end;
        }
        out
    }

    /// `(last frame of one batch, first new frame of the next)` pairs.
    pub fn boundaries(&self) -> Vec<(usize, usize)> {
        self.segments().iter().skip(1).map(|s| (s.new.start - 1, s.new.start)).collect()
    }
}

/// Clean reference frames carried into the next batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWindow {
    pub z_ref: VideoLatent,
}

impl ReferenceWindow {
    pub fn new(z_ref: VideoLatent, batch_frames: usize) -> Result<Self> {
        let n = z_ref.dims().f;
        if n == 0 || n >= batch_frames {
            return Err(Error::Plan(format!("reference window of {n} frames for batches of {batch_frames}")));
        }
        Ok(Self { z_ref })
    }

    pub fn len(&self) -> usize {
        self.z_ref.dims().f
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionMode {
    /// Every batch sampled on its own, without references.
    Independent,
    /// References are part of the batch but no correction is applied.
    ContextOnly,
    /// Average reference residual added to every new frame.
    Lvsc,
    /// Reference residuals warped along flow before averaging.
    LvscMc,
    /// Diagnostic: the new-frame prediction replaced by the averaged warped
    /// reference noise alone.
    LvscMcLiteral,
}

impl CorrectionMode {
    pub fn uses_flow(self) -> bool {
        matches!(self, CorrectionMode::LvscMc | CorrectionMode::LvscMcLiteral)
    }

    pub fn name(self) -> &'static str {
        match self {
            CorrectionMode::Independent => "independent",
            CorrectionMode::ContextOnly => "context-only",
            CorrectionMode::Lvsc => "lvsc",
            CorrectionMode::LvscMc => "lvsc-mc",
            CorrectionMode::LvscMcLiteral => "lvsc-mc-literal",
        }
    }
}

fn check_split(eps_raw: &VideoLatent, eps_ref_closed: &VideoLatent, n: usize) -> Result<usize> {
    let (dr, dc) = (eps_raw.dims(), eps_ref_closed.dims());
    if dc.f != n || dr.f <= n {
        return Err(Error::Shape(format!(
            "correction expects {n} reference frames and at least one new frame, got raw {dr} and references {dc}"
        )));
    }
    if (dr.b, dr.c, dr.h, dr.w) != (dc.b, dc.c, dc.h, dc.w) {
        return Err(Error::Shape(format!("correction: raw {dr} vs references {dc}")));
    }
    Ok(dr.f - n)
}

/// Per-reference residual planes `closed[i] − raw[i]`, rounded to `f32`,
/// indexed `[(b·c + c)·N + i]`.
fn residual_planes(eps_raw: &VideoLatent, eps_ref_closed: &VideoLatent, n: usize) -> Vec<Vec<f32>> {
    let d = eps_raw.dims();
    let plane = d.pixels();
    let mut out = Vec::with_capacity(d.b * d.c * n);
    for b in 0..d.b {
        for c in 0..d.c {
            for i in 0..n {
                let r0 = eps_raw.offset(b, c, i, 0, 0);
                let c0 = eps_ref_closed.offset(b, c, i, 0, 0);
                out.push(
                    (0..plane)
                        .map(|p| (eps_ref_closed.data()[c0 + p] as f64 - eps_raw.data()[r0 + p] as f64) as f32)
                        .collect(),
                );
            }
        }
    }
    out
}

/// Shared implementation: `out[m] = base[m] + (1/N)·Σᵢ warp(term_i, flow i→m)`.
fn apply_correction(
    eps_raw: &VideoLatent,
    terms: &[Vec<f32>],
    n: usize,
    flows: Option<&[Vec<FlowField>]>,
    keep_base: bool,
) -> Result<VideoLatent> {
    let d = eps_raw.dims();
    let m_sub = d.f - n;
    let plane = d.pixels();
    let mut out = vec![0.0f32; d.b * d.c * m_sub * plane];
    let mut acc = vec![0.0f64; plane];
    for b in 0..d.b {
        for c in 0..d.c {
            for m in 0..m_sub {
                acc.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..n {
                    let term = &terms[(b * d.c + c) * n + i];
                    match flows {
                        Some(fl) => {
                            let warped = warp_plane(term, d.h, d.w, &fl[i][m])?;
                            acc.iter_mut().zip(&warped).for_each(|(a, &v)| *a += v as f64);
                        }
                        None => acc.iter_mut().zip(term).for_each(|(a, &v)| *a += v as f64),
                    }
                }
                let src = eps_raw.offset(b, c, n + m, 0, 0);
                let dst = ((b * d.c + c) * m_sub + m) * plane;
                for p in 0..plane {
                    let base = if keep_base { eps_raw.data()[src + p] as f64 } else { 0.0 };
                    out[dst + p] = (base + acc[p] / n as f64) as f32;
                }
            }
        }
    }
    VideoLatent::new(d.with_f(m_sub), out).map_err(|_| Error::NonFinite("score correction"))
}

/// Adds the mean reference residual to the prediction on the new frames.
/// `eps_raw` covers `[references ‖ new]`; the result covers the new frames.
pub fn lvsc_correct(eps_raw: &VideoLatent, eps_ref_closed: &VideoLatent, n: usize) -> Result<VideoLatent> {
    check_split(eps_raw, eps_ref_closed, n)?;
    let terms = residual_planes(eps_raw, eps_ref_closed, n);
    apply_correction(eps_raw, &terms, n, None, true)
}

fn check_flows(flows: &[Vec<FlowField>], n: usize, m_sub: usize, h: usize, w: usize) -> Result<()> {
    if flows.len() != n || flows.iter().any(|row| row.len() != m_sub) {
        return Err(Error::Shape(format!("expected {n}×{m_sub} flow fields")));
    }
    if flows.iter().flatten().any(|f| (f.h, f.w) != (h, w)) {
        return Err(Error::Shape(format!("flow grids must be {h}x{w}")));
    }
    Ok(())
}

/// Motion-compensated correction: residual of reference `i` is warped with
/// `flows[i][m]` (sampling reference `i` at `x + flow` lands on the content of
/// new frame `m` at `x`) before averaging.
pub fn mc_lvsc_correct(
    eps_raw: &VideoLatent,
    eps_ref_closed: &VideoLatent,
    flows: &[Vec<FlowField>],
    n: usize,
) -> Result<VideoLatent> {
    let m_sub = check_split(eps_raw, eps_ref_closed, n)?;
    let d = eps_raw.dims();
    check_flows(flows, n, m_sub, d.h, d.w)?;
    let terms = residual_planes(eps_raw, eps_ref_closed, n);
    apply_correction(eps_raw, &terms, n, Some(flows), true)
}

/// Diagnostic variant: the new-frame prediction is replaced by the averaged
/// warped closed-form reference noise, without the residual structure.
pub fn mc_lvsc_literal(
    eps_raw: &VideoLatent,
    eps_ref_closed: &VideoLatent,
    flows: &[Vec<FlowField>],
    n: usize,
) -> Result<VideoLatent> {
    let m_sub = check_split(eps_raw, eps_ref_closed, n)?;
    let d = eps_raw.dims();
    check_flows(flows, n, m_sub, d.h, d.w)?;
    let mut terms = Vec::with_capacity(d.b * d.c * n);
    for b in 0..d.b {
        for c in 0..d.c {
            for i in 0..n {
                let s = eps_ref_closed.offset(b, c, i, 0, 0);
                terms.push(eps_ref_closed.data()[s..s + d.pixels()].to_vec());
            }
        }
    }
    apply_correction(eps_raw, &terms, n, Some(flows), false)
}

/// Flow from every reference frame to every new frame of a batch, estimated
/// on the conditioning video (batch entry 0): `flows[i][m] = estimate_flow(new m, ref i)`.
pub fn reference_flows(video: &VideoLatent, segment: &Segment, cfg: &FlowConfig) -> Result<Vec<Vec<FlowField>>> {
    let refs = segment.references.clone().ok_or_else(|| Error::Plan("first batch has no references".into()))?;
    refs.map(|i| {
        let bi = video.frame(0, i);
        segment.new.clone().map(|m| estimate_flow(&video.frame(0, m), &bi, cfg)).collect()
    })
    .collect()
}

/// Events emitted while sampling a long video, in execution order.
#[derive(Debug)]
pub enum LongVideoEvent<'a> {
    BatchStart {
        segment: &'a Segment,
        z_ref: Option<&'a VideoLatent>,
    },
    Flows {
        batch: usize,
        flows: &'a [Vec<FlowField>],
    },
    /// Guided prediction on the whole batch is available.
    Predicted {
        batch: usize,
        step: usize,
        t: usize,
    },
    /// The correction has been applied; `mean_abs` is the mean absolute change.
    Corrected {
        batch: usize,
        step: usize,
        t: usize,
        mean_abs: f64,
    },
    Stepped {
        batch: usize,
        step: usize,
        t: usize,
        t_prev: Option<usize>,
    },
    BatchDone {
        batch: usize,
        new: Range<usize>,
    },
}

pub trait LongVideoObserver {
    fn on_event(&mut self, event: &LongVideoEvent<'_>);
}

impl<F: FnMut(&LongVideoEvent<'_>)> LongVideoObserver for F {
    fn on_event(&mut self, event: &LongVideoEvent<'_>) {
        self(event)
    }
}

pub struct NoObserver;

impl LongVideoObserver for NoObserver {
    fn on_event(&mut self, _: &LongVideoEvent<'_>) {}
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LongVideoSettings {
    pub plan: LongVideoPlan,
    pub mode: CorrectionMode,
    pub flow: FlowConfig,
}

/// Stream of the initial noise of batch `k ≥ 1`; batch 0 uses stream 0 so a
/// single-batch run matches plain sampling.
fn init_stream(k: usize) -> u64 {
    2 * k as u64
}

fn renoise_stream(k: usize) -> u64 {
    2 * k as u64 + 1
}

/// Samples a long video batch by batch. `cond_full` carries the video
/// condition for all frames; each batch sees the slice matching its span.
#[allow(clippy::too_many_arguments)]
pub fn sample_long_video<D: Denoiser + ?Sized>(
    den: &D,
    s: &NoiseSchedule,
    cond_full: &ConditionPair,
    g: GuidanceConfig,
    plan: &TimestepPlan,
    settings: &LongVideoSettings,
    seed: u64,
    observer: &mut dyn LongVideoObserver,
) -> Result<VideoLatent> {
    let (cv, _) = cond_full.require_full()?;
    let lp = settings.plan;
    let d = cv.dims();
    if d.f != lp.total_frames {
        return Err(Error::Plan(format!(
            "video condition has {} frames but the plan expects {}",
            d.f, lp.total_frames
        )));
    }
    if settings.mode.uses_flow() && d.b != 1 {
        return Err(Error::Plan("motion compensation supports a single batch entry".into()));
    }
    plan.validate_for(s)?;
    let n = lp.reference_frames;
    let mut emitted: Vec<VideoLatent> = Vec::new();
    let mut output: Option<VideoLatent> = None;

    for seg in lp.segments() {
        let k = seg.index;
        let independent = seg.references.is_none() || settings.mode == CorrectionMode::Independent;
        if independent {
            observer.on_event(&LongVideoEvent::BatchStart { segment: &seg, z_ref: None });
            let cond = ConditionPair::new(Some(cv.slice_frames(seg.new.clone())?), cond_full.text.clone());
            let dims = d.with_f(seg.new.len());
            let mut z =
                if k == 0 { SeededRng::new(seed) } else { SeededRng::with_stream(seed, init_stream(k)) }.gaussian(dims);
            for (step, t, t_prev) in plan.steps() {
                let eps = cfg_predict(den, &z, t, &cond, g)?;
                observer.on_event(&LongVideoEvent::Predicted { batch: k, step, t });
                z = ddim_step(&z, &eps, t, t_prev, s)?;
                observer.on_event(&LongVideoEvent::Stepped { batch: k, step, t, t_prev });
            }
            emitted.push(z);
        } else {
            let refs = seg.references.clone().expect("later batches carry references");
            let so_far = output.as_ref().expect("first batch precedes references");
            let window = ReferenceWindow::new(so_far.slice_frames(refs.clone())?, lp.batch_frames)?;
            let z_ref = &window.z_ref;
            observer.on_event(&LongVideoEvent::BatchStart { segment: &seg, z_ref: Some(z_ref) });
            let cond = ConditionPair::new(Some(cv.slice_frames(seg.span())?), cond_full.text.clone());
            let flows = if settings.mode.uses_flow() {
                let fl = reference_flows(cv, &seg, &settings.flow)?;
                observer.on_event(&LongVideoEvent::Flows { batch: k, flows: &fl });
                Some(fl)
            } else {
                None
            };
            let mut z = SeededRng::with_stream(seed, init_stream(k)).gaussian(d.with_f(seg.new.len()));
            let mut renoise = SeededRng::with_stream(seed, renoise_stream(k));
            for (step, t, t_prev) in plan.steps() {
                let noise = renoise.gaussian(z_ref.dims());
                let z_t_ref = forward_diffuse(z_ref, &noise, t, s)?;
                let eps_ref = infer_reference_noise(&z_t_ref, z_ref, t, s)?;
                let batch = VideoLatent::concat_frames(&[&z_t_ref, &z])?;
                let eps = cfg_predict(den, &batch, t, &cond, g)?;
                observer.on_event(&LongVideoEvent::Predicted { batch: k, step, t });
                let raw_new = eps.slice_frames(n..eps.dims().f)?;
                let corrected = match settings.mode {
                    CorrectionMode::ContextOnly => raw_new.clone(),
                    CorrectionMode::Lvsc => lvsc_correct(&eps, &eps_ref, n)?,
                    CorrectionMode::LvscMc => mc_lvsc_correct(&eps, &eps_ref, flows.as_deref().unwrap(), n)?,
                    CorrectionMode::LvscMcLiteral => mc_lvsc_literal(&eps, &eps_ref, flows.as_deref().unwrap(), n)?,
                    CorrectionMode::Independent => unreachable!("handled above"),
                };
                let mean_abs =
                    corrected.data().iter().zip(raw_new.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
                        / corrected.len() as f64;
                observer.on_event(&LongVideoEvent::Corrected { batch: k, step, t, mean_abs });
                z = ddim_step(&z, &corrected, t, t_prev, s)?;
                observer.on_event(&LongVideoEvent::Stepped { batch: k, step, t, t_prev });
            }
            emitted.push(z);
        }
        observer.on_event(&LongVideoEvent::BatchDone { batch: k, new: seg.new.clone() });
        let parts: Vec<&VideoLatent> = emitted.iter().collect();
        output = Some(VideoLatent::concat_frames(&parts)?);
    }
    let out = output.expect("plans have at least one segment");
    debug_assert_eq!(out.dims().f, lp.total_frames);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    fn rand(d: Dims, seed: u64) -> VideoLatent {
        SeededRng::new(seed).gaussian(d)
    }

    #[test]
    fn segmentation_matches_reference_layout() {
        let p = LongVideoPlan::new(32, 16, 4).unwrap();
        let segs = p.segments();
        let news: Vec<usize> = segs.iter().map(|s| s.new.len()).collect();
        assert_eq!(news, vec![16, 12, 4]);
        assert_eq!(segs[1].references, Some(12..16));
        assert_eq!(segs[1].new, 16..28);
        assert_eq!(segs[2].references, Some(24..28));
        assert_eq!(p.boundaries(), vec![(15, 16), (27, 28)]);
        assert_eq!(LongVideoPlan::new(16, 16, 4).unwrap().segments().len(), 1);
        assert!(LongVideoPlan::new(32, 16, 16).is_err());
        assert!(LongVideoPlan::new(32, 16, 0).is_err());
    }

    #[test]
    fn segments_cover_every_frame_once() {
        for total in 1..60 {
            for f in 2..10 {
                for n in 1..f {
                    let segs = LongVideoPlan::new(total, f, n).unwrap().segments();
                    let covered: Vec<usize> = segs.iter().flat_map(|s| s.new.clone()).collect();
                    assert_eq!(covered, (0..total).collect::<Vec<_>>());
                }
            }
        }
    }

    #[test]
    fn zero_residual_leaves_prediction_unchanged() {
        let raw = rand(Dims::new(1, 3, 6, 4, 4), 1);
        let closed = raw.slice_frames(0..2).unwrap();
        let out = lvsc_correct(&raw, &closed, 2).unwrap();
        assert_eq!(out, raw.slice_frames(2..6).unwrap());
    }

    #[test]
    fn constant_residual_shifts_every_new_frame() {
        let raw = rand(Dims::new(1, 2, 4, 3, 3), 2);
        let kappa = 0.25f32;
        let closed = raw.slice_frames(0..1).unwrap().map(|v| v + kappa);
        let out = lvsc_correct(&raw, &closed, 1).unwrap();
        let want = raw.slice_frames(1..4).unwrap();
        assert!(out.zip_map(&want, |a, b| a - b).unwrap().data().iter().all(|&d| (d - kappa).abs() < 1e-6));
    }

    #[test]
    fn two_references_are_averaged() {
        let d = Dims::new(1, 1, 3, 2, 2);
        let raw = rand(d, 3);
        let r = [rand(d.with_f(1), 4), rand(d.with_f(1), 5)];
        let closed = VideoLatent::concat_frames(&[
            &raw.slice_frames(0..1).unwrap().zip_map(&r[0], |a, b| a + b).unwrap(),
            &raw.slice_frames(1..2).unwrap().zip_map(&r[1], |a, b| a + b).unwrap(),
        ])
        .unwrap();
        let out = lvsc_correct(&raw, &closed, 2).unwrap();
        for p in 0..4 {
            let shift = (r[0].data()[p] + r[1].data()[p]) / 2.0;
            assert!((out.data()[p] - raw.data()[8 + p] - shift).abs() < 1e-6);
        }
    }

    #[test]
    fn reference_count_mismatch_rejected() {
        let raw = rand(Dims::new(1, 1, 4, 2, 2), 6);
        let closed = raw.slice_frames(0..2).unwrap();
        assert!(lvsc_correct(&raw, &closed, 3).is_err());
    }

    #[test]
    fn zero_flow_motion_compensation_equals_plain() {
        let d = Dims::new(2, 3, 7, 5, 6);
        let raw = rand(d, 7);
        let closed = rand(d.with_f(3), 8);
        let flows = vec![vec![FlowField::zeros(5, 6); 4]; 3];
        assert_eq!(mc_lvsc_correct(&raw, &closed, &flows, 3).unwrap(), lvsc_correct(&raw, &closed, 3).unwrap());
        let bad = vec![vec![FlowField::zeros(5, 5); 4]; 3];
        assert!(mc_lvsc_correct(&raw, &closed, &bad, 3).is_err());
    }

    #[test]
    fn constant_residual_is_warp_invariant() {
        let d = Dims::new(1, 1, 3, 6, 6);
        let raw = rand(d, 9);
        let closed = raw.slice_frames(0..1).unwrap().map(|v| v - 0.5);
        let flows = vec![vec![FlowField::constant(6, 6, 1.5, -2.0); 2]];
        let mc = mc_lvsc_correct(&raw, &closed, &flows, 1).unwrap();
        assert!(mc.max_abs_diff(&lvsc_correct(&raw, &closed, 1).unwrap()) < 1e-6);
    }

    #[test]
    fn translated_residual_aligns_with_shifted_truth() {
        // residual on the reference is a smooth pattern; new frame m sees it
        // translated by (m + 1) pixels to the right
        let (h, w) = (16, 16);
        let pattern = |y: f32, x: f32| (0.4 * x).sin() + (0.3 * y).cos();
        let d = Dims::new(1, 1, 4, h, w);
        let raw = VideoLatent::zeros(d);
        let closed = VideoLatent::from_fn(d.with_f(1), |_, _, _, y, x| pattern(y as f32, x as f32));
        let flows = vec![(0..3).map(|m| FlowField::constant(h, w, -(m as f32 + 1.0), 0.0)).collect()];
        let out = mc_lvsc_correct(&raw, &closed, &flows, 1).unwrap();
        for m in 0..3 {
            for y in 0..h {
                for x in 4..w {
                    let want = pattern(y as f32, x as f32 - (m as f32 + 1.0));
                    assert!((out.get(0, 0, m, y, x) - want).abs() < 1e-3);
                }
            }
        }
    }
}
