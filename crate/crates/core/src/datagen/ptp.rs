//! Paired generation by attention record/inject.
//!
//! Two sampling passes run in lockstep from the same initial noise: the
//! first from the input prompt, the second from the edited prompt. At every
//! denoiser call the first pass records its post-softmax attention; the
//! second pass then overwrites its own with the recording — self-attention
//! and temporal attention wholesale while the step index is below
//! `self_cutoff · steps`, cross-attention for the tokens the two prompts
//! share while below `cross_cutoff · steps`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionControl, AttentionKind, AttentionProbs, AttentionSite, ConditionPair, Denoiser};
use crate::error::{Error, Result};
use crate::guidance::{combine_guidance, GuidanceConfig};
use crate::rng::SeededRng;
use crate::schedule::{ddim_step, NoiseSchedule, TimestepPlan};
use crate::tensor::{Dims, VideoLatent};
use crate::text::PromptEmbedding;

use super::catalog::PromptTriplet;

/// How shared-token cross-attention is carried into the edited pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossInjection {
    /// Copy the recorded probability columns of tokens both prompts share;
    /// the edited pass's other columns share the remaining mass.
    #[default]
    SharedRows,
    /// Copy whole recorded rows position by position, so the edited
    /// prompt's token embeddings are read through the input prompt's
    /// attention map. Needs prompts of equal token count.
    EmbeddingSwap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PtpSettings {
    pub self_cutoff: f64,
    pub cross_cutoff: f64,
    pub cfg_scale: f32,
    #[serde(default)]
    pub cross_injection: CrossInjection,
}

impl PtpSettings {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("self_cutoff", self.self_cutoff), ("cross_cutoff", self.cross_cutoff)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Param(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(self.cfg_scale.is_finite() && self.cfg_scale >= 1.0) {
            return Err(Error::Param(format!("cfg_scale {} must be ≥ 1", self.cfg_scale)));
        }
        Ok(())
    }
}

/// One randomized generation recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationDraw {
    pub self_cutoff: f64,
    pub cross_cutoff: f64,
    pub cfg_scale: u32,
    pub steps: usize,
}

impl GenerationDraw {
    pub fn settings(&self) -> PtpSettings {
        PtpSettings {
            self_cutoff: self.self_cutoff,
            cross_cutoff: self.cross_cutoff,
            cfg_scale: self.cfg_scale as f32,
            cross_injection: CrossInjection::SharedRows,
        }
    }
}

pub const GENERATION_STEPS: usize = 30;

/// Self/temporal cutoff ~ U[0.3, 0.45], cross cutoff ~ U[0.6, 0.85],
/// guidance scale uniform over the integers 5..=12, 30 steps.
pub fn sample_generation_config(rng: &mut SeededRng) -> GenerationDraw {
    GenerationDraw {
        self_cutoff: rng.uniform_range(0.3, 0.45),
        cross_cutoff: rng.uniform_range(0.6, 0.85),
        cfg_scale: rng.int_inclusive(5, 12) as u32,
        steps: GENERATION_STEPS,
    }
}

/// For each token of `edited`, the index of the matching token of `input`:
/// the common prefix first, then greedy in-order exact matches.
pub fn align_tokens(input: &[String], edited: &[String]) -> Vec<Option<usize>> {
    let prefix = input.iter().zip(edited).take_while(|(a, b)| a == b).count();
    let mut out: Vec<Option<usize>> = (0..edited.len()).map(|j| (j < prefix).then_some(j)).collect();
    let mut next = prefix;
    for (j, tok) in edited.iter().enumerate().skip(prefix) {
        if let Some(off) = input[next.min(input.len())..].iter().position(|t| t == tok) {
            out[j] = Some(next + off);
            next += off + 1;
        }
    }
    out
}

/// Column map from the edited pass's cross-attention to the recorded one.
/// Columns past the prompt (model-intrinsic keys) always correspond.
fn column_map(align: &[Option<usize>], in_len: usize, cols: usize, rec_cols: usize) -> Result<Vec<Option<usize>>> {
    let extra =
        cols.checked_sub(align.len()).ok_or_else(|| Error::Trace("cross-attention narrower than the prompt".into()))?;
    if rec_cols.checked_sub(in_len) != Some(extra) {
        return Err(Error::Trace(format!(
            "recorded cross-attention has {rec_cols} columns for {in_len} tokens; edited pass has {cols} for {}",
            align.len()
        )));
    }
    Ok(align.iter().cloned().chain((0..extra).map(|k| Some(in_len + k))).collect())
}

/// Captures every attention call of one denoiser evaluation.
#[derive(Debug, Default)]
pub struct Recorder {
    pub records: BTreeMap<AttentionSite, AttentionProbs>,
    /// Largest row-sum deviation seen.
    pub max_row_error: f64,
}

impl AttentionControl for Recorder {
    fn on_attention(&mut self, site: AttentionSite, probs: &mut AttentionProbs) -> Result<()> {
        self.max_row_error = self.max_row_error.max(probs.max_row_error());
        if self.records.insert(site, probs.clone()).is_some() {
            return Err(Error::Trace(format!("attention site {site:?} fired twice in one call")));
        }
        Ok(())
    }
}

/// Overwrites attention with a [`Recorder`]'s captures.
pub struct Injector<'a> {
    pub records: &'a BTreeMap<AttentionSite, AttentionProbs>,
    pub inject_self: bool,
    pub inject_cross: bool,
    pub mode: CrossInjection,
    /// Token alignment of the edited prompt against the input prompt.
    pub align: &'a [Option<usize>],
    pub input_len: usize,
}

impl AttentionControl for Injector<'_> {
    fn on_attention(&mut self, site: AttentionSite, probs: &mut AttentionProbs) -> Result<()> {
        let wanted = match site.kind {
            AttentionKind::Spatial | AttentionKind::Temporal => self.inject_self,
            AttentionKind::Cross => self.inject_cross,
        };
        if !wanted {
            return Ok(());
        }
        let rec = self.records.get(&site).ok_or_else(|| Error::Trace(format!("no recording for {site:?}")))?;
        if (rec.mats, rec.rows) != (probs.mats, probs.rows) {
            return Err(Error::Trace(format!(
                "{site:?}: recorded {}x{} matrices, edited pass has {}x{}",
                rec.mats, rec.rows, probs.mats, probs.rows
            )));
        }
        match site.kind {
            AttentionKind::Spatial | AttentionKind::Temporal => {
                if rec.cols != probs.cols {
                    return Err(Error::Trace(format!("{site:?}: column count changed between passes")));
                }
                probs.data.copy_from_slice(&rec.data);
            }
            AttentionKind::Cross => match self.mode {
                CrossInjection::EmbeddingSwap => {
                    if rec.cols != probs.cols {
                        return Err(Error::Trace("embedding swap needs prompts with equal token counts".into()));
                    }
                    probs.data.copy_from_slice(&rec.data);
                }
                CrossInjection::SharedRows => {
                    let map = column_map(self.align, self.input_len, probs.cols, rec.cols)?;
                    inject_shared(probs, rec, &map);
                }
            },
        }
        Ok(())
    }
}

fn inject_shared(probs: &mut AttentionProbs, rec: &AttentionProbs, map: &[Option<usize>]) {
    let all_shared = map.iter().all(Option::is_some);
    for (dst, src) in probs.data.chunks_mut(probs.cols).zip(rec.data.chunks(rec.cols)) {
        if all_shared {
            for (d, m) in dst.iter_mut().zip(map) {
                *d = src[m.unwrap()];
            }
            continue;
        }
        let shared: f64 = map.iter().flatten().map(|&i| src[i] as f64).sum();
        let own_rest: f64 = dst.iter().zip(map).filter(|(_, m)| m.is_none()).map(|(&v, _)| v as f64).sum();
        let rest = (1.0 - shared).max(0.0);
        for (d, m) in dst.iter_mut().zip(map) {
            *d = match m {
                Some(i) => src[*i],
                None if own_rest > 0.0 => (*d as f64 * rest / own_rest) as f32,
                None => 0.0,
            };
        }
        if own_rest <= 0.0 && shared > 0.0 {
            dst.iter_mut().for_each(|v| *v = (*v as f64 / shared) as f32);
        }
    }
}

/// Output of [`ptp_generate_pair`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPair {
    pub input: VideoLatent,
    pub edited: VideoLatent,
    /// Attention matrices recorded over the whole run.
    pub recorded_matrices: usize,
    /// Largest deviation of a recorded row sum from 1.
    pub max_row_error: f64,
}

/// Samples the input and edited videos in lockstep with attention injection.
/// Text-only guidance `ε(∅) + s·(ε(c_T) − ε(∅))` is applied in both passes;
/// outputs are clamped to `[0, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn ptp_generate_pair<D: Denoiser + ?Sized>(
    den: &D,
    s: &NoiseSchedule,
    triplet: &PromptTriplet,
    dims: Dims,
    seed: u64,
    settings: &PtpSettings,
    plan: &TimestepPlan,
) -> Result<GeneratedPair> {
    settings.validate()?;
    plan.validate_for(s)?;
    let emb_in = PromptEmbedding::encode(&triplet.input);
    let emb_ed = PromptEmbedding::encode(&triplet.edited);
    let align = align_tokens(emb_in.tokens(), emb_ed.tokens());
    let null = PromptEmbedding::empty();
    let null_align: Vec<Option<usize>> = (0..null.len()).map(Some).collect();
    let cond_in = ConditionPair::new(None, Some(emb_in.clone()));
    let cond_ed = ConditionPair::new(None, Some(emb_ed));
    let uncond = ConditionPair::new(None, Some(null.clone()));

    let z0 = SeededRng::new(seed).gaussian(dims);
    let (mut z1, mut z2) = (z0.clone(), z0);
    let steps = plan.len() as f64;
    let (mut recorded, mut max_err) = (0usize, 0.0f64);
    for (k, t, t_prev) in plan.steps() {
        let inject_self = (k as f64) < settings.self_cutoff * steps;
        let inject_cross = (k as f64) < settings.cross_cutoff * steps;
        let mut eval = |c1: &ConditionPair, c2: &ConditionPair, align: &[Option<usize>], in_len: usize| -> Result<_> {
            let mut rec = Recorder::default();
            let e1 = den.predict_controlled(&z1, t, c1, &mut rec)?;
            recorded += rec.records.len();
            max_err = max_err.max(rec.max_row_error);
            let mut inj = Injector {
                records: &rec.records,
                inject_self,
                inject_cross,
                mode: settings.cross_injection,
                align,
                input_len: in_len,
            };
            let e2 = den.predict_controlled(&z2, t, c2, &mut inj)?;
            Ok((e1, e2))
        };
        let (u1, u2) = eval(&uncond, &uncond, &null_align, null.len())?;
        let (c1, c2) = eval(&cond_in, &cond_ed, &align, emb_in.len())?;
        let g = GuidanceConfig { s_v: 1.0, s_t: settings.cfg_scale };
        let e1 = combine_guidance(&u1, &u1, &c1, g)?;
        let e2 = combine_guidance(&u2, &u2, &c2, g)?;
        z1 = ddim_step(&z1, &e1, t, t_prev, s)?;
        z2 = ddim_step(&z2, &e2, t, t_prev, s)?;
    }
    Ok(GeneratedPair {
        input: z1.clamp(0.0, 1.0),
        edited: z2.clamp(0.0, 1.0),
        recorded_matrices: recorded,
        max_row_error: max_err,
    })
}

/// Mean over frames of the per-frame mean squared difference.
pub fn paired_mse(a: &VideoLatent, b: &VideoLatent) -> Result<f64> {
    a.check_same_dims(b, "paired videos")?;
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::backbone::{BackboneConfig, PaletteBackbone};
    use crate::datagen::catalog::geometry_for;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn alignment_uses_prefix_then_exact_matches() {
        let a = align_tokens(&toks("<bos> red circle blue background"), &toks("<bos> green circle blue background"));
        assert_eq!(a, vec![Some(0), None, Some(2), Some(3), Some(4)]);
        let a =
            align_tokens(&toks("<bos> red circle blue background"), &toks("<bos> red square striped blue background"));
        assert_eq!(a, vec![Some(0), Some(1), None, None, Some(3), Some(4)]);
        let a = align_tokens(&toks("<bos> x y"), &toks("<bos> x y"));
        assert_eq!(a, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn shared_injection_keeps_rows_stochastic() {
        let rec = AttentionProbs { mats: 1, rows: 2, cols: 4, data: vec![0.1, 0.6, 0.2, 0.1, 0.25, 0.25, 0.25, 0.25] };
        let mut own = AttentionProbs { mats: 1, rows: 2, cols: 4, data: vec![0.1, 0.1, 0.4, 0.4, 0.7, 0.1, 0.1, 0.1] };
        inject_shared(&mut own, &rec, &[Some(0), None, Some(2), Some(3)]);
        assert!(own.max_row_error() < 1e-6);
        assert!((own.data[1] - 0.6).abs() < 1e-6);
        assert!((own.data[0] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn generation_draws_stay_in_range() {
        let mut rng = SeededRng::new(0);
        for _ in 0..10_000 {
            let d = sample_generation_config(&mut rng);
            assert!((0.3..=0.45).contains(&d.self_cutoff));
            assert!((0.6..=0.85).contains(&d.cross_cutoff));
            assert!((5..=12).contains(&d.cfg_scale));
            assert_eq!(d.steps, 30);
        }
    }

    #[test]
    fn cfg_scale_frequencies_are_uniform() {
        let mut rng = SeededRng::new(1);
        let n = 100_000;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            counts[(sample_generation_config(&mut rng).cfg_scale - 5) as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.125).abs() < 0.02);
        }
    }

    fn setup(triplet: &PromptTriplet) -> (PaletteBackbone, Dims) {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let geom = geometry_for(&triplet.input, 4, 12, 12);
        (PaletteBackbone::new(geom, BackboneConfig::default(), s), Dims::new(1, 3, 4, 12, 12))
    }

    #[test]
    fn identical_prompts_give_identical_videos() {
        let t = PromptTriplet::new(
            "a red circle on a blue background",
            "keep it unchanged",
            "a red circle on a blue background",
        )
        .unwrap();
        let (bb, dims) = setup(&t);
        let plan = TimestepPlan::uniform(10, 1000).unwrap();
        for (sc, cc) in [(0.0, 0.0), (0.4, 0.7), (1.0, 1.0)] {
            let st = PtpSettings {
                self_cutoff: sc,
                cross_cutoff: cc,
                cfg_scale: 7.0,
                cross_injection: CrossInjection::SharedRows,
            };
            let out = ptp_generate_pair(&bb, bb.schedule(), &t, dims, 5, &st, &plan).unwrap();
            assert_eq!(out.input, out.edited);
            assert!(out.max_row_error < 1e-5);
        }
    }

    #[test]
    fn embedding_swap_requires_equal_lengths() {
        let t = PromptTriplet::new(
            "a red circle on a blue background",
            "make it striped",
            "a red circle on a striped blue background",
        )
        .unwrap();
        let (bb, dims) = setup(&t);
        let plan = TimestepPlan::uniform(3, 1000).unwrap();
        let st = PtpSettings {
            self_cutoff: 0.3,
            cross_cutoff: 1.0,
            cfg_scale: 5.0,
            cross_injection: CrossInjection::EmbeddingSwap,
        };
        assert!(matches!(ptp_generate_pair(&bb, bb.schedule(), &t, dims, 1, &st, &plan), Err(Error::Trace(_))));
    }

    #[test]
    fn cross_injection_transfers_the_edited_color() {
        let t = PromptTriplet::new(
            "a red circle on a blue background",
            "make the circle green",
            "a green circle on a blue background",
        )
        .unwrap();
        let (bb, dims) = setup(&t);
        let plan = TimestepPlan::uniform(30, 1000).unwrap();
        let st = PtpSettings {
            self_cutoff: 0.4,
            cross_cutoff: 0.8,
            cfg_scale: 7.5,
            cross_injection: CrossInjection::SharedRows,
        };
        let out = ptp_generate_pair(&bb, bb.schedule(), &t, dims, 2, &st, &plan).unwrap();
        let (cy, cx) = bb.geometry.center(0, 12, 12);
        let (y, x) = (cy as usize, cx as usize);
        let green = crate::palette::Color::Green.rgb();
        let red = crate::palette::Color::Red.rgb();
        for c in 0..3 {
            assert!((out.edited.get(0, c, 0, y, x) - green[c]).abs() < 0.15, "edited object pixel");
            assert!((out.input.get(0, c, 0, y, x) - red[c]).abs() < 0.15, "input object pixel");
        }
    }
}
