//! A toy text-to-video denoiser for paired-data generation.
//!
//! The model estimates the clean video in three attention stages, each
//! exposed to [`AttentionControl`] hooks:
//!
//! 1. spatial self-attention: a bilateral filter over a window, smoothing a
//!    Gaussian posterior estimate of the clean frame;
//! 2. cross-attention: each pixel attends over the prompt tokens and eight
//!    palette "memory" tokens; color tokens carry their RGB value in the
//!    embedding, and a prompt-derived scene layout biases pixels inside the
//!    named shape toward the object color and the rest toward the
//!    background color; the pixel's estimate becomes the attended color;
//! 3. temporal attention: each pixel's colors are smoothed across frames
//!    with content-similarity weights.
//!
//! The noise prediction is whatever maps `z_t` onto that estimate.

use serde::{Deserialize, Serialize};

use super::catalog::PromptScene;
use super::world::{scene_layout, SceneSpec, Texture};
use crate::denoiser::nn::Window;
use crate::denoiser::{
    AttentionControl, AttentionKind, AttentionProbs, AttentionSite, ConditionPair, Denoiser, NoControl,
};
use crate::error::{Error, Result};
use crate::palette::Color;
use crate::schedule::NoiseSchedule;
use crate::tensor::VideoLatent;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub prior_mean: f32,
    pub prior_std: f32,
    pub window: usize,
    /// Spatial length scale of the bilateral weights, in pixels.
    pub spatial_length: f32,
    /// Base width of the color-matching kernel.
    pub color_width: f32,
    /// Logit bonus for the color word bound to a pixel's region.
    pub bind_bonus: f32,
    /// Logit penalty for color words bound to no region.
    pub unbound_penalty: f32,
    pub memory_prior: f32,
    pub temporal_length: f32,
    pub temporal_width: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            prior_mean: 0.5,
            prior_std: 0.3,
            window: 2,
            spatial_length: 1.5,
            color_width: 0.08,
            bind_bonus: 4.0,
            unbound_penalty: 1.5,
            memory_prior: -3.0,
            temporal_length: 2.0,
            temporal_width: 0.15,
        }
    }
}

/// Number of palette memory columns appended after the prompt tokens.
pub const MEMORY_TOKENS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Object,
    Background,
    Unbound,
    NotColor,
}

#[derive(Debug, Clone)]
pub struct PaletteBackbone {
    /// Object placement and motion; shape, colors and texture come from the prompt.
    pub geometry: SceneSpec,
    pub cfg: BackboneConfig,
    schedule: NoiseSchedule,
}

impl PaletteBackbone {
    pub fn new(geometry: SceneSpec, cfg: BackboneConfig, schedule: NoiseSchedule) -> Self {
        Self { geometry, cfg, schedule }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

fn sqdist(a: [f32; 3], b: [f32; 3]) -> f64 {
    (0..3).map(|c| (a[c] as f64 - b[c] as f64).powi(2)).sum()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = if v.is_finite() { (*v - max).exp() } else { 0.0 };
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn site(kind: AttentionKind) -> AttentionSite {
    AttentionSite { kind, layer: 0 }
}

fn run_hook(control: &mut dyn AttentionControl, kind: AttentionKind, probs: &mut AttentionProbs) -> Result<()> {
    let shape = (probs.mats, probs.rows, probs.cols, probs.data.len());
    control.on_attention(site(kind), probs)?;
    if (probs.mats, probs.rows, probs.cols, probs.data.len()) != shape {
        return Err(Error::Trace(format!("attention control reshaped {kind:?} probabilities")));
    }
    Ok(())
}

impl Denoiser for PaletteBackbone {
    fn predict(&self, z_t: &VideoLatent, t: usize, cond: &ConditionPair) -> Result<VideoLatent> {
        self.predict_controlled(z_t, t, cond, &mut NoControl)
    }

    fn predict_controlled(
        &self,
        z_t: &VideoLatent,
        t: usize,
        cond: &ConditionPair,
        control: &mut dyn AttentionControl,
    ) -> Result<VideoLatent> {
        let d = z_t.dims();
        if d.c != 3 {
            return Err(Error::Shape(format!("palette backbone generates RGB video, got {d}")));
        }
        if t >= self.schedule.len() {
            return Err(Error::Param(format!("timestep {t} outside the schedule")));
        }
        let cfg = &self.cfg;
        let text = cond.text_or_empty();
        let words = text.words();
        let scene = PromptScene::parse(words);
        let obj_word = PromptScene::object_color_index(words).map(|i| i + 1);
        let bg_word = PromptScene::background_color_index(words).map(|i| i + 1);
        let roles: Vec<Role> = (0..text.len())
            .map(|j| match text.color_of(j) {
                None => Role::NotColor,
                Some(_) if Some(j) == obj_word => Role::Object,
                Some(_) if Some(j) == bg_word => Role::Background,
                Some(_) => Role::Unbound,
            })
            .collect();
        let mut columns: Vec<[f32; 3]> = (0..text.len()).map(|j| text.color_of(j).unwrap_or([0.0; 3])).collect();
        columns.extend(Color::ALL.iter().map(|c| c.rgb()));
        let n_cols = columns.len();

        let geometry = SceneSpec { frames: d.f, ..self.geometry.clone() };
        let layout = scene_layout(&geometry, scene.shape, scene.texture.unwrap_or(Texture::Plain), d.h, d.w);

        let ab = self.schedule.alpha_bar(t);
        let sab = ab.sqrt();
        let var0 = (cfg.prior_std as f64).powi(2);
        let denom = ab * var0 + 1.0 - ab;
        let gain = sab * var0 / denom;
        let post_var = var0 * (1.0 - ab) / denom;
        let mu = cfg.prior_mean as f64;

        let plane = d.h * d.w;
        let frames = d.b * d.f;
        // pixel-major RGB working buffers, `(b·f, h·w)` pixels
        let read = |v: &VideoLatent, n: usize, p: usize| -> [f32; 3] {
            let (b, f) = (n / d.f, n % d.f);
            [0, 1, 2].map(|c| v.get(b, c, f, p / d.w, p % d.w))
        };
        let x_tilde: Vec<[f32; 3]> = (0..frames * plane)
            .map(|i| read(z_t, i / plane, i % plane).map(|z| (mu + gain * (z as f64 - sab * mu)) as f32))
            .collect();

        // spatial bilateral self-attention
        let win = Window { h: d.h, w: d.w, radius: cfg.window };
        let kk = win.size();
        let content_s = 2.0 * (2.0 * post_var + 0.01);
        let len_s = 2.0 * (cfg.spatial_length as f64).powi(2);
        let side = 2 * cfg.window + 1;
        let mut sp = AttentionProbs { mats: frames, rows: plane, cols: kk, data: vec![0.0; frames * plane * kk] };
        let mut logits = vec![0.0f64; kk.max(n_cols).max(d.f)];
        for n in 0..frames {
            for p in 0..plane {
                let xp = x_tilde[n * plane + p];
                for (j, logit) in logits[..kk].iter_mut().enumerate() {
                    *logit = match win.key(p, j) {
                        Some(q) => {
                            let dy = (j / side) as f64 - cfg.window as f64;
                            let dx = (j % side) as f64 - cfg.window as f64;
                            -(dy * dy + dx * dx) / len_s - sqdist(xp, x_tilde[n * plane + q]) / content_s
                        }
                        None => f64::NEG_INFINITY,
                    };
                }
                softmax_in_place(&mut logits[..kk]);
                let row = &mut sp.data[(n * plane + p) * kk..][..kk];
                row.iter_mut().zip(&logits[..kk]).for_each(|(o, l)| *o = *l as f32);
            }
        }
        run_hook(control, AttentionKind::Spatial, &mut sp)?;
        let mut x_bar = vec![[0.0f32; 3]; frames * plane];
        for n in 0..frames {
            for p in 0..plane {
                let row = &sp.data[(n * plane + p) * kk..][..kk];
                let mut acc = [0.0f64; 3];
                for (j, &w) in row.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    if let Some(q) = win.key(p, j) {
                        let xq = x_tilde[n * plane + q];
                        (0..3).for_each(|c| acc[c] += w as f64 * xq[c] as f64);
                    }
                }
                x_bar[n * plane + p] = acc.map(|v| v as f32);
            }
        }

        // cross-attention over prompt tokens and palette memory
        let kappa2 = 2.0 * ((cfg.color_width as f64).powi(2) + 0.1 * post_var);
        let mut cr =
            AttentionProbs { mats: frames, rows: plane, cols: n_cols, data: vec![0.0; frames * plane * n_cols] };
        let shade_at = |n: usize, p: usize| -> (f64, f64) {
            let i = (n % d.f) * plane + p;
            let cov = layout.coverage[i] as f64;
            (cov, cov + (1.0 - cov) * layout.shade[i] as f64)
        };
        for n in 0..frames {
            for p in 0..plane {
                let (cov, shade) = shade_at(n, p);
                let xb = x_bar[n * plane + p].map(|v| (v as f64 / shade) as f32);
                for j in 0..n_cols {
                    let fit = -sqdist(xb, columns[j]) / kappa2;
                    logits[j] = if j < roles.len() {
                        match roles[j] {
                            Role::NotColor => f64::NEG_INFINITY,
                            Role::Object => fit + cfg.bind_bonus as f64 * cov,
                            Role::Background => fit + cfg.bind_bonus as f64 * (1.0 - cov),
                            Role::Unbound => fit - cfg.unbound_penalty as f64,
                        }
                    } else {
                        fit + cfg.memory_prior as f64
                    };
                }
                softmax_in_place(&mut logits[..n_cols]);
                let row = &mut cr.data[(n * plane + p) * n_cols..][..n_cols];
                row.iter_mut().zip(&logits[..n_cols]).for_each(|(o, l)| *o = *l as f32);
            }
        }
        run_hook(control, AttentionKind::Cross, &mut cr)?;
        // values are read from the (possibly swapped) embedding rows
        let mut x_c = vec![[0.0f32; 3]; frames * plane];
        for n in 0..frames {
            for p in 0..plane {
                let (_, shade) = shade_at(n, p);
                let row = &cr.data[(n * plane + p) * n_cols..][..n_cols];
                let mut acc = [0.0f64; 3];
                for (j, &w) in row.iter().enumerate() {
                    (0..3).for_each(|c| acc[c] += w as f64 * columns[j][c] as f64);
                }
                x_c[n * plane + p] = acc.map(|v| (v * shade) as f32);
            }
        }

        // temporal attention along each pixel's frame sequence
        let content_t = 2.0 * (cfg.temporal_width as f64).powi(2);
        let len_t = 2.0 * (cfg.temporal_length as f64).powi(2);
        let groups = d.b * plane;
        let mut tp = AttentionProbs { mats: groups, rows: d.f, cols: d.f, data: vec![0.0; groups * d.f * d.f] };
        for b in 0..d.b {
            for p in 0..plane {
                let g = b * plane + p;
                for f in 0..d.f {
                    let xf = x_c[(b * d.f + f) * plane + p];
                    for k in 0..d.f {
                        let df = f as f64 - k as f64;
                        logits[k] = -df * df / len_t - sqdist(xf, x_c[(b * d.f + k) * plane + p]) / content_t;
                    }
                    softmax_in_place(&mut logits[..d.f]);
                    let row = &mut tp.data[(g * d.f + f) * d.f..][..d.f];
                    row.iter_mut().zip(&logits[..d.f]).for_each(|(o, l)| *o = *l as f32);
                }
            }
        }
        run_hook(control, AttentionKind::Temporal, &mut tp)?;

        let s1 = (1.0 - ab).sqrt();
        let mut out = VideoLatent::zeros(d);
        let mut x0 = vec![[0.0f64; 3]; d.f];
        for b in 0..d.b {
            for p in 0..plane {
                let g = b * plane + p;
                for (f, x0f) in x0.iter_mut().enumerate() {
                    let row = &tp.data[(g * d.f + f) * d.f..][..d.f];
                    let mut acc = [0.0f64; 3];
                    for (k, &w) in row.iter().enumerate() {
                        let xk = x_c[(b * d.f + k) * plane + p];
                        (0..3).for_each(|c| acc[c] += w as f64 * xk[c] as f64);
                    }
                    *x0f = acc;
                }
                let (y, x) = (p / d.w, p % d.w);
                for (f, x0f) in x0.iter().enumerate() {
                    for (c, &x0c) in x0f.iter().enumerate() {
                        let z = z_t.get(b, c, f, y, x) as f64;
                        let o = out.offset(b, c, f, y, x);
                        out.data_mut()[o] = ((z - sab * x0c) / s1) as f32;
                    }
                }
            }
        }
        out.ensure_finite("palette backbone")?;
        Ok(out)
    }
}
