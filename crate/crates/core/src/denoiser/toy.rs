//! A small trainable video denoiser built the way image models are inflated
//! to video: every per-frame layer sees the 5D latent reshaped to a batch of
//! frames, and a temporal attention layer (output projection zero at
//! initialization) attends over each pixel's sequence of frames.
//!
//! Per block: `h += conv(silu(h))`, windowed spatial self-attention,
//! cross-attention to the prompt, temporal attention — each with a residual.
//! The timestep enters through a FiLM modulation after the input convolution
//! and a per-timestep linear skip from the network input to its output, both
//! read from a table interpolated between knots that are dense near `t = 0`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::nn::{self, Act, Window};
use super::{
    check_output, AttentionControl, AttentionKind, AttentionProbs, AttentionSite, ConditionPair, Denoiser, NoControl,
};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{concat_condition, inverse_spatial, reshape_spatial, FrameBatch, VideoLatent};
use crate::text::{PromptEmbedding, EMBED_DIM};
use crate::vten::{self, RawTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Channel width of the residual stream.
    pub width: usize,
    pub attn_width: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    /// Radius of the spatial self-attention window.
    pub window: usize,
    /// Channels of the video latent (and of the video condition).
    pub video_channels: usize,
    pub time_knots: usize,
    /// Number of diffusion timesteps the time table spans.
    pub train_steps: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            width: 16,
            attn_width: 16,
            embed_dim: EMBED_DIM,
            blocks: 2,
            window: 3,
            video_channels: 3,
            time_knots: 24,
            train_steps: 1000,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("attn_width", self.attn_width),
            ("embed_dim", self.embed_dim),
            ("video_channels", self.video_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Param(format!("toy model {name} must be positive")));
            }
        }
        if self.time_knots < 2 || self.train_steps < 2 {
            return Err(Error::Param("toy model needs ≥ 2 time knots and ≥ 2 train steps".into()));
        }
        Ok(())
    }

    fn input_channels(&self) -> usize {
        2 * self.video_channels
    }

    fn time_row_width(&self) -> usize {
        2 * self.width + self.video_channels * self.input_channels()
    }

    /// Knot positions `(T−1)·(k/(K−1))²`.
    fn knot(&self, k: usize) -> f64 {
        let u = k as f64 / (self.time_knots - 1) as f64;
        (self.train_steps - 1) as f64 * u * u
    }

    /// The two knots bracketing `t` with their interpolation weights.
    fn knot_weights(&self, t: usize) -> [(usize, f64); 2] {
        let t = (t as f64).min((self.train_steps - 1) as f64);
        let mut k = 0;
        while k + 2 < self.time_knots && self.knot(k + 1) <= t {
            k += 1;
        }
        let (a, b) = (self.knot(k), self.knot(k + 1));
        let lam = ((t - a) / (b - a)).clamp(0.0, 1.0);
        [(k, 1.0 - lam), (k + 1, lam)]
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Debug, Clone)]
struct BlockIds {
    conv_w: usize,
    conv_b: usize,
    spatial: AttnIds,
    cross: AttnIds,
    temporal: AttnIds,
}

#[derive(Debug, Clone)]
struct Ids {
    conv_in_w: usize,
    conv_in_b: usize,
    time: usize,
    blocks: Vec<BlockIds>,
    conv_out_w: usize,
    conv_out_b: usize,
}

/// Parameter layout; `draw` gives each tensor its initial values.
fn build_layout(cfg: &ToyConfig, mut draw: impl FnMut(&str, &[usize]) -> Vec<f32>) -> (Vec<Param>, Ids) {
    let mut params = Vec::new();
    let mut add = |name: String, dims: Vec<usize>| {
        let data = draw(&name, &dims);
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        params.push(Param { name, dims, data });
        params.len() - 1
    };
    let (c, a, d, cin, vc) = (cfg.width, cfg.attn_width, cfg.embed_dim, cfg.input_channels(), cfg.video_channels);
    let conv_in_w = add("conv_in.w".into(), vec![3, 3, cin, c]);
    let conv_in_b = add("conv_in.b".into(), vec![c]);
    let time = add("time_table".into(), vec![cfg.time_knots, cfg.time_row_width()]);
    let mut blocks = Vec::new();
    for l in 0..cfg.blocks {
        let conv_w = add(format!("block{l}.conv.w"), vec![3, 3, c, c]);
        let conv_b = add(format!("block{l}.conv.b"), vec![c]);
        let mut attn = |kind: &str, kv_in: usize| AttnIds {
            q: add(format!("block{l}.{kind}.q"), vec![c, a]),
            k: add(format!("block{l}.{kind}.k"), vec![kv_in, a]),
            v: add(format!("block{l}.{kind}.v"), vec![kv_in, a]),
            o: add(format!("block{l}.{kind}.o"), vec![a, c]),
        };
        let spatial = attn("spatial", c);
        let cross = attn("cross", d);
        let temporal = attn("temporal", c);
        blocks.push(BlockIds { conv_w, conv_b, spatial, cross, temporal });
    }
    let conv_out_w = add("conv_out.w".into(), vec![3, 3, c, vc]);
    let conv_out_b = add("conv_out.b".into(), vec![vc]);
    (params, Ids { conv_in_w, conv_in_b, time, blocks, conv_out_w, conv_out_b })
}

/// Gradients aligned with [`ToyDenoiser::params`].
pub type Grads = Vec<Vec<f64>>;

struct AttnCache {
    input: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    out: Vec<f32>,
}

struct BlockCache {
    h_in: Act,
    s_in: Act,
    spatial: AttnCache,
    cross: AttnCache,
    temporal: AttnCache,
}

/// Activations kept by a forward pass for the backward pass.
pub struct ForwardCache {
    x: Act,
    a0: Act,
    time_row: Vec<f32>,
    knots: [(usize, f64); 2],
    text: Vec<f32>,
    text_len: usize,
    frames: (usize, usize),
    blocks: Vec<BlockCache>,
    h_final: Act,
    s_final: Act,
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    cfg: ToyConfig,
    params: Vec<Param>,
    ids: Ids,
}

impl ToyDenoiser {
    /// Seeded initialization. Temporal output projections start at zero so
    /// the untrained video model acts frame by frame.
    pub fn init(cfg: ToyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed);
        let (params, ids) = build_layout(&cfg, |name, dims| {
            let n: usize = dims.iter().product();
            let gauss = |rng: &mut SeededRng, std: f64| (0..n).map(|_| (rng.normal() as f64 * std) as f32).collect();
            let fan_in = |k: usize| (k as f64).sqrt().recip();
            if name.ends_with(".b") || name.starts_with("block") && name.contains("temporal.o") {
                vec![0.0; n]
            } else if name == "time_table" {
                gauss(&mut rng, 0.05)
            } else if name.starts_with("conv_in") || name.starts_with("conv_out") || name.ends_with("conv.w") {
                let cin = dims[2];
                let gain = if name.starts_with("conv_in") { 1.0 } else { 0.5 };
                gauss(&mut rng, gain * fan_in(9 * cin))
            } else if name.ends_with(".o") {
                gauss(&mut rng, 0.5 * fan_in(dims[0]))
            } else {
                gauss(&mut rng, fan_in(dims[0]))
            }
        });
        Ok(Self { cfg, params, ids })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }

    fn p(&self, id: usize) -> &[f32] {
        &self.params[id].data
    }

    /// Writes the parameters plus `config.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensors: Vec<(String, RawTensor)> = self
            .params
            .iter()
            .map(|p| Ok((p.name.clone(), RawTensor::new(p.dims.clone(), p.data.clone())?)))
            .collect::<Result<_>>()?;
        vten::write_bundle(dir, &tensors)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.cfg)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: ToyConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
        cfg.validate()?;
        let mut stored = vten::read_bundle(dir)?;
        let mut missing = Vec::new();
        let (params, ids) = build_layout(&cfg, |name, dims| match stored.iter().position(|(n, _)| n == name) {
            Some(i) if stored[i].1.dims == dims => stored.swap_remove(i).1.data,
            _ => {
                missing.push(name.to_string());
                vec![0.0; dims.iter().product()]
            }
        });
        if !missing.is_empty() {
            return Err(Error::Format(format!("bundle lacks or misshapes tensors: {}", missing.join(", "))));
        }
        if let Some((extra, _)) = stored.first() {
            return Err(Error::Format(format!("bundle has unexpected tensor `{extra}`")));
        }
        Ok(Self { cfg, params, ids })
    }

    fn check_inputs<'a>(
        &self,
        z_t: &VideoLatent,
        cond: &'a ConditionPair,
    ) -> Result<std::borrow::Cow<'a, PromptEmbedding>> {
        let vc = self.cfg.video_channels;
        if z_t.dims().c != vc {
            return Err(Error::Shape(format!("toy denoiser expects {vc} latent channels, got {}", z_t.dims())));
        }
        if let Some(v) = &cond.video {
            if v.dims().c != vc {
                return Err(Error::Shape(format!("toy denoiser expects {vc} condition channels, got {}", v.dims())));
            }
        }
        let text = cond.text_or_empty();
        if text.dim() != self.cfg.embed_dim {
            return Err(Error::Shape(format!(
                "prompt embedding width {} does not match the model's {}",
                text.dim(),
                self.cfg.embed_dim
            )));
        }
        Ok(text)
    }

    /// Forward pass; optionally keeps activations for [`Self::backward`].
    pub fn forward(
        &self,
        z_t: &VideoLatent,
        t: usize,
        cond: &ConditionPair,
        control: &mut dyn AttentionControl,
        keep: bool,
    ) -> Result<(VideoLatent, Option<ForwardCache>)> {
        let text = self.check_inputs(z_t, cond)?;
        let cfg = &self.cfg;
        let d = z_t.dims();
        let (c, a, vc) = (cfg.width, cfg.attn_width, cfg.video_channels);
        let cin = cfg.input_channels();
        let x = to_channel_last(&reshape_spatial(&concat_condition(z_t, cond.video.as_ref(), vc)?));
        let rows = x.rows();
        let p_count = d.h * d.w;

        let knots = cfg.knot_weights(t);
        let table = self.p(self.ids.time);
        let rw = cfg.time_row_width();
        let time_row: Vec<f32> =
            (0..rw).map(|j| knots.iter().map(|&(k, wgt)| wgt * table[k * rw + j] as f64).sum::<f64>() as f32).collect();
        let (gamma, rest) = time_row.split_at(c);
        let (beta, skip) = rest.split_at(c);

        let a0 = nn::conv3x3(&x, self.p(self.ids.conv_in_w), self.p(self.ids.conv_in_b), c);
        let mut h = a0.clone();
        for r in 0..rows {
            for ch in 0..c {
                let i = r * c + ch;
                h.data[i] = a0.data[i] * (1.0 + gamma[ch]) + beta[ch];
            }
        }

        let text_len = text.len();
        let text_data = text.data().to_vec();
        let win = Window { h: d.h, w: d.w, radius: cfg.window };
        let mut block_caches = Vec::with_capacity(cfg.blocks);
        for (l, b) in self.ids.blocks.iter().enumerate() {
            let s_in = h.like(c, h.data.iter().map(|&v| nn::silu(v)).collect());
            let conv = nn::conv3x3(&s_in, self.p(b.conv_w), self.p(b.conv_b), c);
            let h_in = h;
            let mut h1 = h_in.clone();
            h1.data.iter_mut().zip(&conv.data).for_each(|(o, v)| *o += v);

            // spatial self-attention within each frame
            let sp = {
                let q = nn::matmul(&h1.data, rows, c, self.p(b.spatial.q), a);
                let k = nn::matmul(&h1.data, rows, c, self.p(b.spatial.k), a);
                let v = nn::matmul(&h1.data, rows, c, self.p(b.spatial.v), a);
                let mut probs = AttentionProbs {
                    mats: x.n,
                    rows: p_count,
                    cols: win.size(),
                    data: nn::window_attention_probs(&q, &k, x.n, win, a),
                };
                hook(control, AttentionKind::Spatial, l, &mut probs)?;
                let out = nn::window_attention_apply(&probs.data, &v, x.n, win, a);
                AttnCache { input: h1.data.clone(), q, k, v, probs: probs.data, out }
            };
            let mut h2 = h1;
            add_projected(&mut h2.data, &sp.out, rows, a, self.p(b.spatial.o), c);

            // cross-attention: pixels query the prompt tokens
            let cr = {
                let q = nn::matmul(&h2.data, rows, c, self.p(b.cross.q), a);
                let k = nn::matmul(&text_data, text_len, cfg.embed_dim, self.p(b.cross.k), a);
                let v = nn::matmul(&text_data, text_len, cfg.embed_dim, self.p(b.cross.v), a);
                let mut probs = AttentionProbs {
                    mats: x.n,
                    rows: p_count,
                    cols: text_len,
                    data: nn::dense_attention_probs(&q, &k, x.n, 1, p_count, text_len, a),
                };
                hook(control, AttentionKind::Cross, l, &mut probs)?;
                let out = nn::dense_attention_apply(&probs.data, &v, x.n, 1, p_count, text_len, a);
                AttnCache { input: h2.data.clone(), q, k, v, probs: probs.data, out }
            };
            let mut h3 = h2;
            add_projected(&mut h3.data, &cr.out, rows, a, self.p(b.cross.o), c);

            // temporal attention over each pixel's frame sequence
            let tp = {
                let seq = |w: &[f32]| nn::to_sequences(&nn::matmul(&h3.data, rows, c, w, a), d.b, d.f, p_count, a);
                let q = seq(self.p(b.temporal.q));
                let k = seq(self.p(b.temporal.k));
                let v = seq(self.p(b.temporal.v));
                let groups = d.b * p_count;
                let mut probs = AttentionProbs {
                    mats: groups,
                    rows: d.f,
                    cols: d.f,
                    data: nn::dense_attention_probs(&q, &k, groups, groups, d.f, d.f, a),
                };
                hook(control, AttentionKind::Temporal, l, &mut probs)?;
                let out_seq = nn::dense_attention_apply(&probs.data, &v, groups, groups, d.f, d.f, a);
                let out = nn::from_sequences(&out_seq, d.b, d.f, p_count, a);
                AttnCache { input: h3.data.clone(), q, k, v, probs: probs.data, out }
            };
            let mut h4 = h3;
            add_projected(&mut h4.data, &tp.out, rows, a, self.p(b.temporal.o), c);
            h = h4;
            if keep {
                block_caches.push(BlockCache { h_in, s_in, spatial: sp, cross: cr, temporal: tp });
            }
        }

        let s_final = h.like(c, h.data.iter().map(|&v| nn::silu(v)).collect());
        let mut y = nn::conv3x3(&s_final, self.p(self.ids.conv_out_w), self.p(self.ids.conv_out_b), vc);
        for r in 0..rows {
            let xr = &x.data[r * cin..(r + 1) * cin];
            for o in 0..vc {
                let s: f64 = skip[o * cin..(o + 1) * cin].iter().zip(xr).map(|(&w, &v)| w as f64 * v as f64).sum();
                y.data[r * vc + o] += s as f32;
            }
        }
        let out = inverse_spatial(&from_channel_last(&y, d.b, d.f));
        check_output(z_t, &out, "toy denoiser")?;
        let cache = keep.then_some(ForwardCache {
            x,
            a0,
            time_row,
            knots,
            text: text_data,
            text_len,
            frames: (d.b, d.f),
            blocks: block_caches,
            h_final: h,
            s_final,
        });
        Ok((out, cache))
    }

    /// Accumulates parameter gradients of `⟨dout, output⟩` into `grads`.
    pub fn backward(&self, cache: &ForwardCache, dout: &VideoLatent, grads: &mut Grads) -> Result<()> {
        let cfg = &self.cfg;
        let (c, a, vc, cin) = (cfg.width, cfg.attn_width, cfg.video_channels, cfg.input_channels());
        let (b_count, f_count) = cache.frames;
        let dy = to_channel_last(&reshape_spatial(dout));
        if dy.rows() != cache.x.rows() || dy.c != vc {
            return Err(Error::Shape("output gradient does not match the cached forward pass".into()));
        }
        let rows = dy.rows();
        let p_count = dy.h * dy.w;
        let win = Window { h: dy.h, w: dy.w, radius: cfg.window };
        let rw = cfg.time_row_width();

        // output skip
        let mut d_row = vec![0.0f64; rw];
        for r in 0..rows {
            for o in 0..vc {
                let g = dy.data[r * vc + o] as f64;
                for i in 0..cin {
                    d_row[2 * c + o * cin + i] += g * cache.x.data[r * cin + i] as f64;
                }
            }
        }
        let ds = conv_backward(
            &cache.s_final,
            self.p(self.ids.conv_out_w),
            &dy,
            pair_mut(grads, self.ids.conv_out_w, self.ids.conv_out_b),
        );
        let mut dh: Vec<f32> = ds.data.iter().zip(&cache.h_final.data).map(|(&g, &h)| g * nn::silu_grad(h)).collect();

        for (b, bc) in self.ids.blocks.iter().zip(&cache.blocks).rev() {
            // temporal
            let tc = &bc.temporal;
            let d_out = project_backward(&tc.out, rows, a, self.p(b.temporal.o), c, &dh, &mut grads[b.temporal.o]);
            let groups = b_count * p_count;
            let d_out_seq = nn::to_sequences(&d_out, b_count, f_count, p_count, a);
            let (dq, dk, dv) = nn::dense_attention_backward(
                &tc.q, &tc.k, &tc.v, &tc.probs, &d_out_seq, groups, groups, f_count, f_count, a,
            );
            for (seq_grad, id) in [(dq, b.temporal.q), (dk, b.temporal.k), (dv, b.temporal.v)] {
                let g = nn::from_sequences(&seq_grad, b_count, f_count, p_count, a);
                let dx = nn::matmul_backward(&tc.input, rows, c, self.p(id), a, &g, &mut grads[id], true).unwrap();
                dh.iter_mut().zip(&dx).for_each(|(o, v)| *o += v);
            }

            // cross
            let cc = &bc.cross;
            let d_out = project_backward(&cc.out, rows, a, self.p(b.cross.o), c, &dh, &mut grads[b.cross.o]);
            let (dq, dk, dv) = nn::dense_attention_backward(
                &cc.q,
                &cc.k,
                &cc.v,
                &cc.probs,
                &d_out,
                cache.x.n,
                1,
                p_count,
                cache.text_len,
                a,
            );
            let dx = nn::matmul_backward(&cc.input, rows, c, self.p(b.cross.q), a, &dq, &mut grads[b.cross.q], true)
                .unwrap();
            dh.iter_mut().zip(&dx).for_each(|(o, v)| *o += v);
            let e = cfg.embed_dim;
            nn::matmul_backward(
                &cache.text,
                cache.text_len,
                e,
                self.p(b.cross.k),
                a,
                &dk,
                &mut grads[b.cross.k],
                false,
            );
            nn::matmul_backward(
                &cache.text,
                cache.text_len,
                e,
                self.p(b.cross.v),
                a,
                &dv,
                &mut grads[b.cross.v],
                false,
            );

            // spatial
            let sc = &bc.spatial;
            let d_out = project_backward(&sc.out, rows, a, self.p(b.spatial.o), c, &dh, &mut grads[b.spatial.o]);
            let (dq, dk, dv) = nn::window_attention_backward(&sc.q, &sc.k, &sc.v, &sc.probs, &d_out, cache.x.n, win, a);
            for (g, id) in [(dq, b.spatial.q), (dk, b.spatial.k), (dv, b.spatial.v)] {
                let dx = nn::matmul_backward(&sc.input, rows, c, self.p(id), a, &g, &mut grads[id], true).unwrap();
                dh.iter_mut().zip(&dx).for_each(|(o, v)| *o += v);
            }

            // conv residual
            let dconv = bc.h_in.like(c, dh.clone());
            let d_s = conv_backward(&bc.s_in, self.p(b.conv_w), &dconv, pair_mut(grads, b.conv_w, b.conv_b));
            for ((o, &g), &hv) in dh.iter_mut().zip(&d_s.data).zip(&bc.h_in.data) {
                *o += g * nn::silu_grad(hv);
            }
        }

        // FiLM
        let gamma = &cache.time_row[..c];
        let mut da0 = vec![0.0f32; dh.len()];
        for r in 0..rows {
            for ch in 0..c {
                let i = r * c + ch;
                d_row[ch] += dh[i] as f64 * cache.a0.data[i] as f64;
                d_row[c + ch] += dh[i] as f64;
                da0[i] = dh[i] * (1.0 + gamma[ch]);
            }
        }
        for &(k, wgt) in &cache.knots {
            for (g, &dr) in grads[self.ids.time][k * rw..(k + 1) * rw].iter_mut().zip(&d_row) {
                *g += wgt * dr;
            }
        }
        let da0 = cache.a0.like(c, da0);
        conv_backward(
            &cache.x,
            self.p(self.ids.conv_in_w),
            &da0,
            pair_mut(grads, self.ids.conv_in_w, self.ids.conv_in_b),
        );
        Ok(())
    }
}

/// Two distinct gradient buffers borrowed at once (`i < j`).
fn pair_mut(grads: &mut Grads, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(i < j);
    let (lo, hi) = grads.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

fn conv_backward(x: &Act, w: &[f32], dy: &Act, (gw, gb): (&mut [f64], &mut [f64])) -> Act {
    nn::conv3x3_backward(x, w, dy, gw, gb)
}

fn hook(
    control: &mut dyn AttentionControl,
    kind: AttentionKind,
    layer: usize,
    probs: &mut AttentionProbs,
) -> Result<()> {
    let (mats, rows, cols, len) = (probs.mats, probs.rows, probs.cols, probs.data.len());
    control.on_attention(AttentionSite { kind, layer }, probs)?;
    if (probs.mats, probs.rows, probs.cols, probs.data.len()) != (mats, rows, cols, len) {
        return Err(Error::Trace(format!("attention control reshaped {kind:?} probabilities at layer {layer}")));
    }
    Ok(())
}

/// `h += out · W_o`.
fn add_projected(h: &mut [f32], out: &[f32], rows: usize, a: usize, wo: &[f32], c: usize) {
    let proj = nn::matmul(out, rows, a, wo, c);
    h.iter_mut().zip(&proj).for_each(|(o, v)| *o += v);
}

fn project_backward(out: &[f32], rows: usize, a: usize, wo: &[f32], c: usize, dh: &[f32], gw: &mut [f64]) -> Vec<f32> {
    nn::matmul_backward(out, rows, a, wo, c, dh, gw, true).unwrap()
}

fn to_channel_last(fb: &FrameBatch) -> Act {
    let (n, c, p) = (fb.n(), fb.c, fb.h * fb.w);
    let mut data = vec![0.0f32; fb.data.len()];
    for i in 0..n {
        for ch in 0..c {
            for q in 0..p {
                data[(i * p + q) * c + ch] = fb.data[(i * c + ch) * p + q];
            }
        }
    }
    Act { n, h: fb.h, w: fb.w, c, data }
}

fn from_channel_last(x: &Act, b: usize, f: usize) -> FrameBatch {
    let (n, c, p) = (x.n, x.c, x.h * x.w);
    let mut data = vec![0.0f32; x.data.len()];
    for i in 0..n {
        for ch in 0..c {
            for q in 0..p {
                data[(i * c + ch) * p + q] = x.data[(i * p + q) * c + ch];
            }
        }
    }
    FrameBatch { b, f, c, h: x.h, w: x.w, data }
}

impl Denoiser for ToyDenoiser {
    fn predict(&self, z_t: &VideoLatent, t: usize, cond: &ConditionPair) -> Result<VideoLatent> {
        Ok(self.forward(z_t, t, cond, &mut NoControl, false)?.0)
    }

    fn predict_controlled(
        &self,
        z_t: &VideoLatent,
        t: usize,
        cond: &ConditionPair,
        control: &mut dyn AttentionControl,
    ) -> Result<VideoLatent> {
        Ok(self.forward(z_t, t, cond, control, false)?.0)
    }
}

/// Runs the model on each frame separately and stacks the results.
pub fn predict_frame_by_frame(
    den: &ToyDenoiser,
    z_t: &VideoLatent,
    t: usize,
    cond: &ConditionPair,
) -> Result<VideoLatent> {
    let d = z_t.dims();
    let mut parts = Vec::with_capacity(d.f);
    for f in 0..d.f {
        let zf = z_t.slice_frames(f..f + 1)?;
        let cf = ConditionPair {
            video: cond.video.as_ref().map(|v| v.slice_frames(f..f + 1)).transpose()?,
            text: cond.text.clone(),
        };
        parts.push(den.predict(&zf, t, &cf)?);
    }
    VideoLatent::concat_frames(&parts.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    fn sample_inputs(seed: u64, dims: Dims) -> (VideoLatent, ConditionPair) {
        let mut rng = SeededRng::new(seed);
        let z = rng.gaussian(dims);
        let cv = rng.gaussian(dims).map(|v| 0.5 + 0.2 * v);
        (z, ConditionPair::full(cv, PromptEmbedding::encode("a red circle on a blue background")))
    }

    #[test]
    fn inflation_identity_at_initialization() {
        let den = ToyDenoiser::init(ToyConfig::default(), 3).unwrap();
        let (z, cond) = sample_inputs(1, Dims::new(1, 3, 4, 8, 8));
        let full = den.predict(&z, 500, &cond).unwrap();
        let frames = predict_frame_by_frame(&den, &z, 500, &cond).unwrap();
        assert!(full.max_abs_diff(&frames) < 1e-6);
    }

    #[test]
    fn nonzero_temporal_projection_couples_frames() {
        let mut den = ToyDenoiser::init(ToyConfig::default(), 3).unwrap();
        let mut rng = SeededRng::new(9);
        for p in den.params_mut().iter_mut().filter(|p| p.name.ends_with("temporal.o")) {
            rng.fill_normal(&mut p.data);
        }
        let (z, cond) = sample_inputs(1, Dims::new(1, 3, 4, 8, 8));
        let full = den.predict(&z, 500, &cond).unwrap();
        let frames = predict_frame_by_frame(&den, &z, 500, &cond).unwrap();
        assert!(full.max_abs_diff(&frames) > 1e-3);
    }

    #[test]
    fn batch_permutation_equivariance() {
        let mut den = ToyDenoiser::init(ToyConfig::default(), 4).unwrap();
        let mut rng = SeededRng::new(10);
        for p in den.params_mut().iter_mut().filter(|p| p.name.ends_with("temporal.o")) {
            rng.fill_normal(&mut p.data);
        }
        let (z, cond) = sample_inputs(2, Dims::new(3, 3, 2, 6, 6));
        let perm = [2, 0, 1];
        let out = den.predict(&z, 100, &cond).unwrap();
        let zp = z.select_batch(&perm).unwrap();
        let cp = ConditionPair::new(cond.video.as_ref().map(|v| v.select_batch(&perm).unwrap()), cond.text.clone());
        let outp = den.predict(&zp, 100, &cp).unwrap();
        assert_eq!(outp, out.select_batch(&perm).unwrap());
    }

    #[test]
    fn rejects_wrong_embedding_width() {
        let den = ToyDenoiser::init(ToyConfig::default(), 0).unwrap();
        let (z, mut cond) = sample_inputs(3, Dims::new(1, 3, 2, 4, 4));
        cond.text = Some(
            PromptEmbedding::from_raw(vec!["<bos>".into()], 8, [1.0].into_iter().chain([0.0; 7]).collect()).unwrap(),
        );
        assert!(matches!(den.predict(&z, 10, &cond), Err(Error::Shape(_))));
    }

    #[test]
    fn bundle_roundtrip_preserves_predictions() {
        let den = ToyDenoiser::init(ToyConfig::default(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        den.save(dir.path()).unwrap();
        let back = ToyDenoiser::load(dir.path()).unwrap();
        let (z, cond) = sample_inputs(4, Dims::new(1, 3, 2, 5, 7));
        assert_eq!(den.predict(&z, 42, &cond).unwrap(), back.predict(&z, 42, &cond).unwrap());
    }

    #[test]
    fn null_conditions_are_accepted() {
        let den = ToyDenoiser::init(ToyConfig::default(), 6).unwrap();
        let (z, _) = sample_inputs(5, Dims::new(1, 3, 3, 4, 4));
        let out = den.predict(&z, 999, &ConditionPair::null()).unwrap();
        assert_eq!(out.dims(), z.dims());
    }

    #[test]
    fn attention_rows_are_stochastic() {
        struct Check(usize);
        impl AttentionControl for Check {
            fn on_attention(&mut self, _: AttentionSite, probs: &mut AttentionProbs) -> Result<()> {
                assert!(probs.max_row_error() < 1e-5);
                self.0 += 1;
                Ok(())
            }
        }
        let den = ToyDenoiser::init(ToyConfig::default(), 7).unwrap();
        let (z, cond) = sample_inputs(6, Dims::new(1, 3, 3, 6, 6));
        let mut chk = Check(0);
        den.predict_controlled(&z, 300, &cond, &mut chk).unwrap();
        assert_eq!(chk.0, 3 * den.config().blocks);
    }

    #[test]
    fn knot_weights_interpolate() {
        let cfg = ToyConfig::default();
        for t in [0usize, 1, 17, 500, 998, 999] {
            let w = cfg.knot_weights(t);
            assert!((w[0].1 + w[1].1 - 1.0).abs() < 1e-12);
            let tt = w[0].1 * cfg.knot(w[0].0) + w[1].1 * cfg.knot(w[1].0);
            assert!((tt - t as f64).abs() < 1e-9, "t={t} -> {tt}");
        }
    }
}
