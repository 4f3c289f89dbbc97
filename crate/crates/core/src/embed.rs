//! Joint image/text embeddings used for scoring and filtering.
//!
//! [`Embedder`] is the pluggable contract; [`ToyEmbedder`] is a deterministic
//! stand-in whose features are aligned with the toy world's vocabulary, so
//! color words land near frames of that color.

use crate::error::{Error, Result};
use crate::palette::Color;
use crate::rng::SeededRng;
use crate::tensor::Image;
use crate::text::tokenize;

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    /// Unit vector for one frame.
    fn embed_image(&self, frame: &Image) -> Result<Vec<f32>>;
    /// Unit vector for a prompt.
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

pub const TOY_EMBED_DIM: usize = 64;
const HIST: usize = 8;
const GRID: usize = 4;
const GRID_FEATURES: usize = GRID * GRID * 3;
const CONCEPT_OFFSET: usize = HIST + GRID_FEATURES;
/// Non-color words with a dedicated feature; anything else counts as `other`.
pub const CONCEPTS: [&str; 7] = ["circle", "square", "triangle", "plain", "striped", "checkered", "speckled"];

#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    projection: Vec<f64>,
    /// Width of the soft color assignment.
    pub tau: f64,
    pub grid_weight: f64,
    pub concept_weight: f64,
    pub other_weight: f64,
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self::new(0x5EED_E3BE)
    }
}

impl ToyEmbedder {
    pub fn new(seed: u64) -> Self {
        Self {
            projection: orthonormal(TOY_EMBED_DIM, seed),
            tau: 0.1,
            grid_weight: 0.1,
            concept_weight: 0.3,
            other_weight: 0.1,
        }
    }

    fn finish(&self, raw: &[f64]) -> Result<Vec<f32>> {
        let n = TOY_EMBED_DIM;
        let mut out = vec![0.0f64; n];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..n).map(|j| self.projection[i * n + j] * raw[j]).sum();
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Embedder("feature vector is zero".into()));
        }
        Ok(out.into_iter().map(|v| (v / norm) as f32).collect())
    }

    /// Soft assignment of one RGB value to the palette.
    fn soft_bins(&self, rgb: [f32; 3], out: &mut [f64; HIST]) {
        let mut w = [0.0f64; HIST];
        let mut best = f64::INFINITY;
        let mut d2 = [0.0f64; HIST];
        for (k, c) in Color::ALL.iter().enumerate() {
            let p = c.rgb();
            d2[k] = (0..3).map(|i| (rgb[i] as f64 - p[i] as f64).powi(2)).sum();
            best = best.min(d2[k]);
        }
        let mut s = 0.0;
        for k in 0..HIST {
            w[k] = (-(d2[k] - best) / (2.0 * self.tau * self.tau)).exp();
            s += w[k];
        }
        for k in 0..HIST {
            out[k] += w[k] / s;
        }
    }
}

fn orthonormal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = SeededRng::new(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal() as f64).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows.concat()
}

fn cell_range(g: usize, n: usize) -> std::ops::Range<usize> {
    let start = (g * n / GRID).min(n - 1);
    let end = ((g + 1) * n / GRID).max(start + 1).min(n);
    start..end
}

impl Embedder for ToyEmbedder {
    fn dim(&self) -> usize {
        TOY_EMBED_DIM
    }

    fn embed_image(&self, frame: &Image) -> Result<Vec<f32>> {
        if frame.c != 3 || frame.h == 0 || frame.w == 0 {
            return Err(Error::Embedder(format!("expected an RGB frame, got {}x{}x{}", frame.c, frame.h, frame.w)));
        }
        let mut raw = vec![0.0f64; TOY_EMBED_DIM];
        let mut hist = [0.0f64; HIST];
        for y in 0..frame.h {
            for x in 0..frame.w {
                let rgb = [frame.get(0, y, x), frame.get(1, y, x), frame.get(2, y, x)];
                self.soft_bins(rgb, &mut hist);
            }
        }
        let npx = (frame.h * frame.w) as f64;
        for k in 0..HIST {
            raw[k] = hist[k] / npx;
        }
        for gy in 0..GRID {
            for gx in 0..GRID {
                let (ys, xs) = (cell_range(gy, frame.h), cell_range(gx, frame.w));
                let cnt = (ys.len() * xs.len()) as f64;
                for c in 0..3 {
                    let mut s = 0.0f64;
                    for y in ys.clone() {
                        for x in xs.clone() {
                            s += frame.get(c, y, x) as f64;
                        }
                    }
                    raw[HIST + (gy * GRID + gx) * 3 + c] = self.grid_weight * (s / cnt - 0.5);
                }
            }
        }
        self.finish(&raw)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let mut raw = vec![0.0f64; TOY_EMBED_DIM];
        for tok in tokenize(text) {
            if let Some(c) = Color::from_name(&tok) {
                raw[c.index()] += 1.0;
            } else if let Some(k) = CONCEPTS.iter().position(|w| *w == tok) {
                raw[CONCEPT_OFFSET + k] += self.concept_weight;
            } else {
                raw[CONCEPT_OFFSET + CONCEPTS.len()] += self.other_weight;
            }
        }
        self.finish(&raw).map_err(|_| Error::Embedder(format!("prompt {text:?} has no content words")))
    }
}
