//! Closed-form denoisers for Gaussian data, used as exact oracles.

use std::f64::consts::PI;

use super::{check_output, ConditionPair, Denoiser};
use crate::error::Result;
use crate::schedule::NoiseSchedule;
use crate::tensor::VideoLatent;

/// Posterior-mean noise for data `x ~ N(μ, σ0²·I)`:
/// `√(1−ᾱ)·(z_t − √ᾱ·μ) / (ᾱ·σ0² + 1 − ᾱ)`.
pub fn analytic_gaussian_predict(
    z_t: &VideoLatent,
    t: usize,
    s: &NoiseSchedule,
    mu: &VideoLatent,
    sigma0: f64,
) -> Result<VideoLatent> {
    z_t.check_same_dims(mu, "analytic_gaussian_predict")?;
    let ab = s.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let denom = ab * sigma0 * sigma0 + 1.0 - ab;
    let out = z_t.zip_map(mu, |z, m| (sb * (z as f64 - sa * m as f64) / denom) as f32)?;
    out.ensure_finite("analytic_gaussian_predict")?;
    Ok(out)
}

/// Isotropic Gaussian data model; ignores both conditions.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    pub schedule: NoiseSchedule,
    pub mu: VideoLatent,
    pub sigma0: f64,
}

impl Denoiser for GaussianDenoiser {
    fn predict(&self, z_t: &VideoLatent, t: usize, _cond: &ConditionPair) -> Result<VideoLatent> {
        analytic_gaussian_predict(z_t, t, &self.schedule, &self.mu, self.sigma0)
    }
}

/// Gaussian data model whose samples are spatially smooth and move rigidly
/// with a known camera pan.
///
/// Per batch entry and channel the clean video is
/// `x ~ N(μ, σ0²·I + σ_g²·ΦΦᵀ)`, where the columns of `Φ` are separable
/// Fourier modes (frequencies up to `max_freq` per axis) evaluated in
/// pan-aligned coordinates `(y − v_y·f, x − v_x·f) mod (h, w)`. The mean is
/// the video condition (or `prior_mean` when it is null) plus a small color
/// shift read off the color words of the text condition. The exact posterior
/// mean of the noise is computed with the Woodbury identity; `ΦᵀΦ` is
/// diagonal because every frame samples each aligned coordinate once.
#[derive(Debug, Clone)]
pub struct CoherentGaussianDenoiser {
    pub schedule: NoiseSchedule,
    /// Pan velocity `(v_y, v_x)` in pixels per frame.
    pub pan: (i64, i64),
    pub sigma0: f64,
    pub sigma_g: f64,
    pub max_freq: usize,
    pub text_gain: f32,
    pub prior_mean: f32,
}

impl CoherentGaussianDenoiser {
    pub fn new(schedule: NoiseSchedule, pan: (i64, i64)) -> Self {
        Self { schedule, pan, sigma0: 0.03, sigma_g: 0.3, max_freq: 2, text_gain: 0.2, prior_mean: 0.5 }
    }

    fn mean(&self, z_t: &VideoLatent, cond: &ConditionPair) -> Result<VideoLatent> {
        let d = z_t.dims();
        let mut mu = match &cond.video {
            Some(v) => {
                z_t.check_same_dims(v, "coherent denoiser condition")?;
                v.clone()
            }
            None => VideoLatent::filled(d, self.prior_mean),
        };
        if let Some(text) = &cond.text {
            let colors: Vec<[f32; 3]> = (0..text.len()).filter_map(|i| text.color_of(i)).collect();
            if !colors.is_empty() {
                let mut shift = [0.0f32; 3];
                for c in &colors {
                    for k in 0..3 {
                        shift[k] += (c[k] - 0.5) * self.text_gain / colors.len() as f32;
                    }
                }
                mu =
                    VideoLatent::from_fn(d, |b, c, f, y, x| mu.get(b, c, f, y, x) + if c < 3 { shift[c] } else { 0.0 });
            }
        }
        Ok(mu)
    }
}

/// Separable real Fourier basis along one axis: rows are modes, columns positions.
fn axis_basis(n: usize, k_max: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rows = vec![vec![1.0; n]];
    let mut norms = vec![n as f64];
    for k in 1..=k_max {
        let w = 2.0 * PI * k as f64 / n as f64;
        rows.push((0..n).map(|u| (w * u as f64).cos()).collect());
        rows.push((0..n).map(|u| (w * u as f64).sin()).collect());
        norms.push(n as f64 / 2.0);
        norms.push(n as f64 / 2.0);
    }
    (rows, norms)
}

impl Denoiser for CoherentGaussianDenoiser {
    fn predict(&self, z_t: &VideoLatent, t: usize, cond: &ConditionPair) -> Result<VideoLatent> {
        let d = z_t.dims();
        let mu = self.mean(z_t, cond)?;
        let ab = self.schedule.alpha_bar(t);
        let sa = ab.sqrt();
        let a = ab * self.sigma0 * self.sigma0 + 1.0 - ab;
        let bcoef = ab * self.sigma_g * self.sigma_g;
        // frequencies at or above Nyquist would break orthogonality
        let k_max = self.max_freq.min((d.h - 1) / 2).min((d.w - 1) / 2);
        let (ybasis, ynorm) = axis_basis(d.h, k_max);
        let (xbasis, xnorm) = axis_basis(d.w, k_max);
        let na = ybasis.len();
        let nb = xbasis.len();
        let (vy, vx) = self.pan;
        let wrap = |p: usize, f: usize, v: i64, n: usize| (p as i64 - v * f as i64).rem_euclid(n as i64) as usize;

        let mut out = vec![0.0f32; d.len()];
        let plane = d.pixels();
        let per_channel = d.f * plane;
        let mut r = vec![0.0f64; per_channel];
        for b in 0..d.b {
            for c in 0..d.c {
                let base = z_t.offset(b, c, 0, 0, 0);
                for (i, ri) in r.iter_mut().enumerate() {
                    *ri = z_t.data()[base + i] as f64 - sa * mu.data()[base + i] as f64;
                }
                let mut p = vec![0.0f64; per_channel];
                if bcoef > 0.0 {
                    // coefficients Φᵀr, computed separably
                    let mut tmp = vec![0.0f64; d.f * d.h * nb];
                    for f in 0..d.f {
                        for y in 0..d.h {
                            let row = &r[(f * d.h + y) * d.w..(f * d.h + y + 1) * d.w];
                            for (bi, xb) in xbasis.iter().enumerate() {
                                let mut acc = 0.0;
                                for (x, &rv) in row.iter().enumerate() {
                                    acc += rv * xb[wrap(x, f, vx, d.w)];
                                }
                                tmp[(f * d.h + y) * nb + bi] = acc;
                            }
                        }
                    }
                    let mut coef = vec![0.0f64; na * nb];
                    for f in 0..d.f {
                        for y in 0..d.h {
                            let uy = wrap(y, f, vy, d.h);
                            for (ai, ya) in ybasis.iter().enumerate() {
                                let yv = ya[uy];
                                for bi in 0..nb {
                                    coef[ai * nb + bi] += yv * tmp[(f * d.h + y) * nb + bi];
                                }
                            }
                        }
                    }
                    for ai in 0..na {
                        for bi in 0..nb {
                            let dd = d.f as f64 * ynorm[ai] * xnorm[bi];
                            coef[ai * nb + bi] /= a / bcoef + dd;
                        }
                    }
                    // back-projection Φ·inner
                    let mut s = vec![0.0f64; nb];
                    for f in 0..d.f {
                        for y in 0..d.h {
                            let uy = wrap(y, f, vy, d.h);
                            s.iter_mut().for_each(|v| *v = 0.0);
                            for (ai, ya) in ybasis.iter().enumerate() {
                                let yv = ya[uy];
                                for bi in 0..nb {
                                    s[bi] += yv * coef[ai * nb + bi];
                                }
                            }
                            for x in 0..d.w {
                                let ux = wrap(x, f, vx, d.w);
                                let mut acc = 0.0;
                                for (bi, xb) in xbasis.iter().enumerate() {
                                    acc += s[bi] * xb[ux];
                                }
                                p[(f * d.h + y) * d.w + x] = acc;
                            }
                        }
                    }
                }
                let scale = (1.0 - ab).sqrt() / a;
                for i in 0..per_channel {
                    out[base + i] = (scale * (r[i] - p[i])) as f32;
                }
            }
        }
        let out = VideoLatent::new(d, out)?;
        check_output(z_t, &out, "CoherentGaussianDenoiser")?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::Dims;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn zero_variance_is_closed_form_reference_noise() {
        let s = schedule();
        let d = Dims::new(1, 3, 2, 3, 3);
        let mu = SeededRng::new(1).gaussian(d);
        let z = SeededRng::new(2).gaussian(d);
        let t = 321;
        let got = analytic_gaussian_predict(&z, t, &s, &mu, 0.0).unwrap();
        let want = crate::schedule::infer_reference_noise(&z, &mu, t, &s).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn mean_input_gives_zero() {
        let s = schedule();
        let d = Dims::new(1, 1, 2, 2, 2);
        let mu = SeededRng::new(3).gaussian(d);
        let t = 500;
        let a = s.alpha_bar(t).sqrt();
        let z = mu.map(|m| (a * m as f64) as f32);
        let got = analytic_gaussian_predict(&z, t, &s, &mu, 0.7).unwrap();
        assert!(got.data().iter().all(|v| v.abs() < 1e-6));
    }

    /// Importance-sampled `E[ε | z_t]` with proposal `ε ~ N(0, 1)` and weight
    /// equal to the prior density of the implied clean value.
    fn monte_carlo_posterior(z: f64, ab: f64, mu: f64, sigma0: f64, rng: &mut SeededRng) -> (f64, f64) {
        let n = 100_000;
        let (mut sw, mut swe) = (0.0, 0.0);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let e = rng.normal() as f64;
            let x0 = (z - (1.0 - ab).sqrt() * e) / ab.sqrt();
            let w = (-(x0 - mu).powi(2) / (2.0 * sigma0 * sigma0)).exp();
            sw += w;
            swe += w * e;
            samples.push((w, e));
        }
        let mean = swe / sw;
        let var: f64 = samples.iter().map(|(w, e)| (w / sw).powi(2) * (e - mean).powi(2)).sum();
        (mean, var.sqrt())
    }

    #[test]
    fn matches_monte_carlo_posterior() {
        let s = schedule();
        let mut rng = SeededRng::new(4);
        for _ in 0..5 {
            let t = 100 + rng.index(800);
            let mu = rng.uniform_range(-1.0, 1.0);
            let sigma0 = rng.uniform_range(0.5, 2.0);
            let z = rng.uniform_range(-1.5, 1.5);
            let ab = s.alpha_bar(t);
            let d = Dims::new(1, 1, 1, 1, 1);
            let got = analytic_gaussian_predict(
                &VideoLatent::filled(d, z as f32),
                t,
                &s,
                &VideoLatent::filled(d, mu as f32),
                sigma0,
            )
            .unwrap()
            .data()[0] as f64;
            let (mc, se) = monte_carlo_posterior(z as f32 as f64, ab, mu as f32 as f64, sigma0, &mut rng);
            assert!((got - mc).abs() < 3.0 * se + 1e-6, "t={t} got={got} mc={mc} se={se}");
        }
    }

    /// Solves `C·x = r` by Gaussian elimination with partial pivoting.
    fn dense_solve(mut m: Vec<Vec<f64>>, mut r: Vec<f64>) -> Vec<f64> {
        let n = r.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
            m.swap(col, piv);
            r.swap(col, piv);
            for row in col + 1..n {
                let k = m[row][col] / m[col][col];
                let pivot_row = m[col].clone();
                for (dst, &src) in m[row][col..n].iter_mut().zip(&pivot_row[col..n]) {
                    *dst -= k * src;
                }
                r[row] -= k * r[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let s: f64 = (row + 1..n).map(|c| m[row][c] * x[c]).sum();
            x[row] = (r[row] - s) / m[row][row];
        }
        x
    }

    #[test]
    fn woodbury_matches_dense_posterior() {
        let s = schedule();
        let d = Dims::new(1, 1, 3, 5, 6);
        let mut den = CoherentGaussianDenoiser::new(s.clone(), (1, -2));
        den.max_freq = 2;
        den.sigma0 = 0.2;
        den.sigma_g = 0.5;
        let cv = SeededRng::new(5).gaussian(d);
        let z = SeededRng::new(6).gaussian(d);
        let t = 200;
        let got = den.predict(&z, t, &ConditionPair::new(Some(cv.clone()), None)).unwrap();

        // dense covariance over all (f, y, x)
        let n = d.len();
        let coord = |i: usize| (i / (d.h * d.w), (i / d.w) % d.h, i % d.w);
        let basis = |f: usize, y: usize, x: usize| -> Vec<f64> {
            let uy = (y as i64 - f as i64).rem_euclid(d.h as i64) as f64;
            let ux = (x as i64 + 2 * f as i64).rem_euclid(d.w as i64) as f64;
            let axis = |u: f64, len: usize| {
                let mut v = vec![1.0];
                for k in 1..=2 {
                    let w = 2.0 * PI * k as f64 / len as f64;
                    v.push((w * u).cos());
                    v.push((w * u).sin());
                }
                v
            };
            let (ay, ax) = (axis(uy, d.h), axis(ux, d.w));
            ay.iter().flat_map(|a| ax.iter().map(move |b| a * b)).collect()
        };
        let phis: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let (f, y, x) = coord(i);
                basis(f, y, x)
            })
            .collect();
        let ab = s.alpha_bar(t);
        let m: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let g: f64 = phis[i].iter().zip(&phis[j]).map(|(a, b)| a * b).sum();
                        let diag = if i == j { ab * 0.04 + 1.0 - ab } else { 0.0 };
                        diag + ab * 0.25 * g
                    })
                    .collect()
            })
            .collect();
        let r: Vec<f64> = (0..n).map(|i| z.data()[i] as f64 - ab.sqrt() * cv.data()[i] as f64).collect();
        let sol = dense_solve(m, r);
        for (i, &s) in sol.iter().enumerate() {
            let want = (1.0 - ab).sqrt() * s;
            assert!((got.data()[i] as f64 - want).abs() < 1e-5, "i={i}: {} vs {want}", got.data()[i]);
        }
    }

    #[test]
    fn no_mode_variance_reduces_to_isotropic() {
        let s = schedule();
        let d = Dims::new(2, 3, 2, 4, 4);
        let mut den = CoherentGaussianDenoiser::new(s.clone(), (0, 1));
        den.sigma_g = 0.0;
        den.text_gain = 0.0;
        let cv = SeededRng::new(7).gaussian(d);
        let z = SeededRng::new(8).gaussian(d);
        let got = den.predict(&z, 600, &ConditionPair::new(Some(cv.clone()), None)).unwrap();
        let want = analytic_gaussian_predict(&z, 600, &s, &cv, den.sigma0).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-6);
    }
}
