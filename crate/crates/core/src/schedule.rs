//! Diffusion coefficients, forward diffusion, closed-form reference noise
//! and the deterministic DDIM update.
//!
//! Coefficients are kept in `f64`; elementwise updates are evaluated in
//! `f64` and rounded once to `f32`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::VideoLatent;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { train_steps: 1000, beta_min: 1e-4, beta_max: 2e-2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_min` to `beta_max` over `steps` timesteps.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Param(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Param(format!(
                "beta range must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> =
            (0..steps).map(|t| beta_min + (beta_max - beta_min) * t as f64 / (steps - 1) as f64).collect();
        Self::from_betas(betas)
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::linear(cfg.train_steps, cfg.beta_min, cfg.beta_max)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Param("betas must lie in (0, 1) and number at least 2".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Param("betas must be nondecreasing".into()));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0f64;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    /// Number of training timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Param(format!("timestep {t} outside 0..{}", self.len())));
        }
        Ok(())
    }
}

/// Decreasing subsequence of timesteps visited by the sampler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPlan {
    indices: Vec<usize>,
}

impl TimestepPlan {
    /// `steps` timesteps at uniform stride over `[0, T)`, both endpoints
    /// included. A single-step plan starts from `T-1`.
    pub fn uniform(steps: usize, train_steps: usize) -> Result<Self> {
        if steps == 0 || steps > train_steps {
            return Err(Error::Param(format!("cannot take {steps} steps out of {train_steps}")));
        }
        let last = (train_steps - 1) as f64;
        let indices = if steps == 1 {
            vec![train_steps - 1]
        } else {
            (0..steps).map(|k| (last * (steps - 1 - k) as f64 / (steps - 1) as f64).round() as usize).collect()
        };
        Self::from_indices(indices)
    }

    pub fn from_indices(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Param("empty timestep plan".into()));
        }
        if indices.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Param(format!("plan must be strictly decreasing: {indices:?}")));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `(step index, t, t_prev)` triples; `t_prev` is `None` on the final step.
    pub fn steps(&self) -> impl Iterator<Item = (usize, usize, Option<usize>)> + '_ {
        self.indices.iter().enumerate().map(move |(k, &t)| (k, t, self.indices.get(k + 1).copied()))
    }

    pub fn validate_for(&self, s: &NoiseSchedule) -> Result<()> {
        match self.indices.first() {
            Some(&t) if t < s.len() => Ok(()),
            _ => Err(Error::Param(format!("plan exceeds schedule length {}", s.len()))),
        }
    }
}

fn elementwise(
    a: &VideoLatent,
    b: &VideoLatent,
    what: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<VideoLatent> {
    a.check_same_dims(b, what)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x as f64, y as f64) as f32).collect();
    let out = VideoLatent::new(a.dims(), data).map_err(|_| Error::NonFinite(what))?;
    Ok(out)
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
pub fn forward_diffuse(z0: &VideoLatent, eps: &VideoLatent, t: usize, s: &NoiseSchedule) -> Result<VideoLatent> {
    s.check_t(t)?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    elementwise(z0, eps, "forward_diffuse", |x, e| a * x + b * e)
}

/// Noise that maps the clean `z_ref` to `z_t_ref` at timestep `t`:
/// `(z_t_ref − √ᾱ_t·z_ref) / √(1−ᾱ_t)`.
pub fn infer_reference_noise(
    z_t_ref: &VideoLatent,
    z_ref: &VideoLatent,
    t: usize,
    s: &NoiseSchedule,
) -> Result<VideoLatent> {
    s.check_t(t)?;
    let ab = s.alpha_bar(t);
    if ab >= 1.0 {
        return Err(Error::DegenerateTimestep(t));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    elementwise(z_t_ref, z_ref, "infer_reference_noise", |zt, z| (zt - a * z) / b)
}

/// Deterministic (η = 0) DDIM update from `t` to `t_prev`; `None` returns the
/// predicted clean sample.
pub fn ddim_step(
    z_t: &VideoLatent,
    eps_hat: &VideoLatent,
    t: usize,
    t_prev: Option<usize>,
    s: &NoiseSchedule,
) -> Result<VideoLatent> {
    s.check_t(t)?;
    if let Some(tp) = t_prev {
        if tp > t {
            return Err(Error::Ordering { t, t_prev: tp });
        }
    }
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    match t_prev {
        None => elementwise(z_t, eps_hat, "ddim_step", |z, e| (z - b * e) / a),
        Some(tp) => {
            let abp = s.alpha_bar(tp);
            let (ap, bp) = (abp.sqrt(), (1.0 - abp).sqrt());
            elementwise(z_t, eps_hat, "ddim_step", |z, e| ap * ((z - b * e) / a) + bp * e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::Dims;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn alpha_bar_matches_high_precision_product() {
        // 50-digit recomputation of Π(1 − β_s)
        let s = default_schedule();
        let expected_last = 0.000_040_358_297_653_756_835_f64;
        let expected_mid = 0.078_587_242_881_778_24_f64;
        assert!(((s.alpha_bar(999) - expected_last) / expected_last).abs() < 1e-10);
        assert!(((s.alpha_bar(499) - expected_mid) / expected_mid).abs() < 1e-12);
    }

    #[test]
    fn two_step_schedule_unrolled() {
        let s = NoiseSchedule::linear(2, 0.1, 0.3).unwrap();
        assert!((s.alpha_bar(0) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn schedule_invariants() {
        let s = default_schedule();
        assert!(s.alpha_bar(0) < 1.0 && s.alpha_bar(999) > 0.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        let mut acc = 1.0;
        for t in 0..s.len() {
            acc *= 1.0 - s.beta(t);
            assert!(((s.alpha_bar(t) - acc) / acc).abs() < 1e-6);
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(matches!(NoiseSchedule::linear(10, 0.2, 0.1), Err(Error::Param(_))));
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
    }

    #[test]
    fn uniform_plan_covers_endpoints() {
        let p = TimestepPlan::uniform(30, 1000).unwrap();
        assert_eq!(p.len(), 30);
        assert_eq!(p.indices()[0], 999);
        assert_eq!(*p.indices().last().unwrap(), 0);
        assert!(p.indices().windows(2).all(|w| w[1] < w[0]));
        assert_eq!(TimestepPlan::uniform(1, 1000).unwrap().indices(), &[999]);
        assert!(TimestepPlan::from_indices(vec![5, 5, 0]).is_err());
    }

    #[test]
    fn forward_diffuse_zero_signal() {
        let s = default_schedule();
        let d = Dims::new(1, 2, 2, 3, 3);
        let eps = SeededRng::new(1).gaussian(d);
        let out = forward_diffuse(&VideoLatent::zeros(d), &eps, 400, &s).unwrap();
        let k = (1.0 - s.alpha_bar(400)).sqrt();
        for (o, e) in out.data().iter().zip(eps.data()) {
            assert_eq!(*o, (k * *e as f64) as f32);
        }
    }

    #[test]
    fn forward_diffuse_unit_alpha_limit() {
        // ᾱ close to 1 (β tiny) returns z0 to float precision
        let s = NoiseSchedule::linear(2, 1e-12, 1e-12).unwrap();
        let d = Dims::new(1, 1, 1, 2, 2);
        let z0 = SeededRng::new(2).gaussian(d);
        let eps = SeededRng::new(3).gaussian(d);
        let out = forward_diffuse(&z0, &eps, 0, &s).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-5);
    }

    #[test]
    fn reference_noise_examples() {
        let s = default_schedule();
        let d = Dims::new(1, 3, 4, 5, 5);
        let eps = SeededRng::new(4).gaussian(d);
        let t = 250;
        let k = (1.0 - s.alpha_bar(t)).sqrt();
        let zt = eps.map(|e| (k * e as f64) as f32);
        let rec = infer_reference_noise(&zt, &VideoLatent::zeros(d), t, &s).unwrap();
        assert!(rec.max_abs_diff(&eps) <= 1e-6);

        let zref = SeededRng::new(5).gaussian(d);
        let a = s.alpha_bar(t).sqrt();
        let zt = zref.map(|z| (a * z as f64) as f32);
        let rec = infer_reference_noise(&zt, &zref, t, &s).unwrap();
        assert!(rec.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn reference_noise_rejects_unit_alpha() {
        let s = NoiseSchedule { betas: vec![1e-300, 1e-300], alpha_bar: vec![1.0, 1.0] };
        let d = Dims::new(1, 1, 1, 1, 1);
        let z = VideoLatent::zeros(d);
        assert!(matches!(infer_reference_noise(&z, &z, 0, &s), Err(Error::DegenerateTimestep(0))));
    }

    #[test]
    fn reference_noise_inverts_forward_diffusion() {
        let s = default_schedule();
        let mut rng = SeededRng::new(6);
        let d = Dims::new(1, 2, 2, 4, 4);
        for _ in 0..100 {
            let t = rng.index(s.len());
            let z0 = rng.gaussian(d);
            let eps = rng.gaussian(d);
            let zt = forward_diffuse(&z0, &eps, t, &s).unwrap();
            let rec = infer_reference_noise(&zt, &z0, t, &s).unwrap();
            let scale = eps.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(rec.max_abs_diff(&eps) / scale < 1e-5, "t={t}");
        }
    }

    #[test]
    fn ddim_final_step_recovers_clean_sample() {
        let s = default_schedule();
        let d = Dims::new(1, 3, 2, 4, 4);
        let z0 = SeededRng::new(7).gaussian(d);
        let eps = SeededRng::new(8).gaussian(d);
        for t in [0, 10, 500, 999] {
            let zt = forward_diffuse(&z0, &eps, t, &s).unwrap();
            let out = ddim_step(&zt, &eps, t, None, &s).unwrap();
            let tol = if t > 900 { 1e-3 } else { 1e-5 };
            assert!(out.max_abs_diff(&z0) < tol, "t={t}: {}", out.max_abs_diff(&z0));
        }
    }

    #[test]
    fn ddim_same_timestep_is_fixed_point() {
        let s = default_schedule();
        let d = Dims::new(1, 3, 2, 4, 4);
        let z = SeededRng::new(9).gaussian(d);
        let e = SeededRng::new(10).gaussian(d);
        let out = ddim_step(&z, &e, 300, Some(300), &s).unwrap();
        assert!(out.max_abs_diff(&z) < 1e-6);
    }

    #[test]
    fn ddim_rejects_increasing_time() {
        let s = default_schedule();
        let z = VideoLatent::zeros(Dims::new(1, 1, 1, 1, 1));
        assert!(matches!(ddim_step(&z, &z, 10, Some(11), &s), Err(Error::Ordering { .. })));
    }
}
