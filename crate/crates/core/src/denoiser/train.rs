//! Noise-prediction training for [`ToyDenoiser`]: reverse-mode gradients
//! and an Adam optimizer.

use serde::{Deserialize, Serialize};

use super::toy::{Grads, ToyDenoiser};
use super::{condition_dropout, ConditionPair, Denoiser, NoControl};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::tensor::VideoLatent;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub p_drop_video: f64,
    pub p_drop_text: f64,
    /// Cosine-decay the learning rate to zero over this many updates;
    /// constant when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            p_drop_video: 0.05,
            p_drop_text: 0.05,
            decay_steps: None,
        }
    }
}

impl TrainConfig {
    /// Learning rate of the update that follows `completed` updates.
    pub fn learning_rate_at(&self, completed: u64) -> f64 {
        match self.decay_steps {
            Some(n) if n > 0 => {
                let frac = (completed as f64 / n as f64).min(1.0);
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            _ => self.learning_rate,
        }
    }
}

/// One training pair: the edited video is the diffusion target, the input
/// video and the edit prompt are the conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub target: VideoLatent,
    pub cond: ConditionPair,
}

/// Mean squared noise-prediction error of `den` on one `(x0, t, ε)` draw.
pub fn diffusion_loss(
    den: &dyn Denoiser,
    x0: &VideoLatent,
    t: usize,
    eps: &VideoLatent,
    cond: &ConditionPair,
    s: &NoiseSchedule,
) -> Result<f64> {
    let z_t = forward_diffuse(x0, eps, t, s)?;
    let pred = den.predict(&z_t, t, cond)?;
    Ok(mse(&pred, eps))
}

fn mse(a: &VideoLatent, b: &VideoLatent) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

/// Loss of one draw and its gradient (scaled by `weight`) accumulated into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad(
    model: &ToyDenoiser,
    x0: &VideoLatent,
    t: usize,
    eps: &VideoLatent,
    cond: &ConditionPair,
    s: &NoiseSchedule,
    weight: f64,
    grads: &mut Grads,
) -> Result<f64> {
    let z_t = forward_diffuse(x0, eps, t, s)?;
    let (pred, cache) = model.forward(&z_t, t, cond, &mut NoControl, true)?;
    let n = pred.len() as f64;
    let dout = pred.zip_map(eps, |p, e| (weight * 2.0 * (p as f64 - e as f64) / n) as f32)?;
    model.backward(&cache.expect("cache requested"), &dout, grads)?;
    Ok(mse(&pred, eps))
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(model: &ToyDenoiser) -> Self {
        Self { m: model.zero_grads(), v: model.zero_grads(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn apply(&mut self, model: &mut ToyDenoiser, grads: &Grads, cfg: &TrainConfig) {
        self.steps += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.steps as i32);
        let lr = cfg.learning_rate_at(self.steps - 1);
        for (((p, g), m), v) in model.params_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.epsilon);
                p.data[i] = (p.data[i] as f64 - update) as f32;
            }
        }
    }
}

/// One optimizer step on `batch`: per example a uniform timestep, fresh
/// Gaussian noise and condition dropout. Returns the mean batch loss
/// measured before the update.
pub fn train_step(
    model: &mut ToyDenoiser,
    opt: &mut Adam,
    batch: &[TrainingExample],
    rng: &mut SeededRng,
    s: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut grads = model.zero_grads();
    let weight = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ex in batch {
        let t = rng.index(s.len());
        let eps = rng.gaussian(ex.target.dims());
        let cond = condition_dropout(&ex.cond, rng, cfg.p_drop_video, cfg.p_drop_text)?;
        loss += weight * loss_and_grad(model, &ex.target, t, &eps, &cond, s, weight, &mut grads)?;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    opt.apply(model, &grads, cfg);
    Ok(loss)
}

/// Fixed `(t, ε)` draws for measuring loss reproducibly.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub draws: Vec<(usize, VideoLatent)>,
}

impl ProbeSet {
    pub fn new(example: &TrainingExample, count: usize, s: &NoiseSchedule, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let draws = (0..count).map(|_| (rng.index(s.len()), rng.gaussian(example.target.dims()))).collect();
        Self { draws }
    }

    pub fn loss(&self, den: &dyn Denoiser, example: &TrainingExample, s: &NoiseSchedule) -> Result<f64> {
        let mut total = 0.0;
        for (t, eps) in &self.draws {
            total += diffusion_loss(den, &example.target, *t, eps, &example.cond, s)?;
        }
        Ok(total / self.draws.len() as f64)
    }
}

/// Directional-derivative check along the `picks` coordinates with the
/// largest gradient magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientProbe {
    /// `(parameter name, flat index)` of each probed coordinate.
    pub coords: Vec<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientProbe {
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-12)
    }
}

pub fn gradient_probe(
    model: &ToyDenoiser,
    example: &TrainingExample,
    t: usize,
    eps: &VideoLatent,
    s: &NoiseSchedule,
    picks: usize,
    step: f32,
) -> Result<GradientProbe> {
    let mut grads = model.zero_grads();
    loss_and_grad(model, &example.target, t, eps, &example.cond, s, 1.0, &mut grads)?;
    let mut flat: Vec<(f64, usize, usize)> =
        grads.iter().enumerate().flat_map(|(p, g)| g.iter().enumerate().map(move |(i, &v)| (v.abs(), p, i))).collect();
    flat.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    flat.truncate(picks);
    // unit direction with the gradient's sign pattern
    let scale = (flat.len() as f64).sqrt().recip();
    let dir: Vec<(usize, usize, f64)> = flat.iter().map(|&(_, p, i)| (p, i, grads[p][i].signum() * scale)).collect();
    let analytic: f64 = dir.iter().map(|&(p, i, d)| grads[p][i] * d).sum();

    let shifted = |sign: f32| -> Result<f64> {
        let mut m = model.clone();
        for &(p, i, d) in &dir {
            m.params_mut()[p].data[i] += sign * step * d as f32;
        }
        diffusion_loss(&m, &example.target, t, eps, &example.cond, s)
    };
    let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * step as f64);
    let coords = dir.iter().map(|&(p, i, _)| (model.params()[p].name.clone(), i)).collect();
    Ok(GradientProbe { coords, analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ToyConfig;
    use crate::schedule::infer_reference_noise;
    use crate::tensor::Dims;
    use crate::text::PromptEmbedding;

    fn example(seed: u64) -> TrainingExample {
        let dims = Dims::new(1, 3, 3, 6, 6);
        let input = VideoLatent::from_fn(dims, |_, c, f, y, x| ((c + f + y * x) % 5) as f32 / 5.0);
        let target = input.map(|v| 1.0 - v);
        let mut rng = SeededRng::new(seed);
        let jitter = rng.gaussian(dims).map(|v| 0.01 * v);
        let target = target.zip_map(&jitter, |a, b| a + b).unwrap();
        TrainingExample { target, cond: ConditionPair::full(input, PromptEmbedding::encode("invert the colors")) }
    }

    /// Predicts the exact noise from knowledge of the clean target.
    struct Oracle<'a> {
        x0: &'a VideoLatent,
        s: &'a NoiseSchedule,
    }

    impl Denoiser for Oracle<'_> {
        fn predict(&self, z_t: &VideoLatent, t: usize, _: &ConditionPair) -> Result<VideoLatent> {
            infer_reference_noise(z_t, self.x0, t, self.s)
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let ex = example(1);
        let mut rng = SeededRng::new(2);
        let eps = rng.gaussian(ex.target.dims());
        let loss = diffusion_loss(&Oracle { x0: &ex.target, s: &s }, &ex.target, 400, &eps, &ex.cond, &s).unwrap();
        assert!(loss < 1e-9, "{loss}");
    }

    #[test]
    fn zero_learning_rate_is_a_bitwise_no_op() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let mut model = ToyDenoiser::init(ToyConfig::default(), 1).unwrap();
        let before = model.clone();
        let mut opt = Adam::new(&model);
        let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        let mut rng = SeededRng::new(3);
        for _ in 0..3 {
            train_step(&mut model, &mut opt, &[example(1)], &mut rng, &s, &cfg).unwrap();
        }
        for (a, b) in model.params().iter().zip(before.params()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let mut model = ToyDenoiser::init(ToyConfig::default(), 1).unwrap();
        let mut opt = Adam::new(&model);
        let r = train_step(&mut model, &mut opt, &[], &mut SeededRng::new(0), &s, &TrainConfig::default());
        assert!(matches!(r, Err(Error::EmptyBatch)));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let mut model = ToyDenoiser::init(ToyConfig::default(), 4).unwrap();
        // exercise the temporal branch too
        let mut rng = SeededRng::new(5);
        for p in model.params_mut().iter_mut().filter(|p| p.name.ends_with("temporal.o")) {
            p.data.iter_mut().for_each(|v| *v = 0.2 * rng.normal());
        }
        let ex = example(6);
        let eps = rng.gaussian(ex.target.dims());
        for t in [20, 300, 900] {
            let probe = gradient_probe(&model, &ex, t, &eps, &s, 3, 1e-2).unwrap();
            assert!(probe.relative_error() < 1e-3, "t={t}: {probe:?}");
        }
    }

    #[test]
    fn full_gradient_matches_random_direction() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let mut model = ToyDenoiser::init(ToyConfig::default(), 7).unwrap();
        let mut rng = SeededRng::new(8);
        for p in model.params_mut().iter_mut().filter(|p| p.name.ends_with("temporal.o")) {
            p.data.iter_mut().for_each(|v| *v = 0.2 * rng.normal());
        }
        let ex = example(9);
        let eps = rng.gaussian(ex.target.dims());
        let t = 250;
        let mut grads = model.zero_grads();
        loss_and_grad(&model, &ex.target, t, &eps, &ex.cond, &s, 1.0, &mut grads).unwrap();
        let dirs: Vec<Vec<f32>> =
            model.params().iter().map(|p| (0..p.data.len()).map(|_| rng.normal()).collect()).collect();
        let analytic: f64 =
            grads.iter().zip(&dirs).flat_map(|(g, d)| g.iter().zip(d).map(|(&a, &b)| a * b as f64)).sum();
        let h = 1e-3f32;
        let loss_at = |sign: f32| {
            let mut m = model.clone();
            for (p, d) in m.params_mut().iter_mut().zip(&dirs) {
                p.data.iter_mut().zip(d).for_each(|(v, &dv)| *v += sign * h * dv);
            }
            diffusion_loss(&m, &ex.target, t, &eps, &ex.cond, &s).unwrap()
        };
        let numeric = (loss_at(1.0) - loss_at(-1.0)) / (2.0 * h as f64);
        assert!((analytic - numeric).abs() < 2e-2 * analytic.abs(), "analytic={analytic} numeric={numeric}");
    }

    #[test]
    fn cosine_decay_reaches_zero_and_stays() {
        let cfg = TrainConfig { learning_rate: 0.4, decay_steps: Some(4), ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..6).map(|k| cfg.learning_rate_at(k)).collect();
        assert_eq!(lrs[0], 0.4);
        assert!((lrs[2] - 0.2).abs() < 1e-12);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs[4].abs() < 1e-12 && lrs[5].abs() < 1e-12);
        assert_eq!(TrainConfig::default().learning_rate_at(10_000), TrainConfig::default().learning_rate);
    }

    #[test]
    fn overfits_a_single_example() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let mut model = ToyDenoiser::init(ToyConfig::default(), 11).unwrap();
        let ex = example(12);
        let probes = ProbeSet::new(&ex, 64, &s, 13);
        let initial = probes.loss(&model, &ex, &s).unwrap();
        let mut opt = Adam::new(&model);
        let mut rng = SeededRng::new(14);
        let batch = [ex.clone()];
        let cfg = TrainConfig { learning_rate: 1e-2, decay_steps: Some(500), ..TrainConfig::default() };
        for _ in 0..500 {
            train_step(&mut model, &mut opt, &batch, &mut rng, &s, &cfg).unwrap();
        }
        let last = probes.loss(&model, &ex, &s).unwrap();
        eprintln!("initial={initial} final={last}");
        assert!(last < 0.1 * initial, "initial={initial} final={last}");
    }
}
