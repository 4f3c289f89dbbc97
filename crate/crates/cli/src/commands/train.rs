use std::io::Write;
use std::path::Path;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use vdiff_core::datagen::dataset::load_kept;
use vdiff_core::denoiser::{train_step, Adam, ConditionPair, ToyDenoiser, TrainingExample};
use vdiff_core::text::PromptEmbedding;
use vdiff_core::SeededRng;

use crate::config::RunConfig;

pub const PARAMS_DIR: &str = "params";
pub const LOSS_LOG: &str = "loss.jsonl";

/// RNG streams of the master seed used by training.
const INIT_STREAM: u64 = 0x7261_696e;
const STEP_STREAM: u64 = 0x7261_696f;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub samples: usize,
    pub steps: usize,
    pub parameters: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

/// Turns kept dataset samples into training examples: the edited video is
/// the target, the input video and the edit instruction are the conditions.
pub fn load_examples(dataset: &Path, max_samples: Option<usize>) -> Result<Vec<TrainingExample>> {
    let mut kept = load_kept(dataset)?;
    if kept.is_empty() {
        bail!("dataset {} has no kept samples to train on", dataset.display());
    }
    if let Some(n) = max_samples {
        kept.truncate(n);
    }
    Ok(kept
        .into_iter()
        .map(|s| TrainingExample {
            cond: ConditionPair::full(s.input, PromptEmbedding::encode(&s.meta.triplet.edit)),
            target: s.edited,
        })
        .collect())
}

/// The untrained model a run starts from, seeded from the master seed.
pub fn initial_model(cfg: &RunConfig) -> Result<ToyDenoiser> {
    let seed = SeededRng::with_stream(cfg.seed, INIT_STREAM).next_u64();
    Ok(ToyDenoiser::init(cfg.train.model, seed)?)
}

/// Trains a fresh toy denoiser; writes `params/` and `loss.jsonl` under `out`.
pub fn train(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<TrainReport> {
    let examples = load_examples(dataset, cfg.train.max_samples)?;
    let schedule = cfg.noise_schedule()?;
    let mut model = initial_model(cfg)?;
    let mut opt = Adam::new(&model);
    let mut rng = SeededRng::with_stream(cfg.seed, STEP_STREAM);
    std::fs::create_dir_all(out)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join(LOSS_LOG))?);
    let (mut first, mut last) = (None, None);
    let bs = cfg.train.batch_size.min(examples.len());
    for step in 0..cfg.train.steps {
        let batch: Vec<TrainingExample> = (0..bs).map(|_| examples[rng.index(examples.len())].clone()).collect();
        let loss = train_step(&mut model, &mut opt, &batch, &mut rng, &schedule, &cfg.train.optimizer)?;
        first.get_or_insert(loss);
        last = Some(loss);
        writeln!(log, "{}", serde_json::to_string(&LossRecord { step, loss })?)?;
    }
    log.flush()?;
    let params = out.join(PARAMS_DIR);
    std::fs::create_dir_all(&params)?;
    model.save(&params)?;
    Ok(TrainReport {
        samples: examples.len(),
        steps: cfg.train.steps,
        parameters: model.num_parameters(),
        first_loss: first,
        last_loss: last,
    })
}
