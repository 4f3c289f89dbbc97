//! The run configuration: one TOML document, fully validated before any
//! command starts working. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use vdiff_core::datagen::backbone::BackboneConfig;
use vdiff_core::datagen::{DatasetConfig, Thresholds};
use vdiff_core::denoiser::{ToyConfig, TrainConfig};
use vdiff_core::flow::FlowConfig;
use vdiff_core::guidance::SweepGrid;
use vdiff_core::lvsc::{CorrectionMode, LongVideoPlan};
use vdiff_core::schedule::ScheduleConfig;
use vdiff_core::{NoiseSchedule, TimestepPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random draw of a run derives from it.
    pub seed: u64,
    /// Worker threads for parallel sections. Outputs do not depend on it.
    pub threads: usize,
    pub schedule: ScheduleConfig,
    pub sampling: SamplingSection,
    pub guidance: GuidanceSection,
    pub long_video: LongVideoSection,
    pub datagen: DatagenSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            schedule: ScheduleConfig::default(),
            sampling: SamplingSection::default(),
            guidance: GuidanceSection::default(),
            long_video: LongVideoSection::default(),
            datagen: DatagenSection::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub ddim_steps: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self { ddim_steps: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    /// Video guidance scales tried by the sweep.
    pub s_v: Vec<f32>,
    pub s_t: f32,
    /// Sampling resolutions tried by the sweep, `[h, w]`.
    pub resolutions: Vec<[usize; 2]>,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self { s_v: vec![1.2, 1.5, 1.8], s_t: 10.0, resolutions: vec![[32, 32], [48, 48]] }
    }
}

impl GuidanceSection {
    pub fn grid(&self) -> SweepGrid {
        SweepGrid {
            s_v: self.s_v.clone(),
            resolutions: self.resolutions.iter().map(|r| (r[0], r[1])).collect(),
            s_t: self.s_t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LongVideoSection {
    /// Frames the model sees per batch (F).
    pub batch_frames: usize,
    /// Reference frames carried into each later batch (N).
    pub reference_frames: usize,
    /// Length of rendered long inputs and of ablation videos (M).
    pub total_frames: usize,
    pub lvsc: bool,
    pub mc: bool,
    /// Video guidance scale for long-video sampling.
    pub s_v: f32,
    pub flow: FlowConfig,
}

impl Default for LongVideoSection {
    fn default() -> Self {
        Self {
            batch_frames: 16,
            reference_frames: 4,
            total_frames: 32,
            lvsc: true,
            mc: false,
            s_v: 1.5,
            flow: FlowConfig::default(),
        }
    }
}

impl LongVideoSection {
    pub fn mode(&self) -> CorrectionMode {
        match (self.lvsc, self.mc) {
            (false, _) => CorrectionMode::Independent,
            (true, false) => CorrectionMode::Lvsc,
            (true, true) => CorrectionMode::LvscMc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenSection {
    /// Prompt-triplet catalog; the built-in catalog when absent. Relative
    /// paths resolve against the config file's directory.
    pub catalog: Option<PathBuf>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seeds_per_triplet: usize,
    pub thresholds: Thresholds,
    pub backbone: BackboneConfig,
}

impl Default for DatagenSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            catalog: None,
            frames: d.frames,
            height: d.height,
            width: d.width,
            seeds_per_triplet: d.seeds_per_triplet,
            thresholds: d.thresholds,
            backbone: d.backbone,
        }
    }
}

impl DatagenSection {
    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            frames: self.frames,
            height: self.height,
            width: self.width,
            seeds_per_triplet: self.seeds_per_triplet,
            thresholds: self.thresholds,
            backbone: self.backbone,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    /// Use at most this many kept samples (all when absent).
    pub max_samples: Option<usize>,
    pub model: ToyConfig,
    pub optimizer: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 2,
            max_samples: None,
            model: ToyConfig::default(),
            // cosine decay over the default step count
            optimizer: TrainConfig { learning_rate: 1e-2, decay_steps: Some(200), ..TrainConfig::default() },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file; a relative catalog path is made
    /// relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        if let (Some(cat), Some(dir)) = (cfg.datagen.catalog.as_mut(), path.parent()) {
            if cat.is_relative() {
                *cat = dir.join(&*cat);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::from_config(&self.schedule)?)
    }

    pub fn timestep_plan(&self) -> Result<TimestepPlan> {
        Ok(TimestepPlan::uniform(self.sampling.ddim_steps, self.schedule.train_steps)?)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.threads >= 1, "threads must be at least 1");
        let s = self.noise_schedule().context("schedule")?;
        self.timestep_plan().context("sampling")?.validate_for(&s)?;
        self.guidance.grid().cells().context("guidance")?;
        let lv = &self.long_video;
        LongVideoPlan::new(lv.total_frames, lv.batch_frames, lv.reference_frames).context("long_video")?;
        ensure!(lv.s_v.is_finite() && lv.s_v >= 1.0, "long_video.s_v must be finite and >= 1");
        ensure!(lv.flow.block > 0 && lv.flow.levels > 0, "long_video.flow needs a positive block size and level count");
        let dg = &self.datagen;
        ensure!(dg.frames > 0 && dg.height > 0 && dg.width > 0, "datagen video size must be positive");
        ensure!(dg.seeds_per_triplet > 0, "datagen.seeds_per_triplet must be positive");
        let th = dg.thresholds;
        ensure!(
            th.text.is_finite() && th.direction.is_finite() && th.frame.is_finite(),
            "datagen.thresholds must be finite"
        );
        let tr = &self.train;
        tr.model.validate().context("train.model")?;
        ensure!(tr.batch_size > 0, "train.batch_size must be positive");
        ensure!(tr.max_samples != Some(0), "train.max_samples must be positive when set");
        if tr.model.train_steps != self.schedule.train_steps {
            bail!(
                "train.model.train_steps ({}) must equal schedule.train_steps ({})",
                tr.model.train_steps,
                self.schedule.train_steps
            );
        }
        let o = tr.optimizer;
        ensure!(
            o.learning_rate >= 0.0 && o.learning_rate.is_finite(),
            "train.optimizer.learning_rate must be finite and >= 0"
        );
        ensure!(o.decay_steps != Some(0), "train.optimizer.decay_steps must be positive");
        ensure!(
            (0.0..=1.0).contains(&o.p_drop_video) && (0.0..=1.0).contains(&o.p_drop_text),
            "dropout probabilities must lie in [0, 1]"
        );
        Ok(())
    }

    /// A bounded worker pool for this run.
    pub fn pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.threads).build()?)
    }
}
