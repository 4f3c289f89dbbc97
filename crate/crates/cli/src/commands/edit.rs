use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use vdiff_core::denoiser::{ConditionPair, ToyDenoiser};
use vdiff_core::embed::ToyEmbedder;
use vdiff_core::flow::{mamse, FlowField};
use vdiff_core::guidance::{sweep_and_pick, GuidanceConfig, SweepGrid, SweepRecord};
use vdiff_core::lvsc::{sample_long_video, CorrectionMode, LongVideoEvent, LongVideoPlan, LongVideoSettings};
use vdiff_core::text::PromptEmbedding;
use vdiff_core::vten::{read_video, write_tensor, write_video, RawTensor};
use vdiff_core::VideoLatent;

use crate::config::RunConfig;
use crate::ppm::dump_frames;

pub struct EditArgs<'a> {
    pub params: &'a Path,
    pub input: &'a Path,
    pub prompt: &'a str,
    /// Prompt the sweep scores against; the edit prompt when absent.
    pub score_prompt: Option<&'a str>,
    pub out: &'a Path,
    /// Single run at this video guidance scale and the input resolution.
    pub single_s_v: Option<f32>,
    pub dump_frames: Option<&'a Path>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellRecord {
    #[serde(flatten)]
    pub record: SweepRecord,
    pub chosen: bool,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EditReport {
    pub cells: Vec<CellRecord>,
    pub chosen_s_v: f32,
    pub chosen_resolution: (usize, usize),
}

fn read_input(path: &Path) -> Result<VideoLatent> {
    read_video(path).with_context(|| format!("cannot read input video {}", path.display()))
}

fn load_model(path: &Path) -> Result<ToyDenoiser> {
    ToyDenoiser::load(path).with_context(|| format!("cannot load parameters from {}", path.display()))
}

pub fn edit(cfg: &RunConfig, args: &EditArgs<'_>) -> Result<EditReport> {
    let input = read_input(args.input)?;
    let d = input.dims();
    let window = cfg.long_video.batch_frames;
    if d.f > window {
        bail!("input has {} frames but the model window is {window}; use `edit-long` for longer videos", d.f);
    }
    let model = load_model(args.params)?;
    let schedule = cfg.noise_schedule()?;
    let plan = cfg.timestep_plan()?;
    let grid = match args.single_s_v {
        Some(s_v) => SweepGrid::single(s_v, cfg.guidance.s_t, (d.h, d.w)),
        None => cfg.guidance.grid(),
    };
    let cond = ConditionPair::full(input, PromptEmbedding::encode(args.prompt));
    let embedder = ToyEmbedder::default();
    let score_prompt = args.score_prompt.unwrap_or(args.prompt);
    let outcome = cfg
        .pool()?
        .install(|| sweep_and_pick(&model, &schedule, &cond, &grid, &plan, &embedder, score_prompt, cfg.seed))?;
    write_video(args.out, outcome.best_sample())?;
    if let Some(dir) = args.dump_frames {
        dump_frames(outcome.best_sample(), dir)?;
    }
    let best = outcome.best_record().clone();
    Ok(EditReport {
        cells: outcome
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| CellRecord {
                record: r.clone(),
                chosen: i == outcome.best,
                output: (i == outcome.best).then(|| args.out.to_path_buf()),
            })
            .collect(),
        chosen_s_v: best.s_v,
        chosen_resolution: (best.height, best.width),
    })
}

pub struct EditLongArgs<'a> {
    pub params: &'a Path,
    pub input: &'a Path,
    pub prompt: &'a str,
    pub out: &'a Path,
    pub mode: CorrectionMode,
    /// Also sample with the opposite LVSC setting and write it next to `out`.
    pub compare: bool,
    pub diagnostics: Option<&'a Path>,
    /// Directory receiving the estimated flow fields when motion compensation runs.
    pub flow_cache: Option<&'a Path>,
    pub dump_frames: Option<&'a Path>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundaryRecord {
    pub mode: &'static str,
    pub boundary: (usize, usize),
    pub mamse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrectionRecord {
    pub mode: &'static str,
    pub batch: usize,
    pub step: usize,
    pub t: usize,
    pub mean_abs_correction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LongRunReport {
    pub mode: &'static str,
    pub output: PathBuf,
    pub boundaries: Vec<BoundaryRecord>,
    pub flow_files: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EditLongReport {
    pub runs: Vec<LongRunReport>,
}

fn write_flow(dir: &Path, batch: usize, flows: &[Vec<FlowField>]) -> Result<usize> {
    let dir = dir.join(format!("batch_{batch:02}"));
    std::fs::create_dir_all(&dir)?;
    let mut n = 0;
    for (i, row) in flows.iter().enumerate() {
        for (m, f) in row.iter().enumerate() {
            write_tensor(
                &dir.join(format!("ref_{i:02}_new_{m:02}.vten")),
                &RawTensor::new(vec![f.h, f.w, 2], f.data.clone())?,
            )?;
            n += 1;
        }
    }
    Ok(n)
}

fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{tag}.vten"))
}

pub fn edit_long(cfg: &RunConfig, args: &EditLongArgs<'_>) -> Result<EditLongReport> {
    let input = read_input(args.input)?;
    let d = input.dims();
    let lv = &cfg.long_video;
    if d.f <= lv.batch_frames {
        bail!("input has {} frames, which fits the {}-frame model window; use `edit`", d.f, lv.batch_frames);
    }
    let model = load_model(args.params)?;
    let schedule = cfg.noise_schedule()?;
    let plan = cfg.timestep_plan()?;
    let lplan = LongVideoPlan::new(d.f, lv.batch_frames, lv.reference_frames)?;
    let g = GuidanceConfig::new(lv.s_v, cfg.guidance.s_t)?;
    let cond = ConditionPair::full(input, PromptEmbedding::encode(args.prompt));

    let mut modes = vec![(args.mode, args.out.to_path_buf())];
    if args.compare {
        let other =
            if args.mode == CorrectionMode::Independent { CorrectionMode::Lvsc } else { CorrectionMode::Independent };
        modes.push((other, sibling(args.out, other.name())));
    }
    let mut diag = match args.diagnostics {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let pool = cfg.pool()?;
    let mut runs = Vec::new();
    for (mode, out) in modes {
        let settings = LongVideoSettings { plan: lplan, mode, flow: lv.flow };
        let mut corrections = Vec::new();
        let mut flow_files = 0usize;
        let mut flow_err: Option<anyhow::Error> = None;
        let video = pool.install(|| {
            let mut observer = |ev: &LongVideoEvent<'_>| match ev {
                LongVideoEvent::Corrected { batch, step, t, mean_abs } => corrections.push(CorrectionRecord {
                    mode: mode.name(),
                    batch: *batch,
                    step: *step,
                    t: *t,
                    mean_abs_correction: *mean_abs,
                }),
                LongVideoEvent::Flows { batch, flows } => {
                    if let Some(dir) = args.flow_cache {
                        match write_flow(dir, *batch, flows) {
                            Ok(n) => flow_files += n,
                            Err(e) => flow_err = flow_err.take().or(Some(e)),
                        }
                    }
                }
                _ => {}
            };
            sample_long_video(&model, &schedule, &cond, g, &plan, &settings, cfg.seed, &mut observer)
        })?;
        if let Some(e) = flow_err {
            return Err(e.context("cannot cache flow fields"));
        }
        write_video(&out, &video)?;
        if let Some(dir) = args.dump_frames.filter(|_| out == args.out) {
            dump_frames(&video, dir)?;
        }
        let clamped = video.clamp(0.0, 1.0);
        let boundaries = lplan
            .boundaries()
            .into_iter()
            .map(|b| Ok(BoundaryRecord { mode: mode.name(), boundary: b, mamse: mamse(&clamped, b, &lv.flow)? }))
            .collect::<Result<Vec<_>>>()?;
        if let Some(w) = diag.as_mut() {
            for r in &corrections {
                writeln!(w, "{}", serde_json::to_string(r)?)?;
            }
            for r in &boundaries {
                writeln!(w, "{}", serde_json::to_string(r)?)?;
            }
        }
        runs.push(LongRunReport { mode: mode.name(), output: out, boundaries, flow_files });
    }
    if let Some(mut w) = diag {
        w.flush()?;
    }
    Ok(EditLongReport { runs })
}
