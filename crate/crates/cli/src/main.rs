use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vdiff_cli::commands::data::{self, RenderSource};
use vdiff_cli::commands::edit::{self, EditArgs, EditLongArgs};
use vdiff_cli::commands::eval::{self, AblationSettings};
use vdiff_cli::commands::train;
use vdiff_cli::{json_line, ppm, RunConfig};
use vdiff_core::lvsc::CorrectionMode;

/// Video diffusion toolkit: paired-data generation, training, guided
/// editing and long-video sampling on toy video tensors.
#[derive(Parser)]
#[command(name = "vdiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        matches!(self, Toggle::On)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate, score and filter paired videos into a dataset directory.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy video denoiser on a dataset's kept samples.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        dataset: PathBuf,
        /// Receives `params/` and `loss.jsonl`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Edit a video that fits the model window, sweeping guidance and resolution.
    Edit {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Edit instruction.
        #[arg(long)]
        prompt: String,
        /// Prompt the sweep scores against (defaults to the instruction).
        #[arg(long)]
        score_prompt: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Run a single sample instead of the sweep.
        #[arg(long)]
        no_sweep: bool,
        /// Video guidance scale for --no-sweep.
        #[arg(long, requires = "no_sweep")]
        svid: Option<f32>,
        /// Write every output frame as a PPM image into this directory.
        #[arg(long)]
        dump_frames: Option<PathBuf>,
    },
    /// Edit a video longer than the model window batch by batch.
    EditLong {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
        /// Long-video sampling correction (config default when omitted).
        #[arg(long, value_enum)]
        lvsc: Option<Toggle>,
        /// Motion-compensate the correction (config default when omitted).
        #[arg(long, value_enum)]
        mc: Option<Toggle>,
        /// Also write the result with the opposite correction setting.
        #[arg(long)]
        compare: bool,
        /// Per-step correction and per-boundary MAMSE records (JSON lines).
        #[arg(long)]
        diagnostics: Option<PathBuf>,
        /// Directory for the estimated flow fields.
        #[arg(long)]
        flow_cache: Option<PathBuf>,
        #[arg(long)]
        dump_frames: Option<PathBuf>,
    },
    /// Compute metrics on videos.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long = "video", required = true)]
        videos: Vec<PathBuf>,
        /// Comma-separated: mamse, frame-consistency.
        #[arg(long, default_value = "mamse,frame-consistency")]
        metrics: String,
        /// Frame pair `i:j` for mamse (repeatable); all consecutive pairs when omitted.
        #[arg(long = "boundary", value_parser = parse_pair)]
        boundaries: Vec<(usize, usize)>,
    },
    /// Long-video ablation (none / LVSC / LVSC+MC) over a rendered panning corpus.
    Ablation {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 20)]
        videos: usize,
        /// Frame height and width of the corpus.
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Acceptance rate and mean scores of a dataset.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Render a toy-world video from a scene file or a prompt.
    Render {
        #[arg(long, conflicts_with = "prompt")]
        scene: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
        /// Camera pan `vy,vx` in pixels per frame (prompt mode).
        #[arg(long, value_parser = parse_pan, allow_hyphen_values = true)]
        pan: Option<(i64, i64)>,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_frames: Option<PathBuf>,
    },
    /// Write the built-in prompt-triplet catalog.
    Catalog {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default run configuration.
    Config,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected `i:j`, got `{s}`"))?;
    Ok((a.trim().parse().map_err(|e| format!("{e}"))?, b.trim().parse().map_err(|e| format!("{e}"))?))
}

fn parse_pan(s: &str) -> Result<(i64, i64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `vy,vx`, got `{s}`"))?;
    Ok((a.trim().parse().map_err(|e| format!("{e}"))?, b.trim().parse().map_err(|e| format!("{e}"))?))
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", json_line(value)?);
    Ok(())
}

fn mode_for(cfg: &RunConfig, lvsc: Option<Toggle>, mc: Option<Toggle>) -> CorrectionMode {
    let mut lv = cfg.long_video.clone();
    if let Some(t) = lvsc {
        lv.lvsc = t.on();
    }
    if let Some(t) = mc {
        lv.mc = t.on();
    }
    lv.mode()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            let m = data::gen_data(&cfg, &out)?;
            emit(&serde_json::json!({
                "dataset": out,
                "candidates": m.candidates,
                "kept": m.kept.len(),
                "acceptance_rate": m.acceptance_rate,
            }))?;
        }
        Command::Train { config, dataset, out } => {
            let cfg = config.load()?;
            emit(&train::train(&cfg, &dataset, &out)?)?;
        }
        Command::Edit { config, params, input, prompt, score_prompt, out, no_sweep, svid, dump_frames } => {
            let cfg = config.load()?;
            let single_s_v = no_sweep.then(|| svid.unwrap_or(cfg.long_video.s_v));
            let args = EditArgs {
                params: &params,
                input: &input,
                prompt: &prompt,
                score_prompt: score_prompt.as_deref(),
                out: &out,
                single_s_v,
                dump_frames: dump_frames.as_deref(),
            };
            let report = edit::edit(&cfg, &args)?;
            for cell in &report.cells {
                emit(cell)?;
            }
            emit(
                &serde_json::json!({ "chosen_s_v": report.chosen_s_v, "chosen_resolution": report.chosen_resolution }),
            )?;
        }
        Command::EditLong {
            config,
            params,
            input,
            prompt,
            out,
            lvsc,
            mc,
            compare,
            diagnostics,
            flow_cache,
            dump_frames,
        } => {
            let cfg = config.load()?;
            let args = EditLongArgs {
                params: &params,
                input: &input,
                prompt: &prompt,
                out: &out,
                mode: mode_for(&cfg, lvsc, mc),
                compare,
                diagnostics: diagnostics.as_deref(),
                flow_cache: flow_cache.as_deref(),
                dump_frames: dump_frames.as_deref(),
            };
            for run in edit::edit_long(&cfg, &args)?.runs {
                for b in &run.boundaries {
                    emit(b)?;
                }
                emit(&serde_json::json!({ "mode": run.mode, "output": run.output, "flow_files": run.flow_files }))?;
            }
        }
        Command::Eval { config, videos, metrics, boundaries } => {
            let cfg = config.load()?;
            let metrics = eval::parse_metrics(&metrics)?;
            if metrics.is_empty() {
                bail!("no metrics requested");
            }
            let b = (!boundaries.is_empty()).then_some(boundaries.as_slice());
            for r in eval::eval(&cfg, &videos, &metrics, b)? {
                emit(&r)?;
            }
        }
        Command::Ablation { config, videos, size } => {
            let cfg = config.load()?;
            let report = eval::ablation(&cfg, &AblationSettings::from_config(&cfg, videos, size)?)?;
            for row in &report.rows {
                emit(row)?;
            }
        }
        Command::Stats { dataset } => emit(&data::stats(&dataset)?)?,
        Command::Render { scene, prompt, pan, frames, height, width, out, dump_frames } => {
            let source = match (&scene, &prompt) {
                (Some(p), _) => RenderSource::Scene(p),
                (None, Some(prompt)) => RenderSource::Prompt { prompt, pan },
                (None, None) => bail!("render needs --scene or --prompt"),
            };
            let video = data::render(source, frames, height, width, &out)?;
            if let Some(dir) = dump_frames {
                ppm::dump_frames(&video, &dir)?;
            }
            let d = video.dims();
            emit(&serde_json::json!({ "output": out, "frames": d.f, "height": d.h, "width": d.w }))?;
        }
        Command::Catalog { out } => {
            let n = data::write_catalog(&out)?;
            emit(&serde_json::json!({ "output": out, "triplets": n }))?;
        }
        Command::Config => print!("{}", RunConfig::default().to_toml()?),
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli).context("vdiff failed") {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
