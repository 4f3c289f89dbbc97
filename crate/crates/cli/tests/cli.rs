use std::path::Path;
use std::process::{Command, Output};

use vdiff_cli::commands::train::initial_model;
use vdiff_cli::RunConfig;
use vdiff_core::datagen::Thresholds;
use vdiff_core::denoiser::ToyDenoiser;
use vdiff_core::vten::{read_bundle, read_video};

fn vdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdiff")).args(args).output().expect("spawn vdiff")
}

fn ok(args: &[&str]) -> String {
    let out = vdiff(args);
    assert!(out.status.success(), "vdiff {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn failing(args: &[&str]) -> String {
    let out = vdiff(args);
    assert!(!out.status.success(), "vdiff {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a small configuration and returns its path.
fn small_config(dir: &Path, edit: impl FnOnce(&mut RunConfig)) -> String {
    let mut cfg = RunConfig::default();
    cfg.sampling.ddim_steps = 4;
    cfg.datagen.frames = 3;
    cfg.datagen.height = 8;
    cfg.datagen.width = 8;
    cfg.datagen.seeds_per_triplet = 1;
    cfg.train.steps = 3;
    cfg.long_video.batch_frames = 4;
    cfg.long_video.reference_frames = 2;
    edit(&mut cfg);
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn write_catalog(dir: &Path, lines: &str) -> String {
    let path = dir.join("catalog.txt");
    std::fs::write(&path, lines).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_metric_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let video = dir.path().join("v.vten");
    ok(&[
        "render",
        "--prompt",
        "a red circle on a blue background",
        "--frames",
        "3",
        "--height",
        "8",
        "--width",
        "8",
        "--out",
        p(&video),
    ]);
    let err = failing(&["eval", "--video", p(&video), "--metrics", "mamse,sharpness"]);
    assert!(err.contains("unknown metric `sharpness`"), "{err}");
}

#[test]
fn static_video_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let video = dir.path().join("static.vten");
    ok(&[
        "render",
        "--prompt",
        "a blue square on a white background",
        "--pan",
        "0,0",
        "--frames",
        "4",
        "--height",
        "16",
        "--width",
        "16",
        "--out",
        p(&video),
    ]);
    let out = ok(&["eval", "--video", p(&video)]);
    let records: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    for r in records {
        let value = r["value"].as_f64().unwrap();
        match r["metric"].as_str().unwrap() {
            "mamse" => assert!(value.abs() < 1e-12, "{value}"),
            "frame-consistency" => assert!((value - 1.0).abs() < 1e-9, "{value}"),
            other => panic!("unexpected metric {other}"),
        }
    }
}

#[test]
fn empty_catalog_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = write_catalog(dir.path(), "# nothing here\n");
    let config = small_config(dir.path(), |c| c.datagen.catalog = Some(catalog.into()));
    let err = failing(&["gen-data", "-c", &config, "--out", p(&dir.path().join("data"))]);
    assert!(err.contains("empty catalog"), "{err}");
}

#[test]
fn negative_thresholds_keep_every_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = vdiff_core::datagen::format_catalog(&vdiff_core::datagen::default_catalog()[..3]);
    let catalog = write_catalog(dir.path(), &catalog);
    let config = small_config(dir.path(), |c| {
        c.datagen.catalog = Some(catalog.into());
        c.datagen.thresholds = Thresholds::keep_all();
    });
    let data = dir.path().join("data");
    let out = ok(&["gen-data", "-c", &config, "--out", p(&data)]);
    let summary: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(summary["candidates"], 3);
    assert_eq!(summary["kept"], 3);
    let stats: serde_json::Value = serde_json::from_str(ok(&["stats", "--dataset", p(&data)]).trim()).unwrap();
    assert_eq!(stats["acceptance_rate"], 1.0);
}

#[test]
fn zero_training_steps_save_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = vdiff_core::datagen::format_catalog(&vdiff_core::datagen::default_catalog()[..2]);
    let catalog = write_catalog(dir.path(), &catalog);
    let config = small_config(dir.path(), |c| {
        c.datagen.catalog = Some(catalog.into());
        c.datagen.thresholds = Thresholds::keep_all();
        c.train.steps = 0;
    });
    let data = dir.path().join("data");
    ok(&["gen-data", "-c", &config, "--out", p(&data)]);
    let a = dir.path().join("a");
    let b = dir.path().join("init");
    std::fs::create_dir_all(&b).unwrap();
    ok(&["train", "-c", &config, "--dataset", p(&data), "--out", p(&a)]);
    let loss = std::fs::read_to_string(a.join("loss.jsonl")).unwrap();
    assert!(loss.is_empty());
    let cfg = RunConfig::load(Path::new(&config)).unwrap();
    initial_model(&cfg).unwrap().save(&b).unwrap();
    assert_eq!(read_bundle(&a.join("params")).unwrap(), read_bundle(&b).unwrap());
}

#[test]
fn long_input_to_edit_points_at_edit_long() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), |_| {});
    let params = dir.path().join("params");
    std::fs::create_dir_all(&params).unwrap();
    ToyDenoiser::init(RunConfig::default().train.model, 1).unwrap().save(&params).unwrap();
    let video = dir.path().join("long.vten");
    ok(&[
        "render",
        "--prompt",
        "a red circle on a blue background",
        "--frames",
        "32",
        "--height",
        "8",
        "--width",
        "8",
        "--out",
        p(&video),
    ]);
    let err = failing(&[
        "edit",
        "-c",
        &config,
        "--params",
        p(&params),
        "--input",
        p(&video),
        "--prompt",
        "make it green",
        "--out",
        p(&dir.path().join("o.vten")),
    ]);
    assert!(err.contains("edit-long"), "{err}");

    let out = dir.path().join("long_out.vten");
    ok(&[
        "edit-long",
        "-c",
        &config,
        "--params",
        p(&params),
        "--input",
        p(&video),
        "--prompt",
        "make it green",
        "--out",
        p(&out),
        "--compare",
    ]);
    let corrected = read_video(&out).unwrap();
    let independent = read_video(&dir.path().join("long_out.independent.vten")).unwrap();
    assert_eq!(corrected.dims(), read_video(&video).unwrap().dims());
    // the first batch is shared; later batches differ once the correction acts
    assert_eq!(corrected.slice_frames(0..4).unwrap(), independent.slice_frames(0..4).unwrap());
    assert_ne!(corrected, independent);
}

#[test]
fn short_edit_without_sweep_writes_one_cell() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), |_| {});
    let params = dir.path().join("params");
    std::fs::create_dir_all(&params).unwrap();
    ToyDenoiser::init(RunConfig::default().train.model, 2).unwrap().save(&params).unwrap();
    let video = dir.path().join("short.vten");
    ok(&[
        "render",
        "--prompt",
        "a red circle on a blue background",
        "--frames",
        "4",
        "--height",
        "8",
        "--width",
        "8",
        "--out",
        p(&video),
    ]);
    let out = dir.path().join("edited.vten");
    let frames = dir.path().join("frames");
    let stdout = ok(&[
        "edit",
        "-c",
        &config,
        "--params",
        p(&params),
        "--input",
        p(&video),
        "--prompt",
        "make it green",
        "--out",
        p(&out),
        "--no-sweep",
        "--svid",
        "1.3",
        "--dump-frames",
        p(&frames),
    ]);
    assert_eq!(stdout.lines().count(), 2, "{stdout}");
    assert_eq!(read_video(&out).unwrap().dims(), read_video(&video).unwrap().dims());
    assert_eq!(std::fs::read_dir(&frames).unwrap().count(), 4);
}

#[test]
fn default_config_roundtrips_through_the_cli() {
    let toml = ok(&["config"]);
    assert_eq!(RunConfig::from_toml(&toml).unwrap(), RunConfig::default());
}
