use std::fs;
use std::path::Path;

use vdiff_core::datagen::dataset::{dataset_stats, load_kept, read_manifest, DatasetConfig};
use vdiff_core::datagen::{default_catalog, gen_dataset, Thresholds};
use vdiff_core::embed::ToyEmbedder;
use vdiff_core::NoiseSchedule;

fn small_config(thresholds: Thresholds) -> DatasetConfig {
    DatasetConfig { frames: 3, height: 8, width: 8, seeds_per_triplet: 2, thresholds, ..DatasetConfig::default() }
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(
                files(&path)
                    .into_iter()
                    .map(|(n, b)| (format!("{}/{n}", path.file_name().unwrap().to_string_lossy()), b)),
            );
        } else {
            out.push((path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn generated_dataset_is_reproducible_and_loadable() {
    let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
    let triplets: Vec<_> = default_catalog().into_iter().step_by(4).take(5).collect();
    let cfg = small_config(Thresholds::default());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = gen_dataset(&triplets, &cfg, 17, &s, &ToyEmbedder::default(), a.path()).unwrap();
    gen_dataset(&triplets, &cfg, 17, &s, &ToyEmbedder::default(), b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));

    assert_eq!(m.candidates, 10);
    assert_eq!(read_manifest(a.path()).unwrap(), m);
    let kept = load_kept(a.path()).unwrap();
    assert_eq!(kept.len(), m.kept.len());
    for sample in &kept {
        assert!(sample.meta.kept);
        assert_eq!(sample.input.dims(), sample.edited.dims());
        assert!(sample.input.data().iter().chain(sample.edited.data()).all(|v| (0.0..=1.0).contains(v)));
    }
    let stats = dataset_stats(a.path()).unwrap();
    assert_eq!(stats.candidates, 10);
    assert_eq!(stats.kept, m.kept.len());
}

#[test]
fn master_seed_changes_the_samples() {
    let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
    let triplets: Vec<_> = default_catalog().into_iter().take(2).collect();
    let cfg = small_config(Thresholds::keep_all());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_dataset(&triplets, &cfg, 1, &s, &ToyEmbedder::default(), a.path()).unwrap();
    gen_dataset(&triplets, &cfg, 2, &s, &ToyEmbedder::default(), b.path()).unwrap();
    let ka = load_kept(a.path()).unwrap();
    let kb = load_kept(b.path()).unwrap();
    assert_eq!(ka.len(), 4);
    assert!(ka.iter().zip(&kb).any(|(x, y)| x.edited != y.edited));
}
