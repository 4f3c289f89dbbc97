//! Synthetic paired-video generation: the toy world, the prompt catalog, a
//! toy text-to-video backbone, attention record/inject editing, score-based
//! filtering and dataset assembly.

pub mod backbone;
pub mod catalog;
pub mod dataset;
pub mod filter;
pub mod ptp;
pub mod world;

pub use backbone::{BackboneConfig, PaletteBackbone};
pub use catalog::{default_catalog, format_catalog, parse_catalog, PromptTriplet};
pub use dataset::{gen_dataset, DatasetConfig, Manifest};
pub use filter::{score_and_filter, PairedSample, Scores, Thresholds};
pub use ptp::{ptp_generate_pair, sample_generation_config, CrossInjection, PtpSettings};
pub use world::{render_scene, SceneSpec, Shape, Texture};
