//! Data layer: image codecs, directory datasets, the synthetic benchmark
//! generator, checkpoints, and configuration files.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointData};
pub use codec::{decode_pgm_mask, decode_ppm, encode_pgm_mask, encode_ppm};
pub use config::{parse_synth_spec, parse_synth_spec_str, parse_train_config, parse_train_config_str};
pub use dataset::{load_dataset, Domain, DomainDataset, Sample};
pub use synth::{render_sample, synth_generate, ShapeKind, SynthSpec, SynthSummary};
