//! Dataset and checkpoint I/O, synthetic subjects, training protocol,
//! one-to-one benchmark and experiment configuration.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod raw;
pub mod synth;
pub mod train;

pub use bench::{run_baselines, run_bench, run_one_to_one, summarize, write_results, ExperimentResult, Failure, Method, MethodResult, RunRecord, SummaryRow};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Stage};
pub use config::ExperimentConfig;
pub use container::{decode_dataset, encode_dataset, load_dataset, write_dataset, DatasetHeader, SubjectEntry, DATASET_MAGIC, CHECKPOINT_MAGIC, UNLABELED};
pub use raw::build_domains_from_text;
pub use synth::{synth_subjects, ShiftMagnitudes, SynthConfig};
pub use train::{evaluate, measure_gap, pretrain_source, split, transfer_adapt, AdaptEpoch, AdaptOutcome, Evaluation, PretrainEpoch, PretrainOutcome, TrainConfig};

/// Seed for an independent RNG stream, derived from the run seed, a subject
/// id and a purpose tag with FNV-1a.
pub fn stream_seed(seed: u64, subject: &str, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let bytes = seed.to_le_bytes().into_iter().chain(subject.bytes()).chain([0xff]).chain(purpose.bytes());
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
