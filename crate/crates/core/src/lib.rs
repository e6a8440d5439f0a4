//! A small speech analysis engine: a masked-prediction transformer upstream
//! pretrained on k-means targets, a temporal-average-pooling linear head per
//! task, frozen or finetuned task training, weight-space checkpoint averaging,
//! and the evaluation protocols used to score it (closed-set EER at sliced
//! durations, group-disjoint k-fold accuracy, reduced-data sweeps).
//!
//! Everything runs on the CPU in plain Rust. [`synth`] produces deterministic
//! corpora so the whole pipeline can be exercised without licensed data.

pub mod audio;
pub mod config;
pub mod container;
pub mod downstream;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod fixtures;
pub mod manifest;
pub mod nn;
pub mod report;
pub mod seed;
pub mod synth;
pub mod training;
pub mod upstream;

pub use audio::{crop_duration, read_wav, resample, write_wav, CropMode, Waveform};
pub use config::{parse_config, Averaging, ExperimentConfig};
pub use experiment::{run_experiment, Experiment};
pub use downstream::{classify, pool_mean, score_utterance, ClassifierHead};
pub use error::{Error, Result};
pub use eval::{
    closed_set_trials, dev_split, duration_sliced_eval, eer, group_kfold, subsample_per_class,
    weighted_accuracy, EerMode, EvalReport, FoldPlan, GroupKey, MetricKind, TrialSet,
};
pub use features::{kmeans_assign, kmeans_fit, logmel, mfcc, Codebook, FeatureSequence};
pub use manifest::{Manifest, UtteranceRecord};
pub use nn::{AdamState, Parameter, Tensor};
pub use synth::{generate_corpus, SynthSpec};
pub use training::{
    average_checkpoints, select_best_plus_step, select_top_k, train, Checkpoint,
    CheckpointStore, TrainConfig, TrainMode,
};
pub use upstream::{
    apply_mask, extract, pretrain, pretrain_step, sample_mask, MaskSpec, PretrainConfig, UpstreamConfig,
    UpstreamModel,
};
