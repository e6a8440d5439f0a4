use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // audio
    #[error("not a RIFF/WAVE file")]
    NotWav,
    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated WAV data chunk: header claims {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),

    // features
    #[error("input too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    // numerics
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value detected in {0}")]
    NonFinite(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    // models
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty sequence")]
    EmptySequence,

    // training
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("development set is empty")]
    EmptyDevSet,
    #[error("incompatible checkpoints: {0}")]
    IncompatibleCheckpoints(String),
    #[error("empty checkpoint list")]
    EmptyList,
    #[error("empty checkpoint store")]
    EmptyStore,
    #[error("step {requested} not reached (last checkpoint at step {last})")]
    StepNotReached { requested: u64, last: u64 },
    #[error("checkpoint at step {0} has no dev metric")]
    MissingDevMetric(u64),

    // evaluation
    #[error("trial set needs at least one target and one nontarget trial")]
    DegenerateTrialSet,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("too few groups: {groups} distinct groups for {k} folds")]
    TooFewGroups { groups: usize, k: usize },

    // config and files
    #[error("config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown config key `{key}` at line {line}")]
    UnknownKey { key: String, line: usize },
    #[error("config value out of range: {field}: {message}")]
    Range { field: String, message: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("checkpoint container error: {0}")]
    Container(String),
    #[error("config fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("refusing to write outside output directory: {0}")]
    OutsideOutputDir(PathBuf),
    #[error("golden fixture `{case}` does not match its oracle: {detail}")]
    OracleMismatch { case: String, detail: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric failure, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Parse { .. } | Error::UnknownKey { .. } | Error::Range { .. } => 2,
            Error::NonFinite(_) => 4,
            Error::Io { .. } | Error::OutsideOutputDir(_) => 5,
            _ => 3,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
