use std::fmt;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("label {label} at row {row} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("shape mismatch: expected {expected} inputs, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("training error: {0}")]
    Training(String),
    #[error("ensemble has no participating models")]
    EmptyEnsemble,
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("attack not applicable: {0}")]
    AttackInapplicable(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("split hygiene violated: {0}")]
    Hygiene(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("stage `{stage}` failed (config key `{key}`): {source}")]
    Stage {
        stage: Stage,
        key: String,
        #[source]
        source: Box<Error>,
    },
}

/// Pipeline stage names used to tag harness failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Partition,
    Augment,
    Train,
    Oracle,
    Split,
    Attack,
    Metrics,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Data => "data",
            Stage::Partition => "partition",
            Stage::Augment => "augment",
            Stage::Train => "train",
            Stage::Oracle => "oracle",
            Stage::Split => "split",
            Stage::Attack => "attack",
            Stage::Metrics => "metrics",
            Stage::Report => "report",
        };
        f.write_str(name)
    }
}

impl Error {
    pub(crate) fn at(self, stage: Stage, key: &str) -> Error {
        Error::Stage {
            stage,
            key: key.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage, key: &str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage, key: &str) -> Result<T> {
        self.map_err(|e| e.at(stage, key))
    }
}
