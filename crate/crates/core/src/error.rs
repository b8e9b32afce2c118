use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RomError>;

#[derive(Debug, Error)]
pub enum RomError {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("block too short for ICT")]
    BlockTooShortForIct,

    #[error("block too short for PhraseICT")]
    BlockTooShortForPhraseIct,

    #[error("line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("config line {line}: key `{key}`: {msg}")]
    ConfigKey { line: usize, key: String, msg: String },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty input sequence")]
    EmptySequence,

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("incompatible index: {0}")]
    IncompatibleIndex(String),

    #[error("incompatible corpus file: {0}")]
    IncompatibleCorpus(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("contrastive loss needs ≥2 candidates")]
    TooFewCandidates,

    #[error("unanswerable example reached reader")]
    Unanswerable,

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("epoch {t} out of range for {total} total epochs")]
    EpochOutOfRange { t: usize, total: usize },

    #[error("invalid task weights: {0}")]
    InvalidWeights(String),

    #[error("k={k} out of range 1..={n}")]
    KOutOfRange { k: usize, n: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("gold passage {0} missing from candidate pool")]
    GoldMissing(u32),

    #[error("missing prerequisite: {}", .0.display())]
    MissingPrerequisite(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl RomError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        RomError::InvalidArgument(msg.into())
    }
}

pub(crate) fn truncated(e: std::io::Error) -> RomError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        RomError::Truncated("unexpected end of file".into())
    } else {
        RomError::Io(e)
    }
}

/// Reads one `\n`-terminated line (without the newline) of at most `limit` bytes.
pub(crate) fn read_line<R: std::io::BufRead>(r: &mut R, limit: usize) -> Result<Vec<u8>> {
    use std::io::{BufRead, Read};
    let mut buf = Vec::new();
    let n = Read::take(&mut *r, limit as u64 + 1).read_until(b'\n', &mut buf)?;
    if n == 0 || buf.last() != Some(&b'\n') {
        return Err(RomError::Truncated("missing header line".into()));
    }
    buf.pop();
    Ok(buf)
}
