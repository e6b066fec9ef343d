use thiserror::Error;

#[derive(Debug, Error)]
pub enum FdtError {
    #[error("duplicate piece {0:?} in vocabulary")]
    DuplicatePiece(String),
    #[error("vocabulary line 0 must be \"<blk>\", found {0:?}")]
    MissingBlank(String),
    #[error("lexicon entry for {0:?} contains the blank piece")]
    BlankInLexicon(String),
    #[error("lexicon entry for {word:?} references unknown piece {piece:?}")]
    UnknownPiece { word: String, piece: String },
    #[error("lexicon entry for {0:?} has no pieces")]
    EmptyEntry(String),
    #[error("duplicate lexicon entry for {0:?}")]
    DuplicateEntry(String),
    #[error("word {0:?} cannot be covered by vocabulary pieces")]
    UntokenizableWord(String),
    #[error("span {start}..{end} out of range for {len} pieces")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("label sequence of length {labels} needs at least {required} frames, grid has {frames}")]
    InfeasibleLabel { labels: usize, required: usize, frames: usize },
    #[error("label id {id} is not a non-blank id in 1..={max}")]
    InvalidLabel { id: u32, max: usize },
    #[error("empty label sequence")]
    EmptyLabel,
    #[error("segment of {frames} frames is shorter than its {pieces} pieces")]
    TooShortSegment { frames: usize, pieces: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("row {row} is not a normalized log-distribution (logsumexp = {log_sum})")]
    NotNormalized { row: usize, log_sum: f64 },
    #[error("empty reference")]
    EmptyReference,
    #[error("empty hypothesis list")]
    EmptyNBest,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FdtError>;
