use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed IDS: {0}")]
    MalformedIds(String),
    #[error("unknown radical id {0}")]
    UnknownRadical(usize),
    #[error("unknown class id {0}")]
    UnknownClass(usize),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("duplicate IDS in lexicon: classes {0} and {1} share `{2}`")]
    DuplicateIds(usize, usize, String),

    #[error("no bitmap for radical id {0}")]
    MissingBitmap(usize),
    #[error("line of {0} characters exceeds the {1}-character limit")]
    LineTooLong(usize, usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("sequence of {0} tokens exceeds max length {1}")]
    SequenceTooLong(usize, usize),

    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty candidate matrix")]
    EmptyCandidates,
    #[error("label {0} out of range for {1} candidates")]
    LabelOutOfRange(usize, usize),
    #[error("label class {0} missing from candidate matrix")]
    CandidateMissing(usize),
    #[error("class {0} already present in candidate matrix")]
    DuplicateClass(usize),

    #[error("split overflow: m={0} + k={1} exceeds {2} classes")]
    SplitOverflow(usize, usize, usize),
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parse(file: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }
}
