use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("step {t} outside 1..={steps}")]
    Step { t: usize, steps: usize },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("attribute extraction failed: {0}")]
    Extraction(String),
    #[error("projection failed: {0}")]
    Projection(String),
    #[error("cosine similarity undefined for a zero vector")]
    UndefinedSimilarity,
    #[error("invalid input: {0}")]
    Input(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("composition-order violation: {0}")]
    TheoremViolation(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
