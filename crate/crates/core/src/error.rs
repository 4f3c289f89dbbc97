use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("timestep ordering violated: t={t}, t_prev={t_prev}")]
    Ordering { t: usize, t_prev: usize },

    #[error("reference noise is undefined at t={0}: alpha_bar equals 1")]
    DegenerateTimestep(usize),

    #[error("condition `{0}` is required but was null")]
    NullCondition(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid long-video plan: {0}")]
    Plan(String),

    #[error("frame {h}x{w} is smaller than the {block}px matching block")]
    FrameTooSmall { h: usize, w: usize, block: usize },

    #[error("embedder failed: {0}")]
    Embedder(String),

    #[error("scorer failed on sweep cell (s_V={s_v}, {h}x{w}): {source}")]
    SweepCell {
        s_v: f32,
        h: usize,
        w: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("attention trace mismatch: {0}")]
    Trace(String),

    #[error("empty catalog")]
    EmptyCatalog,

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("malformed .vten data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
