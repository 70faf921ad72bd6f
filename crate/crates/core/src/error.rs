use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("joint angles {angles:?} outside limits")]
    JointLimit { angles: Vec<f64> },

    #[error("contact resolution did not converge at substep {substep}")]
    Unresolved { substep: usize },

    #[error("could not place the object collision-free after {0} tries")]
    Placement(usize),

    #[error("motion budget of {budget} exhausted with {changed} changed / {unchanged} unchanged motions banked")]
    MotionBudget { budget: usize, changed: usize, unchanged: usize },

    #[error("bad {what} file at byte {offset}: {detail}")]
    Format { what: &'static str, offset: u64, detail: String },

    #[error("truncated {what} file: record {record} at byte {offset}")]
    Truncated { what: &'static str, record: usize, offset: u64 },

    #[error("checkpoint architecture mismatch: {0}")]
    Architecture(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tool is not fabricable: {0}")]
    Unfabricable(String),

    #[error(transparent)]
    Nn(#[from] nn::NnError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
