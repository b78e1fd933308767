use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid geometry: {0}")]
    Domain(String),
    #[error("degenerate quadrilateral: {0}")]
    Degenerate(String),
    #[error("homography estimation failed: {0}")]
    Estimation(String),
    #[error("point maps to the line at infinity: ({x}, {y})")]
    Horizon { x: f64, y: f64 },
    #[error("image too small: {0}")]
    Size(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Broad failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Numeric,
    Contract,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape { .. }
            | Error::Param(_)
            | Error::Config(_)
            | Error::Domain(_)
            | Error::Size(_) => ErrorKind::Config,
            Error::Numeric(_)
            | Error::Degenerate(_)
            | Error::Estimation(_)
            | Error::Horizon { .. } => ErrorKind::Numeric,
            Error::Contract(_) => ErrorKind::Contract,
            Error::Format(_) | Error::Io(_) | Error::Image(_) | Error::Json(_) => ErrorKind::Io,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
