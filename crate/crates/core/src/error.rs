use alloc::string::String;
use alloc::vec::Vec;

use crate::archive::ArchiveError;
use crate::real::DType;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("missing tensor `{0}`")]
    MissingKey(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{name}` has dtype {found}, expected {expected}")]
    DtypeMismatch {
        name: String,
        expected: DType,
        found: DType,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing loss term `{0}`")]
    MissingTerm(&'static str),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err;
