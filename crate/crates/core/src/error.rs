//! Error type shared by every module in the crate.

use std::io;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes a library call can report.
///
/// The variants are coarse on purpose: callers (in particular the CLI)
/// dispatch on the kind to pick an exit code, and the message carries the
/// specifics.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Underlying I/O failure (file missing, short read, permissions).
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// A file was read but its bytes do not form a valid instance of the
    /// expected format (bad magic, truncated payload, bad maxval).
    #[error("format error: {0}")]
    Format(String),

    /// Two inputs that must agree do not (image/label counts, band/delta
    /// lengths, dataset shapes).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// A shape constraint was violated (band outside the spectrum, kernel
    /// larger than the image, region larger than the spectrum).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar argument is outside its documented domain.
    #[error("argument error: {0}")]
    Argument(String),

    /// A layer stack failed validation (shape chain broken, missing softmax).
    #[error("descriptor error: {0}")]
    Descriptor(String),

    /// A pipeline stage failed; the stage name is preserved so partial runs
    /// can be diagnosed from the message alone.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps any error in a stage marker, used by the experiment pipeline.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
