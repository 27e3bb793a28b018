use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("layer `{layer}`: {detail}")]
    LayerShape { layer: String, detail: String },

    #[error("block index {index} out of range (model has {count} blocks)")]
    BlockIndex { index: usize, count: usize },

    #[error("direction has length {got}, block expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("layer {layer} has no activation output")]
    NoActivation { layer: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid quantization scheme: {bits} bits over [{q0}, {qmax}]")]
    InvalidScheme { bits: u32, q0: f64, qmax: f64 },

    #[error("non-finite value during {stage} at step {step} (last finite loss {last_loss:?})")]
    NonFinite {
        stage: &'static str,
        step: usize,
        last_loss: Option<f64>,
    },

    #[error("oracle failed at probe {probe}: {source}")]
    Oracle {
        probe: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("model not converged: gradient norm {grad_norm:e} exceeds {threshold:e}")]
    NotConverged { grad_norm: f64, threshold: f64 },

    #[error("eigen-solver did not converge for `{block}` after {iterations} iterations")]
    EigenNotConverged { block: String, iterations: usize },

    #[error("no admissible assignment fits {target} bytes; minimum achievable size is {min_size} bytes")]
    Infeasible { target: u64, min_size: u64 },

    #[error("{path}: parse error at line {line}, column {column} (byte {offset}): {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Parse error located from a serde_json error and the source text.
    pub fn json(path: impl Into<PathBuf>, text: &str, err: &serde_json::Error) -> Self {
        let (line, column) = (err.line(), err.column());
        Error::Parse {
            path: path.into(),
            line,
            column,
            offset: byte_offset(text, line, column),
            message: err.to_string(),
        }
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_from_line_and_column() {
        let text = "ab\ncdef\ng";
        assert_eq!(byte_offset(text, 1, 1), 0);
        assert_eq!(byte_offset(text, 2, 3), 5);
        assert_eq!(byte_offset(text, 3, 1), 8);
    }
}
