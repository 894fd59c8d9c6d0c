//! Pre-trained word vectors and the shared projection into model space.
//!
//! Embeddings are frozen: tokens enter the tape as plain inputs, so no
//! gradient ever reaches the table. The projection applied on top of them
//! is a single trainable affine layer shared by every token.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::tensor::{Tape, TensorError, Value};

#[derive(Debug)]
pub enum EmbeddingError {
    Io(std::io::Error),
    /// A row whose vector length disagrees with the first row.
    DimensionMismatch {
        line: usize,
        expected: usize,
        got: usize,
    },
    /// A vector component failed to parse.
    BadNumber { line: usize },
    EmptyFile,
}

impl fmt::Display for EmbeddingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbeddingError::Io(e) => write!(f, "{e}"),
            EmbeddingError::DimensionMismatch {
                line,
                expected,
                got,
            } => write!(
                f,
                "line {line}: vector has {got} components, expected {expected}"
            ),
            EmbeddingError::BadNumber { line } => write!(f, "line {line}: malformed number"),
            EmbeddingError::EmptyFile => write!(f, "embedding file has no rows"),
        }
    }
}

impl std::error::Error for EmbeddingError {}

impl From<std::io::Error> for EmbeddingError {
    fn from(e: std::io::Error) -> Self {
        EmbeddingError::Io(e)
    }
}

/// Word -> vector table with a mean-vector fallback for unknown words.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    oov_vector: Vec<f64>,
}

impl EmbeddingTable {
    /// Builds a table from rows; the out-of-vocabulary vector is the
    /// componentwise mean of all rows.
    pub fn from_rows(rows: Vec<(String, Vec<f64>)>) -> Result<Self, EmbeddingError> {
        let dim = match rows.first() {
            Some((_, v)) => v.len(),
            None => return Err(EmbeddingError::EmptyFile),
        };
        let mut oov = vec![0.0; dim];
        for (i, (_, v)) in rows.iter().enumerate() {
            if v.len() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    line: i + 1,
                    expected: dim,
                    got: v.len(),
                });
            }
            for (o, x) in oov.iter_mut().zip(v) {
                *o += x;
            }
        }
        let n = rows.len() as f64;
        oov.iter_mut().for_each(|o| *o /= n);
        Ok(EmbeddingTable {
            dim,
            vectors: rows.into_iter().collect(),
            oov_vector: oov,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// The word's vector, or the mean vector for unknown words.
    pub fn lookup(&self, word: &str) -> &[f64] {
        self.vectors
            .get(word)
            .map(Vec::as_slice)
            .unwrap_or(&self.oov_vector)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vectors.contains_key(word)
    }

    pub fn oov_vector(&self) -> &[f64] {
        &self.oov_vector
    }
}

/// Loads a plain-text embedding file (`word v1 v2 ... vN` per line).
/// Files ending in `.gz` are transparently decompressed.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable, EmbeddingError> {
    let file = File::open(path)?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let reader = BufReader::new(reader);
    let mut rows = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().unwrap().to_string();
        let vec: Result<Vec<f64>, _> = parts.map(str::parse).collect();
        let vec = vec.map_err(|_| EmbeddingError::BadNumber { line: i + 1 })?;
        match dim {
            None => dim = Some(vec.len()),
            Some(d) if d != vec.len() => {
                return Err(EmbeddingError::DimensionMismatch {
                    line: i + 1,
                    expected: d,
                    got: vec.len(),
                });
            }
            _ => {}
        }
        rows.push((word, vec));
    }
    EmbeddingTable::from_rows(rows)
}

/// Projects a raw word vector into the model's hidden space: `P.q + b`.
/// `q` is an untraced input; `p` and `b` are trainable tape values.
pub fn project_token(
    tape: &mut Tape,
    p: Value,
    b: Value,
    q: &[f64],
) -> Result<Value, TensorError> {
    let qv = tape.vector_input(q);
    let pq = tape.matvec(p, qv)?;
    tape.add(pq, b)
}
