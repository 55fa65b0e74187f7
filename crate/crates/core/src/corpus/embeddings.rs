use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use super::vocab::{Vocab, PAD, UNK};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::scalar::Scalar;

/// Rows for tokens missing from the vector file are drawn from ±this.
pub const OOV_INIT_RANGE: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct Pretrained<T> {
    /// `|V| × dim`
    pub matrix: Tensor<T>,
    /// Vocabulary tokens (reserved entries excluded) found in the file.
    pub found: usize,
    /// `found / (|V| - 2)`.
    pub coverage: f64,
}

/// Reads a `token v1 ... vdim` text file into an embedding matrix for `vocab`.
///
/// A leading `count dim` header line, as written by some tools, is skipped.
pub fn load_pretrained<T: Scalar, R: Rng + ?Sized>(
    path: impl AsRef<Path>,
    vocab: &Vocab,
    dim: usize,
    rng: &mut R,
) -> Result<Pretrained<T>> {
    let path = path.as_ref();
    if dim == 0 {
        return Err(Error::invalid("embedding dimension must be positive"));
    }
    let mut rows: Vec<Option<Vec<T>>> = vec![None; vocab.len()];
    for (i, line) in BufReader::new(crate::fsutil::open(path)?).lines().enumerate() {
        let line = line?;
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let Some(token) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        if i == 0 && rest.len() == 1 && token.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
            continue;
        }
        if rest.len() != dim {
            return Err(Error::parse(path, i + 1, format!("expected {dim} values, found {}", rest.len())));
        }
        if !vocab.contains(token) {
            continue;
        }
        let idx = vocab.get(token);
        if idx == PAD || idx == UNK {
            continue;
        }
        let vals = rest
            .iter()
            .map(|v| v.parse::<f64>().map(T::of))
            .collect::<std::result::Result<Vec<T>, _>>()
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        rows[idx] = Some(vals);
    }
    let found = rows.iter().filter(|r| r.is_some()).count();
    let mut matrix = Tensor::zeros(&[vocab.len(), dim]);
    for (idx, row) in rows.into_iter().enumerate() {
        if idx == PAD {
            continue;
        }
        let vals = row.unwrap_or_else(|| {
            (0..dim)
                .map(|_| T::of(rng.gen_range(-OOV_INIT_RANGE..OOV_INIT_RANGE)))
                .collect()
        });
        matrix.row_mut(idx).copy_from_slice(&vals);
    }
    let real = vocab.len().saturating_sub(2);
    Ok(Pretrained {
        matrix,
        found,
        coverage: if real == 0 { 0.0 } else { found as f64 / real as f64 },
    })
}
