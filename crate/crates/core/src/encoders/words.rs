use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::nn::{uniform, Mat};
use crate::{Error, Result};

/// Range of the uniform initialisation for rows absent from a pretrained table.
pub const MISSING_ROW_LIMIT: f64 = 0.1;

/// One embedding row per vocabulary id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordEmbeddingTable {
    pub matrix: Mat,
    pub trainable: bool,
    /// Number of rows copied from a pretrained table.
    #[serde(default)]
    pub pretrained_rows: usize,
}

impl WordEmbeddingTable {
    pub fn random<R: Rng + ?Sized>(vocab: &Vocabulary, dim: usize, rng: &mut R) -> Self {
        Self { matrix: uniform(rng, vocab.len(), dim, MISSING_ROW_LIMIT), trainable: true, pretrained_rows: 0 }
    }

    /// Reads whitespace-separated `token v1 … vd` lines, keeping rows for vocabulary tokens only.
    pub fn from_text<R: Rng + ?Sized>(path: &Path, vocab: &Vocabulary, dim: usize, rng: &mut R) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut found: HashMap<usize, Vec<f64>> = HashMap::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let Some(id) = vocab.id(token) else { continue };
            let values = fields
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(format!("{}:{}", path.display(), n + 1), e.to_string()))?;
            if values.len() != dim {
                return Err(Error::parse(
                    format!("{}:{}", path.display(), n + 1),
                    format!("expected {dim} values, found {}", values.len()),
                ));
            }
            found.entry(id).or_insert(values);
        }
        let mut table = Self::random(vocab, dim, rng);
        for (&id, row) in &found {
            table.matrix.row_mut(id).copy_from_slice(row);
        }
        table.pretrained_rows = found.len();
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }
}
