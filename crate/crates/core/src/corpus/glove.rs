//! Word embedding tables: GloVe text-format loading and seeded random
//! tables for synthetic runs. Row 0 is PAD (all zeros), row 1 is UNK.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use crate::corpus::fewrel::open_maybe_gz;
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::scalar::Scalar;

/// Reserved row for padding; the vector is all zeros.
pub const PAD_ID: u32 = 0;
/// Reserved row for out-of-vocabulary words.
pub const UNK_ID: u32 = 1;

/// Word-to-row mapping with the two reserved rows. Indexing a corpus needs
/// only this; the embedding matrix itself is only needed to initialize
/// model parameters.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    /// Words in row order, starting at row 2.
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Self {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            index.entry(w.clone()).or_insert(i as u32 + 2);
        }
        Vocabulary { words, index }
    }

    /// Row id for a word; UNK when absent.
    pub fn lookup(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Total row count including PAD and UNK.
    pub fn n_rows(&self) -> usize {
        self.words.len() + 2
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Dense `|V| x d` embedding matrix plus its vocabulary.
#[derive(Clone, Debug)]
pub struct EmbeddingTable<F: Scalar> {
    vocab: Vocabulary,
    /// Row-major `n_rows x dim`, PAD row zero.
    matrix: Vec<F>,
    dim: usize,
}

impl<F: Scalar> EmbeddingTable<F> {
    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.vocab.n_rows()
    }

    pub fn matrix(&self) -> &[F] {
        &self.matrix
    }

    pub fn row(&self, id: u32) -> &[F] {
        let i = id as usize;
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Table with every row (except PAD) drawn uniformly from
    /// `[-0.5, 0.5]`, for runs without pretrained vectors.
    pub fn random(words: Vec<String>, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be >= 1".into()));
        }
        let vocab = Vocabulary::from_words(words);
        let mut rng = stream_rng(seed, "random-embedding");
        let rows = vocab.n_rows();
        let mut matrix = vec![F::zero(); rows * dim];
        for r in 1..rows {
            for j in 0..dim {
                matrix[r * dim + j] = F::from_f64(rng.gen_range(-0.5..0.5));
            }
        }
        Ok(EmbeddingTable { vocab, matrix, dim })
    }
}

/// Load a GloVe text file: one `word v1 ... v_d` line per word,
/// whitespace-separated, optionally gzipped. The UNK row is seeded uniform
/// in `[-0.5, 0.5]`; PAD is zero.
pub fn load_glove<F: Scalar>(
    path: impl AsRef<Path>,
    expected_dim: usize,
    seed: u64,
) -> Result<EmbeddingTable<F>> {
    let path = path.as_ref();
    if expected_dim == 0 {
        return Err(Error::Config("embedding dimension must be >= 1".into()));
    }
    let reader = BufReader::new(open_maybe_gz(path).map_err(|e| match e {
        Error::Corpus(m) => Error::Embedding(m),
        other => other,
    })?);

    let mut words = Vec::new();
    let mut seen: std::collections::HashSet<String> = std::collections::HashSet::new();
    let mut rows: Vec<F> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| {
            Error::Embedding(format!("{}: read error at line {}: {e}", path.display(), lineno + 1))
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().expect("non-empty line");
        let values: Vec<F> = parts
            .map(|p| {
                p.parse::<f64>().map(F::from_f64).map_err(|e| {
                    Error::Embedding(format!(
                        "{}: line {}: bad number `{p}`: {e}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != expected_dim {
            return Err(Error::Embedding(format!(
                "{}: line {}: expected {} dimensions, found {}",
                path.display(),
                lineno + 1,
                expected_dim,
                values.len()
            )));
        }
        if !seen.insert(word.to_string()) {
            log::warn!("duplicate word `{word}` at line {}; keeping the first", lineno + 1);
            continue;
        }
        words.push(word.to_string());
        rows.extend_from_slice(&values);
    }
    if words.is_empty() {
        return Err(Error::Embedding(format!("{}: no embedding rows", path.display())));
    }

    let vocab = Vocabulary::from_words(words);
    let n_rows = vocab.n_rows();
    let mut matrix = vec![F::zero(); n_rows * expected_dim];
    // UNK: seeded random, fixed per run.
    let mut rng = stream_rng(seed, "unk-vector");
    for j in 0..expected_dim {
        matrix[UNK_ID as usize * expected_dim + j] = F::from_f64(rng.gen_range(-0.5..0.5));
    }
    matrix[2 * expected_dim..].copy_from_slice(&rows);
    Ok(EmbeddingTable { vocab, matrix, dim: expected_dim })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &std::path::Path) -> std::path::PathBuf {
        let path = dir.join("vectors.txt");
        std::fs::write(
            &path,
            "alpha 0.1 0.2 0.3 0.4 0.5\nbeta -1 -2 -3 -4 -5\ngamma 1 2 3 4 5\n",
        )
        .unwrap();
        path
    }

    #[test]
    fn three_word_fixture_has_five_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path());
        let table: EmbeddingTable<f64> = load_glove(&path, 5, 0).unwrap();
        assert_eq!(table.n_rows(), 5);
        assert_eq!(table.dim(), 5);
    }

    #[test]
    fn known_word_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path());
        let table: EmbeddingTable<f64> = load_glove(&path, 5, 0).unwrap();
        // Independent parse of the fixture line.
        let expected: Vec<f64> = "0.1 0.2 0.3 0.4 0.5"
            .split(' ')
            .map(|v| v.parse().unwrap())
            .collect();
        let id = table.vocabulary().lookup("alpha");
        assert_eq!(table.row(id), expected.as_slice());
    }

    #[test]
    fn pad_is_zero_unk_is_bounded_and_seeded() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path());
        let a: EmbeddingTable<f64> = load_glove(&path, 5, 42).unwrap();
        let b: EmbeddingTable<f64> = load_glove(&path, 5, 42).unwrap();
        assert!(a.row(PAD_ID).iter().all(|&v| v == 0.0));
        assert!(a.row(UNK_ID).iter().all(|&v| (-0.5..0.5).contains(&v)));
        assert_eq!(a.row(UNK_ID), b.row(UNK_ID));
        assert_eq!(a.vocabulary().lookup("no-such-word"), UNK_ID);
    }

    #[test]
    fn wrong_width_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "alpha 1 2 3 4 5\nbeta 1 2\n").unwrap();
        let err = load_glove::<f64>(&path, 5, 0).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
