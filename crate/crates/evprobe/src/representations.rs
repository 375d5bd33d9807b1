//! Design matrices: turn a probing dataset into the matrix of
//! D-dimensional representation vectors for one representation choice.
//!
//! Three representation kinds are supported: embeddings ingested from a
//! word-vector text file, i.i.d. standard-normal vectors drawn per data
//! point, and word-identity vectors keyed on token text. Random draws are
//! counter-based (keyed by seed and index or token hash, not a sequential
//! stream) so matrices are stable under dataset reordering and subset
//! extension.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::ProbingDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationKind {
    File,
    Random,
    WordIdentity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    First,
}

/// What to do when a token is absent from an embedding file. The default
/// falls back to the word-identity vector so the row still carries the
/// token's identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingTokenPolicy {
    WordIdentity,
    Zeros,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationSpec {
    pub kind: RepresentationKind,
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_path: Option<PathBuf>,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
    #[serde(default = "default_missing")]
    pub missing_token: MissingTokenPolicy,
}

fn default_pooling() -> Pooling {
    Pooling::Mean
}

fn default_missing() -> MissingTokenPolicy {
    MissingTokenPolicy::WordIdentity
}

impl RepresentationSpec {
    pub fn random(dim: usize, seed: u64) -> Self {
        Self {
            kind: RepresentationKind::Random,
            dim,
            seed,
            source_path: None,
            pooling: Pooling::Mean,
            missing_token: MissingTokenPolicy::WordIdentity,
        }
    }

    pub fn word_identity(dim: usize, seed: u64) -> Self {
        Self {
            kind: RepresentationKind::WordIdentity,
            ..Self::random(dim, seed)
        }
    }

    pub fn file(path: impl Into<PathBuf>, dim: usize) -> Self {
        Self {
            kind: RepresentationKind::File,
            source_path: Some(path.into()),
            ..Self::random(dim, 0)
        }
    }

    /// Stable hash of the spec, recorded in design matrices so repeated
    /// runs can be checked for identity.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_string(self).expect("spec serializes");
        fnv1a64(json.as_bytes())
    }
}

/// N×D matrix of representation vectors, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub rows: DMatrix<f64>,
    pub row_ids: Vec<String>,
    pub rep_fingerprint: u64,
}

impl DesignMatrix {
    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike the std
/// hasher.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64 finalizer, used to key the counter-based generator.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub(crate) fn key2(seed: u64, k: u64) -> u64 {
    mix64(mix64(seed) ^ k)
}

fn normal_vector(key: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `n` i.i.d. standard-normal vectors. Row `k` depends only on
/// `(seed, k)`, so rows for a prefix of indices are a prefix of the rows
/// for a longer range.
pub fn random_rows(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| normal_vector(key2(seed, k as u64), dim))
        .collect()
}

/// The word-identity vector for a token: a pure function of
/// `(seed, token, dim)`.
pub fn word_identity_row(seed: u64, token: &str, dim: usize) -> Vec<f64> {
    assert!(!token.is_empty(), "token must be non-empty");
    normal_vector(key2(seed, fnv1a64(token.as_bytes())), dim)
}

/// Token -> vector table loaded from a word-vector text file.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub vectors: HashMap<String, Vec<f64>>,
    pub dim: usize,
    /// Number of duplicate tokens resolved by last-wins.
    pub duplicate_count: usize,
}

/// Load the common word-vector text interchange format: a header line
/// `N D`, then `N` lines of `token v1 ... vD`.
pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut lines = std::io::BufReader::new(file).lines().enumerate();

    let parse_err = |line: usize, msg: String| Error::EmbeddingParse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header line".into()))?;
    let header = header.map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut parts = header.split_whitespace();
    let n: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(1, "header must be 'N D'".into()))?;
    let dim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(1, "header must be 'N D'".into()))?;

    let mut vectors = HashMap::with_capacity(n);
    let mut duplicate_count = 0;
    for (lineno, line) in lines {
        let line = line.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| parse_err(lineno + 1, "empty row".into()))?
            .to_string();
        let values: Vec<f64> = parts
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| parse_err(lineno + 1, format!("bad value {s:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(parse_err(
                lineno + 1,
                format!("expected {dim} values, got {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(lineno + 1, "non-finite value".into()));
        }
        if vectors.insert(token, values).is_some() {
            duplicate_count += 1;
        }
    }
    Ok(EmbeddingTable {
        vectors,
        dim,
        duplicate_count,
    })
}

/// Build the design matrix for a dataset under one representation.
/// Multi-token examples are pooled per `spec.pooling`; the result is a
/// pure function of `(spec, ds)`.
pub fn embed_dataset(
    spec: &RepresentationSpec,
    ds: &ProbingDataset,
) -> Result<DesignMatrix> {
    assert!(spec.dim > 0, "representation dimension must be positive");
    let table = match spec.kind {
        RepresentationKind::File => {
            let path = spec.source_path.as_ref().ok_or_else(|| {
                Error::Config("file representation requires source_path".into())
            })?;
            let table = load_embedding_file(path)?;
            if table.dim != spec.dim {
                return Err(Error::DimMismatch {
                    expected: spec.dim,
                    got: table.dim,
                    context: format!("embedding file {}", path.display()),
                });
            }
            Some(table)
        }
        _ => None,
    };

    let n = ds.len();
    let mut rows = DMatrix::zeros(n, spec.dim);
    let mut row_ids = Vec::with_capacity(n);
    for (i, example) in ds.examples.iter().enumerate() {
        let row: Vec<f64> = match spec.kind {
            RepresentationKind::Random => {
                // Keyed on the example id so the row is drawn per data
                // point and stable under reordering.
                normal_vector(
                    key2(spec.seed, fnv1a64(example.id.as_bytes())),
                    spec.dim,
                )
            }
            RepresentationKind::WordIdentity => pool_tokens(
                spec,
                &example.tokens,
                |token| Ok(word_identity_row(spec.seed, token, spec.dim)),
            )?,
            RepresentationKind::File => {
                let table = table.as_ref().expect("table loaded for file kind");
                pool_tokens(spec, &example.tokens, |token| {
                    if let Some(v) = table.vectors.get(token) {
                        Ok(v.clone())
                    } else {
                        match spec.missing_token {
                            MissingTokenPolicy::WordIdentity => {
                                Ok(word_identity_row(spec.seed, token, spec.dim))
                            }
                            MissingTokenPolicy::Zeros => Ok(vec![0.0; spec.dim]),
                            MissingTokenPolicy::Error => Err(Error::MissingToken {
                                token: token.to_string(),
                            }),
                        }
                    }
                })?
            }
        };
        debug_assert_eq!(row.len(), spec.dim);
        for (j, v) in row.iter().enumerate() {
            rows[(i, j)] = *v;
        }
        row_ids.push(example.id.clone());
    }
    Ok(DesignMatrix {
        rows,
        row_ids,
        rep_fingerprint: spec.fingerprint(),
    })
}

fn pool_tokens(
    spec: &RepresentationSpec,
    tokens: &[String],
    mut vector_of: impl FnMut(&str) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    match spec.pooling {
        Pooling::First => vector_of(&tokens[0]),
        Pooling::Mean => {
            let mut acc = vec![0.0; spec.dim];
            for t in tokens {
                let v = vector_of(t)?;
                for (a, x) in acc.iter_mut().zip(&v) {
                    *a += x;
                }
            }
            let inv = 1.0 / tokens.len() as f64;
            for a in &mut acc {
                *a *= inv;
            }
            Ok(acc)
        }
    }
}
