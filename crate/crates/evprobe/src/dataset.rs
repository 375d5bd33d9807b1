//! Probing datasets: labeled (sequence, label) pairs with named splits.
//!
//! A dataset is stored on disk as UTF-8 JSON lines, one object per line with
//! required fields `id`, `tokens`, `label` and optional `type_key` and
//! `split`. Splits embedded in the file take precedence over
//! [`split_by_type`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled probing example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbingExample {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: String,
    /// Key used for type-disjoint splitting. Defaults to the
    /// whitespace-joined token text.
    pub type_key: String,
}

/// A collection of probing examples with an ordered label set and named
/// splits. Class indices are positions in `label_set`, which is kept in
/// lexicographic order so they are reproducible across runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbingDataset {
    pub examples: Vec<ProbingExample>,
    pub label_set: Vec<String>,
    /// Split name -> example ids. Splits partition a subset of the ids;
    /// no id appears in two splits.
    pub splits: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawExample {
    id: String,
    tokens: Vec<String>,
    label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    type_key: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

impl ProbingDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Index of each label in the lexicographic label set.
    pub fn label_index(&self) -> HashMap<&str, usize> {
        self.label_set
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect()
    }

    /// Class index per example, aligned with `examples`.
    pub fn class_indices(&self) -> Vec<usize> {
        let idx = self.label_index();
        self.examples.iter().map(|e| idx[e.label.as_str()]).collect()
    }

    /// Examples belonging to a named split, in dataset order.
    pub fn split_examples(&self, split: &str) -> Vec<&ProbingExample> {
        let Some(ids) = self.splits.get(split) else {
            return Vec::new();
        };
        let id_set: HashSet<&str> = ids.iter().map(String::as_str).collect();
        self.examples
            .iter()
            .filter(|e| id_set.contains(e.id.as_str()))
            .collect()
    }

    /// Restrict the dataset to a named split, keeping the full label set.
    pub fn subset(&self, split: &str) -> ProbingDataset {
        let keep: HashSet<&str> = self
            .splits
            .get(split)
            .map(|ids| ids.iter().map(String::as_str).collect())
            .unwrap_or_default();
        ProbingDataset {
            examples: self
                .examples
                .iter()
                .filter(|e| keep.contains(e.id.as_str()))
                .cloned()
                .collect(),
            label_set: self.label_set.clone(),
            splits: BTreeMap::new(),
        }
    }

    fn recompute_label_set(&mut self) {
        let labels: BTreeSet<String> =
            self.examples.iter().map(|e| e.label.clone()).collect();
        self.label_set = labels.into_iter().collect();
    }
}

/// Load a dataset from a JSON-lines file. The label set is computed and
/// sorted; splits present in the file are honored.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<ProbingDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let reader = std::io::BufReader::new(file);

    let mut examples = Vec::new();
    let mut splits: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut seen_ids = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample =
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        if raw.tokens.is_empty() || raw.label.is_empty() {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: "tokens and label must be non-empty".into(),
            });
        }
        if !seen_ids.insert(raw.id.clone()) {
            return Err(Error::DuplicateId { id: raw.id });
        }
        if let Some(split) = &raw.split {
            splits.entry(split.clone()).or_default().push(raw.id.clone());
        }
        let type_key = raw
            .type_key
            .unwrap_or_else(|| raw.tokens.join(" "));
        examples.push(ProbingExample {
            id: raw.id,
            tokens: raw.tokens,
            label: raw.label,
            type_key,
        });
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset {
            path: path.to_path_buf(),
        });
    }
    let mut ds = ProbingDataset {
        examples,
        label_set: Vec::new(),
        splits,
    };
    ds.recompute_label_set();
    Ok(ds)
}

/// Write a dataset back to the JSON-lines format accepted by
/// [`load_dataset`].
pub fn save_dataset(ds: &ProbingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    let mut split_of: HashMap<&str, &str> = HashMap::new();
    for (name, ids) in &ds.splits {
        for id in ids {
            split_of.insert(id.as_str(), name.as_str());
        }
    }
    for e in &ds.examples {
        let raw = RawExample {
            id: e.id.clone(),
            tokens: e.tokens.clone(),
            label: e.label.clone(),
            type_key: Some(e.type_key.clone()),
            split: split_of.get(e.id.as_str()).map(|s| s.to_string()),
        };
        let line = serde_json::to_string(&raw)?;
        writeln!(w, "{line}").map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Remove examples whose label is rare. When splits exist, labels are
/// counted per split and a label is dropped if it falls below `min_count`
/// in any split; otherwise counting is global. The boundary is inclusive:
/// a label with exactly `min_count` occurrences is retained.
pub fn filter_rare_labels(
    ds: &ProbingDataset,
    min_count: usize,
) -> Result<ProbingDataset> {
    assert!(min_count > 0, "min_count must be positive");
    let mut drop: BTreeSet<String> = BTreeSet::new();
    if ds.splits.is_empty() {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for e in &ds.examples {
            *counts.entry(e.label.as_str()).or_default() += 1;
        }
        for (label, n) in counts {
            if n < min_count {
                drop.insert(label.to_string());
            }
        }
    } else {
        let by_id: HashMap<&str, &str> = ds
            .examples
            .iter()
            .map(|e| (e.id.as_str(), e.label.as_str()))
            .collect();
        for ids in ds.splits.values() {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for id in ids {
                if let Some(label) = by_id.get(id.as_str()) {
                    *counts.entry(label).or_default() += 1;
                }
            }
            // A label entirely absent from one split also counts as rare.
            for label in &ds.label_set {
                let n = counts.get(label.as_str()).copied().unwrap_or(0);
                if n < min_count {
                    drop.insert(label.clone());
                }
            }
        }
    }

    let examples: Vec<ProbingExample> = ds
        .examples
        .iter()
        .filter(|e| !drop.contains(&e.label))
        .cloned()
        .collect();
    let kept_ids: HashSet<&str> = examples.iter().map(|e| e.id.as_str()).collect();
    let splits: BTreeMap<String, Vec<String>> = ds
        .splits
        .iter()
        .map(|(name, ids)| {
            (
                name.clone(),
                ids.iter()
                    .filter(|id| kept_ids.contains(id.as_str()))
                    .cloned()
                    .collect(),
            )
        })
        .collect();
    let mut out = ProbingDataset {
        examples,
        label_set: Vec::new(),
        splits,
    };
    out.recompute_label_set();
    if out.label_set.len() < 2 {
        return Err(Error::DegenerateLabels {
            kept: out.label_set,
        });
    }
    Ok(out)
}

/// Assign "train"/"test" splits so that no `type_key` appears in both and
/// the train share of examples is as close as possible to
/// `train_fraction`.
///
/// Types are shuffled with the seeded generator, then sorted by descending
/// frequency (stable, so the shuffle fixes tie order) and greedily assigned
/// to the split currently furthest below its example quota.
pub fn split_by_type(
    ds: &ProbingDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<ProbingDataset> {
    assert!(
        train_fraction > 0.0 && train_fraction < 1.0,
        "train_fraction must lie in (0, 1)"
    );
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &ds.examples {
        *counts.entry(e.type_key.as_str()).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::TooFewTypes);
    }
    let mut types: Vec<(&str, usize)> = counts.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    types.shuffle(&mut rng);
    types.sort_by(|a, b| b.1.cmp(&a.1));

    let total = ds.len() as f64;
    let train_quota = train_fraction * total;
    let test_quota = (1.0 - train_fraction) * total;
    let (mut n_train, mut n_test) = (0usize, 0usize);
    let mut train_types: HashSet<&str> = HashSet::new();
    for (ty, n) in types {
        let deficit_train = train_quota - n_train as f64;
        let deficit_test = test_quota - n_test as f64;
        if deficit_train >= deficit_test {
            train_types.insert(ty);
            n_train += n;
        } else {
            n_test += n;
        }
    }

    let mut out = ds.clone();
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for e in &ds.examples {
        if train_types.contains(e.type_key.as_str()) {
            train_ids.push(e.id.clone());
        } else {
            test_ids.push(e.id.clone());
        }
    }
    out.splits = BTreeMap::from([
        ("train".to_string(), train_ids),
        ("test".to_string(), test_ids),
    ]);
    Ok(out)
}
