//! Loading UCR/UEA-style archives, few-shot splitting and z-normalization.
//!
//! Univariate archives hold one sample per line with the class label first,
//! followed by tab- or comma-separated values. Multivariate archives store one
//! such file per channel as `<name>Dimension<i>_<SPLIT>.tsv`, with the same
//! sample order and labels in every file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// One labelled series with `m` channels of `w` steps each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSample {
    pub sample_id: String,
    pub label: String,
    /// Row-major: `values[channel][step]`.
    pub values: Vec<Vec<f64>>,
}

impl TimeSeriesSample {
    pub fn new(
        sample_id: impl Into<String>,
        label: impl Into<String>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self, DataError> {
        let sample = Self {
            sample_id: sample_id.into(),
            label: label.into(),
            values,
        };
        sample.validate()?;
        Ok(sample)
    }

    /// Single-channel convenience constructor.
    pub fn univariate(
        sample_id: impl Into<String>,
        label: impl Into<String>,
        values: Vec<f64>,
    ) -> Result<Self, DataError> {
        Self::new(sample_id, label, vec![values])
    }

    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<(), DataError> {
        let w = self.len();
        if self.values.is_empty() || w == 0 {
            return Err(DataError::Invalid(format!(
                "sample {} has no values",
                self.sample_id
            )));
        }
        if self.values.iter().any(|row| row.len() != w) {
            return Err(DataError::Invalid(format!(
                "sample {} has channels of unequal length",
                self.sample_id
            )));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!(
                "sample {} contains non-finite values",
                self.sample_id
            )));
        }
        Ok(())
    }
}

/// A named collection of samples with its ordered label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub description: String,
    pub label_set: Vec<String>,
    pub samples: Vec<TimeSeriesSample>,
}

impl Dataset {
    /// Builds a dataset, deriving `label_set` in byte-lexical order.
    pub fn new(
        name: impl Into<String>,
        description: impl Into<String>,
        samples: Vec<TimeSeriesSample>,
    ) -> Result<Self, DataError> {
        let label_set: Vec<String> = samples
            .iter()
            .map(|s| s.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let ds = Self {
            name: name.into(),
            description: description.into(),
            label_set,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let labels: BTreeSet<&str> = self.label_set.iter().map(String::as_str).collect();
        if labels.len() != self.label_set.len() {
            return Err(DataError::Invalid("label_set has duplicates".into()));
        }
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            s.validate()?;
            if !labels.contains(s.label.as_str()) {
                return Err(DataError::Invalid(format!(
                    "sample {} has label {:?} outside label_set",
                    s.sample_id, s.label
                )));
            }
            if !ids.insert(s.sample_id.as_str()) {
                return Err(DataError::Invalid(format!(
                    "duplicate sample_id {}",
                    s.sample_id
                )));
            }
        }
        Ok(())
    }

    pub fn series_length(&self) -> usize {
        self.samples.first().map_or(0, TimeSeriesSample::len)
    }

    pub fn channels(&self) -> usize {
        self.samples.first().map_or(0, TimeSeriesSample::channels)
    }

    pub fn by_class(&self) -> BTreeMap<&str, Vec<&TimeSeriesSample>> {
        let mut map: BTreeMap<&str, Vec<&TimeSeriesSample>> = BTreeMap::new();
        for s in &self.samples {
            map.entry(s.label.as_str()).or_default().push(s);
        }
        map
    }

    /// Canonical JSON form shared by every downstream consumer.
    pub fn to_json(&self) -> Result<String, DataError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let ds: Dataset = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    /// Serializes a univariate dataset back into tab-separated archive form.
    pub fn to_ucr_tsv(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&s.label);
            for v in &s.values[0] {
                out.push('\t');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

fn read_file(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn split_tokens(line: &str) -> Vec<&str> {
    let tokens: Vec<&str> = line.split(['\t', ',']).map(str::trim).collect();
    if tokens.len() == 1 {
        line.split_whitespace().collect()
    } else {
        tokens
    }
}

/// Parsed rows of one archive file: `(label, values)` per non-empty line.
fn parse_rows(path: &Path) -> Result<Vec<(String, Vec<f64>)>, DataError> {
    let text = read_file(path)?;
    let mut rows = Vec::new();
    let mut expected: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let tokens = split_tokens(raw.trim());
        let (label, rest) = tokens.split_first().expect("non-empty line");
        let count = rest.len();
        match expected {
            None if count == 0 => {
                return Err(DataError::Format {
                    path: path.to_path_buf(),
                    line: line_no,
                    expected: 1,
                    found: 0,
                })
            }
            None => expected = Some(count),
            Some(n) if n != count => {
                return Err(DataError::Format {
                    path: path.to_path_buf(),
                    line: line_no,
                    expected: n,
                    found: count,
                })
            }
            Some(_) => {}
        }
        let mut values = Vec::with_capacity(count);
        for tok in rest {
            let v: f64 = tok.parse().map_err(|_| DataError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                token: tok.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite {
                    path: path.to_path_buf(),
                    line: line_no,
                    token: tok.to_string(),
                });
            }
            values.push(v);
        }
        rows.push((label.to_string(), values));
    }
    if rows.is_empty() {
        return Err(DataError::EmptyDataset(path.to_path_buf()));
    }
    Ok(rows)
}

fn sample_id(prefix: &str, idx: usize) -> String {
    format!("{prefix}/{idx:05}")
}

/// Loads a univariate archive file. Sample ids are `<file stem>/<row index>`.
pub fn load_ucr_tsv(
    path: impl AsRef<Path>,
    name: &str,
    description: &str,
) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string());
    let samples = parse_rows(path)?
        .into_iter()
        .enumerate()
        .map(|(i, (label, values))| TimeSeriesSample {
            sample_id: sample_id(&stem, i),
            label,
            values: vec![values],
        })
        .collect();
    Dataset::new(name, description, samples)
}

/// Per-channel files of a multivariate archive split, in dimension order.
pub fn channel_files(dir: &Path, name: &str, split: &str) -> Vec<PathBuf> {
    (1..)
        .map(|i| dir.join(format!("{name}Dimension{i}_{split}.tsv")))
        .take_while(|p| p.is_file())
        .collect()
}

/// Loads a multivariate archive split (`split` is e.g. `TRAIN` or `TEST`).
/// Sample ids are `<name>_<split>/<row index>`.
pub fn load_multivariate(
    dir: impl AsRef<Path>,
    name: &str,
    split: &str,
    description: &str,
) -> Result<Dataset, DataError> {
    let dir = dir.as_ref();
    let files = channel_files(dir, name, split);
    if files.is_empty() {
        return Err(DataError::EmptyDataset(
            dir.join(format!("{name}Dimension1_{split}.tsv")),
        ));
    }
    let channels = files
        .iter()
        .map(|p| parse_rows(p))
        .collect::<Result<Vec<_>, _>>()?;
    let n = channels[0].len();
    for (c, rows) in channels.iter().enumerate().skip(1) {
        if rows.len() != n {
            return Err(DataError::Alignment(format!(
                "channel {} has {} samples, channel 1 has {n}",
                c + 1,
                rows.len()
            )));
        }
        for (i, ((la, _), (lb, _))) in channels[0].iter().zip(rows).enumerate() {
            if la != lb {
                return Err(DataError::Alignment(format!(
                    "sample {i}: label {la:?} in channel 1 but {lb:?} in channel {}",
                    c + 1
                )));
            }
        }
    }
    let prefix = format!("{name}_{split}");
    let samples = (0..n)
        .map(|i| {
            let values: Vec<Vec<f64>> = channels.iter().map(|rows| rows[i].1.clone()).collect();
            TimeSeriesSample::new(sample_id(&prefix, i), channels[0][i].0.clone(), values)
                .map_err(|e| DataError::Alignment(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(name, description, samples)
}

/// Few-shot train/validation subsample plus the untouched archive test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub train: Vec<TimeSeriesSample>,
    pub val: Vec<TimeSeriesSample>,
    pub test: Vec<TimeSeriesSample>,
    pub k: usize,
    pub seed: u64,
}

impl FewShotSplit {
    /// Number of labelled training steps (`|train| + |val|`).
    pub fn training_steps(&self) -> usize {
        self.train.len() + self.val.len()
    }

    /// The labelled pool available for contrast retrieval.
    pub fn labelled_pool(&self) -> Vec<&TimeSeriesSample> {
        self.train.iter().chain(&self.val).collect()
    }
}

/// Draws `2k` samples per class without replacement from `archive_train`;
/// the first `k` go to train, the next `k` to validation. Classes are visited
/// in `label_set` order using one seeded generator.
pub fn few_shot_split(
    archive_train: &Dataset,
    archive_test: &Dataset,
    k: usize,
    seed: u64,
) -> Result<FewShotSplit, DataError> {
    if k == 0 {
        return Err(DataError::Invalid("k must be positive".into()));
    }
    let by_class = archive_train.by_class();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in &archive_train.label_set {
        let members = by_class.get(label.as_str()).map_or(&[][..], Vec::as_slice);
        if members.len() < 2 * k {
            return Err(DataError::InsufficientSamples {
                class: label.clone(),
                have: members.len(),
                need: 2 * k,
            });
        }
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.shuffle(&mut rng);
        train.extend(order[..k].iter().map(|&i| members[i].clone()));
        val.extend(order[k..2 * k].iter().map(|&i| members[i].clone()));
    }
    let test = archive_test.samples.clone();
    let train_ids: BTreeSet<&str> = archive_train
        .samples
        .iter()
        .map(|s| s.sample_id.as_str())
        .collect();
    if let Some(clash) = test.iter().find(|s| train_ids.contains(s.sample_id.as_str())) {
        return Err(DataError::Invalid(format!(
            "test sample id {} also appears in the train split",
            clash.sample_id
        )));
    }
    Ok(FewShotSplit {
        train,
        val,
        test,
        k,
        seed,
    })
}

fn normalize_channel(row: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        return vec![0.0; row.len()];
    }
    row.iter().map(|v| (v - mean) / std).collect()
}

/// Per-channel zero mean, unit population standard deviation. Constant
/// channels become all zeros.
pub fn z_normalize(sample: &TimeSeriesSample) -> TimeSeriesSample {
    TimeSeriesSample {
        sample_id: sample.sample_id.clone(),
        label: sample.label.clone(),
        values: sample.values.iter().map(|r| normalize_channel(r)).collect(),
    }
}
