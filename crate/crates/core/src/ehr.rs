//! Longitudinal EHR records, JSONL persistence, normalization and splitting.
//!
//! Encounters are stored 0-based; [`feature_history`] takes the 1-based
//! encounter number used in the external formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlmdError, Result};

/// Lower bound applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(rename = "F")]
    pub num_features: usize,
    pub sensitive_names: Vec<String>,
    pub label_name: String,
    /// Names of the non-sensitive demographic fields, in storage order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_names: Vec<String>,
}

impl Schema {
    pub fn sensitive_index(&self, name: &str) -> Result<usize> {
        self.sensitive_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| FlmdError::Schema(format!("unknown sensitive attribute '{name}'")))
    }

    pub fn extra_index(&self, name: &str) -> Result<usize> {
        self.extra_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| FlmdError::Schema(format!("unknown demographic field '{name}'")))
    }

    /// Width of the demographic vector fed to the models.
    pub fn demographic_dim(&self) -> usize {
        self.sensitive_names.len() + self.extra_names.len()
    }

    pub fn load(path: &Path) -> Result<Schema> {
        let text = std::fs::read_to_string(path).map_err(|e| FlmdError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| FlmdError::Parse {
            path: path.into(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("schema serializes");
        std::fs::write(path, text + "\n").map_err(|e| FlmdError::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    #[serde(rename = "sensitive")]
    pub sensitive_bits: Vec<u8>,
    #[serde(default)]
    pub extra: Vec<f64>,
}

impl Demographics {
    /// Sensitive bits followed by the extra fields, as model input.
    pub fn as_features(&self) -> Vec<f64> {
        self.sensitive_bits
            .iter()
            .map(|&b| f64::from(b))
            .chain(self.extra.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encounter {
    pub x: Vec<f64>,
    pub y: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    #[serde(rename = "d")]
    pub demographics: Demographics,
    #[serde(rename = "enc")]
    pub encounters: Vec<Encounter>,
}

impl PatientRecord {
    pub fn len(&self) -> usize {
        self.encounters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encounters.is_empty()
    }

    fn validate(&self, schema: &Schema) -> std::result::Result<(), String> {
        let d = &self.demographics;
        if d.sensitive_bits.len() != schema.sensitive_names.len() {
            return Err(format!(
                "patient '{}' has {} sensitive bits, schema has {}",
                self.id,
                d.sensitive_bits.len(),
                schema.sensitive_names.len()
            ));
        }
        if let Some(b) = d.sensitive_bits.iter().find(|&&b| b > 1) {
            return Err(format!("patient '{}' has sensitive bit {b}", self.id));
        }
        if d.extra.len() != schema.extra_names.len() {
            return Err(format!(
                "patient '{}' has {} extra demographic fields, schema has {}",
                self.id,
                d.extra.len(),
                schema.extra_names.len()
            ));
        }
        if d.extra.iter().any(|v| !v.is_finite()) {
            return Err(format!(
                "patient '{}' has a non-finite demographic value",
                self.id
            ));
        }
        if self.encounters.is_empty() {
            return Err(format!("patient '{}' has no encounters", self.id));
        }
        for (t, e) in self.encounters.iter().enumerate() {
            if e.x.len() != schema.num_features {
                return Err(format!(
                    "patient '{}' encounter {} has |x|={}, schema F={}",
                    self.id,
                    t + 1,
                    e.x.len(),
                    schema.num_features
                ));
            }
            if e.y > 1 {
                return Err(format!(
                    "patient '{}' encounter {} has label {}",
                    self.id,
                    t + 1,
                    e.y
                ));
            }
            if e.x.iter().any(|v| !v.is_finite()) {
                return Err(format!(
                    "patient '{}' encounter {} has a non-finite feature",
                    self.id,
                    t + 1
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub patients: Vec<PatientRecord>,
}

impl Dataset {
    /// Builds a dataset after checking every record against the schema.
    pub fn new(schema: Schema, patients: Vec<PatientRecord>) -> Result<Dataset> {
        for p in &patients {
            p.validate(&schema).map_err(FlmdError::Schema)?;
        }
        Ok(Dataset { schema, patients })
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn num_encounters(&self) -> usize {
        self.patients.iter().map(PatientRecord::len).sum()
    }

    /// Copy holding only the patients at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            patients: indices.iter().map(|&i| self.patients[i].clone()).collect(),
        }
    }
}

pub fn load_dataset(path: &Path, schema: &Schema) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| FlmdError::io(path, e))?;
    let mut patients = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| FlmdError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| FlmdError::Parse {
            path: path.into(),
            line: i + 1,
            msg,
        };
        let record: PatientRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        record.validate(schema).map_err(|msg| {
            FlmdError::Schema(format!("{}: line {}: {msg}", path.display(), i + 1))
        })?;
        patients.push(record);
    }
    Ok(Dataset {
        schema: schema.clone(),
        patients,
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_jsonl(path, &ds.patients)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| FlmdError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| FlmdError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| FlmdError::io(path, e))?;
    }
    w.flush().map_err(|e| FlmdError::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| FlmdError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| FlmdError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| FlmdError::Parse {
            path: path.into(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(rows)
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.2,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(FlmdError::Config(format!(
                "split ratios must be nonnegative, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FlmdError::Config(format!(
                "split ratios sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Patient-level split. Validation and test sizes are floored and the
/// remainder goes to training; each part keeps the input order.
pub fn split_dataset(
    ds: &Dataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    ratios.validate()?;
    let n = ds.len();
    let nonzero = [ratios.train, ratios.val, ratios.test]
        .iter()
        .filter(|&&r| r > 0.0)
        .count();
    if n < nonzero {
        return Err(FlmdError::Split(format!(
            "{n} patients cannot fill {nonzero} nonempty splits"
        )));
    }
    let n_val = (ratios.val * n as f64 + 1e-9).floor() as usize;
    let n_test = (ratios.test * n as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = order[..n_val].to_vec();
    let mut test = order[n_val..n_val + n_test].to_vec();
    let mut train = order[n_val + n_test..].to_vec();
    for part in [&mut train, &mut val, &mut test] {
        part.sort_unstable();
    }
    if ratios.train > 0.0 && train.is_empty() {
        return Err(FlmdError::Split(format!(
            "{n} patients leave the training split empty"
        )));
    }
    Ok((ds.subset(&train), ds.subset(&val), ds.subset(&test)))
}

/// Feature vectors of encounters `1..=t` (1-based).
pub fn feature_history(p: &PatientRecord, t: usize) -> Result<Vec<Vec<f64>>> {
    if t == 0 || t > p.len() {
        return Err(FlmdError::Index(format!(
            "encounter {t} out of range 1..={} for patient '{}'",
            p.len(),
            p.id
        )));
    }
    Ok(p.encounters[..t].iter().map(|e| e.x.clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(num_features: usize) -> NormStats {
        NormStats {
            mean: vec![0.0; num_features],
            std: vec![1.0; num_features],
        }
    }
}

/// Per-feature z-score statistics over every encounter of `train`.
pub fn fit_normalizer(train: &Dataset) -> Result<NormStats> {
    let f = train.schema.num_features;
    let n = train.num_encounters();
    if n == 0 {
        return Err(FlmdError::Data(
            "cannot fit a normalizer on an empty dataset".into(),
        ));
    }
    let rows = || {
        train
            .patients
            .iter()
            .flat_map(|p| p.encounters.iter().map(|e| &e.x))
    };
    let mut mean = vec![0.0; f];
    let mut lo = vec![f64::INFINITY; f];
    let mut hi = vec![f64::NEG_INFINITY; f];
    for x in rows() {
        for j in 0..f {
            mean[j] += x[j];
            lo[j] = lo[j].min(x[j]);
            hi[j] = hi[j].max(x[j]);
        }
    }
    for j in 0..f {
        // keeps a constant column exactly at zero after centering
        mean[j] = if lo[j] == hi[j] {
            lo[j]
        } else {
            mean[j] / n as f64
        };
    }
    let mut var = vec![0.0; f];
    for x in rows() {
        for j in 0..f {
            var[j] += (x[j] - mean[j]).powi(2);
        }
    }
    let std = var
        .iter()
        .map(|v| (v / n as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormStats { mean, std })
}

pub fn apply_normalizer(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    let f = ds.schema.num_features;
    if stats.mean.len() != f || stats.std.len() != f {
        return Err(FlmdError::Schema(format!(
            "normalizer has {} means and {} stds for F={f}",
            stats.mean.len(),
            stats.std.len()
        )));
    }
    let mut out = ds.clone();
    for e in out
        .patients
        .iter_mut()
        .flat_map(|p| p.encounters.iter_mut())
    {
        for (j, v) in e.x.iter_mut().enumerate() {
            *v = (*v - stats.mean[j]) / stats.std[j];
        }
    }
    Ok(out)
}
