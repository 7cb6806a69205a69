//! Synthetic longitudinal EHR from a linear-Gaussian / logistic structural
//! causal model with known hidden confounders, plus the data-manipulation
//! protocols used by the experiments.
//!
//! Per patient, with `s(b) = 2b - 1` the centered coding of a bit:
//!
//! ```text
//! h⁰ = 0
//! zᵗ ~ N(A hᵗ⁻¹, I)
//! x̄ᵗ = W_x zᵗ + confounder_strength · v_f s(f) + demographic_effect · U s(d)
//! xᵗ = x̄ᵗ + noise_std · ε
//! yᵗ ~ Bernoulli(σ(w_z·zᵗ + demographic_effect · w_d·s(d) + w_x·x̄ᵗ + confounder_strength · c_f s(f)))
//! hᵗ = tanh(B [hᵗ⁻¹; zᵗ])
//! ```

use std::path::Path;

use diffkernel::sigmoid;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ehr::{
    read_jsonl, write_jsonl, Dataset, Demographics, Encounter, PatientRecord, Schema,
};
use crate::error::{FlmdError, Result};

pub const F_DEPE: &str = "f_depe";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncounterRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScmConfig {
    pub num_patients: usize,
    #[serde(alias = "F")]
    pub num_features: usize,
    pub z_true_dim: usize,
    pub h_true_dim: usize,
    pub encounter_count: EncounterRange,
    pub confounder_strength: f64,
    pub demographic_effect: f64,
    pub seed: u64,
    pub sensitive_names: Vec<String>,
    /// Store `f_depe` as an observed extra demographic field.
    pub observe_f_depe: bool,
    pub noise_std: f64,
    /// Scale of the state-to-confounder map `A`.
    pub state_gain: f64,
    /// Scale of the confounder-to-feature map `W_x`.
    pub feature_gain: f64,
    /// Scale of the confounder-to-label weights `w_z`.
    pub label_gain: f64,
}

impl Default for ScmConfig {
    fn default() -> Self {
        ScmConfig {
            num_patients: 500,
            num_features: 16,
            z_true_dim: 8,
            h_true_dim: 8,
            encounter_count: EncounterRange { min: 2, max: 6 },
            confounder_strength: 1.0,
            demographic_effect: 0.5,
            seed: 0,
            sensitive_names: vec!["race".into(), "gender".into(), "insurance".into()],
            observe_f_depe: true,
            noise_std: 1.0,
            state_gain: 1.0,
            feature_gain: 1.0,
            label_gain: 1.0,
        }
    }
}

impl ScmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FlmdError::Config(format!("scm: {msg}")));
        if self.num_features == 0 || self.z_true_dim == 0 || self.h_true_dim == 0 {
            return bad("dimensions must be at least 1".into());
        }
        if self.encounter_count.min == 0 || self.encounter_count.min > self.encounter_count.max {
            return bad(format!(
                "invalid encounter range {:?}",
                self.encounter_count
            ));
        }
        let reals = [
            self.confounder_strength,
            self.demographic_effect,
            self.noise_std,
            self.state_gain,
            self.feature_gain,
            self.label_gain,
        ];
        if reals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("strengths, gains and noise must be finite and nonnegative".into());
        }
        if self.sensitive_names.is_empty() {
            return bad("at least one sensitive attribute is required".into());
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        Schema {
            num_features: self.num_features,
            sensitive_names: self.sensitive_names.clone(),
            label_name: "y".into(),
            extra_names: if self.observe_f_depe {
                vec![F_DEPE.into()]
            } else {
                vec![]
            },
        }
    }
}

/// Affine maps applied per `f_depe` group by [`apply_semisynthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisParams {
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
    pub m3: f64,
    pub m4: f64,
    pub b3: f64,
    pub b4: f64,
}

impl SynthesisParams {
    pub fn default_for(num_features: usize) -> Self {
        SynthesisParams {
            m1: vec![1.5; num_features],
            m2: vec![0.5; num_features],
            b1: vec![0.5; num_features],
            b2: vec![-0.5; num_features],
            m3: 1.0,
            m4: 1.0,
            b3: 0.2,
            b4: -0.2,
        }
    }

    pub fn identity(num_features: usize) -> Self {
        SynthesisParams {
            m1: vec![1.0; num_features],
            m2: vec![1.0; num_features],
            b1: vec![0.0; num_features],
            b2: vec![0.0; num_features],
            m3: 1.0,
            m4: 1.0,
            b3: 0.0,
            b4: 0.0,
        }
    }

    pub fn validate(&self, num_features: usize) -> Result<()> {
        for (name, v) in [
            ("m1", &self.m1),
            ("m2", &self.m2),
            ("b1", &self.b1),
            ("b2", &self.b2),
        ] {
            if v.len() != num_features {
                return Err(FlmdError::Config(format!(
                    "synth: {name} has length {}, F={num_features}",
                    v.len()
                )));
            }
        }
        let all = self
            .m1
            .iter()
            .chain(&self.m2)
            .chain(&self.b1)
            .chain(&self.b2);
        if all
            .chain(&[self.m3, self.m4, self.b3, self.b4])
            .any(|v| !v.is_finite())
        {
            return Err(FlmdError::Config("synth: parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Hidden quantities of one generated patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub id: String,
    pub f_depe: u8,
    pub z: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    /// Label probability of each encounter before Bernoulli sampling.
    pub y_prob: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub patients: Vec<PatientTruth>,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.patients)
    }

    pub fn load(path: &Path) -> Result<GroundTruth> {
        Ok(GroundTruth {
            patients: read_jsonl(path)?,
        })
    }

    /// Checks the 1:1 correspondence with `ds` by id and encounter count.
    pub fn check_aligned(&self, ds: &Dataset) -> Result<()> {
        if self.patients.len() != ds.len() {
            return Err(FlmdError::Alignment(format!(
                "ground truth has {} patients, dataset {}",
                self.patients.len(),
                ds.len()
            )));
        }
        for (g, p) in self.patients.iter().zip(&ds.patients) {
            if g.id != p.id || g.y_prob.len() != p.len() || g.z.len() != p.len() {
                return Err(FlmdError::Alignment(format!(
                    "ground truth '{}' ({} encounters) vs patient '{}' ({} encounters)",
                    g.id,
                    g.y_prob.len(),
                    p.id,
                    p.len()
                )));
            }
        }
        Ok(())
    }
}

type Matrix = Vec<Vec<f64>>;

struct Mechanism {
    a: Matrix,
    b: Matrix,
    w_x: Matrix,
    v_f: Vec<f64>,
    u: Matrix,
    w_z: Vec<f64>,
    w_d: Vec<f64>,
    w_xy: Vec<f64>,
    c_f: f64,
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    (0..rows).map(|_| gaussian_vec(rng, cols, std)).collect()
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn centered(bit: u8) -> f64 {
    2.0 * f64::from(bit) - 1.0
}

impl Mechanism {
    fn draw(cfg: &ScmConfig, rng: &mut impl Rng) -> Mechanism {
        let (f, zd, hd, s) = (
            cfg.num_features,
            cfg.z_true_dim,
            cfg.h_true_dim,
            cfg.sensitive_names.len(),
        );
        Mechanism {
            a: gaussian_matrix(rng, zd, hd, cfg.state_gain / (hd as f64).sqrt()),
            b: gaussian_matrix(rng, hd, hd + zd, 1.5 / ((hd + zd) as f64).sqrt()),
            w_x: gaussian_matrix(rng, f, zd, cfg.feature_gain / (zd as f64).sqrt()),
            v_f: gaussian_vec(rng, f, 1.0),
            u: gaussian_matrix(rng, f, s, 1.0 / (s as f64).sqrt()),
            w_z: gaussian_vec(rng, zd, cfg.label_gain / (zd as f64).sqrt()),
            w_d: gaussian_vec(rng, s, 1.0 / (s as f64).sqrt()),
            w_xy: gaussian_vec(rng, f, 0.5 / (f as f64).sqrt()),
            c_f: 1.0,
        }
    }
}

fn patient_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Draws a dataset and its hidden ground truth. Pure in `cfg`.
pub fn generate_scm_dataset(cfg: &ScmConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let mech = Mechanism::draw(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let s = cfg.sensitive_names.len();
    let width = (cfg.num_patients.max(1) - 1).to_string().len();
    let mut patients = Vec::with_capacity(cfg.num_patients);
    let mut truths = Vec::with_capacity(cfg.num_patients);
    for i in 0..cfg.num_patients {
        let mut rng = patient_rng(cfg.seed, i);
        let id = format!("p{i:0width$}");
        let t_len = rng.random_range(cfg.encounter_count.min..=cfg.encounter_count.max);
        let bits: Vec<u8> = (0..s).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let f_depe = u8::from(rng.random_bool(0.5));
        let d_centered: Vec<f64> = bits.iter().map(|&b| centered(b)).collect();
        let f_centered = centered(f_depe);
        let demo_shift = mat_vec(&mech.u, &d_centered);
        let demo_logit = cfg.demographic_effect * dot(&mech.w_d, &d_centered);

        let mut h = vec![0.0; cfg.h_true_dim];
        let mut truth = PatientTruth {
            id: id.clone(),
            f_depe,
            z: vec![],
            h: vec![],
            y_prob: vec![],
        };
        let mut encounters = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            let z: Vec<f64> = mat_vec(&mech.a, &h)
                .into_iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let x_mean: Vec<f64> = mat_vec(&mech.w_x, &z)
                .into_iter()
                .enumerate()
                .map(|(j, v)| {
                    v + cfg.confounder_strength * mech.v_f[j] * f_centered
                        + cfg.demographic_effect * demo_shift[j]
                })
                .collect();
            let x: Vec<f64> = x_mean
                .iter()
                .map(|m| m + cfg.noise_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let logit = dot(&mech.w_z, &z)
                + demo_logit
                + dot(&mech.w_xy, &x_mean)
                + cfg.confounder_strength * mech.c_f * f_centered;
            let p = sigmoid(logit);
            let y = u8::from(rng.random_bool(p));
            let hz: Vec<f64> = h.iter().chain(&z).copied().collect();
            h = mat_vec(&mech.b, &hz).into_iter().map(f64::tanh).collect();
            encounters.push(Encounter { x, y });
            truth.z.push(z);
            truth.h.push(h.clone());
            truth.y_prob.push(p);
        }
        let extra = if cfg.observe_f_depe {
            vec![f64::from(f_depe)]
        } else {
            vec![]
        };
        patients.push(PatientRecord {
            id,
            demographics: Demographics {
                sensitive_bits: bits,
                extra,
            },
            encounters,
        });
        truths.push(truth);
    }
    Ok((
        Dataset::new(cfg.schema(), patients)?,
        GroundTruth { patients: truths },
    ))
}

/// FNV-1a over the patient id and encounter index.
fn encounter_seed(id: &str, t: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes().chain((t as u64).to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Applies the group-specific affine maps to features and to the label
/// probability, then resamples labels from the clamped probability.
pub fn apply_semisynthetic(
    ds: &Dataset,
    gt: &GroundTruth,
    params: &SynthesisParams,
) -> Result<Dataset> {
    params.validate(ds.schema.num_features)?;
    gt.check_aligned(ds)?;
    let mut out = ds.clone();
    for (p, g) in out.patients.iter_mut().zip(&gt.patients) {
        let (m, b, my, by) = if g.f_depe == 1 {
            (&params.m1, &params.b1, params.m3, params.b3)
        } else {
            (&params.m2, &params.b2, params.m4, params.b4)
        };
        for (t, e) in p.encounters.iter_mut().enumerate() {
            for (j, v) in e.x.iter_mut().enumerate() {
                *v = *v * m[j] + b[j];
            }
            let prob = (my * g.y_prob[t] + by).clamp(0.0, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(encounter_seed(&p.id, t));
            e.y = u8::from(rng.random_bool(prob));
        }
    }
    Ok(out)
}

/// Removes an observed extra demographic field from every patient.
pub fn hide_confounder(ds: &Dataset, field: &str) -> Result<Dataset> {
    let idx = ds.schema.extra_index(field)?;
    let mut out = ds.clone();
    out.schema.extra_names.remove(idx);
    for p in &mut out.patients {
        p.demographics.extra.remove(idx);
    }
    Ok(out)
}

/// Independently resamples the listed sensitive bits of every patient.
pub fn disturb_demographics(ds: &Dataset, fields: &[String], seed: u64) -> Result<Dataset> {
    let idx = fields
        .iter()
        .map(|f| ds.schema.sensitive_index(f))
        .collect::<Result<Vec<_>>>()?;
    let mut out = ds.clone();
    if idx.is_empty() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut out.patients {
        for &k in &idx {
            p.demographics.sensitive_bits[k] = u8::from(rng.random_bool(0.5));
        }
    }
    Ok(out)
}

/// Keeps `⌈p·N⌉` randomly chosen patients in their original form and takes
/// the rest from `disturbed`, pairing patients by index.
pub fn mix_training(
    original: &Dataset,
    disturbed: &Dataset,
    proportion_original: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&proportion_original) {
        return Err(FlmdError::Config(format!(
            "proportion {proportion_original} outside [0, 1]"
        )));
    }
    if original.len() != disturbed.len() || original.schema != disturbed.schema {
        return Err(FlmdError::Data(format!(
            "cannot mix datasets of {} and {} patients with {} schemas",
            original.len(),
            disturbed.len(),
            if original.schema == disturbed.schema {
                "equal"
            } else {
                "different"
            }
        )));
    }
    let n = original.len();
    let keep = ((proportion_original * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut from_original = vec![false; n];
    for &i in &order[..keep.min(n)] {
        from_original[i] = true;
    }
    let patients = (0..n)
        .map(|i| {
            if from_original[i] {
                original.patients[i].clone()
            } else {
                disturbed.patients[i].clone()
            }
        })
        .collect();
    Ok(Dataset {
        schema: original.schema.clone(),
        patients,
    })
}

/// Resamples to `target_size` patients with groups `attr = 1` and
/// `attr = 0` in ratio `a:b`; rounding favors the first group.
///
/// Each group is subsampled without replacement when it is large enough and
/// otherwise kept whole and topped up by sampling with replacement. Selected
/// patients keep input order; top-up copies follow them.
pub fn rebalance_by_attribute(
    ds: &Dataset,
    attr: &str,
    ratio: (u32, u32),
    target_size: usize,
    seed: u64,
) -> Result<Dataset> {
    let k = ds.schema.sensitive_index(attr)?;
    let (a, b) = ratio;
    if a + b == 0 {
        return Err(FlmdError::Config(
            "rebalance ratio must have a positive part".into(),
        ));
    }
    let (g1, g0): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| ds.patients[i].demographics.sensitive_bits[k] == 1);
    let n1 = (target_size as u64 * u64::from(a)).div_ceil(u64::from(a + b)) as usize;
    let n0 = target_size - n1;
    for (group, want, label) in [(&g1, n1, 1), (&g0, n0, 0)] {
        if group.is_empty() && want > 0 {
            return Err(FlmdError::Data(format!("group {attr}={label} is empty")));
        }
    }
    if g1.len() == n1 && g0.len() == n0 {
        return Ok(ds.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(target_size);
    let mut extra = Vec::new();
    for (group, want) in [(g1, n1), (g0, n0)] {
        if want <= group.len() {
            let mut g = group;
            g.shuffle(&mut rng);
            chosen.extend_from_slice(&g[..want]);
        } else {
            for _ in group.len()..want {
                extra.push(group[rng.random_range(0..group.len())]);
            }
            chosen.extend(group);
        }
    }
    chosen.sort_unstable();
    chosen.extend(extra);
    Ok(ds.subset(&chosen))
}
