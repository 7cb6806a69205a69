//! Variational recurrent latent-factor model.
//!
//! For a patient with encounters `x₀ … x_{T−1}` (0-based), step `t` draws
//! `z_t ~ q(· | h_{t−1}, x_{t−1}, d)` with `h_{−1} = h⁰` and `x_{−1} = x⁰`
//! trainable, then updates `h_t = LSTM([z_t; x_t], h_{t−1})`. Steps
//! `t ≥ 1` reconstruct `x_t` from `(z_t, d)`; the first step only feeds the
//! recurrence. The minimized objective is the per-patient average of
//! `KL + NLL` over the `T − 1` scored steps plus `λ₁‖Θ₁‖²`.

use std::collections::BTreeMap;
use std::path::Path;

use diffkernel::layers::{affine, lstm_cell, reparameterize_logvar};
use diffkernel::{adam_step, AdamConfig, Graph, Likelihood, OptState, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ehr::{read_jsonl, write_jsonl, Dataset, PatientRecord, Schema};
use crate::error::{FlmdError, Result};
use crate::metrics::auc;
use crate::scm::GroundTruth;

/// Which patients the unsupervised first stage is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Data {
    #[default]
    Whole,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub z_dim: usize,
    pub h_dim: usize,
    pub phi_hidden: usize,
    pub chi_hidden: usize,
    /// Monte-Carlo samples of `z` per step (`L`).
    #[serde(alias = "L")]
    pub samples: usize,
    pub lr: f64,
    /// `λ₁`, the coefficient of the squared parameter norm in the loss.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// One entry per feature; empty means every feature is Gaussian.
    pub feature_likelihoods: Vec<Likelihood>,
    pub data: Stage1Data,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            z_dim: 256,
            h_dim: 64,
            phi_hidden: 512,
            chi_hidden: 16,
            samples: 1,
            lr: 1e-5,
            weight_decay: 1e-7,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            feature_likelihoods: vec![],
            data: Stage1Data::Whole,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self, num_features: usize) -> Result<()> {
        let dims = [
            self.z_dim,
            self.h_dim,
            self.phi_hidden,
            self.chi_hidden,
            self.samples,
            self.batch_size,
        ];
        if dims.contains(&0) {
            return Err(FlmdError::Config(
                "stage1: dimensions, samples and batch size must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite())
            || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite())
        {
            return Err(FlmdError::Config(
                "stage1: lr must be positive and weight decay nonnegative".into(),
            ));
        }
        if !self.feature_likelihoods.is_empty() && self.feature_likelihoods.len() != num_features {
            return Err(FlmdError::Config(format!(
                "stage1: {} feature likelihoods for F={num_features}",
                self.feature_likelihoods.len()
            )));
        }
        Ok(())
    }
}

/// Layer sizes of a model, fixed at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Arch {
    pub z_dim: usize,
    pub h_dim: usize,
    pub phi_hidden: usize,
    pub chi_hidden: usize,
    pub num_features: usize,
    pub demo_dim: usize,
    pub likelihoods: Vec<Likelihood>,
}

impl Stage1Arch {
    pub fn new(cfg: &Stage1Config, schema: &Schema) -> Result<Stage1Arch> {
        cfg.validate(schema.num_features)?;
        let likelihoods = if cfg.feature_likelihoods.is_empty() {
            vec![Likelihood::Gaussian; schema.num_features]
        } else {
            cfg.feature_likelihoods.clone()
        };
        Ok(Stage1Arch {
            z_dim: cfg.z_dim,
            h_dim: cfg.h_dim,
            phi_hidden: cfg.phi_hidden,
            chi_hidden: cfg.chi_hidden,
            num_features: schema.num_features,
            demo_dim: schema.demographic_dim(),
            likelihoods,
        })
    }

    fn check_schema(&self, schema: &Schema) -> Result<()> {
        if schema.num_features != self.num_features || schema.demographic_dim() != self.demo_dim {
            return Err(FlmdError::Schema(format!(
                "model expects F={} and {} demographic inputs, dataset has F={} and {}",
                self.num_features,
                self.demo_dim,
                schema.num_features,
                schema.demographic_dim()
            )));
        }
        Ok(())
    }

    /// Fresh parameters: Glorot weights, zero biases and initial states.
    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        let enc_in = self.h_dim + self.num_features + self.demo_dim;
        let sizes = [
            (enc_in, self.phi_hidden),
            (self.phi_hidden, self.phi_hidden),
            (self.phi_hidden, 2 * self.z_dim),
        ];
        for (i, &(fan_in, fan_out)) in sizes.iter().enumerate() {
            s.insert_glorot(&format!("phi.w{}", i + 1), fan_in, fan_out, rng)?;
            s.insert_zeros(&format!("phi.b{}", i + 1), &[1, fan_out])?;
        }
        for j in 0..self.num_features {
            s.insert_glorot(
                &chi_name(j, "w1"),
                self.z_dim + self.demo_dim,
                self.chi_hidden,
                rng,
            )?;
            s.insert_zeros(&chi_name(j, "b1"), &[1, self.chi_hidden])?;
            s.insert_glorot(&chi_name(j, "w2"), self.chi_hidden, 1, rng)?;
            s.insert_zeros(&chi_name(j, "b2"), &[1, 1])?;
        }
        s.insert_glorot(
            "psi.w",
            self.z_dim + self.num_features + self.h_dim,
            4 * self.h_dim,
            rng,
        )?;
        s.insert_zeros("psi.b", &[1, 4 * self.h_dim])?;
        s.insert_zeros("init.x0", &[1, self.num_features])?;
        s.insert_zeros("init.h0", &[1, self.h_dim])?;
        Ok(s)
    }
}

pub fn chi_name(j: usize, part: &str) -> String {
    format!("chi.{j:03}.{part}")
}

/// Graph leaves for every parameter of one forward pass.
struct Vars {
    phi: Vec<(Var, Var)>,
    chi: Vec<[Var; 4]>,
    psi: (Var, Var),
    x0: Var,
    h0: Var,
    all: Vec<Var>,
}

impl Vars {
    fn bind(g: &mut Graph, arch: &Stage1Arch, s: &ParamStore) -> Result<Vars> {
        let mut all = Vec::new();
        let mut p = |g: &mut Graph, name: &str| -> Result<Var> {
            let v = g.param(s, name)?;
            all.push(v);
            Ok(v)
        };
        let mut phi = Vec::with_capacity(3);
        for i in 1..=3 {
            phi.push((p(g, &format!("phi.w{i}"))?, p(g, &format!("phi.b{i}"))?));
        }
        let mut chi = Vec::with_capacity(arch.num_features);
        for j in 0..arch.num_features {
            chi.push([
                p(g, &chi_name(j, "w1"))?,
                p(g, &chi_name(j, "b1"))?,
                p(g, &chi_name(j, "w2"))?,
                p(g, &chi_name(j, "b2"))?,
            ]);
        }
        let psi = (p(g, "psi.w")?, p(g, "psi.b")?);
        let x0 = p(g, "init.x0")?;
        let h0 = p(g, "init.h0")?;
        Ok(Vars {
            phi,
            chi,
            psi,
            x0,
            h0,
            all,
        })
    }

    fn encode(
        &self,
        g: &mut Graph,
        arch: &Stage1Arch,
        h: Var,
        x: Var,
        d: Var,
    ) -> Result<(Var, Var)> {
        let mut a = g.concat_cols(&[h, x, d])?;
        for (i, &(w, b)) in self.phi.iter().enumerate() {
            a = affine(g, a, w, b)?;
            if i + 1 < self.phi.len() {
                a = g.tanh(a)?;
            }
        }
        let mu = g.slice_cols(a, 0, arch.z_dim)?;
        let logvar = g.slice_cols(a, arch.z_dim, 2 * arch.z_dim)?;
        Ok((mu, logvar))
    }

    fn decode(&self, g: &mut Graph, arch: &Stage1Arch, z: Var, d: Var) -> Result<Var> {
        let input = g.concat_cols(&[z, d])?;
        let mut outs = Vec::with_capacity(self.chi.len());
        for (&[w1, b1, w2, b2], kind) in self.chi.iter().zip(&arch.likelihoods) {
            let pre = affine(g, input, w1, b1)?;
            let hidden = g.tanh(pre)?;
            let out = affine(g, hidden, w2, b2)?;
            outs.push(match kind {
                Likelihood::Gaussian => out,
                Likelihood::Bernoulli => g.sigmoid(out)?,
            });
        }
        Ok(g.concat_cols(&outs)?)
    }

    fn recur(&self, g: &mut Graph, z: Var, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let input = g.concat_cols(&[z, x])?;
        Ok(lstm_cell(g, input, h, c, self.psi.0, self.psi.1)?)
    }

    fn l2(&self, g: &mut Graph) -> Result<Var> {
        let norms = self
            .all
            .iter()
            .map(|&v| g.sq_norm(v))
            .collect::<diffkernel::Result<Vec<_>>>()?;
        let mut total = norms[0];
        for &n in &norms[1..] {
            total = g.add(total, n)?;
        }
        Ok(total)
    }
}

/// Patients padded to a common length, one row per patient.
struct Batch {
    lens: Vec<usize>,
    d: Tensor,
    /// `[rows, F]` features of each step, zero beyond a patient's length.
    x: Vec<Tensor>,
}

impl Batch {
    fn new(patients: &[&PatientRecord], arch: &Stage1Arch) -> Result<Batch> {
        let rows = patients.len();
        let t_max = patients.iter().map(|p| p.len()).max().unwrap_or(0);
        let f = arch.num_features;
        let d_rows: Vec<Vec<f64>> = patients
            .iter()
            .map(|p| p.demographics.as_features())
            .collect();
        let d = Tensor::new(vec![rows, arch.demo_dim], d_rows.concat())?;
        let x = (0..t_max)
            .map(|t| {
                let mut data = vec![0.0; rows * f];
                for (r, p) in patients.iter().enumerate() {
                    if let Some(e) = p.encounters.get(t) {
                        data[r * f..(r + 1) * f].copy_from_slice(&e.x);
                    }
                }
                Tensor::new(vec![rows, f], data)
            })
            .collect::<diffkernel::Result<_>>()?;
        Ok(Batch {
            lens: patients.iter().map(|p| p.len()).collect(),
            d,
            x,
        })
    }

    fn rows(&self) -> usize {
        self.lens.len()
    }

    /// Loss weights of step `t`: `1 / ((T − 1) · n_scored)` on rows scored
    /// at that step, zero elsewhere.
    fn step_weights(&self, t: usize) -> Tensor {
        let scored = self.lens.iter().filter(|&&l| l >= 2).count().max(1) as f64;
        let w = self
            .lens
            .iter()
            .map(|&l| {
                if t >= 1 && t < l {
                    1.0 / ((l - 1) as f64 * scored)
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::new(vec![self.rows(), 1], w).expect("finite weights")
    }
}

struct Step {
    mu: Var,
    logvar: Var,
    samples: Vec<Var>,
    h: Var,
}

/// Runs the recurrence. With `rng`, `samples` latents are drawn per step and
/// the first feeds the recurrence; without, the posterior mean is used.
fn unroll(
    g: &mut Graph,
    arch: &Stage1Arch,
    v: &Vars,
    batch: &Batch,
    mut sampling: Option<(&mut ChaCha8Rng, usize)>,
) -> Result<Vec<Step>> {
    let rows = batch.rows();
    let d = g.constant(batch.d.clone());
    let mut h = g.broadcast_rows(v.h0, rows)?;
    let mut x_prev = g.broadcast_rows(v.x0, rows)?;
    let mut c = g.constant(Tensor::zeros(&[rows, arch.h_dim]));
    let mut steps = Vec::with_capacity(batch.x.len());
    for x_t in &batch.x {
        let (mu, logvar) = v.encode(g, arch, h, x_prev, d)?;
        let samples = match sampling.as_mut() {
            Some((rng, n)) => (0..*n)
                .map(|_| {
                    let eps: Vec<f64> = (0..rows * arch.z_dim)
                        .map(|_| rng.sample(StandardNormal))
                        .collect();
                    let eps = g.constant(Tensor::new(vec![rows, arch.z_dim], eps)?);
                    reparameterize_logvar(g, mu, logvar, eps)
                })
                .collect::<diffkernel::Result<Vec<_>>>()?,
            None => vec![mu],
        };
        let x = g.constant(x_t.clone());
        let (h_next, c_next) = v.recur(g, samples[0], x, h, c)?;
        steps.push(Step {
            mu,
            logvar,
            samples,
            h: h_next,
        });
        h = h_next;
        c = c_next;
        x_prev = x;
    }
    Ok(steps)
}

/// Scalar loss and its parts for one batch.
struct LossTerms {
    loss: Var,
    kl: Var,
    nll: Var,
    l2: Var,
}

fn batch_loss(
    g: &mut Graph,
    arch: &Stage1Arch,
    store: &ParamStore,
    batch: &Batch,
    samples: usize,
    weight_decay: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossTerms> {
    let v = Vars::bind(g, arch, store)?;
    let steps = unroll(g, arch, &v, batch, Some((rng, samples)))?;
    let d = g.constant(batch.d.clone());
    let mut kl_total = g.constant(Tensor::zeros(&[1, 1]));
    let mut nll_total = kl_total;
    for (t, step) in steps.iter().enumerate().skip(1) {
        let w = batch.step_weights(t);
        let kl = g.kl_rows(step.mu, step.logvar)?;
        let kl = g.weighted_sum(kl, w.clone())?;
        kl_total = g.add(kl_total, kl)?;
        let per_sample = w.map(|x| x / samples as f64);
        for &z in &step.samples {
            let x_hat = v.decode(g, arch, z, d)?;
            let nll = g.feature_nll_rows(x_hat, batch.x[t].clone(), &arch.likelihoods)?;
            let nll = g.weighted_sum(nll, per_sample.clone())?;
            nll_total = g.add(nll_total, nll)?;
        }
    }
    let l2 = v.l2(g)?;
    let penalty = g.scale(l2, weight_decay)?;
    let elbo = g.add(kl_total, nll_total)?;
    let loss = g.add(elbo, penalty)?;
    Ok(LossTerms {
        loss,
        kl: kl_total,
        nll: nll_total,
        l2,
    })
}

/// A first-stage model: its configuration, layer sizes and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Model {
    pub config: Stage1Config,
    pub arch: Stage1Arch,
    pub params: ParamStore,
}

impl Stage1Model {
    pub fn new(cfg: &Stage1Config, schema: &Schema) -> Result<Stage1Model> {
        let arch = Stage1Arch::new(cfg, schema)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let params = arch.init_params(&mut rng)?;
        Ok(Stage1Model {
            config: cfg.clone(),
            arch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(diffkernel::checkpoint::save(path, &self.params, None)?)
    }

    /// Restores parameters saved by [`Stage1Model::save`] into a model of
    /// matching architecture.
    pub fn load(path: &Path, cfg: &Stage1Config, schema: &Schema) -> Result<Stage1Model> {
        let mut model = Stage1Model::new(cfg, schema)?;
        let (params, _) = diffkernel::checkpoint::load(path)?;
        let expected: Vec<&str> = model.params.names().collect();
        if params.names().collect::<Vec<_>>() != expected {
            return Err(FlmdError::Schema(format!(
                "{}: parameter names do not match the model",
                path.display()
            )));
        }
        for (name, t) in params.iter() {
            model.params.set(name, t.clone())?;
        }
        Ok(model)
    }

    fn single(
        &self,
        f: impl FnOnce(&mut Graph, &Vars) -> Result<Vec<Var>>,
    ) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let v = Vars::bind(&mut g, &self.arch, &self.params)?;
        let outs = f(&mut g, &v)?;
        Ok(outs
            .into_iter()
            .map(|o| g.value(o).data().to_vec())
            .collect())
    }

    fn row(g: &mut Graph, values: &[f64], len: usize, what: &str) -> Result<Var> {
        if values.len() != len {
            return Err(FlmdError::Kernel(diffkernel::KernelError::Shape(format!(
                "{what} has length {}, expected {len}",
                values.len()
            ))));
        }
        Ok(g.constant(Tensor::row(values)?))
    }

    /// Posterior `(μ, σ)` of the next latent given the previous state,
    /// previous features and demographics.
    pub fn encode(
        &self,
        h_prev: &[f64],
        x_prev: &[f64],
        d: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let a = &self.arch;
        let mut out = self.single(|g, v| {
            let h = Self::row(g, h_prev, a.h_dim, "h")?;
            let x = Self::row(g, x_prev, a.num_features, "x")?;
            let d = Self::row(g, d, a.demo_dim, "d")?;
            let (mu, logvar) = v.encode(g, a, h, x, d)?;
            Ok(vec![mu, logvar])
        })?;
        let sigma = out
            .pop()
            .expect("two outputs")
            .iter()
            .map(|lv| (0.5 * lv).exp())
            .collect();
        Ok((out.pop().expect("two outputs"), sigma))
    }

    /// Per-feature reconstruction `x̂ = (χ₁(z, d), …, χ_F(z, d))`.
    pub fn decode(&self, z: &[f64], d: &[f64]) -> Result<Vec<f64>> {
        let a = &self.arch;
        let mut out = self.single(|g, v| {
            let z = Self::row(g, z, a.z_dim, "z")?;
            let d = Self::row(g, d, a.demo_dim, "d")?;
            Ok(vec![v.decode(g, a, z, d)?])
        })?;
        Ok(out.pop().expect("one output"))
    }

    /// One recurrent step on `[z; x]`, returning `(h, c)`.
    pub fn recur(
        &self,
        z: &[f64],
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let a = &self.arch;
        let mut out = self.single(|g, v| {
            let z = Self::row(g, z, a.z_dim, "z")?;
            let x = Self::row(g, x, a.num_features, "x")?;
            let h = Self::row(g, h_prev, a.h_dim, "h")?;
            let c = Self::row(g, c_prev, a.h_dim, "c")?;
            let (h, c) = v.recur(g, z, x, h, c)?;
            Ok(vec![h, c])
        })?;
        let c = out.pop().expect("two outputs");
        Ok((out.pop().expect("two outputs"), c))
    }

    /// Objective of a single patient with at least two encounters.
    pub fn loss(&self, p: &PatientRecord, rng: &mut ChaCha8Rng) -> Result<f64> {
        if p.len() < 2 {
            return Err(FlmdError::Data(format!(
                "patient '{}' has no next-encounter target",
                p.id
            )));
        }
        let batch = Batch::new(&[p], &self.arch)?;
        let mut g = Graph::new();
        let terms = batch_loss(
            &mut g,
            &self.arch,
            &self.params,
            &batch,
            self.config.samples,
            self.config.weight_decay,
            rng,
        )?;
        Ok(g.value(terms.loss).item()?)
    }

    /// Builds the mean objective over `patients` into `g`, reading
    /// parameters from `store`. Used for gradient checks.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patients: &[&PatientRecord],
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let batch = Batch::new(patients, &self.arch)?;
        Ok(batch_loss(
            g,
            &self.arch,
            store,
            &batch,
            self.config.samples,
            self.config.weight_decay,
            rng,
        )?
        .loss)
    }
}

/// Draws `ε ~ N(0, I)` and returns `μ + σ ⊙ ε`.
pub fn sample_latent(mu: &[f64], sigma: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    let eps = diffkernel::functional::standard_normal(rng, mu.len());
    Ok(diffkernel::functional::reparameterize(mu, sigma, &eps)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub loss: f64,
    pub kl: f64,
    pub nll: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1History {
    pub epochs: Vec<Stage1Epoch>,
    pub steps: usize,
}

/// Minibatch Adam on the mean objective. Patients with a single encounter
/// have no target and are left out of the loss.
pub fn train_stage1(ds: &Dataset, cfg: &Stage1Config) -> Result<(Stage1Model, Stage1History)> {
    let mut model = Stage1Model::new(cfg, &ds.schema)?;
    let history = fit_stage1(&mut model, ds)?;
    Ok((model, history))
}

/// Continues training `model` on `ds` for `model.config.epochs` epochs.
pub fn fit_stage1(model: &mut Stage1Model, ds: &Dataset) -> Result<Stage1History> {
    model.arch.check_schema(&ds.schema)?;
    let cfg = model.config.clone();
    let items: Vec<&PatientRecord> = ds.patients.iter().filter(|p| p.len() >= 2).collect();
    if items.is_empty() {
        return Err(FlmdError::Data(
            "stage 1 needs a patient with at least two encounters".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    // the squared-norm penalty lives in the loss, so no decoupled decay here
    let mut opt = OptState::new(AdamConfig::new(cfg.lr));
    let mut history = Stage1History::default();
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let patients: Vec<&PatientRecord> = chunk.iter().map(|&i| items[i]).collect();
            let mut step = || -> Result<[f64; 4]> {
                let batch = Batch::new(&patients, &model.arch)?;
                let mut g = Graph::new();
                let t = batch_loss(
                    &mut g,
                    &model.arch,
                    &model.params,
                    &batch,
                    cfg.samples,
                    cfg.weight_decay,
                    &mut rng,
                )?;
                g.backward(t.loss, &mut model.params)?;
                adam_step(&mut model.params, &mut opt)?;
                Ok([t.loss, t.kl, t.nll, t.l2].map(|v| g.value(v).data()[0]))
            };
            let values =
                step().map_err(|e| e.context(format!("stage 1 epoch {epoch} batch {b}")))?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
            batches += 1;
            history.steps += 1;
        }
        let n = batches as f64;
        history.epochs.push(Stage1Epoch {
            epoch,
            loss: sums[0] / n,
            kl: sums[1] / n,
            nll: sums[2] / n,
            l2: sums[3] / n,
        });
    }
    Ok(history)
}

/// Mean squared error of next-encounter reconstructions decoded from the
/// posterior mean, over every scored encounter and feature.
pub fn reconstruction_mse(model: &Stage1Model, ds: &Dataset) -> Result<f64> {
    model.arch.check_schema(&ds.schema)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in ds.patients.chunks(256) {
        let patients: Vec<&PatientRecord> = chunk.iter().collect();
        let batch = Batch::new(&patients, &model.arch)?;
        let mut g = Graph::new();
        let v = Vars::bind(&mut g, &model.arch, &model.params)?;
        let steps = unroll(&mut g, &model.arch, &v, &batch, None)?;
        let d = g.constant(batch.d.clone());
        for (t, step) in steps.iter().enumerate().skip(1) {
            let x_hat = v.decode(&mut g, &model.arch, step.mu, d)?;
            let pred = g.value(x_hat);
            for (r, &len) in batch.lens.iter().enumerate() {
                if t < len {
                    let target = batch.x[t].row_slice(r);
                    total += pred
                        .row_slice(r)
                        .iter()
                        .zip(target)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>();
                    count += target.len();
                }
            }
        }
    }
    if count == 0 {
        return Err(FlmdError::Data(
            "no encounter has a reconstruction target".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Learned latents of one patient, one row per encounter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientLatents {
    pub z: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentTrace {
    pub patients: BTreeMap<String, PatientLatents>,
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    id: String,
    t: usize,
    z: Vec<f64>,
    h: Vec<f64>,
}

impl LatentTrace {
    pub fn get(&self, id: &str) -> Result<&PatientLatents> {
        self.patients
            .get(id)
            .ok_or_else(|| FlmdError::Alignment(format!("no latents for patient '{id}'")))
    }

    pub fn num_entries(&self) -> usize {
        self.patients.values().map(|p| p.z.len()).sum()
    }

    pub fn z_dim(&self) -> Option<usize> {
        self.patients
            .values()
            .next()
            .and_then(|p| p.z.first())
            .map(Vec::len)
    }

    /// Latents of both traces; `other` wins on shared ids.
    pub fn merged(&self, other: &LatentTrace) -> LatentTrace {
        let mut out = self.clone();
        out.patients
            .extend(other.patients.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }

    /// Writes one `{"id", "t", "z", "h"}` line per encounter, `t` 1-based.
    pub fn save(&self, path: &Path) -> Result<()> {
        let lines: Vec<TraceLine> = self
            .patients
            .iter()
            .flat_map(|(id, p)| {
                p.z.iter()
                    .zip(&p.h)
                    .enumerate()
                    .map(move |(t, (z, h))| TraceLine {
                        id: id.clone(),
                        t: t + 1,
                        z: z.clone(),
                        h: h.clone(),
                    })
            })
            .collect();
        write_jsonl(path, &lines)
    }

    pub fn load(path: &Path) -> Result<LatentTrace> {
        let mut trace = LatentTrace::default();
        for line in read_jsonl::<TraceLine>(path)? {
            let entry = trace
                .patients
                .entry(line.id.clone())
                .or_insert(PatientLatents {
                    z: vec![],
                    h: vec![],
                });
            if line.t != entry.z.len() + 1 {
                return Err(FlmdError::Alignment(format!(
                    "{}: patient '{}' entry t={} out of order",
                    path.display(),
                    line.id,
                    line.t
                )));
            }
            entry.z.push(line.z);
            entry.h.push(line.h);
        }
        Ok(trace)
    }
}

/// Deterministic latents for every encounter, using posterior means.
pub fn extract_latents(ds: &Dataset, model: &Stage1Model) -> Result<LatentTrace> {
    model.arch.check_schema(&ds.schema)?;
    let mut trace = LatentTrace::default();
    for chunk in ds.patients.chunks(256) {
        let patients: Vec<&PatientRecord> = chunk.iter().collect();
        let batch = Batch::new(&patients, &model.arch)?;
        let mut g = Graph::new();
        let v = Vars::bind(&mut g, &model.arch, &model.params)?;
        let steps = unroll(&mut g, &model.arch, &v, &batch, None)?;
        for (r, p) in patients.iter().enumerate() {
            let latents = PatientLatents {
                z: steps[..p.len()]
                    .iter()
                    .map(|s| g.value(s.mu).row_slice(r).to_vec())
                    .collect(),
                h: steps[..p.len()]
                    .iter()
                    .map(|s| g.value(s.h).row_slice(r).to_vec())
                    .collect(),
            };
            trace.patients.insert(p.id.clone(), latents);
        }
    }
    Ok(trace)
}

/// Budget of the linear confounder probe.
pub const PROBE_STEPS: usize = 400;
pub const PROBE_LR: f64 = 0.05;

/// Held-out AUC of a logistic-regression probe from each patient's mean
/// latent to the hidden `f_depe` flag, on a seeded 70/30 patient split.
pub fn probe_confounder(trace: &LatentTrace, gt: &GroundTruth, seed: u64) -> Result<f64> {
    let mut feats = Vec::with_capacity(gt.patients.len());
    let mut labels = Vec::with_capacity(gt.patients.len());
    for p in &gt.patients {
        let lat = trace.get(&p.id)?;
        if lat.z.is_empty() {
            return Err(FlmdError::Alignment(format!(
                "patient '{}' has no latents",
                p.id
            )));
        }
        let k = lat.z[0].len();
        let mut mean = vec![0.0; k];
        for z in &lat.z {
            for (m, v) in mean.iter_mut().zip(z) {
                *m += v / lat.z.len() as f64;
            }
        }
        feats.push(mean);
        labels.push(f64::from(p.f_depe));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(FlmdError::UndefinedMetric(
            "f_depe has a single class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..feats.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (0.7 * feats.len() as f64).round() as usize;
    let (train, test) = order.split_at(n_train);
    if test.is_empty() || train.is_empty() {
        return Err(FlmdError::Data(
            "too few patients for the probe split".into(),
        ));
    }

    let k = feats[0].len();
    let mut mean = vec![0.0; k];
    let mut std = vec![0.0; k];
    for &i in train {
        for j in 0..k {
            mean[j] += feats[i][j] / train.len() as f64;
        }
    }
    for &i in train {
        for j in 0..k {
            std[j] += (feats[i][j] - mean[j]).powi(2) / train.len() as f64;
        }
    }
    let std: Vec<f64> = std.iter().map(|v| v.sqrt().max(1e-6)).collect();
    let design = |idx: &[usize]| -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| (0..k).map(|j| (feats[i][j] - mean[j]) / std[j]).collect())
            .collect();
        Ok(Tensor::from_rows(&rows)?)
    };
    let x_train = design(train)?;
    let y_train = Tensor::new(
        vec![train.len(), 1],
        train.iter().map(|&i| labels[i]).collect(),
    )?;

    let mut store = ParamStore::new();
    store.insert_zeros("w", &[k, 1])?;
    store.insert_zeros("b", &[1, 1])?;
    let mut opt = OptState::new(AdamConfig::new(PROBE_LR));
    for _ in 0..PROBE_STEPS {
        let mut g = Graph::new();
        let x = g.constant(x_train.clone());
        let (w, b) = (g.param(&store, "w")?, g.param(&store, "b")?);
        let logit = affine(&mut g, x, w, b)?;
        let p = g.sigmoid(logit)?;
        let bce = g.bce(p, y_train.clone())?;
        let fit = g.mean_all(bce)?;
        let norm = g.sq_norm(w)?;
        let ridge = g.scale(norm, 1e-3)?;
        let loss = g.add(fit, ridge)?;
        g.backward(loss, &mut store)?;
        adam_step(&mut store, &mut opt)?;
    }
    let x_test = design(test)?;
    let w = store.get("w")?.data();
    let b = store.get("b")?.data()[0];
    let scores: Vec<f64> = (0..test.len())
        .map(|r| {
            x_test
                .row_slice(r)
                .iter()
                .zip(w)
                .map(|(x, w)| x * w)
                .sum::<f64>()
                + b
        })
        .collect();
    let test_labels: Vec<f64> = test.iter().map(|&i| labels[i]).collect();
    auc(&scores, &test_labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{Demographics, Encounter};

    fn schema(f: usize) -> Schema {
        Schema {
            num_features: f,
            sensitive_names: vec!["race".into()],
            label_name: "y".into(),
            extra_names: vec![],
        }
    }

    fn tiny_cfg() -> Stage1Config {
        Stage1Config {
            z_dim: 3,
            h_dim: 4,
            phi_hidden: 5,
            chi_hidden: 2,
            ..Stage1Config::default()
        }
    }

    fn patient(id: &str, t: usize) -> PatientRecord {
        PatientRecord {
            id: id.into(),
            demographics: Demographics {
                sensitive_bits: vec![1],
                extra: vec![],
            },
            encounters: (0..t)
                .map(|i| Encounter {
                    x: vec![i as f64, -0.5],
                    y: 0,
                })
                .collect(),
        }
    }

    fn zeroed(model: &mut Stage1Model) {
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        for n in names {
            let shape = model.params.get(&n).unwrap().shape().to_vec();
            model.params.set(&n, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn zero_encoder_gives_standard_normal() {
        let mut m = Stage1Model::new(&tiny_cfg(), &schema(2)).unwrap();
        zeroed(&mut m);
        let (mu, sigma) = m.encode(&[0.0; 4], &[1.0, 2.0], &[1.0]).unwrap();
        assert_eq!(mu, vec![0.0; 3]);
        assert_eq!(sigma, vec![1.0; 3]);
        assert!(m.encode(&[0.0; 3], &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn zero_recurrence_stays_at_zero() {
        let mut m = Stage1Model::new(&tiny_cfg(), &schema(2)).unwrap();
        zeroed(&mut m);
        let (h, c) = m
            .recur(&[1.0; 3], &[2.0, 3.0], &[0.0; 4], &[0.0; 4])
            .unwrap();
        assert_eq!(h, vec![0.0; 4]);
        assert_eq!(c, vec![0.0; 4]);
    }

    #[test]
    fn perturbing_one_decoder_moves_one_output() {
        let mut m = Stage1Model::new(&tiny_cfg(), &schema(2)).unwrap();
        let before = m.decode(&[0.3, -0.2, 0.9], &[1.0]).unwrap();
        let name = chi_name(1, "b2");
        m.params.set(&name, Tensor::full(&[1, 1], 0.7)).unwrap();
        let after = m.decode(&[0.3, -0.2, 0.9], &[1.0]).unwrap();
        assert_eq!(before[0], after[0]);
        assert!((after[1] - before[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn single_encounter_patient_has_no_loss() {
        let m = Stage1Model::new(&tiny_cfg(), &schema(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.loss(&patient("a", 1), &mut rng).is_err());
        assert!(m.loss(&patient("a", 2), &mut rng).unwrap().is_finite());
    }

    #[test]
    fn config_validation() {
        assert!(Stage1Config {
            z_dim: 0,
            ..tiny_cfg()
        }
        .validate(2)
        .is_err());
        assert!(Stage1Config {
            feature_likelihoods: vec![Likelihood::Gaussian],
            ..tiny_cfg()
        }
        .validate(2)
        .is_err());
        assert!(Stage1Config {
            lr: 0.0,
            ..tiny_cfg()
        }
        .validate(2)
        .is_err());
    }

    #[test]
    fn trace_covers_every_encounter() {
        let ds = Dataset::new(schema(2), vec![patient("a", 1), patient("b", 3)]).unwrap();
        let m = Stage1Model::new(&tiny_cfg(), &ds.schema).unwrap();
        let trace = extract_latents(&ds, &m).unwrap();
        assert_eq!(trace.num_entries(), 4);
        assert_eq!(trace.z_dim(), Some(3));
        assert_eq!(trace, extract_latents(&ds, &m).unwrap());
    }
}
