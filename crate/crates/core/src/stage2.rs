//! Attention classifier over `(d, z, x)` tokens with a counterfactual
//! fairness term computed on flipped sensitive attributes.

use std::io::Write;
use std::path::Path;

use diffkernel::layers::{affine, multi_head_attention, AttentionWeights};
use diffkernel::{adam_step, AdamConfig, Graph, OptState, ParamStore, Tensor, Var, PROB_EPS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::{Dataset, Demographics, Schema};
use crate::error::{FlmdError, Result};
use crate::metrics::{auc, Prediction};
use crate::stage1::LatentTrace;

/// How counterfactual demographics are formed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlipMode {
    /// Negate every configured bit.
    #[default]
    All,
    /// Negate a uniformly drawn nonempty subset of the configured bits.
    RandomSubset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    /// `λ`, weight of the counterfactual loss.
    pub lambda: f64,
    /// `λ₂`, coefficient of the squared parameter norm.
    pub weight_decay: f64,
    pub lr: f64,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Hidden width of each feed-forward block; 0 means `2 · d_model`.
    pub ffn_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Sensitive attributes flipped for counterfactuals; `None` means all.
    pub sensitive_fields: Option<Vec<String>>,
    pub flip_mode: FlipMode,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lambda: 1.0,
            weight_decay: 0.0,
            lr: 1e-5,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ffn_hidden: 0,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            sensitive_fields: None,
            flip_mode: FlipMode::All,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FlmdError::Config(format!("stage2: {m}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite())
            || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite())
        {
            return bad("lambda and weight decay must be finite and nonnegative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.batch_size == 0 {
            return bad("d_model, n_heads and batch size must be at least 1");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(FlmdError::Config(format!(
                "stage2: d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    fn flip_indices(&self, schema: &Schema) -> Result<Vec<usize>> {
        match &self.sensitive_fields {
            None => Ok((0..schema.sensitive_names.len()).collect()),
            Some(fields) => fields.iter().map(|f| schema.sensitive_index(f)).collect(),
        }
    }
}

/// Negates the listed sensitive bits.
pub fn counterfactual_demographics(
    d: &Demographics,
    schema: &Schema,
    fields: &[String],
) -> Result<Demographics> {
    let mut out = d.clone();
    for f in fields {
        let k = schema.sensitive_index(f)?;
        out.sensitive_bits[k] = 1 - out.sensitive_bits[k];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Arch {
    pub demo_dim: usize,
    pub z_dim: usize,
    pub num_features: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_hidden: usize,
    /// Positions in the demographic vector negated for counterfactuals.
    pub flip: Vec<usize>,
}

impl Stage2Arch {
    pub fn new(cfg: &Stage2Config, schema: &Schema, z_dim: usize) -> Result<Stage2Arch> {
        cfg.validate()?;
        Ok(Stage2Arch {
            demo_dim: schema.demographic_dim(),
            z_dim,
            num_features: schema.num_features,
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            n_layers: cfg.n_layers,
            ffn_hidden: if cfg.ffn_hidden == 0 {
                2 * cfg.d_model
            } else {
                cfg.ffn_hidden
            },
            flip: cfg.flip_indices(schema)?,
        })
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamStore> {
        let m = self.d_model;
        let mut s = ParamStore::new();
        for (name, width) in [
            ("d", self.demo_dim),
            ("z", self.z_dim),
            ("x", self.num_features),
        ] {
            s.insert_glorot(&format!("proj.{name}"), width, m, rng)?;
            s.insert_normal(&format!("slot.{name}"), &[1, m], 0.1, rng)?;
        }
        for l in 0..self.n_layers {
            for part in ["wq", "wk", "wv", "wo"] {
                s.insert_glorot(&format!("layer{l}.{part}"), m, m, rng)?;
            }
            s.insert_zeros(&format!("layer{l}.bo"), &[1, m])?;
            s.insert_glorot(&format!("layer{l}.ff1.w"), m, self.ffn_hidden, rng)?;
            s.insert_zeros(&format!("layer{l}.ff1.b"), &[1, self.ffn_hidden])?;
            s.insert_glorot(&format!("layer{l}.ff2.w"), self.ffn_hidden, m, rng)?;
            s.insert_zeros(&format!("layer{l}.ff2.b"), &[1, m])?;
        }
        s.insert_glorot("head.w", m, 1, rng)?;
        s.insert_zeros("head.b", &[1, 1])?;
        Ok(s)
    }
}

/// One encounter as model input.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Item {
    pub d: Vec<f64>,
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    pub y: f64,
}

/// Encounter-level items of `ds` with their latents, in dataset order.
pub fn collect_items(ds: &Dataset, trace: &LatentTrace) -> Result<Vec<Stage2Item>> {
    let mut items = Vec::with_capacity(ds.num_encounters());
    for p in &ds.patients {
        let lat = trace.get(&p.id)?;
        if lat.z.len() != p.len() {
            return Err(FlmdError::Alignment(format!(
                "patient '{}' has {} encounters but {} latents",
                p.id,
                p.len(),
                lat.z.len()
            )));
        }
        let d = p.demographics.as_features();
        for (e, z) in p.encounters.iter().zip(&lat.z) {
            items.push(Stage2Item {
                d: d.clone(),
                z: z.clone(),
                x: e.x.clone(),
                y: f64::from(e.y),
            });
        }
    }
    Ok(items)
}

struct LayerVars {
    attn: AttentionWeights,
    ff1: (Var, Var),
    ff2: (Var, Var),
}

struct Vars {
    proj: [Var; 3],
    slot: [Var; 3],
    layers: Vec<LayerVars>,
    head: (Var, Var),
    all: Vec<Var>,
}

impl Vars {
    fn bind(g: &mut Graph, arch: &Stage2Arch, s: &ParamStore) -> Result<Vars> {
        let mut all = Vec::new();
        let mut p = |g: &mut Graph, name: &str| -> Result<Var> {
            let v = g.param(s, name)?;
            all.push(v);
            Ok(v)
        };
        let proj = [p(g, "proj.d")?, p(g, "proj.z")?, p(g, "proj.x")?];
        let slot = [p(g, "slot.d")?, p(g, "slot.z")?, p(g, "slot.x")?];
        let mut layers = Vec::with_capacity(arch.n_layers);
        for l in 0..arch.n_layers {
            let name = |part: &str| format!("layer{l}.{part}");
            layers.push(LayerVars {
                attn: AttentionWeights {
                    wq: p(g, &name("wq"))?,
                    wk: p(g, &name("wk"))?,
                    wv: p(g, &name("wv"))?,
                    wo: p(g, &name("wo"))?,
                    bo: p(g, &name("bo"))?,
                },
                ff1: (p(g, &name("ff1.w"))?, p(g, &name("ff1.b"))?),
                ff2: (p(g, &name("ff2.w"))?, p(g, &name("ff2.b"))?),
            });
        }
        let head = (p(g, "head.w")?, p(g, "head.b")?);
        Ok(Vars {
            proj,
            slot,
            layers,
            head,
            all,
        })
    }

    /// `[3n, d_model]` tokens, rows ordered `(d, z, x)` per item.
    fn tokens(&self, g: &mut Graph, inputs: [Tensor; 3]) -> Result<Var> {
        let mut parts = Vec::with_capacity(3);
        for ((t, &w), &slot) in inputs.into_iter().zip(&self.proj).zip(&self.slot) {
            let c = g.constant(t);
            let projected = g.matmul(c, w)?;
            parts.push(g.add_bias(projected, slot)?);
        }
        Ok(g.interleave_rows(&parts)?)
    }

    /// Probabilities `[n, 1]` from tokens.
    fn head(&self, g: &mut Graph, arch: &Stage2Arch, mut tokens: Var) -> Result<Var> {
        for layer in &self.layers {
            let (attended, _) = multi_head_attention(g, tokens, &layer.attn, arch.n_heads, 3)?;
            tokens = g.add(tokens, attended)?;
            let pre = affine(g, tokens, layer.ff1.0, layer.ff1.1)?;
            let hidden = g.relu(pre)?;
            let ff = affine(g, hidden, layer.ff2.0, layer.ff2.1)?;
            tokens = g.add(tokens, ff)?;
        }
        let pooled = g.block_mean(tokens, 3)?;
        let logit = affine(g, pooled, self.head.0, self.head.1)?;
        Ok(g.sigmoid(logit)?)
    }

    fn l2(&self, g: &mut Graph) -> Result<Var> {
        let mut total = g.sq_norm(self.all[0])?;
        for &v in &self.all[1..] {
            let n = g.sq_norm(v)?;
            total = g.add(total, n)?;
        }
        Ok(total)
    }
}

fn stack(rows: &[&[f64]], width: usize, what: &str) -> Result<Tensor> {
    if let Some(bad) = rows.iter().find(|r| r.len() != width) {
        return Err(FlmdError::Kernel(diffkernel::KernelError::Shape(format!(
            "{what} has length {}, expected {width}",
            bad.len()
        ))));
    }
    Ok(Tensor::new(vec![rows.len(), width], rows.concat())?)
}

fn inputs(arch: &Stage2Arch, demos: &[&[f64]], items: &[&Stage2Item]) -> Result<[Tensor; 3]> {
    let z: Vec<&[f64]> = items.iter().map(|i| i.z.as_slice()).collect();
    let x: Vec<&[f64]> = items.iter().map(|i| i.x.as_slice()).collect();
    Ok([
        stack(demos, arch.demo_dim, "d")?,
        stack(&z, arch.z_dim, "z")?,
        stack(&x, arch.num_features, "x")?,
    ])
}

struct LossTerms {
    loss: Var,
    probs: Var,
    l2: Var,
}

/// Factual and counterfactual items are stacked into one forward pass; the
/// first `n` output rows are factual.
fn batch_loss(
    g: &mut Graph,
    arch: &Stage2Arch,
    store: &ParamStore,
    items: &[&Stage2Item],
    cf_demos: &[Vec<f64>],
    lambda: f64,
    weight_decay: f64,
) -> Result<LossTerms> {
    let n = items.len();
    let v = Vars::bind(g, arch, store)?;
    let mut demos: Vec<&[f64]> = items.iter().map(|i| i.d.as_slice()).collect();
    demos.extend(cf_demos.iter().map(Vec::as_slice));
    let doubled: Vec<&Stage2Item> = items.iter().chain(items.iter()).copied().collect();
    let tokens = v.tokens(g, inputs(arch, &demos, &doubled)?)?;
    let probs = v.head(g, arch, tokens)?;
    let targets = Tensor::new(vec![2 * n, 1], doubled.iter().map(|i| i.y).collect())?;
    let bce = g.bce(probs, targets)?;
    let weights: Vec<f64> = (0..2 * n)
        .map(|r| (if r < n { 1.0 } else { lambda }) / n as f64)
        .collect();
    let fit = g.weighted_sum(bce, Tensor::new(vec![2 * n, 1], weights)?)?;
    let l2 = v.l2(g)?;
    let penalty = g.scale(l2, weight_decay)?;
    let loss = g.add(fit, penalty)?;
    Ok(LossTerms { loss, probs, l2 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Model {
    pub config: Stage2Config,
    pub arch: Stage2Arch,
    pub params: ParamStore,
}

impl Stage2Model {
    pub fn new(cfg: &Stage2Config, schema: &Schema, z_dim: usize) -> Result<Stage2Model> {
        let arch = Stage2Arch::new(cfg, schema, z_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let params = arch.init_params(&mut rng)?;
        Ok(Stage2Model {
            config: cfg.clone(),
            arch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(diffkernel::checkpoint::save(path, &self.params, None)?)
    }

    /// Demographics with every configured bit negated.
    pub fn flip_all(&self, d: &[f64]) -> Vec<f64> {
        let mut out = d.to_vec();
        for &k in &self.arch.flip {
            out[k] = 1.0 - out[k];
        }
        out
    }

    fn random_flip(&self, d: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let k = self.arch.flip.len();
        if k == 0 {
            return d.to_vec();
        }
        let mask = loop {
            let m: Vec<bool> = (0..k).map(|_| rng.random_bool(0.5)).collect();
            if m.iter().any(|&b| b) {
                break m;
            }
        };
        let mut out = d.to_vec();
        for (&idx, flip) in self.arch.flip.iter().zip(mask) {
            if flip {
                out[idx] = 1.0 - out[idx];
            }
        }
        out
    }

    /// Token matrix `[3, d_model]` for one item.
    pub fn build_tokens(&self, d: &[f64], z: &[f64], x: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = Vars::bind(&mut g, &self.arch, &self.params)?;
        let t = v.tokens(
            &mut g,
            [
                stack(&[d], self.arch.demo_dim, "d")?,
                stack(&[z], self.arch.z_dim, "z")?,
                stack(&[x], self.arch.num_features, "x")?,
            ],
        )?;
        Ok(g.value(t).clone())
    }

    /// Probabilities for `items` under the given demographics, clamped to
    /// `[PROB_EPS, 1 − PROB_EPS]`.
    pub fn predict_with(&self, demos: &[&[f64]], items: &[&Stage2Item]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(items.len());
        for (ds, is) in demos.chunks(512).zip(items.chunks(512)) {
            let mut g = Graph::new();
            let v = Vars::bind(&mut g, &self.arch, &self.params)?;
            let tokens = v.tokens(&mut g, inputs(&self.arch, ds, is)?)?;
            let p = v.head(&mut g, &self.arch, tokens)?;
            out.extend(
                g.value(p)
                    .data()
                    .iter()
                    .map(|p| p.clamp(PROB_EPS, 1.0 - PROB_EPS)),
            );
        }
        Ok(out)
    }

    pub fn predict(&self, d: &[f64], z: &[f64], x: &[f64]) -> Result<f64> {
        let item = Stage2Item {
            d: d.to_vec(),
            z: z.to_vec(),
            x: x.to_vec(),
            y: 0.0,
        };
        Ok(self.predict_with(&[d], &[&item])?[0])
    }

    pub fn predict_items(&self, items: &[Stage2Item]) -> Result<Vec<f64>> {
        let refs: Vec<&Stage2Item> = items.iter().collect();
        let demos: Vec<&[f64]> = items.iter().map(|i| i.d.as_slice()).collect();
        self.predict_with(&demos, &refs)
    }

    /// `mean BCE(p(d), y) + λ · mean BCE(p(d_CF), y) + λ₂‖Θ₂‖²` with every
    /// configured bit flipped.
    pub fn loss(&self, items: &[Stage2Item]) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss_graph(&mut g, &self.params, items)?;
        Ok(g.value(loss).item()?)
    }

    /// Builds the flip-all objective into `g` with parameters from `store`.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        items: &[Stage2Item],
    ) -> Result<Var> {
        if items.is_empty() {
            return Err(FlmdError::Data("stage 2 loss of an empty batch".into()));
        }
        let refs: Vec<&Stage2Item> = items.iter().collect();
        let cf: Vec<Vec<f64>> = items.iter().map(|i| self.flip_all(&i.d)).collect();
        let c = &self.config;
        Ok(batch_loss(g, &self.arch, store, &refs, &cf, c.lambda, c.weight_decay)?.loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub loss: f64,
    pub factual: f64,
    pub counterfactual: f64,
    pub l2: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2History {
    pub epochs: Vec<Stage2Epoch>,
    /// Epoch whose parameters were kept.
    pub selected_epoch: Option<usize>,
}

/// Adam on the stage-2 objective over every training encounter, keeping the
/// parameters of the epoch with the best validation AUC (the last epoch if
/// validation AUC is undefined).
pub fn train_stage2(
    train: &Dataset,
    val: &Dataset,
    trace: &LatentTrace,
    cfg: &Stage2Config,
) -> Result<(Stage2Model, Stage2History)> {
    let z_dim = trace
        .z_dim()
        .ok_or_else(|| FlmdError::Alignment("empty latent trace".into()))?;
    let mut model = Stage2Model::new(cfg, &train.schema, z_dim)?;
    let items = collect_items(train, trace).map_err(|e| e.context("stage 2 training set"))?;
    let val_items = collect_items(val, trace).map_err(|e| e.context("stage 2 validation set"))?;
    if items.is_empty() {
        return Err(FlmdError::Data(
            "stage 2 needs at least one training encounter".into(),
        ));
    }
    let val_labels: Vec<f64> = val_items.iter().map(|i| i.y).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut opt = OptState::new(AdamConfig::new(cfg.lr));
    let mut history = Stage2History::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut seen = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Stage2Item> = chunk.iter().map(|&i| &items[i]).collect();
            let cf: Vec<Vec<f64>> = batch
                .iter()
                .map(|i| match cfg.flip_mode {
                    FlipMode::All => model.flip_all(&i.d),
                    FlipMode::RandomSubset => model.random_flip(&i.d, &mut rng),
                })
                .collect();
            let mut step = || -> Result<[f64; 4]> {
                let mut g = Graph::new();
                let t = batch_loss(
                    &mut g,
                    &model.arch,
                    &model.params,
                    &batch,
                    &cf,
                    cfg.lambda,
                    cfg.weight_decay,
                )?;
                g.backward(t.loss, &mut model.params)?;
                adam_step(&mut model.params, &mut opt)?;
                let n = batch.len();
                let probs = g.value(t.probs).data();
                let mean_bce = |rows: std::ops::Range<usize>| {
                    rows.map(|r| diffkernel::functional::bce(probs[r], batch[r % n].y))
                        .sum::<f64>()
                        / n as f64
                };
                Ok([
                    g.value(t.loss).data()[0],
                    mean_bce(0..n),
                    mean_bce(n..2 * n),
                    g.value(t.l2).data()[0],
                ])
            };
            let values =
                step().map_err(|e| e.context(format!("stage 2 epoch {epoch} batch {b}")))?;
            let w = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += w * v;
            }
            seen += w;
        }
        let val_auc = if val_items.is_empty() {
            None
        } else {
            let scores = model.predict_items(&val_items)?;
            auc(&scores, &val_labels).ok()
        };
        if let Some(a) = val_auc {
            if best.as_ref().is_none_or(|(b, _)| a > *b) {
                best = Some((a, model.params.clone()));
                history.selected_epoch = Some(epoch);
            }
        }
        history.epochs.push(Stage2Epoch {
            epoch,
            loss: sums[0] / seen,
            factual: sums[1] / seen,
            counterfactual: sums[2] / seen,
            l2: sums[3] / seen,
            val_auc,
        });
    }
    match best {
        Some((_, params)) => model.params = params,
        None => history.selected_epoch = cfg.epochs.checked_sub(1),
    }
    Ok((model, history))
}

/// Mean `|p(d) − p(d_CF)|` over every encounter of `ds`, flipping every
/// configured bit.
pub fn cf_gap(ds: &Dataset, trace: &LatentTrace, model: &Stage2Model) -> Result<f64> {
    let items = collect_items(ds, trace)?;
    if items.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<&Stage2Item> = items.iter().collect();
    let cf: Vec<Vec<f64>> = items.iter().map(|i| model.flip_all(&i.d)).collect();
    let factual = model.predict_items(&items)?;
    let counter = model.predict_with(&cf.iter().map(Vec::as_slice).collect::<Vec<_>>(), &refs)?;
    Ok(factual
        .iter()
        .zip(&counter)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / items.len() as f64)
}

/// Encounter-level predictions for every patient of `ds`.
pub fn predict_dataset(
    ds: &Dataset,
    trace: &LatentTrace,
    model: &Stage2Model,
) -> Result<Vec<Prediction>> {
    let items = collect_items(ds, trace)?;
    let probs = model.predict_items(&items)?;
    let mut probs = probs.into_iter();
    let mut out = Vec::with_capacity(items.len());
    for p in &ds.patients {
        for (t, e) in p.encounters.iter().enumerate() {
            out.push(Prediction {
                patient_id: p.id.clone(),
                t: t + 1,
                prob: probs.next().expect("one probability per encounter"),
                y: e.y,
                group_bits: p.demographics.sensitive_bits.clone(),
            });
        }
    }
    Ok(out)
}

/// Writes `patient_id,t,prob,y,group_bits` rows; bits are concatenated digits.
pub fn write_predictions_csv(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| FlmdError::io(path, e))?);
    let mut body = String::from("patient_id,t,prob,y,group_bits\n");
    for p in predictions {
        let bits: String = p.group_bits.iter().map(|b| char::from(b'0' + b)).collect();
        body.push_str(&format!(
            "{},{},{},{},{}\n",
            p.patient_id, p.t, p.prob, p.y, bits
        ));
    }
    f.write_all(body.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| FlmdError::io(path, e))
}
