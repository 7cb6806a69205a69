//! Experiment protocols: the two-stage pipeline, disturbance and imbalance
//! sweeps, the latent-capacity sweep, and report aggregation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ehr::{
    apply_normalizer, fit_normalizer, load_dataset, save_dataset, split_dataset, Dataset, Schema,
    SplitRatios,
};
use crate::error::{FlmdError, Result};
use crate::metrics::FairnessReport;
use crate::scm::{
    apply_semisynthetic, disturb_demographics, generate_scm_dataset, hide_confounder, mix_training,
    rebalance_by_attribute, GroundTruth, ScmConfig, SynthesisParams, F_DEPE,
};
use crate::stage1::{
    extract_latents, probe_confounder, train_stage1, LatentTrace, Stage1Config, Stage1Data,
    Stage1History, Stage1Model,
};
use crate::stage2::{
    cf_gap, predict_dataset, train_stage2, write_predictions_csv, Stage2Config, Stage2History,
    Stage2Model,
};

/// Dataset files used instead of generating from the SCM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub dataset: PathBuf,
    pub schema: PathBuf,
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Fractions of undisturbed training patients.
    pub proportions: Vec<f64>,
    /// `(a, b)` group ratios for attribute value 1 versus 0.
    pub ratios: Vec<(u32, u32)>,
    pub z_dims: Vec<usize>,
    /// Sensitive attributes resampled in the disturbed copy; `None` means all.
    pub disturb_fields: Option<Vec<String>>,
    /// Attribute used for rebalancing; `None` means the evaluation attribute.
    pub imbalance_attribute: Option<String>,
    /// Size of the rebalanced training set; `None` keeps the split size.
    pub imbalance_target: Option<usize>,
    pub hidden_field: String,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            proportions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            ratios: vec![(1, 4), (1, 2), (1, 1)],
            z_dims: vec![4, 8, 16, 32],
            disturb_fields: None,
            imbalance_attribute: None,
            imbalance_target: None,
            hidden_field: F_DEPE.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Training replicates per configuration or sweep point.
    pub replicates: usize,
    pub out_dir: PathBuf,
    pub data: Option<DataFiles>,
    pub scm: ScmConfig,
    /// Semi-synthetic maps; `None` uses the defaults for the feature count.
    pub synth: Option<SynthesisParams>,
    pub split: SplitRatios,
    pub normalize: bool,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    /// Sensitive attribute defining the two evaluation groups; `None` means
    /// the first one in the schema.
    pub eval_attribute: Option<String>,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            replicates: 3,
            out_dir: PathBuf::from("out"),
            data: None,
            scm: ScmConfig::default(),
            synth: None,
            split: SplitRatios::default(),
            normalize: true,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            eval_attribute: None,
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads TOML, or JSON for a `.json` extension. Relative paths inside the
    /// file are resolved against its directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| FlmdError::io(path, e))?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg: ExperimentConfig = if is_json {
            serde_json::from_str(&text)
                .map_err(|e| FlmdError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| FlmdError::Config(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        if let Some(d) = &mut self.data {
            fix(&mut d.dataset);
            fix(&mut d.schema);
            if let Some(g) = &mut d.ground_truth {
                fix(g);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlmdError::Config(m));
        self.split.validate()?;
        if self.data.is_none() {
            self.scm.validate()?;
        }
        self.stage2.validate()?;
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        let s = &self.sweep;
        if s.proportions.is_empty() || s.ratios.is_empty() || s.z_dims.is_empty() {
            return bad("sweep lists must be nonempty".into());
        }
        if s.proportions.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad(format!(
                "proportions must lie in [0, 1], got {:?}",
                s.proportions
            ));
        }
        if s.ratios.iter().any(|&(a, b)| a + b == 0) || s.z_dims.contains(&0) {
            return bad("ratios need a positive part and z_dims must be at least 1".into());
        }
        Ok(())
    }

    /// Seed of replicate `k`, independent of any sweep value.
    pub fn replicate_seed(&self, k: usize) -> u64 {
        mix_seed(self.seed, k as u64)
    }

    fn stage_configs(&self, k: usize) -> (Stage1Config, Stage2Config) {
        let seed = self.replicate_seed(k);
        let s1 = Stage1Config {
            seed: mix_seed(seed, 1),
            ..self.stage1.clone()
        };
        let s2 = Stage2Config {
            seed: mix_seed(seed, 2),
            ..self.stage2.clone()
        };
        (s1, s2)
    }

    fn eval_attribute(&self, schema: &Schema) -> Result<String> {
        let name = match &self.eval_attribute {
            Some(a) => a.clone(),
            None => schema
                .sensitive_names
                .first()
                .cloned()
                .ok_or_else(|| FlmdError::Config("schema has no sensitive attribute".into()))?,
        };
        schema
            .sensitive_index(&name)
            .map_err(|_| FlmdError::Config(format!("unknown evaluation attribute '{name}'")))?;
        Ok(name)
    }
}

/// SplitMix64 finalizer of `seed` combined with `k`.
pub fn mix_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a digest of a dataset's JSONL serialization, as hex.
pub fn dataset_hash(ds: &Dataset) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in &ds.patients {
        let line = serde_json::to_vec(p).expect("records serialize");
        for b in line.into_iter().chain(*b"\n") {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Raw data of an experiment.
#[derive(Debug, Clone)]
pub struct Source {
    pub dataset: Dataset,
    pub ground_truth: Option<GroundTruth>,
}

pub fn load_source(cfg: &ExperimentConfig) -> Result<Source> {
    match &cfg.data {
        Some(files) => {
            let schema = Schema::load(&files.schema)?;
            let dataset = load_dataset(&files.dataset, &schema)?;
            let ground_truth = files
                .ground_truth
                .as_deref()
                .map(GroundTruth::load)
                .transpose()?;
            if let Some(gt) = &ground_truth {
                gt.check_aligned(&dataset)?;
            }
            Ok(Source {
                dataset,
                ground_truth,
            })
        }
        None => {
            let (dataset, gt) = generate_scm_dataset(&cfg.scm)?;
            Ok(Source {
                dataset,
                ground_truth: Some(gt),
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn new(ds: &Dataset, ratios: SplitRatios, seed: u64) -> Result<Splits> {
        let (train, val, test) = split_dataset(ds, ratios, seed)?;
        Ok(Splits { train, val, test })
    }
}

/// Normalized splits plus the data the first stage is fitted on.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub stage1_data: Dataset,
    /// Every patient that needs latents.
    pub all: Dataset,
}

/// Fits normalization on the training split and applies it everywhere.
pub fn prepare(splits: &Splits, normalize: bool, stage1_data: Stage1Data) -> Result<Prepared> {
    let (train, val, test) = if normalize {
        let stats = fit_normalizer(&splits.train)?;
        (
            apply_normalizer(&splits.train, &stats)?,
            apply_normalizer(&splits.val, &stats)?,
            apply_normalizer(&splits.test, &stats)?,
        )
    } else {
        (
            splits.train.clone(),
            splits.val.clone(),
            splits.test.clone(),
        )
    };
    let mut all = train.clone();
    all.patients.extend(val.patients.iter().cloned());
    all.patients.extend(test.patients.iter().cloned());
    let stage1_data = match stage1_data {
        Stage1Data::Whole => all.clone(),
        Stage1Data::Train => train.clone(),
    };
    Ok(Prepared {
        train,
        val,
        test,
        stage1_data,
        all,
    })
}

pub struct LatentFit {
    pub model: Stage1Model,
    pub history: Stage1History,
    pub trace: LatentTrace,
}

pub fn fit_latents(prepared: &Prepared, cfg: &Stage1Config) -> Result<LatentFit> {
    let (model, history) =
        train_stage1(&prepared.stage1_data, cfg).map_err(|e| e.context("stage 1"))?;
    let trace =
        extract_latents(&prepared.all, &model).map_err(|e| e.context("latent extraction"))?;
    Ok(LatentFit {
        model,
        history,
        trace,
    })
}

pub struct PredictorFit {
    pub model: Stage2Model,
    pub history: Stage2History,
    pub report: FairnessReport,
    pub predictions: Vec<crate::metrics::Prediction>,
}

/// Trains the second stage and evaluates it on the test split.
pub fn fit_predictor(
    prepared: &Prepared,
    trace: &LatentTrace,
    cfg: &Stage2Config,
    attribute: &str,
) -> Result<PredictorFit> {
    let (model, history) = train_stage2(&prepared.train, &prepared.val, trace, cfg)
        .map_err(|e| e.context("stage 2"))?;
    let eval = || -> Result<PredictorFit> {
        let predictions = predict_dataset(&prepared.test, trace, &model)?;
        let gap = cf_gap(&prepared.test, trace, &model)?;
        let report = FairnessReport::evaluate(&predictions, &prepared.test.schema, attribute, gap)?;
        Ok(PredictorFit {
            model: model.clone(),
            history: history.clone(),
            report,
            predictions,
        })
    };
    eval().map_err(|e| e.context("evaluation"))
}

/// One result line of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub sweep: String,
    pub replicate: usize,
    pub seed: u64,
    pub auc: f64,
    pub auc_g1: f64,
    pub auc_g2: f64,
    pub hd: f64,
    pub cf_gap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_auc: Option<f64>,
    pub test_hash: String,
    pub wall_seconds: f64,
}

/// Everything produced by one two-stage run.
pub struct RunOutput {
    pub row: ReportRow,
    pub latents: LatentFit,
    pub predictor: PredictorFit,
}

struct RunSpec<'a> {
    experiment: &'a str,
    sweep: String,
    replicate: usize,
    splits: Splits,
    stage1: Stage1Config,
    stage2: Stage2Config,
    probe: Option<&'a GroundTruth>,
    out: Option<PathBuf>,
}

fn run_two_stage(cfg: &ExperimentConfig, spec: RunSpec<'_>) -> Result<RunOutput> {
    let start = Instant::now();
    let attribute = cfg.eval_attribute(&spec.splits.train.schema)?;
    let test_hash = dataset_hash(&spec.splits.test);
    let prepared = prepare(&spec.splits, cfg.normalize, spec.stage1.data)?;
    let latents = fit_latents(&prepared, &spec.stage1)?;
    let probe_auc = spec
        .probe
        .map(|gt| probe_confounder(&latents.trace, gt, spec.stage1.seed))
        .transpose()
        .map_err(|e| e.context("confounder probe"))?;
    let predictor = fit_predictor(&prepared, &latents.trace, &spec.stage2, &attribute)?;
    let r = &predictor.report;
    let row = ReportRow {
        experiment: spec.experiment.to_string(),
        sweep: spec.sweep.clone(),
        replicate: spec.replicate,
        seed: cfg.replicate_seed(spec.replicate),
        auc: r.auc_overall,
        auc_g1: r.auc_g1,
        auc_g2: r.auc_g2,
        hd: r.hd_binary,
        cf_gap: r.cf_gap,
        probe_auc,
        test_hash,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &spec.out {
        write_run(dir, &latents, &predictor).map_err(|e| e.context("writing run outputs"))?;
    }
    Ok(RunOutput {
        row,
        latents,
        predictor,
    })
}

#[derive(Serialize)]
struct Histories<'a> {
    stage1: &'a Stage1History,
    stage2: &'a Stage2History,
}

fn write_run(dir: &Path, latents: &LatentFit, predictor: &PredictorFit) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| FlmdError::io(dir, e))?;
    latents.model.save(&dir.join("stage1.ckpt.json"))?;
    predictor.model.save(&dir.join("stage2.ckpt.json"))?;
    write_json(&dir.join("report.json"), &predictor.report)?;
    write_json(
        &dir.join("history.json"),
        &Histories {
            stage1: &latents.history,
            stage2: &predictor.history,
        },
    )?;
    write_predictions_csv(&dir.join("predictions.csv"), &predictor.predictions)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("values serialize");
    std::fs::write(path, text + "\n").map_err(|e| FlmdError::io(path, e))
}

/// Runs `f(0..n)` on up to `jobs` threads, returning results in index order.
pub fn parallel_map<T: Send>(
    n: usize,
    jobs: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("no worker panicked holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every index ran"))
        .collect()
}

/// Writes the dataset, ground truth and schema of the configured source.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Source> {
    let source = load_source(cfg)?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| FlmdError::io(out, e))?;
    save_dataset(&source.dataset, &out.join("dataset.jsonl"))?;
    source.dataset.schema.save(&out.join("schema.json"))?;
    if let Some(gt) = &source.ground_truth {
        gt.save(&out.join("ground_truth.jsonl"))?;
    }
    Ok(source)
}

fn finish(cfg: &ExperimentConfig, experiment: &str, rows: &[ReportRow]) -> Result<()> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| FlmdError::io(out, e))?;
    crate::ehr::write_jsonl(&out.join(format!("rows-{experiment}.jsonl")), rows)?;
    cmd_report(out)?;
    Ok(())
}

fn split_source(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Splits> {
    Splits::new(ds, cfg.split, cfg.seed).map_err(|e| e.context("splitting"))
}

/// Replicated two-stage runs on the source data.
pub fn cmd_pipeline(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<ReportRow>> {
    let source = load_source(cfg)?;
    let splits = split_source(cfg, &source.dataset)?;
    let rows = parallel_map(cfg.replicates, jobs, |k| {
        let (stage1, stage2) = cfg.stage_configs(k);
        let spec = RunSpec {
            experiment: "pipeline",
            sweep: "-".into(),
            replicate: k,
            splits: splits.clone(),
            stage1,
            stage2,
            probe: None,
            out: Some(cfg.out_dir.join("pipeline").join(format!("r{k}"))),
        };
        Ok(run_two_stage(cfg, spec)?.row)
    })?;
    finish(cfg, "pipeline", &rows)?;
    Ok(rows)
}

fn grid_runs<V: Sync>(
    cfg: &ExperimentConfig,
    jobs: usize,
    experiment: &str,
    grid: &[V],
    label: impl Fn(&V) -> String + Sync,
    build: impl Fn(&V, usize) -> Result<(Splits, Stage1Config, Stage2Config)> + Sync,
    probe: Option<&GroundTruth>,
) -> Result<Vec<ReportRow>> {
    let n = grid.len() * cfg.replicates;
    let rows = parallel_map(n, jobs, |i| {
        let (v, k) = (&grid[i / cfg.replicates], i % cfg.replicates);
        let (splits, stage1, stage2) = build(v, k)?;
        let sweep = label(v);
        let spec = RunSpec {
            experiment,
            sweep: sweep.clone(),
            replicate: k,
            splits,
            stage1,
            stage2,
            probe,
            out: Some(
                cfg.out_dir
                    .join(experiment)
                    .join(sweep.replace(':', "-"))
                    .join(format!("r{k}")),
            ),
        };
        run_two_stage(cfg, spec)
            .map(|o| o.row)
            .map_err(|e| e.context(format!("{experiment} {}", label(v))))
    })?;
    finish(cfg, experiment, &rows)?;
    Ok(rows)
}

/// Trains on mixtures of original and demographically disturbed training
/// patients and evaluates on the untouched test split.
pub fn cmd_q2_disturb(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<ReportRow>> {
    let source = load_source(cfg)?;
    let splits = split_source(cfg, &source.dataset)?;
    let fields = cfg
        .sweep
        .disturb_fields
        .clone()
        .unwrap_or_else(|| splits.train.schema.sensitive_names.clone());
    let disturbed = disturb_demographics(&splits.train, &fields, mix_seed(cfg.seed, 101))?;
    grid_runs(
        cfg,
        jobs,
        "q2-disturb",
        &cfg.sweep.proportions,
        |p| format!("{p}"),
        |&p, k| {
            let train = mix_training(&splits.train, &disturbed, p, mix_seed(cfg.seed, 102))?;
            let (s1, s2) = cfg.stage_configs(k);
            Ok((
                Splits {
                    train,
                    val: splits.val.clone(),
                    test: splits.test.clone(),
                },
                s1,
                s2,
            ))
        },
        None,
    )
}

/// Rebalances the training split to each group ratio of the sensitive
/// attribute and evaluates on the untouched test split.
pub fn cmd_q2_imbalance(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<ReportRow>> {
    let source = load_source(cfg)?;
    let splits = split_source(cfg, &source.dataset)?;
    let attribute = match &cfg.sweep.imbalance_attribute {
        Some(a) => a.clone(),
        None => cfg.eval_attribute(&splits.train.schema)?,
    };
    let target = cfg.sweep.imbalance_target.unwrap_or(splits.train.len());
    grid_runs(
        cfg,
        jobs,
        "q2-imbalance",
        &cfg.sweep.ratios,
        |(a, b)| format!("{a}:{b}"),
        |&ratio, k| {
            let train = rebalance_by_attribute(
                &splits.train,
                &attribute,
                ratio,
                target,
                mix_seed(cfg.seed, 103),
            )?;
            let (s1, s2) = cfg.stage_configs(k);
            Ok((
                Splits {
                    train,
                    val: splits.val.clone(),
                    test: splits.test.clone(),
                },
                s1,
                s2,
            ))
        },
        None,
    )
}

/// Semi-synthetic data with the confounder hidden, swept over latent width.
pub fn q3_source(cfg: &ExperimentConfig, source: &Source) -> Result<(Dataset, GroundTruth)> {
    let gt = source
        .ground_truth
        .clone()
        .ok_or_else(|| FlmdError::Config("q3 needs ground truth".into()))?;
    let synth = cfg
        .synth
        .clone()
        .unwrap_or_else(|| SynthesisParams::default_for(source.dataset.schema.num_features));
    let amplified = apply_semisynthetic(&source.dataset, &gt, &synth)?;
    let hidden = if amplified
        .schema
        .extra_names
        .iter()
        .any(|n| n == &cfg.sweep.hidden_field)
    {
        hide_confounder(&amplified, &cfg.sweep.hidden_field)?
    } else {
        amplified
    };
    Ok((hidden, gt))
}

pub fn cmd_q3_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<ReportRow>> {
    let source = load_source(cfg)?;
    let (ds, gt) = q3_source(cfg, &source)?;
    let splits = split_source(cfg, &ds)?;
    grid_runs(
        cfg,
        jobs,
        "q3-sweep",
        &cfg.sweep.z_dims,
        |z| z.to_string(),
        |&z, k| {
            let (s1, s2) = cfg.stage_configs(k);
            Ok((splits.clone(), Stage1Config { z_dim: z, ..s1 }, s2))
        },
        Some(&gt),
    )
}

const METRICS: [&str; 6] = ["auc", "auc_g1", "auc_g2", "hd", "cf_gap", "probe_auc"];

fn metric(row: &ReportRow, name: &str) -> Option<f64> {
    match name {
        "auc" => Some(row.auc),
        "auc_g1" => Some(row.auc_g1),
        "auc_g2" => Some(row.auc_g2),
        "hd" => Some(row.hd),
        "cf_gap" => Some(row.cf_gap),
        "probe_auc" => row.probe_auc,
        _ => None,
    }
}

/// Mean and sample standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryLine {
    pub experiment: String,
    pub sweep: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Groups rows by experiment and sweep value (first-appearance order).
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryLine> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.experiment.clone(), r.sweep.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut lines = Vec::new();
    for (experiment, sweep) in keys {
        let group: Vec<&ReportRow> = rows
            .iter()
            .filter(|r| r.experiment == experiment && r.sweep == sweep)
            .collect();
        for name in METRICS {
            let values: Vec<f64> = group.iter().filter_map(|r| metric(r, name)).collect();
            if values.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&values);
            lines.push(SummaryLine {
                experiment: experiment.clone(),
                sweep: sweep.clone(),
                metric: name.into(),
                mean,
                std,
                n: values.len(),
            });
        }
    }
    lines
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub x: Vec<String>,
    pub series: BTreeMap<String, Series>,
}

pub fn plot_data(lines: &[SummaryLine]) -> BTreeMap<String, PlotData> {
    let mut out: BTreeMap<String, PlotData> = BTreeMap::new();
    for l in lines {
        let plot = out.entry(l.experiment.clone()).or_default();
        if !plot.x.contains(&l.sweep) {
            plot.x.push(l.sweep.clone());
        }
        let s = plot.series.entry(l.metric.clone()).or_default();
        s.mean.push(l.mean);
        s.std.push(l.std);
    }
    out
}

pub const SUMMARY_HEADER: &str = "experiment,sweep,metric,mean,std,n";

/// Reads every `rows-*.jsonl` file in `dir` (sorted by name).
pub fn read_rows(dir: &Path) -> Result<Vec<ReportRow>> {
    let entries = std::fs::read_dir(dir).map_err(|e| FlmdError::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("rows-") && n.ends_with(".jsonl"))
        })
        .collect();
    files.sort();
    let mut rows = Vec::new();
    for f in files {
        rows.extend(crate::ehr::read_jsonl::<ReportRow>(&f)?);
    }
    Ok(rows)
}

/// Aggregates the rows in `dir` into `summary.csv` and `plotdata.json`.
pub fn cmd_report(dir: &Path) -> Result<Vec<SummaryLine>> {
    let rows = read_rows(dir)?;
    if rows.is_empty() {
        return Err(FlmdError::Data(format!(
            "no report rows in {}",
            dir.display()
        )));
    }
    let lines = summarize(&rows);
    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    for l in &lines {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.experiment, l.sweep, l.metric, l.mean, l.std, l.n
        ));
    }
    let path = dir.join("summary.csv");
    std::fs::write(&path, csv).map_err(|e| FlmdError::io(&path, e))?;
    write_json(&dir.join("plotdata.json"), &plot_data(&lines))?;
    Ok(lines)
}
