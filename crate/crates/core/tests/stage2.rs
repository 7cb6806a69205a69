use diffkernel::gradcheck::check_gradients;
use diffkernel::Tensor;
use flmd::ehr::{Dataset, Demographics, Encounter, PatientRecord, Schema};
use flmd::metrics::auc;
use flmd::stage1::{LatentTrace, PatientLatents};
use flmd::stage2::{
    cf_gap, collect_items, counterfactual_demographics, predict_dataset, train_stage2,
    Stage2Config, Stage2Item, Stage2Model,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schema() -> Schema {
    Schema {
        num_features: 3,
        sensitive_names: vec!["race".into(), "gender".into(), "insurance".into()],
        label_name: "y".into(),
        extra_names: vec![],
    }
}

fn small_cfg(seed: u64) -> Stage2Config {
    Stage2Config {
        d_model: 4,
        n_heads: 2,
        n_layers: 2,
        ffn_hidden: 5,
        seed,
        ..Stage2Config::default()
    }
}

fn items(rng: &mut impl Rng, n: usize) -> Vec<Stage2Item> {
    (0..n)
        .map(|_| Stage2Item {
            d: (0..3)
                .map(|_| f64::from(rng.random_range(0..2u8)))
                .collect(),
            z: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            x: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            y: f64::from(rng.random_range(0..2u8)),
        })
        .collect()
}

fn perturbed(model: &Stage2Model, rng: &mut impl Rng) -> Stage2Model {
    let mut m = model.clone();
    let names: Vec<String> = m.params.names().map(str::to_string).collect();
    for name in names {
        let t = m.params.get(&name).unwrap();
        let data = t
            .data()
            .iter()
            .map(|v| v + rng.random_range(-0.5..0.5))
            .collect();
        m.params
            .set(&name, Tensor::new(t.shape().to_vec(), data).unwrap())
            .unwrap();
    }
    m
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn sq_norm(m: &Stage2Model) -> f64 {
    m.params
        .iter()
        .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum()
}

#[test]
fn loss_gradients_match_finite_differences() {
    for point in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + point);
        let cfg = Stage2Config {
            lambda: 0.7,
            weight_decay: 1e-3,
            ..small_cfg(point)
        };
        let model = perturbed(&Stage2Model::new(&cfg, &schema(), 3).unwrap(), &mut rng);
        let batch = items(&mut rng, 4);
        let report = check_gradients(
            &model.params,
            |g, s| Ok(model.loss_graph(g, s, &batch).expect("loss builds")),
            1e-5,
            16,
        )
        .unwrap();
        assert!(
            report.max_rel_err <= 1e-4,
            "point {point}: {} at {}",
            report.max_rel_err,
            report.worst
        );
    }
}

#[test]
fn loss_is_the_three_term_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = Stage2Config {
        lambda: 0.6,
        weight_decay: 2e-3,
        ..small_cfg(1)
    };
    let model = perturbed(&Stage2Model::new(&cfg, &schema(), 3).unwrap(), &mut rng);
    let batch = items(&mut rng, 4);
    let mut factual = 0.0;
    let mut counter = 0.0;
    for it in &batch {
        factual += bce(model.predict(&it.d, &it.z, &it.x).unwrap(), it.y) / 4.0;
        let flipped: Vec<f64> = it.d.iter().map(|b| 1.0 - b).collect();
        counter += bce(model.predict(&flipped, &it.z, &it.x).unwrap(), it.y) / 4.0;
    }
    let want = factual + 0.6 * counter + 2e-3 * sq_norm(&model);
    let got = model.loss(&batch).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");

    let mut plain = model.clone();
    plain.config.lambda = 0.0;
    let reduced = plain.loss(&batch).unwrap();
    assert!((reduced - (factual + 2e-3 * sq_norm(&model))).abs() < 1e-12);
}

#[test]
fn zero_parameters_give_log_two_per_term() {
    for lambda in [0.0, 1.0, 2.5] {
        let cfg = Stage2Config {
            lambda,
            ..small_cfg(0)
        };
        let mut model = Stage2Model::new(&cfg, &schema(), 3).unwrap();
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        for name in names {
            let shape = model.params.get(&name).unwrap().shape().to_vec();
            model.params.set(&name, Tensor::zeros(&shape)).unwrap();
        }
        let batch = items(&mut ChaCha8Rng::seed_from_u64(3), 6);
        let loss = model.loss(&batch).unwrap();
        assert!(
            (loss - (1.0 + lambda) * std::f64::consts::LN_2).abs() < 1e-12,
            "{loss}"
        );
    }
}

#[test]
fn counterfactual_flip_is_an_involution() {
    let s = schema();
    let d = Demographics {
        sensitive_bits: vec![0, 1, 1],
        extra: vec![],
    };
    let race = vec!["race".to_string()];
    let once = counterfactual_demographics(&d, &s, &race).unwrap();
    assert_eq!(once.sensitive_bits, vec![1, 1, 1]);
    assert_eq!(counterfactual_demographics(&once, &s, &race).unwrap(), d);
    assert_eq!(counterfactual_demographics(&d, &s, &[]).unwrap(), d);
    assert!(counterfactual_demographics(&d, &s, &["age".into()]).is_err());
}

fn zero(model: &mut Stage2Model, name: &str) {
    let shape = model.params.get(name).unwrap().shape().to_vec();
    model.params.set(name, Tensor::zeros(&shape)).unwrap();
}

#[test]
fn tokens_are_exchangeable_without_slots() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = perturbed(
        &Stage2Model::new(&small_cfg(5), &schema(), 3).unwrap(),
        &mut rng,
    );
    let shared = model.params.get("proj.z").unwrap().clone();
    model.params.set("proj.d", shared.clone()).unwrap();
    model.params.set("proj.x", shared).unwrap();
    for slot in ["slot.d", "slot.z", "slot.x"] {
        zero(&mut model, slot);
    }
    for it in items(&mut rng, 10) {
        let base = model.predict(&it.d, &it.z, &it.x).unwrap();
        for (a, b, c) in [
            (&it.z, &it.d, &it.x),
            (&it.x, &it.z, &it.d),
            (&it.z, &it.x, &it.d),
        ] {
            assert!((model.predict(a, b, c).unwrap() - base).abs() < 1e-12);
        }
    }
}

fn toy(n: usize, seed: u64, label: impl Fn(&[f64], &[f64]) -> u8) -> (Dataset, LatentTrace) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patients = Vec::new();
    let mut trace = LatentTrace::default();
    for i in 0..n {
        let bits: Vec<u8> = (0..3).map(|_| rng.random_range(0..2)).collect();
        let t = rng.random_range(1..4);
        let mut encounters = Vec::new();
        let mut zs = Vec::new();
        for _ in 0..t {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d: Vec<f64> = bits.iter().map(|&b| f64::from(b)).collect();
            encounters.push(Encounter {
                y: label(&x, &d),
                x,
            });
            zs.push(z);
        }
        let id = format!("t{seed}-{i}");
        trace.patients.insert(
            id.clone(),
            PatientLatents {
                h: zs.clone(),
                z: zs,
            },
        );
        patients.push(PatientRecord {
            id,
            demographics: Demographics {
                sensitive_bits: bits,
                extra: vec![],
            },
            encounters,
        });
    }
    (Dataset::new(schema(), patients).unwrap(), trace)
}

#[test]
fn cf_gap_vanishes_without_a_demographic_path() {
    let (ds, trace) = toy(30, 1, |x, _| u8::from(x[0] > 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = perturbed(
        &Stage2Model::new(&small_cfg(9), &schema(), 2).unwrap(),
        &mut rng,
    );
    assert!(cf_gap(&ds, &trace, &model).unwrap() > 0.0);
    zero(&mut model, "proj.d");
    let gap = cf_gap(&ds, &trace, &model).unwrap();
    assert_eq!(gap, 0.0);
}

#[test]
fn learns_a_separable_rule() {
    let (train, trace) = toy(300, 2, |x, _| u8::from(x[0] > 0.0));
    let (val, val_trace) = toy(60, 3, |x, _| u8::from(x[0] > 0.0));
    let trace = trace.merged(&val_trace);
    let cfg = Stage2Config {
        lambda: 0.0,
        lr: 1e-2,
        d_model: 8,
        epochs: 15,
        batch_size: 32,
        ..small_cfg(2)
    };
    let (model, history) = train_stage2(&train, &val, &trace, &cfg).unwrap();
    assert_eq!(history.epochs.len(), 15);
    assert!(history.selected_epoch.is_some());
    let items = collect_items(&train, &trace).unwrap();
    let probs = model.predict_items(&items).unwrap();
    let labels: Vec<f64> = items.iter().map(|i| i.y).collect();
    let a = auc(&probs, &labels).unwrap();
    assert!(a > 0.95, "train AUC {a}");
    assert!(probs.iter().all(|p| (1e-7..=1.0 - 1e-7).contains(p)));
    let (again, h2) = train_stage2(&train, &val, &trace, &cfg).unwrap();
    assert_eq!(history, h2);
    assert_eq!(model.params, again.params);
}

#[test]
fn counterfactual_term_shrinks_the_gap() {
    // labels depend on race so an unregularized model leans on it
    let rule = |x: &[f64], d: &[f64]| u8::from(x[0] + 1.5 * d[0] - 0.75 > 0.0);
    let (train, trace) = toy(300, 4, rule);
    let (val, val_trace) = toy(60, 5, rule);
    let trace = trace.merged(&val_trace);
    let base = Stage2Config {
        lr: 1e-2,
        d_model: 8,
        epochs: 10,
        batch_size: 32,
        ..small_cfg(4)
    };
    let gap = |lambda: f64| {
        let (m, h) = train_stage2(
            &train,
            &val,
            &trace,
            &Stage2Config {
                lambda,
                ..base.clone()
            },
        )
        .unwrap();
        if lambda == 0.0 {
            assert!(h
                .epochs
                .iter()
                .all(|e| e.loss == e.factual + e.l2 * base.weight_decay));
        }
        cf_gap(&train, &trace, &m).unwrap()
    };
    let (g0, g1) = (gap(0.0), gap(4.0));
    assert!(g1 < g0, "gap {g0} -> {g1}");
}

#[test]
fn missing_latents_are_an_alignment_error() {
    let (ds, _) = toy(5, 6, |_, _| 0);
    let empty = LatentTrace::default();
    assert!(matches!(
        collect_items(&ds, &empty),
        Err(flmd::FlmdError::Alignment(_))
    ));
    let (_, trace) = toy(5, 6, |_, _| 0);
    let model = Stage2Model::new(&small_cfg(0), &schema(), 2).unwrap();
    let preds = predict_dataset(&ds, &trace, &model).unwrap();
    assert_eq!(preds.len(), ds.num_encounters());
    assert_eq!(preds[0].t, 1);
}
