use diffkernel::functional::{gaussian_kl, reparameterize, standard_normal};
use diffkernel::layers::{affine, lstm_cell, multi_head_attention, AttentionWeights};
use diffkernel::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn attention_store(d: usize, rng: &mut impl Rng) -> ParamStore {
    let mut s = ParamStore::new();
    for name in ["wq", "wk", "wv", "wo"] {
        s.insert_glorot(name, d, d, rng).unwrap();
    }
    s.insert_normal("bo", &[1, d], 0.1, rng).unwrap();
    s
}

fn attention_weights(g: &mut Graph, s: &ParamStore) -> AttentionWeights {
    AttentionWeights {
        wq: g.param(s, "wq").unwrap(),
        wk: g.param(s, "wk").unwrap(),
        wv: g.param(s, "wv").unwrap(),
        wo: g.param(s, "wo").unwrap(),
        bo: g.param(s, "bo").unwrap(),
    }
}

#[test]
fn affine_identity_is_identity() {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::identity(3)).unwrap();
    s.insert_zeros("b", &[1, 3]).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 4.0, -5.0]).unwrap());
    let (w, b) = (g.param(&s, "w").unwrap(), g.param(&s, "b").unwrap());
    let y = affine(&mut g, x, w, b).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn affine_shape_mismatch_is_error() {
    let mut s = ParamStore::new();
    s.insert_zeros("w", &[4, 3]).unwrap();
    s.insert_zeros("b", &[1, 3]).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let (w, b) = (g.param(&s, "w").unwrap(), g.param(&s, "b").unwrap());
    assert!(affine(&mut g, x, w, b).is_err());
}

#[test]
fn lstm_with_zero_parameters_is_fixed_at_zero() {
    let mut s = ParamStore::new();
    s.insert_zeros("w", &[5, 12]).unwrap();
    s.insert_zeros("b", &[1, 12]).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(&[1.0, -2.0]).unwrap());
    let h = g.constant(Tensor::zeros(&[1, 3]));
    let c = g.constant(Tensor::zeros(&[1, 3]));
    let (w, b) = (g.param(&s, "w").unwrap(), g.param(&s, "b").unwrap());
    let (h2, c2) = lstm_cell(&mut g, x, h, c, w, b).unwrap();
    assert!(g.value(h2).data().iter().all(|&v| v == 0.0));
    assert!(g.value(c2).data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_rejects_mismatched_weights() {
    let mut s = ParamStore::new();
    s.insert_zeros("w", &[4, 12]).unwrap();
    s.insert_zeros("b", &[1, 12]).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(&[1.0, -2.0]).unwrap());
    let h = g.constant(Tensor::zeros(&[1, 3]));
    let (w, b) = (g.param(&s, "w").unwrap(), g.param(&s, "b").unwrap());
    assert!(lstm_cell(&mut g, x, h, h, w, b).is_err());
}

#[test]
fn single_token_attention_follows_value_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = attention_store(4, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(&[0.3, -1.0, 2.0, 0.7]).unwrap());
    let w = attention_weights(&mut g, &s);
    let (out, attn) = multi_head_attention(&mut g, x, &w, 2, 1).unwrap();
    assert_eq!(g.attention_weights(attn).unwrap(), &[1.0, 1.0]);

    let xv = g.matmul(x, w.wv).unwrap();
    let expected = affine(&mut g, xv, w.wo, w.bo).unwrap();
    for (a, b) in g.value(out).data().iter().zip(g.value(expected).data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn attention_weights_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = attention_store(6, &mut rng);
    let mut g = Graph::new();
    let data: Vec<f64> = (0..4 * 3 * 6)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let x = g.constant(Tensor::matrix(12, 6, data).unwrap());
    let w = attention_weights(&mut g, &s);
    let (_, attn) = multi_head_attention(&mut g, x, &w, 3, 3).unwrap();
    let weights = g.attention_weights(attn).unwrap();
    assert_eq!(weights.len(), 4 * 3 * 3 * 3);
    for row in weights.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = attention_store(4, &mut rng);
    let rows: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let perm = [2, 0, 1];
    let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();

    let run = |rows: &[Vec<f64>]| {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(rows).unwrap());
        let w = attention_weights(&mut g, &s);
        let (out, _) = multi_head_attention(&mut g, x, &w, 2, 3).unwrap();
        g.value(out).clone()
    };
    let base = run(&rows);
    let moved = run(&permuted);
    for (new_row, &old_row) in perm.iter().enumerate() {
        for (a, b) in moved.row_slice(new_row).iter().zip(base.row_slice(old_row)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// Antithetic Monte-Carlo estimate of E_q[ln q − ln p] for scalar q = N(μ, σ²), p = N(0, 1).
fn kl_monte_carlo(mu: f64, sigma: f64, n: usize, rng: &mut impl Rng) -> f64 {
    let log_ratio = |e: f64| {
        let z = mu + sigma * e;
        -0.5 * e * e - sigma.ln() + 0.5 * z * z
    };
    let mut acc = 0.0;
    for _ in 0..n / 2 {
        let e = standard_normal(rng, 1)[0];
        acc += log_ratio(e) + log_ratio(-e);
    }
    acc / (2 * (n / 2)) as f64
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mu = rng.random_range(-1.0..1.0);
        let sigma = rng.random_range(0.5..1.5);
        let closed = gaussian_kl(&[mu], &[sigma]).unwrap();
        let mc = kl_monte_carlo(mu, sigma, 100_000, &mut rng);
        assert!(
            (mc - closed).abs() < 1e-2,
            "mu {mu} sigma {sigma}: closed {closed} mc {mc}"
        );
    }
}

#[test]
fn reparameterized_samples_have_mean_mu() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mu, sigma) = ([0.7, -2.0], [1.5, 0.2]);
    let n = 100_000;
    let mut sum = [0.0; 2];
    for _ in 0..n {
        let z = reparameterize(&mu, &sigma, &standard_normal(&mut rng, 2)).unwrap();
        sum[0] += z[0];
        sum[1] += z[1];
    }
    for j in 0..2 {
        let mean = sum[j] / n as f64;
        assert!((mean - mu[j]).abs() < 3.0 * sigma[j] / (n as f64).sqrt());
    }
}

proptest! {
    #[test]
    fn softmax_is_a_simplex(row in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&row).unwrap());
        let s = g.softmax_rows(x).unwrap();
        let p = g.value(s).data();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn kl_is_nonnegative(
        pairs in prop::collection::vec((-5.0f64..5.0, 0.01f64..5.0), 1..8)
    ) {
        let (mu, sigma): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let kl = gaussian_kl(&mu, &sigma).unwrap();
        prop_assert!(kl >= 0.0);
        let is_standard = mu.iter().all(|&m| m == 0.0) && sigma.iter().all(|&s| s == 1.0);
        if !is_standard {
            prop_assert!(kl > 0.0 || mu.iter().zip(&sigma).all(|(m, s)| m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn lstm_hidden_state_is_bounded(
        w in prop::collection::vec(-5.0f64..5.0, 5 * 12),
        x in prop::collection::vec(-10.0f64..10.0, 2),
    ) {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::matrix(5, 12, w).unwrap()).unwrap();
        s.insert_zeros("b", &[1, 12]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::row(&x).unwrap());
        let h = g.constant(Tensor::full(&[1, 3], 0.9));
        let c = g.constant(Tensor::full(&[1, 3], -3.0));
        let (wv, bv) = (g.param(&s, "w").unwrap(), g.param(&s, "b").unwrap());
        let (h2, _) = lstm_cell(&mut g, xv, h, c, wv, bv).unwrap();
        prop_assert!(g.value(h2).data().iter().all(|v| v.abs() <= 1.0));
    }
}
