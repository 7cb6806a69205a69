//! Gradient cases covering every graph op, shared by the diffkernel tests
//! and the workspace acceptance suite.

use diffkernel::gradcheck::check_gradients;
use diffkernel::layers::{
    affine, lstm_cell, multi_head_attention, reparameterize_logvar, AttentionWeights,
};
use diffkernel::{Graph, Likelihood, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const POINTS: u64 = 10;

type Build = fn(&mut Graph, &ParamStore, u64) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    shapes: &'static [(&'static str, &'static [usize])],
    build: Build,
}

fn case(
    name: &'static str,
    shapes: &'static [(&'static str, &'static [usize])],
    build: Build,
) -> OpCase {
    OpCase {
        name,
        shapes,
        build,
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn store_with(rng: &mut impl Rng, shapes: &[(&str, &[usize])]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.insert(name, random_tensor(rng, shape, 1.0)).unwrap();
    }
    s
}

/// Contracts a non-scalar output with fixed random weights so the whole
/// Jacobian is exercised, not only its column sums.
fn contract(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead_beef);
    let w = random_tensor(&mut rng, g.value(out).shape(), 1.0);
    g.weighted_sum(out, w)
}

impl OpCase {
    /// Worst relative error over all points, with the point and entry it came from.
    pub fn max_rel_err(&self) -> (f64, String) {
        let mut worst = (0.0, String::new());
        for point in 0..POINTS {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);
            let store = store_with(&mut rng, self.shapes);
            let report = check_gradients(
                &store,
                |g, s| {
                    let out = (self.build)(g, s, point)?;
                    contract(g, out, point)
                },
                H,
                64,
            )
            .unwrap();
            if report.max_rel_err >= worst.0 {
                worst = (
                    report.max_rel_err,
                    format!("point {point}, {}", report.worst),
                );
            }
        }
        worst
    }
}

pub fn cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[("a", &[3, 4]), ("b", &[4, 2])], |g, s, _| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            g.matmul(a, b)
        }),
        case("add_bias", &[("a", &[3, 4]), ("b", &[1, 4])], |g, s, _| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            g.add_bias(a, b)
        }),
        case(
            "affine",
            &[("x", &[4, 3]), ("w", &[3, 5]), ("b", &[1, 5])],
            |g, s, _| {
                let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
                affine(g, x, w, b)
            },
        ),
        case("tanh", &[("x", &[3, 4])], |g, s, _| {
            let x = g.param(s, "x")?;
            g.tanh(x)
        }),
        case("sigmoid", &[("x", &[3, 4])], |g, s, _| {
            let x = g.param(s, "x")?;
            g.sigmoid(x)
        }),
        case("relu", &[("x", &[3, 4])], |g, s, _| {
            let x = g.param(s, "x")?;
            g.relu(x)
        }),
        case("exp", &[("x", &[3, 4])], |g, s, _| {
            let x = g.param(s, "x")?;
            g.exp(x)
        }),
        case(
            "add/sub/mul/scale",
            &[("a", &[2, 3]), ("b", &[2, 3])],
            |g, s, _| {
                let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
                let p = g.mul(a, b)?;
                let q = g.sub(p, b)?;
                let r = g.add(q, a)?;
                g.scale(r, -1.7)
            },
        ),
        case("softmax", &[("x", &[3, 5])], |g, s, _| {
            let x = g.param(s, "x")?;
            g.softmax_rows(x)
        }),
        case(
            "concat/slice/interleave/block_mean/broadcast",
            &[("a", &[2, 3]), ("b", &[2, 2]), ("r", &[1, 5])],
            |g, s, _| {
                let (a, b, r) = (g.param(s, "a")?, g.param(s, "b")?, g.param(s, "r")?);
                let c = g.concat_cols(&[a, b])?;
                let sl = g.slice_cols(c, 1, 4)?;
                let sq = g.mul(sl, sl)?;
                let rb = g.broadcast_rows(r, 2)?;
                let inter = g.interleave_rows(&[c, rb])?;
                let t = g.tanh(inter)?;
                let pooled = g.block_mean(t, 2)?;
                g.concat_cols(&[pooled, sq])
            },
        ),
        case(
            "lstm_cell",
            &[
                ("x", &[2, 3]),
                ("h", &[2, 4]),
                ("c", &[2, 4]),
                ("w", &[7, 16]),
                ("b", &[1, 16]),
            ],
            |g, s, _| {
                let (x, h, c) = (g.param(s, "x")?, g.param(s, "h")?, g.param(s, "c")?);
                let (w, b) = (g.param(s, "w")?, g.param(s, "b")?);
                let (h2, c2) = lstm_cell(g, x, h, c, w, b)?;
                g.concat_cols(&[h2, c2])
            },
        ),
        case(
            "mha",
            &[
                ("x", &[6, 4]),
                ("wq", &[4, 4]),
                ("wk", &[4, 4]),
                ("wv", &[4, 4]),
                ("wo", &[4, 4]),
                ("bo", &[1, 4]),
            ],
            |g, s, _| {
                let x = g.param(s, "x")?;
                let w = AttentionWeights {
                    wq: g.param(s, "wq")?,
                    wk: g.param(s, "wk")?,
                    wv: g.param(s, "wv")?,
                    wo: g.param(s, "wo")?,
                    bo: g.param(s, "bo")?,
                };
                Ok(multi_head_attention(g, x, &w, 2, 3)?.0)
            },
        ),
        case("kl_rows", &[("mu", &[3, 4]), ("lv", &[3, 4])], |g, s, _| {
            let (mu, lv) = (g.param(s, "mu")?, g.param(s, "lv")?);
            g.kl_rows(mu, lv)
        }),
        case(
            "reparameterize",
            &[("mu", &[2, 3]), ("lv", &[2, 3])],
            |g, s, point| {
                let (mu, lv) = (g.param(s, "mu")?, g.param(s, "lv")?);
                let mut rng = ChaCha8Rng::seed_from_u64(point);
                let eps = g.constant(random_tensor(&mut rng, &[2, 3], 2.0));
                reparameterize_logvar(g, mu, lv, eps)
            },
        ),
        case("bce", &[("logit", &[4, 2])], |g, s, point| {
            let l = g.param(s, "logit")?;
            let p = g.sigmoid(l)?;
            let mut rng = ChaCha8Rng::seed_from_u64(point);
            let y: Vec<f64> = (0..8)
                .map(|_| f64::from(rng.random_range(0..2u8)))
                .collect();
            g.bce(p, Tensor::matrix(4, 2, y)?)
        }),
        case("feature_nll", &[("pred", &[3, 3])], |g, s, point| {
            let raw = g.param(s, "pred")?;
            // third column is a probability feature
            let gauss = g.slice_cols(raw, 0, 2)?;
            let logit = g.slice_cols(raw, 2, 3)?;
            let prob = g.sigmoid(logit)?;
            let pred = g.concat_cols(&[gauss, prob])?;
            let mut rng = ChaCha8Rng::seed_from_u64(point);
            let mut target = random_tensor(&mut rng, &[3, 3], 2.0);
            for r in 0..3 {
                target.data_mut()[r * 3 + 2] = f64::from(rng.random_range(0..2u8));
            }
            let kinds = [
                Likelihood::Gaussian,
                Likelihood::Gaussian,
                Likelihood::Bernoulli,
            ];
            g.feature_nll_rows(pred, target, &kinds)
        }),
        case("softmax_xent", &[("logits", &[3, 4])], |g, s, _| {
            let l = g.param(s, "logits")?;
            g.softmax_cross_entropy_rows(l, &[0, 3, 2])
        }),
        case("sq_norm", &[("a", &[3, 3])], |g, s, _| {
            let a = g.param(s, "a")?;
            g.sq_norm(a)
        }),
        case("sum_all/mean_all", &[("a", &[3, 4])], |g, s, _| {
            let a = g.param(s, "a")?;
            let sq = g.mul(a, a)?;
            let total = g.sum_all(sq)?;
            let mean = g.mean_all(a)?;
            let both = g.concat_cols(&[total, mean])?;
            g.tanh(both)
        }),
        case(
            "block_attention",
            &[("q", &[6, 4]), ("k", &[6, 4]), ("v", &[6, 4])],
            |g, s, _| {
                let (q, k, v) = (g.param(s, "q")?, g.param(s, "k")?, g.param(s, "v")?);
                let out = g.block_attention(q, k, v, 2, 3)?;
                assert!(g
                    .attention_weights(out)
                    .is_some_and(|w| w.iter().all(|p| p.is_finite())));
                Ok(out)
            },
        ),
    ]
}
