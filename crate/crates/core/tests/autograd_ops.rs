//! Reverse-mode gradients of every graph op against central differences,
//! on random shapes and values.
//!
//! A central difference carries an absolute error of about `ulp(L)/2ε`, so a
//! relative check is only meaningful on gradient entries well above that.
//! Inputs are drawn with magnitudes in `[0.5, 1.5]` and the readout weights
//! are positive, so products and summed contributions stay away from zero.
//! Ops whose gradient can still cancel (matmul, normalisers) are checked
//! against a closed form, and the finite-difference comparison is restricted
//! to inputs where every gradient entry is resolvable.

use std::sync::Arc;

use guide::tensor::{finite_difference_check, Graph, Tensor, Var};
use guide::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

/// Random signs, magnitudes in `[0.5, 1.5]`.
fn values(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::uniform(shape, 0.5, 1.5, &mut rng);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Positive readout weights in `[0.5, 1.5]`.
fn weights(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.5, 1.5, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc))
}

/// Contract `y` with [`weights`] so every output element matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(&weights(g.shape(y), seed));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check<F>(inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let params: Vec<(String, Tensor)> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| (format!("x{i}"), t))
        .collect();
    let report = finite_difference_check(f, &params, EPS, TOL).unwrap();
    assert!(report.passed, "{:#?}", report.params);
}

/// Every oracle gradient entry is large enough for a relative check at `EPS`.
fn resolvable(oracle: &[&[f64]]) -> bool {
    oracle.iter().all(|o| o.iter().all(|d| d.abs() >= 1e-3))
}

/// Reverse-mode gradients of `f` agree with closed-form `oracle` to rounding.
fn matches_oracle<F>(inputs: &[Tensor], f: &F, oracle: &[&[f64]]) -> bool
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let l = f(&mut g, &vars).unwrap();
    g.backward(l).unwrap();
    vars.iter().zip(oracle).all(|(&v, o)| {
        g.grad(v).unwrap().iter().zip(o.iter()).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs()))
    })
}

/// `∂/∂A, ∂/∂B` of `Σ W ⊙ (A·B)` for `A: [n,k]`, `B: [k,m]`: `W·Bᵀ` and `Aᵀ·W`.
fn matmul_oracle(a: &[f64], b: &[f64], w: &[f64], (n, k, m): (usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; n * k];
    let mut db = vec![0.0; k * m];
    for i in 0..n {
        for p in 0..k {
            for j in 0..m {
                da[i * k + p] += w[i * m + j] * b[p * m + j];
                db[p * m + j] += a[i * k + p] * w[i * m + j];
            }
        }
    }
    (da, db)
}

/// Closed-form `∂/∂x Σ w·f(x)` for row-wise layer norm (eps 1e-5, no affine)
/// and softmax: `(w − mean w − y·mean(w·y))/s` and `p·(w − Σ p·w)`.
fn normaliser_oracles(x: &Tensor, w: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = *x.shape().last().unwrap();
    let (mut ln, mut sm) = (Vec::new(), Vec::new());
    for (row, wr) in x.data().chunks(c).zip(w.data().chunks(c)) {
        let n = c as f64;
        let mu = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        let s = (var + 1e-5).sqrt();
        let y: Vec<f64> = row.iter().map(|v| (v - mu) / s).collect();
        let w_mean = wr.iter().sum::<f64>() / n;
        let wy_mean = wr.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n;
        ln.extend(wr.iter().zip(&y).map(|(wi, yi)| (wi - w_mean - yi * wy_mean) / s));

        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let pw: f64 = e.iter().zip(wr).map(|(ei, wi)| ei / z * wi).sum();
        sm.extend(e.iter().zip(wr).map(|(ei, wi)| ei / z * (wi - pw)));
    }
    (ln, sm)
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..5, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, max_global_rejects: 1 << 20, ..ProptestConfig::default() })]

    #[test]
    fn add_sub_mul((r, c) in dims(), seed in any::<u64>()) {
        let a = values(&[r, c], seed);
        let b = values(&[r, c], seed + 1);
        check(vec![a.clone(), b.clone()], |g, v| { let y = g.add(v[0], v[1])?; project(g, y, seed) });
        check(vec![a.clone(), b.clone()], |g, v| { let y = g.sub(v[0], v[1])?; project(g, y, seed) });
        check(vec![a, b], |g, v| { let y = g.mul(v[0], v[1])?; project(g, y, seed) });
    }

    #[test]
    fn matmul_plain_and_batched(n in 1usize..4, k in 1usize..4, m in 1usize..4, b in 1usize..3, seed in any::<u64>()) {
        let (a, bm) = (values(&[b, n, k], seed), values(&[b, k, m], seed + 1));
        let w = weights(&[b, n, m], seed);
        let (mut da, mut db) = (Vec::new(), Vec::new());
        for i in 0..b {
            let (x, y) = matmul_oracle(
                &a.data()[i * n * k..(i + 1) * n * k],
                &bm.data()[i * k * m..(i + 1) * k * m],
                &w.data()[i * n * m..(i + 1) * n * m],
                (n, k, m),
            );
            da.extend(x);
            db.extend(y);
        }
        prop_assume!(resolvable(&[&da, &db]));
        let f = |g: &mut Graph, v: &[Var]| { let y = g.matmul(v[0], v[1])?; project(g, y, seed) };
        prop_assert!(matches_oracle(&[a.clone(), bm.clone()], &f, &[&da, &db]));
        check(vec![a, bm], f);
    }

    #[test]
    fn linear_with_bias(n in 1usize..4, k in 1usize..4, m in 1usize..4, seed in any::<u64>()) {
        let (x, wt, bias) = (values(&[n, k], seed), values(&[k, m], seed + 1), values(&[m], seed + 2));
        let w = weights(&[n, m], seed);
        let (dx, dw) = matmul_oracle(x.data(), wt.data(), w.data(), (n, k, m));
        let dbias: Vec<f64> = (0..m).map(|j| (0..n).map(|i| w.data()[i * m + j]).sum()).collect();
        prop_assume!(resolvable(&[&dx, &dw, &dbias]));
        let f = |g: &mut Graph, v: &[Var]| { let y = g.linear(v[0], v[1], Some(v[2]))?; project(g, y, seed) };
        prop_assert!(matches_oracle(&[x.clone(), wt.clone(), bias.clone()], &f, &[&dx, &dw, &dbias]));
        check(vec![x, wt, bias], f);
    }

    #[test]
    fn shape_ops((r, c) in dims(), seed in any::<u64>()) {
        let x = values(&[2, r, c], seed);
        check(vec![x.clone(), values(&[2, r, 1], seed + 1)], |g, v| {
            let y = g.concat(v, 2)?;
            project(g, y, seed)
        });
        check(vec![x.clone()], |g, v| { let y = g.reshape(v[0], &[r * c * 2])?; project(g, y, seed) });
        check(vec![x.clone()], |g, v| { let y = g.slice(v[0], 1, 0, r.div_ceil(2))?; project(g, y, seed) });
        check(vec![x.clone()], |g, v| { let y = g.permute(v[0], &[2, 0, 1])?; project(g, y, seed) });
        check(vec![x], |g, v| { let y = g.expand(v[0], 3)?; project(g, y, seed) });
    }

    #[test]
    fn pointwise((r, c) in dims(), seed in any::<u64>()) {
        let x = values(&[r, c], seed);
        check(vec![x.clone()], |g, v| { let y = g.sigmoid(v[0])?; project(g, y, seed) });
        check(vec![x.clone()], |g, v| { let y = g.tanh(v[0])?; project(g, y, seed) });
        check(vec![x], |g, v| { let y = g.scale(v[0], -2.5)?; project(g, y, seed) });
    }

    #[test]
    fn relu_away_from_kink((r, c) in dims(), seed in any::<u64>()) {
        // |x| ≥ 0.5, so ±ε never crosses the kink
        let x = values(&[r, c], seed);
        check(vec![x], |g, v| { let y = g.relu(v[0])?; project(g, y, seed) });
    }

    #[test]
    // With two channels layer norm maps every row to ±1 and has no gradient to check.
    fn normalisers(r in 1usize..4, c in 3usize..6, seed in any::<u64>()) {
        let x = values(&[r, c], seed);
        let w = weights(&[r, c], seed);
        let (ln, sm) = normaliser_oracles(&x, &w);
        // Both gradients subtract a weighted mean, so entries can cancel; and
        // a row of nearly equal values makes layer norm's higher derivatives
        // (∝ 1/σ³) swamp the central difference.
        prop_assume!(resolvable(&[&ln, &sm]));
        prop_assume!(x.data().chunks(c).all(|row| {
            let mu = row.iter().sum::<f64>() / c as f64;
            row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c as f64 >= 0.1
        }));
        let f_ln = |g: &mut Graph, v: &[Var]| { let y = g.layernorm(v[0], 1e-5)?; project(g, y, seed) };
        let f_sm = |g: &mut Graph, v: &[Var]| { let y = g.softmax(v[0])?; project(g, y, seed) };
        prop_assert!(matches_oracle(&[x.clone()], &f_ln, &[&ln]));
        prop_assert!(matches_oracle(&[x.clone()], &f_sm, &[&sm]));
        check(vec![x.clone()], f_ln);
        check(vec![x], f_sm);
    }

    #[test]
    fn reductions_and_scalar_mul((r, c) in dims(), seed in any::<u64>()) {
        let x = values(&[r, c], seed);
        check(vec![x.clone()], |g, v| { let y = g.tanh(v[0])?; g.mean(y) });
        // ∂/∂s is Σ w·x: positive x keeps it from cancelling
        let x = Tensor::uniform(&[r, c], 0.5, 1.5, &mut ChaCha8Rng::seed_from_u64(seed));
        check(vec![x, values(&[1], seed + 1)], |g, v| {
            let y = g.scalar_mul(v[0], v[1])?;
            project(g, y, seed)
        });
    }

    #[test]
    fn masked_fill_blocks_gradient((r, c) in dims(), seed in any::<u64>(), bits in any::<u32>()) {
        let mask: Arc<[bool]> = (0..r * c).map(|i| bits >> (i % 32) & 1 == 1).collect();
        let x = values(&[r, c], seed);
        check(vec![x.clone()], |g, v| {
            let y = g.masked_fill(v[0], mask.clone(), -3.0)?;
            project(g, y, seed)
        });
        let mut g = Graph::new();
        let xv = g.param(&x);
        let y = g.masked_fill(xv, mask.clone(), -3.0).unwrap();
        let l = project(&mut g, y, seed).unwrap();
        g.backward(l).unwrap();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                prop_assert_eq!(g.grad(xv).unwrap()[i], 0.0);
                prop_assert_eq!(g.data(y)[i], -3.0);
            }
        }
    }

    #[test]
    fn gather_and_cross_entropy(rows in 2usize..5, c in 1usize..4, seed in any::<u64>()) {
        let ids: Vec<usize> = (0..6).map(|i| (seed as usize + i * 7) % rows).collect();
        check(vec![values(&[rows, c], seed)], |g, v| { let y = g.gather(v[0], &ids)?; project(g, y, seed) });
        let labels: Vec<usize> = (0..3).map(|i| (seed as usize + i) % rows).collect();
        check(vec![values(&[3, rows], seed)], |g, v| g.cross_entropy(v[0], &labels));
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_classes() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::zeros(&[4, 5]));
    let l = g.cross_entropy(x, &[0, 1, 2, 3]).unwrap();
    assert!((g.data(l)[0] - 5f64.ln()).abs() < 1e-15);
}

#[test]
fn shared_subexpression_accumulates() {
    // y = x·x + x  →  dy/dx = 2x + 1
    let mut g = Graph::new();
    let x = g.param(&Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let y = g.add(sq, x).unwrap();
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[3.0, -3.0, 2.0]);
}
