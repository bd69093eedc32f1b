use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{self, REL_ERR_FLOOR};
use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn eval_unary(x: Tensor, f: impl Fn(&mut Tape, Var) -> Var) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = f(&mut tape, v);
    tape.value(out).clone()
}

#[test]
fn matmul_identity_and_scalar() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let m = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
    let p = tape.matmul(i, m).unwrap();
    assert_eq!(tape.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.constant(Tensor::from_rows(&[vec![2.0]]));
    let b = tape.constant(Tensor::from_rows(&[vec![3.0]]));
    let p = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(p).data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = random(&[4, 5], &mut r);
    let b = random(&[5, 3], &mut r);
    let mut expect = [[0.0f64; 3]; 4];
    for (i, row) in expect.iter_mut().enumerate() {
        for (j, e) in row.iter_mut().enumerate() {
            for k in 0..5 {
                *e += a.data()[i * 5 + k] * b.data()[k * 3 + j];
            }
        }
    }
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let p = tape.matmul(va, vb).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            assert!((tape.value(p).data()[i * 3 + j] - expect[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let out = eval_unary(Tensor::new(vec![3], vec![0.0; 3]).unwrap(), |t, v| t.softmax(v, 0).unwrap());
    for p in out.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }

    let out = eval_unary(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap(), |t, v| t.softmax(v, 0).unwrap());
    assert_eq!(out.data(), &[1.0, 0.0]);

    let out = eval_unary(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), |t, v| t.softmax(v, 0).unwrap());
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
    for (i, p) in out.data().iter().enumerate() {
        assert!((p - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
}

#[test]
fn softmax_along_leading_axis() {
    let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 3.0]]);
    let out = eval_unary(x, |t, v| t.softmax(v, 0).unwrap());
    assert!((out.data()[0] - 0.5).abs() < 1e-15);
    assert!((out.data()[1] + out.data()[3] - 1.0).abs() < 1e-15);
}

#[test]
fn softmax_rejects_non_finite() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
    assert!(matches!(tape.softmax(v, 0), Err(Error::Numeric(_))));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(xs in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let out = eval_unary(Tensor::new(vec![3, 4], xs).unwrap(), |t, v| t.softmax(v, 1).unwrap());
        for row in out.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}

fn layer_norm_eval(x: Tensor, eps: f64) -> Tensor {
    let d = x.cols();
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let g = tape.constant(Tensor::full(&[d], 1.0));
    let b = tape.constant(Tensor::zeros(&[d]));
    let out = tape.layer_norm(v, g, b, eps).unwrap();
    tape.value(out).clone()
}

#[test]
fn layer_norm_examples() {
    let out = layer_norm_eval(Tensor::new(vec![4], vec![5.0; 4]).unwrap(), LAYER_NORM_EPS);
    assert_eq!(out.data(), &[0.0; 4]);

    let out = layer_norm_eval(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), 1e-14);
    assert!((out.data()[0] - 1.0).abs() < 1e-12 && (out.data()[1] + 1.0).abs() < 1e-12);

    let mut r = rng(3);
    let out = layer_norm_eval(random(&[3, 8], &mut r), LAYER_NORM_EPS);
    for row in out.data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-3, "variance {var}");
    }
}

#[test]
fn layer_norm_moments_with_small_eps() {
    let mut r = rng(4);
    let out = layer_norm_eval(random(&[3, 8], &mut r), 1e-12);
    for row in out.data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

struct MhaFixture {
    weights: Vec<Tensor>,
}

impl MhaFixture {
    fn new(d: usize, heads: usize, key_dim: usize, r: &mut ChaCha8Rng) -> Self {
        let w = heads * key_dim;
        let weights = vec![
            random(&[d, w], r),
            random(&[w], r),
            random(&[d, w], r),
            random(&[w], r),
            random(&[d, w], r),
            random(&[w], r),
            random(&[w, d], r),
            random(&[d], r),
        ];
        Self { weights }
    }

    fn bind(&self, tape: &mut Tape) -> AttentionParams {
        let v: Vec<Var> = self.weights.iter().map(|t| tape.param(t.clone())).collect();
        AttentionParams {
            query_w: v[0],
            query_b: v[1],
            key_w: v[2],
            key_b: v[3],
            value_w: v[4],
            value_b: v[5],
            out_w: v[6],
            out_b: v[7],
        }
    }

    fn run(&self, x: &Tensor, heads: usize, key_dim: usize, pad: &[bool]) -> Tensor {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = multi_head_attention(&mut tape, xv, &p, key_dim, heads, pad).unwrap();
        tape.value(out).clone()
    }
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..cols)
        .map(|j| b.data()[j] + (0..rows).map(|i| x[i] * w.data()[i * cols + j]).sum::<f64>())
        .collect()
}

#[test]
fn attention_single_element_is_value_projection() {
    let mut r = rng(5);
    let f = MhaFixture::new(4, 2, 3, &mut r);
    let x = random(&[1, 1, 4], &mut r);
    let out = f.run(&x, 2, 3, &[false]);
    let v = affine(x.data(), &f.weights[4], &f.weights[5]);
    let expect = affine(&v, &f.weights[6], &f.weights[7]);
    for (a, b) in out.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_padded_row_is_zero() {
    let mut r = rng(6);
    let f = MhaFixture::new(4, 2, 2, &mut r);
    let x = random(&[2, 3, 4], &mut r);
    let pad = [false, false, true, true, true, true];
    let out = f.run(&x, 2, 2, &pad);
    assert!(out.data()[12..].iter().all(|&v| v == 0.0));
    assert!(out.data()[8..12].iter().all(|&v| v == 0.0));
    assert!(out.data()[..8].iter().any(|&v| v != 0.0));
}

#[test]
fn attention_matches_loop_oracle() {
    let mut r = rng(7);
    let (l, d) = (3, 4);
    let f = MhaFixture::new(d, 1, d, &mut r);
    let x = random(&[1, l, d], &mut r);
    let out = f.run(&x, 1, d, &[false; 3]);
    let rows: Vec<&[f64]> = x.data().chunks(d).collect();
    let q: Vec<Vec<f64>> = rows.iter().map(|x| affine(x, &f.weights[0], &f.weights[1])).collect();
    let k: Vec<Vec<f64>> = rows.iter().map(|x| affine(x, &f.weights[2], &f.weights[3])).collect();
    let v: Vec<Vec<f64>> = rows.iter().map(|x| affine(x, &f.weights[4], &f.weights[5])).collect();
    for i in 0..l {
        let logits: Vec<f64> = (0..l)
            .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = logits.iter().map(|s| s.exp()).sum();
        let mut mixed = vec![0.0; d];
        for j in 0..l {
            for c in 0..d {
                mixed[c] += logits[j].exp() / z * v[j][c];
            }
        }
        let expect = affine(&mixed, &f.weights[6], &f.weights[7]);
        for c in 0..d {
            assert!((out.data()[i * d + c] - expect[c]).abs() < 1e-10);
        }
    }
}

#[test]
fn attention_is_permutation_equivariant_bitwise() {
    let mut r = rng(8);
    let (l, d) = (6, 8);
    let f = MhaFixture::new(d, 2, 8, &mut r);
    for _ in 0..20 {
        let x = random(&[1, l, d], &mut r);
        let mut perm: Vec<usize> = (0..l).collect();
        for i in (1..l).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let px = Tensor::from_fn(&[1, l, d], |i| x.data()[perm[i / d] * d + i % d]);
        let out = f.run(&x, 2, 8, &[false; 6]);
        let pout = f.run(&px, 2, 8, &[false; 6]);
        for i in 0..l {
            for c in 0..d {
                assert_eq!(
                    pout.data()[i * d + c].to_bits(),
                    out.data()[perm[i] * d + c].to_bits()
                );
            }
        }
    }
}

#[test]
fn attention_config_errors() {
    let mut r = rng(9);
    let f = MhaFixture::new(4, 1, 4, &mut r);
    let mut tape = Tape::new();
    let p = f.bind(&mut tape);
    let x = tape.constant(Tensor::zeros(&[1, 2, 4]));
    assert!(matches!(
        multi_head_attention(&mut tape, x, &p, 4, 0, &[false, false]),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        multi_head_attention(&mut tape, x, &p, 0, 1, &[false, false]),
        Err(Error::Config(_))
    ));
}

#[test]
fn backward_trivial_graphs() {
    let w = Tensor::new(vec![3], vec![0.5, -2.0, 3.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.param(w.clone());
    let s = tape.sum(v);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let v = tape.param(w.clone());
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    let half = tape.scale(s, 0.5);
    tape.backward(half).unwrap();
    assert_eq!(tape.grad(v).unwrap(), w.data());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let v = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[2], 3.0));
    let p = tape.param(Tensor::full(&[2], 2.0));
    let m = tape.mul(c, p).unwrap();
    let s = tape.sum(m);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(p).unwrap(), &[3.0, 3.0]);
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn assert_grad(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> crate::error::Result<Var>) {
    let res = gradcheck::check(inputs, H, f).unwrap();
    assert!(res.max_rel_err < TOL, "max rel err {} (floor {REL_ERR_FLOOR})", res.max_rel_err);
}

/// Reduces any tensor to a scalar through fixed random weights so that every
/// output coordinate carries a distinct upstream gradient.
fn project(tape: &mut Tape, x: Var, seed: u64) -> crate::error::Result<Var> {
    let mut r = rng(seed);
    let w: Vec<f64> = (0..tape.value(x).numel()).map(|_| r.random_range(-1.0..1.0)).collect();
    let y = tape.mul_const(x, w)?;
    Ok(tape.sum(y))
}

#[test]
fn gradients_of_each_op_match_finite_differences() {
    let mut r = rng(10);
    let a = random(&[3, 4], &mut r);
    let b = random(&[4, 2], &mut r);
    let c = random(&[3, 4], &mut r);
    let bias = random(&[4], &mut r);
    let pos = Tensor::from_fn(&[3, 4], |_| r.random_range(0.5..2.0));

    assert_grad(&[a.clone(), b.clone()], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 1)
    });
    assert_grad(&[a.clone(), c.clone()], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let m = t.mul(d, v[1])?;
        project(t, m, 2)
    });
    assert_grad(&[a.clone(), bias.clone()], |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        let y = t.relu(y);
        project(t, y, 3)
    });
    assert_grad(std::slice::from_ref(&a), |t, v| {
        let y = t.sigmoid(v[0]);
        let y = t.scale(y, 1.7);
        project(t, y, 4)
    });
    assert_grad(std::slice::from_ref(&pos), |t, v| {
        let y = t.ln(v[0]);
        project(t, y, 5)
    });
    assert_grad(std::slice::from_ref(&a), |t, v| {
        let y = t.softmax(v[0], 1)?;
        project(t, y, 6)
    });
    assert_grad(std::slice::from_ref(&a), |t, v| {
        let y = t.softmax(v[0], 0)?;
        project(t, y, 7)
    });
    assert_grad(std::slice::from_ref(&a), |t, v| {
        let y = t.log_softmax(v[0])?;
        project(t, y, 8)
    });
    assert_grad(&[a.clone(), bias.clone(), random(&[4], &mut r)], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
        project(t, y, 9)
    });
    assert_grad(std::slice::from_ref(&a), |t, v| {
        let y = t.gather_rows(v[0], &[2, 0, 2])?;
        let y = t.pick(y, &[1, 3, 0])?;
        project(t, y, 10)
    });
    assert_grad(&[a.clone(), b.clone()], |t, v| {
        let bt = t.reshape(v[1], &[2, 4])?;
        let top = t.gather_rows(v[0], &[0, 1])?;
        let y = t.concat(top, bt)?;
        project(t, y, 11)
    });
    assert_grad(std::slice::from_ref(&a), |t, v| {
        let m = t.mean(v[0]);
        let s = t.sum(v[0]);
        let y = t.mul(m, s)?;
        Ok(y)
    });
    assert_grad(&[random(&[6, 3], &mut r)], |t, v| {
        let y = t.mean_pool(v[0], 3, &[false, true, false, false, false, true])?;
        project(t, y, 12)
    });
    assert_grad(&[random(&[5], &mut r)], |t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 0.3, 0.0]));
    assert_grad(&[random(&[5, 3], &mut r)], |t, v| {
        let y = t.embedding(v[0], &[1, 0, 5, 5, 2, 0], &[2, 3])?;
        project(t, y, 13)
    });
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut r = rng(11);
    let shape = AttentionShape {
        batch: 2,
        len: 3,
        heads: 2,
        key_dim: 2,
    };
    let pad = [false, false, true, false, false, false];
    let inputs = [random(&[6, 4], &mut r), random(&[6, 4], &mut r), random(&[6, 4], &mut r)];
    assert_grad(&inputs, |t, v| {
        let y = t.attention(v[0], v[1], v[2], shape, &pad)?;
        project(t, y, 14)
    });
}

/// Random small composite graphs mixing every op family.
#[test]
fn composite_graphs_match_finite_differences() {
    for seed in 0..6u64 {
        let mut r = rng(100 + seed);
        let (b, l, d) = (2, 3, 4);
        let f = MhaFixture::new(d, 2, 3, &mut r);
        let mut inputs = f.weights.clone();
        inputs.push(random(&[b, l, d], &mut r));
        inputs.push(random(&[d], &mut r));
        inputs.push(random(&[d], &mut r));
        inputs.push(random(&[d, 5], &mut r));
        let pad = [false, false, seed % 2 == 0, false, true, false];
        let targets = [1usize, 4, 0, 2];
        assert_grad(&inputs, |t, v| {
            let p = AttentionParams {
                query_w: v[0],
                query_b: v[1],
                key_w: v[2],
                key_b: v[3],
                value_w: v[4],
                value_b: v[5],
                out_w: v[6],
                out_b: v[7],
            };
            let a = multi_head_attention(t, v[8], &p, 3, 2, &pad)?;
            let res = t.add(a, v[8])?;
            let n = t.layer_norm(res, v[9], v[10], LAYER_NORM_EPS)?;
            let logits = t.matmul(n, v[11])?;
            let rows = t.gather_rows(logits, &[0, 1, 3, 5])?;
            let lp = t.log_softmax(rows)?;
            let picked = t.pick(lp, &targets)?;
            let ce = t.mean(picked);
            let probs = t.softmax(rows, 1)?;
            let sq = t.mul(probs, probs)?;
            let extra = t.mean(sq);
            let total = t.sub(extra, ce)?;
            Ok(total)
        });
    }
}

#[test]
fn dropout_contract() {
    let mut r = rng(12);
    let x = random(&[4, 4], &mut r);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let same = tape.dropout(v, 0.0, &mut r, true).unwrap();
    assert_eq!(tape.value(same), &x);
    let same = tape.dropout(v, 0.7, &mut r, false).unwrap();
    assert_eq!(tape.value(same), &x);
    assert!(matches!(tape.dropout(v, 1.0, &mut r, true), Err(Error::Config(_))));
    assert!(matches!(tape.dropout(v, -0.1, &mut r, true), Err(Error::Config(_))));
}

#[test]
fn dropout_statistics() {
    let mut r = rng(13);
    let n = 100_000;
    let x = Tensor::full(&[n], 2.0);
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = tape.dropout(v, 0.5, &mut r, true).unwrap();
    let data = tape.value(out).data();
    let kept = data.iter().filter(|&&a| a != 0.0).count() as f64 / n as f64;
    assert!((kept - 0.5).abs() < 0.02, "keep fraction {kept}");
    let mean = data.iter().sum::<f64>() / n as f64;
    assert!((mean - 2.0).abs() < 0.05, "mean {mean}");
    assert!(data.iter().all(|&a| a == 0.0 || a == 4.0));
}

#[test]
fn deterministic_given_seed() {
    let run = || {
        let mut r = rng(14);
        let f = MhaFixture::new(4, 2, 2, &mut r);
        let x = random(&[2, 3, 4], &mut r);
        let mut tape = Tape::new();
        let p = f.bind(&mut tape);
        let xv = tape.constant(x);
        let y = multi_head_attention(&mut tape, xv, &p, 2, 2, &[false; 6]).unwrap();
        let y = tape.dropout(y, 0.3, &mut r, true).unwrap();
        tape.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
