use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::*;
use crate::rng;
use crate::{Error, Result};

fn rand_tensor(r: &mut rng::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn tanh_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let y = tape.tanh(x).unwrap();
    assert_eq!(tape.value(y).item(), 0.0);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).item(), 1.0);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25; 4]);
}

#[test]
fn complex_exp_euler() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::complex(&[(0.0, core::f64::consts::FRAC_PI_2)]));
    let e = tape.complex_exp(z).unwrap();
    let (re, im) = tape.value(e).complex_at(0);
    assert!(re.abs() < 1e-12);
    assert!((im - 1.0).abs() < 1e-12);
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn unreachable_leaf_gets_exact_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let w = tape.leaf(Tensor::vector(vec![5.0, -1.0, 3.0]));
    let _unused = tape.tanh(w).unwrap();
    let loss = tape.sum(x).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(w).is_none());
    assert_eq!(g.wrt(w).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn shape_mismatch_and_non_finite_are_errors() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
    let neg = tape.leaf(Tensor::vector(vec![-1.0]));
    assert!(matches!(tape.log(neg), Err(Error::NonFinite { .. })));
    let m = tape.leaf(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(m, m), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn node_ids_increase() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::scalar(1.0));
    let b = tape.exp(a).unwrap();
    let c = tape.add(a, b).unwrap();
    assert!(a < b && b < c);
}

#[test]
fn grad_check_square() {
    let err = grad_check(
        |t, x| {
            let y = t.mul(x, x)?;
            t.sum(y)
        },
        &Tensor::scalar(3.0),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn straight_through_forward_hard_backward_soft() {
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::matrix(1, 3, vec![0.2, 0.5, 0.3]).unwrap());
    let h = tape.straight_through(s).unwrap();
    assert_eq!(tape.value(h).data(), &[0.0, 1.0, 0.0]);
    let w = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let p = tape.mul(h, w).unwrap();
    let loss = tape.sum(p).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(s).data(), &[1.0, 2.0, 3.0]);
}

type Builder = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Reduces an arbitrary tensor to a scalar with position-dependent weights so
/// every output coordinate contributes a distinct gradient.
fn weighted_sum(t: &mut Tape, v: Var) -> Result<Var> {
    let shape = t.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| 0.3 + 0.17 * (i % 7) as f64 - 0.05 * (i % 3) as f64).collect();
    let w = t.constant(Tensor::new(&shape, w)?);
    let p = t.mul(v, w)?;
    t.sum(p)
}

fn op_cases() -> Vec<(&'static str, Builder, Vec<Vec<usize>>, (f64, f64))> {
    vec![
        ("add", |t, v| { let y = t.add(v[0], v[1])?; weighted_sum(t, y) }, vec![vec![2, 3], vec![2, 3]], (-2.0, 2.0)),
        ("sub", |t, v| { let y = t.sub(v[0], v[1])?; weighted_sum(t, y) }, vec![vec![3, 2], vec![3, 2]], (-2.0, 2.0)),
        ("mul", |t, v| { let y = t.mul(v[0], v[1])?; weighted_sum(t, y) }, vec![vec![2, 3], vec![2, 3]], (-2.0, 2.0)),
        ("add_row", |t, v| { let y = t.add_row(v[0], v[1])?; weighted_sum(t, y) }, vec![vec![3, 4], vec![4]], (-2.0, 2.0)),
        ("scale", |t, v| { let y = t.scale(v[0], -1.7)?; weighted_sum(t, y) }, vec![vec![4]], (-2.0, 2.0)),
        ("add_const", |t, v| { let y = t.add_const(v[0], 0.4)?; let z = t.mul(y, y)?; weighted_sum(t, z) }, vec![vec![4]], (-2.0, 2.0)),
        ("mul_scalar", |t, v| { let y = t.mul_scalar(v[0], v[1])?; weighted_sum(t, y) }, vec![vec![2, 3], vec![]], (-2.0, 2.0)),
        ("matmul", |t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y) }, vec![vec![2, 3], vec![3, 4]], (-2.0, 2.0)),
        ("tanh", |t, v| { let y = t.tanh(v[0])?; weighted_sum(t, y) }, vec![vec![5]], (-2.0, 2.0)),
        ("sigmoid", |t, v| { let y = t.sigmoid(v[0])?; weighted_sum(t, y) }, vec![vec![5]], (-3.0, 3.0)),
        ("exp", |t, v| { let y = t.exp(v[0])?; weighted_sum(t, y) }, vec![vec![5]], (-1.0, 1.0)),
        ("log", |t, v| { let y = t.log(v[0])?; weighted_sum(t, y) }, vec![vec![5]], (0.5, 3.0)),
        ("powf", |t, v| { let y = t.powf(v[0], -0.5)?; weighted_sum(t, y) }, vec![vec![5]], (0.5, 3.0)),
        ("softmax", |t, v| { let y = t.softmax(v[0])?; weighted_sum(t, y) }, vec![vec![3, 4]], (-2.0, 2.0)),
        ("log_softmax", |t, v| { let y = t.log_softmax(v[0])?; weighted_sum(t, y) }, vec![vec![3, 4]], (-2.0, 2.0)),
        ("sum", |t, v| { let y = t.mul(v[0], v[0])?; t.sum(y) }, vec![vec![2, 3]], (-2.0, 2.0)),
        ("mean", |t, v| { let y = t.mul(v[0], v[0])?; t.mean(y) }, vec![vec![2, 3]], (-2.0, 2.0)),
        ("mean_rows", |t, v| { let y = t.mean_rows(v[0])?; weighted_sum(t, y) }, vec![vec![4, 3]], (-2.0, 2.0)),
        ("slice_cols", |t, v| { let y = t.slice_cols(v[0], 1, 2)?; weighted_sum(t, y) }, vec![vec![3, 4]], (-2.0, 2.0)),
        ("slice_rows", |t, v| { let y = t.slice_rows(v[0], 1, 2)?; weighted_sum(t, y) }, vec![vec![4, 3]], (-2.0, 2.0)),
        ("concat_rows", |t, v| { let y = t.concat_rows(&[v[0], v[1], v[0]])?; weighted_sum(t, y) }, vec![vec![2, 3], vec![1, 3]], (-2.0, 2.0)),
        ("concat_cols", |t, v| { let y = t.concat_cols(&[v[0], v[1]])?; weighted_sum(t, y) }, vec![vec![2, 3], vec![2, 2]], (-2.0, 2.0)),
        ("gather_rows", |t, v| { let y = t.gather_rows(v[0], &[2, 0, 2, 1])?; weighted_sum(t, y) }, vec![vec![3, 2]], (-2.0, 2.0)),
        ("complex_mul", |t, v| { let y = t.complex_mul(v[0], v[1])?; weighted_sum(t, y) }, vec![vec![3, 2], vec![3, 2]], (-2.0, 2.0)),
        ("abs2", |t, v| { let y = t.abs2(v[0])?; weighted_sum(t, y) }, vec![vec![3, 2]], (-2.0, 2.0)),
        ("complex_exp", |t, v| { let y = t.complex_exp(v[0])?; weighted_sum(t, y) }, vec![vec![3, 2]], (-1.0, 1.0)),
    ]
}

#[test]
fn every_op_passes_grad_check_on_random_instances() {
    let mut r = rng::seeded(11);
    for (name, build, shapes, (lo, hi)) in op_cases() {
        for _ in 0..100 {
            let xs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut r, s, lo, hi)).collect();
            let err = grad_check_many(build, &xs, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut r = rng::seeded(5);
    let a = rand_tensor(&mut r, &[4, 6], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[6, 3], -1.0, 1.0);
    let run = || {
        let mut t = Tape::new();
        let va = t.leaf(a.clone());
        let vb = t.leaf(b.clone());
        let m = t.matmul(va, vb).unwrap();
        let s = t.softmax(m).unwrap();
        let l = t.log(s).unwrap();
        let loss = t.mean(l).unwrap();
        let g = t.backward(loss).unwrap();
        (g.wrt(va), g.wrt(vb))
    };
    let (g1, g2) = (run(), run());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&g1.0), bits(&g2.0));
    assert_eq!(bits(&g1.1), bits(&g2.1));
}

struct Cube;

impl BackwardRule for Cube {
    fn name(&self) -> &'static str {
        "cube"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool], gi: &mut [Tensor]) {
        if needs[0] {
            for ((g, x), gy) in gi[0].data_mut().iter_mut().zip(inputs[0].data()).zip(grad.data()) {
                *g += 3.0 * x * x * gy;
            }
        }
    }
}

#[test]
fn custom_rule_is_wired_into_backward() {
    let err = grad_check(
        |t, x| {
            let v: Vec<f64> = t.value(x).data().iter().map(|v| v * v * v).collect();
            let out = Tensor::new(t.shape(x), v)?;
            let y = t.custom(&[x], out, Box::new(Cube))?;
            weighted_sum(t, y)
        },
        &Tensor::vector(vec![0.3, -1.2, 2.0]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}
