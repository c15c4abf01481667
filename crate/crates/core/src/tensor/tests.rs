use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{op_check, op_suite, random_values};
use super::*;

const OP_TOL: f64 = 1e-4;

fn op_gradcheck<F>(shapes: &[Vec<usize>], positive: bool, seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    op_check(shapes, positive, seed, build).unwrap()
}

#[test]
fn matmul_identity_and_orthogonal_rows() {
    let mut t = Tape::new();
    let i2 = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let p = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);

    let a = t.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let b = t.constant(vec![2, 1], vec![0.0, 5.0]).unwrap();
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.shape(c), &[1, 1]);
    assert_eq!(t.value(c), &[0.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut t = Tape::new();
    let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    assert!(matches!(t.matmul(a, b), Err(TensorError::Dimension { op: "matmul", .. })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let err = op_gradcheck(&[vec![3, 4], vec![4, 2]], false, 1, |t, v| t.matmul(v[0], v[1]));
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn pointwise_examples() {
    let mut t = Tape::new();
    let x = t.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
    let r = t.relu(x);
    assert_eq!(t.value(r), &[0.0, 0.0, 2.0]);

    let z = t.constant(vec![1], vec![0.0]).unwrap();
    let p = t.pow_base(0.5, z).unwrap();
    assert_eq!(t.value(p), &[1.0]);

    let mut t = Tape::new();
    let x = t.param(&Tensor::scalar(0.0));
    let s = t.sigmoid(x);
    t.backward(s).unwrap();
    assert!((t.grad(x).unwrap()[0] - 0.25).abs() < 1e-15);
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let mut t = Tape::new();
    let x = t.constant(vec![2], vec![1.0, 0.0]).unwrap();
    assert!(matches!(t.log(x), Err(TensorError::Domain { op: "log", .. })));
    let y = t.constant(vec![1], vec![-2.0]).unwrap();
    assert!(t.log(y).is_err());
}

#[test]
fn every_op_passes_the_suite() {
    let suite = op_suite().unwrap();
    assert_eq!(suite.len(), 31);
    for (name, err) in suite {
        assert!(err < OP_TOL, "{name}: relative error {err}");
    }
}

#[test]
fn conv2d_examples() {
    let mut t = Tape::new();
    let data: Vec<f64> = (0..9).map(f64::from).collect();
    let x = t.constant(vec![1, 3, 3], data.clone()).unwrap();
    let k = t.constant(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    let y = t.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 3, 3]);
    assert_eq!(t.value(y), data.as_slice());

    let ones = t.constant(vec![1, 3, 3], vec![1.0; 9]).unwrap();
    let k3 = t.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let y = t.conv2d(ones, k3, 1, 1).unwrap();
    assert_eq!(t.value(y)[4], 9.0);
    assert_eq!(t.value(y)[0], 4.0);
}

#[test]
fn conv2d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (stride, pad, kk, h, w) in [(1, 1, 3, 5, 7), (2, 1, 3, 6, 5), (2, 2, 5, 7, 4), (3, 0, 1, 5, 5), (1, 0, 3, 4, 3)] {
        let (ci, co) = (2, 3);
        let xv = random_values(&mut rng, ci * h * w, false);
        let kv = random_values(&mut rng, co * ci * kk * kk, false);
        let mut t = Tape::new();
        let x = t.constant(vec![ci, h, w], xv.clone()).unwrap();
        let k = t.constant(vec![co, ci, kk, kk], kv.clone()).unwrap();
        let y = t.conv2d(x, k, stride, pad).unwrap();
        let (oh, ow) = ((h + 2 * pad - kk) / stride + 1, (w + 2 * pad - kk) / stride + 1);
        assert_eq!(t.shape(y), &[co, oh, ow]);
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for ky in 0..kk {
                            for kx in 0..kk {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if (0..h as i64).contains(&iy) && (0..w as i64).contains(&ix) {
                                    s += kv[((o * ci + c) * kk + ky) * kk + kx] * xv[(c * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    let got = t.value(y)[(o * oh + oy) * ow + ox];
                    assert!((got - s).abs() < 1e-12, "stride {stride} pad {pad}: {got} vs {s}");
                }
            }
        }
    }
}

#[test]
fn conv2d_channel_mismatch_is_dimension_error() {
    let mut t = Tape::new();
    let x = t.constant(vec![2, 3, 3], vec![0.0; 18]).unwrap();
    let k = t.constant(vec![1, 3, 3, 3], vec![0.0; 27]).unwrap();
    assert!(matches!(t.conv2d(x, k, 1, 1), Err(TensorError::Dimension { op: "conv2d", .. })));
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    let err = op_gradcheck(&[vec![2, 5, 5], vec![3, 2, 3, 3]], false, 15, |t, v| t.conv2d(v[0], v[1], 1, 1));
    assert!(err < 1e-5, "relative error {err}");
    let err = op_gradcheck(&[vec![2, 6, 5], vec![2, 2, 3, 3]], false, 16, |t, v| t.conv2d(v[0], v[1], 2, 1));
    assert!(err < 1e-5, "strided: relative error {err}");
}

#[test]
fn reduce_examples() {
    let mut t = Tape::new();
    let x = t.param(&Tensor::new(vec![3], vec![2.0, 4.0, 6.0]).unwrap());
    let m = t.mean_axis(x, 0).unwrap();
    assert_eq!(t.value(m), &[4.0]);

    let a = t.constant(vec![2], vec![1.0, 2.0]).unwrap();
    let b = t.constant(vec![1], vec![3.0]).unwrap();
    let c = t.concat(&[a, b], 0).unwrap();
    assert_eq!(t.value(c), &[1.0, 2.0, 3.0]);

    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn max_routes_gradient_to_argmax() {
    let mut t = Tape::new();
    let x = t.param(&Tensor::new(vec![2, 3], vec![1.0, 5.0, 2.0, 7.0, 0.0, 3.0]).unwrap());
    let m = t.max_axis(x, 1).unwrap();
    assert_eq!(t.value(m), &[5.0, 7.0]);
    let s = t.sum(m);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn reduce_on_bad_axis_is_dimension_error() {
    let mut t = Tape::new();
    let x = t.constant(vec![2, 2], vec![0.0; 4]).unwrap();
    assert!(t.mean_axis(x, 2).is_err());
    assert!(t.concat(&[], 0).is_err());
}

#[test]
fn pose_distance_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let model: Arc<[[f64; 3]]> =
        (0..20).map(|_| [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)]).collect();
    let target: Arc<[[f64; 3]]> =
        (0..20).map(|_| [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(0.4..0.6)]).collect();
    let err = op_gradcheck(&[vec![6, 4], vec![6, 3]], false, 41, |t, v| {
        let q = t.normalize_rows(v[0])?;
        t.pose_distance(q, v[1], model.clone(), target.clone())
    });
    assert!(err < OP_TOL, "relative error {err}");
    // The raw op without normalization is checked against its own formula too.
    let err = op_gradcheck(&[vec![3, 4], vec![3, 3]], false, 42, |t, v| {
        t.pose_distance(v[0], v[1], model.clone(), target.clone())
    });
    assert!(err < OP_TOL, "relative error {err}");
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.param(&Tensor::scalar(3.0));
    let sq = t.mul(x, x).unwrap();
    t.backward(sq).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[6.0]);

    let mut t = Tape::new();
    let x = t.param(&Tensor::scalar(0.0));
    let s = t.sigmoid(x);
    let l = t.log(s).unwrap();
    t.backward(l).unwrap();
    assert!((t.grad(x).unwrap()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn backward_needs_scalar() {
    let mut t = Tape::new();
    let x = t.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let y = t.scale(x, 2.0);
    assert!(matches!(t.backward(y), Err(TensorError::Contract(_))));
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut t = Tape::new();
    let x = t.param(&Tensor::scalar(2.0));
    let y = t.mul(x, x).unwrap();
    t.backward(y).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[8.0]);
    t.zero_grad();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[4.0]);
}

#[test]
fn constants_never_receive_gradients() {
    let mut t = Tape::new();
    let x = t.param(&Tensor::scalar(2.0));
    let c = t.constant(vec![1], vec![5.0]).unwrap();
    let y = t.mul(x, c).unwrap();
    let d = t.detach(y);
    let z = t.add(y, d).unwrap();
    t.backward(z).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[5.0]);
    assert!(t.grad(c).is_none());
    assert!(t.grad(d).is_none());
    assert!(!t.requires_grad(c));

    let mut tensor = Tensor::scalar(1.0);
    tensor.accumulate_grad(&[1.0]).unwrap();
    assert!(tensor.grad().is_none());
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let xs = random_values(&mut rng, 2 * 6 * 6, false);
        let ks = random_values(&mut rng, 4 * 2 * 3 * 3, false);
        let mut t = Tape::new();
        let x = t.param(&Tensor::new(vec![2, 6, 6], xs).unwrap());
        let k = t.param(&Tensor::new(vec![4, 2, 3, 3], ks).unwrap());
        let y = t.conv2d(x, k, 1, 1).unwrap();
        let y = t.sigmoid(y);
        let l = t.mean(y);
        t.backward(l).unwrap();
        let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        (bits(t.value(l)), bits(t.grad(x).unwrap()), bits(t.grad(k).unwrap()))
    };
    assert_eq!(run(), run());
}

#[test]
fn injected_fault_breaks_the_gradient_check() {
    let mut t = Tape::with_fault(Fault { op: OpKind::Relu, factor: 1.5 });
    let x = t.param(&Tensor::scalar(2.0));
    let r = t.relu(x);
    t.backward(r).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.5]);
}

#[test]
fn tensor_shape_invariant_is_enforced() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![0], vec![]).is_err());
    let t = Tensor::zeros(vec![2, 3]).unwrap();
    assert_eq!(t.numel(), 6);
}
