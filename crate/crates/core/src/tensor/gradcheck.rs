//! Central finite-difference oracles for verifying backward rules.
//!
//! Numeric gradients come from forward evaluations only.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Result, Tape, Tensor, Var};

/// Default perturbation for central differences in 64-bit.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude below which relative error degrades to absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe)?;
        probe[i] = orig - step;
        let minus = f(&probe)?;
        probe[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| relative_error(*a, *n)).fold(0.0, f64::max)
}

/// Per-tensor outcome of a parameter gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
}

/// Checks analytic gradients (one vector per tensor, in `params` order)
/// against central differences of `loss` over every parameter element.
pub fn check_params<F>(params: &ParamStore, analytic: &[Vec<f64>], step: f64, mut loss: F) -> Result<Vec<TensorCheck>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut probe = params.clone();
    let names: Vec<String> = params.names().into_iter().map(String::from).collect();
    let mut out = Vec::with_capacity(names.len());
    for (name, grad) in names.iter().zip(analytic) {
        let numel = params.get(name).map(|t| t.numel()).unwrap_or(0);
        let mut worst: f64 = 0.0;
        for i in 0..numel {
            let orig = probe.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let plus = loss(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let minus = loss(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad[i], numeric));
        }
        out.push(TensorCheck { name: name.clone(), numel, max_rel_error: worst });
    }
    Ok(out)
}

pub(crate) fn random_values(rng: &mut ChaCha8Rng, n: usize, positive: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.5);
            if positive || rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Gradient check of `build` at random inputs: the scalar loss is a fixed
/// random weighting of the op output. Returns the worst relative error.
pub fn op_check<F>(shapes: &[Vec<usize>], positive: bool, seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> =
        shapes.iter().map(|s| random_values(&mut rng, s.iter().product(), positive)).collect();
    let eval = |vals: &[Vec<f64>], weights: Option<&[f64]>| -> Result<(Tape, Vec<Var>, Var, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(vals)
            .map(|(s, v)| Ok(tape.param(&Tensor::new(s.clone(), v.clone())?)))
            .collect::<Result<_>>()?;
        let out = build(&mut tape, &vars)?;
        let n = tape.value(out).len();
        let w = match weights {
            Some(w) => w.to_vec(),
            None => {
                let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                (0..n).map(|_| wr.gen_range(-1.0..1.0)).collect()
            }
        };
        let wv = tape.constant(tape.shape(out).to_vec(), w.clone())?;
        let prod = tape.mul(out, wv)?;
        let loss = tape.sum(prod);
        Ok((tape, vars, loss, w))
    };
    let (mut tape, vars, loss, weights) = eval(&inputs, None)?;
    tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let numeric = central_difference(
            |x| {
                let mut vals = inputs.clone();
                vals[k] = x.to_vec();
                let (t, _, l, _) = eval(&vals, Some(&weights))?;
                Ok(t.scalar(l))
            },
            &inputs[k],
            DEFAULT_STEP,
        )?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Every differentiable op, checked at seeded random inputs. Returns the
/// worst relative error per op.
pub fn op_suite() -> Result<Vec<(&'static str, f64)>> {
    let s = vec![vec![4, 3]];
    let s2 = vec![vec![4, 3], vec![4, 3]];
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let model: Arc<[[f64; 3]]> =
        (0..20).map(|_| [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)]).collect();
    let target: Arc<[[f64; 3]]> =
        (0..20).map(|_| [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(0.4..0.6)]).collect();
    Ok(vec![
        ("matmul", op_check(&[vec![3, 4], vec![4, 2]], false, 1, |t, v| t.matmul(v[0], v[1]))?),
        ("relu", op_check(&s, false, 2, |t, v| Ok(t.relu(v[0])))?),
        ("sigmoid", op_check(&s, false, 3, |t, v| Ok(t.sigmoid(v[0])))?),
        ("log", op_check(&s, true, 4, |t, v| t.log(v[0]))?),
        ("pow_base", op_check(&s, false, 5, |t, v| t.pow_base(0.5, v[0]))?),
        ("abs", op_check(&s, false, 6, |t, v| Ok(t.abs(v[0])))?),
        ("clamp_min", op_check(&s, false, 7, |t, v| Ok(t.clamp_min(v[0], 0.05)))?),
        ("scale", op_check(&s, false, 8, |t, v| Ok(t.scale(v[0], -2.5)))?),
        ("add_scalar", op_check(&s, false, 9, |t, v| Ok(t.add_scalar(v[0], 3.0)))?),
        ("add", op_check(&s2, false, 10, |t, v| t.add(v[0], v[1]))?),
        ("sub", op_check(&s2, false, 11, |t, v| t.sub(v[0], v[1]))?),
        ("mul", op_check(&s2, false, 12, |t, v| t.mul(v[0], v[1]))?),
        ("add_row", op_check(&[vec![4, 3], vec![3]], false, 13, |t, v| t.add_row(v[0], v[1]))?),
        ("add_channel", op_check(&[vec![2, 3, 3], vec![2]], false, 14, |t, v| t.add_channel(v[0], v[1]))?),
        ("conv2d", op_check(&[vec![2, 5, 5], vec![3, 2, 3, 3]], false, 15, |t, v| t.conv2d(v[0], v[1], 1, 1))?),
        ("conv2d_stride2", op_check(&[vec![2, 6, 5], vec![2, 2, 3, 3]], false, 16, |t, v| t.conv2d(v[0], v[1], 2, 1))?),
        ("sum", op_check(&[vec![3, 4]], false, 20, |t, v| Ok(t.sum(v[0])))?),
        ("mean", op_check(&[vec![3, 4]], false, 21, |t, v| Ok(t.mean(v[0])))?),
        ("sum_axis", op_check(&[vec![2, 3, 4]], false, 22, |t, v| t.sum_axis(v[0], 1))?),
        ("mean_axis", op_check(&[vec![5, 3]], false, 23, |t, v| t.mean_axis(v[0], 0))?),
        ("max_axis", op_check(&[vec![4, 6]], false, 24, |t, v| t.max_axis(v[0], 1))?),
        ("concat_rows", op_check(&[vec![2, 3], vec![4, 3]], false, 25, |t, v| t.concat(&[v[0], v[1]], 0))?),
        ("concat_cols", op_check(&[vec![3, 2], vec![3, 5]], false, 26, |t, v| t.concat(&[v[0], v[1]], 1))?),
        ("reshape", op_check(&[vec![2, 6]], false, 27, |t, v| t.reshape(v[0], vec![3, 4]))?),
        ("transpose", op_check(&[vec![2, 5]], false, 28, |t, v| t.transpose(v[0]))?),
        ("gather_rows", op_check(&[vec![4, 3]], false, 29, |t, v| t.gather_rows(v[0], &[3, 0, 3, 1]))?),
        ("broadcast_rows", op_check(&[vec![1, 4]], false, 30, |t, v| t.broadcast_rows(v[0], 5))?),
        ("normalize_rows", op_check(&[vec![5, 4]], false, 31, |t, v| t.normalize_rows(v[0]))?),
        (
            "pose_distance",
            op_check(&[vec![6, 4], vec![6, 3]], false, 41, |t, v| {
                let q = t.normalize_rows(v[0])?;
                t.pose_distance(q, v[1], model.clone(), target.clone())
            })?,
        ),
        ("pose_distance_raw", op_check(&[vec![3, 4], vec![3, 3]], false, 42, |t, v| t.pose_distance(v[0], v[1], model.clone(), target.clone()))?),
        ("leaf_reuse", op_check(&[vec![3, 3]], false, 43, |t, v| t.mul(v[0], v[0]))?),
    ])
}
