use std::sync::Arc;

use super::tape::{Op, Tape, Var};
use super::{dim_err, Result, TensorError};

/// Splits a shape around `axis` into (outer, axis length, inner) strides.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Quaternion (w, x, y, z) to row-major rotation matrix, using the
/// unit-norm form.
pub(crate) fn quat_rotation(q: &[f64]) -> [f64; 9] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

/// d(rotation entry)/d(w, x, y, z) for [`quat_rotation`], row-major entries.
fn quat_rotation_jacobian(q: &[f64]) -> [[f64; 4]; 9] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [0.0, 0.0, -4.0 * y, -4.0 * z],
        [-2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w],
        [2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x],
        [2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w],
        [0.0, -4.0 * x, 0.0, -4.0 * z],
        [-2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y],
        [-2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x],
        [2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y],
        [0.0, -4.0 * x, -4.0 * y, 0.0],
    ]
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => dim_err(op, format!("expected a matrix, got shape {s:?}")),
        }
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, op, &[x])
    }

    /// Copy of `x` that gradients do not flow through.
    pub fn detach(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).to_vec();
        self.push(shape, value, Op::Leaf, &[])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return dim_err("matmul", format!("inner dimensions {k} and {k2} differ"));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                row.iter_mut().zip(brow).for_each(|(c, b)| *c += aip * b);
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("add_row", x)?;
        if self.value(bias).len() != n {
            return dim_err("add_row", format!("bias {:?} for {m}x{n} input", self.shape(bias)));
        }
        let (xv, bv) = (self.value(x), self.value(bias));
        let value = xv.iter().enumerate().map(|(i, v)| v + bv[i % n]).collect();
        Ok(self.push(vec![m, n], value, Op::AddRow { x, bias }, &[x, bias]))
    }

    /// Adds a per-channel bias to a `c×h×w` feature map.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || self.value(bias).len() != shape[0] {
            return dim_err("add_channel", format!("bias {:?} for map {shape:?}", self.shape(bias)));
        }
        let plane = shape[1] * shape[2];
        let (xv, bv) = (self.value(x), self.value(bias));
        let value = xv.iter().enumerate().map(|(i, v)| v + bv[i / plane]).collect();
        Ok(self.push(shape, value, Op::AddChannel { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    /// Natural log. Every input must be strictly positive; callers clamp first.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|&&v| !(v > 0.0)) {
            return Err(TensorError::Domain { op: "log", detail: format!("input {bad} is not positive") });
        }
        Ok(self.map(x, Op::Log(x), f64::ln))
    }

    /// `base^x` elementwise for a positive scalar base.
    pub fn pow_base(&mut self, base: f64, x: Var) -> Result<Var> {
        if !(base > 0.0) {
            return Err(TensorError::Domain { op: "pow_base", detail: format!("base {base} is not positive") });
        }
        let ln_base = base.ln();
        Ok(self.map(x, Op::PowBase { x, ln_base }, |v| (v * ln_base).exp()))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, Op::Abs(x), f64::abs)
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        self.map(x, Op::ClampMin { x, min }, |v| v.max(min))
    }

    /// 2D cross-correlation of a `c_in×h×w` map with `c_out×c_in×k×k` kernels.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return dim_err("conv2d", format!("input {xs:?}, kernels {ks:?}"));
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (co, kci, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kci != ci {
            return dim_err("conv2d", format!("kernels expect {kci} channels, input has {ci}"));
        }
        if kh != kw || kh % 2 == 0 {
            return dim_err("conv2d", format!("kernel must be square and odd, got {kh}x{kw}"));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return dim_err("conv2d", format!("stride {stride}, pad {pad} invalid for {h}x{w}"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let (xv, kv) = (self.value(x), self.value(k));
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            let oplane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            for c in 0..ci {
                let iplane = &xv[c * h * w..(c + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = kv[((o * ci + c) * kh + ky) * kw + kx];
                        let (ylo, yhi) = valid_range(h, oh, stride, ky, pad);
                        let (xlo, xhi) = valid_range(w, ow, stride, kx, pad);
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - pad;
                            let irow = &iplane[iy * w..(iy + 1) * w];
                            let orow = &mut oplane[oy * ow + xlo..oy * ow + xhi];
                            if stride == 1 {
                                let ir = &irow[xlo + kx - pad..xhi + kx - pad];
                                orow.iter_mut().zip(ir).for_each(|(ov, iv)| *ov += wgt * iv);
                            } else {
                                for (j, ov) in orow.iter_mut().enumerate() {
                                    *ov += wgt * irow[(xlo + j) * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(vec![co, oh, ow], out, Op::Conv2d { x, k, stride, pad }, &[x, k]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![m], Op::Mean(x), &[x])
    }

    fn reduce_shape(&self, op: &'static str, x: Var, axis: usize) -> Result<(Vec<usize>, usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return dim_err(op, format!("axis {axis} out of range for {shape:?}"));
        }
        let (outer, dim, inner) = split_axis(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        Ok((out_shape, outer, dim, inner))
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, outer, dim, inner) = self.reduce_shape("sum_axis", x, axis)?;
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                for i in 0..inner {
                    out[o * inner + i] += xv[(o * dim + d) * inner + i];
                }
            }
        }
        Ok(self.push(shape, out, Op::SumAxis { x, axis }, &[x]))
    }

    /// Mean along `axis`, keeping it with length 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, outer, dim, inner) = self.reduce_shape("mean_axis", x, axis)?;
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                for i in 0..inner {
                    out[o * inner + i] += xv[(o * dim + d) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= dim as f64);
        Ok(self.push(shape, out, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Max along `axis`; the first maximal element wins ties and receives
    /// the whole gradient.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, outer, dim, inner) = self.reduce_shape("max_axis", x, axis)?;
        let xv = self.value(x);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                for i in 0..inner {
                    let v = xv[(o * dim + d) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = d;
                    }
                }
            }
        }
        Ok(self.push(shape, out, Op::MaxAxis { x, axis, argmax }, &[x]))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return dim_err("concat", format!("{s:?} does not match {base:?} off axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return dim_err("reshape", format!("{:?} into {shape:?}", self.shape(x)));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape, value, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", x)?;
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(x), &[x]))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if rows.is_empty() {
            return dim_err("gather_rows", "empty index list");
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= shape[0]) {
            return dim_err("gather_rows", format!("row {r} out of range for {shape:?}"));
        }
        let stride: usize = shape[1..].iter().product();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            out.extend_from_slice(&xv[r * stride..(r + 1) * stride]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        Ok(self.push(out_shape, out, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Repeats a single row `n` times, giving an `n×d` matrix.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let d = self.value(x).len();
        let s = self.shape(x);
        let is_row = s.len() == 1 || (s.len() == 2 && s[0] == 1);
        if !is_row || n == 0 {
            return dim_err("broadcast_rows", format!("cannot repeat {s:?} {n} times"));
        }
        let row = self.value(x).to_vec();
        let out = row.iter().copied().cycle().take(n * d).collect();
        Ok(self.push(vec![n, d], out, Op::BroadcastRows(x), &[x]))
    }

    /// Scales every row of a matrix to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("normalize_rows", x)?;
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(TensorError::Domain { op: "normalize_rows", detail: format!("row {i} has zero norm") });
            }
            out[i * n..(i + 1) * n].iter_mut().zip(row).for_each(|(o, v)| *o = v / norm);
            norms.push(norm);
        }
        Ok(self.push(vec![m, n], out, Op::NormalizeRows { x, norms }, &[x]))
    }

    /// Mean distance between a model point set under each row's pose and a
    /// fixed target point set.
    ///
    /// `q` is `n×4` (w, x, y, z, expected unit), `t` is `n×3`. Output is `n×1`
    /// with row i equal to `(1/M) Σ_j ‖R(q_i) model_j + t_i − target_j‖`.
    pub fn pose_distance(
        &mut self,
        q: Var,
        t: Var,
        model: Arc<[[f64; 3]]>,
        target: Arc<[[f64; 3]]>,
    ) -> Result<Var> {
        let (n, qd) = self.matrix_dims("pose_distance", q)?;
        let (n2, td) = self.matrix_dims("pose_distance", t)?;
        if qd != 4 || td != 3 || n != n2 {
            return dim_err("pose_distance", format!("q {:?}, t {:?}", self.shape(q), self.shape(t)));
        }
        if model.is_empty() || model.len() != target.len() {
            return dim_err("pose_distance", format!("model {} vs target {} points", model.len(), target.len()));
        }
        let (qv, tv) = (self.value(q), self.value(t));
        let inv_m = 1.0 / model.len() as f64;
        let out = (0..n)
            .map(|i| {
                let r = quat_rotation(&qv[i * 4..i * 4 + 4]);
                let ti = &tv[i * 3..i * 3 + 3];
                model
                    .iter()
                    .zip(target.iter())
                    .map(|(x, y)| {
                        let d = rigid_residual(&r, ti, x, y);
                        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                    })
                    .sum::<f64>()
                    * inv_m
            })
            .collect();
        Ok(self.push(vec![n, 1], out, Op::PoseDistance { q, t, model, target }, &[q, t]))
    }

    /// Gradient contributions of node `i` to its inputs, given its output
    /// gradient `g`.
    pub(crate) fn backward_rule(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (val(*a), val(*b));
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        let arp = av[r * k + p];
                        if arp != 0.0 {
                            db[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(d, gg)| *d += arp * gg);
                        }
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::AddRow { x, bias } => {
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                g.iter().enumerate().for_each(|(k, v)| db[k % n] += v);
                vec![(*x, g.to_vec()), (*bias, db)]
            }
            Op::AddChannel { x, bias } => {
                let c = self.value(*bias).len();
                let plane = g.len() / c;
                let db = (0..c).map(|ch| g[ch * plane..(ch + 1) * plane].iter().sum()).collect();
                vec![(*x, g.to_vec()), (*bias, db)]
            }
            Op::Scale(x, s) => vec![(*x, g.iter().map(|v| v * s).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::Relu(x) => {
                let dx = g.iter().zip(val(*x)).map(|(gg, v)| if *v > 0.0 { *gg } else { 0.0 }).collect();
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let dx = g.iter().zip(&node.value).map(|(gg, y)| gg * y * (1.0 - y)).collect();
                vec![(*x, dx)]
            }
            Op::Log(x) => vec![(*x, g.iter().zip(val(*x)).map(|(gg, v)| gg / v).collect())],
            Op::PowBase { x, ln_base } => {
                vec![(*x, g.iter().zip(&node.value).map(|(gg, y)| gg * y * ln_base).collect())]
            }
            Op::Abs(x) => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gg, v)| if *v > 0.0 { *gg } else if *v < 0.0 { -gg } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::ClampMin { x, min } => {
                let dx = g.iter().zip(val(*x)).map(|(gg, v)| if v >= min { *gg } else { 0.0 }).collect();
                vec![(*x, dx)]
            }
            Op::Conv2d { x, k, stride, pad } => self.conv2d_backward(*x, *k, *stride, *pad, &node.shape, g),
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Mean(x) => {
                let len = self.value(*x).len();
                vec![(*x, vec![g[0] / len as f64; len])]
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) { 1.0 / dim as f64 } else { 1.0 };
                let mut dx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        for ii in 0..inner {
                            dx[(o * dim + d) * inner + ii] = g[o * inner + ii] * scale;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let mut dx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for ii in 0..inner {
                        let d = argmax[o * inner + ii];
                        dx[(o * dim + d) * inner + ii] = g[o * inner + ii];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                let mut result = Vec::with_capacity(parts.len());
                for &p in parts {
                    let d = self.shape(p)[*axis];
                    let mut dp = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        dp.extend_from_slice(&g[start..start + d * inner]);
                    }
                    offset += d;
                    result.push((p, dp));
                }
                result
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Transpose(x) => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] = g[c * m + r];
                    }
                }
                vec![(*x, dx)]
            }
            Op::GatherRows { x, rows } => {
                let stride: usize = self.shape(*x)[1..].iter().product();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    dx[r * stride..(r + 1) * stride]
                        .iter_mut()
                        .zip(&g[k * stride..(k + 1) * stride])
                        .for_each(|(a, b)| *a += b);
                }
                vec![(*x, dx)]
            }
            Op::BroadcastRows(x) => {
                let d = self.value(*x).len();
                let mut dx = vec![0.0; d];
                g.iter().enumerate().for_each(|(k, v)| dx[k % d] += v);
                vec![(*x, dx)]
            }
            Op::NormalizeRows { x, norms } => {
                let n = node.shape[1];
                let mut dx = vec![0.0; g.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let y = &node.value[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] = (gr[c] - y[c] * dot) / norm;
                    }
                }
                vec![(*x, dx)]
            }
            Op::PoseDistance { q, t, model, target } => {
                let n = node.shape[0];
                let (qv, tv) = (val(*q), val(*t));
                let inv_m = 1.0 / model.len() as f64;
                let mut dq = vec![0.0; n * 4];
                let mut dt = vec![0.0; n * 3];
                for i in 0..n {
                    let qi = &qv[i * 4..i * 4 + 4];
                    let r = quat_rotation(qi);
                    let ti = &tv[i * 3..i * 3 + 3];
                    // Accumulate dL/dR (3x3) and dL/dt for this row.
                    let mut dr = [0.0; 9];
                    let scale = g[i] * inv_m;
                    for (x, y) in model.iter().zip(target.iter()) {
                        let d = rigid_residual(&r, ti, x, y);
                        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                        if len == 0.0 {
                            continue;
                        }
                        for a in 0..3 {
                            let u = scale * d[a] / len;
                            dt[i * 3 + a] += u;
                            for b in 0..3 {
                                dr[a * 3 + b] += u * x[b];
                            }
                        }
                    }
                    let jac = quat_rotation_jacobian(qi);
                    for (e, row) in jac.iter().enumerate() {
                        for c in 0..4 {
                            dq[i * 4 + c] += dr[e] * row[c];
                        }
                    }
                }
                vec![(*q, dq), (*t, dt)]
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
        out_shape: &[usize],
        g: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (ci, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let (co, kk) = (self.shape(k)[0], self.shape(k)[2]);
        let (oh, ow) = (out_shape[1], out_shape[2]);
        let (xv, kv) = (self.value(x), self.value(k));
        let need_dx = self.requires_grad(x);
        let mut dx = vec![0.0; ci * h * w];
        let mut dk = vec![0.0; kv.len()];
        for o in 0..co {
            let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
            for c in 0..ci {
                let base = c * h * w;
                for ky in 0..kk {
                    for kx in 0..kk {
                        let widx = ((o * ci + c) * kk + ky) * kk + kx;
                        let wgt = kv[widx];
                        let mut acc = 0.0;
                        let (ylo, yhi) = valid_range(h, oh, stride, ky, pad);
                        let (xlo, xhi) = valid_range(w, ow, stride, kx, pad);
                        for oy in ylo..yhi {
                            let row = base + (oy * stride + ky - pad) * w;
                            let grow = &gplane[oy * ow + xlo..oy * ow + xhi];
                            if stride == 1 {
                                let start = row + xlo + kx - pad;
                                let len = xhi - xlo;
                                acc += grow.iter().zip(&xv[start..start + len]).map(|(a, b)| a * b).sum::<f64>();
                                if need_dx {
                                    dx[start..start + len].iter_mut().zip(grow).for_each(|(d, gv)| *d += gv * wgt);
                                }
                            } else {
                                for (j, gv) in grow.iter().enumerate() {
                                    let ix = row + (xlo + j) * stride + kx - pad;
                                    acc += gv * xv[ix];
                                    if need_dx {
                                        dx[ix] += gv * wgt;
                                    }
                                }
                            }
                        }
                        dk[widx] += acc;
                    }
                }
            }
        }
        vec![(x, dx), (k, dk)]
    }
}

/// Output positions `lo..hi` whose tap `offset` lands inside `0..len_in`.
fn valid_range(len_in: usize, len_out: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    let hi = if len_in + pad > offset { ((len_in + pad - offset - 1) / stride + 1).min(len_out) } else { 0 };
    (lo.min(hi), hi)
}

#[inline]
fn rigid_residual(r: &[f64; 9], t: &[f64], x: &[f64; 3], y: &[f64; 3]) -> [f64; 3] {
    [
        r[0] * x[0] + r[1] * x[1] + r[2] * x[2] + t[0] - y[0],
        r[3] * x[0] + r[4] * x[1] + r[5] * x[2] + t[1] - y[1],
        r[6] * x[0] + r[7] * x[1] + r[8] * x[2] + t[2] - y[2],
    ]
}
