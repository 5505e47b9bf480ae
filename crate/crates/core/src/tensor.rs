//! Dense row-major `f64` tensors and the primitive kernels the rest of the
//! crate is assembled from.
//!
//! Every kernel is a pure function: inputs are borrowed immutably and a fresh
//! tensor is returned. Loop order is fixed so identical inputs always produce
//! bitwise-identical outputs. There is no implicit broadcasting; a shape
//! disagreement is an [`Error::Shape`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance floor used by [`batch_norm`].
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Spatial geometry of one block of feature maps: `h × w × c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape3 {
    pub fn new(h: usize, w: usize, c: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidShape {
                op: "shape3",
                shape: vec![h, w, c],
                reason: "spatial extents must be positive",
            });
        }
        if c < 2 || c % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "shape3",
                shape: vec![h, w, c],
                reason: "channel count must be even and at least 2",
            });
        }
        Ok(Shape3 { h, w, c })
    }

    /// Number of spatial positions `h·w`.
    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn half_channels(&self) -> usize {
        self.c / 2
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: "extents must be positive",
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: "element count does not match data length",
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor by evaluating `f` at every flat (row-major) index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row and column counts of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::InvalidShape {
                op,
                shape: self.shape.clone(),
                reason: "expected a rank-2 tensor",
            }),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on unequal shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// In-place `self += other`; used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

/// `a · b` for `a: m×k`, `b: k×n`. Each output element sums over `k` in
/// ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`, without materialising the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", &a.shape, &b.shape));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out.push(acc);
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2("matmul_tn")?;
    let (k2, n) = b.dims2("matmul_tn")?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a.data[p * m..(p + 1) * m];
        let b_row = &b.data[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("softmax_rows")?;
    if !a.is_finite() {
        return Err(Error::NonFinite { op: "softmax_rows" });
    }
    let mut out = a.data.clone();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = 1.0 / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: out,
    })
}

/// Kernel-size-1 convolution over positions: every row of `x` is mapped
/// through `w` independently.
pub fn position_linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (_, c_in) = x.dims2("position_linear")?;
    let (w_in, _) = w.dims2("position_linear")?;
    if c_in != w_in {
        return Err(Error::shape("position_linear", &x.shape, &w.shape));
    }
    matmul(x, w)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "sub", |x, y| x - y)
}

/// Elementwise (Hadamard) product.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "hadamard", |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(sigmoid_scalar)
}

pub fn tanh(a: &Tensor) -> Tensor {
    a.map(f64::tanh)
}

pub fn exp(a: &Tensor) -> Tensor {
    a.map(f64::exp)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Reinterprets the row-major data under a new shape with the same element
/// count.
pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != a.len() || shape.iter().any(|&d| d == 0) {
        return Err(Error::shape("reshape", &a.shape, shape));
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data: a.data.clone(),
    })
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("transpose")?;
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(a.data[i * n + j]);
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// `(outer, extent, inner)` strides for iterating a tensor around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Mean over `axis`; the reduced axis is kept with extent 1.
pub fn reduce_mean(a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.rank() {
        return Err(Error::InvalidShape {
            op: "reduce_mean",
            shape: a.shape.clone(),
            reason: "axis out of range",
        });
    }
    let (outer, extent, inner) = axis_split(&a.shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for e in 0..extent {
            let base = (o * extent + e) * inner;
            for (d, &v) in dst.iter_mut().zip(&a.data[base..base + inner]) {
                *d += v;
            }
        }
    }
    let inv = 1.0 / extent as f64;
    for v in &mut out {
        *v *= inv;
    }
    let mut shape = a.shape.clone();
    shape[axis] = 1;
    Ok(Tensor { shape, data: out })
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::EmptySequence)?;
    if axis >= first.rank() {
        return Err(Error::InvalidShape {
            op: "concat",
            shape: first.shape.clone(),
            reason: "axis out of range",
        });
    }
    for p in &parts[1..] {
        let compatible = p.rank() == first.rank()
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(Error::shape("concat", &first.shape, &p.shape));
        }
    }
    let (outer, _, inner) = axis_split(&first.shape, axis);
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor { shape, data })
}

/// Rows `start..end` of a rank-2 tensor.
pub fn slice_rows(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (m, n) = a.dims2("slice_rows")?;
    if start >= end || end > m {
        return Err(Error::InvalidShape {
            op: "slice_rows",
            shape: a.shape.clone(),
            reason: "row range out of bounds",
        });
    }
    Ok(Tensor {
        shape: vec![end - start, n],
        data: a.data[start * n..end * n].to_vec(),
    })
}

/// Per-channel running statistics carried by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average towards the given batch statistics.
    pub fn blend(&self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) -> BnStats {
        let mix = |run: &[f64], batch: &[f64]| -> Vec<f64> {
            run.iter()
                .zip(batch)
                .map(|(r, b)| (1.0 - momentum) * r + momentum * b)
                .collect()
        };
        BnStats {
            mean: mix(&self.mean, batch_mean),
            var: mix(&self.var, batch_var),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with the running statistics.
    Infer,
}

/// Intermediate values of a batch-norm evaluation, kept for the backward
/// pass.
#[derive(Clone, Debug)]
pub(crate) struct BnParts {
    pub y: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

pub(crate) fn batch_norm_parts(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &BnStats,
    mode: BnMode,
) -> Result<BnParts> {
    let (rows, c) = x.dims2("batch_norm")?;
    if gamma.len() != c || beta.len() != c || stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::shape("batch_norm", &x.shape, &gamma.shape));
    }
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for i in 0..rows {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    for i in 0..rows {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut var {
        *s /= rows as f64;
    }
    let (use_mean, use_var) = match mode {
        BnMode::Train => (&mean, &var),
        BnMode::Infer => (&stats.mean, &stats.var),
    };
    let inv_std: Vec<f64> = use_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Vec::with_capacity(rows * c);
    let mut y = Vec::with_capacity(rows * c);
    for i in 0..rows {
        for (ch, v) in x.row(i).iter().enumerate() {
            let h = (v - use_mean[ch]) * inv_std[ch];
            xhat.push(h);
            y.push(gamma.data[ch] * h + beta.data[ch]);
        }
    }
    Ok(BnParts {
        y: Tensor {
            shape: vec![rows, c],
            data: y,
        },
        xhat: Tensor {
            shape: vec![rows, c],
            data: xhat,
        },
        inv_std,
        batch_mean: mean,
        batch_var: var,
    })
}

/// Batch normalisation of `x: N×C` over its rows with a learnable per-channel
/// scale `gamma` and shift `beta`.
///
/// Train mode normalises with batch statistics (biased variance) and returns
/// running statistics blended towards them by `momentum`; infer mode uses
/// `stats` and returns them unchanged.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &BnStats,
    mode: BnMode,
    momentum: f64,
) -> Result<(Tensor, BnStats)> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("batch-norm momentum {momentum} outside [0, 1]")));
    }
    let parts = batch_norm_parts(x, gamma, beta, stats, mode)?;
    let next = match mode {
        BnMode::Train => stats.blend(&parts.batch_mean, &parts.batch_var, momentum),
        BnMode::Infer => stats.clone(),
    };
    Ok((parts.y, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let n = rows[0].len();
        Tensor::new(vec![rows.len(), n], rows.concat()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2("oracle").unwrap();
        let n = b.shape()[1];
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            let mut s = 0.0;
            for p in 0..k {
                s += a.at2(i, p) * b.at2(p, j);
            }
            s
        })
    }

    #[test]
    fn matmul_identity_and_zero() {
        let i2 = Tensor::eye(2);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let z = Tensor::zeros(&[2, 1]);
        assert_eq!(matmul(&a, &z).unwrap(), Tensor::zeros(&[2, 1]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
        for _ in 0..100 {
            let (m, k, n) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..7));
            let a = random(&mut rng, &[m, k]);
            let b = random(&mut rng, &[k, n]);
            let got = matmul(&a, &b).unwrap();
            assert!(got.max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
            let bt = transpose(&b).unwrap();
            assert!(matmul_nt(&a, &bt).unwrap().max_abs_diff(&got) < 1e-12);
            let at = transpose(&a).unwrap();
            assert!(matmul_tn(&at, &b).unwrap().max_abs_diff(&got) < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t2(&[&[0.0, 0.0, 0.0]])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&t2(&[&[1000.0, 0.0]])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1].abs() < 1e-12);

        // naive oracle: exp/sum without max subtraction, fine at this scale
        let s = softmax_rows(&t2(&[&[1.0, 2.0, 3.0]])).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (got, ei) in s.data().iter().zip(&e) {
            assert!((got - ei / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let bad = t2(&[&[f64::NAN, 0.0]]);
        assert!(matches!(softmax_rows(&bad), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn position_linear_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[5, 3]);
        assert_eq!(position_linear(&x, &Tensor::eye(3)).unwrap(), x);
        assert_eq!(position_linear(&x, &Tensor::zeros(&[3, 2])).unwrap(), Tensor::zeros(&[5, 2]));
        let w = random(&mut rng, &[3, 4]);
        assert!(position_linear(&x, &w).unwrap().max_abs_diff(&triple_loop(&x, &w)) < 1e-12);
        assert!(position_linear(&x, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn elementwise_basics() {
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).data()[0], 0.5);
        assert_eq!(tanh(&Tensor::scalar(0.0)).data()[0], 0.0);
        assert!(sigmoid(&Tensor::scalar(-800.0)).is_finite());
        let a = t2(&[&[1.0, -2.0, 3.0], &[1.0, -2.0, 3.0]]);
        assert_eq!(reduce_mean(&a, 0).unwrap(), t2(&[&[1.0, -2.0, 3.0]]));
        assert_eq!(reduce_mean(&a, 1).unwrap().data(), &[2.0 / 3.0, 2.0 / 3.0]);
        assert!(add(&a, &Tensor::zeros(&[3, 2])).is_err());
        assert!(reshape(&a, &[4, 2]).is_err());
        assert_eq!(transpose(&a).unwrap().shape(), &[3, 2]);
        assert_eq!(transpose(&a).unwrap().at2(2, 1), 3.0);
    }

    #[test]
    fn concat_along_axes() {
        let a = t2(&[&[1.0, 2.0]]);
        let b = t2(&[&[3.0, 4.0], &[5.0, 6.0]]);
        let rows = concat(&[&a, &b], 0).unwrap();
        assert_eq!(rows.shape(), &[3, 2]);
        assert_eq!(rows.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = t2(&[&[7.0], &[8.0]]);
        let cols = concat(&[&b, &c], 1).unwrap();
        assert_eq!(cols.data(), &[3.0, 4.0, 7.0, 5.0, 6.0, 8.0]);
        assert!(concat(&[&a, &c], 1).is_err());
        assert_eq!(slice_rows(&rows, 1, 3).unwrap(), b);
    }

    #[test]
    fn batch_norm_momentum_zero_freezes_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[6, 2]);
        let stats = BnStats::new(2);
        let (_, next) = batch_norm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), &stats, BnMode::Train, 0.0).unwrap();
        assert_eq!(next, stats);
    }

    #[test]
    fn batch_norm_constant_channel_yields_shift() {
        let x = Tensor::full(&[5, 2], 3.0);
        let gamma = Tensor::new(vec![2], vec![2.0, -1.0]).unwrap();
        let beta = Tensor::new(vec![2], vec![0.25, 0.75]).unwrap();
        let (y, _) = batch_norm(&x, &gamma, &beta, &BnStats::new(2), BnMode::Train, 0.1).unwrap();
        for i in 0..5 {
            assert_eq!(y.row(i), &[0.25, 0.75]);
        }
    }

    #[test]
    fn batch_norm_two_batch_running_update() {
        let m = 0.1;
        let b1 = t2(&[&[1.0], &[3.0]]); // mean 2, var 1
        let b2 = t2(&[&[0.0], &[4.0], &[8.0]]); // mean 4, var 32/3
        let g = Tensor::ones(&[1]);
        let z = Tensor::zeros(&[1]);
        let (_, s1) = batch_norm(&b1, &g, &z, &BnStats::new(1), BnMode::Train, m).unwrap();
        let (_, s2) = batch_norm(&b2, &g, &z, &s1, BnMode::Train, m).unwrap();
        // scalar recurrence r <- (1-m) r + m b from (mean 0, var 1)
        let mut mean = 0.0;
        let mut var = 1.0;
        for (bm, bv) in [(2.0, 1.0), (4.0, 32.0 / 3.0)] {
            mean = (1.0 - m) * mean + m * bm;
            var = (1.0 - m) * var + m * bv;
        }
        assert!((s2.mean[0] - mean).abs() < 1e-12);
        assert!((s2.var[0] - var).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_infer_uses_running_stats() {
        let x = t2(&[&[2.0], &[4.0]]);
        let stats = BnStats {
            mean: vec![1.0],
            var: vec![4.0 - BN_EPS],
        };
        let (y, next) = batch_norm(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), &stats, BnMode::Infer, 0.5).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
        assert!((y.data()[1] - 1.5).abs() < 1e-12);
        assert_eq!(next, stats);
        assert!(batch_norm(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), &stats, BnMode::Infer, 1.5).is_err());
    }

    #[test]
    fn shape3_validation() {
        assert!(Shape3::new(2, 2, 4).is_ok());
        assert!(Shape3::new(2, 2, 3).is_err());
        assert!(Shape3::new(0, 2, 4).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
