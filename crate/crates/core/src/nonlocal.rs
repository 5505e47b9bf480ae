//! Generalised non-local operation `Z = r(X, Y)` with an embedded-Gaussian
//! compatibility function.
//!
//! For query rows `x_i` and key/value rows `y_j`:
//!
//! ```text
//! ω_ij = exp(θ(x_i)ᵀ φ(y_j)) / Σ_k exp(θ(x_i)ᵀ φ(y_k))
//! z_i  = Σ_j ω_ij g(y_j)
//! ```
//!
//! with linear embeddings `θ(x) = x·W_θ`, `φ(y) = y·W_φ`, `g(y) = y·W_g`.
//! The normalised exponential is exactly a row softmax of the logit matrix
//! `(X·W_θ)(Y·W_φ)ᵀ`. There are no bias terms and no residual connection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::init::xavier_matrix;
use crate::tensor::{self, Tensor};

/// How the pairwise compatibilities are normalised into weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    /// `ω_ij = f_ij / Σ_k f_ik` (row softmax of the logits).
    #[default]
    Softmax,
    /// `ω_ij = f_ij / N`.
    Uniform,
}

/// The three embedding matrices of one `r(·,·)` instance.
#[derive(Clone, Debug, PartialEq)]
pub struct NonLocalParams {
    /// `C_X × C_E`
    pub w_theta: Tensor,
    /// `C_Y × C_E`
    pub w_phi: Tensor,
    /// `C_Y × C_Z`
    pub w_g: Tensor,
}

impl NonLocalParams {
    pub fn new(w_theta: Tensor, w_phi: Tensor, w_g: Tensor) -> Result<Self> {
        let (_, e1) = w_theta.dims2("nonlocal_params")?;
        let (cy1, e2) = w_phi.dims2("nonlocal_params")?;
        let (cy2, _) = w_g.dims2("nonlocal_params")?;
        if e1 != e2 {
            return Err(Error::shape("nonlocal_params", w_theta.shape(), w_phi.shape()));
        }
        if cy1 != cy2 {
            return Err(Error::shape("nonlocal_params", w_phi.shape(), w_g.shape()));
        }
        Ok(NonLocalParams { w_theta, w_phi, w_g })
    }

    pub fn zeros(c_x: usize, c_y: usize, c_z: usize, c_e: usize) -> Self {
        NonLocalParams {
            w_theta: Tensor::zeros(&[c_x, c_e]),
            w_phi: Tensor::zeros(&[c_y, c_e]),
            w_g: Tensor::zeros(&[c_y, c_z]),
        }
    }

    pub fn xavier<R: Rng + ?Sized>(c_x: usize, c_y: usize, c_z: usize, c_e: usize, rng: &mut R) -> Self {
        NonLocalParams {
            w_theta: xavier_matrix(c_x, c_e, rng),
            w_phi: xavier_matrix(c_y, c_e, rng),
            w_g: xavier_matrix(c_y, c_z, rng),
        }
    }

    pub fn output_channels(&self) -> usize {
        self.w_g.shape()[1]
    }
}

/// Row-stochastic attention weights `ω` (`N × N`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    omega: Tensor,
}

impl AttentionMatrix {
    pub fn omega(&self) -> &Tensor {
        &self.omega
    }

    pub fn into_tensor(self) -> Tensor {
        self.omega
    }
}

fn check_rows(x: &Tensor, y: &Tensor) -> Result<()> {
    let (n_x, _) = x.dims2("nonlocal")?;
    let (n_y, _) = y.dims2("nonlocal")?;
    if n_x != n_y {
        return Err(Error::shape("nonlocal", x.shape(), y.shape()));
    }
    Ok(())
}

/// `(X·W_θ)(Y·W_φ)ᵀ`
fn logits(x: &Tensor, y: &Tensor, params: &NonLocalParams) -> Result<Tensor> {
    check_rows(x, y)?;
    let theta = tensor::position_linear(x, &params.w_theta)?;
    let phi = tensor::position_linear(y, &params.w_phi)?;
    tensor::matmul_nt(&theta, &phi)
}

/// Embedded-Gaussian attention between queries `x` and keys `y`.
pub fn compatibility(x: &Tensor, y: &Tensor, params: &NonLocalParams) -> Result<AttentionMatrix> {
    compatibility_with(x, y, params, Normalizer::Softmax)
}

pub fn compatibility_with(
    x: &Tensor,
    y: &Tensor,
    params: &NonLocalParams,
    normalizer: Normalizer,
) -> Result<AttentionMatrix> {
    let l = logits(x, y, params)?;
    let omega = match normalizer {
        Normalizer::Softmax => tensor::softmax_rows(&l)?,
        Normalizer::Uniform => {
            let n = l.shape()[1] as f64;
            tensor::scale(&tensor::exp(&l), 1.0 / n)
        }
    };
    Ok(AttentionMatrix { omega })
}

/// `Z = r(X, Y)`: every output row is the attention-weighted sum of the
/// embedded rows `g(y_j)`.
pub fn r(x: &Tensor, y: &Tensor, params: &NonLocalParams) -> Result<Tensor> {
    r_with(x, y, params, Normalizer::Softmax)
}

pub fn r_with(x: &Tensor, y: &Tensor, params: &NonLocalParams, normalizer: Normalizer) -> Result<Tensor> {
    let att = compatibility_with(x, y, params, normalizer)?;
    let g = tensor::position_linear(y, &params.w_g)?;
    tensor::matmul(&att.omega, &g)
}

/// The single-input special case `r(X, X)`.
pub fn self_nonlocal(x: &Tensor, params: &NonLocalParams) -> Result<Tensor> {
    r(x, x, params)
}

/// Parameter handles of one `r(·,·)` instance inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NonLocalIds {
    pub w_theta: ParamId,
    pub w_phi: ParamId,
    pub w_g: ParamId,
}

impl NonLocalIds {
    /// Registers `{prefix}.w_theta`, `{prefix}.w_phi` and `{prefix}.w_g`.
    pub fn register(params: &mut ParamSet, prefix: &str, init: NonLocalParams) -> Result<Self> {
        Ok(NonLocalIds {
            w_theta: params.insert(format!("{prefix}.w_theta"), init.w_theta, true)?,
            w_phi: params.insert(format!("{prefix}.w_phi"), init.w_phi, true)?,
            w_g: params.insert(format!("{prefix}.w_g"), init.w_g, true)?,
        })
    }

    pub fn values(&self, params: &ParamSet) -> NonLocalParams {
        NonLocalParams {
            w_theta: params.value(self.w_theta).clone(),
            w_phi: params.value(self.w_phi).clone(),
            w_g: params.value(self.w_g).clone(),
        }
    }

    /// Records `r(x, y)` on `tape` using the parameters behind these ids.
    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: Var, y: Var, normalizer: Normalizer) -> Result<Var> {
        let w_theta = tape.param(params, self.w_theta);
        let w_phi = tape.param(params, self.w_phi);
        let w_g = tape.param(params, self.w_g);
        r_on_tape(tape, x, y, w_theta, w_phi, w_g, normalizer)
    }
}

/// Differentiable `r(x, y)` from explicit weight nodes.
pub fn r_on_tape(
    tape: &mut Tape,
    x: Var,
    y: Var,
    w_theta: Var,
    w_phi: Var,
    w_g: Var,
    normalizer: Normalizer,
) -> Result<Var> {
    check_rows(tape.value(x), tape.value(y))?;
    let theta = tape.position_linear(x, w_theta)?;
    let phi = tape.position_linear(y, w_phi)?;
    let logits = tape.matmul_nt(theta, phi)?;
    let omega = match normalizer {
        Normalizer::Softmax => tape.softmax_rows(logits)?,
        Normalizer::Uniform => {
            let n = tape.value(logits).shape()[1] as f64;
            let f = tape.exp(logits);
            tape.scale(f, 1.0 / n)
        }
    };
    let g = tape.position_linear(y, w_g)?;
    tape.matmul(omega, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Computes e^{θ(x_i)ᵀφ(y_j)} pair by pair with explicit dot products,
    /// normalises by the row total, then forms the weighted sums.
    fn oracle(x: &Tensor, y: &Tensor, p: &NonLocalParams) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = x.shape()[0];
        let embed = |v: &[f64], w: &Tensor| -> Vec<f64> {
            (0..w.shape()[1])
                .map(|o| v.iter().enumerate().map(|(c, vc)| vc * w.at2(c, o)).sum())
                .collect()
        };
        let mut omega = vec![vec![0.0; n]; n];
        for i in 0..n {
            let th = embed(x.row(i), &p.w_theta);
            let f: Vec<f64> = (0..n)
                .map(|j| {
                    let ph = embed(y.row(j), &p.w_phi);
                    th.iter().zip(&ph).map(|(a, b)| a * b).sum::<f64>().exp()
                })
                .collect();
            let total: f64 = f.iter().sum();
            for j in 0..n {
                omega[i][j] = f[j] / total;
            }
        }
        let cz = p.w_g.shape()[1];
        let mut z = vec![vec![0.0; cz]; n];
        for i in 0..n {
            for j in 0..n {
                let gj = embed(y.row(j), &p.w_g);
                for c in 0..cz {
                    z[i][c] += omega[i][j] * gj[c];
                }
            }
        }
        (omega, z)
    }

    #[test]
    fn single_position_has_unit_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = NonLocalParams::xavier(3, 3, 2, 2, &mut rng);
        let x = random(&mut rng, &[1, 3]);
        let att = compatibility(&x, &x, &p).unwrap();
        assert_eq!(att.omega().data(), &[1.0]);
        let z = self_nonlocal(&x, &p).unwrap();
        let g = tensor::matmul(&x, &p.w_g).unwrap();
        assert!(z.max_abs_diff(&g) < 1e-15);
    }

    #[test]
    fn zero_embeddings_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = NonLocalParams::xavier(3, 2, 2, 2, &mut rng);
        p.w_theta = Tensor::zeros(&[3, 2]);
        let x = random(&mut rng, &[5, 3]);
        let y = random(&mut rng, &[5, 2]);
        let att = compatibility(&x, &y, &p).unwrap();
        for v in att.omega().data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let mut p = NonLocalParams::xavier(3, 2, 2, 2, &mut rng);
        p.w_phi = Tensor::zeros(&[2, 2]);
        let att = compatibility(&x, &y, &p).unwrap();
        for v in att.omega().data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn compatibility_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = NonLocalParams::xavier(2, 2, 2, 2, &mut rng);
        let x = random(&mut rng, &[3, 2]);
        let y = random(&mut rng, &[3, 2]);
        let att = compatibility(&x, &y, &p).unwrap();
        let (omega, _) = oracle(&x, &y, &p);
        for i in 0..3 {
            for j in 0..3 {
                assert!((att.omega().at2(i, j) - omega[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn r_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = NonLocalParams::xavier(3, 2, 2, 2, &mut rng);
        let x = random(&mut rng, &[4, 3]);
        let y = random(&mut rng, &[4, 2]);
        let z = r(&x, &y, &p).unwrap();
        let (_, zo) = oracle(&x, &y, &p);
        for i in 0..4 {
            for c in 0..2 {
                assert!((z.at2(i, c) - zo[i][c]).abs() < 1e-10);
            }
        }
        let z_self = self_nonlocal(&x, &NonLocalParams::xavier(3, 3, 2, 3, &mut rng)).unwrap();
        assert_eq!(z_self.shape(), &[4, 2]);
    }

    #[test]
    fn zero_value_embedding_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = NonLocalParams::xavier(3, 2, 4, 2, &mut rng);
        p.w_g = Tensor::zeros(&[2, 4]);
        let z = r(&random(&mut rng, &[6, 3]), &random(&mut rng, &[6, 2]), &p).unwrap();
        assert_eq!(z, Tensor::zeros(&[6, 4]));
    }

    #[test]
    fn constant_keys_give_constant_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = NonLocalParams::xavier(3, 2, 3, 2, &mut rng);
        let v = [0.7, -0.3];
        let y = Tensor::from_fn(&[5, 2], |i| v[i % 2]);
        let z = r(&random(&mut rng, &[5, 3]), &y, &p).unwrap();
        let expected = tensor::matmul(&Tensor::new(vec![1, 2], v.to_vec()).unwrap(), &p.w_g).unwrap();
        for i in 0..5 {
            for c in 0..3 {
                assert!((z.at2(i, c) - expected.data()[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn row_count_mismatch_is_error() {
        let p = NonLocalParams::zeros(2, 2, 2, 2);
        let res = r(&Tensor::zeros(&[3, 2]), &Tensor::zeros(&[4, 2]), &p);
        assert!(matches!(res, Err(Error::Shape { .. })));
    }

    #[test]
    fn uniform_normaliser_divides_by_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = NonLocalParams::xavier(2, 2, 2, 2, &mut rng);
        let x = random(&mut rng, &[4, 2]);
        let att = compatibility_with(&x, &x, &p, Normalizer::Uniform).unwrap();
        let l = logits(&x, &x, &p).unwrap();
        for (w, lv) in att.omega().data().iter().zip(l.data()) {
            assert!((w - lv.exp() / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn tape_matches_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::new();
        let init = NonLocalParams::xavier(3, 2, 2, 2, &mut rng);
        let ids = NonLocalIds::register(&mut ps, "r", init.clone()).unwrap();
        let x = random(&mut rng, &[4, 3]);
        let y = random(&mut rng, &[4, 2]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let yv = tape.leaf(y.clone());
        let z = ids.apply(&mut tape, &ps, xv, yv, Normalizer::Softmax).unwrap();
        assert_eq!(tape.value(z), &r(&x, &y, &init).unwrap());
        assert_eq!(ids.values(&ps), init);
    }
}
