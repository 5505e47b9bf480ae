//! Square-kernel 2-D convolution and 2×2 average pooling over `H×W×C`
//! feature maps, with their backward rules for the tape.

use crate::autograd::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected H×W×C",
        }),
    }
}

fn check_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, pad: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (h, wd, cin) = dims3(x, "conv2d")?;
    let (k, cout) = match *w.shape() {
        [k, k2, ci, co] if k == k2 && ci == cin => (k, co),
        _ => return Err(Error::shape("conv2d", x.shape(), w.shape())),
    };
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d", w.shape(), b.shape()));
        }
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::InvalidShape {
            op: "conv2d",
            shape: x.shape().to_vec(),
            reason: "input smaller than kernel",
        });
    }
    Ok((h, wd, cin, k, cout))
}

/// Patch matrix `(oh·ow) × (k·k·Cin)`: row `p` holds the zero-padded
/// receptive field of output position `p` in `ky, kx, ci` order.
fn im2col(x: &Tensor, k: usize, pad: usize) -> (Tensor, usize, usize) {
    let &[h, wd, cin] = x.shape() else { unreachable!() };
    let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
    let width = k * k * cin;
    let xd = x.data();
    let mut cols = vec![0.0; oh * ow * width];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * width..(oy * ow + ox + 1) * width];
            for ky in 0..k {
                let Some(iy) = (oy + ky).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                // contiguous run of valid kx
                let kx0 = pad.saturating_sub(ox);
                let kx1 = k.min(wd + pad - ox);
                if kx0 >= kx1 {
                    continue;
                }
                let ix0 = ox + kx0 - pad;
                let src = &xd[(iy * wd + ix0) * cin..(iy * wd + ix0 + kx1 - kx0) * cin];
                row[(ky * k + kx0) * cin..(ky * k + kx1) * cin].copy_from_slice(src);
            }
        }
    }
    (Tensor::new(vec![oh * ow, width], cols).unwrap(), oh, ow)
}

/// Scatter-adds a patch-matrix gradient back onto the `H×W×Cin` input.
fn col2im(cols: &Tensor, shape: &[usize], k: usize, pad: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (h, wd, cin) = (shape[0], shape[1], shape[2]);
    let width = k * k * cin;
    let mut gx = vec![0.0; h * wd * cin];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols.data()[(oy * ow + ox) * width..(oy * ow + ox + 1) * width];
            for ky in 0..k {
                let Some(iy) = (oy + ky).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                let kx0 = pad.saturating_sub(ox);
                let kx1 = k.min(wd + pad - ox);
                if kx0 >= kx1 {
                    continue;
                }
                let ix0 = ox + kx0 - pad;
                let dst = &mut gx[(iy * wd + ix0) * cin..(iy * wd + ix0 + kx1 - kx0) * cin];
                for (d, v) in dst.iter_mut().zip(&row[(ky * k + kx0) * cin..(ky * k + kx1) * cin]) {
                    *d += v;
                }
            }
        }
    }
    gx
}

/// Cross-correlation of `x: H×W×Cin` with `w: k×k×Cin×Cout`, zero padding
/// `pad` on every side, optional bias `b: Cout`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, pad: usize) -> Result<Tensor> {
    let (_, _, cin, k, cout) = check_conv(x, w, b, pad)?;
    let (cols, oh, ow) = im2col(x, k, pad);
    let w2 = tensor::reshape(w, &[k * k * cin, cout])?;
    let mut out = tensor::matmul(&cols, &w2)?.into_data();
    if let Some(b) = b {
        for row in out.chunks_exact_mut(cout) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out)
}

struct Conv2dOp {
    pad: usize,
}

impl CustomOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (_, _, cin, k, cout) = check_conv(x, w, inputs.get(2).copied(), self.pad)?;
        let (oh, ow, _) = dims3(output, "conv2d")?;
        let (cols, _, _) = im2col(x, k, self.pad);
        let g = tensor::reshape(grad, &[oh * ow, cout])?;
        let w2 = tensor::reshape(w, &[k * k * cin, cout])?;
        let gw = tensor::matmul_tn(&cols, &g)?;
        let gcols = tensor::matmul_nt(&g, &w2)?;
        let gx = col2im(&gcols, x.shape(), k, self.pad, oh, ow);
        let mut out = vec![Tensor::new(x.shape().to_vec(), gx)?, tensor::reshape(&gw, w.shape())?];
        if inputs.len() == 3 {
            let mut gb = vec![0.0; cout];
            for row in grad.data().chunks_exact(cout) {
                for (d, v) in gb.iter_mut().zip(row) {
                    *d += v;
                }
            }
            out.push(Tensor::new(vec![cout], gb)?);
        }
        Ok(out)
    }
}

/// Records [`conv2d`] on `tape`.
pub fn conv2d_on_tape(tape: &mut Tape, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
    let out = conv2d(tape.value(x), tape.value(w), b.map(|b| tape.value(b)), pad)?;
    let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
    Ok(tape.custom(&inputs, out, Box::new(Conv2dOp { pad })))
}

/// Non-overlapping 2×2 mean; a trailing odd row or column is dropped.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims3(x, "avg_pool2")?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidShape {
            op: "avg_pool2",
            shape: x.shape().to_vec(),
            reason: "needs at least 2×2",
        });
    }
    let xd = x.data();
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let base = ((2 * oy + dy) * w + 2 * ox + dx) * c;
                for (d, v) in dst.iter_mut().zip(&xd[base..base + c]) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d *= 0.25;
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

struct AvgPool2Op;

impl CustomOp for AvgPool2Op {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let (_, w, c) = dims3(x, "avg_pool2")?;
        let (oh, ow, _) = dims3(output, "avg_pool2")?;
        let mut gx = vec![0.0; x.len()];
        let g = grad.data();
        for oy in 0..oh {
            for ox in 0..ow {
                let src = &g[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let base = ((2 * oy + dy) * w + 2 * ox + dx) * c;
                    for (d, v) in gx[base..base + c].iter_mut().zip(src) {
                        *d += 0.25 * v;
                    }
                }
            }
        }
        Ok(vec![Tensor::new(x.shape().to_vec(), gx)?])
    }
}

pub fn avg_pool2_on_tape(tape: &mut Tape, x: Var) -> Result<Var> {
    let out = avg_pool2(tape.value(x))?;
    Ok(tape.custom(&[x], out, Box::new(AvgPool2Op)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check, ParamSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct six-fold loop with explicit bounds checks.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, pad: usize) -> Tensor {
        let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, cout) = (w.shape()[0], w.shape()[3]);
        let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        Tensor::from_fn(&[oh, ow, cout], |flat| {
            let co = flat % cout;
            let ox = (flat / cout) % ow;
            let oy = flat / (cout * ow);
            let mut s = b.map_or(0.0, |b| b.data()[co]);
            for ky in 0..k {
                for kx in 0..k {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let ix = ox as isize + kx as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        continue;
                    }
                    for ci in 0..cin {
                        let xv = x.data()[(iy as usize * wd + ix as usize) * cin + ci];
                        let wv = w.data()[((ky * k + kx) * cin + ci) * cout + co];
                        s += xv * wv;
                    }
                }
            }
            s
        })
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            let h = rng.gen_range(3..9);
            let wd = rng.gen_range(3..9);
            let cin = rng.gen_range(1..4);
            let cout = rng.gen_range(1..5);
            let pad = rng.gen_range(0..2);
            let x = random(&mut rng, &[h, wd, cin]);
            let w = random(&mut rng, &[3, 3, cin, cout]);
            let b = random(&mut rng, &[cout]);
            let got = conv2d(&x, &w, Some(&b), pad).unwrap();
            assert!(got.max_abs_diff(&conv_oracle(&x, &w, Some(&b), pad)) < 1e-10);
        }
    }

    #[test]
    fn zero_weights_and_constant_image() {
        let x = Tensor::full(&[6, 6, 1], 0.7);
        let zero = conv2d(&x, &Tensor::zeros(&[3, 3, 1, 2]), None, 0).unwrap();
        assert_eq!(zero.shape(), &[4, 4, 2]);
        assert_eq!(zero.max_abs(), 0.0);
        let mut centre = Tensor::zeros(&[3, 3, 1, 1]);
        centre.data_mut()[4] = 1.0;
        let same = conv2d(&x, &centre, None, 0).unwrap();
        assert!(same.data().iter().all(|v| *v == 0.7));
    }

    #[test]
    fn pooling_drops_odd_edge() {
        let x = Tensor::from_fn(&[5, 4, 1], |i| i as f64);
        let p = avg_pool2(&x).unwrap();
        assert_eq!(p.shape(), &[2, 2, 1]);
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for pad in [0, 1] {
            let mut params = ParamSet::new();
            let x = params.insert("x", random(&mut rng, &[5, 5, 2]), false).unwrap();
            let w = params.insert("w", random(&mut rng, &[3, 3, 2, 3]), false).unwrap();
            let b = params.insert("b", random(&mut rng, &[3]), false).unwrap();
            let r = grad_check(&params, 1e-5, 1e-6, |tape, p| {
                let (xv, wv, bv) = (tape.param(p, x), tape.param(p, w), tape.param(p, b));
                let y = conv2d_on_tape(tape, xv, wv, Some(bv), pad)?;
                let y = avg_pool2_on_tape(tape, y)?;
                let sq = tape.hadamard(y, y)?;
                Ok(tape.sum(sq))
            })
            .unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}
