//! Layer kernels with their hand-written reverse passes.
//!
//! Forward kernels are pure. Backward kernels take the upstream gradient and
//! return the gradient with respect to the kernel input; parameter gradients
//! are accumulated into caller-provided buffers so a batch can be summed
//! without intermediate allocation.

use crate::error::{contract, Result};
use crate::nn::rng::RngStream;
use crate::nn::tensor::Tensor;

/// Only 3×3 kernels are supported.
pub const KERNEL: usize = 3;

pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    contract!(
        w.rank() == 2 && x.rank() == 1 && b.rank() == 1,
        "dense expects x[n], W[m×n], b[m]; got x{:?}, W{:?}, b{:?}",
        x.shape(),
        w.shape(),
        b.shape()
    );
    let (m, n) = (w.shape()[0], w.shape()[1]);
    contract!(
        x.len() == n && b.len() == m,
        "dense shape mismatch: x{:?} against W{:?} and b{:?}",
        x.shape(),
        w.shape(),
        b.shape()
    );
    let xs = x.data();
    let out = w
        .data()
        .chunks_exact(n)
        .zip(b.data())
        .map(|(row, bias)| row.iter().zip(xs).map(|(a, c)| a * c).sum::<f64>() + bias)
        .collect();
    Ok(Tensor::from_vec(out))
}

/// Returns ∂L/∂x and adds ∂L/∂W, ∂L/∂b into `dw`, `db`.
pub fn dense_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor, dw: &mut [f64], db: &mut [f64]) -> Tensor {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(grad_out.len(), m);
    let xs = x.data();
    let mut dx = vec![0.0; n];
    for i in 0..m {
        let g = grad_out.data()[i];
        if g == 0.0 {
            continue;
        }
        db[i] += g;
        let row = &w.data()[i * n..(i + 1) * n];
        let drow = &mut dw[i * n..(i + 1) * n];
        for j in 0..n {
            drow[j] += g * xs[j];
            dx[j] += g * row[j];
        }
    }
    Tensor::from_vec(dx)
}

/// Output spatial size under zero "same" padding.
pub fn same_output_len(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

/// Leading zero padding (TensorFlow SAME convention: any odd remainder goes to
/// the trailing edge).
fn pad_before(input: usize, stride: usize) -> usize {
    let out = same_output_len(input, stride);
    let needed = ((out - 1) * stride + KERNEL).saturating_sub(input);
    needed / 2
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad_y: usize,
    pad_x: usize,
}

fn conv_geometry(x: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<ConvGeometry> {
    contract!(stride >= 1, "conv stride must be positive");
    contract!(
        x.rank() == 3,
        "conv input must be C×H×W, got {:?}",
        x.shape()
    );
    contract!(
        kernels.rank() == 4 && kernels.shape()[2] == KERNEL && kernels.shape()[3] == KERNEL,
        "conv kernels must be F×C×3×3, got {:?}",
        kernels.shape()
    );
    contract!(
        kernels.shape()[1] == x.shape()[0],
        "conv channel mismatch: input {:?} vs kernels {:?}",
        x.shape(),
        kernels.shape()
    );
    contract!(
        bias.len() == kernels.shape()[0],
        "conv bias {:?} does not match kernels {:?}",
        bias.shape(),
        kernels.shape()
    );
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Ok(ConvGeometry {
        c,
        h,
        w,
        f: kernels.shape()[0],
        ho: same_output_len(h, stride),
        wo: same_output_len(w, stride),
        stride,
        pad_y: pad_before(h, stride),
        pad_x: pad_before(w, stride),
    })
}

/// Patch matrix: row `o` holds the C·3·3 receptive field of output position
/// `o` (zeros where the window overhangs the padding).
fn im2col(xs: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cols = g.c * KERNEL * KERNEL;
    let mut patches = vec![0.0; g.ho * g.wo * cols];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut patches[(oy * g.wo + ox) * cols..(oy * g.wo + ox + 1) * cols];
            for c in 0..g.c {
                for ky in 0..KERNEL {
                    let iy = (oy * g.stride + ky) as isize - g.pad_y as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow = &xs[c * g.h * g.w + iy as usize * g.w..][..g.w];
                    for kx in 0..KERNEL {
                        let ix = (ox * g.stride + kx) as isize - g.pad_x as isize;
                        if ix >= 0 && ix < g.w as isize {
                            row[(c * KERNEL + ky) * KERNEL + kx] = xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    patches
}

/// Scatters patch-matrix gradients back onto the input.
fn col2im(dpatches: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cols = g.c * KERNEL * KERNEL;
    let mut dx = vec![0.0; g.c * g.h * g.w];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &dpatches[(oy * g.wo + ox) * cols..(oy * g.wo + ox + 1) * cols];
            for c in 0..g.c {
                for ky in 0..KERNEL {
                    let iy = (oy * g.stride + ky) as isize - g.pad_y as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = c * g.h * g.w + iy as usize * g.w;
                    for kx in 0..KERNEL {
                        let ix = (ox * g.stride + kx) as isize - g.pad_x as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += row[(c * KERNEL + ky) * KERNEL + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Dot product with four interleaved partial sums, which lets the compiler
/// vectorise the reduction.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// 3×3 cross-correlation with zero "same" padding and a per-filter bias.
/// Output is `F × ⌈H/stride⌉ × ⌈W/stride⌉`.
pub fn conv2d_forward(x: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    Ok(conv2d_forward_cols(x, kernels, bias, stride)?.0)
}

/// As [`conv2d_forward`], also returning the patch matrix for reuse by
/// [`conv2d_backward_cols`].
pub(crate) fn conv2d_forward_cols(x: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<(Tensor, Vec<f64>)> {
    let g = conv_geometry(x, kernels, bias, stride)?;
    let cols = g.c * KERNEL * KERNEL;
    let patches = im2col(x.data(), &g);
    let positions = g.ho * g.wo;
    let mut out = vec![0.0; g.f * positions];
    for (f, plane) in out.chunks_exact_mut(positions).enumerate() {
        let k = &kernels.data()[f * cols..(f + 1) * cols];
        let b = bias.data()[f];
        for (o, v) in plane.iter_mut().enumerate() {
            *v = b + dot(k, &patches[o * cols..(o + 1) * cols]);
        }
    }
    Ok((Tensor::new(vec![g.f, g.ho, g.wo], out)?, patches))
}

/// Returns ∂L/∂x and accumulates kernel and bias gradients.
pub fn conv2d_backward(
    x: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    dk: &mut [f64],
    db: &mut [f64],
) -> Tensor {
    conv_backward(x, kernels, grad_out, stride, dk, db, true)
}

/// Kernel and bias gradients only, for a layer whose input needs no gradient.
pub fn conv2d_backward_params(x: &Tensor, kernels: &Tensor, grad_out: &Tensor, stride: usize, dk: &mut [f64], db: &mut [f64]) {
    conv_backward(x, kernels, grad_out, stride, dk, db, false);
}

fn conv_backward(
    x: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    dk: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Tensor {
    let g = backward_geometry(x.shape(), kernels, stride);
    let patches = im2col(x.data(), &g);
    backward_from_cols(&g, &patches, kernels, grad_out, dk, db, want_dx)
}

/// Backward pass reusing the patch matrix recorded by
/// [`conv2d_forward_cols`] for an input of shape `x_shape`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_cols(
    x_shape: &[usize],
    patches: &[f64],
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    dk: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Tensor {
    let g = backward_geometry(x_shape, kernels, stride);
    backward_from_cols(&g, patches, kernels, grad_out, dk, db, want_dx)
}

fn backward_geometry(x_shape: &[usize], kernels: &Tensor, stride: usize) -> ConvGeometry {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    ConvGeometry {
        c,
        h,
        w,
        f: kernels.shape()[0],
        ho: same_output_len(h, stride),
        wo: same_output_len(w, stride),
        stride,
        pad_y: pad_before(h, stride),
        pad_x: pad_before(w, stride),
    }
}

fn backward_from_cols(
    g: &ConvGeometry,
    patches: &[f64],
    kernels: &Tensor,
    grad_out: &Tensor,
    dk: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Tensor {
    let cols = g.c * KERNEL * KERNEL;
    let positions = g.ho * g.wo;
    let mut dpatches = vec![0.0; if want_dx { positions * cols } else { 0 }];
    for f in 0..g.f {
        let gplane = &grad_out.data()[f * positions..(f + 1) * positions];
        db[f] += gplane.iter().sum::<f64>();
        let k = &kernels.data()[f * cols..(f + 1) * cols];
        let dkf = &mut dk[f * cols..(f + 1) * cols];
        for (o, &gv) in gplane.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            let patch = &patches[o * cols..(o + 1) * cols];
            for (d, p) in dkf.iter_mut().zip(patch) {
                *d += gv * p;
            }
            if want_dx {
                for (d, kv) in dpatches[o * cols..(o + 1) * cols].iter_mut().zip(k) {
                    *d += gv * kv;
                }
            }
        }
    }
    if want_dx {
        Tensor::new(vec![g.c, g.h, g.w], col2im(&dpatches, g)).expect("conv input gradient shape")
    } else {
        Tensor::zeros(&[0])
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient through relu given the pre-activation `x`. The subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("relu gradient shape")
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn logistic(x: &Tensor) -> Tensor {
    x.map(sigmoid)
}

/// Gradient through the logistic function given its output `y`.
pub fn logistic_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("logistic gradient shape")
}

pub fn softmax(z: &Tensor) -> Tensor {
    let max = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.data().iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor::from_vec(exps.into_iter().map(|e| e / total).collect())
}

/// Gradient through softmax given its output `p`: p ⊙ (g − ⟨g, p⟩).
pub fn softmax_backward(p: &Tensor, grad_out: &Tensor) -> Tensor {
    let inner = p.dot(grad_out);
    let data = p
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&pi, &gi)| pi * (gi - inner))
        .collect();
    Tensor::from_vec(data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout. Returns the output and the multiplicative mask applied
/// (0 for dropped entries, 1/(1−rate) for survivors; all ones in eval mode).
pub fn dropout(x: &Tensor, rate: f64, mode: Mode, rng: &mut RngStream) -> Result<(Tensor, Tensor)> {
    contract!(
        (0.0..1.0).contains(&rate),
        "dropout rate must lie in [0, 1), got {rate}"
    );
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), Tensor::full(x.shape(), 1.0)));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        Tensor::new(x.shape().to_vec(), mask)?,
    ))
}

pub fn dropout_backward(mask: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = mask
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(m, g)| m * g)
        .collect();
    Tensor::new(mask.shape().to_vec(), data).expect("dropout gradient shape")
}

pub const MIN_NORM: f64 = 1e-12;

pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let norm = v.norm();
    contract!(
        norm > MIN_NORM,
        "cannot normalise a vector of norm {norm:e}"
    );
    Ok(v.map(|x| x / norm))
}

/// Gradient through `u = v/‖v‖`: (g − u⟨u, g⟩)/‖v‖.
pub fn l2_normalize_backward(v: &Tensor, grad_out: &Tensor) -> Tensor {
    let norm = v.norm().max(MIN_NORM);
    let u = v.map(|x| x / norm);
    let ug = u.dot(grad_out);
    let data = grad_out
        .data()
        .iter()
        .zip(u.data())
        .map(|(g, ui)| (g - ui * ug) / norm)
        .collect();
    Tensor::new(v.shape().to_vec(), data).expect("normalise gradient shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_diff_grad, max_relative_error};

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn dense_examples() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(dense_forward(&t(&[1.0, 2.0]), &eye, &t(&[0.0, 0.0])).unwrap(), t(&[1.0, 2.0]));
        let zero = Tensor::zeros(&[2, 2]);
        assert_eq!(dense_forward(&t(&[7.0, -4.0]), &zero, &t(&[3.0, -1.0])).unwrap(), t(&[3.0, -1.0]));
        let w = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        assert_eq!(dense_forward(&t(&[1.0, 2.0]), &w, &t(&[0.5, 0.0])).unwrap(), t(&[3.5, -1.0]));
    }

    #[test]
    fn dense_shape_error_names_shapes() {
        let w = Tensor::zeros(&[2, 3]);
        let err = dense_forward(&t(&[1.0, 2.0]), &w, &t(&[0.0, 0.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn dense_identity_input_gradient_is_ones() {
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let (mut dw, mut db) = (vec![0.0; 9], vec![0.0; 3]);
        let dx = dense_backward(&t(&[0.3, -2.0, 5.0]), &eye, &t(&[1.0, 1.0, 1.0]), &mut dw, &mut db);
        assert_eq!(dx, t(&[1.0, 1.0, 1.0]));
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut rng = RngStream::new(1);
        let x = random(&[1, 5, 7], &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d_forward(&x, &k, &t(&[0.0]), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_centre() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &k, &t(&[0.0]), 1).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn conv_stride_two_shape() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let k = Tensor::zeros(&[2, 1, 3, 3]);
        let y = conv2d_forward(&x, &k, &t(&[0.0, 0.0]), 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d_forward(&x, &k, &t(&[0.0]), 1).is_err());
    }

    #[test]
    fn conv_shapes_follow_ceil_rule() {
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        for h in 1..=32 {
            for stride in [1, 2] {
                let x = Tensor::zeros(&[1, h, 33 - h]);
                let y = conv2d_forward(&x, &k, &t(&[0.0]), stride).unwrap();
                assert_eq!(y.shape(), &[1, h.div_ceil(stride), (33 - h).div_ceil(stride)]);
            }
        }
    }

    /// Naive reference: explicit padded image and bounds-free loops.
    fn conv_reference(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let f = k.shape()[0];
        let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
        let py = ((ho - 1) * stride + 3).saturating_sub(h) / 2;
        let px = ((wo - 1) * stride + 3).saturating_sub(w) / 2;
        let get = |ci: usize, y: isize, xx: isize| -> f64 {
            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                0.0
            } else {
                x.data()[ci * h * w + y as usize * w + xx as usize]
            }
        };
        let mut out = vec![0.0; f * ho * wo];
        for fi in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[fi];
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - py as isize;
                                let ix = (ox * stride + kx) as isize - px as isize;
                                acc += k.data()[((fi * c + ci) * 3 + ky) * 3 + kx] * get(ci, iy, ix);
                            }
                        }
                    }
                    out[(fi * ho + oy) * wo + ox] = acc;
                }
            }
        }
        Tensor::new(vec![f, ho, wo], out).unwrap()
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = RngStream::new(9);
        for case in 0..30 {
            let c = 1 + case % 3;
            let h = 1 + (rng.next_u64() % 8) as usize;
            let w = 1 + (rng.next_u64() % 8) as usize;
            let f = 1 + case % 4;
            let stride = 1 + case % 2;
            let x = random(&[c, h, w], &mut rng);
            let k = random(&[f, c, 3, 3], &mut rng);
            let b = random(&[f], &mut rng);
            let fast = conv2d_forward(&x, &k, &b, stride).unwrap();
            let slow = conv_reference(&x, &k, &b, stride);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activations() {
        assert_eq!(relu(&t(&[-1.0, 2.0, 0.0])), t(&[0.0, 2.0, 0.0]));
        assert_eq!(logistic(&t(&[0.0])), t(&[0.5]));
        assert!((logistic(&t(&[40.0])).data()[0] - 1.0).abs() < 1e-12);
        assert!(logistic(&t(&[-800.0])).is_finite());
        let xs = t(&[-3.0, -0.2, 0.0, 1.5, 30.0]);
        let a = logistic(&xs);
        let b = logistic(&xs.map(|v| -v));
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p + q - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&t(&[0.0, 0.0])), t(&[0.5, 0.5]));
        let p = softmax(&t(&[1f64.ln(), 3f64.ln()]));
        assert!((p.data()[0] - 0.25).abs() < 1e-15 && (p.data()[1] - 0.75).abs() < 1e-15);
        let mut rng = RngStream::new(3);
        for _ in 0..50 {
            let z = random(&[5], &mut rng);
            let c = 100.0 * rng.normal();
            let p = softmax(&z);
            let q = softmax(&z.map(|v| v + c));
            assert!((p.sum() - 1.0).abs() < 1e-9);
            assert!(p.data().iter().all(|&v| v > 0.0));
            for (a, b) in p.data().iter().zip(q.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_cross_entropy_gradient_closed_form() {
        let z = t(&[0.3, -1.2, 0.7]);
        let p = softmax(&z);
        let y = 2;
        let mut gp = Tensor::zeros(&[3]);
        gp.data_mut()[y] = -1.0 / p.data()[y];
        let gz = softmax_backward(&p, &gp);
        for i in 0..3 {
            let expected = p.data()[i] - if i == y { 1.0 } else { 0.0 };
            assert!((gz.data()[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn dropout_examples() {
        let mut rng = RngStream::new(5);
        let x = random(&[64], &mut rng);
        assert_eq!(dropout(&x, 0.7, Mode::Eval, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap().0, x);
        let (y, _) = dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!(*a == 0.0 || *a == 2.0 * b);
        }
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = RngStream::new(11);
        let x = Tensor::from_vec(vec![1.0]);
        let n = 100_000;
        let total: f64 = (0..n)
            .map(|_| dropout(&x, 0.1, Mode::Train, &mut rng).unwrap().0.data()[0])
            .sum();
        assert!((total / n as f64 - 1.0).abs() < 0.01);
    }

    #[test]
    fn normalise_examples() {
        assert_eq!(l2_normalize(&t(&[3.0, 4.0])).unwrap(), t(&[0.6, 0.8]));
        let u = t(&[0.6, 0.8]);
        let v = l2_normalize(&u).unwrap();
        for (a, b) in u.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(l2_normalize(&t(&[0.0, 0.0])).is_err());
    }

    // Kernel gradient checks: loss = ⟨c, kernel(x)⟩ for a random cotangent c.

    fn check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        let numeric = finite_diff_grad(f, x, 1e-5).unwrap();
        let err = max_relative_error(analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn gradcheck_dense() {
        let mut rng = RngStream::new(21);
        for _ in 0..20 {
            let m = 1 + (rng.next_u64() % 8) as usize;
            let n = 1 + (rng.next_u64() % 8) as usize;
            let x = random(&[n], &mut rng);
            let w = random(&[m, n], &mut rng);
            let b = random(&[m], &mut rng);
            let c = random(&[m], &mut rng);
            let (mut dw, mut db) = (vec![0.0; m * n], vec![0.0; m]);
            let dx = dense_backward(&x, &w, &c, &mut dw, &mut db);
            check(
                |xv| dense_forward(&Tensor::from_vec(xv.to_vec()), &w, &b).unwrap().dot(&c),
                x.data(),
                dx.data(),
            );
            check(
                |wv| {
                    let wt = Tensor::new(vec![m, n], wv.to_vec()).unwrap();
                    dense_forward(&x, &wt, &b).unwrap().dot(&c)
                },
                w.data(),
                &dw,
            );
            check(
                |bv| dense_forward(&x, &w, &Tensor::from_vec(bv.to_vec())).unwrap().dot(&c),
                b.data(),
                &db,
            );
        }
    }

    #[test]
    fn gradcheck_conv() {
        let mut rng = RngStream::new(22);
        for case in 0..20 {
            let ch = 1 + (rng.next_u64() % 3) as usize;
            let h = 1 + (rng.next_u64() % 8) as usize;
            let w = 1 + (rng.next_u64() % 8) as usize;
            let f = 1 + (rng.next_u64() % 4) as usize;
            let stride = 1 + case % 2;
            let x = random(&[ch, h, w], &mut rng);
            let k = random(&[f, ch, 3, 3], &mut rng);
            let b = random(&[f], &mut rng);
            let y = conv2d_forward(&x, &k, &b, stride).unwrap();
            let c = random(y.shape(), &mut rng);
            let (mut dk, mut db) = (vec![0.0; k.len()], vec![0.0; f]);
            let dx = conv2d_backward(&x, &k, &c, stride, &mut dk, &mut db);
            check(
                |xv| {
                    let xt = Tensor::new(x.shape().to_vec(), xv.to_vec()).unwrap();
                    conv2d_forward(&xt, &k, &b, stride).unwrap().dot(&c)
                },
                x.data(),
                dx.data(),
            );
            check(
                |kv| {
                    let kt = Tensor::new(k.shape().to_vec(), kv.to_vec()).unwrap();
                    conv2d_forward(&x, &kt, &b, stride).unwrap().dot(&c)
                },
                k.data(),
                &dk,
            );
            check(
                |bv| conv2d_forward(&x, &k, &Tensor::from_vec(bv.to_vec()), stride).unwrap().dot(&c),
                b.data(),
                &db,
            );
        }
    }

    #[test]
    fn gradcheck_pointwise_and_normalise() {
        let mut rng = RngStream::new(23);
        for _ in 0..20 {
            let n = 1 + (rng.next_u64() % 8) as usize;
            // keep relu inputs away from the kink
            let x = random(&[n], &mut rng).map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });
            let c = random(&[n], &mut rng);
            let shape = vec![n];
            let wrap = |v: &[f64]| Tensor::new(shape.clone(), v.to_vec()).unwrap();

            check(|v| relu(&wrap(v)).dot(&c), x.data(), relu_backward(&x, &c).data());
            check(
                |v| logistic(&wrap(v)).dot(&c),
                x.data(),
                logistic_backward(&logistic(&x), &c).data(),
            );
            check(
                |v| softmax(&wrap(v)).dot(&c),
                x.data(),
                softmax_backward(&softmax(&x), &c).data(),
            );
            check(
                |v| l2_normalize(&wrap(v)).unwrap().dot(&c),
                x.data(),
                l2_normalize_backward(&x, &c).data(),
            );
            let mut stream = RngStream::new(rng.next_u64());
            let (_, mask) = dropout(&x, 0.3, Mode::Train, &mut stream.clone()).unwrap();
            check(
                |v| dropout(&wrap(v), 0.3, Mode::Train, &mut stream.clone()).unwrap().0.dot(&c),
                x.data(),
                dropout_backward(&mask, &c).data(),
            );
            stream.uniform();
        }
    }
}
