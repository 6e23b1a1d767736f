//! Differentiable layer primitives with hand-written backward passes.
//!
//! Layers are pure functions: each forward returns its output together with
//! an explicit cache, and the matching backward consumes that cache. Nothing
//! here holds hidden state, so the same layer can run on different inputs
//! from different threads.
//!
//! Conventions:
//! - images and feature stacks are `[H, W, C]`
//! - convolution kernels are `[k, k, Cin, Cout]`, which reinterprets as a
//!   `[k*k*Cin, Cout]` matrix without copying
//! - convolution is cross-correlation, stride 1, same-padding with zeros

use crate::error::{Error, Result};
use crate::tensor::{matmul, transpose, Tensor};
use rand::Rng;

/// Cached forward state for [`conv2d`].
#[derive(Debug, Clone)]
pub struct Conv2dCache {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    /// im2col matrix `[H*W, k*k*Cin]` of the forward input.
    cols: Tensor,
    /// Kernels as a `[k*k*Cin, Cout]` matrix (backward needs them for the
    /// input gradient).
    kmat: Tensor,
}

/// Gradients of [`conv2d`] with respect to its three inputs.
#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

fn im2col(input: &Tensor, k: usize) -> Tensor {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let pad = k / 2;
    let row_len = k * k * cin;
    let mut cols = vec![0.0; h * w * row_len];
    let data = input.data();
    for i in 0..h {
        for j in 0..w {
            let row = &mut cols[(i * w + j) * row_len..(i * w + j + 1) * row_len];
            for ki in 0..k {
                let si = i as isize + ki as isize - pad as isize;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for kj in 0..k {
                    let sj = j as isize + kj as isize - pad as isize;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let src = ((si as usize) * w + sj as usize) * cin;
                    let dst = (ki * k + kj) * cin;
                    row[dst..dst + cin].copy_from_slice(&data[src..src + cin]);
                }
            }
        }
    }
    Tensor::new(&[h * w, row_len], cols).expect("im2col volume")
}

/// Same-padded stride-1 cross-correlation plus bias.
///
/// `input` is `[H, W, Cin]`, `kernels` `[k, k, Cin, Cout]` with odd `k`,
/// `bias` `[Cout]`. Output is `[H, W, Cout]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<(Tensor, Conv2dCache)> {
    if input.rank() != 3 {
        return Err(Error::Dimension(format!(
            "conv2d input must be [H, W, Cin], got {:?}",
            input.shape()
        )));
    }
    if kernels.rank() != 4 || kernels.shape()[0] != kernels.shape()[1] {
        return Err(Error::Dimension(format!(
            "conv2d kernels must be [k, k, Cin, Cout], got {:?}",
            kernels.shape()
        )));
    }
    let k = kernels.shape()[0];
    if k % 2 == 0 {
        return Err(Error::Config(format!("conv2d kernel size {k} must be odd")));
    }
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let cout = kernels.shape()[3];
    if kernels.shape()[2] != cin {
        return Err(Error::Dimension(format!(
            "conv2d kernels expect {} input channels, input has {cin}",
            kernels.shape()[2]
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::Dimension(format!(
            "conv2d bias must be [{cout}], got {:?}",
            bias.shape()
        )));
    }

    let cols = im2col(input, k);
    let kmat = kernels.clone().reshaped(&[k * k * cin, cout])?;
    let mut out = matmul(&cols, &kmat)?;
    {
        let data = out.data_mut();
        let b = bias.data();
        for row in data.chunks_exact_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    let out = out.reshaped(&[h, w, cout])?;
    Ok((
        out,
        Conv2dCache {
            h,
            w,
            cin,
            k,
            cols,
            kmat,
        },
    ))
}

/// Exact gradients of [`conv2d`] given the upstream gradient `grad_out`
/// (`[H, W, Cout]`) and the forward cache.
pub fn conv2d_backward(grad_out: &Tensor, cache: &Conv2dCache) -> Result<Conv2dGrads> {
    let (h, w, cin, k) = (cache.h, cache.w, cache.cin, cache.k);
    let cout = cache.kmat.shape()[1];
    if grad_out.shape() != [h, w, cout] {
        return Err(Error::Dimension(format!(
            "conv2d_backward grad shape {:?}, expected [{h}, {w}, {cout}]",
            grad_out.shape()
        )));
    }
    let gmat = grad_out.clone().reshaped(&[h * w, cout])?;

    let mut grad_bias = Tensor::zeros(&[cout]);
    {
        let gb = grad_bias.data_mut();
        for row in gmat.data().chunks_exact(cout) {
            for (b, &g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
    }

    let grad_kernels = matmul(&transpose(&cache.cols)?, &gmat)?.reshaped(&[k, k, cin, cout])?;

    // col2im: scatter-add the column gradient back onto input pixels.
    let grad_cols = matmul(&gmat, &transpose(&cache.kmat)?)?;
    let pad = k / 2;
    let row_len = k * k * cin;
    let mut grad_input = Tensor::zeros(&[h, w, cin]);
    {
        let gi = grad_input.data_mut();
        let gc = grad_cols.data();
        for i in 0..h {
            for j in 0..w {
                let row = &gc[(i * w + j) * row_len..(i * w + j + 1) * row_len];
                for ki in 0..k {
                    let si = i as isize + ki as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let sj = j as isize + kj as isize - pad as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let dst = ((si as usize) * w + sj as usize) * cin;
                        let src = (ki * k + kj) * cin;
                        for c in 0..cin {
                            gi[dst + c] += row[src + c];
                        }
                    }
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: grad_input,
        kernels: grad_kernels,
        bias: grad_bias,
    })
}

/// Forward state of [`relu`]: the pre-activation values.
#[derive(Debug, Clone)]
pub struct ReluCache {
    input: Tensor,
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> (Tensor, ReluCache) {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    (out, ReluCache { input: x.clone() })
}

/// Masks the upstream gradient by `x > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward(grad_out: &Tensor, cache: &ReluCache) -> Result<Tensor> {
    if grad_out.shape() != cache.input.shape() {
        return Err(Error::Dimension(format!(
            "relu_backward grad shape {:?} vs input {:?}",
            grad_out.shape(),
            cache.input.shape()
        )));
    }
    let mut grad = grad_out.clone();
    for (g, &x) in grad.data_mut().iter_mut().zip(cache.input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(grad)
}

/// Per-channel spatial mean of a `[H, W, d]` stack, yielding `[d]`.
pub fn global_avg_pool(f: &Tensor) -> Result<(Tensor, GapCache)> {
    if f.rank() != 3 {
        return Err(Error::Dimension(format!(
            "global_avg_pool expects [H, W, d], got {:?}",
            f.shape()
        )));
    }
    let (h, w, d) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut out = vec![0.0; d];
    for px in f.data().chunks_exact(d) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let inv = 1.0 / (h * w) as f64;
    for o in &mut out {
        *o *= inv;
    }
    Ok((Tensor::from_vec(out), GapCache { h, w, d }))
}

#[derive(Debug, Clone, Copy)]
pub struct GapCache {
    h: usize,
    w: usize,
    d: usize,
}

/// Spreads `grad/(H*W)` uniformly over all spatial positions.
pub fn global_avg_pool_backward(grad_out: &Tensor, cache: &GapCache) -> Result<Tensor> {
    if grad_out.shape() != [cache.d] {
        return Err(Error::Dimension(format!(
            "global_avg_pool_backward grad shape {:?}, expected [{}]",
            grad_out.shape(),
            cache.d
        )));
    }
    let inv = 1.0 / (cache.h * cache.w) as f64;
    let mut grad = Tensor::zeros(&[cache.h, cache.w, cache.d]);
    {
        let g = grad.data_mut();
        for px in g.chunks_exact_mut(cache.d) {
            for (o, &v) in px.iter_mut().zip(grad_out.data()) {
                *o = v * inv;
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy)]
pub struct AvgPoolCache {
    h: usize,
    w: usize,
    d: usize,
    factor: usize,
}

/// Non-overlapping `factor x factor` mean pooling of a `[H, W, d]` stack.
/// Extents must divide evenly.
pub fn avg_pool2d(f: &Tensor, factor: usize) -> Result<(Tensor, AvgPoolCache)> {
    if f.rank() != 3 {
        return Err(Error::Dimension(format!(
            "avg_pool2d expects [H, W, d], got {:?}",
            f.shape()
        )));
    }
    if factor == 0 {
        return Err(Error::Config("avg_pool2d factor must be >= 1".into()));
    }
    let (h, w, d) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!(
            "avg_pool2d factor {factor} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Tensor::zeros(&[oh, ow, d]);
    for i in 0..oh {
        for j in 0..ow {
            for c in 0..d {
                let mut acc = 0.0;
                for di in 0..factor {
                    for dj in 0..factor {
                        acc += f.at3(i * factor + di, j * factor + dj, c);
                    }
                }
                out.set3(i, j, c, acc * inv);
            }
        }
    }
    Ok((out, AvgPoolCache { h, w, d, factor }))
}

/// Spreads each pooled gradient uniformly over its `factor x factor` window.
pub fn avg_pool2d_backward(grad_out: &Tensor, cache: &AvgPoolCache) -> Result<Tensor> {
    let (oh, ow) = (cache.h / cache.factor, cache.w / cache.factor);
    if grad_out.shape() != [oh, ow, cache.d] {
        return Err(Error::Dimension(format!(
            "avg_pool2d_backward grad shape {:?}, expected [{oh}, {ow}, {}]",
            grad_out.shape(),
            cache.d
        )));
    }
    let inv = 1.0 / (cache.factor * cache.factor) as f64;
    let mut grad = Tensor::zeros(&[cache.h, cache.w, cache.d]);
    for i in 0..cache.h {
        for j in 0..cache.w {
            for c in 0..cache.d {
                grad.set3(i, j, c, grad_out.at3(i / cache.factor, j / cache.factor, c) * inv);
            }
        }
    }
    Ok(grad)
}

// Align-corners source coordinate for output index i of extent `dst` drawn
// from extent `src`: i * (src-1) / (dst-1), degenerate extents map to 0.
fn align_corners(i: usize, dst: usize, src: usize) -> (usize, usize, f64) {
    if dst == 1 || src == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

/// Align-corners bilinear interpolation of `[h', w', d]` up to `[H, W, d]`.
pub fn bilinear_upsample(f: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if f.rank() != 3 {
        return Err(Error::Dimension(format!(
            "bilinear_upsample expects [h, w, d], got {:?}",
            f.shape()
        )));
    }
    let (h, w, d) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    if out_h < h || out_w < w {
        return Err(Error::Config(format!(
            "bilinear_upsample target {out_h}x{out_w} smaller than source {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros(&[out_h, out_w, d]);
    for i in 0..out_h {
        let (y0, y1, wy) = align_corners(i, out_h, h);
        for j in 0..out_w {
            let (x0, x1, wx) = align_corners(j, out_w, w);
            for c in 0..d {
                let v = (1.0 - wy) * (1.0 - wx) * f.at3(y0, x0, c)
                    + (1.0 - wy) * wx * f.at3(y0, x1, c)
                    + wy * (1.0 - wx) * f.at3(y1, x0, c)
                    + wy * wx * f.at3(y1, x1, c);
                out.set3(i, j, c, v);
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of [`bilinear_upsample`]: scatters the upstream gradient
/// back through the same interpolation weights.
pub fn bilinear_upsample_backward(
    grad_out: &Tensor,
    src_h: usize,
    src_w: usize,
) -> Result<Tensor> {
    if grad_out.rank() != 3 {
        return Err(Error::Dimension(format!(
            "bilinear_upsample_backward expects [H, W, d], got {:?}",
            grad_out.shape()
        )));
    }
    let (out_h, out_w, d) = (grad_out.shape()[0], grad_out.shape()[1], grad_out.shape()[2]);
    if out_h < src_h || out_w < src_w {
        return Err(Error::Config(format!(
            "bilinear_upsample_backward target {out_h}x{out_w} smaller than source {src_h}x{src_w}"
        )));
    }
    let mut grad = Tensor::zeros(&[src_h, src_w, d]);
    for i in 0..out_h {
        let (y0, y1, wy) = align_corners(i, out_h, src_h);
        for j in 0..out_w {
            let (x0, x1, wx) = align_corners(j, out_w, src_w);
            for c in 0..d {
                let g = grad_out.at3(i, j, c);
                grad.set3(y0, x0, c, grad.at3(y0, x0, c) + (1.0 - wy) * (1.0 - wx) * g);
                grad.set3(y0, x1, c, grad.at3(y0, x1, c) + (1.0 - wy) * wx * g);
                grad.set3(y1, x0, c, grad.at3(y1, x0, c) + wy * (1.0 - wx) * g);
                grad.set3(y1, x1, c, grad.at3(y1, x1, c) + wy * wx * g);
            }
        }
    }
    Ok(grad)
}

/// Numerically stable softmax over a slice, in place.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Max-shifted softmax of a 1-d logit vector; outputs sum to 1.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    softmax_in_place(out.data_mut());
    out
}

/// SGD hyperparameters: `v <- momentum*v + grad + weight_decay*param`,
/// `param <- param - lr*v`.
#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl SgdConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            weight_decay: 0.0,
            momentum: 0.9,
        }
    }
}

/// Per-parameter momentum buffers plus the global step counter.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocities: Vec<Tensor>,
    step: u64,
}

impl SgdState {
    pub fn for_params(params: &[&Tensor]) -> Self {
        Self {
            velocities: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One in-place SGD update over a parameter list. Rejects non-finite
/// gradients, naming the failing step.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    cfg: &SgdConfig,
    state: &mut SgdState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocities.len() {
        return Err(Error::Dimension(format!(
            "sgd_step: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            state.velocities.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "sgd_step param {i}: {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Training {
                step: state.step,
                msg: format!("non-finite gradient in parameter {i}"),
            });
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocities) {
        let vd = v.data_mut();
        let pd = p.data_mut();
        for ((vi, pi), &gi) in vd.iter_mut().zip(pd.iter_mut()).zip(g.data()) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *pi;
            *pi -= cfg.lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}

/// Glorot-uniform initialization: U(-a, a) with `a = sqrt(6/(fan_in+fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape, data).expect("glorot volume")
}

/// He-uniform initialization: U(-a, a) with `a = sqrt(6/fan_in)`. Preserves
/// activation scale through ReLU stacks, where Glorot shrinks it layer by
/// layer.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape, data).expect("he volume")
}
