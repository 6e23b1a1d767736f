//! The shared convolutional encoder, the image-classification head, the
//! foreground/background pixel head, activation-map extraction for the
//! baseline stage, and checkpoint serialization.
//!
//! A model is a plain bag of tensors ([`ModelParams`]) interpreted under a
//! [`ModelConfig`]. Forward passes come in two flavors: the plain functions
//! (`encode`, `classify_image`, ...) for inference, and `*_forward` variants
//! that also return the caches the matching `*_backward` functions consume
//! during training.

use crate::error::{Error, Result};
use crate::nn::{
    avg_pool2d, avg_pool2d_backward, bilinear_upsample, bilinear_upsample_backward, conv2d,
    conv2d_backward, glorot_uniform, global_avg_pool, global_avg_pool_backward, he_uniform,
    relu, relu_backward, softmax_in_place, AvgPoolCache, Conv2dCache, GapCache, ReluCache,
};
use crate::tensor::{matmul, transpose, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PXCM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Shape of the pixel head: a single 2-way linear classifier over features,
/// or a stack of three depth-halving 1x1 stages before the 2-way output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelHeadKind {
    Linear,
    MultiLayer,
}

/// Architecture hyperparameters. Parameter shapes follow from this alone;
/// image size does not, so one config serves any input resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output channels of each encoder conv layer; the last entry is the
    /// feature depth d.
    pub conv_widths: Vec<usize>,
    pub kernel_size: usize,
    pub num_classes: usize,
    pub pixel_head: PixelHeadKind,
    /// Mean-pool factor applied after the first conv layer; 1 keeps full
    /// resolution. Features are bilinearly upsampled back at the end.
    pub downsample_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_widths: vec![16, 32, 32],
            kernel_size: 3,
            num_classes: 2,
            pixel_head: PixelHeadKind::Linear,
            downsample_factor: 1,
        }
    }
}

impl ModelConfig {
    /// Feature depth d seen by both heads.
    pub fn feature_depth(&self) -> usize {
        self.conv_widths.last().copied().unwrap_or(0)
    }

    /// Widths of the three depth-halving stages of the multi-layer head.
    pub fn pixel_stage_widths(&self) -> Vec<usize> {
        let d = self.feature_depth();
        vec![d / 2, d / 4, d / 8]
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(Error::Config(format!(
                "conv widths must be nonempty and positive, got {:?}",
                self.conv_widths
            )));
        }
        if self.feature_depth() < 2 {
            return Err(Error::Config(format!(
                "feature depth {} too small, need at least 2",
                self.feature_depth()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 image classes, got {}",
                self.num_classes
            )));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Config(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        if self.downsample_factor == 0 {
            return Err(Error::Config("downsample factor must be >= 1".into()));
        }
        if self.pixel_head == PixelHeadKind::MultiLayer && self.feature_depth() % 8 != 0 {
            return Err(Error::Config(format!(
                "multi-layer pixel head halves depth three times; {} is not divisible by 8",
                self.feature_depth()
            )));
        }
        Ok(())
    }
}

/// One conv layer's tensors: kernels `[k, k, Cin, Cout]` and bias `[Cout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// A fully-connected map applied per pixel: weight `[out, in]`, bias `[out]`.
/// Doubles as the container for gradients of the same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

/// Pixel-head parameters (or gradients, which share the layout).
#[derive(Debug, Clone, PartialEq)]
pub enum PixelHeadParams {
    Linear(Dense),
    MultiLayer { stages: Vec<Dense>, out: Dense },
}

/// Every trainable tensor. The encoder and image head always exist; the
/// pixel head is absent in checkpoints from the baseline stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<ConvLayer>,
    pub image_head: Dense,
    pub pixel_head: Option<PixelHeadParams>,
}

impl ModelParams {
    /// Fresh encoder and image head (no pixel head): He-uniform kernels for
    /// the ReLU stack, Glorot-uniform head weights, zero biases.
    pub fn init_backbone(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let mut encoder = Vec::new();
        let mut cin = 3;
        for &cout in &config.conv_widths {
            encoder.push(ConvLayer {
                kernels: he_uniform(&[k, k, cin, cout], k * k * cin, rng),
                bias: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        let d = config.feature_depth();
        let kk = config.num_classes;
        Ok(Self {
            encoder,
            image_head: Dense {
                w: glorot_uniform(&[kk, d], d, kk, rng),
                b: Tensor::zeros(&[kk]),
            },
            pixel_head: None,
        })
    }

    /// Adds a freshly initialized pixel head of the configured kind.
    pub fn attach_pixel_head(&mut self, config: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
        config.validate()?;
        let d = config.feature_depth();
        self.pixel_head = Some(match config.pixel_head {
            PixelHeadKind::Linear => PixelHeadParams::Linear(Dense {
                w: glorot_uniform(&[2, d], d, 2, rng),
                b: Tensor::zeros(&[2]),
            }),
            PixelHeadKind::MultiLayer => {
                let mut stages = Vec::new();
                let mut cin = d;
                for cout in config.pixel_stage_widths() {
                    stages.push(Dense {
                        w: glorot_uniform(&[cout, cin], cin, cout, rng),
                        b: Tensor::zeros(&[cout]),
                    });
                    cin = cout;
                }
                PixelHeadParams::MultiLayer {
                    stages,
                    out: Dense {
                        w: glorot_uniform(&[2, cin], cin, 2, rng),
                        b: Tensor::zeros(&[2]),
                    },
                }
            }
        });
        Ok(())
    }

    /// Canonical (name, tensor) listing; checkpoint files and the optimizer
    /// both follow this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.kernels"), &layer.kernels));
            out.push((format!("encoder.{i}.bias"), &layer.bias));
        }
        out.push(("image_head.w".into(), &self.image_head.w));
        out.push(("image_head.b".into(), &self.image_head.b));
        match &self.pixel_head {
            None => {}
            Some(PixelHeadParams::Linear(d)) => {
                out.push(("pixel_head.w".into(), &d.w));
                out.push(("pixel_head.b".into(), &d.b));
            }
            Some(PixelHeadParams::MultiLayer { stages, out: o }) => {
                for (i, s) in stages.iter().enumerate() {
                    out.push((format!("pixel_head.stage{i}.w"), &s.w));
                    out.push((format!("pixel_head.stage{i}.b"), &s.b));
                }
                out.push(("pixel_head.out.w".into(), &o.w));
                out.push(("pixel_head.out.b".into(), &o.b));
            }
        }
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.encoder {
            out.push(&mut layer.kernels);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.image_head.w);
        out.push(&mut self.image_head.b);
        match &mut self.pixel_head {
            None => {}
            Some(PixelHeadParams::Linear(d)) => {
                out.push(&mut d.w);
                out.push(&mut d.b);
            }
            Some(PixelHeadParams::MultiLayer { stages, out: o }) => {
                for s in stages {
                    out.push(&mut s.w);
                    out.push(&mut s.b);
                }
                out.push(&mut o.w);
                out.push(&mut o.b);
            }
        }
        out
    }

    fn expected_layout(config: &ModelConfig, with_pixel_head: bool) -> Vec<(String, Vec<usize>)> {
        let k = config.kernel_size;
        let d = config.feature_depth();
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, &cout) in config.conv_widths.iter().enumerate() {
            out.push((format!("encoder.{i}.kernels"), vec![k, k, cin, cout]));
            out.push((format!("encoder.{i}.bias"), vec![cout]));
            cin = cout;
        }
        out.push(("image_head.w".into(), vec![config.num_classes, d]));
        out.push(("image_head.b".into(), vec![config.num_classes]));
        if with_pixel_head {
            match config.pixel_head {
                PixelHeadKind::Linear => {
                    out.push(("pixel_head.w".into(), vec![2, d]));
                    out.push(("pixel_head.b".into(), vec![2]));
                }
                PixelHeadKind::MultiLayer => {
                    let mut cin = d;
                    for (i, cout) in config.pixel_stage_widths().into_iter().enumerate() {
                        out.push((format!("pixel_head.stage{i}.w"), vec![cout, cin]));
                        out.push((format!("pixel_head.stage{i}.b"), vec![cout]));
                        cin = cout;
                    }
                    out.push(("pixel_head.out.w".into(), vec![2, cin]));
                    out.push(("pixel_head.out.b".into(), vec![2]));
                }
            }
        }
        out
    }

    /// Rebuilds params from a named tensor sequence, validating names,
    /// shapes, and finiteness against the config.
    pub fn from_named(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let bare = Self::expected_layout(config, false);
        let full = Self::expected_layout(config, true);
        let expected = if tensors.len() == bare.len() {
            bare
        } else if tensors.len() == full.len() {
            full
        } else {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, expected {} (no pixel head) or {}",
                tensors.len(),
                Self::expected_layout(config, false).len(),
                Self::expected_layout(config, true).len()
            )));
        };
        for ((name, tensor), (want_name, want_shape)) in tensors.iter().zip(&expected) {
            if name != want_name {
                return Err(Error::Format(format!(
                    "checkpoint tensor '{name}' where '{want_name}' was expected"
                )));
            }
            if tensor.shape() != want_shape.as_slice() {
                return Err(Error::Format(format!(
                    "checkpoint tensor '{name}' has shape {:?}, config requires {want_shape:?}",
                    tensor.shape()
                )));
            }
            if !tensor.is_finite() {
                return Err(Error::Format(format!(
                    "checkpoint tensor '{name}' contains non-finite values"
                )));
            }
        }
        let with_head = tensors.len() == Self::expected_layout(config, true).len();
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let mut encoder = Vec::new();
        for _ in 0..config.conv_widths.len() {
            encoder.push(ConvLayer {
                kernels: it.next().unwrap(),
                bias: it.next().unwrap(),
            });
        }
        let image_head = Dense {
            w: it.next().unwrap(),
            b: it.next().unwrap(),
        };
        let pixel_head = if with_head {
            Some(match config.pixel_head {
                PixelHeadKind::Linear => PixelHeadParams::Linear(Dense {
                    w: it.next().unwrap(),
                    b: it.next().unwrap(),
                }),
                PixelHeadKind::MultiLayer => {
                    let mut stages = Vec::new();
                    for _ in 0..3 {
                        stages.push(Dense {
                            w: it.next().unwrap(),
                            b: it.next().unwrap(),
                        });
                    }
                    PixelHeadParams::MultiLayer {
                        stages,
                        out: Dense {
                            w: it.next().unwrap(),
                            b: it.next().unwrap(),
                        },
                    }
                }
            })
        } else {
            None
        };
        Ok(Self {
            encoder,
            image_head,
            pixel_head,
        })
    }
}

/// A class activation map, min-max normalized to [0, 1]. `degenerate` marks
/// a constant raw map that normalized to all zeros.
#[derive(Debug, Clone)]
pub struct Cam {
    pub map: Tensor,
    pub class_index: usize,
    pub source: String,
    pub degenerate: bool,
}

/// Per-pixel (background, foreground) probabilities, `[H, W, 2]`.
#[derive(Debug, Clone)]
pub struct LocMaps {
    pub s: Tensor,
}

impl LocMaps {
    /// The foreground channel as a standalone `[H, W]` score map.
    pub fn score_map(&self) -> Tensor {
        let (h, w) = (self.s.shape()[0], self.s.shape()[1]);
        let mut out = Tensor::zeros(&[h, w]);
        for i in 0..h {
            for j in 0..w {
                out.set2(i, j, self.s.at3(i, j, 1));
            }
        }
        out
    }
}

/// Caches for one encoder pass, consumed by [`encode_backward`].
pub struct EncodeCache {
    convs: Vec<Conv2dCache>,
    relus: Vec<ReluCache>,
    pool: Option<AvgPoolCache>,
    /// Spatial size right before the final upsample, when one happened.
    pre_upsample: Option<(usize, usize)>,
}

/// Per-layer (kernel, bias) gradients of the encoder.
pub struct EncoderGrads {
    pub layers: Vec<ConvLayer>,
}

fn check_image(x: &Tensor) -> Result<()> {
    if x.rank() != 3 || x.shape()[2] != 3 {
        return Err(Error::Dimension(format!(
            "encoder input must be [H, W, 3], got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Full encoder pass with caches: conv+ReLU stack, optional mean-pool after
/// the first layer, bilinear upsample back to input resolution at the end.
pub fn encode_forward(
    x: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(Tensor, EncodeCache)> {
    check_image(x)?;
    if params.encoder.len() != config.conv_widths.len() {
        return Err(Error::Config(format!(
            "{} encoder layers but config lists {} widths",
            params.encoder.len(),
            config.conv_widths.len()
        )));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let mut cur = x.clone();
    let mut convs = Vec::new();
    let mut relus = Vec::new();
    let mut pool = None;
    for (i, layer) in params.encoder.iter().enumerate() {
        let (z, conv_cache) = conv2d(&cur, &layer.kernels, &layer.bias)?;
        convs.push(conv_cache);
        let (a, relu_cache) = relu(&z);
        relus.push(relu_cache);
        cur = a;
        if i == 0 && config.downsample_factor > 1 {
            let (pooled, pc) = avg_pool2d(&cur, config.downsample_factor)?;
            pool = Some(pc);
            cur = pooled;
        }
    }
    let pre_upsample = if cur.shape()[0] != h || cur.shape()[1] != w {
        let from = (cur.shape()[0], cur.shape()[1]);
        cur = bilinear_upsample(&cur, h, w)?;
        Some(from)
    } else {
        None
    };
    Ok((
        cur,
        EncodeCache {
            convs,
            relus,
            pool,
            pre_upsample,
        },
    ))
}

/// Encoder features without caches.
pub fn encode(x: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<Tensor> {
    encode_forward(x, params, config).map(|(f, _)| f)
}

/// Backpropagates a feature gradient through the encoder, returning one
/// (kernel, bias) gradient pair per layer.
pub fn encode_backward(grad_f: &Tensor, cache: &EncodeCache) -> Result<EncoderGrads> {
    let mut grad = if let Some((ph, pw)) = cache.pre_upsample {
        bilinear_upsample_backward(grad_f, ph, pw)?
    } else {
        grad_f.clone()
    };
    let mut layers = vec![
        ConvLayer {
            kernels: Tensor::zeros(&[1]),
            bias: Tensor::zeros(&[1]),
        };
        cache.convs.len()
    ];
    for i in (0..cache.convs.len()).rev() {
        if i == 0 {
            if let Some(pc) = &cache.pool {
                grad = avg_pool2d_backward(&grad, pc)?;
            }
        }
        grad = relu_backward(&grad, &cache.relus[i])?;
        let g = conv2d_backward(&grad, &cache.convs[i])?;
        layers[i] = ConvLayer {
            kernels: g.kernels,
            bias: g.bias,
        };
        grad = g.input;
    }
    Ok(EncoderGrads { layers })
}

/// Cache for the image head: pooled features and output probabilities.
pub struct ImageHeadCache {
    gap: GapCache,
    pooled: Tensor,
}

/// Image-class probabilities: softmax(W * mean-pooled features + b).
pub fn classify_image_forward(
    f: &Tensor,
    head: &Dense,
) -> Result<(Tensor, ImageHeadCache)> {
    let (pooled, gap) = global_avg_pool(f)?;
    let d = pooled.len();
    if head.w.rank() != 2 || head.w.shape()[1] != d {
        return Err(Error::Dimension(format!(
            "image head weight {:?} vs feature depth {d}",
            head.w.shape()
        )));
    }
    let kk = head.w.shape()[0];
    if head.b.shape() != [kk] {
        return Err(Error::Dimension(format!(
            "image head bias {:?}, expected [{kk}]",
            head.b.shape()
        )));
    }
    let col = pooled.clone().reshaped(&[d, 1])?;
    let mut logits = matmul(&head.w, &col)?.reshaped(&[kk])?;
    for (l, &b) in logits.data_mut().iter_mut().zip(head.b.data()) {
        *l += b;
    }
    softmax_in_place(logits.data_mut());
    Ok((logits, ImageHeadCache { gap, pooled }))
}

pub fn classify_image(f: &Tensor, head: &Dense) -> Result<Tensor> {
    classify_image_forward(f, head).map(|(p, _)| p)
}

/// Image-head backward from the gradient with respect to the logits
/// (losses fuse softmax and cross-entropy, so this is `probs - onehot`).
/// Returns (feature gradient, weight gradient, bias gradient).
pub fn image_head_backward(
    grad_logits: &Tensor,
    head: &Dense,
    cache: &ImageHeadCache,
) -> Result<(Tensor, Dense)> {
    let kk = head.w.shape()[0];
    let d = head.w.shape()[1];
    if grad_logits.shape() != [kk] {
        return Err(Error::Dimension(format!(
            "image head grad {:?}, expected [{kk}]",
            grad_logits.shape()
        )));
    }
    // grad_w[k, c] = grad_logits[k] * pooled[c]
    let g_col = grad_logits.clone().reshaped(&[kk, 1])?;
    let p_row = cache.pooled.clone().reshaped(&[1, d])?;
    let grad_w = matmul(&g_col, &p_row)?;
    let grad_b = grad_logits.clone();
    // grad_pooled[c] = sum_k W[k, c] * grad_logits[k]
    let grad_pooled = matmul(&transpose(&head.w)?, &g_col)?.reshaped(&[d])?;
    let grad_f = global_avg_pool_backward(&grad_pooled, &cache.gap)?;
    Ok((grad_f, Dense { w: grad_w, b: grad_b }))
}

enum PixelHeadCacheKind {
    Linear,
    MultiLayer {
        /// Input to each stage and to the output layer, as [H*W, width] mats.
        inputs: Vec<Tensor>,
        relus: Vec<ReluCache>,
    },
}

/// Cache for the pixel head: the flattened feature matrix, per-stage
/// activations for the multi-layer variant, and the output probabilities.
pub struct PixelHeadCache {
    f_mat: Tensor,
    h: usize,
    w: usize,
    probs: Tensor,
    kind: PixelHeadCacheKind,
}

fn dense_rows(input: &Tensor, dense: &Dense) -> Result<Tensor> {
    let mut out = matmul(input, &transpose(&dense.w)?)?;
    let cols = dense.w.shape()[0];
    for row in out.data_mut().chunks_exact_mut(cols) {
        for (v, &b) in row.iter_mut().zip(dense.b.data()) {
            *v += b;
        }
    }
    Ok(out)
}

/// Per-pixel two-way classification of features into (background,
/// foreground) probabilities.
pub fn classify_pixels_forward(
    f: &Tensor,
    head: &PixelHeadParams,
) -> Result<(LocMaps, PixelHeadCache)> {
    if f.rank() != 3 {
        return Err(Error::Dimension(format!(
            "pixel head expects [H, W, d] features, got {:?}",
            f.shape()
        )));
    }
    let (h, w, d) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let f_mat = f.clone().reshaped(&[h * w, d])?;
    let (mut logits, kind) = match head {
        PixelHeadParams::Linear(dense) => {
            if dense.w.shape() != [2, d] {
                return Err(Error::Dimension(format!(
                    "linear pixel head weight {:?}, expected [2, {d}]",
                    dense.w.shape()
                )));
            }
            (dense_rows(&f_mat, dense)?, PixelHeadCacheKind::Linear)
        }
        PixelHeadParams::MultiLayer { stages, out } => {
            let mut inputs = Vec::new();
            let mut relus = Vec::new();
            let mut cur = f_mat.clone();
            for stage in stages {
                if stage.w.shape()[1] != cur.shape()[1] {
                    return Err(Error::Dimension(format!(
                        "pixel head stage expects {} channels, got {}",
                        stage.w.shape()[1],
                        cur.shape()[1]
                    )));
                }
                inputs.push(cur.clone());
                let z = dense_rows(&cur, stage)?;
                let (a, rc) = relu(&z);
                relus.push(rc);
                cur = a;
            }
            inputs.push(cur.clone());
            (
                dense_rows(&cur, out)?,
                PixelHeadCacheKind::MultiLayer { inputs, relus },
            )
        }
    };
    for row in logits.data_mut().chunks_exact_mut(2) {
        softmax_in_place(row);
    }
    let probs = logits;
    let s = probs.clone().reshaped(&[h, w, 2])?;
    Ok((
        LocMaps { s },
        PixelHeadCache {
            f_mat,
            h,
            w,
            probs,
            kind,
        },
    ))
}

pub fn classify_pixels(f: &Tensor, head: &PixelHeadParams) -> Result<LocMaps> {
    classify_pixels_forward(f, head).map(|(s, _)| s)
}

/// Pixel-head backward from the gradient with respect to the per-pixel
/// logits `[H, W, 2]`. Returns the feature gradient and head gradients in
/// the same layout as the parameters.
pub fn pixel_head_backward(
    grad_logits: &Tensor,
    head: &PixelHeadParams,
    cache: &PixelHeadCache,
) -> Result<(Tensor, PixelHeadParams)> {
    let (h, w) = (cache.h, cache.w);
    if grad_logits.shape() != [h, w, 2] {
        return Err(Error::Dimension(format!(
            "pixel head grad {:?}, expected [{h}, {w}, 2]",
            grad_logits.shape()
        )));
    }
    let g_mat = grad_logits.clone().reshaped(&[h * w, 2])?;
    let dense_backward = |g: &Tensor, input: &Tensor, dense: &Dense| -> Result<(Tensor, Dense)> {
        let grad_w = matmul(&transpose(g)?, input)?;
        let cols = dense.w.shape()[0];
        let mut grad_b = Tensor::zeros(&[cols]);
        for row in g.data().chunks_exact(cols) {
            for (b, &v) in grad_b.data_mut().iter_mut().zip(row) {
                *b += v;
            }
        }
        let grad_in = matmul(g, &dense.w)?;
        Ok((grad_in, Dense { w: grad_w, b: grad_b }))
    };
    match (head, &cache.kind) {
        (PixelHeadParams::Linear(dense), PixelHeadCacheKind::Linear) => {
            let (grad_in, grads) = dense_backward(&g_mat, &cache.f_mat, dense)?;
            let d = cache.f_mat.shape()[1];
            Ok((
                grad_in.reshaped(&[h, w, d])?,
                PixelHeadParams::Linear(grads),
            ))
        }
        (
            PixelHeadParams::MultiLayer { stages, out },
            PixelHeadCacheKind::MultiLayer { inputs, relus },
        ) => {
            let (mut g, out_grads) = dense_backward(&g_mat, inputs.last().unwrap(), out)?;
            let mut stage_grads = vec![
                Dense {
                    w: Tensor::zeros(&[1]),
                    b: Tensor::zeros(&[1]),
                };
                stages.len()
            ];
            for i in (0..stages.len()).rev() {
                g = relu_backward(&g, &relus[i])?;
                let (gi, sg) = dense_backward(&g, &inputs[i], &stages[i])?;
                stage_grads[i] = sg;
                g = gi;
            }
            let d = cache.f_mat.shape()[1];
            Ok((
                g.reshaped(&[h, w, d])?,
                PixelHeadParams::MultiLayer {
                    stages: stage_grads,
                    out: out_grads,
                },
            ))
        }
        _ => Err(Error::Config(
            "pixel head parameters and cache disagree on the head kind".into(),
        )),
    }
}

/// The probabilities the pixel head produced in the cached forward pass,
/// flattened `[H*W, 2]`. Losses use this to fuse softmax and cross-entropy.
pub fn cached_pixel_probs(cache: &PixelHeadCache) -> &Tensor {
    &cache.probs
}

/// Raw activation map of class `k`: the image-head weight row projected onto
/// the features at every location.
pub fn raw_cam(f: &Tensor, image_head_w: &Tensor, k: usize) -> Result<Tensor> {
    if f.rank() != 3 {
        return Err(Error::Dimension(format!(
            "raw_cam expects [H, W, d] features, got {:?}",
            f.shape()
        )));
    }
    let (h, w, d) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    if image_head_w.rank() != 2 || image_head_w.shape()[1] != d {
        return Err(Error::Dimension(format!(
            "image head weight {:?} vs feature depth {d}",
            image_head_w.shape()
        )));
    }
    if k >= image_head_w.shape()[0] {
        return Err(Error::Index(format!(
            "class {k} out of range for {} classes",
            image_head_w.shape()[0]
        )));
    }
    let row = &image_head_w.data()[k * d..(k + 1) * d];
    let mut out = Tensor::zeros(&[h, w]);
    for (px, o) in f.data().chunks_exact(d).zip(out.data_mut()) {
        *o = px.iter().zip(row).map(|(a, b)| a * b).sum();
    }
    Ok(out)
}

/// Min-max normalization to [0, 1]. A constant map (spread below 1e-12)
/// returns all zeros with the degenerate flag set.
pub fn normalize_cam(raw: &Tensor) -> (Tensor, bool) {
    let min = raw.min();
    let max = raw.max();
    if max - min < 1e-12 {
        return (Tensor::zeros(raw.shape()), true);
    }
    let mut out = raw.clone();
    let range = max - min;
    for v in out.data_mut() {
        *v = (*v - min) / range;
    }
    (out, false)
}

/// Normalized activation map of class `k` from features and the image head.
pub fn baseline_cam(f: &Tensor, image_head_w: &Tensor, k: usize, source: &str) -> Result<Cam> {
    let raw = raw_cam(f, image_head_w, k)?;
    let (map, degenerate) = normalize_cam(&raw);
    Ok(Cam {
        map,
        class_index: k,
        source: source.to_string(),
        degenerate,
    })
}

/// Full inference: one encoder pass feeds both heads. Requires a pixel head.
pub fn infer(x: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<(Tensor, LocMaps)> {
    let head = params
        .pixel_head
        .as_ref()
        .ok_or_else(|| Error::Config("model has no pixel head".into()))?;
    let f = encode(x, params, config)?;
    let probs = classify_image(&f, &params.image_head)?;
    let loc = classify_pixels(&f, head)?;
    Ok((probs, loc))
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

/// Serializes config and parameters: magic, version, length-prefixed config
/// JSON, then each tensor as (name length, name, rank, extents, f64 payload),
/// all integers little-endian u32.
pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    let config_json = serde_json::to_vec(config)?;
    write_u32(&mut w, config_json.len() as u32)?;
    w.write_all(&config_json)?;
    for (name, tensor) in params.named_tensors() {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, tensor.rank() as u32)?;
        for &e in tensor.shape() {
            write_u32(&mut w, e as u32)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) => Err(Error::Format(format!(
                "checkpoint truncated reading {what} at byte {}: {e}",
                self.offset
            ))),
        }
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read_exact_at(&mut buf, what)?;
        Ok(u32::from_le_bytes(buf))
    }

    /// Fills the buffer completely, or reports a clean end-of-file if the
    /// stream was already exhausted. EOF partway through is a format error.
    fn fill_or_eof(&mut self, buf: &mut [u8], what: &str) -> Result<bool> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) if got == 0 => return Ok(false),
                Ok(0) => {
                    return Err(Error::Format(format!(
                        "checkpoint truncated reading {what} at byte {}",
                        self.offset + got as u64
                    )))
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::Io(e)),
            }
        }
        self.offset += buf.len() as u64;
        Ok(true)
    }
}

/// Reads a checkpoint written by [`save_checkpoint`], validating the header
/// and every tensor shape against the embedded config.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let file = File::open(path)?;
    let mut r = CountingReader {
        inner: BufReader::new(file),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?} at byte 0, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = r.read_u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let config_len = r.read_u32("config length")? as usize;
    let mut config_buf = vec![0u8; config_len];
    r.read_exact_at(&mut config_buf, "config json")?;
    let config: ModelConfig = serde_json::from_slice(&config_buf)?;

    let mut tensors = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        if !r.fill_or_eof(&mut len_buf, "tensor name length")? {
            break;
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact_at(&mut name_buf, "tensor name")?;
        let name = String::from_utf8(name_buf).map_err(|_| {
            Error::Format(format!("tensor name is not UTF-8 near byte {}", r.offset))
        })?;
        let rank = r.read_u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32("tensor extent")? as usize);
        }
        let volume: usize = shape.iter().product();
        let mut data = vec![0.0f64; volume];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact_at(&mut buf, "tensor payload")?;
            *v = f64::from_le_bytes(buf);
        }
        let tensor = Tensor::new(&shape, data).map_err(|e| {
            Error::Format(format!("tensor '{name}' near byte {}: {e}", r.offset))
        })?;
        tensors.push((name, tensor));
    }
    let params = ModelParams::from_named(&config, tensors)?;
    Ok((config, params))
}
