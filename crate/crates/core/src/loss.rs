//! Training objectives: image cross-entropy, partial pixel cross-entropy
//! over sampled locations, and their weighted composite, each returning
//! exact gradients with respect to the pre-softmax logits.
//!
//! [`composite_forward_backward`] runs the whole per-image training step:
//! one encoder pass feeds both heads, both loss branches backpropagate, and
//! the feature gradients merge before flowing back through the encoder.

use crate::error::{Error, Result};
use crate::model::{
    classify_image_forward, classify_pixels_forward, encode_backward, encode_forward,
    image_head_backward, pixel_head_backward, ConvLayer, Dense, LocMaps, ModelConfig,
    ModelParams, PixelHeadParams,
};
use crate::sampling::PixelPseudoLabels;
use crate::tensor::Tensor;

/// Floor for probabilities entering a logarithm.
const LOG_CLAMP: f64 = 1e-300;

/// The three scalars of one composite evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub image_ce: f64,
    pub pixel_ce: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Image cross-entropy value plus its gradient with respect to the image
/// logits (softmax and cross-entropy fused: probs minus one-hot).
#[derive(Debug, Clone)]
pub struct ImageCe {
    pub loss: f64,
    pub grad_logits: Tensor,
    /// The true-class probability underflowed and was clamped.
    pub clamped: bool,
}

/// Cross-entropy of the true class against softmax probabilities.
pub fn image_ce(probs: &Tensor, y: usize) -> Result<ImageCe> {
    if probs.rank() != 1 {
        return Err(Error::Dimension(format!(
            "image_ce expects a probability vector, got {:?}",
            probs.shape()
        )));
    }
    let k = probs.len();
    if y >= k {
        return Err(Error::Index(format!("label {y} out of range for {k} classes")));
    }
    let p = probs.data()[y];
    let clamped = p < LOG_CLAMP;
    let loss = -p.max(LOG_CLAMP).ln();
    let mut grad = probs.clone();
    grad.data_mut()[y] -= 1.0;
    Ok(ImageCe {
        loss,
        grad_logits: grad,
        clamped,
    })
}

/// Partial pixel cross-entropy value plus its gradient with respect to the
/// per-pixel logits `[H, W, 2]`, nonzero only at sampled locations.
#[derive(Debug, Clone)]
pub struct PixelCe {
    pub loss: f64,
    pub grad_logits: Tensor,
    /// No sampled pixels at all; loss is 0 by convention.
    pub empty: bool,
    /// Some sampled probability underflowed and was clamped.
    pub clamped: bool,
}

/// Mean cross-entropy over the sampled foreground pixels (against the
/// foreground channel) and background pixels (against the background
/// channel). Unsampled locations contribute nothing, in value or gradient.
pub fn partial_pixel_ce(loc: &LocMaps, labels: &PixelPseudoLabels) -> Result<PixelCe> {
    let (h, w) = (loc.s.shape()[0], loc.s.shape()[1]);
    let count = labels.fg.len() + labels.bg.len();
    let mut grad = Tensor::zeros(&[h, w, 2]);
    if count == 0 {
        return Ok(PixelCe {
            loss: 0.0,
            grad_logits: grad,
            empty: true,
            clamped: false,
        });
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut clamped = false;
    for (set, target) in [(&labels.fg, 1usize), (&labels.bg, 0usize)] {
        for &(i, j) in set.iter() {
            if i >= h || j >= w {
                return Err(Error::Index(format!(
                    "sampled pixel ({i}, {j}) outside {h}x{w} map"
                )));
            }
            let p = loc.s.at3(i, j, target);
            if p < LOG_CLAMP {
                clamped = true;
            }
            loss -= p.max(LOG_CLAMP).ln();
            // Fused softmax + cross-entropy: s - onehot(target), averaged.
            for c in 0..2 {
                let onehot = f64::from(c == target);
                let cur = grad.at3(i, j, c);
                grad.set3(i, j, c, cur + (loc.s.at3(i, j, c) - onehot) * inv);
            }
        }
    }
    Ok(PixelCe {
        loss: loss * inv,
        grad_logits: grad,
        empty: false,
        clamped,
    })
}

/// Combines the two branch losses: total = image + lambda * pixel.
pub fn total_loss(image_ce: f64, pixel_ce: f64, lambda: f64) -> Result<LossBreakdown> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda {lambda} must be >= 0")));
    }
    Ok(LossBreakdown {
        image_ce,
        pixel_ce,
        total: image_ce + lambda * pixel_ce,
        lambda,
    })
}

/// Gradients for every tensor in a [`ModelParams`], in the same layout.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoder: Vec<ConvLayer>,
    pub image_head: Dense,
    pub pixel_head: Option<PixelHeadParams>,
}

fn zeros_like_head(head: &PixelHeadParams) -> PixelHeadParams {
    let z = |t: &Tensor| Tensor::zeros(t.shape());
    match head {
        PixelHeadParams::Linear(d) => PixelHeadParams::Linear(Dense {
            w: z(&d.w),
            b: z(&d.b),
        }),
        PixelHeadParams::MultiLayer { stages, out } => PixelHeadParams::MultiLayer {
            stages: stages
                .iter()
                .map(|s| Dense {
                    w: z(&s.w),
                    b: z(&s.b),
                })
                .collect(),
            out: Dense {
                w: z(&out.w),
                b: z(&out.b),
            },
        },
    }
}

impl ModelGrads {
    /// All-zero gradients matching the parameter shapes.
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            encoder: params
                .encoder
                .iter()
                .map(|l| ConvLayer {
                    kernels: Tensor::zeros(l.kernels.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
            image_head: Dense {
                w: Tensor::zeros(params.image_head.w.shape()),
                b: Tensor::zeros(params.image_head.b.shape()),
            },
            pixel_head: params.pixel_head.as_ref().map(zeros_like_head),
        }
    }

    /// Tensors in the canonical parameter order (matches
    /// `ModelParams::tensors_mut`).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.encoder {
            out.push(&layer.kernels);
            out.push(&layer.bias);
        }
        out.push(&self.image_head.w);
        out.push(&self.image_head.b);
        match &self.pixel_head {
            None => {}
            Some(PixelHeadParams::Linear(d)) => {
                out.push(&d.w);
                out.push(&d.b);
            }
            Some(PixelHeadParams::MultiLayer { stages, out: o }) => {
                for s in stages {
                    out.push(&s.w);
                    out.push(&s.b);
                }
                out.push(&o.w);
                out.push(&o.b);
            }
        }
        out
    }

    fn tensors_mut_internal(&mut self) -> Vec<&mut Tensor> {
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

    /// Adds `other * scale` elementwise; shapes must match.
    pub fn accumulate_scaled(&mut self, other: &ModelGrads, scale: f64) -> Result<()> {
        let mut mine = self.tensors_mut_internal();
        let theirs = other.tensors();
        if mine.len() != theirs.len() {
            return Err(Error::Dimension(format!(
                "gradient accumulation across different layouts: {} vs {} tensors",
                mine.len(),
                theirs.len()
            )));
        }
        for (a, b) in mine.iter_mut().zip(theirs) {
            a.add_scaled(b, scale)?;
        }
        Ok(())
    }

    /// Multiplies every gradient by `s`.
    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut_internal() {
            t.scale(s);
        }
    }
}

/// Warnings raised during one composite evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompositeFlags {
    pub image_log_clamped: bool,
    pub pixel_log_clamped: bool,
    pub pixel_labels_empty: bool,
}

/// One image's composite loss and its gradients.
#[derive(Debug)]
pub struct CompositeStep {
    pub breakdown: LossBreakdown,
    pub grads: ModelGrads,
    pub flags: CompositeFlags,
}

/// Full forward and backward pass for one image: encoder features feed the
/// image head always, and the pixel head when pseudo-labels are given. With
/// `lambda == 0` the pixel loss is still measured but its backward pass is
/// skipped, so shared gradients stay bit-identical to image-only training.
pub fn composite_forward_backward(
    x: &Tensor,
    y: usize,
    labels: Option<&PixelPseudoLabels>,
    params: &ModelParams,
    config: &ModelConfig,
    lambda: f64,
) -> Result<CompositeStep> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda {lambda} must be >= 0")));
    }
    let mut flags = CompositeFlags::default();

    let (f, encode_cache) = encode_forward(x, params, config)?;
    let (probs, image_cache) = classify_image_forward(&f, &params.image_head)?;
    let ice = image_ce(&probs, y)?;
    flags.image_log_clamped = ice.clamped;
    let (mut grad_f, image_head_grads) =
        image_head_backward(&ice.grad_logits, &params.image_head, &image_cache)?;

    let mut pixel_loss = 0.0;
    let mut pixel_head_grads = params.pixel_head.as_ref().map(zeros_like_head);
    if let (Some(head), Some(labels)) = (params.pixel_head.as_ref(), labels) {
        let (loc, pixel_cache) = classify_pixels_forward(&f, head)?;
        let pce = partial_pixel_ce(&loc, labels)?;
        flags.pixel_log_clamped = pce.clamped;
        flags.pixel_labels_empty = pce.empty;
        pixel_loss = pce.loss;
        // With zero weight the backward pass is skipped outright: even an
        // all-zero feature-gradient contribution could flip signed zeros in
        // the shared gradients, which must stay bit-identical to image-only
        // training.
        if lambda != 0.0 {
            let mut scaled = pce.grad_logits;
            scaled.scale(lambda);
            let (grad_f_pixel, head_grads) = pixel_head_backward(&scaled, head, &pixel_cache)?;
            grad_f.add_scaled(&grad_f_pixel, 1.0)?;
            pixel_head_grads = Some(head_grads);
        }
    }

    let encoder_grads = encode_backward(&grad_f, &encode_cache)?;
    let breakdown = total_loss(ice.loss, pixel_loss, lambda)?;
    Ok(CompositeStep {
        breakdown,
        grads: ModelGrads {
            encoder: encoder_grads.layers,
            image_head: image_head_grads,
            pixel_head: pixel_head_grads,
        },
        flags,
    })
}
