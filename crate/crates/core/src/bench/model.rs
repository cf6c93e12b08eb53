//! A deliberately tiny encoder–neck–decoder segmenter.
//!
//! Encoder: two stride-2 3×3 convolutions with bias and ReLU. Neck: one of
//! identity, `fuse(U, conv(U))`, `fuse(U, cdc(U))` or the full SDN with its
//! own stride-2 guidance projection. Decoder: 1×1 classifier with bias and a
//! bilinear upsample back to the input grid. Backward passes are explicit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{cdc2d_backward, conv2d_backward, conv2d_strided_backward, sdc2d_backward};
use crate::metrics::LabelMap;
use crate::ops::{cdc2d, conv2d, conv2d_strided, sdc2d, SdcKernel};
use crate::sdn::{block_fusion, SdnParams};
use crate::tensor::{concat_channels, lit, FeatureMap, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeckKind {
    None,
    Vanilla,
    Cdc,
    Sdn,
}

impl NeckKind {
    pub const ALL: [NeckKind; 4] = [NeckKind::None, NeckKind::Vanilla, NeckKind::Cdc, NeckKind::Sdn];

    pub fn name(self) -> &'static str {
        match self {
            NeckKind::None => "none",
            NeckKind::Vanilla => "vanilla",
            NeckKind::Cdc => "cdc",
            NeckKind::Sdn => "sdn",
        }
    }
}

impl std::str::FromStr for NeckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NeckKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown neck variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub width: usize,
    pub n_classes: usize,
    /// Similarity scale of the SDN neck.
    pub lambda: f64,
    /// Initial weight `β` on the neck operator's output in the fusion layer.
    pub fusion_beta: f64,
    pub neck_init: NeckInit,
    /// Rectify the neck operator's output before fusion.
    pub rectify_branch: bool,
}

/// How the neck operator and fusion weights start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeckInit {
    /// He-uniform operator weights and fusion `[I | β·R]` with `R ~ U(−1, 1)`.
    #[default]
    Random,
    /// Every neck starts as one explicit diffusion step `U + β·Ũ` per channel
    /// with fusion `[I | β·I]`. CDC and SDN get all-ones channel-diagonal
    /// weights (isotropic and guided diffusion); vanilla gets the equivalent
    /// Laplacian stencil, so it starts as the same function as CDC.
    Diffusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { in_channels: 3, width: 8, n_classes: 4, lambda: 1.0, fusion_beta: 0.1, neck_init: NeckInit::Random, rectify_branch: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Neck<T = f64> {
    None,
    Vanilla { op: SdcKernel<T>, fusion: SdcKernel<T> },
    Cdc { op: SdcKernel<T>, fusion: SdcKernel<T> },
    Sdn(SdnParams<T>),
}

impl<T: Scalar> Neck<T> {
    pub fn kind(&self) -> NeckKind {
        match self {
            Neck::None => NeckKind::None,
            Neck::Vanilla { .. } => NeckKind::Vanilla,
            Neck::Cdc { .. } => NeckKind::Cdc,
            Neck::Sdn(_) => NeckKind::Sdn,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel<T = f64> {
    pub enc1: SdcKernel<T>,
    pub enc1_bias: Tensor<T>,
    pub enc2: SdcKernel<T>,
    pub enc2_bias: Tensor<T>,
    pub neck: Neck<T>,
    pub classifier: SdcKernel<T>,
    pub classifier_bias: Tensor<T>,
    pub rectify_branch: bool,
}

/// He-style uniform init: `U(−b, b)` with `b = sqrt(6 / fan_in)`.
pub const HE_UNIFORM_GAIN: f64 = 6.0;

fn he_kernel<T: Scalar>(rng: &mut impl Rng, c_out: usize, c_in: usize, k: usize, stride_lambda: f64) -> Result<SdcKernel<T>> {
    let bound = (HE_UNIFORM_GAIN / (c_in * k * k) as f64).sqrt();
    let data = (0..c_out * c_in * k * k).map(|_| lit(rng.gen_range(-bound..bound))).collect();
    SdcKernel::new(Tensor::new(vec![c_out, c_in, k, k], data)?, 1, stride_lambda)
}

/// `[I | β·R]` with `R` uniform in `(−1, 1)`: the block starts near the identity.
fn near_identity_fusion<T: Scalar>(rng: &mut impl Rng, c: usize, beta: f64) -> Result<SdcKernel<T>> {
    let mut w = block_fusion(c, T::one(), T::zero())?;
    for co in 0..c {
        for ci in 0..c {
            w.data_mut()[co * 2 * c + c + ci] = lit(beta * rng.gen_range(-1.0..1.0));
        }
    }
    SdcKernel::new(w, 1, 1.0)
}

impl<T: Scalar> ToyModel<T> {
    /// Encoder and classifier draw from `seed`; the neck draws from a
    /// separate stream so every variant shares the same backbone init.
    pub fn new(cfg: &ModelConfig, kind: NeckKind, seed: u64) -> Result<Self> {
        if cfg.width == 0 || cfg.n_classes < 2 || cfg.in_channels == 0 {
            return Err(Error::InvalidParameter(format!("bad model config {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.width;
        let enc1 = he_kernel(&mut rng, c, cfg.in_channels, 3, 1.0)?;
        let enc2 = he_kernel(&mut rng, c, c, 3, 1.0)?;
        let classifier = he_kernel(&mut rng, cfg.n_classes, c, 1, 1.0)?;
        let mut neck_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D15E_A5E5);
        let (beta, lambda) = (cfg.fusion_beta, cfg.lambda);
        let op = |rng: &mut ChaCha8Rng, lambda: f64, plain: bool| -> Result<(SdcKernel<T>, SdcKernel<T>)> {
            match cfg.neck_init {
                NeckInit::Random => Ok((he_kernel(rng, c, c, 3, lambda)?, near_identity_fusion(rng, c, beta)?)),
                NeckInit::Diffusion => {
                    let mut k = SdcKernel::diagonal(c, 3, 3, T::one())?.with_lambda(lambda)?;
                    if plain {
                        for ch in 0..c {
                            k.weights_mut().data_mut()[(ch * c + ch) * 9 + 4] = lit(-8.0);
                        }
                    }
                    Ok((k, SdcKernel::new(block_fusion(c, T::one(), lit(beta))?, 1, 1.0)?))
                }
            }
        };
        let neck = match kind {
            NeckKind::None => Neck::None,
            NeckKind::Vanilla => {
                let (op, fusion) = op(&mut neck_rng, 1.0, true)?;
                Neck::Vanilla { op, fusion }
            }
            NeckKind::Cdc => {
                let (op, fusion) = op(&mut neck_rng, 1.0, false)?;
                Neck::Cdc { op, fusion }
            }
            NeckKind::Sdn => {
                let (sdc, fusion) = op(&mut neck_rng, lambda, false)?;
                let phi = he_kernel(&mut neck_rng, c, c, 3, 1.0)?;
                Neck::Sdn(SdnParams::new(sdc, fusion.weights().clone(), Some(phi))?)
            }
        };
        Ok(Self {
            enc1,
            enc1_bias: Tensor::zeros(vec![c])?,
            enc2,
            enc2_bias: Tensor::zeros(vec![c])?,
            neck,
            classifier,
            classifier_bias: Tensor::zeros(vec![cfg.n_classes])?,
            rectify_branch: cfg.rectify_branch,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.c_out()
    }

    pub fn cast<U: Scalar>(&self) -> Result<ToyModel<U>> {
        let k = |k: &SdcKernel<T>| SdcKernel::new(k.weights().cast(), k.dilation(), k.lambda());
        let neck = match &self.neck {
            Neck::None => Neck::None,
            Neck::Vanilla { op, fusion } => Neck::Vanilla { op: k(op)?, fusion: k(fusion)? },
            Neck::Cdc { op, fusion } => Neck::Cdc { op: k(op)?, fusion: k(fusion)? },
            Neck::Sdn(p) => Neck::Sdn(SdnParams::new(
                k(&p.sdc)?,
                p.fusion_weights().cast(),
                p.phi.as_ref().map(k).transpose()?,
            )?),
        };
        Ok(ToyModel {
            enc1: k(&self.enc1)?,
            enc1_bias: self.enc1_bias.cast(),
            enc2: k(&self.enc2)?,
            enc2_bias: self.enc2_bias.cast(),
            neck,
            classifier: k(&self.classifier)?,
            classifier_bias: self.classifier_bias.cast(),
            rectify_branch: self.rectify_branch,
        })
    }

    /// Trainable tensors in a fixed order; [`ToyModel::backward`] returns
    /// gradients in the same order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![
            self.enc1.weights_mut(),
            &mut self.enc1_bias,
            self.enc2.weights_mut(),
            &mut self.enc2_bias,
        ];
        match &mut self.neck {
            Neck::None => {}
            Neck::Vanilla { op, fusion } | Neck::Cdc { op, fusion } => {
                v.push(op.weights_mut());
                v.push(fusion.weights_mut());
            }
            Neck::Sdn(p) => {
                v.push(p.sdc.weights_mut());
                v.push(p.fusion.weights_mut());
                if let Some(phi) = &mut p.phi {
                    v.push(phi.weights_mut());
                }
            }
        }
        v.push(self.classifier.weights_mut());
        v.push(&mut self.classifier_bias);
        v
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        let mut v = vec!["enc1.weight", "enc1.bias", "enc2.weight", "enc2.bias"];
        match &self.neck {
            Neck::None => {}
            Neck::Vanilla { .. } | Neck::Cdc { .. } => v.extend(["neck.op", "neck.fusion"]),
            Neck::Sdn(p) => {
                v.extend(["neck.sdc", "neck.fusion"]);
                if p.phi.is_some() {
                    v.push("neck.phi");
                }
            }
        }
        v.extend(["classifier.weight", "classifier.bias"]);
        v
    }

    pub fn forward(&self, image: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.forward_cached(image)?.scores)
    }

    pub fn forward_cached(&self, image: &FeatureMap<T>) -> Result<Activations<T>> {
        let h1 = relu(&add_bias(conv2d_strided(image, &self.enc1, 2)?, &self.enc1_bias));
        let h2 = relu(&add_bias(conv2d_strided(&h1, &self.enc2, 2)?, &self.enc2_bias));
        let (neck_out, neck_cache) = match &self.neck {
            Neck::None => (h2.clone(), NeckCache::None),
            Neck::Vanilla { op, fusion } => {
                let cat = concat_channels(&h2, &self.branch(conv2d(&h2, op)?))?;
                (conv2d(&cat, fusion)?, NeckCache::Fused { cat, guidance: None })
            }
            Neck::Cdc { op, fusion } => {
                let cat = concat_channels(&h2, &self.branch(cdc2d(&h2, op)?))?;
                (conv2d(&cat, fusion)?, NeckCache::Fused { cat, guidance: None })
            }
            Neck::Sdn(p) => {
                let phi = p.phi.as_ref().ok_or_else(|| Error::InvalidParameter("SDN neck needs Φ".into()))?;
                let v = conv2d_strided(&h2, phi, 2)?;
                let v_up = v.bilinear_upsample(h2.height(), h2.width())?;
                let cat = concat_channels(&h2, &self.branch(sdc2d(&h2, &v_up, &p.sdc)?))?;
                (conv2d(&cat, &p.fusion)?, NeckCache::Fused { cat, guidance: Some((v.spatial(), v_up)) })
            }
        };
        let logits = add_bias(conv2d(&neck_out, &self.classifier)?, &self.classifier_bias);
        let scores = logits.bilinear_upsample(image.height(), image.width())?;
        Ok(Activations { image: image.clone(), h1, h2, neck_cache, neck_out, logits_extent: logits.spatial(), scores })
    }

    fn branch(&self, y: FeatureMap<T>) -> FeatureMap<T> {
        if self.rectify_branch {
            relu(&y)
        } else {
            y
        }
    }

    fn branch_backward(&self, d_y: FeatureMap<T>, cat: &FeatureMap<T>, c: usize) -> Result<FeatureMap<T>> {
        if self.rectify_branch {
            relu_backward(&d_y, &cat.slice_channels(c..2 * c)?)
        } else {
            Ok(d_y)
        }
    }

    /// Gradients of `Σ grad_scores ⊙ scores`, ordered as [`ToyModel::params_mut`].
    pub fn backward(&self, act: &Activations<T>, grad_scores: &FeatureMap<T>, guidance_grad: bool) -> Result<Vec<Tensor<T>>> {
        let (lh, lw) = act.logits_extent;
        let d_logits = grad_scores.bilinear_upsample_backward(lh, lw)?;
        let cls = conv2d_backward(&d_logits, &act.neck_out, &self.classifier)?;
        let cls_bias = channel_sums(&d_logits)?;
        let d_neck = cls.grad_input;

        let c = act.h2.channels();
        let mut neck_grads = Vec::new();
        let d_h2 = match (&self.neck, &act.neck_cache) {
            (Neck::None, _) => d_neck,
            (Neck::Vanilla { op, fusion } | Neck::Cdc { op, fusion }, NeckCache::Fused { cat, .. }) => {
                let fb = conv2d_backward(&d_neck, cat, fusion)?;
                let mut d_u = fb.grad_input.slice_channels(0..c)?;
                let d_y = self.branch_backward(fb.grad_input.slice_channels(c..2 * c)?, cat, c)?;
                let ob = if matches!(self.neck, Neck::Cdc { .. }) {
                    cdc2d_backward(&d_y, &act.h2, op)?
                } else {
                    conv2d_backward(&d_y, &act.h2, op)?
                };
                d_u.tensor_mut().axpy(T::one(), ob.grad_input.tensor())?;
                neck_grads.push(ob.grad_weights);
                neck_grads.push(fb.grad_weights);
                d_u
            }
            (Neck::Sdn(p), NeckCache::Fused { cat, guidance: Some((v_extent, v_up)) }) => {
                let phi = p.phi.as_ref().expect("checked in forward");
                let fb = conv2d_backward(&d_neck, cat, &p.fusion)?;
                let mut d_u = fb.grad_input.slice_channels(0..c)?;
                let d_y = self.branch_backward(fb.grad_input.slice_channels(c..2 * c)?, cat, c)?;
                let sb = sdc2d_backward(&d_y, &act.h2, v_up, &p.sdc)?;
                d_u.tensor_mut().axpy(T::one(), sb.grad_input.tensor())?;
                let phi_grad = if guidance_grad {
                    let d_v = sb.grad_guidance.bilinear_upsample_backward(v_extent.0, v_extent.1)?;
                    let pb = conv2d_strided_backward(&d_v, &act.h2, phi, 2)?;
                    d_u.tensor_mut().axpy(T::one(), pb.grad_input.tensor())?;
                    pb.grad_weights
                } else {
                    phi.weights().zeros_like()
                };
                neck_grads.push(sb.grad_weights);
                neck_grads.push(fb.grad_weights);
                neck_grads.push(phi_grad);
                d_u
            }
            _ => return Err(Error::InvalidParameter("activation cache does not match neck".into())),
        };

        let d_pre2 = relu_backward(&d_h2, &act.h2)?;
        let e2 = conv2d_strided_backward(&d_pre2, &act.h1, &self.enc2, 2)?;
        let d_pre1 = relu_backward(&e2.grad_input, &act.h1)?;
        let e1 = conv2d_strided_backward(&d_pre1, &act.image, &self.enc1, 2)?;

        let mut grads = vec![e1.grad_weights, channel_sums(&d_pre1)?, e2.grad_weights, channel_sums(&d_pre2)?];
        grads.extend(neck_grads);
        grads.push(cls.grad_weights);
        grads.push(cls_bias);
        Ok(grads)
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Activations<T> {
    image: FeatureMap<T>,
    h1: FeatureMap<T>,
    h2: FeatureMap<T>,
    neck_cache: NeckCache<T>,
    neck_out: FeatureMap<T>,
    logits_extent: (usize, usize),
    pub scores: FeatureMap<T>,
}

#[derive(Clone, Debug)]
enum NeckCache<T> {
    None,
    Fused { cat: FeatureMap<T>, guidance: Option<((usize, usize), FeatureMap<T>)> },
}

fn add_bias<T: Scalar>(mut x: FeatureMap<T>, bias: &Tensor<T>) -> FeatureMap<T> {
    let n = x.height() * x.width();
    for (c, chunk) in x.data_mut().chunks_mut(n).enumerate() {
        let b = bias.data()[c];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
    x
}

fn relu<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(|v| v.max(T::zero()))
}

fn relu_backward<T: Scalar>(grad: &FeatureMap<T>, out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let (c, h, w) = out.dims();
    let data = grad
        .data()
        .iter()
        .zip(out.data())
        .map(|(&g, &o)| if o > T::zero() { g } else { T::zero() })
        .collect();
    FeatureMap::new(c, h, w, data)
}

fn channel_sums<T: Scalar>(x: &FeatureMap<T>) -> Result<Tensor<T>> {
    let n = x.height() * x.width();
    let sums = x.data().chunks(n).map(|ch| ch.iter().fold(T::zero(), |a, &v| a + v)).collect();
    Tensor::new(vec![x.channels()], sums)
}

/// Mean pixel-wise softmax cross-entropy and its gradient with respect to the scores.
pub fn loss_and_grad<T: Scalar>(scores: &FeatureMap<T>, labels: &LabelMap) -> Result<(f64, FeatureMap<T>)> {
    let (k, h, w) = scores.dims();
    if (labels.height(), labels.width()) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "scores {h}x{w} vs labels {}x{}",
            labels.height(),
            labels.width()
        )));
    }
    labels.check_classes(k)?;
    let n = (h * w) as f64;
    let inv_n = lit::<T>(1.0 / n);
    let mut grad = scores.zeros_like();
    let mut total = 0.0;
    let mut probs = vec![T::zero(); k];
    for y in 0..h {
        for x in 0..w {
            let m = (0..k).map(|c| scores.get(c, y, x)).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (c, p) in probs.iter_mut().enumerate() {
                *p = (scores.get(c, y, x) - m).exp();
                z = z + *p;
            }
            let label = labels.get(y, x);
            total += (m + z.ln() - scores.get(label, y, x)).as_f64();
            for (c, &p) in probs.iter().enumerate() {
                let onehot = if c == label { T::one() } else { T::zero() };
                grad.set(c, y, x, (p / z - onehot) * inv_n);
            }
        }
    }
    Ok((total / n, grad))
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn argmax_labels<T: Scalar>(scores: &FeatureMap<T>) -> Result<LabelMap> {
    let (k, h, w) = scores.dims();
    LabelMap::from_fn(h, w, |y, x| {
        let mut best = 0;
        for c in 1..k {
            if scores.get(c, y, x) > scores.get(best, y, x) {
                best = c;
            }
        }
        best
    })
}
