//! Neighborhood operators: vanilla convolution, central difference
//! convolution (CDC) and semantic difference convolution (SDC).
//!
//! All three share one tap geometry (odd `h × w` window, dilation `d`,
//! replicate padding) and one accumulation order: taps row-major, then input
//! channels. SDC weights each center-subtracted difference by a similarity
//! `S(V(q), V(p)) = g(mean_c (V_c(q) − V_c(p))²)` computed once per pixel pair
//! and shared across channels.

use crate::diffusion::DiffusivityConfig;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{clamp_index, lit, FeatureMap, Scalar, Tensor};

/// Weights `(C_out, C_in, h, w)` plus tap geometry and the similarity scale.
#[derive(Clone, Debug, PartialEq)]
pub struct SdcKernel<T = f64> {
    weights: Tensor<T>,
    dilation: usize,
    similarity: DiffusivityConfig,
}

impl<T: Scalar> SdcKernel<T> {
    pub fn new(weights: Tensor<T>, dilation: usize, lambda: f64) -> Result<Self> {
        if weights.rank() != 4 {
            return Err(Error::InvalidShape(format!("kernel weights need rank 4, got {:?}", weights.shape())));
        }
        let (kh, kw) = (weights.shape()[2], weights.shape()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidParameter(format!("kernel {kh}x{kw} must have odd extents")));
        }
        if dilation == 0 {
            return Err(Error::InvalidParameter("dilation must be >= 1".into()));
        }
        Ok(Self { weights, dilation, similarity: DiffusivityConfig::new(lambda)? })
    }

    pub fn ones(c_out: usize, c_in: usize, kh: usize, kw: usize) -> Result<Self> {
        Self::new(Tensor::full(vec![c_out, c_in, kh, kw], T::one())?, 1, 1.0)
    }

    /// Channel-diagonal kernel with every tap of `W[c, c]` set to `tap`.
    pub fn diagonal(channels: usize, kh: usize, kw: usize, tap: T) -> Result<Self> {
        let mut w = Tensor::zeros(vec![channels, channels, kh, kw])?;
        let taps = kh * kw;
        for c in 0..channels {
            let base = (c * channels + c) * taps;
            w.data_mut()[base..base + taps].fill(tap);
        }
        Self::new(w, 1, 1.0)
    }

    /// Center tap 1 on the channel diagonal, zero elsewhere.
    pub fn identity(channels: usize, kh: usize, kw: usize) -> Result<Self> {
        let mut w = Tensor::zeros(vec![channels, channels, kh, kw])?;
        let taps = kh * kw;
        let center = (kh / 2) * kw + kw / 2;
        for c in 0..channels {
            w.data_mut()[(c * channels + c) * taps + center] = T::one();
        }
        Self::new(w, 1, 1.0)
    }

    pub fn with_dilation(mut self, dilation: usize) -> Result<Self> {
        if dilation == 0 {
            return Err(Error::InvalidParameter("dilation must be >= 1".into()));
        }
        self.dilation = dilation;
        Ok(self)
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        self.similarity = DiffusivityConfig::new(lambda)?;
        Ok(self)
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel_h(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn kernel_w(&self) -> usize {
        self.weights.shape()[3]
    }

    pub fn taps(&self) -> usize {
        self.kernel_h() * self.kernel_w()
    }

    /// Flat index of the center tap within one `(h, w)` slice.
    pub fn center_tap(&self) -> usize {
        (self.kernel_h() / 2) * self.kernel_w() + self.kernel_w() / 2
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn lambda(&self) -> f64 {
        self.similarity.lambda()
    }

    pub fn similarity(&self) -> &DiffusivityConfig {
        &self.similarity
    }

    #[inline]
    pub(crate) fn w(&self, co: usize, ci: usize, t: usize) -> T {
        self.weights.data()[(co * self.c_in() + ci) * self.taps() + t]
    }

    /// Tap offsets `(dy, dx)` in row-major order, dilation applied.
    pub(crate) fn offsets(&self) -> Vec<(isize, isize)> {
        let (kh, kw, d) = (self.kernel_h() as isize, self.kernel_w() as isize, self.dilation as isize);
        let mut v = Vec::with_capacity(self.taps());
        for ky in 0..kh {
            for kx in 0..kw {
                v.push(((ky - kh / 2) * d, (kx - kw / 2) * d));
            }
        }
        v
    }

    pub(crate) fn check_input(&self, x: &FeatureMap<T>) -> Result<()> {
        if x.channels() != self.c_in() {
            return Err(Error::ShapeMismatch(format!(
                "kernel expects {} input channels, got {}",
                self.c_in(),
                x.channels()
            )));
        }
        Ok(())
    }
}

/// How a neighborhood value enters the weighted sum.
#[derive(Clone, Copy)]
pub(crate) enum Tap<'a, T> {
    /// `x(q)`
    Plain,
    /// `x(q) − x(p)`
    Difference,
    /// `S_t(p) · (x(q) − x(p))`, with `S` laid out `[tap][y][x]`.
    Semantic(&'a [T]),
}

/// Output extent for a stride-`s` sweep whose first center is pixel 0.
pub(crate) fn strided_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

pub(crate) fn neighborhood_forward<T: Scalar>(
    x: &FeatureMap<T>,
    k: &SdcKernel<T>,
    stride: usize,
    tap: Tap<'_, T>,
) -> Result<FeatureMap<T>> {
    k.check_input(x)?;
    let (ci_n, h, w) = x.dims();
    let (oh, ow) = (strided_extent(h, stride), strided_extent(w, stride));
    let co_n = k.c_out();
    let offs = k.offsets();
    let mut out = FeatureMap::zeros(co_n, oh, ow)?;
    par::for_each_row(out.data_mut(), ow, |r, row| {
        let (co, oy) = (r / oh, r % oh);
        let cy = oy * stride;
        for (ox, o) in row.iter_mut().enumerate() {
            let cx = ox * stride;
            let mut acc = T::zero();
            for (t, &(dy, dx)) in offs.iter().enumerate() {
                let qy = clamp_index(cy as isize + dy, h);
                let qx = clamp_index(cx as isize + dx, w);
                match tap {
                    Tap::Plain => {
                        for ci in 0..ci_n {
                            acc = acc + k.w(co, ci, t) * x.get(ci, qy, qx);
                        }
                    }
                    Tap::Difference => {
                        for ci in 0..ci_n {
                            acc = acc + k.w(co, ci, t) * (x.get(ci, qy, qx) - x.get(ci, cy, cx));
                        }
                    }
                    Tap::Semantic(sim) => {
                        let s = sim[(t * h + cy) * w + cx];
                        for ci in 0..ci_n {
                            acc = acc + k.w(co, ci, t) * (s * (x.get(ci, qy, qx) - x.get(ci, cy, cx)));
                        }
                    }
                }
            }
            *o = acc;
        }
    });
    Ok(out)
}

/// Cross-correlation with replicate padding, stride 1.
pub fn conv2d<T: Scalar>(x: &FeatureMap<T>, k: &SdcKernel<T>) -> Result<FeatureMap<T>> {
    neighborhood_forward(x, k, 1, Tap::Plain)
}

/// Cross-correlation with replicate padding and stride 1 or 2. Output extents
/// are `ceil(H / stride) × ceil(W / stride)`; output `(i, j)` is centered on
/// input `(stride·i, stride·j)`.
pub fn conv2d_strided<T: Scalar>(x: &FeatureMap<T>, k: &SdcKernel<T>, stride: usize) -> Result<FeatureMap<T>> {
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidParameter(format!("stride must be 1 or 2, got {stride}")));
    }
    neighborhood_forward(x, k, stride, Tap::Plain)
}

/// Central difference convolution: the kernel sees `x(q) − x(p)`.
pub fn cdc2d<T: Scalar>(x: &FeatureMap<T>, k: &SdcKernel<T>) -> Result<FeatureMap<T>> {
    neighborhood_forward(x, k, 1, Tap::Difference)
}

/// `g(mean_c (a_c − b_c)²)`, symmetric in its arguments and 1 iff `a == b`.
pub fn semantic_similarity<T: Scalar>(va: &[T], vb: &[T], lambda: f64) -> Result<T> {
    if va.len() != vb.len() || va.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "guidance vectors must have equal nonzero length, got {} and {}",
            va.len(),
            vb.len()
        )));
    }
    let cfg = DiffusivityConfig::new(lambda)?;
    let s = va.iter().zip(vb).fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    Ok(cfg.eval(s / lit(va.len() as f64)))
}

/// Squared-difference field `s_t(p)` and similarity field `S_t(p)`, both
/// `[tap][y][x]`.
pub(crate) fn similarity_fields<T: Scalar>(v: &FeatureMap<T>, k: &SdcKernel<T>) -> (Vec<T>, Vec<T>) {
    let (cf, h, w) = v.dims();
    let offs = k.offsets();
    let inv_cf = lit::<T>(1.0 / cf as f64);
    let mut s = vec![T::zero(); offs.len() * h * w];
    par::for_each_row(&mut s, w, |r, row| {
        let (t, y) = (r / h, r % h);
        let (dy, dx) = offs[t];
        let qy = clamp_index(y as isize + dy, h);
        for (x, o) in row.iter_mut().enumerate() {
            let qx = clamp_index(x as isize + dx, w);
            let mut acc = T::zero();
            for c in 0..cf {
                let d = v.get(c, qy, qx) - v.get(c, y, x);
                acc = acc + d * d;
            }
            *o = acc * inv_cf;
        }
    });
    let sim = s.iter().map(|&si| k.similarity().eval(si)).collect();
    (s, sim)
}

/// Semantic difference convolution of `u` guided by `v`.
///
/// `Y_o(p) = Σ_t Σ_i W[o, i, t] · S_t(p) · (U_i(q_t) − U_i(p))`
pub fn sdc2d<T: Scalar>(u: &FeatureMap<T>, v: &FeatureMap<T>, k: &SdcKernel<T>) -> Result<FeatureMap<T>> {
    if u.spatial() != v.spatial() {
        return Err(Error::ShapeMismatch(format!(
            "sdc2d needs U and V at one resolution, got {:?} and {:?}",
            u.spatial(),
            v.spatial()
        )));
    }
    k.check_input(u)?;
    let (_, sim) = similarity_fields(v, k);
    neighborhood_forward(u, k, 1, Tap::Semantic(&sim))
}

/// Leading-order operation count `H·W·h·w·(C_i·C_o + C_f)` of one SDC pass.
pub fn flop_estimate(h: u64, w: u64, kh: u64, kw: u64, c_in: u64, c_out: u64, c_f: u64) -> u64 {
    h * w * kh * kw * (c_in * c_out + c_f)
}
