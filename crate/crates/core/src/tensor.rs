//! Dense row-major tensors and the channels-first [`FeatureMap`] view used by
//! every operator in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::Range;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::par;

/// Floating-point element type. `f64` is the default everywhere; `f32` is
/// available for training runs that do not need gradient certification.
pub trait Scalar: Float + Sum + Default + Debug + Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[inline]
pub(crate) fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

/// N-dimensional dense array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("rank 0 tensors are not supported".into()));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidShape(format!("zero extent in {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::InvalidShape(format!("element count overflows for {shape:?}")))
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = check_extents(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: Vec<usize>, value: T) -> Result<Self> {
        let n = check_extents(&shape)?;
        Ok(Self { shape, data: vec![value; n] })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn zeros_like(&self) -> Self {
        Self { shape: self.shape.clone(), data: vec![T::zero(); self.data.len()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    /// `self += scale * other`, elementwise.
    pub fn axpy(&mut self, scale: T, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + scale * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn mean(&self) -> T {
        let sum = self.data.iter().fold(T::zero(), |acc, &v| acc + v);
        sum / lit(self.data.len() as f64)
    }

    pub fn min(&self) -> T {
        self.data.iter().fold(T::infinity(), |acc, &v| acc.min(v))
    }

    pub fn max(&self) -> T {
        self.data.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

/// A rank-3 tensor laid out as `(channels, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f64>(Tensor<T>);

impl<T: Scalar> TryFrom<Tensor<T>> for FeatureMap<T> {
    type Error = Error;

    fn try_from(t: Tensor<T>) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::InvalidShape(format!("feature map needs rank 3, got {:?}", t.shape())));
        }
        Ok(Self(t))
    }
}

impl<T: Scalar> From<FeatureMap<T>> for Tensor<T> {
    fn from(f: FeatureMap<T>) -> Self {
        f.0
    }
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        Tensor::new(vec![c, h, w], data).map(Self)
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Result<Self> {
        Tensor::zeros(vec![c, h, w]).map(Self)
    }

    pub fn full(c: usize, h: usize, w: usize, value: T) -> Result<Self> {
        Tensor::full(vec![c, h, w], value).map(Self)
    }

    pub fn from_fn(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        check_extents(&[c, h, w])?;
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Self::new(c, h, w, data)
    }

    pub fn zeros_like(&self) -> Self {
        Self(self.0.zeros_like())
    }

    pub fn channels(&self) -> usize {
        self.0.shape[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn data(&self) -> &[T] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        self.0.data_mut()
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        let (_, h, w) = self.dims();
        self.0.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let (_, h, w) = self.dims();
        self.0.data[(c * h + y) * w + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.height() * self.width();
        &self.0.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self(self.0.map(f))
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap(self.0.cast())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.0.max_abs_diff(&other.0)
    }

    /// Copies channels `range` into a new map.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.channels() {
            return Err(Error::InvalidShape(format!(
                "channel range {range:?} invalid for {} channels",
                self.channels()
            )));
        }
        let n = self.height() * self.width();
        let data = self.0.data[range.start * n..range.end * n].to_vec();
        Self::new(range.len(), self.height(), self.width(), data)
    }

    /// Grows each spatial side by `margin` pixels, clamping out-of-range
    /// coordinates to the nearest border pixel.
    pub fn pad_replicate(&self, margin: usize) -> Self {
        if margin == 0 {
            return self.clone();
        }
        let (c, h, w) = self.dims();
        let (ph, pw) = (h + 2 * margin, w + 2 * margin);
        let mut data = Vec::with_capacity(c * ph * pw);
        for ci in 0..c {
            for y in 0..ph {
                let sy = clamp_index(y as isize - margin as isize, h);
                for x in 0..pw {
                    let sx = clamp_index(x as isize - margin as isize, w);
                    data.push(self.get(ci, sy, sx));
                }
            }
        }
        Self(Tensor { shape: vec![c, ph, pw], data })
    }

    /// Removes `margin` pixels from each spatial side.
    pub fn crop(&self, margin: usize) -> Result<Self> {
        let (c, h, w) = self.dims();
        if 2 * margin >= h || 2 * margin >= w {
            return Err(Error::InvalidShape(format!("cannot crop {margin} from {h}x{w}")));
        }
        let (oh, ow) = (h - 2 * margin, w - 2 * margin);
        Self::from_fn(c, oh, ow, |ci, y, x| self.get(ci, y + margin, x + margin))
    }

    /// Half-pixel-center bilinear resampling to a larger (or equal) grid.
    pub fn bilinear_upsample(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let (c, h, w) = self.dims();
        if out_h < h || out_w < w {
            return Err(Error::InvalidParameter(format!(
                "bilinear_upsample cannot shrink {h}x{w} to {out_h}x{out_w}"
            )));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(self.clone());
        }
        let rows = axis_weights(h, out_h);
        let cols = axis_weights(w, out_w);
        let mut out = Self::zeros(c, out_h, out_w)?;
        par::for_each_row(out.data_mut(), out_w, |r, row| {
            let ci = r / out_h;
            let (y0, y1, fy) = rows[r % out_h];
            let src = self.channel(ci);
            let (fy, gy) = (lit::<T>(fy), lit::<T>(1.0 - fy));
            for (x, o) in row.iter_mut().enumerate() {
                let (x0, x1, fx) = cols[x];
                let (fx, gx) = (lit::<T>(fx), lit::<T>(1.0 - fx));
                let top = gx * src[y0 * w + x0] + fx * src[y0 * w + x1];
                let bot = gx * src[y1 * w + x0] + fx * src[y1 * w + x1];
                *o = gy * top + fy * bot;
            }
        });
        Ok(out)
    }

    /// Adjoint of [`FeatureMap::bilinear_upsample`]: folds a gradient on the
    /// upsampled grid back onto the `in_h × in_w` source grid.
    pub fn bilinear_upsample_backward(&self, in_h: usize, in_w: usize) -> Result<Self> {
        let (c, out_h, out_w) = self.dims();
        if out_h < in_h || out_w < in_w {
            return Err(Error::InvalidParameter(format!(
                "source grid {in_h}x{in_w} larger than upsampled grid {out_h}x{out_w}"
            )));
        }
        if (out_h, out_w) == (in_h, in_w) {
            return Ok(self.clone());
        }
        let rows = axis_weights(in_h, out_h);
        let cols = axis_weights(in_w, out_w);
        let mut grad = Self::zeros(c, in_h, in_w)?;
        for ci in 0..c {
            for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
                let (fy, gy) = (lit::<T>(fy), lit::<T>(1.0 - fy));
                for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let (fx, gx) = (lit::<T>(fx), lit::<T>(1.0 - fx));
                    let g = self.get(ci, y, x);
                    let d = grad.data_mut();
                    let base = ci * in_h * in_w;
                    d[base + y0 * in_w + x0] = d[base + y0 * in_w + x0] + gy * gx * g;
                    d[base + y0 * in_w + x1] = d[base + y0 * in_w + x1] + gy * fx * g;
                    d[base + y1 * in_w + x0] = d[base + y1 * in_w + x0] + fy * gx * g;
                    d[base + y1 * in_w + x1] = d[base + y1 * in_w + x1] + fy * fx * g;
                }
            }
        }
        Ok(grad)
    }
}

/// Stacks `a` and `b` along the channel axis, `a` first.
pub fn concat_channels<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if a.spatial() != b.spatial() {
        return Err(Error::ShapeMismatch(format!(
            "concat_channels needs equal spatial extents, got {:?} and {:?}",
            a.spatial(),
            b.spatial()
        )));
    }
    let (h, w) = a.spatial();
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    FeatureMap::new(a.channels() + b.channels(), h, w, data)
}

#[inline]
pub(crate) fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Per-output-index `(lo, hi, frac)` source taps along one axis.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}
