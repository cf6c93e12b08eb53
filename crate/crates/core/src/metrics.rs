//! Segmentation metrics: confusion matrix, mIoU and the boundary-band
//! F-score.
//!
//! The boundary band of a ground-truth map is seeded by every pixel with a
//! 4-neighbor of another class and dilated to the requested odd width with a
//! square (Chebyshev) structuring element. Image borders never seed.

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Scalar};

/// 2-D grid of class indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!("label map {height}x{width} is empty")));
        }
        if labels.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> usize) -> Result<Self> {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(y, x));
            }
        }
        Self::new(height, width, labels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }

    pub fn check_classes(&self, n_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= n_classes) {
            Some(&value) => Err(Error::ClassOutOfRange { value, n_classes }),
            None => Ok(()),
        }
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::ShapeMismatch(format!(
                "label maps {}x{} and {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// Binary pixel mask over a label grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::InvalidShape(format!("mask {height}x{width} needs {} bits", height * width)));
        }
        Ok(Self { height, width, bits })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// `counts[g][p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(n_classes: usize) -> Self {
        Self { n_classes, counts: vec![0; n_classes * n_classes] }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulates another matrix of the same class count.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::ShapeMismatch(format!(
                "confusion matrices over {} and {} classes",
                self.n_classes, other.n_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion_matrix(
    pred: &LabelMap,
    gt: &LabelMap,
    n_classes: usize,
    mask: Option<&Mask>,
) -> Result<ConfusionMatrix> {
    pred.same_shape(gt)?;
    pred.check_classes(n_classes)?;
    gt.check_classes(n_classes)?;
    if let Some(m) = mask {
        if (m.height, m.width) != (gt.height, gt.width) {
            return Err(Error::ShapeMismatch("mask does not match label maps".into()));
        }
    }
    let mut cm = ConfusionMatrix::zeros(n_classes);
    for (i, (&p, &g)) in pred.labels.iter().zip(&gt.labels).enumerate() {
        if mask.is_none_or(|m| m.bits[i]) {
            cm.counts[g * n_classes + p] += 1;
        }
    }
    Ok(cm)
}

/// Mean IoU over classes present in prediction or ground truth; `None` when
/// the matrix is empty.
pub fn miou(cm: &ConfusionMatrix) -> Option<f64> {
    let n = cm.n_classes;
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..n {
        let tp = cm.get(c, c);
        let gt_total: u64 = (0..n).map(|p| cm.get(c, p)).sum();
        let pred_total: u64 = (0..n).map(|g| cm.get(g, c)).sum();
        let union = gt_total + pred_total - tp;
        if union > 0 {
            sum += tp as f64 / union as f64;
            present += 1;
        }
    }
    (present > 0).then(|| sum / present as f64)
}

/// Pixels within Chebyshev distance `(width − 1) / 2` of a 4-connected label
/// change in `gt`.
pub fn boundary_mask(gt: &LabelMap, width_px: usize) -> Result<Mask> {
    if width_px % 2 == 0 {
        return Err(Error::InvalidParameter(format!("boundary width must be odd, got {width_px}")));
    }
    let (h, w) = (gt.height, gt.width);
    let mut seeds = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = gt.get(y, x);
            let differs = (y > 0 && gt.get(y - 1, x) != l)
                || (y + 1 < h && gt.get(y + 1, x) != l)
                || (x > 0 && gt.get(y, x - 1) != l)
                || (x + 1 < w && gt.get(y, x + 1) != l);
            seeds[y * w + x] = differs;
        }
    }
    let r = width_px / 2;
    if r == 0 {
        return Mask::new(h, w, seeds);
    }
    // separable square dilation: rows, then columns
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = (lo..=hi).any(|xx| seeds[y * w + xx]);
        }
    }
    let mut band = vec![false; h * w];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            band[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    Mask::new(h, w, band)
}

/// Macro-averaged per-class F1 of `pred` inside the boundary band of `gt`.
///
/// Only classes present in the band's ground truth are averaged. Returns
/// `None` when the band is empty.
pub fn boundary_fscore(pred: &LabelMap, gt: &LabelMap, width_px: usize) -> Result<Option<f64>> {
    pred.same_shape(gt)?;
    let band = boundary_mask(gt, width_px)?;
    if band.count() == 0 {
        return Ok(None);
    }
    let n = pred.labels.iter().chain(&gt.labels).max().map_or(1, |&m| m + 1);
    let cm = confusion_matrix(pred, gt, n, Some(&band))?;
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..n {
        let gt_total: u64 = (0..n).map(|p| cm.get(c, p)).sum();
        if gt_total == 0 {
            continue;
        }
        present += 1;
        let tp = cm.get(c, c) as f64;
        let pred_total: u64 = (0..n).map(|g| cm.get(g, c)).sum();
        let precision = if pred_total > 0 { tp / pred_total as f64 } else { 0.0 };
        let recall = tp / gt_total as f64;
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(Some(sum / present as f64))
}

/// Mean absolute response inside and outside a boundary band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandEnergy {
    /// Outside the band.
    pub region: f64,
    /// Inside the band.
    pub boundary: f64,
}

/// Mean of `|response|` over all channels, split by the `width_px` boundary
/// band of `labels`. Errors if either side of the split is empty.
pub fn band_energy<T: Scalar>(response: &FeatureMap<T>, labels: &LabelMap, width_px: usize) -> Result<BandEnergy> {
    if response.spatial() != (labels.height, labels.width) {
        return Err(Error::ShapeMismatch(format!(
            "response {:?} vs labels {}x{}",
            response.spatial(),
            labels.height,
            labels.width
        )));
    }
    let band = boundary_mask(labels, width_px)?;
    let n = labels.height * labels.width;
    let (mut sums, mut counts) = ([0.0; 2], [0usize; 2]);
    for ch in response.data().chunks(n) {
        for (&v, &inside) in ch.iter().zip(band.bits()) {
            sums[usize::from(inside)] += v.as_f64().abs();
            counts[usize::from(inside)] += 1;
        }
    }
    if counts.contains(&0) {
        return Err(Error::InvalidParameter("boundary band covers none or all of the image".into()));
    }
    Ok(BandEnergy { region: sums[0] / counts[0] as f64, boundary: sums[1] / counts[1] as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(h: usize, w: usize, v: &[usize]) -> LabelMap {
        LabelMap::new(h, w, v.to_vec()).unwrap()
    }

    fn split4() -> LabelMap {
        LabelMap::from_fn(4, 4, |_, x| usize::from(x >= 2)).unwrap()
    }

    #[test]
    fn band_energy_splits_by_band() {
        let gt = split4();
        let resp = FeatureMap::from_fn(2, 4, 4, |c, _, x| if x == 1 || x == 2 { 3.0 } else { -(c as f64) }).unwrap();
        let e = band_energy(&resp, &gt, 1).unwrap();
        assert_eq!((e.region, e.boundary), (0.5, 3.0));
        assert!(band_energy(&resp, &LabelMap::new(4, 4, vec![0; 16]).unwrap(), 1).is_err());
    }

    #[test]
    fn confusion_identity_is_diagonal() {
        let gt = lm(2, 3, &[0, 1, 2, 2, 1, 0]);
        let cm = confusion_matrix(&gt, &gt, 3, None).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(g, p), if g == p { 2 } else { 0 });
            }
        }
    }

    #[test]
    fn empty_mask_gives_zero_matrix() {
        let gt = lm(2, 2, &[0, 1, 1, 0]);
        let m = Mask::new(2, 2, vec![false; 4]).unwrap();
        let cm = confusion_matrix(&gt, &gt, 2, Some(&m)).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(miou(&cm), None);
    }

    #[test]
    fn two_by_two_hand_case() {
        let pred = lm(2, 2, &[0, 0, 1, 1]);
        let gt = lm(2, 2, &[0, 1, 1, 1]);
        let cm = confusion_matrix(&pred, &gt, 2, None).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (1, 0, 1, 2));
        // IoU_0 = 1/2, IoU_1 = 2/3
        assert_eq!(miou(&cm), Some((0.5 + 2.0 / 3.0) / 2.0));
    }

    #[test]
    fn miou_extremes() {
        let gt = lm(2, 2, &[0, 1, 1, 0]);
        assert_eq!(miou(&confusion_matrix(&gt, &gt, 4, None).unwrap()), Some(1.0));
        let pred = lm(2, 2, &[2, 3, 3, 2]);
        assert_eq!(miou(&confusion_matrix(&pred, &gt, 4, None).unwrap()), Some(0.0));
    }

    #[test]
    fn errors_on_bad_input() {
        let a = lm(2, 2, &[0, 1, 1, 0]);
        let b = lm(1, 4, &[0, 1, 1, 0]);
        assert!(confusion_matrix(&a, &b, 2, None).is_err());
        assert!(matches!(
            confusion_matrix(&a, &a, 1, None),
            Err(Error::ClassOutOfRange { value: 1, n_classes: 1 })
        ));
        assert!(boundary_mask(&a, 2).is_err());
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn boundary_bands_of_vertical_split() {
        let gt = split4();
        let b1 = boundary_mask(&gt, 1).unwrap();
        assert_eq!(b1.count(), 8);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(b1.get(y, x), x == 1 || x == 2);
            }
        }
        assert_eq!(boundary_mask(&gt, 3).unwrap().count(), 16);
        let flat = lm(3, 3, &[2; 9]);
        assert_eq!(boundary_mask(&flat, 3).unwrap().count(), 0);
    }

    #[test]
    fn diagonal_changes_do_not_seed() {
        let gt = lm(2, 2, &[0, 1, 1, 0]);
        // every pixel has a 4-neighbor of the other class here
        assert_eq!(boundary_mask(&gt, 1).unwrap().count(), 4);
        let gt = lm(3, 3, &[0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(boundary_mask(&gt, 1).unwrap().count(), 0);
    }

    #[test]
    fn fscore_cases() {
        let gt = split4();
        assert_eq!(boundary_fscore(&gt, &gt, 1).unwrap(), Some(1.0));
        let permuted = LabelMap::from_fn(4, 4, |y, x| gt.get(y, x) + 2).unwrap();
        assert_eq!(boundary_fscore(&permuted, &gt, 1).unwrap(), Some(0.0));
        // boundary shifted one column right: class 0 has P = 1/2, R = 1 -> F = 2/3; class 1 F = 0
        let shifted = LabelMap::from_fn(4, 4, |_, x| usize::from(x >= 3)).unwrap();
        let f = boundary_fscore(&shifted, &gt, 1).unwrap().unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(boundary_fscore(&gt, &lm(4, 4, &[0; 16]), 1).unwrap(), None);
    }
}
