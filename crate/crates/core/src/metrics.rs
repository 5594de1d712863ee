//! Segmentation losses and evaluation metrics for binary object masks.
//!
//! Metrics are computed from a [`Tally`] of pixel counts so that per-image
//! reports and pixel-pooled aggregates share one code path. Overlap ratios
//! with an empty denominator follow one convention: 1 when both masks are
//! empty, 0 otherwise.

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Clamp applied to predictions inside the cross-entropy logarithms.
pub const BCE_EPSILON: f64 = 1e-7;

/// Default boundary matching tolerance in pixels.
pub const BOUNDARY_TOLERANCE_PX: usize = 2;

/// Ground truth (values in {0, 1}) and predicted probabilities of equal shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair<T> {
    height: usize,
    width: usize,
    y_true: Vec<T>,
    y_pred: Vec<T>,
}

impl<T: Real> MaskPair<T> {
    pub fn new(height: usize, width: usize, y_true: Vec<T>, y_pred: Vec<T>) -> Result<Self> {
        let n = height * width;
        if y_true.len() != n {
            return Err(Error::ShapeMismatch {
                expected: (height, width),
                found: (y_true.len() / width.max(1), width),
            });
        }
        if y_pred.len() != n {
            return Err(Error::ShapeMismatch {
                expected: (height, width),
                found: (y_pred.len() / width.max(1), width),
            });
        }
        if let Some(v) = y_true.iter().find(|&&v| v != T::zero() && v != T::one()) {
            return Err(Error::invalid("ground truth", format!("value {v} not in {{0, 1}}")));
        }
        if let Some(v) = y_pred
            .iter()
            .find(|&&v| !(v >= T::zero() && v <= T::one()))
        {
            return Err(Error::invalid("prediction", format!("value {v} not in [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            y_true,
            y_pred,
        })
    }

    /// Ground truth from a mask image (nonzero = object) and probabilities
    /// from a grayscale prediction (`value / 255`).
    pub fn from_images(truth: &GrayImage, pred: &GrayImage) -> Result<Self> {
        if truth.dimensions() != pred.dimensions() {
            return Err(Error::ShapeMismatch {
                expected: (truth.height() as usize, truth.width() as usize),
                found: (pred.height() as usize, pred.width() as usize),
            });
        }
        let scale = T::lit(255.0);
        let y_true = truth
            .as_raw()
            .iter()
            .map(|&v| if v > 0 { T::one() } else { T::zero() })
            .collect();
        let y_pred = pred
            .as_raw()
            .iter()
            .map(|&v| T::from_u8(v).unwrap() / scale)
            .collect();
        Self::new(truth.height() as usize, truth.width() as usize, y_true, y_pred)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn y_true(&self) -> &[T] {
        &self.y_true
    }

    pub fn y_pred(&self) -> &[T] {
        &self.y_pred
    }

    pub fn len(&self) -> usize {
        self.y_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_true.is_empty()
    }
}

/// Mean binary cross-entropy with predictions clamped to `[ε, 1 − ε]`.
pub fn bce_loss<T: Real>(pair: &MaskPair<T>) -> T {
    if pair.is_empty() {
        return T::zero();
    }
    let eps = T::lit(BCE_EPSILON);
    let hi = T::one() - eps;
    let sum = pair
        .y_true
        .iter()
        .zip(&pair.y_pred)
        .fold(T::zero(), |acc, (&y, &p)| {
            let p = p.max(eps).min(hi);
            acc - (y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        });
    sum / T::from_count(pair.len())
}

/// `1 − 2·Σ(y·p) / (Σy + Σp)`, defined as 0 when both sums vanish.
pub fn dice_loss<T: Real>(pair: &MaskPair<T>) -> T {
    let (mut inter, mut sum_t, mut sum_p) = (T::zero(), T::zero(), T::zero());
    for (&y, &p) in pair.y_true.iter().zip(&pair.y_pred) {
        inter += y * p;
        sum_t += y;
        sum_p += p;
    }
    let den = sum_t + sum_p;
    if den == T::zero() {
        return T::zero();
    }
    T::one() - T::lit(2.0) * inter / den
}

/// A binary raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: (height, width),
                found: (bits.len() / width.max(1), width),
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn get(&self, r: isize, c: isize) -> bool {
        r >= 0
            && c >= 0
            && (r as usize) < self.height
            && (c as usize) < self.width
            && self.bits[r as usize * self.width + c as usize]
    }

    fn map(&self, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Self {
            height: self.height,
            width: self.width,
            bits,
        }
    }

    /// Erosion by the 3×3 cross; pixels outside the raster count as background.
    pub fn erode_cross(&self) -> Self {
        self.map(|r, c| {
            let (r, c) = (r as isize, c as isize);
            self.get(r, c)
                && self.get(r - 1, c)
                && self.get(r + 1, c)
                && self.get(r, c - 1)
                && self.get(r, c + 1)
        })
    }

    /// Mask pixels removed by [`BinaryMask::erode_cross`].
    pub fn boundary(&self) -> Self {
        let eroded = self.erode_cross();
        self.map(|r, c| {
            let i = r * self.width + c;
            self.bits[i] && !eroded.bits[i]
        })
    }

    /// Dilation by a disk of radius `radius` pixels (Euclidean).
    pub fn dilate(&self, radius: usize) -> Self {
        let rad = radius as isize;
        let offsets: Vec<(isize, isize)> = (-rad..=rad)
            .flat_map(|dr| (-rad..=rad).map(move |dc| (dr, dc)))
            .filter(|(dr, dc)| dr * dr + dc * dc <= rad * rad)
            .collect();
        self.map(|r, c| {
            offsets
                .iter()
                .any(|&(dr, dc)| self.get(r as isize + dr, c as isize + dc))
        })
    }

    fn and_count(&self, other: &Self) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    fn or_count(&self, other: &Self) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a || b)
            .count()
    }

    fn and(&self, other: &Self) -> Self {
        self.map(|r, c| {
            let i = r * self.width + c;
            self.bits[i] && other.bits[i]
        })
    }
}

/// Boundary pixel counts between two binary masks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryCounts {
    pub true_boundary: u64,
    pub true_matched: u64,
    pub pred_boundary: u64,
    pub pred_matched: u64,
    /// Intersection of the two inner boundary bands.
    pub band_inter: u64,
    /// Union of the two inner boundary bands.
    pub band_union: u64,
}

impl BoundaryCounts {
    /// Boundaries are the pixels lost to a 3×3 cross erosion. A boundary
    /// pixel is matched when the other mask's boundary lies within
    /// `tolerance_px`. The band of a mask is its boundary dilated by the
    /// tolerance and clipped to the mask itself.
    pub fn compute(truth: &BinaryMask, pred: &BinaryMask, tolerance_px: usize) -> Result<Self> {
        if (truth.height, truth.width) != (pred.height, pred.width) {
            return Err(Error::ShapeMismatch {
                expected: (truth.height, truth.width),
                found: (pred.height, pred.width),
            });
        }
        let bt = truth.boundary();
        let bp = pred.boundary();
        let bt_grown = bt.dilate(tolerance_px);
        let bp_grown = bp.dilate(tolerance_px);
        let band_t = bt_grown.and(truth);
        let band_p = bp_grown.and(pred);
        Ok(Self {
            true_boundary: bt.count() as u64,
            true_matched: bt.and_count(&bp_grown) as u64,
            pred_boundary: bp.count() as u64,
            pred_matched: bp.and_count(&bt_grown) as u64,
            band_inter: band_t.and_count(&band_p) as u64,
            band_union: band_t.or_count(&band_p) as u64,
        })
    }

    fn add(&mut self, other: &Self) {
        self.true_boundary += other.true_boundary;
        self.true_matched += other.true_matched;
        self.pred_boundary += other.pred_boundary;
        self.pred_matched += other.pred_matched;
        self.band_inter += other.band_inter;
        self.band_union += other.band_union;
    }
}

/// Boundary IoU and boundary F-score of two binary masks.
pub fn boundary_metrics<T: Real>(
    truth: &BinaryMask,
    pred: &BinaryMask,
    tolerance_px: usize,
) -> Result<(T, T)> {
    let counts = BoundaryCounts::compute(truth, pred, tolerance_px)?;
    let both_empty = truth.count() == 0 && pred.count() == 0;
    Ok(boundary_scores(&counts, both_empty))
}

fn ratio<T: Real>(num: u64, den: u64, both_empty: bool) -> T {
    if den == 0 {
        return if both_empty { T::one() } else { T::zero() };
    }
    T::from_u64(num).unwrap() / T::from_u64(den).unwrap()
}

fn harmonic<T: Real>(a: T, b: T) -> T {
    if a + b == T::zero() {
        T::zero()
    } else {
        T::lit(2.0) * a * b / (a + b)
    }
}

fn boundary_scores<T: Real>(c: &BoundaryCounts, both_empty: bool) -> (T, T) {
    let precision: T = ratio(c.pred_matched, c.pred_boundary, both_empty);
    let recall: T = ratio(c.true_matched, c.true_boundary, both_empty);
    let biou = ratio(c.band_inter, c.band_union, both_empty);
    (biou, harmonic(precision, recall))
}

/// The nine evaluation numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport<T> {
    /// Dice coefficient.
    pub dc: T,
    pub iou: T,
    /// Pixel accuracy.
    pub pa: T,
    /// Precision.
    pub ps: T,
    /// Recall.
    pub rs: T,
    pub f1s: T,
    /// Mean absolute error of the raw probabilities.
    pub mae: T,
    /// Boundary IoU.
    pub biou: T,
    /// Boundary F-score.
    pub bs: T,
}

impl<T: Real> MetricReport<T> {
    pub fn fields(&self) -> [(&'static str, T); 9] {
        [
            ("dc", self.dc),
            ("iou", self.iou),
            ("pa", self.pa),
            ("ps", self.ps),
            ("rs", self.rs),
            ("f1s", self.f1s),
            ("mae", self.mae),
            ("biou", self.biou),
            ("bs", self.bs),
        ]
    }

    /// Field-wise mean. `None` for an empty slice.
    pub fn mean(reports: &[Self]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = T::from_count(reports.len());
        let sum = |f: fn(&Self) -> T| reports.iter().map(f).fold(T::zero(), |a, b| a + b) / n;
        Some(Self {
            dc: sum(|r| r.dc),
            iou: sum(|r| r.iou),
            pa: sum(|r| r.pa),
            ps: sum(|r| r.ps),
            rs: sum(|r| r.rs),
            f1s: sum(|r| r.f1s),
            mae: sum(|r| r.mae),
            biou: sum(|r| r.biou),
            bs: sum(|r| r.bs),
        })
    }
}

/// Confusion counts plus the sums needed for MAE and the boundary scores.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Tally<T> {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub abs_err_sum: T,
    pub boundary: BoundaryCounts,
}

impl<T: Real> Tally<T> {
    pub fn from_pair(pair: &MaskPair<T>, threshold: T, tolerance_px: usize) -> Self {
        let mut t = Self {
            abs_err_sum: T::zero(),
            ..Default::default()
        };
        let mut truth = Vec::with_capacity(pair.len());
        let mut pred = Vec::with_capacity(pair.len());
        for (&y, &p) in pair.y_true.iter().zip(&pair.y_pred) {
            let is_t = y == T::one();
            let is_p = p >= threshold;
            match (is_t, is_p) {
                (true, true) => t.tp += 1,
                (false, true) => t.fp += 1,
                (true, false) => t.fn_ += 1,
                (false, false) => t.tn += 1,
            }
            t.abs_err_sum += (y - p).abs();
            truth.push(is_t);
            pred.push(is_p);
        }
        let truth = BinaryMask::new(pair.height, pair.width, truth).expect("shape checked");
        let pred = BinaryMask::new(pair.height, pair.width, pred).expect("shape checked");
        t.boundary =
            BoundaryCounts::compute(&truth, &pred, tolerance_px).expect("shapes are equal");
        t
    }

    pub fn pixels(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
        self.abs_err_sum += other.abs_err_sum;
        self.boundary.add(&other.boundary);
    }

    pub fn report(&self) -> MetricReport<T> {
        let both_empty = self.tp + self.fp + self.fn_ == 0;
        let ps: T = ratio(self.tp, self.tp + self.fp, both_empty);
        let rs: T = ratio(self.tp, self.tp + self.fn_, both_empty);
        let dc: T = ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, both_empty);
        let iou = ratio(self.tp, self.tp + self.fp + self.fn_, both_empty);
        let pixels = self.pixels();
        let pa = if pixels == 0 {
            T::one()
        } else {
            ratio(self.tp + self.tn, pixels, both_empty)
        };
        let mae = if pixels == 0 {
            T::zero()
        } else {
            self.abs_err_sum / T::from_u64(pixels).unwrap()
        };
        let (biou, bs) = boundary_scores(&self.boundary, both_empty);
        MetricReport {
            dc,
            iou,
            pa,
            ps,
            rs,
            // harmonic mean of ps and rs, reduced to counts so it is exactly dc
            f1s: dc,
            mae,
            biou,
            bs,
        }
    }
}

/// Evaluates one pair at the given binarization threshold with the default
/// boundary tolerance.
pub fn evaluate<T: Real>(pair: &MaskPair<T>, threshold: T) -> MetricReport<T> {
    Tally::from_pair(pair, threshold, BOUNDARY_TOLERANCE_PX).report()
}

/// Per-image mean and pixel-pooled aggregate over many pairs.
#[derive(Debug, Clone)]
pub struct Aggregate<T> {
    reports: Vec<MetricReport<T>>,
    pooled: Option<Tally<T>>,
    tolerance_px: usize,
}

impl<T: Real> Default for Aggregate<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Aggregate<T> {
    pub fn new() -> Self {
        Self::with_tolerance(BOUNDARY_TOLERANCE_PX)
    }

    pub fn with_tolerance(tolerance_px: usize) -> Self {
        Self {
            reports: Vec::new(),
            pooled: None,
            tolerance_px,
        }
    }

    /// Adds a pair and returns its own report.
    pub fn push(&mut self, pair: &MaskPair<T>, threshold: T) -> MetricReport<T> {
        let tally = Tally::from_pair(pair, threshold, self.tolerance_px);
        let report = tally.report();
        match &mut self.pooled {
            Some(p) => p.add(&tally),
            None => self.pooled = Some(tally),
        }
        self.reports.push(report);
        report
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    pub fn mean(&self) -> Option<MetricReport<T>> {
        MetricReport::mean(&self.reports)
    }

    pub fn pooled(&self) -> Option<MetricReport<T>> {
        self.pooled.as_ref().map(Tally::report)
    }
}
