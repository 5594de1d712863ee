//! ROI gating and per-line statistical thresholding.
//!
//! Each line is first restricted to a radial region of interest, then the
//! mean and sample standard deviation of the ROI samples set a threshold;
//! samples below it are zeroed. Arrays keep their length so sweeps stay
//! rectangular.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acoustics::SamplingPlan;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::scanmodel::{bin_range, ScanLine, Sweep};

/// Radial window of trusted returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec<T> {
    pub min_range_m: T,
    pub max_range_m: T,
}

impl<T: Real> RoiSpec<T> {
    pub fn new(min_range_m: T, max_range_m: T) -> Result<Self> {
        if !(min_range_m >= T::zero()) || !(min_range_m < max_range_m) || !max_range_m.is_finite()
        {
            return Err(Error::invalid(
                "ROI",
                format!("[{min_range_m}, {max_range_m}] must satisfy 0 <= min < max"),
            ));
        }
        Ok(Self {
            min_range_m,
            max_range_m,
        })
    }
}

impl<T: Real> Default for RoiSpec<T> {
    /// 0.75 m (near-head disturbance) to 6 m (far wall of the pool).
    fn default() -> Self {
        Self {
            min_range_m: T::lit(0.75),
            max_range_m: T::lit(6.0),
        }
    }
}

/// How the keep threshold is formed from the line statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ThresholdRule {
    /// `2μ + σ`
    #[default]
    #[serde(rename = "2mu+sigma")]
    TwoMuPlusSigma,
    /// `2(μ + σ)`
    #[serde(rename = "2(mu+sigma)")]
    TwoMuPlusTwoSigma,
}

impl fmt::Display for ThresholdRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdRule::TwoMuPlusSigma => "2mu+sigma",
            ThresholdRule::TwoMuPlusTwoSigma => "2(mu+sigma)",
        })
    }
}

impl FromStr for ThresholdRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "2mu+sigma" => Ok(ThresholdRule::TwoMuPlusSigma),
            "2(mu+sigma)" => Ok(ThresholdRule::TwoMuPlusTwoSigma),
            other => Err(Error::invalid(
                "threshold rule",
                format!("{other:?} (expected 2mu+sigma or 2(mu+sigma))"),
            )),
        }
    }
}

/// Mean, sample standard deviation and count of the ROI samples of a line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineStats<T> {
    pub mu: T,
    pub sigma: T,
    pub n_prime: usize,
}

impl<T: Real> LineStats<T> {
    pub fn threshold(&self, rule: ThresholdRule) -> T {
        let two = T::lit(2.0);
        match rule {
            ThresholdRule::TwoMuPlusSigma => two * self.mu + self.sigma,
            ThresholdRule::TwoMuPlusTwoSigma => two * (self.mu + self.sigma),
        }
    }
}

/// Indices of the bins whose range lies inside `roi`. Contiguous because
/// bin range is increasing; may be empty.
pub fn roi_interval<T: Real>(plan: &SamplingPlan<T>, roi: &RoiSpec<T>) -> Result<Range<usize>> {
    RoiSpec::new(roi.min_range_m, roi.max_range_m)?;
    if roi.max_range_m > plan.max_range_m {
        return Err(Error::invalid(
            "ROI",
            format!(
                "max {} m beyond the plan's range of {} m",
                roi.max_range_m, plan.max_range_m
            ),
        ));
    }
    let n = plan.sample_count as usize;
    let range = |i: usize| bin_range(plan, i).expect("index below sample count");
    let start = (0..n).find(|&i| range(i) >= roi.min_range_m).unwrap_or(n);
    let end = (start..n).find(|&i| range(i) > roi.max_range_m).unwrap_or(n);
    Ok(start..end)
}

/// Zeroes every sample outside the ROI. Returns the filtered line and the
/// kept index interval.
pub fn roi_filter<T: Real>(
    line: &ScanLine,
    plan: &SamplingPlan<T>,
    roi: &RoiSpec<T>,
) -> Result<(ScanLine, Range<usize>)> {
    if line.len() != plan.sample_count as usize {
        return Err(Error::invalid(
            "scan line",
            format!("{} samples, plan has {}", line.len(), plan.sample_count),
        ));
    }
    let kept = roi_interval(plan, roi)?;
    let intensities = line
        .intensities
        .iter()
        .enumerate()
        .map(|(i, &v)| if kept.contains(&i) { v } else { 0 })
        .collect();
    Ok((ScanLine::new(line.angle_grad, intensities), kept))
}

/// Mean and sample standard deviation (divisor `N' - 1`) over `roi`.
pub fn line_stats<T: Real>(line: &ScanLine, roi: Range<usize>) -> Result<LineStats<T>> {
    let samples = line
        .intensities
        .get(roi.clone())
        .ok_or(Error::IndexOutOfBounds {
            index: roi.end.saturating_sub(1),
            len: line.len(),
        })?;
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { found: n });
    }
    let count = T::from_count(n);
    let sum = samples
        .iter()
        .fold(T::zero(), |acc, &v| acc + T::from_u8(v).unwrap());
    let mu = sum / count;
    let sq = samples.iter().fold(T::zero(), |acc, &v| {
        let d = T::from_u8(v).unwrap() - mu;
        acc + d * d
    });
    let sigma = (sq / T::from_count(n - 1)).sqrt();
    Ok(LineStats {
        mu,
        sigma,
        n_prime: n,
    })
}

/// Keeps ROI samples at or above the threshold; everything else becomes 0.
pub fn threshold_line<T: Real>(
    line: &ScanLine,
    roi: Range<usize>,
    stats: &LineStats<T>,
    rule: ThresholdRule,
) -> ScanLine {
    let cut = stats.threshold(rule);
    let intensities = line
        .intensities
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if roi.contains(&i) && T::from_u8(v).unwrap() >= cut {
                v
            } else {
                0
            }
        })
        .collect();
    ScanLine::new(line.angle_grad, intensities)
}

/// ROI filter, statistics and threshold applied to one line.
pub fn preprocess_line(
    line: &ScanLine,
    plan: &SamplingPlan<f64>,
    roi: &RoiSpec<f64>,
    rule: ThresholdRule,
) -> Result<ScanLine> {
    let (gated, kept) = roi_filter(line, plan, roi)?;
    let stats: LineStats<f64> = line_stats(&gated, kept.clone())?;
    Ok(threshold_line(&gated, kept, &stats, rule))
}

/// Runs the cleaning chain over every line of a sweep. Lines are processed
/// in parallel; the result does not depend on scheduling.
pub fn preprocess_sweep(sweep: &Sweep, roi: &RoiSpec<f64>, rule: ThresholdRule) -> Result<Sweep> {
    let plan = &sweep.config().plan;
    let kept = roi_interval(plan, roi)?;
    let lines = sweep
        .lines()
        .par_iter()
        .map(|line| preprocess_line(line, plan, roi, rule))
        .collect::<Result<Vec<_>>>()?;
    let mut meta = sweep.meta().clone();
    meta.processed = true;
    meta.tags
        .insert("roi_kept".into(), format!("{}..{}", kept.start, kept.end));
    meta.tags.insert("threshold_rule".into(), rule.to_string());
    Sweep::new(*sweep.config(), lines, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::pool_plan;
    use crate::scanmodel::ScanConfig;
    use proptest::prelude::*;

    fn line(values: &[u8]) -> ScanLine {
        ScanLine::new(0, values.to_vec())
    }

    #[test]
    fn pool_roi_interval() {
        let plan = pool_plan();
        assert_eq!(roi_interval(&plan, &RoiSpec::default()).unwrap(), 128..1028);
    }

    #[test]
    fn roi_filter_examples() {
        let plan = pool_plan();
        let full: Vec<u8> = (0..1200).map(|i| (i % 251) as u8 + 1).collect();
        let (same, kept) =
            roi_filter(&line(&full), &plan, &RoiSpec::new(0.0, plan.max_range_m).unwrap()).unwrap();
        assert_eq!(same.intensities, full);
        assert_eq!(kept, 0..1200);

        let mut values = vec![0u8; 1200];
        values[1100] = 99;
        values[500] = 42;
        let (out, kept) = roi_filter(&line(&values), &plan, &RoiSpec::default()).unwrap();
        assert_eq!(out.intensities[1100], 0);
        assert_eq!(out.intensities[500], 42);
        assert_eq!(kept, 128..1028);

        let too_far = RoiSpec::new(0.75, 7.5).unwrap();
        assert!(roi_filter(&line(&values), &plan, &too_far).is_err());
        assert!(RoiSpec::new(2.0, 1.0).is_err());
        assert!(RoiSpec::new(-0.5, 1.0).is_err());
        assert!(roi_filter(&line(&[1, 2, 3]), &plan, &RoiSpec::default()).is_err());
    }

    #[test]
    fn stats_examples() {
        let s: LineStats<f64> = line_stats(&line(&[7; 9]), 0..9).unwrap();
        assert_eq!((s.mu, s.sigma, s.n_prime), (7.0, 0.0, 9));

        let s: LineStats<f64> = line_stats(&line(&[10, 10, 10, 10, 200]), 0..5).unwrap();
        assert_eq!(s.mu, 48.0);
        assert!((s.sigma - 84.9706).abs() < 1e-3);
        assert!((s.threshold(ThresholdRule::TwoMuPlusSigma) - 180.97).abs() < 0.01);

        let s: LineStats<f64> = line_stats(&line(&[0; 20]), 0..20).unwrap();
        assert_eq!((s.mu, s.sigma), (0.0, 0.0));

        assert_eq!(
            line_stats::<f64>(&line(&[1, 2, 3]), 1..2),
            Err(Error::InsufficientSamples { found: 1 })
        );
        assert!(line_stats::<f64>(&line(&[1, 2, 3]), 1..7).is_err());
    }

    #[test]
    fn threshold_examples() {
        let zeros = line(&[0; 10]);
        let s = line_stats::<f64>(&zeros, 0..10).unwrap();
        assert_eq!(threshold_line(&zeros, 0..10, &s, ThresholdRule::default()), zeros);

        let flat = line(&[100; 10]);
        let s = line_stats::<f64>(&flat, 0..10).unwrap();
        let out = threshold_line(&flat, 0..10, &s, ThresholdRule::default());
        assert!(out.intensities.iter().all(|&v| v == 0));

        let spike = line(&[10, 10, 10, 10, 200]);
        let s = line_stats::<f64>(&spike, 0..5).unwrap();
        let out = threshold_line(&spike, 0..5, &s, ThresholdRule::TwoMuPlusSigma);
        assert_eq!(out.intensities, vec![0, 0, 0, 0, 200]);
        // 2(μ+σ) = 265.94 suppresses the spike as well
        let out = threshold_line(&spike, 0..5, &s, ThresholdRule::TwoMuPlusTwoSigma);
        assert_eq!(out.intensities, vec![0; 5]);

        let s32 = line_stats::<f32>(&spike, 0..5).unwrap();
        let out = threshold_line(&spike, 0..5, &s32, ThresholdRule::TwoMuPlusSigma);
        assert_eq!(out.intensities, vec![0, 0, 0, 0, 200]);
    }

    #[test]
    fn rule_parsing() {
        assert_eq!("2mu+sigma".parse::<ThresholdRule>().unwrap(), ThresholdRule::TwoMuPlusSigma);
        assert_eq!(
            "2(mu+sigma)".parse::<ThresholdRule>().unwrap(),
            ThresholdRule::TwoMuPlusTwoSigma
        );
        assert!("mu".parse::<ThresholdRule>().is_err());
    }

    #[test]
    fn zero_sweep_is_fixed_point() {
        let sweep = Sweep::zeros(ScanConfig::pool_default()).unwrap();
        let out = preprocess_sweep(&sweep, &RoiSpec::default(), ThresholdRule::default()).unwrap();
        assert_eq!(out.lines(), sweep.lines());
        assert!(out.meta().processed);
        assert_eq!(out.meta().tags["roi_kept"], "128..1028");
    }

    proptest! {
        #[test]
        fn cleaning_invariants(values in proptest::collection::vec(0u8..=255, 1200)) {
            let plan = pool_plan();
            let roi = RoiSpec::default();
            let input = line(&values);
            let (gated, kept) = roi_filter(&input, &plan, &roi).unwrap();
            for (i, &v) in gated.intensities.iter().enumerate() {
                prop_assert_eq!(v, if kept.contains(&i) { values[i] } else { 0 });
            }
            let stats = line_stats::<f64>(&gated, kept.clone()).unwrap();
            let out = threshold_line(&gated, kept.clone(), &stats, ThresholdRule::default());
            let cut = stats.threshold(ThresholdRule::default());
            for (i, &v) in out.intensities.iter().enumerate() {
                prop_assert!(v <= values[i]);
                if v != 0 {
                    prop_assert!(kept.contains(&i) && v as f64 >= cut);
                }
            }
        }

        #[test]
        fn uniform_positive_lines_vanish(v in 1u8..=255, n in 2usize..400) {
            let l = line(&vec![v; n]);
            let s = line_stats::<f64>(&l, 0..n).unwrap();
            let out = threshold_line(&l, 0..n, &s, ThresholdRule::default());
            prop_assert!(out.intensities.iter().all(|&x| x == 0));
        }
    }
}
