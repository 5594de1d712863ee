//! Sound speed and sampling geometry of a single-beam scanning sonar.
//!
//! The device does not take a range directly: range follows from the speed of
//! sound, the sample period and the number of samples per ping. Everything
//! here works on real-valued seconds; quantization into hardware ticks only
//! happens in [`crate::protocol`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Water temperature, salinity and transducer depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaterConditions<T> {
    temperature_c: T,
    salinity_psu: T,
    depth_m: T,
}

impl<T: Real> WaterConditions<T> {
    pub fn new(temperature_c: T, salinity_psu: T, depth_m: T) -> Result<Self> {
        let in_range = |v: T, lo: f64, hi: f64| v >= T::lit(lo) && v <= T::lit(hi);
        if !in_range(temperature_c, -2.0, 40.0) {
            return Err(Error::invalid(
                "temperature",
                format!("{temperature_c} °C outside [-2, 40]"),
            ));
        }
        if !in_range(salinity_psu, 0.0, 42.0) {
            return Err(Error::invalid(
                "salinity",
                format!("{salinity_psu} psu outside [0, 42]"),
            ));
        }
        if !(depth_m >= T::zero()) || !depth_m.is_finite() {
            return Err(Error::invalid("depth", format!("{depth_m} m is negative")));
        }
        Ok(Self {
            temperature_c,
            salinity_psu,
            depth_m,
        })
    }

    /// Freshwater pool at 10 °C with the transducer 0.15 m below the surface.
    pub fn freshwater_pool() -> Self {
        Self {
            temperature_c: T::lit(10.0),
            salinity_psu: T::zero(),
            depth_m: T::lit(0.15),
        }
    }

    pub fn temperature_c(&self) -> T {
        self.temperature_c
    }

    pub fn salinity_psu(&self) -> T {
        self.salinity_psu
    }

    pub fn depth_m(&self) -> T {
        self.depth_m
    }
}

/// Speed of sound in m/s from the empirical temperature/salinity/depth fit.
pub fn sound_speed<T: Real>(cond: &WaterConditions<T>) -> T {
    let t = cond.temperature_c;
    T::lit(1410.0) + T::lit(4.21) * t - T::lit(0.037) * t * t
        + T::lit(1.1) * cond.salinity_psu
        + T::lit(0.018) * cond.depth_m
}

/// Range covered by one sample: half the distance sound travels in one
/// sample period (the echo goes out and back).
pub fn sample_distance<T: Real>(sound_speed: T, sample_period: T) -> Result<T> {
    if !(sound_speed >= T::zero()) {
        return Err(Error::invalid("sound speed", format!("{sound_speed} m/s")));
    }
    if !(sample_period >= T::zero()) {
        return Err(Error::invalid("sample period", format!("{sample_period} s")));
    }
    Ok(sound_speed * sample_period / T::lit(2.0))
}

pub fn max_range<T: Real>(sample_distance: T, sample_count: u32) -> Result<T> {
    if !(sample_distance >= T::zero()) {
        return Err(Error::invalid(
            "sample distance",
            format!("{sample_distance} m"),
        ));
    }
    Ok(sample_distance * T::from_u32(sample_count).expect("u32 fits scalar"))
}

/// A complete sampling configuration. All quantities are derived from the
/// sound speed, the sample period and the sample count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan<T> {
    pub sound_speed_mps: T,
    pub sample_period_s: T,
    pub sample_count: u32,
    pub sample_distance_m: T,
    pub max_range_m: T,
}

impl<T: Real> SamplingPlan<T> {
    pub fn new(sound_speed_mps: T, sample_period_s: T, sample_count: u32) -> Result<Self> {
        if !(sound_speed_mps > T::zero()) || !sound_speed_mps.is_finite() {
            return Err(Error::invalid(
                "sound speed",
                format!("{sound_speed_mps} m/s must be positive"),
            ));
        }
        if !(sample_period_s > T::zero()) || !sample_period_s.is_finite() {
            return Err(Error::invalid(
                "sample period",
                format!("{sample_period_s} s must be positive"),
            ));
        }
        if sample_count == 0 {
            return Err(Error::invalid("sample count", "must be positive"));
        }
        let sample_distance_m = sample_distance(sound_speed_mps, sample_period_s)?;
        let max_range_m = max_range(sample_distance_m, sample_count)?;
        Ok(Self {
            sound_speed_mps,
            sample_period_s,
            sample_count,
            sample_distance_m,
            max_range_m,
        })
    }

    /// Checks that the derived fields are exactly what [`SamplingPlan::new`]
    /// would compute. Used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let fresh = Self::new(self.sound_speed_mps, self.sample_period_s, self.sample_count)?;
        if fresh != *self {
            return Err(Error::invalid(
                "sampling plan",
                "derived sample distance or max range inconsistent with period and count",
            ));
        }
        Ok(())
    }
}

/// Picks the sample period that makes `sample_count` samples span exactly
/// `desired_range` metres under the given water conditions.
pub fn plan_for_range<T: Real>(
    desired_range: T,
    cond: &WaterConditions<T>,
    sample_count: u32,
) -> Result<SamplingPlan<T>> {
    if !(desired_range > T::zero()) || !desired_range.is_finite() {
        return Err(Error::invalid(
            "range",
            format!("{desired_range} m must be positive"),
        ));
    }
    if sample_count == 0 {
        return Err(Error::invalid("sample count", "must be positive"));
    }
    let c = sound_speed(cond);
    let n = T::from_u32(sample_count).expect("u32 fits scalar");
    let period = T::lit(2.0) * desired_range / (c * n);
    SamplingPlan::new(c, period, sample_count)
}

/// The 7 m / 1200-sample configuration used for the pool recordings.
pub fn pool_plan() -> SamplingPlan<f64> {
    plan_for_range(7.0, &WaterConditions::freshwater_pool(), 1200)
        .expect("pool configuration is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cond(t: f64, s: f64, d: f64) -> WaterConditions<f64> {
        WaterConditions::new(t, s, d).unwrap()
    }

    // direct evaluation, kept apart from the implementation
    fn eq_oracle(t: f64, s: f64, d: f64) -> f64 {
        1410.0 + 4.21 * t - 0.037 * t * t + 1.1 * s + 0.018 * d
    }

    #[test]
    fn sound_speed_examples() {
        assert_eq!(sound_speed(&cond(0.0, 0.0, 0.0)), 1410.0);
        assert!((sound_speed(&cond(10.0, 0.0, 0.15)) - 1448.4027).abs() < 1e-9);
        assert!((sound_speed(&cond(10.0, 35.0, 0.0)) - 1486.9).abs() < 1e-9);
        assert_eq!(sound_speed(&cond(10.0, 0.0, 0.15)), eq_oracle(10.0, 0.0, 0.15));
    }

    #[test]
    fn sound_speed_f32() {
        let c: f32 = sound_speed(&WaterConditions::<f32>::freshwater_pool());
        assert!((c - 1448.4027).abs() < 1e-2);
    }

    #[test]
    fn rejects_out_of_range_conditions() {
        assert!(WaterConditions::new(41.0, 0.0, 0.0).is_err());
        assert!(WaterConditions::new(-3.0, 0.0, 0.0).is_err());
        assert!(WaterConditions::new(10.0, 43.0, 0.0).is_err());
        assert!(WaterConditions::new(10.0, -0.1, 0.0).is_err());
        assert!(WaterConditions::new(10.0, 0.0, -1.0).is_err());
        assert!(WaterConditions::new(f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn sample_distance_examples() {
        assert_eq!(sample_distance(1410.0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(sample_distance(1500.0, 1.0e-5).unwrap(), 0.0075, epsilon = 1e-15);
        assert!((sample_distance(1448.4027_f64, 8.0549e-6).unwrap() - 0.0058333).abs() < 1e-6);
        assert!(sample_distance(-1.0, 1.0).is_err());
        assert!(sample_distance(1.0, -1.0).is_err());
    }

    #[test]
    fn max_range_examples() {
        assert!((max_range(0.00583_f64, 1200).unwrap() - 6.996).abs() < 1e-12);
        assert_eq!(max_range(0.0058, 0).unwrap(), 0.0);
        assert!((max_range(0.005_f64, 1000).unwrap() - 5.0).abs() < 1e-12);
        assert!(max_range(-0.1, 10).is_err());
    }

    #[test]
    fn plan_for_range_examples() {
        let plan = plan_for_range(7.0_f64, &WaterConditions::freshwater_pool(), 1200).unwrap();
        assert!((plan.sample_period_s - 8.0549e-6).abs() < 1e-9);
        let back = max_range(
            sample_distance(plan.sound_speed_mps, plan.sample_period_s).unwrap(),
            1200,
        )
        .unwrap();
        assert!((back - 7.0).abs() < 1e-9);

        let single = plan_for_range(3.3, &cond(4.0, 1.0, 2.0), 1).unwrap();
        assert_relative_eq!(single.sample_distance_m, 3.3, max_relative = 1e-12);

        let p = plan_for_range(5.0, &cond(0.0, 0.0, 0.0), 1000).unwrap();
        assert!((p.sample_period_s - 2.0 * 5.0 / (1410.0 * 1000.0)).abs() < 1e-18);
        assert!((p.sample_period_s - 7.0922e-6).abs() < 1e-9);

        assert!(plan_for_range(0.0, &cond(0.0, 0.0, 0.0), 10).is_err());
        assert!(plan_for_range(1.0, &cond(0.0, 0.0, 0.0), 0).is_err());
    }

    #[test]
    fn plan_validation_detects_tampering() {
        let mut plan = pool_plan();
        plan.validate().unwrap();
        plan.max_range_m += 1e-6;
        assert!(plan.validate().is_err());
    }

    proptest! {
        #[test]
        fn range_round_trip(range in 0.1f64..300.0, t in -2.0f64..40.0, s in 0.0f64..42.0,
                            d in 0.0f64..1000.0, n in 1u32..65536) {
            let plan = plan_for_range(range, &cond(t, s, d), n).unwrap();
            prop_assert!(((plan.max_range_m - range) / range).abs() < 1e-9);
            prop_assert!(plan.sample_distance_m > 0.0 && plan.sample_period_s > 0.0);
            prop_assert_eq!(plan.max_range_m, plan.sample_distance_m * n as f64);
        }

        #[test]
        fn sound_speed_monotone(t in 0.0f64..39.0, s in 0.0f64..41.0, d in 0.0f64..500.0) {
            let base = sound_speed(&cond(t, s, d));
            prop_assert!(sound_speed(&cond(t + 0.5, s, d)) > base);
            prop_assert!(sound_speed(&cond(t, s + 0.5, d)) > base);
            prop_assert!(sound_speed(&cond(t, s, d + 0.5)) > base);
        }

        #[test]
        fn sample_distance_linear(c in 0.0f64..2000.0, p in 0.0f64..1e-3) {
            let one = sample_distance(c, p).unwrap();
            prop_assert_eq!(sample_distance(2.0 * c, p).unwrap(), 2.0 * one);
        }
    }
}
