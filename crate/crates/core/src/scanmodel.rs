//! Scan data model, coordinate transforms and rasterization.
//!
//! Angles are integer gradians (400 per revolution), 0 along the forward
//! x-axis and positive counterclockwise (towards +y, the sonar's left).
//! Bin `i` of a line sits at range `(i + 1) * sample_distance`, so the last
//! bin lands exactly on the plan's maximum range.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::acoustics::SamplingPlan;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Receiver gain setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Gain {
    G0,
    #[default]
    G1,
    G2,
}

impl Gain {
    pub fn index(self) -> u8 {
        match self {
            Gain::G0 => 0,
            Gain::G1 => 1,
            Gain::G2 => 2,
        }
    }

    pub fn from_index(index: u8) -> Option<Self> {
        match index {
            0 => Some(Gain::G0),
            1 => Some(Gain::G1),
            2 => Some(Gain::G2),
            _ => None,
        }
    }
}

impl fmt::Display for Gain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.index())
    }
}

impl FromStr for Gain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let idx = s.trim().trim_start_matches(['G', 'g']);
        idx.parse::<u8>()
            .ok()
            .and_then(Gain::from_index)
            .ok_or_else(|| Error::invalid("gain", format!("{s:?} (expected G0, G1 or G2)")))
    }
}

/// Sector scan configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub plan: SamplingPlan<f64>,
    pub gain: Gain,
    pub sector_start_grad: i16,
    pub sector_end_grad: i16,
    pub angular_step_grad: u8,
}

impl ScanConfig {
    pub fn new(
        plan: SamplingPlan<f64>,
        gain: Gain,
        sector_start_grad: i16,
        sector_end_grad: i16,
        angular_step_grad: u8,
    ) -> Result<Self> {
        let cfg = Self {
            plan,
            gain,
            sector_start_grad,
            sector_end_grad,
            angular_step_grad,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// -100..=100 gradians in 1-gradian steps over the 7 m / 1200-sample plan, gain G1.
    pub fn pool_default() -> Self {
        Self::new(crate::acoustics::pool_plan(), Gain::G1, -100, 100, 1)
            .expect("default configuration is valid")
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if !(1..=65535).contains(&self.plan.sample_count) {
            return Err(Error::invalid(
                "sample count",
                format!("{} outside [1, 65535]", self.plan.sample_count),
            ));
        }
        let (start, end) = (self.sector_start_grad, self.sector_end_grad);
        if !(-200..=200).contains(&start) || !(-200..=200).contains(&end) {
            return Err(Error::invalid(
                "sector",
                format!("[{start}, {end}] gradians outside [-200, 200]"),
            ));
        }
        if start >= end {
            return Err(Error::invalid(
                "sector",
                format!("start {start} must be below end {end}"),
            ));
        }
        if self.angular_step_grad == 0 {
            return Err(Error::invalid("angular step", "must be at least 1 gradian"));
        }
        if (end as i32 - start as i32) % self.angular_step_grad as i32 != 0 {
            return Err(Error::invalid(
                "sector",
                format!(
                    "width {} not divisible by step {}",
                    end as i32 - start as i32,
                    self.angular_step_grad
                ),
            ));
        }
        Ok(())
    }

    pub fn line_count(&self) -> usize {
        ((self.sector_end_grad as i32 - self.sector_start_grad as i32)
            / self.angular_step_grad as i32) as usize
            + 1
    }

    pub fn sample_count(&self) -> usize {
        self.plan.sample_count as usize
    }

    /// Beam angles of one sweep in scan order.
    pub fn angles(&self) -> impl Iterator<Item = i16> + '_ {
        (0..self.line_count()).map(move |k| {
            (self.sector_start_grad as i32 + k as i32 * self.angular_step_grad as i32) as i16
        })
    }
}

/// Intensities recorded along one beam.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanLine {
    pub angle_grad: i16,
    pub intensities: Vec<u8>,
}

impl ScanLine {
    pub fn new(angle_grad: i16, intensities: Vec<u8>) -> Self {
        Self {
            angle_grad,
            intensities,
        }
    }

    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }
}

/// Descriptive tags carried alongside a sweep.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub processed: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

/// One full sector scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    config: ScanConfig,
    lines: Vec<ScanLine>,
    meta: SweepMeta,
}

impl Sweep {
    pub fn new(config: ScanConfig, lines: Vec<ScanLine>, meta: SweepMeta) -> Result<Self> {
        config.validate()?;
        if lines.len() != config.line_count() {
            return Err(Error::invalid(
                "sweep",
                format!(
                    "{} lines for a sector of {} steps",
                    lines.len(),
                    config.line_count()
                ),
            ));
        }
        for (k, (line, angle)) in lines.iter().zip(config.angles()).enumerate() {
            if line.angle_grad != angle {
                return Err(Error::invalid(
                    "sweep",
                    format!("line {k} has angle {} where {angle} expected", line.angle_grad),
                ));
            }
            if line.len() != config.sample_count() {
                return Err(Error::invalid(
                    "sweep",
                    format!(
                        "line {k} has {} samples, config says {}",
                        line.len(),
                        config.sample_count()
                    ),
                ));
            }
        }
        Ok(Self {
            config,
            lines,
            meta,
        })
    }

    /// All-zero sweep for `config`.
    pub fn zeros(config: ScanConfig) -> Result<Self> {
        let n = config.sample_count();
        let lines = config
            .angles()
            .map(|a| ScanLine::new(a, vec![0; n]))
            .collect();
        Self::new(config, lines, SweepMeta::default())
    }

    pub fn config(&self) -> &ScanConfig {
        &self.config
    }

    pub fn lines(&self) -> &[ScanLine] {
        &self.lines
    }

    pub fn meta(&self) -> &SweepMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut SweepMeta {
        &mut self.meta
    }

    pub fn into_parts(self) -> (ScanConfig, Vec<ScanLine>, SweepMeta) {
        (self.config, self.lines, self.meta)
    }
}

/// A polar sample: range, bearing and recorded intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarSample<T> {
    pub r_m: T,
    pub theta_rad: T,
    pub intensity: u8,
}

/// Plan-view position relative to the transducer, x forward and y to the left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianPoint<T> {
    pub x_m: T,
    pub y_m: T,
}

impl<T: Real> CartesianPoint<T> {
    pub fn new(x_m: T, y_m: T) -> Self {
        Self { x_m, y_m }
    }
}

/// Range and bearing of a point. Uses the two-argument arctangent so the
/// ±90° beams are well defined; the origin maps to `(0, 0)`.
pub fn to_polar<T: Real>(p: CartesianPoint<T>) -> (T, T) {
    let r = p.x_m.hypot(p.y_m);
    if r == T::zero() {
        return (T::zero(), T::zero());
    }
    (r, p.y_m.atan2(p.x_m))
}

pub fn to_cartesian<T: Real>(r: T, theta: T) -> Result<CartesianPoint<T>> {
    if !(r >= T::zero()) {
        return Err(Error::invalid("range", format!("{r} m is negative")));
    }
    Ok(CartesianPoint::new(r * theta.cos(), r * theta.sin()))
}

pub fn grad_to_rad<T: Real>(grad: T) -> T {
    grad * T::PI() / T::lit(200.0)
}

pub fn rad_to_grad<T: Real>(rad: T) -> T {
    rad * T::lit(200.0) / T::PI()
}

/// Range of bin `index`: `(index + 1) * sample_distance`.
pub fn bin_range<T: Real>(plan: &SamplingPlan<T>, index: usize) -> Result<T> {
    let len = plan.sample_count as usize;
    if index >= len {
        return Err(Error::IndexOutOfBounds { index, len });
    }
    Ok(T::from_count(index + 1) * plan.sample_distance_m)
}

/// Polar samples of every nonzero bin in the sweep.
pub fn polar_samples(sweep: &Sweep) -> Vec<PolarSample<f64>> {
    let plan = &sweep.config().plan;
    sweep
        .lines()
        .iter()
        .flat_map(|line| {
            let theta = grad_to_rad(line.angle_grad as f64);
            line.intensities
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0)
                .map(move |(i, &v)| PolarSample {
                    r_m: (i + 1) as f64 * plan.sample_distance_m,
                    theta_rad: theta,
                    intensity: v,
                })
        })
        .collect()
}

/// Range-angle image: row `i` is line `i`, column `j` is bin `j`.
pub fn rasterize_rect(sweep: &Sweep) -> GrayImage {
    let width = sweep.config().sample_count() as u32;
    let height = sweep.lines().len() as u32;
    let buf: Vec<u8> = sweep
        .lines()
        .iter()
        .flat_map(|l| l.intensities.iter().copied())
        .collect();
    GrayImage::from_raw(width, height, buf).expect("sweep lines are rectangular")
}

/// Inverse of [`rasterize_rect`].
pub fn sweep_from_rect(raster: &GrayImage, config: ScanConfig, meta: SweepMeta) -> Result<Sweep> {
    let expected = (config.line_count(), config.sample_count());
    let found = (raster.height() as usize, raster.width() as usize);
    if expected != found {
        return Err(Error::ShapeMismatch { expected, found });
    }
    let lines = config
        .angles()
        .zip(raster.as_raw().chunks_exact(found.1))
        .map(|(a, row)| ScanLine::new(a, row.to_vec()))
        .collect();
    Sweep::new(config, lines, meta)
}

/// Pixel geometry of a fan projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FanGeometry {
    pub pixels_per_meter: f64,
    /// Side length of the square raster in pixels.
    pub side: u32,
    /// Column of the transducer (midpoint of the bottom edge).
    pub origin_col: u32,
    /// Row of the transducer (the bottom row).
    pub origin_row: u32,
}

impl FanGeometry {
    pub fn new(max_range_m: f64, pixels_per_meter: f64) -> Result<Self> {
        if !(pixels_per_meter > 0.0) || !pixels_per_meter.is_finite() {
            return Err(Error::invalid(
                "pixels per meter",
                format!("{pixels_per_meter} must be positive"),
            ));
        }
        let reach = (max_range_m * pixels_per_meter).ceil().max(0.0) as u32;
        let side = 2 * reach + 1;
        Ok(Self {
            pixels_per_meter,
            side,
            origin_col: reach,
            origin_row: side - 1,
        })
    }

    /// Nearest pixel `(col, row)` for a plan-view point, if it falls inside.
    pub fn pixel(&self, p: CartesianPoint<f64>) -> Option<(u32, u32)> {
        let col = self.origin_col as f64 - (p.y_m * self.pixels_per_meter).round();
        let row = self.origin_row as f64 - (p.x_m * self.pixels_per_meter).round();
        let limit = self.side as f64;
        if col < 0.0 || row < 0.0 || col >= limit || row >= limit {
            return None;
        }
        Some((col as u32, row as u32))
    }
}

/// Plan-view occupancy image. The transducer sits at the middle of the
/// bottom edge with forward pointing up; colliding samples keep the maximum
/// intensity and no interpolation is done.
pub fn rasterize_fan(sweep: &Sweep, pixels_per_meter: f64) -> Result<GrayImage> {
    let plan = &sweep.config().plan;
    let geom = FanGeometry::new(plan.max_range_m, pixels_per_meter)?;
    let mut img = GrayImage::new(geom.side, geom.side);
    for line in sweep.lines() {
        let theta = grad_to_rad(line.angle_grad as f64);
        let (sin, cos) = theta.sin_cos();
        for (i, &v) in line.intensities.iter().enumerate() {
            if v == 0 {
                continue;
            }
            let r = (i + 1) as f64 * plan.sample_distance_m;
            let p = CartesianPoint::new(r * cos, r * sin);
            if let Some((col, row)) = geom.pixel(p) {
                let px = img.get_pixel_mut(col, row);
                if v > px.0[0] {
                    *px = Luma([v]);
                }
            }
        }
    }
    Ok(img)
}
