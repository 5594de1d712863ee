//! Ray-cast simulation of a single-beam sonar in a rectangular pool.
//!
//! The model is a horizontal slice. Each beam is a single ray from the
//! transducer: the first surface it meets (an object or a wall) returns a
//! three-bin echo, everything behind that surface is in acoustic shadow, a
//! weaker ghost of the wall echo appears beyond the wall, the first
//! `near_head_radius_m` are filled with rotation noise, and random speckle
//! is sprinkled over the whole line. Every bin is labelled with the term
//! that produced it, which is what the object masks are derived from.
//!
//! Coordinates are sonar-centred: x forward along the pool, y to the left.

use std::fmt;
use std::path::Path;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acoustics::SamplingPlan;
use crate::datastore::{self, DatasetManifest, StoreError};
use crate::error::{Error, Result};
use crate::preprocess::{preprocess_sweep, RoiSpec, ThresholdRule};
use crate::scanmodel::{grad_to_rad, rasterize_rect, ScanConfig, ScanLine, Sweep, SweepMeta};

/// Bins on each side of the centre bin of an echo pulse.
pub const PULSE_HALF_WIDTH: usize = 1;
/// Echo amplitude floor and ceiling.
pub const MIN_ECHO: f64 = 30.0;
pub const MAX_ECHO: f64 = 255.0;
/// Relative amplitude of the two flanking pulse bins.
pub const PULSE_FLANK: f64 = 0.8;
/// Range beyond the wall where the ghost echo may appear, metres.
pub const GHOST_OFFSET_M: (f64, f64) = (0.1, 0.9);

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Pipe,
    Bucket,
}

impl ObjectKind {
    pub fn default_width_m(self) -> f64 {
        match self {
            ObjectKind::Pipe => 0.05,
            ObjectKind::Bucket => 0.30,
        }
    }
}

/// An object hung in the water, modelled as a vertical cylinder whose
/// horizontal cross-section has diameter `width_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ObjectKind,
    pub center_x_m: f64,
    pub center_y_m: f64,
    pub width_m: f64,
    pub reflectivity: f64,
}

impl SceneObject {
    pub fn pipe(x: f64, y: f64, reflectivity: f64) -> Self {
        Self {
            kind: ObjectKind::Pipe,
            center_x_m: x,
            center_y_m: y,
            width_m: ObjectKind::Pipe.default_width_m(),
            reflectivity,
        }
    }

    pub fn bucket(x: f64, y: f64) -> Self {
        Self {
            kind: ObjectKind::Bucket,
            center_x_m: x,
            center_y_m: y,
            width_m: ObjectKind::Bucket.default_width_m(),
            reflectivity: 0.9,
        }
    }

    pub fn radius(&self) -> f64 {
        self.width_m / 2.0
    }

    /// Distance along the unit ray `(cos, sin)` to the first crossing of
    /// the object's outline, with the cosine of the incidence angle.
    fn intersect(&self, dir: (f64, f64)) -> Option<(f64, f64)> {
        let (cx, cy) = (self.center_x_m, self.center_y_m);
        let r = self.radius();
        let b = dir.0 * cx + dir.1 * cy;
        let c = cx * cx + cy * cy - r * r;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let t = b - disc.sqrt();
        if t <= EPS {
            return None;
        }
        let (hx, hy) = (t * dir.0 - cx, t * dir.1 - cy);
        let cos = ((hx * dir.0 + hy * dir.1) / r).abs().min(1.0);
        Some((t, cos))
    }
}

/// Noise and clutter terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub near_head_radius_m: f64,
    pub near_head_level: f64,
    pub speckle_prob: f64,
    pub speckle_max: u8,
    pub surface_reflection_gain: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            near_head_radius_m: 0.75,
            near_head_level: 120.0,
            speckle_prob: 0.02,
            speckle_max: 60,
            surface_reflection_gain: 0.35,
            seed: 0,
        }
    }
}

/// Rectangular pool with the transducer on the short rear wall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolScene {
    #[serde(default)]
    pub name: String,
    pub width_m: f64,
    pub length_m: f64,
    pub wall_reflectivity: f64,
    /// Transducer offset from the pool centreline, positive to the left.
    #[serde(default)]
    pub sonar_lateral_offset_m: f64,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub noise: NoiseModel,
}

impl Default for PoolScene {
    fn default() -> Self {
        Self {
            name: String::new(),
            width_m: 3.0,
            length_m: 6.0,
            wall_reflectivity: 0.9,
            sonar_lateral_offset_m: 0.0,
            objects: Vec::new(),
            noise: NoiseModel::default(),
        }
    }
}

impl PoolScene {
    /// Lateral position of the left (+y) and right (−y) walls.
    pub fn side_walls(&self) -> (f64, f64) {
        let half = self.width_m / 2.0;
        (half - self.sonar_lateral_offset_m, -half - self.sonar_lateral_offset_m)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.noise.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.width_m > 0.0 && self.length_m > 0.0) {
            return Err(Error::invalid("pool", "width and length must be positive"));
        }
        let (left, right) = self.side_walls();
        if !(left > 0.0 && right < 0.0) {
            return Err(Error::invalid("pool", "transducer must sit between the side walls"));
        }
        if !unit(self.wall_reflectivity) {
            return Err(Error::invalid("wall reflectivity", "outside [0, 1]"));
        }
        let n = &self.noise;
        if !unit(n.speckle_prob) || !unit(n.surface_reflection_gain) {
            return Err(Error::invalid("noise", "probabilities and gains must lie in [0, 1]"));
        }
        if !(n.near_head_radius_m >= 0.0) || !(0.0..=255.0).contains(&n.near_head_level) {
            return Err(Error::invalid("noise", "near-head radius or level out of range"));
        }
        for (k, o) in self.objects.iter().enumerate() {
            let r = o.radius();
            if !(o.width_m > 0.0) || !unit(o.reflectivity) {
                return Err(Error::invalid(
                    "scene object",
                    format!("object {k}: width must be positive and reflectivity in [0, 1]"),
                ));
            }
            let inside = o.center_x_m - r > 0.0
                && o.center_x_m + r < self.length_m
                && o.center_y_m + r < left
                && o.center_y_m - r > right;
            if !inside {
                return Err(Error::invalid(
                    "scene object",
                    format!("object {k} at ({}, {}) is not inside the pool", o.center_x_m, o.center_y_m),
                ));
            }
        }
        Ok(())
    }
}

/// What produced a bin's intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Provenance {
    Background = 0,
    Wall = 1,
    Object = 2,
    Shadow = 3,
    SurfaceReflection = 4,
    NearHeadNoise = 5,
    Speckle = 6,
}

impl Provenance {
    pub const ALL: [Provenance; 7] = [
        Provenance::Background,
        Provenance::Wall,
        Provenance::Object,
        Provenance::Shadow,
        Provenance::SurfaceReflection,
        Provenance::NearHeadNoise,
        Provenance::Speckle,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Direct echo from a surface.
    pub fn is_echo(self) -> bool {
        matches!(self, Provenance::Wall | Provenance::Object)
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Provenance::Background => "background",
            Provenance::Wall => "wall",
            Provenance::Object => "object",
            Provenance::Shadow => "shadow",
            Provenance::SurfaceReflection => "surface_reflection",
            Provenance::NearHeadNoise => "near_head_noise",
            Provenance::Speckle => "speckle",
        };
        f.write_str(s)
    }
}

/// Per-bin provenance labels with the shape of the sweep's rect raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    lines: usize,
    samples: usize,
    labels: Vec<Provenance>,
}

impl GroundTruth {
    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn get(&self, line: usize, bin: usize) -> Provenance {
        self.labels[line * self.samples + bin]
    }

    pub fn line(&self, line: usize) -> &[Provenance] {
        &self.labels[line * self.samples..(line + 1) * self.samples]
    }

    pub fn count(&self, label: Provenance) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// 255 where the label is [`Provenance::Object`], 0 elsewhere.
    pub fn object_mask(&self) -> GrayImage {
        let buf = self
            .labels
            .iter()
            .map(|&l| if l == Provenance::Object { 255 } else { 0 })
            .collect();
        GrayImage::from_raw(self.samples as u32, self.lines as u32, buf).expect("label shape")
    }

    /// Labels as an image of provenance codes.
    pub fn to_label_image(&self) -> GrayImage {
        let buf = self.labels.iter().map(|l| l.code()).collect();
        GrayImage::from_raw(self.samples as u32, self.lines as u32, buf).expect("label shape")
    }

    pub fn from_label_image(img: &GrayImage) -> Result<Self> {
        let labels = img
            .as_raw()
            .iter()
            .map(|&c| {
                Provenance::from_code(c)
                    .ok_or_else(|| Error::invalid("provenance", format!("unknown code {c}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lines: img.height() as usize,
            samples: img.width() as usize,
            labels,
        })
    }
}

/// Surface first met by a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HitTarget {
    Wall,
    /// Index into the scene's objects.
    Object(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub range_m: f64,
    pub target: HitTarget,
    /// Cosine of the angle between the ray and the surface normal.
    pub incidence_cos: f64,
}

/// First wall crossing of the ray at `theta` (radians).
pub fn wall_hit(scene: &PoolScene, theta: f64) -> Hit {
    let (sin, cos) = theta.sin_cos();
    let (left, right) = scene.side_walls();
    let mut best = (f64::INFINITY, 0.0);
    if cos > EPS {
        best = (scene.length_m / cos, cos);
    }
    if sin > EPS && left / sin < best.0 {
        best = (left / sin, sin);
    }
    if sin < -EPS && right / sin < best.0 {
        best = (right / sin, -sin);
    }
    Hit {
        range_m: best.0,
        target: HitTarget::Wall,
        incidence_cos: best.1,
    }
}

/// First surface along the ray at `theta`: the nearest object crossing if
/// it comes before the wall, otherwise the wall.
pub fn first_hit(scene: &PoolScene, theta: f64) -> Hit {
    let dir = (theta.cos(), theta.sin());
    let wall = wall_hit(scene, theta);
    scene
        .objects
        .iter()
        .enumerate()
        .filter_map(|(k, o)| o.intersect(dir).map(|(t, cos)| (k, t, cos)))
        .filter(|&(_, t, _)| t < wall.range_m)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, t, cos)| Hit {
            range_m: t,
            target: HitTarget::Object(k),
            incidence_cos: cos,
        })
        .unwrap_or(wall)
}

/// `round(255 · reflectivity · cos)` clamped to the echo range.
pub fn echo_amplitude(reflectivity: f64, incidence_cos: f64) -> u8 {
    (MAX_ECHO * reflectivity * incidence_cos)
        .round()
        .clamp(MIN_ECHO, MAX_ECHO) as u8
}

/// Bin whose range `(i + 1) · S_d` is nearest to `range_m`.
pub fn nearest_bin(plan: &SamplingPlan<f64>, range_m: f64) -> i64 {
    (range_m / plan.sample_distance_m).round() as i64 - 1
}

fn pulse(center: i64, amplitude: u8, n: usize) -> impl Iterator<Item = (usize, u8)> {
    let half = PULSE_HALF_WIDTH as i64;
    let flank = (amplitude as f64 * PULSE_FLANK).round() as u8;
    (center - half..=center + half)
        .filter(move |&i| i >= 0 && (i as usize) < n)
        .map(move |i| (i as usize, if i == center { amplitude } else { flank }))
}

/// Intensities and labels of one beam.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamEcho {
    pub intensities: Vec<u8>,
    pub provenance: Vec<Provenance>,
    pub first_hit: Hit,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent random stream for one beam of a sweep.
pub fn beam_rng(seed: u64, angle_grad: i16) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(angle_grad as i64 as u64)))
}

/// Simulates one beam.
pub fn cast_beam(
    scene: &PoolScene,
    angle_grad: i16,
    plan: &SamplingPlan<f64>,
    rng: &mut impl Rng,
) -> BeamEcho {
    let n = plan.sample_count as usize;
    let sd = plan.sample_distance_m;
    let theta = grad_to_rad(angle_grad as f64);
    let mut intensities = vec![0u8; n];
    let mut provenance = vec![Provenance::Background; n];

    let hit = first_hit(scene, theta);
    let (reflectivity, label) = match hit.target {
        HitTarget::Wall => (scene.wall_reflectivity, Provenance::Wall),
        HitTarget::Object(k) => (scene.objects[k].reflectivity, Provenance::Object),
    };
    let center = nearest_bin(plan, hit.range_m);
    for (i, v) in pulse(center, echo_amplitude(reflectivity, hit.incidence_cos), n) {
        intensities[i] = v;
        provenance[i] = label;
    }
    let shadow_start = (center + PULSE_HALF_WIDTH as i64 + 1).max(0) as usize;
    for p in provenance.iter_mut().skip(shadow_start) {
        *p = Provenance::Shadow;
    }

    let noise = &scene.noise;
    let mut overlay = |i: usize, v: u8, label: Provenance| {
        if provenance[i].is_echo() {
            intensities[i] = intensities[i].max(v);
        } else if v > intensities[i] {
            intensities[i] = v;
            provenance[i] = label;
        }
    };

    // ghost of the wall echo, whether or not the wall is occluded
    let wall = wall_hit(scene, theta);
    let ghost_range = wall.range_m + rng.random_range(GHOST_OFFSET_M.0..GHOST_OFFSET_M.1);
    let wall_amp = echo_amplitude(scene.wall_reflectivity, wall.incidence_cos) as f64;
    let ghost_amp = (wall_amp * noise.surface_reflection_gain).round() as u8;
    if ghost_amp > 0 && ghost_range.is_finite() {
        for (i, v) in pulse(nearest_bin(plan, ghost_range), ghost_amp, n) {
            overlay(i, v, Provenance::SurfaceReflection);
        }
    }

    let level = noise.near_head_level;
    for i in 0..n {
        if (i + 1) as f64 * sd >= noise.near_head_radius_m {
            break;
        }
        let v = rng.random_range(0.5 * level..=1.5 * level).round().clamp(1.0, 255.0) as u8;
        overlay(i, v, Provenance::NearHeadNoise);
    }

    for i in 0..n {
        let roll: f64 = rng.random();
        let v = rng.random_range(1..=noise.speckle_max.max(1));
        if roll < noise.speckle_prob {
            overlay(i, v, Provenance::Speckle);
        }
    }

    BeamEcho {
        intensities,
        provenance,
        first_hit: hit,
    }
}

/// Simulates a full sector sweep. Beams use independent random streams
/// keyed by angle, so the result does not depend on beam scheduling.
pub fn simulate_sweep(scene: &PoolScene, config: &ScanConfig) -> Result<(Sweep, GroundTruth)> {
    scene.validate()?;
    config.validate()?;
    if config.sector_start_grad < -100 || config.sector_end_grad > 100 {
        return Err(Error::invalid(
            "sector",
            format!(
                "[{}, {}] gradians; simulation covers at most [-100, 100]",
                config.sector_start_grad, config.sector_end_grad
            ),
        ));
    }
    let angles: Vec<i16> = config.angles().collect();
    let beams: Vec<BeamEcho> = angles
        .par_iter()
        .map(|&a| cast_beam(scene, a, &config.plan, &mut beam_rng(scene.noise.seed, a)))
        .collect();
    let samples = config.sample_count();
    let mut labels = Vec::with_capacity(angles.len() * samples);
    let mut lines = Vec::with_capacity(angles.len());
    for (a, beam) in angles.into_iter().zip(beams) {
        labels.extend(beam.provenance);
        lines.push(ScanLine::new(a, beam.intensities));
    }
    let meta = SweepMeta {
        scene: (!scene.name.is_empty()).then(|| scene.name.clone()),
        seed: Some(scene.noise.seed),
        processed: false,
        tags: Default::default(),
    };
    let sweep = Sweep::new(*config, lines, meta)?;
    let truth = GroundTruth {
        lines: sweep.lines().len(),
        samples,
        labels,
    };
    Ok((sweep, truth))
}

/// Wire positions, metres from the transducer.
pub const WIRE_1_M: f64 = 2.0;
pub const WIRE_2_M: f64 = 4.0;

const GREY_PIPE: f64 = 0.7;
const WHITE_PIPE: f64 = 0.8;

/// The ten recorded pool layouts. Lateral hook positions are
/// representative; only wire distances and object types are fixed.
pub fn experiment_scene(n: u8) -> Result<PoolScene> {
    let grey = |y| SceneObject::pipe(WIRE_1_M, y, GREY_PIPE);
    let objects = match n {
        1 => vec![],
        2 => vec![grey(0.0)],
        // pipes aligned on both wires; the front one hides the rear one
        3 => vec![grey(0.0), SceneObject::pipe(WIRE_2_M, 0.0, WHITE_PIPE)],
        4 => vec![grey(0.4), SceneObject::pipe(WIRE_2_M, -0.5, WHITE_PIPE)],
        5 => vec![grey(-0.6), SceneObject::pipe(WIRE_2_M, 0.6, WHITE_PIPE)],
        6 => vec![grey(-0.4), SceneObject::pipe(WIRE_1_M, 0.4, WHITE_PIPE)],
        // bucket on wire 2 faces the gap between the two pipes
        7 => vec![
            grey(-0.3),
            SceneObject::pipe(WIRE_1_M, 0.3, WHITE_PIPE),
            SceneObject::bucket(WIRE_2_M, 0.0),
        ],
        // narrow pipe in front of a wider bucket on the same line
        8 => vec![
            SceneObject::pipe(WIRE_1_M, 0.0, WHITE_PIPE),
            SceneObject::bucket(WIRE_2_M, 0.0),
        ],
        9 => vec![SceneObject::bucket(WIRE_2_M, 0.0)],
        10 => vec![
            SceneObject::bucket(WIRE_1_M, 0.0),
            SceneObject::bucket(WIRE_2_M, 0.5),
        ],
        other => {
            return Err(Error::invalid(
                "experiment",
                format!("{other} (expected 1 to 10)"),
            ))
        }
    };
    Ok(PoolScene {
        name: format!("experiment-{n}"),
        objects,
        ..PoolScene::default()
    })
}

/// Random perturbation applied to the scenes of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub lateral_sigma_m: f64,
    pub reflectivity_sigma: f64,
    pub seed: u64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            lateral_sigma_m: 0.1,
            reflectivity_sigma: 0.05,
            seed: 0,
        }
    }
}

/// Scene for sample `index` of a generated dataset: experiments cycle 1..=10,
/// object positions and reflectivities are jittered and the noise seed is fresh.
pub fn dataset_scene(index: usize, jitter: &Jitter) -> Result<PoolScene> {
    let experiment = (index % 10) as u8 + 1;
    let mut scene = experiment_scene(experiment)?;
    let sample_seed = splitmix64(jitter.seed ^ splitmix64(index as u64 ^ 0xD1CE));
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let lateral = Normal::new(0.0, jitter.lateral_sigma_m.max(0.0))
        .map_err(|e| Error::invalid("jitter", e.to_string()))?;
    let refl = Normal::new(0.0, jitter.reflectivity_sigma.max(0.0))
        .map_err(|e| Error::invalid("jitter", e.to_string()))?;
    let (left, right) = scene.side_walls();
    for o in &mut scene.objects {
        let margin = o.radius() + 0.01;
        o.center_y_m = (o.center_y_m + lateral.sample(&mut rng)).clamp(right + margin, left - margin);
        o.reflectivity = (o.reflectivity + refl.sample(&mut rng)).clamp(0.05, 1.0);
    }
    scene.name = format!("{}-sample-{index}", scene.name);
    scene.noise.seed = rng.random();
    Ok(scene)
}

pub const LABEL_DIR: &str = "labels";

/// Writes `count` simulated samples under `out` (raw and preprocessed rect
/// rasters, object masks and provenance label images) plus a manifest.
pub fn generate_dataset(
    out: &Path,
    count: usize,
    jitter: &Jitter,
    train_fraction: f64,
) -> Result<DatasetManifest, StoreError> {
    if count == 0 {
        return Err(StoreError::Manifest("dataset needs at least one sample".into()));
    }
    let config = ScanConfig::pool_default();
    let roi = RoiSpec::default();
    (0..count).into_par_iter().try_for_each(|k| {
        let scene = dataset_scene(k, jitter)?;
        let (sweep, truth) = simulate_sweep(&scene, &config)?;
        let processed = preprocess_sweep(&sweep, &roi, ThresholdRule::default())?;
        let id = format!("s{k:05}-e{:02}", k % 10 + 1);
        let file = format!("{id}.png");
        datastore::save_png(&out.join(datastore::RAW_DIR).join(&file), &rasterize_rect(&sweep))?;
        datastore::save_png(
            &out.join(datastore::PROCESSED_DIR).join(&file),
            &rasterize_rect(&processed),
        )?;
        datastore::save_png(&out.join(datastore::MASK_DIR).join(&file), &truth.object_mask())?;
        datastore::save_png(&out.join(LABEL_DIR).join(&file), &truth.to_label_image())?;
        Ok::<_, StoreError>(())
    })?;
    let build = datastore::build_manifest(out, train_fraction, jitter.seed)?;
    datastore::save_manifest(out, &build.manifest)?;
    Ok(build.manifest)
}
