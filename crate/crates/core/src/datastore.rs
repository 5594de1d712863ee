//! Persistence: scan files, mask images, annotation records, dataset
//! manifests, and a configurable importer for foreign CSV layouts.
//!
//! A scan file is one JSON header line followed by one CSV line per beam:
//!
//! ```text
//! {"format_version":1,"config":{...},"line_count":201,"sample_count":1200,...}
//! -100,0,0,12,...
//! -99,0,3,0,...
//! ```
//!
//! Files are written to a temporary sibling and renamed into place, so
//! readers never observe a partial file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use image::{GrayImage, ImageFormat};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acoustics::{plan_for_range, sound_speed, SamplingPlan, WaterConditions};
use crate::scanmodel::{Gain, ScanConfig, ScanLine, Sweep, SweepMeta};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Schema {
        line: Option<usize>,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("cannot import: {message} (detected columns: {detected_columns:?})")]
    Import {
        message: String,
        detected_columns: Vec<String>,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Invalid(#[from] crate::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn schema(line: Option<usize>, message: impl Into<String>) -> StoreError {
    StoreError::Schema {
        line,
        message: message.into(),
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ScanHeader {
    format_version: u32,
    config: ScanConfig,
    line_count: usize,
    sample_count: usize,
    #[serde(flatten)]
    meta: SweepMeta,
}

/// Serializes a sweep into scan-file text.
pub fn sweep_to_string(sweep: &Sweep) -> String {
    let header = ScanHeader {
        format_version: FORMAT_VERSION,
        config: *sweep.config(),
        line_count: sweep.lines().len(),
        sample_count: sweep.config().sample_count(),
        meta: sweep.meta().clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for line in sweep.lines() {
        out.push_str(&line.angle_grad.to_string());
        for v in &line.intensities {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

/// Parses scan-file text. Accepts CRLF line endings and blank lines.
pub fn parse_sweep(text: &str) -> Result<Sweep> {
    let mut lines = text
        .split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty());

    let (hline, htext) = lines.next().ok_or(StoreError::Parse {
        line: 1,
        message: "empty scan file".into(),
    })?;
    let header: ScanHeader = serde_json::from_str(htext).map_err(|e| StoreError::Parse {
        line: hline,
        message: format!("bad header: {e}"),
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(schema(
            Some(hline),
            format!("unsupported format version {}", header.format_version),
        ));
    }
    header.config.validate()?;
    if header.sample_count != header.config.sample_count()
        || header.line_count != header.config.line_count()
    {
        return Err(schema(
            Some(hline),
            format!(
                "header declares {}x{} but config implies {}x{}",
                header.line_count,
                header.sample_count,
                header.config.line_count(),
                header.config.sample_count()
            ),
        ));
    }

    let mut body = Vec::with_capacity(header.line_count);
    let mut angles = header.config.angles();
    for (lineno, text) in lines {
        let mut fields = text.split(',');
        let angle_text = fields.next().unwrap_or_default().trim();
        let angle: i16 = angle_text.parse().map_err(|_| StoreError::Parse {
            line: lineno,
            message: format!("bad angle {angle_text:?}"),
        })?;
        let intensities = fields
            .map(|f| {
                f.trim().parse::<u8>().map_err(|_| StoreError::Parse {
                    line: lineno,
                    message: format!("intensity {f:?} is not an integer in 0..=255"),
                })
            })
            .collect::<Result<Vec<u8>>>()?;
        if intensities.len() != header.sample_count {
            return Err(schema(
                Some(lineno),
                format!(
                    "{} intensities, header says {}",
                    intensities.len(),
                    header.sample_count
                ),
            ));
        }
        match angles.next() {
            Some(a) if a == angle => {}
            Some(a) => {
                return Err(schema(
                    Some(lineno),
                    format!("angle {angle} where {a} expected"),
                ))
            }
            None => {
                return Err(schema(
                    Some(lineno),
                    format!("more than {} lines", header.line_count),
                ))
            }
        }
        body.push(ScanLine::new(angle, intensities));
    }
    if body.len() != header.line_count {
        return Err(schema(
            None,
            format!("{} lines, header says {}", body.len(), header.line_count),
        ));
    }
    Ok(Sweep::new(header.config, body, header.meta)?)
}

pub fn save_sweep(path: &Path, sweep: &Sweep) -> Result<()> {
    write_atomic(path, sweep_to_string(sweep).as_bytes())
}

pub fn load_sweep(path: &Path) -> Result<Sweep> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_sweep(&text)
}

/// PNG bytes of an 8-bit grayscale image.
pub fn encode_png(img: &GrayImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    buf.into_inner()
}

/// Decodes PNG bytes that must hold an 8-bit single-channel image.
pub fn decode_gray_png(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(format!(
            "expected 8-bit grayscale PNG, got {:?}",
            other.color()
        )),
    }
}

pub fn save_png(path: &Path, img: &GrayImage) -> Result<()> {
    write_atomic(path, &encode_png(img))
}

/// Loads a grayscale PNG, optionally requiring `(width, height)`.
pub fn load_png(path: &Path, expected: Option<(u32, u32)>) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img = decode_gray_png(&bytes).map_err(|m| schema(None, format!("{}: {m}", path.display())))?;
    if let Some(dims) = expected {
        if img.dimensions() != dims {
            return Err(schema(
                None,
                format!(
                    "{} is {}x{}, expected {}x{}",
                    path.display(),
                    img.width(),
                    img.height(),
                    dims.0,
                    dims.1
                ),
            ));
        }
    }
    Ok(img)
}

/// An object mask attached to a stored scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub scan_id: String,
    /// PNG, 0 = background and 255 = object, in rect-raster geometry.
    pub mask_path: PathBuf,
    /// `"simulator"` or a person's name.
    pub annotator: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub notes: String,
}

impl AnnotationRecord {
    /// Loads the mask and checks it against the scan's rect raster size.
    pub fn load_mask(&self, base: &Path, sweep: &Sweep) -> Result<GrayImage> {
        let dims = (
            sweep.config().sample_count() as u32,
            sweep.lines().len() as u32,
        );
        load_png(&base.join(&self.mask_path), Some(dims))
    }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| StoreError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| StoreError::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scan_id: String,
    pub raw_path: PathBuf,
    pub processed_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub total: usize,
}

/// Index of a dataset directory. Paths are relative to the directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub split_fraction: f64,
    pub counts: SplitCounts,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RAW_DIR: &str = "raw";
pub const PROCESSED_DIR: &str = "processed";
pub const MASK_DIR: &str = "masks";

/// Training-set size for `n` items: the validation share is floored and
/// the remainder goes to training.
pub fn split_sizes(n: usize, train_fraction: f64) -> Result<(usize, usize)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(StoreError::Manifest(format!(
            "split fraction {train_fraction} outside [0, 1]"
        )));
    }
    // tolerance keeps e.g. 700 * 0.2 from flooring to 139
    let val = ((n as f64) * (1.0 - train_fraction) + 1e-9).floor() as usize;
    let val = val.min(n);
    Ok((n - val, val))
}

/// Deterministically assigns splits to `ids` (sorted, then shuffled by seed).
pub fn assign_splits(
    ids: &[String],
    train_fraction: f64,
    seed: u64,
) -> Result<BTreeMap<String, Split>> {
    let mut order: Vec<&String> = ids.iter().collect();
    order.sort();
    order.dedup();
    let (train, _) = split_sizes(order.len(), train_fraction)?;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), if i < train { Split::Train } else { Split::Val }))
        .collect())
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.exists() {
        return Ok(BTreeSet::new());
    }
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_owned());
            }
        }
    }
    Ok(out)
}

/// Result of scanning a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestBuild {
    pub manifest: DatasetManifest,
    /// Files without a complete raw/processed/mask triple; excluded.
    pub orphans: Vec<PathBuf>,
}

/// Indexes `dir/raw`, `dir/processed` and `dir/masks` and splits the
/// complete triples.
pub fn build_manifest(dir: &Path, split_fraction: f64, seed: u64) -> Result<ManifestBuild> {
    let raw = png_stems(&dir.join(RAW_DIR))?;
    let processed = png_stems(&dir.join(PROCESSED_DIR))?;
    let masks = png_stems(&dir.join(MASK_DIR))?;
    let complete: Vec<String> = raw
        .iter()
        .filter(|id| processed.contains(*id) && masks.contains(*id))
        .cloned()
        .collect();
    let mut orphans = Vec::new();
    for (sub, set) in [(RAW_DIR, &raw), (PROCESSED_DIR, &processed), (MASK_DIR, &masks)] {
        for id in set.iter().filter(|id| !complete.contains(id)) {
            let path = Path::new(sub).join(format!("{id}.png"));
            log::warn!("orphan file {} excluded from manifest", path.display());
            orphans.push(path);
        }
    }
    let splits = assign_splits(&complete, split_fraction, seed)?;
    let entries: Vec<ManifestEntry> = complete
        .iter()
        .map(|id| ManifestEntry {
            scan_id: id.clone(),
            raw_path: Path::new(RAW_DIR).join(format!("{id}.png")),
            processed_path: Path::new(PROCESSED_DIR).join(format!("{id}.png")),
            mask_path: Path::new(MASK_DIR).join(format!("{id}.png")),
            split: splits[id],
        })
        .collect();
    let train = entries.iter().filter(|e| e.split == Split::Train).count();
    Ok(ManifestBuild {
        manifest: DatasetManifest {
            seed,
            split_fraction,
            counts: SplitCounts {
                train,
                val: entries.len() - train,
                total: entries.len(),
            },
            entries,
        },
        orphans,
    })
}

impl DatasetManifest {
    /// Reassigns splits with a new fraction and seed.
    pub fn resplit(&self, split_fraction: f64, seed: u64) -> Result<Self> {
        let ids: Vec<String> = self.entries.iter().map(|e| e.scan_id.clone()).collect();
        let splits = assign_splits(&ids, split_fraction, seed)?;
        let entries: Vec<ManifestEntry> = self
            .entries
            .iter()
            .map(|e| ManifestEntry {
                split: splits[&e.scan_id],
                ..e.clone()
            })
            .collect();
        let train = entries.iter().filter(|e| e.split == Split::Train).count();
        Ok(Self {
            seed,
            split_fraction,
            counts: SplitCounts {
                train,
                val: entries.len() - train,
                total: entries.len(),
            },
            entries,
        })
    }

    /// Checks unique ids, consistent counts, that every referenced file
    /// exists, and that masks match their rasters in size.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.scan_id) {
                return Err(StoreError::Manifest(format!("duplicate scan id {}", e.scan_id)));
            }
        }
        let train = self.entries.iter().filter(|e| e.split == Split::Train).count();
        let counts = SplitCounts {
            train,
            val: self.entries.len() - train,
            total: self.entries.len(),
        };
        if counts != self.counts {
            return Err(StoreError::Manifest(format!(
                "recorded counts {:?} disagree with entries {:?}",
                self.counts, counts
            )));
        }
        for e in &self.entries {
            let dims = |p: &Path| {
                let full = dir.join(p);
                image::image_dimensions(&full).map_err(|source| StoreError::Image {
                    path: full,
                    source,
                })
            };
            let raw = dims(&e.raw_path)?;
            for other in [&e.processed_path, &e.mask_path] {
                let d = dims(other)?;
                if d != raw {
                    return Err(schema(
                        None,
                        format!(
                            "{} is {}x{} but {} is {}x{}",
                            other.display(),
                            d.0,
                            d.1,
                            e.raw_path.display(),
                            raw.0,
                            raw.1
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn save_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    save_json(&dir.join(MANIFEST_FILE), manifest)
}

/// Loads and validates `dir/manifest.json`.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = load_json(&dir.join(MANIFEST_FILE))?;
    manifest.validate(dir)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleUnit {
    #[default]
    Grad,
    Deg,
    Rad,
}

impl AngleUnit {
    pub fn to_grad(self, value: f64) -> f64 {
        match self {
            AngleUnit::Grad => value,
            AngleUnit::Deg => value * 10.0 / 9.0,
            AngleUnit::Rad => value * 200.0 / std::f64::consts::PI,
        }
    }
}

/// Column mapping for [`import_external`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImportHints {
    pub angle_column: usize,
    /// First intensity column; intensities run to the end of the row
    /// unless `intensity_count` is set.
    pub intensity_start: usize,
    pub intensity_count: Option<usize>,
    pub angle_unit: AngleUnit,
    pub delimiter: char,
    /// `None` auto-detects a header row from a non-numeric angle cell.
    pub has_header: Option<bool>,
    pub gain: Gain,
    /// Used to derive the sample period when `sample_period_s` is absent.
    pub range_m: f64,
    pub sample_period_s: Option<f64>,
    pub temperature_c: f64,
    pub salinity_psu: f64,
    pub depth_m: f64,
}

impl Default for ImportHints {
    fn default() -> Self {
        Self {
            angle_column: 0,
            intensity_start: 1,
            intensity_count: None,
            angle_unit: AngleUnit::Grad,
            delimiter: ',',
            has_header: None,
            gain: Gain::G1,
            range_m: 7.0,
            sample_period_s: None,
            temperature_c: 10.0,
            salinity_psu: 0.0,
            depth_m: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedRow {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportReport {
    pub sweep: Sweep,
    pub skipped: Vec<SkippedRow>,
    /// Sector angles with no row in the input, filled with zeros.
    pub filled_angles: Vec<i16>,
    pub detected_columns: Vec<String>,
}

/// Best-effort ingestion of a scan stored as delimited text. Native scan
/// files are recognized by their JSON header and loaded unchanged.
pub fn import_external(path: &Path, hints: &ImportHints) -> Result<ImportReport> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    import_text(&text, hints)
}

pub fn import_text(text: &str, hints: &ImportHints) -> Result<ImportReport> {
    let import_err = |message: String, detected_columns: Vec<String>| StoreError::Import {
        message,
        detected_columns,
    };
    let first = text.lines().map(str::trim).find(|l| !l.is_empty());
    let Some(first) = first else {
        return Err(import_err("input is empty".into(), Vec::new()));
    };
    if first.starts_with('{') {
        return Ok(ImportReport {
            sweep: parse_sweep(text)?,
            skipped: Vec::new(),
            filled_angles: Vec::new(),
            detected_columns: Vec::new(),
        });
    }
    if !hints.delimiter.is_ascii() {
        return Err(import_err("delimiter must be ASCII".into(), Vec::new()));
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .delimiter(hints.delimiter as u8)
        .from_reader(text.as_bytes());

    let mut detected_columns = Vec::new();
    let mut skipped = Vec::new();
    let mut rows: Vec<(usize, i16, Vec<u8>)> = Vec::new();
    let mut max_width = 0;
    for (k, record) in reader.records().enumerate() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(k + 1);
                skipped.push(SkippedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = record.position().map(|p| p.line() as usize).unwrap_or(k + 1);
        max_width = max_width.max(record.len());
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let angle_cell = record.get(hints.angle_column).unwrap_or("");
        let angle_value = angle_cell.parse::<f64>().ok().filter(|v| v.is_finite());
        if k == 0 && hints.has_header != Some(false) && (angle_value.is_none() || hints.has_header == Some(true)) {
            detected_columns = record.iter().map(str::to_owned).collect();
            continue;
        }
        let Some(angle_value) = angle_value else {
            skipped.push(SkippedRow {
                line,
                reason: format!("angle {angle_cell:?} is not a number"),
            });
            continue;
        };
        let grad = hints.angle_unit.to_grad(angle_value).round();
        if !(-200.0..=200.0).contains(&grad) {
            skipped.push(SkippedRow {
                line,
                reason: format!("angle {grad} grad outside [-200, 200]"),
            });
            continue;
        }
        let end = match hints.intensity_count {
            Some(n) => hints.intensity_start + n,
            None => record.len(),
        };
        if end > record.len() || hints.intensity_start >= end {
            skipped.push(SkippedRow {
                line,
                reason: format!("row has {} columns, intensities need {end}", record.len()),
            });
            continue;
        }
        let parsed: std::result::Result<Vec<u8>, String> = (hints.intensity_start..end)
            .map(|i| {
                let cell = &record[i];
                cell.parse::<u8>()
                    .map_err(|_| format!("column {i}: {cell:?} is not an intensity in 0..=255"))
            })
            .collect();
        match parsed {
            Ok(values) => rows.push((line, grad as i16, values)),
            Err(reason) => skipped.push(SkippedRow { line, reason }),
        }
    }
    if detected_columns.is_empty() {
        detected_columns = (0..max_width).map(|i| format!("column{i}")).collect();
    }
    if rows.is_empty() {
        return Err(import_err(
            format!(
                "no usable rows with angle column {} and intensities from column {}",
                hints.angle_column, hints.intensity_start
            ),
            detected_columns,
        ));
    }

    // most common row width wins
    let mut widths: HashMap<usize, usize> = HashMap::new();
    for (_, _, v) in &rows {
        *widths.entry(v.len()).or_default() += 1;
    }
    let width = widths
        .iter()
        .max_by_key(|(w, c)| (**c, **w))
        .map(|(w, _)| *w)
        .unwrap();
    let mut by_angle: BTreeMap<i16, Vec<u8>> = BTreeMap::new();
    for (line, angle, values) in rows {
        if values.len() != width {
            skipped.push(SkippedRow {
                line,
                reason: format!("{} intensities where {width} expected", values.len()),
            });
        } else if let std::collections::btree_map::Entry::Vacant(slot) = by_angle.entry(angle) {
            slot.insert(values);
        } else {
            skipped.push(SkippedRow {
                line,
                reason: format!("duplicate angle {angle} grad"),
            });
        }
    }
    let angles: Vec<i16> = by_angle.keys().copied().collect();
    if angles.len() < 2 {
        return Err(import_err(
            "need at least two distinct beam angles".into(),
            detected_columns,
        ));
    }
    let step = angles
        .windows(2)
        .map(|w| (w[1] - w[0]) as u32)
        .fold(0, gcd);
    let step = u8::try_from(step).map_err(|_| {
        import_err(format!("angular step {step} grad too large"), detected_columns.clone())
    })?;
    let (start, end) = (angles[0], *angles.last().unwrap());

    let cond = WaterConditions::new(hints.temperature_c, hints.salinity_psu, hints.depth_m)?;
    let n = u32::try_from(width).unwrap_or(u32::MAX);
    let plan = match hints.sample_period_s {
        Some(p) => SamplingPlan::new(sound_speed(&cond), p, n)?,
        None => plan_for_range(hints.range_m, &cond, n)?,
    };
    let config = ScanConfig::new(plan, hints.gain, start, end, step)?;
    let mut filled_angles = Vec::new();
    let lines = config
        .angles()
        .map(|a| match by_angle.remove(&a) {
            Some(v) => ScanLine::new(a, v),
            None => {
                filled_angles.push(a);
                ScanLine::new(a, vec![0; width])
            }
        })
        .collect();
    skipped.sort_by_key(|s| s.line);
    let mut meta = SweepMeta::default();
    meta.tags.insert("imported".into(), "true".into());
    Ok(ImportReport {
        sweep: Sweep::new(config, lines, meta)?,
        skipped,
        filled_angles,
        detected_columns,
    })
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_sweep() -> Sweep {
        let plan = SamplingPlan::new(1448.4027, 8e-6, 6).unwrap();
        let cfg = ScanConfig::new(plan, Gain::G2, -2, 2, 2).unwrap();
        let lines = vec![
            ScanLine::new(-2, vec![0, 1, 2, 3, 4, 255]),
            ScanLine::new(0, vec![9, 9, 9, 0, 0, 0]),
            ScanLine::new(2, vec![0; 6]),
        ];
        let meta = SweepMeta {
            scene: Some("unit".into()),
            seed: Some(7),
            processed: false,
            tags: BTreeMap::new(),
        };
        Sweep::new(cfg, lines, meta).unwrap()
    }

    #[test]
    fn text_round_trip() {
        let sweep = small_sweep();
        let text = sweep_to_string(&sweep);
        assert_eq!(parse_sweep(&text).unwrap(), sweep);
        let crlf = text.replace('\n', "\r\n") + "\r\n";
        assert_eq!(parse_sweep(&crlf).unwrap(), sweep);
    }

    #[test]
    fn short_line_is_schema_error() {
        let text = sweep_to_string(&small_sweep());
        let broken = text.replace("9,9,9,0,0,0", "9,9,9,0,0");
        match parse_sweep(&broken) {
            Err(StoreError::Schema { line: Some(3), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_values_are_parse_errors() {
        let text = sweep_to_string(&small_sweep());
        match parse_sweep(&text.replace("9,9,9", "9,300,9")) {
            Err(StoreError::Parse { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_sweep(&text.replacen('{', "[", 1)) {
            Err(StoreError::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_sweep("").is_err());
        let missing = text.lines().take(3).collect::<Vec<_>>().join("\n");
        assert!(matches!(parse_sweep(&missing), Err(StoreError::Schema { .. })));
        let swapped = text.replace("\n0,", "\n1,");
        assert!(matches!(parse_sweep(&swapped), Err(StoreError::Schema { .. })));
    }

    #[test]
    fn split_rule() {
        assert_eq!(split_sizes(700, 0.8).unwrap(), (560, 140));
        assert_eq!(split_sizes(1, 0.8).unwrap(), (1, 0));
        assert_eq!(split_sizes(10, 1.0).unwrap(), (10, 0));
        assert_eq!(split_sizes(10, 0.0).unwrap(), (0, 10));
        assert_eq!(split_sizes(0, 0.8).unwrap(), (0, 0));
        assert!(split_sizes(3, 1.5).is_err());
    }

    #[test]
    fn splits_are_deterministic() {
        let ids: Vec<String> = (0..50).map(|i| format!("s{i:03}")).collect();
        let a = assign_splits(&ids, 0.8, 11).unwrap();
        let b = assign_splits(&ids, 0.8, 11).unwrap();
        let c = assign_splits(&ids, 0.8, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.values().filter(|s| **s == Split::Train).count(), 40);
    }

    #[test]
    fn import_degrees_fixture() {
        let text = "angle_deg,s0,s1,s2\n-9,1,2,3\n0,4,5,6\n9,7,8,9\n";
        let hints = ImportHints {
            angle_unit: AngleUnit::Deg,
            ..Default::default()
        };
        let report = import_text(text, &hints).unwrap();
        let angles: Vec<i16> = report.sweep.lines().iter().map(|l| l.angle_grad).collect();
        assert_eq!(angles, vec![-10, 0, 10]);
        assert_eq!(report.sweep.config().angular_step_grad, 10);
        assert_eq!(report.detected_columns, vec!["angle_deg", "s0", "s1", "s2"]);
        assert!(report.skipped.is_empty());
        assert!((report.sweep.config().plan.max_range_m - 7.0).abs() < 1e-9);
    }

    #[test]
    fn import_reports_skips_and_gaps() {
        let text = "0,1,2\n2,3,4\nxx,1,1\n2,9,9\n6,5,6\n4,1\n";
        let report = import_text(text, &ImportHints {
            has_header: Some(false),
            ..Default::default()
        })
        .unwrap();
        let lines: Vec<usize> = report.skipped.iter().map(|s| s.line).collect();
        assert_eq!(lines, vec![3, 4, 6]);
        assert_eq!(report.filled_angles, vec![4]);
        assert_eq!(report.sweep.lines().len(), 4);
    }

    #[test]
    fn import_native_and_empty() {
        let sweep = small_sweep();
        let report = import_text(&sweep_to_string(&sweep), &ImportHints::default()).unwrap();
        assert_eq!(report.sweep, sweep);
        assert!(matches!(
            import_text("", &ImportHints::default()),
            Err(StoreError::Import { .. })
        ));
        match import_text("a;b;c\nx;y;z\n", &ImportHints::default()) {
            Err(StoreError::Import { detected_columns, .. }) => {
                assert_eq!(detected_columns, vec!["a;b;c"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
