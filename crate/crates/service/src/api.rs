//! HTTP API over a data directory.
//!
//! Layout under the data directory:
//!
//! ```text
//! scans/<id>/raw.scan
//! scans/<id>/processed.scan          after POST /api/preprocess
//! scans/<id>/masks/<annotator>.png   stored verbatim as uploaded
//! scans/<id>/masks/<annotator>.json  AnnotationRecord
//! ```
//!
//! Writes to one scan are serialized by a per-scan lock; every file is
//! written create-then-rename, so readers never take a lock.

use std::collections::HashMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sonarkit::datastore::{self, AnnotationRecord, StoreError};
use sonarkit::metrics::{evaluate, MaskPair};
use sonarkit::preprocess::{preprocess_sweep, ThresholdRule};
use sonarkit::scanmodel::{rasterize_fan, rasterize_rect};
use sonarkit::simulator::{experiment_scene, simulate_sweep, PoolScene};
use sonarkit::{GrayImage, MetricReport, RoiSpec, ScanConfig, Sweep, SweepMeta};

pub const SIMULATOR_ANNOTATOR: &str = "simulator";
pub const DEFAULT_FAN_PPM: f64 = 50.0;
const SCAN_DIR: &str = "scans";
const RAW_FILE: &str = "raw.scan";
const PROCESSED_FILE: &str = "processed.scan";
const MASKS: &str = "masks";

#[derive(Clone)]
pub struct ApiState {
    inner: Arc<Inner>,
}

struct Inner {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl ApiState {
    /// Uses `root` as the data directory, creating it if needed.
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join(SCAN_DIR))?;
        Ok(Self {
            inner: Arc::new(Inner {
                root,
                locks: Mutex::new(HashMap::new()),
            }),
        })
    }

    pub fn root(&self) -> &Path {
        &self.inner.root
    }

    fn scan_dir(&self, id: &str) -> PathBuf {
        self.inner.root.join(SCAN_DIR).join(id)
    }

    fn lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.inner.locks.lock().expect("lock table poisoned");
        Arc::clone(locks.entry(id.to_owned()).or_default())
    }

    fn raw(&self, id: &str) -> Result<Sweep, ApiError> {
        check_name("scan id", id).map_err(|_| ApiError::not_found(format!("no scan {id:?}")))?;
        let path = self.scan_dir(id).join(RAW_FILE);
        if !path.is_file() {
            return Err(ApiError::not_found(format!("no scan {id:?}")));
        }
        Ok(datastore::load_sweep(&path)?)
    }

    fn processed(&self, id: &str) -> Result<Option<Sweep>, ApiError> {
        let path = self.scan_dir(id).join(PROCESSED_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        Ok(Some(datastore::load_sweep(&path)?))
    }

    fn annotators(&self, id: &str) -> Vec<String> {
        let mut names: Vec<String> = std::fs::read_dir(self.scan_dir(id).join(MASKS))
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".json").map(str::to_owned)
            })
            .collect();
        names.sort();
        names
    }

    fn summary(&self, id: &str) -> Result<ScanSummary, ApiError> {
        let sweep = self.raw(id)?;
        Ok(ScanSummary {
            scan_id: id.to_owned(),
            scene: sweep.meta().scene.clone(),
            seed: sweep.meta().seed,
            lines: sweep.lines().len(),
            samples: sweep.config().sample_count(),
            processed: self.scan_dir(id).join(PROCESSED_FILE).is_file(),
            annotators: self.annotators(id),
        })
    }

    /// Stores a new raw sweep, replacing any scan with the same id.
    pub async fn insert_scan(&self, id: &str, sweep: &Sweep) -> Result<(), ApiError> {
        check_name("scan id", id)?;
        let lock = self.lock(id);
        let _guard = lock.lock().await;
        let dir = self.scan_dir(id);
        let _ = std::fs::remove_file(dir.join(PROCESSED_FILE));
        datastore::save_sweep(&dir.join(RAW_FILE), sweep)?;
        Ok(())
    }

    /// Stores mask PNG bytes for `annotator` after checking them against the scan.
    pub async fn put_mask(&self, id: &str, annotator: &str, png: &[u8]) -> Result<AnnotationRecord, ApiError> {
        check_name("annotator", annotator)?;
        let sweep = self.raw(id)?;
        let mask = datastore::decode_gray_png(png).map_err(ApiError::unprocessable)?;
        let expected = (sweep.config().sample_count() as u32, sweep.lines().len() as u32);
        if mask.dimensions() != expected {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!(
                    "mask is {}x{}, scan raster is {}x{}",
                    mask.width(),
                    mask.height(),
                    expected.0,
                    expected.1
                ),
            ));
        }
        let lock = self.lock(id);
        let _guard = lock.lock().await;
        let dir = self.scan_dir(id);
        let mask_rel = PathBuf::from(MASKS).join(format!("{annotator}.png"));
        datastore::write_atomic(&dir.join(&mask_rel), png)?;
        let record = AnnotationRecord {
            scan_id: id.to_owned(),
            mask_path: mask_rel,
            annotator: annotator.to_owned(),
            created_at: chrono::Utc::now(),
            notes: String::new(),
        };
        datastore::save_json(&dir.join(MASKS).join(format!("{annotator}.json")), &record)?;
        Ok(record)
    }

    fn mask_bytes(&self, id: &str, annotator: &str) -> Result<Vec<u8>, ApiError> {
        check_name("annotator", annotator)?;
        self.raw(id)?;
        let path = self.scan_dir(id).join(MASKS).join(format!("{annotator}.png"));
        std::fs::read(&path).map_err(|_| ApiError::not_found(format!("no mask by {annotator:?} for scan {id:?}")))
    }

    fn mask(&self, id: &str, annotator: &str) -> Result<GrayImage, ApiError> {
        let bytes = self.mask_bytes(id, annotator)?;
        datastore::decode_gray_png(&bytes).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))
    }
}

/// Names used as path components: 1 to 64 of `[A-Za-z0-9._-]`, not starting with a dot.
fn check_name(what: &str, name: &str) -> Result<(), ApiError> {
    let ok = !name.is_empty()
        && name.len() <= 64
        && !name.starts_with('.')
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || b"._-".contains(&b));
    if ok {
        Ok(())
    } else {
        Err(ApiError::unprocessable(format!("invalid {what} {name:?}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<sonarkit::Error> for ApiError {
    fn from(e: sonarkit::Error) -> Self {
        Self::unprocessable(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScanSummary {
    pub scan_id: String,
    pub scene: Option<String>,
    pub seed: Option<u64>,
    pub lines: usize,
    pub samples: usize,
    pub processed: bool,
    pub annotators: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScanDetail {
    #[serde(flatten)]
    pub summary: ScanSummary,
    pub config: ScanConfig,
    pub meta: SweepMeta,
    /// ROI used when the scan is preprocessed without explicit bounds.
    pub default_roi: RoiSpec,
    pub processed_meta: Option<SweepMeta>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SimulateRequest {
    pub experiment: Option<u8>,
    pub scene: Option<PoolScene>,
    #[serde(default)]
    pub seed: u64,
    pub config: Option<ScanConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScanIdResponse {
    pub scan_id: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PreprocessRequest {
    pub scan_id: String,
    pub roi_min: Option<f64>,
    pub roi_max: Option<f64>,
    #[serde(default)]
    pub rule: ThresholdRule,
}

#[derive(Debug, Deserialize)]
struct RasterQuery {
    #[serde(default)]
    mode: RasterMode,
    #[serde(default)]
    processed: u8,
    ppm: Option<f64>,
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RasterMode {
    #[default]
    Rect,
    Fan,
}

#[derive(Debug, Deserialize)]
struct MaskQuery {
    annotator: Option<String>,
}

#[derive(Debug, Deserialize)]
struct EvalQuery {
    scan: String,
    pred: String,
    truth: Option<String>,
    threshold: Option<f64>,
}

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/api/scans", get(list_scans))
        .route("/api/scans/{id}", get(get_scan))
        .route("/api/scans/{id}/raster", get(get_raster))
        .route("/api/scans/{id}/mask", get(get_mask).put(put_mask))
        .route("/api/simulate", axum::routing::post(simulate))
        .route("/api/preprocess", axum::routing::post(preprocess))
        .route("/api/eval", get(eval))
        .with_state(state)
}

async fn list_scans(State(state): State<ApiState>) -> Result<Json<Vec<ScanSummary>>, ApiError> {
    let mut ids: Vec<String> = std::fs::read_dir(state.root().join(SCAN_DIR))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .flatten()
        .filter(|e| e.path().join(RAW_FILE).is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    ids.sort();
    let summaries = ids.iter().map(|id| state.summary(id)).collect::<Result<_, _>>()?;
    Ok(Json(summaries))
}

async fn get_scan(State(state): State<ApiState>, UrlPath(id): UrlPath<String>) -> Result<Json<ScanDetail>, ApiError> {
    let summary = state.summary(&id)?;
    let sweep = state.raw(&id)?;
    Ok(Json(ScanDetail {
        summary,
        config: *sweep.config(),
        meta: sweep.meta().clone(),
        default_roi: RoiSpec::default(),
        processed_meta: state.processed(&id)?.map(|s| s.meta().clone()),
    }))
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn get_raster(
    State(state): State<ApiState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RasterQuery>,
) -> Result<Response, ApiError> {
    let sweep = match q.processed {
        0 => state.raw(&id)?,
        1 => {
            state.raw(&id)?;
            state
                .processed(&id)?
                .ok_or_else(|| ApiError::not_found(format!("scan {id:?} has not been preprocessed")))?
        }
        other => return Err(ApiError::unprocessable(format!("processed must be 0 or 1, got {other}"))),
    };
    let img = match q.mode {
        RasterMode::Rect => rasterize_rect(&sweep),
        RasterMode::Fan => rasterize_fan(&sweep, q.ppm.unwrap_or(DEFAULT_FAN_PPM))?,
    };
    Ok(png_response(datastore::encode_png(&img)))
}

fn annotator_param(q: MaskQuery) -> Result<String, ApiError> {
    q.annotator
        .ok_or_else(|| ApiError::unprocessable("missing annotator query parameter"))
}

async fn get_mask(
    State(state): State<ApiState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<MaskQuery>,
) -> Result<Response, ApiError> {
    let annotator = annotator_param(q)?;
    Ok(png_response(state.mask_bytes(&id, &annotator)?))
}

async fn put_mask(
    State(state): State<ApiState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<MaskQuery>,
    body: Bytes,
) -> Result<Json<AnnotationRecord>, ApiError> {
    let annotator = annotator_param(q)?;
    Ok(Json(state.put_mask(&id, &annotator, &body).await?))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

async fn simulate(
    State(state): State<ApiState>,
    body: Result<Json<SimulateRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<ScanIdResponse>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::unprocessable(e.body_text()))?;
    let (scene, id) = match (req.experiment, req.scene) {
        (Some(n), None) => (experiment_scene(n)?, format!("exp{n:02}-seed{}", req.seed)),
        (None, Some(scene)) => {
            let json = serde_json::to_vec(&scene).expect("scene serializes");
            let stem = if scene.name.is_empty() { "scene" } else { scene.name.as_str() };
            let stem: String = stem
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .take(32)
                .collect();
            let id = format!("{stem}-{:08x}-seed{}", fnv1a(&json) as u32, req.seed);
            (scene, id)
        }
        _ => return Err(ApiError::unprocessable("give exactly one of experiment or scene")),
    };
    let scene = scene.with_seed(req.seed);
    let config = req.config.unwrap_or_else(ScanConfig::pool_default);
    let (sweep, truth) = tokio::task::spawn_blocking(move || simulate_sweep(&scene, &config))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    state.insert_scan(&id, &sweep).await?;
    state
        .put_mask(&id, SIMULATOR_ANNOTATOR, &datastore::encode_png(&truth.object_mask()))
        .await?;
    Ok(Json(ScanIdResponse { scan_id: id }))
}

async fn preprocess(
    State(state): State<ApiState>,
    body: Result<Json<PreprocessRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<ScanIdResponse>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::unprocessable(e.body_text()))?;
    let sweep = state.raw(&req.scan_id)?;
    let default = RoiSpec::default();
    let roi = RoiSpec::new(
        req.roi_min.unwrap_or(default.min_range_m),
        req.roi_max.unwrap_or(default.max_range_m),
    )?;
    let processed = tokio::task::spawn_blocking(move || preprocess_sweep(&sweep, &roi, req.rule))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let lock = state.lock(&req.scan_id);
    let _guard = lock.lock().await;
    datastore::save_sweep(&state.scan_dir(&req.scan_id).join(PROCESSED_FILE), &processed)?;
    Ok(Json(ScanIdResponse { scan_id: req.scan_id }))
}

async fn eval(State(state): State<ApiState>, Query(q): Query<EvalQuery>) -> Result<Json<MetricReport>, ApiError> {
    let truth_name = q.truth.as_deref().unwrap_or(SIMULATOR_ANNOTATOR);
    let truth = state.mask(&q.scan, truth_name)?;
    let pred = state.mask(&q.scan, &q.pred)?;
    let pair = MaskPair::<f64>::from_images(&truth, &pred)?;
    let threshold = q.threshold.unwrap_or(0.5);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ApiError::unprocessable("threshold must lie in [0, 1]"));
    }
    Ok(Json(evaluate(&pair, threshold)))
}
