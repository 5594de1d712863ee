use std::collections::BTreeSet;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sonarkit::datastore::{self, ImportHints};
use sonarkit::metrics::{Aggregate, MaskPair, BOUNDARY_TOLERANCE_PX};
use sonarkit::preprocess::{preprocess_sweep, ThresholdRule};
use sonarkit::scanmodel::{rasterize_fan, rasterize_rect};
use sonarkit::simulator::{experiment_scene, generate_dataset, simulate_sweep, Jitter, PoolScene};
use sonarkit::{MetricReport, RoiSpec, ScanConfig};
use sonarkit_service::EmulatorConfig;

#[derive(Parser)]
#[command(name = "sonarkit", version, about = "Scanning-sonar simulation, preprocessing and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one sweep of a pool experiment or a scene file
    Simulate(SimulateArgs),
    /// ROI-gate and threshold a scan file
    Preprocess(PreprocessArgs),
    /// Score predicted masks against ground-truth masks
    Eval(EvalArgs),
    /// Generate a simulated dataset, or manage an existing one
    Dataset(DatasetArgs),
    /// Run the HTTP API and the TCP device emulator
    Serve(ServeArgs),
    /// Convert delimited text from another tool into a scan file
    Import(ImportArgs),
    /// Render a scan file as a PNG
    Raster(RasterArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment layout, 1 to 10
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    experiment: Option<u8>,
    /// Scene description as JSON
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long, default_value_t = 0.75)]
    roi_min: f64,
    #[arg(long, default_value_t = 6.0)]
    roi_max: f64,
    #[arg(long, default_value = "2mu+sigma")]
    rule: ThresholdRule,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of ground-truth mask PNGs
    #[arg(long = "true")]
    truth: PathBuf,
    /// Directory of predicted mask PNGs, matched to truth by file name
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = BOUNDARY_TOLERANCE_PX)]
    tolerance: usize,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true)]
struct DatasetArgs {
    #[command(subcommand)]
    action: Option<DatasetAction>,
    #[command(flatten)]
    generate: GenerateArgs,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of samples assigned to training
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = Jitter::default().lateral_sigma_m)]
    lateral_sigma: f64,
    #[arg(long, default_value_t = Jitter::default().reflectivity_sigma)]
    reflectivity_sigma: f64,
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Index raw/processed/masks triples and write a manifest
    Build {
        dir: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reassign train/val in an existing manifest
    Split {
        dir: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check that every manifest entry exists with matching dimensions
    Validate { dir: PathBuf },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    http: u16,
    /// TCP port for the device emulator; omitted means no emulator
    #[arg(long)]
    emulator: Option<u16>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Experiment layout the emulator scans
    #[arg(long, default_value_t = 1)]
    experiment: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Emulated rotation rate; 0 disables pacing
    #[arg(long, default_value_t = 20.0)]
    lines_per_second: f64,
}

#[derive(Args)]
struct ImportArgs {
    input: PathBuf,
    output: PathBuf,
    /// Column mapping and acquisition settings as JSON
    #[arg(long)]
    hints: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RasterMode {
    Rect,
    Fan,
}

#[derive(Args)]
struct RasterArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long, value_enum, default_value = "rect")]
    mode: RasterMode,
    #[arg(long, default_value_t = 50.0)]
    ppm: f64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Simulate(a) => simulate(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Eval(a) => eval(a),
        Command::Dataset(a) => dataset(a),
        Command::Serve(a) => serve(a),
        Command::Import(a) => import(a),
        Command::Raster(a) => raster(a),
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let (scene, stem) = match (a.experiment, &a.scene) {
        (Some(n), _) => (experiment_scene(n)?, format!("exp{n:02}")),
        (None, Some(path)) => {
            let scene: PoolScene = datastore::load_json(path)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene").to_owned();
            (scene, stem)
        }
        (None, None) => bail!("give --experiment or --scene"),
    };
    let scene = scene.with_seed(a.seed);
    let (sweep, truth) = simulate_sweep(&scene, &ScanConfig::pool_default())?;
    let id = format!("{stem}-seed{}", a.seed);
    let out = &a.out;
    datastore::save_sweep(&out.join(format!("{id}.scan")), &sweep)?;
    datastore::save_png(&out.join(format!("{id}.png")), &rasterize_rect(&sweep))?;
    datastore::save_png(&out.join(format!("{id}.mask.png")), &truth.object_mask())?;
    datastore::save_png(&out.join(format!("{id}.labels.png")), &truth.to_label_image())?;
    println!("{}", out.join(format!("{id}.scan")).display());
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let sweep = datastore::load_sweep(&a.input)?;
    let roi = RoiSpec::new(a.roi_min, a.roi_max)?;
    let processed = preprocess_sweep(&sweep, &roi, a.rule)?;
    datastore::save_sweep(&a.output, &processed)?;
    Ok(())
}

#[derive(Serialize)]
struct PairReport {
    name: String,
    report: MetricReport,
}

#[derive(Serialize)]
struct EvalReport {
    threshold: f64,
    tolerance_px: usize,
    pairs: Vec<PairReport>,
    /// Mean of the per-image reports.
    mean: Option<MetricReport>,
    /// All pixels pooled into one confusion matrix.
    pooled: Option<MetricReport>,
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.insert(name);
        }
    }
    Ok(names)
}

fn eval(a: EvalArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        bail!("--threshold must lie in [0, 1]");
    }
    let truth_names = png_names(&a.truth)?;
    let pred_names = png_names(&a.pred)?;
    for missing in truth_names.symmetric_difference(&pred_names) {
        log::warn!("{missing} has no counterpart; skipped");
    }
    let common: Vec<&String> = truth_names.intersection(&pred_names).collect();
    if common.is_empty() {
        bail!("no mask file names in common between {} and {}", a.truth.display(), a.pred.display());
    }
    let mut agg = Aggregate::<f64>::with_tolerance(a.tolerance);
    let mut pairs = Vec::with_capacity(common.len());
    for name in common {
        let truth = datastore::load_png(&a.truth.join(name), None)?;
        let pred = datastore::load_png(&a.pred.join(name), Some(truth.dimensions()))?;
        let pair = MaskPair::from_images(&truth, &pred)?;
        let report = agg.push(&pair, a.threshold);
        pairs.push(PairReport { name: name.clone(), report });
    }
    let out = EvalReport {
        threshold: a.threshold,
        tolerance_px: a.tolerance,
        mean: agg.mean(),
        pooled: agg.pooled(),
        pairs,
    };
    datastore::save_json(&a.report, &out)?;
    if let Some(mean) = &out.mean {
        let line: Vec<String> = mean.fields().iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        println!("{} pairs, mean {}", out.pairs.len(), line.join(" "));
    }
    Ok(())
}

fn dataset(a: DatasetArgs) -> Result<()> {
    match a.action {
        Some(DatasetAction::Build { dir, split, seed }) => {
            let build = datastore::build_manifest(&dir, split, seed)?;
            datastore::save_manifest(&dir, &build.manifest)?;
            let c = build.manifest.counts;
            println!("{} samples: {} train, {} val, {} orphans", c.total, c.train, c.val, build.orphans.len());
        }
        Some(DatasetAction::Split { dir, split, seed }) => {
            let manifest = datastore::load_manifest(&dir)?.resplit(split, seed)?;
            datastore::save_manifest(&dir, &manifest)?;
            println!("{} train, {} val", manifest.counts.train, manifest.counts.val);
        }
        Some(DatasetAction::Validate { dir }) => {
            let manifest = datastore::load_manifest(&dir)?;
            manifest.validate(&dir)?;
            println!("{} entries ok", manifest.entries.len());
        }
        None => {
            let g = a.generate;
            let (Some(count), Some(out)) = (g.count, g.out) else {
                bail!("dataset generation needs --count and --out (or use build|split|validate)");
            };
            let jitter = Jitter {
                lateral_sigma_m: g.lateral_sigma,
                reflectivity_sigma: g.reflectivity_sigma,
                seed: g.seed,
            };
            let manifest = generate_dataset(&out, count, &jitter, g.split)?;
            println!(
                "{} samples in {}: {} train, {} val",
                manifest.counts.total,
                out.display(),
                manifest.counts.train,
                manifest.counts.val
            );
        }
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let scene = experiment_scene(a.experiment)?.with_seed(a.seed);
    let emulator = a.emulator.map(|port| {
        let cfg = EmulatorConfig {
            lines_per_second: a.lines_per_second,
            ..EmulatorConfig::default()
        };
        (SocketAddr::new(a.host, port), scene, cfg)
    });
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(sonarkit_service::serve(SocketAddr::new(a.host, a.http), emulator, a.data))?;
    Ok(())
}

fn import(a: ImportArgs) -> Result<()> {
    let hints: ImportHints = match &a.hints {
        Some(p) => datastore::load_json(p)?,
        None => ImportHints::default(),
    };
    let report = datastore::import_external(&a.input, &hints)?;
    for s in &report.skipped {
        log::warn!("line {}: {}", s.line, s.reason);
    }
    if !report.filled_angles.is_empty() {
        log::warn!("{} missing angles filled with zeros", report.filled_angles.len());
    }
    datastore::save_sweep(&a.output, &report.sweep)?;
    Ok(())
}

fn raster(a: RasterArgs) -> Result<()> {
    let sweep = datastore::load_sweep(&a.input)?;
    let img = match a.mode {
        RasterMode::Rect => rasterize_rect(&sweep),
        RasterMode::Fan => rasterize_fan(&sweep, a.ppm)?,
    };
    datastore::save_png(&a.output, &img)?;
    Ok(())
}
