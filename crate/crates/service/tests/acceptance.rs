//! Acceptance suite. Each criterion prints one `ACCEPTANCE <name>: PASS|FAIL`
//! line with its measurements and wall time; the process exits non-zero if
//! any criterion fails.
//! Oracles here are written independently of the library code they check.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sonarkit::acoustics::{plan_for_range, pool_plan, sound_speed};
use sonarkit::metrics::{evaluate, MaskPair};
use sonarkit::preprocess::{preprocess_line, preprocess_sweep, ThresholdRule};
use sonarkit::protocol::{decode_frame, encode, Message, ScanRequest, StreamDecoder};
use sonarkit::simulator::{experiment_scene, simulate_sweep, Provenance};
use sonarkit::{Gain, RoiSpec, ScanConfig, ScanLine, WaterConditions};
use sonarkit_service::emulator;
use sonarkit_service::{EmulatorClient, EmulatorConfig};

const SOUND_SPEED_TOL: f64 = 1e-3;
const SAMPLE_DISTANCE_TOL: f64 = 1e-6;
const RANGE_ROUND_TRIP_TOL: f64 = 1e-9;
const THRESHOLD_FIXTURE_TOL: f64 = 0.01;
const GEOMETRY_TOL_BINS: i64 = 2;
const METRIC_TOL: f64 = 1e-9;

fn report(name: &str, pass: bool, budget: Duration, started: Instant, detail: String) -> bool {
    let elapsed = started.elapsed();
    let pass = pass && elapsed <= budget;
    println!(
        "ACCEPTANCE {name}: {} ({:.1} ms of {:.0} ms budget) {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64() * 1e3,
        budget.as_secs_f64() * 1e3,
    );
    pass
}

fn sound_speed_at_pool_conditions() -> bool {
    let t0 = Instant::now();
    let cond = WaterConditions::new(10.0, 0.0, 0.15).unwrap();
    let c = sound_speed(&cond);
    let (t, s, d) = (10.0_f64, 0.0_f64, 0.15_f64);
    let oracle = 1410.0 + 4.21 * t - 0.037 * t * t + 1.1 * s + 0.018 * d;
    let pass = (c - 1448.4027).abs() <= SOUND_SPEED_TOL && (c - oracle).abs() <= SOUND_SPEED_TOL;
    report(
        "sound-speed",
        pass,
        Duration::from_secs(1),
        t0,
        format!("c={c:.6} oracle={oracle:.6}"),
    )
}

fn pool_configuration_consistency() -> bool {
    let t0 = Instant::now();
    let cond = WaterConditions::new(10.0, 0.0, 0.15).unwrap();
    let plan = plan_for_range(7.0, &cond, 1200).unwrap();
    let sd = plan.sample_distance_m;
    let back = sd * 1200.0;
    let pass = (sd - 0.005833).abs() <= SAMPLE_DISTANCE_TOL
        && (plan.max_range_m - 7.0).abs() <= RANGE_ROUND_TRIP_TOL
        && (back - 7.0).abs() <= RANGE_ROUND_TRIP_TOL;
    report(
        "configuration",
        pass,
        Duration::from_secs(1),
        t0,
        format!("S_d={sd:.9} max_range={:.12} S_d*S_n={back:.12}", plan.max_range_m),
    )
}

/// Exact integer form of `I >= 2μ + σ` with the sample standard deviation.
fn oracle_keep(i: u8, n: i128, sum: i128, sum_sq: i128) -> bool {
    let a = n * i as i128 - 2 * sum;
    a >= 0 && a * a * (n - 1) >= n * (n * sum_sq - sum * sum)
}

fn oracle_preprocess(line: &[u8], c: f64, sp: f64, roi: (f64, f64)) -> Vec<u8> {
    let inside: Vec<bool> = (0..line.len())
        .map(|i| {
            let r = (i as f64 + 1.0) * c * sp / 2.0;
            r >= roi.0 && r <= roi.1
        })
        .collect();
    let vals: Vec<i128> = line.iter().zip(&inside).filter(|(_, &k)| k).map(|(&v, _)| v as i128).collect();
    let n = vals.len() as i128;
    let sum: i128 = vals.iter().sum();
    let sum_sq: i128 = vals.iter().map(|v| v * v).sum();
    line.iter()
        .zip(&inside)
        .map(|(&v, &k)| if k && oracle_keep(v, n, sum, sum_sq) { v } else { 0 })
        .collect()
}

fn random_line(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    let floor = rng.random_range(0..40u8);
    let spread = rng.random_range(1..60u8);
    let spikes = rng.random_range(0..30);
    let mut v: Vec<u8> = (0..n).map(|_| floor.saturating_add(rng.random_range(0..spread))).collect();
    for _ in 0..spikes {
        let i = rng.random_range(0..n);
        v[i] = rng.random_range(100..=255);
    }
    if rng.random_bool(0.05) {
        v.iter_mut().for_each(|x| *x = floor);
    }
    v
}

fn preprocessing_matches_oracle() -> bool {
    let t0 = Instant::now();
    let plan = pool_plan();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut mismatched = 0;
    let mut kept_total = 0usize;
    for k in 0..1000 {
        let roi = if k % 2 == 0 {
            (0.75, 6.0)
        } else {
            let lo = rng.random_range(0.0..6.5);
            (lo, rng.random_range(lo + 0.05..7.0))
        };
        let raw = random_line(&mut rng, 1200);
        let want = oracle_preprocess(&raw, plan.sound_speed_mps, plan.sample_period_s, roi);
        let spec = RoiSpec::new(roi.0, roi.1).unwrap();
        let got = preprocess_line(&ScanLine::new(0, raw), &plan, &spec, ThresholdRule::TwoMuPlusSigma).unwrap();
        kept_total += want.iter().filter(|&&v| v > 0).count();
        if got.intensities != want {
            mismatched += 1;
        }
    }

    let fixture = ScanLine::new(0, vec![10, 10, 10, 10, 200]);
    let stats: sonarkit::LineStats = sonarkit::preprocess::line_stats(&fixture, 0..5).unwrap();
    let cut = stats.threshold(ThresholdRule::TwoMuPlusSigma);
    let out = sonarkit::preprocess::threshold_line(&fixture, 0..5, &stats, ThresholdRule::TwoMuPlusSigma);
    let fixture_ok = (cut - 180.97).abs() <= THRESHOLD_FIXTURE_TOL && out.intensities == vec![0, 0, 0, 0, 200];

    report(
        "preprocessing-oracle",
        mismatched == 0 && fixture_ok,
        Duration::from_secs(1),
        t0,
        format!("mismatched_lines={mismatched}/1000 kept_samples={kept_total} fixture_threshold={cut:.4}"),
    )
}

/// First crossing of the ray at `theta` with the rectangle
/// x in [0, length], |y| <= width / 2, from the origin.
fn analytic_wall_range(theta: f64, length: f64, width: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    let far = if c > 1e-12 { length / c } else { f64::INFINITY };
    let side = if s.abs() > 1e-12 { (width / 2.0) / s.abs() } else { f64::INFINITY };
    far.min(side)
}

fn simulator_geometry_empty_pool() -> bool {
    let t0 = Instant::now();
    let config = ScanConfig::pool_default();
    let sd = config.plan.sample_distance_m;
    let roi = RoiSpec::default();
    let mut worst = 0i64;
    let mut checked = 0usize;
    let mut peaks = Vec::new();
    let mut pass = true;
    for seed in 0..3u64 {
        let scene = experiment_scene(1).unwrap().with_seed(seed);
        let (raw, truth) = simulate_sweep(&scene, &config).unwrap();
        let processed = preprocess_sweep(&raw, &roi, ThresholdRule::TwoMuPlusSigma).unwrap();
        for (k, line) in processed.lines().iter().enumerate() {
            let theta = line.angle_grad as f64 * std::f64::consts::PI / 200.0;
            let r = analytic_wall_range(theta, scene.length_m, scene.width_m);
            let expected = (r / sd).round() as i64 - 1;
            for (i, &v) in line.intensities.iter().enumerate() {
                if v > 0 && truth.get(k, i).is_echo() {
                    let off = (i as i64 - expected).abs();
                    worst = worst.max(off);
                    checked += 1;
                }
            }
            if [0, -100, 100].contains(&line.angle_grad) {
                let peak = (0..line.len()).max_by_key(|&i| (line.intensities[i], std::cmp::Reverse(i))).unwrap();
                let target = if line.angle_grad == 0 { 1027 } else { 256 };
                pass &= (peak as i64 - target).abs() <= GEOMETRY_TOL_BINS;
                peaks.push((seed, line.angle_grad, peak));
            }
        }
    }
    pass &= worst <= GEOMETRY_TOL_BINS && checked > 0;
    report(
        "simulator-geometry",
        pass,
        Duration::from_secs(5),
        t0,
        format!("echo_bins_checked={checked} worst_offset_bins={worst} peaks(seed,angle,bin)={peaks:?}"),
    )
}

fn object_bins_near(truth: &sonarkit::simulator::GroundTruth, sd: f64, lo: f64, hi: f64) -> usize {
    let mut n = 0;
    for line in 0..truth.lines() {
        for bin in 0..truth.samples() {
            let r = (bin as f64 + 1.0) * sd;
            if r >= lo && r <= hi && truth.get(line, bin) == Provenance::Object {
                n += 1;
            }
        }
    }
    n
}

fn shadow_reproduction() -> bool {
    let t0 = Instant::now();
    let config = ScanConfig::pool_default();
    let sd = config.plan.sample_distance_m;
    let mut exp3_max = 0;
    let mut exp8_detected = 0;
    for seed in 0..50u64 {
        let (_, t3) = simulate_sweep(&experiment_scene(3).unwrap().with_seed(seed), &config).unwrap();
        exp3_max = exp3_max.max(object_bins_near(&t3, sd, 3.5, 4.5));
        let (_, t8) = simulate_sweep(&experiment_scene(8).unwrap().with_seed(seed), &config).unwrap();
        if object_bins_near(&t8, sd, 3.5, 4.5) >= 1 {
            exp8_detected += 1;
        }
    }
    report(
        "shadow-reproduction",
        exp3_max == 0 && exp8_detected >= 45,
        Duration::from_secs(30),
        t0,
        format!("exp3_max_object_bins_at_4m={exp3_max} exp8_seeds_detected={exp8_detected}/50"),
    )
}

const GOLDEN_SCAN_REQUEST: [u8; 19] = [
    0x50, 0x33, 0x01, 0x10, 0x00, 0x0A, 0x00, 0x9C, 0xFF, 0x64, 0x00, 0x01, 0xB0, 0x04, 0x42, 0x01, 0x01, 0x96, 0x03,
];

fn random_message(rng: &mut ChaCha8Rng) -> Message {
    let gain = Gain::from_index(rng.random_range(0..3)).unwrap();
    match rng.random_range(0..4) {
        0 => Message::DeviceInfo {
            firmware_major: rng.random(),
            firmware_minor: rng.random(),
        },
        1 => Message::ScanRequest(ScanRequest {
            sector_start_grad: rng.random(),
            sector_end_grad: rng.random(),
            angular_step_grad: rng.random_range(1..=255),
            sample_count: rng.random(),
            sample_period_ticks: rng.random(),
            gain,
        }),
        2 => {
            let n = rng.random_range(0..1500);
            Message::ScanLineData {
                angle_grad: rng.random(),
                gain,
                intensities: (0..n).map(|_| rng.random()).collect(),
            }
        }
        _ => {
            let n = rng.random_range(0..50);
            Message::ErrorReply {
                code: rng.random(),
                detail: (0..n).map(|_| rng.random_range(' '..='~')).collect(),
            }
        }
    }
}

fn protocol_golden_and_fuzz() -> bool {
    let t0 = Instant::now();
    let golden = decode_frame(&GOLDEN_SCAN_REQUEST);
    let golden_ok = match &golden {
        Ok(msg @ Message::ScanRequest(req)) => {
            req.sector_start_grad == -100
                && req.sector_end_grad == 100
                && req.angular_step_grad == 1
                && req.sample_count == 1200
                && req.sample_period_ticks == 322
                && req.gain == Gain::G1
                && encode(msg).as_deref() == Ok(&GOLDEN_SCAN_REQUEST[..])
        }
        _ => false,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0xF00D);
    let mut failures = 0;
    for _ in 0..10_000 {
        let msgs: Vec<Message> = (0..rng.random_range(1..4)).map(|_| random_message(&mut rng)).collect();
        let mut stream = Vec::new();
        let mut single_ok = true;
        for m in &msgs {
            let bytes = encode(m).unwrap();
            single_ok &= decode_frame(&bytes).as_ref() == Ok(m);
            stream.extend(bytes);
        }
        let mut dec = StreamDecoder::new();
        let mut got = Vec::new();
        let mut pos = 0;
        while pos < stream.len() {
            let end = (pos + rng.random_range(1..=97)).min(stream.len());
            got.extend(dec.push(&stream[pos..end]));
            pos = end;
        }
        let got: Result<Vec<Message>, _> = got.into_iter().collect();
        if !single_ok || got.as_ref() != Ok(&msgs) || dec.buffered() != 0 {
            failures += 1;
        }
    }
    report(
        "protocol",
        golden_ok && failures == 0,
        Duration::from_secs(10),
        t0,
        format!("golden_ok={golden_ok} fuzz_failures={failures}/10000"),
    )
}

struct Counts {
    tp: f64,
    fp: f64,
    fn_: f64,
    tn: f64,
    abs_err: f64,
}

fn brute_force(truth: &[f64], pred: &[f64], threshold: f64) -> Counts {
    let mut c = Counts { tp: 0.0, fp: 0.0, fn_: 0.0, tn: 0.0, abs_err: 0.0 };
    for i in 0..truth.len() {
        let t = truth[i] == 1.0;
        let p = pred[i] >= threshold;
        if t && p {
            c.tp += 1.0;
        } else if !t && p {
            c.fp += 1.0;
        } else if t && !p {
            c.fn_ += 1.0;
        } else {
            c.tn += 1.0;
        }
        c.abs_err += (truth[i] - pred[i]).abs();
    }
    c
}

/// Overlap ratio with the empty-mask convention: both empty gives 1,
/// otherwise an empty denominator gives 0.
fn overlap(num: f64, den: f64, both_empty: bool) -> f64 {
    if both_empty {
        1.0
    } else if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn metrics_match_oracle() -> bool {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACE);
    let mut worst = 0.0f64;
    let mut f1_dc_identity = true;
    for k in 0..1000 {
        let density = rng.random_range(0.0..1.0);
        let truth: Vec<f64> = (0..256).map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 }).collect();
        let binary = k % 2 == 0;
        let pred: Vec<f64> = if binary {
            (0..256).map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 }).collect()
        } else {
            (0..256).map(|_| rng.random_range(0..=255u8) as f64 / 255.0).collect()
        };
        let c = brute_force(&truth, &pred, 0.5);
        let both_empty = c.tp + c.fp + c.fn_ == 0.0;
        let want = [
            ("dc", overlap(2.0 * c.tp, 2.0 * c.tp + c.fp + c.fn_, both_empty)),
            ("iou", overlap(c.tp, c.tp + c.fp + c.fn_, both_empty)),
            ("pa", (c.tp + c.tn) / 256.0),
            ("ps", overlap(c.tp, c.tp + c.fp, both_empty)),
            ("rs", overlap(c.tp, c.tp + c.fn_, both_empty)),
            ("mae", c.abs_err / 256.0),
        ];
        let r: sonarkit::MetricReport = evaluate(&MaskPair::new(16, 16, truth, pred).unwrap(), 0.5);
        let got = [r.dc, r.iou, r.pa, r.ps, r.rs, r.mae];
        for ((_, w), g) in want.iter().zip(got) {
            worst = worst.max((w - g).abs());
        }
        if binary && r.f1s != r.dc {
            f1_dc_identity = false;
        }
    }

    let mut truth = vec![0.0; 16];
    let mut pred = vec![0.0; 16];
    for row in 0..2 {
        truth[row * 4] = 1.0;
        truth[row * 4 + 1] = 1.0;
        pred[row * 4 + 1] = 1.0;
        pred[row * 4 + 2] = 1.0;
    }
    let r: sonarkit::MetricReport = evaluate(&MaskPair::new(4, 4, truth, pred).unwrap(), 0.5);
    let fixture_ok = r.pa == 0.75 && r.dc == 0.5 && (r.iou - 1.0 / 3.0).abs() < 1e-12 && r.mae == 0.25 && r.f1s == r.dc;

    report(
        "metrics-oracle",
        worst <= METRIC_TOL && f1_dc_identity && fixture_ok,
        Duration::from_secs(5),
        t0,
        format!(
            "worst_abs_diff={worst:.3e} f1s_equals_dc={f1_dc_identity} fixture(pa={}, dc={}, iou={:.4}, mae={})",
            r.pa, r.dc, r.iou, r.mae
        ),
    )
}

async fn end_to_end_identity() -> bool {
    let t0 = Instant::now();
    let requested = ScanConfig::pool_default();
    let cfg = ScanRequest::from_config(&requested)
        .unwrap()
        .to_config(&WaterConditions::freshwater_pool())
        .unwrap();
    let mut identical = 0;
    let mut notes = Vec::new();
    for n in 1..=10u8 {
        let scene = experiment_scene(n).unwrap().with_seed(1000 + n as u64);
        let addr = emulator::spawn("127.0.0.1:0".parse().unwrap(), scene.clone(), EmulatorConfig::unthrottled())
            .await
            .unwrap();
        let mut client = EmulatorClient::connect(addr).await.unwrap();
        let got = client.scan(&requested).await.unwrap();
        let (want, _) = simulate_sweep(&scene, &cfg).unwrap();
        if got.config() == want.config() && got.lines() == want.lines() {
            identical += 1;
        } else {
            notes.push(n);
        }
    }
    report(
        "end-to-end-identity",
        identical == 10,
        Duration::from_secs(30),
        t0,
        format!("identical_scenes={identical}/10 differing={notes:?}"),
    )
}

type Check = Box<dyn FnOnce() -> bool>;

fn main() {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .expect("tokio runtime");
    let checks: Vec<(&str, Check)> = vec![
        ("sound-speed", Box::new(sound_speed_at_pool_conditions)),
        ("configuration", Box::new(pool_configuration_consistency)),
        ("preprocessing-oracle", Box::new(preprocessing_matches_oracle)),
        ("simulator-geometry", Box::new(simulator_geometry_empty_pool)),
        ("shadow-reproduction", Box::new(shadow_reproduction)),
        ("protocol", Box::new(protocol_golden_and_fuzz)),
        ("metrics-oracle", Box::new(metrics_match_oracle)),
        ("end-to-end-identity", Box::new(move || runtime.block_on(end_to_end_identity()))),
    ];
    let total = checks.len();
    let mut failed = Vec::new();
    for (name, check) in checks {
        match std::panic::catch_unwind(std::panic::AssertUnwindSafe(check)) {
            Ok(true) => {}
            Ok(false) => failed.push(name),
            Err(_) => {
                println!("ACCEPTANCE {name}: FAIL (panicked)");
                failed.push(name);
            }
        }
    }
    println!("acceptance: {} of {total} criteria passed", total - failed.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
