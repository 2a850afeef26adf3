//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs as a plain binary so the lines show up in `cargo test`
//! output.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use timely_fusion::calibration::calibrate;
use timely_fusion::config::ExperimentConfig;
use timely_fusion::detector::{CompensationMode, DetectorParams};
use timely_fusion::experiment::{offset_datasets, offset_triggers, DatasetPlan, OffsetDataset};
use timely_fusion::selfcheck::{ap_oracle, iou_oracle, reconstruction_partition, scheduler_cycles};
use timely_fusion::sweep::{eval_scenarios, score_sweep, sweep_datasets, sweep_window, SweepRow, Variant};
use timely_fusion::timebase::{fusion_triggers, secs_to_ns, warmup_bound, FusionPolicy};

struct Outcome {
    id: u8,
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

struct Suite {
    outcomes: Vec<Outcome>,
}

impl Suite {
    fn record(&mut self, id: u8, name: &'static str, passed: bool, detail: String, elapsed: Duration, budget: Duration) {
        let within = elapsed <= budget;
        let o = Outcome {
            id,
            name,
            passed: passed && within,
            detail: if within {
                detail
            } else {
                format!("{detail}; over time budget")
            },
            elapsed,
            budget,
        };
        println!(
            "{} criterion {}: {} ({:.2}s of {}s) {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.elapsed.as_secs_f64(),
            o.budget.as_secs(),
            o.detail
        );
        self.outcomes.push(o);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn ap(rows: &[SweepRow], variant: &str, offset: u32, thr: f64) -> f64 {
    rows.iter()
        .find(|r| r.variant == variant && r.offset == offset)
        .and_then(|r| r.ap_at(thr))
        .unwrap_or_else(|| panic!("missing row {variant}/{offset}"))
}

fn curve(rows: &[SweepRow], variant: &str, ratio: u32, thr: f64) -> Vec<f64> {
    (0..=ratio).map(|o| ap(rows, variant, o, thr)).collect()
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn named(params: DetectorParams, name: &str) -> Variant {
    let mut v = Variant::new(params);
    v.name = name.to_string();
    v
}

fn scheduler(suite: &mut Suite) {
    let t = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.sensors.lidar_hz = 20.0;
    cfg.sensors.radar_hz = 4.0;
    let policy = FusionPolicy::default();
    let check = scheduler_cycles(&cfg.sensors, &policy, 10.0).unwrap();
    let lidar = cfg.sensors.lidar_schedule().unwrap();
    let radar = cfg.sensors.radar_schedule().unwrap();
    let warm = warmup_bound(&lidar, &radar, &policy, 5);
    let expected = (secs_to_ns(10.0) - warm) * 20;
    let n = fusion_triggers(&lidar, 1, 5, secs_to_ns(10.0), warm).unwrap().len() as i64;
    let exact = n * 1_000_000_000 == expected;
    suite.record(
        1,
        "scheduler arithmetic",
        check.passed && exact,
        format!("{}; (10 - {:.2})*20 = {}", check.detail, warm as f64 * 1e-9, expected as f64 * 1e-9),
        t.elapsed(),
        secs(1),
    );
}

fn reconstruction(suite: &mut Suite) {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    let c = reconstruction_partition(&cfg.sensors.radar_schedule().unwrap(), &cfg.sensors.radar, 1000, 2024).unwrap();
    suite.record(2, "reconstruction partition", c.passed, c.detail, t.elapsed(), secs(10));
}

fn metrics(suite: &mut Suite) {
    let t = Instant::now();
    let iou = iou_oracle(100, 100_000, 0.01, 99).unwrap();
    let aps = ap_oracle(200, 10, 101).unwrap();
    suite.record(
        3,
        "metric oracles",
        iou.passed && aps.passed,
        format!("{}; {}", iou.detail, aps.detail),
        t.elapsed(),
        secs(30),
    );
}

struct Calibrated {
    per_offset: DetectorParams,
    mixed: DetectorParams,
    aligned_none: DetectorParams,
    elapsed: Duration,
}

fn calibrated(cfg: &ExperimentConfig) -> Calibrated {
    let t = Instant::now();
    let ratio = cfg.sensors.ratio().unwrap();
    let train = eval_scenarios(cfg, &cfg.train_seeds()).unwrap();
    let window = sweep_window(&[], Some(&cfg.calibration), ratio);
    let (ds, _) = sweep_datasets(cfg, &train, &cfg.detector, window).unwrap();
    let grid = &cfg.calibration;
    let per_offset = calibrate(&ds, CompensationMode::PerOffset, &cfg.detector, grid).unwrap().0;
    let mixed = calibrate(&ds, CompensationMode::Mixed, &cfg.detector, grid).unwrap().0;
    let aligned_none = calibrate(&ds[..1], CompensationMode::None, &cfg.detector, grid).unwrap().0;
    Calibrated {
        per_offset,
        mixed,
        aligned_none,
        elapsed: t.elapsed(),
    }
}

fn variants(cal: &Calibrated) -> Vec<Variant> {
    let mut v = vec![
        Variant::new(DetectorParams::default()),
        named(cal.aligned_none.clone(), "none_aligned"),
    ];
    v.extend(Variant::with_branches(cal.per_offset.clone()));
    v.push(Variant::new(cal.mixed.clone()));
    v
}

fn offset_tables(suite: &mut Suite, cfg: &ExperimentConfig, cal: &Calibrated) -> (Vec<OffsetDataset>, Duration) {
    let ratio = cfg.sensors.ratio().unwrap();
    let t = Instant::now();
    let vs = variants(cal);
    let scenarios = eval_scenarios(cfg, &cfg.eval_seeds()).unwrap();
    let (ds, _) = sweep_datasets(cfg, &scenarios, &cfg.detector, sweep_window(&vs, None, ratio)).unwrap();
    let rows = score_sweep(&ds, &vs).unwrap();
    let shared = t.elapsed();

    let offsets: Vec<f64> = (0..=ratio).map(|o| o as f64).collect();
    let none = curve(&rows, "none", ratio, 0.8);
    let rho = spearman(&offsets, &none);
    let collapse = none[ratio as usize] / none[0];
    suite.record(
        4,
        "offset degradation (mode none)",
        rho <= -0.8 && collapse <= 0.7,
        format!("AP@0.8 {}; spearman {rho:.3}; offset {ratio}/offset 0 = {collapse:.3}", fmt(&none)),
        shared,
        secs(300),
    );

    let base = ap(&rows, "none_aligned", 0, 0.8);
    let po = curve(&rows, "per_offset", ratio, 0.8);
    let worst = po.iter().map(|a| (a - base).abs()).fold(0.0, f64::max);
    suite.record(
        5,
        "offset-aware recovery (per_offset)",
        worst <= 0.05,
        format!(
            "per_offset AP@0.8 {}; aligned none baseline {base:.3}; max |diff| {worst:.3}; mixed {}; aligned none {}",
            fmt(&po),
            fmt(&curve(&rows, "mixed", ratio, 0.8)),
            fmt(&curve(&rows, "none_aligned", ratio, 0.8))
        ),
        cal.elapsed + shared,
        secs(300),
    );

    let t6 = Instant::now();
    let mut margin = f64::MAX;
    let mut violations = Vec::new();
    for i in 0..=ratio {
        let own = ap(&rows, &format!("branch_{i}"), i, 0.5);
        for j in (0..=ratio).filter(|j| *j != i) {
            let m = own - ap(&rows, &format!("branch_{j}"), i, 0.5);
            margin = margin.min(m);
            if m < 0.0 {
                violations.push(format!("data {i} branch {j} by {:.4}", -m));
            }
        }
    }
    suite.record(
        6,
        "diagonal dominance (AP@0.5)",
        violations.is_empty(),
        format!("worst diagonal margin {margin:.4}; violations [{}]", violations.join(", ")),
        cal.elapsed + shared + t6.elapsed(),
        secs(300),
    );
    (ds, shared)
}

fn history_skipping(suite: &mut Suite, cfg: &ExperimentConfig, cal: &Calibrated, h4s1: Vec<OffsetDataset>, reuse: Duration) {
    let t = Instant::now();
    let ratio = cfg.sensors.ratio().unwrap();
    let policy = |num_history, history_stride| FusionPolicy {
        num_history,
        history_stride,
        ..cfg.policy.clone()
    };
    let policies = [policy(4, 1), policy(2, 1), policy(2, 2)];
    let triggers = offset_triggers(&cfg.sensors, &policies, cfg.horizon_ns()).unwrap();
    let own = offset_triggers(&cfg.sensors, &policies[..1], cfg.horizon_ns()).unwrap();
    assert_eq!(triggers, own, "H4S1 triggers are shared");
    let variant = Variant::new(cal.per_offset.clone());
    let window = sweep_window(std::slice::from_ref(&variant), None, ratio);
    let scenarios = eval_scenarios(cfg, &cfg.eval_seeds()).unwrap();
    let offsets: Vec<u32> = (0..=ratio).collect();
    let mean_at = |ds: &[OffsetDataset]| {
        let rows = score_sweep(ds, std::slice::from_ref(&variant)).unwrap();
        curve(&rows, "per_offset", ratio, 0.8).iter().sum::<f64>() / (ratio + 1) as f64
    };
    let mut means = vec![mean_at(&h4s1)];
    drop(h4s1);
    for p in &policies[1..] {
        let plan = DatasetPlan {
            sensors: &cfg.sensors,
            policy: p,
            detector: &cfg.detector,
            window,
            triggers: &triggers,
            min_visible: cfg.experiment.min_visible_points,
        };
        means.push(mean_at(&offset_datasets(&scenarios, &offsets, &plan).unwrap()));
    }
    let (h4s1, h2s1, h2s2) = (means[0], means[1], means[2]);
    suite.record(
        7,
        "history skipping",
        h2s2 >= h2s1 - 0.02 && (h2s2 - h4s1).abs() <= 0.03,
        format!("mean AP@0.8 over offsets (per_offset): H2S2 {h2s2:.3}, H2S1 {h2s1:.3}, H4S1 {h4s1:.3}"),
        t.elapsed() + reuse,
        secs(300),
    );
}

fn static_scenes(suite: &mut Suite, cfg: &ExperimentConfig, cal: &Calibrated) {
    let t = Instant::now();
    let ratio = cfg.sensors.ratio().unwrap();
    let mut cfg = cfg.clone();
    cfg.scenario = cfg.scenario.parked();
    cfg.sensors = cfg.sensors.noiseless();
    cfg.experiment.scenarios = 20;
    let vs = variants(cal);
    let scenarios = eval_scenarios(&cfg, &cfg.eval_seeds()).unwrap();
    assert!(scenarios.iter().all(|s| s.is_static()));
    let (ds, _) = sweep_datasets(&cfg, &scenarios, &cfg.detector, sweep_window(&vs, None, ratio)).unwrap();
    let rows = score_sweep(&ds, &vs).unwrap();
    let mut worst = 0.0f64;
    let mut n = 0;
    for r in &rows {
        let base = rows.iter().find(|b| b.variant == r.variant && b.offset == 0).unwrap();
        for (c, b) in r.cells.iter().zip(&base.cells) {
            worst = worst.max((c.ap - b.ap).abs());
            n += 1;
        }
    }
    suite.record(
        8,
        "static-scene null effect",
        worst <= 1e-9,
        format!(
            "{} variants x {} offsets x 3 thresholds ({n} cells); max |AP - AP(offset 0)| = {worst:.1e}; none AP@0.8 {:.3}",
            vs.len(),
            ratio + 1,
            ap(&rows, "none", 0, 0.8)
        ),
        t.elapsed(),
        secs(60),
    );
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn cli(workers: usize, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_timely-fusion"))
        .env("TF_WORKERS", workers.to_string())
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism(suite: &mut Suite) {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("config.toml");
    fs::write(
        &cfg,
        "[experiment]\nscenarios = 4\ntrain_scenarios = 2\n\n[calibration]\nradar_weights = [0.0, 0.5, 1.0]\nsearch_radii = [0.25, 1.0]\ndisplacement_scales = [1.0, 0.0]\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();
    let mut ok = true;
    for (w, tag) in [(1, "a"), (4, "b")] {
        ok &= cli(w, &["simulate", "--config", cfg, "--seed", "77", "--out", &p(&format!("sim_{tag}"))]);
        ok &= cli(w, &["calibrate", "--config", cfg, "--mode", "per_offset", "--out", &p(&format!("cal_{tag}/po.json"))]);
        ok &= cli(w, &["calibrate", "--config", cfg, "--mode", "mixed", "--out", &p(&format!("cal_{tag}/mx.json"))]);
        ok &= cli(
            w,
            &[
                "sweep", "--config", cfg, "--params", &p("cal_a/po.json"), "--params", &p("cal_a/mx.json"), "--out",
                &p(&format!("sweep_{tag}")),
            ],
        );
    }
    let mut same = Vec::new();
    let mut files = 0;
    for d in ["sim", "cal", "sweep"] {
        let (a, b) = (snapshot(&root.join(format!("{d}_a"))), snapshot(&root.join(format!("{d}_b"))));
        files += a.len();
        same.push(format!("{d} {}", if a == b && !a.is_empty() { "identical" } else { "DIFFER" }));
        ok &= a == b && !a.is_empty();
    }
    suite.record(
        9,
        "determinism across worker counts",
        ok,
        format!("TF_WORKERS 1 vs 4, {files} files: {}", same.join(", ")),
        t.elapsed(),
        secs(120),
    );
}

fn main() {
    let mut suite = Suite { outcomes: Vec::new() };
    scheduler(&mut suite);
    reconstruction(&mut suite);
    metrics(&mut suite);
    let cfg = ExperimentConfig::default();
    let cal = calibrated(&cfg);
    println!(
        "calibrated on {} training scenarios in {:.1}s",
        cfg.experiment.train_scenarios,
        cal.elapsed.as_secs_f64()
    );
    let (h4s1, shared) = offset_tables(&mut suite, &cfg, &cal);
    history_skipping(&mut suite, &cfg, &cal, h4s1, shared);
    static_scenes(&mut suite, &cfg, &cal);
    determinism(&mut suite);
    let failed: Vec<String> = suite
        .outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.id.to_string())
        .collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        suite.outcomes.len() - failed.len(),
        suite.outcomes.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {}", failed.join(", "))
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
