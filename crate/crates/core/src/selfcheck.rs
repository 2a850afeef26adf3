//! Exact and statistical oracles for the timing and metric layers, shared by
//! the `selfcheck` command and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::SensorConfig;
use crate::error::Result;
use crate::eval::{ap_from_ranked, brute_force_ap, monte_carlo_iou, oriented_iou};
use crate::pairing::{reconstruct_aligned_radar, reconstruction_sources, BinSource};
use crate::scene::{ClutterObject, OrientedBox, Scenario, VehicleTrack};
use crate::sensors::{scan_radar, RadarParams, Sweep};
use crate::timebase::{compute_offset, fusion_triggers, secs_to_ns, warmup_bound, FusionPolicy, SweepSchedule};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn random_box<R: Rng>(rng: &mut R) -> OrientedBox {
    OrientedBox::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(0.5..5.0),
        rng.random_range(0.5..3.0),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .expect("positive extents")
}

/// `oriented_iou` against Monte-Carlo rasterization on random overlapping pairs.
pub fn iou_oracle(pairs: usize, samples: usize, tol: f64, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        let exact = oriented_iou(&a, &b)?;
        let mc = monte_carlo_iou(&a, &b, samples, &mut rng);
        worst = worst.max((exact - mc).abs());
    }
    let half = oriented_iou(
        &OrientedBox::new(0.0, 0.0, 1.0, 1.0, 0.0)?,
        &OrientedBox::new(0.5, 0.0, 1.0, 1.0, 0.0)?,
    )?;
    let half_err = (half - 1.0 / 3.0).abs();
    Ok(CheckOutcome::new(
        "iou_monte_carlo",
        worst <= tol && half_err <= 1e-12,
        format!("{pairs} pairs, max |exact - mc| = {worst:.5} (tol {tol}); half-overlap error {half_err:.1e}"),
    ))
}

/// Average precision against brute-force PR enumeration on random rankings
/// of at most `max_dets` detections.
pub fn ap_oracle(fixtures: usize, max_dets: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..fixtures {
        let n = rng.random_range(0..=max_dets);
        let hits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let tp = hits.iter().filter(|h| **h).count();
        let n_gt = tp + rng.random_range(0..4usize).max(usize::from(tp == 0));
        let ap = ap_from_ranked(&hits, n_gt, 0.5)?.ap;
        if ap != brute_force_ap(&hits, n_gt) {
            mismatches += 1;
        }
    }
    Ok(CheckOutcome::new(
        "ap_brute_force",
        mismatches == 0,
        format!("{fixtures} fixtures, {mismatches} mismatches"),
    ))
}

/// Trigger count, offset range and per-Radar-period offset cycles over
/// `horizon_s` seconds.
pub fn scheduler_cycles(sensors: &SensorConfig, policy: &FusionPolicy, horizon_s: f64) -> Result<CheckOutcome> {
    let lidar = sensors.lidar_schedule()?;
    let radar = sensors.radar_schedule()?;
    let ratio = sensors.ratio()?;
    policy.validate(ratio)?;
    let horizon = secs_to_ns(horizon_s);
    let warm = warmup_bound(&lidar, &radar, policy, ratio);
    let triggers = fusion_triggers(&lidar, policy.alpha, ratio, horizon, warm)?;
    let span = horizon - warm;
    let step = lidar.period_ns() * policy.alpha as i64;
    let expected = (span + step - 1) / step;
    let mut ok = triggers.len() as i64 == expected;
    let mut groups: Vec<(i64, Vec<u32>)> = Vec::new();
    for &t in &triggers {
        let o = compute_offset(t, &radar, &lidar)?;
        ok &= o <= ratio;
        let r = radar.latest_completed(t).expect("offset computed");
        match groups.last_mut() {
            Some((k, v)) if *k == r => v.push(o),
            _ => groups.push((r, vec![o])),
        }
    }
    if policy.alpha == 1 {
        ok &= groups
            .iter()
            .all(|(_, v)| v.windows(2).all(|w| w[1] == w[0] + 1));
        ok &= groups[1..groups.len().saturating_sub(1)]
            .iter()
            .all(|(_, v)| v.len() as u32 == ratio && v[0] == 0);
    }
    Ok(CheckOutcome::new(
        "scheduler_cycles",
        ok,
        format!(
            "{} triggers (expected {expected}) over {:.3}s after warm-up, {} Radar periods",
            triggers.len(),
            span as f64 * 1e-9,
            groups.len()
        ),
    ))
}

fn static_scene() -> Scenario {
    let parked = |id, cx, cy, yaw| VehicleTrack {
        id,
        center: [cx, cy],
        size: [4.5, 2.0],
        yaw,
        velocity: [0.0, 0.0],
        yaw_rate: 0.0,
    };
    Scenario {
        duration: 60.0,
        bounds: 60.0,
        seed: 0,
        vehicles: vec![parked(0, 12.0, 3.0, 0.3), parked(1, -8.0, 15.0, 1.2), parked(2, 5.0, -20.0, -0.7)],
        clutter: vec![ClutterObject {
            id: 0,
            center: [-15.0, -10.0],
            size: [4.0, 2.0],
            yaw: 0.4,
            reflectivity: 0.6,
        }],
    }
}

/// Every azimuth bin of random reconstruction windows comes from exactly one
/// source sweep and is captured inside the window; on a static noiseless
/// scene the result equals a sweep simulated directly over the window.
pub fn reconstruction_partition(radar: &SweepSchedule, params: &RadarParams, windows: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = static_scene();
    let params = params.noiseless();
    let p = radar.period_ns();
    let first = radar.first_index();
    let (mut partition_bad, mut direct_bad) = (0, 0);
    let mut cache = std::collections::HashMap::new();
    for _ in 0..windows {
        let k = rng.random_range(first..first + 8);
        let ts = radar.start_ns(k) + rng.random_range(0..p);
        let window = (ts, ts + p);
        let mut get = |i: i64| -> Result<crate::sensors::RadarRawFrame> {
            if let Some(f) = cache.get(&i) {
                return Ok(Clone::clone(f));
            }
            let f = scan_radar(&scene, &Sweep::of(radar, i), &params)?;
            cache.insert(i, f.clone());
            Ok(f)
        };
        let prev = get(k)?;
        let next = get(k + 1)?;
        let sources = reconstruction_sources(&prev, window);
        let covered = (0..prev.azimuth_bins).all(|a| {
            let in_prev = (ts..ts + p).contains(&prev.bin_capture_ns(a));
            let in_next = (ts..ts + p).contains(&next.bin_capture_ns(a));
            let chosen = match sources[a as usize] {
                BinSource::Prev => in_prev,
                BinSource::Next => in_next,
            };
            chosen && in_prev != in_next
        });
        if sources.len() != prev.azimuth_bins as usize || !covered {
            partition_bad += 1;
        }
        let rebuilt = reconstruct_aligned_radar(&prev, &next, window)?;
        let direct = scan_radar(
            &scene,
            &Sweep {
                index: k,
                start_ns: ts,
                end_ns: ts + p,
            },
            &params,
        )?;
        if rebuilt.intensity != direct.intensity {
            direct_bad += 1;
        }
    }
    Ok(CheckOutcome::new(
        "reconstruction_partition",
        partition_bad == 0 && direct_bad == 0,
        format!("{windows} windows, {partition_bad} partition failures, {direct_bad} static mismatches"),
    ))
}

/// The four oracles at their acceptance sizes.
pub fn run_all(sensors: &SensorConfig) -> Result<Vec<CheckOutcome>> {
    let timing = SensorConfig {
        lidar_hz: 20.0,
        radar_hz: 4.0,
        ..sensors.clone()
    };
    Ok(vec![
        iou_oracle(100, 100_000, 0.01, 7)?,
        ap_oracle(200, 10, 11)?,
        scheduler_cycles(&timing, &FusionPolicy::default(), 10.0)?,
        reconstruction_partition(&sensors.radar_schedule()?, &sensors.radar, 1000, 13)?,
    ])
}
