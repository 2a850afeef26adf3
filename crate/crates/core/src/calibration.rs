//! Grid-search recalibration of the scoring stage on labeled offset datasets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use std::fmt::Write as _;

use crate::config::{CalibrationGrid, ExperimentConfig};
use crate::detector::{BranchEntry, BranchParams, CompensationMode, DetectorParams, Dispatch, ShiftWindow};
use crate::error::{Error, Result};
use crate::experiment::{dataset_ap, mean_ap, OffsetDataset};
use crate::eval::IOU_THRESHOLDS;
use crate::sweep::{eval_scenarios, sweep_datasets, sweep_window};

/// Score of one branch on one offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetObjective {
    pub offset: u32,
    /// AP at each threshold, then their mean.
    pub ap: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    /// `None` for the single shared parameter set.
    pub branch: Option<u32>,
    pub params: BranchParams,
    pub objective: f64,
    pub per_offset: Vec<OffsetObjective>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mode: CompensationMode,
    pub cells: usize,
    pub branches: Vec<BranchReport>,
}

impl CalibrationReport {
    /// One line per (branch, offset): APs at each threshold and the objective.
    pub fn table(&self) -> String {
        let mut s = String::from("branch  offset");
        for t in IOU_THRESHOLDS {
            let _ = write!(s, "  AP@{t:<4}");
        }
        s.push_str("  objective  radar_weight  radius  scale\n");
        for b in &self.branches {
            let name = b.branch.map_or_else(|| self.mode.as_str().to_string(), |k| k.to_string());
            for o in &b.per_offset {
                let _ = write!(s, "{name:<7} {:>6}", o.offset);
                for a in &o.ap[..IOU_THRESHOLDS.len()] {
                    let _ = write!(s, "  {a:>7.4}");
                }
                let _ = writeln!(
                    s,
                    "  {:>9.4}  {:>12}  {:>6}  {:>5}",
                    o.objective, b.params.radar_weight, b.params.search_radius, b.params.displacement_scale[0]
                );
            }
        }
        s
    }
}

/// Grid cells in search order: radar weight, then radius, then scale.
pub fn grid_cells(grid: &CalibrationGrid) -> Vec<BranchParams> {
    let mut out = Vec::new();
    for &w in &grid.radar_weights {
        for &r in &grid.search_radii {
            for &s in &grid.displacement_scales {
                out.push(BranchParams {
                    radar_weight: w,
                    search_radius: r,
                    displacement_scale: [s, s],
                });
            }
        }
    }
    out
}

/// Shift range needed to score every cell of `grid` on gaps up to `max_gap`.
pub fn grid_window(grid: &CalibrationGrid, max_gap: u32) -> ShiftWindow {
    ShiftWindow {
        max_radius: grid.search_radii.iter().copied().fold(0.0, f64::max),
        max_gap,
        max_scale: grid.displacement_scales.iter().copied().fold(0.0, f64::max),
    }
}

fn scored(ds: &OffsetDataset, dispatch: &Dispatch, base: &DetectorParams) -> Result<OffsetObjective> {
    let aps = dataset_ap(&ds.frames, dispatch, base)?;
    let objective = mean_ap(&aps);
    let mut ap: Vec<f64> = aps.iter().map(|a| a.ap).collect();
    ap.push(objective);
    Ok(OffsetObjective {
        offset: ds.offset,
        ap,
        objective,
    })
}

/// First cell with the strictly greatest objective.
fn argmax<T>(cells: Vec<(BranchParams, f64, T)>) -> (BranchParams, f64, T) {
    let mut it = cells.into_iter();
    let mut best = it.next().expect("grid is non-empty");
    for c in it {
        if c.1 > best.1 {
            best = c;
        }
    }
    best
}

fn search_branch(
    ds: &[&OffsetDataset],
    gap: impl Fn(u32) -> u32 + Sync,
    mode: CompensationMode,
    branch: Option<u32>,
    base: &DetectorParams,
    cells: &[BranchParams],
) -> Result<BranchReport> {
    let results: Vec<Result<(BranchParams, f64, Vec<OffsetObjective>)>> = cells
        .par_iter()
        .map(|cell| {
            let per_offset = ds
                .iter()
                .map(|d| {
                    let dispatch = Dispatch {
                        mode,
                        branch,
                        gap_offset: gap(d.offset),
                        params: cell.clone(),
                    };
                    scored(d, &dispatch, base)
                })
                .collect::<Result<Vec<_>>>()?;
            let objective = per_offset.iter().map(|o| o.objective).sum::<f64>() / per_offset.len() as f64;
            Ok((cell.clone(), objective, per_offset))
        })
        .collect();
    let (params, objective, per_offset) = argmax(results.into_iter().collect::<Result<Vec<_>>>()?);
    Ok(BranchReport {
        branch,
        params,
        objective,
        per_offset,
    })
}

/// Calibrate the scoring stage of `base` for `mode`.
///
/// `per_offset` fits one branch per dataset offset, scored with its own gap.
/// `mixed` fits one set maximizing the mean objective over all offsets with
/// each frame compensated for its own gap. `none` fits one set with no
/// compensation. The objective is mean AP over the IoU thresholds.
pub fn calibrate(
    datasets: &[OffsetDataset],
    mode: CompensationMode,
    base: &DetectorParams,
    grid: &CalibrationGrid,
) -> Result<(DetectorParams, CalibrationReport)> {
    grid.validate()?;
    if datasets.is_empty() || datasets.iter().any(|d| d.frames.is_empty()) {
        return Err(Error::Calibration("empty training stream".into()));
    }
    if let Some(d) = datasets.iter().find(|d| d.n_ground_truth() == 0) {
        return Err(Error::Calibration(format!("offset {} has no ground-truth boxes", d.offset)));
    }
    let cells = grid_cells(grid);
    let all: Vec<&OffsetDataset> = datasets.iter().collect();
    let mut out = base.clone();
    out.mode = mode;
    out.branches.clear();
    let branches = match mode {
        CompensationMode::None => {
            let b = search_branch(&all, |_| 0, mode, None, base, &cells)?;
            out.default_branch = b.params.clone();
            vec![b]
        }
        CompensationMode::Mixed => {
            let b = search_branch(&all, |o| o, mode, None, base, &cells)?;
            out.default_branch = b.params.clone();
            vec![b]
        }
        CompensationMode::PerOffset => {
            let mut offsets: Vec<u32> = datasets.iter().map(|d| d.offset).collect();
            offsets.sort_unstable();
            offsets.dedup();
            let mut reports = Vec::new();
            for o in offsets {
                let own: Vec<&OffsetDataset> = datasets.iter().filter(|d| d.offset == o).collect();
                let b = search_branch(&own, |o| o, mode, Some(o), base, &cells)?;
                out.branches.push(BranchEntry {
                    offset: o,
                    params: b.params.clone(),
                });
                reports.push(b);
            }
            reports
        }
    };
    out.validate()?;
    Ok((
        out,
        CalibrationReport {
            mode,
            cells: cells.len(),
            branches,
        },
    ))
}

/// Calibrate `cfg.detector` for `mode` on the configured training seeds,
/// offsets `0..=ratio`. `none` sees only the aligned (offset 0) data.
pub fn calibrate_experiment(cfg: &ExperimentConfig, mode: CompensationMode) -> Result<(DetectorParams, CalibrationReport)> {
    let ratio = cfg.sensors.ratio()?;
    let scenarios = eval_scenarios(cfg, &cfg.train_seeds())?;
    let window = sweep_window(&[], Some(&cfg.calibration), ratio);
    let (datasets, _) = sweep_datasets(cfg, &scenarios, &cfg.detector, window)?;
    let used = if mode == CompensationMode::None { &datasets[..1] } else { &datasets[..] };
    calibrate(used, mode, &cfg.detector, &cfg.calibration)
}
