//! Offset sweep: every detector variant scored at every offset, with CSV and
//! JSON renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calibration::grid_window;
use crate::config::{seed_set_hash, CalibrationGrid, ExperimentConfig};
use crate::detector::{CompensationMode, DetectorParams, Dispatch, ShiftWindow};
use crate::error::{Error, Result};
use crate::experiment::{dataset_ap, offset_datasets, offset_triggers, DatasetPlan, OffsetDataset};
use crate::eval::IOU_THRESHOLDS;
use crate::scene::{random_scenario, Scenario};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// A named parameter set; `forced_branch` scores one per_offset branch on
/// every offset instead of dispatching by offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub params: DetectorParams,
    pub forced_branch: Option<u32>,
}

impl Variant {
    pub fn new(params: DetectorParams) -> Self {
        Self {
            name: params.mode.as_str().to_string(),
            params,
            forced_branch: None,
        }
    }

    fn dispatch(&self, offset: u32) -> Result<Dispatch> {
        match self.forced_branch {
            Some(k) => self.params.forced_dispatch(k),
            None => Ok(self.params.dispatch(offset)),
        }
    }

    /// The plain variant followed by one forced variant per branch.
    pub fn with_branches(params: DetectorParams) -> Vec<Self> {
        let mut out = vec![Self::new(params.clone())];
        for b in &params.branches {
            out.push(Self {
                name: format!("branch_{}", b.offset),
                params: params.clone(),
                forced_branch: Some(b.offset),
            });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub iou_threshold: f64,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub offset: u32,
    /// One cell per IoU threshold, ascending.
    pub cells: Vec<SweepCell>,
}

impl SweepRow {
    pub fn ap_at(&self, iou_threshold: f64) -> Option<f64> {
        self.cells.iter().find(|c| c.iou_threshold == iou_threshold).map(|c| c.ap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMetadata {
    pub tool_version: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub seed_set_hash: String,
    pub n_scenarios: usize,
    pub policy: String,
    pub triggers_per_scenario: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetSweepReport {
    pub metadata: SweepMetadata,
    /// Variant-major in the order given, offsets ascending.
    pub rows: Vec<SweepRow>,
}

impl OffsetSweepReport {
    pub fn row(&self, variant: &str, offset: u32) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.variant == variant && r.offset == offset)
    }

    pub fn ap(&self, variant: &str, offset: u32, iou_threshold: f64) -> Option<f64> {
        self.row(variant, offset)?.ap_at(iou_threshold)
    }

    pub fn validate(&self, variants: &[String], offsets: &[u32]) -> Result<()> {
        for v in variants {
            for &o in offsets {
                let row = self
                    .row(v, o)
                    .ok_or_else(|| Error::Structural(format!("missing sweep row {v}/{o}")))?;
                if row.cells.len() != IOU_THRESHOLDS.len()
                    || row.cells.iter().any(|c| !(0.0..=1.0).contains(&c.ap))
                {
                    return Err(Error::Structural(format!("incomplete sweep row {v}/{o}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let m = &self.metadata;
        let mut s = String::new();
        let _ = writeln!(s, "# tool_version: {}", m.tool_version);
        let _ = writeln!(s, "# config_sha256: {}", m.config_sha256);
        let _ = writeln!(s, "# policy: {}", m.policy);
        let seeds: Vec<String> = m.seeds.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(s, "# seeds: {}", seeds.join(" "));
        s.push_str("variant,offset,iou_threshold,ap,tp,fp,fn,n_scenarios,seed_set_hash\n");
        for r in &self.rows {
            for c in &r.cells {
                let _ = writeln!(
                    s,
                    "{},{},{},{:.6},{},{},{},{},{}",
                    r.variant, r.offset, c.iou_threshold, c.ap, c.tp, c.fp, c.fn_count, m.n_scenarios, m.seed_set_hash
                );
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn eval_scenarios(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<Scenario>> {
    seeds.iter().map(|&s| random_scenario(&cfg.scenario, s)).collect()
}

/// Shift window wide enough for every variant and the calibration grid.
pub fn sweep_window(variants: &[Variant], grid: Option<&CalibrationGrid>, ratio: u32) -> ShiftWindow {
    let mut w = grid.map(|g| grid_window(g, ratio)).unwrap_or(ShiftWindow {
        max_radius: 0.0,
        max_gap: ratio,
        max_scale: 0.0,
    });
    for v in variants {
        let p = &v.params;
        for b in std::iter::once(&p.default_branch).chain(p.branches.iter().map(|e| &e.params)) {
            w.max_radius = w.max_radius.max(b.search_radius);
            w.max_scale = w.max_scale.max(b.displacement_scale[0]).max(b.displacement_scale[1]);
        }
    }
    w
}

/// Labeled datasets for offsets `0..=ratio` over the evaluation scenarios.
/// Shared low-level detector settings come from `low_level`.
pub fn sweep_datasets(
    cfg: &ExperimentConfig,
    scenarios: &[Scenario],
    low_level: &DetectorParams,
    window: ShiftWindow,
) -> Result<(Vec<OffsetDataset>, usize)> {
    let ratio = cfg.sensors.ratio()?;
    let triggers = offset_triggers(&cfg.sensors, std::slice::from_ref(&cfg.policy), cfg.horizon_ns())?;
    let plan = DatasetPlan {
        sensors: &cfg.sensors,
        policy: &cfg.policy,
        detector: low_level,
        window,
        triggers: &triggers,
        min_visible: cfg.experiment.min_visible_points,
    };
    let offsets: Vec<u32> = (0..=ratio).collect();
    Ok((offset_datasets(scenarios, &offsets, &plan)?, triggers.len()))
}

/// Score every variant on every dataset.
pub fn score_sweep(datasets: &[OffsetDataset], variants: &[Variant]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for v in variants {
        for d in datasets {
            let aps = dataset_ap(&d.frames, &v.dispatch(d.offset)?, &v.params)?;
            rows.push(SweepRow {
                variant: v.name.clone(),
                offset: d.offset,
                cells: aps
                    .iter()
                    .map(|a| SweepCell {
                        iou_threshold: a.iou_threshold,
                        ap: a.ap,
                        tp: a.tp,
                        fp: a.fp,
                        fn_count: a.fn_count,
                    })
                    .collect(),
            });
        }
    }
    Ok(rows)
}

/// Full offset sweep over the configured evaluation seeds. All variants must
/// share the low-level settings of the first one.
pub fn offset_sweep(cfg: &ExperimentConfig, config_sha256: &str, variants: &[Variant]) -> Result<OffsetSweepReport> {
    let first = variants
        .first()
        .ok_or_else(|| Error::Parameter("offset sweep needs at least one variant".into()))?;
    let ratio = cfg.sensors.ratio()?;
    let seeds = cfg.eval_seeds();
    let scenarios = eval_scenarios(cfg, &seeds)?;
    let window = sweep_window(variants, None, ratio);
    let (datasets, per_scenario) = sweep_datasets(cfg, &scenarios, &first.params, window)?;
    let rows = score_sweep(&datasets, variants)?;
    let report = OffsetSweepReport {
        metadata: SweepMetadata {
            tool_version: TOOL_VERSION.to_string(),
            config_sha256: config_sha256.to_string(),
            seed_set_hash: seed_set_hash(&seeds),
            n_scenarios: seeds.len(),
            seeds,
            policy: cfg.policy.tag(),
            triggers_per_scenario: per_scenario,
        },
        rows,
    };
    let names: Vec<String> = variants.iter().map(|v| v.name.clone()).collect();
    report.validate(&names, &(0..=ratio).collect::<Vec<_>>())?;
    Ok(report)
}

/// Baseline `none` variant sharing `params`' low-level settings with default
/// scoring.
pub fn baseline_of(params: &DetectorParams) -> DetectorParams {
    DetectorParams {
        mode: CompensationMode::None,
        default_branch: DetectorParams::default().default_branch,
        branches: Vec::new(),
        ..params.clone()
    }
}
