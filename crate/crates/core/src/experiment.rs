//! Offset-controlled streams and labeled feature datasets shared by
//! calibration and the offset sweep.

use rayon::prelude::*;

use crate::config::SensorConfig;
use crate::detector::{extract_features, object_confidences, DetectorParams, Dispatch, FrameFeatures, ShiftWindow};
use crate::error::{Error, Result};
use crate::eval::{average_precision_matrix, oriented_iou, APResult, MatrixFrame, IOU_THRESHOLDS};
use crate::pairing::{ConcatLidarFrame, FusionStream, StreamSetup};
use crate::scene::{OrientedBox, Scenario};
use crate::timebase::{ns_to_secs, FusionPolicy, Nanos};

/// Latest-available pairing on the configured schedules.
pub fn stream_setup(sensors: &SensorConfig) -> Result<StreamSetup> {
    Ok(StreamSetup {
        lidar: sensors.lidar_schedule()?,
        radar: sensors.radar_schedule()?,
        lidar_params: sensors.lidar.clone(),
        radar_params: sensors.radar.clone(),
        radar_lag: None,
    })
}

/// Schedules realizing a constant `offset` at every Radar-period trigger:
/// the Radar phase trails the Lidar phase by `offset` Lidar periods and each
/// window takes the sweep completed that many periods before it. Radar sweep
/// indices at a given trigger do not depend on the offset.
pub fn offset_setup(sensors: &SensorConfig, offset: u32) -> Result<StreamSetup> {
    let ratio = sensors.ratio()?;
    if offset > ratio {
        return Err(Error::Parameter(format!("offset {offset} exceeds ratio {ratio}")));
    }
    let lidar = sensors.lidar_schedule()?;
    let radar = sensors.radar_schedule()?;
    if radar.period_ns() != ratio as i64 * lidar.period_ns() {
        return Err(Error::Parameter(format!(
            "offset sweeps need a Radar period of exactly {ratio} Lidar periods"
        )));
    }
    Ok(StreamSetup {
        radar: radar.with_phase_ns(lidar.phase_ns() - offset as i64 * lidar.period_ns()),
        lidar,
        lidar_params: sensors.lidar.clone(),
        radar_params: sensors.radar.clone(),
        radar_lag: Some(offset),
    })
}

/// Shared triggers for every offset and policy: Lidar completions one Radar
/// period apart, from the latest warm-up bound before `horizon_ns`.
pub fn offset_triggers(sensors: &SensorConfig, policies: &[FusionPolicy], horizon_ns: Nanos) -> Result<Vec<Nanos>> {
    let ratio = sensors.ratio()?;
    let mut warm = 0;
    for policy in policies {
        for o in 0..=ratio {
            warm = warm.max(offset_setup(sensors, o)?.warmup_ns(policy)?);
        }
    }
    let lidar = sensors.lidar_schedule()?;
    let p_r = sensors.radar_schedule()?.period_ns();
    let k0 = (warm - lidar.phase_ns() + p_r - 1).div_euclid(p_r);
    let triggers: Vec<Nanos> = (k0..)
        .map(|k| lidar.phase_ns() + k * p_r)
        .take_while(|t| *t < horizon_ns)
        .collect();
    if triggers.is_empty() {
        return Err(Error::StreamNotWarm(format!(
            "horizon {}s ends before warm-up {}s",
            ns_to_secs(horizon_ns),
            ns_to_secs(warm)
        )));
    }
    Ok(triggers)
}

/// Vehicle boxes at the instant the concatenated frame saw them: the
/// reference-sweep capture time of each vehicle's bearing. Vehicles with fewer
/// than `min_visible` reference-sweep points inside their box are dropped.
pub fn label_boxes(scenario: &Scenario, frame: &ConcatLidarFrame, min_visible: usize) -> Result<Vec<OrientedBox>> {
    let mid = frame.t_end_ns - frame.radar_period_ns / 2;
    let mut out = Vec::new();
    for v in &scenario.vehicles {
        let mut b = v.box_at(ns_to_secs(mid));
        for _ in 0..2 {
            let t = ns_to_secs(frame.reference_capture_ns(b.center().bearing_deg()));
            scenario.check_time(t)?;
            b = v.box_at(t);
        }
        let slot = frame.reference_slot(b.center().bearing_deg());
        let seen = frame
            .points
            .iter()
            .zip(&frame.point_source)
            .filter(|(p, s)| **s as usize == slot && b.contains(p.position(), 0.2))
            .count();
        if seen >= min_visible {
            out.push(b);
        }
    }
    Ok(out)
}

/// Detector features of one fusion input with its labels and the IoU of
/// every object against every label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub trigger_ns: Nanos,
    pub features: FrameFeatures,
    pub ground_truth: Vec<OrientedBox>,
    /// `iou[object][label]`.
    pub iou: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetDataset {
    pub offset: u32,
    /// Scenario-major, trigger order within a scenario.
    pub frames: Vec<LabeledFrame>,
}

impl OffsetDataset {
    pub fn n_ground_truth(&self) -> usize {
        self.frames.iter().map(|f| f.ground_truth.len()).sum()
    }
}

pub struct DatasetPlan<'a> {
    pub sensors: &'a SensorConfig,
    pub policy: &'a FusionPolicy,
    pub detector: &'a DetectorParams,
    pub window: ShiftWindow,
    pub triggers: &'a [Nanos],
    pub min_visible: usize,
}

pub fn labeled_frames(scenario: &Scenario, offset: u32, plan: &DatasetPlan) -> Result<Vec<LabeledFrame>> {
    let setup = offset_setup(plan.sensors, offset)?;
    let mut stream = FusionStream::new(scenario, setup, plan.policy.clone())?;
    let mut out = Vec::with_capacity(plan.triggers.len());
    for &t in plan.triggers {
        let set = stream.pair_at(t)?;
        debug_assert_eq!(set.offset, offset);
        let ground_truth = label_boxes(scenario, &set.current.lidar, plan.min_visible)?;
        let features = extract_features(&set, plan.detector, &plan.window)?;
        let iou = features
            .objects
            .iter()
            .map(|o| ground_truth.iter().map(|g| oriented_iou(&o.bbox, g)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        out.push(LabeledFrame {
            trigger_ns: t,
            features,
            ground_truth,
            iou,
        });
    }
    Ok(out)
}

/// One dataset per offset in `offsets`; scenarios run in parallel and are
/// reassembled in scenario order.
pub fn offset_datasets(scenarios: &[Scenario], offsets: &[u32], plan: &DatasetPlan) -> Result<Vec<OffsetDataset>> {
    let jobs: Vec<(usize, u32)> = (0..scenarios.len())
        .flat_map(|s| offsets.iter().map(move |&o| (s, o)))
        .collect();
    let results: Vec<Result<Vec<LabeledFrame>>> = jobs
        .par_iter()
        .map(|&(s, o)| labeled_frames(&scenarios[s], o, plan))
        .collect();
    let mut sets: Vec<OffsetDataset> = offsets
        .iter()
        .map(|&offset| OffsetDataset {
            offset,
            frames: Vec::new(),
        })
        .collect();
    for ((_, o), r) in jobs.iter().zip(results) {
        let k = offsets.iter().position(|x| x == o).unwrap();
        sets[k].frames.extend(r?);
    }
    Ok(sets)
}

/// AP at every threshold in `IOU_THRESHOLDS` with every frame scored under
/// `dispatch`.
pub fn dataset_ap(frames: &[LabeledFrame], dispatch: &Dispatch, params: &DetectorParams) -> Result<Vec<APResult>> {
    let conf: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| object_confidences(&f.features, dispatch, params))
        .collect();
    let mf: Vec<MatrixFrame> = frames
        .iter()
        .zip(&conf)
        .map(|(f, c)| MatrixFrame {
            confidences: c,
            iou: &f.iou,
            n_gt: f.ground_truth.len(),
        })
        .collect();
    IOU_THRESHOLDS.iter().map(|&t| average_precision_matrix(&mf, t)).collect()
}

/// Mean AP over the thresholds.
pub fn mean_ap(aps: &[APResult]) -> f64 {
    aps.iter().map(|a| a.ap).sum::<f64>() / aps.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::VehicleTrack;
    use crate::timebase::secs_to_ns;

    #[test]
    fn offset_setups_realize_their_offset() {
        let sensors = SensorConfig::default();
        let policy = FusionPolicy::default();
        let triggers = offset_triggers(&sensors, &[policy.clone()], secs_to_ns(3.0)).unwrap();
        assert_eq!(triggers[0], secs_to_ns(1.5));
        assert_eq!(*triggers.last().unwrap(), secs_to_ns(2.75));
        let sc = Scenario {
            duration: 3.0,
            bounds: 60.0,
            seed: 3,
            vehicles: vec![],
            clutter: vec![],
        };
        let mut radar_index = Vec::new();
        for o in 0..=5 {
            let mut s = FusionStream::new(&sc, offset_setup(&sensors, o).unwrap(), policy.clone()).unwrap();
            for &t in &triggers {
                let set = s.pair_at(t).unwrap();
                assert_eq!(set.offset, o);
                assert_eq!(
                    crate::timebase::compute_offset(t, &offset_setup(&sensors, o).unwrap().radar, &sensors.lidar_schedule().unwrap())
                        .unwrap()
                        % 5,
                    o % 5
                );
                assert_eq!(t - set.current.radar.t_end_ns, o as i64 * secs_to_ns(0.05));
                radar_index.push((t, set.current.radar.sweep_index));
            }
        }
        for w in radar_index.chunks(triggers.len()).collect::<Vec<_>>().windows(2) {
            assert_eq!(w[0], w[1]);
        }
    }

    #[test]
    fn labels_follow_capture_time() {
        let sensors = SensorConfig::default();
        let sc = Scenario {
            duration: 3.0,
            bounds: 60.0,
            seed: 3,
            vehicles: vec![VehicleTrack {
                id: 0,
                center: [5.0, 15.0],
                size: [4.5, 2.0],
                yaw: 0.0,
                velocity: [10.0, 0.0],
                yaw_rate: 0.0,
            }],
            clutter: vec![],
        };
        let policy = FusionPolicy {
            num_history: 0,
            ..Default::default()
        };
        let mut s = FusionStream::new(&sc, offset_setup(&sensors, 0).unwrap(), policy).unwrap();
        let set = s.pair_at(secs_to_ns(1.0)).unwrap();
        let gt = label_boxes(&sc, &set.current.lidar, 5).unwrap();
        assert_eq!(gt.len(), 1);
        let slot = set.current.lidar.reference_slot(gt[0].center().bearing_deg());
        for (i, p) in set.current.lidar.points.iter().enumerate() {
            if set.current.lidar.point_source[i] as usize == slot {
                assert!(gt[0].contains(p.position(), 0.15), "{p:?}");
            }
        }
    }
}
