use std::sync::Arc;

use proptest::prelude::*;

use timely_fusion::config::SensorConfig;
use timely_fusion::detector::{
    detect, detect_instrumented, extract_features, fit_oriented_box, object_confidences, radar_confirmation,
    BranchEntry, BranchParams, CompensationMode, DetectorParams, ShiftWindow,
};
use timely_fusion::eval::oriented_iou;
use timely_fusion::experiment::{label_boxes, offset_setup};
use timely_fusion::geometry::{convex_hull, Point2};
use timely_fusion::pairing::{FusionStream, PairedFrameSet};
use timely_fusion::scene::{OrientedBox, Scenario, VehicleTrack};
use timely_fusion::sensors::{BevGrid, BevParams};
use timely_fusion::timebase::{secs_to_ns, FusionPolicy};

fn one_vehicle(velocity: [f64; 2]) -> Scenario {
    Scenario {
        duration: 3.0,
        bounds: 60.0,
        seed: 0,
        vehicles: vec![VehicleTrack {
            id: 0,
            center: [4.0, 16.0],
            size: [4.5, 2.0],
            yaw: 0.0,
            velocity,
            yaw_rate: 0.0,
        }],
        clutter: vec![],
    }
}

fn paired(scenario: &Scenario, offset: u32, t: f64) -> PairedFrameSet {
    let sensors = SensorConfig::default().noiseless();
    let mut s = FusionStream::new(scenario, offset_setup(&sensors, offset).unwrap(), FusionPolicy::default()).unwrap();
    s.pair_at(secs_to_ns(t)).unwrap()
}

fn per_offset_params() -> DetectorParams {
    DetectorParams {
        mode: CompensationMode::PerOffset,
        branches: (0..=5)
            .map(|o| BranchEntry {
                offset: o,
                params: BranchParams {
                    radar_weight: 0.1 + 0.15 * o as f64,
                    search_radius: 0.25 * (o + 1) as f64,
                    displacement_scale: [1.0, 1.0],
                },
            })
            .collect(),
        ..DetectorParams::default()
    }
}

fn radar_only(mode: CompensationMode) -> DetectorParams {
    DetectorParams {
        mode,
        default_branch: BranchParams {
            radar_weight: 1.0,
            ..BranchParams::default()
        },
        ..DetectorParams::default()
    }
}

#[test]
fn empty_scene_has_no_detections() {
    let sc = Scenario {
        vehicles: vec![],
        ..one_vehicle([0.0, 0.0])
    };
    assert!(detect(&paired(&sc, 0, 1.5), &DetectorParams::default()).unwrap().is_empty());
}

#[test]
fn static_vehicle_detected_tightly() {
    let sc = one_vehicle([0.0, 0.0]);
    let dets = detect(&paired(&sc, 0, 1.5), &DetectorParams::default()).unwrap();
    assert_eq!(dets.len(), 1);
    let gt = sc.ground_truth_at(1.5).unwrap();
    assert!(oriented_iou(&dets[0].bbox, &gt[0]).unwrap() >= 0.8);
}

#[test]
fn misaligned_mover_loses_radar_confirmation() {
    let sc = one_vehicle([10.0, 0.0]);
    let params = radar_only(CompensationMode::None);
    let conf = |offset| {
        let set = paired(&sc, offset, 1.5);
        let gt = label_boxes(&sc, &set.current.lidar, 5).unwrap();
        let dets = detect(&set, &params).unwrap();
        assert_eq!(dets.len(), 1);
        assert!(oriented_iou(&dets[0].bbox, &gt[0]).unwrap() > 0.5);
        dets[0].confidence
    };
    let (aligned, late) = (conf(0), conf(5));
    assert!(late < aligned, "offset 5 {late} vs offset 0 {aligned}");
}

#[test]
fn per_offset_uses_the_branch_of_its_offset() {
    let sc = one_vehicle([8.0, 3.0]);
    let params = per_offset_params();
    for o in 0..=5 {
        let set = paired(&sc, o, 1.75);
        let (dets, d) = detect_instrumented(&set, &params).unwrap();
        assert_eq!(d.branch, Some(o));
        assert_eq!(d.gap_offset, o);
        assert_eq!(d.params, params.branches[o as usize].params);
        let forced = params.forced_dispatch(o).unwrap();
        let f = extract_features(&set, &params, &ShiftWindow::for_dispatch(&forced)).unwrap();
        let mut expect = object_confidences(&f, &forced, &params);
        expect.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(dets.iter().map(|d| d.confidence).collect::<Vec<_>>(), expect);
    }
}

#[test]
fn detection_is_deterministic() {
    let sc = one_vehicle([-6.0, 2.0]);
    let set = paired(&sc, 3, 2.0);
    let p = per_offset_params();
    assert_eq!(detect(&set, &p).unwrap(), detect(&set, &p).unwrap());
}

fn point_sets() -> impl Strategy<Value = Vec<Point2>> {
    prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 3..40)
        .prop_map(|v| v.into_iter().map(|(x, y)| Point2::new(x, y)).collect())
}

fn extent_area(points: &[Point2], axis: Point2) -> f64 {
    let n = Point2::new(-axis.y, axis.x);
    let span = |d: Point2| {
        let (lo, hi) = points
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.dot(d)), hi.max(p.dot(d))));
        hi - lo
    };
    span(axis) * span(n)
}

proptest! {
    #[test]
    fn fit_is_minimal_over_hull_edges(points in point_sets()) {
        let hull = convex_hull(&points);
        prop_assume!(hull.len() >= 3);
        let fit = fit_oriented_box(&points).unwrap();
        let area = fit.area();
        prop_assert!(area <= extent_area(&points, Point2::new(1.0, 0.0)) + 1e-9);
        for i in 0..hull.len() {
            let e = hull[(i + 1) % hull.len()] - hull[i];
            let axis = Point2::new(e.x / e.norm(), e.y / e.norm());
            prop_assert!(area <= extent_area(&points, axis) + 1e-9);
        }
        for p in &points {
            prop_assert!(fit.contains(*p, 1e-7));
        }
    }

    #[test]
    fn more_radar_under_the_box_never_lowers_confirmation(
        cx in -8.0..8.0f64, cy in -8.0..8.0f64, yaw in -3.2..3.2f64,
        dx in -2.0..2.0f64, dy in -2.0..2.0f64,
        base in prop::collection::vec(0.0..1.0f32, 64),
        boost in 0.0..2.0f32,
    ) {
        let b = OrientedBox::new(cx, cy, 4.5, 2.0, yaw).unwrap();
        let mut grid = BevGrid::zeros(&BevParams { cell_size: 0.5, half_extent: 12.0 }).unwrap();
        for (i, v) in grid.data.iter_mut().enumerate() {
            *v = base[i % base.len()];
        }
        let before = radar_confirmation(&b, &grid, (dx, dy), 0.5, 1.0);
        let moved = b.translated(dx, dy);
        let n = grid.cells_per_side;
        for iy in 0..n {
            for ix in 0..n {
                if moved.contains(grid.cell_center(ix, iy), 0.5) {
                    grid.data[iy * n + ix] += boost;
                }
            }
        }
        prop_assert!(radar_confirmation(&b, &grid, (dx, dy), 0.5, 1.0) >= before);
    }

    #[test]
    fn stronger_radar_never_lowers_confidence(gain in 0.0..3.0f32, stride in 1usize..7, offset in 0u32..6) {
        let sc = one_vehicle([9.0, -2.0]);
        let set = paired(&sc, offset, 1.5);
        let mut hot = set.clone();
        let mut radar = (*set.current.radar).clone();
        for v in radar.intensity.iter_mut().step_by(stride) {
            *v += gain;
        }
        hot.current.radar = Arc::new(radar);
        let p = per_offset_params();
        let d = p.dispatch(offset);
        let w = ShiftWindow::for_dispatch(&d);
        let a = object_confidences(&extract_features(&set, &p, &w).unwrap(), &d, &p);
        let b = object_confidences(&extract_features(&hot, &p, &w).unwrap(), &d, &p);
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(y >= x);
        }
    }
}
