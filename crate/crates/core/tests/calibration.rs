use timely_fusion::calibration::{calibrate, grid_window};
use timely_fusion::config::{CalibrationGrid, ExperimentConfig};
use timely_fusion::detector::{CompensationMode, Dispatch};
use timely_fusion::experiment::{dataset_ap, mean_ap, OffsetDataset};
use timely_fusion::sweep::{eval_scenarios, sweep_datasets};

fn small_grid() -> CalibrationGrid {
    CalibrationGrid {
        radar_weights: vec![0.0, 0.5, 1.0],
        search_radii: vec![0.25, 1.0, 2.0],
        displacement_scales: vec![1.0, 0.0],
    }
}

fn training() -> (ExperimentConfig, Vec<OffsetDataset>) {
    let mut cfg = ExperimentConfig::default();
    cfg.experiment.train_scenarios = 3;
    cfg.calibration = small_grid();
    let sc = eval_scenarios(&cfg, &cfg.train_seeds()).unwrap();
    let (ds, _) = sweep_datasets(&cfg, &sc, &cfg.detector, grid_window(&cfg.calibration, 5)).unwrap();
    (cfg, ds)
}

#[test]
fn calibration_modes() {
    let (cfg, ds) = training();
    let grid = &cfg.calibration;

    let (single, rep) = calibrate(&ds[2..3], CompensationMode::PerOffset, &cfg.detector, grid).unwrap();
    assert_eq!(single.branches.len(), 1);
    assert_eq!(rep.branches.len(), 1);
    assert_eq!(single.branches[0].offset, 2);

    let (po, rep) = calibrate(&ds, CompensationMode::PerOffset, &cfg.detector, grid).unwrap();
    assert_eq!(po.branches.len(), 6);
    assert_eq!(rep.cells, 18);
    for own in &po.branches {
        let data = &ds[own.offset as usize];
        let score = |params| {
            let d = Dispatch {
                mode: CompensationMode::PerOffset,
                branch: Some(own.offset),
                gap_offset: own.offset,
                params,
            };
            mean_ap(&dataset_ap(&data.frames, &d, &po).unwrap())
        };
        let best = score(own.params);
        for other in &po.branches {
            assert!(best >= score(other.params));
        }
    }

    let (mixed, rep) = calibrate(&ds, CompensationMode::Mixed, &cfg.detector, grid).unwrap();
    assert!(mixed.branches.is_empty());
    let b = &rep.branches[0];
    let worst = b.per_offset.iter().map(|o| o.objective).fold(f64::MAX, f64::min);
    let top = b.per_offset.iter().map(|o| o.objective).fold(f64::MIN, f64::max);
    assert!(worst <= b.objective && b.objective <= top);

    let again = calibrate(&ds, CompensationMode::PerOffset, &cfg.detector, grid).unwrap().0;
    assert_eq!(again.to_json().unwrap(), po.to_json().unwrap());
}
