use promp_core::estimators::{fit_em_map, EmConfig, NiwPrior};
use promp_core::metrics::{promp_distance, DistanceSpace};
use promp_core::synthlab::{
    adaptation_preset, compare_preset, experiment_adaptation, make_shifted_dataset, panda_preset, preset_setup,
    progress_preset, sample_dataset, AdaptationConfig, PresetSeeds, ShiftDatasetSpec,
};

#[test]
fn presets_are_byte_identical_across_runs() {
    let json = |seed| {
        [
            serde_json::to_string(&compare_preset(seed).unwrap()).unwrap(),
            serde_json::to_string(&progress_preset(seed).unwrap()).unwrap(),
            serde_json::to_string(&adaptation_preset(seed).unwrap()).unwrap(),
            serde_json::to_string(&panda_preset(seed).unwrap()).unwrap(),
        ]
    };
    assert_eq!(json(21), json(21));
    assert_ne!(json(21), json(22));
}

#[test]
fn comparison_table_shape() {
    let table = compare_preset(4).unwrap();
    assert_eq!(table.rows.len(), 6);
    assert!(table.rows[0].d_b.is_none());
    for row in &table.rows[1..] {
        let d_b = row.d_b.unwrap();
        assert!(d_b.is_finite() && d_b >= 0.0, "{row:?}");
        assert!(row.log_kappa.is_finite());
    }
    let kappa = |alg: &str| table.row(alg, "5 Iterations").unwrap().log_kappa;
    assert!(kappa("MAP with EM") < kappa("MLE with EM"));
}

#[test]
fn progress_series_settles() {
    let series = progress_preset(0).unwrap();
    assert_eq!(series.len(), 100);
    assert!(series[0].pc_rotation_deg.is_none());
    // The first update keeps identical DOF blocks, so its top eigenvalue is
    // repeated and the axis undefined.
    assert!(series[1].pc_rotation_deg.is_none());
    assert!(series[2..].iter().all(|m| m.pc_rotation_deg.is_some_and(|r| (0.0..=90.0).contains(&r))));
    assert!(series[99].e_f_sigma < series[2].e_f_sigma);
}

#[test]
fn full_step_size_adapts_less() {
    let (reference, dataset) = preset_setup(2).unwrap();
    let spec = ShiftDatasetSpec::preset(PresetSeeds::from_master(2).shuffle);
    let shifted = make_shifted_dataset(&dataset, &spec).unwrap();
    let fast = AdaptationConfig::preset(&reference.basis, spec.split_count, spec.axis);
    let mut slow = fast.clone();
    slow.sem.beta = 1.0;
    let fast = experiment_adaptation(&shifted, &reference.basis, &fast).unwrap();
    let slow = experiment_adaptation(&shifted, &reference.basis, &slow).unwrap();
    let gap = |r: &promp_core::synthlab::AdaptationReport| (r.sem_endpoint - r.post_shift_mean).abs();
    assert!(gap(&slow) > gap(&fast));
    assert_eq!(fast.sem_endpoint_trace.len(), 100);
    assert_eq!(*fast.sem_endpoint_trace.last().unwrap(), fast.sem_endpoint);
}

#[test]
fn map_distance_to_reference_shrinks_with_data() {
    let sizes = [10, 30, 100, 300];
    let mut per_size: Vec<Vec<f64>> = vec![Vec::new(); sizes.len()];
    for seed in 0..10u64 {
        let (reference, _) = preset_setup(seed).unwrap();
        let prior = NiwPrior::standard(&reference.basis);
        for (i, n) in sizes.iter().enumerate() {
            let demos = sample_dataset(&reference, *n, 100, 1000 + seed).unwrap();
            let fit = fit_em_map(&demos, &reference.basis, &EmConfig::with_iterations(5), &prior).unwrap();
            per_size[i].push(promp_distance(&reference, &fit.params, DistanceSpace::Weight).unwrap());
        }
    }
    let medians: Vec<f64> = per_size
        .into_iter()
        .map(|mut v| {
            v.sort_by(|a, b| a.total_cmp(b));
            0.5 * (v[4] + v[5])
        })
        .collect();
    assert!(medians.windows(2).all(|w| w[1] < w[0]), "{medians:?}");
}
