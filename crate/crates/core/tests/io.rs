use promp_core::incremental::{StepwiseConfig, StepwiseState};
use promp_core::io::{load_params, read_dataset, save_params, write_dataset, ProMPFile};
use promp_core::model::sample_trajectory;
use promp_core::synthlab::{build_reference_promp, generate_seed_trajectories, sample_dataset, ReferenceSpec};
use promp_core::{BasisConfig, Error, ProMPParams};

fn reference() -> ProMPParams {
    let spec = ReferenceSpec::preset(8);
    build_reference_promp(&generate_seed_trajectories(&spec).unwrap(), &spec).unwrap()
}

#[test]
fn parameter_file_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/ref.json");
    let params = reference();
    save_params(&path, &params).unwrap();
    assert_eq!(load_params(&path).unwrap(), params);
}

#[test]
fn dataset_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let demos = sample_dataset(&reference(), 12, 40, 3).unwrap();
    write_dataset(dir.path(), &demos).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), demos);
}

#[test]
fn empty_or_missing_directories_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Data(_))));
    assert!(matches!(read_dataset(&dir.path().join("missing")), Err(Error::Data(_))));
    assert!(matches!(load_params(&dir.path().join("missing.json")), Err(Error::Data(_))));
}

#[test]
fn resume_through_a_file_matches_an_uninterrupted_run() {
    let basis = BasisConfig::new(6, 2).unwrap();
    let mut source = ProMPParams::standard(basis.clone());
    source.sigma_y *= 0.01;
    let demos: Vec<_> = (0..40).map(|s| sample_trajectory(&source, 30, s).unwrap()).collect();
    let cfg = StepwiseConfig::new(&basis, 0.65).with_delta_min(0.05);

    let mut straight = StepwiseState::init(&cfg, basis.clone()).unwrap();
    demos.iter().for_each(|d| {
        straight.add_demonstration(&cfg, d).unwrap();
    });

    let mut first = StepwiseState::init(&cfg, basis).unwrap();
    demos[..17].iter().for_each(|d| {
        first.add_demonstration(&cfg, d).unwrap();
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    ProMPFile::from_state(&first, &cfg).save(&path).unwrap();

    let (mut resumed, resumed_cfg) = ProMPFile::load(&path).unwrap().to_state().unwrap().unwrap();
    assert_eq!(resumed, first);
    demos[17..].iter().for_each(|d| {
        resumed.add_demonstration(&resumed_cfg, d).unwrap();
    });
    assert_eq!(resumed, straight);
}

#[test]
fn parameters_only_file_has_no_state() {
    let file = ProMPFile::from_params(&reference());
    assert!(file.to_state().unwrap().is_none());
}
