use qrstream::mc::{coverage_experiment, homogeneity_experiment, write_records_csv, HomogeneityDesign, McDesign, Noise};
use qrstream::{CriticalValues, InitSpec};

#[test]
fn burn_in_and_smoothed_init_give_similar_coverage() {
    let smoothed = McDesign::new(100_000, 10, 0.5, 1000, 41);
    let mut burn = smoothed.clone();
    burn.init = InitSpec::BurnIn { count: 10_000 };
    let a = coverage_experiment(&smoothed).unwrap().summary;
    let b = coverage_experiment(&burn).unwrap().summary;
    assert!(!a.invalid && !b.invalid);
    assert!((a.coverage - b.coverage).abs() <= 0.02, "smoothed {} burn-in {}", a.coverage, b.coverage);
}

#[test]
fn experiment_is_reproducible_and_writes_records() {
    let design = McDesign::new(5_000, 3, 0.25, 6, 12);
    let a = coverage_experiment(&design).unwrap();
    let b = coverage_experiment(&design).unwrap();
    assert_eq!(a.summary.coverage, b.summary.coverage);
    assert_eq!(a.summary.mean_ci_length, b.summary.mean_ci_length);
    assert!(a.summary.low_precision);
    let file = tempfile::NamedTempFile::new().unwrap();
    write_records_csv(file.path(), &a.records).unwrap();
    let text = std::fs::read_to_string(file.path()).unwrap();
    assert_eq!(text.lines().count(), 7);
}

fn homogeneity(noise: Noise, coords: Vec<usize>, seed: u64) -> f64 {
    let design = HomogeneityDesign {
        n: 100_000,
        d: 3,
        taus: [0.3, 0.7],
        reps: 100,
        seed,
        coords,
        level: 0.95,
        noise,
        init: InitSpec::default(),
    };
    let s = homogeneity_experiment(&design, &CriticalValues::bundled()).unwrap();
    assert_eq!(s.failed, 0);
    s.rejection_rate
}

#[test]
fn equal_slopes_are_mostly_accepted() {
    let rate = homogeneity(Noise::Homoskedastic, vec![1, 2, 3], 51);
    assert!(rate <= 0.10, "rejection rate {rate}");
}

#[test]
fn heteroskedastic_design_has_power() {
    let null = homogeneity(Noise::Homoskedastic, vec![1], 61);
    let alt = homogeneity(Noise::Heteroskedastic, vec![1], 61);
    assert!(alt > null + 0.5, "null {null} alternative {alt}");
}
