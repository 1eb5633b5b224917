use roughhom::experiment::*;
use roughhom::operators::LinearOperator;
use roughhom::Error;

fn small_lift() -> ExperimentConfig {
    ExperimentConfig {
        replicas: 4,
        fine_level: 10,
        epsilons: vec![0.25, 0.125],
        ..ExperimentConfig::example(ExperimentId::LiftConvergence)
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = small_lift();
    c.epsilons = vec![0.1, 0.2];
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    c.epsilons = vec![];
    assert!(c.validate().is_err());
    c.epsilons = vec![1.5];
    assert!(c.validate().is_err());
    let mut c = small_lift();
    c.replicas = 0;
    assert!(c.validate().is_err());
    let mut c = small_lift();
    c.alpha = 0.5;
    assert!(c.validate().is_err());
    let mut c = small_lift();
    c.operators = ExperimentConfig::example(ExperimentId::ItoStokes).operators;
    assert!(c.validate().is_err());
    let mut c = small_lift();
    c.operators = OperatorSpec::Matrix {
        c: LinearOperator::identity(2),
        q: LinearOperator::identity(2),
    };
    assert!(run_experiment(&c).is_err());
    let mut c = ExperimentConfig::example(ExperimentId::ErgodicRate);
    c.epsilons = vec![1.0, 0.3];
    assert!(c.validate().is_err());
    assert!(ExperimentConfig::from_json("{\"experiment\": \"lift-convergence\"}").is_err());
}

#[test]
fn unknown_target_metric_is_a_config_error() {
    let mut c = small_lift();
    c.targets = vec![Target::new("nonexistent", 0.0, 0.0, Comparison::Within)];
    assert!(matches!(run_experiment(&c), Err(Error::Config(_))));
}

#[test]
fn reruns_are_byte_identical_and_round_trip() {
    let c = ExperimentConfig {
        epsilons: vec![0.25],
        replicas: 1,
        targets: vec![],
        ..small_lift()
    };
    let a = run_experiment(&c).unwrap();
    let b = run_experiment(&c).unwrap();
    let ja = emit_report(&a, ReportFormat::Json).unwrap();
    assert_eq!(ja, emit_report(&b, ReportFormat::Json).unwrap());
    let back: RateReport = serde_json::from_str(&ja).unwrap();
    assert_eq!(back, a);
    let csv = emit_report(&a, ReportFormat::Csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l.split(',').count() == 4));
    assert!(a.fit.is_none());
    assert_eq!(a.version, VERSION);
    assert_eq!(a.config_hash, c.hash());
    let mut other = c.clone();
    other.seed += 1;
    assert_ne!(other.hash(), c.hash());
}

#[test]
fn commuting_pair_has_no_correction() {
    let r = run_experiment(&ExperimentConfig::example(ExperimentId::CorrectionM)).unwrap();
    assert!(r.pass);
    assert!(r.metric("correction_norm").unwrap() <= 1e-12);
    assert!(r.metric("lyapunov_residual").unwrap() <= 1e-12);
}

#[test]
fn worked_two_by_two_correction() {
    let rho = 0.3;
    let mut c = ExperimentConfig::example(ExperimentId::CorrectionM);
    c.operators = OperatorSpec::Matrix {
        c: LinearOperator::from_row_major(2, &[-1.0, 0.0, 0.0, -2.0]).unwrap(),
        q: LinearOperator::from_row_major(2, &[1.0, rho, rho, 1.0]).unwrap(),
    };
    c.targets.clear();
    let r = run_experiment(&c).unwrap();
    // (−C)⁻¹Q∞ with Q∞ = [[1/2, ρ/3], [ρ/3, 1/4]]: antisymmetric part ±ρ/12
    assert!((r.metric("correction_operator_01").unwrap().abs() - rho / 12.0).abs() < 1e-12);
}

#[test]
fn write_report_to_unwritable_path_fails() {
    let r = run_experiment(&ExperimentConfig::example(ExperimentId::CorrectionM)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, "x").unwrap();
    assert!(matches!(write_report(&r, &file, "r"), Err(Error::Io(_))));
    let (j, c) = write_report(&r, dir.path(), "r").unwrap();
    assert!(j.exists() && c.exists());
}

#[test]
fn level_one_functional_runs() {
    let c = ExperimentConfig {
        observable: Observable::Level1,
        coarse_level: 4,
        targets: vec![],
        ..small_lift()
    };
    let r = run_experiment(&c).unwrap();
    assert_eq!(r.points.len(), 2);
    assert!(r.points.iter().all(|p| p.mean_error > 0.0 && p.stderr >= 0.0));
}
