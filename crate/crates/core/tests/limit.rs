use nalgebra::DMatrix;
use roughhom::grid::UniformGrid;
use roughhom::limit::*;
use roughhom::operators::{GeneratorAlgebra, LinearOperator, Tensor2};
use roughhom::ou::{replica_rng, standard_normal};
use roughhom::rough::{holder_seminorm, SeminormMode};

fn generator() -> (LinearOperator<f64>, LinearOperator<f64>) {
    let c = LinearOperator::from_row_major(2, &[-1.0, 0.6, -0.2, -2.0]).unwrap();
    let q = LinearOperator::from_row_major(2, &[1.0, 0.4, 0.4, 0.8]).unwrap();
    (c, q)
}

/// `Q^{1/2}ΔW` for `n` steps on `[0, t_end]`.
fn increments(q: &LinearOperator<f64>, n: usize, t_end: f64, seed: u64, replica: u64) -> DMatrix<f64> {
    let root = roughhom::operators::psd_sqrt(q).unwrap();
    let mut rng = replica_rng(seed, replica);
    let sd = (t_end / n as f64).sqrt();
    let mut m = DMatrix::zeros(q.dim(), n);
    for k in 0..n {
        m.set_column(k, &(root.matrix() * standard_normal::<f64, _>(&mut rng, q.dim()) * sd));
    }
    m
}

#[test]
fn zero_path_gives_pure_drift() {
    let (c, q) = generator();
    let alg = GeneratorAlgebra::new(&c, &q).unwrap();
    let zero = DMatrix::zeros(2, 32);
    let ito = limit_lift(&zero, 2.0, &c, &q, 3, LiftForm::Ito).unwrap();
    let strat = limit_lift(&zero, 2.0, &c, &q, 3, LiftForm::Stratonovich).unwrap();
    assert_eq!(ito.path.level1.max_norm(), 0.0);
    for (i, j) in [(0, 8), (2, 5), (7, 8)] {
        let dt = 2.0 * (j - i) as f64 / 8.0;
        assert!((ito.path.level2.get(i, j) - &alg.drift.scale(dt)).norm() < 1e-14);
    }
    let diff = strat_consistency_check(&ito, &strat).unwrap();
    let expected = 2.0 * alg.drift.symmetric_part().norm();
    assert!((diff - expected).abs() < 1e-13);
}

#[test]
fn identity_generator_has_classical_corrector() {
    let c = LinearOperator::<f64>::identity(3).scale(-1.0);
    let q = LinearOperator::identity(3);
    let alg = GeneratorAlgebra::new(&c, &q).unwrap();
    assert!((alg.drift.as_matrix() - DMatrix::identity(3, 3) * 0.5).amax() < 1e-14);
    assert_eq!(alg.correction.norm(), 0.0);
}

#[test]
fn ito_level_two_has_mean_drift() {
    let (c, q) = generator();
    let alg = GeneratorAlgebra::new(&c, &q).unwrap();
    let n = 2000;
    let t = 1.0;
    let samples: Vec<DMatrix<f64>> = (0..n)
        .map(|r| {
            let inc = increments(&q, 64, t, 7, r);
            limit_lift_with(&alg, &inc, t, 0, LiftForm::Ito).unwrap().path.level2.get(0, 1).as_matrix().clone()
        })
        .collect();
    let mean = samples.iter().fold(DMatrix::zeros(2, 2), |a, b| a + b) / n as f64;
    let var = samples.iter().fold(DMatrix::zeros(2, 2), |a, b| {
        let d = b - &mean;
        a + d.component_mul(&d)
    }) / (n - 1) as f64;
    let target = alg.drift.as_matrix() * t;
    for k in 0..2 {
        for l in 0..2 {
            let se = (var[(k, l)] / n as f64).sqrt();
            assert!((mean[(k, l)] - target[(k, l)]).abs() < 3.5 * se, "({k},{l})");
        }
    }
}

#[test]
fn scalar_ito_strat_gap_shrinks_at_half_order() {
    let c = LinearOperator::<f64>::identity(1).scale(-1.0);
    let q = LinearOperator::identity(1);
    let alg = GeneratorAlgebra::new(&c, &q).unwrap();
    let reps = 400;
    let mut rms = Vec::new();
    for level in [4u32, 6, 8, 10] {
        let n = 1usize << level;
        let mut acc = 0.0;
        for r in 0..reps {
            let inc = increments(&q, n, 1.0, 11, r);
            let ito = limit_lift_with(&alg, &inc, 1.0, 0, LiftForm::Ito).unwrap();
            let strat = limit_lift_with(&alg, &inc, 1.0, 0, LiftForm::Stratonovich).unwrap();
            let gap = strat_consistency_check(&ito, &strat).unwrap();
            let qv: f64 = inc.iter().map(|x| x * x).sum();
            assert!((gap - 0.5 * (qv - 1.0).abs()).abs() < 1e-12);
            acc += gap * gap;
        }
        rms.push((acc / reps as f64).sqrt());
    }
    let slope = (rms[0] / rms[3]).log2() / 6.0;
    assert!((slope - 0.5).abs() < 0.1, "slope {slope}");
}

#[test]
fn ito_form_becomes_geometric_and_strat_form_is_geometric() {
    let (c, q) = generator();
    let alg = GeneratorAlgebra::new(&c, &q).unwrap();
    let reps = 200;
    let mut rms = Vec::new();
    for level in [4u32, 8] {
        let n = 1usize << level;
        let mut acc = 0.0;
        for r in 0..reps {
            let inc = increments(&q, n, 1.0, 12, r);
            let strat = limit_lift_with(&alg, &inc, 1.0, 2, LiftForm::Stratonovich).unwrap();
            assert!(strat.path.geometric_defect() < 1e-13);
            let ito = limit_lift_with(&alg, &inc, 1.0, 2, LiftForm::Ito).unwrap();
            let d = ito.path.geometric_defect();
            acc += d * d;
        }
        rms.push((acc / reps as f64).sqrt());
    }
    assert!(rms[1] < rms[0] / 3.0, "{rms:?}");
}

#[test]
fn holder_norms_stable_under_refinement() {
    let (c, q) = generator();
    let alg = GeneratorAlgebra::new(&c, &q).unwrap();
    let inc = increments(&q, 1 << 10, 1.0, 13, 0);
    let mut h1 = Vec::new();
    let mut h2 = Vec::new();
    for level in [4u32, 6, 8] {
        let lift = limit_lift_with(&alg, &inc, 1.0, level, LiftForm::Ito).unwrap();
        h1.push(holder_seminorm(&lift.path.level1, 0.4, SeminormMode::Holder));
        h2.push(holder_seminorm(&lift.path.level2, 0.8, SeminormMode::Holder));
    }
    for h in [&h1, &h2] {
        assert!(h.iter().all(|v| v.is_finite()));
        assert!(h[2] / h[0] < 2.0, "{h:?}");
    }
}

#[test]
fn mismatched_lifts_rejected_and_json_envelope() {
    let (c, q) = generator();
    let a = limit_lift(&increments(&q, 16, 1.0, 1, 0), 1.0, &c, &q, 2, LiftForm::Ito).unwrap();
    let b = limit_lift(&increments(&q, 16, 1.0, 1, 1), 1.0, &c, &q, 2, LiftForm::Stratonovich).unwrap();
    assert!(strat_consistency_check(&a, &b).is_err());
    assert!(strat_consistency_check(&a, &a).is_err());
    let j = a.to_json_value();
    assert_eq!(j["form"], "ito");
    assert_eq!(j["drift_d"]["dim"], 2);
    let m: Tensor2<f64> = serde_json::from_value(j["correction_m"].clone()).unwrap();
    assert_eq!(m, a.correction);
    let _ = UniformGrid::<f64>::dyadic(1.0, 2).unwrap();
}
