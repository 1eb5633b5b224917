use nalgebra::{DMatrix, DVector};
use roughhom::grid::UniformGrid;
use roughhom::operators::{matrix_exponential, solve_lyapunov, LinearOperator};
use roughhom::ou::*;

fn neg_identity(d: usize) -> LinearOperator<f64> {
    LinearOperator::identity(d).scale(-1.0)
}

fn sample_cov(samples: &[DVector<f64>]) -> DMatrix<f64> {
    let d = samples[0].len();
    let mut acc = DMatrix::zeros(d, d);
    for s in samples {
        acc += s * s.transpose();
    }
    acc / samples.len() as f64
}

fn test_generator() -> (LinearOperator<f64>, LinearOperator<f64>) {
    let c = LinearOperator::from_row_major(2, &[-1.0, 0.6, -0.2, -2.0]).unwrap();
    let q = LinearOperator::from_row_major(2, &[1.0, 0.4, 0.4, 0.8]).unwrap();
    (c, q)
}

#[test]
fn covariance_reaches_stationary_value() {
    let c = neg_identity(2);
    let grid = UniformGrid::new(1.0, 20).unwrap();
    let n = 10_000;
    let finals: Vec<_> = (0..n)
        .map(|r| {
            let noise = NoiseConfig::new(LinearOperator::identity(2), 17, r).unwrap();
            simulate_fast_path(&c, &noise, 0.05, &grid, None).unwrap().state(20)
        })
        .collect();
    let cov = sample_cov(&finals);
    // Var of a sample variance of N(0, σ²) is 2σ⁴/n.
    let se = 0.5 * (2.0 / n as f64).sqrt();
    assert!((cov[(0, 0)] - 0.5).abs() < 3.0 * se, "{}", cov[(0, 0)]);
    assert!((cov[(1, 1)] - 0.5).abs() < 3.0 * se);
    assert!(cov[(0, 1)].abs() < 3.0 * 0.5 / (n as f64).sqrt());
}

#[test]
fn same_seed_gives_identical_paths_and_coupled_increments() {
    let (c, q) = test_generator();
    let grid = UniformGrid::new(1.0, 64).unwrap();
    let noise = NoiseConfig::new(q, 5, 3).unwrap();
    let a = simulate_fast_path(&c, &noise, 0.1, &grid, None).unwrap();
    let b = simulate_fast_path(&c, &noise, 0.1, &grid, None).unwrap();
    assert_eq!(a, b);
    let other = simulate_fast_path(&c, &noise, 0.01, &grid, None).unwrap();
    assert_eq!(a.increments, other.increments);
    assert_ne!(a.states, other.states);
    let next = NoiseConfig { replica: 4, ..noise };
    assert_ne!(simulate_fast_path(&c, &next, 0.1, &grid, None).unwrap().increments, a.increments);
}

#[test]
fn step_mean_and_variance_match_scalar_closed_form() {
    let c = neg_identity(1);
    let q = LinearOperator::identity(1);
    let (eps, h) = (0.5, 0.3);
    let s = OuStepper::new(&c, &q, eps, h).unwrap();
    assert!((s.decay()[(0, 0)] - (-h / eps).exp()).abs() < 1e-12);
    let var = 0.5 * (1.0 - (-2.0 * h / eps).exp());
    assert!((s.step_covariance()[(0, 0)] - var).abs() < 1e-12);
    let tiny = OuStepper::new(&c, &q, eps, 1e-12).unwrap();
    assert!(tiny.step_covariance()[(0, 0)] < 1e-11);
}

/// `ε^{−1/2}∫₀^h e^{C(h−s)/ε} ds · Q` by composite Simpson.
fn cross_covariance_oracle(c: &LinearOperator<f64>, q: &LinearOperator<f64>, eps: f64, h: f64) -> DMatrix<f64> {
    let n = 2000;
    let dh = h / n as f64;
    let mut acc = DMatrix::zeros(c.dim(), c.dim());
    for i in 0..=n {
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += matrix_exponential(c, (h - i as f64 * dh) / eps).unwrap().matrix() * w;
    }
    acc * (dh / 3.0) * q.matrix() / eps.sqrt()
}

#[test]
fn joint_law_of_state_and_increment() {
    let (c, q) = test_generator();
    let (eps, h) = (0.2, 0.1);
    let stepper = OuStepper::new(&c, &q, eps, h).unwrap();
    let oracle = cross_covariance_oracle(&c, &q, eps, h);
    let n = 40_000;
    let mut rng = replica_rng(21, 0);
    let zero = DVector::zeros(2);
    let mut cross = DMatrix::zeros(2, 2);
    let mut inc_cov = DMatrix::zeros(2, 2);
    for _ in 0..n {
        let (w, db) = stepper.step(&zero, &mut rng);
        cross += &w * db.transpose();
        inc_cov += &db * db.transpose();
    }
    cross /= n as f64;
    inc_cov /= n as f64;
    let scale = oracle.amax();
    assert!((&cross - &oracle).amax() < 4.0 * scale / (n as f64).sqrt() * 2.0);
    assert!((&inc_cov - q.matrix() * h).amax() < 4.0 * h / (n as f64).sqrt() * 2.0);
}

#[test]
fn stationarity_from_invariant_start() {
    let (c, q) = test_generator();
    let q_inf = solve_lyapunov(&c, &q).unwrap();
    let sampler = InvariantSampler::new(&c, &q).unwrap();
    let grid = UniformGrid::new(0.5, 4).unwrap();
    let n = 8000;
    let mut per_time = vec![Vec::with_capacity(n); 5];
    for r in 0..n {
        let noise = NoiseConfig::new(q.clone(), 33, r as u64).unwrap();
        let mut rng = replica_rng(34, r as u64);
        let w0 = sampler.sample(&mut rng);
        let path = simulate_fast_path(&c, &noise, 0.3, &grid, Some(&w0)).unwrap();
        for (i, slot) in per_time.iter_mut().enumerate() {
            slot.push(path.state(i));
        }
    }
    let tol = 4.0 * q_inf.matrix().amax() * (2.0 / n as f64).sqrt();
    for samples in &per_time {
        assert!((sample_cov(samples) - q_inf.matrix()).amax() < tol);
    }
}

#[test]
fn two_half_steps_match_one_full_step_in_law() {
    let (c, q) = test_generator();
    let (eps, h) = (0.25, 0.2);
    let full = OuStepper::new(&c, &q, eps, h).unwrap();
    let half = OuStepper::new(&c, &q, eps, h / 2.0).unwrap();
    let start = DVector::from_vec(vec![1.0, -0.5]);
    let n = 20_000;
    let mut rng = replica_rng(40, 0);
    let (mut m1, mut m2) = (DVector::zeros(2), DVector::zeros(2));
    let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let x = full.step(&start, &mut rng).0;
        let y = half.step(&half.step(&start, &mut rng).0, &mut rng).0;
        m1 += &x;
        m2 += &y;
        a.push(x);
        b.push(y);
    }
    m1 /= n as f64;
    m2 /= n as f64;
    let centre = |v: &[DVector<f64>], m: &DVector<f64>| v.iter().map(|x| x - m).collect::<Vec<_>>();
    let (ca, cb) = (sample_cov(&centre(&a, &m1)), sample_cov(&centre(&b, &m2)));
    let sd = full.step_covariance().amax().sqrt();
    assert!((&m1 - &m2).amax() < 5.0 * sd * (2.0 / n as f64).sqrt());
    assert!((&ca - &cb).amax() < 5.0 * sd * sd * (4.0 / n as f64).sqrt());
    assert!((&ca - full.step_covariance()).amax() < 5.0 * sd * sd * (2.0 / n as f64).sqrt());
}

#[test]
fn invariant_sampling_cases() {
    let c = neg_identity(3);
    let mut rng = replica_rng(1, 0);
    assert_eq!(sample_invariant(&c, &LinearOperator::zeros(3), &mut rng).unwrap().amax(), 0.0);
    let n = 20_000;
    for scale in [1.0, 3.0] {
        let q = LinearOperator::identity(3).scale(scale);
        let sampler = InvariantSampler::new(&c, &q).unwrap();
        let samples: Vec<_> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
        let cov = sample_cov(&samples);
        let target = 0.5 * scale;
        assert!((cov - DMatrix::identity(3, 3) * target).amax() < 4.0 * target * (2.0 / n as f64).sqrt());
    }
}

#[test]
fn second_moment_bounded_across_epsilon() {
    let (c, q) = test_generator();
    let grid = UniformGrid::new(1.0, 128).unwrap();
    let bound = solve_lyapunov(&c, &q).unwrap().matrix().trace();
    for eps in [0.5, 0.125, 0.03125, 0.0078125] {
        let n = 400;
        let mut sup: f64 = 0.0;
        let mut acc = vec![0.0; 129];
        for r in 0..n {
            let noise = NoiseConfig::new(q.clone(), 50, r).unwrap();
            let p = simulate_fast_path(&c, &noise, eps, &grid, None).unwrap();
            for (i, a) in acc.iter_mut().enumerate() {
                *a += p.states.column(i).norm_squared() / n as f64;
            }
        }
        for a in acc {
            sup = sup.max(a);
        }
        assert!(sup < 1.5 * bound, "eps {eps}: {sup} vs {bound}");
    }
}
