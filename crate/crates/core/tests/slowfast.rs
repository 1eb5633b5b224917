use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use roughhom::fluid::{build_c_operator, mode_covariance, TorusBasis};
use roughhom::grid::UniformGrid;
use roughhom::operators::{LinearOperator, Tensor2};
use roughhom::ou::{replica_rng, standard_normal};
use roughhom::rough::RoughPath;
use roughhom::slowfast::*;
use roughhom::Error;

fn basis(k: usize) -> Arc<TorusBasis<f64>> {
    Arc::new(TorusBasis::new(3, k).unwrap())
}

fn system(b: &Arc<TorusBasis<f64>>) -> SlowFastSystem<f64> {
    let c = build_c_operator(b, 1.0, 0.0, 1.0, None).unwrap();
    let q = mode_covariance(b, &[[1, 0, 0], [0, 1, 0]], 1.0, 0.5).unwrap();
    SlowFastSystem::new(b.clone(), 1.0, c, q).unwrap()
}

fn initial(n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |i, _| scale * ((i as f64 * 0.7).sin() + 0.2) / (1.0 + i as f64).sqrt())
}

#[test]
fn stokes_flow_is_exact_without_noise_and_nonlinearity() {
    let b = basis(1);
    let c = build_c_operator(&b, 1.0, 0.0, 1.0, None).unwrap();
    let mut sys = SlowFastSystem::new(b.clone(), 0.7, c, LinearOperator::zeros(b.n_coords())).unwrap();
    sys.nonlinear = false;
    assert!(sys.active().is_empty());
    let u0 = initial(b.n_coords(), 1.0);
    let grid = UniformGrid::dyadic(1.0, 5).unwrap();
    let tr = integrate_slow_fast(&sys, &u0, &DVector::zeros(b.n_coords()), 0.5, &grid, 0, 0).unwrap();
    for i in [7usize, 32] {
        let t = grid.time(i);
        let exact = DVector::from_fn(u0.len(), |j, _| u0[j] * (sys.stokes()[j] * t).exp());
        assert!((tr.u.column(i) - exact).amax() < 1e-14);
    }
    assert_eq!(tr.r.amax(), 0.0);
}

#[test]
fn zero_driver_limit_matches_deterministic_integration() {
    let b = basis(1);
    let sys = system(&b);
    let c = build_c_operator(&b, 1.0, 0.0, 1.0, None).unwrap();
    let calm = SlowFastSystem::new(b.clone(), 1.0, c, LinearOperator::zeros(b.n_coords())).unwrap();
    let u0 = initial(b.n_coords(), 2.0);
    let level = 6;
    let grid = UniformGrid::dyadic(1.0, level).unwrap();
    let det = integrate_slow_fast(&calm, &u0, &DVector::zeros(b.n_coords()), 0.5, &grid, 0, 0).unwrap();
    let m = sys.active().len();
    let n = 1usize << level;
    let zero = RoughPath::from_steps(1.0, level, &vec![DVector::zeros(m); n], &vec![Tensor2::zeros(m); n]).unwrap();
    let lim = rough_euler_limit(&sys, &u0, &zero, &DVector::zeros(b.n_coords())).unwrap();
    assert!((lim.u - &det.u).amax() < 1e-13);
    assert!(det.u.column(n).norm() < u0.norm());
}

#[test]
fn driver_operators_match_dense_composition() {
    let b = basis(1);
    let sys = system(&b);
    let d = sys.drivers();
    let m = d.dim();
    let n = b.n_coords();
    let mut rng = replica_rng(3, 0);
    let y: DVector<f64> = standard_normal(&mut rng, m);
    let y2 = Tensor2::from_matrix(DMatrix::from_fn(m, m, |_, _| standard_normal::<f64, _>(&mut rng, 1)[0])).unwrap();
    let phi: DVector<f64> = standard_normal(&mut rng, n);
    // dense oracle from the structure constants
    let left: Vec<DMatrix<f64>> = sys
        .active()
        .iter()
        .map(|&k| {
            let mut e = DVector::zeros(n);
            e[k] = 1.0;
            b.structure().left_matrix(&e)
        })
        .collect();
    let mut a1 = DMatrix::zeros(n, n);
    let mut a2 = DMatrix::zeros(n, n);
    for k in 0..m {
        a1 += &left[k] * y[k];
        for l in 0..m {
            a2 += &left[l] * &left[k] * y2.entry(k, l);
        }
    }
    assert!((d.level1_matrix(&y) - &a1).amax() < 1e-13);
    assert!((d.level2_matrix(&y2) - &a2).amax() < 1e-12);
    assert!((d.apply1(&y, &phi) - &a1 * &phi).amax() < 1e-13);
    assert!((d.apply2(&y2, &phi) - &a2 * &phi).amax() < 1e-12);
    let full = b.structure().apply(&d.embed(&y), &phi);
    assert!((d.apply1(&y, &phi) - full).amax() < 1e-13);
    assert_eq!(d.restrict(&d.embed(&y)), y);
    // transport is skew, so the outer-product level-2 term is nonpositive
    let q = d.apply2(&Tensor2::outer(&y, &y), &phi).dot(&phi);
    assert!(q <= 1e-12);
    assert!(d.apply1(&y, &phi).dot(&phi).abs() < 1e-12);
}

#[test]
fn active_set_closes_under_generator_coupling() {
    let b = basis(1);
    let n = b.n_coords();
    let mut q = DMatrix::zeros(n, n);
    q[(3, 3)] = 1.0;
    let mut c = DMatrix::identity(n, n) * -2.0;
    c[(9, 3)] = 0.3;
    c[(20, 9)] = 0.1;
    let act = active_coordinates(&LinearOperator::new(c).unwrap(), &LinearOperator::new(q).unwrap());
    assert_eq!(act, vec![3, 9, 20]);
}

fn short_run(b: &Arc<TorusBasis<f64>>, eps: f64, level: u32) -> (SlowFastSystem<f64>, SlowFastTrajectory<f64>) {
    let sys = system(b);
    let u0 = initial(b.n_coords(), 0.5);
    let grid = UniformGrid::dyadic(1.0, level).unwrap();
    let tr = integrate_slow_fast(&sys, &u0, &DVector::zeros(b.n_coords()), eps, &grid, 5, 1).unwrap();
    (sys, tr)
}

#[test]
fn fast_variable_and_rescaled_integral_are_consistent() {
    let b = basis(1);
    let eps = 0.125;
    let (sys, tr) = short_run(&b, eps, 10);
    let fp = sys.simulate_fast(eps, &tr.grid, 5, 1).unwrap();
    assert_eq!(fp.states, tr.w);
    assert_eq!(fp.increments, tr.brownian);
    // y against the trapezoid rule applied to ε^{-1/2}w
    let h = tr.grid.step();
    let mut y = DVector::zeros(tr.w.nrows());
    let mut worst: f64 = 0.0;
    for i in 0..tr.grid.steps() {
        y += (tr.w.column(i) + tr.w.column(i + 1)) * (0.5 * h / eps.sqrt());
        worst = worst.max((tr.y.column(i + 1) - &y).amax());
    }
    assert!(worst < 2e-2 * tr.y.amax(), "{worst}");
    let st = tr.state(100);
    let v = st.fast_velocity();
    let expect = tr.r.column(100) + sys.drivers().embed(&tr.w.column(100).into_owned()) / eps.sqrt();
    assert!((v.coefficients() - expect).amax() < 1e-14);
    assert!(st.u.divergence_defect() < 1e-12);
}

#[test]
fn remainder_vanishes_on_fine_intervals_and_satisfies_cross_identity() {
    let b = basis(1);
    let (sys, tr) = short_run(&b, 0.25, 6);
    let fine = assemble_driver(&tr.lift(6).unwrap(), sys.drivers()).unwrap();
    let rem = compute_remainder(&tr, &fine).unwrap();
    for s in 0..64 {
        assert!(rem.get(s, s + 1).amax() < 1e-14);
    }
    let coarse = assemble_driver(&tr.lift(3).unwrap(), sys.drivers()).unwrap();
    assert!(coarse.chen_defect() < 1e-12);
    let rem = compute_remainder(&tr, &coarse).unwrap();
    let u = |i: usize| tr.u.column(i * 8).into_owned();
    let mut worst: f64 = 0.0;
    for (s, th, t) in [(0, 1, 2), (0, 3, 8), (2, 5, 7), (1, 4, 6)] {
        let lhs = rem.delta(s, th, t);
        let dsth = u(th) - u(s);
        let sharp = &dsth - coarse.apply1(s, th, &u(s));
        let rhs = coarse.level2(th, t) * &dsth + coarse.level1(th, t) * sharp;
        worst = worst.max((lhs - &rhs).amax() / rhs.amax());
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn remainder_is_superlinear() {
    let b = basis(1);
    let (sys, tr) = short_run(&b, 0.0625, 11);
    let drv = assemble_driver(&tr.lift(6).unwrap(), sys.drivers()).unwrap();
    let sc = remainder_scaling(&compute_remainder(&tr, &drv).unwrap()).unwrap();
    assert!(sc.fit.slope > 1.0 && sc.fit.r_squared >= 0.9, "{sc:?}");
}

#[test]
fn energy_balance_improves_with_resolution() {
    let b = basis(1);
    let mut defects = Vec::new();
    for level in [7u32, 9] {
        let (sys, tr) = short_run(&b, 0.25, level);
        let e = tr.energy(&sys);
        defects.push(e.max_defect / e.initial_energy);
    }
    assert!(defects[0] < 0.05 && defects[1] < defects[0] / 2.0, "{defects:?}");
}

#[test]
fn ito_stokes_oracle_matches_sampling_and_pair_sum() {
    let b = basis(1);
    let sys = system(&b);
    let oracle = sys.ito_stokes_oracle().unwrap();
    assert!(oracle.norm() > 0.1);
    // r̄ = (−C)⁻¹ Σ_{ij} Q∞_{ij} b(e_i, e_j)
    let alg = sys.algebra();
    let d = sys.drivers();
    let n = b.n_coords();
    let mut acc = DVector::zeros(n);
    for (a, &i) in d.active().iter().enumerate() {
        for (c, &j) in d.active().iter().enumerate() {
            let mut ei = DVector::zeros(n);
            let mut ej = DVector::zeros(n);
            ei[i] = 1.0;
            ej[j] = 1.0;
            acc += b.structure().apply(&ei, &ej) * alg.q_inf.get(a, c);
        }
    }
    let pair = sys.c().scale(-1.0).inverse().unwrap().apply(&acc);
    assert!((&pair - &oracle).amax() < 1e-13);
    // Monte Carlo over N(0, Q∞)
    let root = roughhom::operators::psd_sqrt(&alg.q_inf).unwrap();
    let mut rng = replica_rng(17, 0);
    let samples = 100_000;
    let mut mean = DVector::zeros(n);
    let mut sq = DVector::zeros(n);
    for _ in 0..samples {
        let w = d.embed(&root.apply(&standard_normal(&mut rng, d.dim())));
        let x = sys.c().scale(-1.0).inverse().unwrap().apply(&b.structure().apply(&w, &w));
        mean += &x;
        sq += x.component_mul(&x);
    }
    mean /= samples as f64;
    for i in 0..n {
        let var = sq[i] / samples as f64 - mean[i] * mean[i];
        let se = (var / samples as f64).sqrt();
        assert!((mean[i] - oracle[i]).abs() <= 3.0 * se + 1e-12, "coord {i}");
    }
}

#[test]
fn ito_stokes_estimate_converges() {
    let b = basis(1);
    let sys = system(&b);
    let oracle = sys.ito_stokes_oracle().unwrap();
    let grid = UniformGrid::dyadic(1.0, 12).unwrap();
    let reps = 40;
    let mut mean = DVector::zeros(b.n_coords());
    for r in 0..reps {
        mean += sys.ito_stokes_estimate(&sys.simulate_fast(1.0 / 128.0, &grid, 9, r).unwrap()).unwrap();
    }
    mean /= reps as f64;
    let rel = (mean - &oracle).norm() / oracle.norm();
    assert!(rel < 0.1, "{rel}");
}

#[test]
fn rough_euler_converges_under_step_halving() {
    let b = basis(1);
    let (sys, tr) = short_run(&b, 0.25, 13);
    let u0 = tr.u.column(0).into_owned();
    let rbar = sys.ito_stokes_oracle().unwrap();
    let finals: Vec<DVector<f64>> = [4u32, 5, 6, 7]
        .iter()
        .map(|&l| {
            let lift = tr.limit_lift(&sys, l).unwrap();
            rough_euler_limit(&sys, &u0, &lift.path, &rbar).unwrap().final_u()
        })
        .collect();
    let e1 = (&finals[1] - &finals[0]).norm();
    let e2 = (&finals[2] - &finals[1]).norm();
    let e3 = (&finals[3] - &finals[2]).norm();
    let order = ((e1 / e3).log2()) / 2.0;
    assert!(order >= 0.9, "errors {e1:e} {e2:e} {e3:e}, order {order}");
}

#[test]
fn driver_norms_scale_with_the_interval() {
    let b = basis(1);
    let (sys, tr) = short_run(&b, 0.0625, 10);
    let drv = assemble_driver(&tr.limit_lift(&sys, 4).unwrap().path, sys.drivers()).unwrap();
    for m in 0..3 {
        let r = driver_norm_bounds(&drv, 1.0, m, 0.4).unwrap();
        assert!(r.level1_constant.is_finite() && r.level1_constant > 0.0);
        assert!(r.level2_constant.is_finite() && r.level2_constant > 0.0);
        assert!(r.level1_exponent.slope > 0.3, "{r:?}");
        assert!(r.level2_exponent.slope > 0.6, "{r:?}");
    }
}

#[test]
fn rejects_bad_inputs() {
    let b = basis(1);
    let sys = system(&b);
    let n = b.n_coords();
    let grid = UniformGrid::dyadic(1.0, 4).unwrap();
    let z = DVector::zeros(n);
    assert!(matches!(
        integrate_slow_fast(&sys, &z, &z, 1.0 / 8192.0, &grid, 0, 0),
        Err(Error::Input(_))
    ));
    assert!(matches!(
        integrate_slow_fast(&sys, &DVector::zeros(3), &z, 0.5, &grid, 0, 0),
        Err(Error::Shape(_))
    ));
    assert!(mode_covariance(&b, &[[2, 0, 0]], 1.0, 0.0).is_err());
    assert!(mode_covariance(&b, &[[1, 0, 0], [0, 1, 0]], 1.0, 0.9).is_err());
    let lift = RoughPath::from_steps(1.0, 1, &[DVector::zeros(2), DVector::zeros(2)], &[Tensor2::zeros(2), Tensor2::zeros(2)]).unwrap();
    assert!(assemble_driver(&lift, sys.drivers()).is_err());
}

#[test]
fn blow_up_is_reported() {
    let b = basis(1);
    let c = build_c_operator(&b, 1.0, 0.0, 1.0, None).unwrap();
    let sys = SlowFastSystem::new(b.clone(), 1e-3, c, LinearOperator::zeros(b.n_coords())).unwrap();
    let u0 = initial(b.n_coords(), 50.0);
    let grid = UniformGrid::dyadic(4.0, 3).unwrap();
    let res = integrate_slow_fast(&sys, &u0, &DVector::zeros(b.n_coords()), 1.0, &grid, 0, 0);
    assert!(matches!(res, Err(Error::Divergence { .. })), "{res:?}");
}
