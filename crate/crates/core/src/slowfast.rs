//! Galerkin slow-fast fluid system, its rough drivers and the limit equation.
//!
//! The fast noise lives on the *active* coordinates: the support of `Q`
//! closed under the sparsity of `C`. Lifts and driver operators are kept in
//! that subspace, where `b(e_k, ·)` is a sparse matrix per coordinate.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fluid::{sobolev_weights, stokes_diagonal, TorusBasis, VelocityField};
use crate::grid::UniformGrid;
use crate::limit::{limit_lift_with, LiftForm, LimitLift};
use crate::operators::{clamped_eigen, validate_generator, GeneratorAlgebra, LinearOperator, Tensor2};
use crate::ou::{replica_rng, seek_step, simulate_fast_path, FastPath, NoiseConfig, OuStepper};
use crate::rough::{canonical_lift, RoughPath, TwoIndexMap};
use crate::scalar::Real;
use crate::stats::{loglog, LinearFit};

/// Smallest ε accepted by the slow-fast integrator.
pub const MIN_EPSILON: f64 = 1.0 / 4096.0;

/// Blow-up threshold relative to the initial norm.
pub const BLOWUP_FACTOR: f64 = 1e3;

/// Sparse square matrix as `(row, col, value)` triples.
#[derive(Debug, Clone)]
pub struct SparseOperator<T: Real> {
    n: usize,
    entries: Vec<(usize, usize, T)>,
}

impl<T: Real> SparseOperator<T> {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// `out += s·Lφ`.
    pub fn apply_add(&self, phi: &DVector<T>, s: T, out: &mut DVector<T>) {
        for &(r, c, v) in &self.entries {
            out[r] += s * v * phi[c];
        }
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }
}

/// The operators `L_k = b(e_k, ·)` for the active coordinates `k`.
#[derive(Debug, Clone)]
pub struct AdvectionDrivers<T: Real> {
    basis: Arc<TorusBasis<T>>,
    active: Vec<usize>,
    ops: Vec<SparseOperator<T>>,
}

impl<T: Real> AdvectionDrivers<T> {
    pub fn new(basis: Arc<TorusBasis<T>>, active: Vec<usize>) -> Result<Self> {
        let n = basis.n_coords();
        if active.windows(2).any(|w| w[0] >= w[1]) || active.last().is_some_and(|&k| k >= n) {
            return Err(Error::Input(format!(
                "active coordinates must be increasing and below {n}"
            )));
        }
        let st = basis.structure();
        let ops = active
            .iter()
            .map(|&k| {
                let mut entries = Vec::new();
                for j in 0..n {
                    for &(l, g) in st.row(k, j) {
                        entries.push((l, j, g));
                    }
                }
                SparseOperator { n, entries }
            })
            .collect();
        Ok(Self { basis, active, ops })
    }

    /// Drivers on every coordinate.
    pub fn full(basis: Arc<TorusBasis<T>>) -> Result<Self> {
        let n = basis.n_coords();
        Self::new(basis, (0..n).collect())
    }

    pub fn basis(&self) -> &Arc<TorusBasis<T>> {
        &self.basis
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// Number of active coordinates.
    pub fn dim(&self) -> usize {
        self.active.len()
    }

    pub fn n_coords(&self) -> usize {
        self.basis.n_coords()
    }

    pub fn operator(&self, k: usize) -> &SparseOperator<T> {
        &self.ops[k]
    }

    pub fn embed(&self, reduced: &DVector<T>) -> DVector<T> {
        let mut full = DVector::zeros(self.n_coords());
        for (k, &i) in self.active.iter().enumerate() {
            full[i] = reduced[k];
        }
        full
    }

    pub fn restrict(&self, full: &DVector<T>) -> DVector<T> {
        DVector::from_iterator(self.dim(), self.active.iter().map(|&i| full[i]))
    }

    fn check_level1(&self, y: &DVector<T>) {
        assert_eq!(y.len(), self.dim(), "level-1 value has wrong dimension");
    }

    /// `𝔸¹(y)φ = b(y, φ)`.
    pub fn apply1(&self, y: &DVector<T>, phi: &DVector<T>) -> DVector<T> {
        self.check_level1(y);
        let mut out = DVector::zeros(self.n_coords());
        for (k, op) in self.ops.iter().enumerate() {
            if y[k] != T::zero() {
                op.apply_add(phi, y[k], &mut out);
            }
        }
        out
    }

    /// `𝔸²(Y)φ = Σ_{k,l} Y_{kl} b(e_l, b(e_k, φ))`.
    pub fn apply2(&self, y2: &Tensor2<T>, phi: &DVector<T>) -> DVector<T> {
        let m = self.dim();
        assert_eq!(y2.dim(), m, "level-2 value has wrong dimension");
        let n = self.n_coords();
        let first: Vec<DVector<T>> = self
            .ops
            .iter()
            .map(|op| {
                let mut v = DVector::zeros(n);
                op.apply_add(phi, T::one(), &mut v);
                v
            })
            .collect();
        let mut out = DVector::zeros(n);
        for l in 0..m {
            let mut z = DVector::zeros(n);
            for (k, v) in first.iter().enumerate() {
                let c = y2.entry(k, l);
                if c != T::zero() {
                    z.axpy(c, v, T::one());
                }
            }
            self.ops[l].apply_add(&z, T::one(), &mut out);
        }
        out
    }

    pub fn level1_matrix(&self, y: &DVector<T>) -> DMatrix<T> {
        self.check_level1(y);
        let mut out = DMatrix::zeros(self.n_coords(), self.n_coords());
        for (k, op) in self.ops.iter().enumerate() {
            for &(r, c, v) in &op.entries {
                out[(r, c)] += y[k] * v;
            }
        }
        out
    }

    pub fn level2_matrix(&self, y2: &Tensor2<T>) -> DMatrix<T> {
        let m = self.dim();
        assert_eq!(y2.dim(), m, "level-2 value has wrong dimension");
        let n = self.n_coords();
        let mut out = DMatrix::zeros(n, n);
        let mut z = DMatrix::zeros(n, n);
        for l in 0..m {
            z.fill(T::zero());
            for (k, op) in self.ops.iter().enumerate() {
                let c = y2.entry(k, l);
                if c == T::zero() {
                    continue;
                }
                for &(r, col, v) in &op.entries {
                    z[(r, col)] += c * v;
                }
            }
            for &(r, j, v) in &self.ops[l].entries {
                for col in 0..n {
                    out[(r, col)] += v * z[(j, col)];
                }
            }
        }
        out
    }
}

/// Support of `Q` closed under the sparsity pattern of `C`.
pub fn active_coordinates<T: Real>(c: &LinearOperator<T>, q: &LinearOperator<T>) -> Vec<usize> {
    let n = c.dim();
    let mut on: Vec<bool> = (0..n).map(|i| (0..n).any(|j| q.get(i, j) != T::zero())).collect();
    let mut stack: Vec<usize> = (0..n).filter(|&i| on[i]).collect();
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if !on[j] && c.get(j, i) != T::zero() {
                on[j] = true;
                stack.push(j);
            }
        }
    }
    (0..n).filter(|&i| on[i]).collect()
}

/// Driver operators built from a lift on the active coordinates.
#[derive(Debug, Clone)]
pub struct DriverPair<T: Real> {
    drivers: Arc<AdvectionDrivers<T>>,
    lift: RoughPath<T>,
}

pub fn assemble_driver<T: Real>(lift: &RoughPath<T>, drivers: &Arc<AdvectionDrivers<T>>) -> Result<DriverPair<T>> {
    if lift.dim() != drivers.dim() {
        return Err(Error::Shape(format!(
            "lift has dimension {}, drivers act through {} coordinates",
            lift.dim(),
            drivers.dim()
        )));
    }
    Ok(DriverPair {
        drivers: drivers.clone(),
        lift: lift.clone(),
    })
}

impl<T: Real> DriverPair<T> {
    pub fn lift(&self) -> &RoughPath<T> {
        &self.lift
    }

    pub fn drivers(&self) -> &AdvectionDrivers<T> {
        &self.drivers
    }

    pub fn steps(&self) -> usize {
        self.lift.steps()
    }

    pub fn level1(&self, i: usize, j: usize) -> DMatrix<T> {
        self.drivers.level1_matrix(self.lift.level1.get(i, j))
    }

    pub fn level2(&self, i: usize, j: usize) -> DMatrix<T> {
        self.drivers.level2_matrix(self.lift.level2.get(i, j))
    }

    pub fn apply1(&self, i: usize, j: usize, phi: &DVector<T>) -> DVector<T> {
        self.drivers.apply1(self.lift.level1.get(i, j), phi)
    }

    pub fn apply2(&self, i: usize, j: usize, phi: &DVector<T>) -> DVector<T> {
        self.drivers.apply2(self.lift.level2.get(i, j), phi)
    }

    /// Largest relative Chen defect of the operator pair over all triples:
    /// `𝔸¹_{st} = 𝔸¹_{sθ} + 𝔸¹_{θt}` and
    /// `𝔸²_{st} = 𝔸²_{sθ} + 𝔸²_{θt} + 𝔸¹_{θt}𝔸¹_{sθ}`. Cubic in the step
    /// count and in the number of coordinates.
    pub fn chen_defect(&self) -> T {
        let n = self.steps();
        let a1: Vec<Vec<DMatrix<T>>> = (0..=n).map(|i| (i..=n).map(|j| self.level1(i, j)).collect()).collect();
        let a2: Vec<Vec<DMatrix<T>>> = (0..=n).map(|i| (i..=n).map(|j| self.level2(i, j)).collect()).collect();
        let g1 = |i: usize, j: usize| &a1[i][j - i];
        let g2 = |i: usize, j: usize| &a2[i][j - i];
        let mut worst = T::zero();
        for s in 0..n {
            for r in s + 1..n {
                for t in r + 1..=n {
                    let d1 = g1(s, t) - g1(s, r) - g1(r, t);
                    let d2 = g2(s, t) - g2(s, r) - g2(r, t) - g1(r, t) * g1(s, r);
                    let scale1 = g1(s, t).norm().max(T::default_epsilon());
                    let scale2 = g2(s, t).norm().max(T::default_epsilon());
                    worst = worst.max(d1.norm() / scale1).max(d2.norm() / scale2);
                }
            }
        }
        worst
    }
}

/// Sobolev operator-norm bounds of the drivers for one index `m`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriverNormBound {
    pub sobolev_index: u32,
    pub alpha: f64,
    /// Smallest `c` with `‖𝔸¹_{st}‖_{H^{-m}→H^{-m-1}} ≤ c|t − s|^α` on the grid.
    pub level1_constant: f64,
    /// Smallest `c` with `‖𝔸²_{st}‖_{H^{-m}→H^{-m-2}} ≤ c|t − s|^{2α}` on the grid.
    pub level2_constant: f64,
    /// Log-log slopes of the norms against `|t − s|`.
    pub level1_exponent: LinearFit,
    pub level2_exponent: LinearFit,
}

fn weighted_norm<T: Real>(m: &DMatrix<T>, left: &DVector<T>, right: &DVector<T>) -> f64 {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| (m[(r, c)] * left[r] * right[c]).as_f64())
        .singular_values()
        .max()
}

/// Operator norms `H^{-m} → H^{-m-1}` (level 1) and `H^{-m} → H^{-m-2}`
/// (level 2) over every pair of the lift grid, with Sobolev weights
/// `(ν|k|²)^{s/2}`.
pub fn driver_norm_bounds<T: Real>(pair: &DriverPair<T>, nu: T, m: u32, alpha: T) -> Result<DriverNormBound> {
    let basis = pair.drivers.basis();
    let half = |s: f64| sobolev_weights(basis, T::lit(s / 2.0), nu);
    let mf = m as f64;
    let right = half(-mf);
    let left1 = half(-(mf + 1.0));
    let left2 = half(-(mf + 2.0));
    // ‖M‖_{H^{-m}→H^{-m-k}} = ‖Λ^{-m-k} M Λ^{m}‖₂ with Λ^{s} the weights above
    let right = right.map(|x| T::one() / x);
    let n = pair.steps();
    let a = alpha.as_f64();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..=n).map(move |j| (i, j))).collect();
    let norms: Vec<(f64, f64, f64)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let dt = (pair.lift.level1.time(j) - pair.lift.level1.time(i)).as_f64();
            let x1 = weighted_norm(&pair.level1(i, j), &left1, &right);
            let x2 = weighted_norm(&pair.level2(i, j), &left2, &right);
            (dt, x1, x2)
        })
        .collect();
    let (mut c1, mut c2) = (0.0f64, 0.0f64);
    for &(dt, x1, x2) in &norms {
        c1 = c1.max(x1 / dt.powf(a));
        c2 = c2.max(x2 / dt.powf(2.0 * a));
    }
    let gaps: Vec<f64> = norms.iter().map(|x| x.0).collect();
    let n1: Vec<f64> = norms.iter().map(|x| x.1.max(f64::MIN_POSITIVE)).collect();
    let n2: Vec<f64> = norms.iter().map(|x| x.2.max(f64::MIN_POSITIVE)).collect();
    Ok(DriverNormBound {
        sobolev_index: m,
        alpha: a,
        level1_constant: c1,
        level2_constant: c2,
        level1_exponent: loglog(&gaps, &n1)?,
        level2_exponent: loglog(&gaps, &n2)?,
    })
}

/// Galerkin fluid with a fast Ornstein-Uhlenbeck forcing.
#[derive(Debug, Clone)]
pub struct SlowFastSystem<T: Real> {
    basis: Arc<TorusBasis<T>>,
    nu: T,
    c: LinearOperator<T>,
    q: LinearOperator<T>,
    algebra: GeneratorAlgebra<T>,
    neg_c_inv: DMatrix<T>,
    stokes: DVector<T>,
    drivers: Arc<AdvectionDrivers<T>>,
    /// When false, `b(u, u)`, `b(r, u)` and the corrector's `b` term are
    /// dropped; transport by the fast field is kept.
    pub nonlinear: bool,
}

impl<T: Real> SlowFastSystem<T> {
    pub fn new(basis: Arc<TorusBasis<T>>, nu: T, c: LinearOperator<T>, q: LinearOperator<T>) -> Result<Self> {
        let n = basis.n_coords();
        if c.dim() != n || q.dim() != n {
            return Err(Error::Shape(format!(
                "operators are {}x{} and {}x{}, basis has {n} coordinates",
                c.dim(),
                c.dim(),
                q.dim(),
                q.dim()
            )));
        }
        if !(nu > T::zero()) {
            return Err(Error::Input(format!("viscosity must be positive, got {nu}")));
        }
        validate_generator(&c, &q)?;
        let active = active_coordinates(&c, &q);
        let sub = |op: &LinearOperator<T>| {
            let m = active.len();
            let mat = DMatrix::from_fn(m, m, |a, b| op.get(active[a], active[b]));
            LinearOperator::new(mat)
        };
        let algebra = if active.is_empty() {
            GeneratorAlgebra::new(&LinearOperator::identity(1).scale(-T::one()), &LinearOperator::zeros(1))?
        } else {
            GeneratorAlgebra::new(&sub(&c)?, &sub(&q)?)?
        };
        let neg_c_inv = c.scale(-T::one()).inverse()?.into_matrix();
        let stokes = stokes_diagonal(&basis, nu);
        let drivers = Arc::new(AdvectionDrivers::new(basis.clone(), active)?);
        Ok(Self {
            basis,
            nu,
            c,
            q,
            algebra,
            neg_c_inv,
            stokes,
            drivers,
            nonlinear: true,
        })
    }

    pub fn basis(&self) -> &Arc<TorusBasis<T>> {
        &self.basis
    }

    pub fn nu(&self) -> T {
        self.nu
    }

    pub fn c(&self) -> &LinearOperator<T> {
        &self.c
    }

    pub fn q(&self) -> &LinearOperator<T> {
        &self.q
    }

    pub fn active(&self) -> &[usize] {
        self.drivers.active()
    }

    /// Generator algebra on the active coordinates.
    pub fn algebra(&self) -> &GeneratorAlgebra<T> {
        &self.algebra
    }

    pub fn drivers(&self) -> &Arc<AdvectionDrivers<T>> {
        &self.drivers
    }

    /// Diagonal of `A`.
    pub fn stokes(&self) -> &DVector<T> {
        &self.stokes
    }

    pub fn n_coords(&self) -> usize {
        self.basis.n_coords()
    }

    fn b(&self, u: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        self.basis.structure().apply(u, v)
    }

    fn check_field(&self, v: &DVector<T>, what: &str) -> Result<()> {
        if v.len() != self.n_coords() {
            return Err(Error::Shape(format!(
                "{what} has {} coefficients, basis has {}",
                v.len(),
                self.n_coords()
            )));
        }
        if v.iter().any(|x| !x.finite()) {
            return Err(Error::Input(format!("{what} is not finite")));
        }
        Ok(())
    }

    /// Fast path on the active coordinates, identical to the one driving
    /// [`integrate_slow_fast`] with the same seed and replica.
    pub fn simulate_fast(&self, epsilon: T, grid: &UniformGrid<T>, seed: u64, replica: u64) -> Result<FastPath<T>> {
        let noise = NoiseConfig::new(self.algebra.q.clone(), seed, replica)?;
        simulate_fast_path(&self.algebra.c, &noise, epsilon, grid, None)
    }

    /// `r̄ = Σ_j λ_j (−C)⁻¹ b(f_j, f_j)` with `Q∞ = Σ_j λ_j f_j ⊗ f_j`.
    pub fn ito_stokes_oracle(&self) -> Result<DVector<T>> {
        let (vals, vecs) = clamped_eigen(&self.algebra.q_inf)?;
        let mut acc = DVector::zeros(self.n_coords());
        if self.active().is_empty() || !self.nonlinear {
            return Ok(acc);
        }
        for (j, &lam) in vals.iter().enumerate() {
            if lam == T::zero() {
                continue;
            }
            let f = self.drivers.embed(&vecs.column(j).into_owned());
            acc.axpy(lam, &self.b(&f, &f), T::one());
        }
        Ok(&self.neg_c_inv * acc)
    }

    /// Trapezoid time average of `(−C)⁻¹ b(w, w)` along a fast path.
    pub fn ito_stokes_estimate(&self, path: &FastPath<T>) -> Result<DVector<T>> {
        if path.dim() != self.drivers.dim() {
            return Err(Error::Shape(format!(
                "fast path has dimension {}, system has {} active coordinates",
                path.dim(),
                self.drivers.dim()
            )));
        }
        let n = path.grid.steps();
        let mut acc = DVector::zeros(self.n_coords());
        if !self.nonlinear {
            return Ok(acc);
        }
        for i in 0..=n {
            let w = self.drivers.embed(&path.state(i));
            let weight = if i == 0 || i == n { T::lit(0.5) } else { T::one() };
            acc.axpy(weight, &self.b(&w, &w), T::one());
        }
        Ok(&self.neg_c_inv * acc / T::from_usize_lossy(n))
    }
}

/// Snapshot of the coupled state.
#[derive(Debug, Clone)]
pub struct FastSlowState<T: Real> {
    pub time: T,
    pub epsilon: T,
    pub u: VelocityField<T>,
    pub w: VelocityField<T>,
    pub r: VelocityField<T>,
}

impl<T: Real> FastSlowState<T> {
    /// `v = ε^{−1/2}w + r`.
    pub fn fast_velocity(&self) -> VelocityField<T> {
        self.r
            .add_scaled(&self.w, T::one() / self.epsilon.sqrt())
            .expect("fields share a basis")
    }
}

/// Energy balance `‖u_n‖² + 2h Σ_{m ≤ n} ‖(−A)^{1/2}u_m‖² − ‖u_0‖²`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnergyReport {
    /// Largest positive value of the balance (violation of the inequality).
    pub max_violation: f64,
    /// Largest absolute value of the balance.
    pub max_defect: f64,
    pub initial_energy: f64,
}

/// Fine-grid solution of the coupled system.
#[derive(Debug, Clone)]
pub struct SlowFastTrajectory<T: Real> {
    pub epsilon: T,
    pub grid: UniformGrid<T>,
    /// Slow velocity, one column per grid point.
    pub u: DMatrix<T>,
    /// Corrector, one column per grid point.
    pub r: DMatrix<T>,
    /// Fast variable on the active coordinates.
    pub w: DMatrix<T>,
    /// Rescaled integral `y = ε^{−1/2}∫w` on the active coordinates.
    pub y: DMatrix<T>,
    /// `Q^{1/2}ΔW` per step on the active coordinates.
    pub brownian: DMatrix<T>,
    /// Drift increments `δμ` per step.
    pub drift: DMatrix<T>,
    basis: Arc<TorusBasis<T>>,
    active: Vec<usize>,
}

impl<T: Real> SlowFastTrajectory<T> {
    pub fn state(&self, i: usize) -> FastSlowState<T> {
        let field = |v: DVector<T>| VelocityField::new(self.basis.clone(), v).expect("length matches basis");
        let mut w = DVector::zeros(self.basis.n_coords());
        for (k, &c) in self.active.iter().enumerate() {
            w[c] = self.w[(k, i)];
        }
        FastSlowState {
            time: self.grid.time(i),
            epsilon: self.epsilon,
            u: field(self.u.column(i).into_owned()),
            w: field(w),
            r: field(self.r.column(i).into_owned()),
        }
    }

    pub fn final_u(&self) -> DVector<T> {
        self.u.column(self.grid.steps()).into_owned()
    }

    /// Canonical lift of `y` at a coarse dyadic level.
    pub fn lift(&self, coarse_level: u32) -> Result<RoughPath<T>> {
        canonical_lift(&self.y, self.grid.t_end(), coarse_level)
    }

    /// Itô limit lift of the recorded Brownian path.
    pub fn limit_lift(&self, system: &SlowFastSystem<T>, coarse_level: u32) -> Result<LimitLift<T>> {
        limit_lift_with(&system.algebra, &self.brownian, self.grid.t_end(), coarse_level, LiftForm::Ito)
    }

    pub fn energy(&self, system: &SlowFastSystem<T>) -> EnergyReport {
        let h = self.grid.step().as_f64();
        let e = |i: usize| self.u.column(i).norm_squared().as_f64();
        let dissipation = |i: usize| {
            self.u
                .column(i)
                .iter()
                .zip(system.stokes.iter())
                .map(|(x, a)| -(a.as_f64()) * x.as_f64().powi(2))
                .sum::<f64>()
        };
        let e0 = e(0);
        let (mut acc, mut viol, mut worst) = (0.0f64, 0.0f64, 0.0f64);
        for i in 1..=self.grid.steps() {
            acc += 2.0 * h * dissipation(i);
            let d = e(i) + acc - e0;
            viol = viol.max(d);
            worst = worst.max(d.abs());
        }
        EnergyReport {
            max_violation: viol,
            max_defect: worst,
            initial_energy: e0,
        }
    }
}

enum CorrectorStep<T: Real> {
    Diagonal { decay: DVector<T>, phi: DVector<T> },
    Dense { decay: DMatrix<T>, phi: DMatrix<T> },
}

impl<T: Real> CorrectorStep<T> {
    /// `e^{Lh}` and `∫₀^h e^{Ls} ds` for `L = ε⁻¹C + A`.
    fn new(system: &SlowFastSystem<T>, epsilon: T, h: T) -> Result<Self> {
        let n = system.n_coords();
        let l = system.c.matrix() / epsilon + DMatrix::from_diagonal(&system.stokes);
        let off_diag = (0..n).any(|i| (0..n).any(|j| i != j && l[(i, j)] != T::zero()));
        if !off_diag {
            let (decay, phi) = exp_euler_diag(&l.diagonal(), h);
            return Ok(Self::Diagonal { decay, phi });
        }
        let mut aug = DMatrix::zeros(2 * n, 2 * n);
        aug.view_mut((0, 0), (n, n)).copy_from(&(l * h));
        for i in 0..n {
            aug[(i, n + i)] = h;
        }
        let e = aug.exp();
        if e.iter().any(|x| !x.finite()) {
            return Err(Error::Factorization("corrector propagator is not finite".into()));
        }
        Ok(Self::Dense {
            decay: e.view((0, 0), (n, n)).into_owned(),
            phi: e.view((0, n), (n, n)).into_owned(),
        })
    }

    fn apply(&self, r: &DVector<T>, f: &DVector<T>) -> DVector<T> {
        match self {
            Self::Diagonal { decay, phi } => decay.component_mul(r) + phi.component_mul(f),
            Self::Dense { decay, phi } => decay * r + phi * f,
        }
    }
}

/// Precomputed propagators for one `(system, ε, h)`; reusable across
/// replicas.
pub struct SlowFastIntegrator<'a, T: Real> {
    system: &'a SlowFastSystem<T>,
    epsilon: T,
    grid: UniformGrid<T>,
    ou: Option<OuStepper<T>>,
    u_decay: DVector<T>,
    u_phi: DVector<T>,
    corrector: CorrectorStep<T>,
}

fn exp_euler_diag<T: Real>(lam: &DVector<T>, h: T) -> (DVector<T>, DVector<T>) {
    let decay = lam.map(|x| (x * h).exp());
    let phi = lam.zip_map(&decay, |x, e| if x == T::zero() { h } else { (e - T::one()) / x });
    (decay, phi)
}

impl<'a, T: Real> SlowFastIntegrator<'a, T> {
    pub fn new(system: &'a SlowFastSystem<T>, epsilon: T, grid: &UniformGrid<T>) -> Result<Self> {
        if !(epsilon >= T::lit(MIN_EPSILON) && epsilon <= T::one()) {
            return Err(Error::Input(format!(
                "ε must lie in [2^-12, 1], got {epsilon}"
            )));
        }
        let h = grid.step();
        let ou = if system.active().is_empty() {
            None
        } else {
            Some(OuStepper::new(&system.algebra.c, &system.algebra.q, epsilon, h)?)
        };
        let (u_decay, u_phi) = exp_euler_diag(&system.stokes, h);
        Ok(Self {
            system,
            epsilon,
            grid: *grid,
            ou,
            u_decay,
            u_phi,
            corrector: CorrectorStep::new(system, epsilon, h)?,
        })
    }

    /// One replica from `(u₀, r₀)` with `w₀ = 0`.
    pub fn run(&self, u0: &DVector<T>, r0: &DVector<T>, seed: u64, replica: u64) -> Result<SlowFastTrajectory<T>> {
        let sys = self.system;
        sys.check_field(u0, "initial velocity")?;
        sys.check_field(r0, "initial corrector")?;
        let n = sys.n_coords();
        let m = sys.drivers.dim();
        let steps = self.grid.steps();
        let eps_half = self.epsilon.sqrt();
        let inv_half = T::one() / eps_half;
        let limit = T::lit(BLOWUP_FACTOR) * u0.norm();

        let mut traj = SlowFastTrajectory {
            epsilon: self.epsilon,
            grid: self.grid,
            u: DMatrix::zeros(n, steps + 1),
            r: DMatrix::zeros(n, steps + 1),
            w: DMatrix::zeros(m, steps + 1),
            y: DMatrix::zeros(m, steps + 1),
            brownian: DMatrix::zeros(m, steps),
            drift: DMatrix::zeros(n, steps),
            basis: sys.basis.clone(),
            active: sys.active().to_vec(),
        };
        let mut u = u0.clone();
        let mut r = r0.clone();
        let mut w = DVector::zeros(m);
        let mut y = DVector::zeros(m);
        traj.u.set_column(0, &u);
        traj.r.set_column(0, &r);
        let mut rng = replica_rng(seed, replica);
        let neg_c_inv = sys.algebra.neg_c_inv.matrix();

        for i in 0..steps {
            // fast variable: exact step, and y from y_t = B_t − ε^{1/2}(−C)⁻¹(w_t − w₀)
            let (w_next, db) = match &self.ou {
                Some(ou) => {
                    seek_step(&mut rng, i);
                    ou.step(&w, &mut rng)
                }
                None => (DVector::zeros(0), DVector::zeros(0)),
            };
            let dy = if m == 0 {
                DVector::zeros(0)
            } else {
                neg_c_inv * (&db - (&w_next - &w) * eps_half)
            };

            // slow variable: second-order transport, then exponential step for A
            let a1 = sys.drivers.apply1(&dy, &u);
            let a2 = sys.drivers.apply1(&dy, &a1);
            let transport = &a1 + &a2 * T::lit(0.5);
            let forcing = if sys.nonlinear {
                sys.b(&(&u + &r), &u)
            } else {
                DVector::zeros(n)
            };
            let u_next = self.u_decay.component_mul(&(&u + &transport)) + self.u_phi.component_mul(&forcing);
            let du = &u_next - &u - &transport;

            // corrector: exponential Euler for L = ε⁻¹C + A
            let w_full = sys.drivers.embed(&w) * inv_half;
            let mut f = sys.stokes.component_mul(&w_full);
            if sys.nonlinear {
                let v = &w_full + &r;
                sys.basis.structure().apply_into(&(&u + &v), &v, &mut f);
            }
            let r_next = self.corrector.apply(&r, &f);

            let norm = u_next.norm();
            if !norm.finite() || (limit > T::zero() && norm > limit) || r_next.iter().any(|x| !x.finite()) {
                return Err(Error::Divergence {
                    time: self.grid.time(i + 1).as_f64(),
                    norm: norm.as_f64(),
                    limit: limit.as_f64(),
                });
            }
            u = u_next;
            r = r_next;
            w = w_next;
            y += &dy;
            traj.u.set_column(i + 1, &u);
            traj.r.set_column(i + 1, &r);
            traj.w.set_column(i + 1, &w);
            traj.y.set_column(i + 1, &y);
            traj.brownian.set_column(i, &db);
            traj.drift.set_column(i, &du);
        }
        Ok(traj)
    }
}

/// Integrates the coupled system on `grid` from `(u₀, r₀)`, `w₀ = 0`.
pub fn integrate_slow_fast<T: Real>(
    system: &SlowFastSystem<T>,
    u0: &DVector<T>,
    r0: &DVector<T>,
    epsilon: T,
    grid: &UniformGrid<T>,
    seed: u64,
    replica: u64,
) -> Result<SlowFastTrajectory<T>> {
    SlowFastIntegrator::new(system, epsilon, grid)?.run(u0, r0, seed, replica)
}

/// `u♮_{st} = δu_{st} − δμ_{st} − 𝔸¹_{st}u_s − 𝔸²_{st}u_s` on the grid of
/// the driver.
pub fn compute_remainder<T: Real>(
    traj: &SlowFastTrajectory<T>,
    driver: &DriverPair<T>,
) -> Result<TwoIndexMap<T, DVector<T>>> {
    let coarse = driver.lift.level1.grid();
    let ratio = traj.grid.refinement_of(&coarse)?;
    let mu = crate::ou::cumulative(&traj.drift);
    TwoIndexMap::from_fn(coarse.t_end(), driver.lift.level1.level(), |i, j| {
        let (a, b) = (i * ratio, j * ratio);
        let us: DVector<T> = traj.u.column(a).into_owned();
        let mut x: DVector<T> = traj.u.column(b) - &us - (mu.column(b) - mu.column(a));
        if i != j {
            x -= driver.apply1(i, j, &us);
            x -= driver.apply2(i, j, &us);
        }
        x
    })
}

/// Scaling of `sup_s ‖u♮_{s,s+h}‖` over dyadic gaps `h`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemainderScaling {
    pub gaps: Vec<f64>,
    pub sup_norms: Vec<f64>,
    pub fit: LinearFit,
}

pub fn remainder_scaling<T: Real>(rem: &TwoIndexMap<T, DVector<T>>) -> Result<RemainderScaling> {
    let n = rem.steps();
    let (mut gaps, mut sups) = (Vec::new(), Vec::new());
    let mut g = 1;
    while g <= n {
        let sup = (0..=n - g)
            .map(|s| rem.get(s, s + g).norm().as_f64())
            .fold(0.0f64, f64::max);
        gaps.push((rem.time(g) - rem.time(0)).as_f64());
        sups.push(sup);
        g *= 2;
    }
    let fit = loglog(&gaps, &sups)?;
    Ok(RemainderScaling {
        gaps,
        sup_norms: sups,
        fit,
    })
}

/// Solution of the limit equation on the lift's grid.
#[derive(Debug, Clone)]
pub struct LimitTrajectory<T: Real> {
    pub grid: UniformGrid<T>,
    pub u: DMatrix<T>,
}

impl<T: Real> LimitTrajectory<T> {
    pub fn final_u(&self) -> DVector<T> {
        self.u.column(self.grid.steps()).into_owned()
    }
}

/// Rough Euler scheme for
/// `du = [Au + b(u, u) + b(r̄, u)]dt + 𝔸¹(dB)u + 𝔸²(dB)u`:
/// `u_{n+1} = e^{HA}(u_n + 𝔸¹_{n,n+1}u_n + 𝔸²_{n,n+1}u_n) + φ₁(HA)H·b(u_n + r̄, u_n)`.
pub fn rough_euler_limit<T: Real>(
    system: &SlowFastSystem<T>,
    u0: &DVector<T>,
    lift: &RoughPath<T>,
    r_bar: &DVector<T>,
) -> Result<LimitTrajectory<T>> {
    system.check_field(u0, "initial velocity")?;
    system.check_field(r_bar, "Itô-Stokes drift")?;
    let driver = assemble_driver(lift, &system.drivers)?;
    let grid = lift.level1.grid();
    let (decay, phi) = exp_euler_diag(&system.stokes, grid.step());
    let n = grid.steps();
    let limit = T::lit(BLOWUP_FACTOR) * u0.norm();
    let mut out = DMatrix::zeros(system.n_coords(), n + 1);
    let mut u = u0.clone();
    out.set_column(0, &u);
    for i in 0..n {
        let kick = &u + driver.apply1(i, i + 1, &u) + driver.apply2(i, i + 1, &u);
        let forcing = if system.nonlinear {
            system.b(&(&u + r_bar), &u)
        } else {
            DVector::zeros(system.n_coords())
        };
        u = decay.component_mul(&kick) + phi.component_mul(&forcing);
        let norm = u.norm();
        if !norm.finite() || (limit > T::zero() && norm > limit) {
            return Err(Error::Divergence {
                time: grid.time(i + 1).as_f64(),
                norm: norm.as_f64(),
                limit: limit.as_f64(),
            });
        }
        out.set_column(i + 1, &u);
    }
    Ok(LimitTrajectory { grid, u: out })
}
