//! Exact-in-law simulation of `dw = ε⁻¹Cw dt + ε^{−1/2}Q^{1/2}dW`.
//!
//! Each step first draws the standard increment `ΔW ~ N(0, hI)` and then the
//! transition noise `ξ` conditionally on it, so the stored `Q^{1/2}ΔW` is the
//! exact Brownian path driving `w`. With a fixed `(seed, replica)` the
//! increments do not depend on `ε`, which couples paths across an ε-ladder.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::UniformGrid;
use crate::operators::{clamped_eigen, matrix_exponential, psd_sqrt, solve_lyapunov, LinearOperator};
use crate::scalar::Real;

/// Covariance plus the seeding pair of one replica.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct NoiseConfig<T: Real> {
    pub q: LinearOperator<T>,
    pub seed: u64,
    pub replica: u64,
}

impl<T: Real> NoiseConfig<T> {
    pub fn new(q: LinearOperator<T>, seed: u64, replica: u64) -> Result<Self> {
        clamped_eigen(&q)?;
        Ok(Self { q, seed, replica })
    }

    pub fn rng(&self) -> ChaCha8Rng {
        replica_rng(self.seed, self.replica)
    }
}

/// RNG stream of one replica.
pub fn replica_rng(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// Moves the stream to the block reserved for `step`, so draws depend only
/// on `(seed, replica, step)`.
pub fn seek_step(rng: &mut ChaCha8Rng, step: usize) {
    rng.set_word_pos((step as u128) << 24);
}

pub fn standard_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<T> {
    DVector::from_iterator(n, (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))))
}

fn check_epsilon<T: Real>(epsilon: T) -> Result<()> {
    if !(epsilon > T::zero() && epsilon <= T::one()) {
        return Err(Error::Input(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    Ok(())
}

/// Root of a covariance that may be slightly indefinite from cancellation.
fn tolerant_root<T: Real>(m: &DMatrix<T>, scale: T) -> Result<DMatrix<T>> {
    let sym = (m + m.transpose()) * T::lit(0.5);
    let eig = sym.symmetric_eigen();
    let floor = -(T::lit(1e-9) * scale + T::default_epsilon() * T::default_epsilon());
    let mut root = DVector::zeros(eig.eigenvalues.len());
    for (r, &v) in root.iter_mut().zip(eig.eigenvalues.iter()) {
        if v < floor {
            return Err(Error::Factorization(format!("step covariance is indefinite: eigenvalue {v}")));
        }
        *r = v.max(T::zero()).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root))
}

/// Precomputed exact transition for fixed `(C, Q, ε, h)`.
#[derive(Debug, Clone)]
pub struct OuStepper<T: Real> {
    decay: DMatrix<T>,
    gain: DMatrix<T>,
    residual_root: DMatrix<T>,
    q_sqrt: DMatrix<T>,
    step_cov: DMatrix<T>,
    sqrt_h: T,
}

impl<T: Real> OuStepper<T> {
    pub fn new(c: &LinearOperator<T>, q: &LinearOperator<T>, epsilon: T, h: T) -> Result<Self> {
        check_epsilon(epsilon)?;
        if !(h > T::zero() && h.finite()) {
            return Err(Error::Input(format!("step must be positive, got {h}")));
        }
        let q_inf = solve_lyapunov(c, q)?;
        let n = c.dim();
        let decay = matrix_exponential(c, h / epsilon)?.into_matrix();
        let step_cov = q_inf.matrix() - &decay * q_inf.matrix() * decay.transpose();
        let q_sqrt = psd_sqrt(q)?.into_matrix();
        let neg_c_inv = c.scale(-T::one()).inverse()?.into_matrix();
        // Cov(ξ, ΔW) = ε^{1/2}(−C)⁻¹(I − e^{Ch/ε})Q^{1/2}
        let cross = (&neg_c_inv * (DMatrix::identity(n, n) - &decay) * &q_sqrt) * epsilon.sqrt();
        let gain = &cross / h;
        let residual = &step_cov - &cross * cross.transpose() / h;
        let scale = step_cov.amax().max(q_inf.matrix().amax());
        let residual_root = tolerant_root(&residual, scale)?;
        Ok(Self {
            decay,
            gain,
            residual_root,
            q_sqrt,
            step_cov: (&step_cov + step_cov.transpose()) * T::lit(0.5),
            sqrt_h: h.sqrt(),
        })
    }

    pub fn dim(&self) -> usize {
        self.decay.nrows()
    }

    /// `e^{Ch/ε}`.
    pub fn decay(&self) -> &DMatrix<T> {
        &self.decay
    }

    /// `Σ_h = Q∞ − e^{Ch/ε} Q∞ e^{Cᵀh/ε}`.
    pub fn step_covariance(&self) -> &DMatrix<T> {
        &self.step_cov
    }

    /// Advances `state` and returns `Q^{1/2}ΔW`.
    pub fn step<R: Rng + ?Sized>(&self, state: &DVector<T>, rng: &mut R) -> (DVector<T>, DVector<T>) {
        let n = self.dim();
        let dw = standard_normal::<T, _>(rng, n) * self.sqrt_h;
        let z = standard_normal::<T, _>(rng, n);
        let next = &self.decay * state + &self.gain * &dw + &self.residual_root * z;
        (next, &self.q_sqrt * dw)
    }
}

/// One exact step; see [`OuStepper`] for repeated use.
pub fn ou_exact_step<T: Real, R: Rng + ?Sized>(
    state: &DVector<T>,
    c: &LinearOperator<T>,
    q: &LinearOperator<T>,
    epsilon: T,
    h: T,
    rng: &mut R,
) -> Result<(DVector<T>, DVector<T>)> {
    Ok(OuStepper::new(c, q, epsilon, h)?.step(state, rng))
}

/// Stored fast path: states at grid points (columns) and the increments
/// `Q^{1/2}ΔW` of each interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FastPath<T: Real> {
    pub epsilon: T,
    pub grid: UniformGrid<T>,
    pub states: DMatrix<T>,
    pub increments: DMatrix<T>,
}

impl<T: Real> FastPath<T> {
    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn state(&self, i: usize) -> DVector<T> {
        self.states.column(i).into_owned()
    }

    /// `Q^{1/2}W_{t_i}` with `W_0 = 0`.
    /// `y_t = ε^{−1/2}∫₀ᵗ w ds` at the grid points, from the exact identity
    /// `y_t = (−C)⁻¹[Q^{1/2}W_t − ε^{1/2}(w_t − w_0)]`.
    pub fn rescaled_integral(&self, c: &LinearOperator<T>) -> Result<DMatrix<T>> {
        if c.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "generator has dim {}, path has dim {}",
                c.dim(),
                self.dim()
            )));
        }
        let neg_c_inv = c.scale(-T::one()).inverse()?.into_matrix();
        let mut fluct = self.states.clone();
        let w0 = self.states.column(0).into_owned();
        for mut col in fluct.column_iter_mut() {
            col -= &w0;
        }
        Ok(neg_c_inv * (cumulative(&self.increments) - fluct * self.epsilon.sqrt()))
    }

    pub fn brownian_path(&self) -> DMatrix<T> {
        cumulative(&self.increments)
    }

    /// CSV with columns `t, w_*, dW_*`; the last row has empty increments.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut head: Vec<String> = vec!["t".into()];
        head.extend((0..d).map(|i| format!("w{i}")));
        head.extend((0..d).map(|i| format!("dW{i}")));
        let mut s = head.join(",");
        s.push('\n');
        for i in 0..=self.grid.steps() {
            let mut row = vec![format!("{:e}", self.grid.time(i).as_f64())];
            row.extend(self.states.column(i).iter().map(|v| format!("{:e}", v.as_f64())));
            if i < self.grid.steps() {
                row.extend(self.increments.column(i).iter().map(|v| format!("{:e}", v.as_f64())));
            } else {
                row.extend(std::iter::repeat_n(String::new(), d));
            }
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// JSON envelope with base64 little-endian `f64` arrays (column-major).
    pub fn to_json(&self) -> Result<String> {
        let wire = PathWire {
            epsilon: self.epsilon.as_f64(),
            t_end: self.grid.t_end().as_f64(),
            steps: self.grid.steps(),
            dim: self.dim(),
            states: encode(&self.states),
            increments: encode(&self.increments),
        };
        Ok(serde_json::to_string(&wire)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: PathWire = serde_json::from_str(s)?;
        let grid = UniformGrid::new(T::lit(w.t_end), w.steps)?;
        Ok(Self {
            epsilon: T::lit(w.epsilon),
            grid,
            states: decode(&w.states, w.dim, w.steps + 1)?,
            increments: decode(&w.increments, w.dim, w.steps)?,
        })
    }
}

/// Prefix sums of columns, with a leading zero column.
pub fn cumulative<T: Real>(increments: &DMatrix<T>) -> DMatrix<T> {
    let (d, n) = increments.shape();
    let mut out = DMatrix::zeros(d, n + 1);
    for i in 0..n {
        let next = out.column(i) + increments.column(i);
        out.set_column(i + 1, &next);
    }
    out
}

#[derive(Serialize, Deserialize)]
struct PathWire {
    epsilon: f64,
    t_end: f64,
    steps: usize,
    dim: usize,
    states: String,
    increments: String,
}

fn encode<T: Real>(m: &DMatrix<T>) -> String {
    let bytes: Vec<u8> = m.iter().flat_map(|v| v.as_f64().to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode<T: Real>(s: &str, rows: usize, cols: usize) -> Result<DMatrix<T>> {
    let bytes = B64.decode(s).map_err(|e| Error::Serde(e.to_string()))?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Serde(format!(
            "expected {} values, got {} bytes",
            rows * cols,
            bytes.len()
        )));
    }
    let vals = bytes
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))));
    Ok(DMatrix::from_iterator(rows, cols, vals))
}

/// Iterates exact steps from `w0` (zero when `None`).
pub fn simulate_fast_path<T: Real>(
    c: &LinearOperator<T>,
    noise: &NoiseConfig<T>,
    epsilon: T,
    grid: &UniformGrid<T>,
    w0: Option<&DVector<T>>,
) -> Result<FastPath<T>> {
    let stepper = OuStepper::new(c, &noise.q, epsilon, grid.step())?;
    let d = c.dim();
    let mut w = match w0 {
        Some(v) if v.len() != d => {
            return Err(Error::Shape(format!("initial state has length {}, expected {d}", v.len())))
        }
        Some(v) => v.clone(),
        None => DVector::zeros(d),
    };
    let mut rng = noise.rng();
    let mut states = DMatrix::zeros(d, grid.steps() + 1);
    let mut increments = DMatrix::zeros(d, grid.steps());
    states.set_column(0, &w);
    for i in 0..grid.steps() {
        seek_step(&mut rng, i);
        let (next, db) = stepper.step(&w, &mut rng);
        w = next;
        states.set_column(i + 1, &w);
        increments.set_column(i, &db);
    }
    Ok(FastPath {
        epsilon,
        grid: *grid,
        states,
        increments,
    })
}

/// Draws from `N(0, Q∞)`.
#[derive(Debug, Clone)]
pub struct InvariantSampler<T: Real> {
    root: DMatrix<T>,
}

impl<T: Real> InvariantSampler<T> {
    pub fn new(c: &LinearOperator<T>, q: &LinearOperator<T>) -> Result<Self> {
        let q_inf = solve_lyapunov(c, q)?;
        Ok(Self {
            root: psd_sqrt(&q_inf)?.into_matrix(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        &self.root * standard_normal::<T, _>(rng, self.root.nrows())
    }
}

pub fn sample_invariant<T: Real, R: Rng + ?Sized>(
    c: &LinearOperator<T>,
    q: &LinearOperator<T>,
    rng: &mut R,
) -> Result<DVector<T>> {
    Ok(InvariantSampler::new(c, q)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_step_covariance_closed_form() {
        let c = LinearOperator::<f64>::identity(2).scale(-1.0);
        let q = LinearOperator::identity(2);
        for h in [1e-3, 0.1, 1.0, 5.0] {
            let s = OuStepper::new(&c, &q, 1.0, h).unwrap();
            let expected = 0.5 * (1.0 - (-2.0 * h).exp());
            assert!((s.step_covariance()[(0, 0)] - expected).abs() < 1e-12);
            assert!(s.step_covariance()[(0, 1)].abs() < 1e-12);
            assert!((s.decay()[(0, 0)] - (-h).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_step_and_epsilon() {
        let c = LinearOperator::<f64>::identity(1).scale(-1.0);
        let q = LinearOperator::identity(1);
        assert!(matches!(OuStepper::new(&c, &q, 1.0, -0.1), Err(Error::Input(_))));
        assert!(matches!(OuStepper::new(&c, &q, 0.0, 0.1), Err(Error::Input(_))));
        let unstable = LinearOperator::identity(1);
        assert!(matches!(OuStepper::new(&unstable, &q, 1.0, 0.1), Err(Error::Unstable { .. })));
    }

    #[test]
    fn zero_noise_decays_deterministically() {
        let c = LinearOperator::from_row_major(2, &[-1.0, 0.5, 0.0, -2.0]).unwrap();
        let noise = NoiseConfig::new(LinearOperator::zeros(2), 1, 0).unwrap();
        let grid = UniformGrid::new(1.0, 8).unwrap();
        let v = DVector::from_vec(vec![1.0, -2.0]);
        let path = simulate_fast_path(&c, &noise, 0.5, &grid, Some(&v)).unwrap();
        for i in 0..=8 {
            let exact = matrix_exponential(&c, grid.time(i) / 0.5).unwrap().apply(&v);
            assert!((path.state(i) - exact).amax() < 1e-12);
        }
        assert_eq!(path.increments.amax(), 0.0);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let c = LinearOperator::<f64>::identity(3).scale(-1.0);
        let noise = NoiseConfig::new(LinearOperator::identity(3), 9, 2).unwrap();
        let grid = UniformGrid::new(1.0, 16).unwrap();
        let path = simulate_fast_path(&c, &noise, 0.25, &grid, None).unwrap();
        let back = FastPath::<f64>::from_json(&path.to_json().unwrap()).unwrap();
        assert_eq!(back, path);
        assert_eq!(path.to_csv().lines().count(), 18);
    }
}
