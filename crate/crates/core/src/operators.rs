//! Dense operator algebra on the finite state space.
//!
//! Houses the generator `C`, the noise covariance `Q`, the stationary
//! covariance `Q∞` solving `C Q∞ + Q∞ Cᵀ + Q = 0`, and the two level-2
//! tensors derived from them: the drift `D = ∫ w ⊗ (−C)⁻¹w dμ(w)` and its
//! antisymmetric part `M`.
//!
//! Tensor convention: `(a ⊗ b)` is stored with entry `(k, ℓ) = a_k b_ℓ`, so
//! a tensor entry `(k, ℓ)` is the pairing `⟨T, e_k ⊗ e_ℓ⟩`. Under the
//! Hilbert–Schmidt identification `⟨T, e_k ⊗ e_ℓ⟩ = ⟨T_op e_k, e_ℓ⟩` the
//! operator matrix is the transpose of the stored array, see
//! [`Tensor2::to_operator`].

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Square dense real matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator<T: Real> {
    mat: DMatrix<T>,
}

fn all_finite<T: Real>(m: &DMatrix<T>) -> bool {
    m.iter().all(|x| x.finite())
}

impl<T: Real> LinearOperator<T> {
    pub fn new(mat: DMatrix<T>) -> Result<Self> {
        if mat.nrows() == 0 || mat.nrows() != mat.ncols() {
            return Err(Error::InvalidOperator(format!(
                "expected a non-empty square matrix, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        if !all_finite(&mat) {
            return Err(Error::InvalidOperator("non-finite entry".into()));
        }
        Ok(Self { mat })
    }

    pub fn from_row_major(dim: usize, entries: &[T]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::InvalidOperator(format!(
                "dim {dim} needs {} entries, got {}",
                dim * dim,
                entries.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mat: DMatrix::identity(dim, dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            mat: DMatrix::zeros(dim, dim),
        }
    }

    pub fn from_diagonal(diag: &[T]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.mat
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.mat[(i, j)]
    }

    pub fn row_major(&self) -> Vec<T> {
        self.mat.transpose().iter().copied().collect()
    }

    pub fn transpose(&self) -> Self {
        Self {
            mat: self.mat.transpose(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Self { mat: &self.mat * s }
    }

    pub fn apply(&self, v: &DVector<T>) -> DVector<T> {
        &self.mat * v
    }

    pub fn frobenius(&self) -> T {
        self.mat.norm()
    }

    /// Largest absolute entry of `A − Aᵀ`.
    pub fn asymmetry(&self) -> T {
        (&self.mat - self.mat.transpose()).amax()
    }

    pub fn symmetric_part(&self) -> Self {
        Self {
            mat: (&self.mat + self.mat.transpose()) * T::lit(0.5),
        }
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .mat
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidOperator("singular operator".into()))?;
        Self::new(inv)
    }
}

impl<T: Real> Mul for &LinearOperator<T> {
    type Output = LinearOperator<T>;
    fn mul(self, rhs: Self) -> LinearOperator<T> {
        LinearOperator {
            mat: &self.mat * &rhs.mat,
        }
    }
}

impl<T: Real> Add for &LinearOperator<T> {
    type Output = LinearOperator<T>;
    fn add(self, rhs: Self) -> LinearOperator<T> {
        LinearOperator {
            mat: &self.mat + &rhs.mat,
        }
    }
}

impl<T: Real> Sub for &LinearOperator<T> {
    type Output = LinearOperator<T>;
    fn sub(self, rhs: Self) -> LinearOperator<T> {
        LinearOperator {
            mat: &self.mat - &rhs.mat,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixWire<T> {
    dim: usize,
    entries: Vec<T>,
}

impl<T: Real> Serialize for LinearOperator<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixWire {
            dim: self.dim(),
            entries: self.row_major(),
        }
        .serialize(s)
    }
}

impl<'de, T: Real> Deserialize<'de> for LinearOperator<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = MatrixWire::<T>::deserialize(d)?;
        Self::from_row_major(w.dim, &w.entries).map_err(D::Error::custom)
    }
}

/// Element of `E ⊗ E` stored as a dense array, entry `(k, ℓ) = ⟨T, e_k ⊗ e_ℓ⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2<T: Real> {
    mat: DMatrix<T>,
}

impl<T: Real> Tensor2<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            mat: DMatrix::zeros(dim, dim),
        }
    }

    pub fn from_matrix(mat: DMatrix<T>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::Shape(format!(
                "tensor must be square, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        Ok(Self { mat })
    }

    /// `a ⊗ b` with entry `(k, ℓ) = a_k b_ℓ`.
    pub fn outer(a: &DVector<T>, b: &DVector<T>) -> Self {
        Self {
            mat: a * b.transpose(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn entry(&self, k: usize, l: usize) -> T {
        self.mat[(k, l)]
    }

    pub fn as_matrix(&self) -> &DMatrix<T> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.mat
    }

    /// Hilbert–Schmidt norm.
    pub fn norm(&self) -> T {
        self.mat.norm()
    }

    pub fn transpose(&self) -> Self {
        Self {
            mat: self.mat.transpose(),
        }
    }

    pub fn symmetric_part(&self) -> Self {
        Self {
            mat: (&self.mat + self.mat.transpose()) * T::lit(0.5),
        }
    }

    pub fn antisymmetric_part(&self) -> Self {
        Self {
            mat: (&self.mat - self.mat.transpose()) * T::lit(0.5),
        }
    }

    /// Operator `X` with `⟨X e_k, e_ℓ⟩ = ⟨T, e_k ⊗ e_ℓ⟩`.
    pub fn to_operator(&self) -> DMatrix<T> {
        self.mat.transpose()
    }

    /// Inverse of [`Tensor2::to_operator`].
    pub fn from_operator(op: &DMatrix<T>) -> Result<Self> {
        Self::from_matrix(op.transpose())
    }

    pub fn scale(&self, s: T) -> Self {
        Self { mat: &self.mat * s }
    }

    pub fn add_scaled(&mut self, other: &Self, s: T) {
        self.mat += &other.mat * s;
    }

    /// `self += a ⊗ b` without allocating.
    pub fn add_outer(&mut self, a: &DVector<T>, b: &DVector<T>, s: T) {
        self.mat.ger(s, a, b, T::one());
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.mat)
    }
}

impl<T: Real> Add for &Tensor2<T> {
    type Output = Tensor2<T>;
    fn add(self, rhs: Self) -> Tensor2<T> {
        Tensor2 {
            mat: &self.mat + &rhs.mat,
        }
    }
}

impl<T: Real> Sub for &Tensor2<T> {
    type Output = Tensor2<T>;
    fn sub(self, rhs: Self) -> Tensor2<T> {
        Tensor2 {
            mat: &self.mat - &rhs.mat,
        }
    }
}

impl<T: Real> Neg for &Tensor2<T> {
    type Output = Tensor2<T>;
    fn neg(self) -> Tensor2<T> {
        Tensor2 { mat: -&self.mat }
    }
}

impl<T: Real> Serialize for Tensor2<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixWire {
            dim: self.dim(),
            entries: self.mat.transpose().iter().copied().collect(),
        }
        .serialize(s)
    }
}

impl<'de, T: Real> Deserialize<'de> for Tensor2<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = MatrixWire::<T>::deserialize(d)?;
        if w.entries.len() != w.dim * w.dim {
            return Err(D::Error::custom("tensor entry count does not match dim"));
        }
        Ok(Self {
            mat: DMatrix::from_row_slice(w.dim, w.dim, &w.entries),
        })
    }
}

/// Constants of the generator assumptions in their finite-dimensional form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GeneratorAssumptions<T: Real> {
    /// Exponential decay rate, `−` spectral abscissa of `C`.
    pub iota: T,
    /// Coercivity proxy `λ_min(Sym(−C))`.
    pub gamma: T,
    /// Interpolation exponent. Carried as metadata only.
    pub vartheta: T,
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa<T: Real>(c: &LinearOperator<T>) -> T {
    c.mat
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(T::min_value().unwrap_or(-T::one() / T::default_epsilon()), |a, b| a.max(b))
}

/// `e^{Ct}`.
pub fn matrix_exponential<T: Real>(c: &LinearOperator<T>, t: T) -> Result<LinearOperator<T>> {
    if !t.finite() || t < T::zero() {
        return Err(Error::Input(format!("time must be finite and nonnegative, got {t}")));
    }
    if !all_finite(&c.mat) {
        return Err(Error::InvalidOperator("non-finite entry".into()));
    }
    if t == T::zero() {
        return Ok(LinearOperator::identity(c.dim()));
    }
    LinearOperator::new((&c.mat * t).exp())
}

fn check_same_dim<T: Real>(c: &LinearOperator<T>, q: &LinearOperator<T>) -> Result<()> {
    if c.dim() != q.dim() {
        return Err(Error::Shape(format!(
            "generator has dim {}, covariance has dim {}",
            c.dim(),
            q.dim()
        )));
    }
    Ok(())
}

fn check_symmetric<T: Real>(q: &LinearOperator<T>, what: &str) -> Result<()> {
    let scale = q.mat.amax().max(T::one());
    if q.asymmetry() > T::lit(1e-12) * scale {
        return Err(Error::Input(format!(
            "{what} is not symmetric (max |Q − Qᵀ| = {})",
            q.asymmetry()
        )));
    }
    Ok(())
}

/// Solves `C X + X Cᵀ + Q = 0` for the stationary covariance
/// `Q∞ = ∫₀^∞ e^{Ct} Q e^{Cᵀt} dt`.
///
/// Uses a complex Schur form `C = Z U Z*` and back substitution on the
/// triangular system `U Y + Y U* = −Z* Q Z`, O(n³).
pub fn solve_lyapunov<T: Real>(
    c: &LinearOperator<T>,
    q: &LinearOperator<T>,
) -> Result<LinearOperator<T>> {
    check_same_dim(c, q)?;
    check_symmetric(q, "covariance")?;
    let n = c.dim();
    let cc: DMatrix<Complex<T>> = c.mat.map(|x| Complex::new(x, T::zero()));
    let schur = cc
        .try_schur(T::default_epsilon(), 10_000)
        .ok_or_else(|| Error::Factorization("Schur decomposition did not converge".into()))?;
    let (z, u) = schur.unpack();

    let abscissa = (0..n)
        .map(|i| u[(i, i)].re)
        .fold(T::min_value().unwrap_or(-T::one() / T::default_epsilon()), |a, b| a.max(b));
    if abscissa >= T::zero() {
        return Err(Error::Unstable {
            abscissa: abscissa.as_f64(),
        });
    }

    let qc: DMatrix<Complex<T>> = q.mat.map(|x| Complex::new(x, T::zero()));
    let f = z.adjoint() * qc * &z;
    let mut y = DMatrix::<Complex<T>>::zeros(n, n);
    for i in (0..n).rev() {
        for j in (0..n).rev() {
            let mut acc = -f[(i, j)];
            for k in (i + 1)..n {
                acc -= u[(i, k)] * y[(k, j)];
            }
            for k in (j + 1)..n {
                acc -= y[(i, k)] * u[(j, k)].conj();
            }
            y[(i, j)] = acc / (u[(i, i)] + u[(j, j)].conj());
        }
    }
    let x = &z * y * z.adjoint();
    let re = x.map(|v| v.re);
    LinearOperator::new((&re + re.transpose()) * T::lit(0.5))
}

/// Symmetric positive semidefinite square root.
///
/// Eigenvalues in `[−1e−12·s, 0)` (with `s = max(1, λ_max)`) are clamped to
/// zero; anything more negative is a factorization error.
pub fn psd_sqrt<T: Real>(q: &LinearOperator<T>) -> Result<LinearOperator<T>> {
    let (vals, vecs) = clamped_eigen(q)?;
    let root = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.sqrt()));
    LinearOperator::new(&vecs * DMatrix::from_diagonal(&root) * vecs.transpose())
}

/// Eigen-decomposition of a symmetric PSD operator with the clamping rule of
/// [`psd_sqrt`]. Returns `(eigenvalues, eigenvectors as columns)`.
pub fn clamped_eigen<T: Real>(q: &LinearOperator<T>) -> Result<(Vec<T>, DMatrix<T>)> {
    check_symmetric(q, "matrix")?;
    let sym = q.symmetric_part();
    let eig = sym.mat.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().copied().fold(T::one(), |a, b| a.max(b));
    let floor = -T::lit(1e-12) * lmax;
    let mut vals = Vec::with_capacity(q.dim());
    for &v in eig.eigenvalues.iter() {
        if v < floor {
            return Err(Error::Factorization(format!(
                "matrix is indefinite: eigenvalue {v}"
            )));
        }
        vals.push(v.max(T::zero()));
    }
    Ok((vals, eig.eigenvectors))
}

/// Everything derived from a generator/covariance pair, computed once.
#[derive(Debug, Clone)]
pub struct GeneratorAlgebra<T: Real> {
    pub c: LinearOperator<T>,
    pub q: LinearOperator<T>,
    /// Stationary covariance.
    pub q_inf: LinearOperator<T>,
    /// `(−C)⁻¹`.
    pub neg_c_inv: LinearOperator<T>,
    /// Per-unit-time level-2 drift `∫ w ⊗ (−C)⁻¹w dμ`.
    pub drift: Tensor2<T>,
    /// Antisymmetric correction to the Stratonovich lift.
    pub correction: Tensor2<T>,
    /// Covariance per unit time of `B = (−C)⁻¹Q^{1/2}W`.
    pub b_covariance: LinearOperator<T>,
}

impl<T: Real> GeneratorAlgebra<T> {
    pub fn new(c: &LinearOperator<T>, q: &LinearOperator<T>) -> Result<Self> {
        let q_inf = solve_lyapunov(c, q)?;
        let neg_c_inv = c.scale(-T::one()).inverse()?;
        // Y = (−C)⁻¹Q∞; ⟨Y e_k, e_ℓ⟩ = Y_{ℓk}, so the stored tensor is Yᵀ.
        let y = &neg_c_inv * &q_inf;
        let drift = Tensor2::from_matrix(y.mat.transpose())?;
        let mut correction = drift.antisymmetric_part();
        antisymmetrize(&mut correction);
        let b_covariance = {
            let s = &(&neg_c_inv * q) * &neg_c_inv.transpose();
            s.symmetric_part()
        };
        Ok(Self {
            c: c.clone(),
            q: q.clone(),
            q_inf,
            neg_c_inv,
            drift,
            correction,
            b_covariance,
        })
    }

    pub fn dim(&self) -> usize {
        self.c.dim()
    }
}

fn antisymmetrize<T: Real>(t: &mut Tensor2<T>) {
    let n = t.dim();
    for k in 0..n {
        t.mat[(k, k)] = T::zero();
        for l in (k + 1)..n {
            let a = (t.mat[(k, l)] - t.mat[(l, k)]) * T::lit(0.5);
            t.mat[(k, l)] = a;
            t.mat[(l, k)] = -a;
        }
    }
}

/// Antisymmetric correction `M` with
/// `⟨M, e_k ⊗ e_ℓ⟩ = ⟨½[(−C)⁻¹Q∞ − Q∞((−C)⁻¹)ᵀ] e_k, e_ℓ⟩`.
pub fn correction_m<T: Real>(c: &LinearOperator<T>, q: &LinearOperator<T>) -> Result<Tensor2<T>> {
    Ok(GeneratorAlgebra::new(c, q)?.correction)
}

/// Level-2 drift `D` with `⟨D, e_k ⊗ e_ℓ⟩ = ⟨(−C)⁻¹Q∞ e_k, e_ℓ⟩`.
pub fn drift_tensor_d<T: Real>(c: &LinearOperator<T>, q: &LinearOperator<T>) -> Result<Tensor2<T>> {
    Ok(GeneratorAlgebra::new(c, q)?.drift)
}

/// Checks exponential stability and coercivity of `C`; `Q` must be
/// symmetric positive semidefinite.
pub fn validate_generator<T: Real>(
    c: &LinearOperator<T>,
    q: &LinearOperator<T>,
) -> Result<GeneratorAssumptions<T>> {
    check_same_dim(c, q)?;
    clamped_eigen(q).map_err(|e| Error::AssumptionViolation(format!("Q must be symmetric PSD: {e}")))?;
    let iota = -spectral_abscissa(c);
    if iota <= T::zero() {
        return Err(Error::AssumptionViolation(format!(
            "exponential decay ‖e^{{Ct}}‖ ≲ e^{{−ιt}} needs ι > 0, got ι = {iota}"
        )));
    }
    let sym = c.scale(-T::one()).symmetric_part();
    let gamma = sym
        .mat
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(T::max_value().unwrap_or(T::one() / T::default_epsilon()), |a, b| a.min(b));
    if gamma <= T::zero() {
        return Err(Error::AssumptionViolation(format!(
            "coercivity −⟨w, Cw⟩ ≳ ‖w‖² needs λ_min(Sym(−C)) > 0, got {gamma}"
        )));
    }
    Ok(GeneratorAssumptions {
        iota,
        gamma,
        vartheta: T::one(),
    })
}
