//! Truncated Fourier–Galerkin model on the torus `[0, 2π)^d`, `d ∈ {2, 3}`.
//!
//! Real orthonormal basis for the normalized measure: for every lattice
//! vector `k` whose first nonzero component is positive the functions
//! `√2 a_{k,p} cos(k·x)`, and for its negative `−k` the functions
//! `√2 a_{k,p} sin(k·x)`. The polarizations `a_{k,p}`, `p < d − 1`, are
//! orthonormal and orthogonal to `k`, so every coefficient vector is a
//! divergence-free, zero-mean field. Coordinate `i` belongs to mode
//! `i / (d − 1)` and polarization `i % (d − 1)`.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::operators::{validate_generator, LinearOperator};
use crate::scalar::Real;

/// Lattice vector; the third component is zero when `d = 2`.
pub type Wavevector = [i32; 3];

type Spectral<T> = [Complex<T>; 3];

fn is_positive(k: &Wavevector) -> bool {
    k.iter().find(|&&c| c != 0).is_some_and(|&c| c > 0)
}

fn neg(k: &Wavevector) -> Wavevector {
    [-k[0], -k[1], -k[2]]
}

fn norm_sq(k: &Wavevector) -> i32 {
    k.iter().map(|c| c * c).sum()
}

fn polarizations(dimension: usize, k: &Wavevector) -> Vec<[f64; 3]> {
    let kf = [k[0] as f64, k[1] as f64, k[2] as f64];
    let len = (norm_sq(k) as f64).sqrt();
    if dimension == 2 {
        return vec![[-kf[1] / len, kf[0] / len, 0.0]];
    }
    let axis = (0..3)
        .min_by(|&a, &b| kf[a].abs().partial_cmp(&kf[b].abs()).unwrap())
        .unwrap();
    let mut e = [0.0; 3];
    e[axis] = 1.0;
    let a1 = normalize(cross(&kf, &e));
    let a2 = normalize(cross(&kf, &a1));
    vec![a1, a2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Modes `0 < |k|∞ ≤ K` with their polarizations.
#[derive(Debug, Clone)]
pub struct TorusBasis<T: Real> {
    dimension: usize,
    cutoff: usize,
    modes: Vec<Wavevector>,
    pol: Vec<Vec<[T; 3]>>,
    partner: Vec<usize>,
    lookup: Vec<Option<usize>>,
    structure: OnceLock<StructureConstants<T>>,
}

impl<T: Real> TorusBasis<T> {
    pub fn new(dimension: usize, cutoff: usize) -> Result<Self> {
        if !(dimension == 2 || dimension == 3) {
            return Err(Error::Input(format!("dimension must be 2 or 3, got {dimension}")));
        }
        if cutoff == 0 || cutoff > 8 {
            return Err(Error::Input(format!("cutoff must be in 1..=8, got {cutoff}")));
        }
        let kc = cutoff as i32;
        let mut modes = Vec::new();
        let range = || -kc..=kc;
        for k0 in range() {
            for k1 in range() {
                let k2s: Vec<i32> = if dimension == 3 { range().collect() } else { vec![0] };
                for k2 in k2s {
                    let k = [k0, k1, k2];
                    if k != [0, 0, 0] {
                        modes.push(k);
                    }
                }
            }
        }
        modes.sort_by_key(|k| (norm_sq(k), *k));

        let side = 4 * cutoff + 1;
        let mut lookup = vec![None; side.pow(dimension as u32)];
        let mut out = Self {
            dimension,
            cutoff,
            modes: Vec::new(),
            pol: Vec::new(),
            partner: Vec::new(),
            lookup: Vec::new(),
            structure: OnceLock::new(),
        };
        for (m, k) in modes.iter().enumerate() {
            lookup[out.slot(k)] = Some(m);
        }
        out.partner = modes
            .iter()
            .map(|k| lookup[out.slot(&neg(k))].expect("mode set closed under negation"))
            .collect();
        out.pol = modes
            .iter()
            .map(|k| {
                let rep = if is_positive(k) { *k } else { neg(k) };
                polarizations(dimension, &rep)
                    .into_iter()
                    .map(|a| [T::lit(a[0]), T::lit(a[1]), T::lit(a[2])])
                    .collect()
            })
            .collect();
        out.modes = modes;
        out.lookup = lookup;
        Ok(out)
    }

    fn slot(&self, k: &Wavevector) -> usize {
        let off = 2 * self.cutoff as i32;
        let side = (4 * self.cutoff + 1) as i32;
        let mut idx = 0;
        for a in (0..self.dimension).rev() {
            idx = idx * side + (k[a] + off);
        }
        idx as usize
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    /// Polarizations per mode, `d − 1`.
    pub fn n_pol(&self) -> usize {
        self.dimension - 1
    }

    /// Length of a coefficient vector.
    pub fn n_coords(&self) -> usize {
        self.modes.len() * self.n_pol()
    }

    pub fn modes(&self) -> &[Wavevector] {
        &self.modes
    }

    pub fn mode(&self, m: usize) -> Wavevector {
        self.modes[m]
    }

    pub fn polarization(&self, m: usize, p: usize) -> [T; 3] {
        self.pol[m][p]
    }

    /// Index of `−k`.
    pub fn partner(&self, m: usize) -> usize {
        self.partner[m]
    }

    /// True for the cosine half of the basis.
    pub fn is_cosine(&self, m: usize) -> bool {
        is_positive(&self.modes[m])
    }

    pub fn coord(&self, m: usize, p: usize) -> usize {
        m * self.n_pol() + p
    }

    pub fn coord_mode(&self, i: usize) -> usize {
        i / self.n_pol()
    }

    pub fn wavenumber_sq(&self, m: usize) -> T {
        T::lit(norm_sq(&self.modes[m]) as f64)
    }

    pub fn mode_index(&self, k: &Wavevector) -> Option<usize> {
        let bound = 2 * self.cutoff as i32;
        if k.iter().any(|c| c.abs() > bound) || (self.dimension == 2 && k[2] != 0) {
            return None;
        }
        self.lookup[self.slot(k)]
    }

    fn same_as(&self, other: &Self) -> bool {
        self.dimension == other.dimension && self.cutoff == other.cutoff
    }

    /// Sparse complex amplitudes `û_k` of `u = Σ_k û_k e^{ik·x}` over both
    /// signs of every mode touched by `c`.
    fn spectral_sparse(&self, c: &DVector<T>) -> Vec<(usize, Spectral<T>)> {
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let mut out = Vec::new();
        for m in (0..self.n_modes()).filter(|&m| self.is_cosine(m)) {
            let n = self.partner[m];
            let mut z = [Complex::new(T::zero(), T::zero()); 3];
            let mut touched = false;
            for p in 0..self.n_pol() {
                let cc = c[self.coord(m, p)];
                let ss = c[self.coord(n, p)];
                if cc == T::zero() && ss == T::zero() {
                    continue;
                }
                touched = true;
                let a = self.pol[m][p];
                for (za, &aa) in z.iter_mut().zip(a.iter()) {
                    *za += Complex::new(cc, -ss) * (aa * inv_sqrt2);
                }
            }
            if touched {
                out.push((m, z));
                out.push((n, z.map(|v| v.conj())));
            }
        }
        out
    }

    /// Leray projection of a Hermitian spectral field into coordinates.
    fn from_spectral(&self, fields: &[(usize, Spectral<T>)], out: &mut DVector<T>) {
        let sqrt2 = T::lit(std::f64::consts::SQRT_2);
        for &(m, ref z) in fields.iter().filter(|(m, _)| self.is_cosine(*m)) {
            let n = self.partner[m];
            for p in 0..self.n_pol() {
                let a = self.pol[m][p];
                let (mut re, mut im) = (T::zero(), T::zero());
                for (za, &aa) in z.iter().zip(a.iter()) {
                    re += za.re * aa;
                    im += za.im * aa;
                }
                out[self.coord(m, p)] += sqrt2 * re;
                out[self.coord(n, p)] -= sqrt2 * im;
            }
        }
    }

    /// Coordinates of `b(u, v) = −P(u·∇v)` by direct mode convolution,
    /// truncated to the basis.
    pub fn convolve(&self, u: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        let us = self.spectral_sparse(u);
        let vs = self.spectral_sparse(v);
        let mut acc: Vec<(usize, Spectral<T>)> = Vec::new();
        let mut slot_of = vec![usize::MAX; self.n_modes()];
        for (pm, uh) in &us {
            for (qm, vh) in &vs {
                let (kp, kq) = (self.modes[*pm], self.modes[*qm]);
                let k = [kp[0] + kq[0], kp[1] + kq[1], kp[2] + kq[2]];
                let Some(m) = self.mode_index(&k) else { continue };
                // (û_p · i q) v̂_q
                let mut s = Complex::new(T::zero(), T::zero());
                for a in 0..3 {
                    s += uh[a] * T::lit(kq[a] as f64);
                }
                let f = Complex::new(-s.im, s.re);
                if slot_of[m] == usize::MAX {
                    slot_of[m] = acc.len();
                    acc.push((m, [Complex::new(T::zero(), T::zero()); 3]));
                }
                let target = &mut acc[slot_of[m]].1;
                for a in 0..3 {
                    target[a] -= f * vh[a];
                }
            }
        }
        let mut out = DVector::zeros(self.n_coords());
        self.from_spectral(&acc, &mut out);
        out
    }

    /// Sparse table `γ_{ijl} = ⟨b(e_i, e_j), e_l⟩`, built on first use.
    pub fn structure(&self) -> &StructureConstants<T> {
        self.structure.get_or_init(|| StructureConstants::build(self))
    }
}

impl<T: Real> PartialEq for TorusBasis<T> {
    fn eq(&self, other: &Self) -> bool {
        self.same_as(other)
    }
}

#[derive(Serialize, Deserialize)]
struct BasisWire {
    dimension: usize,
    cutoff: usize,
    #[serde(default, skip_deserializing)]
    modes: Vec<Wavevector>,
}

impl<T: Real> Serialize for TorusBasis<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        BasisWire {
            dimension: self.dimension,
            cutoff: self.cutoff,
            modes: self.modes.clone(),
        }
        .serialize(s)
    }
}

impl<'de, T: Real> Deserialize<'de> for TorusBasis<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = BasisWire::deserialize(d)?;
        Self::new(w.dimension, w.cutoff).map_err(D::Error::custom)
    }
}

/// Compressed table of `b` on basis pairs: row `i·N + j` lists `(l, γ_{ijl})`.
#[derive(Debug, Clone)]
pub struct StructureConstants<T: Real> {
    n: usize,
    offsets: Vec<usize>,
    entries: Vec<(usize, T)>,
}

impl<T: Real> StructureConstants<T> {
    fn build(basis: &TorusBasis<T>) -> Self {
        let n = basis.n_coords();
        let tiny = T::default_epsilon() * T::lit(1e3);
        let mut offsets = Vec::with_capacity(n * n + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        let mut ei = DVector::zeros(n);
        let mut ej = DVector::zeros(n);
        for i in 0..n {
            ei[i] = T::one();
            for j in 0..n {
                ej[j] = T::one();
                let g = basis.convolve(&ei, &ej);
                for (l, &v) in g.iter().enumerate() {
                    if v.abs() > tiny {
                        entries.push((l, v));
                    }
                }
                offsets.push(entries.len());
                ej[j] = T::zero();
            }
            ei[i] = T::zero();
        }
        Self { n, offsets, entries }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Nonzero `(l, γ_{ijl})` for the pair `(i, j)`.
    pub fn row(&self, i: usize, j: usize) -> &[(usize, T)] {
        let r = i * self.n + j;
        &self.entries[self.offsets[r]..self.offsets[r + 1]]
    }

    /// `out += b(u, v)`.
    pub fn apply_into(&self, u: &DVector<T>, v: &DVector<T>, out: &mut DVector<T>) {
        let vnz: Vec<usize> = (0..self.n).filter(|&j| v[j] != T::zero()).collect();
        for i in 0..self.n {
            let ui = u[i];
            if ui == T::zero() {
                continue;
            }
            for &j in &vnz {
                let s = ui * v[j];
                for &(l, g) in self.row(i, j) {
                    out[l] += s * g;
                }
            }
        }
    }

    pub fn apply(&self, u: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        let mut out = DVector::zeros(self.n);
        self.apply_into(u, v, &mut out);
        out
    }

    /// Matrix of `φ ↦ b(y, φ)`.
    pub fn left_matrix(&self, y: &DVector<T>) -> DMatrix<T> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let yi = y[i];
            if yi == T::zero() {
                continue;
            }
            for j in 0..self.n {
                for &(l, g) in self.row(i, j) {
                    m[(l, j)] += yi * g;
                }
            }
        }
        m
    }
}

/// Divergence-free zero-mean field in polarization coordinates.
#[derive(Debug, Clone)]
pub struct VelocityField<T: Real> {
    basis: Arc<TorusBasis<T>>,
    coeffs: DVector<T>,
}

impl<T: Real> PartialEq for VelocityField<T> {
    fn eq(&self, other: &Self) -> bool {
        self.basis.same_as(&other.basis) && self.coeffs == other.coeffs
    }
}

impl<T: Real> VelocityField<T> {
    pub fn new(basis: Arc<TorusBasis<T>>, coeffs: DVector<T>) -> Result<Self> {
        if coeffs.len() != basis.n_coords() {
            return Err(Error::Shape(format!(
                "basis has {} coordinates, got {}",
                basis.n_coords(),
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|x| !x.finite()) {
            return Err(Error::Input("non-finite coefficient".into()));
        }
        Ok(Self { basis, coeffs })
    }

    pub fn zeros(basis: Arc<TorusBasis<T>>) -> Self {
        let n = basis.n_coords();
        Self {
            basis,
            coeffs: DVector::zeros(n),
        }
    }

    pub fn basis(&self) -> &Arc<TorusBasis<T>> {
        &self.basis
    }

    pub fn coefficients(&self) -> &DVector<T> {
        &self.coeffs
    }

    pub fn into_coefficients(self) -> DVector<T> {
        self.coeffs
    }

    pub fn norm(&self) -> T {
        self.coeffs.norm()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_basis(other)?;
        Ok(self.coeffs.dot(&other.coeffs))
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            basis: self.basis.clone(),
            coeffs: &self.coeffs * s,
        }
    }

    /// `self + s·other`.
    pub fn add_scaled(&self, other: &Self, s: T) -> Result<Self> {
        self.check_basis(other)?;
        Ok(Self {
            basis: self.basis.clone(),
            coeffs: &self.coeffs + &other.coeffs * s,
        })
    }

    fn check_basis(&self, other: &Self) -> Result<()> {
        if Arc::ptr_eq(&self.basis, &other.basis) || self.basis.same_as(&other.basis) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "basis (d={}, K={}) vs (d={}, K={})",
                self.basis.dimension, self.basis.cutoff, other.basis.dimension, other.basis.cutoff
            )))
        }
    }

    /// Per-mode Cartesian coefficients on `√2 cos` / `√2 sin`.
    pub fn to_raw(&self) -> Vec<(Wavevector, [T; 3])> {
        let b = &self.basis;
        (0..b.n_modes())
            .map(|m| {
                let mut v = [T::zero(); 3];
                for p in 0..b.n_pol() {
                    let c = self.coeffs[b.coord(m, p)];
                    for (va, &aa) in v.iter_mut().zip(b.pol[m][p].iter()) {
                        *va += c * aa;
                    }
                }
                (b.modes[m], v)
            })
            .collect()
    }

    /// `max_k |k·û_k| / |k|`; zero up to rounding for every field.
    pub fn divergence_defect(&self) -> T {
        self.to_raw()
            .iter()
            .map(|(k, v)| {
                let dot = (0..3).fold(T::zero(), |acc, a| acc + T::lit(k[a] as f64) * v[a]);
                dot.abs() / T::lit(norm_sq(k) as f64).sqrt()
            })
            .fold(T::zero(), |a, b| a.max(b))
    }

    /// CSV with header `k1,k2,k3,polarization,coefficient`.
    pub fn to_csv(&self) -> String {
        let b = &self.basis;
        let mut s = String::from("k1,k2,k3,polarization,coefficient\n");
        for m in 0..b.n_modes() {
            let k = b.modes[m];
            for p in 0..b.n_pol() {
                s.push_str(&format!(
                    "{},{},{},{},{:e}\n",
                    k[0],
                    k[1],
                    k[2],
                    p,
                    self.coeffs[b.coord(m, p)].as_f64()
                ));
            }
        }
        s
    }
}

#[derive(Serialize, Deserialize)]
struct FieldWire<T> {
    dimension: usize,
    cutoff: usize,
    coefficients: Vec<T>,
}

impl<T: Real> Serialize for VelocityField<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FieldWire {
            dimension: self.basis.dimension,
            cutoff: self.basis.cutoff,
            coefficients: self.coeffs.iter().copied().collect(),
        }
        .serialize(s)
    }
}

impl<'de, T: Real> Deserialize<'de> for VelocityField<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = FieldWire::<T>::deserialize(d)?;
        let basis = TorusBasis::new(w.dimension, w.cutoff).map_err(D::Error::custom)?;
        Self::new(Arc::new(basis), DVector::from_vec(w.coefficients)).map_err(D::Error::custom)
    }
}

/// Applies `P_k = I − kkᵀ/|k|²` mode by mode to raw Cartesian coefficients.
/// Repeated modes accumulate.
pub fn leray_project<T: Real>(
    basis: &Arc<TorusBasis<T>>,
    raw: &[(Wavevector, [T; 3])],
) -> Result<VelocityField<T>> {
    let mut coeffs = DVector::zeros(basis.n_coords());
    for (k, v) in raw {
        let m = basis.mode_index(k).ok_or_else(|| Error::ModeIndex(k.to_vec()))?;
        for p in 0..basis.n_pol() {
            let a = basis.pol[m][p];
            coeffs[basis.coord(m, p)] += a[0] * v[0] + a[1] * v[1] + a[2] * v[2];
        }
    }
    VelocityField::new(basis.clone(), coeffs)
}

/// `b(u, v) = −P(u·∇v)` truncated to the basis.
pub fn nonlinearity_b<T: Real>(u: &VelocityField<T>, v: &VelocityField<T>) -> Result<VelocityField<T>> {
    u.check_basis(v)?;
    let out = u.basis.structure().apply(&u.coeffs, &v.coeffs);
    VelocityField::new(u.basis.clone(), out)
}

/// Weights `(ν|k|²)^n` per coordinate.
pub fn sobolev_weights<T: Real>(basis: &TorusBasis<T>, n: T, nu: T) -> DVector<T> {
    DVector::from_iterator(
        basis.n_coords(),
        (0..basis.n_coords()).map(|i| (nu * basis.wavenumber_sq(basis.coord_mode(i))).powf(n)),
    )
}

/// `‖u‖_{H^n} = (Σ_k (ν|k|²)^n |û_k|²)^{1/2}`.
pub fn sobolev_norm<T: Real>(u: &VelocityField<T>, n: T, nu: T) -> T {
    sobolev_norm_coeffs(&u.basis, &u.coeffs, n, nu)
}

pub fn sobolev_norm_coeffs<T: Real>(basis: &TorusBasis<T>, c: &DVector<T>, n: T, nu: T) -> T {
    let w = sobolev_weights(basis, n, nu);
    c.iter()
        .zip(w.iter())
        .fold(T::zero(), |acc, (&x, &wi)| acc + wi * x * x)
        .sqrt()
}

/// Diagonal of the Stokes operator `A = νΔP`, i.e. `−ν|k|²` per coordinate.
pub fn stokes_diagonal<T: Real>(basis: &TorusBasis<T>, nu: T) -> DVector<T> {
    DVector::from_iterator(
        basis.n_coords(),
        (0..basis.n_coords()).map(|i| -nu * basis.wavenumber_sq(basis.coord_mode(i))),
    )
}

pub fn stokes_operator<T: Real>(basis: &TorusBasis<T>, nu: T) -> LinearOperator<T> {
    LinearOperator::new(DMatrix::from_diagonal(&stokes_diagonal(basis, nu)))
        .expect("finite diagonal")
}

/// `C = −ρ(−A)^ς + K` on the polarization coordinates.
pub fn build_c_operator<T: Real>(
    basis: &TorusBasis<T>,
    rho: T,
    varsigma: T,
    nu: T,
    perturbation: Option<&LinearOperator<T>>,
) -> Result<LinearOperator<T>> {
    if rho <= T::zero() || varsigma < T::zero() || nu <= T::zero() {
        return Err(Error::Input(format!(
            "need ρ > 0, ς ≥ 0, ν > 0; got ρ = {rho}, ς = {varsigma}, ν = {nu}"
        )));
    }
    let diag = sobolev_weights(basis, varsigma, nu) * (-rho);
    let mut c = DMatrix::from_diagonal(&diag);
    if let Some(k) = perturbation {
        if k.dim() != basis.n_coords() {
            return Err(Error::Shape(format!(
                "perturbation is {0}x{0}, basis has {1} coordinates",
                k.dim(),
                basis.n_coords()
            )));
        }
        c += k.matrix();
    }
    let c = LinearOperator::new(c)?;
    validate_generator(&c, &LinearOperator::zeros(basis.n_coords()))?;
    Ok(c)
}

/// Covariance exciting the listed modes (and their sine/cosine partners)
/// with variance `amplitude` per coordinate. Any two cosine coordinates of
/// different listed modes are correlated with coefficient `correlation`;
/// sine coordinates stay independent. The noise
/// is then not translation invariant, so `E[w ⊗ w]` varies in space.
pub fn mode_covariance<T: Real>(
    basis: &TorusBasis<T>,
    modes: &[Wavevector],
    amplitude: T,
    correlation: T,
) -> Result<LinearOperator<T>> {
    if !(amplitude >= T::zero()) {
        return Err(Error::Input(format!("amplitude must be nonnegative, got {amplitude}")));
    }
    let mut groups: Vec<[usize; 2]> = Vec::with_capacity(modes.len());
    for k in modes {
        let m = basis.mode_index(k).ok_or_else(|| Error::ModeIndex(k.to_vec()))?;
        let pair = if basis.is_cosine(m) { [m, basis.partner(m)] } else { [basis.partner(m), m] };
        if groups.contains(&pair) {
            return Err(Error::Input(format!("mode {k:?} listed twice")));
        }
        groups.push(pair);
    }
    let n = basis.n_coords();
    let mut q = DMatrix::zeros(n, n);
    for (a, ga) in groups.iter().enumerate() {
        for (b, gb) in groups.iter().enumerate() {
            for p in 0..basis.n_pol() {
                if a == b {
                    q[(basis.coord(ga[0], p), basis.coord(ga[0], p))] = amplitude;
                    q[(basis.coord(ga[1], p), basis.coord(ga[1], p))] = amplitude;
                    continue;
                }
                for p2 in 0..basis.n_pol() {
                    q[(basis.coord(ga[0], p), basis.coord(gb[0], p2))] = amplitude * correlation;
                }
            }
        }
    }
    let q = LinearOperator::new(q)?;
    crate::operators::clamped_eigen(&q)?;
    Ok(q)
}

/// Fluid parameters. `sigma` and `theta0` are carried for reference only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FluidConfig {
    pub dimension: usize,
    pub cutoff: usize,
    pub nu: f64,
    pub sobolev_index: f64,
    pub sigma: f64,
    pub theta0: f64,
}

impl Default for FluidConfig {
    fn default() -> Self {
        Self {
            dimension: 3,
            cutoff: 2,
            nu: 1.0,
            sobolev_index: 0.0,
            sigma: 4.0,
            theta0: 3.0,
        }
    }
}

impl FluidConfig {
    /// Hard errors for invalid values; returns warnings for the
    /// regularity thresholds, which have no effect on a truncated model.
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::Config(format!("viscosity must be positive, got {}", self.nu)));
        }
        if !(self.dimension == 2 || self.dimension == 3) {
            return Err(Error::Config(format!("dimension must be 2 or 3, got {}", self.dimension)));
        }
        let d = self.dimension as f64;
        let mut warnings = Vec::new();
        if self.theta0 <= d / 2.0 + 1.0 {
            warnings.push(format!("theta0 = {} is not above d/2 + 1 = {}", self.theta0, d / 2.0 + 1.0));
        }
        if self.sigma <= d / 2.0 + 2.0 {
            warnings.push(format!("sigma = {} is not above d/2 + 2 = {}", self.sigma, d / 2.0 + 2.0));
        }
        Ok(warnings)
    }

    pub fn basis<T: Real>(&self) -> Result<Arc<TorusBasis<T>>> {
        Ok(Arc::new(TorusBasis::new(self.dimension, self.cutoff)?))
    }
}
