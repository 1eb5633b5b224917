//! Two-index maps on dyadic grids, level-2 rough paths, seminorms and a
//! numerical sewing map.
//!
//! A [`TwoIndexMap`] on level `ℓ` stores `G_{t_i t_j}` for all grid pairs
//! `i ≤ j` of the `2^ℓ`-step grid on `[0, T]`; the diagonal is zero.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::UniformGrid;
use crate::operators::Tensor2;
use crate::scalar::Real;

/// Values a two-index map can hold.
pub trait PairValue<T: Real>: Clone + Send + Sync {
    fn zero_like(&self) -> Self;
    fn norm(&self) -> T;
    fn add(&self, other: &Self) -> Self;
    fn sub(&self, other: &Self) -> Self;
    fn scale(&self, s: T) -> Self;
    fn components(&self) -> Vec<T>;
    /// Same shape as `self`, entries from `c`.
    fn with_components(&self, c: &[T]) -> Self;
}

impl<T: Real> PairValue<T> for DVector<T> {
    fn zero_like(&self) -> Self {
        DVector::zeros(self.len())
    }
    fn norm(&self) -> T {
        self.norm()
    }
    fn add(&self, other: &Self) -> Self {
        self + other
    }
    fn sub(&self, other: &Self) -> Self {
        self - other
    }
    fn scale(&self, s: T) -> Self {
        self * s
    }
    fn components(&self) -> Vec<T> {
        self.iter().copied().collect()
    }
    fn with_components(&self, c: &[T]) -> Self {
        DVector::from_row_slice(c)
    }
}

impl<T: Real> PairValue<T> for Tensor2<T> {
    fn zero_like(&self) -> Self {
        Tensor2::zeros(self.dim())
    }
    fn norm(&self) -> T {
        Tensor2::norm(self)
    }
    fn add(&self, other: &Self) -> Self {
        self + other
    }
    fn sub(&self, other: &Self) -> Self {
        self - other
    }
    fn scale(&self, s: T) -> Self {
        Tensor2::scale(self, s)
    }
    fn components(&self) -> Vec<T> {
        let n = self.dim();
        (0..n).flat_map(|k| (0..n).map(move |l| (k, l))).map(|(k, l)| self.entry(k, l)).collect()
    }
    fn with_components(&self, c: &[T]) -> Self {
        let n = self.dim();
        Tensor2::from_matrix(DMatrix::from_row_slice(n, n, c)).expect("square")
    }
}

#[inline]
fn tri(i: usize, j: usize) -> usize {
    j * (j + 1) / 2 + i
}

/// `G_{st}` on every pair of a dyadic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoIndexMap<T: Real, V> {
    t_end: T,
    level: u32,
    values: Vec<V>,
}

impl<T: Real, V: PairValue<T>> TwoIndexMap<T, V> {
    /// Builds from `f(i, j)`, `i < j`; the diagonal is set to zero.
    pub fn from_fn(t_end: T, level: u32, mut f: impl FnMut(usize, usize) -> V) -> Result<Self> {
        let grid = UniformGrid::dyadic(t_end, level)?;
        let n = grid.steps();
        let zero = f(0, 1).zero_like();
        let mut values = Vec::with_capacity(tri(n, n) + 1);
        for j in 0..=n {
            for i in 0..=j {
                values.push(if i == j { zero.clone() } else { f(i, j) });
            }
        }
        Ok(Self { t_end, level, values })
    }

    /// Increments `x_j − x_i` of a path sampled at the `2^ℓ + 1` grid points.
    pub fn from_path(t_end: T, level: u32, points: &[V]) -> Result<Self> {
        if points.len() != (1usize << level) + 1 {
            return Err(Error::Grid(format!(
                "level {level} needs {} points, got {}",
                (1usize << level) + 1,
                points.len()
            )));
        }
        Self::from_fn(t_end, level, |i, j| points[j].sub(&points[i]))
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn t_end(&self) -> T {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        1usize << self.level
    }

    pub fn grid(&self) -> UniformGrid<T> {
        UniformGrid::dyadic(self.t_end, self.level).expect("validated on construction")
    }

    pub fn time(&self, i: usize) -> T {
        self.t_end * T::from_usize_lossy(i) / T::from_usize_lossy(self.steps())
    }

    /// `G_{t_i t_j}` for `i ≤ j`.
    pub fn get(&self, i: usize, j: usize) -> &V {
        assert!(i <= j && j <= self.steps(), "pair ({i}, {j}) outside grid");
        &self.values[tri(i, j)]
    }

    /// Applies `f` to every off-diagonal value.
    pub fn map_pairs<W: PairValue<T>>(&self, mut f: impl FnMut(usize, usize, &V) -> W) -> TwoIndexMap<T, W> {
        TwoIndexMap::from_fn(self.t_end, self.level, |i, j| f(i, j, self.get(i, j)))
            .expect("same grid")
    }

    /// `δG_{srt} = G_{st} − G_{sr} − G_{rt}`.
    pub fn delta(&self, s: usize, r: usize, t: usize) -> V {
        self.get(s, t).sub(self.get(s, r)).sub(self.get(r, t))
    }

    pub fn same_grid<W>(&self, other: &TwoIndexMap<T, W>) -> bool {
        self.level == other.level && self.t_end == other.t_end
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.components().iter().all(|x| x.finite()))
    }

    /// Largest value norm over pairs.
    pub fn max_norm(&self) -> T {
        self.values.iter().map(|v| v.norm()).fold(T::zero(), |a, b| a.max(b))
    }

    /// `max_{s<r<t} ‖δG_{srt}‖`; zero for additive maps.
    pub fn additivity_defect(&self) -> T {
        let n = self.steps();
        let mut worst = T::zero();
        for s in 0..n {
            for r in (s + 1)..n {
                for t in (r + 1)..=n {
                    worst = worst.max(self.delta(s, r, t).norm());
                }
            }
        }
        worst
    }

    pub fn seminorm(&self, exponent: T, mode: SeminormMode) -> T {
        holder_seminorm(self, exponent, mode)
    }

    /// JSON rows `{s, t, value}` over off-diagonal pairs.
    pub fn entries(&self) -> Vec<PairEntry> {
        let n = self.steps();
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in (i + 1)..=n {
                out.push(PairEntry {
                    s: self.time(i).as_f64(),
                    t: self.time(j).as_f64(),
                    value: self.get(i, j).components().iter().map(|v| v.as_f64()).collect(),
                });
            }
        }
        out
    }

    /// CSV `s,t,c0,c1,…` over off-diagonal pairs.
    pub fn to_csv(&self) -> String {
        let width = self.get(0, 1).components().len();
        let mut s = String::from("s,t");
        for c in 0..width {
            s.push_str(&format!(",c{c}"));
        }
        s.push('\n');
        for e in self.entries() {
            s.push_str(&format!("{:e},{:e}", e.s, e.t));
            for v in e.value {
                s.push_str(&format!(",{v:e}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub s: f64,
    pub t: f64,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeminormMode {
    Holder,
    PVariation,
}

/// Hölder mode: `sup ‖G_{st}‖/|t − s|^α` over grid pairs. Variation mode:
/// `(sup_π Σ ‖G_{t_k t_{k+1}}‖^p)^{1/p}` over partitions by grid points,
/// by dynamic programming.
pub fn holder_seminorm<T: Real, V: PairValue<T>>(g: &TwoIndexMap<T, V>, exponent: T, mode: SeminormMode) -> T {
    let n = g.steps();
    match mode {
        SeminormMode::Holder => {
            let mut worst = T::zero();
            for i in 0..n {
                for j in (i + 1)..=n {
                    let dt = g.time(j) - g.time(i);
                    worst = worst.max(g.get(i, j).norm() / dt.powf(exponent));
                }
            }
            worst
        }
        SeminormMode::PVariation => {
            let p = exponent;
            let mut best = vec![T::zero(); n + 1];
            for j in 1..=n {
                let mut b = T::zero();
                for i in 0..j {
                    b = b.max(best[i] + g.get(i, j).norm().powf(p));
                }
                best[j] = b;
            }
            best[n].powf(T::one() / p)
        }
    }
}

/// Level-1 increments and level-2 iterated integrals on a dyadic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RoughPath<T: Real> {
    pub level1: TwoIndexMap<T, DVector<T>>,
    pub level2: TwoIndexMap<T, Tensor2<T>>,
    pub alpha: T,
}

pub const DEFAULT_ALPHA: f64 = 0.4;

pub fn check_alpha<T: Real>(alpha: T) -> Result<()> {
    if !(alpha > T::one() / T::lit(3.0) && alpha < T::lit(0.5)) {
        return Err(Error::Input(format!("Hölder exponent must lie in (1/3, 1/2), got {alpha}")));
    }
    Ok(())
}

impl<T: Real> RoughPath<T> {
    /// Chen aggregation of per-fine-interval data: `fine_increments` holds
    /// one increment per column and `fine_level2(k, Δx_k)` the level-2 value
    /// of fine interval `k`.
    pub fn from_fine(
        t_end: T,
        fine_increments: &DMatrix<T>,
        mut fine_level2: impl FnMut(usize, &DVector<T>) -> Tensor2<T>,
        coarse_level: u32,
    ) -> Result<Self> {
        let nf = fine_increments.ncols();
        let d = fine_increments.nrows();
        let coarse = UniformGrid::dyadic(t_end, coarse_level)?;
        let fine = UniformGrid::new(t_end, nf.max(1))?;
        let r = fine.refinement_of(&coarse)?;
        let n = coarse.steps();
        let mut l1 = Vec::with_capacity(n);
        let mut l2 = Vec::with_capacity(n);
        for k in 0..n {
            let mut a1 = DVector::zeros(d);
            let mut a2 = Tensor2::zeros(d);
            for f in k * r..(k + 1) * r {
                let dx: DVector<T> = fine_increments.column(f).into_owned();
                let x2 = fine_level2(f, &dx);
                a2 = &a2 + &x2;
                a2.add_outer(&a1, &dx, T::one());
                a1 += &dx;
            }
            l1.push(a1);
            l2.push(a2);
        }
        Self::from_steps(t_end, coarse_level, &l1, &l2)
    }

    /// All pairs from consecutive coarse steps by Chen's relation.
    pub fn from_steps(t_end: T, level: u32, l1: &[DVector<T>], l2: &[Tensor2<T>]) -> Result<Self> {
        let n = 1usize << level;
        if l1.len() != n || l2.len() != n {
            return Err(Error::Grid(format!("level {level} needs {n} steps")));
        }
        let d = l1[0].len();
        let mut v1 = Vec::with_capacity(tri(n, n) + 1);
        let mut v2 = Vec::with_capacity(tri(n, n) + 1);
        // Row i holds (i, j) for j ≥ i; re-index into column-triangular storage.
        let mut rows1: Vec<Vec<DVector<T>>> = Vec::with_capacity(n + 1);
        let mut rows2: Vec<Vec<Tensor2<T>>> = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let mut a1 = DVector::zeros(d);
            let mut a2 = Tensor2::zeros(d);
            let mut r1 = vec![a1.clone()];
            let mut r2 = vec![a2.clone()];
            for j in (i + 1)..=n {
                a2 = &a2 + &l2[j - 1];
                a2.add_outer(&a1, &l1[j - 1], T::one());
                a1 += &l1[j - 1];
                r1.push(a1.clone());
                r2.push(a2.clone());
            }
            rows1.push(r1);
            rows2.push(r2);
        }
        for j in 0..=n {
            for i in 0..=j {
                v1.push(rows1[i][j - i].clone());
                v2.push(rows2[i][j - i].clone());
            }
        }
        Ok(Self {
            level1: TwoIndexMap { t_end, level, values: v1 },
            level2: TwoIndexMap { t_end, level, values: v2 },
            alpha: T::lit(DEFAULT_ALPHA),
        })
    }

    pub fn with_alpha(mut self, alpha: T) -> Result<Self> {
        check_alpha(alpha)?;
        self.alpha = alpha;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.level1.get(0, 1).len()
    }

    pub fn steps(&self) -> usize {
        self.level1.steps()
    }

    /// `max_{s<r<t} ‖δY²_{srt} − Y¹_{sr} ⊗ Y¹_{rt}‖`.
    pub fn chen_defect(&self) -> T {
        let n = self.steps();
        let mut worst = T::zero();
        for s in 0..n {
            for r in (s + 1)..n {
                for t in (r + 1)..=n {
                    let mut d = self.level2.delta(s, r, t);
                    d.add_outer(self.level1.get(s, r), self.level1.get(r, t), -T::one());
                    worst = worst.max(d.norm());
                }
            }
        }
        worst
    }

    /// `max_{s<t} ‖Sym(Y²_{st}) − ½ Y¹_{st} ⊗ Y¹_{st}‖`.
    pub fn geometric_defect(&self) -> T {
        let n = self.steps();
        let mut worst = T::zero();
        for s in 0..n {
            for t in (s + 1)..=n {
                let x = self.level1.get(s, t);
                let mut d = self.level2.get(s, t).symmetric_part();
                d.add_outer(x, x, -T::lit(0.5));
                worst = worst.max(d.norm());
            }
        }
        worst
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "grid": self.level1.grid().times().iter().map(|t| t.as_f64()).collect::<Vec<_>>(),
            "alpha": self.alpha.as_f64(),
            "dim": self.dim(),
            "level1": self.level1.entries(),
            "level2": self.level2.entries(),
        })
    }

    /// CSV `s,t,x*,xx*` with level-2 entries row-major.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut s = String::from("s,t");
        for i in 0..d {
            s.push_str(&format!(",x{i}"));
        }
        for k in 0..d {
            for l in 0..d {
                s.push_str(&format!(",xx{k}_{l}"));
            }
        }
        s.push('\n');
        for (a, b) in self.level1.entries().into_iter().zip(self.level2.entries()) {
            s.push_str(&format!("{:e},{:e}", a.s, a.t));
            for v in a.value.iter().chain(b.value.iter()) {
                s.push_str(&format!(",{v:e}"));
            }
            s.push('\n');
        }
        s
    }
}

fn fine_increments<T: Real>(samples: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = samples.ncols();
    if n < 2 {
        return Err(Error::Grid("need at least two samples".into()));
    }
    Ok(samples.columns(1, n - 1) - samples.columns(0, n - 1))
}

/// Lift of the piecewise-linear interpolation of `samples` (one column per
/// fine grid point): each fine interval contributes `½Δy ⊗ Δy`.
pub fn canonical_lift<T: Real>(samples: &DMatrix<T>, t_end: T, coarse_level: u32) -> Result<RoughPath<T>> {
    let inc = fine_increments(samples)?;
    RoughPath::from_fine(t_end, &inc, |_, dx| Tensor2::outer(dx, dx).scale(T::lit(0.5)), coarse_level)
}

/// Lift of a differentiable path from samples and derivatives, using the
/// trapezoid rule on `∫_s^t δy_{sr} ⊗ ẏ_r dr` over each fine interval.
pub fn canonical_lift_with_velocity<T: Real>(
    samples: &DMatrix<T>,
    velocities: &DMatrix<T>,
    t_end: T,
    coarse_level: u32,
) -> Result<RoughPath<T>> {
    if velocities.shape() != samples.shape() {
        return Err(Error::Shape("samples and velocities differ in shape".into()));
    }
    let inc = fine_increments(samples)?;
    let h = t_end / T::from_usize_lossy(inc.ncols());
    RoughPath::from_fine(
        t_end,
        &inc,
        |k, dx| Tensor2::outer(dx, &velocities.column(k + 1).into_owned()).scale(h * T::lit(0.5)),
        coarse_level,
    )
}

pub fn chen_defect<T: Real>(rp: &RoughPath<T>) -> T {
    rp.chen_defect()
}

/// `‖X¹ − Y¹‖_α + ‖X² − Y²‖_{2α}`.
pub fn rough_distance<T: Real>(x: &RoughPath<T>, y: &RoughPath<T>, alpha: T) -> Result<T> {
    if !x.level1.same_grid(&y.level1) || x.dim() != y.dim() {
        return Err(Error::Grid("rough paths live on different grids or dimensions".into()));
    }
    let d1 = x.level1.map_pairs(|i, j, v| v - y.level1.get(i, j));
    let d2 = x.level2.map_pairs(|i, j, v| v - y.level2.get(i, j));
    Ok(holder_seminorm(&d1, alpha, SeminormMode::Holder)
        + holder_seminorm(&d2, alpha * T::lit(2.0), SeminormMode::Holder))
}

/// Additive map from one level of dyadic Riemann sums of the germ:
/// `Σ Ξ_{uv}` over the `2^refine` subintervals of each target step.
pub fn sewing_sum<T: Real, V: PairValue<T>>(
    germ: &impl Fn(T, T) -> V,
    t_end: T,
    target_level: u32,
    refine: u32,
) -> Result<TwoIndexMap<T, V>> {
    let steps = level_sums(germ, t_end, target_level, refine);
    additive_from_steps(t_end, target_level, &steps)
}

fn level_sums<T: Real, V: PairValue<T>>(germ: &impl Fn(T, T) -> V, t_end: T, target: u32, refine: u32) -> Vec<V> {
    let n = 1usize << target;
    let m = 1usize << refine;
    let h = t_end / T::from_usize_lossy(n * m);
    (0..n)
        .map(|k| {
            let mut acc = germ(T::zero(), T::zero()).zero_like();
            for f in 0..m {
                let s = h * T::from_usize_lossy(k * m + f);
                acc = acc.add(&germ(s, s + h));
            }
            acc
        })
        .collect()
}

fn additive_from_steps<T: Real, V: PairValue<T>>(t_end: T, level: u32, steps: &[V]) -> Result<TwoIndexMap<T, V>> {
    let mut prefix = vec![steps[0].zero_like()];
    for s in steps {
        let next = prefix.last().expect("nonempty").add(s);
        prefix.push(next);
    }
    TwoIndexMap::from_fn(t_end, level, |i, j| prefix[j].sub(&prefix[i]))
}

/// Wynn's ε-algorithm; returns the deepest even-column estimate.
fn wynn<T: Real>(seq: &[T]) -> T {
    let mut best = *seq.last().expect("nonempty");
    let mut prev: Vec<T> = vec![T::zero(); seq.len() + 1];
    let mut cur: Vec<T> = seq.to_vec();
    let mut col = 0;
    let tiny = T::default_epsilon() * T::lit(16.0);
    while cur.len() > 1 {
        let mut next = Vec::with_capacity(cur.len() - 1);
        for n in 0..cur.len() - 1 {
            let d = cur[n + 1] - cur[n];
            let scale = cur[n + 1].abs().max(cur[n].abs());
            if d.abs() <= tiny * scale {
                return if col % 2 == 0 { cur[cur.len() - 1] } else { best };
            }
            next.push(prev[n + 1] + T::one() / d);
        }
        prev = cur;
        cur = next;
        col += 1;
        if col % 2 == 0 {
            best = cur[cur.len() - 1];
        }
    }
    best
}

/// Limits of the dyadic Riemann sums `Σ Ξ_{uv}` on each step of the
/// target grid, accelerated by Wynn's ε-algorithm; stops once successive
/// estimates agree to `tol` in every component.
///
/// The germ's defect `δΞ_{s,m,t}` must vanish faster than `|t − s|`.
pub fn sewing_integrate<T: Real, V: PairValue<T>>(
    germ: &impl Fn(T, T) -> V,
    t_end: T,
    target_level: u32,
    tol: T,
) -> Result<TwoIndexMap<T, V>> {
    const MAX_REFINE: u32 = 20;
    const MIN_REFINE: u32 = 4;
    let n = 1usize << target_level;
    if UniformGrid::dyadic(t_end, target_level).is_err() {
        return Err(Error::Grid(format!("invalid target level {target_level}")));
    }
    check_defect_exponent(germ, t_end, target_level)?;

    let mut history: Vec<Vec<Vec<T>>> = Vec::new();
    let mut last_estimate: Option<Vec<Vec<T>>> = None;
    let mut last_diff: Option<T> = None;
    let mut growth = 0;
    for refine in 0..=MAX_REFINE {
        let sums: Vec<Vec<T>> = level_sums(germ, t_end, target_level, refine)
            .iter()
            .map(|v| v.components())
            .collect();
        if let Some(prev) = history.last() {
            let diff = max_diff(prev, &sums);
            if let Some(ld) = last_diff {
                if diff >= ld && diff > tol {
                    growth += 1;
                } else {
                    growth = 0;
                }
                if growth >= 3 {
                    return Err(Error::SewingDivergence(format!(
                        "dyadic sums stop contracting at refinement {refine} (change {diff})"
                    )));
                }
            }
            last_diff = Some(diff);
        }
        history.push(sums);
        let estimate: Vec<Vec<T>> = (0..n)
            .map(|k| {
                let width = history[0][k].len();
                (0..width)
                    .map(|c| wynn(&history.iter().map(|h| h[k][c]).collect::<Vec<_>>()))
                    .collect()
            })
            .collect();
        let additive = last_diff.is_some_and(|d| d == T::zero());
        let converged = last_estimate.as_ref().is_some_and(|le| max_diff(le, &estimate) <= tol);
        if additive || (refine >= MIN_REFINE && converged) {
            let template = germ(T::zero(), t_end);
            let steps: Vec<V> = estimate.iter().map(|c| template.with_components(c)).collect();
            return additive_from_steps(t_end, target_level, &steps);
        }
        last_estimate = Some(estimate);
    }
    Err(Error::SewingDivergence(format!(
        "no convergence to {tol} after {MAX_REFINE} refinements"
    )))
}

fn max_diff<T: Real>(a: &[Vec<T>], b: &[Vec<T>]) -> T {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (*p - *q).abs()))
        .fold(T::zero(), |m, v| m.max(v))
}

/// Rejects germs whose midpoint defect does not decay faster than the
/// interval length between two fine dyadic levels.
fn check_defect_exponent<T: Real, V: PairValue<T>>(germ: &impl Fn(T, T) -> V, t_end: T, target: u32) -> Result<()> {
    let defect = |level: u32| {
        let n = 1usize << level;
        let h = t_end / T::from_usize_lossy(n);
        (0..n)
            .map(|k| {
                let s = h * T::from_usize_lossy(k);
                let m = s + h * T::lit(0.5);
                germ(s, s + h).sub(&germ(s, m)).sub(&germ(m, s + h)).norm()
            })
            .fold(T::zero(), |a, b| a.max(b))
    };
    let (l0, l1) = (target + 6, target + 8);
    let (d0, d1) = (defect(l0), defect(l1));
    let scale = germ(T::zero(), t_end).norm().max(T::one());
    if d0 <= T::default_epsilon() * T::lit(1e3) * scale {
        return Ok(());
    }
    let z = (d0 / d1).ln() / (T::lit(2.0) * T::lit(2.0).ln());
    if !(z > T::one() + T::lit(0.05)) {
        return Err(Error::SewingDivergence(format!(
            "germ defect decays like |t − s|^{z:.3}, needs an exponent above 1"
        )));
    }
    Ok(())
}
