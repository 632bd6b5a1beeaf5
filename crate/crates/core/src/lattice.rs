//! Integer-lattice blocks, the main/remainder block decomposition, and exact
//! covariance accounting for block sums under a stationary covariance model.
//!
//! Blocks are always described by a corner and per-axis side lengths. Point
//! sets are never materialized here; covariances of box sums are evaluated in
//! the weighted-offset form
//!
//! ```text
//! Cov(S_box1, S_box2) = sum_a  prod_s w_s(a_s) * R(a + c2 - c1)
//! ```
//!
//! where `w_s(a)` counts the index pairs on axis `s` at offset `a`. For two
//! cubes of side `n` this is `prod_s (n - |a_s|)` over `a in (-n, n)^d`.

use std::fmt;
use std::ops::Sub;
use std::sync::Arc;

use thiserror::Error;

/// Default radius (in `|k|_1`) of the finite certificate set on which a
/// [`CovarianceModel`] is checked.
pub const DEFAULT_CERTIFICATE_RADIUS: i64 = 30;

/// Default floor below which `A_n` is flagged as degenerate.
pub const DEFAULT_AN_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("block length l = {l} must satisfy 1 <= l <= n = {n}")]
    BlockLength { n: usize, l: usize },
    #[error("block side must be positive")]
    ZeroSide,
    #[error("field shape {field:?} does not contain cell at {corner:?} with sides {sides:?}")]
    ShapeMismatch {
        field: Vec<usize>,
        corner: Vec<i64>,
        sides: Vec<usize>,
    },
    #[error("field has {got} values but shape requires {expected}")]
    ValueCount { expected: usize, got: usize },
    #[error("covariance model violates {invariant} at k = {k:?}")]
    ModelInvariant { invariant: &'static str, k: Vec<i64> },
    #[error("invalid model parameter: {0}")]
    Parameter(&'static str),
}

/// A point of `Z^d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LatticeVector(pub Vec<i64>);

impl LatticeVector {
    pub fn zero(dim: usize) -> Self {
        LatticeVector(vec![0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn l1_norm(&self) -> i64 {
        self.0.iter().map(|c| c.abs()).sum()
    }

    pub fn linf_norm(&self) -> i64 {
        self.0.iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }
}

impl From<Vec<i64>> for LatticeVector {
    fn from(v: Vec<i64>) -> Self {
        LatticeVector(v)
    }
}

impl Sub for &LatticeVector {
    type Output = LatticeVector;

    fn sub(self, rhs: &LatticeVector) -> LatticeVector {
        LatticeVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

impl fmt::Display for LatticeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// An axis-aligned box `{ j : corner <= j < corner + sides }`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub corner: Vec<i64>,
    pub sides: Vec<usize>,
}

impl Cell {
    pub fn cube(corner: &LatticeVector, side: usize) -> Self {
        Cell {
            corner: corner.0.clone(),
            sides: vec![side; corner.dim()],
        }
    }

    pub fn dim(&self) -> usize {
        self.corner.len()
    }

    pub fn volume(&self) -> usize {
        self.sides.iter().product()
    }

    pub fn contains(&self, point: &[i64]) -> bool {
        point
            .iter()
            .zip(&self.corner)
            .zip(&self.sides)
            .all(|((&p, &c), &s)| p >= c && p < c + s as i64)
    }

    pub fn translated(&self, by: &[i64]) -> Cell {
        Cell {
            corner: self.corner.iter().zip(by).map(|(c, b)| c + b).collect(),
            sides: self.sides.clone(),
        }
    }
}

/// The block `B_k^n`: a cube of side `n` cornered at `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub corner: LatticeVector,
    pub side: usize,
}

impl BlockSpec {
    pub fn new(corner: LatticeVector, side: usize) -> Result<Self, LatticeError> {
        if corner.dim() == 0 {
            return Err(LatticeError::ZeroDimension);
        }
        if side == 0 {
            return Err(LatticeError::ZeroSide);
        }
        Ok(BlockSpec { corner, side })
    }

    pub fn dim(&self) -> usize {
        self.corner.dim()
    }

    pub fn cardinality(&self) -> usize {
        self.side.pow(self.dim() as u32)
    }

    pub fn cell(&self) -> Cell {
        Cell::cube(&self.corner, self.side)
    }
}

type CovarianceFn = dyn Fn(&[i64]) -> f64 + Send + Sync;

/// A stationary covariance function `R: Z^d -> R` together with the
/// exponential decay certificate `-R(k) <= kappa0 * exp(-lambda |k|_1)`.
///
/// `kappa0 == 0` denotes an uncorrelated field (only `R(0)` is nonzero).
#[derive(Clone)]
pub struct CovarianceModel {
    dim: usize,
    kappa0: f64,
    lambda: f64,
    eval: Arc<CovarianceFn>,
}

impl fmt::Debug for CovarianceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CovarianceModel")
            .field("dim", &self.dim)
            .field("kappa0", &self.kappa0)
            .field("lambda", &self.lambda)
            .field("variance_at_zero", &self.variance_at_zero())
            .finish()
    }
}

impl CovarianceModel {
    /// Builds a model and checks symmetry, the NA sign condition and the decay
    /// certificate on `{ k : |k|_1 <= DEFAULT_CERTIFICATE_RADIUS }`.
    pub fn new<F>(dim: usize, kappa0: f64, lambda: f64, eval: F) -> Result<Self, LatticeError>
    where
        F: Fn(&[i64]) -> f64 + Send + Sync + 'static,
    {
        Self::with_certificate_radius(dim, kappa0, lambda, eval, DEFAULT_CERTIFICATE_RADIUS)
    }

    pub fn with_certificate_radius<F>(
        dim: usize,
        kappa0: f64,
        lambda: f64,
        eval: F,
        radius: i64,
    ) -> Result<Self, LatticeError>
    where
        F: Fn(&[i64]) -> f64 + Send + Sync + 'static,
    {
        if dim == 0 {
            return Err(LatticeError::ZeroDimension);
        }
        if !(kappa0 >= 0.0 && kappa0.is_finite()) {
            return Err(LatticeError::Parameter("kappa0 must be finite and nonnegative"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(LatticeError::Parameter("lambda must be finite and positive"));
        }
        let model = CovarianceModel {
            dim,
            kappa0,
            lambda,
            eval: Arc::new(eval),
        };
        model.check_certificate(radius)?;
        Ok(model)
    }

    /// Uncorrelated field with `R(0) = variance`.
    pub fn iid(variance: f64, dim: usize) -> Result<Self, LatticeError> {
        Self::new(dim, 0.0, 1.0, move |k: &[i64]| {
            if k.iter().all(|&c| c == 0) {
                variance
            } else {
                0.0
            }
        })
    }

    /// The model saturating the decay certificate:
    /// `R(k) = -kappa0 * exp(-lambda |k|_1)` for `k != 0`, `R(0) = r0`.
    pub fn extremal(kappa0: f64, lambda: f64, r0: f64, dim: usize) -> Result<Self, LatticeError> {
        Self::new(dim, kappa0, lambda, move |k: &[i64]| {
            let l1: i64 = k.iter().map(|c| c.abs()).sum();
            if l1 == 0 {
                r0
            } else {
                -kappa0 * (-lambda * l1 as f64).exp()
            }
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kappa0(&self) -> f64 {
        self.kappa0
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_uncorrelated(&self) -> bool {
        self.kappa0 == 0.0
    }

    pub fn variance_at_zero(&self) -> f64 {
        (self.eval)(&vec![0; self.dim])
    }

    #[inline]
    pub fn eval(&self, k: &[i64]) -> f64 {
        (self.eval)(k)
    }

    fn check_certificate(&self, radius: i64) -> Result<(), LatticeError> {
        let zero = vec![0; self.dim];
        if !(self.variance_at_zero() > 0.0) {
            return Err(LatticeError::ModelInvariant {
                invariant: "R(0) > 0",
                k: zero,
            });
        }
        let mut failure = None;
        for_each_in_l1_ball(self.dim, radius, |k| {
            if failure.is_some() || k.iter().all(|&c| c == 0) {
                return;
            }
            let r = self.eval(k);
            let neg: Vec<i64> = k.iter().map(|c| -c).collect();
            let r_neg = self.eval(&neg);
            let l1: i64 = k.iter().map(|c| c.abs()).sum();
            let envelope = self.kappa0 * (-self.lambda * l1 as f64).exp();
            if (r - r_neg).abs() > 1e-14 * r.abs().max(1e-300) {
                failure = Some(("symmetry R(k) = R(-k)", k.to_vec()));
            } else if r > 0.0 {
                failure = Some(("NA sign R(k) <= 0", k.to_vec()));
            } else if -r > envelope * (1.0 + 1e-12) {
                failure = Some(("decay certificate -R(k) <= kappa0 exp(-lambda |k|_1)", k.to_vec()));
            }
        });
        match failure {
            Some((invariant, k)) => Err(LatticeError::ModelInvariant { invariant, k }),
            None => Ok(()),
        }
    }
}

/// Visits every `k` with `|k|_1 <= radius`.
fn for_each_in_l1_ball(dim: usize, radius: i64, mut f: impl FnMut(&[i64])) {
    let mut k = vec![0i64; dim];
    fn rec(axis: usize, budget: i64, k: &mut Vec<i64>, f: &mut dyn FnMut(&[i64])) {
        if axis == k.len() {
            f(k);
            return;
        }
        for c in -budget..=budget {
            k[axis] = c;
            rec(axis + 1, budget - c.abs(), k, f);
        }
        k[axis] = 0;
    }
    rec(0, radius, &mut k, &mut f);
}

/// One cell of a [`BlockPartition`], with offsets relative to the block corner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionCell {
    /// Multi-index `i` in `[m]^d`, zero-based.
    pub index: Vec<usize>,
    pub cell: Cell,
    /// All sides equal to `l` and the index avoids the last slot on every axis.
    pub main: bool,
}

/// Decomposition of a side-`n` block into `m^d` sub-blocks, with
/// `n = (m - 1) l + r` and `1 <= r <= l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    pub n: usize,
    pub l: usize,
    pub m: usize,
    pub r: usize,
    pub dim: usize,
    pub cells: Vec<PartitionCell>,
}

impl BlockPartition {
    pub fn main_cells(&self) -> impl Iterator<Item = &PartitionCell> {
        self.cells.iter().filter(|c| c.main)
    }

    /// Cells placed at the corner of `block`.
    pub fn cells_at(&self, block: &BlockSpec) -> Vec<Cell> {
        self.cells.iter().map(|c| c.cell.translated(&block.corner.0)).collect()
    }
}

/// Splits `B^n` into main blocks of side `l` and remainder blocks with at
/// least one side `r`. Cells are listed in row-major order of their index.
pub fn decompose_block(n: usize, l: usize, dim: usize) -> Result<BlockPartition, LatticeError> {
    if dim == 0 {
        return Err(LatticeError::ZeroDimension);
    }
    if l == 0 || l > n {
        return Err(LatticeError::BlockLength { n, l });
    }
    let m = (n - 1) / l + 1;
    let r = n - (m - 1) * l;
    debug_assert!(r >= 1 && r <= l);

    let total = m.pow(dim as u32);
    let mut cells = Vec::with_capacity(total);
    let mut index = vec![0usize; dim];
    for _ in 0..total {
        let corner = index.iter().map(|&i| (i * l) as i64).collect();
        let sides = index.iter().map(|&i| if i + 1 == m { r } else { l }).collect();
        let main = index.iter().all(|&i| i + 1 < m);
        cells.push(PartitionCell {
            index: index.clone(),
            cell: Cell { corner, sides },
            main,
        });
        for axis in (0..dim).rev() {
            index[axis] += 1;
            if index[axis] < m {
                break;
            }
            index[axis] = 0;
        }
    }
    Ok(BlockPartition {
        n,
        l,
        m,
        r,
        dim,
        cells,
    })
}

/// Number of pairs `(p, q)` with `0 <= p < len1`, `0 <= q < len2`, `q - p = a`.
#[inline]
fn pair_weight(len1: usize, len2: usize, a: i64) -> i64 {
    let lo = 0.max(-a);
    let hi = (len1 as i64).min(len2 as i64 - a);
    (hi - lo).max(0)
}

/// Exact `Cov(sum over box1, sum over box2)` under `model`.
pub fn box_cov_exact(model: &CovarianceModel, box1: &Cell, box2: &Cell) -> Result<f64, LatticeError> {
    let dim = model.dim();
    for b in [box1, box2] {
        if b.dim() != dim || b.sides.len() != dim {
            return Err(LatticeError::DimensionMismatch {
                expected: dim,
                got: b.dim(),
            });
        }
    }
    // Per axis: offset range and weights.
    let axes: Vec<(i64, Vec<i64>)> = (0..dim)
        .map(|s| {
            let (l1, l2) = (box1.sides[s], box2.sides[s]);
            let lo = -(l1 as i64 - 1);
            let hi = l2 as i64 - 1;
            (lo, (lo..=hi).map(|a| pair_weight(l1, l2, a)).collect())
        })
        .collect();
    let shift: Vec<i64> = box2.corner.iter().zip(&box1.corner).map(|(b, a)| b - a).collect();

    let mut counter = vec![0usize; dim];
    let mut point = vec![0i64; dim];
    let mut total = 0.0;
    'outer: loop {
        let mut weight = 1i64;
        for s in 0..dim {
            weight *= axes[s].1[counter[s]];
            point[s] = axes[s].0 + counter[s] as i64 + shift[s];
        }
        if weight != 0 {
            total += weight as f64 * model.eval(&point);
        }
        for s in (0..dim).rev() {
            counter[s] += 1;
            if counter[s] < axes[s].1.len() {
                continue 'outer;
            }
            counter[s] = 0;
        }
        break;
    }
    Ok(total)
}

/// Exact `Cov(S_{k1}^n, S_{k2}^n)`.
pub fn block_cov_exact(
    model: &CovarianceModel,
    k1: &LatticeVector,
    k2: &LatticeVector,
    n: usize,
) -> Result<f64, LatticeError> {
    if n == 0 {
        return Err(LatticeError::ZeroSide);
    }
    box_cov_exact(model, &Cell::cube(k1, n), &Cell::cube(k2, n))
}

/// `A_n = Var(S^n) / n^d`.
pub fn compute_an(model: &CovarianceModel, n: usize) -> Result<f64, LatticeError> {
    let origin = LatticeVector::zero(model.dim());
    let var = block_cov_exact(model, &origin, &origin, n)?;
    Ok(var / (n as f64).powi(model.dim() as i32))
}

/// `A_n` together with the degeneracy flag against a floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnValue {
    pub n: usize,
    pub value: f64,
    pub below_floor: bool,
}

pub fn an_with_floor(model: &CovarianceModel, n: usize, floor: f64) -> Result<AnValue, LatticeError> {
    let value = compute_an(model, n)?;
    Ok(AnValue {
        n,
        value,
        below_floor: !(value >= floor),
    })
}

/// `sum_{k in Z^d} R(k)`, the limit of `A_n`. For models with `R(k) <= 0` off
/// the origin, `A_n` decreases to this value, so it equals `inf_n A_n`.
///
/// The lattice sum is truncated once the decay envelope of the remaining
/// shells drops below `1e-17 * R(0)`.
pub fn lattice_sum(model: &CovarianceModel) -> f64 {
    let r0 = model.variance_at_zero();
    if model.is_uncorrelated() {
        return r0;
    }
    let d = model.dim() as i32;
    let lambda = model.lambda();
    // Shell |k|_1 = t holds at most 2^d (t+1)^(d-1) points.
    let shell_bound = |t: i64| {
        model.kappa0() * 2f64.powi(d) * ((t + 1) as f64).powi(d - 1) * (-lambda * t as f64).exp()
    };
    let q = (-lambda).exp();
    // Past the peak of the shell envelope the remaining shells are dominated
    // by a geometric series with ratio at most (1 + q) / 2.
    let peak = ((d - 1) as f64 / lambda).ceil() as i64;
    let ratio = 0.5 * (1.0 + q);
    let mut radius = 1;
    while radius < 1_000_000 {
        let next = radius + 1;
        if next > peak
            && shell_bound(next + 1) <= ratio * shell_bound(next)
            && shell_bound(next) / (1.0 - ratio) < 1e-17 * r0
        {
            break;
        }
        radius = next;
    }
    let mut total = 0.0;
    for_each_in_l1_ball(model.dim(), radius, |k| total += model.eval(k));
    total
}

/// Values of a field on a box, stored row-major with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeField {
    pub origin: LatticeVector,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl LatticeField {
    pub fn new(origin: LatticeVector, shape: Vec<usize>, values: Vec<f64>) -> Result<Self, LatticeError> {
        if origin.dim() != shape.len() {
            return Err(LatticeError::DimensionMismatch {
                expected: shape.len(),
                got: origin.dim(),
            });
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(LatticeError::ValueCount {
                expected,
                got: values.len(),
            });
        }
        Ok(LatticeField { origin, shape, values })
    }

    /// A field on the block `B_0^n`.
    pub fn on_block(dim: usize, side: usize, values: Vec<f64>) -> Result<Self, LatticeError> {
        Self::new(LatticeVector::zero(dim), vec![side; dim], values)
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn get(&self, point: &[i64]) -> Option<f64> {
        let mut idx = 0usize;
        for ((&p, &o), &s) in point.iter().zip(&self.origin.0).zip(&self.shape) {
            let rel = p - o;
            if rel < 0 || rel >= s as i64 {
                return None;
            }
            idx = idx * s + rel as usize;
        }
        Some(self.values[idx])
    }

    /// Sum of `values - mean` over `cell` (absolute coordinates).
    pub fn centered_box_sum(&self, cell: &Cell, mean: f64) -> Result<f64, LatticeError> {
        self.box_sum(cell).map(|s| s - mean * cell.volume() as f64)
    }

    pub fn box_sum(&self, cell: &Cell) -> Result<f64, LatticeError> {
        let d = self.dim();
        let inside = cell.dim() == d
            && (0..d).all(|s| {
                let rel = cell.corner[s] - self.origin.0[s];
                rel >= 0 && rel as usize + cell.sides[s] <= self.shape[s]
            });
        if !inside {
            return Err(LatticeError::ShapeMismatch {
                field: self.shape.clone(),
                corner: cell.corner.clone(),
                sides: cell.sides.clone(),
            });
        }
        if cell.volume() == 0 {
            return Ok(0.0);
        }
        // Iterate all rows along the last axis.
        let last = d - 1;
        let rel: Vec<usize> = (0..d).map(|s| (cell.corner[s] - self.origin.0[s]) as usize).collect();
        let mut counter = vec![0usize; last];
        let mut total = 0.0;
        loop {
            let mut idx = 0usize;
            for s in 0..last {
                idx = idx * self.shape[s] + rel[s] + counter[s];
            }
            idx = idx * self.shape[last] + rel[last];
            total += self.values[idx..idx + cell.sides[last]].iter().sum::<f64>();
            let mut done = true;
            for s in (0..last).rev() {
                counter[s] += 1;
                if counter[s] < cell.sides[s] {
                    done = false;
                    break;
                }
                counter[s] = 0;
            }
            if done {
                break;
            }
        }
        Ok(total)
    }
}

/// Centered sub-block sums `xi_i` of `field` over the cells of `partition`
/// placed at the field origin. Their total equals the centered block sum.
pub fn block_sum_xi(field: &LatticeField, partition: &BlockPartition, mean: f64) -> Result<Vec<f64>, LatticeError> {
    if field.dim() != partition.dim {
        return Err(LatticeError::DimensionMismatch {
            expected: partition.dim,
            got: field.dim(),
        });
    }
    if field.shape.iter().any(|&s| s != partition.n) {
        return Err(LatticeError::ShapeMismatch {
            field: field.shape.clone(),
            corner: field.origin.0.clone(),
            sides: vec![partition.n; partition.dim],
        });
    }
    partition
        .cells
        .iter()
        .map(|c| field.centered_box_sum(&c.cell.translated(&field.origin.0), mean))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_points(n: usize, dim: usize) -> Vec<Vec<i64>> {
        let mut pts = vec![vec![]];
        for _ in 0..dim {
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    (0..n as i64).map(move |c| {
                        let mut q = p.clone();
                        q.push(c);
                        q
                    })
                })
                .collect();
        }
        pts
    }

    fn naive_an(model: &CovarianceModel, n: usize) -> f64 {
        let pts = all_points(n, model.dim());
        let mut s = 0.0;
        for i in &pts {
            for j in &pts {
                let diff: Vec<i64> = i.iter().zip(j).map(|(a, b)| a - b).collect();
                s += model.eval(&diff);
            }
        }
        s / (n as f64).powi(model.dim() as i32)
    }

    #[test]
    fn decompose_one_dimensional_cases() {
        let p = decompose_block(5, 2, 1).unwrap();
        assert_eq!((p.m, p.r), (3, 1));
        let sides: Vec<usize> = p.cells.iter().map(|c| c.cell.sides[0]).collect();
        assert_eq!(sides, vec![2, 2, 1]);

        let p = decompose_block(4, 2, 1).unwrap();
        assert_eq!((p.m, p.r), (2, 2));
        assert_eq!(p.cells.len(), 2);
        assert!(p.cells.iter().all(|c| c.cell.sides == vec![2]));

        let p = decompose_block(7, 7, 1).unwrap();
        assert_eq!((p.m, p.r, p.cells.len()), (1, 7, 1));
    }

    #[test]
    fn decompose_two_dimensional_by_brute_force() {
        let p = decompose_block(5, 2, 2).unwrap();
        assert_eq!(p.cells.len(), 9);
        assert_eq!(p.main_cells().count(), 4);
        assert!(p.main_cells().all(|c| c.cell.sides == vec![2, 2]));
        let edges = p
            .cells
            .iter()
            .filter(|c| c.cell.sides == vec![2, 1] || c.cell.sides == vec![1, 2])
            .count();
        assert_eq!(edges, 4);
        assert_eq!(p.cells.iter().filter(|c| c.cell.sides == vec![1, 1]).count(), 1);
        let area: usize = p.cells.iter().map(|c| c.cell.volume()).sum();
        assert_eq!(area, 25);
        for pt in all_points(5, 2) {
            assert_eq!(p.cells.iter().filter(|c| c.cell.contains(&pt)).count(), 1);
        }
    }

    #[test]
    fn decompose_rejects_bad_lengths() {
        assert!(matches!(decompose_block(5, 0, 1), Err(LatticeError::BlockLength { .. })));
        assert!(matches!(decompose_block(5, 6, 1), Err(LatticeError::BlockLength { .. })));
        assert!(matches!(decompose_block(5, 2, 0), Err(LatticeError::ZeroDimension)));
    }

    #[test]
    fn an_examples() {
        let iid = CovarianceModel::iid(2.5, 2).unwrap();
        for n in [1, 3, 7] {
            assert!((compute_an(&iid, n).unwrap() - 2.5).abs() < 1e-15);
        }

        let nn = CovarianceModel::new(1, 0.7, 1.0, |k: &[i64]| match k[0].abs() {
            0 => 1.0,
            1 => -0.25,
            _ => 0.0,
        })
        .unwrap();
        assert!((compute_an(&nn, 4).unwrap() - 0.625).abs() < 1e-15);

        let ext = CovarianceModel::extremal(1.0, std::f64::consts::LN_2, 1.0, 1).unwrap();
        let expected = (3.0 - 2.0 * (2.0 * 0.5 + 1.0 * 0.25)) / 3.0;
        assert!((compute_an(&ext, 3).unwrap() - expected).abs() < 1e-15);
        assert!((naive_an(&ext, 3) - expected).abs() < 1e-15);
    }

    #[test]
    fn an_matches_naive_double_sum() {
        for dim in 1..=2 {
            let model = CovarianceModel::extremal(0.1, 0.7, 1.0, dim).unwrap();
            for n in 1..=8 {
                let fast = compute_an(&model, n).unwrap();
                let slow = naive_an(&model, n);
                assert!((fast - slow).abs() < 1e-12, "d={dim} n={n}: {fast} vs {slow}");
            }
        }
    }

    #[test]
    fn block_cov_examples() {
        let ext = CovarianceModel::extremal(1.0, std::f64::consts::LN_2, 1.0, 1).unwrap();
        let k = LatticeVector(vec![3]);
        let same = block_cov_exact(&ext, &k, &k, 3).unwrap();
        assert!((same - 3.0 * compute_an(&ext, 3).unwrap()).abs() < 1e-14);

        // blocks {0,1} and {2,3}: offsets 2,3,1,2
        let c = block_cov_exact(&ext, &LatticeVector(vec![0]), &LatticeVector(vec![2]), 2).unwrap();
        let brute = -(0.25 + 0.125 + 0.5 + 0.25);
        assert!((c - brute).abs() < 1e-15);

        let iid = CovarianceModel::iid(1.0, 2).unwrap();
        let c = block_cov_exact(&iid, &LatticeVector(vec![0, 0]), &LatticeVector(vec![4, -1]), 4).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn box_cov_matches_enumeration_for_rectangles() {
        let model = CovarianceModel::extremal(0.2, 0.5, 1.0, 2).unwrap();
        let a = Cell {
            corner: vec![0, 1],
            sides: vec![2, 3],
        };
        let b = Cell {
            corner: vec![2, -1],
            sides: vec![1, 4],
        };
        let mut brute = 0.0;
        for i0 in 0..2 {
            for i1 in 1..4 {
                for j0 in 2..3 {
                    for j1 in -1..3 {
                        brute += model.eval(&[j0 - i0, j1 - i1]);
                    }
                }
            }
        }
        let fast = box_cov_exact(&model, &a, &b).unwrap();
        assert!((fast - brute).abs() < 1e-14);
        let swapped = box_cov_exact(&model, &b, &a).unwrap();
        assert!((fast - swapped).abs() < 1e-14);
    }

    #[test]
    fn block_sums_count_and_total() {
        let field = LatticeField::on_block(1, 5, vec![1.0; 5]).unwrap();
        let part = decompose_block(5, 2, 1).unwrap();
        assert_eq!(block_sum_xi(&field, &part, 0.0).unwrap(), vec![2.0, 2.0, 1.0]);

        let values: Vec<f64> = (0..49).map(|i| ((i * 37) % 11) as f64 - 4.3).collect();
        let field = LatticeField::on_block(2, 7, values.clone()).unwrap();
        let whole = decompose_block(7, 7, 2).unwrap();
        let full = block_sum_xi(&field, &whole, 0.5).unwrap();
        assert_eq!(full.len(), 1);
        let direct: f64 = values.iter().map(|v| v - 0.5).sum();
        assert!((full[0] - direct).abs() < 1e-12);
        for l in 1..=7 {
            let part = decompose_block(7, l, 2).unwrap();
            let xs = block_sum_xi(&field, &part, 0.5).unwrap();
            assert!((xs.iter().sum::<f64>() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn block_sums_reject_shape_mismatch() {
        let field = LatticeField::on_block(1, 4, vec![0.0; 4]).unwrap();
        let part = decompose_block(5, 2, 1).unwrap();
        assert!(block_sum_xi(&field, &part, 0.0).is_err());
    }

    #[test]
    fn model_rejects_invariant_violations() {
        let pos = CovarianceModel::new(1, 1.0, 1.0, |k: &[i64]| if k[0] == 0 { 1.0 } else { 0.01 });
        assert!(matches!(pos, Err(LatticeError::ModelInvariant { .. })));
        let slow = CovarianceModel::new(1, 0.1, 1.0, |k: &[i64]| if k[0] == 0 { 1.0 } else { -0.1 });
        assert!(matches!(slow, Err(LatticeError::ModelInvariant { .. })));
        let asym = CovarianceModel::new(1, 1.0, 0.1, |k: &[i64]| match k[0] {
            0 => 1.0,
            1 => -0.1,
            _ => 0.0,
        });
        assert!(matches!(asym, Err(LatticeError::ModelInvariant { .. })));
    }

    #[test]
    fn lattice_sum_is_infimum_of_an() {
        let model = CovarianceModel::extremal(0.2, 0.9, 1.0, 2).unwrap();
        let a_inf = lattice_sum(&model);
        let q = (-0.9f64).exp();
        let p = (1.0 + q) / (1.0 - q);
        let exact = 1.0 - 0.2 * (p * p - 1.0);
        assert!((a_inf - exact).abs() < 1e-13, "{a_inf} vs {exact}");
        let mut prev = f64::INFINITY;
        for n in 1..20 {
            let an = compute_an(&model, n).unwrap();
            assert!(an >= a_inf && an <= prev + 1e-15);
            prev = an;
        }
    }

    #[test]
    fn an_floor_flag() {
        let model = CovarianceModel::iid(1e-9, 1).unwrap();
        assert!(an_with_floor(&model, 4, DEFAULT_AN_FLOOR).unwrap().below_floor);
        let model = CovarianceModel::iid(1.0, 1).unwrap();
        assert!(!an_with_floor(&model, 4, DEFAULT_AN_FLOOR).unwrap().below_floor);
    }
}
