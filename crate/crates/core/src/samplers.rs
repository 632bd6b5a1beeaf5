//! Negatively associated vectors and stationary lattice fields, plus
//! Monte Carlo checks of negative association and covariance domination.
//!
//! Field kinds are built on the Gaussian base correlation
//! `rho(k) = -c exp(-lambda |k|_1)` for `k != 0`, `rho(0) = 1`. The bounded
//! variant applies `sign` coordinate-wise, an increasing map, so negative
//! association carries over and `|X| <= 1`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::lattice::{decompose_block, block_sum_xi, CovarianceModel, LatticeError, LatticeField};
use crate::seeds;
use crate::stats::{self, CovEstimate};

/// Grid size, truncation order and margin of the spectral-density certificate.
pub const PSD_GRID: usize = 2048;
pub const PSD_KMAX: u32 = 50;
pub const PSD_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid field spec: {0}")]
    InvalidSpec(String),
    #[error("correlation c={c}, lambda={lambda} in d={dim} is not certified positive semidefinite (density lower bound {min_density:.3e})")]
    PsdCertificate { c: f64, lambda: f64, dim: usize, min_density: f64 },
    #[error("{0} is a vector kind; it has no lattice field")]
    NotAField(&'static str),
    #[error("{0} is a field kind; use sample_field")]
    NotAVector(&'static str),
    #[error("index sets overlap at {0}")]
    OverlappingSubsets(usize),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("index set is empty")]
    EmptySubset,
    #[error("test function {0} has no derivative bounds")]
    MissingDerivativeBounds(String),
    #[error("test function {name} has {got} derivative bounds, expected {expected}")]
    DerivativeBoundCount { name: String, expected: usize, got: usize },
    #[error("replicate count must be at least 2")]
    TooFewReplicates,
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldKind {
    /// Independent signs.
    IidRademacher,
    /// Occupancy counts of `balls` balls thrown into boxes with probabilities `probs`.
    Multinomial { balls: u64, probs: Vec<f64> },
    /// Ordered sample of `draws` values without replacement from `population`.
    Srswor { population: Vec<f64>, draws: usize },
    /// Gaussian field with correlation `rho`.
    GaussianNa { c: f64, lambda: f64 },
    /// `sign` of the Gaussian field.
    SignGaussianNa { c: f64, lambda: f64 },
}

impl FieldKind {
    pub fn name(&self) -> &'static str {
        match self {
            FieldKind::IidRademacher => "iid_rademacher",
            FieldKind::Multinomial { .. } => "multinomial",
            FieldKind::Srswor { .. } => "srswor",
            FieldKind::GaussianNa { .. } => "gaussian_na",
            FieldKind::SignGaussianNa { .. } => "sign_gaussian_na",
        }
    }

    pub fn is_field(&self) -> bool {
        !matches!(self, FieldKind::Multinomial { .. } | FieldKind::Srswor { .. })
    }

    fn gaussian_params(&self) -> Option<(f64, f64)> {
        match *self {
            FieldKind::GaussianNa { c, lambda } | FieldKind::SignGaussianNa { c, lambda } => Some((c, lambda)),
            _ => None,
        }
    }
}

/// Outcome of the spectral-density check for `rho`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdCertificate {
    /// Lower bound for the spectral density on the grid, including the
    /// truncation tail.
    pub min_density: f64,
    pub passed: bool,
}

/// Checks `f(theta) = 1 + c - c prod_s P(theta_s) >= PSD_EPS` on a
/// `PSD_GRID`-point grid per axis, where `P` is the two-sided geometric series
/// `sum_k q^|k| cos(k theta)` truncated at `PSD_KMAX` and `q = exp(-lambda)`.
/// The neglected tail of `P` is at most `2 q^(kmax+1) / (1 - q)` and is
/// charged against the minimum.
pub fn psd_certificate(c: f64, lambda: f64, dim: usize) -> PsdCertificate {
    let q = (-lambda).exp();
    let values: Vec<f64> = (0..PSD_GRID)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / PSD_GRID as f64;
            1.0 + 2.0 * (1..=PSD_KMAX).map(|k| q.powi(k as i32) * (k as f64 * theta).cos()).sum::<f64>()
        })
        .collect();
    let vmax = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let vmin = values.iter().cloned().fold(f64::INFINITY, f64::min);
    // The product is multilinear, so its grid maximum uses only vmin/vmax per axis.
    let mut best = f64::NEG_INFINITY;
    for mask in 0..(1u32 << dim) {
        let prod: f64 = (0..dim).map(|s| if mask >> s & 1 == 1 { vmin } else { vmax }).product();
        best = best.max(prod);
    }
    let tail = 2.0 * q.powi(PSD_KMAX as i32 + 1) / (1.0 - q);
    let m = vmax.abs().max(vmin.abs());
    let slack = (m + tail).powi(dim as i32) - m.powi(dim as i32);
    let min_density = 1.0 + c - c * best - c * slack;
    PsdCertificate {
        min_density,
        passed: min_density >= PSD_EPS,
    }
}

/// A validated sampler specification.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub kind: FieldKind,
    /// Lattice dimension (1 for vector kinds).
    pub dim: usize,
    /// Almost-sure bound on `|X_j|`; infinite for the Gaussian kind.
    pub k_bound: f64,
}

impl FieldSpec {
    /// Validates `kind` and `dim`. `k_bound` defaults to the natural bound of
    /// the kind; a supplied bound must be at least that large.
    pub fn new(kind: FieldKind, dim: usize, k_bound: Option<f64>) -> Result<Self, SamplerError> {
        if dim == 0 {
            return Err(SamplerError::InvalidSpec("dimension must be positive".into()));
        }
        match &kind {
            FieldKind::IidRademacher => {}
            FieldKind::Multinomial { probs, .. } => {
                if probs.is_empty() {
                    return Err(SamplerError::InvalidSpec("multinomial needs at least one box".into()));
                }
                if probs.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
                    return Err(SamplerError::InvalidSpec("box probabilities must be nonnegative".into()));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(SamplerError::InvalidSpec(format!("box probabilities sum to {total}, not 1")));
                }
            }
            FieldKind::Srswor { population, draws } => {
                if *draws == 0 || *draws > population.len() {
                    return Err(SamplerError::InvalidSpec(format!(
                        "cannot draw {draws} values from a population of {}",
                        population.len()
                    )));
                }
                if population.iter().any(|v| !v.is_finite()) {
                    return Err(SamplerError::InvalidSpec("population values must be finite".into()));
                }
            }
            FieldKind::GaussianNa { c, lambda } | FieldKind::SignGaussianNa { c, lambda } => {
                if !(*c >= 0.0 && c.is_finite()) {
                    return Err(SamplerError::InvalidSpec(format!("c must be finite and nonnegative, got {c}")));
                }
                if !(*lambda > 0.0 && lambda.is_finite()) {
                    return Err(SamplerError::InvalidSpec(format!("lambda must be positive, got {lambda}")));
                }
                let cert = psd_certificate(*c, *lambda, dim);
                if !cert.passed {
                    return Err(SamplerError::PsdCertificate {
                        c: *c,
                        lambda: *lambda,
                        dim,
                        min_density: cert.min_density,
                    });
                }
            }
        }
        if !kind.is_field() && dim != 1 {
            return Err(SamplerError::InvalidSpec(format!("{} is a vector kind; use dim = 1", kind.name())));
        }
        let natural = Self::natural_bound(&kind);
        let k_bound = match k_bound {
            None => natural,
            Some(k) => {
                if !(k > 0.0) || k.is_nan() {
                    return Err(SamplerError::InvalidSpec(format!("K must be positive, got {k}")));
                }
                if k < natural {
                    return Err(SamplerError::InvalidSpec(format!(
                        "K = {k} is below the almost-sure bound {natural} of {}",
                        kind.name()
                    )));
                }
                k
            }
        };
        Ok(FieldSpec { kind, dim, k_bound })
    }

    fn natural_bound(kind: &FieldKind) -> f64 {
        match kind {
            FieldKind::IidRademacher | FieldKind::SignGaussianNa { .. } => 1.0,
            FieldKind::Multinomial { balls, .. } => *balls as f64,
            FieldKind::Srswor { population, .. } => population.iter().fold(0.0, |m, v| m.max(v.abs())),
            FieldKind::GaussianNa { .. } => f64::INFINITY,
        }
    }

    /// Length of one sample for vector kinds.
    pub fn vector_len(&self) -> Option<usize> {
        match &self.kind {
            FieldKind::Multinomial { probs, .. } => Some(probs.len()),
            FieldKind::Srswor { draws, .. } => Some(*draws),
            _ => None,
        }
    }

    /// Coordinate means of a vector sample.
    pub fn vector_mean(&self) -> Option<Vec<f64>> {
        match &self.kind {
            FieldKind::Multinomial { balls, probs } => Some(probs.iter().map(|p| *balls as f64 * p).collect()),
            FieldKind::Srswor { population, draws } => {
                let m = population.iter().sum::<f64>() / population.len() as f64;
                Some(vec![m; *draws])
            }
            _ => None,
        }
    }

    /// Stationary covariance of a field kind; `None` for vector kinds.
    pub fn covariance_model(&self) -> Result<Option<CovarianceModel>, SamplerError> {
        let model = match self.kind {
            FieldKind::IidRademacher => CovarianceModel::iid(1.0, self.dim)?,
            FieldKind::GaussianNa { c, lambda } => CovarianceModel::new(self.dim, c, lambda, move |k: &[i64]| base_rho(c, lambda, k))?,
            // Arcsine law: E sign(X) sign(Y) = (2/pi) asin(rho). Since
            // asin(x) <= (pi/2) x on [0, 1], the amplitude c still certifies decay.
            FieldKind::SignGaussianNa { c, lambda } => CovarianceModel::new(self.dim, c, lambda, move |k: &[i64]| {
                2.0 / PI * base_rho(c, lambda, k).asin()
            })?,
            FieldKind::Multinomial { .. } | FieldKind::Srswor { .. } => return Ok(None),
        };
        Ok(Some(model))
    }
}

/// Base Gaussian correlation `rho(k)`.
pub fn base_rho(c: f64, lambda: f64, k: &[i64]) -> f64 {
    let l1: i64 = k.iter().map(|v| v.abs()).sum();
    if l1 == 0 {
        1.0
    } else {
        -c * (-lambda * l1 as f64).exp()
    }
}

/// `replicates` samples stored row-major, `width` values each.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub values: Vec<f64>,
    pub width: usize,
    pub replicates: usize,
    pub seed: u64,
    pub spec: FieldSpec,
}

impl SampleBatch {
    pub fn replicate(&self, r: usize) -> &[f64] {
        &self.values[r * self.width..(r + 1) * self.width]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.width)
    }
}

/// Fills `width`-sized rows in parallel, each from its own derived stream.
fn fill_rows<F>(replicates: usize, width: usize, seed: u64, f: F) -> Vec<f64>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
{
    let mut values = vec![0.0; replicates * width];
    if width == 0 {
        return values;
    }
    values.par_chunks_mut(width).enumerate().for_each(|(r, row)| {
        let mut rng = seeds::replicate_rng(seed, r as u64);
        f(&mut rng, row);
    });
    values
}

/// Draws `replicates` vectors of a vector kind.
pub fn sample_vector(spec: &FieldSpec, replicates: usize, seed: u64) -> Result<SampleBatch, SamplerError> {
    let width = spec.vector_len().ok_or(SamplerError::NotAVector(spec.kind.name()))?;
    let values = match &spec.kind {
        FieldKind::Multinomial { balls, probs } => fill_rows(replicates, width, seed, |rng, row| {
            multinomial_into(rng, *balls, probs, row);
        }),
        FieldKind::Srswor { population, draws } => fill_rows(replicates, width, seed, |rng, row| {
            for (slot, i) in row.iter_mut().zip(index::sample(rng, population.len(), *draws)) {
                *slot = population[i];
            }
        }),
        _ => unreachable!("vector_len is None for field kinds"),
    };
    Ok(SampleBatch {
        values,
        width,
        replicates,
        seed,
        spec: spec.clone(),
    })
}

/// Sequential conditional binomials.
fn multinomial_into(rng: &mut ChaCha8Rng, balls: u64, probs: &[f64], row: &mut [f64]) {
    let mut remaining = balls;
    let mut mass = 1.0;
    let last = probs.len() - 1;
    for (i, (&p, slot)) in probs.iter().zip(row.iter_mut()).enumerate() {
        let count = if i == last || remaining == 0 {
            if i == last {
                remaining
            } else {
                0
            }
        } else {
            let pr = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 1.0 };
            Binomial::new(remaining, pr).expect("probability in [0, 1]").sample(rng)
        };
        *slot = count as f64;
        remaining -= count;
        mass -= p;
    }
}

/// Draws `replicates` fields on the block `{0..n-1}^d`.
pub fn sample_field(spec: &FieldSpec, n: usize, replicates: usize, seed: u64) -> Result<SampleBatch, SamplerError> {
    FieldSampler::new(spec, vec![n; spec.dim])?.sample_batch(replicates, seed)
}

/// Exact sampler for a field kind on a fixed box.
pub struct FieldSampler {
    spec: FieldSpec,
    shape: Vec<usize>,
    engine: Engine,
    sign: bool,
}

impl fmt::Debug for FieldSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let engine = match self.engine {
            Engine::Rademacher => "rademacher",
            Engine::Arma(_) => "arma",
            Engine::Cholesky { .. } => "cholesky",
        };
        f.debug_struct("FieldSampler")
            .field("kind", &self.spec.kind.name())
            .field("shape", &self.shape)
            .field("engine", &engine)
            .finish()
    }
}

enum Engine {
    Rademacher,
    Arma(Arma),
    /// Lower Cholesky factor, rows packed.
    Cholesky { packed: Vec<f64>, size: usize },
}

/// On a line the correlation `rho` is that of an ARMA(1,1) process
/// `X_t = q X_{t-1} + sigma (e_t + b e_{t-1})`: the filtered sequence
/// `X_t - q X_{t-1}` has lag-one covariance `-(1+c) q` and none beyond.
#[derive(Debug, Clone, Copy)]
struct Arma {
    q: f64,
    sigma: f64,
    b: f64,
}

impl Arma {
    fn new(c: f64, lambda: f64) -> Self {
        let q = (-lambda).exp();
        let g0 = 1.0 + q * q + 2.0 * c * q * q;
        let g1 = -(1.0 + c) * q;
        let r = g1 / g0;
        // Invertible root of b / (1 + b^2) = r; |r| <= 1/2 follows from PSD.
        let disc = (1.0 - 4.0 * r * r).max(0.0);
        let b = if r == 0.0 { 0.0 } else { (1.0 - disc.sqrt()) / (2.0 * r) };
        let sigma = (g0 / (1.0 + b * b)).sqrt();
        Arma { q, sigma, b }
    }

    /// Maps `noise = (u, e_0, ..., e_{len-1})` to the field. `X_0` is drawn
    /// jointly with `e_0` as in the stationary process: `Cov(X_0, e_0) = sigma`.
    fn apply(&self, noise: &[f64], out: &mut [f64]) {
        let Arma { q, sigma, b } = *self;
        let start = (1.0 - sigma * sigma).max(0.0).sqrt();
        let mut prev_x = sigma * noise[1] + start * noise[0];
        let mut prev_e = noise[1];
        out[0] = prev_x;
        for t in 1..out.len() {
            let e = noise[t + 1];
            prev_x = q * prev_x + sigma * (e + b * prev_e);
            prev_e = e;
            out[t] = prev_x;
        }
    }
}

impl FieldSampler {
    /// Prepares a sampler for the box with the given side lengths.
    pub fn new(spec: &FieldSpec, shape: Vec<usize>) -> Result<Self, SamplerError> {
        if !spec.kind.is_field() {
            return Err(SamplerError::NotAField(spec.kind.name()));
        }
        if shape.len() != spec.dim {
            return Err(LatticeError::DimensionMismatch {
                expected: spec.dim,
                got: shape.len(),
            }
            .into());
        }
        if shape.iter().any(|&s| s == 0) {
            return Err(LatticeError::ZeroSide.into());
        }
        let (engine, sign) = match spec.kind.gaussian_params() {
            None => (Engine::Rademacher, false),
            Some((c, lambda)) => {
                let sign = matches!(spec.kind, FieldKind::SignGaussianNa { .. });
                if spec.dim == 1 {
                    (Engine::Arma(Arma::new(c, lambda)), sign)
                } else {
                    (cholesky_engine(c, lambda, &shape)?, sign)
                }
            }
        };
        Ok(FieldSampler {
            spec: spec.clone(),
            shape,
            engine,
            sign,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }

    /// Number of standard normals consumed per Gaussian sample.
    fn noise_len(&self) -> usize {
        match self.engine {
            Engine::Arma(_) => self.size() + 1,
            _ => self.size(),
        }
    }

    /// Linear map from standard normal noise to the Gaussian field.
    pub fn apply_noise(&self, noise: &[f64], out: &mut [f64]) {
        match &self.engine {
            Engine::Rademacher => panic!("the Rademacher field is not Gaussian"),
            Engine::Arma(arma) => arma.apply(noise, out),
            Engine::Cholesky { packed, size } => {
                let mut offset = 0;
                for i in 0..*size {
                    let row = &packed[offset..offset + i + 1];
                    out[i] = row.iter().zip(noise).map(|(l, z)| l * z).sum();
                    offset += i + 1;
                }
            }
        }
    }

    /// Noise dimension of [`Self::apply_noise`]; `None` for the Rademacher field.
    pub fn gaussian_noise_len(&self) -> Option<usize> {
        match self.engine {
            Engine::Rademacher => None,
            _ => Some(self.noise_len()),
        }
    }

    /// One field sample from `rng`.
    pub fn sample_into<R: RngCore>(&self, rng: &mut R, out: &mut [f64]) {
        match self.engine {
            Engine::Rademacher => {
                for chunk in out.chunks_mut(64) {
                    let bits = rng.next_u64();
                    for (i, v) in chunk.iter_mut().enumerate() {
                        *v = if bits >> i & 1 == 1 { 1.0 } else { -1.0 };
                    }
                }
            }
            _ => {
                let noise: Vec<f64> = (0..self.noise_len()).map(|_| rng.sample(StandardNormal)).collect();
                self.apply_noise(&noise, out);
                if self.sign {
                    for v in out.iter_mut() {
                        *v = if *v >= 0.0 { 1.0 } else { -1.0 };
                    }
                }
            }
        }
    }

    pub fn sample_batch(&self, replicates: usize, seed: u64) -> Result<SampleBatch, SamplerError> {
        let width = self.size();
        let values = fill_rows(replicates, width, seed, |rng, row| self.sample_into(rng, row));
        Ok(SampleBatch {
            values,
            width,
            replicates,
            seed,
            spec: self.spec.clone(),
        })
    }
}

/// Row-major points of a box with the last axis fastest.
fn box_points(shape: &[usize]) -> Vec<Vec<i64>> {
    let total: usize = shape.iter().product();
    (0..total)
        .map(|mut idx| {
            let mut p = vec![0i64; shape.len()];
            for s in (0..shape.len()).rev() {
                p[s] = (idx % shape[s]) as i64;
                idx /= shape[s];
            }
            p
        })
        .collect()
}

fn cholesky_engine(c: f64, lambda: f64, shape: &[usize]) -> Result<Engine, SamplerError> {
    let points = box_points(shape);
    let size = points.len();
    let mut diff = vec![0i64; shape.len()];
    let cov = DMatrix::from_fn(size, size, |i, j| {
        for s in 0..diff.len() {
            diff[s] = points[i][s] - points[j][s];
        }
        base_rho(c, lambda, &diff)
    });
    let chol = nalgebra::Cholesky::new(cov).ok_or(SamplerError::PsdCertificate {
        c,
        lambda,
        dim: shape.len(),
        min_density: f64::NAN,
    })?;
    let l = chol.l();
    let mut packed = Vec::with_capacity(size * (size + 1) / 2);
    for i in 0..size {
        for j in 0..=i {
            packed.push(l[(i, j)]);
        }
    }
    Ok(Engine::Cholesky { packed, size })
}

/// Coordinate-wise nondecreasing test functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonotoneFn {
    Sum,
    Max,
    Min,
    TanhSum,
    /// `1{sum > 0}`.
    PositiveSum,
    /// `1{max > 0}`.
    PositiveMax,
    /// `clamp(sum, -1, 1)`.
    ClippedSum,
    AtanSum,
}

impl MonotoneFn {
    pub fn name(self) -> &'static str {
        match self {
            MonotoneFn::Sum => "sum",
            MonotoneFn::Max => "max",
            MonotoneFn::Min => "min",
            MonotoneFn::TanhSum => "tanh(sum)",
            MonotoneFn::PositiveSum => "1{sum>0}",
            MonotoneFn::PositiveMax => "1{max>0}",
            MonotoneFn::ClippedSum => "clamp(sum)",
            MonotoneFn::AtanSum => "atan(sum)",
        }
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        let sum = || x.iter().sum::<f64>();
        let max = || x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        match self {
            MonotoneFn::Sum => sum(),
            MonotoneFn::Max => max(),
            MonotoneFn::Min => x.iter().cloned().fold(f64::INFINITY, f64::min),
            MonotoneFn::TanhSum => sum().tanh(),
            MonotoneFn::PositiveSum => (sum() > 0.0) as u8 as f64,
            MonotoneFn::PositiveMax => (max() > 0.0) as u8 as f64,
            MonotoneFn::ClippedSum => sum().clamp(-1.0, 1.0),
            MonotoneFn::AtanSum => sum().atan(),
        }
    }
}

/// The eight `(f, g)` pairs used by [`verify_na`].
pub fn monotone_battery() -> Vec<(MonotoneFn, MonotoneFn)> {
    use MonotoneFn::*;
    vec![
        (Sum, Sum),
        (Max, Max),
        (Min, Min),
        (TanhSum, TanhSum),
        (PositiveSum, PositiveSum),
        (Sum, Max),
        (Min, TanhSum),
        (ClippedSum, PositiveMax),
    ]
}

/// Where the random vector `xi` comes from. Values are centered before any
/// test function is applied.
#[derive(Debug, Clone)]
pub enum NaSource {
    /// A vector kind.
    Vector(FieldSpec),
    /// A field kind on `{0..n-1}^d`, indexed row-major.
    Field { spec: FieldSpec, n: usize },
    /// Centered sub-block sums of a field over the partition `n = (m-1) l + r`.
    BlockSums { spec: FieldSpec, n: usize, l: usize },
    /// A bivariate normal pair with correlation `rho` (negative control when `rho > 0`).
    GaussianPair { rho: f64 },
}

impl NaSource {
    /// Draws `replicates` centered realizations; returns the rows and their width.
    pub fn draw(&self, replicates: usize, seed: u64) -> Result<(Vec<f64>, usize), SamplerError> {
        match self {
            NaSource::Vector(spec) => {
                let batch = sample_vector(spec, replicates, seed)?;
                let mean = spec.vector_mean().expect("vector kind");
                let mut values = batch.values;
                for row in values.chunks_exact_mut(batch.width) {
                    for (v, m) in row.iter_mut().zip(&mean) {
                        *v -= m;
                    }
                }
                Ok((values, batch.width))
            }
            NaSource::Field { spec, n } => {
                let batch = sample_field(spec, *n, replicates, seed)?;
                Ok((batch.values, batch.width))
            }
            NaSource::BlockSums { spec, n, l } => {
                let partition = decompose_block(*n, *l, spec.dim)?;
                let batch = sample_field(spec, *n, replicates, seed)?;
                let width = partition.cells.len();
                let mut values = Vec::with_capacity(replicates * width);
                for row in batch.rows() {
                    let field = LatticeField::on_block(spec.dim, *n, row.to_vec())?;
                    values.extend(block_sum_xi(&field, &partition, 0.0)?);
                }
                Ok((values, width))
            }
            NaSource::GaussianPair { rho } => {
                if !(rho.abs() <= 1.0) {
                    return Err(SamplerError::InvalidSpec(format!("correlation {rho} outside [-1, 1]")));
                }
                let tail = (1.0 - rho * rho).sqrt();
                let values = fill_rows(replicates, 2, seed, |rng, row| {
                    let z1: f64 = rng.sample(StandardNormal);
                    let z2: f64 = rng.sample(StandardNormal);
                    row[0] = z1;
                    row[1] = rho * z1 + tail * z2;
                });
                Ok((values, 2))
            }
        }
    }
}

fn check_subsets(a: &[usize], b: &[usize], width: usize) -> Result<(), SamplerError> {
    if a.is_empty() || b.is_empty() {
        return Err(SamplerError::EmptySubset);
    }
    for &i in a.iter().chain(b) {
        if i >= width {
            return Err(SamplerError::IndexOutOfRange { index: i, len: width });
        }
    }
    if let Some(&i) = a.iter().find(|i| b.contains(i)) {
        return Err(SamplerError::OverlappingSubsets(i));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaPairResult {
    pub f: &'static str,
    pub g: &'static str,
    pub cov: f64,
    pub stderr: f64,
    /// `cov <= 3 stderr`.
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaReport {
    pub results: Vec<NaPairResult>,
    pub replicates: usize,
    pub seed: u64,
}

impl NaReport {
    pub fn all_pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }
}

/// Empirical `Cov(f(xi_A), g(xi_B))` for each battery pair. The pass rule
/// `cov <= 3 stderr` is a one-sided screen, not a calibrated test.
pub fn verify_na(
    source: &NaSource,
    a: &[usize],
    b: &[usize],
    battery: &[(MonotoneFn, MonotoneFn)],
    replicates: usize,
    seed: u64,
) -> Result<NaReport, SamplerError> {
    if replicates < 2 {
        return Err(SamplerError::TooFewReplicates);
    }
    let (values, width) = source.draw(replicates, seed)?;
    check_subsets(a, b, width)?;
    let mut xa = vec![0.0; a.len()];
    let mut xb = vec![0.0; b.len()];
    let results = battery
        .iter()
        .map(|&(f, g)| {
            let mut fv = Vec::with_capacity(replicates);
            let mut gv = Vec::with_capacity(replicates);
            for row in values.chunks_exact(width) {
                gather(row, a, &mut xa);
                gather(row, b, &mut xb);
                fv.push(f.eval(&xa));
                gv.push(g.eval(&xb));
            }
            let CovEstimate { cov, stderr } = stats::covariance(&fv, &gv);
            NaPairResult {
                f: f.name(),
                g: g.name(),
                cov,
                stderr,
                pass: cov <= 3.0 * stderr,
            }
        })
        .collect();
    Ok(NaReport {
        results,
        replicates,
        seed,
    })
}

fn gather(row: &[f64], idx: &[usize], out: &mut [f64]) {
    for (o, &i) in out.iter_mut().zip(idx) {
        *o = row[i];
    }
}

type MapFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// A differentiable function of a sub-vector with per-coordinate bounds on
/// `|df/dx_i|`.
#[derive(Clone)]
pub struct SmoothMap {
    pub name: String,
    f: Arc<MapFn>,
    pub grad_bounds: Option<Vec<f64>>,
}

impl fmt::Debug for SmoothMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothMap")
            .field("name", &self.name)
            .field("grad_bounds", &self.grad_bounds)
            .finish()
    }
}

impl SmoothMap {
    pub fn new<F>(name: impl Into<String>, grad_bounds: Option<Vec<f64>>, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        SmoothMap {
            name: name.into(),
            f: Arc::new(f),
            grad_bounds,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    fn bounds(&self, expected: usize) -> Result<&[f64], SamplerError> {
        let b = self
            .grad_bounds
            .as_deref()
            .ok_or_else(|| SamplerError::MissingDerivativeBounds(self.name.clone()))?;
        if b.len() != expected {
            return Err(SamplerError::DerivativeBoundCount {
                name: self.name.clone(),
                expected,
                got: b.len(),
            });
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominationReport {
    /// `|Cov(f(xi_A), g(xi_B))|`.
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// `-sum_{i in A, j in B} |df_i| |dg_j| Cov(xi_i, xi_j)`.
    pub rhs: f64,
    pub rhs_stderr: f64,
    /// `lhs <= rhs + 3 (lhs_stderr + rhs_stderr)`.
    pub pass: bool,
}

/// Checks the covariance domination inequality for smooth `f`, `g` on
/// disjoint index sets. The right side is estimated as
/// `-Cov(sum_A |df_i| xi_i, sum_B |dg_j| xi_j)`, which is the same bilinear sum.
pub fn verify_cov_domination(
    source: &NaSource,
    a: &[usize],
    b: &[usize],
    f: &SmoothMap,
    g: &SmoothMap,
    replicates: usize,
    seed: u64,
) -> Result<DominationReport, SamplerError> {
    let bf = f.bounds(a.len())?.to_vec();
    let bg = g.bounds(b.len())?.to_vec();
    if replicates < 2 {
        return Err(SamplerError::TooFewReplicates);
    }
    let (values, width) = source.draw(replicates, seed)?;
    check_subsets(a, b, width)?;
    let mut xa = vec![0.0; a.len()];
    let mut xb = vec![0.0; b.len()];
    let (mut fv, mut gv, mut uv, mut vv) = (vec![], vec![], vec![], vec![]);
    for row in values.chunks_exact(width) {
        gather(row, a, &mut xa);
        gather(row, b, &mut xb);
        fv.push(f.eval(&xa));
        gv.push(g.eval(&xb));
        uv.push(xa.iter().zip(&bf).map(|(x, w)| x * w.abs()).sum::<f64>());
        vv.push(xb.iter().zip(&bg).map(|(x, w)| x * w.abs()).sum::<f64>());
    }
    let lhs = stats::covariance(&fv, &gv);
    let rhs = stats::covariance(&uv, &vv);
    let report = DominationReport {
        lhs: lhs.cov.abs(),
        lhs_stderr: lhs.stderr,
        rhs: -rhs.cov,
        rhs_stderr: rhs.stderr,
        pass: lhs.cov.abs() <= -rhs.cov + 3.0 * (lhs.stderr + rhs.stderr),
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sign_spec(d: usize, c: f64, lambda: f64) -> FieldSpec {
        FieldSpec::new(FieldKind::SignGaussianNa { c, lambda }, d, None).unwrap()
    }

    #[test]
    fn certificate_examples() {
        // Closed form minimum of the untruncated density at theta = 0:
        // 1 + c - c ((1+q)/(1-q))^d.
        let q: f64 = 0.5;
        let p0 = (1.0 + q) / (1.0 - q);
        let cert = psd_certificate(0.3, 2f64.ln(), 1);
        assert!(cert.passed);
        assert!((cert.min_density - (1.3 - 0.3 * p0)).abs() < 1e-12);
        assert!(!psd_certificate(0.3, 2f64.ln(), 2).passed);
        assert!(psd_certificate(0.2, 1.0, 2).passed);
        assert!(psd_certificate(0.0, 1.0, 3).passed);
        assert!(matches!(
            FieldSpec::new(FieldKind::GaussianNa { c: 0.3, lambda: 2f64.ln() }, 2, None),
            Err(SamplerError::PsdCertificate { .. })
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(FieldSpec::new(FieldKind::IidRademacher, 1, Some(0.5)).is_err());
        assert_eq!(FieldSpec::new(FieldKind::IidRademacher, 2, None).unwrap().k_bound, 1.0);
        let m = FieldKind::Multinomial { balls: 4, probs: vec![0.5, 0.25, 0.25] };
        assert_eq!(FieldSpec::new(m, 1, None).unwrap().k_bound, 4.0);
        let bad = FieldKind::Multinomial { balls: 4, probs: vec![0.5, 0.25] };
        assert!(FieldSpec::new(bad, 1, None).is_err());
        let s = FieldKind::Srswor { population: vec![-1.0, 0.0, 1.0], draws: 4 };
        assert!(FieldSpec::new(s, 1, None).is_err());
        let g = FieldKind::GaussianNa { c: 0.3, lambda: 2f64.ln() };
        let spec = FieldSpec::new(g.clone(), 1, None).unwrap();
        assert!(spec.k_bound.is_infinite());
        assert!(FieldSpec::new(g, 1, Some(10.0)).is_err());
    }

    /// Builds the linear map of the sampler column by column and compares its
    /// Gram matrix with the target correlation.
    fn implied_covariance(sampler: &FieldSampler) -> DMatrix<f64> {
        let k = sampler.gaussian_noise_len().unwrap();
        let n = sampler.size();
        let mut m = DMatrix::zeros(n, k);
        let mut noise = vec![0.0; k];
        let mut out = vec![0.0; n];
        for j in 0..k {
            noise.iter_mut().for_each(|v| *v = 0.0);
            noise[j] = 1.0;
            sampler.apply_noise(&noise, &mut out);
            for i in 0..n {
                m[(i, j)] = out[i];
            }
        }
        &m * m.transpose()
    }

    #[test]
    fn arma_factorization_is_exact() {
        for (c, lambda) in [(0.3, 2f64.ln()), (0.0, 1.0), (0.49, 3.0), (0.1, 0.2)] {
            let spec = FieldSpec::new(FieldKind::GaussianNa { c, lambda }, 1, None).unwrap();
            let sampler = FieldSampler::new(&spec, vec![40]).unwrap();
            let cov = implied_covariance(&sampler);
            for i in 0..40 {
                for j in 0..40 {
                    let want = base_rho(c, lambda, &[i as i64 - j as i64]);
                    assert!((cov[(i, j)] - want).abs() < 1e-12, "c={c} ({i},{j}) {} vs {want}", cov[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn cholesky_factorization_is_exact() {
        let spec = FieldSpec::new(FieldKind::GaussianNa { c: 0.2, lambda: 1.0 }, 2, None).unwrap();
        let sampler = FieldSampler::new(&spec, vec![4, 3]).unwrap();
        let cov = implied_covariance(&sampler);
        let pts = box_points(&[4, 3]);
        for i in 0..12 {
            for j in 0..12 {
                let k = [pts[i][0] - pts[j][0], pts[i][1] - pts[j][1]];
                assert!((cov[(i, j)] - base_rho(0.2, 1.0, &k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multinomial_two_balls_two_boxes() {
        // Four equally likely outcomes: (2,0), (1,1), (1,1), (0,2).
        let outcomes = [(2.0, 0.0), (1.0, 1.0), (1.0, 1.0), (0.0, 2.0)];
        let exact: f64 = outcomes.iter().map(|(a, b)| (a - 1.0) * (b - 1.0)).sum::<f64>() / 4.0;
        assert_eq!(exact, -0.5);
        let spec = FieldSpec::new(FieldKind::Multinomial { balls: 2, probs: vec![0.5, 0.5] }, 1, None).unwrap();
        let batch = sample_vector(&spec, 20_000, 3).unwrap();
        let x: Vec<f64> = batch.rows().map(|r| r[0]).collect();
        let y: Vec<f64> = batch.rows().map(|r| r[1]).collect();
        assert!(batch.rows().all(|r| r[0] + r[1] == 2.0));
        let c = stats::covariance(&x, &y);
        assert!((c.cov - exact).abs() < 3.0 * c.stderr + 1e-12, "{c:?}");
    }

    #[test]
    fn multinomial_zero_balls() {
        let spec = FieldSpec::new(FieldKind::Multinomial { balls: 0, probs: vec![0.2, 0.8] }, 1, None).unwrap();
        let batch = sample_vector(&spec, 10, 1).unwrap();
        assert!(batch.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn srswor_pairs_equiprobable() {
        let spec = FieldSpec::new(FieldKind::Srswor { population: vec![-1.0, 0.0, 1.0], draws: 2 }, 1, None).unwrap();
        let reps = 30_000;
        let batch = sample_vector(&spec, reps, 8).unwrap();
        let mut counts = [0usize; 3];
        for r in batch.rows() {
            assert_ne!(r[0], r[1]);
            // Unordered pair identified by the missing value.
            let missing = -(r[0] + r[1]);
            counts[(missing + 1.0) as usize] += 1;
        }
        let p = 1.0 / 3.0;
        let se = (p * (1.0 - p) / reps as f64).sqrt();
        for c in counts {
            assert!((c as f64 / reps as f64 - p).abs() < 4.0 * se, "{counts:?}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = sign_spec(1, 0.3, 2f64.ln());
        let a = sample_field(&spec, 17, 50, 99).unwrap();
        let b = sample_field(&spec, 17, 50, 99).unwrap();
        assert_eq!(a, b);
        let c = sample_field(&spec, 17, 50, 100).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn sign_field_lag_one_arcsine() {
        let spec = sign_spec(1, 0.3, 2f64.ln());
        let batch = sample_field(&spec, 2, 40_000, 5).unwrap();
        let x: Vec<f64> = batch.rows().map(|r| r[0]).collect();
        let y: Vec<f64> = batch.rows().map(|r| r[1]).collect();
        let c = stats::covariance(&x, &y);
        let want = 2.0 / PI * (-0.15f64).asin();
        assert!((c.cov - want).abs() < 3.0 * c.stderr, "{} vs {want}", c.cov);
        assert!(batch.values.iter().all(|v| v.abs() == 1.0));
    }

    #[test]
    fn gaussian_lag_one() {
        let spec = FieldSpec::new(FieldKind::GaussianNa { c: 0.3, lambda: 2f64.ln() }, 1, None).unwrap();
        let batch = sample_field(&spec, 2, 40_000, 6).unwrap();
        let x: Vec<f64> = batch.rows().map(|r| r[0]).collect();
        let y: Vec<f64> = batch.rows().map(|r| r[1]).collect();
        let c = stats::covariance(&x, &y);
        assert!((c.cov + 0.15).abs() < 3.0 * c.stderr);
    }

    #[test]
    fn model_matches_kind() {
        let spec = sign_spec(1, 0.3, 2f64.ln());
        let model = spec.covariance_model().unwrap().unwrap();
        assert_eq!(model.kappa0(), 0.3);
        assert!((model.eval(&[1]) - 2.0 / PI * (-0.15f64).asin()).abs() < 1e-15);
        assert_eq!(model.eval(&[0]), 1.0);
        let vec_spec = FieldSpec::new(FieldKind::Multinomial { balls: 1, probs: vec![1.0] }, 1, None).unwrap();
        assert!(vec_spec.covariance_model().unwrap().is_none());
    }

    #[test]
    fn subsets_are_checked() {
        let src = NaSource::GaussianPair { rho: -0.2 };
        let battery = monotone_battery();
        assert!(matches!(
            verify_na(&src, &[0], &[0], &battery, 100, 1),
            Err(SamplerError::OverlappingSubsets(0))
        ));
        assert!(matches!(
            verify_na(&src, &[0], &[2], &battery, 100, 1),
            Err(SamplerError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn negative_control_fails() {
        let report = verify_na(&NaSource::GaussianPair { rho: 0.5 }, &[0], &[1], &monotone_battery(), 5_000, 2).unwrap();
        assert!(!report.all_pass());
    }

    #[test]
    fn domination_reductions() {
        let spec = FieldSpec::new(FieldKind::Multinomial { balls: 6, probs: vec![0.25; 4] }, 1, None).unwrap();
        let src = NaSource::Vector(spec);
        let id = SmoothMap::new("x", Some(vec![1.0]), |x| x[0]);
        let r = verify_cov_domination(&src, &[0], &[1], &id, &id, 20_000, 4).unwrap();
        assert!(r.pass);
        // With f = g = identity the two sides coincide: |Cov| vs -Cov.
        assert!((r.lhs - r.rhs).abs() < 1e-12);
        let tanh = SmoothMap::new("tanh", Some(vec![1.0]), |x| x[0].tanh());
        assert!(verify_cov_domination(&src, &[0], &[1], &tanh, &tanh, 20_000, 4).unwrap().pass);
        let constant = SmoothMap::new("const", Some(vec![0.0]), |_| 3.0);
        let r = verify_cov_domination(&src, &[0], &[1], &constant, &id, 1_000, 4).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert_eq!(r.rhs, 0.0);
        let unbounded = SmoothMap::new("nobounds", None, |x| x[0]);
        assert!(matches!(
            verify_cov_domination(&src, &[0], &[1], &unbounded, &id, 100, 4),
            Err(SamplerError::MissingDerivativeBounds(_))
        ));
    }
}
