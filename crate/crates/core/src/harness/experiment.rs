//! Univariate and multivariate experiments, rate fits and NA screens.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::config::{check_separation, ConfigError, ExperimentConfig, Mode};
use crate::bounds::{self, BoundsError};
use crate::lattice::{self, Cell, CovarianceModel, LatticeError, LatticeField, LatticeVector, DEFAULT_AN_FLOOR};
use crate::metrics::{self, MetricsError, WassersteinToNormal};
use crate::samplers::{self, FieldSampler, FieldSpec, MonotoneFn, NaReport, NaSource, SamplerError};
use crate::seeds;
use crate::stats;

/// Bootstrap resamples behind the Monte Carlo error of the empirical distance.
pub const BOOTSTRAP_RESAMPLES: usize = 200;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("A_n = {a_n:e} at n = {n} is below the floor {floor:e}; the block sum is degenerate")]
    DegenerateVariance { n: usize, a_n: f64, floor: f64 },
    #[error("mode {0:?} does not apply here")]
    WrongMode(Mode),
    #[error("rate fit needs at least 3 valid rows with positive values, got {0}")]
    TooFewValidRows(usize),
}

/// One line of experiment output.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub n: usize,
    pub d: usize,
    pub replicates: usize,
    /// Empirical `d_1` (univariate) or the smooth-metric lower bound (multivariate).
    pub empirical_d1: f64,
    pub mc_stderr: f64,
    pub a_n: f64,
    /// Leading constant: `bound = kappa1 * n^{-rate}`.
    pub kappa1: f64,
    pub bound: f64,
    pub valid: bool,
    pub rate_only: bool,
    pub seed: u64,
}

impl ExperimentRow {
    /// `empirical <= bound + 3 stderr`; rows that are invalid or rate-only
    /// carry no absolute claim and always pass.
    pub fn passes(&self) -> bool {
        !self.valid || self.rate_only || self.empirical_d1 <= self.bound + 3.0 * self.mc_stderr
    }
}

/// Field constants entering the univariate bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldConstants {
    pub dim: usize,
    pub k_bound: f64,
    pub kappa0: f64,
    pub lambda: f64,
    /// `A_n` value fed to the field bound: `inf_n A_n`, the lattice sum.
    /// The bound decreases in `A`, so this is valid for every `n`, and it
    /// keeps `kappa1` independent of `n`.
    pub a_ref: f64,
}

impl FieldConstants {
    pub fn from_model(spec: &FieldSpec, model: &CovarianceModel) -> Self {
        FieldConstants {
            dim: spec.dim,
            k_bound: spec.k_bound,
            kappa0: model.kappa0(),
            lambda: model.lambda(),
            a_ref: lattice::lattice_sum(model),
        }
    }
}

/// `(kappa1, bound, valid)` for a univariate row.
///
/// Uncorrelated fields use the singleton bound `5 B` with
/// `B = K / sqrt(n^d A_n)`, i.e. `kappa1 = 5 K / sqrt(A_n)` at rate `d/2`.
/// Dependent fields use the block bound `kappa1 n^{-d/(2d+2)}`. An unbounded
/// field has no bound.
pub fn univariate_row_bound(fc: &FieldConstants, n: usize, a_n: f64) -> Result<(f64, f64, bool), BoundsError> {
    if fc.k_bound.is_infinite() {
        return Ok((f64::INFINITY, f64::INFINITY, false));
    }
    if fc.kappa0 == 0.0 {
        let nd = (n as f64).powi(fc.dim as i32);
        let report = bounds::univariate_na_bound(fc.k_bound / (nd * a_n).sqrt(), 0.0)?;
        return Ok((5.0 * fc.k_bound / a_n.sqrt(), report.value, report.valid));
    }
    let fb = bounds::field_bound_univariate(fc.dim, fc.k_bound, fc.lambda, fc.kappa0, fc.a_ref, n)?;
    Ok((fb.kappa1, fb.report.value, fb.report.valid))
}

/// Rejects configurations whose `A_n` falls below `floor` for any `n`.
pub fn check_an_floor(model: &CovarianceModel, n_list: &[usize], floor: f64) -> Result<Vec<f64>, HarnessError> {
    n_list
        .iter()
        .map(|&n| {
            let a = lattice::an_with_floor(model, n, floor)?;
            if a.below_floor {
                Err(HarnessError::DegenerateVariance { n, a_n: a.value, floor })
            } else {
                Ok(a.value)
            }
        })
        .collect()
}

fn field_and_model(cfg: &ExperimentConfig) -> Result<(FieldSpec, CovarianceModel), HarnessError> {
    let spec = cfg.field_spec()?;
    let model = spec
        .covariance_model()?
        .ok_or(SamplerError::NotAField(spec.kind.name()))?;
    Ok((spec, model))
}

/// Seed of the stream used at block side `n`.
pub fn stream_seed(seed: u64, n: usize) -> u64 {
    seeds::mix(seed, n as u64)
}

/// Bootstrap standard error of the empirical distance.
fn bootstrap_stderr(sample: &[f64], seed: u64, calc: &WassersteinToNormal) -> Result<f64, MetricsError> {
    let m = sample.len();
    let boot_seed = seeds::mix(seed, u64::MAX);
    let values = (0..BOOTSTRAP_RESAMPLES)
        .into_par_iter()
        .map(|b| {
            let mut rng = seeds::replicate_rng(boot_seed, b as u64);
            let mut resample: Vec<f64> = (0..m).map(|_| sample[rng.random_range(0..m)]).collect();
            resample.sort_by(f64::total_cmp);
            calc.distance_sorted(&resample)
        })
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(stats::variance(&values).sqrt())
}

/// Block sums of `replicates` independent fields on `{0..n-1}^d`.
fn block_sums(sampler: &FieldSampler, replicates: usize, seed: u64) -> Vec<f64> {
    let size = sampler.size();
    (0..replicates)
        .into_par_iter()
        .map_init(
            || vec![0.0; size],
            |buf, r| {
                let mut rng = seeds::replicate_rng(seed, r as u64);
                sampler.sample_into(&mut rng, buf);
                buf.iter().sum::<f64>()
            },
        )
        .collect()
}

/// For each `n`: simulate the standardized block sum `W`, measure its
/// `d_1` distance to `N(0, 1)` and compare with the bound.
pub fn run_univariate_experiment(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRow>, HarnessError> {
    if cfg.mode == Mode::Multivariate {
        return Err(HarnessError::WrongMode(cfg.mode));
    }
    let (spec, model) = field_and_model(cfg)?;
    let a_values = check_an_floor(&model, &cfg.n_list, DEFAULT_AN_FLOOR)?;
    let fc = FieldConstants::from_model(&spec, &model);
    let calc = WassersteinToNormal::new(cfg.replicates)?;
    let mut rows = Vec::with_capacity(cfg.n_list.len());
    for (&n, &a_n) in cfg.n_list.iter().zip(&a_values) {
        let seed = stream_seed(cfg.seed, n);
        let sampler = FieldSampler::new(&spec, vec![n; spec.dim])?;
        let sums = block_sums(&sampler, cfg.replicates, seed);
        let mut w = metrics::standardize_block_sums(&sums, n, spec.dim, a_n, 0.0)?.values;
        w.sort_by(f64::total_cmp);
        let empirical = calc.distance_sorted(&w)?;
        let stderr = bootstrap_stderr(&w, seed, &calc)?;
        let (kappa1, bound, valid) = univariate_row_bound(&fc, n, a_n)?;
        rows.push(ExperimentRow {
            n,
            d: spec.dim,
            replicates: cfg.replicates,
            empirical_d1: empirical,
            mc_stderr: stderr,
            a_n,
            kappa1,
            bound,
            valid,
            rate_only: false,
            seed: cfg.seed,
        });
    }
    Ok(rows)
}

/// Deterministic checks made at each `n` of a multivariate run.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateCheck {
    pub n: usize,
    pub a_n: f64,
    pub psi_n: f64,
    /// Largest `|entry|` of the numerically inverted `Sigma`.
    pub inverse_max_abs: f64,
    /// Gershgorin value, infinite when its precondition fails.
    pub gershgorin_bound: f64,
    pub gershgorin_valid: bool,
    /// `inverse_max_abs <= gershgorin_bound (1 + 1e-9)` (vacuous when invalid).
    pub gershgorin_ok: bool,
    /// Largest `-Cov(S_q, S_s)` over `q != s`.
    pub max_negative_cross_cov: f64,
    pub separated_cov_bound: f64,
    pub separated_cov_ok: bool,
    /// Per-term breakdown of the rate-only bound.
    pub rate_terms: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateRun {
    pub rows: Vec<ExperimentRow>,
    pub checks: Vec<MultivariateCheck>,
    /// Block sides skipped because `Sigma` was not positive definite.
    pub skipped: Vec<(usize, String)>,
}

/// Exact covariance matrix of the block sums at `anchors`.
pub fn block_sum_covariance(
    model: &CovarianceModel,
    anchors: &[LatticeVector],
    n: usize,
) -> Result<DMatrix<f64>, LatticeError> {
    let p = anchors.len();
    let mut sigma = DMatrix::zeros(p, p);
    for q in 0..p {
        for s in q..p {
            let v = lattice::block_cov_exact(model, &anchors[q], &anchors[s], n)?;
            sigma[(q, s)] = v;
            sigma[(s, q)] = v;
        }
    }
    Ok(sigma)
}

/// Standardized block-sum vectors `Sigma^{-1/2} (S_1, ..., S_p)`, row-major.
fn standardized_vectors(
    sampler: &FieldSampler,
    origin: &LatticeVector,
    anchors: &[LatticeVector],
    n: usize,
    inv_half: &DMatrix<f64>,
    replicates: usize,
    seed: u64,
) -> Vec<f64> {
    let p = anchors.len();
    let cells: Vec<Cell> = anchors.iter().map(|a| Cell::cube(a, n)).collect();
    let shape = sampler.shape().to_vec();
    let rows: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map_init(
            || vec![0.0; sampler.size()],
            |buf, r| {
                let mut rng = seeds::replicate_rng(seed, r as u64);
                sampler.sample_into(&mut rng, buf);
                let field = LatticeField::new(origin.clone(), shape.clone(), std::mem::take(buf))
                    .expect("buffer matches the sampler shape");
                let s = DVector::from_iterator(
                    p,
                    cells.iter().map(|c| field.box_sum(c).expect("blocks lie inside the sampled box")),
                );
                *buf = field.values;
                (inv_half * s).iter().copied().collect()
            },
        )
        .collect();
    rows.into_iter().flatten().collect()
}

/// Multivariate experiment: exact `Sigma`, `psi_n`, the Gershgorin and
/// separated-covariance checks, the rate-only bound, and the smooth-metric
/// lower bound of the simulated standardized vectors.
pub fn run_multivariate_experiment(cfg: &ExperimentConfig) -> Result<MultivariateRun, HarnessError> {
    if cfg.mode != Mode::Multivariate {
        return Err(HarnessError::WrongMode(cfg.mode));
    }
    let (spec, model) = field_and_model(cfg)?;
    let dim = spec.dim;
    let consts = bounds::decay_constants(model.lambda(), dim)?;
    let battery = metrics::default_battery(cfg.p);
    let a_values = check_an_floor(&model, &cfg.n_list, DEFAULT_AN_FLOOR)?;
    let mut run = MultivariateRun {
        rows: Vec::new(),
        checks: Vec::new(),
        skipped: Vec::new(),
    };
    for (&n, &a_n) in cfg.n_list.iter().zip(&a_values) {
        let anchors = cfg.anchors_for(n);
        check_separation(&anchors, n)?;
        let sigma = block_sum_covariance(&model, &anchors, n)?;
        let psi = match bounds::psi_n_from_sigma(&sigma, n, dim) {
            Ok(psi) => psi,
            Err(e @ (BoundsError::NotPositiveDefinite(_) | BoundsError::NotSymmetric)) => {
                run.skipped.push((n, e.to_string()));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let inverse = sigma
            .clone()
            .try_inverse()
            .ok_or(BoundsError::NotPositiveDefinite(0.0))?;
        let inverse_max_abs = inverse.amax();
        let gb = bounds::sigma_inv_infty_bound(cfg.p, dim, n, a_n, model.kappa0(), &consts)?;
        let mut max_cross = f64::NEG_INFINITY;
        for q in 0..cfg.p {
            for s in 0..cfg.p {
                if q != s {
                    max_cross = max_cross.max(-sigma[(q, s)]);
                }
            }
        }
        let sep_bound = bounds::separated_block_cov_bound(&consts, model.kappa0(), n);
        let report =
            bounds::field_bound_multivariate(dim, cfg.p, model.lambda(), model.kappa0(), a_n, n, psi.psi_n)?;
        run.checks.push(MultivariateCheck {
            n,
            a_n,
            psi_n: psi.psi_n,
            inverse_max_abs,
            gershgorin_bound: gb.value,
            gershgorin_valid: gb.valid,
            gershgorin_ok: !gb.valid || inverse_max_abs <= gb.value * (1.0 + 1e-9),
            max_negative_cross_cov: max_cross,
            separated_cov_bound: sep_bound,
            separated_cov_ok: cfg.p < 2 || max_cross <= sep_bound * (1.0 + 1e-12) + 1e-12,
            rate_terms: bounds::multivariate_rate_terms(dim, a_n, n, psi.psi_n),
        });

        let origin = LatticeVector(
            (0..dim).map(|s| anchors.iter().map(|a| a.0[s]).min().expect("p >= 1")).collect(),
        );
        let shape: Vec<usize> = (0..dim)
            .map(|s| (anchors.iter().map(|a| a.0[s]).max().expect("p >= 1") - origin.0[s]) as usize + n)
            .collect();
        let sampler = FieldSampler::new(&spec, shape)?;
        let seed = stream_seed(cfg.seed, n);
        let vectors = standardized_vectors(&sampler, &origin, &anchors, n, &psi.sigma_inv_half, cfg.replicates, seed);
        let lower = metrics::smooth_metric_lower_bound(&vectors, cfg.p, &battery, seed)?;
        run.rows.push(ExperimentRow {
            n,
            d: dim,
            replicates: cfg.replicates,
            empirical_d1: lower.value,
            mc_stderr: lower.stderr(),
            a_n,
            kappa1: report.value * (n as f64).powf(bounds::univariate_field_rate(dim)),
            bound: report.value,
            valid: report.valid,
            rate_only: true,
            seed: cfg.seed,
        });
    }
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateColumn {
    Bound,
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub rows_used: usize,
}

/// Least-squares fit of `log(column)` against `log(n)` over valid rows.
pub fn fit_rate(rows: &[ExperimentRow], column: RateColumn) -> Result<RateFit, HarnessError> {
    let (x, y): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.valid)
        .map(|r| {
            let v = match column {
                RateColumn::Bound => r.bound,
                RateColumn::Empirical => r.empirical_d1,
            };
            ((r.n as f64).ln(), v)
        })
        .filter(|(_, v)| *v > 0.0 && v.is_finite())
        .map(|(x, v)| (x, v.ln()))
        .unzip();
    if x.len() < 3 {
        return Err(HarnessError::TooFewValidRows(x.len()));
    }
    let (slope, intercept) = stats::least_squares(&x, &y);
    Ok(RateFit {
        slope,
        intercept,
        rows_used: x.len(),
    })
}

/// Runs the experiment selected by `cfg.mode`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRow>, HarnessError> {
    match cfg.mode {
        Mode::Univariate | Mode::Rate => run_univariate_experiment(cfg),
        Mode::Multivariate => Ok(run_multivariate_experiment(cfg)?.rows),
    }
}

/// NA screen at one size.
#[derive(Debug, Clone, PartialEq)]
pub struct NaScreen {
    pub n: usize,
    pub source: String,
    pub report: NaReport,
}

/// Screens the configured kind for negative association at every `n`.
///
/// Vector kinds compare coordinate 0 against the rest. Field kinds use the
/// sub-block sums of the partition with `l = ceil(n/2)` and compare the first
/// cell against the others.
pub fn run_verify_na(cfg: &ExperimentConfig) -> Result<Vec<NaScreen>, HarnessError> {
    let battery: Vec<(MonotoneFn, MonotoneFn)> = samplers::monotone_battery();
    cfg.n_list
        .iter()
        .map(|&n| {
            let seed = stream_seed(cfg.seed, n);
            let (source, width) = if cfg.is_field_kind() {
                let spec = cfg.field_spec()?;
                let l = n.div_ceil(2);
                let cells = lattice::decompose_block(n, l, spec.dim)?.cells.len();
                (NaSource::BlockSums { spec, n, l }, cells)
            } else {
                let spec = cfg.vector_spec(n)?;
                let width = spec.vector_len().expect("vector kind");
                (NaSource::Vector(spec), width)
            };
            let rest: Vec<usize> = (1..width).collect();
            let report = samplers::verify_na(&source, &[0], &rest, &battery, cfg.replicates, seed)?;
            Ok(NaScreen {
                n,
                source: cfg.field.kind.clone(),
                report,
            })
        })
        .collect()
}
