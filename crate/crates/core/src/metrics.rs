//! Distances to the normal law: the exact empirical L1 (Wasserstein)
//! distance to the standard normal, the block-sum standardization, and a
//! lower bound on the smooth-functions metric from a certified battery.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::stats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("sample is empty")]
    EmptySample,
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("probability {0} outside (0, 1)")]
    Probability(f64),
    #[error("A_n must be positive, got {0}")]
    NonPositiveAn(f64),
    #[error("battery is empty")]
    EmptyBattery,
    #[error("test function {name} is not certified: derivative bound {bound} exceeds 1")]
    Uncertified { name: String, bound: f64 },
    #[error("vector of length {got} does not match dimension {expected}")]
    Dimension { expected: usize, got: usize },
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal distribution function via `erfc`.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Phi(x)`, accurate in the right tail.
#[inline]
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Inverse of the standard normal distribution function.
///
/// A rational approximation (Acklam's) provides the starting point; two
/// Halley steps on `Phi` bring `|Phi(x) - p|` to rounding level.
pub fn normal_quantile(p: f64) -> Result<f64, MetricsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(MetricsError::Probability(p));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let mut x = acklam(p);
    for _ in 0..2 {
        // Residual measured on the tail that keeps precision.
        let e = if x < 0.0 { normal_cdf(x) - p } else { (1.0 - p) - normal_sf(x) };
        let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(x)
}

fn acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const LOW: f64 = 0.024_25;
    if p < LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// `int_{-inf}^{x} Phi = x Phi(x) + phi(x)`.
#[inline]
fn lower_integral(x: f64) -> f64 {
    x * normal_cdf(x) + normal_pdf(x)
}

/// `int_{x}^{inf} (1 - Phi) = phi(x) - x (1 - Phi(x))`.
#[inline]
fn upper_integral(x: f64) -> f64 {
    normal_pdf(x) - x * normal_sf(x)
}

/// `int_a^b (Phi(t) - level) dt` for `a <= b`, using the representation that
/// avoids cancellation on each side of zero.
fn signed_excess(a: f64, b: f64, level: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    if a >= 0.0 {
        (1.0 - level) * (b - a) - (upper_integral(a) - upper_integral(b))
    } else if b <= 0.0 {
        (lower_integral(b) - lower_integral(a)) - level * (b - a)
    } else {
        signed_excess(a, 0.0, level) + signed_excess(0.0, b, level)
    }
}

/// `int_a^b |level - Phi(t)| dt`, where `crossing = Phi^{-1}(level)`.
fn abs_gap(a: f64, b: f64, level: f64, crossing: f64) -> f64 {
    if crossing <= a {
        signed_excess(a, b, level)
    } else if crossing >= b {
        -signed_excess(a, b, level)
    } else {
        -signed_excess(a, crossing, level) + signed_excess(crossing, b, level)
    }
}

/// Exact `int |F_m(t) - Phi(t)| dt` for the empirical distribution of `sample`.
pub fn wasserstein_to_std_normal(sample: &[f64]) -> Result<f64, MetricsError> {
    let mut sorted = sample.to_vec();
    if sorted.iter().any(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    sorted.sort_by(f64::total_cmp);
    WassersteinToNormal::new(sorted.len())?.distance_sorted(&sorted)
}

/// Wasserstein calculator for samples of a fixed size, caching the crossing
/// points `Phi^{-1}(i/m)`.
#[derive(Debug, Clone)]
pub struct WassersteinToNormal {
    crossings: Vec<f64>,
}

impl WassersteinToNormal {
    pub fn new(m: usize) -> Result<Self, MetricsError> {
        if m == 0 {
            return Err(MetricsError::EmptySample);
        }
        let crossings = (1..m)
            .map(|i| normal_quantile(i as f64 / m as f64))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(WassersteinToNormal { crossings })
    }

    pub fn sample_size(&self) -> usize {
        self.crossings.len() + 1
    }

    /// `sorted` must be in ascending order and of the cached size.
    pub fn distance_sorted(&self, sorted: &[f64]) -> Result<f64, MetricsError> {
        let m = sorted.len();
        if m == 0 {
            return Err(MetricsError::EmptySample);
        }
        if m != self.sample_size() {
            return Err(MetricsError::Dimension {
                expected: self.sample_size(),
                got: m,
            });
        }
        let mf = m as f64;
        let mut total = lower_integral(sorted[0]) + upper_integral(sorted[m - 1]);
        for i in 1..m {
            let (a, b) = (sorted[i - 1], sorted[i]);
            if b > a {
                total += abs_gap(a, b, i as f64 / mf, self.crossings[i - 1]);
            }
        }
        Ok(total)
    }
}

/// Realizations of a standardized block sum `W = (S - E S) / sqrt(n^d A_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedSample {
    pub values: Vec<f64>,
    pub n: usize,
    pub dim: usize,
    pub a_n: f64,
}

pub fn standardize_block_sums(
    raw_sums: &[f64],
    n: usize,
    dim: usize,
    a_n: f64,
    mean: f64,
) -> Result<StandardizedSample, MetricsError> {
    if !(a_n > 0.0 && a_n.is_finite()) {
        return Err(MetricsError::NonPositiveAn(a_n));
    }
    let scale = ((n as f64).powi(dim as i32) * a_n).sqrt();
    Ok(StandardizedSample {
        values: raw_sums.iter().map(|s| (s - mean) / scale).collect(),
        n,
        dim,
        a_n,
    })
}

type TestFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
enum TestShape {
    /// `sin(a . x + phase) / scale`.
    Ridge { a: Vec<f64>, phase: f64 },
    /// `prod_i sin(a_i x_i + phase_i) / scale`.
    Product { a: Vec<f64>, phases: Vec<f64> },
    Custom { f: Arc<TestFn>, bound: f64 },
}

/// A function `h: R^p -> R` with certified sup-bounds on every partial
/// derivative of order at most 3. Members of `H_{3,inf,p}` have all of them
/// at most 1.
#[derive(Clone)]
pub struct SmoothTestFunction {
    name: String,
    dim: usize,
    shape: TestShape,
    scale: f64,
}

impl std::fmt::Debug for SmoothTestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SmoothTestFunction")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("certified_bound", &self.certified_bound())
            .finish()
    }
}

impl SmoothTestFunction {
    /// `sin(a . x + phase) / max(1, |a|_inf^3)`. A partial derivative of
    /// multi-index `k` is bounded by `prod |a_i|^{k_i} / max(1, |a|_inf^3)`.
    pub fn ridge(name: impl Into<String>, a: Vec<f64>, phase: f64) -> Self {
        let amax = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        SmoothTestFunction {
            name: name.into(),
            dim: a.len(),
            scale: amax.powi(3).max(1.0),
            shape: TestShape::Ridge { a, phase },
        }
    }

    /// `prod_i sin(a_i x_i + phase_i)`, scaled by the largest derivative
    /// bound `prod |a_i|^{k_i}` over `|k|_1 <= 3` (and at least 1).
    pub fn product(name: impl Into<String>, a: Vec<f64>, phases: Vec<f64>) -> Self {
        assert_eq!(a.len(), phases.len(), "one phase per coordinate");
        let scale = max_monomial(&a, 3).max(1.0);
        SmoothTestFunction {
            name: name.into(),
            dim: a.len(),
            scale,
            shape: TestShape::Product { a, phases },
        }
    }

    /// An arbitrary function with a caller-supplied bound on all partial
    /// derivatives of order at most 3. Its normal expectation is estimated by
    /// fixed-seed Monte Carlo.
    pub fn custom<F>(name: impl Into<String>, dim: usize, derivative_bound: f64, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        SmoothTestFunction {
            name: name.into(),
            dim,
            scale: 1.0,
            shape: TestShape::Custom {
                f: Arc::new(f),
                bound: derivative_bound,
            },
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Largest certified sup-bound over all partial derivatives of order 0..=3.
    pub fn certified_bound(&self) -> f64 {
        match &self.shape {
            TestShape::Ridge { a, .. } => {
                let amax = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                (0..=3).map(|k| amax.powi(k)).fold(0.0, f64::max) / self.scale
            }
            TestShape::Product { a, .. } => max_monomial(a, 3).max(1.0) / self.scale,
            TestShape::Custom { bound, .. } => *bound,
        }
    }

    /// Certified bound for the partial derivative with multi-index `k`.
    pub fn derivative_bound(&self, k: &[u32]) -> f64 {
        match &self.shape {
            TestShape::Ridge { a, .. } | TestShape::Product { a, .. } => {
                a.iter().zip(k).map(|(ai, &ki)| ai.abs().powi(ki as i32)).product::<f64>() / self.scale
            }
            TestShape::Custom { bound, .. } => *bound,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.shape {
            TestShape::Ridge { a, phase } => {
                let t: f64 = a.iter().zip(x).map(|(ai, xi)| ai * xi).sum();
                (t + phase).sin() / self.scale
            }
            TestShape::Product { a, phases } => {
                a.iter()
                    .zip(phases)
                    .zip(x)
                    .map(|((ai, ph), xi)| (ai * xi + ph).sin())
                    .product::<f64>()
                    / self.scale
            }
            TestShape::Custom { f, .. } => f(x),
        }
    }

    /// `E h(Z)` for `Z ~ N(0, I_p)`: closed form for ridge and product
    /// functions (`E sin(t Z + c) = sin(c) exp(-t^2 / 2)`), otherwise the mean
    /// over `draws` fixed-seed normal vectors.
    pub fn normal_expectation(&self, draws: usize, seed: u64) -> f64 {
        match &self.shape {
            TestShape::Ridge { a, phase } => {
                let norm2: f64 = a.iter().map(|v| v * v).sum();
                phase.sin() * (-0.5 * norm2).exp() / self.scale
            }
            TestShape::Product { a, phases } => {
                a.iter()
                    .zip(phases)
                    .map(|(ai, ph)| ph.sin() * (-0.5 * ai * ai).exp())
                    .product::<f64>()
                    / self.scale
            }
            TestShape::Custom { f, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut z = vec![0.0; self.dim];
                let mut total = 0.0;
                for _ in 0..draws {
                    for v in z.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                    total += f(&z);
                }
                total / draws as f64
            }
        }
    }
}

/// Largest `prod |a_i|^{k_i}` over multi-indices with `|k|_1 <= order`.
fn max_monomial(a: &[f64], order: u32) -> f64 {
    fn rec(a: &[f64], budget: u32) -> f64 {
        match a.split_first() {
            None => 1.0,
            Some((first, rest)) => (0..=budget)
                .map(|k| first.abs().powi(k as i32) * rec(rest, budget - k))
                .fold(0.0, f64::max),
        }
    }
    rec(a, order)
}

/// The fixed 12-function sine/product battery in dimension `p`.
///
/// Phases of `pi/2` turn sines into cosines, which detect symmetric
/// departures from normality (excess kurtosis); the zero-phase members
/// detect skewness.
pub fn default_battery(p: usize) -> Vec<SmoothTestFunction> {
    assert!(p >= 1);
    let half_pi = PI / 2.0;
    let axis = |j: usize, t: f64| {
        let mut a = vec![0.0; p];
        a[j] = t;
        a
    };
    let diag = |t: f64| vec![t / (p as f64).sqrt(); p];
    let last = p - 1;
    let mut anti = vec![0.0; p];
    anti[0] += 2.0 / SQRT_2;
    anti[last] -= 2.0 / SQRT_2;
    let anti = if p == 1 { vec![2.0] } else { anti };
    vec![
        SmoothTestFunction::ridge("cos(x_1)", axis(0, 1.0), half_pi),
        SmoothTestFunction::ridge("cos(x_p)", axis(last, 1.0), half_pi),
        SmoothTestFunction::ridge("cos(1.5 x_1)", axis(0, 1.5), half_pi),
        SmoothTestFunction::ridge("cos(1.5 x_p)", axis(last, 1.5), half_pi),
        SmoothTestFunction::ridge("cos(mean direction)", diag(1.0), half_pi),
        SmoothTestFunction::ridge("cos(2 mean direction)", diag(2.0), half_pi),
        SmoothTestFunction::ridge("cos(2 (x_1 - x_p)/sqrt2)", anti, half_pi),
        SmoothTestFunction::ridge("sin(x_1)", axis(0, 1.0), 0.0),
        SmoothTestFunction::ridge("sin(mean direction)", diag(1.0), 0.0),
        SmoothTestFunction::ridge("sin(2 x_1 + pi/4)", axis(0, 2.0), PI / 4.0),
        SmoothTestFunction::product("prod cos(x_i)", vec![1.0; p], vec![half_pi; p]),
        SmoothTestFunction::product("prod cos(1.5 x_i)", vec![1.5; p], vec![half_pi; p]),
    ]
}

/// Number of normal draws for expectations without a closed form.
pub const NORMAL_EXPECTATION_DRAWS: usize = 1_000_000;

/// Deviation of one battery member.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryDeviation {
    pub name: String,
    pub sample_mean: f64,
    pub normal_mean: f64,
    pub stderr: f64,
}

impl BatteryDeviation {
    pub fn gap(&self) -> f64 {
        (self.sample_mean - self.normal_mean).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothMetricLowerBound {
    /// `max_h |mean h(sample) - E h(Z)|`, a lower bound on `d_{H_3}` up to
    /// Monte Carlo error.
    pub value: f64,
    /// Index of the maximizing member.
    pub argmax: usize,
    pub deviations: Vec<BatteryDeviation>,
}

impl SmoothMetricLowerBound {
    /// Monte Carlo standard error of the maximizing member.
    pub fn stderr(&self) -> f64 {
        self.deviations[self.argmax].stderr
    }
}

/// Lower bound on the smooth-functions distance between the law of the
/// `p`-vectors in `samples` (row-major, `p` per replicate) and `N(0, I_p)`.
pub fn smooth_metric_lower_bound(
    samples: &[f64],
    p: usize,
    battery: &[SmoothTestFunction],
    seed: u64,
) -> Result<SmoothMetricLowerBound, MetricsError> {
    if battery.is_empty() {
        return Err(MetricsError::EmptyBattery);
    }
    if samples.is_empty() || p == 0 {
        return Err(MetricsError::EmptySample);
    }
    if samples.len() % p != 0 {
        return Err(MetricsError::Dimension {
            expected: p,
            got: samples.len() % p,
        });
    }
    for h in battery {
        if h.dim() != p {
            return Err(MetricsError::Dimension {
                expected: p,
                got: h.dim(),
            });
        }
        let bound = h.certified_bound();
        if !(bound <= 1.0 + 1e-12) {
            return Err(MetricsError::Uncertified {
                name: h.name().to_string(),
                bound,
            });
        }
    }
    let deviations: Vec<BatteryDeviation> = battery
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let values: Vec<f64> = samples.chunks_exact(p).map(|x| h.eval(x)).collect();
            let (mean, stderr) = stats::mean_and_stderr(&values);
            BatteryDeviation {
                name: h.name().to_string(),
                sample_mean: mean,
                normal_mean: h.normal_expectation(NORMAL_EXPECTATION_DRAWS, crate::seeds::mix(seed, i as u64)),
                stderr,
            }
        })
        .collect();
    let (argmax, value) = deviations
        .iter()
        .map(BatteryDeviation::gap)
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, g)| if g > acc.1 { (i, g) } else { acc });
    Ok(SmoothMetricLowerBound {
        value,
        argmax,
        deviations,
    })
}
