//! Linear-fractional offspring laws, environment presets and sampled
//! environment paths.
//!
//! A law `f(s) = r + (1 - r) q / (1 - p s)` is summarised by its log mean
//! `X = ln f'(1) = ln((1 - r) p / q)` and `eta = f''(1) / f'(1)^2 = 2 / (1 - r)`.
//! An [`EnvironmentPath`] stores `n` laws together with the prefix walk
//! `S_k = X_1 + ... + X_k` and the prefix sums
//! `b_m = 1/2 * sum_{j<m} eta_{j+1} e^{-S_j}` (kept as logarithms).

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_add_exp, softplus, CompensatedSum};
use crate::rng::{domain, StreamFactory};

/// Largest |X| a preset may produce; keeps `p` and `q` representable.
pub const MAX_ABS_LOG_MEAN: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LawRecord")]
pub struct OffspringLaw {
    p: f64,
    q: f64,
    r: f64,
    log_mean: f64,
}

#[derive(Deserialize)]
struct LawRecord {
    p: f64,
    q: f64,
    r: f64,
    log_mean: f64,
}

impl TryFrom<LawRecord> for OffspringLaw {
    type Error = Error;

    fn try_from(rec: LawRecord) -> Result<Self> {
        if !(rec.p > 0.0 && rec.q > 0.0 && rec.p <= 1.0 && rec.q <= 1.0) {
            return Err(Error::Domain(format!("p={}, q={} not in (0,1]", rec.p, rec.q)));
        }
        if !(0.0..1.0).contains(&rec.r) || !rec.log_mean.is_finite() {
            return Err(Error::Domain(format!("r={} or X={} invalid", rec.r, rec.log_mean)));
        }
        Ok(OffspringLaw { p: rec.p, q: rec.q, r: rec.r, log_mean: rec.log_mean })
    }
}

impl OffspringLaw {
    /// Law from its `(p, r)` parameters.
    pub fn new(p: f64, r: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("p = {p} must lie in (0, 1)")));
        }
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Domain(format!("r = {r} must lie in [0, 1)")));
        }
        let q = 1.0 - p;
        let log_mean = (-r).ln_1p() + p.ln() - q.ln();
        Ok(Self { p, q, r, log_mean })
    }

    /// Law with prescribed log mean `x` and zero-mass parameter `r`; `p` is
    /// chosen so that `(1 - r) p / q = e^x` holds exactly in log form.
    pub fn from_log_mean(x: f64, r: f64) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::Domain(format!("log mean {x} is not finite")));
        }
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Domain(format!("r = {r} must lie in [0, 1)")));
        }
        let log_keep = (-r).ln_1p();
        let p = (-softplus(log_keep - x)).exp();
        let q = (-softplus(x - log_keep)).exp();
        if !(p > 0.0 && q > 0.0) {
            return Err(Error::Domain(format!("log mean {x} leaves p or q unrepresentable")));
        }
        Ok(Self { p, q, r, log_mean: x })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    /// `X = ln f'(1)`.
    pub fn log_mean(&self) -> f64 {
        self.log_mean
    }

    /// `eta = f''(1) / f'(1)^2 = 2 / (1 - r)`.
    pub fn eta(&self) -> f64 {
        2.0 / (1.0 - self.r)
    }

    /// `ln(eta / 2)`.
    pub fn log_half_eta(&self) -> f64 {
        -(-self.r).ln_1p()
    }

    pub fn pgf(&self, s: f64) -> f64 {
        // 1 - p s written as q + p (1 - s): p may round to 1 for huge X
        self.r + (1.0 - self.r) * self.q / (self.q + self.p * (1.0 - s))
    }

    /// `f(0) = r + (1 - r) q`.
    pub fn extinction_prob(&self) -> f64 {
        self.r + (1.0 - self.r) * self.q
    }

    /// `1 - f(0) = (1 - r) p`, computed without cancellation.
    pub fn survival_prob(&self) -> f64 {
        (1.0 - self.r) * self.p
    }

    pub fn pmf(&self, k: usize) -> f64 {
        if k == 0 {
            self.extinction_prob()
        } else {
            (1.0 - self.r) * self.q * self.p.powi(k as i32)
        }
    }

    pub fn mean(&self) -> f64 {
        (1.0 - self.r) * self.p / self.q
    }

    /// `f''(1)`.
    pub fn second_factorial_moment(&self) -> f64 {
        2.0 * (1.0 - self.r) * self.p * self.p / (self.q * self.q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoParams {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BernoulliParams {
    /// Step size: X = +h or -h with probability 1/2 each.
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianParams {
    #[serde(default)]
    pub mean: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaplaceParams {
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StableParams {
    /// Stability index in (1, 2].
    pub alpha: f64,
    /// Skewness in [-1, 1].
    pub beta: f64,
    pub scale: f64,
    /// When positive, each generation draws `r ~ U(0, r_max)`, which varies
    /// `eta` independently of `X`.
    #[serde(default)]
    pub r_max: f64,
}

/// Distribution of one generation's offspring law.
///
/// Serialized as `{"preset": "...", "params": {...}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", content = "params", deny_unknown_fields)]
pub enum EnvSpec {
    /// Every generation uses `f(s) = 1 / (2 - s)`; the walk is identically 0.
    #[serde(rename = "critical-geometric-deterministic")]
    CriticalGeometric(NoParams),
    #[serde(rename = "symmetric-bernoulli-x", alias = "symmetric-bernoulli-X")]
    SymmetricBernoulli(BernoulliParams),
    #[serde(rename = "gaussian-x", alias = "gaussian-X")]
    Gaussian(GaussianParams),
    #[serde(rename = "laplace-x", alias = "laplace-X")]
    Laplace(LaplaceParams),
    #[serde(rename = "skewed-stable-x", alias = "skewed-stable-X")]
    SkewedStable(StableParams),
}

/// Status of the moment assumption on `log Theta(a)` for a preset. Nothing is
/// verified; this records what is believed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentStatus {
    Believed,
    Unknown,
}

impl EnvSpec {
    pub fn critical_geometric() -> Self {
        EnvSpec::CriticalGeometric(NoParams {})
    }

    pub fn gaussian(sigma: f64) -> Self {
        EnvSpec::Gaussian(GaussianParams { mean: 0.0, sigma })
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::CriticalGeometric(_) => "critical-geometric-deterministic",
            EnvSpec::SymmetricBernoulli(_) => "symmetric-bernoulli-x",
            EnvSpec::Gaussian(_) => "gaussian-x",
            EnvSpec::Laplace(_) => "laplace-x",
            EnvSpec::SkewedStable(_) => "skewed-stable-x",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Domain(msg));
        match *self {
            EnvSpec::CriticalGeometric(_) => Ok(()),
            EnvSpec::SymmetricBernoulli(BernoulliParams { h }) => {
                if h > 0.0 && h <= MAX_ABS_LOG_MEAN {
                    Ok(())
                } else {
                    bad(format!("bernoulli step h = {h} must lie in (0, {MAX_ABS_LOG_MEAN}]"))
                }
            }
            EnvSpec::Gaussian(GaussianParams { mean, sigma }) => {
                if sigma > 0.0 && sigma.is_finite() && mean.is_finite() {
                    Ok(())
                } else {
                    bad(format!("gaussian sigma = {sigma}, mean = {mean} invalid"))
                }
            }
            EnvSpec::Laplace(LaplaceParams { scale }) => {
                if scale > 0.0 && scale.is_finite() {
                    Ok(())
                } else {
                    bad(format!("laplace scale = {scale} must be positive"))
                }
            }
            EnvSpec::SkewedStable(StableParams { alpha, beta, scale, r_max }) => {
                if !(alpha > 1.0 && alpha <= 2.0) {
                    bad(format!("stable alpha = {alpha} must lie in (1, 2]"))
                } else if !(-1.0..=1.0).contains(&beta) {
                    bad(format!("stable beta = {beta} must lie in [-1, 1]"))
                } else if !(scale > 0.0 && scale.is_finite()) {
                    bad(format!("stable scale = {scale} must be positive"))
                } else if !(0.0..1.0).contains(&r_max) {
                    bad(format!("r_max = {r_max} must lie in [0, 1)"))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Increments have a continuous law, so `P(S_j = 0) = 0` for `j >= 1`.
    pub fn is_continuous(&self) -> bool {
        matches!(self, EnvSpec::Gaussian(_) | EnvSpec::Laplace(_) | EnvSpec::SkewedStable(_))
    }

    /// Limit of `P(S_n > 0)` where it is known in closed form. `None` when the
    /// walk violates the oscillation assumption (degenerate or drifting).
    pub fn nominal_rho(&self) -> Option<f64> {
        match *self {
            EnvSpec::CriticalGeometric(_) => None,
            EnvSpec::Gaussian(GaussianParams { mean, .. }) if mean != 0.0 => None,
            EnvSpec::Gaussian(_) | EnvSpec::Laplace(_) | EnvSpec::SymmetricBernoulli(_) => Some(0.5),
            EnvSpec::SkewedStable(StableParams { alpha, beta, .. }) => {
                Some(0.5 + (beta * (PI * alpha / 2.0).tan()).atan() / (PI * alpha))
            }
        }
    }

    /// Rough scale of one increment, used to size grids.
    pub fn step_scale(&self) -> f64 {
        match *self {
            EnvSpec::CriticalGeometric(_) => 1.0,
            EnvSpec::SymmetricBernoulli(BernoulliParams { h }) => h,
            EnvSpec::Gaussian(GaussianParams { sigma, .. }) => sigma,
            EnvSpec::Laplace(LaplaceParams { scale }) => scale * std::f64::consts::SQRT_2,
            EnvSpec::SkewedStable(StableParams { scale, .. }) => scale,
        }
    }

    pub fn moment_status(&self) -> MomentStatus {
        match self {
            EnvSpec::Gaussian(_) | EnvSpec::Laplace(_) | EnvSpec::SymmetricBernoulli(_) => {
                MomentStatus::Believed
            }
            _ => MomentStatus::Unknown,
        }
    }

    /// Draw one generation's law.
    pub fn sample_law<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<OffspringLaw> {
        if let EnvSpec::CriticalGeometric(_) = self {
            return OffspringLaw::new(0.5, 0.0);
        }
        let (x, r) = self.sample_log_mean_and_r(rng);
        OffspringLaw::from_log_mean(x, r)
    }

    /// Draw a single walk increment; same stream consumption as
    /// [`EnvSpec::sample_law`].
    pub fn sample_step<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        Ok(self.sample_log_mean_and_r(rng).0)
    }

    /// `(X, r)` of one generation without building the law.
    pub fn sample_log_mean_and_r<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let (x, r) = match *self {
            EnvSpec::CriticalGeometric(_) => (0.0, 0.0),
            EnvSpec::SymmetricBernoulli(BernoulliParams { h }) => (if rng.random::<bool>() { h } else { -h }, 0.0),
            EnvSpec::Gaussian(GaussianParams { mean, sigma }) => {
                let z: f64 = StandardNormal.sample(rng);
                (mean + sigma * z, 0.0)
            }
            EnvSpec::Laplace(LaplaceParams { scale }) => {
                let u: f64 = rng.random::<f64>() - 0.5;
                (-scale * u.signum() * (1.0 - 2.0 * u.abs()).ln(), 0.0)
            }
            EnvSpec::SkewedStable(StableParams { alpha, beta, scale, r_max }) => {
                let x = scale * stable_variate(alpha, beta, rng);
                let r = if r_max > 0.0 { r_max * rng.random::<f64>() } else { 0.0 };
                (x, r)
            }
        };
        (x.clamp(-MAX_ABS_LOG_MEAN, MAX_ABS_LOG_MEAN), r)
    }
}

/// Chambers-Mallows-Stuck draw from the strictly stable law with index
/// `alpha != 1`, skewness `beta`, unit scale and zero location (zero mean for
/// `alpha > 1`).
fn stable_variate<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> f64 {
    let v = PI * (rng.random::<f64>() - 0.5);
    let w: f64 = Exp1.sample(rng);
    let tan = (FRAC_PI_2 * alpha).tan();
    let b = (beta * tan).atan() / alpha;
    let s = (1.0 + beta * beta * tan * tan).powf(1.0 / (2.0 * alpha));
    let lead = (alpha * (v + b)).sin() / v.cos().powf(1.0 / alpha);
    let tail = ((v - alpha * (v + b)).cos() / w).powf((1.0 - alpha) / alpha);
    s * lead * tail
}

/// A finite environment `f_0, ..., f_{n-1}` with its prefix walk and b-sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "EnvironmentRecord", into = "EnvironmentRecord")]
pub struct EnvironmentPath {
    laws: Vec<OffspringLaw>,
    walk: Vec<f64>,
    log_b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EnvironmentRecord {
    laws: Vec<OffspringLaw>,
}

impl From<EnvironmentRecord> for EnvironmentPath {
    fn from(rec: EnvironmentRecord) -> Self {
        EnvironmentPath::from_laws(rec.laws)
    }
}

impl From<EnvironmentPath> for EnvironmentRecord {
    fn from(env: EnvironmentPath) -> Self {
        EnvironmentRecord { laws: env.laws }
    }
}

impl EnvironmentPath {
    pub fn from_laws(laws: Vec<OffspringLaw>) -> Self {
        let n = laws.len();
        let mut walk = Vec::with_capacity(n + 1);
        let mut log_b = Vec::with_capacity(n + 1);
        walk.push(0.0);
        log_b.push(f64::NEG_INFINITY);
        let mut s = CompensatedSum::default();
        for law in &laws {
            let prev = *walk.last().unwrap();
            let lb = log_add_exp(*log_b.last().unwrap(), law.log_half_eta() - prev);
            log_b.push(lb);
            s.add(law.log_mean());
            walk.push(s.value());
        }
        Self { laws, walk, log_b }
    }

    /// Environment with `r = 0` laws having the given log means.
    pub fn from_log_means(xs: &[f64]) -> Result<Self> {
        let laws = xs.iter().map(|&x| OffspringLaw::from_log_mean(x, 0.0)).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_laws(laws))
    }

    /// Number of generations `n`.
    pub fn len(&self) -> usize {
        self.laws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.laws.is_empty()
    }

    pub fn laws(&self) -> &[OffspringLaw] {
        &self.laws
    }

    pub fn law(&self, k: usize) -> &OffspringLaw {
        &self.laws[k]
    }

    /// `S_0, ..., S_n`.
    pub fn walk(&self) -> &[f64] {
        &self.walk
    }

    pub fn s(&self, k: usize) -> f64 {
        self.walk[k]
    }

    /// `ln b_m`; `-inf` for `m = 0`.
    pub fn log_b(&self, m: usize) -> f64 {
        self.log_b[m]
    }

    pub fn b(&self, m: usize) -> f64 {
        self.log_b[m].exp()
    }

    pub fn b_values(&self) -> Vec<f64> {
        self.log_b.iter().map(|v| v.exp()).collect()
    }

    /// The first `len` generations.
    pub fn prefix(&self, len: usize) -> EnvironmentPath {
        Self {
            laws: self.laws[..len].to_vec(),
            walk: self.walk[..=len].to_vec(),
            log_b: self.log_b[..=len].to_vec(),
        }
    }
}

/// Draw `n` i.i.d. laws from `spec`.
pub fn sample_environment<R: Rng + ?Sized>(spec: &EnvSpec, n: usize, rng: &mut R) -> Result<EnvironmentPath> {
    if n == 0 {
        return Err(Error::Domain("environment length must be at least 1".into()));
    }
    spec.validate()?;
    let laws = (0..n).map(|_| spec.sample_law(rng)).collect::<Result<Vec<_>>>()?;
    Ok(EnvironmentPath::from_laws(laws))
}

/// Monte Carlo estimate of the Spitzer average `(1/H) sum_{k<=H} P(S_k > 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RhoEstimate {
    pub rho: f64,
    pub se: f64,
    pub horizon: usize,
    pub replicas: usize,
}

pub fn estimate_rho(spec: &EnvSpec, horizon: usize, replicas: usize, streams: &StreamFactory) -> Result<RhoEstimate> {
    if horizon == 0 || replicas == 0 {
        return Err(Error::Domain("horizon and replicas must be positive".into()));
    }
    spec.validate()?;
    let fractions = (0..replicas)
        .into_par_iter()
        .map(|rep| {
            let mut rng = streams.stream(domain::RHO, rep as u64);
            let mut s = 0.0;
            let mut positive = 0usize;
            for _ in 0..horizon {
                s += spec.sample_step(&mut rng)?;
                if s > 0.0 {
                    positive += 1;
                }
            }
            Ok(positive as f64 / horizon as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = fractions.len() as f64;
    let mean = fractions.iter().sum::<f64>() / n;
    let var = if fractions.len() > 1 {
        fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(RhoEstimate { rho: mean, se: (var / n).sqrt(), horizon, replicas })
}
