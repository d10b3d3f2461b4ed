//! Environments conditioned on the sign of their walk, and the limit
//! variables built from them.
//!
//! The minus side is the environment read backwards from a minimum: its laws
//! `f^-_1, f^-_2, ...` have walk `S^-_j < 0` for all `j >= 1`. The plus side
//! is the environment read forwards from a minimum: `S^+_j >= 0`. Under the
//! changed measures the restriction to the first `k` steps has density
//! `U(-S^-_k) 1{S^- < 0 up to k}` resp. `V(S^+_k) 1{S^+ >= 0 up to k}`, which
//! is sampled here by rejection followed by self-normalized reweighting.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env_model::{EnvSpec, EnvironmentPath, OffspringLaw};
use crate::error::{Error, Result};
use crate::fluctuation::{default_horizon, estimate_renewals, uniform_grid, RenewalTable};
use crate::lf_algebra::{segment_map, LfMap};
use crate::rng::{domain, StreamFactory};

/// Lowest acceptance rate tolerated before the sampler gives up.
pub const MIN_ACCEPTANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Minus,
    Plus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedPath {
    pub env: EnvironmentPath,
    /// Self-normalized within the batch.
    pub weight: f64,
    pub side: Side,
    pub constraint_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathBatch {
    pub side: Side,
    pub paths: Vec<WeightedPath>,
    /// Rejection proposals; zero if the sequential fallback produced the batch.
    pub proposed: usize,
    pub accepted: usize,
    /// Estimated probability that a free path meets the constraint.
    pub acceptance: f64,
    pub sequential: bool,
}

impl PathBatch {
    pub fn acceptance_rate(&self) -> f64 {
        self.acceptance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitOptions {
    /// Constraint length of the sampled paths.
    #[serde(default = "default_steps")]
    pub path_len: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Iteration cap for `q+` and `zeta-`.
    #[serde(default = "default_steps")]
    pub max_steps: usize,
    /// Number of (minus, plus) pairs.
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_renewal_replicas")]
    pub renewal_replicas: usize,
    /// Renewal grid covers `[0, grid_scale * step_scale]`.
    #[serde(default = "default_grid_scale")]
    pub grid_scale: f64,
}

fn default_steps() -> usize {
    10_000
}
fn default_tol() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    4000
}
fn default_renewal_replicas() -> usize {
    4000
}
fn default_grid_scale() -> f64 {
    10.0
}

impl Default for LimitOptions {
    fn default() -> Self {
        Self {
            path_len: default_steps(),
            tol: default_tol(),
            max_steps: default_steps(),
            batch: default_batch(),
            renewal_replicas: default_renewal_replicas(),
            grid_scale: default_grid_scale(),
        }
    }
}

impl LimitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.path_len == 0 || self.max_steps == 0 || self.batch == 0 || self.renewal_replicas == 0 {
            return Err(Error::Config("limit sampler sizes must be positive".into()));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::Config(format!("tolerance {} outside (0, 1)", self.tol)));
        }
        if !(self.grid_scale > 0.0) {
            return Err(Error::Config("grid_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Renewal table sized for the preset's step scale.
pub fn renewal_table_for(spec: &EnvSpec, opts: &LimitOptions, streams: &StreamFactory) -> Result<RenewalTable> {
    let scale = spec.step_scale();
    let x_max = opts.grid_scale * scale;
    let grid = uniform_grid(x_max, 41);
    estimate_renewals(spec, &grid, opts.renewal_replicas, default_horizon(x_max, scale), streams)
}

fn require_continuous(spec: &EnvSpec) -> Result<()> {
    if !spec.is_continuous() {
        return Err(Error::Config(format!(
            "conditioned sampling needs a continuous preset (P(S_j = 0) = 0); {} is not",
            spec.name()
        )));
    }
    spec.validate()
}

/// Proposals per path before rejection counts as starved.
const PROPOSAL_BUDGET: usize = (10.0 / MIN_ACCEPTANCE) as usize;

/// Paths of one index range with unnormalized weights.
struct SideDraws {
    paths: Vec<WeightedPath>,
    /// Estimated probability that an unconstrained path meets the constraint.
    acceptance: f64,
    /// Rejection proposals spent; zero when the fallback ran.
    proposed: usize,
    sequential: bool,
}

fn violated(side: Side, s: f64) -> bool {
    match side {
        Side::Minus => s >= 0.0,
        Side::Plus => s < 0.0,
    }
}

fn weighted(side: Side, len: usize, steps: &[(f64, f64)], table: &RenewalTable) -> Result<WeightedPath> {
    let laws = steps.iter().map(|&(x, r)| OffspringLaw::from_log_mean(x, r)).collect::<Result<Vec<_>>>()?;
    let env = EnvironmentPath::from_laws(laws);
    let last = env.s(len);
    let weight = match side {
        Side::Minus => table.u_at(-last),
        Side::Plus => table.v_at(last),
    };
    Ok(WeightedPath { env, weight, side, constraint_len: len })
}

fn side_domain(side: Side) -> u64 {
    match side {
        Side::Minus => domain::MINUS,
        Side::Plus => domain::PLUS,
    }
}

/// Path `i` always uses stream `i`, so any split of the index range gives
/// the same paths. Falls back to [`sequential_range`] on starvation.
fn sample_side_range(
    spec: &EnvSpec,
    side: Side,
    len: usize,
    range: std::ops::Range<usize>,
    table: &RenewalTable,
    streams: &StreamFactory,
) -> Result<SideDraws> {
    match rejection_range(spec, side, len, range.clone(), table, streams, PROPOSAL_BUDGET) {
        Err(Error::Starvation { .. }) => sequential_range(spec, side, len, range, table, streams),
        other => other,
    }
}

fn rejection_range(
    spec: &EnvSpec,
    side: Side,
    len: usize,
    range: std::ops::Range<usize>,
    table: &RenewalTable,
    streams: &StreamFactory,
    budget: usize,
) -> Result<SideDraws> {
    require_continuous(spec)?;
    if len == 0 || range.is_empty() {
        return Err(Error::Domain("constraint length and batch must be positive".into()));
    }
    let dom = side_domain(side);
    let raw = range
        .into_par_iter()
        .map(|i| {
            let mut rng = streams.stream(dom, i as u64);
            let mut steps: Vec<(f64, f64)> = Vec::with_capacity(len);
            for proposal in 1..=budget {
                steps.clear();
                let mut s = 0.0;
                for _ in 0..len {
                    let (x, r) = spec.sample_log_mean_and_r(&mut rng);
                    s += x;
                    if violated(side, s) {
                        break;
                    }
                    steps.push((x, r));
                }
                if steps.len() == len {
                    return (Some(steps), proposal);
                }
            }
            (None, budget)
        })
        .collect::<Vec<_>>();
    let proposed: usize = raw.iter().map(|r| r.1).sum();
    let accepted = raw.iter().filter(|r| r.0.is_some()).count();
    if accepted < raw.len() || (accepted as f64) < MIN_ACCEPTANCE * proposed as f64 {
        return Err(Error::Starvation { accepted, proposed });
    }
    let paths = raw
        .into_par_iter()
        .map(|(steps, _)| weighted(side, len, &steps.expect("all accepted"), table))
        .collect::<Result<Vec<_>>>()?;
    Ok(SideDraws { acceptance: accepted as f64 / proposed as f64, paths, proposed, sequential: false })
}

/// Sequential resampling: one particle per requested path, extended a step
/// at a time. Particles that break the constraint are replaced by copies of
/// uniformly chosen survivors, so the final lineages are (approximately)
/// draws from the constrained law. The acceptance estimate is the product of
/// the per-step survival fractions.
fn sequential_range(
    spec: &EnvSpec,
    side: Side,
    len: usize,
    range: std::ops::Range<usize>,
    table: &RenewalTable,
    streams: &StreamFactory,
) -> Result<SideDraws> {
    require_continuous(spec)?;
    if len == 0 || range.is_empty() {
        return Err(Error::Domain("constraint length and batch must be positive".into()));
    }
    let n = range.len();
    let family = streams.child(domain::SEQUENTIAL, side_domain(side) ^ ((range.start as u64) << 20));
    let mut rngs: Vec<_> = (0..n as u64).map(|i| family.stream(side_domain(side), i)).collect();
    let mut resampler = family.stream(domain::SEQUENTIAL, 0);
    let mut increments: Vec<Vec<(f64, f64)>> = Vec::with_capacity(len);
    let mut parents: Vec<Vec<u32>> = Vec::with_capacity(len);
    let mut pos = vec![0.0; n];
    let mut log_acceptance = 0.0;
    for _ in 0..len {
        let draws: Vec<(f64, f64)> = rngs.par_iter_mut().map(|r| spec.sample_log_mean_and_r(r)).collect();
        let alive: Vec<u32> = (0..n).filter(|&i| !violated(side, pos[i] + draws[i].0)).map(|i| i as u32).collect();
        if alive.is_empty() {
            return Err(Error::Starvation { accepted: 0, proposed: n });
        }
        log_acceptance += (alive.len() as f64 / n as f64).ln();
        let parent: Vec<u32> = if alive.len() == n {
            alive
        } else {
            (0..n).map(|i| if violated(side, pos[i] + draws[i].0) { alive[resampler.random_range(0..alive.len())] } else { i as u32 }).collect()
        };
        pos = parent.iter().map(|&p| pos[p as usize] + draws[p as usize].0).collect();
        increments.push(draws);
        parents.push(parent);
    }
    let paths = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut steps = vec![(0.0, 0.0); len];
            let mut slot = j;
            for k in (0..len).rev() {
                slot = parents[k][slot] as usize;
                steps[k] = increments[k][slot];
            }
            weighted(side, len, &steps, table)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SideDraws { paths, acceptance: log_acceptance.exp(), proposed: 0, sequential: true })
}

fn sample_side(spec: &EnvSpec, side: Side, len: usize, batch: usize, table: &RenewalTable, streams: &StreamFactory) -> Result<PathBatch> {
    let draws = sample_side_range(spec, side, len, 0..batch, table, streams)?;
    let mut paths = draws.paths;
    let total: f64 = paths.iter().map(|p| p.weight).sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Breakdown("renewal weights sum to zero".into()));
    }
    for p in &mut paths {
        p.weight /= total;
    }
    Ok(PathBatch { side, paths, proposed: draws.proposed, accepted: batch, acceptance: draws.acceptance, sequential: draws.sequential })
}

/// `batch` paths with `S_1, ..., S_k < 0`, weighted by `U(-S_k)`.
pub fn sample_minus(spec: &EnvSpec, k: usize, batch: usize, table: &RenewalTable, streams: &StreamFactory) -> Result<PathBatch> {
    sample_side(spec, Side::Minus, k, batch, table, streams)
}

/// `batch` paths with `S_1, ..., S_p >= 0`, weighted by `V(S_p)`.
pub fn sample_plus(spec: &EnvSpec, p: usize, batch: usize, table: &RenewalTable, streams: &StreamFactory) -> Result<PathBatch> {
    sample_side(spec, Side::Plus, p, batch, table, streams)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruncationDiag {
    /// Iterations after which the half-window change stayed below `tol`
    /// (all of them when it never settled).
    pub steps: usize,
    /// `|x_n - x_{n/2}|` at the last iteration.
    pub last_increment: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LimitDraw {
    pub value: f64,
    pub weight: f64,
    pub diag: TruncationDiag,
}

/// Runs a monotone sequence `x_1, ..., x_max` and returns `x_max`.
///
/// The walk under the conditioned measures returns toward its barrier with
/// polynomially small probability, so a small increment at some `n` says
/// little about what comes later. The whole available path is used; `tol`
/// only decides whether the last half of the iteration moved by less than
/// `tol`, and `steps` records when that became true for good.
fn iterate_monotone<F: FnMut(usize) -> f64>(x0: f64, max: usize, tol: f64, mut next: F) -> (f64, TruncationDiag) {
    let mut xs = Vec::with_capacity(max + 1);
    xs.push(x0);
    let mut inc = f64::INFINITY;
    let mut settled = 0;
    for n in 1..=max {
        let x = next(n);
        xs.push(x);
        inc = (x - xs[n / 2]).abs();
        if !(inc < tol) {
            settled = n;
        }
    }
    let converged = inc < tol;
    let steps = if converged { settled + 1 } else { max };
    (xs[max], TruncationDiag { steps, last_increment: inc, converged })
}

/// `q+_R = lim_n f+_{R,n}(0)`.
pub fn limit_qplus(plus_env: &EnvironmentPath, r: usize, tol: f64, max_n: usize) -> Result<LimitDraw> {
    if r >= plus_env.len() {
        return Err(Error::Range(format!("R = {r} needs a plus path longer than {}", plus_env.len())));
    }
    let max = max_n.min(plus_env.len() - r);
    let mut map = LfMap::IDENTITY;
    let laws = plus_env.laws();
    let (value, diag) = iterate_monotone(0.0, max, tol, |n| {
        map = map.compose(&LfMap::of_law(&laws[r + n - 1]));
        -map.log_survival_at_zero().exp_m1()
    });
    Ok(LimitDraw { value, weight: 1.0, diag })
}

/// `zeta-_{inf,m}(s) = lim_l (1 - f-_{l,m}(s)) / e^{S-_l - S-_m}`, using
///
/// ```text
/// 1 / zeta-_{l,m}(s) = 1 / (1 - s) + sum_{j=m+1}^{l} (eta-_j / 2) e^{S-_j - S-_m}.
/// ```
pub fn limit_zeta_minus_from(minus_env: &EnvironmentPath, m: usize, s: f64, tol: f64, max_l: usize) -> Result<LimitDraw> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Domain(format!("s = {s} outside [0, 1)")));
    }
    if m >= minus_env.len() {
        return Err(Error::Range(format!("m = {m} needs a minus path longer than {}", minus_env.len())));
    }
    let max = max_l.min(minus_env.len() - m);
    let walk = minus_env.walk();
    let laws = minus_env.laws();
    let base = 1.0 / (1.0 - s);
    let mut kappa = 0.0;
    let (value, diag) = iterate_monotone(1.0 - s, max, tol, |i| {
        let j = m + i;
        kappa += 0.5 * laws[j - 1].eta() * (walk[j] - walk[m]).exp();
        1.0 / (base + kappa)
    });
    Ok(LimitDraw { value, weight: 1.0, diag })
}

/// `zeta-(s) = zeta-_{inf,0}(s)`.
pub fn limit_zeta_minus(minus_env: &EnvironmentPath, s: f64, tol: f64, max_l: usize) -> Result<LimitDraw> {
    limit_zeta_minus_from(minus_env, 0, s, tol, max_l)
}

/// `s ((1 - theta) / (1 - theta s))^2`.
pub fn limit_pgf(theta: f64, s: f64) -> Result<f64> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Domain(format!("theta = {theta} outside (0, 1)")));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!("s = {s} outside [0, 1]")));
    }
    Ok(s * ((1.0 - theta) / (1.0 - theta * s)).powi(2))
}

/// Independent minus and plus batches; pair `i` has weight proportional to
/// the product of the side weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairBatch {
    pub minus: PathBatch,
    pub plus: PathBatch,
    pub weights: Vec<f64>,
}

pub fn sample_pairs(spec: &EnvSpec, opts: &LimitOptions, table: &RenewalTable, streams: &StreamFactory) -> Result<PairBatch> {
    opts.validate()?;
    let minus = sample_minus(spec, opts.path_len, opts.batch, table, streams)?;
    let plus = sample_plus(spec, opts.path_len, opts.batch, table, streams)?;
    let mut weights: Vec<f64> = minus.paths.iter().zip(&plus.paths).map(|(a, b)| a.weight * b.weight).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(PairBatch { minus, plus, weights })
}

/// `f-_{k,0} = f-_k o ... o f-_1`.
fn minus_prefix_map(minus_env: &EnvironmentPath, k: usize) -> LfMap {
    minus_env.laws()[..k].iter().fold(LfMap::IDENTITY, |acc, law| LfMap::of_law(law).compose(&acc))
}

/// Limit variable for the past-minimum bottleneck:
/// `zeta-(f+_{0,R}(0)) e^{-S+_R}` for `R >= 0` and `zeta-_{inf,|R|}(0)` for
/// `R < 0`.
pub fn past_theta(minus: &EnvironmentPath, plus: &EnvironmentPath, r: i64, tol: f64, max_steps: usize) -> Result<LimitDraw> {
    if r >= 0 {
        let r = r as usize;
        if r > plus.len() {
            return Err(Error::Range(format!("R = {r} beyond plus path")));
        }
        let x = segment_map(plus, 0, r)?.eval(0.0);
        let z = limit_zeta_minus(minus, x, tol, max_steps)?;
        Ok(LimitDraw { value: z.value * (-plus.s(r)).exp(), ..z })
    } else {
        limit_zeta_minus_from(minus, r.unsigned_abs() as usize, 0.0, tol, max_steps)
    }
}

/// Limit variable for the prospective-minimum bottleneck: `q+_R` for
/// `R >= 0` and `f-_{|R|,0}(q+)` for `R < 0`.
pub fn future_theta(minus: &EnvironmentPath, plus: &EnvironmentPath, r: i64, tol: f64, max_steps: usize) -> Result<LimitDraw> {
    if r >= 0 {
        limit_qplus(plus, r as usize, tol, max_steps)
    } else {
        let k = r.unsigned_abs() as usize;
        if k > minus.len() {
            return Err(Error::Range(format!("R = {r} beyond minus path")));
        }
        let q = limit_qplus(plus, 0, tol, max_steps)?;
        Ok(LimitDraw { value: minus_prefix_map(minus, k).eval(q.value), ..q })
    }
}

/// `zeta = zeta-(q+)`.
pub fn zeta(minus: &EnvironmentPath, plus: &EnvironmentPath, tol: f64, max_steps: usize) -> Result<LimitDraw> {
    let q = limit_qplus(plus, 0, tol, max_steps)?;
    let z = limit_zeta_minus(minus, q.value, tol, max_steps)?;
    Ok(LimitDraw {
        value: z.value,
        weight: 1.0,
        diag: TruncationDiag {
            steps: q.diag.steps.max(z.diag.steps),
            last_increment: q.diag.last_increment.max(z.diag.last_increment),
            converged: q.diag.converged && z.diag.converged,
        },
    })
}

type PairFn = fn(&EnvironmentPath, &EnvironmentPath, i64, f64, usize) -> Result<LimitDraw>;

impl PairBatch {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn draws(&self, f: PairFn, r: i64, opts: &LimitOptions) -> Result<Vec<LimitDraw>> {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let d = f(&self.minus.paths[i].env, &self.plus.paths[i].env, r, opts.tol, opts.max_steps)?;
                Ok(LimitDraw { weight: self.weights[i], ..d })
            })
            .collect()
    }

    pub fn past_theta_draws(&self, r: i64, opts: &LimitOptions) -> Result<Vec<LimitDraw>> {
        self.draws(past_theta, r, opts)
    }

    pub fn future_theta_draws(&self, r: i64, opts: &LimitOptions) -> Result<Vec<LimitDraw>> {
        self.draws(future_theta, r, opts)
    }

    pub fn zeta_draws(&self, opts: &LimitOptions) -> Result<Vec<LimitDraw>> {
        self.draws(|m, p, _, tol, max| zeta(m, p, tol, max), 0, opts)
    }
}

/// Pairs held in memory at once by [`sample_limit_set`].
const PAIR_CHUNK: usize = 256;

/// Past and future limit draws for several `R`, plus `zeta`, all computed
/// from the same pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitSet {
    pub r_values: Vec<i64>,
    /// `past[k]` belongs to `r_values[k]`.
    pub past: Vec<Vec<LimitDraw>>,
    pub future: Vec<Vec<LimitDraw>>,
    pub zeta: Vec<LimitDraw>,
    pub minus_acceptance: f64,
    pub plus_acceptance: f64,
    /// Chunks (per side) that needed the sequential fallback.
    pub sequential_chunks: usize,
}

impl LimitSet {
    pub fn past_for(&self, r: i64) -> Option<&[LimitDraw]> {
        self.r_values.iter().position(|&x| x == r).map(|k| self.past[k].as_slice())
    }

    pub fn future_for(&self, r: i64) -> Option<&[LimitDraw]> {
        self.r_values.iter().position(|&x| x == r).map(|k| self.future[k].as_slice())
    }
}

/// Same draws as [`sample_pairs`] followed by the `*_draws` methods, but the
/// pairs are generated and dropped in chunks so memory stays bounded.
pub fn sample_limit_set(
    spec: &EnvSpec,
    r_values: &[i64],
    opts: &LimitOptions,
    table: &RenewalTable,
    streams: &StreamFactory,
) -> Result<LimitSet> {
    opts.validate()?;
    let k = r_values.len();
    let mut past = vec![Vec::with_capacity(opts.batch); k];
    let mut future = vec![Vec::with_capacity(opts.batch); k];
    let mut zetas = Vec::with_capacity(opts.batch);
    let (mut minus_acc, mut plus_acc, mut sequential_chunks) = (0.0, 0.0, 0usize);
    let mut start = 0;
    while start < opts.batch {
        let end = (start + PAIR_CHUNK).min(opts.batch);
        let minus = sample_side_range(spec, Side::Minus, opts.path_len, start..end, table, streams)?;
        let plus = sample_side_range(spec, Side::Plus, opts.path_len, start..end, table, streams)?;
        let size = (end - start) as f64;
        minus_acc += size * minus.acceptance;
        plus_acc += size * plus.acceptance;
        sequential_chunks += usize::from(minus.sequential) + usize::from(plus.sequential);
        let (minus, plus) = (minus.paths, plus.paths);
        let chunk = minus
            .par_iter()
            .zip(plus.par_iter())
            .map(|(m, p)| {
                let w = m.weight * p.weight;
                let mut pa = Vec::with_capacity(k);
                let mut fu = Vec::with_capacity(k);
                for &r in r_values {
                    pa.push(LimitDraw { weight: w, ..past_theta(&m.env, &p.env, r, opts.tol, opts.max_steps)? });
                    fu.push(LimitDraw { weight: w, ..future_theta(&m.env, &p.env, r, opts.tol, opts.max_steps)? });
                }
                let z = LimitDraw { weight: w, ..zeta(&m.env, &p.env, opts.tol, opts.max_steps)? };
                Ok((pa, fu, z))
            })
            .collect::<Result<Vec<_>>>()?;
        for (pa, fu, z) in chunk {
            for j in 0..k {
                past[j].push(pa[j]);
                future[j].push(fu[j]);
            }
            zetas.push(z);
        }
        start = end;
    }
    let total: f64 = zetas.iter().map(|d| d.weight).sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Breakdown("renewal weights sum to zero".into()));
    }
    for d in past.iter_mut().chain(future.iter_mut()).flatten().chain(zetas.iter_mut()) {
        d.weight /= total;
    }
    Ok(LimitSet {
        r_values: r_values.to_vec(),
        past,
        future,
        zeta: zetas,
        minus_acceptance: minus_acc / opts.batch as f64,
        plus_acceptance: plus_acc / opts.batch as f64,
        sequential_chunks,
    })
}

/// Weighted draws of the past-minimum limit variable.
pub fn sample_past_theta(
    spec: &EnvSpec,
    r: i64,
    opts: &LimitOptions,
    table: &RenewalTable,
    streams: &StreamFactory,
) -> Result<Vec<LimitDraw>> {
    sample_pairs(spec, opts, table, streams)?.past_theta_draws(r, opts)
}

/// Weighted draws of the prospective-minimum limit variable.
pub fn sample_future_theta(
    spec: &EnvSpec,
    r: i64,
    opts: &LimitOptions,
    table: &RenewalTable,
    streams: &StreamFactory,
) -> Result<Vec<LimitDraw>> {
    sample_pairs(spec, opts, table, streams)?.future_theta_draws(r, opts)
}

/// Converged draws as `(values, weights)`, weights renormalized.
pub fn converged_sample(draws: &[LimitDraw]) -> (Vec<f64>, Vec<f64>) {
    let kept: Vec<&LimitDraw> = draws.iter().filter(|d| d.diag.converged).collect();
    let total: f64 = kept.iter().map(|d| d.weight).sum();
    (kept.iter().map(|d| d.value).collect(), kept.iter().map(|d| d.weight / total).collect())
}

pub fn write_limit_draws<W: Write>(draws: &[LimitDraw], mut out: W) -> std::io::Result<()> {
    writeln!(out, "value,weight,converged,steps")?;
    for d in draws {
        writeln!(out, "{},{},{},{}", d.value, d.weight, d.diag.converged, d.diag.steps)?;
    }
    Ok(())
}
