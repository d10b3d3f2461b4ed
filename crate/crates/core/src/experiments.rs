//! Monte Carlo pipelines for the conditional limit theorems.
//!
//! Every pipeline produces long-format rows (one row per replica, observable
//! and grid point) and computes its aggregates from those rows only, so the
//! JSON summary can be rebuilt from the CSV.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioned::{renewal_table_for, sample_limit_set, LimitOptions, LimitSet};
use crate::env_model::{estimate_rho, sample_environment, EnvSpec, EnvironmentPath, RhoEstimate};
use crate::error::{Error, Result};
use crate::fluctuation::{arcsine_cdf, ks_against_cdf, leftmost_min_index, RenewalTable};
use crate::lf_algebra::{quantities, sandwich_from_quantities, ConditionalLaw};
use crate::rng::{domain, StreamFactory};
use crate::stats::{effective_sample_size, iqr, mann_kendall, median, ols_slope, weighted_ks_two_sample, MannKendall};

/// Artifact tolerance for the Laplace medians at the largest `n`.
pub const MEDIAN_TOLERANCE: f64 = 0.03;
/// Ceiling for the median KS distance at the largest `n`.
pub const KS_CEILING: f64 = 0.08;
/// Level of the one-sided trend tests.
pub const TREND_LEVEL: f64 = 0.05;
/// Slack allowed in exact inequalities.
pub const EXACT_SLACK: f64 = 1e-12;
/// Admissible range of the log-O regression slope.
pub const SLOPE_RANGE: (f64, f64) = (0.8, 1.2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    #[serde(default = "default_sweep")]
    pub n_sweep: Vec<usize>,
    #[serde(default = "default_t")]
    pub t: f64,
    #[serde(default = "default_r_values")]
    pub r_values: Vec<i64>,
    #[serde(default = "default_s_grid")]
    pub s_grid: Vec<f64>,
    /// The `lambda = 0` control column is always added.
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub limit: LimitOptions,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    #[serde(default = "default_min_occupancy")]
    pub min_branch_occupancy: usize,
}

fn default_sweep() -> Vec<usize> {
    vec![250, 500, 1000, 2000, 4000]
}
fn default_t() -> f64 {
    0.5
}
fn default_r_values() -> Vec<i64> {
    vec![-2, 0, 2]
}
fn default_s_grid() -> Vec<f64> {
    vec![0.3, 0.6, 0.9, 1.0]
}
fn default_lambda_grid() -> Vec<f64> {
    vec![0.5, 1.0, 3.0]
}
fn default_replicas() -> usize {
    2000
}
fn default_epsilons() -> Vec<f64> {
    vec![0.2, 0.1, 0.05]
}
fn default_permutations() -> usize {
    200
}
fn default_min_occupancy() -> usize {
    50
}

impl ExperimentConfig {
    pub fn new(env: EnvSpec) -> Self {
        Self {
            env,
            n_sweep: default_sweep(),
            t: default_t(),
            r_values: default_r_values(),
            s_grid: default_s_grid(),
            lambda_grid: default_lambda_grid(),
            replicas: default_replicas(),
            seed: 0,
            epsilons: default_epsilons(),
            limit: LimitOptions::default(),
            permutations: default_permutations(),
            min_branch_occupancy: default_min_occupancy(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.env.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.n_sweep.is_empty() {
            return bad("n_sweep is empty".into());
        }
        if self.n_sweep.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("n_sweep {:?} is not strictly increasing", self.n_sweep));
        }
        if !(self.t > 0.0 && self.t < 1.0) {
            return bad(format!("t = {} outside (0, 1)", self.t));
        }
        for &n in &self.n_sweep {
            let nt = split_point(n, self.t);
            if nt == 0 || nt >= n || n >= 1 << 31 {
                return bad(format!("n = {n} gives floor(n t) = {nt}, need 1 <= floor(n t) < n"));
            }
        }
        if self.r_values.is_empty() {
            return bad("r_values is empty".into());
        }
        if self.s_grid.is_empty() || self.s_grid.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return bad(format!("s_grid {:?} must be nonempty within (0, 1]", self.s_grid));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return bad(format!("lambda_grid {:?} must be nonempty and positive", self.lambda_grid));
        }
        if self.replicas < 100 {
            return bad(format!("replicas = {} below 100", self.replicas));
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return bad(format!("epsilons {:?} must be nonempty and positive", self.epsilons));
        }
        if self.permutations < 200 {
            return bad(format!("permutations = {} below 200", self.permutations));
        }
        self.limit.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.r_values.iter().any(|r| r.unsigned_abs() as usize >= self.limit.path_len) {
            return bad("|R| must be smaller than limit.path_len".into());
        }
        Ok(())
    }

    fn streams(&self) -> StreamFactory {
        StreamFactory::new(self.seed)
    }
}

/// `floor(n t)`.
pub fn split_point(n: usize, t: f64) -> usize {
    (n as f64 * t).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// `tau(n) < floor(n t)`
    MinLeft,
    /// `tau(n) >= floor(n t)`
    MinRight,
    LimitPast,
    LimitFuture,
    LimitZeta,
    /// Rows not split by branch.
    All,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::MinLeft => "min-left",
            Branch::MinRight => "min-right",
            Branch::LimitPast => "limit-past",
            Branch::LimitFuture => "limit-future",
            Branch::LimitZeta => "limit-zeta",
            Branch::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "min-left" => Branch::MinLeft,
            "min-right" => Branch::MinRight,
            "limit-past" => Branch::LimitPast,
            "limit-future" => Branch::LimitFuture,
            "limit-zeta" => Branch::LimitZeta,
            "all" => Branch::All,
            _ => return Err(Error::Config(format!("unknown branch {s:?}"))),
        })
    }
}

/// One long-format report row.
///
/// Replica rows carry `n` and the three minimum positions; limit-sampler rows
/// leave them empty, use the pair index as `replica`, and set `clamped` when
/// the truncated iteration had not settled.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub n: Option<usize>,
    pub replica: usize,
    pub tau_n: Option<usize>,
    pub tau_nt: Option<usize>,
    pub tau_ntn: Option<usize>,
    pub branch: Branch,
    pub observable: String,
    pub s_or_lambda: Option<f64>,
    pub value: f64,
    pub weight: f64,
    pub clamped: bool,
}

pub const CSV_HEADER: &str = "n,replica,tau_n,tau_nt,tau_ntn,branch,observable,s_or_lambda,value,weight,clamped";

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_rows_csv<W: Write>(rows: &[Row], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            opt(&r.n),
            r.replica,
            opt(&r.tau_n),
            opt(&r.tau_nt),
            opt(&r.tau_ntn),
            r.branch.as_str(),
            r.observable,
            opt(&r.s_or_lambda),
            r.value,
            r.weight,
            r.clamped as u8
        )?;
    }
    Ok(())
}

pub fn read_rows_csv<R: BufRead>(input: R) -> Result<Vec<Row>> {
    let bad = |line: usize, what: &str| Error::Config(format!("row {line}: bad {what}"));
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(h)) if h == CSV_HEADER => {}
        _ => return Err(Error::Config("missing or wrong CSV header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::Config(e.to_string()))?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(bad(i + 2, "field count"));
        }
        let ou = |s: &str, what| -> Result<Option<usize>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(i + 2, what))
            }
        };
        rows.push(Row {
            n: ou(f[0], "n")?,
            replica: f[1].parse().map_err(|_| bad(i + 2, "replica"))?,
            tau_n: ou(f[2], "tau_n")?,
            tau_nt: ou(f[3], "tau_nt")?,
            tau_ntn: ou(f[4], "tau_ntn")?,
            branch: Branch::parse(f[5])?,
            observable: f[6].to_string(),
            s_or_lambda: if f[7].is_empty() { None } else { Some(f[7].parse().map_err(|_| bad(i + 2, "s_or_lambda"))?) },
            value: f[8].parse().map_err(|_| bad(i + 2, "value"))?,
            weight: f[9].parse().map_err(|_| bad(i + 2, "weight"))?,
            clamped: match f[10] {
                "0" => false,
                "1" => true,
                _ => return Err(bad(i + 2, "clamped")),
            },
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Theorem1,
    Theorem2,
    Diagnostics,
    Fluctuation,
    Limits,
}

impl Pipeline {
    pub fn name(&self) -> &'static str {
        match self {
            Pipeline::Theorem1 => "theorem1",
            Pipeline::Theorem2 => "theorem2",
            Pipeline::Diagnostics => "diagnostics",
            Pipeline::Fluctuation => "fluctuation",
            Pipeline::Limits => "limits",
        }
    }
}

/// Median and IQR of one group of rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub n: Option<usize>,
    pub observable: String,
    pub s_or_lambda: Option<f64>,
    pub branch: Branch,
    pub count: usize,
    pub median: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Occupancy {
    pub n: usize,
    pub min_left: usize,
    pub min_right: usize,
    pub fraction_right: f64,
    /// `1 - I_t(1 - rho, rho)` when the preset has a nominal `rho`.
    pub expected_right: Option<f64>,
    pub se: f64,
    /// `(fraction - expected) / se`.
    pub z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsEntry {
    pub n: usize,
    /// 1: `tau(n) >= nt`, index `tau(nt) + R`; 2: `tau(n) < nt`, index `tau(nt, n) + R`.
    pub part: u8,
    pub r: i64,
    pub s: f64,
    pub branch_size: usize,
    pub limit_size: usize,
    pub distance: f64,
    pub p_value: f64,
    /// Part 1 only: distance to `s ((1 - Theta)/(1 - Theta s))^2` with `Theta`
    /// in place of `1 - Theta`.
    pub distance_untransformed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClampRate {
    pub n: usize,
    pub observable: String,
    pub clamped: usize,
    pub total: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trend {
    pub series: Vec<f64>,
    pub mann_kendall: MannKendall,
}

impl Trend {
    fn of(series: Vec<f64>) -> Option<Self> {
        let mk = mann_kendall(&series).ok()?;
        Some(Self { series, mann_kendall: mk })
    }

    pub fn decreasing(&self) -> bool {
        self.mann_kendall.p_decreasing < TREND_LEVEL
    }

    pub fn increasing(&self) -> bool {
        self.mann_kendall.p_increasing < TREND_LEVEL
    }

    /// Nonincreasing in the sign-trend sense: no net upward pairs and the
    /// last point not above the first.
    pub fn nonincreasing(&self) -> bool {
        self.mann_kendall.s <= 0 && self.series.last() <= self.series.first()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem1Aggregates {
    pub summaries: Vec<Summary>,
    pub occupancy: Vec<Occupancy>,
    pub ks: Vec<KsEntry>,
    /// Median KS distance over parts, `R` and `s < 1`, per `n`.
    pub ks_median: Vec<(usize, f64)>,
    pub ks_trend: Option<Trend>,
    pub clamp_rates: Vec<ClampRate>,
    pub limit_draws: Vec<LimitDrawSummary>,
    /// Replica pgf values in `(0, 1]`.
    pub replica_values_in_range: bool,
    /// Limit pgf values in `(0, 1]`.
    pub limit_values_in_range: bool,
    /// Every value at `s = 1` equals 1.
    pub degenerate_at_one: bool,
    /// Every limit variable draw in `(0, 1)`.
    pub draws_in_unit_interval: bool,
    pub median_ks_at_largest_n: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitDrawSummary {
    pub branch: Branch,
    pub observable: String,
    pub count: usize,
    pub unsettled: usize,
    pub ess: f64,
    pub weighted_mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaplaceCheck {
    pub lambda: f64,
    pub target: f64,
    pub median_at_largest_n: f64,
    pub median_ok: bool,
    pub iqr_smallest_n: f64,
    pub iqr_largest_n: f64,
    pub iqr_decreases: bool,
    /// IQR strictly decreasing at every step of the sweep.
    pub iqr_monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem2Aggregates {
    pub summaries: Vec<Summary>,
    pub occupancy: Vec<Occupancy>,
    pub checks: Vec<LaplaceCheck>,
    /// Every `lambda = 0` value equals 1.
    pub control_exact: bool,
    pub passed: bool,
    /// Larger sweep to try when the check fails.
    pub suggested_sweep: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Deviation {
    pub observable: String,
    pub condition: Branch,
    pub epsilon: f64,
    /// `P(event)` per `n` in sweep order.
    pub probabilities: Vec<f64>,
    pub counts: Vec<usize>,
    pub trend: Option<Trend>,
    pub decreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub n: usize,
    pub branch: Branch,
    pub count: usize,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsAggregates {
    pub summaries: Vec<Summary>,
    pub occupancy: Vec<Occupancy>,
    pub deviations: Vec<Deviation>,
    pub median_log_o: Vec<f64>,
    pub median_log_o_trend: Option<Trend>,
    pub slopes: Vec<SlopeFit>,
    pub clamp_rates: Vec<ClampRate>,
    pub alpha_below_one: usize,
    pub beta_above_one: usize,
    /// Criterion events at `epsilon = 0.1`.
    pub key_trends_decreasing: bool,
    pub log_o_increasing: bool,
    pub slope_at_largest_n: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluctuationAggregates {
    pub summaries: Vec<Summary>,
    pub rho: RhoEstimate,
    pub nominal_rho: Option<f64>,
    /// KS distance of `tau(n)/n` to the arcsine law with the nominal (or
    /// estimated) `rho`, per `n`.
    pub arcsine_ks: Vec<(usize, f64)>,
    pub renewal: RenewalTable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitsAggregates {
    pub draws: Vec<LimitDrawSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "pipeline", rename_all = "lowercase")]
pub enum Aggregates {
    Theorem1(Box<Theorem1Aggregates>),
    Theorem2(Box<Theorem2Aggregates>),
    Diagnostics(Box<DiagnosticsAggregates>),
    Fluctuation(Box<FluctuationAggregates>),
    Limits(Box<LimitsAggregates>),
}

/// Exactness checks made while the rows are produced; they look at numbers
/// that do not appear in the rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Checks {
    pub sandwich_evaluations: usize,
    pub sandwich_violations: usize,
    pub worst_sandwich_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitSamplerInfo {
    pub minus_acceptance: f64,
    pub plus_acceptance: f64,
    pub sequential_chunks: usize,
    pub pairs: usize,
    pub pair_ess: f64,
    pub renewal_truncated: usize,
    pub renewal_replicas: usize,
    pub renewal_horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub pipeline: Pipeline,
    pub config: ExperimentConfig,
    #[serde(skip)]
    pub rows: Vec<Row>,
    pub row_count: usize,
    pub aggregates: Aggregates,
    pub checks: Checks,
    pub limit_sampler: Option<LimitSamplerInfo>,
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_rows_csv(&self.rows, out)
    }

    /// Everything except the rows.
    pub fn aggregates_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

// ---------------------------------------------------------------------------
// replica plumbing

/// One sampled environment with its minimum positions.
struct Replica {
    env: EnvironmentPath,
    n: usize,
    nt: usize,
    replica: usize,
    tau_n: usize,
    tau_nt: usize,
    tau_ntn: usize,
    branch: Branch,
}

impl Replica {
    fn sample(spec: &EnvSpec, n: usize, t: f64, replica: usize, streams: &StreamFactory) -> Result<Self> {
        let mut rng = streams.stream(domain::ENVIRONMENT, ((n as u64) << 32) | replica as u64);
        let env = sample_environment(spec, n, &mut rng)?;
        let nt = split_point(n, t);
        let walk = env.walk();
        let tau_n = leftmost_min_index(walk, 0, n)?;
        let tau_nt = leftmost_min_index(walk, 0, nt)?;
        let tau_ntn = leftmost_min_index(walk, nt, n)?;
        let branch = if tau_n >= nt { Branch::MinRight } else { Branch::MinLeft };
        Ok(Self { env, n, nt, replica, tau_n, tau_nt, tau_ntn, branch })
    }

    fn row(&self, observable: String, s_or_lambda: Option<f64>, value: f64, clamped: bool) -> Row {
        Row {
            n: Some(self.n),
            replica: self.replica,
            tau_n: Some(self.tau_n),
            tau_nt: Some(self.tau_nt),
            tau_ntn: Some(self.tau_ntn),
            branch: self.branch,
            observable,
            s_or_lambda,
            value,
            weight: 1.0,
            clamped,
        }
    }

    /// `tau + R` clamped to `[0, n]`.
    fn index(&self, tau: usize, r: i64) -> (usize, bool) {
        let raw = tau as i64 + r;
        if raw < 0 {
            (0, true)
        } else if raw > self.n as i64 {
            (self.n, true)
        } else {
            (raw as usize, false)
        }
    }

    /// Index used by Theorem 1 for this replica's branch.
    fn bottleneck(&self, r: i64) -> (usize, bool) {
        match self.branch {
            Branch::MinRight => self.index(self.tau_nt, r),
            _ => self.index(self.tau_ntn, r),
        }
    }
}

/// Sample all replicas for one `n`, map each to rows, and keep replica order.
fn per_replica<F>(cfg: &ExperimentConfig, n: usize, f: F) -> Result<Vec<(Vec<Row>, Checks)>>
where
    F: Fn(&Replica) -> Result<(Vec<Row>, Checks)> + Sync,
{
    let streams = cfg.streams();
    (0..cfg.replicas)
        .into_par_iter()
        .map(|rep| f(&Replica::sample(&cfg.env, n, cfg.t, rep, &streams)?))
        .collect()
}

fn merge_checks(into: &mut Checks, from: &Checks) {
    into.sandwich_evaluations += from.sandwich_evaluations;
    into.sandwich_violations += from.sandwich_violations;
    into.worst_sandwich_excess = into.worst_sandwich_excess.max(from.worst_sandwich_excess);
}

fn collect(parts: Vec<(Vec<Row>, Checks)>, rows: &mut Vec<Row>, checks: &mut Checks) {
    for (r, c) in parts {
        rows.extend(r);
        merge_checks(checks, &c);
    }
}

/// `E[s^{Z_m} | T = n]` including the boundary generations: `Z_0 = 1` and
/// `Z_n = 0` on `{T = n}`.
fn pgf_at(env: &EnvironmentPath, m: usize, n: usize, s: f64, checks: &mut Checks) -> Result<f64> {
    if m == 0 {
        return Ok(s);
    }
    if m >= n {
        return Ok(1.0);
    }
    let value = ConditionalLaw::new(env, m, n)?.pgf(s);
    let (lo, hi) = sandwich_from_quantities(&quantities(env, m, n)?, s);
    let excess = (lo - value).max(value - hi);
    checks.sandwich_evaluations += 1;
    if excess > EXACT_SLACK {
        checks.sandwich_violations += 1;
    }
    checks.worst_sandwich_excess = checks.worst_sandwich_excess.max(excess);
    Ok(value)
}

fn tagged(name: &str, r: i64) -> String {
    format!("{name}[R={r}]")
}

// ---------------------------------------------------------------------------
// pipelines

pub fn run(pipeline: Pipeline, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    match pipeline {
        Pipeline::Theorem1 => run_theorem1(cfg),
        Pipeline::Theorem2 => run_theorem2(cfg),
        Pipeline::Diagnostics => run_diagnostics(cfg),
        Pipeline::Fluctuation => run_fluctuation(cfg),
        Pipeline::Limits => run_limits(cfg),
    }
}

fn limit_rows(set: &LimitSet) -> Vec<Row> {
    let mut rows = Vec::new();
    let mut push = |branch: Branch, observable: String, i: usize, d: &crate::conditioned::LimitDraw| {
        rows.push(Row {
            n: None,
            replica: i,
            tau_n: None,
            tau_nt: None,
            tau_ntn: None,
            branch,
            observable,
            s_or_lambda: None,
            value: d.value,
            weight: d.weight,
            clamped: !d.diag.converged,
        })
    };
    for (k, &r) in set.r_values.iter().enumerate() {
        for (i, d) in set.past[k].iter().enumerate() {
            push(Branch::LimitPast, tagged("theta", r), i, d);
        }
        for (i, d) in set.future[k].iter().enumerate() {
            push(Branch::LimitFuture, tagged("theta", r), i, d);
        }
    }
    for (i, d) in set.zeta.iter().enumerate() {
        push(Branch::LimitZeta, "zeta".into(), i, d);
    }
    rows
}

fn limit_set_for(cfg: &ExperimentConfig) -> Result<(LimitSet, LimitSamplerInfo)> {
    let streams = cfg.streams();
    let table = renewal_table_for(&cfg.env, &cfg.limit, &streams)?;
    let set = sample_limit_set(&cfg.env, &cfg.r_values, &cfg.limit, &table, &streams)?;
    let weights: Vec<f64> = set.zeta.iter().map(|d| d.weight).collect();
    let info = LimitSamplerInfo {
        minus_acceptance: set.minus_acceptance,
        plus_acceptance: set.plus_acceptance,
        sequential_chunks: set.sequential_chunks,
        pairs: set.zeta.len(),
        pair_ess: effective_sample_size(&weights),
        renewal_truncated: table.truncated,
        renewal_replicas: table.replicas,
        renewal_horizon: table.horizon,
    };
    Ok((set, info))
}

/// Branch-conditioned conditional pgf values against the limit sampler.
pub fn run_theorem1(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    if !cfg.env.is_continuous() {
        return Err(Error::Config(format!("theorem1 needs a continuous preset, got {}", cfg.env.name())));
    }
    let (set, info) = limit_set_for(cfg)?;
    let mut rows = Vec::new();
    let mut checks = Checks::default();
    for &n in &cfg.n_sweep {
        let parts = per_replica(cfg, n, |rep| {
            let mut out = Vec::with_capacity(cfg.r_values.len() * cfg.s_grid.len());
            let mut c = Checks::default();
            for &r in &cfg.r_values {
                let (m, clamped) = rep.bottleneck(r);
                for &s in &cfg.s_grid {
                    let v = pgf_at(&rep.env, m, n, s, &mut c)?;
                    out.push(rep.row(tagged("pgf", r), Some(s), v, clamped));
                }
            }
            Ok((out, c))
        })?;
        collect(parts, &mut rows, &mut checks);
    }
    rows.extend(limit_rows(&set));
    finish(Pipeline::Theorem1, cfg, rows, checks, Some(info))
}

/// Conditional Laplace transform of `Z_{nt} / O_{nt,n}`.
pub fn run_theorem2(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &n in &cfg.n_sweep {
        let parts = per_replica(cfg, n, |rep| {
            let q = quantities(&rep.env, rep.nt, n)?;
            let law = ConditionalLaw::new(&rep.env, rep.nt, n)?;
            let o = q.o();
            if !(o > 0.0 && o.is_finite()) {
                return Err(Error::Breakdown(format!("O_(nt,n) = {o} at n = {n}, replica {}", rep.replica)));
            }
            let mut out = vec![rep.row("log_o".into(), None, q.log_o, false)];
            for lambda in std::iter::once(0.0).chain(cfg.lambda_grid.iter().copied()) {
                let v = crate::lf_algebra::laplace_of(&law, lambda, o);
                out.push(rep.row("laplace".into(), Some(lambda), v, false));
            }
            Ok((out, Checks::default()))
        })?;
        collect(parts, &mut rows, &mut Checks::default());
    }
    finish(Pipeline::Theorem2, cfg, rows, Checks::default(), None)
}

/// Observables of the convergence lemmas, evaluated at `nt` and at the
/// bottleneck indices.
pub fn run_diagnostics(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &n in &cfg.n_sweep {
        let parts = per_replica(cfg, n, |rep| diagnostics_rows(rep, &cfg.r_values))?;
        collect(parts, &mut rows, &mut Checks::default());
    }
    finish(Pipeline::Diagnostics, cfg, rows, Checks::default(), None)
}

fn diagnostics_rows(rep: &Replica, r_values: &[i64]) -> Result<(Vec<Row>, Checks)> {
    let n = rep.n;
    let env = &rep.env;
    let q = quantities(env, rep.nt, n)?;
    let walk = env.walk();
    let gap = match rep.branch {
        Branch::MinRight => walk[rep.nt] - walk[rep.tau_nt],
        _ => walk[rep.nt] - walk[rep.tau_ntn],
    };
    let mut out = vec![
        rep.row("delta".into(), None, q.delta, false),
        rep.row("alpha".into(), None, q.alpha, false),
        rep.row("beta".into(), None, q.beta, false),
        rep.row("log_o".into(), None, q.log_o, false),
        rep.row("o_ratio".into(), None, (q.log_o_prev - q.log_o).exp(), false),
        rep.row("o_times_survival".into(), None, (q.log_o + q.log_u_fwd).exp(), false),
        rep.row("comm1".into(), None, (q.log_u_prefix - walk[rep.tau_nt]).exp(), false),
        rep.row("walk_gap".into(), None, gap, false),
    ];
    for &r in r_values {
        // alpha_n and beta_n at the global minimum
        let (m, clamped) = rep.index(rep.tau_n, r);
        let (a, b) = if m < n {
            let qm = quantities(env, m, n)?;
            (qm.alpha, qm.beta)
        } else {
            (f64::NAN, f64::NAN)
        };
        out.push(rep.row(tagged("alpha_min", r), None, a, clamped || m >= n));
        out.push(rep.row(tagged("beta_min", r), None, b, clamped || m >= n));
        // forward extinction probability and O at the branch bottleneck
        let (m, clamped) = rep.bottleneck(r);
        let (f, log_o) = if m < n {
            let qm = quantities(env, m, n)?;
            (qm.f_fwd(), qm.log_o)
        } else {
            (f64::NAN, f64::NAN)
        };
        out.push(rep.row(tagged("f_bottleneck", r), None, f, clamped || m >= n));
        out.push(rep.row(tagged("log_o_bottleneck", r), None, log_o, clamped || m >= n));
        if rep.branch == Branch::MinRight {
            let (m, clamped) = rep.index(rep.tau_nt, r);
            let v = (crate::lf_algebra::log_survival(env, 0, m)? - walk[m]).exp();
            out.push(rep.row(tagged("prefix_survival_scaled", r), None, v, clamped));
        }
    }
    Ok((out, Checks::default()))
}

/// Positions of the minimum against the arcsine law, and the renewal table.
pub fn run_fluctuation(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &n in &cfg.n_sweep {
        let parts = per_replica(cfg, n, |rep| {
            let row = rep.row("tau_over_n".into(), None, rep.tau_n as f64 / n as f64, false);
            Ok((vec![row], Checks::default()))
        })?;
        collect(parts, &mut rows, &mut Checks::default());
    }
    finish(Pipeline::Fluctuation, cfg, rows, Checks::default(), None)
}

/// Draws of the limit variables only.
pub fn run_limits(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let (set, info) = limit_set_for(cfg)?;
    finish(Pipeline::Limits, cfg, limit_rows(&set), Checks::default(), Some(info))
}

fn finish(
    pipeline: Pipeline,
    cfg: &ExperimentConfig,
    rows: Vec<Row>,
    checks: Checks,
    limit_sampler: Option<LimitSamplerInfo>,
) -> Result<ExperimentReport> {
    let (aggregates, mut warnings) = aggregate(pipeline, cfg, &rows)?;
    if checks.sandwich_violations > 0 {
        warnings.push(format!("{} sandwich violations beyond {EXACT_SLACK}", checks.sandwich_violations));
    }
    if let Some(info) = &limit_sampler {
        if info.sequential_chunks > 0 {
            warnings.push(format!("rejection starved; sequential resampling produced {} path chunks", info.sequential_chunks));
        }
        if info.renewal_truncated > 0 {
            warnings.push(format!(
                "{} of {} renewal walks hit the horizon",
                info.renewal_truncated, info.renewal_replicas
            ));
        }
    }
    Ok(ExperimentReport {
        pipeline,
        config: cfg.clone(),
        row_count: rows.len(),
        rows,
        aggregates,
        checks,
        limit_sampler,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// aggregation (rows only)

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    n: Option<usize>,
    observable: String,
    /// `f64::to_bits` of `s_or_lambda`
    x: Option<u64>,
    branch: Branch,
}

#[derive(Default)]
struct Group {
    values: Vec<f64>,
    weights: Vec<f64>,
    clamped: usize,
    total: usize,
    replicas: Vec<usize>,
}

fn group_rows(rows: &[Row]) -> BTreeMap<Key, Group> {
    let mut map: BTreeMap<Key, Group> = BTreeMap::new();
    for r in rows {
        let key = Key { n: r.n, observable: r.observable.clone(), x: r.s_or_lambda.map(f64::to_bits), branch: r.branch };
        let g = map.entry(key).or_default();
        g.values.push(r.value);
        g.weights.push(r.weight);
        g.replicas.push(r.replica);
        g.total += 1;
        g.clamped += r.clamped as usize;
    }
    map
}

/// Group for the same observable over both replica branches.
fn pooled<'a>(groups: &'a BTreeMap<Key, Group>, n: usize, observable: &str, x: Option<f64>) -> Vec<(Branch, &'a Group)> {
    [Branch::MinLeft, Branch::MinRight]
        .iter()
        .filter_map(|&b| {
            let key = Key { n: Some(n), observable: observable.into(), x: x.map(f64::to_bits), branch: b };
            groups.get(&key).map(|g| (b, g))
        })
        .collect()
}

fn finite(values: &[f64]) -> Vec<f64> {
    values.iter().copied().filter(|v| !v.is_nan()).collect()
}

fn summaries(groups: &BTreeMap<Key, Group>) -> Vec<Summary> {
    let mut out = Vec::new();
    let mut all: BTreeMap<(Option<usize>, String, Option<u64>), Vec<f64>> = BTreeMap::new();
    for (k, g) in groups {
        let v = finite(&g.values);
        if matches!(k.branch, Branch::MinLeft | Branch::MinRight) {
            all.entry((k.n, k.observable.clone(), k.x)).or_default().extend(v.iter().copied());
        }
        if let (Some(med), Some(q)) = (median(&v), iqr(&v)) {
            out.push(Summary {
                n: k.n,
                observable: k.observable.clone(),
                s_or_lambda: k.x.map(f64::from_bits),
                branch: k.branch,
                count: v.len(),
                median: med,
                iqr: q,
            });
        }
    }
    for ((n, observable, x), v) in all {
        if let (Some(med), Some(q)) = (median(&v), iqr(&v)) {
            out.push(Summary { n, observable, s_or_lambda: x.map(f64::from_bits), branch: Branch::All, count: v.len(), median: med, iqr: q });
        }
    }
    out
}

/// Branch counts per `n`, taken from the first replica observable.
fn occupancy(cfg: &ExperimentConfig, rows: &[Row]) -> Result<Vec<Occupancy>> {
    let expected_rho = cfg.env.nominal_rho();
    let mut out = Vec::new();
    for &n in &cfg.n_sweep {
        let mut seen = std::collections::BTreeSet::new();
        let (mut left, mut right) = (0usize, 0usize);
        for r in rows.iter().filter(|r| r.n == Some(n)) {
            if seen.insert(r.replica) {
                match r.branch {
                    Branch::MinLeft => left += 1,
                    Branch::MinRight => right += 1,
                    _ => {}
                }
            }
        }
        let total = (left + right) as f64;
        if total == 0.0 {
            continue;
        }
        let fraction = right as f64 / total;
        let expected = match expected_rho {
            Some(rho) => Some(1.0 - arcsine_cdf(split_point(n, cfg.t) as f64 / n as f64, rho)?),
            None => None,
        };
        let p = expected.unwrap_or(fraction);
        let se = (p * (1.0 - p) / total).sqrt();
        out.push(Occupancy {
            n,
            min_left: left,
            min_right: right,
            fraction_right: fraction,
            expected_right: expected,
            se,
            z: expected.map(|e| (fraction - e) / se),
        });
    }
    Ok(out)
}

fn occupancy_warnings(cfg: &ExperimentConfig, occ: &[Occupancy], warnings: &mut Vec<String>) {
    for o in occ {
        for (name, count) in [("min-left", o.min_left), ("min-right", o.min_right)] {
            if count < cfg.min_branch_occupancy {
                warnings.push(format!("n = {}: branch {name} has {count} replicas, below {}", o.n, cfg.min_branch_occupancy));
            }
        }
    }
}

fn clamp_rates(cfg: &ExperimentConfig, groups: &BTreeMap<Key, Group>, warnings: &mut Vec<String>) -> Vec<ClampRate> {
    let mut per: BTreeMap<(String, usize), (usize, usize)> = BTreeMap::new();
    for (k, g) in groups {
        // one grid point per observable is enough: clamping does not depend on it
        if let (Some(n), true) = (k.n, matches!(k.branch, Branch::MinLeft | Branch::MinRight)) {
            let first_x = groups
                .keys()
                .find(|o| o.n == k.n && o.observable == k.observable)
                .map(|o| o.x)
                .unwrap_or(None);
            if k.x != first_x {
                continue;
            }
            let e = per.entry((k.observable.clone(), n)).or_default();
            e.0 += g.clamped;
            e.1 += g.total;
        }
    }
    let mut out: Vec<ClampRate> = per
        .into_iter()
        .filter(|(_, (c, _))| *c > 0)
        .map(|((observable, n), (clamped, total))| ClampRate {
            n,
            observable,
            clamped,
            total,
            fraction: clamped as f64 / total as f64,
        })
        .collect();
    out.sort_by(|a, b| a.observable.cmp(&b.observable).then(a.n.cmp(&b.n)));
    let last = *cfg.n_sweep.last().expect("validated");
    let first = cfg.n_sweep[0];
    let observables: std::collections::BTreeSet<String> = out.iter().map(|c| c.observable.clone()).collect();
    for obs in observables {
        let f = |n| out.iter().find(|c| c.observable == obs && c.n == n).map(|c| c.fraction).unwrap_or(0.0);
        if f(last) > f(first) {
            warnings.push(format!("clamp frequency of {obs} grows from {} to {}", f(first), f(last)));
        }
    }
    out
}

fn limit_draw_summaries(groups: &BTreeMap<Key, Group>) -> Vec<LimitDrawSummary> {
    groups
        .iter()
        .filter(|(k, _)| matches!(k.branch, Branch::LimitPast | Branch::LimitFuture | Branch::LimitZeta))
        .map(|(k, g)| {
            let total: f64 = g.weights.iter().sum();
            let mean = g.values.iter().zip(&g.weights).map(|(v, w)| v * w).sum::<f64>() / total;
            LimitDrawSummary {
                branch: k.branch,
                observable: k.observable.clone(),
                count: g.total,
                unsettled: g.clamped,
                ess: effective_sample_size(&g.weights),
                weighted_mean: mean,
                min: g.values.iter().copied().fold(f64::INFINITY, f64::min),
                max: g.values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// Settled limit draws of one kind as `(values, weights)`.
fn settled_draws(rows: &[Row], branch: Branch, observable: &str) -> (Vec<f64>, Vec<f64>) {
    let kept: Vec<&Row> = rows.iter().filter(|r| r.branch == branch && r.observable == observable && !r.clamped).collect();
    let total: f64 = kept.iter().map(|r| r.weight).sum();
    (kept.iter().map(|r| r.value).collect(), kept.iter().map(|r| r.weight / total).collect())
}

pub fn aggregate(pipeline: Pipeline, cfg: &ExperimentConfig, rows: &[Row]) -> Result<(Aggregates, Vec<String>)> {
    let groups = group_rows(rows);
    let mut warnings = Vec::new();
    let agg = match pipeline {
        Pipeline::Theorem1 => Aggregates::Theorem1(Box::new(aggregate_theorem1(cfg, rows, &groups, &mut warnings)?)),
        Pipeline::Theorem2 => Aggregates::Theorem2(Box::new(aggregate_theorem2(cfg, rows, &groups, &mut warnings)?)),
        Pipeline::Diagnostics => Aggregates::Diagnostics(Box::new(aggregate_diagnostics(cfg, rows, &groups, &mut warnings)?)),
        Pipeline::Fluctuation => Aggregates::Fluctuation(Box::new(aggregate_fluctuation(cfg, &groups)?)),
        Pipeline::Limits => Aggregates::Limits(Box::new(LimitsAggregates { draws: limit_draw_summaries(&groups) })),
    };
    Ok((agg, warnings))
}

fn aggregate_theorem1(
    cfg: &ExperimentConfig,
    rows: &[Row],
    groups: &BTreeMap<Key, Group>,
    warnings: &mut Vec<String>,
) -> Result<Theorem1Aggregates> {
    let occ = occupancy(cfg, rows)?;
    occupancy_warnings(cfg, &occ, warnings);
    let streams = cfg.streams();
    let mut ks = Vec::new();
    let mut limit_values_in_range = true;
    let mut degenerate_at_one = true;
    let mut draws_in_unit_interval = true;
    for r in rows.iter().filter(|r| matches!(r.branch, Branch::LimitPast | Branch::LimitFuture)) {
        if !(r.value > 0.0 && r.value < 1.0) {
            draws_in_unit_interval = false;
        }
    }
    let replica_values_in_range = rows
        .iter()
        .filter(|r| r.n.is_some())
        .all(|r| r.value > 0.0 && r.value <= 1.0);
    for r in rows.iter().filter(|r| r.n.is_some() && r.s_or_lambda == Some(1.0)) {
        degenerate_at_one &= r.value == 1.0;
    }
    let mut test_index = 0u64;
    for &n in &cfg.n_sweep {
        for (part, branch, limit_branch) in [(1u8, Branch::MinRight, Branch::LimitPast), (2, Branch::MinLeft, Branch::LimitFuture)] {
            for &r in &cfg.r_values {
                let (theta, tw) = settled_draws(rows, limit_branch, &tagged("theta", r));
                if theta.is_empty() {
                    warnings.push(format!("no settled limit draws for part {part}, R = {r}"));
                    continue;
                }
                for &s in &cfg.s_grid {
                    test_index += 1;
                    let key = Key { n: Some(n), observable: tagged("pgf", r), x: Some(s.to_bits()), branch };
                    let Some(g) = groups.get(&key) else { continue };
                    let mut limit = Vec::with_capacity(theta.len());
                    for &th in &theta {
                        let arg = if part == 1 { 1.0 - th } else { th };
                        let v = crate::conditioned::limit_pgf(arg, s)?;
                        limit_values_in_range &= v > 0.0 && v <= 1.0;
                        if s == 1.0 {
                            degenerate_at_one &= v == 1.0;
                        }
                        limit.push(v);
                    }
                    let wa = vec![1.0 / g.values.len() as f64; g.values.len()];
                    let mut rng = streams.stream(domain::PERMUTATION, test_index);
                    let res = weighted_ks_two_sample(&g.values, &wa, &limit, &tw, cfg.permutations, &mut rng)?;
                    let untransformed = if part == 1 {
                        let alt = theta.iter().map(|&th| crate::conditioned::limit_pgf(th, s)).collect::<Result<Vec<_>>>()?;
                        Some(crate::stats::weighted_ks_distance(&g.values, &wa, &alt, &tw)?)
                    } else {
                        None
                    };
                    ks.push(KsEntry {
                        n,
                        part,
                        r,
                        s,
                        branch_size: g.values.len(),
                        limit_size: limit.len(),
                        distance: res.distance,
                        p_value: res.p_value,
                        distance_untransformed: untransformed,
                    });
                }
            }
        }
    }
    let ks_median: Vec<(usize, f64)> = cfg
        .n_sweep
        .iter()
        .filter_map(|&n| {
            let d: Vec<f64> = ks.iter().filter(|e| e.n == n && e.s < 1.0).map(|e| e.distance).collect();
            median(&d).map(|m| (n, m))
        })
        .collect();
    let ks_trend = Trend::of(ks_median.iter().map(|x| x.1).collect());
    let median_ks_at_largest_n = ks_median.last().filter(|x| Some(&x.0) == cfg.n_sweep.last()).map(|x| x.1);
    let passed = median_ks_at_largest_n.is_some_and(|m| m < KS_CEILING)
        && ks_trend.as_ref().is_some_and(|t| t.nonincreasing())
        && replica_values_in_range
        && limit_values_in_range
        && degenerate_at_one
        && draws_in_unit_interval;
    Ok(Theorem1Aggregates {
        summaries: summaries(groups),
        occupancy: occ,
        ks,
        ks_median,
        ks_trend,
        clamp_rates: clamp_rates(cfg, groups, warnings),
        limit_draws: limit_draw_summaries(groups),
        replica_values_in_range,
        limit_values_in_range,
        degenerate_at_one,
        draws_in_unit_interval,
        median_ks_at_largest_n,
        passed,
    })
}

fn aggregate_theorem2(
    cfg: &ExperimentConfig,
    rows: &[Row],
    groups: &BTreeMap<Key, Group>,
    warnings: &mut Vec<String>,
) -> Result<Theorem2Aggregates> {
    let occ = occupancy(cfg, rows)?;
    occupancy_warnings(cfg, &occ, warnings);
    let control_exact = rows.iter().filter(|r| r.observable == "laplace" && r.s_or_lambda == Some(0.0)).all(|r| r.value == 1.0);
    let mut checks = Vec::new();
    for &lambda in &cfg.lambda_grid {
        let target = 1.0 / (1.0 + lambda).powi(2);
        let mut medians = Vec::new();
        let mut iqrs = Vec::new();
        for &n in &cfg.n_sweep {
            let v: Vec<f64> = pooled(groups, n, "laplace", Some(lambda)).iter().flat_map(|(_, g)| g.values.iter().copied()).collect();
            medians.push(median(&v).ok_or_else(|| Error::Degenerate(format!("no laplace rows at n = {n}")))?);
            iqrs.push(iqr(&v).expect("nonempty"));
        }
        let median_at_largest_n = *medians.last().expect("nonempty sweep");
        checks.push(LaplaceCheck {
            lambda,
            target,
            median_at_largest_n,
            median_ok: (median_at_largest_n - target).abs() <= MEDIAN_TOLERANCE,
            iqr_smallest_n: iqrs[0],
            iqr_largest_n: *iqrs.last().expect("nonempty"),
            iqr_decreases: iqrs.last() < iqrs.first(),
            iqr_monotone: iqrs.windows(2).all(|w| w[1] < w[0]),
        });
    }
    let passed = control_exact && checks.iter().all(|c| c.median_ok && c.iqr_decreases);
    let suggested_sweep = if passed {
        None
    } else {
        let last = *cfg.n_sweep.last().expect("validated");
        warnings.push("Laplace medians or IQRs miss their targets; extend the sweep".into());
        Some(cfg.n_sweep.iter().copied().chain([2 * last, 4 * last, 8 * last]).collect())
    };
    Ok(Theorem2Aggregates { summaries: summaries(groups), occupancy: occ, checks, control_exact, passed, suggested_sweep })
}

/// Events whose probability should vanish along the sweep.
enum Event {
    /// `|x - 1| > eps`
    FarFromOne,
    /// `x > 1 + eps`
    AboveOnePlus,
    /// `x > eps`
    Above,
}

fn aggregate_diagnostics(
    cfg: &ExperimentConfig,
    rows: &[Row],
    groups: &BTreeMap<Key, Group>,
    warnings: &mut Vec<String>,
) -> Result<DiagnosticsAggregates> {
    let occ = occupancy(cfg, rows)?;
    occupancy_warnings(cfg, &occ, warnings);
    let mut specs: Vec<(String, Branch, Event)> = vec![
        ("delta".into(), Branch::All, Event::FarFromOne),
        ("o_ratio".into(), Branch::All, Event::FarFromOne),
        ("beta".into(), Branch::MinLeft, Event::Above),
        ("alpha".into(), Branch::MinLeft, Event::AboveOnePlus),
    ];
    for &r in &cfg.r_values {
        specs.push((tagged("alpha_min", r), Branch::All, Event::AboveOnePlus));
        specs.push((tagged("beta_min", r), Branch::All, Event::Above));
    }
    let values_for = |n: usize, obs: &str, cond: Branch| -> Vec<f64> {
        let gs = pooled(groups, n, obs, None);
        gs.iter()
            .filter(|(b, _)| cond == Branch::All || *b == cond)
            .flat_map(|(_, g)| g.values.iter().copied())
            .filter(|v| !v.is_nan())
            .collect()
    };
    let mut deviations = Vec::new();
    for (obs, cond, event) in &specs {
        for &eps in &cfg.epsilons {
            let mut probabilities = Vec::new();
            let mut counts = Vec::new();
            for &n in &cfg.n_sweep {
                let v = values_for(n, obs, *cond);
                let hits = v
                    .iter()
                    .filter(|&&x| match event {
                        Event::FarFromOne => (x - 1.0).abs() > eps,
                        Event::AboveOnePlus => x > 1.0 + eps,
                        Event::Above => x > eps,
                    })
                    .count();
                counts.push(v.len());
                probabilities.push(if v.is_empty() { f64::NAN } else { hits as f64 / v.len() as f64 });
            }
            let trend = Trend::of(probabilities.clone());
            let decreasing = trend.as_ref().is_some_and(|t| t.decreasing());
            deviations.push(Deviation { observable: obs.clone(), condition: *cond, epsilon: eps, probabilities, counts, trend, decreasing });
        }
    }
    let median_log_o: Vec<f64> = cfg
        .n_sweep
        .iter()
        .map(|&n| median(&values_for(n, "log_o", Branch::All)).unwrap_or(f64::NAN))
        .collect();
    let median_log_o_trend = Trend::of(median_log_o.clone());
    let mut slopes = Vec::new();
    for &n in &cfg.n_sweep {
        for branch in [Branch::All, Branch::MinLeft, Branch::MinRight] {
            let pick = |obs: &str| -> Vec<(usize, f64)> {
                pooled(groups, n, obs, None)
                    .iter()
                    .filter(|(b, _)| branch == Branch::All || *b == branch)
                    .flat_map(|(_, g)| g.replicas.iter().copied().zip(g.values.iter().copied()))
                    .collect()
            };
            let mut x = pick("walk_gap");
            let mut y = pick("log_o");
            x.sort_by_key(|p| p.0);
            y.sort_by_key(|p| p.0);
            let xs: Vec<f64> = x.iter().map(|p| p.1).collect();
            let ys: Vec<f64> = y.iter().map(|p| p.1).collect();
            let fit = ols_slope(&xs, &ys);
            slopes.push(SlopeFit { n, branch, count: xs.len(), slope: fit.map(|f| f.0), intercept: fit.map(|f| f.1) });
        }
    }
    let count_where = |obs: &str, bad: &dyn Fn(f64) -> bool| rows.iter().filter(|r| r.observable == obs && bad(r.value)).count();
    let alpha_below_one = count_where("alpha", &|v| v < 1.0 - EXACT_SLACK);
    let beta_above_one = count_where("beta", &|v| v > 1.0 + EXACT_SLACK);
    let key = |obs: &str, cond: Branch| {
        deviations.iter().any(|d| d.observable == obs && d.condition == cond && d.epsilon == 0.1 && d.decreasing)
    };
    let key_trends_decreasing = key("delta", Branch::All) && key("beta", Branch::MinLeft) && key("alpha", Branch::MinLeft);
    let log_o_increasing = median_log_o_trend.as_ref().is_some_and(|t| t.increasing());
    let last = *cfg.n_sweep.last().expect("validated");
    let slope_at_largest_n = slopes.iter().find(|s| s.n == last && s.branch == Branch::All).and_then(|s| s.slope);
    let slope_ok = slope_at_largest_n.is_some_and(|s| (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&s));
    let passed = key_trends_decreasing && log_o_increasing && slope_ok && alpha_below_one == 0 && beta_above_one == 0;
    Ok(DiagnosticsAggregates {
        summaries: summaries(groups),
        occupancy: occ,
        deviations,
        median_log_o,
        median_log_o_trend,
        slopes,
        clamp_rates: clamp_rates(cfg, groups, warnings),
        alpha_below_one,
        beta_above_one,
        key_trends_decreasing,
        log_o_increasing,
        slope_at_largest_n,
        passed,
    })
}

fn aggregate_fluctuation(cfg: &ExperimentConfig, groups: &BTreeMap<Key, Group>) -> Result<FluctuationAggregates> {
    let streams = cfg.streams();
    let rho = estimate_rho(&cfg.env, 1000, cfg.replicas, &streams)?;
    let nominal_rho = cfg.env.nominal_rho();
    let rho_used = nominal_rho.unwrap_or(rho.rho).clamp(1e-6, 1.0 - 1e-6);
    let mut arcsine_ks = Vec::new();
    for &n in &cfg.n_sweep {
        let v: Vec<f64> = pooled(groups, n, "tau_over_n", None).iter().flat_map(|(_, g)| g.values.iter().copied()).collect();
        arcsine_ks.push((n, ks_against_cdf(&v, |t| arcsine_cdf(t, rho_used).unwrap_or(f64::NAN))));
    }
    let renewal = if cfg.env.is_continuous() || matches!(cfg.env, EnvSpec::SymmetricBernoulli(_)) {
        renewal_table_for(&cfg.env, &cfg.limit, &streams)?
    } else {
        return Err(Error::Config(format!("no renewal table for {}", cfg.env.name())));
    };
    Ok(FluctuationAggregates { summaries: summaries(groups), rho, nominal_rho, arcsine_ks, renewal })
}
