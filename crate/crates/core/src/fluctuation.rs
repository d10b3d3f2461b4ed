//! Fluctuation theory of the associated walk: leftmost minima, ladder
//! epochs, the renewal functions `V` and `U`, and the generalized arcsine law
//! for the position of the minimum.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::env_model::EnvSpec;
use crate::error::{Error, Result};
use crate::rng::{domain, StreamFactory};

/// Smallest `i` in `[m, n]` with `S_i = min_{m<=j<=n} S_j`.
pub fn leftmost_min_index(s: &[f64], m: usize, n: usize) -> Result<usize> {
    if m > n || n >= s.len() {
        return Err(Error::Range(format!("window [{m}, {n}] outside walk of length {}", s.len())));
    }
    let mut best = m;
    for i in m + 1..=n {
        if s[i] < s[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderStats {
    /// Strict descending ladder epochs and heights, starting with `(0, S_0)`.
    pub descending: Vec<(usize, f64)>,
    /// Strict ascending ladder epochs and heights, starting with `(0, S_0)`.
    pub ascending: Vec<(usize, f64)>,
    pub horizon: usize,
}

impl LadderStats {
    pub fn descending_epochs(&self) -> Vec<usize> {
        self.descending.iter().map(|e| e.0).collect()
    }

    pub fn ascending_epochs(&self) -> Vec<usize> {
        self.ascending.iter().map(|e| e.0).collect()
    }
}

/// Ladder epochs of the walk `S_0, ..., S_H`.
pub fn ladder_epochs(s: &[f64]) -> LadderStats {
    let mut descending = Vec::new();
    let mut ascending = Vec::new();
    if let Some(&s0) = s.first() {
        descending.push((0, s0));
        ascending.push((0, s0));
        let (mut lo, mut hi) = (s0, s0);
        for (i, &v) in s.iter().enumerate().skip(1) {
            if v < lo {
                lo = v;
                descending.push((i, v));
            }
            if v > hi {
                hi = v;
                ascending.push((i, v));
            }
        }
    }
    LadderStats { descending, ascending, horizon: s.len().saturating_sub(1) }
}

/// Monte Carlo estimates of
///
/// ```text
/// V(x) = sum_{j>=0} P(S_{gamma_j} >= -x),   U(x) = sum_{j>=0} P(S_{Gamma_j} < x),
/// ```
///
/// with the convention `V(0) = U(0) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenewalTable {
    pub grid: Vec<f64>,
    pub v: Vec<f64>,
    pub v_se: Vec<f64>,
    pub u: Vec<f64>,
    pub u_se: Vec<f64>,
    pub replicas: usize,
    pub horizon: usize,
    /// Mean number of returns `S_j = 0` before the walk leaves `(-x_max, x_max)`.
    pub d_hat: f64,
    /// Replicas whose walk had not left `(-x_max, x_max)` by the horizon.
    pub truncated: usize,
    /// Mean increase of the counts at the largest grid point when the
    /// horizon is doubled, measured on every tenth replica.
    pub v_truncation_bias: f64,
    pub u_truncation_bias: f64,
}

impl RenewalTable {
    fn interp(&self, values: &[f64], x: f64) -> f64 {
        if x <= 0.0 {
            return if x < 0.0 { 0.0 } else { values[0] };
        }
        let g = &self.grid;
        let last = g.len() - 1;
        if last == 0 {
            return values[0];
        }
        if x >= g[last] {
            // linear continuation with the slope of the upper half of the grid
            let mid = g.partition_point(|&y| y < g[last] / 2.0).min(last - 1);
            let slope = (values[last] - values[mid]) / (g[last] - g[mid]);
            return values[last] + slope.max(0.0) * (x - g[last]);
        }
        let k = g.partition_point(|&y| y <= x);
        let (x0, x1) = (g[k - 1], g[k]);
        let w = (x - x0) / (x1 - x0);
        values[k - 1] * (1.0 - w) + values[k] * w
    }

    /// `V(x)`, linearly interpolated and extended beyond the grid.
    pub fn v_at(&self, x: f64) -> f64 {
        self.interp(&self.v, x)
    }

    /// `U(x)`, linearly interpolated and extended beyond the grid.
    pub fn u_at(&self, x: f64) -> f64 {
        self.interp(&self.u, x)
    }

    pub fn is_monotone(&self) -> bool {
        self.v.windows(2).all(|w| w[0] <= w[1]) && self.u.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,V,V_se,U,U_se")?;
        for i in 0..self.grid.len() {
            writeln!(out, "{},{},{},{},{}", self.grid[i], self.v[i], self.v_se[i], self.u[i], self.u_se[i])?;
        }
        Ok(())
    }
}

/// Evenly spaced grid `0, x_max/(points-1), ..., x_max`.
pub fn uniform_grid(x_max: f64, points: usize) -> Vec<f64> {
    let points = points.max(2);
    (0..points).map(|i| x_max * i as f64 / (points - 1) as f64).collect()
}

/// Default horizon: `10^4 (x_max / scale)^2`, capped.
///
/// The passage time below `-x` has a tail `P(T > n) ~ c x / sqrt(n)`, so a
/// horizon of order `x^2` truncates a fixed fraction of the walks whatever
/// `x` is. Walks stop as soon as both ladders pass `x_max`, which keeps the
/// expected cost near `x sqrt(horizon)` per walk.
pub fn default_horizon(x_max: f64, step_scale: f64) -> usize {
    let h = 1e4 * (x_max / step_scale).powi(2);
    h.clamp(1e4, 1e7) as usize
}

struct LadderCounts {
    v: Vec<u32>,
    u: Vec<u32>,
    zeros: u32,
    exited: bool,
}

/// Walks until both ladders have passed `x_max` or `horizon` steps.
fn count_ladders(spec: &EnvSpec, grid: &[f64], horizon: usize, rng: &mut crate::rng::Stream) -> Result<LadderCounts> {
    let x_max = *grid.last().unwrap();
    let lattice = match spec {
        EnvSpec::SymmetricBernoulli(p) => Some(p.h),
        EnvSpec::CriticalGeometric(_) => Some(1.0),
        _ => None,
    };
    let mut v = vec![1u32; grid.len()];
    let mut u = vec![1u32; grid.len()];
    let (mut s, mut lo, mut hi) = (0.0f64, 0.0f64, 0.0f64);
    let mut zeros = 0u32;
    let mut exited = false;
    for _ in 0..horizon {
        s += spec.sample_step(rng)?;
        if let Some(h) = lattice {
            if s.abs() < h / 2.0 {
                zeros += 1;
            }
        }
        if s < lo {
            lo = s;
            if -s <= x_max {
                // new descending height counts for every x with S >= -x
                let first = grid.partition_point(|&x| x < -s);
                for c in &mut v[first..] {
                    *c += 1;
                }
            }
        }
        if s > hi {
            hi = s;
            if s < x_max {
                let first = grid.partition_point(|&x| x <= s);
                for c in &mut u[first..] {
                    *c += 1;
                }
            }
        }
        if lo < -x_max && hi >= x_max {
            exited = true;
            break;
        }
    }
    Ok(LadderCounts { v, u, zeros, exited })
}

fn mean_and_se(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = values.clone().sum::<f64>() / nf;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    (mean, (var / nf).sqrt())
}

/// Counting estimator of `V`, `U` and `D` on `grid`.
pub fn estimate_renewals(
    spec: &EnvSpec,
    grid: &[f64],
    replicas: usize,
    horizon: usize,
    streams: &StreamFactory,
) -> Result<RenewalTable> {
    spec.validate()?;
    if grid.is_empty() || grid[0] < 0.0 || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("renewal grid must be nonempty, increasing and nonnegative".into()));
    }
    if replicas == 0 || horizon == 0 {
        return Err(Error::Domain("replicas and horizon must be positive".into()));
    }
    let runs = (0..replicas)
        .into_par_iter()
        .map(|rep| {
            let mut rng = streams.stream(domain::RENEWAL, rep as u64);
            let base = count_ladders(spec, grid, horizon, &mut rng)?;
            let doubled = if rep % 10 == 0 {
                let mut rng = streams.stream(domain::RENEWAL, rep as u64);
                Some(count_ladders(spec, grid, 2 * horizon, &mut rng)?)
            } else {
                None
            };
            Ok((base, doubled))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = grid.len();
    let mut v = Vec::with_capacity(k);
    let mut v_se = Vec::with_capacity(k);
    let mut u = Vec::with_capacity(k);
    let mut u_se = Vec::with_capacity(k);
    for i in 0..k {
        let (m, se) = mean_and_se(runs.iter().map(|r| r.0.v[i] as f64), replicas);
        v.push(m);
        v_se.push(se);
        let (m, se) = mean_and_se(runs.iter().map(|r| r.0.u[i] as f64), replicas);
        u.push(m);
        u_se.push(se);
    }
    // boundary convention
    if grid[0] == 0.0 {
        v[0] = 1.0;
        u[0] = 1.0;
        v_se[0] = 0.0;
        u_se[0] = 0.0;
    }
    let d_hat = if spec.is_continuous() {
        0.0
    } else {
        runs.iter().map(|r| r.0.zeros as f64).sum::<f64>() / replicas as f64
    };
    let truncated = runs.iter().filter(|r| !r.0.exited).count();
    let pairs: Vec<_> = runs.iter().filter_map(|r| r.1.as_ref().map(|d| (&r.0, d))).collect();
    let bias = |pick: fn(&LadderCounts) -> u32| -> f64 {
        if pairs.is_empty() {
            return 0.0;
        }
        pairs.iter().map(|(b, d)| pick(d) as f64 - pick(b) as f64).sum::<f64>() / pairs.len() as f64
    };
    let v_truncation_bias = bias(|c| *c.v.last().unwrap());
    let u_truncation_bias = bias(|c| *c.u.last().unwrap());
    Ok(RenewalTable {
        grid: grid.to_vec(),
        v,
        v_se,
        u,
        u_se,
        replicas,
        horizon,
        d_hat,
        truncated,
        v_truncation_bias,
        u_truncation_bias,
    })
}

/// `I_t(1 - rho, rho)`, the limiting CDF of `tau(n)/n` when
/// `P(S_n > 0) -> rho`.
pub fn arcsine_cdf(t: f64, rho: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Domain(format!("rho = {rho} outside (0, 1)")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    if t == 1.0 {
        return Ok(1.0);
    }
    statrs::function::beta::checked_beta_reg(1.0 - rho, rho, t).map_err(|e| Error::Breakdown(e.to_string()))
}

/// One-sample KS distance between the empirical law of `samples` (values in
/// `[0, 1]`) and a continuous CDF.
pub fn ks_against_cdf<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < xs.len() {
        let mut j = i;
        while j < xs.len() && xs[j] == xs[i] {
            j += 1;
        }
        let f = cdf(xs[i]);
        d = d.max((i as f64 / n - f).abs()).max((j as f64 / n - f).abs());
        i = j;
    }
    d
}

/// `tau(n)/n` for independent walks of length `n`.
pub fn sample_min_positions(spec: &EnvSpec, n: usize, replicas: usize, streams: &StreamFactory) -> Result<Vec<f64>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Domain("walk length must be positive".into()));
    }
    (0..replicas)
        .into_par_iter()
        .map(|rep| {
            let mut rng = streams.stream(domain::ENVIRONMENT, rep as u64);
            let (mut s, mut lo, mut arg) = (0.0f64, 0.0f64, 0usize);
            for k in 1..=n {
                s += spec.sample_step(&mut rng)?;
                if s < lo {
                    lo = s;
                    arg = k;
                }
            }
            Ok(arg as f64 / n as f64)
        })
        .collect()
}

/// Which Beta orientation fits the law of `tau(n)/n` for a preset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrientationCheck {
    pub rho: f64,
    pub n: usize,
    pub replicas: usize,
    /// KS distance to `I_t(1 - rho, rho)`.
    pub ks_min_orientation: f64,
    /// KS distance to `I_t(rho, 1 - rho)`.
    pub ks_swapped: f64,
    pub chosen: &'static str,
}

pub fn check_orientation(spec: &EnvSpec, rho: f64, n: usize, replicas: usize, streams: &StreamFactory) -> Result<OrientationCheck> {
    let xs = sample_min_positions(spec, n, replicas, streams)?;
    arcsine_cdf(0.5, rho)?;
    let ks_min_orientation = ks_against_cdf(&xs, |t| arcsine_cdf(t, rho).unwrap_or(f64::NAN));
    let ks_swapped = ks_against_cdf(&xs, |t| arcsine_cdf(t, 1.0 - rho).unwrap_or(f64::NAN));
    let chosen = if ks_min_orientation <= ks_swapped { "I_t(1-rho, rho)" } else { "I_t(rho, 1-rho)" };
    Ok(OrientationCheck { rho, n, replicas, ks_min_orientation, ks_swapped, chosen })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_model::{BernoulliParams, StableParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn leftmost_min_examples() {
        assert_eq!(leftmost_min_index(&[0.0, -1.0, 1.0, -1.0], 0, 3).unwrap(), 1);
        assert_eq!(leftmost_min_index(&[0.0, 1.0, 2.0], 0, 2).unwrap(), 0);
        assert_eq!(leftmost_min_index(&[0.0, 1.0, 2.0], 1, 2).unwrap(), 1);
        assert!(leftmost_min_index(&[0.0, 1.0], 0, 2).is_err());
        assert!(leftmost_min_index(&[0.0, 1.0], 1, 0).is_err());
    }

    #[test]
    fn leftmost_min_matches_scan_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let len = rng.random_range(1..=21);
            // integer values force ties
            let s: Vec<f64> = (0..len).map(|_| rng.random_range(-3..=3) as f64).collect();
            let m = rng.random_range(0..len);
            let n = rng.random_range(m..len);
            let lo = s[m..=n].iter().cloned().fold(f64::INFINITY, f64::min);
            let oracle = (m..=n).find(|&i| s[i] == lo).unwrap();
            assert_eq!(leftmost_min_index(&s, m, n).unwrap(), oracle);
            let shifted: Vec<f64> = s.iter().map(|v| v + 17.0).collect();
            assert_eq!(leftmost_min_index(&shifted, m, n).unwrap(), oracle);
        }
    }

    #[test]
    fn ladder_examples() {
        assert_eq!(ladder_epochs(&[0.0, -1.0, -2.0, -1.0]).descending_epochs(), vec![0, 1, 2]);
        assert_eq!(ladder_epochs(&[0.0, 1.0, 0.0, 2.0]).ascending_epochs(), vec![0, 1, 3]);
    }

    #[test]
    fn simple_walk_ladder_heights_are_consecutive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = vec![0.0];
        for _ in 0..5000 {
            let step = if rng.random::<bool>() { 1.0 } else { -1.0 };
            s.push(s.last().unwrap() + step);
        }
        let stats = ladder_epochs(&s);
        for (j, &(_, h)) in stats.descending.iter().enumerate() {
            assert_eq!(h, -(j as f64));
        }
        for (j, &(_, h)) in stats.ascending.iter().enumerate() {
            assert_eq!(h, j as f64);
        }
        for w in stats.descending.windows(2) {
            assert!(w[0].0 < w[1].0);
        }
    }

    #[test]
    fn simple_walk_renewals() {
        let spec = EnvSpec::SymmetricBernoulli(BernoulliParams { h: 1.0 });
        let grid = uniform_grid(4.0, 9);
        let t = estimate_renewals(&spec, &grid, 100, 100_000_000, &StreamFactory::new(5)).unwrap();
        assert_eq!(t.truncated, 0);
        // x = 2.5: heights -1, -2 (and +1, +2) always reached for a recurrent walk
        assert!((t.v_at(2.5) - 3.0).abs() < 1e-12, "{}", t.v_at(2.5));
        assert!((t.u_at(2.5) - 3.0).abs() < 1e-12);
        assert!(t.d_hat > 0.0);
        assert!(t.is_monotone());
    }

    #[test]
    fn continuous_renewals() {
        let spec = EnvSpec::gaussian(1.0);
        let grid = uniform_grid(6.0, 25);
        let t = estimate_renewals(&spec, &grid, 2000, default_horizon(6.0, 1.0), &StreamFactory::new(9)).unwrap();
        assert_eq!(t.d_hat, 0.0);
        assert_eq!(t.v[0], 1.0);
        assert_eq!(t.u[0], 1.0);
        assert!(t.is_monotone());
        // renewal theorem: V(x) ~ x / E|H|, E|H| = 1/sqrt(2) for the standard normal walk
        let slope = (t.v_at(6.0) - t.v_at(3.0)) / 3.0;
        assert!((slope - 2f64.sqrt()).abs() < 0.1, "slope {slope}");
        assert!(t.v_at(12.0) > t.v_at(6.0));
        assert!(t.truncated * 20 < t.replicas, "{} truncated", t.truncated);
        let again = estimate_renewals(&spec, &grid, 2000, default_horizon(6.0, 1.0), &StreamFactory::new(9)).unwrap();
        assert_eq!(t, again);
        let mut csv = Vec::new();
        t.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("x,V,V_se,U,U_se\n0,1,0,1,0\n"));
    }

    #[test]
    fn arcsine_values() {
        assert!((arcsine_cdf(0.5, 0.5).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(arcsine_cdf(0.0, 0.3).unwrap(), 0.0);
        assert_eq!(arcsine_cdf(1.0, 0.3).unwrap(), 1.0);
        for i in 1..100 {
            let t = i as f64 / 100.0;
            let closed = 2.0 / std::f64::consts::PI * t.sqrt().asin();
            assert!((arcsine_cdf(t, 0.5).unwrap() - closed).abs() < 1e-10);
        }
        assert!((arcsine_cdf(0.2, 0.5).unwrap() - 0.295167).abs() < 1e-6);
        assert!(arcsine_cdf(1.5, 0.5).is_err());
        assert!(arcsine_cdf(0.5, 1.0).is_err());
    }

    #[test]
    fn orientation_fixed_by_skewed_walk() {
        let spec = EnvSpec::SkewedStable(StableParams { alpha: 1.5, beta: 1.0, scale: 1.0, r_max: 0.0 });
        let rho = spec.nominal_rho().unwrap();
        let check = check_orientation(&spec, rho, 1000, 20_000, &StreamFactory::new(21)).unwrap();
        assert_eq!(check.chosen, "I_t(1-rho, rho)", "{check:?}");
        assert!(check.ks_min_orientation < 0.1, "{check:?}");
        assert!(check.ks_swapped > 0.3, "{check:?}");
    }

    #[test]
    fn ks_against_cdf_examples() {
        assert!((ks_against_cdf(&[0.5], |t| t) - 0.5).abs() < 1e-15);
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_against_cdf(&xs, |t| t) <= 0.0005 + 1e-12);
    }
}
