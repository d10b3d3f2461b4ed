//! Exact arithmetic on compositions of linear-fractional generating functions.
//!
//! Every composition `f_{m,n} = f_m o ... o f_{n-1}` of linear-fractional
//! laws satisfies
//!
//! ```text
//! 1 / (1 - f_{m,n}(s)) = A / (1 - s) + B,
//!     A = e^{-(S_n - S_m)},  B = e^{S_m} (b_n - b_m),
//! ```
//!
//! so the pair `(A, B)` is all that is needed. Maps are stored as
//! `(ln A, ln B)`; survival values `1 - f` are returned directly because they
//! underflow long before `f` loses precision.

use rand::Rng;
use serde::Serialize;

use crate::env_model::{EnvironmentPath, OffspringLaw};
use crate::error::{Error, Result};
use crate::numeric::{log1m_exp, log_add_exp, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LfMap {
    log_a: f64,
    log_b: f64,
}

impl LfMap {
    pub const IDENTITY: LfMap = LfMap { log_a: 0.0, log_b: f64::NEG_INFINITY };

    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) || !(b >= 0.0 && b.is_finite()) {
            return Err(Error::Domain(format!("map needs A > 0 and B >= 0, got ({a}, {b})")));
        }
        Ok(Self { log_a: a.ln(), log_b: b.ln() })
    }

    pub fn from_logs(log_a: f64, log_b: f64) -> Self {
        debug_assert!(log_a.is_finite() && !log_b.is_nan() && log_b < f64::INFINITY);
        Self { log_a, log_b }
    }

    /// Single-generation map: `A = e^{-X}`, `B = eta / 2`.
    pub fn of_law(law: &OffspringLaw) -> Self {
        Self { log_a: -law.log_mean(), log_b: law.log_half_eta() }
    }

    pub fn a(&self) -> f64 {
        self.log_a.exp()
    }

    pub fn b(&self) -> f64 {
        self.log_b.exp()
    }

    pub fn log_a(&self) -> f64 {
        self.log_a
    }

    pub fn log_b(&self) -> f64 {
        self.log_b
    }

    /// The map of `self o inner`: `(A1 A2, A1 B2 + B1)`.
    pub fn compose(&self, inner: &LfMap) -> LfMap {
        LfMap {
            log_a: self.log_a + inner.log_a,
            log_b: log_add_exp(self.log_a + inner.log_b, self.log_b),
        }
    }

    /// `ln(1 - f(s))` given `ln(1 - s)`.
    pub fn log_survival_from(&self, log_one_minus_s: f64) -> f64 {
        if log_one_minus_s == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        log_one_minus_s - log_add_exp(self.log_a, self.log_b + log_one_minus_s)
    }

    /// `1 - f(s) = (1 - s) / (A + B (1 - s))`.
    pub fn survival(&self, s: f64) -> f64 {
        self.log_survival_from((1.0 - s).ln()).exp()
    }

    /// `ln(1 - f(0)) = -ln(A + B)`.
    pub fn log_survival_at_zero(&self) -> f64 {
        -log_add_exp(self.log_a, self.log_b)
    }

    pub fn survival_at_zero(&self) -> f64 {
        self.log_survival_at_zero().exp()
    }

    /// `f(s)`. Prefer [`LfMap::survival`] when `f` is close to 1.
    pub fn eval(&self, s: f64) -> f64 {
        1.0 - self.survival(s)
    }
}

/// `1 - f(s)` for the map.
pub fn eval_survival(map: &LfMap, s: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!("s = {s} outside [0, 1]")));
    }
    Ok(map.survival(s))
}

/// `(A, B)` of `f_{m,n}`. Segments with `m >= n` are the identity.
///
/// `A` comes from the prefix walk in O(1). `B` comes from the prefix b-sums
/// in O(1) when `b_m <= b_n / 2`; otherwise the difference would cancel and
/// the segment is summed directly.
pub fn segment_map(env: &EnvironmentPath, m: usize, n: usize) -> Result<LfMap> {
    if n > env.len() {
        return Err(Error::Range(format!("segment end {n} beyond environment length {}", env.len())));
    }
    if m >= n {
        return Ok(LfMap::IDENTITY);
    }
    let s_m = env.s(m);
    let log_a = -(env.s(n) - s_m);
    let lb_m = env.log_b(m);
    let lb_n = env.log_b(n);
    let gap = lb_m - lb_n;
    let log_b = if lb_m == f64::NEG_INFINITY {
        lb_n + s_m
    } else if gap <= -std::f64::consts::LN_2 {
        lb_n + log1m_exp(gap) + s_m
    } else {
        segment_log_b_direct(env, m, n)
    };
    Ok(LfMap { log_a, log_b })
}

fn segment_log_b_direct(env: &EnvironmentPath, m: usize, n: usize) -> f64 {
    let walk = env.walk();
    let s_m = walk[m];
    let laws = env.laws();
    let mut hi = f64::NEG_INFINITY;
    for j in m..n {
        hi = hi.max(laws[j].log_half_eta() - (walk[j] - s_m));
    }
    let mut acc = 0.0;
    for j in m..n {
        acc += (laws[j].log_half_eta() - (walk[j] - s_m) - hi).exp();
    }
    hi + acc.ln()
}

/// `ln(1 - f_{m,n}(0))`.
pub fn log_survival(env: &EnvironmentPath, m: usize, n: usize) -> Result<f64> {
    Ok(segment_map(env, m, n)?.log_survival_at_zero())
}

/// `ln P(T = n)` for the environment.
pub fn log_extinction_time_pmf(env: &EnvironmentPath, n: usize) -> Result<f64> {
    if n == 0 || n > env.len() {
        return Err(Error::Range(format!("extinction time {n} outside [1, {}]", env.len())));
    }
    // f_{0,n}(0) - f_{0,n-1}(0) = g(x) - g(0) with g = f_{0,n-1}, x = f_{n-1}(0):
    // A x / ((A + B (1 - x)) (A + B)).
    let g = segment_map(env, 0, n - 1)?;
    let last = env.law(n - 1);
    let x = last.extinction_prob();
    let u = last.survival_prob();
    let value = g.log_a + x.ln() - log_add_exp(g.log_a, g.log_b + u.ln()) - log_add_exp(g.log_a, g.log_b);
    if !value.is_finite() {
        return Err(Error::Breakdown(format!("P(T = {n}) is not representable")));
    }
    Ok(value)
}

/// `P(T = n) = f_{0,n}(0) - f_{0,n-1}(0)`.
pub fn extinction_time_pmf(env: &EnvironmentPath, n: usize) -> Result<f64> {
    let p = log_extinction_time_pmf(env, n)?.exp();
    if p <= 0.0 {
        return Err(Error::Breakdown(format!("P(T = {n}) underflowed to zero")));
    }
    Ok(p)
}

/// Survival ratios and scaling quantities for one pair `m < n`.
///
/// All survival values `u(i, j) = 1 - f_{i,j}(0)` are kept as logarithms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentQuantities {
    pub m: usize,
    pub n: usize,
    /// `ln(1 - f_{m,n}(0))`
    pub log_u_fwd: f64,
    /// `ln(1 - f_{m,n-1}(0))`
    pub log_u_fwd_prev: f64,
    /// `ln(1 - f_{0,n}(0))`
    pub log_u_full: f64,
    /// `ln(1 - f_{0,n-1}(0))`
    pub log_u_full_prev: f64,
    /// `ln(1 - f_{0,m}(0))`
    pub log_u_prefix: f64,
    pub s_m: f64,
    pub log_b_m: f64,
    /// `ln O_{m,n}`
    pub log_o: f64,
    /// `ln O_{m,n-1}`
    pub log_o_prev: f64,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
}

impl SegmentQuantities {
    pub fn u_fwd(&self) -> f64 {
        self.log_u_fwd.exp()
    }

    pub fn u_full(&self) -> f64 {
        self.log_u_full.exp()
    }

    pub fn u_prefix(&self) -> f64 {
        self.log_u_prefix.exp()
    }

    /// `f_{m,n}(0)`.
    pub fn f_fwd(&self) -> f64 {
        -self.log_u_fwd.exp_m1()
    }

    /// `f_{m,n-1}(0)`.
    pub fn f_fwd_prev(&self) -> f64 {
        -self.log_u_fwd_prev.exp_m1()
    }

    pub fn o(&self) -> f64 {
        self.log_o.exp()
    }

    pub fn o_prev(&self) -> f64 {
        self.log_o_prev.exp()
    }

    /// `O_{m,n} = f_{m,n}(0)/(alpha (1 - f_{m,n}(0))) - f_{m,n}(0) beta`.
    pub fn o_via_alpha_beta(&self) -> f64 {
        let s1 = self.f_fwd();
        s1 / (self.alpha * self.u_fwd()) - s1 * self.beta
    }

    /// `O_{m,n} = f_{m,n}(0) beta (e^{S_m} / (1 - f_{0,m}(0)) - 1)`.
    pub fn o_via_prefix(&self) -> f64 {
        let s1 = self.f_fwd();
        s1 * self.beta * ((self.s_m - self.log_u_prefix).exp() - 1.0)
    }

    /// `Delta_{m,n}` rebuilt from `O_{m,n}`, `O_{m,n-1}` and the forward
    /// extinction probabilities. Needs `m < n - 1`.
    pub fn delta_via_o(&self) -> Option<f64> {
        if self.m + 1 >= self.n {
            return None;
        }
        let ratio = (self.log_o - self.log_o_prev).exp() * self.f_fwd_prev() / self.f_fwd();
        Some(ratio * ratio)
    }
}

/// `ln O_{m,n}` from survival logs; `-inf` when `f_{m,n}(0) = 0` or `m = 0`.
fn log_scaling(log_u_full: f64, log_u_fwd: f64, log_b_m: f64) -> f64 {
    let log_f = log1m_exp(log_u_fwd);
    log_u_full - log_u_fwd + log_f + log_b_m
}

/// `O_{m,n}`, `alpha_n(m)`, `beta_n(m)` and `Delta_{m,n}` for `0 <= m < n`.
pub fn quantities(env: &EnvironmentPath, m: usize, n: usize) -> Result<SegmentQuantities> {
    if m >= n || n > env.len() {
        return Err(Error::Range(format!("need 0 <= m < n <= {}, got m={m}, n={n}", env.len())));
    }
    let log_u_fwd = log_survival(env, m, n)?;
    let log_u_fwd_prev = log_survival(env, m, n - 1)?;
    let log_u_full = log_survival(env, 0, n)?;
    let log_u_full_prev = log_survival(env, 0, n - 1)?;
    let log_u_prefix = log_survival(env, 0, m)?;
    let s_m = env.s(m);
    let log_b_m = env.log_b(m);
    let log_o = log_scaling(log_u_full, log_u_fwd, log_b_m);
    let log_o_prev = log_scaling(log_u_full_prev, log_u_fwd_prev, log_b_m);
    let alpha = (log_u_prefix - log_u_full).exp();
    let beta = (log_u_full - s_m - log_u_fwd).exp();
    let delta = (2.0 * (log_u_fwd_prev - log_u_fwd + log_u_full - log_u_full_prev)).exp();
    Ok(SegmentQuantities {
        m,
        n,
        log_u_fwd,
        log_u_fwd_prev,
        log_u_full,
        log_u_full_prev,
        log_u_prefix,
        s_m,
        log_b_m,
        log_o,
        log_o_prev,
        alpha,
        beta,
        delta,
    })
}

/// Exact quenched law of `Z_m` given `T = n`.
///
/// With `kappa = e^{S_m} b_m`, `u1 = 1 - f_{m,n}(0)` and
/// `u2 = 1 - f_{m,n-1}(0)`, the conditional pgf is
///
/// ```text
/// E[s^{Z_m} | T = n] = s * prod_i (1 + kappa u_i) / (1 + kappa (1 - s + s u_i)),
/// ```
///
/// i.e. `Z_m - 1` is a sum of two independent geometric variables with ratios
/// `theta_i = c (1 - u_i)`, `c = kappa / (1 + kappa)`. Equivalently
/// `P(Z_m = z) ∝ (1 - c) c^{z-1} (s1^z - s2^z)` with `s_i = 1 - u_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionalLaw {
    pub m: usize,
    pub n: usize,
    /// `f_{0,m}`
    pub prefix: LfMap,
    /// `ln(1 - s1)`, `s1 = f_{m,n}(0)`
    pub log_u1: f64,
    /// `ln(1 - s2)`, `s2 = f_{m,n-1}(0)`
    pub log_u2: f64,
    /// `ln P(T = n)`
    pub log_denom: f64,
}

impl ConditionalLaw {
    pub fn new(env: &EnvironmentPath, m: usize, n: usize) -> Result<Self> {
        if m == 0 || m >= n || n > env.len() {
            return Err(Error::Range(format!(
                "conditional law needs 1 <= m < n <= {}, got m={m}, n={n}",
                env.len()
            )));
        }
        let prefix = segment_map(env, 0, m)?;
        let log_u1 = log_survival(env, m, n)?;
        let log_u2 = log_survival(env, m, n - 1)?;
        let log_denom = log_extinction_time_pmf(env, n)?;
        if log_denom.exp() == 0.0 {
            return Err(Error::Breakdown(format!("P(T = {n}) underflows (ln = {log_denom})")));
        }
        Ok(Self { m, n, prefix, log_u1, log_u2, log_denom })
    }

    /// `ln kappa = ln(B_m / A_m) = S_m + ln b_m`.
    pub fn log_kappa(&self) -> f64 {
        self.prefix.log_b - self.prefix.log_a
    }

    pub fn s1(&self) -> f64 {
        -self.log_u1.exp_m1()
    }

    pub fn s2(&self) -> f64 {
        -self.log_u2.exp_m1()
    }

    pub fn denom(&self) -> f64 {
        self.log_denom.exp()
    }

    /// Ratio `c = B_m / (A_m + B_m)` of the geometric law of `Z_m` given `Z_m > 0`.
    pub fn c(&self) -> f64 {
        let lk = self.log_kappa();
        (lk - softplus(lk)).exp()
    }

    /// `ln theta_i` for the two geometric components.
    pub fn log_thetas(&self) -> [f64; 2] {
        let lk = self.log_kappa();
        let log_c = lk - softplus(lk);
        [log_c + log1m_exp(self.log_u1), log_c + log1m_exp(self.log_u2)]
    }

    /// `E[s^{Z_m} | T = n]` with `1 - s` supplied separately so that `s`
    /// close to 1 keeps full precision.
    pub fn pgf_with_complement(&self, s: f64, one_minus_s: f64) -> f64 {
        if s == 0.0 {
            return 0.0;
        }
        let lk = self.log_kappa();
        let mut log_ratio = 0.0;
        let (log_t, log_s) = (one_minus_s.ln(), s.ln());
        for log_u in [self.log_u1, self.log_u2] {
            let num = softplus(lk + log_u);
            // ln(1 - s + s u); exactly ln u at s = 1
            let den = softplus(lk + log_add_exp(log_t, log_s + log_u));
            log_ratio += num - den;
        }
        s * log_ratio.exp()
    }

    pub fn pgf(&self, s: f64) -> f64 {
        self.pgf_with_complement(s, 1.0 - s)
    }

    /// Draw `Z_m` given `T = n` as `1 + G_1 + G_2` with `G_i` geometric on
    /// `{0, 1, ...}` via the inverse of `P(G >= k) = theta^k`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<u64> {
        let mut z: u64 = 1;
        for log_theta in self.log_thetas() {
            if log_theta == f64::NEG_INFINITY {
                continue;
            }
            // U in (0, 1]
            let u = 1.0 - rng.random::<f64>();
            let g = (u.ln() / log_theta).floor();
            if !(g < 1e18) {
                return Err(Error::Range(format!("conditional Z draw {g} exceeds the count range")));
            }
            z += g as u64;
        }
        Ok(z)
    }
}

fn check_s(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!("s = {s} outside [0, 1]")));
    }
    Ok(())
}

/// `E_k[s^{Z_m} | T = n]` for `1 <= m < n`.
pub fn conditional_pgf(env: &EnvironmentPath, m: usize, n: usize, s: f64) -> Result<f64> {
    check_s(s)?;
    Ok(ConditionalLaw::new(env, m, n)?.pgf(s))
}

/// Two-sided bound on the conditional pgf:
///
/// ```text
/// s Delta^{-1} / (1 + (1-s) O_{m,n-1})^2 <= E[s^{Z_m} | T=n] <= s Delta / (1 + (1-s) O_{m,n})^2
/// ```
pub fn sandwich_bounds(env: &EnvironmentPath, m: usize, n: usize, s: f64) -> Result<(f64, f64)> {
    check_s(s)?;
    if m == 0 {
        return Err(Error::Range("sandwich bounds need m >= 1".into()));
    }
    let q = quantities(env, m, n)?;
    Ok(sandwich_from_quantities(&q, s))
}

pub fn sandwich_from_quantities(q: &SegmentQuantities, s: f64) -> (f64, f64) {
    let t = 1.0 - s;
    let lower = s / q.delta / (1.0 + t * q.o_prev()).powi(2);
    let upper = s * q.delta / (1.0 + t * q.o()).powi(2);
    (lower, upper)
}

/// `E_k[exp(-lambda Z_m / scale) | T = n]`.
pub fn conditional_laplace(env: &EnvironmentPath, m: usize, n: usize, lambda: f64, scale: f64) -> Result<f64> {
    if !(lambda >= 0.0) || !(scale > 0.0) {
        return Err(Error::Domain(format!("need lambda >= 0 and scale > 0, got {lambda}, {scale}")));
    }
    let law = ConditionalLaw::new(env, m, n)?;
    Ok(laplace_of(&law, lambda, scale))
}

pub fn laplace_of(law: &ConditionalLaw, lambda: f64, scale: f64) -> f64 {
    let x = lambda / scale;
    law.pgf_with_complement((-x).exp(), -(-x).exp_m1())
}

/// One exact draw of `Z_m` given `T = n`.
pub fn sample_conditional_z<R: Rng + ?Sized>(env: &EnvironmentPath, m: usize, n: usize, rng: &mut R) -> Result<u64> {
    ConditionalLaw::new(env, m, n)?.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_model::{sample_environment, EnvSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn critical(n: usize) -> EnvironmentPath {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        sample_environment(&EnvSpec::critical_geometric(), n, &mut rng).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    fn random_env(rng: &mut ChaCha8Rng, n: usize) -> EnvironmentPath {
        let laws = (0..n)
            .map(|_| OffspringLaw::new(rng.random_range(0.05..0.95), rng.random_range(0.0..0.9)).unwrap())
            .collect();
        EnvironmentPath::from_laws(laws)
    }

    #[test]
    fn law_maps() {
        let m = LfMap::of_law(&OffspringLaw::new(0.5, 0.0).unwrap());
        assert!((m.a() - 1.0).abs() < 1e-15 && (m.b() - 1.0).abs() < 1e-15);
        let law = OffspringLaw::new(0.5, 0.5).unwrap();
        let m = LfMap::of_law(&law);
        assert!((m.a() - 2.0).abs() < 1e-14 && (m.b() - 2.0).abs() < 1e-14);
        assert!((m.eval(0.0) - law.extinction_prob()).abs() < 1e-15);
        // the map reproduces the law's pgf everywhere
        for i in 0..=10 {
            let s = i as f64 / 10.0;
            assert!((m.eval(s) - law.pgf(s)).abs() < 1e-14);
        }
    }

    #[test]
    fn compose_rules() {
        let outer = LfMap::new(2.0, 1.0).unwrap();
        let inner = LfMap::new(3.0, 4.0).unwrap();
        let c = outer.compose(&inner);
        assert!(rel(c.a(), 6.0) < 1e-15 && rel(c.b(), 9.0) < 1e-15);
        assert_eq!(LfMap::IDENTITY.compose(&inner), inner);
        let back = inner.compose(&LfMap::IDENTITY);
        assert!(rel(back.a(), 3.0) < 1e-15 && rel(back.b(), 4.0) < 1e-15);
        assert!(LfMap::new(0.0, 1.0).is_err());
        assert!(LfMap::new(1.0, -1.0).is_err());
    }

    #[test]
    fn composition_matches_nested_pgfs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let env = random_env(&mut rng, 8);
        let map = segment_map(&env, 2, 7).unwrap();
        for i in 0..=10 {
            let s = i as f64 / 10.0;
            let nested = env.laws()[2..7].iter().rev().fold(s, |acc, law| law.pgf(acc));
            assert!((map.eval(s) - nested).abs() < 1e-13, "s={s}");
        }
    }

    #[test]
    fn survival_values() {
        let m = LfMap::new(1.0, 1.0).unwrap();
        assert!((eval_survival(&m, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(eval_survival(&m, 1.0).unwrap(), 0.0);
        for k in 1..20 {
            let m = LfMap::new(1.0, k as f64).unwrap();
            assert!(rel(m.survival(0.0), 1.0 / (k as f64 + 1.0)) < 1e-14);
        }
        assert!(eval_survival(&m, 1.5).is_err());
    }

    #[test]
    fn critical_segment_maps() {
        let env = critical(10);
        let map = segment_map(&env, 0, 5).unwrap();
        assert!(rel(map.a(), 1.0) < 1e-15 && rel(map.b(), 5.0) < 1e-14);
        assert!(rel(map.eval(0.0), 5.0 / 6.0) < 1e-14);
        assert_eq!(segment_map(&env, 4, 4).unwrap(), LfMap::IDENTITY);
        assert_eq!(segment_map(&env, 6, 4).unwrap(), LfMap::IDENTITY);
        assert!(matches!(segment_map(&env, 0, 11), Err(Error::Range(_))));
    }

    #[test]
    fn segment_map_matches_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.random_range(1..=50);
            let env = sample_environment(&EnvSpec::gaussian(1.5), n, &mut rng).unwrap();
            let m = rng.random_range(0..n);
            let k = rng.random_range(m..=n);
            let fold = env.laws()[m..k]
                .iter()
                .fold(LfMap::IDENTITY, |acc, law| acc.compose(&LfMap::of_law(law)));
            let direct = segment_map(&env, m, k).unwrap();
            assert!((direct.log_a() - fold.log_a()).abs() < 1e-10);
            if k > m {
                assert!((direct.log_b() - fold.log_b()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn segment_map_survives_deep_prefix_minimum() {
        // A deep dip before m makes b_m dominate b_n; the prefix difference
        // would cancel completely.
        let mut xs = vec![-60.0, 60.0];
        xs.extend(std::iter::repeat(0.0).take(5));
        let env = EnvironmentPath::from_log_means(&xs).unwrap();
        let map = segment_map(&env, 2, 7).unwrap();
        assert!(rel(map.b(), 5.0) < 1e-12, "B = {}", map.b());
        assert!(rel(map.a(), 1.0) < 1e-12);
    }

    #[test]
    fn pmf_values() {
        let env = critical(20);
        assert!(rel(extinction_time_pmf(&env, 3).unwrap(), 1.0 / 12.0) < 1e-14);
        assert!(rel(extinction_time_pmf(&env, 1).unwrap(), 0.5) < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let env = random_env(&mut rng, 40);
        let total: f64 = (1..=40).map(|n| extinction_time_pmf(&env, n).unwrap()).sum();
        let tail = segment_map(&env, 0, 40).unwrap().survival_at_zero();
        assert!((total + tail - 1.0).abs() < 1e-10);
        assert!(extinction_time_pmf(&env, 0).is_err());
    }

    #[test]
    fn critical_quantities() {
        let env = critical(10);
        let q = quantities(&env, 5, 10).unwrap();
        assert!(rel(q.o(), 25.0 / 11.0) < 1e-13);
        assert!(rel(q.delta, 144.0 / 121.0) < 1e-13);
        assert!(rel(q.alpha, 11.0 / 6.0) < 1e-13);
        assert!(rel(q.beta, 6.0 / 11.0) < 1e-13);
        assert!(rel(q.o_via_alpha_beta(), q.o()) < 1e-12);
        assert!(rel(q.o_via_prefix(), q.o()) < 1e-12);
        assert!(rel(q.delta_via_o().unwrap(), q.delta) < 1e-12);
    }

    #[test]
    fn quantity_invariants_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..500 {
            let n = rng.random_range(2..60);
            let env = random_env(&mut rng, n);
            let m = rng.random_range(1..n);
            let q = quantities(&env, m, n).unwrap();
            assert!(q.alpha >= 1.0 - 1e-12 && q.beta <= 1.0 + 1e-12);
            assert!(rel(q.o_via_alpha_beta(), q.o()) < 1e-10);
            assert!(rel(q.o_via_prefix(), q.o()) < 1e-10);
            for lu in [q.log_u_fwd, q.log_u_full, q.log_u_prefix] {
                assert!(lu <= 0.0);
            }
        }
    }

    #[test]
    fn monotone_in_horizon_and_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let env = sample_environment(&EnvSpec::gaussian(1.0), 200, &mut rng).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for big_n in 10..=200 {
            let f = segment_map(&env, 10, big_n).unwrap().eval(0.0);
            assert!(f >= prev - 1e-15);
            prev = f;
        }
        let mut prev_alpha = f64::INFINITY;
        for m in 0..200 {
            let alpha = quantities(&env, m, 200).unwrap().alpha;
            assert!(alpha <= prev_alpha * (1.0 + 1e-12));
            prev_alpha = alpha;
        }
        assert!((prev_alpha - 1.0).abs() < 1.0);
    }

    #[test]
    fn conditional_pgf_critical_small() {
        let env = critical(5);
        let v = conditional_pgf(&env, 1, 2, 0.5).unwrap();
        assert!(rel(v, 3.0 / 7.0) < 1e-14, "{v}");
        assert!((conditional_pgf(&env, 1, 2, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(conditional_pgf(&env, 1, 2, 0.0).unwrap(), 0.0);
        assert!(matches!(conditional_pgf(&env, 0, 2, 0.5), Err(Error::Range(_))));
        let law = ConditionalLaw::new(&env, 1, 2).unwrap();
        assert!(rel(law.c(), 0.5) < 1e-15 && rel(law.s1(), 0.5) < 1e-15 && law.s2() == 0.0);
        assert!(rel(law.denom(), 1.0 / 6.0) < 1e-14);
    }

    #[test]
    fn conditional_pgf_matches_series() {
        // brute-force series sum_z P(Z_m = z) s^z (s1^z - s2^z) / denom with geometric Z_m
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..50 {
            let n = rng.random_range(2..15);
            let env = random_env(&mut rng, n);
            let m = rng.random_range(1..n);
            let law = ConditionalLaw::new(&env, m, n).unwrap();
            let prefix = segment_map(&env, 0, m).unwrap();
            let (a, b) = (prefix.a(), prefix.b());
            let c = b / (a + b);
            let p_pos = 1.0 / (a + b);
            let (s1, s2) = (law.s1(), law.s2());
            for &s in &[0.2f64, 0.5, 0.9] {
                let mut num = 0.0;
                let mut den = 0.0;
                let terms = (40.0 / -c.ln()).ceil().clamp(50.0, 1e6) as i32;
                for z in 1..terms {
                    let pz = p_pos * (1.0 - c) * c.powi(z - 1);
                    let w = s1.powi(z) - s2.powi(z);
                    num += pz * s.powi(z) * w;
                    den += pz * w;
                }
                assert!((law.pgf(s) - num / den).abs() < 1e-10);
                assert!(rel(den, law.denom()) < 1e-9, "c={c} den={den} denom={}", law.denom());
            }
        }
    }

    #[test]
    fn conditional_pgf_monotone_in_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let env = sample_environment(&EnvSpec::gaussian(1.0), 300, &mut rng).unwrap();
        let law = ConditionalLaw::new(&env, 150, 300).unwrap();
        let mut prev = 0.0;
        for i in 0..=200 {
            let v = law.pgf(i as f64 / 200.0);
            assert!(v >= prev && v <= 1.0 + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn sandwich_critical() {
        let env = critical(10);
        let exact = conditional_pgf(&env, 5, 10, 0.5).unwrap();
        let (lo, hi) = sandwich_bounds(&env, 5, 10, 0.5).unwrap();
        assert!(lo <= exact && exact <= hi, "{lo} {exact} {hi}");
        let (lo, hi) = sandwich_bounds(&env, 5, 10, 1.0).unwrap();
        assert!(rel(lo, 121.0 / 144.0) < 1e-12 && rel(hi, 144.0 / 121.0) < 1e-12);
    }

    #[test]
    fn sandwich_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..2000 {
            let n = rng.random_range(2..80);
            let env = if rng.random_bool(0.5) {
                random_env(&mut rng, n)
            } else {
                sample_environment(&EnvSpec::gaussian(2.0), n, &mut rng).unwrap()
            };
            let m = rng.random_range(1..n);
            let s: f64 = rng.random();
            let exact = conditional_pgf(&env, m, n, s).unwrap();
            let (lo, hi) = sandwich_bounds(&env, m, n, s).unwrap();
            assert!(lo <= exact + 1e-12 && exact <= hi + 1e-12, "m={m} n={n} s={s}: {lo} {exact} {hi}");
        }
    }

    #[test]
    fn laplace_at_zero_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let env = sample_environment(&EnvSpec::gaussian(1.0), 100, &mut rng).unwrap();
        assert_eq!(conditional_laplace(&env, 50, 100, 0.0, 3.0).unwrap(), 1.0);
        let v = conditional_laplace(&env, 50, 100, 1.0, 3.0).unwrap();
        assert!(v > 0.0 && v < 1.0);
        assert!(conditional_laplace(&env, 50, 100, -1.0, 3.0).is_err());
        assert!(conditional_laplace(&env, 50, 100, 1.0, 0.0).is_err());
    }

    #[test]
    fn sampler_matches_law() {
        let env = critical(5);
        let law = ConditionalLaw::new(&env, 1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 1_000_000;
        let mut ones = 0usize;
        let mut pgf_sum = 0.0;
        for _ in 0..draws {
            let z = law.sample(&mut rng).unwrap();
            assert!(z >= 1);
            if z == 1 {
                ones += 1;
            }
            pgf_sum += 0.5f64.powi(z as i32);
        }
        let p1 = ones as f64 / draws as f64;
        let se = (0.75f64 * 0.25 / draws as f64).sqrt();
        assert!((p1 - 0.75).abs() < 3.0 * se, "P(Z=1) ~ {p1}");
        let emp = pgf_sum / draws as f64;
        // variance of 2^{-Z} bounded by E[4^{-Z}] - pgf^2
        let second = law.pgf(0.25);
        let se = ((second - law.pgf(0.5).powi(2)) / draws as f64).sqrt();
        assert!((emp - law.pgf(0.5)).abs() < 4.0 * se);
    }

    #[test]
    fn uncorrected_bounds_fail_on_the_critical_environment() {
        // Without the factor s and the square, the lower bound exceeds the
        // exact value already at m = 1, n = 2.
        let env = critical(2);
        let s = 0.5;
        let exact = conditional_pgf(&env, 1, 2, s).unwrap();
        let q = quantities(&env, 1, 2).unwrap();
        let uncorrected_lower = 1.0 / q.delta / (1.0 + (1.0 - s) * q.o_prev());
        assert!(rel(exact, 3.0 / 7.0) < 1e-14, "{exact}");
        assert!(rel(uncorrected_lower, 0.5625) < 1e-14, "{uncorrected_lower}");
        assert!(uncorrected_lower > exact);
        let (lo, hi) = sandwich_bounds(&env, 1, 2, s).unwrap();
        assert!(lo <= exact && exact <= hi);
    }
}
