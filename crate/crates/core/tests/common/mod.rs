//! Brute-force quenched oracle: iterate the law of `Z_k` as a vector over
//! `{0, ..., cap}` by explicit convolution, independent of the
//! linear-fractional algebra.

#![allow(dead_code)]

use bpre_core::OffspringLaw;

/// Offspring pmf of `f(s) = r + (1 - r) q / (1 - p s)` on `{0, ..., cap}`.
fn offspring_pmf(law: &OffspringLaw, cap: usize) -> Vec<f64> {
    let (p, q, r) = (law.p(), law.q(), law.r());
    let mut out = Vec::with_capacity(cap + 1);
    let mut pk = 1.0;
    for k in 0..=cap {
        let geom = (1.0 - r) * q * pk;
        out.push(if k == 0 { r + geom } else { geom });
        pk *= p;
    }
    out
}

fn convolve(a: &[f64], b: &[f64], cap: usize) -> Vec<f64> {
    let mut out = vec![0.0; cap + 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate().take(cap + 1 - i) {
            out[i + j] += x * y;
        }
    }
    out
}

/// Laws of `Z_start, ..., Z_end` started from one individual at `start`.
pub struct Chain {
    pub dists: Vec<Vec<f64>>,
    /// Total probability pushed beyond `cap`.
    pub lost_mass: f64,
}

pub fn run_chain(laws: &[OffspringLaw], start: usize, end: usize, cap: usize) -> Chain {
    let mut d = vec![0.0; cap + 1];
    d[1] = 1.0;
    let mut dists = vec![d.clone()];
    let mut lost = 0.0;
    for law in &laws[start..end] {
        let pmf = offspring_pmf(law, cap);
        let mut next = vec![0.0; cap + 1];
        // power holds the law of a sum of j offspring counts
        let mut power = vec![0.0; cap + 1];
        power[0] = 1.0;
        for (j, &w) in d.iter().enumerate() {
            if j > 0 {
                power = convolve(&power, &pmf, cap);
            }
            if w == 0.0 {
                continue;
            }
            for (y, &v) in power.iter().enumerate() {
                next[y] += w * v;
            }
        }
        let total: f64 = next.iter().sum();
        lost += (1.0 - total).max(0.0);
        d = next;
        dists.push(d.clone());
    }
    Chain { dists, lost_mass: lost }
}

/// `f_{0,n}(0)`, `P(T = n)` and `E[s^{Z_m} | T = n]` for each `s`.
pub struct OracleValues {
    pub extinct_by_n: f64,
    pub p_t_eq_n: f64,
    pub cond_pgf: Vec<f64>,
    pub lost_mass: f64,
}

pub fn oracle(laws: &[OffspringLaw], m: usize, n: usize, s_grid: &[f64], cap: usize) -> OracleValues {
    let from0 = run_chain(laws, 0, n, cap);
    let extinct_by_n = from0.dists[n][0];
    let p_t_eq_n = extinct_by_n - from0.dists[n - 1][0];
    // one individual at generation m: extinction by n and by n - 1
    let from_m = run_chain(laws, m, n, cap);
    let g_n = from_m.dists[n - m][0];
    let g_prev = from_m.dists[n - m - 1][0];
    let zm = &from0.dists[m];
    let cond_pgf = s_grid
        .iter()
        .map(|&s| {
            let mut acc = 0.0;
            for (j, &w) in zm.iter().enumerate().skip(1) {
                acc += w * s.powi(j as i32) * (g_n.powi(j as i32) - g_prev.powi(j as i32));
            }
            acc / p_t_eq_n
        })
        .collect();
    OracleValues { extinct_by_n, p_t_eq_n, cond_pgf, lost_mass: from0.lost_mass + from_m.lost_mass }
}
