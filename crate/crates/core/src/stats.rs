//! Summary statistics, the weighted two-sample KS test and trend tests.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Type-7 quantile of an unsorted sample; `None` for empty input.
pub fn quantile(xs: &[f64], p: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Some(sorted_quantile(&v, p))
}

pub fn sorted_quantile(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(xs: &[f64]) -> Option<f64> {
    quantile(xs, 0.5)
}

pub fn iqr(xs: &[f64]) -> Option<f64> {
    Some(quantile(xs, 0.75)? - quantile(xs, 0.25)?)
}

fn check_sample(values: &[f64], weights: &[f64], name: &str) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Degenerate(format!("sample {name} is empty")));
    }
    if values.len() != weights.len() {
        return Err(Error::Degenerate(format!("sample {name}: {} values but {} weights", values.len(), weights.len())));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Degenerate(format!("sample {name} contains NaN")));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Degenerate(format!("sample {name} has a negative or non-finite weight")));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate(format!("sample {name} has zero total weight")));
    }
    Ok(total)
}

/// Pooled sample sorted by value, with each item's weight normalized within
/// its own group.
struct Pool {
    /// `(value, weight, group_is_a)`
    items: Vec<(f64, f64, bool)>,
    /// Start index of each run of equal values.
    runs: Vec<usize>,
}

impl Pool {
    fn new(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64]) -> Result<Self> {
        check_sample(a, wa, "a")?;
        check_sample(b, wb, "b")?;
        let mut items: Vec<(f64, f64, bool)> = a
            .iter()
            .zip(wa)
            .map(|(&v, &w)| (v, w, true))
            .chain(b.iter().zip(wb).map(|(&v, &w)| (v, w, false)))
            .collect();
        items.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut runs = vec![0];
        for i in 1..items.len() {
            if items[i].0 != items[i - 1].0 {
                runs.push(i);
            }
        }
        Ok(Self { items, runs })
    }

    /// Sup distance when `labels[i]` says whether item `i` belongs to `a`.
    fn distance(&self, labels: &[bool]) -> f64 {
        let (mut ta, mut tb) = (0.0, 0.0);
        for (item, &la) in self.items.iter().zip(labels) {
            if la {
                ta += item.1;
            } else {
                tb += item.1;
            }
        }
        if !(ta > 0.0 && tb > 0.0) {
            return 0.0;
        }
        let (mut fa, mut fb, mut d) = (0.0f64, 0.0f64, 0.0f64);
        let n = self.items.len();
        for (k, &start) in self.runs.iter().enumerate() {
            let end = self.runs.get(k + 1).copied().unwrap_or(n);
            for i in start..end {
                if labels[i] {
                    fa += self.items[i].1;
                } else {
                    fb += self.items[i].1;
                }
            }
            d = d.max((fa / ta - fb / tb).abs());
        }
        d.min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub distance: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Sup distance between two weighted empirical CDFs.
pub fn weighted_ks_distance(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64]) -> Result<f64> {
    let pool = Pool::new(a, wa, b, wb)?;
    let labels: Vec<bool> = pool.items.iter().map(|i| i.2).collect();
    Ok(pool.distance(&labels))
}

/// Weighted two-sample KS distance with a permutation p-value. Group sizes
/// are kept fixed and every item carries its own weight through the
/// relabelling.
pub fn weighted_ks_two_sample<R: Rng + ?Sized>(
    a: &[f64],
    wa: &[f64],
    b: &[f64],
    wb: &[f64],
    permutations: usize,
    rng: &mut R,
) -> Result<KsResult> {
    let pool = Pool::new(a, wa, b, wb)?;
    let mut labels: Vec<bool> = pool.items.iter().map(|i| i.2).collect();
    let observed = pool.distance(&labels);
    let mut at_least = 0usize;
    for _ in 0..permutations {
        labels.shuffle(rng);
        if pool.distance(&labels) >= observed - 1e-12 {
            at_least += 1;
        }
    }
    Ok(KsResult {
        distance: observed,
        p_value: (1 + at_least) as f64 / (1 + permutations) as f64,
        permutations,
    })
}

/// Mann-Kendall statistic `S = sum_{i<j} sign(x_j - x_i)` with exact
/// one-sided p-values under exchangeability (ties count as zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MannKendall {
    pub s: i64,
    pub n: usize,
    /// `P(S <= s)`: small when the series decreases.
    pub p_decreasing: f64,
    /// `P(S >= s)`: small when the series increases.
    pub p_increasing: f64,
}

pub fn mann_kendall(xs: &[f64]) -> Result<MannKendall> {
    let n = xs.len();
    if n < 2 || n > 60 {
        return Err(Error::Degenerate(format!("trend test needs 2..=60 points, got {n}")));
    }
    if xs.iter().any(|x| x.is_nan()) {
        return Err(Error::Degenerate("trend test on NaN".into()));
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            s += match xs[j].partial_cmp(&xs[i]).unwrap() {
                std::cmp::Ordering::Greater => 1,
                std::cmp::Ordering::Less => -1,
                std::cmp::Ordering::Equal => 0,
            };
        }
    }
    // S = pairs - 2 * inversions; inversion counts follow the Mahonian numbers
    let pairs = (n * (n - 1) / 2) as i64;
    let mut dist = vec![1.0f64];
    for k in 1..n {
        let mut next = vec![0.0; dist.len() + k];
        for (inv, &c) in dist.iter().enumerate() {
            for extra in 0..=k {
                next[inv + extra] += c;
            }
        }
        dist = next;
    }
    let total: f64 = dist.iter().sum();
    let mut le = 0.0;
    let mut ge = 0.0;
    for (inv, &c) in dist.iter().enumerate() {
        let value = pairs - 2 * inv as i64;
        if value <= s {
            le += c;
        }
        if value >= s {
            ge += c;
        }
    }
    Ok(MannKendall { s, n, p_decreasing: le / total, p_increasing: ge / total })
}

/// Least-squares fit `y = intercept + slope x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Effective sample size `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ones(n: usize) -> Vec<f64> {
        vec![1.0; n]
    }

    #[test]
    fn quantiles() {
        let xs = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(median(&xs), Some(3.0));
        assert_eq!(quantile(&xs, 0.25), Some(2.0));
        assert_eq!(iqr(&xs), Some(2.0));
        assert_eq!(quantile(&[1.0, 2.0], 0.5), Some(1.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn ks_identical_and_disjoint() {
        let a = [0.1, 0.5, 0.9];
        assert_eq!(weighted_ks_distance(&a, &ones(3), &a, &ones(3)).unwrap(), 0.0);
        let b = [1.1, 1.5];
        assert_eq!(weighted_ks_distance(&a, &ones(3), &b, &ones(2)).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = weighted_ks_two_sample(&a, &ones(3), &a, &ones(3), 200, &mut rng).unwrap();
        assert_eq!(r.distance, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn ks_all_tied_is_zero() {
        let a = vec![1.0; 10];
        let b = vec![1.0; 7];
        assert_eq!(weighted_ks_distance(&a, &ones(10), &b, &[0.3; 7]).unwrap(), 0.0);
    }

    #[test]
    fn ks_weights_matter() {
        // weight moves all of b's mass to 1.0
        let d = weighted_ks_distance(&[0.0, 1.0], &[1.0, 1.0], &[0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
        // scaling weights of a group changes nothing
        let d2 = weighted_ks_distance(&[0.0, 1.0], &[3.0, 3.0], &[0.0, 1.0], &[0.0, 5.0]).unwrap();
        assert_eq!(d, d2);
    }

    #[test]
    fn ks_matches_unweighted_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let na = rng.random_range(1..30);
            let nb = rng.random_range(1..30);
            let a: Vec<f64> = (0..na).map(|_| rng.random_range(0..10) as f64).collect();
            let b: Vec<f64> = (0..nb).map(|_| rng.random_range(0..10) as f64).collect();
            let mut brute: f64 = 0.0;
            for t in 0..10 {
                let fa = a.iter().filter(|&&v| v <= t as f64).count() as f64 / na as f64;
                let fb = b.iter().filter(|&&v| v <= t as f64).count() as f64 / nb as f64;
                brute = brute.max((fa - fb).abs());
            }
            let d = weighted_ks_distance(&a, &ones(na), &b, &ones(nb)).unwrap();
            assert!((d - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn ks_degenerate_inputs() {
        assert!(matches!(weighted_ks_distance(&[], &[], &[1.0], &[1.0]), Err(Error::Degenerate(_))));
        assert!(weighted_ks_distance(&[1.0], &[0.0], &[1.0], &[1.0]).is_err());
        assert!(weighted_ks_distance(&[1.0], &[-1.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn mann_kendall_exact() {
        let mk = mann_kendall(&[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(mk.s, -10);
        assert!((mk.p_decreasing - 1.0 / 120.0).abs() < 1e-15);
        let mk = mann_kendall(&[5.0, 4.0, 3.0, 1.0, 2.0]).unwrap();
        assert_eq!(mk.s, -8);
        assert!((mk.p_decreasing - 5.0 / 120.0).abs() < 1e-15);
        let mk = mann_kendall(&[1.0, 2.0, 3.0]).unwrap();
        assert!((mk.p_increasing - 1.0 / 6.0).abs() < 1e-15);
        assert!(mann_kendall(&[1.0]).is_err());
    }

    #[test]
    fn ols_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let (slope, icept) = ols_slope(&x, &y).unwrap();
        assert!((slope - 2.0).abs() < 1e-14 && (icept - 1.0).abs() < 1e-14);
        assert!(ols_slope(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }

    #[test]
    fn ess() {
        assert_eq!(effective_sample_size(&[1.0; 10]), 10.0);
        assert!((effective_sample_size(&[1.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
