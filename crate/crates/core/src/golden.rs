//! Closed-form values for the critical geometric environment
//! `f(s) = 1 / (2 - s)` in every generation.

use serde::Serialize;

use crate::env_model::{EnvironmentPath, OffspringLaw};
use crate::error::Result;
use crate::lf_algebra::{extinction_time_pmf, quantities, segment_map};

pub const GOLDEN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoldenCheck {
    pub name: String,
    pub computed: f64,
    pub expected: f64,
    pub rel_error: f64,
    pub passed: bool,
}

fn check(name: String, computed: f64, expected: f64) -> GoldenCheck {
    let rel_error = ((computed - expected) / expected).abs();
    GoldenCheck { name, computed, expected, rel_error, passed: rel_error <= GOLDEN_TOLERANCE }
}

/// `f_{0,m}(0) = m/(m+1)`, `P(T=n) = 1/(n(n+1))`, `O_{m,n} = m(n-m)/(n+1)`,
/// `alpha_n(m) = (n+1)/(m+1)`, `beta_n(m) = (n-m+1)/(n+1)` and
/// `Delta_{5,10} = 144/121`.
pub fn golden_suite() -> Result<Vec<GoldenCheck>> {
    let env = EnvironmentPath::from_laws(vec![OffspringLaw::new(0.5, 0.0)?; 64]);
    let mut out = Vec::new();
    for m in [1usize, 2, 7, 30, 64] {
        let f = segment_map(&env, 0, m)?.eval(0.0);
        out.push(check(format!("f_0,{m}(0)"), f, m as f64 / (m as f64 + 1.0)));
    }
    for n in [1usize, 2, 10, 64] {
        let nf = n as f64;
        out.push(check(format!("P(T={n})"), extinction_time_pmf(&env, n)?, 1.0 / (nf * (nf + 1.0))));
    }
    for (m, n) in [(1usize, 2usize), (3, 10), (5, 10), (20, 64), (63, 64)] {
        let q = quantities(&env, m, n)?;
        let (mf, nf) = (m as f64, n as f64);
        out.push(check(format!("O_{m},{n}"), q.o(), mf * (nf - mf) / (nf + 1.0)));
        out.push(check(format!("alpha_{n}({m})"), q.alpha, (nf + 1.0) / (mf + 1.0)));
        out.push(check(format!("beta_{n}({m})"), q.beta, (nf - mf + 1.0) / (nf + 1.0)));
    }
    out.push(check("Delta_5,10".into(), quantities(&env, 5, 10)?.delta, 144.0 / 121.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_suite_passes() {
        let suite = golden_suite().unwrap();
        assert!(suite.len() > 20);
        for c in &suite {
            assert!(c.passed, "{c:?}");
        }
    }
}
