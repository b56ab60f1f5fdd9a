//! Analytic decode-cost model, in abstract operation counts.
//!
//! Full-cache decoding costs `4 * (l + i) * d_k` for step `i`, so
//! generating `n` tokens costs `4nl*d_k + 2n(n-1)*d_k`. The compressed
//! path (10% retention) is modelled by a closed form with a quadratic
//! prefill term and an `l log l` selection term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostQuery {
    /// Prefill length in tokens.
    pub l: u64,
    /// Generated tokens.
    pub n: u64,
    pub d_k: u64,
}

impl CostQuery {
    pub fn new(l: u64, n: u64, d_k: u64) -> Result<Self> {
        if l == 0 || n == 0 || d_k == 0 {
            return Err(Error::Config(format!("cost query needs l, n, d_k >= 1 (got {l}, {n}, {d_k})")));
        }
        Ok(Self { l, n, d_k })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    Natural,
    #[default]
    Base2,
}

impl LogBase {
    #[must_use]
    pub fn log(self, x: f64) -> f64 {
        match self {
            Self::Natural => x.ln(),
            Self::Base2 => x.log2(),
        }
    }
}

impl std::str::FromStr for LogBase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" | "e" | "ln" => Ok(Self::Natural),
            "base2" | "2" | "log2" => Ok(Self::Base2),
            other => Err(Error::Config(format!("unknown log base {other:?}"))),
        }
    }
}

/// `4nl*d_k + 2n(n-1)*d_k`, evaluated in integers.
#[must_use]
pub fn cost_raw(q: &CostQuery) -> f64 {
    let (l, n, d) = (u128::from(q.l), u128::from(q.n), u128::from(q.d_k));
    (4 * n * l * d + 2 * n * (n - 1) * d) as f64
}

/// Step-by-step sum of the per-token cost `4 (l + i) d_k`.
#[must_use]
pub fn cost_raw_oracle(q: &CostQuery) -> f64 {
    (0..q.n).map(|i| 4.0 * (q.l + i) as f64 * q.d_k as f64).sum()
}

/// `(0.5 + 0.0025 d_k) l^2 + l log l + (2.5 + 0.9 d_k + 0.4 n d_k) l + 2n(n-1) d_k`.
#[must_use]
pub fn cost_acckv(q: &CostQuery, base: LogBase) -> f64 {
    let (l, n, d) = (q.l as f64, q.n as f64, q.d_k as f64);
    (0.5 + 0.0025 * d) * l * l + l * base.log(l) + (2.5 + 0.9 * d + 0.4 * n * d) * l + 2.0 * n * (n - 1.0) * d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSavings {
    /// `cost_raw - cost_acckv`.
    pub exact: f64,
    /// `3.6 n d_k - (0.5 + 0.0025 d_k) l - log l - 2.5 - 0.9 d_k`.
    pub per_token_form: f64,
    /// `exact / per_token_form`, algebraically equal to `l`.
    pub ratio: f64,
}

#[must_use]
pub fn per_token_savings(q: &CostQuery, base: LogBase) -> f64 {
    let (l, n, d) = (q.l as f64, q.n as f64, q.d_k as f64);
    3.6 * n * d - (0.5 + 0.0025 * d) * l - base.log(l) - 2.5 - 0.9 * d
}

#[must_use]
pub fn cost_savings(q: &CostQuery, base: LogBase) -> CostSavings {
    let exact = cost_raw(q) - cost_acckv(q, base);
    let per_token_form = per_token_savings(q, base);
    CostSavings { exact, per_token_form, ratio: exact / per_token_form }
}

/// Smallest `n` for which the compressed path is cheaper at this `l`, `d_k`.
#[must_use]
pub fn breakeven_tokens(l: u64, d_k: u64, base: LogBase) -> u64 {
    let (lf, d) = (l as f64, d_k as f64);
    let overhead = (0.5 + 0.0025 * d) * lf + base.log(lf) + 2.5 + 0.9 * d;
    let mut n = ((overhead / (3.6 * d)).floor() as u64).max(1);
    while per_token_savings(&CostQuery { l, n, d_k }, base) <= 0.0 {
        n += 1;
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(l: u64, n: u64, d_k: u64) -> CostQuery {
        CostQuery::new(l, n, d_k).unwrap()
    }

    #[test]
    fn raw_examples() {
        assert_eq!(cost_raw(&q(10, 3, 4)), 528.0);
        assert_eq!(cost_raw_oracle(&q(10, 3, 4)), 160.0 + 176.0 + 192.0);
        assert_eq!(cost_raw(&q(1, 1, 1)), 4.0);
        assert_eq!(cost_raw_oracle(&q(1, 1, 1)), 4.0);
        assert_eq!(cost_raw(&q(100, 1, 64)), 25600.0);
        assert!(CostQuery::new(0, 1, 1).is_err());
    }

    #[test]
    fn acckv_examples() {
        let expected = 6600.0 + 100.0 * 100f64.log2() + 31610.0 + 11520.0;
        let got = cost_acckv(&q(100, 10, 64), LogBase::Base2);
        assert!((got - expected).abs() < 1e-9);
        assert!((got - 50394.39).abs() < 0.01);
        for base in [LogBase::Base2, LogBase::Natural] {
            assert!((cost_acckv(&q(1, 1, 1), base) - 4.3025).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_coefficient_by_second_difference() {
        // f(l) = a l^2 + b l + l log l; second difference at step h isolates 2 a h^2
        // up to the log term, which is O(1/l) and vanishes for large l.
        let d_k = 64;
        let base = LogBase::Natural;
        let f = |l: u64| cost_acckv(&q(l, 5, d_k), base);
        let (l, h) = (1_000_000u64, 1000u64);
        let second = f(l + h) - 2.0 * f(l) + f(l - h);
        let coeff = second / (2.0 * (h * h) as f64);
        assert!((coeff - (0.5 + 0.0025 * d_k as f64)).abs() < 1e-3);
    }

    #[test]
    fn savings_compose() {
        let s = cost_savings(&q(10, 3, 4), LogBase::Base2);
        assert_eq!(s.exact, 528.0 - cost_acckv(&q(10, 3, 4), LogBase::Base2));
        let big = cost_savings(&q(2210, 1000, 128), LogBase::Base2);
        assert!(big.exact > 0.0 && big.per_token_form > 0.0);
    }

    #[test]
    fn breakeven_is_tight() {
        for (l, d) in [(100, 64), (2210, 128), (10, 4), (5000, 1)] {
            for base in [LogBase::Base2, LogBase::Natural] {
                let n = breakeven_tokens(l, d, base);
                assert!(per_token_savings(&q(l, n, d), base) > 0.0);
                if n > 1 {
                    assert!(per_token_savings(&q(l, n - 1, d), base) <= 0.0);
                }
            }
        }
        assert_eq!(breakeven_tokens(100, 64, LogBase::Base2), 1);
    }

    proptest! {
        #[test]
        fn raw_matches_summation(l in 1u64..=1000, n in 1u64..=1000, d in 1u64..=1000) {
            let query = q(l, n, d);
            prop_assert_eq!(cost_raw(&query).to_bits(), cost_raw_oracle(&query).to_bits());
        }

        #[test]
        fn savings_identity(l in 1u64..=1000, n in 1u64..=1000, d in 1u64..=256) {
            let s = cost_savings(&q(l, n, d), LogBase::Base2);
            let rhs = l as f64 * s.per_token_form;
            prop_assert!((s.exact - rhs).abs() <= 1e-6 * s.exact.abs().max(rhs.abs()));
        }

        #[test]
        fn raw_strictly_increasing(l in 1u64..500, n in 1u64..500, d in 1u64..500) {
            let base = cost_raw(&q(l, n, d));
            prop_assert!(cost_raw(&q(l + 1, n, d)) > base);
            prop_assert!(cost_raw(&q(l, n + 1, d)) > base);
            prop_assert!(cost_raw(&q(l, n, d + 1)) > base);
        }
    }
}
