// SPDX-License-Identifier: Apache-2.0

//! Two-sided Wilcoxon signed-rank test on paired per-window errors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cohort::WindowId;
use crate::error::{Error, Result};

pub const MIN_PAIRS: usize = 6;
/// Largest non-zero pair count that uses the exact null distribution.
pub const EXACT_MAX: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    Normal,
    /// Every difference was zero.
    NoDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub system_a: String,
    pub system_b: String,
    pub split: String,
    pub test: String,
    /// min(W+, W-).
    pub statistic: f64,
    pub p_value: f64,
    pub n_pairs: usize,
    pub n_nonzero: usize,
    pub method: Method,
}

/// Average ranks of `values` (1-based).
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// P(W+ <= w) under the null, by enumerating sign assignments through a
/// subset-sum count over doubled (integer) ranks.
fn exact_cdf(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let limit = (w * 2.0).round() as usize;
    let all = 2f64.powi(ranks.len() as i32);
    counts[..=limit.min(total)].iter().sum::<f64>() / all
}

/// Signed-rank statistic and two-sided p-value for raw differences.
pub fn signed_rank(diffs: &[f64]) -> (f64, f64, usize, Method) {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return (0.0, 1.0, 0, Method::NoDifference);
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let r = ranks(&abs);
    let w_plus = r.iter().zip(&nz).filter(|(_, d)| **d > 0.0).fold(0.0, |acc, (r, _)| acc + r);
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);
    if n <= EXACT_MAX {
        let p = (2.0 * exact_cdf(&r, w)).min(1.0);
        return (w, p, n, Method::Exact);
    }
    let mean = total / 2.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return (w, 1.0, n, Method::Normal);
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * (1.0 - normal.cdf(z))).clamp(0.0, 1.0);
    (w, p, n, Method::Normal)
}

/// Pairs `errors_a` and `errors_b` by window id and runs the test.
pub fn paired_test(
    system_a: &str,
    system_b: &str,
    split: &str,
    errors_a: &[(WindowId, f64)],
    errors_b: &[(WindowId, f64)],
) -> Result<SignificanceResult> {
    let a: BTreeMap<&WindowId, f64> = errors_a.iter().map(|(w, e)| (w, *e)).collect();
    let b: BTreeMap<&WindowId, f64> = errors_b.iter().map(|(w, e)| (w, *e)).collect();
    if a.len() != errors_a.len() || b.len() != errors_b.len() {
        return Err(Error::Pairing("duplicate window ids".into()));
    }
    if !a.keys().eq(b.keys()) {
        return Err(Error::Pairing(format!(
            "{system_a} and {system_b} were scored on different windows ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < MIN_PAIRS {
        return Err(Error::Pairing(format!("{} pairs, need at least {MIN_PAIRS}", a.len())));
    }
    let diffs: Vec<f64> = a.iter().map(|(w, ea)| ea - b[w]).collect();
    let (statistic, p_value, n_nonzero, method) = signed_rank(&diffs);
    Ok(SignificanceResult {
        system_a: system_a.into(),
        system_b: system_b.into(),
        split: split.into(),
        test: "wilcoxon-signed-rank".into(),
        statistic,
        p_value,
        n_pairs: a.len(),
        n_nonzero,
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ids(v: &[f64]) -> Vec<(WindowId, f64)> {
        v.iter().enumerate().map(|(i, e)| (WindowId::new("P", i), *e)).collect()
    }

    /// Brute-force two-sided p over all 2^n sign flips.
    fn enumerate_p(diffs: &[f64]) -> f64 {
        let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
        let r = ranks(&nz.iter().map(|d| d.abs()).collect::<Vec<_>>());
        let n = r.len();
        let total: f64 = r.iter().sum();
        let obs: f64 = r.iter().zip(&nz).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
        let w = obs.min(total - obs);
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let wp: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r[i]).sum();
            if wp <= w + 1e-9 {
                hits += 1;
            }
        }
        (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
    }

    #[test]
    fn all_one_sided_over_ten() {
        let b: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
        let a: Vec<f64> = b.iter().map(|x| x + 1.0).collect();
        let r = paired_test("A", "B", "validation", &ids(&a), &ids(&b)).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_relative_eq!(r.p_value, 2.0 / 1024.0);
        assert!(r.p_value < 0.01);
        assert_eq!(r.method, Method::Exact);
    }

    #[test]
    fn identical_errors_flag_no_difference() {
        let a = ids(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = paired_test("A", "B", "train", &a, &a).unwrap();
        assert_eq!((r.method, r.p_value), (Method::NoDifference, 1.0));
    }

    #[test]
    fn pairing_errors() {
        let five = ids(&[1.0; 5]);
        assert!(matches!(paired_test("A", "B", "t", &five, &five), Err(Error::Pairing(_))));
        let a = ids(&[1.0; 7]);
        let mut b = ids(&[1.0; 7]);
        b[0].0 = WindowId::new("Q", 0);
        assert!(matches!(paired_test("A", "B", "t", &a, &b), Err(Error::Pairing(_))));
    }

    #[test]
    fn known_textbook_value() {
        // n = 8 distinct ranks, W- = 3 (ranks 1 and 2 negative): P(W <= 3) = 5/256
        let d = [-1.0, -2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let (w, p, _, _) = signed_rank(&d);
        assert_eq!(w, 3.0);
        assert_relative_eq!(p, 10.0 / 256.0);
    }

    #[test]
    fn normal_approximation_close_to_exact_boundary() {
        let d: Vec<f64> = (1..=30).map(|i| if i % 4 == 0 { -(i as f64) } else { i as f64 }).collect();
        let (_, p, n, m) = signed_rank(&d);
        assert_eq!((n, m), (30, Method::Normal));
        assert!(p > 0.0 && p < 0.05, "{p}");
    }

    proptest! {
        #[test]
        fn exact_matches_enumeration(d in proptest::collection::vec(prop_oneof![-3i32..=3, -3i32..=3].prop_map(|v| v as f64), 6..14)) {
            let (_, p, _, _) = signed_rank(&d);
            prop_assert!((p - enumerate_p(&d)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn p_in_unit_interval(d in proptest::collection::vec(-50.0f64..50.0, 26..60)) {
            let (_, p, _, _) = signed_rank(&d);
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}
