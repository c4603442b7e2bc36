use serde::Serialize;

use crate::error::{Error, Result};

/// Largest effective sample size handled by the exact null distribution.
pub const EXACT_LIMIT: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WilcoxonResult {
    /// Rank sum of the positive differences.
    pub w: f64,
    pub n_effective: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Two-sided Wilcoxon signed-rank test on paired samples `(a_i, b_i)`.
///
/// Zero differences are dropped and tied magnitudes share mid-ranks. Up to
/// [`EXACT_LIMIT`] pairs the null distribution of `W` over all `2^n` sign
/// assignments is counted exactly; beyond that a normal approximation with
/// continuity and tie corrections is used.
pub fn wilcoxon_exact(pairs: &[(f64, f64)]) -> Result<WilcoxonResult> {
    if pairs.is_empty() {
        return Err(Error::Empty("paired samples"));
    }
    let diffs: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument(
            "paired samples must be finite".into(),
        ));
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            w: 0.0,
            n_effective: 0,
            p_value: 1.0,
            exact: true,
        });
    }
    let doubled = doubled_mid_ranks(&diffs);
    let w2: u64 = diffs
        .iter()
        .zip(&doubled)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let w = w2 as f64 / 2.0;
    if n <= EXACT_LIMIT {
        let (le, ge, total) = tail_counts(&doubled, w2);
        Ok(WilcoxonResult {
            w,
            n_effective: n,
            p_value: two_sided(le, ge, total),
            exact: true,
        })
    } else {
        Ok(WilcoxonResult {
            w,
            n_effective: n,
            p_value: normal_p_value(&doubled, w),
            exact: false,
        })
    }
}

fn normal_p_value(doubled: &[u64], w: f64) -> f64 {
    let nf = doubled.len() as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let ties = tie_correction(doubled);
    let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0).sqrt();
    let z = ((w - mean).abs() - 0.5).max(0.0) / sd;
    libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// `p = min(1, 2 min(P(W <= w), P(W >= w)))` from integer tail counts.
pub(crate) fn two_sided(le: u64, ge: u64, total: u64) -> f64 {
    ((2 * le.min(ge)) as f64 / total as f64).min(1.0)
}

/// Twice the mid-ranks of `|d|`, so tied ranks stay integral.
pub(crate) fn doubled_mid_ranks(diffs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().total_cmp(&diffs[b].abs()));
    let mut ranks = vec![0; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // positions i..=j hold ranks i+1..=j+1; twice their mean is i+j+2
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

fn tie_correction(doubled: &[u64]) -> f64 {
    let mut sorted = doubled.to_vec();
    sorted.sort_unstable();
    sorted
        .chunk_by(|a, b| a == b)
        .map(|g| {
            let t = g.len() as f64;
            t * t * t - t
        })
        .sum()
}

/// Numbers of sign assignments whose doubled positive rank sum is `<= w2`
/// and `>= w2`, and the total `2^n`. Counts subset sums by dynamic
/// programming.
fn tail_counts(doubled: &[u64], w2: u64) -> (u64, u64, u64) {
    let max: u64 = doubled.iter().sum();
    let mut counts = vec![0u64; max as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            let c = counts[s];
            if c > 0 {
                counts[s + r] += c;
            }
        }
        reach += r;
    }
    let le = counts[..=w2 as usize].iter().sum();
    let ge = counts[w2 as usize..].iter().sum();
    (le, ge, 1u64 << doubled.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Walks all `2^n` sign assignments directly.
    fn brute_force(doubled: &[u64], w2: u64) -> (u64, u64, u64) {
        let n = doubled.len();
        let (mut le, mut ge) = (0, 0);
        for mask in 0u64..(1 << n) {
            let s: u64 = (0..n)
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| doubled[i])
                .sum();
            le += u64::from(s <= w2);
            ge += u64::from(s >= w2);
        }
        (le, ge, 1 << n)
    }

    fn signed_pairs(signed_ranks: &[i64]) -> Vec<(f64, f64)> {
        signed_ranks.iter().map(|&r| (r as f64, 0.0)).collect()
    }

    #[test]
    fn all_positive_five() {
        let r =
            wilcoxon_exact(&[(5.0, 1.0), (3.0, 2.5), (9.0, 1.0), (4.0, 3.9), (2.0, 0.0)]).unwrap();
        assert_eq!(r.w, 15.0);
        assert_eq!(r.n_effective, 5);
        assert_eq!(r.p_value, 2.0 / 32.0);
        assert_eq!(r.p_value, 0.0625);
    }

    #[test]
    fn six_with_one_negative() {
        let r = wilcoxon_exact(&signed_pairs(&[1, 2, 3, 4, 5, -6])).unwrap();
        assert_eq!(r.w, 15.0);
        let (le, ge, total) = brute_force(&[2, 4, 6, 8, 10, 12], 30);
        assert_eq!(r.p_value, two_sided(le, ge, total));
        // a subset of {1..6} sums to >= 15 iff its complement sums to <= 6:
        // the empty set, 6 singletons, 6 pairs and {1,2,3}
        assert_eq!(ge, 14);
        assert_eq!(r.p_value, 28.0 / 64.0);
    }

    #[test]
    fn identical_pairs_are_degenerate() {
        let r = wilcoxon_exact(&[(0.5, 0.5), (0.7, 0.7)]).unwrap();
        assert_eq!((r.p_value, r.n_effective, r.w), (1.0, 0, 0.0));
        assert!(wilcoxon_exact(&[]).is_err());
    }

    #[test]
    fn zero_differences_are_dropped_and_ties_share_ranks() {
        let r = wilcoxon_exact(&[(1.0, 1.0), (2.0, 1.0), (0.0, 1.0), (3.0, 1.0)]).unwrap();
        assert_eq!(r.n_effective, 3);
        // |d| = 1, 1, 2 -> ranks 1.5, 1.5, 3; positives are +1 and +2
        assert_eq!(r.w, 4.5);
        assert_eq!(doubled_mid_ranks(&[1.0, -1.0, 2.0]), vec![3, 3, 6]);
    }

    #[test]
    fn exact_matches_brute_force_for_every_sign_pattern_up_to_eight() {
        for n in 1..=8usize {
            for mask in 0u32..(1 << n) {
                let ranks: Vec<i64> = (0..n)
                    .map(|i| {
                        if mask >> i & 1 == 1 {
                            i as i64 + 1
                        } else {
                            -(i as i64 + 1)
                        }
                    })
                    .collect();
                let r = wilcoxon_exact(&signed_pairs(&ranks)).unwrap();
                let doubled: Vec<u64> = (1..=n as u64).map(|k| 2 * k).collect();
                let (le, ge, total) = brute_force(&doubled, (2.0 * r.w) as u64);
                assert_eq!(r.p_value, two_sided(le, ge, total), "n={n} mask={mask:b}");
            }
        }
    }

    #[test]
    fn exact_matches_brute_force_with_ties() {
        let pairs = [
            (1.0, 0.0),
            (-1.0, 0.0),
            (2.0, 0.0),
            (2.0, 0.0),
            (-2.0, 0.0),
            (3.5, 0.0),
            (-0.5, 0.0),
        ];
        let r = wilcoxon_exact(&pairs).unwrap();
        let diffs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let (le, ge, total) = brute_force(&doubled_mid_ranks(&diffs), (2.0 * r.w) as u64);
        assert_eq!(r.p_value, two_sided(le, ge, total));
    }

    #[test]
    fn normal_approximation_is_close_to_exact_at_the_boundary() {
        let diffs: Vec<f64> = (1..=25)
            .map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 })
            .collect();
        let pairs: Vec<(f64, f64)> = diffs.iter().map(|&d| (d, 0.0)).collect();
        let exact = wilcoxon_exact(&pairs).unwrap();
        let approx = normal_p_value(&doubled_mid_ranks(&diffs), exact.w);
        assert!(exact.exact);
        assert!((exact.p_value - approx).abs() < 0.01);

        let mut more = pairs.clone();
        more.push((26.0, 0.0));
        let r = wilcoxon_exact(&more).unwrap();
        assert!(!r.exact && r.p_value > 0.0 && r.p_value <= 1.0);
    }
}
