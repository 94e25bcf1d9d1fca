//! Rank statistics and the paired randomization test used by sweeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side has zero variance or fewer
/// than two points.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n != ys.len() || n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with average-rank tie handling; `None` on
/// degenerate (constant) inputs.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// One-sided paired randomization test of `mean(a - b) > 0`: exact sign-flip
/// enumeration up to 20 pairs, seeded Monte Carlo beyond. Returns the p-value.
pub fn paired_permutation_pvalue(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n == 0 || n != b.len() {
        return None;
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let observed: f64 = diffs.iter().sum();
    if n <= 20 {
        let total = 1u64 << n;
        let mut at_least = 0u64;
        for mask in 0..total {
            let mut s = 0.0;
            for (bit, &d) in diffs.iter().enumerate() {
                s += if mask >> bit & 1 == 1 { -d } else { d };
            }
            if s >= observed - 1e-12 {
                at_least += 1;
            }
        }
        Some(at_least as f64 / total as f64)
    } else {
        const DRAWS: usize = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(0x7065726d);
        let mut at_least = 1usize; // the identity assignment
        for _ in 0..DRAWS {
            let mut s = 0.0;
            for &d in &diffs {
                s += if rng.gen_bool(0.5) { -d } else { d };
            }
            if s >= observed - 1e-12 {
                at_least += 1;
            }
        }
        Some(at_least as f64 / (DRAWS + 1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_perfect_monotone() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let up = [10.0, 20.0, 25.0, 90.0];
        let down = [5.0, 4.0, 3.0, -2.0];
        assert!((spearman(&xs, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &down).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_constant_is_undefined() {
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
    }

    #[test]
    fn ranks_average_ties() {
        let r = average_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn permutation_test_distinguishes_signal_from_noise() {
        // Consistent positive differences: smallest achievable p = 2^-n.
        let a = [1.0, 1.1, 0.9, 1.2, 1.05, 0.95, 1.0, 1.1];
        let b = [0.5, 0.4, 0.6, 0.5, 0.55, 0.45, 0.5, 0.4];
        let p = paired_permutation_pvalue(&a, &b).unwrap();
        assert!((p - 1.0 / 256.0).abs() < 1e-12, "p = {p}");

        // Symmetric differences: p should be large.
        let c = [1.0, 2.0, 3.0, 4.0];
        let d = [2.0, 1.0, 4.0, 3.0];
        let p = paired_permutation_pvalue(&c, &d).unwrap();
        assert!(p > 0.3, "p = {p}");
    }
}
