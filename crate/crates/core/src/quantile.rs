//! Empirical conformal quantiles: the split-CP quantile, the weighted
//! (localized) quantile, and the adjusted-level search that makes localized
//! quantiles meet the target coverage on calibration data.
//!
//! Thresholds are always observed scores (right-continuous empirical
//! quantiles); there is no interpolation. Cumulative-mass comparisons use a
//! slack of [`MASS_SLACK`] so that accumulated rounding can never skip an
//! exactly-attained rank; the slack is far below every tolerance stated on
//! the surrounding types.

use crate::error::{Error, Result};
use crate::num::{cmp_real, Real};
use crate::types::{ScoreVector, WeightVector};

/// Slack applied to `cumulative >= required` mass comparisons.
pub const MASS_SLACK: f64 = 1e-9;

/// A conformal threshold; `Infinite` means the requested rank exceeds the
/// calibration set and prediction must cover everything.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold<T> {
    Finite(T),
    Infinite,
}

impl<T: Real> Threshold<T> {
    pub fn is_finite(&self) -> bool {
        matches!(self, Threshold::Finite(_))
    }

    /// The finite value, or `+inf` for the sentinel.
    pub fn value(&self) -> T {
        match self {
            Threshold::Finite(t) => *t,
            Threshold::Infinite => T::infinity(),
        }
    }
}

/// Result of a quantile computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileResult<T> {
    pub threshold: Threshold<T>,
    /// Fraction of (weighted) mass at or below the threshold; 1.0 for the
    /// infinite sentinel.
    pub attained_mass: f64,
    /// Calibration index achieving the threshold, when finite.
    pub source_index: Option<usize>,
}

/// Result of the adjusted-level grid search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSearchResult {
    pub alpha_tilde: f64,
    /// Empirical calibration coverage at `alpha_tilde`.
    pub empirical_coverage: f64,
    /// Number of coverage evaluations performed.
    pub iterations: usize,
    /// False only when even `alpha_tilde = 0` misses the target coverage
    /// (possible only with leave-one-out anchors).
    pub satisfied: bool,
}

/// Split-CP quantile: the `ceil((1 - alpha) * (n + 1))`-th smallest score,
/// or the infinite sentinel when that rank exceeds `n`.
pub fn cp_quantile<T: Real>(scores: &ScoreVector<T>, alpha: f64) -> Result<QuantileResult<T>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha must lie in (0, 1)"));
    }
    let n = scores.len();
    // Nudge below by less than any representable rank gap so that an exactly
    // integral (1-alpha)(n+1) is never rounded up by fp error.
    let raw = (1.0 - alpha) * (n as f64 + 1.0);
    let rank = (raw - MASS_SLACK).ceil().max(1.0) as usize;
    if rank > n {
        return Ok(QuantileResult {
            threshold: Threshold::Infinite,
            attained_mass: 1.0,
            source_index: None,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cmp_real(&scores.values()[a], &scores.values()[b]).then(a.cmp(&b)));
    let source = order[rank - 1];
    let t = scores.values()[source];
    let at_or_below = scores.values().iter().filter(|&&v| v <= t).count();
    Ok(QuantileResult {
        threshold: Threshold::Finite(t),
        attained_mass: at_or_below as f64 / n as f64,
        source_index: Some(source),
    })
}

/// Weighted quantile: the smallest observed support score `t` with
/// `sum_j p_j 1[V_j <= t] >= 1 - alpha_tilde`.
///
/// Weights sum to one, so a finite threshold always exists; if rounding
/// leaves the final cumulative mass a hair short, the maximum support score
/// is returned.
pub fn weighted_quantile<T: Real>(
    scores: &ScoreVector<T>,
    weights: &WeightVector<T>,
    alpha_tilde: f64,
) -> Result<QuantileResult<T>> {
    if !(0.0..1.0).contains(&alpha_tilde) {
        return Err(Error::invalid("alpha_tilde must lie in [0, 1)"));
    }
    for &(idx, _) in weights.entries() {
        if idx >= scores.len() {
            return Err(Error::invalid(format!(
                "weight index {idx} out of range for {} scores",
                scores.len()
            )));
        }
    }
    let support = sorted_support(scores, weights);
    Ok(quantile_on_support(&support, 1.0 - alpha_tilde))
}

/// Support entry ordered by score: `(score, calibration index, cumulative
/// weight through this entry)`.
struct SupportEntry<T> {
    score: T,
    index: usize,
    cum: f64,
}

fn sorted_support<T: Real>(
    scores: &ScoreVector<T>,
    weights: &WeightVector<T>,
) -> Vec<SupportEntry<T>> {
    let mut items: Vec<(T, usize, f64)> = weights
        .entries()
        .iter()
        .map(|&(i, w)| (scores.values()[i], i, w.as_f64()))
        .collect();
    items.sort_by(|a, b| cmp_real(&a.0, &b.0).then(a.1.cmp(&b.1)));
    let mut cum = 0.0;
    items
        .into_iter()
        .map(|(score, index, w)| {
            cum += w;
            SupportEntry { score, index, cum }
        })
        .collect()
}

fn quantile_on_support<T: Real>(support: &[SupportEntry<T>], required: f64) -> QuantileResult<T> {
    debug_assert!(!support.is_empty());
    let pos = support.partition_point(|e| e.cum < required - MASS_SLACK);
    let pos = pos.min(support.len() - 1); // rounding shortfall: take the max score
    let entry = &support[pos];
    // Include the full tie group when reporting attained mass.
    let mut attained = entry.cum;
    for later in &support[pos + 1..] {
        if cmp_real(&later.score, &entry.score) == std::cmp::Ordering::Equal {
            attained = later.cum;
        } else {
            break;
        }
    }
    QuantileResult {
        threshold: Threshold::Finite(entry.score),
        attained_mass: attained,
        source_index: Some(entry.index),
    }
}

/// Precomputed per-anchor state for the adjusted-level search.
struct AnchorState<T> {
    support: Vec<SupportEntry<T>>,
    own_score: T,
}

impl<T: Real> AnchorState<T> {
    /// Whether the anchor's own score falls at or below its localized
    /// quantile at the given required mass.
    fn covered(&self, required: f64) -> bool {
        if self.support.is_empty() {
            return false; // leave-one-out anchor with no remaining support
        }
        let q = quantile_on_support(&self.support, required);
        self.own_score <= q.threshold.value()
    }
}

/// Finds the largest adjusted level `alpha_tilde` on the grid
/// `{0, 1/n, ..., (n-1)/n}` whose localized quantiles still cover at least
/// `1 - alpha` of the calibration scores.
///
/// Empirical coverage only changes at multiples of `1/n`, so the grid is
/// lossless, and coverage is non-increasing in `alpha_tilde`, so binary
/// search is exact. Returns `alpha_tilde = 0` (flagged unsatisfied) when no
/// grid point reaches the target.
///
/// `leave_one_out` drops each anchor's own weight (renormalizing the rest)
/// before computing its localized quantile.
pub fn ncp_alpha_search<T: Real>(
    scores: &ScoreVector<T>,
    weights_per_anchor: &[WeightVector<T>],
    alpha: f64,
    leave_one_out: bool,
) -> Result<AlphaSearchResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha must lie in (0, 1)"));
    }
    let n = scores.len();
    if weights_per_anchor.len() != n {
        return Err(Error::invalid(format!(
            "expected one weight vector per calibration example ({n}), got {}",
            weights_per_anchor.len()
        )));
    }
    let mut anchors = Vec::with_capacity(n);
    for (i, weights) in weights_per_anchor.iter().enumerate() {
        for &(idx, _) in weights.entries() {
            if idx >= n {
                return Err(Error::invalid(format!(
                    "anchor {i}: weight index {idx} out of range"
                )));
            }
        }
        let support = if leave_one_out {
            loo_support(scores, weights, i)
        } else {
            sorted_support(scores, weights)
        };
        anchors.push(AnchorState {
            support,
            own_score: scores.values()[i],
        });
    }

    let coverage_at = |alpha_tilde: f64| -> f64 {
        let required = 1.0 - alpha_tilde;
        let covered = anchors.iter().filter(|a| a.covered(required)).count();
        covered as f64 / n as f64
    };

    let mut iterations = 1;
    let floor_cov = coverage_at(0.0);
    if floor_cov < 1.0 - alpha {
        return Ok(AlphaSearchResult {
            alpha_tilde: 0.0,
            empirical_coverage: floor_cov,
            iterations,
            satisfied: false,
        });
    }
    // Largest grid index j in [0, n-1] with coverage(j/n) >= 1 - alpha.
    let (mut lo, mut hi) = (0usize, n - 1);
    let mut lo_cov = floor_cov;
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        let cov = coverage_at(mid as f64 / n as f64);
        iterations += 1;
        if cov >= 1.0 - alpha {
            lo = mid;
            lo_cov = cov;
        } else {
            hi = mid - 1;
        }
    }
    Ok(AlphaSearchResult {
        alpha_tilde: lo as f64 / n as f64,
        empirical_coverage: lo_cov,
        iterations,
        satisfied: true,
    })
}

fn loo_support<T: Real>(
    scores: &ScoreVector<T>,
    weights: &WeightVector<T>,
    anchor: usize,
) -> Vec<SupportEntry<T>> {
    let kept: Vec<(T, usize, f64)> = weights
        .entries()
        .iter()
        .filter(|&&(i, _)| i != anchor)
        .map(|&(i, w)| (scores.values()[i], i, w.as_f64()))
        .collect();
    let total: f64 = kept.iter().map(|(_, _, w)| w).sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let mut items = kept;
    items.sort_by(|a, b| cmp_real(&a.0, &b.0).then(a.1.cmp(&b.1)));
    let mut cum = 0.0;
    items
        .into_iter()
        .map(|(score, index, w)| {
            cum += w / total;
            SupportEntry { score, index, cum }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::{self, Domain};
    use crate::types::Anchor;
    use proptest::prelude::*;
    use rand::Rng;

    fn sv(values: &[f64]) -> ScoreVector<f64> {
        ScoreVector::new(values.to_vec()).unwrap()
    }

    fn uniform_weights(n: usize, anchor: Anchor) -> WeightVector<f64> {
        let w = 1.0 / n as f64;
        WeightVector::new(anchor, (0..n).map(|i| (i, w)).collect()).unwrap()
    }

    /// Independent oracle: try every observed support score as the
    /// threshold, summing the indicator in raw index order.
    fn brute_force_weighted_quantile(
        scores: &[f64],
        weights: &[(usize, f64)],
        alpha_tilde: f64,
    ) -> f64 {
        let mut candidates: Vec<f64> = weights.iter().map(|&(i, _)| scores[i]).collect();
        candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &t in &candidates {
            let mass: f64 = weights
                .iter()
                .map(|&(i, w)| if scores[i] <= t { w } else { 0.0 })
                .sum();
            if mass >= 1.0 - alpha_tilde {
                return t;
            }
        }
        *candidates.last().unwrap()
    }

    #[test]
    fn cp_quantile_nine_scores() {
        // ceil(0.9 * 10) = 9th smallest of {1..9} = 9.
        let scores = sv(&[5.0, 1.0, 9.0, 3.0, 7.0, 2.0, 8.0, 4.0, 6.0]);
        let q = cp_quantile(&scores, 0.1).unwrap();
        assert_eq!(q.threshold, Threshold::Finite(9.0));
        assert_eq!(q.attained_mass, 1.0);
        assert_eq!(q.source_index, Some(2));
    }

    #[test]
    fn cp_quantile_single_score() {
        let q = cp_quantile(&sv(&[4.25]), 0.5).unwrap();
        assert_eq!(q.threshold, Threshold::Finite(4.25));
    }

    #[test]
    fn cp_quantile_infinite_sentinel() {
        // ceil(0.99 * 4) = 4 > 3.
        let q = cp_quantile(&sv(&[1.0, 2.0, 3.0]), 0.01).unwrap();
        assert_eq!(q.threshold, Threshold::Infinite);
        assert_eq!(q.source_index, None);
    }

    #[test]
    fn cp_quantile_rejects_bad_alpha() {
        assert!(cp_quantile(&sv(&[1.0]), 0.0).is_err());
        assert!(cp_quantile(&sv(&[1.0]), 1.0).is_err());
    }

    #[test]
    fn weighted_quantile_uniform_cumulative_scan() {
        let scores = sv(&[1.0, 2.0, 3.0, 4.0]);
        let w = uniform_weights(4, Anchor::Test);
        let q = weighted_quantile(&scores, &w, 0.25).unwrap();
        assert_eq!(q.threshold, Threshold::Finite(3.0));
        assert!((q.attained_mass - 0.75).abs() < 1e-12);
    }

    #[test]
    fn weighted_quantile_point_mass() {
        let scores = sv(&[1.0, 2.0, 3.0]);
        let w = WeightVector::new(Anchor::Test, vec![(1, 1.0)]).unwrap();
        for alpha_tilde in [0.0, 0.3, 0.99] {
            let q = weighted_quantile(&scores, &w, alpha_tilde).unwrap();
            assert_eq!(q.threshold, Threshold::Finite(2.0));
        }
    }

    #[test]
    fn weighted_quantile_zero_alpha_takes_max_support() {
        let scores = sv(&[5.0, 1.0, 3.0]);
        let w = uniform_weights(3, Anchor::Test);
        let q = weighted_quantile(&scores, &w, 0.0).unwrap();
        assert_eq!(q.threshold, Threshold::Finite(5.0));
    }

    #[test]
    fn weighted_quantile_matches_brute_force_oracle() {
        let mut rng = seeding::rng(2024, Domain::Test, 0);
        for case in 0..1000 {
            let n = 1 + (rng.random::<u64>() % 50) as usize;
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
            let support: Vec<usize> = {
                let k = 1 + (rng.random::<u64>() as usize % n);
                let mut idx: Vec<usize> = (0..n).collect();
                for i in 0..k {
                    let j = i + (rng.random::<u64>() as usize % (n - i));
                    idx.swap(i, j);
                }
                idx.truncate(k);
                idx
            };
            let raw: Vec<f64> = support.iter().map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            let entries: Vec<(usize, f64)> = support
                .iter()
                .zip(raw.iter())
                .map(|(&i, &w)| (i, w / total))
                .collect();
            let alpha_tilde = rng.random::<f64>() * 0.999;
            let wv = WeightVector::new(Anchor::Test, entries.clone()).unwrap();
            let got = weighted_quantile(&sv(&scores), &wv, alpha_tilde).unwrap();
            let want = brute_force_weighted_quantile(&scores, &entries, alpha_tilde);
            assert_eq!(
                got.threshold,
                Threshold::Finite(want),
                "case {case}: n={n} alpha_tilde={alpha_tilde}"
            );
        }
    }

    #[test]
    fn uniform_weighted_quantile_reduces_to_cp() {
        let mut rng = seeding::rng(99, Domain::Test, 1);
        for _ in 0..200 {
            let n = 1 + (rng.random::<u64>() % 40) as usize;
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 5.0).collect();
            let alpha = 0.02 + rng.random::<f64>() * 0.9;
            let rank = ((1.0 - alpha) * (n as f64 + 1.0)).ceil();
            if rank as usize > n {
                continue; // sentinel case has no weighted analogue
            }
            let alpha_tilde = 1.0 - rank / n as f64;
            let cp = cp_quantile(&sv(&scores), alpha).unwrap();
            let wq =
                weighted_quantile(&sv(&scores), &uniform_weights(n, Anchor::Test), alpha_tilde)
                    .unwrap();
            assert_eq!(cp.threshold, wq.threshold);
        }
    }

    #[test]
    fn permuting_scores_leaves_thresholds_unchanged() {
        let scores = [3.0, 1.0, 4.0, 1.5, 9.0, 2.6];
        let perm = [4, 2, 0, 5, 1, 3];
        let permuted: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        for alpha in [0.1, 0.3, 0.5] {
            let a = cp_quantile(&sv(&scores), alpha).unwrap();
            let b = cp_quantile(&sv(&permuted), alpha).unwrap();
            assert_eq!(a.threshold, b.threshold);
        }
        let w_orig: Vec<(usize, f64)> = (0..6).map(|i| (i, [0.1, 0.2, 0.3, 0.1, 0.1, 0.2][i])).collect();
        let w_perm: Vec<(usize, f64)> = (0..6)
            .map(|j| (j, w_orig[perm[j]].1))
            .collect();
        for alpha_tilde in [0.0, 0.25, 0.6] {
            let a = weighted_quantile(
                &sv(&scores),
                &WeightVector::new(Anchor::Test, w_orig.clone()).unwrap(),
                alpha_tilde,
            )
            .unwrap();
            let b = weighted_quantile(
                &sv(&permuted),
                &WeightVector::new(Anchor::Test, w_perm.clone()).unwrap(),
                alpha_tilde,
            )
            .unwrap();
            assert_eq!(a.threshold, b.threshold);
        }
    }

    #[test]
    fn alpha_search_uniform_weights_matches_cp_within_grid_step() {
        let mut rng = seeding::rng(7, Domain::Test, 2);
        let n = 40;
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let weights: Vec<WeightVector<f64>> = (0..n)
            .map(|i| uniform_weights(n, Anchor::Calibration(i)))
            .collect();
        let alpha = 0.1;
        let res = ncp_alpha_search(&sv(&scores), &weights, alpha, false).unwrap();
        assert!(res.satisfied);
        let cp = cp_quantile(&sv(&scores), alpha).unwrap();
        let loc = weighted_quantile(
            &sv(&scores),
            &uniform_weights(n, Anchor::Test),
            res.alpha_tilde,
        )
        .unwrap();
        // Same threshold within one grid step of alpha_tilde.
        let next = weighted_quantile(
            &sv(&scores),
            &uniform_weights(n, Anchor::Test),
            (res.alpha_tilde - 1.0 / n as f64).max(0.0),
        )
        .unwrap();
        assert!(
            loc.threshold == cp.threshold || next.threshold == cp.threshold,
            "cp={:?} loc={:?} next={:?}",
            cp.threshold,
            loc.threshold,
            next.threshold
        );
    }

    #[test]
    fn alpha_search_identity_weights_returns_top_grid_point() {
        let n = 12;
        let scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let weights: Vec<WeightVector<f64>> = (0..n)
            .map(|i| WeightVector::new(Anchor::Calibration(i), vec![(i, 1.0)]).unwrap())
            .collect();
        let res = ncp_alpha_search(&sv(&scores), &weights, 0.1, false).unwrap();
        assert_eq!(res.alpha_tilde, (n - 1) as f64 / n as f64);
        assert_eq!(res.empirical_coverage, 1.0);
    }

    #[test]
    fn alpha_search_two_point_hand_enumeration() {
        // n=2, scores {1,2}, p1=(1,0), p2=(0.5,0.5), alpha=0.5.
        // Grid {0, 1/2}: at 0.5 anchor 1 keeps t=1 (covered), anchor 2 gets
        // t=1 (mass 0.5 suffices) and 2 <= 1 fails -> coverage 1/2 >= 1/2.
        let scores = sv(&[1.0, 2.0]);
        let weights = vec![
            WeightVector::new(Anchor::Calibration(0), vec![(0, 1.0)]).unwrap(),
            WeightVector::new(Anchor::Calibration(1), vec![(0, 0.5), (1, 0.5)]).unwrap(),
        ];
        let res = ncp_alpha_search(&scores, &weights, 0.5, false).unwrap();
        assert_eq!(res.alpha_tilde, 0.5);
        assert_eq!(res.empirical_coverage, 0.5);
        assert!(res.satisfied);
    }

    #[test]
    fn kernels_are_generic_over_f32() {
        let scores = ScoreVector::new(vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let q = cp_quantile(&scores, 0.25).unwrap();
        assert_eq!(q.threshold, Threshold::Finite(4.0f32));
        let w = WeightVector::new(Anchor::Test, vec![(0, 0.25f32), (1, 0.25), (2, 0.25), (3, 0.25)])
            .unwrap();
        let wq = weighted_quantile(&scores, &w, 0.25).unwrap();
        assert_eq!(wq.threshold, Threshold::Finite(3.0f32));
    }

    #[test]
    fn alpha_search_rejects_mismatched_lengths() {
        let scores = sv(&[1.0, 2.0]);
        let weights = vec![WeightVector::new(Anchor::Calibration(0), vec![(0, 1.0)]).unwrap()];
        assert!(ncp_alpha_search(&scores, &weights, 0.5, false).is_err());
    }

    #[test]
    fn leave_one_out_differs_from_self_inclusion() {
        // Identity weights: with self-inclusion every point covers itself at
        // any level; leave-one-out empties the support and nothing covers.
        let n = 5;
        let scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let weights: Vec<WeightVector<f64>> = (0..n)
            .map(|i| WeightVector::new(Anchor::Calibration(i), vec![(i, 1.0)]).unwrap())
            .collect();
        let inc = ncp_alpha_search(&sv(&scores), &weights, 0.2, false).unwrap();
        let loo = ncp_alpha_search(&sv(&scores), &weights, 0.2, true).unwrap();
        assert!(inc.satisfied);
        assert!(!loo.satisfied);
        assert_eq!(loo.alpha_tilde, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weighted_threshold_non_increasing_in_alpha_tilde(
            seed in 0u64..10_000,
            n in 1usize..30,
        ) {
            let mut rng = seeding::rng(seed, Domain::Test, 3);
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            let wv = WeightVector::new(
                Anchor::Test,
                raw.iter().enumerate().map(|(i, &w)| (i, w / total)).collect(),
            ).unwrap();
            let grid: Vec<f64> = (0..10).map(|j| j as f64 / 10.0).collect();
            let mut last = f64::INFINITY;
            for &a in &grid {
                let q = weighted_quantile(&sv(&scores), &wv, a).unwrap();
                let t = q.threshold.value();
                prop_assert!(t <= last + 1e-15);
                last = t;
            }
        }

        #[test]
        fn search_coverage_non_increasing_in_alpha_tilde(
            seed in 0u64..10_000,
            n in 2usize..25,
        ) {
            let mut rng = seeding::rng(seed, Domain::Test, 4);
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let sv = sv(&scores);
            let weights: Vec<WeightVector<f64>> = (0..n).map(|i| {
                let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
                let total: f64 = raw.iter().sum();
                WeightVector::new(
                    Anchor::Calibration(i),
                    raw.iter().enumerate().map(|(j, &w)| (j, w / total)).collect(),
                ).unwrap()
            }).collect();
            let mut last = f64::INFINITY;
            for j in 0..n {
                let alpha_tilde = j as f64 / n as f64;
                let covered = (0..n).filter(|&i| {
                    let q = weighted_quantile(&sv, &weights[i], alpha_tilde).unwrap();
                    scores[i] <= q.threshold.value()
                }).count() as f64 / n as f64;
                prop_assert!(covered <= last + 1e-15);
                last = covered;
            }
        }
    }
}
