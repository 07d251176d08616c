//! Empirical estimators for the clustering/concentration theory behind
//! localized calibration: silhouette quality, separation and concentration
//! plug-ins, and the expected-threshold comparison between localized and
//! split conformal calibration.
//!
//! These are diagnostics, not certificates: the definitions quantify over
//! population distributions and all thresholds, which finite samples cannot
//! verify. Estimates are reported at one user-chosen threshold (default:
//! the split-CP threshold).

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::engine::{CalibratedModel, Method};
use crate::error::{Error, Result};
use crate::localizer::weights_for_anchor;
use crate::num::{dist, dist_sq, Real};
use crate::quantile::{weighted_quantile, Threshold};
use crate::seeding::{self, Domain};
use crate::types::{Anchor, LabeledExample};

/// Cap on points entering the O(n^2) silhouette computation.
pub const SILHOUETTE_SAMPLE_CAP: usize = 2000;

/// Empirical estimates of the quantities in the efficiency theory, plus the
/// threshold comparison itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryDiagnostics {
    pub silhouette: f64,
    /// Estimated non-robust mass, max over classes.
    pub mu_hat: f64,
    /// Estimated concentration ratio, min over classes.
    pub sigma_hat: f64,
    /// True when some class had a zero denominator (sigma_hat is then a
    /// partial estimate or NaN).
    pub sigma_degenerate: bool,
    /// Empirical minimum class frequency.
    pub p_class_min: f64,
    /// `(1 - mu_hat) * sigma_hat`.
    pub assumption_lhs: f64,
    /// `(1 - alpha) / (1 - alpha (2 - p_class_min))`.
    pub assumption_rhs: f64,
    pub assumption_holds: bool,
    /// Mean over test points of the localized threshold at the frozen
    /// adjusted level.
    pub mean_ncp_threshold: f64,
    pub cp_threshold: f64,
    pub ncp_le_cp: bool,
    /// Ball radius used for the robust-set estimates.
    pub ball_radius: f64,
    /// Threshold at which concentration was estimated.
    pub threshold_t: f64,
}

/// Mean silhouette coefficient `(b - a) / max(a, b)` over (sub)sampled
/// points: `a` is the mean intra-class distance, `b` the smallest
/// other-class mean distance. Points in singleton classes contribute zero.
/// Subsampling beyond `sample_cap` is deterministic per seed.
pub fn silhouette<T: Real>(
    embeddings: &[&[T]],
    labels: &[usize],
    sample_cap: usize,
    seed: u64,
) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::invalid("embeddings and labels must align"));
    }
    if embeddings.is_empty() {
        return Err(Error::invalid("empty silhouette input"));
    }
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid("silhouette needs at least 2 classes"));
    }
    let cap = sample_cap.max(2);
    let sample: Vec<usize> = if embeddings.len() > cap {
        let mut idx: Vec<usize> = (0..embeddings.len()).collect();
        let mut rng = seeding::rng(seed, Domain::Diagnostics, 1);
        idx.shuffle(&mut rng);
        idx.truncate(cap);
        idx.sort_unstable();
        idx
    } else {
        (0..embeddings.len()).collect()
    };
    let classes = distinct.len();
    let class_of = |i: usize| distinct.binary_search(&labels[i]).expect("seen label");

    let scores: Vec<f64> = sample
        .par_iter()
        .map(|&i| {
            let mut sums = vec![0.0f64; classes];
            let mut counts = vec![0usize; classes];
            for &j in &sample {
                if i == j {
                    continue;
                }
                let c = class_of(j);
                sums[c] += dist(embeddings[i], embeddings[j]).as_f64();
                counts[c] += 1;
            }
            let own = class_of(i);
            if counts[own] == 0 {
                return 0.0; // singleton class in the sample
            }
            let a = sums[own] / counts[own] as f64;
            let b = (0..classes)
                .filter(|&c| c != own && counts[c] > 0)
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                return 0.0;
            }
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Estimated non-robust mass: the max over classes of the fraction of
/// class points with some other-class point within `2B` (intersecting
/// balls of radius `B`).
pub fn estimate_separation<T: Real>(
    embeddings: &[&[T]],
    labels: &[usize],
    ball_radius: f64,
) -> Result<f64> {
    if !ball_radius.is_finite() || ball_radius < 0.0 {
        return Err(Error::invalid("ball radius must be finite and >= 0"));
    }
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::invalid("embeddings and labels must align and be non-empty"));
    }
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let threshold_sq = T::of(4.0 * ball_radius * ball_radius);
    let mut worst: f64 = 0.0;
    for &class in &distinct {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            return Err(Error::invalid("empty class"));
        }
        let non_robust = members
            .par_iter()
            .filter(|&&i| {
                (0..labels.len()).any(|j| {
                    labels[j] != class && dist_sq(embeddings[i], embeddings[j]) <= threshold_sq
                })
            })
            .count();
        worst = worst.max(non_robust as f64 / members.len() as f64);
    }
    Ok(worst)
}

/// Indices of empirically robust points: no other-class point within `2B`.
fn robust_mask<T: Real>(embeddings: &[&[T]], labels: &[usize], ball_radius: f64) -> Vec<bool> {
    let threshold_sq = T::of(4.0 * ball_radius * ball_radius);
    (0..labels.len())
        .into_par_iter()
        .map(|i| {
            !(0..labels.len()).any(|j| {
                labels[j] != labels[i] && dist_sq(embeddings[i], embeddings[j]) <= threshold_sq
            })
        })
        .collect()
}

/// Plug-in concentration estimate at threshold `t`: per class, the ratio of
/// the neighborhood-conditional low-score rate `P{V <= t | neighbor of x}`
/// to the class-conditional rate `P{V <= t | class c}`, averaged over
/// empirically robust anchors; the reported value is the min over classes.
///
/// Neighborhoods use the intersecting-balls criterion (distance at most
/// `2B`) and exclude the anchor itself. Classes with no robust anchors fall
/// back to all their members; zero denominators, empty neighborhoods, and
/// that fallback all raise the degeneracy flag. When nothing is estimable
/// the value is NaN with the flag set.
pub fn estimate_concentration<T: Real>(
    embeddings: &[&[T]],
    labels: &[usize],
    scores: &[T],
    ball_radius: f64,
    t: f64,
) -> Result<(f64, bool)> {
    let n = labels.len();
    if embeddings.len() != n || scores.len() != n || n == 0 {
        return Err(Error::invalid("embeddings, labels, and scores must align"));
    }
    if !ball_radius.is_finite() || ball_radius < 0.0 {
        return Err(Error::invalid("ball radius must be finite and >= 0"));
    }
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let robust = robust_mask(embeddings, labels, ball_radius);
    let t_scalar = T::of(t);
    let below: Vec<bool> = scores.iter().map(|&v| v <= t_scalar).collect();
    let neighbor_sq = T::of(4.0 * ball_radius * ball_radius);

    let mut min_sigma = f64::INFINITY;
    let mut degenerate = false;
    for &class in &distinct {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        let below_in_class = members.iter().filter(|&&i| below[i]).count();
        let denom = below_in_class as f64 / members.len() as f64;
        if denom == 0.0 {
            degenerate = true;
            continue;
        }
        let mut anchors: Vec<usize> = members.iter().copied().filter(|&i| robust[i]).collect();
        if anchors.is_empty() {
            degenerate = true;
            anchors = members.clone();
        }
        let ratios: Vec<f64> = anchors
            .par_iter()
            .filter_map(|&a| {
                let mut neighbors = 0usize;
                let mut low = 0usize;
                for j in 0..n {
                    if j != a && dist_sq(embeddings[a], embeddings[j]) <= neighbor_sq {
                        neighbors += 1;
                        if below[j] {
                            low += 1;
                        }
                    }
                }
                if neighbors == 0 {
                    None // anchor with no neighbors
                } else {
                    Some((low as f64 / neighbors as f64) / denom)
                }
            })
            .collect();
        if ratios.len() < anchors.len() {
            degenerate = true;
        }
        if ratios.is_empty() {
            continue;
        }
        let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
        min_sigma = min_sigma.min(mean_ratio);
    }
    if !min_sigma.is_finite() {
        return Ok((f64::NAN, true));
    }
    Ok((min_sigma, degenerate))
}

/// Default ball radius: the median nearest-neighbor distance.
pub fn default_ball_radius<T: Real>(embeddings: &[&[T]]) -> f64 {
    let n = embeddings.len();
    if n < 2 {
        return 0.0;
    }
    let mut nn: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| dist_sq(embeddings[i], embeddings[j]).as_f64())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    nn.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nn[n / 2]
}

/// Compares localized and split thresholds on a test slice and reports the
/// theory plug-ins alongside.
///
/// Both models must share calibration data, score configuration, and
/// target level. `ball_radius` of `None` uses the median nearest-neighbor
/// distance; `threshold_t` of `None` evaluates concentration at the CP
/// threshold.
pub fn theorem1_check<T: Real>(
    cp_model: &CalibratedModel<T>,
    ncp_model: &CalibratedModel<T>,
    calibration: &[&LabeledExample<T>],
    test: &[&LabeledExample<T>],
    ball_radius: Option<f64>,
    threshold_t: Option<f64>,
) -> Result<TheoryDiagnostics> {
    if cp_model.method != Method::Cp || ncp_model.method != Method::Ncp {
        return Err(Error::invalid("theorem check needs one CP and one NCP model"));
    }
    if cp_model.alpha != ncp_model.alpha {
        return Err(Error::invalid("models must share alpha"));
    }
    if test.is_empty() || calibration.is_empty() {
        return Err(Error::invalid("empty calibration or test slice"));
    }
    let scores = ncp_model
        .scores
        .as_ref()
        .ok_or_else(|| Error::invalid("NCP model missing scores"))?;
    if scores.len() != calibration.len() {
        return Err(Error::invalid(
            "calibration slice does not match the model's score vector",
        ));
    }
    let index = ncp_model
        .index
        .as_ref()
        .ok_or_else(|| Error::invalid("NCP model missing index"))?;
    let localizer = ncp_model
        .localizer_config
        .as_ref()
        .ok_or_else(|| Error::invalid("NCP model missing localizer config"))?;
    let alpha_tilde = ncp_model
        .alpha_tilde
        .ok_or_else(|| Error::invalid("NCP model missing adjusted level"))?;

    let embeddings: Vec<&[T]> = calibration.iter().map(|e| e.embedding.as_slice()).collect();
    let labels: Vec<usize> = calibration
        .iter()
        .map(|e| e.class_label())
        .collect::<Result<Vec<_>>>()?;

    let cp_threshold = cp_model
        .cp_threshold
        .ok_or_else(|| Error::invalid("CP model missing threshold"))?;
    let cp_t = match cp_threshold {
        Threshold::Finite(v) => v.as_f64(),
        Threshold::Infinite => f64::INFINITY,
    };

    let thresholds: Vec<f64> = test
        .par_iter()
        .map(|ex| -> Result<f64> {
            let (weights, _) =
                weights_for_anchor(index, ex.embedding.as_slice(), Anchor::Test, localizer)?;
            let q = weighted_quantile(scores, &weights, alpha_tilde)?;
            Ok(q.threshold.value().as_f64())
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_ncp_threshold = thresholds.iter().sum::<f64>() / thresholds.len() as f64;

    let radius = match ball_radius {
        Some(b) => b,
        None => default_ball_radius(&embeddings),
    };
    let t = threshold_t.unwrap_or(cp_t);
    let sil = silhouette(&embeddings, &labels, SILHOUETTE_SAMPLE_CAP, localizer.seed)?;
    let mu_hat = estimate_separation(&embeddings, &labels, radius)?;
    let (sigma_hat, sigma_degenerate) =
        estimate_concentration(&embeddings, &labels, scores.values(), radius, t)?;

    let mut class_counts = std::collections::BTreeMap::new();
    for &label in &labels {
        *class_counts.entry(label).or_insert(0usize) += 1;
    }
    let p_class_min = class_counts
        .values()
        .map(|&c| c as f64 / labels.len() as f64)
        .fold(f64::INFINITY, f64::min);

    let alpha = cp_model.alpha;
    let assumption_lhs = (1.0 - mu_hat) * sigma_hat;
    let assumption_rhs = (1.0 - alpha) / (1.0 - alpha * (2.0 - p_class_min));

    Ok(TheoryDiagnostics {
        silhouette: sil,
        mu_hat,
        sigma_hat,
        sigma_degenerate,
        p_class_min,
        assumption_lhs,
        assumption_rhs,
        assumption_holds: assumption_lhs >= assumption_rhs,
        mean_ncp_threshold,
        cp_threshold: cp_t,
        ncp_le_cp: mean_ncp_threshold <= cp_t,
        ball_radius: radius,
        threshold_t: t,
    })
}

impl TheoryDiagnostics {
    /// Key=value lines, one per field.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("silhouette={:.6}\n", self.silhouette));
        out.push_str(&format!("mu_hat={:.6}\n", self.mu_hat));
        out.push_str(&format!("sigma_hat={:.6}\n", self.sigma_hat));
        out.push_str(&format!("sigma_degenerate={}\n", self.sigma_degenerate));
        out.push_str(&format!("p_class_min={:.6}\n", self.p_class_min));
        out.push_str(&format!("assumption_lhs={:.6}\n", self.assumption_lhs));
        out.push_str(&format!("assumption_rhs={:.6}\n", self.assumption_rhs));
        out.push_str(&format!("assumption_holds={}\n", self.assumption_holds));
        out.push_str(&format!("mean_ncp_threshold={:.6}\n", self.mean_ncp_threshold));
        out.push_str(&format!("cp_threshold={:.6}\n", self.cp_threshold));
        out.push_str(&format!("ncp_le_cp={}\n", self.ncp_le_cp));
        out.push_str(&format!("ball_radius={:.6}\n", self.ball_radius));
        out.push_str(&format!("threshold_t={:.6}\n", self.threshold_t));
        out
    }

    /// Rows for the `metric,mean,std,trials` CSV convention.
    pub fn to_metric_rows(&self) -> Vec<(String, f64, f64, usize)> {
        vec![
            ("silhouette".into(), self.silhouette, 0.0, 1),
            ("mu_hat".into(), self.mu_hat, 0.0, 1),
            ("sigma_hat".into(), self.sigma_hat, 0.0, 1),
            ("p_class_min".into(), self.p_class_min, 0.0, 1),
            ("assumption_lhs".into(), self.assumption_lhs, 0.0, 1),
            ("assumption_rhs".into(), self.assumption_rhs, 0.0, 1),
            ("mean_ncp_threshold".into(), self.mean_ncp_threshold, 0.0, 1),
            ("cp_threshold".into(), self.cp_threshold, 0.0, 1),
            ("ball_radius".into(), self.ball_radius, 0.0, 1),
            ("threshold_t".into(), self.threshold_t, 0.0, 1),
        ]
    }
}
