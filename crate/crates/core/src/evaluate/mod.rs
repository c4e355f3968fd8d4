//! Inference over whole volumes and the measurement suite: score curves,
//! threshold calibration, zone classification, ordering metrics, histograms
//! and correlation-based anomaly flags.

mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Result, UbrError};
use crate::network::{forward, ModelParams};
use crate::phantom::Volume;

pub use report::{
    read_anomaly_reports, read_score_curves, read_thresholds, write_anomaly_reports, write_classifications, write_histogram,
    write_score_curves, write_thresholds, write_volume_metrics,
};

/// Flag threshold on the per-volume correlation of score against slice index.
pub const DEFAULT_THRESHOLD_R: f64 = 0.99;

/// Least-squares fit of `y` against `x` with Pearson correlation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub pearson_r: f64,
    pub slope: f64,
    pub intercept: f64,
    /// Zero variance in `x` or `y`; `pearson_r` is then reported as 0.
    pub degenerate: bool,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> LineFit {
    assert_eq!(x.len(), y.len(), "fit_line needs paired samples");
    let n = x.len() as f64;
    if x.is_empty() {
        return LineFit {
            pearson_r: 0.0,
            slope: 0.0,
            intercept: 0.0,
            degenerate: true,
        };
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    let degenerate = constant(x) || constant(y) || !(sxx > 0.0 && syy > 0.0);
    let slope = if sxx > 0.0 && !constant(x) { sxy / sxx } else { 0.0 };
    let pearson_r = if degenerate { 0.0 } else { (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0) };
    LineFit {
        pearson_r,
        slope,
        intercept: my - slope * mx,
        degenerate,
    }
}

/// Per-slice scores of one volume against slice index.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCurve {
    pub volume_id: String,
    pub scores: Vec<f64>,
    pub fit: LineFit,
}

impl ScoreCurve {
    pub fn new(volume_id: impl Into<String>, scores: Vec<f64>) -> Self {
        let index: Vec<f64> = (0..scores.len()).map(|i| i as f64).collect();
        let fit = fit_line(&index, &scores);
        ScoreCurve {
            volume_id: volume_id.into(),
            scores,
            fit,
        }
    }

    pub fn points(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.scores.iter().copied().enumerate()
    }

    pub fn pearson_r(&self) -> f64 {
        self.fit.pearson_r
    }
}

fn volume_batch(volume: &Volume) -> Result<Tensor> {
    if volume.is_empty() {
        return Err(UbrError::InvalidArgument(format!("volume `{}` has no slices", volume.id)));
    }
    Tensor::new(vec![volume.len(), 1, volume.height, volume.width], volume.slices.clone())
}

pub fn score_volume(params: &ModelParams, volume: &Volume) -> Result<ScoreCurve> {
    let out = forward(params, &volume_batch(volume)?)?;
    Ok(ScoreCurve::new(volume.id.clone(), out.scores.into_data()))
}

/// Pooled Conv6 features, `[n, conv6_channels]`.
pub fn extract_features(params: &ModelParams, volume: &Volume) -> Result<Tensor> {
    Ok(forward(params, &volume_batch(volume)?)?.pooled)
}

/// Class 0 below `t1`, class 1 on `[t1, t2)`, class 2 from `t2` up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub t1: f64,
    pub t2: f64,
}

impl Thresholds {
    pub fn new(t1: f64, t2: f64) -> Result<Self> {
        if !(t1.is_finite() && t2.is_finite() && t1 < t2) {
            return Err(UbrError::InvalidArgument(format!("thresholds need finite t1 < t2, got {t1}, {t2}")));
        }
        Ok(Thresholds { t1, t2 })
    }

    pub fn classify(&self, score: f64) -> u8 {
        if score < self.t1 {
            0
        } else if score < self.t2 {
            1
        } else {
            2
        }
    }

    /// Distance from `score` to the nearer threshold.
    pub fn distance(&self, score: f64) -> f64 {
        (score - self.t1).abs().min((score - self.t2).abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub thresholds: Thresholds,
    /// Accuracy on the calibration slices.
    pub accuracy: f64,
}

/// Exhaustive scan over cut points between adjacent distinct scores, plus
/// one below and one above the range; both cuts may share a gap. The most
/// accurate pair wins. Ties go to the pair with the widest score gaps around
/// the cuts, then to the lowest.
pub fn calibrate_thresholds(scores: &[f64], labels: &[u8]) -> Result<Calibration> {
    if scores.len() != labels.len() {
        return Err(UbrError::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c > 2) {
        return Err(UbrError::InvalidArgument(format!("class label {bad} is not 0, 1 or 2")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(UbrError::InvalidArgument("calibration scores must be finite".into()));
    }
    for class in 0..3u8 {
        if !labels.contains(&class) {
            return Err(UbrError::MissingClass(class));
        }
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Group equal scores; a cut can only fall between groups.
    let mut groups: Vec<(f64, [usize; 3])> = Vec::new();
    for &i in &order {
        match groups.last_mut() {
            Some((s, counts)) if *s == scores[i] => counts[labels[i] as usize] += 1,
            _ => {
                let mut counts = [0; 3];
                counts[labels[i] as usize] = 1;
                groups.push((scores[i], counts));
            }
        }
    }
    let (lo, hi) = (groups[0].0, groups[groups.len() - 1].0);
    let margin = if hi > lo { 0.5 * (hi - lo) } else { 0.5 };
    // Cut c lies between bounds[c] and bounds[c + 1]: the group scores padded
    // with one virtual value beyond each end.
    let mut bounds = Vec::with_capacity(groups.len() + 2);
    bounds.push(lo - 2.0 * margin);
    bounds.extend(groups.iter().map(|g| g.0));
    bounds.push(hi + 2.0 * margin);
    let n_cuts = groups.len() + 1;
    let gap = |c: usize| if c == 0 || c == n_cuts - 1 { 0.0 } else { bounds[c + 1] - bounds[c] };
    // prefix[c] counts classes in the groups below cut c.
    let mut prefix = vec![[0usize; 3]; n_cuts];
    for (c, (_, counts)) in groups.iter().enumerate() {
        for k in 0..3 {
            prefix[c + 1][k] = prefix[c][k] + counts[k];
        }
    }
    let total2 = prefix[n_cuts - 1][2];
    let tol = 1e-9 * (hi - lo).max(f64::MIN_POSITIVE);
    let mut best: Option<(usize, f64, usize, usize)> = None;
    for a in 0..n_cuts {
        // a == b leaves the middle zone empty.
        for b in a..n_cuts {
            let correct = prefix[a][0] + (prefix[b][1] - prefix[a][1]) + (total2 - prefix[b][2]);
            let width = gap(a) + gap(b);
            let better = match best {
                None => true,
                Some((bc, bw, _, _)) => correct > bc || (correct == bc && width > bw + tol),
            };
            if better {
                best = Some((correct, width, a, b));
            }
        }
    }
    let (correct, _, a, b) = best.expect("at least one cut");
    let (t1, t2) = if a == b {
        let (l, u) = (bounds[a], bounds[a + 1]);
        (l + (u - l) / 3.0, l + 2.0 * (u - l) / 3.0)
    } else {
        (0.5 * (bounds[a] + bounds[a + 1]), 0.5 * (bounds[b] + bounds[b + 1]))
    };
    Ok(Calibration {
        thresholds: Thresholds::new(t1, t2)?,
        accuracy: correct as f64 / scores.len() as f64,
    })
}

pub fn classify_slices(scores: &[f64], thresholds: &Thresholds) -> Vec<u8> {
    scores.iter().map(|&s| thresholds.classify(s)).collect()
}

/// Exact-match fraction.
pub fn accuracy(predicted: &[u8], truth: &[u8]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(UbrError::InvalidArgument(format!(
            "accuracy needs equal non-empty label lists, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport {
    pub volume_id: String,
    pub pearson_r: f64,
    pub threshold_r: f64,
    pub flagged: bool,
    /// Sign of the fitted slope: −1, 0 or 1.
    pub direction: i8,
}

impl AnomalyReport {
    pub fn from_curve(curve: &ScoreCurve, threshold_r: f64) -> Self {
        let slope = curve.fit.slope;
        AnomalyReport {
            volume_id: curve.volume_id.clone(),
            pearson_r: curve.fit.pearson_r,
            threshold_r,
            flagged: curve.fit.pearson_r < threshold_r,
            direction: if slope > 0.0 {
                1
            } else if slope < 0.0 {
                -1
            } else {
                0
            },
        }
    }
}

/// One report per curve, sorted ascending by `r` (ties by volume id).
pub fn anomaly_reports(curves: &[ScoreCurve], threshold_r: f64) -> Vec<AnomalyReport> {
    let mut reports: Vec<AnomalyReport> = curves.iter().map(|c| AnomalyReport::from_curve(c, threshold_r)).collect();
    reports.sort_by(|a, b| a.pearson_r.total_cmp(&b.pearson_r).then_with(|| a.volume_id.cmp(&b.volume_id)));
    reports
}

pub fn detect_anomalies(params: &ModelParams, volumes: &[Volume], threshold_r: f64) -> Result<Vec<AnomalyReport>> {
    let curves = volumes.iter().map(|v| score_volume(params, v)).collect::<Result<Vec<_>>>()?;
    Ok(anomaly_reports(&curves, threshold_r))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderingMetrics {
    /// Fraction of pairs with distinct latents whose scores are strictly
    /// ordered the same way.
    pub pairwise_accuracy: f64,
    pub spearman: f64,
    /// Squared Pearson correlation of score against latent.
    pub r_squared: f64,
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = 0.5 * (i + j) as f64 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fit_line(&average_ranks(x), &average_ranks(y)).pearson_r
}

pub fn ordering_metrics(scores: &[f64], latent: &[f64]) -> Result<OrderingMetrics> {
    if scores.len() != latent.len() || scores.len() < 2 {
        return Err(UbrError::InvalidArgument(format!(
            "ordering metrics need ≥ 2 paired values, got {} scores and {} latents",
            scores.len(),
            latent.len()
        )));
    }
    let (mut agree, mut pairs) = (0usize, 0usize);
    for i in 0..scores.len() {
        for j in i + 1..scores.len() {
            let dz = latent[j] - latent[i];
            if dz == 0.0 {
                continue;
            }
            pairs += 1;
            let ds = scores[j] - scores[i];
            if (ds > 0.0 && dz > 0.0) || (ds < 0.0 && dz < 0.0) {
                agree += 1;
            }
        }
    }
    let r = fit_line(latent, scores).pearson_r;
    Ok(OrderingMetrics {
        pairwise_accuracy: if pairs == 0 { 0.0 } else { agree as f64 / pairs as f64 },
        spearman: spearman(scores, latent),
        r_squared: r * r,
    })
}

/// Mean absolute second difference of a score curve.
pub fn mean_abs_second_difference(scores: &[f64]) -> f64 {
    if scores.len() < 3 {
        return 0.0;
    }
    let sum: f64 = scores.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).abs()).sum();
    sum / (scores.len() - 2) as f64
}

/// Per-volume measurements against held-out latents.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMetrics {
    pub volume_id: String,
    pub n_slices: usize,
    /// Correlation of score against slice index.
    pub pearson_r: f64,
    pub ordering: OrderingMetrics,
    pub mean_abs_second_difference: f64,
}

pub fn volume_metrics(curve: &ScoreCurve, latent: &[f64]) -> Result<VolumeMetrics> {
    Ok(VolumeMetrics {
        volume_id: curve.volume_id.clone(),
        n_slices: curve.scores.len(),
        pearson_r: curve.pearson_r(),
        ordering: ordering_metrics(&curve.scores, latent)?,
        mean_abs_second_difference: mean_abs_second_difference(&curve.scores),
    })
}

/// Per-class counts over bins `[k·w, (k+1)·w)` shared by every class.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    /// Index of the first bin; bin `i` covers `[(first + i)·w, (first + i + 1)·w)`.
    pub first_bin: i64,
    pub counts: BTreeMap<u8, Vec<usize>>,
}

impl Histogram {
    pub fn bin_range(&self, i: usize) -> (f64, f64) {
        let k = (self.first_bin + i as i64) as f64;
        (k * self.bin_width, (k + 1.0) * self.bin_width)
    }

    pub fn bins(&self) -> usize {
        self.counts.values().next().map_or(0, Vec::len)
    }
}

pub fn histogram(scores: &[f64], labels: &[u8], bin_width: f64) -> Result<Histogram> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(UbrError::InvalidArgument(format!("bin width must be positive, got {bin_width}")));
    }
    if scores.len() != labels.len() {
        return Err(UbrError::InvalidArgument(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(UbrError::InvalidArgument("histogram scores must be finite".into()));
    }
    let bin = |s: f64| (s / bin_width).floor() as i64;
    let (Some(lo), Some(hi)) = (scores.iter().map(|&s| bin(s)).min(), scores.iter().map(|&s| bin(s)).max()) else {
        return Ok(Histogram {
            bin_width,
            first_bin: 0,
            counts: BTreeMap::new(),
        });
    };
    let n_bins = (hi - lo + 1) as usize;
    let mut counts: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (&s, &c) in scores.iter().zip(labels) {
        counts.entry(c).or_insert_with(|| vec![0; n_bins])[(bin(s) - lo) as usize] += 1;
    }
    Ok(Histogram {
        bin_width,
        first_bin: lo,
        counts,
    })
}
