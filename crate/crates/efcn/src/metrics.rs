//! Evaluation metrics: pixel utility, utility-weighted IoU, confidence
//! calibration, and novelty statistics.
//!
//! All metrics score a [`SegResult`] — per-pixel assigned sets, pignistic
//! probabilities and ground-truth labels. Pixels labeled with a novel
//! class ([`PixelLabel::Novel`]) are excluded from the accuracy-style
//! metrics and only enter [`novelty_stats`], which measures how often the
//! model routes them to the whole-frame set Ω.
//!
//! Pixel utility generalizes pixel accuracy: each decision earns the
//! normalized soft utility ũ of its assigned set under the true label, so
//! a cautious multi-class assignment containing the truth earns partial
//! credit instead of zero. UIoU generalizes intersection-over-union the
//! same way, and collapses to classical mean IoU when every assignment
//! and label is a single class.

use std::collections::BTreeMap;

use crate::belief::PignisticDist;
use crate::frame::PixelLabel;
use crate::model::Prediction;
use crate::tensor::Tensor;
use crate::utility::UtilityTable;
use crate::{ClassSet, Error, Frame, Result};

/// A scored segmentation: decisions, pignistic maps and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SegResult {
    /// Selected act per pixel, row-major H×W.
    pub assigned: Vec<ClassSet>,
    /// Pignistic probabilities, H×W×M.
    pub betp: Tensor,
    /// Ground-truth label per pixel, row-major H×W.
    pub labels: Vec<PixelLabel>,
}

impl SegResult {
    /// Bundles the three maps after checking that they describe the same
    /// image: matching pixel counts, no empty sets, every class within
    /// the frame implied by the BetP channel count.
    pub fn new(assigned: Vec<ClassSet>, betp: Tensor, labels: Vec<PixelLabel>) -> Result<SegResult> {
        let (h, w, m) = betp.dims3()?;
        if assigned.len() != h * w || labels.len() != h * w {
            return Err(Error::Dimension {
                context: "per-pixel maps vs BetP grid",
                expected: h * w,
                got: assigned.len().min(labels.len()),
            });
        }
        for set in &assigned {
            if set.is_empty() || !set.fits_frame(m) {
                return Err(Error::InvalidLabel(format!(
                    "assigned set {set:?} invalid for {m} classes"
                )));
            }
        }
        for label in &labels {
            if let PixelLabel::Known(set) = label {
                if set.is_empty() || !set.fits_frame(m) {
                    return Err(Error::InvalidLabel(format!(
                        "label set {set:?} invalid for {m} classes"
                    )));
                }
            }
        }
        Ok(SegResult {
            assigned,
            betp,
            labels,
        })
    }

    /// Pairs a model's prediction with ground-truth labels.
    pub fn from_prediction(pred: Prediction, labels: Vec<PixelLabel>) -> Result<SegResult> {
        SegResult::new(pred.assigned, pred.betp, labels)
    }

    fn class_count(&self) -> usize {
        self.betp.dims()[2]
    }

    /// Pixels with a known label, as (pixel index, label set).
    fn scored(&self) -> impl Iterator<Item = (usize, ClassSet)> + '_ {
        self.labels.iter().enumerate().filter_map(|(i, l)| match l {
            PixelLabel::Known(set) => Some((i, *set)),
            PixelLabel::Novel(_) => None,
        })
    }

    /// Pignistic distribution of one pixel.
    fn betp_pixel(&self, px: usize) -> PignisticDist {
        let m = self.class_count();
        PignisticDist::from_probs(self.betp.data()[px * m..(px + 1) * m].to_vec())
    }
}

/// Act-list position of an assigned set, which must be one of the acts.
fn act_position(table: &UtilityTable, set: ClassSet) -> Result<usize> {
    table.acts().position(set).ok_or_else(|| {
        Error::Config(format!(
            "assigned set {set:?} is not among the configured acts"
        ))
    })
}

/// Mean normalized soft utility of the decisions: each scored pixel earns
/// ũ of its assigned set under its ground-truth label. Equals pixel
/// accuracy when every assignment and label is a single class.
pub fn pixel_utility(result: &SegResult, table: &UtilityTable) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (px, label) in result.scored() {
        let a = act_position(table, result.assigned[px])?;
        total += table.soft_for_label(a, label)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract(
            "pixel utility needs at least one pixel with a known label".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Utility-weighted intersection over union.
///
/// For each candidate label set B in `label_universe`, the ground set
/// G^B = {i : label(i) = B} and the prediction set P^B = {i : assigned(i)
/// ∩ B ≠ ∅} form a per-set score: the soft utilities earned on G^B ∩ P^B,
/// divided by |G^B ∪ P^B|. Sets with an empty union are skipped; the rest
/// average into the final value, so only label sets that actually occur
/// (in ground truth or predictions) influence the metric.
pub fn uiou(
    result: &SegResult,
    table: &UtilityTable,
    label_universe: &[ClassSet],
) -> Result<f64> {
    let mut total = 0.0;
    let mut terms = 0usize;
    for &b in label_universe {
        let mut union = 0usize;
        let mut earned = 0.0;
        for (px, label) in result.scored() {
            let in_g = label == b;
            let in_p = !result.assigned[px].intersection(b).is_empty();
            if in_g || in_p {
                union += 1;
            }
            if in_g && in_p {
                let a = act_position(table, result.assigned[px])?;
                earned += table.soft_for_label(a, b)?;
            }
        }
        if union == 0 {
            continue; // B occurs nowhere; an absent class carries no signal
        }
        total += earned / union as f64;
        terms += 1;
    }
    if terms == 0 {
        return Err(Error::Contract(
            "no label set of the universe occurs in this result".into(),
        ));
    }
    Ok(total / terms as f64)
}

/// Distinct label sets occurring in this result: every known ground-truth
/// label plus every assigned set, ordered by (cardinality, bit pattern).
pub fn label_universe(result: &SegResult) -> Vec<ClassSet> {
    let mut seen: Vec<ClassSet> = Vec::new();
    for (px, label) in result.scored() {
        for set in [label, result.assigned[px]] {
            if !seen.contains(&set) {
                seen.push(set);
            }
        }
    }
    seen.sort_by_key(|s| (s.cardinality(), s.bits()));
    seen
}

/// Confidence of one pixel: the pignistic probability the model puts on
/// the true label set.
pub fn confidence(betp: &PignisticDist, label: ClassSet) -> Result<f64> {
    if label.is_empty() {
        return Err(Error::InvalidLabel(
            "confidence of an empty label set is undefined".into(),
        ));
    }
    if !label.fits_frame(betp.class_count()) {
        return Err(Error::InvalidLabel(format!(
            "label {label:?} exceeds {} classes",
            betp.class_count()
        )));
    }
    Ok(betp.prob_of_set(label))
}

/// Binned calibration summary: is stated confidence earned on average?
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    /// Number of bins Q; bin q (1-based) covers ((q−1)/Q, q/Q].
    pub bins: usize,
    /// Scored pixels per bin.
    pub bin_counts: Vec<usize>,
    /// Mean confidence per bin (0.0 for empty bins).
    pub bin_confidence: Vec<f64>,
    /// Mean soft utility per bin (0.0 for empty bins).
    pub bin_utility: Vec<f64>,
    /// Expected calibration error: count-weighted mean |confidence −
    /// utility| over the bins.
    pub ece: f64,
}

impl CalibrationReport {
    /// Reliability-diagram data as CSV (`q,count,confidence,utility`).
    pub fn csv(&self) -> String {
        let mut out = String::from("q,count,confidence,utility\n");
        for q in 0..self.bins {
            out.push_str(&format!(
                "{},{},{},{}\n",
                q + 1,
                self.bin_counts[q],
                self.bin_confidence[q],
                self.bin_utility[q]
            ));
        }
        out
    }
}

/// Bins scored pixels by confidence and compares, per bin, the mean
/// confidence against the mean soft utility actually earned.
///
/// Bin q collects co(i) ∈ ((q−1)/Q, q/Q]; a confidence of exactly zero
/// (possible when the model puts no probability on the true label) is
/// clamped into the first bin rather than dropped. Empty bins carry zero
/// weight in the expected calibration error.
pub fn calibration(result: &SegResult, table: &UtilityTable, bins: usize) -> Result<CalibrationReport> {
    if bins == 0 {
        return Err(Error::Config("calibration needs at least one bin".into()));
    }
    let mut bin_counts = vec![0usize; bins];
    let mut co_sums = vec![0.0; bins];
    let mut au_sums = vec![0.0; bins];
    let mut scored = 0usize;
    for (px, label) in result.scored() {
        let co = confidence(&result.betp_pixel(px), label)?;
        let a = act_position(table, result.assigned[px])?;
        let au = table.soft_for_label(a, label)?;
        // ((q−1)/Q, q/Q] half-open bins; ceil maps the open lower edge
        // correctly and the zero clamp keeps co = 0 in bin 1.
        let q = ((co * bins as f64).ceil() as usize).clamp(1, bins);
        bin_counts[q - 1] += 1;
        co_sums[q - 1] += co;
        au_sums[q - 1] += au;
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::Contract(
            "calibration needs at least one pixel with a known label".into(),
        ));
    }
    let mut ece = 0.0;
    let mut bin_confidence = vec![0.0; bins];
    let mut bin_utility = vec![0.0; bins];
    for q in 0..bins {
        if bin_counts[q] == 0 {
            continue;
        }
        bin_confidence[q] = co_sums[q] / bin_counts[q] as f64;
        bin_utility[q] = au_sums[q] / bin_counts[q] as f64;
        ece += bin_counts[q] as f64 * (bin_confidence[q] - bin_utility[q]).abs();
    }
    Ok(CalibrationReport {
        bins,
        bin_counts,
        bin_confidence,
        bin_utility,
        ece: ece / scored as f64,
    })
}

/// How one novel class was assigned, as a count-ranked histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct NoveltyRow {
    /// Sentinel id carried by the [`PixelLabel::Novel`] labels.
    pub novel_id: u16,
    /// Pixels bearing this id.
    pub pixels: usize,
    /// Assigned sets with their counts, most frequent first (ties broken
    /// by ascending bit pattern for determinism).
    pub assigned: Vec<(ClassSet, usize)>,
}

/// Ω-assignment rates for known vs novel pixels, plus per-novel-class
/// assignment histograms.
#[derive(Clone, Debug, PartialEq)]
pub struct NoveltyReport {
    /// Share of novel-labeled pixels assigned the whole frame Ω
    /// (0.0 when no novel pixels exist).
    pub unknown_omega_rate: f64,
    /// Share of known-labeled pixels assigned Ω (0.0 when none exist).
    pub known_omega_rate: f64,
    pub unknown_pixels: usize,
    pub known_pixels: usize,
    /// One row per novel id, ascending.
    pub per_class: Vec<NoveltyRow>,
}

/// Measures whether pixels of classes outside the frame end up in Ω —
/// the cautious "don't know" act — more often than pixels of known
/// classes do.
pub fn novelty_stats(result: &SegResult, frame: &Frame) -> Result<NoveltyReport> {
    if frame.class_count() != result.class_count() {
        return Err(Error::Dimension {
            context: "frame class count vs BetP channels",
            expected: result.class_count(),
            got: frame.class_count(),
        });
    }
    let omega = frame.omega();
    let mut unknown_pixels = 0usize;
    let mut unknown_omega = 0usize;
    let mut known_pixels = 0usize;
    let mut known_omega = 0usize;
    let mut histograms: BTreeMap<u16, BTreeMap<u64, usize>> = BTreeMap::new();
    for (px, label) in result.labels.iter().enumerate() {
        let assigned = result.assigned[px];
        match label {
            PixelLabel::Known(_) => {
                known_pixels += 1;
                if assigned == omega {
                    known_omega += 1;
                }
            }
            PixelLabel::Novel(id) => {
                unknown_pixels += 1;
                if assigned == omega {
                    unknown_omega += 1;
                }
                *histograms
                    .entry(*id)
                    .or_default()
                    .entry(assigned.bits())
                    .or_default() += 1;
            }
        }
    }
    let rate = |part: usize, whole: usize| {
        if whole == 0 {
            0.0
        } else {
            part as f64 / whole as f64
        }
    };
    let per_class = histograms
        .into_iter()
        .map(|(novel_id, hist)| {
            let pixels = hist.values().sum();
            let mut assigned: Vec<(ClassSet, usize)> = hist
                .into_iter()
                .map(|(bits, count)| (ClassSet::from_bits(bits), count))
                .collect();
            assigned.sort_by_key(|&(set, count)| (usize::MAX - count, set.bits()));
            NoveltyRow {
                novel_id,
                pixels,
                assigned,
            }
        })
        .collect();
    Ok(NoveltyReport {
        unknown_omega_rate: rate(unknown_omega, unknown_pixels),
        known_omega_rate: rate(known_omega, known_pixels),
        unknown_pixels,
        known_pixels,
        per_class,
    })
}

/// Headline metrics plus reliability-diagram rows as one CSV report.
pub fn summary_csv(pu: f64, uiou: f64, cal: &CalibrationReport) -> String {
    format!("pu,uiou,ece\n{},{},{}\n{}", pu, uiou, cal.ece, cal.csv())
}
