//! Classification accuracy, average precision of explanation maps against
//! ground-truth masks, and dataset-level summaries of dCAM maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cam::DcamResult;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::series::MultivariateSeries;

/// Fraction of instances whose argmax prediction matches the label.
pub fn classification_accuracy(model: &Model, split: &[MultivariateSeries]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Config("cannot measure accuracy on an empty split".into()));
    }
    let mut correct = 0;
    for (i, s) in split.iter().enumerate() {
        let label = s
            .label()
            .ok_or_else(|| Error::Config(format!("instance {i} has no label")))?;
        if model.predict(s)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

/// One point per distinct score threshold, from the highest score down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub average_precision: f64,
}

impl PrCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("threshold,precision,recall\n");
        for i in 0..self.thresholds.len() {
            writeln!(out, "{},{},{}", self.thresholds[i], self.precision[i], self.recall[i]).expect("string write");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Precision-recall curve of `scores` against `mask`.
///
/// Cells with equal scores enter together: every positive in a tied group
/// gets the precision of the whole group. Average precision is the mean of
/// those precisions over all positives.
pub fn pr_curve(scores: &[f64], mask: &[bool]) -> Result<PrCurve> {
    if scores.len() != mask.len() {
        return Err(Error::shape(
            "pr_curve",
            format!("{} scores for {} mask cells", scores.len(), mask.len()),
        ));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Contract(format!("score {i} is not finite")));
    }
    let positives = mask.iter().filter(|&&b| b).count();
    if positives == 0 {
        return Err(Error::Contract("mask has no positive cells".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut curve = PrCurve {
        thresholds: Vec::new(),
        precision: Vec::new(),
        recall: Vec::new(),
        average_precision: 0.0,
    };
    let (mut seen, mut hits, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let mut group_hits = 0;
        while i < order.len() && scores[order[i]] == threshold {
            group_hits += usize::from(mask[order[i]]);
            seen += 1;
            i += 1;
        }
        hits += group_hits;
        let precision = hits as f64 / seen as f64;
        ap += group_hits as f64 * precision;
        curve.thresholds.push(threshold);
        curve.precision.push(precision);
        curve.recall.push(hits as f64 / positives as f64);
    }
    curve.average_precision = ap / positives as f64;
    Ok(curve)
}

/// Average precision of an explanation map against its mask.
pub fn dr_acc(scores: &[f64], mask: &[bool]) -> Result<f64> {
    Ok(pr_curve(scores, mask)?.average_precision)
}

/// Repeats a univariate map on every dimension.
pub fn broadcast_rows(row: &[f64], dims: usize) -> Vec<f64> {
    row.repeat(dims)
}

/// Expected average precision of a random ranking: the positive fraction.
pub fn random_baseline(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub index: usize,
    pub dr_acc: f64,
    pub random_baseline: f64,
    pub ng_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub method: String,
    pub c_acc: f64,
    pub instances: Vec<InstanceScore>,
    pub mean_dr_acc: f64,
    pub random_baseline: f64,
    pub ng_ratio: Option<Summary>,
}

impl ExplanationReport {
    pub fn new(method: &str, c_acc: f64, instances: Vec<InstanceScore>) -> Self {
        let n = instances.len().max(1) as f64;
        let ratios: Vec<f64> = instances.iter().filter_map(|s| s.ng_ratio).collect();
        ExplanationReport {
            method: method.to_string(),
            c_acc,
            mean_dr_acc: instances.iter().map(|s| s.dr_acc).sum::<f64>() / n,
            random_baseline: instances.iter().map(|s| s.random_baseline).sum::<f64>() / n,
            ng_ratio: (!ratios.is_empty()).then(|| Summary::of(&ratios)),
            instances,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Five-number summary with linearly interpolated quartiles, plus the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl Summary {
    /// Panics on an empty slice.
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Summary {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

/// Labelled time interval `[start, end)` of one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub dims: usize,
    /// Distribution of each dimension's maximum over instances.
    pub max_activation: Vec<Summary>,
    /// Mean activation per segment label, one entry per dimension.
    pub segment_means: BTreeMap<String, Vec<f64>>,
}

pub fn global_explanation_stats(results: &[DcamResult], segments: Option<&[Vec<Segment>]>) -> Result<GlobalStats> {
    let first = results
        .first()
        .ok_or_else(|| Error::Contract("no dCAM results to summarise".into()))?;
    let dims = first.dims;
    if let Some(r) = results.iter().find(|r| r.dims != dims) {
        return Err(Error::shape(
            "global_explanation_stats",
            format!("results mix {dims} and {} dimensions", r.dims),
        ));
    }
    let max_activation = (0..dims)
        .map(|d| {
            let maxima: Vec<f64> = results
                .iter()
                .map(|r| r.row(d).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            Summary::of(&maxima)
        })
        .collect();

    let mut segment_means = BTreeMap::new();
    if let Some(segments) = segments {
        if segments.len() != results.len() {
            return Err(Error::shape(
                "global_explanation_stats",
                format!("{} segment lists for {} results", segments.len(), results.len()),
            ));
        }
        let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
        for (r, segs) in results.iter().zip(segments) {
            for seg in segs {
                if seg.start >= seg.end || seg.end > r.len {
                    return Err(Error::Contract(format!(
                        "segment {} [{}, {}) outside a series of length {}",
                        seg.label, seg.start, seg.end, r.len
                    )));
                }
                let entry = sums.entry(seg.label.clone()).or_insert_with(|| (vec![0.0; dims], 0));
                for d in 0..dims {
                    entry.0[d] += r.row(d)[seg.start..seg.end].iter().sum::<f64>();
                }
                entry.1 += seg.end - seg.start;
            }
        }
        for (label, (s, count)) in sums {
            segment_means.insert(label, s.into_iter().map(|v| v / count as f64).collect());
        }
    }
    Ok(GlobalStats {
        dims,
        max_activation,
        segment_means,
    })
}
