//! Box-alignment metrics, AUROC and confidence histograms.

use std::io::Write;

use serde::{Deserialize, Serialize};

use std::collections::{HashMap, HashSet};

use crate::orchestrator::RunReport;
use crate::trace::{BBox, QuestionBundle};

/// Intersection over union. Boxes that only share an edge do not intersect.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Mean over predicted boxes of the best IoU against any ground-truth box.
/// `None` when either side is empty.
pub fn trace_miou(pred: &[BBox], gt: &[BBox]) -> Option<f64> {
    if pred.is_empty() || gt.is_empty() {
        return None;
    }
    let total: f64 = pred
        .iter()
        .map(|p| gt.iter().map(|g| iou(g, p)).fold(0.0, f64::max))
        .sum();
    Some(total / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetMiou {
    pub value: Option<f64>,
    /// Traces that contributed a score.
    pub scored: usize,
    /// Traces skipped because they issued no boxes.
    pub skipped: usize,
}

/// Mean trace mIoU over the traces that issued at least one box.
pub fn set_miou<'a, I>(traces: I, gt: &[BBox]) -> SetMiou
where
    I: IntoIterator<Item = &'a [BBox]>,
{
    let mut sum = 0.0;
    let mut scored = 0;
    let mut skipped = 0;
    for boxes in traces {
        match trace_miou(boxes, gt) {
            Some(v) => {
                sum += v;
                scored += 1;
            }
            None => skipped += 1,
        }
    }
    SetMiou {
        value: (scored > 0).then(|| sum / scored as f64),
        scored,
        skipped,
    }
}

/// Average cross-trace IoU among box-bearing traces, weighted by box-pair
/// count. `None` with fewer than two box-bearing traces.
pub fn cue_consistency<'a, I>(traces: I) -> Option<f64>
where
    I: IntoIterator<Item = &'a [BBox]>,
{
    let traces: Vec<&[BBox]> = traces.into_iter().filter(|b| !b.is_empty()).collect();
    if traces.len() < 2 {
        return None;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    // IoU is symmetric, so unordered pairs give the same ratio as ordered ones
    for (i, a) in traces.iter().enumerate() {
        for b in &traces[i + 1..] {
            for x in a.iter() {
                for y in b.iter() {
                    num += iou(x, y);
                }
            }
            den += (a.len() * b.len()) as f64;
        }
    }
    Some(num / den)
}

/// Mann-Whitney AUROC: probability a positive outscores a negative, ties
/// counting one half. `None` unless both classes are present.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // walk tie groups in ascending order, counting negatives strictly below
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let group = &pairs[i..j];
        let pos = group.iter().filter(|p| p.1).count();
        let neg = group.len() - pos;
        wins += pos as f64 * (neg_below as f64 + 0.5 * neg as f64);
        neg_below += neg;
        i = j;
    }
    Some(wins / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count_correct: usize,
    pub count_incorrect: usize,
}

pub const HISTOGRAM_HEADER: &str = "bin_low,bin_high,count_correct,count_incorrect";
/// Default log10 bin resolution.
pub const BINS_PER_DECADE: u32 = 4;

/// Buckets positive confidence weights into log-spaced bins.
///
/// Bin `j` covers `[10^(j/d), 10^((j+1)/d))`. Rows span the lowest through the
/// highest occupied bin, so interior empty bins appear with zero counts.
pub fn confidence_histogram(entries: &[(f64, bool)], bins_per_decade: u32) -> Vec<HistogramRow> {
    let d = bins_per_decade.max(1) as f64;
    let bin_of = |c: f64| (c.max(f64::MIN_POSITIVE).log10() * d).floor() as i64;
    let Some(lo) = entries.iter().map(|e| bin_of(e.0)).min() else {
        return Vec::new();
    };
    let hi = entries.iter().map(|e| bin_of(e.0)).max().unwrap_or(lo);
    let mut rows: Vec<HistogramRow> = (lo..=hi)
        .map(|j| HistogramRow {
            bin_low: 10f64.powf(j as f64 / d),
            bin_high: 10f64.powf((j + 1) as f64 / d),
            count_correct: 0,
            count_incorrect: 0,
        })
        .collect();
    for &(c, correct) in entries {
        let row = &mut rows[(bin_of(c) - lo) as usize];
        if correct {
            row.count_correct += 1;
        } else {
            row.count_incorrect += 1;
        }
    }
    rows
}

pub fn write_histogram_csv<W: Write>(mut out: W, rows: &[HistogramRow]) -> std::io::Result<()> {
    writeln!(out, "{HISTOGRAM_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{:e},{:e},{},{}",
            r.bin_low, r.bin_high, r.count_correct, r.count_incorrect
        )?;
    }
    Ok(())
}

/// Histogram rendered as CSV text.
pub fn export_confidence_distribution(entries: &[(f64, bool)]) -> String {
    let rows = confidence_histogram(entries, BINS_PER_DECADE);
    let mut buf = Vec::new();
    write_histogram_csv(&mut buf, &rows).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("csv is ascii")
}

/// A box metric over every trace and over the reliable sets only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub all: Option<f64>,
    pub reliable: Option<f64>,
    /// Units averaged on each side (traces for mIoU, questions for consistency).
    pub n_all: usize,
    pub n_reliable: usize,
}

fn kept_sets(report: &RunReport) -> HashMap<&str, HashSet<&str>> {
    report
        .per_question
        .iter()
        .map(|q| {
            let kept = q.kept_trace_ids.iter().map(String::as_str).collect();
            (q.question_id.as_str(), kept)
        })
        .collect()
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

/// Trace mIoU pooled over all questions that have ground-truth boxes.
pub fn corpus_miou(bundles: &[QuestionBundle], report: &RunReport) -> Alignment {
    let kept = kept_sets(report);
    let (mut sum_all, mut n_all, mut sum_rel, mut n_rel) = (0.0, 0, 0.0, 0);
    for b in bundles {
        let (Some(gt), Some(k)) = (b.gt_bboxes.as_deref(), kept.get(b.question_id.as_str())) else {
            continue;
        };
        for t in &b.traces {
            if let Some(v) = trace_miou(&t.tool_boxes(), gt) {
                sum_all += v;
                n_all += 1;
                if k.contains(t.trace_id.as_str()) {
                    sum_rel += v;
                    n_rel += 1;
                }
            }
        }
    }
    Alignment {
        all: mean(sum_all, n_all),
        reliable: mean(sum_rel, n_rel),
        n_all,
        n_reliable: n_rel,
    }
}

/// Per-question cue consistency, averaged over the questions where both the
/// full and the reliable set have at least two box-bearing traces.
pub fn corpus_consistency(bundles: &[QuestionBundle], report: &RunReport) -> Alignment {
    let kept = kept_sets(report);
    let (mut sum_all, mut sum_rel, mut n) = (0.0, 0.0, 0);
    for b in bundles {
        let Some(k) = kept.get(b.question_id.as_str()) else {
            continue;
        };
        let boxes: Vec<(bool, Vec<BBox>)> = b
            .traces
            .iter()
            .map(|t| (k.contains(t.trace_id.as_str()), t.tool_boxes()))
            .collect();
        let all = cue_consistency(boxes.iter().map(|(_, v)| v.as_slice()));
        let rel = cue_consistency(boxes.iter().filter(|(r, _)| *r).map(|(_, v)| v.as_slice()));
        if let (Some(a), Some(r)) = (all, rel) {
            sum_all += a;
            sum_rel += r;
            n += 1;
        }
    }
    Alignment {
        all: mean(sum_all, n),
        reliable: mean(sum_rel, n),
        n_all: n,
        n_reliable: n,
    }
}

/// Per-trace quantity scored against correctness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    WM,
    WR,
    WT,
    /// Confidence weight.
    C,
}

/// `(score, correct)` for every scored trace of every graded question.
/// Single-stage traces have no mining score and are left out for `WM`.
pub fn scored_traces(report: &RunReport, kind: ScoreKind) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    for q in &report.per_question {
        let Some(truth) = q.ground_truth.as_deref() else {
            continue;
        };
        for t in &q.traces {
            let Some(s) = t.score else { continue };
            let value = match kind {
                ScoreKind::WM => s.w_m,
                ScoreKind::WR => Some(s.w_r),
                ScoreKind::WT => Some(s.w_t),
                ScoreKind::C => t.weight,
            };
            if let Some(v) = value {
                out.push((v, t.answer.as_deref() == Some(truth)));
            }
        }
    }
    out
}
