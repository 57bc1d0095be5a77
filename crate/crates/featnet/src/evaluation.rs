//! Every reported metric: per-cell training accuracy tables, whole-model
//! voting accuracy with the super-majority Top-1 rate, confusion matrices,
//! errorless-label statistics, and the confusion-wheel projection.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rayon::prelude::*;

use crate::dataset::{DatasetItem, FeaturedBatch, LabeledDataset};
use crate::error::{Error, Result};
use crate::fnn::{arg_top, forward, FnnParams};
use crate::training::{count_errors, CellId, ProtoModel};
use crate::voting::{classify, FeaturedModel, Protocol, VoteOutcome};

// ---------------------------------------------------------------------------
// Training evaluation: each net against its own batch.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainingEvalTable {
    /// Per-cell training accuracy in percent.
    pub rows: BTreeMap<CellId, f64>,
    pub min: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// Cells at exactly 100%.
    pub full_cells: usize,
    pub total_cells: usize,
    /// (module, submodule) pairs whose every feature is at 100%.
    pub error_free_pairs: usize,
    pub total_pairs: usize,
}

/// Min, mean, median (midpoint convention) and max of a non-empty slice.
pub fn five_number(values: &[f64]) -> (f64, f64, f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let mean = sorted.iter().sum::<f64>() / n as f64;
    (sorted[0], mean, median, sorted[n - 1])
}

/// Scores every net on its own featured batch. The batches must cover the
/// model's grid exactly.
pub fn training_evaluation(
    pm: &ProtoModel,
    batches: &[FeaturedBatch],
) -> Result<TrainingEvalTable> {
    let n = pm.feature_count();
    let expected = n * (pm.k * pm.r) as usize;
    if batches.len() != expected {
        return Err(Error::Domain(format!(
            "training evaluation needs {expected} batches, got {}",
            batches.len()
        )));
    }
    let scored: Vec<(CellId, f64)> = batches
        .par_iter()
        .map(|fb| {
            let id = CellId {
                feature: fb.feature,
                module: fb.module,
                submodule: fb.submodule,
            };
            let params = pm.cell_params(id)?;
            let errors = count_errors(params, fb)?;
            Ok((id, 100.0 * (1.0 - errors as f64 / fb.len() as f64)))
        })
        .collect::<Result<_>>()?;
    let mut rows = BTreeMap::new();
    for (id, acc) in scored {
        if rows.insert(id, acc).is_some() {
            return Err(Error::Domain(format!("duplicate batch for cell {id}")));
        }
    }
    for id in pm.cells.keys() {
        if !rows.contains_key(id) {
            return Err(Error::Domain(format!("no batch for cell {id}")));
        }
    }

    let values: Vec<f64> = rows.values().copied().collect();
    let (min, mean, median, max) = five_number(&values);
    let full_cells = values.iter().filter(|&&v| v == 100.0).count();
    let mut error_free_pairs = 0;
    for j in 1..=pm.k {
        for s in 1..=pm.r {
            let all_perfect = (1..=n).all(|fi| {
                rows[&CellId {
                    feature: fi,
                    module: j,
                    submodule: s,
                }] == 100.0
            });
            error_free_pairs += usize::from(all_perfect);
        }
    }
    Ok(TrainingEvalTable {
        rows,
        min,
        mean,
        median,
        max,
        full_cells,
        total_cells: expected,
        error_free_pairs,
        total_pairs: (pm.k * pm.r) as usize,
    })
}

/// Key-value report of a training evaluation.
pub fn training_report(table: &TrainingEvalTable) -> String {
    let mut out = String::new();
    out.push_str("scope = training\n");
    out.push_str(&format!("cells = {}\n", table.total_cells));
    out.push_str(&format!("min = {:.6}\n", table.min));
    out.push_str(&format!("mean = {:.6}\n", table.mean));
    out.push_str(&format!("median = {:.6}\n", table.median));
    out.push_str(&format!("max = {:.6}\n", table.max));
    out.push_str(&format!(
        "full_cells = {} / {}\n",
        table.full_cells, table.total_cells
    ));
    out.push_str(&format!(
        "error_free_pairs = {} / {}\n",
        table.error_free_pairs, table.total_pairs
    ));
    for (id, acc) in &table.rows {
        out.push_str(&format!(
            "cell_{}_{}_{} = {acc:.6}\n",
            id.feature, id.module, id.submodule
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Model evaluation: whole-grid voting over a dataset.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub id: String,
    pub true_label: u32,
    pub outcome: VoteOutcome,
}

#[derive(Debug, Clone)]
pub struct ModelEvaluation {
    pub accuracy_pct: f64,
    /// Share of super-majority wins among correct predictions; 100 when
    /// nothing is correct.
    pub top1_pct: f64,
    pub total: usize,
    pub correct: usize,
    pub super_correct: usize,
    pub outcomes: Vec<EvalOutcome>,
}

/// Accuracy and conditional Top-1 from (correct, super-majority) pairs.
pub fn outcome_stats(flags: &[(bool, bool)]) -> (f64, f64) {
    let total = flags.len();
    let correct = flags.iter().filter(|(c, _)| *c).count();
    let super_correct = flags.iter().filter(|(c, sm)| *c && *sm).count();
    let accuracy = 100.0 * correct as f64 / total as f64;
    let top1 = if correct == 0 {
        100.0
    } else {
        100.0 * super_correct as f64 / correct as f64
    };
    (accuracy, top1)
}

/// Classifies the whole dataset and folds the headline metrics.
pub fn model_evaluation(
    fm: &FeaturedModel,
    ds: &LabeledDataset,
    protocol: Protocol,
) -> Result<ModelEvaluation> {
    if ds.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty dataset".into()));
    }
    let outcomes: Vec<EvalOutcome> = ds
        .items()
        .par_iter()
        .map(|item| {
            Ok(EvalOutcome {
                id: item.id.clone(),
                true_label: item.label,
                outcome: classify(fm, &item.image, protocol)?,
            })
        })
        .collect::<Result<_>>()?;
    let flags: Vec<(bool, bool)> = outcomes
        .iter()
        .map(|o| {
            (
                o.outcome.label == o.true_label,
                o.outcome.super_majority,
            )
        })
        .collect();
    let (accuracy_pct, top1_pct) = outcome_stats(&flags);
    let correct = flags.iter().filter(|(c, _)| *c).count();
    let super_correct = flags.iter().filter(|(c, sm)| *c && *sm).count();
    Ok(ModelEvaluation {
        accuracy_pct,
        top1_pct,
        total: outcomes.len(),
        correct,
        super_correct,
        outcomes,
    })
}

/// Key-value report of a model evaluation.
pub fn model_report(me: &ModelEvaluation, p: usize, protocol: Protocol) -> String {
    let mut out = String::new();
    out.push_str("scope = model\n");
    out.push_str(&format!("features = {p}\n"));
    out.push_str(&format!("protocol_m = {}\n", protocol.m));
    if protocol.m > 1 {
        out.push_str("expanded_protocol = true\n");
    }
    out.push_str(&format!("images = {}\n", me.total));
    out.push_str(&format!("correct = {}\n", me.correct));
    out.push_str(&format!("super_majority_correct = {}\n", me.super_correct));
    out.push_str(&format!("accuracy = {:.6}\n", me.accuracy_pct));
    out.push_str(&format!("top1 = {:.6}\n", me.top1_pct));
    out
}

// ---------------------------------------------------------------------------
// Confusion matrices and errorless labels.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    labels: u32,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(labels: u32) -> Self {
        Self {
            labels,
            counts: vec![0; (labels * labels) as usize],
        }
    }

    pub fn labels(&self) -> u32 {
        self.labels
    }

    pub fn get(&self, truth: u32, predicted: u32) -> u64 {
        self.counts[(truth * self.labels + predicted) as usize]
    }

    pub fn row_sum(&self, truth: u32) -> u64 {
        (0..self.labels).map(|p| self.get(truth, p)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels).map(|t| self.get(t, t)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Elementwise sum; partial matrices from parallel folds merge with it.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.labels != other.labels {
            return Err(Error::Dimension(format!(
                "cannot merge {}-label and {}-label confusion matrices",
                self.labels, other.labels
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// A label is errorless when its row is non-empty and purely diagonal.
    pub fn is_errorless(&self, label: u32) -> bool {
        let row = self.row_sum(label);
        row > 0 && row == self.get(label, label)
    }
}

/// Counts (true, predicted) pairs into an L×L matrix.
pub fn confusion_matrix(truth: &[u32], predicted: &[u32], labels: u32) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::Domain(format!(
            "{} true labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(labels);
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= labels || p >= labels {
            return Err(Error::Domain(format!(
                "label pair ({t}, {p}) outside [0, {labels})"
            )));
        }
        cm.counts[(t * labels + p) as usize] += 1;
    }
    Ok(cm)
}

/// CSV dump `true,pred,count`, non-zero entries in row-major order.
pub fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("true,pred,count\n");
    for t in 0..cm.labels {
        for p in 0..cm.labels {
            let c = cm.get(t, p);
            if c > 0 {
                out.push_str(&format!("{t},{p},{c}\n"));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorlessStats {
    /// Perfect-label count of each batch.
    pub per_batch: Vec<usize>,
    /// Mean across batches.
    pub by_batch_mean: f64,
    /// Labels errorless in the aggregated matrix.
    pub all_labels: Vec<u32>,
}

impl ErrorlessStats {
    pub fn all_count(&self) -> usize {
        self.all_labels.len()
    }
}

/// Per-batch and aggregate errorless-label statistics. A label missing from
/// a batch contributes nothing to that batch's count.
pub fn errorless_labels(matrices: &[ConfusionMatrix]) -> Result<ErrorlessStats> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Domain("errorless stats need at least one batch".into()))?;
    let labels = first.labels();
    let mut aggregate = ConfusionMatrix::new(labels);
    let mut per_batch = Vec::with_capacity(matrices.len());
    for cm in matrices {
        aggregate.merge(cm)?;
        per_batch.push((0..labels).filter(|&t| cm.is_errorless(t)).count());
    }
    let by_batch_mean = per_batch.iter().sum::<usize>() as f64 / per_batch.len() as f64;
    let all_labels: Vec<u32> = (0..labels).filter(|&t| aggregate.is_errorless(t)).collect();
    Ok(ErrorlessStats {
        per_batch,
        by_batch_mean,
        all_labels,
    })
}

/// Key-value report of errorless-label statistics.
pub fn errorless_report(stats: &ErrorlessStats) -> String {
    let mut out = String::new();
    out.push_str(&format!("batches = {}\n", stats.per_batch.len()));
    out.push_str(&format!("by_batch_mean = {:.6}\n", stats.by_batch_mean));
    out.push_str(&format!("all_count = {}\n", stats.all_count()));
    let list = stats
        .all_labels
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    out.push_str(&format!("all_labels = {list}\n"));
    for (b, count) in stats.per_batch.iter().enumerate() {
        out.push_str(&format!("batch_{} = {count}\n", b + 1));
    }
    out
}

// ---------------------------------------------------------------------------
// Confusion wheel: softmax outputs projected onto class spokes.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct WheelPoint {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub true_label: u32,
    pub predicted: u32,
    pub misclassified: bool,
    /// The point's angle deviates from its true spoke by more than π/C.
    pub outside_sector: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WheelPlot {
    pub classes: u32,
    pub points: Vec<WheelPoint>,
}

/// Projects a probability vector onto the unit-circle spokes: spoke c sits
/// at angle 2πc/C and the point is the probability-weighted spoke sum.
pub fn wheel_point(probs: &[f64]) -> (f64, f64) {
    let c = probs.len() as f64;
    let mut x = 0.0;
    let mut y = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        let theta = TAU * i as f64 / c;
        x += p * theta.cos();
        y += p * theta.sin();
    }
    (x, y)
}

/// Smallest absolute difference between two angles, in [0, π].
fn angle_deviation(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Projects every sample of a featured batch through one net.
pub fn confusion_wheel(params: &FnnParams, fb: &FeaturedBatch) -> Result<WheelPlot> {
    let classes = params.arch.output_len() as u32;
    let sector = std::f64::consts::PI / classes as f64;
    let mut points = Vec::with_capacity(fb.len());
    for (t, (x, &label)) in fb.inputs.iter().zip(&fb.labels).enumerate() {
        if label >= classes {
            return Err(Error::Domain(format!(
                "label {label} outside [0, {classes})"
            )));
        }
        let probs = forward(params, x)?.probs;
        let (px, py) = wheel_point(&probs);
        let predicted = arg_top(&probs);
        let spoke = TAU * label as f64 / classes as f64;
        points.push(WheelPoint {
            id: fb.ids.get(t).cloned().unwrap_or_else(|| t.to_string()),
            x: px,
            y: py,
            true_label: label,
            predicted,
            misclassified: predicted != label,
            outside_sector: angle_deviation(py.atan2(px), spoke) > sector,
        });
    }
    Ok(WheelPlot { classes, points })
}

/// Deterministic label color: golden-angle hue walk through HSV.
fn label_color(label: u32) -> String {
    let h = (label as f64 * 0.618033988749895).fract() * 6.0;
    let (s, v) = (0.65, 0.85);
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    format!(
        "#{:02x}{:02x}{:02x}",
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8
    )
}

const WHEEL_CANVAS: f64 = 1000.0;
const WHEEL_RADIUS: f64 = 450.0;

fn svg_coords(x: f64, y: f64) -> (f64, f64) {
    // SVG's y axis points down; the wheel's points up.
    (
        WHEEL_CANVAS / 2.0 + WHEEL_RADIUS * x,
        WHEEL_CANVAS / 2.0 - WHEEL_RADIUS * y,
    )
}

/// Renders the wheel as a standalone SVG document: unit circle, labeled
/// spokes, points colored by true label, misclassified points as crosses.
pub fn wheel_svg(plot: &WheelPlot) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {c} {c}\" \
         width=\"{c}\" height=\"{c}\">\n",
        c = WHEEL_CANVAS
    ));
    out.push_str(&format!(
        "<rect width=\"{c}\" height=\"{c}\" fill=\"white\"/>\n",
        c = WHEEL_CANVAS
    ));
    out.push_str(&format!(
        "<circle cx=\"{m}\" cy=\"{m}\" r=\"{r}\" fill=\"none\" stroke=\"#444444\" \
         stroke-width=\"2\"/>\n",
        m = WHEEL_CANVAS / 2.0,
        r = WHEEL_RADIUS
    ));
    for cidx in 0..plot.classes {
        let theta = TAU * cidx as f64 / plot.classes as f64;
        let (tx, ty) = svg_coords(theta.cos(), theta.sin());
        out.push_str(&format!(
            "<line x1=\"{m}\" y1=\"{m}\" x2=\"{tx:.2}\" y2=\"{ty:.2}\" \
             stroke=\"#bbbbbb\" stroke-width=\"1\"/>\n",
            m = WHEEL_CANVAS / 2.0
        ));
        let (lx, ly) = svg_coords(1.07 * theta.cos(), 1.07 * theta.sin());
        out.push_str(&format!(
            "<text x=\"{lx:.2}\" y=\"{ly:.2}\" font-size=\"20\" text-anchor=\"middle\" \
             dominant-baseline=\"middle\" fill=\"#333333\">{cidx}</text>\n"
        ));
    }
    for pt in &plot.points {
        let (px, py) = svg_coords(pt.x, pt.y);
        let color = label_color(pt.true_label);
        if pt.misclassified {
            out.push_str(&format!(
                "<path d=\"M {a:.2} {b:.2} L {c:.2} {d:.2} M {a:.2} {d:.2} L {c:.2} {b:.2}\" \
                 stroke=\"{color}\" stroke-width=\"2.5\" fill=\"none\"/>\n",
                a = px - 6.0,
                b = py - 6.0,
                c = px + 6.0,
                d = py + 6.0
            ));
        } else {
            out.push_str(&format!(
                "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"5\" fill=\"{color}\" \
                 fill-opacity=\"0.8\"/>\n"
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Companion CSV: `sample_id,x,y,true,pred,outside_sector` with flags as
/// 0/1.
pub fn wheel_csv(plot: &WheelPlot) -> String {
    let mut out = String::from("sample_id,x,y,true,pred,outside_sector\n");
    for pt in &plot.points {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{},{}\n",
            pt.id,
            pt.x,
            pt.y,
            pt.true_label,
            pt.predicted,
            u8::from(pt.outside_sector)
        ));
    }
    out
}

/// Convenience bundle: outcome labels of a model evaluation as
/// (truth, predicted) pairs for confusion analysis.
pub fn outcome_labels(me: &ModelEvaluation) -> (Vec<u32>, Vec<u32>) {
    let truth = me.outcomes.iter().map(|o| o.true_label).collect();
    let predicted = me.outcomes.iter().map(|o| o.outcome.label).collect();
    (truth, predicted)
}

/// Splits evaluation outcomes into contiguous near-equal batches and builds
/// one confusion matrix per batch (items keep evaluation order).
pub fn batched_confusion(
    me: &ModelEvaluation,
    batches: usize,
    labels: u32,
) -> Result<Vec<ConfusionMatrix>> {
    if batches == 0 || batches > me.outcomes.len() {
        return Err(Error::Domain(format!(
            "cannot split {} outcomes into {batches} batches",
            me.outcomes.len()
        )));
    }
    let n = me.outcomes.len();
    let base = n / batches;
    let extra = n % batches;
    let mut out = Vec::with_capacity(batches);
    let mut start = 0;
    for b in 0..batches {
        let len = base + usize::from(b < extra);
        let slice = &me.outcomes[start..start + len];
        start += len;
        let truth: Vec<u32> = slice.iter().map(|o| o.true_label).collect();
        let predicted: Vec<u32> = slice.iter().map(|o| o.outcome.label).collect();
        out.push(confusion_matrix(&truth, &predicted, labels)?);
    }
    Ok(out)
}
