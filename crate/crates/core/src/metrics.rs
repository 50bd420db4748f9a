//! Segmentation accuracy (mIoU, pixel accuracy) and warped-mIoU temporal
//! consistency.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::flowwarp::{warp_labels_nearest, FlowField};

/// Label value excluded from every metric and loss.
pub const IGNORE: u8 = 255;

/// Hard per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::contract(format!(
                "label map has {} ids, expected {height}x{width}",
                ids.len()
            )));
        }
        Ok(Self { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        Self {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u8] {
        &mut self.ids
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    /// Fails when an id is neither a valid class nor [`IGNORE`].
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .ids
            .iter()
            .find(|&&id| id != IGNORE && id as usize >= classes)
        {
            Some(id) => Err(Error::validation(format!(
                "label id {id} is outside 0..{classes} and is not the ignore value"
            ))),
            None => Ok(()),
        }
    }

    /// Applies a class permutation to every non-ignored id.
    pub fn relabel(&self, perm: &[u8]) -> LabelMap {
        LabelMap {
            height: self.height,
            width: self.width,
            ids: self
                .ids
                .iter()
                .map(|&id| if id == IGNORE { id } else { perm[id as usize] })
                .collect(),
        }
    }
}

/// `K × K` pixel counts, rows indexed by ground truth, columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Adds a pair of maps; pixels where either side is [`IGNORE`] are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::contract(
                "prediction and ground truth differ in shape",
            ));
        }
        pred.validate(self.classes)?;
        gt.validate(self.classes)?;
        for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
            if p == IGNORE || g == IGNORE {
                continue;
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP/(TP+FP+FN)` per class; `None` when the class appears in neither
    /// prediction nor ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let fp: u64 = (0..k).filter(|&g| g != c).map(|g| self.count(g, c)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> Option<f64> {
        mean_defined(&self.per_class_iou())
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let correct: u64 = (0..self.classes).map(|c| self.count(c, c)).sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

pub fn confusion_and_miou(
    preds: &[LabelMap],
    gts: &[LabelMap],
    classes: usize,
) -> Result<AccuracyReport> {
    if preds.len() != gts.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} ground-truth maps",
            preds.len(),
            gts.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (p, g) in preds.iter().zip(gts) {
        cm.accumulate(p, g)?;
    }
    if cm.total() == 0 {
        return Err(Error::validation(
            "no evaluable pixels (empty or fully ignored input)",
        ));
    }
    Ok(AccuracyReport {
        per_class_iou: cm.per_class_iou(),
        miou: cm.mean_iou().expect("non-empty matrix"),
        pixel_accuracy: cm.pixel_accuracy().expect("non-empty matrix"),
    })
}

/// Warped-mIoU between one consecutive prediction pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairConsistency {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceConsistency {
    pub pairs: Vec<PairConsistency>,
    /// Mean of the pair scores.
    pub mean: f64,
}

/// Temporal consistency of one predicted sequence. `flows[t]` must warp
/// prediction `t` onto the grid of prediction `t + 1`, i.e. it is the
/// displacement field `M_{t+1→t}`.
pub fn temporal_consistency(
    preds: &[LabelMap],
    flows: &[FlowField],
    classes: usize,
) -> Result<SequenceConsistency> {
    if preds.len() < 2 {
        return Err(Error::validation(
            "temporal consistency needs at least two frames",
        ));
    }
    if flows.len() != preds.len() - 1 {
        return Err(Error::contract(format!(
            "{} flows for {} frames",
            flows.len(),
            preds.len()
        )));
    }
    let mut pairs = Vec::with_capacity(flows.len());
    for (t, flow) in flows.iter().enumerate() {
        let warped = warp_labels_nearest(&preds[t], flow)?;
        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&warped, &preds[t + 1])?;
        let per_class = cm.per_class_iou();
        let miou = mean_defined(&per_class)
            .ok_or_else(|| Error::validation("prediction pair has no evaluable pixels"))?;
        pairs.push(PairConsistency { miou, per_class });
    }
    let mean = pairs.iter().map(|p| p.miou).sum::<f64>() / pairs.len() as f64;
    Ok(SequenceConsistency { pairs, mean })
}

/// One evaluated sequence handed to [`per_class_report`].
pub struct SequenceInput<'a> {
    pub id: &'a str,
    pub preds: &'a [LabelMap],
    pub flows: &'a [FlowField],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub clip: String,
    pub pair: usize,
    pub tc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub per_class_tc: Vec<Option<f64>>,
    /// Mean over sequences of the per-sequence mean pair score.
    pub tc: f64,
    pub trace: Vec<TraceRow>,
}

/// Accuracy over `(preds, gts)` joined with temporal consistency over
/// `sequences`, keyed by class. Per-class TC averages, per sequence, the
/// pairs where the class is present, then averages sequences.
pub fn per_class_report(
    preds: &[LabelMap],
    gts: &[LabelMap],
    sequences: &[SequenceInput<'_>],
    classes: usize,
) -> Result<EvalReport> {
    let acc = confusion_and_miou(preds, gts, classes)?;
    if sequences.is_empty() {
        return Err(Error::validation(
            "no sequences to evaluate temporal consistency on",
        ));
    }
    let mut trace = Vec::new();
    let mut seq_means = Vec::with_capacity(sequences.len());
    let mut class_seq: Vec<Vec<f64>> = vec![Vec::new(); classes];
    for seq in sequences {
        let tc = temporal_consistency(seq.preds, seq.flows, classes)?;
        for (i, pair) in tc.pairs.iter().enumerate() {
            trace.push(TraceRow {
                clip: seq.id.to_string(),
                pair: i,
                tc: pair.miou,
            });
        }
        for (c, acc) in class_seq.iter_mut().enumerate() {
            let vals: Vec<f64> = tc.pairs.iter().filter_map(|p| p.per_class[c]).collect();
            if !vals.is_empty() {
                acc.push(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        seq_means.push(tc.mean);
    }
    let per_class_tc = class_seq
        .iter()
        .map(|v| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    Ok(EvalReport {
        classes,
        per_class_iou: acc.per_class_iou,
        miou: acc.miou,
        pixel_accuracy: acc.pixel_accuracy,
        per_class_tc,
        tc: seq_means.iter().sum::<f64>() / seq_means.len() as f64,
        trace,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl EvalReport {
    /// `metric,value` rows for the headline scores.
    pub fn metrics_csv(&self, param_count: usize) -> String {
        format!(
            "metric,value\nmiou,{:.6}\npixel_accuracy,{:.6}\ntc,{:.6}\nparams,{}\n",
            self.miou, self.pixel_accuracy, self.tc, param_count
        )
    }

    /// One row per class; undefined scores are left empty.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,iou,tc\n");
        for c in 0..self.classes {
            let _ = writeln!(
                out,
                "{c},{},{}",
                cell(self.per_class_iou[c]),
                cell(self.per_class_tc[c])
            );
        }
        out
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("clip,pair,tc\n");
        for row in &self.trace {
            let _ = writeln!(out, "{},{},{:.6}", row.clip, row.pair, row.tc);
        }
        out
    }

    /// Aligned text table with classes as columns and accuracy/TC as rows,
    /// percentages with two decimals.
    pub fn per_class_table(&self, class_names: &[String]) -> String {
        let name = |c: usize| {
            class_names
                .get(c)
                .cloned()
                .unwrap_or_else(|| format!("class{c}"))
        };
        let pct = |v: Option<f64>| v.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or("-".into());
        let mut headers = vec!["Metric".to_string()];
        headers.extend((0..self.classes).map(name));
        headers.push("mean".into());
        let mut rows = vec![headers];
        let mut iou_row = vec!["mIoU (%)".to_string()];
        iou_row.extend(self.per_class_iou.iter().map(|v| pct(*v)));
        iou_row.push(pct(Some(self.miou)));
        let mut tc_row = vec!["TC (%)".to_string()];
        tc_row.extend(self.per_class_tc.iter().map(|v| pct(*v)));
        tc_row.push(pct(Some(self.tc)));
        rows.push(iou_row);
        rows.push(tc_row);
        align_table(&rows)
    }
}

/// Pads every column to its widest cell; the first column is left-aligned.
pub fn align_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (ri, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join(" | ").trim_end());
        if ri == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(out, "{}", rule.join("-+-"));
        }
    }
    out
}
