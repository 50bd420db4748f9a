use std::time::Instant;

use crate::data::{LabeledFrame, VideoClip};
use crate::error::{Error, Result};
use crate::metrics::{
    confusion_and_miou, per_class_report, AccuracyReport, EvalReport, LabelMap, SequenceInput,
};
use crate::models::SegmentationNet;
use crate::tensor::Image;

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub param_count: usize,
    /// Frames per second of host inference; excluded from deterministic reports.
    pub fps: f64,
    /// Per-clip predictions of every frame, keyed by clip id.
    pub predictions: Vec<(String, Vec<LabelMap>)>,
}

/// Independent per-frame predictions.
pub fn predict_frames(net: &dyn SegmentationNet, frames: &[&Image]) -> Result<Vec<LabelMap>> {
    frames.iter().map(|f| net.predict(f)).collect()
}

/// Accuracy on labelled frames and temporal consistency over all frames of
/// each clip, computed from per-frame inference only.
pub fn evaluate(net: &dyn SegmentationNet, clips: &[VideoClip]) -> Result<Evaluation> {
    if clips.is_empty() {
        return Err(Error::validation("evaluation split is empty"));
    }
    let classes = net.classes();
    let start = Instant::now();
    let mut predictions = Vec::with_capacity(clips.len());
    let mut frames_seen = 0usize;
    for clip in clips {
        if clip.classes != classes {
            return Err(Error::validation(format!(
                "clip {} has {} classes but the network predicts {classes}",
                clip.id, clip.classes
            )));
        }
        let frames: Vec<&Image> = clip.frames.iter().collect();
        predictions.push((clip.id.clone(), predict_frames(net, &frames)?));
        frames_seen += frames.len();
    }
    let elapsed = start.elapsed().as_secs_f64();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (clip, (_, p)) in clips.iter().zip(&predictions) {
        for (t, label) in &clip.labels {
            preds.push(p[*t].clone());
            gts.push(label.clone());
        }
    }
    let sequences: Vec<SequenceInput<'_>> = clips
        .iter()
        .zip(&predictions)
        .map(|(clip, (id, p))| SequenceInput {
            id,
            preds: p,
            flows: &clip.backward_flows,
        })
        .collect();
    let report = per_class_report(&preds, &gts, &sequences, classes)?;
    Ok(Evaluation {
        report,
        param_count: net.param_count(),
        fps: if elapsed > 0.0 {
            frames_seen as f64 / elapsed
        } else {
            f64::INFINITY
        },
        predictions,
    })
}

/// Accuracy from labelled frames alone.
pub fn evaluate_labeled(
    net: &dyn SegmentationNet,
    frames: &[LabeledFrame],
) -> Result<(AccuracyReport, Vec<LabelMap>)> {
    let images: Vec<&Image> = frames.iter().map(|f| &f.frame).collect();
    let preds = predict_frames(net, &images)?;
    let gts: Vec<LabelMap> = frames.iter().map(|f| f.label.clone()).collect();
    Ok((confusion_and_miou(&preds, &gts, net.classes())?, preds))
}
