//! Detection quality metrics: per-class average precision at fixed IoU
//! thresholds with all-point interpolation, and a serializable report.

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::detector::{DetectorModel, InferParams};
use crate::error::{Error, Result};
use crate::geometry::{self, Aabb, ScoredBox};
use crate::parallel::par_map;
use crate::scenegen::Scene;

/// The two operating points every report carries.
pub const IOU_THRESHOLDS: [f64; 2] = [0.25, 0.5];

/// One scene's detections and ground truth, the unit of evaluation.
#[derive(Clone, Debug)]
pub struct EvalScene {
    pub detections: Vec<ScoredBox>,
    pub ground_truth: Vec<(Aabb, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    /// Undefined (and excluded from the mean) when the class has no ground truth.
    pub ap25: Option<f64>,
    pub ap50: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassMetrics>,
    pub map25: f64,
    pub map50: f64,
    /// Caller-supplied run context.
    pub meta: serde_json::Value,
}

/// Average precision for one class at one IoU threshold: detections pooled
/// over scenes, ranked by score (ties by scene then box index), greedily
/// matched to the highest-IoU unmatched ground truth in their scene, then the
/// area under the precision envelope. `None` when the class has no ground
/// truth anywhere.
pub fn ap_per_class(scenes: &[EvalScene], class_id: usize, iou_thresh: f64) -> Option<f64> {
    let num_gt: usize = scenes
        .iter()
        .map(|s| s.ground_truth.iter().filter(|(_, c)| *c == class_id).count())
        .sum();
    if num_gt == 0 {
        return None;
    }
    struct Ranked {
        scene: usize,
        index: usize,
        score: f64,
    }
    let mut pooled: Vec<Ranked> = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        for (di, det) in scene.detections.iter().enumerate() {
            if det.class_id == class_id {
                pooled.push(Ranked {
                    scene: si,
                    index: di,
                    score: det.score,
                });
            }
        }
    }
    pooled.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.scene.cmp(&b.scene))
            .then(a.index.cmp(&b.index))
    });

    let mut matched: Vec<Vec<bool>> = scenes
        .iter()
        .map(|s| vec![false; s.ground_truth.len()])
        .collect();
    let mut precisions = Vec::with_capacity(pooled.len());
    let mut recalls = Vec::with_capacity(pooled.len());
    let mut tp = 0usize;
    for (rank, det) in pooled.iter().enumerate() {
        let scene = &scenes[det.scene];
        let bbox = &scene.detections[det.index].aabb;
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gt_box, gt_class)) in scene.ground_truth.iter().enumerate() {
            if *gt_class != class_id || matched[det.scene][gi] {
                continue;
            }
            let v = geometry::iou(bbox, gt_box);
            if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            matched[det.scene][gi] = true;
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }

    // Precision envelope: the best precision achievable at or beyond each
    // recall point; integrate over recall increments.
    let mut envelope = precisions;
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in envelope.iter().zip(&recalls) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// Build the full report from per-scene inputs.
pub fn evaluate_inputs(scenes: &[EvalScene], class_names: &[String]) -> MetricsReport {
    let mut classes = Vec::with_capacity(class_names.len());
    for (c, name) in class_names.iter().enumerate() {
        let num_gt = scenes
            .iter()
            .map(|s| s.ground_truth.iter().filter(|(_, k)| *k == c).count())
            .sum();
        let num_detections = scenes
            .iter()
            .map(|s| s.detections.iter().filter(|d| d.class_id == c).count())
            .sum();
        classes.push(ClassMetrics {
            name: name.clone(),
            ap25: ap_per_class(scenes, c, IOU_THRESHOLDS[0]),
            ap50: ap_per_class(scenes, c, IOU_THRESHOLDS[1]),
            num_gt,
            num_detections,
        });
    }
    let mean = |pick: fn(&ClassMetrics) -> Option<f64>| -> f64 {
        let defined: Vec<f64> = classes.iter().filter_map(pick).collect();
        if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        }
    };
    MetricsReport {
        iou_thresholds: IOU_THRESHOLDS.to_vec(),
        map25: mean(|c| c.ap25),
        map50: mean(|c| c.ap50),
        classes,
        meta: serde_json::Value::Null,
    }
}

/// Run the model over a labeled dataset and score it.
pub fn evaluate(
    model: &DetectorModel,
    scenes: &[Scene],
    class_names: &[String],
    infer: &InferParams,
) -> Result<MetricsReport> {
    let inputs: Vec<EvalScene> = par_map(scenes, |scene| -> Result<EvalScene> {
        let dets = model.infer(&scene.points, infer)?;
        Ok(EvalScene {
            detections: dets
                .iter()
                .map(|d| ScoredBox {
                    aabb: d.bbox,
                    class_id: d.class_id,
                    score: d.score,
                })
                .collect(),
            ground_truth: scene
                .objects
                .iter()
                .map(|o| (o.bbox, o.class_id))
                .collect(),
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(evaluate_inputs(&inputs, class_names))
}

pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), report)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let file = File::open(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}
