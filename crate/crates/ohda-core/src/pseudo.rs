//! Pseudo-label production: teacher inference, progressive per-class score
//! thresholds with momentum, consistency reweighting from perturbed teacher
//! passes, and distance matching onto student proposals.

use serde::{Deserialize, Serialize};

use crate::detector::{Detection, DetectorModel, InferParams, ProposalBatch};
use crate::error::{Error, Result};
use crate::geometry::{self, Aabb};
use crate::losses::PseudoTarget;
use crate::parallel::par_map;
use crate::scenegen::Scene;

/// Score metrics gating a pseudo label, in buffer order.
pub const METRIC_OBJ: usize = 0;
pub const METRIC_CLS: usize = 1;
pub const METRIC_IOU: usize = 2;
pub const METRICS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcatParams {
    /// Percentile (percent) fed to the nearest-rank estimator.
    pub alpha: f64,
    /// Per-metric lower clamp (obj, cls, iou).
    pub t_low: [f64; METRICS],
    /// Per-metric upper clamp (obj, cls, iou).
    pub t_high: [f64; METRICS],
    /// Momentum of the per-epoch threshold update.
    pub beta: f64,
    /// Center-distance radius for matching pseudo labels onto proposals.
    pub match_radius: f64,
}

impl Default for PcatParams {
    fn default() -> PcatParams {
        PcatParams {
            alpha: 10.0,
            t_low: [0.3, 0.3, 0.25],
            t_high: [0.9, 0.9, 0.7],
            beta: 0.9,
            match_radius: 0.3,
        }
    }
}

impl PcatParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha && self.alpha <= 100.0) {
            return Err(Error::InvalidArgument(format!(
                "percentile {} outside (0, 100]",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} outside [0, 1]",
                self.beta
            )));
        }
        for m in 0..METRICS {
            if self.t_low[m] > self.t_high[m] {
                return Err(Error::InvalidArgument(format!(
                    "clamp bounds inverted for metric {m}"
                )));
            }
        }
        if self.match_radius <= 0.0 {
            return Err(Error::InvalidArgument(
                "match radius must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Settings for the stochastic teacher passes behind consistency weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MprParams {
    pub passes: usize,
    pub dropout_rate: f64,
    pub lambda: f64,
}

impl Default for MprParams {
    fn default() -> MprParams {
        MprParams {
            passes: 3,
            dropout_rate: 0.3,
            lambda: 1.0,
        }
    }
}

/// Nearest-rank percentile: the value higher than `alpha` percent of the
/// sorted sample.
pub fn percentile_nearest_rank(values: &[f64], alpha: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "percentile of an empty sample".into(),
        ));
    }
    if !(0.0 < alpha && alpha <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile {alpha} outside (0, 100]"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = (alpha / 100.0 * sorted.len() as f64).ceil() as usize - 1;
    Ok(sorted[idx.min(sorted.len() - 1)])
}

/// Clamped percentile; an empty buffer yields the strictest bound.
pub fn compute_threshold(values: &[f64], alpha: f64, low: f64, high: f64) -> f64 {
    match percentile_nearest_rank(values, alpha) {
        Ok(p) => p.clamp(low, high),
        Err(_) => high,
    }
}

/// Per-class, per-metric progressive thresholds with their epoch buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub params: PcatParams,
    /// thresholds[class][metric].
    pub thresholds: Vec<[f64; METRICS]>,
    /// Scores gathered since the last update, per class and metric.
    buffers: Vec<[Vec<f64>; METRICS]>,
    /// Completed threshold updates (0 until the first initialization).
    pub updates: u64,
}

impl ThresholdState {
    /// Fresh state at the strictest thresholds, awaiting scores.
    pub fn new(class_count: usize, params: PcatParams) -> Result<ThresholdState> {
        params.validate()?;
        if class_count == 0 {
            return Err(Error::InvalidArgument("need at least one class".into()));
        }
        Ok(ThresholdState {
            params,
            thresholds: vec![params.t_high; class_count],
            buffers: vec![Default::default(); class_count],
            updates: 0,
        })
    }

    pub fn class_count(&self) -> usize {
        self.thresholds.len()
    }

    /// Append one post-NMS detection's score triple to its class buffers.
    pub fn record(&mut self, det: &Detection) {
        let b = &mut self.buffers[det.class_id];
        b[METRIC_OBJ].push(det.obj_score);
        b[METRIC_CLS].push(det.cls_score);
        b[METRIC_IOU].push(det.iou_score);
    }

    pub fn buffer_len(&self, class_id: usize, metric: usize) -> usize {
        self.buffers[class_id][metric].len()
    }

    /// First threshold fit: thresholds become the clamped percentiles of the
    /// current buffers (no momentum), which then reset.
    pub fn initialize_thresholds(&mut self) {
        let p = self.params;
        for (c, buf) in self.buffers.iter_mut().enumerate() {
            for m in 0..METRICS {
                self.thresholds[c][m] =
                    compute_threshold(&buf[m], p.alpha, p.t_low[m], p.t_high[m]);
                buf[m].clear();
            }
        }
        self.updates += 1;
    }

    /// Momentum update from the epoch buffers; a class/metric that saw no
    /// scores keeps its threshold. Buffers reset afterwards.
    pub fn update(&mut self) {
        let p = self.params;
        for (c, buf) in self.buffers.iter_mut().enumerate() {
            for m in 0..METRICS {
                if !buf[m].is_empty() {
                    let fresh = compute_threshold(&buf[m], p.alpha, p.t_low[m], p.t_high[m]);
                    self.thresholds[c][m] =
                        p.beta * self.thresholds[c][m] + (1.0 - p.beta) * fresh;
                }
                buf[m].clear();
            }
        }
        self.updates += 1;
    }
}

/// A refined teacher detection a student proposal may train on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoLabel {
    pub bbox: Aabb,
    pub class_id: usize,
    pub obj_score: f64,
    pub cls_score: f64,
    pub iou_score: f64,
    /// Consistency weight; 1 until reweighting runs, never below 1.
    pub weight: f64,
}

/// Teacher eval inference over the whole target set, score triples recorded
/// into the state's buffers in scene order.
pub fn collect_scores(
    model: &DetectorModel,
    scenes: &[Scene],
    infer: &InferParams,
    state: &mut ThresholdState,
) -> Result<()> {
    let per_scene: Vec<Result<Vec<Detection>>> =
        par_map(scenes, |scene| model.infer(&scene.points, infer));
    for dets in per_scene {
        for det in dets? {
            state.record(&det);
        }
    }
    Ok(())
}

/// Keep detections whose three scores all clear their class thresholds.
pub fn filter_pseudo(detections: &[Detection], state: &ThresholdState) -> Vec<PseudoLabel> {
    detections
        .iter()
        .filter(|d| {
            let t = state.thresholds[d.class_id];
            d.obj_score >= t[METRIC_OBJ]
                && d.cls_score >= t[METRIC_CLS]
                && d.iou_score >= t[METRIC_IOU]
        })
        .map(|d| PseudoLabel {
            bbox: d.bbox,
            class_id: d.class_id,
            obj_score: d.obj_score,
            cls_score: d.cls_score,
            iou_score: d.iou_score,
            weight: 1.0,
        })
        .collect()
}

/// Consistency weighting: each label's mean best-IoU agreement across the
/// perturbed sets, mapped to ω = 1 + λ·U. An empty perturbed set agrees 0.
pub fn mpr_weights(
    mut labels: Vec<PseudoLabel>,
    perturbed: &[Vec<PseudoLabel>],
    lambda: f64,
) -> Result<Vec<PseudoLabel>> {
    if perturbed.is_empty() {
        return Err(Error::InvalidArgument(
            "consistency weighting needs at least one perturbed set".into(),
        ));
    }
    for label in &mut labels {
        let mut agreement = 0.0;
        for set in perturbed {
            // Agreement is a fraction. An identical box agrees exactly; the
            // general overlap test reconstructs corners and can land an ulp
            // off 1 in either direction, so the self-match is pinned and the
            // rest is capped.
            let best = set
                .iter()
                .map(|other| {
                    if other.bbox == label.bbox {
                        1.0
                    } else {
                        geometry::iou(&label.bbox, &other.bbox)
                    }
                })
                .fold(0.0, f64::max)
                .min(1.0);
            agreement += best;
        }
        let rate = agreement / perturbed.len() as f64;
        label.weight = 1.0 + lambda * rate;
    }
    Ok(labels)
}

/// Nearest pseudo label per student voted center; the mask admits matches
/// within the radius. Ties break to the lower pseudo index.
pub fn match_scheme_s(
    batch: &ProposalBatch,
    labels: &[PseudoLabel],
    radius: f64,
) -> (Vec<Option<usize>>, Vec<bool>) {
    let voted: Vec<_> = (0..batch.len()).map(|k| batch.voted_center(k)).collect();
    let centers: Vec<_> = labels.iter().map(|l| l.bbox.center).collect();
    let matches = geometry::match_by_center(&voted, &centers, radius);
    let mut index = Vec::with_capacity(batch.len());
    let mut mask = Vec::with_capacity(batch.len());
    for m in matches {
        match m {
            Some(hit) if hit.within => {
                index.push(Some(hit.index));
                mask.push(true);
            }
            _ => {
                index.push(None);
                mask.push(false);
            }
        }
    }
    (index, mask)
}

/// Matching reshaped into per-proposal loss inputs: the matched label's box,
/// class, and weight. Unmatched proposals carry no target and unit weight.
pub fn cla_targets(
    batch: &ProposalBatch,
    labels: &[PseudoLabel],
    radius: f64,
) -> (Vec<Option<PseudoTarget>>, Vec<f64>) {
    let (index, _) = match_scheme_s(batch, labels, radius);
    let mut targets = Vec::with_capacity(batch.len());
    let mut omega = Vec::with_capacity(batch.len());
    for idx in index {
        match idx {
            Some(i) => {
                let l = &labels[i];
                targets.push(Some(PseudoTarget {
                    center: l.bbox.center,
                    size: l.bbox.size,
                    class_id: l.class_id,
                }));
                omega.push(l.weight);
            }
            None => {
                targets.push(None);
                omega.push(1.0);
            }
        }
    }
    (targets, omega)
}

/// Full refinement for one target scene: teacher inference, threshold
/// filtering, and (optionally) consistency reweighting from perturbed passes
/// that are filtered with the same thresholds.
pub fn produce_pseudo_labels(
    teacher: &DetectorModel,
    points: &[crate::geometry::Vec3],
    state: &ThresholdState,
    infer: &InferParams,
    mpr: Option<&MprParams>,
    seed: u64,
) -> Result<Vec<PseudoLabel>> {
    let labels = filter_pseudo(&teacher.infer(points, infer)?, state);
    match mpr {
        None => Ok(labels),
        Some(m) => {
            let perturbed: Vec<Vec<PseudoLabel>> = teacher
                .perturbed_infer(points, m.dropout_rate, m.passes, infer, seed)?
                .iter()
                .map(|dets| filter_pseudo(dets, state))
                .collect();
            mpr_weights(labels, &perturbed, m.lambda)
        }
    }
}
