//! Loss terms and target assignment. Every term returns its scalar value and
//! the upstream gradients for the raw detector head outputs, so one detector
//! backward pass per scene covers the whole objective.

use serde::{Deserialize, Serialize};

use crate::detector::{DetectorModel, HeadGrads, ProposalBatch};
use crate::error::{Error, Result};
use crate::geometry::{self, Aabb, Vec3};
use crate::nn::{binary_ce, sigmoid, smooth_l1, softmax_ce, DropoutMode, Mode, NetGrads, Tensor};

/// Voted centers closer than this to a ground-truth center are positive.
pub const R_POS: f64 = 0.3;
/// Voted centers farther than this from every ground-truth center are negative.
pub const R_NEG: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub vote: f64,
    pub objectness: f64,
    pub center: f64,
    pub size: f64,
    pub semantic: f64,
    pub iou: f64,
    pub lambda_hla: f64,
    pub lambda_cla: f64,
    pub lambda_mpr: f64,
    pub lambda_grl: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            vote: 1.0,
            objectness: 0.5,
            center: 1.0,
            size: 1.0,
            semantic: 0.1,
            iou: 1.0,
            lambda_hla: 0.1,
            lambda_cla: 1.0,
            lambda_mpr: 1.0,
            lambda_grl: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchStatus {
    Positive,
    Negative,
    Ignored,
}

/// Frozen per-proposal training targets. Computed once per step from the
/// current voted centers; the losses treat it as data.
#[derive(Clone, Debug)]
pub struct Assignment {
    pub status: Vec<MatchStatus>,
    /// Nearest ground-truth index; set for positives.
    pub gt_index: Vec<Option<usize>>,
    /// Ground-truth center for seeds lying inside a ground-truth box.
    pub vote_target: Vec<Option<Vec3>>,
}

impl Assignment {
    pub fn positives(&self) -> usize {
        self.status
            .iter()
            .filter(|s| **s == MatchStatus::Positive)
            .count()
    }
}

/// Band assignment by voted-center distance, plus vote targets for on-object
/// seeds. Ties go to the lower ground-truth index.
pub fn assign_targets(
    batch: &ProposalBatch,
    gts: &[(Aabb, usize)],
    r_pos: f64,
    r_neg: f64,
) -> Assignment {
    let k = batch.len();
    let mut status = Vec::with_capacity(k);
    let mut gt_index = Vec::with_capacity(k);
    let mut vote_target = Vec::with_capacity(k);
    for i in 0..k {
        let voted = batch.voted_center(i);
        let mut nearest: Option<(usize, f64)> = None;
        for (g, (bbox, _)) in gts.iter().enumerate() {
            let d = voted.dist(bbox.center);
            if nearest.map_or(true, |(_, best)| d < best) {
                nearest = Some((g, d));
            }
        }
        match nearest {
            Some((g, d)) if d <= r_pos => {
                status.push(MatchStatus::Positive);
                gt_index.push(Some(g));
            }
            Some((_, d)) if d <= r_neg => {
                status.push(MatchStatus::Ignored);
                gt_index.push(None);
            }
            _ => {
                status.push(MatchStatus::Negative);
                gt_index.push(None);
            }
        }
        let seed = batch.seeds[i];
        vote_target.push(
            gts.iter()
                .find(|(bbox, _)| bbox.contains(seed))
                .map(|(bbox, _)| bbox.center),
        );
    }
    Assignment {
        status,
        gt_index,
        vote_target,
    }
}

/// Weighted component contributions; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisedLoss {
    pub vote: f64,
    pub objectness: f64,
    pub center: f64,
    pub size: f64,
    pub semantic: f64,
    pub iou: f64,
    pub total: f64,
}

fn check_class_sizes(batch: &ProposalBatch, class_sizes: &[Vec3]) -> Result<()> {
    let c = batch.cls_logits.cols();
    if class_sizes.len() != c {
        return Err(Error::ShapeMismatch {
            context: "per-class mean sizes".into(),
            expected: format!("{c}"),
            got: format!("{}", class_sizes.len()),
        });
    }
    if class_sizes
        .iter()
        .any(|s| s.x <= 0.0 || s.y <= 0.0 || s.z <= 0.0)
    {
        return Err(Error::InvalidArgument(
            "class mean sizes must be positive".into(),
        ));
    }
    Ok(())
}

/// True IoU of each decoded box with its assigned ground truth; zero for
/// non-positives. The iou head regresses toward these as fixed targets.
pub fn iou_targets(batch: &ProposalBatch, assign: &Assignment, gts: &[(Aabb, usize)]) -> Vec<f64> {
    (0..batch.len())
        .map(|k| match assign.gt_index[k] {
            Some(g) => geometry::iou(&batch.bbox(k), &gts[g].0),
            None => 0.0,
        })
        .collect()
}

pub fn supervised_loss(
    batch: &ProposalBatch,
    assign: &Assignment,
    gts: &[(Aabb, usize)],
    class_sizes: &[Vec3],
    w: &LossWeights,
) -> Result<(SupervisedLoss, HeadGrads)> {
    let targets = iou_targets(batch, assign, gts);
    supervised_frozen(batch, assign, gts, class_sizes, w, &targets)
}

/// Loss with the iou targets supplied by the caller; `supervised_loss` wires
/// in the live ones. Gradient checks need this split: the iou targets are
/// constants of the backward pass, so differencing must hold them fixed.
pub fn supervised_frozen(
    batch: &ProposalBatch,
    assign: &Assignment,
    gts: &[(Aabb, usize)],
    class_sizes: &[Vec3],
    w: &LossWeights,
    iou_target: &[f64],
) -> Result<(SupervisedLoss, HeadGrads)> {
    check_class_sizes(batch, class_sizes)?;
    let k = batch.len();
    if assign.status.len() != k || iou_target.len() != k {
        return Err(Error::ShapeMismatch {
            context: "assignment".into(),
            expected: format!("{k}"),
            got: format!("{}/{}", assign.status.len(), iou_target.len()),
        });
    }
    let c = batch.cls_logits.cols();
    let mut grads = HeadGrads {
        votes: Tensor::zeros(&[k, 3]),
        obj: Tensor::zeros(&[k, 2]),
        cls: Tensor::zeros(&[k, c]),
        center: Tensor::zeros(&[k, 3]),
        size: Tensor::zeros(&[k, 3]),
        iou: Tensor::zeros(&[k, 1]),
        features: Tensor::zeros(batch.features.shape()),
    };

    // Vote regression toward the containing object's center.
    let mut vote_target = Tensor::zeros(&[k, 3]);
    let mut vote_w = vec![0.0; k];
    for i in 0..k {
        if let Some(center) = assign.vote_target[i] {
            let offset = center.sub(batch.seeds[i]);
            vote_target.row_mut(i).copy_from_slice(&offset.to_array());
            vote_w[i] = 1.0;
        }
    }
    let (vote_raw, vote_grad) = smooth_l1(&batch.votes, &vote_target, &vote_w);
    accumulate(&mut grads.votes, &vote_grad, w.vote);

    // Objectness over positive and negative proposals only.
    let mut obj_target = vec![0usize; k];
    let mut obj_w = vec![0.0; k];
    for i in 0..k {
        match assign.status[i] {
            MatchStatus::Positive => {
                obj_target[i] = 1;
                obj_w[i] = 1.0;
            }
            MatchStatus::Negative => obj_w[i] = 1.0,
            MatchStatus::Ignored => {}
        }
    }
    let (obj_raw, obj_grad) = softmax_ce(&batch.obj_logits, &obj_target, &obj_w);
    accumulate(&mut grads.obj, &obj_grad, w.objectness);

    // Box terms for positives.
    let mut pos_w = vec![0.0; k];
    let mut center_pred = Tensor::zeros(&[k, 3]);
    let mut center_target = Tensor::zeros(&[k, 3]);
    let mut size_pred = Tensor::zeros(&[k, 3]);
    let mut size_target = Tensor::zeros(&[k, 3]);
    let mut cls_target = vec![0usize; k];
    let mut iou_pred = Tensor::zeros(&[k, 1]);
    let mut iou_tgt = Tensor::zeros(&[k, 1]);
    for i in 0..k {
        let Some(g) = assign.gt_index[i] else { continue };
        let (gt_box, gt_class) = &gts[g];
        pos_w[i] = 1.0;
        cls_target[i] = *gt_class;
        center_pred
            .row_mut(i)
            .copy_from_slice(&batch.decoded_center(i).to_array());
        center_target
            .row_mut(i)
            .copy_from_slice(&gt_box.center.to_array());
        let mean = class_sizes[*gt_class];
        let raw = batch.raw_size(i);
        size_pred
            .row_mut(i)
            .copy_from_slice(&[raw.x / mean.x, raw.y / mean.y, raw.z / mean.z]);
        size_target.row_mut(i).copy_from_slice(&[
            gt_box.size.x / mean.x,
            gt_box.size.y / mean.y,
            gt_box.size.z / mean.z,
        ]);
        iou_pred.set(i, 0, sigmoid(batch.iou_logits.get(i, 0)));
        iou_tgt.set(i, 0, iou_target[i]);
    }
    let (center_raw, center_grad) = smooth_l1(&center_pred, &center_target, &pos_w);
    // The decoded center is seed + vote + refinement, so the same gradient
    // reaches both regressing heads.
    accumulate(&mut grads.center, &center_grad, w.center);
    accumulate(&mut grads.votes, &center_grad, w.center);

    let (size_raw, size_grad) = smooth_l1(&size_pred, &size_target, &pos_w);
    for i in 0..k {
        for a in 0..3 {
            let d = grads.size.get(i, a) + w.size * size_grad.get(i, a) * size_pred.get(i, a);
            grads.size.set(i, a, d);
        }
    }

    let (sem_raw, sem_grad) = softmax_ce(&batch.cls_logits, &cls_target, &pos_w);
    accumulate(&mut grads.cls, &sem_grad, w.semantic);

    let (iou_raw, iou_grad) = smooth_l1(&iou_pred, &iou_tgt, &pos_w);
    for i in 0..k {
        let p = iou_pred.get(i, 0);
        let d = grads.iou.get(i, 0) + w.iou * iou_grad.get(i, 0) * p * (1.0 - p);
        grads.iou.set(i, 0, d);
    }

    let loss = SupervisedLoss {
        vote: w.vote * vote_raw,
        objectness: w.objectness * obj_raw,
        center: w.center * center_raw,
        size: w.size * size_raw,
        semantic: w.semantic * sem_raw,
        iou: w.iou * iou_raw,
        total: w.vote * vote_raw
            + w.objectness * obj_raw
            + w.center * center_raw
            + w.size * size_raw
            + w.semantic * sem_raw
            + w.iou * iou_raw,
    };
    Ok((loss, grads))
}

fn accumulate(into: &mut Tensor, grad: &Tensor, weight: f64) {
    for (d, g) in into.data_mut().iter_mut().zip(grad.data()) {
        *d += weight * g;
    }
}

/// One matched pseudo label: the box and class a student proposal trains on.
#[derive(Clone, Copy, Debug)]
pub struct PseudoTarget {
    pub center: Vec3,
    pub size: Vec3,
    pub class_id: usize,
}

/// Σ ω·l / Σ ω. Empty or zero-mass input collapses to zero.
pub fn omega_weighted_mean(losses: &[f64], omega: &[f64]) -> f64 {
    debug_assert_eq!(losses.len(), omega.len());
    let mass: f64 = omega.iter().sum();
    if mass <= 0.0 {
        return 0.0;
    }
    losses
        .iter()
        .zip(omega)
        .map(|(l, o)| l * o)
        .sum::<f64>()
        / mass
}

/// Consistency loss between student proposals and their matched pseudo
/// labels: box terms plus semantics, reliability-weighted. Proposals without
/// a match contribute nothing; no match at all means zero loss.
pub fn unsupervised_loss(
    batch: &ProposalBatch,
    targets: &[Option<PseudoTarget>],
    omega: &[f64],
    class_sizes: &[Vec3],
    w: &LossWeights,
) -> Result<(f64, HeadGrads)> {
    check_class_sizes(batch, class_sizes)?;
    let k = batch.len();
    if targets.len() != k || omega.len() != k {
        return Err(Error::ShapeMismatch {
            context: "pseudo targets".into(),
            expected: format!("{k}"),
            got: format!("{}/{}", targets.len(), omega.len()),
        });
    }
    let c = batch.cls_logits.cols();
    let mut grads = HeadGrads {
        votes: Tensor::zeros(&[k, 3]),
        obj: Tensor::zeros(&[k, 2]),
        cls: Tensor::zeros(&[k, c]),
        center: Tensor::zeros(&[k, 3]),
        size: Tensor::zeros(&[k, 3]),
        iou: Tensor::zeros(&[k, 1]),
        features: Tensor::zeros(batch.features.shape()),
    };
    let mass: f64 = (0..k)
        .filter(|&i| targets[i].is_some())
        .map(|i| omega[i])
        .sum();
    if mass <= 0.0 {
        return Ok((0.0, grads));
    }
    let mut total = 0.0;
    for i in 0..k {
        let Some(t) = targets[i] else { continue };
        if t.class_id >= c {
            return Err(Error::InvalidArgument(format!(
                "pseudo class {} out of range for {c} classes",
                t.class_id
            )));
        }
        let scale = omega[i] / mass;
        let one = [1.0];

        let center_pred = Tensor::from_vec(&[1, 3], batch.decoded_center(i).to_array().to_vec());
        let center_tgt = Tensor::from_vec(&[1, 3], t.center.to_array().to_vec());
        let (l_center, g_center) = smooth_l1(&center_pred, &center_tgt, &one);

        let mean = class_sizes[t.class_id];
        let raw = batch.raw_size(i);
        let size_pred = Tensor::from_vec(
            &[1, 3],
            vec![raw.x / mean.x, raw.y / mean.y, raw.z / mean.z],
        );
        let size_tgt = Tensor::from_vec(
            &[1, 3],
            vec![t.size.x / mean.x, t.size.y / mean.y, t.size.z / mean.z],
        );
        let (l_size, g_size) = smooth_l1(&size_pred, &size_tgt, &one);

        let cls_row = Tensor::from_vec(&[1, c], batch.cls_logits.row(i).to_vec());
        let (l_sem, g_sem) = softmax_ce(&cls_row, &[t.class_id], &one);

        total += scale * (w.center * l_center + w.size * l_size + w.semantic * l_sem);
        for a in 0..3 {
            let gc = scale * w.center * g_center.get(0, a);
            grads.center.set(i, a, grads.center.get(i, a) + gc);
            grads.votes.set(i, a, grads.votes.get(i, a) + gc);
            let gs = scale * w.size * g_size.get(0, a) * size_pred.get(0, a);
            grads.size.set(i, a, grads.size.get(i, a) + gs);
        }
        for j in 0..c {
            let g = scale * w.semantic * g_sem.get(0, j);
            grads.cls.set(i, j, grads.cls.get(i, j) + g);
        }
    }
    Ok((total, grads))
}

/// Domain-confusion term: mean binary cross-entropy of the discriminator over
/// all proposals of both batches, source labeled 0 and target labeled 1.
/// Returns the loss, feature gradients for each batch (already reversed by
/// the GRL inside the discriminator), and the discriminator's own gradients.
pub fn hla_loss(
    model: &DetectorModel,
    source_features: &Tensor,
    target_features: &Tensor,
) -> Result<(f64, Tensor, Tensor, NetGrads)> {
    let n = source_features.rows() + target_features.rows();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "domain loss needs at least one proposal".into(),
        ));
    }
    let run = |features: &Tensor, label: f64| -> Result<(f64, Tensor, NetGrads)> {
        let (logits, tape) =
            model
                .discriminator
                .forward(features, Mode::Train, DropoutMode::Auto(None))?;
        let mut loss = 0.0;
        let mut upstream = Tensor::zeros(logits.shape());
        for i in 0..logits.rows() {
            let (l, dz) = binary_ce(logits.get(i, 0), label);
            loss += l;
            upstream.set(i, 0, dz / n as f64);
        }
        let (g_disc, d_features) = model.discriminator.backward(tape, &upstream)?;
        Ok((loss / n as f64, d_features, g_disc))
    };
    let (loss_s, d_source, g_s) = run(source_features, 0.0)?;
    let (loss_t, d_target, mut g_disc) = run(target_features, 1.0)?;
    g_disc.add_assign(&g_s);
    Ok((loss_s + loss_t, d_source, d_target, g_disc))
}

/// Component record for one optimization step, serialized into training logs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub supervised: SupervisedLoss,
    pub hla: f64,
    pub cla: f64,
    pub total: f64,
}

pub fn total_loss(supervised: SupervisedLoss, hla: f64, cla: f64, w: &LossWeights) -> LossReport {
    LossReport {
        supervised,
        hla,
        cla,
        total: supervised.total + w.lambda_hla * hla + w.lambda_cla * cla,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{encode_scene, DetectorConfig, DetectorModel, SceneEncoding};
    use crate::rng::{self, tag};
    use rand::Rng;

    fn test_cfg() -> DetectorConfig {
        DetectorConfig {
            class_count: 3,
            seeds: 8,
            feature_dim: 16,
            radius: 0.8,
            neighbor_cap: 8,
            grl_lambda: -1.0,
        }
    }

    fn random_points(seed: u64, n: usize) -> Vec<Vec3> {
        let mut rng = rng::stream(seed, &[tag::SCENE, 0xfd]);
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(0.0..2.0),
                )
            })
            .collect()
    }

    fn jittered_model(cfg: DetectorConfig, seed: u64) -> DetectorModel {
        let mut model = DetectorModel::new(cfg, seed).unwrap();
        let mut rng = rng::stream(seed, &[tag::GRAD_CHECK, 9]);
        let params: Vec<f64> = model
            .params()
            .iter()
            .map(|p| p + rng.gen_range(-0.05..0.05))
            .collect();
        model.set_params(&params).unwrap();
        model
    }

    fn class_sizes() -> Vec<Vec3> {
        vec![
            Vec3::new(1.0, 0.8, 0.6),
            Vec3::new(0.5, 0.5, 0.9),
            Vec3::new(1.4, 0.9, 0.7),
        ]
    }

    /// Fixture with ground truth anchored near seeds so positives exist.
    fn fixture(
        model: &DetectorModel,
    ) -> (SceneEncoding, Vec<(Aabb, usize)>, Assignment, Vec<f64>) {
        let pts = random_points(21, 64);
        let enc = encode_scene(&model.cfg, &pts).unwrap();
        let pass = model
            .forward(&enc, Mode::Eval, DropoutMode::Auto(None))
            .unwrap();
        let gts = vec![
            (Aabb::new(pass.proposals.voted_center(0), Vec3::new(0.9, 0.7, 0.5)), 1),
            (Aabb::new(pass.proposals.voted_center(3), Vec3::new(0.6, 0.6, 0.8)), 2),
        ];
        let assign = assign_targets(&pass.proposals, &gts, R_POS, R_NEG);
        let iou_t = iou_targets(&pass.proposals, &assign, &gts);
        assert!(assign.positives() >= 2, "fixture lost its positives");
        assert!(
            assign.vote_target.iter().any(|t| t.is_some()),
            "fixture lost its vote targets"
        );
        (enc, gts, assign, iou_t)
    }

    fn hand_batch(centers: &[Vec3]) -> ProposalBatch {
        let k = centers.len();
        ProposalBatch {
            seeds: centers.to_vec(),
            votes: Tensor::zeros(&[k, 3]),
            features: Tensor::zeros(&[k, 4]),
            obj_logits: Tensor::zeros(&[k, 2]),
            cls_logits: Tensor::zeros(&[k, 3]),
            center_offsets: Tensor::zeros(&[k, 3]),
            log_sizes: Tensor::zeros(&[k, 3]),
            iou_logits: Tensor::zeros(&[k, 1]),
        }
    }

    #[test]
    fn assignment_uses_distance_bands() {
        let batch = hand_batch(&[
            Vec3::new(0.0, 0.0, 0.2),
            Vec3::new(0.45, 0.0, 0.0),
            Vec3::new(2.0, 2.0, 0.0),
        ]);
        let gts = vec![(Aabb::new(Vec3::ZERO, Vec3::splat(0.5)), 0)];
        let a = assign_targets(&batch, &gts, R_POS, R_NEG);
        assert_eq!(a.status[0], MatchStatus::Positive);
        assert_eq!(a.gt_index[0], Some(0));
        assert_eq!(a.status[1], MatchStatus::Ignored);
        assert_eq!(a.status[2], MatchStatus::Negative);
        // Seed 0 sits inside the box; the rest do not.
        assert_eq!(a.vote_target[0], Some(Vec3::ZERO));
        assert_eq!(a.vote_target[1], None);
        assert_eq!(a.vote_target[2], None);
    }

    #[test]
    fn no_ground_truth_means_everything_is_negative() {
        let batch = hand_batch(&[Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0)]);
        let a = assign_targets(&batch, &[], R_POS, R_NEG);
        assert!(a.status.iter().all(|s| *s == MatchStatus::Negative));
        assert!(a.vote_target.iter().all(|t| t.is_none()));
    }

    #[test]
    fn nearest_ground_truth_wins_with_lower_index_on_ties() {
        // Dyadic coordinates keep both distances exactly equal to 0.25.
        let batch = hand_batch(&[Vec3::new(0.5, 0.0, 0.0)]);
        let gts = vec![
            (Aabb::new(Vec3::new(0.25, 0.0, 0.0), Vec3::splat(0.4)), 0),
            (Aabb::new(Vec3::new(0.75, 0.0, 0.0), Vec3::splat(0.4)), 1),
        ];
        let a = assign_targets(&batch, &gts, R_POS, R_NEG);
        assert_eq!(a.gt_index[0], Some(0));
    }

    #[test]
    fn perfect_predictions_cost_almost_nothing() {
        let gt_box = Aabb::new(Vec3::new(0.1, -0.2, 0.4), Vec3::new(1.0, 0.8, 0.6));
        let gt_class = 1usize;
        let seeds = [Vec3::new(0.1, -0.2, 0.4), Vec3::new(3.0, 3.0, 0.0)];
        let mut batch = hand_batch(&seeds);
        for a in 0..3 {
            batch
                .log_sizes
                .set(0, a, gt_box.size.to_array()[a].ln());
        }
        batch.obj_logits.set(0, 1, 20.0);
        batch.obj_logits.set(1, 0, 20.0);
        batch.cls_logits.set(0, gt_class, 20.0);
        batch.iou_logits.set(0, 0, 25.0);
        let gts = vec![(gt_box, gt_class)];
        let assign = assign_targets(&batch, &gts, R_POS, R_NEG);
        let (loss, _) =
            supervised_loss(&batch, &assign, &gts, &class_sizes(), &LossWeights::default())
                .unwrap();
        assert!(loss.total < 1e-6, "{loss:?}");
    }

    #[test]
    fn ignored_proposals_leave_only_the_vote_term() {
        let model = jittered_model(test_cfg(), 30);
        let pts = random_points(22, 64);
        let enc = encode_scene(&model.cfg, &pts).unwrap();
        let pass = model
            .forward(&enc, Mode::Eval, DropoutMode::Auto(None))
            .unwrap();
        let gts = vec![(
            Aabb::new(pass.proposals.voted_center(0), Vec3::splat(1.2)),
            0,
        )];
        // Radii that cannot be met or exceeded leave every proposal ignored.
        let assign = assign_targets(&pass.proposals, &gts, -1.0, f64::INFINITY);
        assert!(assign.status.iter().all(|s| *s == MatchStatus::Ignored));
        assert!(assign.vote_target.iter().any(|t| t.is_some()));
        let (loss, _) = supervised_loss(
            &pass.proposals,
            &assign,
            &gts,
            &class_sizes(),
            &LossWeights::default(),
        )
        .unwrap();
        assert!(loss.vote > 0.0);
        assert_eq!(loss.objectness, 0.0);
        assert_eq!(loss.center, 0.0);
        assert_eq!(loss.size, 0.0);
        assert_eq!(loss.semantic, 0.0);
        assert_eq!(loss.iou, 0.0);
        assert_eq!(loss.total, loss.vote);
    }

    #[test]
    fn doubling_the_semantic_weight_doubles_that_component_exactly() {
        let model = jittered_model(test_cfg(), 31);
        let (enc, gts, assign, _) = fixture(&model);
        let pass = model
            .forward(&enc, Mode::Eval, DropoutMode::Auto(None))
            .unwrap();
        let w1 = LossWeights::default();
        let w2 = LossWeights {
            semantic: 2.0 * w1.semantic,
            ..w1
        };
        let (a, _) =
            supervised_loss(&pass.proposals, &assign, &gts, &class_sizes(), &w1).unwrap();
        let (b, _) =
            supervised_loss(&pass.proposals, &assign, &gts, &class_sizes(), &w2).unwrap();
        assert!(a.semantic > 0.0);
        assert_eq!(b.semantic, 2.0 * a.semantic);
        assert_eq!(b.vote, a.vote);
        assert_eq!(b.center, a.center);
    }

    #[test]
    fn iou_targets_match_the_geometry_oracle() {
        let model = jittered_model(test_cfg(), 32);
        let (enc, gts, assign, iou_t) = fixture(&model);
        let pass = model
            .forward(&enc, Mode::Eval, DropoutMode::Auto(None))
            .unwrap();
        for k in 0..pass.proposals.len() {
            match assign.gt_index[k] {
                Some(g) => assert_eq!(
                    iou_t[k],
                    geometry::iou(&pass.proposals.bbox(k), &gts[g].0)
                ),
                None => assert_eq!(iou_t[k], 0.0),
            }
        }
    }

    #[test]
    fn all_components_are_nonnegative() {
        let model = jittered_model(test_cfg(), 33);
        let (enc, gts, assign, _) = fixture(&model);
        let pass = model
            .forward(&enc, Mode::Eval, DropoutMode::Auto(None))
            .unwrap();
        let (loss, _) = supervised_loss(
            &pass.proposals,
            &assign,
            &gts,
            &class_sizes(),
            &LossWeights::default(),
        )
        .unwrap();
        for v in [
            loss.vote, loss.objectness, loss.center, loss.size, loss.semantic, loss.iou,
            loss.total,
        ] {
            assert!(v >= 0.0, "{loss:?}");
        }
    }

    fn fd_check<F: FnMut(&DetectorModel) -> f64>(
        model: &mut DetectorModel,
        analytic: &[f64],
        mut objective: F,
    ) -> f64 {
        let mut params = model.params();
        assert_eq!(analytic.len(), params.len());
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..params.len() {
            let kept = params[i];
            params[i] = kept + h;
            model.set_params(&params).unwrap();
            let fp = objective(model);
            params[i] = kept - h;
            model.set_params(&params).unwrap();
            let fm = objective(model);
            params[i] = kept;
            model.set_params(&params).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let rel =
                (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn supervised_gradients_match_finite_differences() {
        let mut model = jittered_model(test_cfg(), 34);
        let (enc, gts, assign, iou_t) = fixture(&model);
        let sizes = class_sizes();
        let w = LossWeights::default();

        let pass = model
            .forward(&enc, Mode::Eval, DropoutMode::Auto(None))
            .unwrap();
        let (_, head_grads) =
            supervised_frozen(&pass.proposals, &assign, &gts, &sizes, &w, &iou_t).unwrap();
        let analytic = model.backward(pass, &head_grads).unwrap().to_flat();

        let worst = fd_check(&mut model, &analytic, |m| {
            let pass = m.forward(&enc, Mode::Eval, DropoutMode::Auto(None)).unwrap();
            supervised_frozen(&pass.proposals, &assign, &gts, &sizes, &w, &iou_t)
                .unwrap()
                .0
                .total
        });
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn omega_weighted_mean_hand_case() {
        assert_eq!(omega_weighted_mean(&[1.0, 3.0], &[1.0, 3.0]), 2.5);
        assert_eq!(omega_weighted_mean(&[], &[]), 0.0);
        assert_eq!(omega_weighted_mean(&[5.0], &[0.0]), 0.0);
    }

    fn pseudo_fixture(model: &DetectorModel) -> (SceneEncoding, Vec<Option<PseudoTarget>>) {
        let pts = random_points(23, 64);
        let enc = encode_scene(&model.cfg, &pts).unwrap();
        let pass = model
            .forward(&enc, Mode::Eval, DropoutMode::Auto(None))
            .unwrap();
        let mut targets = vec![None; pass.proposals.len()];
        targets[1] = Some(PseudoTarget {
            center: pass.proposals.decoded_center(1).add(Vec3::new(0.2, -0.1, 0.05)),
            size: Vec3::new(0.9, 0.7, 0.5),
            class_id: 2,
        });
        targets[4] = Some(PseudoTarget {
            center: pass.proposals.decoded_center(4).add(Vec3::new(-0.3, 0.2, 0.1)),
            size: Vec3::new(0.5, 0.5, 0.9),
            class_id: 0,
        });
        (enc, targets)
    }

    #[test]
    fn unsupervised_loss_ignores_unmatched_proposals() {
        let model = jittered_model(test_cfg(), 35);
        let (enc, _) = pseudo_fixture(&model);
        let pass = model
            .forward(&enc, Mode::Eval, DropoutMode::Auto(None))
            .unwrap();
        let none = vec![None; pass.proposals.len()];
        let omega = vec![1.0; pass.proposals.len()];
        let (loss, grads) = unsupervised_loss(
            &pass.proposals,
            &none,
            &omega,
            &class_sizes(),
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.cls.data().iter().all(|g| *g == 0.0));
        assert!(grads.center.data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn equal_weights_reduce_to_the_plain_mean_and_scaling_changes_nothing() {
        let model = jittered_model(test_cfg(), 36);
        let (enc, targets) = pseudo_fixture(&model);
        let pass = model
            .forward(&enc, Mode::Eval, DropoutMode::Auto(None))
            .unwrap();
        let k = pass.proposals.len();
        let sizes = class_sizes();
        let w = LossWeights::default();

        let ones = vec![1.0; k];
        let (mean_loss, _) =
            unsupervised_loss(&pass.proposals, &targets, &ones, &sizes, &w).unwrap();

        // Recompute the matched pair losses one at a time; their plain mean
        // must agree with the equal-weight result.
        let mut singles = Vec::new();
        for i in 0..k {
            if targets[i].is_none() {
                continue;
            }
            let mut solo = vec![None; k];
            solo[i] = targets[i];
            let (l, _) = unsupervised_loss(&pass.proposals, &solo, &ones, &sizes, &w).unwrap();
            singles.push(l);
        }
        let plain = singles.iter().sum::<f64>() / singles.len() as f64;
        assert!((mean_loss - plain).abs() < 1e-12);

        let scaled = vec![7.25; k];
        let (scaled_loss, _) =
            unsupervised_loss(&pass.proposals, &targets, &scaled, &sizes, &w).unwrap();
        assert!((scaled_loss - mean_loss).abs() < 1e-9);
    }

    #[test]
    fn unsupervised_gradients_match_finite_differences() {
        let mut model = jittered_model(test_cfg(), 37);
        let (enc, targets) = pseudo_fixture(&model);
        let sizes = class_sizes();
        let w = LossWeights::default();
        let omega: Vec<f64> = (0..model.cfg.seeds).map(|i| 1.0 + 0.25 * i as f64).collect();

        let pass = model
            .forward(&enc, Mode::Eval, DropoutMode::Auto(None))
            .unwrap();
        let (_, head_grads) =
            unsupervised_loss(&pass.proposals, &targets, &omega, &sizes, &w).unwrap();
        let analytic = model.backward(pass, &head_grads).unwrap().to_flat();

        let worst = fd_check(&mut model, &analytic, |m| {
            let pass = m.forward(&enc, Mode::Eval, DropoutMode::Auto(None)).unwrap();
            unsupervised_loss(&pass.proposals, &targets, &omega, &sizes, &w)
                .unwrap()
                .0
        });
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn fresh_discriminator_charges_ln_two() {
        let cfg = test_cfg();
        let mut model = DetectorModel::new(cfg, 38).unwrap();
        let zeros = vec![0.0; model.discriminator.param_count()];
        model.discriminator.set_params(&zeros).unwrap();
        let s = Tensor::zeros(&[4, cfg.feature_dim]);
        let t = Tensor::zeros(&[4, cfg.feature_dim]);
        let (loss, _, _, _) = hla_loss(&model, &s, &t).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn identical_feature_batches_cannot_beat_ln_two() {
        let cfg = test_cfg();
        for seed in 40..46 {
            let model = jittered_model(cfg, seed);
            let pts = random_points(seed, 64);
            let enc = encode_scene(&cfg, &pts).unwrap();
            let pass = model
                .forward(&enc, Mode::Eval, DropoutMode::Auto(None))
                .unwrap();
            let f = pass.proposals.features;
            let (loss, _, _, _) = hla_loss(&model, &f, &f).unwrap();
            assert!(loss >= std::f64::consts::LN_2 - 1e-12);
        }
    }

    #[test]
    fn zero_grl_coefficient_stops_gradients_at_the_features() {
        let cfg = DetectorConfig {
            grl_lambda: 0.0,
            ..test_cfg()
        };
        let model = jittered_model(cfg, 41);
        let pts_a = random_points(24, 64);
        let pts_b = random_points(25, 64);
        let fa = model
            .forward(&encode_scene(&cfg, &pts_a).unwrap(), Mode::Eval, DropoutMode::Auto(None))
            .unwrap()
            .proposals
            .features;
        let fb = model
            .forward(&encode_scene(&cfg, &pts_b).unwrap(), Mode::Eval, DropoutMode::Auto(None))
            .unwrap()
            .proposals
            .features;
        let (loss, da, db, g_disc) = hla_loss(&model, &fa, &fb).unwrap();
        assert!(loss > 0.0);
        assert!(da.data().iter().all(|g| *g == 0.0));
        assert!(db.data().iter().all(|g| *g == 0.0));
        let mut flat = Vec::new();
        g_disc.append_flat(&mut flat);
        assert!(flat.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn hla_gradients_match_finite_differences() {
        let mut model = jittered_model(test_cfg(), 42);
        let pts_a = random_points(26, 64);
        let pts_b = random_points(27, 64);
        let enc_a = encode_scene(&model.cfg, &pts_a).unwrap();
        let enc_b = encode_scene(&model.cfg, &pts_b).unwrap();

        let pass_a = model
            .forward(&enc_a, Mode::Eval, DropoutMode::Auto(None))
            .unwrap();
        let pass_b = model
            .forward(&enc_b, Mode::Eval, DropoutMode::Auto(None))
            .unwrap();
        let (_, d_a, d_b, g_disc) =
            hla_loss(&model, &pass_a.proposals.features, &pass_b.proposals.features).unwrap();
        let mut grads_a = HeadGrads::zeros(&model.cfg);
        grads_a.features = d_a;
        let mut grads_b = HeadGrads::zeros(&model.cfg);
        grads_b.features = d_b;
        let mut total = model.backward(pass_a, &grads_a).unwrap();
        total.add_assign(&model.backward(pass_b, &grads_b).unwrap());
        total.discriminator = g_disc;
        let analytic = total.to_flat();

        let worst = fd_check(&mut model, &analytic, |m| {
            let fa = m
                .forward(&enc_a, Mode::Eval, DropoutMode::Auto(None))
                .unwrap()
                .proposals
                .features;
            let fb = m
                .forward(&enc_b, Mode::Eval, DropoutMode::Auto(None))
                .unwrap()
                .proposals
                .features;
            hla_loss(m, &fa, &fb).unwrap().0
        });
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn total_loss_hand_case() {
        let sup = SupervisedLoss {
            total: 1.0,
            ..SupervisedLoss::default()
        };
        let w = LossWeights {
            lambda_hla: 0.1,
            lambda_cla: 1.0,
            ..LossWeights::default()
        };
        let report = total_loss(sup, 0.5, 2.0, &w);
        assert!((report.total - 3.05).abs() < 1e-12);
        assert_eq!(report.hla, 0.5);
        assert_eq!(report.cla, 2.0);
    }
}
