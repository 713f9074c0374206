//! Miniature point detector: farthest-point seeds, canonicalized local
//! encoding with max-pooling, a voting head, per-proposal decoder heads, and
//! a gradient-reversed domain discriminator.
//!
//! One forward pass returns both the decoded proposals and the tapes needed
//! to push head gradients back to every parameter.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{self, Aabb, ScoredBox, Vec3};
use crate::nn::{
    load_checkpoint, save_checkpoint, sigmoid, DropoutMode, Layer, Manifest, Mode, Net, NetGrads,
    NetSpec, ParamCursor, Tape, Tensor, CHECKPOINT_FORMAT,
};
use crate::rng::{self, tag};

const SIZE_CLAMP: (f64, f64) = (0.05, 5.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub class_count: usize,
    /// Seed count K; proposals are seeds, so M = K.
    pub seeds: usize,
    /// Proposal feature width F.
    pub feature_dim: usize,
    /// Neighborhood radius in meters.
    pub radius: f64,
    /// Neighbors kept per seed, repeat-padded with the seed itself.
    pub neighbor_cap: usize,
    /// Gradient-reversal coefficient for the discriminator.
    pub grl_lambda: f64,
}

impl Default for DetectorConfig {
    fn default() -> DetectorConfig {
        DetectorConfig {
            class_count: 4,
            seeds: 32,
            feature_dim: 64,
            radius: 0.6,
            neighbor_cap: 32,
            grl_lambda: 0.2,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2
            || self.seeds == 0
            || self.neighbor_cap == 0
            || self.feature_dim < 2
            || self.feature_dim % 2 != 0
        {
            return Err(Error::InvalidArgument(format!(
                "detector config out of range: {self:?}"
            )));
        }
        if self.radius <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "neighborhood radius {} must be positive",
                self.radius
            )));
        }
        Ok(())
    }
}

/// Greedy farthest-point sampling, seeded at index 0.
pub fn fps(points: &[Vec3], k: usize) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {k} seeds from {} points",
            points.len()
        )));
    }
    let mut chosen = Vec::with_capacity(k);
    if k == 0 {
        return Ok(chosen);
    }
    chosen.push(0);
    let mut min_d: Vec<f64> = points.iter().map(|p| p.dist_sq(points[0])).collect();
    while chosen.len() < k {
        let mut best = 0;
        for i in 1..points.len() {
            if min_d[i] > min_d[best] {
                best = i;
            }
        }
        chosen.push(best);
        for i in 0..points.len() {
            let d = points[i].dist_sq(points[best]);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    Ok(chosen)
}

/// Per-scene input to the detector: seed positions plus canonicalized,
/// shape-static neighborhoods (`K * cap` rows of seed-relative offsets).
/// Computing this once lets several passes share the same geometry.
#[derive(Clone, Debug)]
pub struct SceneEncoding {
    pub seed_indices: Vec<usize>,
    pub seeds: Vec<Vec3>,
    pub neighborhoods: Tensor,
}

pub fn encode_scene(cfg: &DetectorConfig, points: &[Vec3]) -> Result<SceneEncoding> {
    cfg.validate()?;
    let seed_indices = fps(points, cfg.seeds)?;
    let seeds: Vec<Vec3> = seed_indices.iter().map(|&i| points[i]).collect();
    let cap = cfg.neighbor_cap;
    let r2 = cfg.radius * cfg.radius;
    let mut rows = Tensor::zeros(&[cfg.seeds * cap, 3]);
    for (s, &seed) in seeds.iter().enumerate() {
        let mut near: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let d = p.dist_sq(seed);
                (d <= r2).then_some((d, i))
            })
            .collect();
        near.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        near.truncate(cap);
        for (n, &(_, i)) in near.iter().enumerate() {
            let off = points[i].sub(seed);
            let row = rows.row_mut(s * cap + n);
            row.copy_from_slice(&off.to_array());
        }
        // Remaining rows stay zero: the seed point repeated.
    }
    Ok(SceneEncoding {
        seed_indices,
        seeds,
        neighborhoods: rows,
    })
}

/// Decoded per-proposal tensors. Raw head outputs are kept so losses can
/// differentiate through the decoding.
#[derive(Clone, Debug)]
pub struct ProposalBatch {
    pub seeds: Vec<Vec3>,
    /// [K, 3] vote offsets.
    pub votes: Tensor,
    /// [K, F] proposal features.
    pub features: Tensor,
    /// [K, 2] objectness logits; column 1 is "object".
    pub obj_logits: Tensor,
    /// [K, C] class logits.
    pub cls_logits: Tensor,
    /// [K, 3] center refinement offsets.
    pub center_offsets: Tensor,
    /// [K, 3] log-size outputs.
    pub log_sizes: Tensor,
    /// [K, 1] iou-score logits.
    pub iou_logits: Tensor,
}

impl ProposalBatch {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn voted_center(&self, k: usize) -> Vec3 {
        self.seeds[k].add(Vec3::from_array([
            self.votes.get(k, 0),
            self.votes.get(k, 1),
            self.votes.get(k, 2),
        ]))
    }

    pub fn decoded_center(&self, k: usize) -> Vec3 {
        self.voted_center(k).add(Vec3::from_array([
            self.center_offsets.get(k, 0),
            self.center_offsets.get(k, 1),
            self.center_offsets.get(k, 2),
        ]))
    }

    /// exp of the log-size head, before clamping. Used by losses so the
    /// gradient never dies at the clamp.
    pub fn raw_size(&self, k: usize) -> Vec3 {
        Vec3::new(
            self.log_sizes.get(k, 0).exp(),
            self.log_sizes.get(k, 1).exp(),
            self.log_sizes.get(k, 2).exp(),
        )
    }

    pub fn decoded_size(&self, k: usize) -> Vec3 {
        let raw = self.raw_size(k);
        Vec3::new(
            raw.x.clamp(SIZE_CLAMP.0, SIZE_CLAMP.1),
            raw.y.clamp(SIZE_CLAMP.0, SIZE_CLAMP.1),
            raw.z.clamp(SIZE_CLAMP.0, SIZE_CLAMP.1),
        )
    }

    pub fn bbox(&self, k: usize) -> Aabb {
        Aabb::new(self.decoded_center(k), self.decoded_size(k))
    }

    pub fn obj_prob(&self, k: usize) -> f64 {
        let a = self.obj_logits.get(k, 0);
        let b = self.obj_logits.get(k, 1);
        sigmoid(b - a)
    }

    pub fn class_probs(&self, k: usize) -> Vec<f64> {
        let row = self.cls_logits.row(k);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Argmax class and its probability; ties break to the lower index.
    pub fn best_class(&self, k: usize) -> (usize, f64) {
        let probs = self.class_probs(k);
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        (best, probs[best])
    }

    pub fn iou_prob(&self, k: usize) -> f64 {
        sigmoid(self.iou_logits.get(k, 0))
    }

    pub fn proposal(&self, k: usize) -> Proposal {
        Proposal {
            seed: self.seeds[k],
            voted_center: self.voted_center(k),
            feature: self.features.row(k).to_vec(),
            obj_prob: self.obj_prob(k),
            class_probs: self.class_probs(k),
            bbox: self.bbox(k),
            iou_score: self.iou_prob(k),
        }
    }
}

/// One decoded proposal in struct form.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub seed: Vec3,
    pub voted_center: Vec3,
    pub feature: Vec<f64>,
    pub obj_prob: f64,
    pub class_probs: Vec<f64>,
    pub bbox: Aabb,
    pub iou_score: f64,
}

/// A post-NMS output box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Aabb,
    pub class_id: usize,
    pub obj_score: f64,
    pub cls_score: f64,
    pub iou_score: f64,
    /// obj_score * cls_score; the NMS ranking key.
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferParams {
    pub nms_iou: f64,
    pub score_floor: f64,
}

impl Default for InferParams {
    fn default() -> InferParams {
        InferParams {
            nms_iou: 0.25,
            score_floor: 0.05,
        }
    }
}

struct ForwardTapes {
    point_mlp: Tape,
    dropout: Tape,
    vote: Tape,
    feat: Tape,
    obj: Tape,
    cls: Tape,
    center: Tape,
    size: Tape,
    iou: Tape,
    /// Winning input row per pooled (seed, channel) entry.
    pool_src: Vec<usize>,
}

/// One differentiable pass: decoded proposals plus everything backward needs.
pub struct ForwardPass {
    pub proposals: ProposalBatch,
    tapes: ForwardTapes,
}

/// Upstream gradients for each raw head output, plus an optional extra
/// gradient applied directly to the proposal features (the discriminator path
/// reports its feature gradient here).
#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub votes: Tensor,
    pub obj: Tensor,
    pub cls: Tensor,
    pub center: Tensor,
    pub size: Tensor,
    pub iou: Tensor,
    pub features: Tensor,
}

impl HeadGrads {
    pub fn zeros(cfg: &DetectorConfig) -> HeadGrads {
        let k = cfg.seeds;
        HeadGrads {
            votes: Tensor::zeros(&[k, 3]),
            obj: Tensor::zeros(&[k, 2]),
            cls: Tensor::zeros(&[k, cfg.class_count]),
            center: Tensor::zeros(&[k, 3]),
            size: Tensor::zeros(&[k, 3]),
            iou: Tensor::zeros(&[k, 1]),
            features: Tensor::zeros(&[k, cfg.feature_dim]),
        }
    }
}

/// Parameter gradients for the whole model, one entry per net.
pub struct DetectorGrads {
    pub point_mlp: NetGrads,
    pub vote_head: NetGrads,
    pub feat_head: NetGrads,
    pub obj_head: NetGrads,
    pub cls_head: NetGrads,
    pub center_head: NetGrads,
    pub size_head: NetGrads,
    pub iou_head: NetGrads,
    pub discriminator: NetGrads,
}

impl DetectorGrads {
    pub fn zeros_like(model: &DetectorModel) -> DetectorGrads {
        DetectorGrads {
            point_mlp: NetGrads::zeros_like(&model.point_mlp),
            vote_head: NetGrads::zeros_like(&model.vote_head),
            feat_head: NetGrads::zeros_like(&model.feat_head),
            obj_head: NetGrads::zeros_like(&model.obj_head),
            cls_head: NetGrads::zeros_like(&model.cls_head),
            center_head: NetGrads::zeros_like(&model.center_head),
            size_head: NetGrads::zeros_like(&model.size_head),
            iou_head: NetGrads::zeros_like(&model.iou_head),
            discriminator: NetGrads::zeros_like(&model.discriminator),
        }
    }

    pub fn add_assign(&mut self, other: &DetectorGrads) {
        self.point_mlp.add_assign(&other.point_mlp);
        self.vote_head.add_assign(&other.vote_head);
        self.feat_head.add_assign(&other.feat_head);
        self.obj_head.add_assign(&other.obj_head);
        self.cls_head.add_assign(&other.cls_head);
        self.center_head.add_assign(&other.center_head);
        self.size_head.add_assign(&other.size_head);
        self.iou_head.add_assign(&other.iou_head);
        self.discriminator.add_assign(&other.discriminator);
    }

    pub fn scale_assign(&mut self, s: f64) {
        self.point_mlp.scale_assign(s);
        self.vote_head.scale_assign(s);
        self.feat_head.scale_assign(s);
        self.obj_head.scale_assign(s);
        self.cls_head.scale_assign(s);
        self.size_head.scale_assign(s);
        self.center_head.scale_assign(s);
        self.iou_head.scale_assign(s);
        self.discriminator.scale_assign(s);
    }

    /// Flat gradient vector in the model's parameter order. The dropout site
    /// holds no parameters, so it does not appear.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.point_mlp.append_flat(&mut out);
        self.vote_head.append_flat(&mut out);
        self.feat_head.append_flat(&mut out);
        self.obj_head.append_flat(&mut out);
        self.cls_head.append_flat(&mut out);
        self.center_head.append_flat(&mut out);
        self.size_head.append_flat(&mut out);
        self.iou_head.append_flat(&mut out);
        self.discriminator.append_flat(&mut out);
        out
    }
}

#[derive(Clone, Debug)]
pub struct DetectorModel {
    pub cfg: DetectorConfig,
    pub point_mlp: Net,
    pub backbone_dropout: Net,
    pub vote_head: Net,
    pub feat_head: Net,
    pub obj_head: Net,
    pub cls_head: Net,
    pub center_head: Net,
    pub size_head: Net,
    pub iou_head: Net,
    pub discriminator: Net,
}

impl DetectorModel {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<DetectorModel> {
        cfg.validate()?;
        let f = cfg.feature_dim;
        let h = f / 2;
        let init = |i: u64| rng::stream(seed, &[tag::INIT, i]);
        let model = DetectorModel {
            cfg,
            // Ends on a dense layer: pooling over post-ReLU values would tie
            // at exact zeros and make the pooled feature nondifferentiable.
            point_mlp: Net::new(vec![
                Layer::dense_xavier(3, h, &mut init(0)),
                Layer::Relu,
                Layer::dense_xavier(h, f, &mut init(1)),
            ]),
            // The single backbone dropout site; inert until a pass forces a
            // rate (teacher perturbation).
            backbone_dropout: Net::new(vec![Layer::Dropout { rate: 0.0 }]),
            vote_head: Net::new(vec![
                Layer::dense_xavier(f, h, &mut init(2)),
                Layer::Relu,
                Layer::dense_xavier(h, 3, &mut init(3)),
            ]),
            feat_head: Net::new(vec![Layer::dense_xavier(f, f, &mut init(4)), Layer::Relu]),
            obj_head: Net::new(vec![Layer::dense_xavier(f, 2, &mut init(5))]),
            cls_head: Net::new(vec![Layer::dense_xavier(f, cfg.class_count, &mut init(6))]),
            center_head: Net::new(vec![
                Layer::dense_xavier(f, h, &mut init(7)),
                Layer::Relu,
                Layer::dense_xavier(h, 3, &mut init(8)),
            ]),
            size_head: Net::new(vec![
                Layer::dense_xavier(f, h, &mut init(9)),
                Layer::Relu,
                Layer::dense_xavier(h, 3, &mut init(10)),
            ]),
            iou_head: Net::new(vec![Layer::dense_xavier(f, 1, &mut init(11))]),
            discriminator: Net::new(vec![
                Layer::GradReverse {
                    lambda: cfg.grl_lambda,
                },
                Layer::dense_xavier(f, h, &mut init(12)),
                Layer::Relu,
                Layer::dense_xavier(h, 1, &mut init(13)),
            ]),
        };
        debug_assert!(model.param_count() < 100_000);
        Ok(model)
    }

    fn nets(&self) -> [(&'static str, &Net); 10] {
        [
            ("point_mlp", &self.point_mlp),
            ("backbone_dropout", &self.backbone_dropout),
            ("vote_head", &self.vote_head),
            ("feat_head", &self.feat_head),
            ("obj_head", &self.obj_head),
            ("cls_head", &self.cls_head),
            ("center_head", &self.center_head),
            ("size_head", &self.size_head),
            ("iou_head", &self.iou_head),
            ("discriminator", &self.discriminator),
        ]
    }

    fn nets_mut(&mut self) -> [&mut Net; 10] {
        [
            &mut self.point_mlp,
            &mut self.backbone_dropout,
            &mut self.vote_head,
            &mut self.feat_head,
            &mut self.obj_head,
            &mut self.cls_head,
            &mut self.center_head,
            &mut self.size_head,
            &mut self.iou_head,
            &mut self.discriminator,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|(_, n)| n.param_count()).sum()
    }

    /// All parameters flattened in net order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, net) in self.nets() {
            net.append_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                context: "detector parameters".into(),
                expected: format!("{}", self.param_count()),
                got: format!("{}", flat.len()),
            });
        }
        let mut cursor = ParamCursor::new(flat);
        for net in self.nets_mut() {
            net.read_params(&mut cursor)?;
        }
        Ok(())
    }

    /// Forward through backbone and all decoder heads. `dropout` reaches only
    /// the backbone dropout site.
    pub fn forward(
        &self,
        enc: &SceneEncoding,
        mode: Mode,
        dropout: DropoutMode,
    ) -> Result<ForwardPass> {
        let k = self.cfg.seeds;
        let cap = self.cfg.neighbor_cap;
        let f = self.cfg.feature_dim;
        if enc.seeds.len() != k || enc.neighborhoods.rows() != k * cap {
            return Err(Error::ShapeMismatch {
                context: "scene encoding".into(),
                expected: format!("{k} seeds x {cap} neighbors"),
                got: format!(
                    "{} seeds, {} rows",
                    enc.seeds.len(),
                    enc.neighborhoods.rows()
                ),
            });
        }
        let (mlp_out, t_mlp) =
            self.point_mlp
                .forward(&enc.neighborhoods, mode, DropoutMode::Auto(None))?;
        // Coordinatewise max-pool per seed neighborhood, remembering the
        // winning row for backward.
        let mut pooled = Tensor::zeros(&[k, f]);
        let mut pool_src = vec![0usize; k * f];
        for s in 0..k {
            for c in 0..f {
                let mut best_row = s * cap;
                let mut best = mlp_out.get(best_row, c);
                for n in 1..cap {
                    let row = s * cap + n;
                    let v = mlp_out.get(row, c);
                    if v > best {
                        best = v;
                        best_row = row;
                    }
                }
                pooled.set(s, c, best);
                pool_src[s * f + c] = best_row;
            }
        }
        let (dropped, t_drop) = self.backbone_dropout.forward(&pooled, mode, dropout)?;
        let (votes, t_vote) = self
            .vote_head
            .forward(&dropped, mode, DropoutMode::Auto(None))?;
        let (features, t_feat) = self
            .feat_head
            .forward(&dropped, mode, DropoutMode::Auto(None))?;
        let (obj_logits, t_obj) = self
            .obj_head
            .forward(&features, mode, DropoutMode::Auto(None))?;
        let (cls_logits, t_cls) = self
            .cls_head
            .forward(&features, mode, DropoutMode::Auto(None))?;
        let (center_offsets, t_center) =
            self.center_head
                .forward(&features, mode, DropoutMode::Auto(None))?;
        let (log_sizes, t_size) = self
            .size_head
            .forward(&features, mode, DropoutMode::Auto(None))?;
        let (iou_logits, t_iou) = self
            .iou_head
            .forward(&features, mode, DropoutMode::Auto(None))?;
        Ok(ForwardPass {
            proposals: ProposalBatch {
                seeds: enc.seeds.clone(),
                votes,
                features,
                obj_logits,
                cls_logits,
                center_offsets,
                log_sizes,
                iou_logits,
            },
            tapes: ForwardTapes {
                point_mlp: t_mlp,
                dropout: t_drop,
                vote: t_vote,
                feat: t_feat,
                obj: t_obj,
                cls: t_cls,
                center: t_center,
                size: t_size,
                iou: t_iou,
                pool_src,
            },
        })
    }

    /// Push head gradients back to every parameter. Consumes the pass.
    pub fn backward(&self, pass: ForwardPass, grads: &HeadGrads) -> Result<DetectorGrads> {
        let k = self.cfg.seeds;
        let cap = self.cfg.neighbor_cap;
        let f = self.cfg.feature_dim;
        let t = pass.tapes;
        let (g_obj, d_feat_obj) = self.obj_head.backward(t.obj, &grads.obj)?;
        let (g_cls, d_feat_cls) = self.cls_head.backward(t.cls, &grads.cls)?;
        let (g_center, d_feat_center) = self.center_head.backward(t.center, &grads.center)?;
        let (g_size, d_feat_size) = self.size_head.backward(t.size, &grads.size)?;
        let (g_iou, d_feat_iou) = self.iou_head.backward(t.iou, &grads.iou)?;

        let mut d_features = grads.features.clone();
        for part in [d_feat_obj, d_feat_cls, d_feat_center, d_feat_size, d_feat_iou] {
            d_features.add_assign(&part);
        }
        let (g_feat, d_dropped_feat) = self.feat_head.backward(t.feat, &d_features)?;
        let (g_vote, d_dropped_vote) = self.vote_head.backward(t.vote, &grads.votes)?;
        let mut d_dropped = d_dropped_feat;
        d_dropped.add_assign(&d_dropped_vote);
        let (_, d_pooled) = self.backbone_dropout.backward(t.dropout, &d_dropped)?;

        // Unpool: route each pooled gradient to its winning row.
        let mut d_mlp = Tensor::zeros(&[k * cap, f]);
        for s in 0..k {
            for c in 0..f {
                let row = t.pool_src[s * f + c];
                let cur = d_mlp.get(row, c);
                d_mlp.set(row, c, cur + d_pooled.get(s, c));
            }
        }
        let (g_mlp, _) = self.point_mlp.backward(t.point_mlp, &d_mlp)?;
        Ok(DetectorGrads {
            point_mlp: g_mlp,
            vote_head: g_vote,
            feat_head: g_feat,
            obj_head: g_obj,
            cls_head: g_cls,
            center_head: g_center,
            size_head: g_size,
            iou_head: g_iou,
            discriminator: NetGrads::zeros_like(&self.discriminator),
        })
    }

    /// Per-proposal probability of coming from the target domain.
    pub fn discriminate(&self, features: &Tensor) -> Result<Vec<f64>> {
        let (logits, _) = self
            .discriminator
            .forward(features, Mode::Eval, DropoutMode::Auto(None))?;
        Ok(logits.data().iter().map(|&z| sigmoid(z)).collect())
    }

    /// Decode, score, and class-agnostically suppress.
    pub fn infer(&self, points: &[Vec3], params: &InferParams) -> Result<Vec<Detection>> {
        let enc = encode_scene(&self.cfg, points)?;
        let pass = self.forward(&enc, Mode::Eval, DropoutMode::Auto(None))?;
        Ok(decode_detections(&pass.proposals, params))
    }

    /// `passes` stochastic teacher passes with the backbone dropout site
    /// forced to `rate`. Masks differ per pass but are fixed by `seed`.
    pub fn perturbed_infer(
        &self,
        points: &[Vec3],
        rate: f64,
        passes: usize,
        params: &InferParams,
        seed: u64,
    ) -> Result<Vec<Vec<Detection>>> {
        if passes == 0 {
            return Err(Error::InvalidArgument("need at least one pass".into()));
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "perturbation rate {rate} outside [0, 1)"
            )));
        }
        let enc = encode_scene(&self.cfg, points)?;
        (0..passes)
            .map(|p| {
                let mut mask_rng = rng::stream(seed, &[tag::PERTURB, p as u64]);
                let dropout = if rate > 0.0 {
                    DropoutMode::Force {
                        rate,
                        rng: &mut mask_rng,
                    }
                } else {
                    DropoutMode::Auto(None)
                };
                let pass = self.forward(&enc, Mode::Eval, dropout)?;
                Ok(decode_detections(&pass.proposals, params))
            })
            .collect()
    }

    fn net_specs(&self) -> Vec<NetSpec> {
        self.nets()
            .iter()
            .map(|(name, net)| NetSpec::of(name, net))
            .collect()
    }

    /// Write a checkpoint directory; `extra` is caller payload stored in the
    /// manifest beside the detector config.
    pub fn save(
        &self,
        dir: &Path,
        seed: u64,
        step: u64,
        extra: serde_json::Value,
    ) -> Result<()> {
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            param_count: self.param_count(),
            seed,
            step,
            nets: self.net_specs(),
            extra: serde_json::json!({
                "config": self.cfg,
                "extra": extra,
            }),
        };
        save_checkpoint(dir, &manifest, &self.params())
    }

    pub fn load(dir: &Path) -> Result<(DetectorModel, Manifest)> {
        let (manifest, params) = load_checkpoint(dir)?;
        let cfg_value = manifest
            .extra
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("manifest has no detector config".into()))?;
        let cfg: DetectorConfig = serde_json::from_value(cfg_value)?;
        let mut model = DetectorModel::new(cfg, 0)?;
        model.set_params(&params)?;
        Ok((model, manifest))
    }
}

/// Shared decode path for `infer` and `perturbed_infer`.
fn decode_detections(batch: &ProposalBatch, params: &InferParams) -> Vec<Detection> {
    let mut candidates = Vec::with_capacity(batch.len());
    for k in 0..batch.len() {
        let obj = batch.obj_prob(k);
        let (class_id, cls) = batch.best_class(k);
        let score = obj * cls;
        if score < params.score_floor {
            continue;
        }
        candidates.push(Detection {
            bbox: batch.bbox(k),
            class_id,
            obj_score: obj,
            cls_score: cls,
            iou_score: batch.iou_prob(k),
            score,
        });
    }
    let scored: Vec<ScoredBox> = candidates
        .iter()
        .map(|d| ScoredBox {
            aabb: d.bbox,
            class_id: d.class_id,
            score: d.score,
        })
        .collect();
    geometry::nms(&scored, params.nms_iou)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}
