//! Training orchestration: source pretraining and the mean-teacher
//! adaptation loop with pseudo-label consistency and domain alignment.
//!
//! Every random draw inside a step is keyed by the global step counter, so a
//! run resumed from a saved state replays the uninterrupted run bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::{augment_scene, AugmentParams};
use crate::detector::{
    encode_scene, DetectorConfig, DetectorGrads, DetectorModel, ForwardPass, HeadGrads,
    InferParams,
};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::geometry::{Aabb, Vec3};
use crate::losses::{
    assign_targets, hla_loss, supervised_loss, total_loss, unsupervised_loss, LossReport,
    LossWeights, SupervisedLoss, R_NEG, R_POS,
};
use crate::nn::{ema_update, Adam, AdamConfig, DropoutMode, Mode, Tensor};
use crate::pseudo::{
    cla_targets, collect_scores, filter_pseudo, mpr_weights, MprParams, PcatParams, PseudoLabel,
    ThresholdState,
};
use crate::rng::{self, tag};
use crate::scenegen::{build_object_bank, DatasetMeta, ObjectBank, Scene};

pub const STATE_FORMAT: &str = "ohda-train-state-v1";

/// Pipeline component switches, all on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub oaa: bool,
    pub vss: bool,
    pub cla: bool,
    pub hla: bool,
    pub pcat: bool,
    pub mpr: bool,
}

impl Default for Toggles {
    fn default() -> Toggles {
        Toggles {
            oaa: true,
            vss: true,
            cla: true,
            hla: true,
            pcat: true,
            mpr: true,
        }
    }
}

impl Toggles {
    pub fn none() -> Toggles {
        Toggles {
            oaa: false,
            vss: false,
            cla: false,
            hla: false,
            pcat: false,
            mpr: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Desk-scale defaults; the full protocol uses 50 and 100.
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    /// Scenes drawn per optimization step from each domain.
    pub scenes_per_step: usize,
    /// Teacher EMA momentum, applied after every optimizer step.
    pub ema_momentum: f64,
    pub adam: AdamConfig,
    pub detector: DetectorConfig,
    pub weights: LossWeights,
    pub augment: AugmentParams,
    pub pcat: PcatParams,
    pub mpr: MprParams,
    pub infer: InferParams,
    pub toggles: Toggles,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            seed: 0,
            pretrain_epochs: 30,
            adapt_epochs: 40,
            scenes_per_step: 1,
            ema_momentum: 0.99,
            adam: AdamConfig::default(),
            detector: DetectorConfig::default(),
            weights: LossWeights::default(),
            augment: AugmentParams::default(),
            pcat: PcatParams::default(),
            mpr: MprParams::default(),
            infer: InferParams::default(),
            toggles: Toggles::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.augment.validate()?;
        self.pcat.validate()?;
        if self.scenes_per_step == 0 {
            return Err(Error::InvalidArgument(
                "need at least one scene per step".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::InvalidArgument(format!(
                "EMA momentum {} outside [0, 1]",
                self.ema_momentum
            )));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.adam.lr
            )));
        }
        if !(self.adam.lr_decay_steps >= 0.0 && self.adam.lr_decay_steps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lr decay scale {} must be finite and non-negative",
                self.adam.lr_decay_steps
            )));
        }
        if self.mpr.passes == 0 {
            return Err(Error::InvalidArgument(
                "perturbed inference needs at least one pass".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.mpr.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "perturbation rate {} outside [0, 1)",
                self.mpr.dropout_rate
            )));
        }
        if self.mpr.lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "consistency bonus {} must be nonnegative",
                self.mpr.lambda
            )));
        }
        Ok(())
    }
}

/// Per-epoch snapshot kept in the state's metric history. Only quantities
/// that are pure functions of the state at the epoch boundary go here, so a
/// resumed run reconstructs the same history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    /// thresholds[class][metric] after the epoch's update.
    pub thresholds: Vec<[f64; 3]>,
    pub map25: Option<f64>,
    pub map50: Option<f64>,
}

/// Everything a run needs to continue: both models, optimizer moments,
/// thresholds, counters, and the per-epoch history. The teacher is only ever
/// written by the EMA update, never by the optimizer.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: DetectorModel,
    pub teacher: DetectorModel,
    pub optimizer: Adam,
    pub thresholds: ThresholdState,
    /// Completed epochs in the current stage.
    pub epoch: u64,
    /// Optimization steps since the beginning of pretraining.
    pub step: u64,
    /// Global step at which the current stage started.
    pub stage_start: u64,
    /// Per-class mean extents measured on the source training set.
    pub class_sizes: Vec<Vec3>,
    pub history: Vec<EpochRecord>,
}

/// JSON-lines sink for step and epoch records.
pub struct TrainLog {
    sink: Option<(PathBuf, BufWriter<File>)>,
    capture: bool,
    pub records: Vec<serde_json::Value>,
}

impl TrainLog {
    pub fn disabled() -> TrainLog {
        TrainLog {
            sink: None,
            capture: false,
            records: Vec::new(),
        }
    }

    /// Keep records in memory instead of (or in addition to) a file.
    pub fn capturing() -> TrainLog {
        TrainLog {
            sink: None,
            capture: true,
            records: Vec::new(),
        }
    }

    pub fn to_file(path: &Path) -> Result<TrainLog> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(TrainLog {
            sink: Some((path.to_path_buf(), BufWriter::new(file))),
            capture: false,
            records: Vec::new(),
        })
    }

    pub fn emit(&mut self, record: serde_json::Value) -> Result<()> {
        if let Some((path, sink)) = &mut self.sink {
            serde_json::to_writer(&mut *sink, &record)?;
            writeln!(sink).map_err(|e| Error::io(path.clone(), e))?;
        }
        if self.capture {
            self.records.push(record);
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, sink)) = &mut self.sink {
            sink.flush().map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    }
}

/// Mean ground-truth extents per class over a labeled scene set; classes
/// without instances fall back to unit extents.
pub fn compute_class_sizes(scenes: &[Scene], class_count: usize) -> Vec<Vec3> {
    let mut sums = vec![Vec3::ZERO; class_count];
    let mut counts = vec![0usize; class_count];
    for scene in scenes {
        for obj in &scene.objects {
            if obj.class_id < class_count {
                sums[obj.class_id] = sums[obj.class_id].add(obj.bbox.size);
                counts[obj.class_id] += 1;
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &n)| {
            if n == 0 {
                Vec3::splat(1.0)
            } else {
                s.scale(1.0 / n as f64)
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    format: String,
    detector: DetectorConfig,
    student: Vec<f64>,
    teacher: Vec<f64>,
    optimizer: Adam,
    thresholds: ThresholdState,
    epoch: u64,
    step: u64,
    stage_start: u64,
    class_sizes: Vec<Vec3>,
    history: Vec<EpochRecord>,
}

/// Serialize a full training state. Parameters and moments are written as
/// JSON f64 so the round trip is bit-exact.
pub fn save_state(state: &TrainState, path: &Path) -> Result<()> {
    let blob = StateFile {
        format: STATE_FORMAT.into(),
        detector: state.student.cfg,
        student: state.student.params(),
        teacher: state.teacher.params(),
        optimizer: state.optimizer.clone(),
        thresholds: state.thresholds.clone(),
        epoch: state.epoch,
        step: state.step,
        stage_start: state.stage_start,
        class_sizes: state.class_sizes.clone(),
        history: state.history.clone(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer(&mut writer, &blob)?;
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let blob: StateFile = serde_json::from_reader(BufReader::new(file))?;
    if blob.format != STATE_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported state format {:?}",
            blob.format
        )));
    }
    let mut student = DetectorModel::new(blob.detector, 0)?;
    student.set_params(&blob.student)?;
    let mut teacher = DetectorModel::new(blob.detector, 0)?;
    teacher.set_params(&blob.teacher)?;
    Ok(TrainState {
        student,
        teacher,
        optimizer: blob.optimizer,
        thresholds: blob.thresholds,
        epoch: blob.epoch,
        step: blob.step,
        stage_start: blob.stage_start,
        class_sizes: blob.class_sizes,
        history: blob.history,
    })
}

fn step_rng(seed: u64, step: u64, lane: u64) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, &[tag::STEP, step, lane])
}

fn step_key(seed: u64, step: u64, lane: u64, sub: u64) -> u64 {
    rng::stream_key(seed, &[tag::STEP, step, lane, sub])
}

fn ground_truth(scene: &Scene) -> Vec<(Aabb, usize)> {
    scene
        .objects
        .iter()
        .map(|o| (o.bbox, o.class_id))
        .collect()
}

fn prepared_source(
    cfg: &TrainConfig,
    scene: &Scene,
    bank: &ObjectBank,
    seed: u64,
) -> Result<Scene> {
    let t = cfg.toggles;
    if t.oaa || t.vss {
        augment_scene(scene, bank, &cfg.augment, t.oaa, t.vss, seed)
    } else {
        Ok(scene.clone())
    }
}

fn supervised_pass(
    cfg: &TrainConfig,
    student: &DetectorModel,
    scene: &Scene,
    class_sizes: &[Vec3],
) -> Result<(SupervisedLoss, ForwardPass, HeadGrads)> {
    let enc = encode_scene(&cfg.detector, &scene.points)?;
    let pass = student.forward(&enc, Mode::Train, DropoutMode::Auto(None))?;
    let gts = ground_truth(scene);
    let assign = assign_targets(&pass.proposals, &gts, R_POS, R_NEG);
    let (sup, grads) = supervised_loss(&pass.proposals, &assign, &gts, class_sizes, &cfg.weights)?;
    Ok((sup, pass, grads))
}

fn abort_if_non_finite(
    total: f64,
    step: u64,
    scene: usize,
    components: &impl Serialize,
) -> Result<()> {
    if total.is_finite() {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        step,
        scene,
        detail: serde_json::to_string(components).unwrap_or_else(|e| e.to_string()),
    })
}

fn add_sup(into: &mut SupervisedLoss, other: &SupervisedLoss) {
    into.vote += other.vote;
    into.objectness += other.objectness;
    into.center += other.center;
    into.size += other.size;
    into.semantic += other.semantic;
    into.iou += other.iou;
    into.total += other.total;
}

fn scale_sup(l: &mut SupervisedLoss, s: f64) {
    l.vote *= s;
    l.objectness *= s;
    l.center *= s;
    l.size *= s;
    l.semantic *= s;
    l.iou *= s;
    l.total *= s;
}

fn add_scaled(dst: &mut Tensor, src: &Tensor, s: f64) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, v) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s * v;
    }
}

fn add_scaled_heads(dst: &mut HeadGrads, src: &HeadGrads, s: f64) {
    add_scaled(&mut dst.votes, &src.votes, s);
    add_scaled(&mut dst.obj, &src.obj, s);
    add_scaled(&mut dst.cls, &src.cls, s);
    add_scaled(&mut dst.center, &src.center, s);
    add_scaled(&mut dst.size, &src.size, s);
    add_scaled(&mut dst.iou, &src.iou, s);
    add_scaled(&mut dst.features, &src.features, s);
}

fn optimize(state: &mut TrainState, grads: &DetectorGrads) -> Result<()> {
    let mut params = state.student.params();
    state.optimizer.step(&mut params, &grads.to_flat())?;
    state.student.set_params(&params)
}

fn check_dataset(cfg: &TrainConfig, meta: &DatasetMeta) -> Result<()> {
    if meta.class_names.len() != cfg.detector.class_count {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, detector expects {}",
            meta.class_names.len(),
            cfg.detector.class_count
        )));
    }
    Ok(())
}

/// One pretraining step: draw a source batch, apply the enabled
/// augmentations, and take an Adam step on the supervised loss.
pub fn pretrain_step(
    cfg: &TrainConfig,
    state: &mut TrainState,
    source: &[Scene],
    bank: &ObjectBank,
) -> Result<LossReport> {
    let s = state.step;
    let b = cfg.scenes_per_step;
    let mut draw = step_rng(cfg.seed, s, 0);
    let mut grand = DetectorGrads::zeros_like(&state.student);
    let mut sup_sum = SupervisedLoss::default();
    for j in 0..b {
        let idx = draw.gen_range(0..source.len());
        let scene = prepared_source(cfg, &source[idx], bank, step_key(cfg.seed, s, 1, j as u64))?;
        let (sup, pass, head_grads) =
            supervised_pass(cfg, &state.student, &scene, &state.class_sizes)?;
        abort_if_non_finite(sup.total, s, idx, &sup)?;
        grand.add_assign(&state.student.backward(pass, &head_grads)?);
        add_sup(&mut sup_sum, &sup);
    }
    let inv = 1.0 / b as f64;
    grand.scale_assign(inv);
    scale_sup(&mut sup_sum, inv);
    optimize(state, &grand)?;
    state.step += 1;
    Ok(total_loss(sup_sum, 0.0, 0.0, &cfg.weights))
}

/// Train a fresh detector on the labeled source set.
pub fn pretrain(
    cfg: &TrainConfig,
    source: &[Scene],
    meta: &DatasetMeta,
    log: &mut TrainLog,
) -> Result<TrainState> {
    cfg.validate()?;
    check_dataset(cfg, meta)?;
    let student = DetectorModel::new(cfg.detector, cfg.seed)?;
    let teacher = student.clone();
    let optimizer = Adam::new(cfg.adam, student.param_count());
    let thresholds = ThresholdState::new(cfg.detector.class_count, cfg.pcat)?;
    let class_sizes = compute_class_sizes(source, cfg.detector.class_count);
    let state = TrainState {
        student,
        teacher,
        optimizer,
        thresholds,
        epoch: 0,
        step: 0,
        stage_start: 0,
        class_sizes,
        history: Vec::new(),
    };
    pretrain_from(cfg, state, source, meta, log)
}

/// Continue pretraining from `state` until `cfg.pretrain_epochs` epochs are
/// complete. The teacher is synchronized to the student when the stage ends.
pub fn pretrain_from(
    cfg: &TrainConfig,
    mut state: TrainState,
    source: &[Scene],
    meta: &DatasetMeta,
    log: &mut TrainLog,
) -> Result<TrainState> {
    cfg.validate()?;
    check_dataset(cfg, meta)?;
    if source.is_empty() {
        return Err(Error::InvalidArgument(
            "pretraining needs source scenes".into(),
        ));
    }
    let bank = build_object_bank(&meta.spec, meta.seed)?;
    let spe = source.len().div_ceil(cfg.scenes_per_step);
    while state.epoch < cfg.pretrain_epochs as u64 {
        let done = (state.step - state.stage_start) as usize - state.epoch as usize * spe;
        for _ in done..spe {
            let report = pretrain_step(cfg, &mut state, source, &bank)?;
            log.emit(json!({
                "kind": "step",
                "stage": "pretrain",
                "step": state.step - 1,
                "epoch": state.epoch,
                "loss": report,
            }))?;
        }
        state.epoch += 1;
        log.emit(json!({"kind": "epoch", "stage": "pretrain", "epoch": state.epoch}))?;
    }
    let snapshot = state.student.params();
    state.teacher.set_params(&snapshot)?;
    log.flush()?;
    Ok(state)
}

/// Teacher pseudo labels for one target scene, recording the raw detection
/// scores into the epoch buffers when progressive thresholds are on.
fn step_pseudo_labels(
    cfg: &TrainConfig,
    state: &mut TrainState,
    scene: &Scene,
    step: u64,
    sub: u64,
) -> Result<Vec<PseudoLabel>> {
    let dets = state.teacher.infer(&scene.points, &cfg.infer)?;
    if cfg.toggles.pcat {
        for det in &dets {
            state.thresholds.record(det);
        }
    }
    let labels = filter_pseudo(&dets, &state.thresholds);
    if !cfg.toggles.mpr {
        return Ok(labels);
    }
    let perturbed: Vec<Vec<PseudoLabel>> = state
        .teacher
        .perturbed_infer(
            &scene.points,
            cfg.mpr.dropout_rate,
            cfg.mpr.passes,
            &cfg.infer,
            step_key(cfg.seed, step, 2, sub),
        )?
        .iter()
        .map(|d| filter_pseudo(d, &state.thresholds))
        .collect();
    mpr_weights(labels, &perturbed, cfg.mpr.lambda)
}

/// One adaptation step: supervised loss on an augmented source batch,
/// pseudo-label consistency and domain alignment on a raw target batch, one
/// Adam step on student plus discriminator, then the teacher EMA update.
pub fn adapt_step(
    cfg: &TrainConfig,
    state: &mut TrainState,
    source: &[Scene],
    bank: &ObjectBank,
    target: &[Scene],
) -> Result<LossReport> {
    let t = cfg.toggles;
    let s = state.step;
    let b = cfg.scenes_per_step;
    let mut draw = step_rng(cfg.seed, s, 0);
    let mut grand = DetectorGrads::zeros_like(&state.student);
    let mut sup_sum = SupervisedLoss::default();
    let mut hla_sum = 0.0;
    let mut cla_sum = 0.0;
    for j in 0..b {
        let src_idx = draw.gen_range(0..source.len());
        let scene = prepared_source(
            cfg,
            &source[src_idx],
            bank,
            step_key(cfg.seed, s, 1, j as u64),
        )?;
        let (sup, pass_s, mut hg_src) =
            supervised_pass(cfg, &state.student, &scene, &state.class_sizes)?;
        add_sup(&mut sup_sum, &sup);

        let mut hla = 0.0;
        let mut cla = 0.0;
        let mut pass_t = None;
        if t.cla || t.hla {
            let tgt_idx = (s as usize)
                .wrapping_mul(b)
                .wrapping_add(j)
                % target.len();
            let tscene = &target[tgt_idx];
            let enc_t = encode_scene(&cfg.detector, &tscene.points)?;
            let fwd = state
                .student
                .forward(&enc_t, Mode::Train, DropoutMode::Auto(None))?;
            let mut hg_tgt = HeadGrads::zeros(&cfg.detector);

            if t.cla {
                let labels = step_pseudo_labels(cfg, state, tscene, s, j as u64)?;
                let (targets, omega) =
                    cla_targets(&fwd.proposals, &labels, cfg.pcat.match_radius);
                let (value, grads) = unsupervised_loss(
                    &fwd.proposals,
                    &targets,
                    &omega,
                    &state.class_sizes,
                    &cfg.weights,
                )?;
                cla = value;
                add_scaled_heads(&mut hg_tgt, &grads, cfg.weights.lambda_cla);
            }
            if t.hla {
                let (value, d_src, d_tgt, mut g_disc) = hla_loss(
                    &state.student,
                    &pass_s.proposals.features,
                    &fwd.proposals.features,
                )?;
                hla = value;
                add_scaled(&mut hg_src.features, &d_src, cfg.weights.lambda_hla);
                add_scaled(&mut hg_tgt.features, &d_tgt, cfg.weights.lambda_hla);
                g_disc.scale_assign(cfg.weights.lambda_hla);
                grand.discriminator.add_assign(&g_disc);
            }
            let report = total_loss(sup, hla, cla, &cfg.weights);
            abort_if_non_finite(
                report.total,
                s,
                src_idx,
                &json!({"loss": report, "target_scene": tgt_idx}),
            )?;
            pass_t = Some((fwd, hg_tgt));
        } else {
            abort_if_non_finite(sup.total, s, src_idx, &sup)?;
        }

        grand.add_assign(&state.student.backward(pass_s, &hg_src)?);
        if let Some((fwd, hg_tgt)) = pass_t {
            grand.add_assign(&state.student.backward(fwd, &hg_tgt)?);
        }
        hla_sum += hla;
        cla_sum += cla;
    }
    let inv = 1.0 / b as f64;
    grand.scale_assign(inv);
    scale_sup(&mut sup_sum, inv);
    hla_sum *= inv;
    cla_sum *= inv;
    optimize(state, &grand)?;
    let mut shadow = state.teacher.params();
    ema_update(&mut shadow, &state.student.params(), cfg.ema_momentum);
    state.teacher.set_params(&shadow)?;
    state.step += 1;
    Ok(total_loss(sup_sum, hla_sum, cla_sum, &cfg.weights))
}

/// Adaptation start state: student and teacher both copy the pretrained
/// model and the optimizer carries over, so a run with every component off
/// continues pretraining exactly. With progressive thresholds on, the
/// teacher's scores over the whole target set seed the initial thresholds;
/// with them off, thresholds stay fixed at the strict upper bounds.
pub fn init_adapt(cfg: &TrainConfig, start: &TrainState, target: &[Scene]) -> Result<TrainState> {
    cfg.validate()?;
    if start.student.cfg != cfg.detector {
        return Err(Error::Checkpoint(
            "checkpoint architecture differs from the configured detector".into(),
        ));
    }
    if target.is_empty() {
        return Err(Error::InvalidArgument(
            "adaptation needs target scenes".into(),
        ));
    }
    let student = start.student.clone();
    let teacher = student.clone();
    let mut thresholds = ThresholdState::new(cfg.detector.class_count, cfg.pcat)?;
    if cfg.toggles.pcat {
        collect_scores(&teacher, target, &cfg.infer, &mut thresholds)?;
        thresholds.initialize_thresholds();
    }
    Ok(TrainState {
        student,
        teacher,
        optimizer: start.optimizer.clone(),
        thresholds,
        epoch: 0,
        step: start.step,
        stage_start: start.step,
        class_sizes: start.class_sizes.clone(),
        history: Vec::new(),
    })
}

pub fn adapt(
    cfg: &TrainConfig,
    start: &TrainState,
    source: &[Scene],
    src_meta: &DatasetMeta,
    target: &[Scene],
    target_eval: &[Scene],
    log: &mut TrainLog,
) -> Result<TrainState> {
    let state = init_adapt(cfg, start, target)?;
    adapt_from(cfg, state, source, src_meta, target, target_eval, log)
}

/// Continue adaptation from `state` until `cfg.adapt_epochs` epochs are
/// complete; one epoch is one traversal of the target training set. Each
/// epoch ends with a threshold update and an evaluation of the student on
/// the held-out target split.
#[allow(clippy::too_many_arguments)]
pub fn adapt_from(
    cfg: &TrainConfig,
    mut state: TrainState,
    source: &[Scene],
    src_meta: &DatasetMeta,
    target: &[Scene],
    target_eval: &[Scene],
    log: &mut TrainLog,
) -> Result<TrainState> {
    cfg.validate()?;
    check_dataset(cfg, src_meta)?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidArgument(
            "adaptation needs source and target scenes".into(),
        ));
    }
    let bank = build_object_bank(&src_meta.spec, src_meta.seed)?;
    let class_names = src_meta.class_names.clone();
    let spe = target.len().div_ceil(cfg.scenes_per_step);
    while state.epoch < cfg.adapt_epochs as u64 {
        let done = (state.step - state.stage_start) as usize - state.epoch as usize * spe;
        for _ in done..spe {
            let report = adapt_step(cfg, &mut state, source, &bank, target)?;
            log.emit(json!({
                "kind": "step",
                "stage": "adapt",
                "step": state.step - 1,
                "epoch": state.epoch,
                "loss": report,
            }))?;
        }
        state.epoch += 1;
        if cfg.toggles.pcat {
            state.thresholds.update();
        }
        let (map25, map50) = if target_eval.is_empty() {
            (None, None)
        } else {
            let report = evaluate(&state.student, target_eval, &class_names, &cfg.infer)?;
            (Some(report.map25), Some(report.map50))
        };
        state.history.push(EpochRecord {
            epoch: state.epoch,
            thresholds: state.thresholds.thresholds.clone(),
            map25,
            map50,
        });
        log.emit(json!({
            "kind": "epoch",
            "stage": "adapt",
            "epoch": state.epoch,
            "thresholds": state.thresholds.thresholds,
            "map25": map25,
            "map50": map50,
        }))?;
    }
    log.flush()?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{gen_scenes, DomainSpec};

    fn tiny_source_spec() -> DomainSpec {
        let mut spec = DomainSpec::source_default();
        spec.room = [4.0, 4.0, 3.0];
        spec.points_per_scene = 220;
        spec.objects_min = 3;
        spec.objects_max = 4;
        spec
    }

    fn tiny_target_spec() -> DomainSpec {
        let mut spec = DomainSpec::target_default();
        spec.room = [4.0, 4.0, 3.0];
        spec.points_per_scene = 220;
        spec.objects_min = 3;
        spec.objects_max = 4;
        spec.clutter_points = 32;
        spec
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            seed: 7,
            pretrain_epochs: 1,
            adapt_epochs: 1,
            detector: DetectorConfig {
                class_count: 4,
                seeds: 8,
                feature_dim: 16,
                radius: 0.8,
                neighbor_cap: 8,
                grl_lambda: 0.2,
            },
            ..TrainConfig::default()
        }
    }

    struct Data {
        source: Vec<Scene>,
        meta: DatasetMeta,
        target: Vec<Scene>,
        target_eval: Vec<Scene>,
    }

    fn tiny_data() -> Data {
        let spec = tiny_source_spec();
        let bank = build_object_bank(&spec, 11).unwrap();
        let source = gen_scenes(&spec, &bank, 11, 6).unwrap();
        let meta = DatasetMeta {
            class_names: spec.class_names(),
            frequencies: spec.frequencies(),
            spec: spec.clone(),
            seed: 11,
            scene_count: source.len(),
        };
        let tspec = tiny_target_spec();
        let tbank = build_object_bank(&tspec, 12).unwrap();
        let target = gen_scenes(&tspec, &tbank, 13, 6).unwrap();
        let target_eval = gen_scenes(&tspec, &tbank, 14, 2).unwrap();
        Data {
            source,
            meta,
            target,
            target_eval,
        }
    }

    fn source_bank(data: &Data) -> ObjectBank {
        build_object_bank(&data.meta.spec, data.meta.seed).unwrap()
    }

    #[test]
    fn zero_epochs_leave_the_initial_parameters() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.pretrain_epochs = 0;
        let state = pretrain(&cfg, &data.source, &data.meta, &mut TrainLog::disabled()).unwrap();
        let fresh = DetectorModel::new(cfg.detector, cfg.seed).unwrap();
        assert_eq!(state.student.params(), fresh.params());
        assert_eq!(state.teacher.params(), fresh.params());
        assert_eq!(state.step, 0);
    }

    #[test]
    fn initialization_ignores_the_toggles() {
        let data = tiny_data();
        let mut on = tiny_cfg();
        on.pretrain_epochs = 0;
        let mut off = on.clone();
        off.toggles = Toggles::none();
        let a = pretrain(&on, &data.source, &data.meta, &mut TrainLog::disabled()).unwrap();
        let b = pretrain(&off, &data.source, &data.meta, &mut TrainLog::disabled()).unwrap();
        assert_eq!(a.student.params(), b.student.params());
    }

    #[test]
    fn pretraining_brings_the_supervised_loss_down() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.pretrain_epochs = 8;
        cfg.adam.lr = 3e-3;
        let mut log = TrainLog::capturing();
        pretrain(&cfg, &data.source, &data.meta, &mut log).unwrap();
        let losses: Vec<f64> = log
            .records
            .iter()
            .filter(|r| r["kind"] == "step")
            .map(|r| r["loss"]["supervised"]["total"].as_f64().unwrap())
            .collect();
        assert_eq!(losses.len(), 48);
        let head: f64 = losses[..12].iter().sum::<f64>() / 12.0;
        let tail: f64 = losses[36..].iter().sum::<f64>() / 12.0;
        assert!(
            tail < head,
            "supervised loss did not decrease: {head} -> {tail}"
        );
    }

    #[test]
    fn pretraining_is_deterministic() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let a = pretrain(&cfg, &data.source, &data.meta, &mut TrainLog::disabled()).unwrap();
        let b = pretrain(&cfg, &data.source, &data.meta, &mut TrainLog::disabled()).unwrap();
        assert_eq!(a.student.params(), b.student.params());
        assert_eq!(a.optimizer.step_count(), b.optimizer.step_count());
    }

    #[test]
    fn teacher_tracks_the_student_by_ema_replay() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.ema_momentum = 0.9;
        let start = pretrain(&cfg, &data.source, &data.meta, &mut TrainLog::disabled()).unwrap();
        let mut state = init_adapt(&cfg, &start, &data.target).unwrap();
        let bank = source_bank(&data);
        let mut shadow = state.teacher.params();
        for _ in 0..10 {
            adapt_step(&cfg, &mut state, &data.source, &bank, &data.target).unwrap();
            ema_update(&mut shadow, &state.student.params(), cfg.ema_momentum);
            assert_eq!(state.teacher.params(), shadow);
        }
    }

    #[test]
    fn unit_momentum_with_everything_off_freezes_the_teacher() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.toggles = Toggles::none();
        cfg.ema_momentum = 1.0;
        let start = pretrain(&cfg, &data.source, &data.meta, &mut TrainLog::disabled()).unwrap();
        let mut state = init_adapt(&cfg, &start, &data.target).unwrap();
        let bank = source_bank(&data);
        let before = state.teacher.params();
        let scores_before: Vec<f64> = state
            .teacher
            .infer(&data.target[0].points, &cfg.infer)
            .unwrap()
            .iter()
            .map(|d| d.score)
            .collect();
        for _ in 0..5 {
            adapt_step(&cfg, &mut state, &data.source, &bank, &data.target).unwrap();
        }
        assert_eq!(state.teacher.params(), before);
        let scores_after: Vec<f64> = state
            .teacher
            .infer(&data.target[0].points, &cfg.infer)
            .unwrap()
            .iter()
            .map(|d| d.score)
            .collect();
        assert_eq!(scores_before, scores_after);
        assert_ne!(state.student.params(), before, "student should keep training");
    }

    #[test]
    fn toggles_off_adaptation_continues_pretraining_exactly() {
        let data = tiny_data();
        let mut straight = tiny_cfg();
        straight.toggles = Toggles::none();
        straight.pretrain_epochs = 3;
        let full = pretrain(&straight, &data.source, &data.meta, &mut TrainLog::disabled()).unwrap();

        let mut split = straight.clone();
        split.pretrain_epochs = 2;
        split.adapt_epochs = 1;
        let mid = pretrain(&split, &data.source, &data.meta, &mut TrainLog::disabled()).unwrap();
        let resumed = adapt(
            &split,
            &mid,
            &data.source,
            &data.meta,
            &data.source,
            &[],
            &mut TrainLog::disabled(),
        )
        .unwrap();

        assert_eq!(full.student.params(), resumed.student.params());
        assert_eq!(full.step, resumed.step);
    }

    #[test]
    fn distinct_toggle_sets_walk_distinct_trajectories() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let start = pretrain(&cfg, &data.source, &data.meta, &mut TrainLog::disabled()).unwrap();

        let mut cla_only = cfg.clone();
        cla_only.toggles = Toggles {
            cla: true,
            pcat: true,
            mpr: true,
            ..Toggles::none()
        };
        let mut hla_only = cfg.clone();
        hla_only.toggles = Toggles {
            hla: true,
            ..Toggles::none()
        };

        let a = adapt(
            &cla_only,
            &start,
            &data.source,
            &data.meta,
            &data.target,
            &[],
            &mut TrainLog::disabled(),
        )
        .unwrap();
        let b = adapt(
            &hla_only,
            &start,
            &data.source,
            &data.meta,
            &data.target,
            &[],
            &mut TrainLog::disabled(),
        )
        .unwrap();
        assert_ne!(a.student.params(), b.student.params());
    }

    #[test]
    fn adaptation_writes_history_and_updates_thresholds() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.adapt_epochs = 2;
        let start = pretrain(&cfg, &data.source, &data.meta, &mut TrainLog::disabled()).unwrap();
        let state = adapt(
            &cfg,
            &start,
            &data.source,
            &data.meta,
            &data.target,
            &data.target_eval,
            &mut TrainLog::disabled(),
        )
        .unwrap();
        assert_eq!(state.history.len(), 2);
        assert_eq!(state.history[0].epoch, 1);
        assert!(state.history.iter().all(|r| r.map25.is_some()));
        // initialization plus one update per epoch
        assert_eq!(state.thresholds.updates, 3);
        for row in &state.thresholds.thresholds {
            for (m, &t) in row.iter().enumerate() {
                assert!(t >= cfg.pcat.t_low[m] && t <= cfg.pcat.t_high[m]);
            }
        }
    }

    #[test]
    fn state_files_round_trip_bit_for_bit() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let start = pretrain(&cfg, &data.source, &data.meta, &mut TrainLog::disabled()).unwrap();
        let mut state = init_adapt(&cfg, &start, &data.target).unwrap();
        let bank = source_bank(&data);
        for _ in 0..3 {
            adapt_step(&cfg, &mut state, &data.source, &bank, &data.target).unwrap();
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        save_state(&state, &path).unwrap();
        let mut loaded = load_state(&path).unwrap();

        assert_eq!(loaded.student.params(), state.student.params());
        assert_eq!(loaded.teacher.params(), state.teacher.params());
        assert_eq!(loaded.thresholds, state.thresholds);
        assert_eq!(loaded.epoch, state.epoch);
        assert_eq!(loaded.step, state.step);
        assert_eq!(loaded.stage_start, state.stage_start);
        assert_eq!(loaded.class_sizes, state.class_sizes);
        assert_eq!(loaded.history, state.history);
        assert_eq!(
            serde_json::to_string(&loaded.optimizer).unwrap(),
            serde_json::to_string(&state.optimizer).unwrap()
        );

        // optimizer moments must be exact: one more identical step each
        adapt_step(&cfg, &mut state, &data.source, &bank, &data.target).unwrap();
        adapt_step(&cfg, &mut loaded, &data.source, &bank, &data.target).unwrap();
        assert_eq!(loaded.student.params(), state.student.params());
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.adapt_epochs = 2;
        let start = pretrain(&cfg, &data.source, &data.meta, &mut TrainLog::disabled()).unwrap();

        let straight = adapt(
            &cfg,
            &start,
            &data.source,
            &data.meta,
            &data.target,
            &data.target_eval,
            &mut TrainLog::disabled(),
        )
        .unwrap();

        let mut state = init_adapt(&cfg, &start, &data.target).unwrap();
        let bank = source_bank(&data);
        for _ in 0..4 {
            adapt_step(&cfg, &mut state, &data.source, &bank, &data.target).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        save_state(&state, &path).unwrap();
        let resumed = adapt_from(
            &cfg,
            load_state(&path).unwrap(),
            &data.source,
            &data.meta,
            &data.target,
            &data.target_eval,
            &mut TrainLog::disabled(),
        )
        .unwrap();

        assert_eq!(straight.student.params(), resumed.student.params());
        assert_eq!(straight.teacher.params(), resumed.teacher.params());
        assert_eq!(straight.thresholds, resumed.thresholds);
        assert_eq!(straight.history, resumed.history);
    }

    #[test]
    fn corrupted_state_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let garbage = dir.path().join("garbage.json");
        std::fs::write(&garbage, b"not a state {{{").unwrap();
        assert!(load_state(&garbage).is_err());

        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.pretrain_epochs = 0;
        let state = pretrain(&cfg, &data.source, &data.meta, &mut TrainLog::disabled()).unwrap();
        let path = dir.path().join("state.json");
        save_state(&state, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace(STATE_FORMAT, "ohda-train-state-v9")).unwrap();
        match load_state(&path) {
            Err(Error::Checkpoint(_)) => {}
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn nan_losses_abort_with_context() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.pretrain_epochs = 0;
        let mut state = pretrain(&cfg, &data.source, &data.meta, &mut TrainLog::disabled()).unwrap();
        // poison everything so the bad value survives max-pooling
        let params = vec![f64::NAN; state.student.param_count()];
        state.student.set_params(&params).unwrap();
        cfg.pretrain_epochs = 1;
        match pretrain_from(&cfg, state, &data.source, &data.meta, &mut TrainLog::disabled()) {
            Err(Error::NonFiniteLoss { step: 0, detail, .. }) => {
                assert!(!detail.is_empty());
            }
            other => panic!("expected a non-finite loss abort, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_catches_nonsense() {
        let mut cfg = tiny_cfg();
        cfg.ema_momentum = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.scenes_per_step = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.mpr.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.adam.lr = 0.0;
        assert!(cfg.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn class_size_means_fall_back_to_unit_extents() {
        let mut scene = Scene {
            points: vec![Vec3::ZERO],
            objects: Vec::new(),
            floor_z: 0.0,
            room_bounds: Aabb::new(Vec3::ZERO, Vec3::splat(10.0)),
        };
        for size in [Vec3::new(2.0, 1.0, 1.0), Vec3::new(4.0, 3.0, 1.0)] {
            scene.objects.push(crate::scenegen::SceneObject {
                class_id: 0,
                bbox: Aabb::new(Vec3::ZERO, size),
                point_indices: Vec::new(),
            });
        }
        let sizes = compute_class_sizes(&[scene], 2);
        assert_eq!(sizes[0], Vec3::new(3.0, 2.0, 1.0));
        assert_eq!(sizes[1], Vec3::splat(1.0));
    }
}
