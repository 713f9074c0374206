//! Command implementations behind the `ohda` binary.
//!
//! Each command reads its inputs from the dataset root, writes its artifacts
//! under the output directory, and leaves a `run.json` echo of the resolved
//! configuration so a run can be reproduced from its directory alone.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::json;

use ohda_core::detector::DetectorModel;
use ohda_core::error::{Error, Result};
use ohda_core::eval::{evaluate, evaluate_inputs, write_report, EvalScene, MetricsReport};
use ohda_core::geometry::{Aabb, ScoredBox, Vec3};
use ohda_core::rng::{self, tag};
use ohda_core::scenegen::{
    build_object_bank, gen_scenes, read_dataset, write_dataset, DatasetMeta, DomainSpec, Scene,
};
use ohda_core::trainer::{
    adapt, load_state, pretrain, save_state, Toggles, TrainLog, TrainState,
};

use crate::config::RunConfig;

/// The toggle sets the ablation sweep runs, in report order. The source-only
/// row turns everything off, augmentation included: it is the continued plain
/// source training an adapt run with no components reduces to. The alignment
/// rows keep the augmentations, isolating one alignment path each.
pub fn ablation_variants() -> [(&'static str, Toggles); 4] {
    let off = Toggles::none();
    [
        ("source-only", off),
        (
            "cla-only",
            Toggles {
                hla: false,
                ..Toggles::default()
            },
        ),
        (
            "hla-only",
            Toggles {
                oaa: true,
                vss: true,
                hla: true,
                ..off
            },
        ),
        ("full", Toggles::default()),
    ]
}

fn create_json(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.to_path_buf(), e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    Ok(BufWriter::new(file))
}

/// Record the fully resolved configuration before doing any work.
pub fn write_run_echo(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let path = cfg.out_dir.join("run.json");
    let writer = create_json(&path)?;
    serde_json::to_writer_pretty(writer, &json!({ "command": command, "config": cfg }))?;
    Ok(path)
}

fn gen_split(
    spec: &DomainSpec,
    bank_seed: u64,
    scene_seed: u64,
    count: usize,
    dir: &Path,
) -> Result<()> {
    let bank = build_object_bank(spec, bank_seed)?;
    let scenes = gen_scenes(spec, &bank, scene_seed, count)?;
    let meta = DatasetMeta {
        class_names: spec.class_names(),
        frequencies: spec.frequencies(),
        spec: spec.clone(),
        seed: bank_seed,
        scene_count: scenes.len(),
    };
    write_dataset(&scenes, dir, &meta)
}

/// Generate the four splits. Each domain gets one prototype bank (shared by
/// its train and eval splits, so both draw from the same object population)
/// and each split gets its own scene stream.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.train.seed;
    let splits: [(&str, &DomainSpec, u64, usize); 4] = [
        ("source_train", &cfg.source, 0, cfg.data.train_scenes),
        ("source_eval", &cfg.source, 1, cfg.data.eval_scenes),
        ("target_train", &cfg.target, 2, cfg.data.train_scenes),
        ("target_eval", &cfg.target, 3, cfg.data.eval_scenes),
    ];
    for (name, spec, split, count) in splits {
        let bank_seed = rng::stream_key(seed, &[tag::BANK, split / 2]);
        let scene_seed = rng::stream_key(seed, &[tag::SCENE, split]);
        let dir = cfg.split_dir(name);
        gen_split(spec, bank_seed, scene_seed, count, &dir)?;
        log::info!("wrote {count} scenes to {}", dir.display());
    }
    Ok(())
}

fn save_checkpoint_dir(
    cfg: &RunConfig,
    state: &TrainState,
    meta: &DatasetMeta,
    dir: &Path,
) -> Result<()> {
    let class_sizes: Vec<[f64; 3]> = state.class_sizes.iter().map(|v| v.to_array()).collect();
    state.student.save(
        dir,
        cfg.train.seed,
        state.step,
        json!({ "class_names": meta.class_names, "class_sizes": class_sizes }),
    )
}

/// Supervised training on the source split. Writes the training state (the
/// adapt starting point), a portable checkpoint, and a step log.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    let (scenes, meta) = read_dataset(&cfg.split_dir("source_train"))?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(cfg.out_dir.clone(), e))?;
    let mut log = TrainLog::to_file(&cfg.out_dir.join("pretrain.log"))?;
    log::info!(
        "pretraining for {} epochs on {} source scenes",
        cfg.train.pretrain_epochs,
        scenes.len()
    );
    let state = pretrain(&cfg.train, &scenes, &meta, &mut log)?;
    let state_path = cfg.out_dir.join("pretrain_state.json");
    save_state(&state, &state_path)?;
    save_checkpoint_dir(cfg, &state, &meta, &cfg.out_dir.join("pretrain_checkpoint"))?;
    log::info!("saved training state to {}", state_path.display());
    Ok(state_path)
}

struct AdaptData {
    source: Vec<Scene>,
    source_meta: DatasetMeta,
    target: Vec<Scene>,
    target_eval: Vec<Scene>,
}

fn load_adapt_data(cfg: &RunConfig) -> Result<AdaptData> {
    let (source, source_meta) = read_dataset(&cfg.split_dir("source_train"))?;
    let (target, _) = read_dataset(&cfg.split_dir("target_train"))?;
    let (target_eval, _) = read_dataset(&cfg.split_dir("target_eval"))?;
    Ok(AdaptData {
        source,
        source_meta,
        target,
        target_eval,
    })
}

fn run_adapt(
    cfg: &RunConfig,
    data: &AdaptData,
    start: &TrainState,
    out: &Path,
    toggles: Toggles,
    label: &str,
) -> Result<MetricsReport> {
    fs::create_dir_all(out).map_err(|e| Error::io(out.to_path_buf(), e))?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.toggles = toggles;
    let mut log = TrainLog::to_file(&out.join("adapt.log"))?;
    log::info!(
        "adapting [{label}] for {} epochs on {} target scenes",
        train_cfg.adapt_epochs,
        data.target.len()
    );
    let state = adapt(
        &train_cfg,
        start,
        &data.source,
        &data.source_meta,
        &data.target,
        &data.target_eval,
        &mut log,
    )?;
    save_state(&state, &out.join("adapt_state.json"))?;
    save_checkpoint_dir(cfg, &state, &data.source_meta, &out.join("adapt_checkpoint"))?;
    serde_json::to_writer_pretty(create_json(&out.join("epochs.json"))?, &state.history)?;
    let mut report = evaluate(
        &state.student,
        &data.target_eval,
        &data.source_meta.class_names,
        &train_cfg.infer,
    )?;
    report.meta = json!({
        "command": "adapt",
        "label": label,
        "seed": train_cfg.seed,
        "epochs": train_cfg.adapt_epochs,
        "step": state.step,
        "toggles": toggles,
    });
    write_report(&report, &out.join("metrics.json"))?;
    log::info!(
        "[{label}] target mAP@0.25 {:.4}, mAP@0.50 {:.4}",
        report.map25,
        report.map50
    );
    Ok(report)
}

fn load_start(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<TrainState> {
    let default = cfg.out_dir.join("pretrain_state.json");
    let path = checkpoint.unwrap_or(&default);
    log::debug!("loading training state from {}", path.display());
    load_state(path)
}

/// Adaptation on the target split, starting from a pretrain state.
pub fn cmd_adapt(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<MetricsReport> {
    let start = load_start(cfg, checkpoint)?;
    let data = load_adapt_data(cfg)?;
    run_adapt(cfg, &data, &start, &cfg.out_dir, cfg.train.toggles, "adapt")
}

/// One stored detection, axis-aligned box plus class and confidence.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetRecord {
    center: [f64; 3],
    size: [f64; 3],
    class_id: usize,
    score: f64,
}

/// Score a detections file (one array of records per scene, in dataset
/// order) against a dataset's ground truth.
fn evaluate_stored(scenes: &[Scene], meta: &DatasetMeta, path: &Path) -> Result<MetricsReport> {
    let file = File::open(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let per_scene: Vec<Vec<DetRecord>> = serde_json::from_reader(BufReader::new(file))?;
    if per_scene.len() != scenes.len() {
        return Err(Error::InvalidArgument(format!(
            "detections file covers {} scenes, dataset has {}",
            per_scene.len(),
            scenes.len()
        )));
    }
    let inputs: Vec<EvalScene> = scenes
        .iter()
        .zip(&per_scene)
        .map(|(scene, dets)| EvalScene {
            detections: dets
                .iter()
                .map(|d| ScoredBox {
                    aabb: Aabb::new(Vec3::from_array(d.center), Vec3::from_array(d.size)),
                    class_id: d.class_id,
                    score: d.score,
                })
                .collect(),
            ground_truth: scene.objects.iter().map(|o| (o.bbox, o.class_id)).collect(),
        })
        .collect();
    Ok(evaluate_inputs(&inputs, &meta.class_names))
}

fn load_model(path: &Path) -> Result<DetectorModel> {
    if path.is_dir() {
        Ok(DetectorModel::load(path)?.0)
    } else {
        Ok(load_state(path)?.student)
    }
}

/// Evaluate either a checkpoint (directory or training state file) or a
/// stored detections file on a dataset split (the target eval split unless
/// overridden).
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    detections: Option<&Path>,
    dataset: Option<&Path>,
) -> Result<MetricsReport> {
    let dir = dataset
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.split_dir("target_eval"));
    let (scenes, meta) = read_dataset(&dir)?;
    let mut report = match (checkpoint, detections) {
        (Some(cp), None) => {
            let model = load_model(cp)?;
            evaluate(&model, &scenes, &meta.class_names, &cfg.train.infer)?
        }
        (None, Some(path)) => evaluate_stored(&scenes, &meta, path)?,
        _ => {
            return Err(Error::InvalidArgument(
                "pass exactly one of --checkpoint or --detections".into(),
            ))
        }
    };
    report.meta = json!({ "command": "eval", "dataset": dir, "scenes": scenes.len() });
    let out = cfg.out_dir.join("metrics.json");
    write_report(&report, &out)?;
    println!(
        "mAP@0.25 {:.4}  mAP@0.50 {:.4}  ({} scenes)",
        report.map25,
        report.map50,
        scenes.len()
    );
    Ok(report)
}

/// Run every declared toggle set from the same pretrain state and tabulate
/// the final target metrics.
pub fn cmd_ablate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let start = load_start(cfg, checkpoint)?;
    let data = load_adapt_data(cfg)?;
    let mut rows = Vec::new();
    for (name, toggles) in ablation_variants() {
        let out = cfg.out_dir.join("ablate").join(name);
        let report = run_adapt(cfg, &data, &start, &out, toggles, name)?;
        rows.push(json!({
            "name": name,
            "toggles": toggles,
            "map25": report.map25,
            "map50": report.map50,
        }));
    }
    serde_json::to_writer_pretty(
        create_json(&cfg.out_dir.join("ablate_summary.json"))?,
        &rows,
    )?;
    println!("{:<14} {:>9} {:>9}", "variant", "mAP@0.25", "mAP@0.50");
    for row in &rows {
        println!(
            "{:<14} {:>9.4} {:>9.4}",
            row["name"].as_str().unwrap_or("?"),
            row["map25"].as_f64().unwrap_or(f64::NAN),
            row["map50"].as_f64().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
