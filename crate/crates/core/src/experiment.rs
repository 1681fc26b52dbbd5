//! Experiment orchestration: data preparation, training runs, ablation
//! sweeps, and the self-training comparison.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, ExperimentConfig};
use crate::data::{
    class_histogram, sample_low_data_split, DatasetSplit, InMemoryDataset, Sample, SegDataset, ShapesDataset,
    VocDataset,
};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, generate_offline_pseudo_labels, pseudo_label_calibration, EvalReport};
use crate::fusion::{FusionVariant, LabelMode};
use crate::io::{append_jsonl, config_hash, Checkpoint};
use crate::network::{BackbonePreset, HypercolumnMode, SegModel};
use crate::tensor::Tensor;
use crate::training::{
    init_rng, iteration_rngs, make_labeled_batch, make_unlabeled_batch, LabeledBatch, LossReport, TrainMode, Trainer,
    UnlabeledBatch,
};

/// Environment variable that enables deterministic mode when set to a
/// non-empty value other than `0`.
pub const DETERMINISTIC_ENV: &str = "PSEUDOSEG_DETERMINISTIC";

pub fn deterministic_from_env() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

/// Materialized data of one experiment.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: DatasetSplit,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub val: Vec<Sample>,
    /// Mean color of the training pool, used for padding and CutOut.
    pub fill: [f32; 3],
    /// Offline pseudo-labeled samples mixed into supervised batches.
    pub pseudo: Vec<Sample>,
}

fn load_pools(cfg: &ExperimentConfig) -> Result<(InMemoryDataset, InMemoryDataset)> {
    let d = &cfg.dataset;
    let c = cfg.model.num_classes;
    match d.source {
        DatasetSource::Shapes => Ok((
            ShapesDataset::generate(d.shapes_train, d.shapes_seed, d.canvas, c, "train_")?.into_inner(),
            ShapesDataset::generate(d.shapes_val, d.shapes_seed ^ 0x7A11_DA7A, d.canvas, c, "val_")?.into_inner(),
        )),
        DatasetSource::VocDir => {
            let root = d.root.as_ref().expect("validated");
            Ok((
                InMemoryDataset::load(&VocDataset::open(root, "train", c)?)?,
                InMemoryDataset::load(&VocDataset::open(root, "val", c)?)?,
            ))
        }
    }
}

/// Samples the labeled/unlabeled split of the configured training pool.
pub fn make_split(cfg: &ExperimentConfig, pool: &InMemoryDataset) -> Result<DatasetSplit> {
    if let Some(path) = &cfg.dataset.split_file {
        let text = fs::read_to_string(path).map_err(|e| Error::ingest(path.display().to_string(), e.to_string()))?;
        return serde_json::from_str(&text).map_err(|e| Error::ingest(path.display().to_string(), e.to_string()));
    }
    let d = &cfg.dataset;
    sample_low_data_split(&pool.ids(), &class_histogram(pool)?, d.fraction, d.seed, d.min_class_pixels, d.max_retries)
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (pool, val) = load_pools(cfg)?;
    let split = make_split(cfg, &pool)?;
    Ok(PreparedData {
        labeled: pool.subset(&split.labeled_ids)?.samples,
        unlabeled: pool.subset(&split.unlabeled_ids)?.samples,
        val: val.samples,
        fill: pool.mean_color(),
        pseudo: Vec::new(),
        split,
    })
}

/// One evaluation event of the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalEvent {
    pub iteration: usize,
    pub l_s: f64,
    pub l_u: f64,
    pub l_x: f64,
    pub l_sa: f64,
    pub miou: f64,
    pub ece: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub deterministic: bool,
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub model: SegModel,
    pub final_eval: EvalReport,
    pub best_miou: f64,
    pub events: Vec<EvalEvent>,
}

fn concat_batches(a: LabeledBatch, b: LabeledBatch) -> LabeledBatch {
    let shape = a.images.shape().to_vec();
    let mut data = a.images.into_data();
    data.extend_from_slice(b.images.data());
    let n = shape[0] + b.images.dim(0);
    LabeledBatch {
        ids: a.ids.into_iter().chain(b.ids).collect(),
        images: Tensor::new(vec![n, shape[1], shape[2], shape[3]], data),
        masks: a.masks.into_iter().chain(b.masks).collect(),
    }
}

type Batches = (LabeledBatch, Option<UnlabeledBatch>);

fn make_batches(cfg: &ExperimentConfig, data: &PreparedData, iteration: usize) -> Batches {
    let t = &cfg.train;
    let (mut rl, mut ru) = iteration_rngs(t.seed, iteration);
    let lb = make_labeled_batch(&data.labeled, t.labeled_batch, &cfg.augment, data.fill, &mut rl);
    if t.mode == TrainMode::SupervisedOnly {
        if data.pseudo.is_empty() {
            return (lb, None);
        }
        let pb = make_labeled_batch(&data.pseudo, t.unlabeled_batch, &cfg.augment, data.fill, &mut ru);
        return (concat_batches(lb, pb), None);
    }
    if data.unlabeled.is_empty() {
        return (lb, None);
    }
    let with_labels = t.mode == TrainMode::ImageLevel;
    let ub = make_unlabeled_batch(
        &data.unlabeled,
        t.unlabeled_batch,
        cfg.model.num_classes,
        with_labels,
        &cfg.augment,
        data.fill,
        &mut ru,
    );
    (lb, Some(ub))
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut m = LossReport::default();
    for r in reports {
        m.l_s += r.l_s / n;
        m.l_u += r.l_u / n;
        m.l_x += r.l_x / n;
        m.l_sa += r.l_sa / n;
    }
    m
}

/// Trains a fresh model. With `out_dir`, writes the resolved config,
/// `metrics.jsonl`, `best.ckpt`, periodic checkpoints and `final.ckpt`.
pub fn run_training(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    out_dir: Option<&Path>,
    opts: RunOptions,
) -> Result<RunSummary> {
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::Data("no pixel-labeled samples".into()));
    }
    let resolved = cfg.to_toml();
    let hash = config_hash(&resolved);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), &resolved)?;
        let metrics = dir.join("metrics.jsonl");
        if metrics.exists() {
            fs::remove_file(&metrics)?;
        }
    }
    let model = SegModel::new(cfg.model, &mut init_rng(cfg.train.seed))?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.fusion, cfg.augment)?;
    let total = cfg.train.iterations;
    let start = Instant::now();
    let mut pending = Vec::new();
    let mut events = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut last_eval = None;

    let mut on_batch = |it: usize, (lb, ub): Batches, trainer: &mut Trainer| -> Result<()> {
        pending.push(trainer.step(it, &lb, ub.as_ref())?);
        let done = it + 1;
        if done % cfg.train.eval_interval == 0 || done == total {
            let report = evaluate(&trainer.model, &data.val)?;
            let losses = mean_report(&pending);
            pending.clear();
            let ev = EvalEvent {
                iteration: done,
                l_s: losses.l_s,
                l_u: losses.l_u,
                l_x: losses.l_x,
                l_sa: losses.l_sa,
                miou: report.miou,
                ece: report.ece,
                elapsed_s: (!opts.deterministic).then(|| start.elapsed().as_secs_f64()),
            };
            log::info!("iteration {done}/{total}: mIoU {:.4}, ECE {:.4}, L_s {:.4}, L_u {:.4}", ev.miou, ev.ece, ev.l_s, ev.l_u);
            if let Some(dir) = out_dir {
                append_jsonl(dir.join("metrics.jsonl"), &ev)?;
                if report.miou > best {
                    Checkpoint::capture(&trainer.model, &hash, done).save(dir.join("best.ckpt"))?;
                }
            }
            best = best.max(report.miou);
            events.push(ev);
            last_eval = Some(report);
        }
        if let Some(dir) = out_dir {
            let every = cfg.train.checkpoint_interval;
            if every > 0 && done % every == 0 {
                Checkpoint::capture(&trainer.model, &hash, done).save(dir.join(format!("iter_{done:06}.ckpt")))?;
            }
        }
        Ok(())
    };

    if opts.deterministic {
        for it in 0..total {
            on_batch(it, make_batches(cfg, data, it), &mut trainer)?;
        }
    } else {
        // Batches depend only on (seed, iteration), so a background producer
        // yields the same sequence as the inline path.
        std::thread::scope(|s| -> Result<()> {
            let (tx, rx) = sync_channel::<Batches>(2);
            s.spawn(move || {
                for it in 0..total {
                    if tx.send(make_batches(cfg, data, it)).is_err() {
                        break;
                    }
                }
            });
            for (it, batches) in rx.iter().enumerate() {
                on_batch(it, batches, &mut trainer)?;
            }
            Ok(())
        })?;
    }

    if let Some(dir) = out_dir {
        Checkpoint::capture(&trainer.model, &hash, total).save(dir.join("final.ckpt"))?;
    }
    Ok(RunSummary {
        model: trainer.model,
        final_eval: last_eval.expect("the final iteration is always evaluated"),
        best_miou: best,
        events,
    })
}

/// Writes `split_seed{N}.json` for each seed into `dir`.
pub fn write_splits(cfg: &ExperimentConfig, seeds: &[u64], dir: &Path) -> Result<Vec<PathBuf>> {
    let (pool, _) = load_pools(cfg)?;
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.dataset.seed = seed;
        c.dataset.split_file = None;
        let split = make_split(&c, &pool)?;
        let path = dir.join(format!("split_seed{seed}.json"));
        fs::write(&path, serde_json::to_string_pretty(&split)? + "\n")?;
        paths.push(path);
    }
    Ok(paths)
}

/// Ablation studies, one swept factor each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Sources,
    Hypercolumn,
    SoftHard,
    Sharpening,
    JitterStrength,
    Backbone,
}

impl Study {
    pub const ALL: [Study; 6] =
        [Study::Sources, Study::Hypercolumn, Study::SoftHard, Study::Sharpening, Study::JitterStrength, Study::Backbone];

    pub fn name(self) -> &'static str {
        match self {
            Study::Sources => "sources",
            Study::Hypercolumn => "hypercolumn",
            Study::SoftHard => "soft_hard",
            Study::Sharpening => "sharpening",
            Study::JitterStrength => "jitter_strength",
            Study::Backbone => "backbone",
        }
    }

    /// Configuration fields an arm may change.
    pub fn fields(self) -> &'static [&'static str] {
        match self {
            Study::Sources => &["train.pseudo_label", "train.mode"],
            Study::Hypercolumn => &["model.hypercolumn"],
            Study::SoftHard => &["fusion.mode"],
            Study::Sharpening => &["fusion.temperature"],
            Study::JitterStrength => &["augment.jitter_strength"],
            Study::Backbone => &["model.backbone", "train.mode"],
        }
    }

    /// Named arms derived from `base`.
    pub fn arms(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Study::Sources => {
                let mut arms = Vec::new();
                for mode in [TrainMode::Unlabeled, TrainMode::ImageLevel] {
                    for (name, v) in [
                        ("decoder_only", FusionVariant::DecoderOnly),
                        ("sgc_only", FusionVariant::SgcOnly),
                        ("calibrated_fusion", FusionVariant::Full),
                    ] {
                        arms.push((
                            format!("{name}/{mode}"),
                            with(&|c| {
                                c.train.pseudo_label = v;
                                c.train.mode = mode;
                            }),
                        ));
                    }
                }
                arms
            }
            Study::Hypercolumn => [("hypercolumn", HypercolumnMode::LastTwoStages), ("last_stage", HypercolumnMode::LastStage)]
                .into_iter()
                .map(|(n, m)| (n.to_string(), with(&|c| c.model.hypercolumn = m)))
                .collect(),
            Study::SoftHard => [("soft", LabelMode::Soft), ("hard", LabelMode::Hard)]
                .into_iter()
                .map(|(n, m)| (n.to_string(), with(&|c| c.fusion.mode = m)))
                .collect(),
            Study::Sharpening => [0.5, 1.0]
                .into_iter()
                .map(|t| (format!("T={t}"), with(&|c| c.fusion.temperature = t)))
                .collect(),
            Study::JitterStrength => [0.05, 0.25, 0.5, 1.0]
                .into_iter()
                .map(|s| (format!("s={s}"), with(&|c| c.augment.jitter_strength = s)))
                .collect(),
            Study::Backbone => {
                let mut arms = Vec::new();
                for b in [BackbonePreset::Desk, BackbonePreset::DeskWide] {
                    for mode in [TrainMode::SupervisedOnly, TrainMode::Unlabeled] {
                        arms.push((
                            format!("{b}/{mode}"),
                            with(&|c| {
                                c.model.backbone = b;
                                c.train.mode = mode;
                            }),
                        ));
                    }
                }
                arms
            }
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Study::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config("study", format!("unknown study `{s}`")))
    }
}

/// One arm × seed result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub study: String,
    pub arm: String,
    pub seed: u64,
    pub miou: f64,
    /// ECE of the arm's pseudo-label construction (sources study only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
}

/// Runs every arm of `study` for each seed (paired across arms) and writes
/// `ablation_<study>.csv` and `.json` into `out_dir`.
pub fn run_ablation(
    base: &ExperimentConfig,
    study: Study,
    seeds: &[u64],
    out_dir: &Path,
    opts: RunOptions,
) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for (name, arm) in study.arms(&base.clone().with_seed(seed)) {
            let data = prepare_data(&arm)?;
            let run_dir = out_dir.join(format!("{}_seed{seed}", name.replace(['/', '='], "_")));
            let summary = run_training(&arm, &data, Some(&run_dir), opts)?;
            let ece = if study == Study::Sources {
                let v = arm.train.pseudo_label;
                Some(pseudo_label_calibration(&summary.model, &data.val, &arm.fusion, &[v])?[0].1)
            } else {
                None
            };
            rows.push(AblationRow { study: study.name().into(), arm: name, seed, miou: summary.final_eval.miou, ece });
        }
    }
    let mut csv = String::from("study,arm,seed,miou,ece\n");
    for r in &rows {
        let ece = r.ece.map(|e| format!("{e:.6}")).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{:.6},{}\n", r.study, r.arm, r.seed, r.miou, ece));
    }
    fs::write(out_dir.join(format!("ablation_{}.csv", study.name())), csv)?;
    fs::write(out_dir.join(format!("ablation_{}.json", study.name())), serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}

/// Pseudo-labeled copies of `samples` from a teacher, with hardened masks.
pub fn offline_pseudo_labeled(teacher: &SegModel, samples: &[Sample], threshold: f64) -> Vec<Sample> {
    generate_offline_pseudo_labels(teacher, samples, threshold)
        .into_iter()
        .zip(samples)
        .map(|(l, s)| Sample { id: s.id.clone(), image: s.image.clone(), mask: l.mask })
        .collect()
}

/// Trains a student on the labeled data plus the teacher's hardened
/// predictions on the unlabeled pool.
pub fn train_student(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    teacher: &SegModel,
    out_dir: Option<&Path>,
    opts: RunOptions,
) -> Result<RunSummary> {
    let mut student_cfg = cfg.clone();
    student_cfg.train.mode = TrainMode::SupervisedOnly;
    let mut student_data = data.clone();
    student_data.pseudo = offline_pseudo_labeled(teacher, &data.unlabeled, cfg.fusion.hard_threshold);
    if let Some(dir) = out_dir {
        let masks = dir.join("pseudo_labels");
        fs::create_dir_all(&masks)?;
        for s in &student_data.pseudo {
            s.mask.to_luma8().save(masks.join(format!("{}.png", s.id)))?;
        }
    }
    run_training(&student_cfg, &student_data, out_dir, opts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfTrainRow {
    pub method: String,
    pub miou: f64,
}

/// Teacher (supervised only), student (offline self-training) and PseudoSeg
/// on the same split. Writes `selftrain.csv` and `.json`.
pub fn run_selftrain(cfg: &ExperimentConfig, out_dir: &Path, opts: RunOptions) -> Result<Vec<SelfTrainRow>> {
    let data = prepare_data(cfg)?;
    let mut teacher_cfg = cfg.clone();
    teacher_cfg.train.mode = TrainMode::SupervisedOnly;
    let teacher = run_training(&teacher_cfg, &data, Some(&out_dir.join("teacher")), opts)?;
    let student = train_student(cfg, &data, &teacher.model, Some(&out_dir.join("student")), opts)?;
    let mut ps_cfg = cfg.clone();
    if ps_cfg.train.mode == TrainMode::SupervisedOnly {
        ps_cfg.train.mode = TrainMode::Unlabeled;
    }
    let ps = run_training(&ps_cfg, &data, Some(&out_dir.join("pseudoseg")), opts)?;
    let rows = vec![
        SelfTrainRow { method: "teacher".into(), miou: teacher.final_eval.miou },
        SelfTrainRow { method: "student".into(), miou: student.final_eval.miou },
        SelfTrainRow { method: "pseudoseg".into(), miou: ps.final_eval.miou },
    ];
    let mut csv = String::from("method,miou\n");
    rows.iter().for_each(|r| csv.push_str(&format!("{},{:.6}\n", r.method, r.miou)));
    fs::write(out_dir.join("selftrain.csv"), csv)?;
    fs::write(out_dir.join("selftrain.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}

/// Evaluation report of a checkpoint, including pseudo-label calibration of
/// every fusion variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub ece: f64,
    pub ece_by_variant: std::collections::BTreeMap<String, f64>,
}

pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<CheckpointReport> {
    let model = Checkpoint::load(checkpoint)?.restore()?;
    let (_, val) = load_pools(cfg)?;
    let report = evaluate(&model, &val.samples)?;
    let eces = pseudo_label_calibration(&model, &val.samples, &cfg.fusion, &FusionVariant::ALL)?;
    Ok(CheckpointReport {
        miou: report.miou,
        per_class_iou: report.per_class_iou,
        ece: report.ece,
        ece_by_variant: eces.into_iter().map(|(v, e)| (v.name().to_string(), e)).collect(),
    })
}
