//! The four-term objective, batch construction, the optimizer, and the
//! one-stage training step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{strong_augment, weak_augment, AugmentConfig};
use crate::autograd::{CeTarget, Graph, Var};
use crate::data::{ImageLevelLabels, LabelMask, Sample, IGNORE};
use crate::error::{Error, Result};
use crate::fusion::{fusion_variant, harden, FusionConfig, FusionVariant, LabelMode, PseudoLabel};
use crate::network::{build_value_maps, grad_cams, predicted_presence, Bound, BnUpdate, FeaturePack, SegModel};
use crate::tensor::Tensor;

/// How the non-pixel-labeled data is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Unlabeled images; CAM classes are gated by classifier predictions.
    Unlabeled,
    /// Image-level labeled images; CAM classes are gated by the labels and
    /// the classifier is also trained on them.
    ImageLevel,
    /// Pixel-labeled data only, with the segmentation loss alone.
    SupervisedOnly,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unlabeled" => Ok(TrainMode::Unlabeled),
            "image_level" => Ok(TrainMode::ImageLevel),
            "supervised_only" => Ok(TrainMode::SupervisedOnly),
            _ => Err(Error::config("mode", format!("unknown mode `{s}`; expected unlabeled, image_level or supervised_only"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Unlabeled => "unlabeled",
            TrainMode::ImageLevel => "image_level",
            TrainMode::SupervisedOnly => "supervised_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub mode: TrainMode,
    /// How pseudo labels are built from decoder and SGC predictions.
    pub pseudo_label: FusionVariant,
    pub seed: u64,
    /// Evaluate every this many iterations (the final iteration is always
    /// evaluated).
    pub eval_interval: usize,
    /// Write a checkpoint every this many iterations; 0 disables periodic
    /// checkpoints.
    pub checkpoint_interval: usize,
    /// Re-check the stop-gradient contract on every step.
    pub audit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Single-machine preset.
    pub fn desk() -> Self {
        Self {
            iterations: 2000,
            base_lr: 0.05,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            labeled_batch: 8,
            unlabeled_batch: 8,
            mode: TrainMode::Unlabeled,
            pseudo_label: FusionVariant::Full,
            seed: 1,
            eval_interval: 500,
            checkpoint_interval: 0,
            audit: false,
        }
    }

    /// Full-scale VOC hyperparameters, kept for reference.
    pub fn paper_voc() -> Self {
        Self { iterations: 30_000, base_lr: 0.007, labeled_batch: 4, unlabeled_batch: 4, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("train.iterations", "must be at least 1"));
        }
        if self.labeled_batch == 0 {
            return Err(Error::config("train.labeled_batch", "must be at least 1"));
        }
        if self.unlabeled_batch == 0 && self.mode != TrainMode::SupervisedOnly {
            return Err(Error::config("train.unlabeled_batch", "must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.base_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if self.lr_power <= 0.0 {
            return Err(Error::config("train.lr_power", "must be positive"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("train.eval_interval", "must be at least 1"));
        }
        Ok(())
    }
}

/// Polynomial decay `base · (1 − t/T)^power`; zero from `t = T` on.
pub fn poly_lr(base: f64, t: usize, total: usize, power: f64) -> f64 {
    if t >= total {
        return 0.0;
    }
    base * (1.0 - t as f64 / total as f64).powf(power)
}

/// Loss values of one step. Disabled terms are 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_s: f64,
    pub l_u: f64,
    pub l_x: f64,
    pub l_sa: f64,
    pub total: f64,
    pub valid_pixels_s: usize,
    pub valid_pixels_u: usize,
    pub valid_pixels_sa: usize,
}

/// Images as an N × 3 × H × W network input, centered at 0.
pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a crate::data::DenseImage>) -> Tensor {
    let mut data = Vec::new();
    let mut shape = None;
    let mut n = 0;
    for img in images {
        let s = (img.height(), img.width());
        assert!(shape.is_none_or(|p| p == s), "batch images must share a size");
        shape = Some(s);
        data.extend(img.to_chw().into_iter().map(|v| v - 0.5));
        n += 1;
    }
    let (h, w) = shape.expect("empty batch");
    Tensor::new(vec![n, 3, h, w], data)
}

fn hard_target(masks: &[LabelMask]) -> CeTarget {
    CeTarget::Hard { labels: masks.iter().flat_map(|m| m.classes().iter().copied()).collect(), ignore: IGNORE }
}

/// Mean cross-entropy over pixels whose label is not [`IGNORE`].
pub fn supervised_loss(g: &mut Graph, logits: Var, masks: &[LabelMask]) -> Var {
    g.cross_entropy(logits, hard_target(masks))
}

/// Mean soft cross-entropy against a constant pseudo label over the
/// included pixels (`include` is N·H·W, false for CutOut and padding).
pub fn consistency_loss(g: &mut Graph, strong_logits: Var, y: &PseudoLabel, include: &[bool]) -> Var {
    g.cross_entropy(strong_logits, CeTarget::Soft { probs: y.probs.data().to_vec(), include: include.to_vec() })
}

/// Mean per-class binary cross-entropy of N × (C−1) logits.
pub fn classification_loss(g: &mut Graph, class_logits: Var, labels: &[ImageLevelLabels]) -> Var {
    g.bce_with_logits(class_logits, labels.iter().flat_map(ImageLevelLabels::as_targets).collect())
}

/// Segmentation loss of SGC logits; identical kernel to [`supervised_loss`].
pub fn sgc_loss(g: &mut Graph, sgc_logits: Var, masks: &[LabelMask]) -> Var {
    supervised_loss(g, sgc_logits, masks)
}

/// A weakly augmented pixel-labeled batch.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub ids: Vec<String>,
    pub images: Tensor,
    pub masks: Vec<LabelMask>,
}

/// Weak and strong views of an unlabeled batch.
#[derive(Debug, Clone)]
pub struct UnlabeledBatch {
    pub ids: Vec<String>,
    pub weak: Tensor,
    pub strong: Tensor,
    /// N·H·W flags: false inside CutOut squares and crop padding.
    pub include: Vec<bool>,
    /// Image-level labels of the weak crops (image-level mode only).
    pub labels: Option<Vec<ImageLevelLabels>>,
}

/// Draws `count` samples with replacement and weakly augments them.
pub fn make_labeled_batch(
    samples: &[Sample],
    count: usize,
    aug: &AugmentConfig,
    fill: [f32; 3],
    rng: &mut impl Rng,
) -> LabeledBatch {
    let mut ids = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    for _ in 0..count {
        let s = &samples[rng.gen_range(0..samples.len())];
        let v = weak_augment(&s.image, Some(&s.mask), aug, rng, fill);
        ids.push(s.id.clone());
        images.push(v.image);
        masks.push(v.mask.expect("mask requested"));
    }
    LabeledBatch { ids, images: images_to_tensor(&images), masks }
}

/// Draws `count` samples with replacement and builds their weak/strong
/// views. With `with_labels`, image-level labels of each weak crop are
/// derived from the sample mask.
pub fn make_unlabeled_batch(
    samples: &[Sample],
    count: usize,
    num_classes: usize,
    with_labels: bool,
    aug: &AugmentConfig,
    fill: [f32; 3],
    rng: &mut impl Rng,
) -> UnlabeledBatch {
    let mut ids = Vec::with_capacity(count);
    let mut weak = Vec::with_capacity(count);
    let mut strong = Vec::with_capacity(count);
    let mut include = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..count {
        let s = &samples[rng.gen_range(0..samples.len())];
        let v = weak_augment(&s.image, with_labels.then_some(&s.mask), aug, rng, fill);
        let (st, cut) = strong_augment(&v.image, aug, rng, fill);
        include.extend(v.geometry.valid_region().into_iter().zip(cut).map(|(valid, c)| valid && !c));
        if let Some(m) = &v.mask {
            labels.push(m.image_level_labels(num_classes));
        }
        ids.push(s.id.clone());
        weak.push(v.image);
        strong.push(st);
    }
    UnlabeledBatch {
        ids,
        weak: images_to_tensor(&weak),
        strong: images_to_tensor(&strong),
        include,
        labels: with_labels.then_some(labels),
    }
}

/// Graph handles of the loss terms of one step.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_s: Var,
    pub l_u: Option<Var>,
    pub l_x: Option<Var>,
    pub l_sa: Option<Var>,
    pub total: Var,
}

/// Everything recorded for one training step.
pub struct StepGraph {
    pub graph: Graph,
    pub bound: Bound,
    pub terms: LossTerms,
    /// Activations of the weak unlabeled forward pass and the pseudo-label
    /// construction; `L_u` must not reach any of them.
    pub weak_activations: Vec<Var>,
    pub pseudo_label: Option<PseudoLabel>,
    pub report: LossReport,
    bn_updates: Vec<BnUpdate>,
}

/// Pseudo labels for a batch from decoder and SGC logits of the weak view,
/// both N × C × H × W.
pub fn build_pseudo_label(
    g: &mut Graph,
    decoder_logits: Var,
    sgc_logits: Var,
    variant: FusionVariant,
    cfg: &FusionConfig,
) -> (PseudoLabel, Option<Var>) {
    if variant == FusionVariant::Full {
        let y = g.fuse(decoder_logits, sgc_logits, cfg.gamma, cfg.temperature);
        (PseudoLabel { probs: g.value(y).clone() }, Some(y))
    } else {
        (fusion_variant(g.value(decoder_logits), g.value(sgc_logits), variant, cfg), None)
    }
}

/// One-hot distributions of hardened labels, with ignored pixels excluded.
fn hardened_target(y: &PseudoLabel, threshold: f64, include: &[bool]) -> (PseudoLabel, Vec<bool>) {
    let masks = harden(y, threshold);
    let s = y.probs.shape().to_vec();
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut probs = vec![0.0; y.probs.len()];
    let mut inc = include.to_vec();
    for (b, m) in masks.iter().enumerate() {
        for (p, &k) in m.classes().iter().enumerate() {
            if k == IGNORE {
                inc[b * plane + p] = false;
            } else {
                probs[(b * c + k as usize) * plane + p] = 1.0;
            }
        }
    }
    (PseudoLabel { probs: Tensor::new(s, probs) }, inc)
}

/// SGC logits of a forward pass, resized to the decoder resolution.
fn sgc_branch(
    model: &SegModel,
    g: &mut Graph,
    b: &Bound,
    fp: &FeaturePack,
    present: &[Vec<bool>],
    train: bool,
) -> (Var, Vec<BnUpdate>) {
    let cams = grad_cams(g, fp);
    let values = build_value_maps(&cams, present);
    let hc = model.hypercolumn(g, fp);
    let hc = g.value(hc).clone();
    let (sgc, upd) = model.sgc(g, b, &values, &hc, train);
    let s = g.shape(fp.decoder_logits).to_vec();
    (g.resize(sgc, s[2], s[3]), upd)
}

/// Eval-mode decoder and SGC logits (N × C × H × W) for a batch, with class
/// presence taken from the classifier.
pub fn predict_logits(model: &SegModel, images: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let x = g.constant(images.clone());
    let fp = model.forward(&mut g, &b, x, false);
    let present = predicted_presence(g.value(fp.class_logits));
    let (sgc, _) = sgc_branch(model, &mut g, &b, &fp, &present, false);
    (g.value(fp.decoder_logits).clone(), g.value(sgc).clone())
}

/// Momentum SGD with decoupled-from-buffers weight decay on weight tensors.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &SegModel) -> Self {
        Self { velocity: model.entries().iter().map(|e| vec![0.0; if e.trainable { e.value.len() } else { 0 }]).collect() }
    }

    /// `grads[i]` is the gradient of entry `i` (absent = zero).
    pub fn step(&mut self, model: &mut SegModel, grads: &[Option<Vec<f64>>], lr: f64, momentum: f64, weight_decay: f64) {
        for (i, e) in model.entries_mut().iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let decay = if e.value.shape().len() >= 2 { weight_decay } else { 0.0 };
            let v = &mut self.velocity[i];
            let w = e.value.data_mut();
            for j in 0..w.len() {
                let gj = grads[i].as_ref().map_or(0.0, |g| g[j]) + decay * w[j];
                v[j] = momentum * v[j] + gj;
                w[j] -= lr * v[j];
            }
        }
    }
}

/// Owns the model and optimizer state for a training run.
pub struct Trainer {
    pub model: SegModel,
    pub cfg: TrainConfig,
    pub fusion: FusionConfig,
    pub augment: AugmentConfig,
    opt: Sgd,
}

impl Trainer {
    pub fn new(model: SegModel, cfg: TrainConfig, fusion: FusionConfig, augment: AugmentConfig) -> Result<Self> {
        cfg.validate()?;
        fusion.validate()?;
        augment.validate()?;
        let opt = Sgd::new(&model);
        Ok(Self { model, cfg, fusion, augment, opt })
    }

    /// Records the forward passes and losses of one step.
    pub fn build_step_graph(&self, lb: &LabeledBatch, ub: Option<&UnlabeledBatch>) -> StepGraph {
        let model = &self.model;
        let c = model.num_classes();
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        let mut bn_updates = Vec::new();
        let mut report = LossReport::default();

        let xl = g.constant(lb.images.clone());
        let fl = model.forward(&mut g, &b, xl, true);
        bn_updates.extend(fl.bn_updates.iter().cloned());
        let l_s = supervised_loss(&mut g, fl.decoder_logits, &lb.masks);
        report.valid_pixels_s = lb.masks.iter().map(LabelMask::valid_pixels).sum();

        let mut terms = LossTerms { l_s, l_u: None, l_x: None, l_sa: None, total: l_s };
        let mut weak_activations = Vec::new();
        let mut pseudo = None;
        let ub = if self.cfg.mode == TrainMode::SupervisedOnly { None } else { ub };
        if self.cfg.mode != TrainMode::SupervisedOnly {
            let labels_l: Vec<ImageLevelLabels> = lb.masks.iter().map(|m| m.image_level_labels(c)).collect();
            let present_l: Vec<Vec<bool>> = labels_l.iter().map(|l| l.present.clone()).collect();
            let (sgc_l, upd) = sgc_branch(model, &mut g, &b, &fl, &present_l, true);
            bn_updates.extend(upd);
            let l_sa = sgc_loss(&mut g, sgc_l, &lb.masks);
            report.valid_pixels_sa = report.valid_pixels_s;
            terms.l_sa = Some(l_sa);

            let mut cls_logits = vec![fl.class_logits];
            let mut cls_labels = labels_l;
            if let Some(ub) = ub {
                let xw = g.constant(ub.weak.clone());
                let fw = model.forward(&mut g, &b, xw, true);
                bn_updates.extend(fw.bn_updates.iter().cloned());
                let present_u = match (&ub.labels, self.cfg.mode) {
                    (Some(labels), TrainMode::ImageLevel) => labels.iter().map(|l| l.present.clone()).collect(),
                    _ => predicted_presence(g.value(fw.class_logits)),
                };
                // Pseudo-label path: batch statistics, no running update.
                let (sgc_u, _) = sgc_branch(model, &mut g, &b, &fw, &present_u, true);
                let (y, y_var) = build_pseudo_label(&mut g, fw.decoder_logits, sgc_u, self.cfg.pseudo_label, &self.fusion);
                weak_activations.extend([fw.stage3, fw.stage4, fw.decoder_logits, sgc_u]);
                weak_activations.extend(y_var);

                let (target, include) = match self.fusion.mode {
                    LabelMode::Soft => (y.clone(), ub.include.clone()),
                    LabelMode::Hard => hardened_target(&y, self.fusion.hard_threshold, &ub.include),
                };
                let xs = g.constant(ub.strong.clone());
                let fs = model.forward(&mut g, &b, xs, true);
                let l_u = consistency_loss(&mut g, fs.decoder_logits, &target, &include);
                report.valid_pixels_u = include.iter().filter(|&&i| i).count();
                terms.l_u = Some(l_u);
                pseudo = Some(y);

                if self.cfg.mode == TrainMode::ImageLevel {
                    if let Some(labels) = &ub.labels {
                        cls_logits.push(fw.class_logits);
                        cls_labels.extend(labels.iter().cloned());
                    }
                }
            }
            let logits = if cls_logits.len() == 1 { cls_logits[0] } else { g.concat_rows(&cls_logits) };
            terms.l_x = Some(classification_loss(&mut g, logits, &cls_labels));
            let parts: Vec<Var> = [Some(terms.l_s), terms.l_u, terms.l_x, terms.l_sa].into_iter().flatten().collect();
            terms.total = g.sum_all(&parts);
        }

        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        report.l_s = g.value(terms.l_s).item();
        report.l_u = val(terms.l_u);
        report.l_x = val(terms.l_x);
        report.l_sa = val(terms.l_sa);
        report.total = g.value(terms.total).item();
        StepGraph { graph: g, bound: b, terms, weak_activations, pseudo_label: pseudo, report, bn_updates }
    }

    /// Checks that `L_sa` reaches only Θ and `L_u` reaches no weak-view
    /// activation.
    pub fn audit(&self, sg: &StepGraph) -> Result<()> {
        if let Some(l_sa) = sg.terms.l_sa {
            let grads = sg.graph.backward(l_sa);
            for (i, v) in sg.bound.params() {
                let e = &self.model.entries()[i];
                if !e.group.is_attention() && !grads.is_zero(v) {
                    return Err(Error::Audit(format!("L_sa reaches non-attention parameter `{}`", e.name)));
                }
            }
        }
        if let Some(l_u) = sg.terms.l_u {
            let grads = sg.graph.backward(l_u);
            if let Some(v) = sg.weak_activations.iter().find(|&&v| !grads.is_zero(v)) {
                return Err(Error::Audit(format!("L_u reaches weak-view node {}", v.index())));
            }
        }
        Ok(())
    }

    /// Gradients of the total loss for every model entry.
    pub fn gradients(&self, sg: &StepGraph) -> Vec<Option<Vec<f64>>> {
        let grads = sg.graph.backward(sg.terms.total);
        let mut out = vec![None; self.model.entries().len()];
        for (i, v) in sg.bound.params() {
            out[i] = grads.get(v).map(<[f64]>::to_vec);
        }
        out
    }

    /// One optimizer step. Aborts on any non-finite loss or gradient.
    pub fn step(&mut self, iteration: usize, lb: &LabeledBatch, ub: Option<&UnlabeledBatch>) -> Result<LossReport> {
        let sg = self.build_step_graph(lb, ub);
        let batch_ids = || lb.ids.iter().chain(ub.map(|u| u.ids.iter()).into_iter().flatten()).cloned().collect();
        let r = &sg.report;
        for (name, v) in [("l_s", r.l_s), ("l_u", r.l_u), ("l_x", r.l_x), ("l_sa", r.l_sa)] {
            if !v.is_finite() {
                return Err(Error::Numerical { iteration, message: format!("{name} is {v}"), batch_ids: batch_ids() });
            }
        }
        if self.cfg.audit {
            self.audit(&sg)?;
        }
        let grads = self.gradients(&sg);
        if grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numerical { iteration, message: "non-finite gradient".into(), batch_ids: batch_ids() });
        }
        let lr = poly_lr(self.cfg.base_lr, iteration, self.cfg.iterations, self.cfg.lr_power);
        self.opt.step(&mut self.model, &grads, lr, self.cfg.momentum, self.cfg.weight_decay);
        self.model.apply_bn_updates(&sg.bn_updates);
        Ok(sg.report)
    }
}

/// Per-iteration random streams: batch contents depend only on
/// `(seed, iteration)`, never on how batches are produced.
pub fn iteration_rngs(seed: u64, iteration: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut labeled = ChaCha8Rng::seed_from_u64(seed);
    labeled.set_stream(2 * iteration as u64);
    let mut unlabeled = ChaCha8Rng::seed_from_u64(seed);
    unlabeled.set_stream(2 * iteration as u64 + 1);
    (labeled, unlabeled)
}

/// The random stream used to initialize model parameters.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1417);
    rng.set_stream(u64::MAX);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ShapesDataset;
    use crate::network::{BackbonePreset, ModelConfig};

    fn setup(mode: TrainMode) -> (Trainer, Vec<Sample>) {
        let ds = ShapesDataset::generate(6, 3, (64, 64), 4, "t").unwrap();
        let model_cfg = ModelConfig { backbone: BackbonePreset::Tiny, num_classes: 4, attention_dim: 4, ..Default::default() };
        let model = SegModel::new(model_cfg, &mut init_rng(1)).unwrap();
        let cfg = TrainConfig { iterations: 10, labeled_batch: 2, unlabeled_batch: 2, mode, audit: true, ..TrainConfig::desk() };
        let aug = AugmentConfig { crop_size: (32, 32), cutout_size: 8, ..Default::default() };
        (Trainer::new(model, cfg, FusionConfig::default(), aug).unwrap(), ds.samples().to_vec())
    }

    fn batches(t: &Trainer, samples: &[Sample], it: usize) -> (LabeledBatch, UnlabeledBatch) {
        let (mut rl, mut ru) = iteration_rngs(t.cfg.seed, it);
        let with_labels = t.cfg.mode == TrainMode::ImageLevel;
        (
            make_labeled_batch(&samples[..3], 2, &t.augment, [0.5; 3], &mut rl),
            make_unlabeled_batch(&samples[3..], 2, 4, with_labels, &t.augment, [0.5; 3], &mut ru),
        )
    }

    #[test]
    fn schedule_is_monotone_and_ends_at_zero() {
        let lrs: Vec<f64> = (0..=100).map(|t| poly_lr(0.1, t, 100, 0.9)).collect();
        assert_eq!(lrs[0], 0.1);
        assert_eq!(lrs[100], 0.0);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn loss_reference_values() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(&[1, 2, 2, 2]));
        let mask = LabelMask::new(2, 2, vec![0, 1, 1, IGNORE]);
        let l = supervised_loss(&mut g, logits, &[mask]);
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

        let all_ignored = LabelMask::filled(2, 2, IGNORE);
        let l = supervised_loss(&mut g, logits, &[all_ignored]);
        assert_eq!(g.value(l).item(), 0.0);
        assert!(g.backward(l).is_zero(logits));

        let cls = g.param(Tensor::zeros(&[2, 3]));
        let labels = vec![ImageLevelLabels { present: vec![true, false, true] }; 2];
        let l = classification_loss(&mut g, cls, &labels);
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

        let y = PseudoLabel { probs: Tensor::filled(&[1, 2, 2, 2], 0.5) };
        let l = consistency_loss(&mut g, logits, &y, &[false; 4]);
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn soft_loss_minimum_is_the_entropy() {
        let mut g = Graph::new();
        let raw = Tensor::new(vec![1, 3, 1, 2], vec![0.3, -1.0, 2.0, 0.1, 0.0, 0.5]);
        let logits = g.param(raw.clone());
        let sm = fusion_variant(&raw, &raw, FusionVariant::DecoderOnly, &FusionConfig::default());
        let l = consistency_loss(&mut g, logits, &sm, &[true, true]);
        let entropy: f64 = (0..2)
            .map(|p| -(0..3).map(|k| sm.probs.data()[k * 2 + p]).map(|q| q * q.ln()).sum::<f64>())
            .sum::<f64>()
            / 2.0;
        assert!((g.value(l).item() - entropy).abs() < 1e-12);
    }

    #[test]
    fn hard_pseudo_label_equals_hard_cross_entropy() {
        let mut g = Graph::new();
        let raw = Tensor::new(vec![1, 2, 1, 3], vec![0.3, -1.0, 2.0, 0.1, 0.0, 0.5]);
        let logits = g.param(raw);
        let y = PseudoLabel { probs: Tensor::new(vec![1, 2, 1, 3], vec![0.9, 0.5, 0.2, 0.1, 0.5, 0.8]) };
        let (t, inc) = hardened_target(&y, 0.5, &[true; 3]);
        let soft = consistency_loss(&mut g, logits, &t, &inc);
        let mask = LabelMask::new(1, 3, vec![0, IGNORE, 1]);
        let hard = supervised_loss(&mut g, logits, &[mask]);
        assert!((g.value(soft).item() - g.value(hard).item()).abs() < 1e-12);
    }

    #[test]
    fn cutout_exclusion_changes_only_erased_pixels() {
        let mut g = Graph::new();
        let raw = Tensor::new(vec![1, 2, 1, 4], vec![0.3, -1.0, 2.0, 0.1, 0.0, 0.5, -0.2, 1.0]);
        let logits = g.param(raw);
        let y = PseudoLabel { probs: Tensor::new(vec![1, 2, 1, 4], vec![0.9, 0.5, 0.2, 0.1, 0.1, 0.5, 0.8, 0.9]) };
        let with = consistency_loss(&mut g, logits, &y, &[true, false, true, true]);
        let gw = g.backward(with).get(logits).unwrap().to_vec();
        assert_eq!((gw[1], gw[5]), (0.0, 0.0));
        assert!(gw[0] != 0.0 && gw[2] != 0.0);
    }

    #[test]
    fn loss_additivity_and_audit_hold_in_both_modes() {
        for mode in [TrainMode::Unlabeled, TrainMode::ImageLevel] {
            let (t, samples) = setup(mode);
            let (lb, ub) = batches(&t, &samples, 0);
            let sg = t.build_step_graph(&lb, Some(&ub));
            let r = &sg.report;
            assert!((r.total - (r.l_s + r.l_u + r.l_x + r.l_sa)).abs() < 1e-9);
            assert!(r.l_u > 0.0 && r.l_x > 0.0 && r.l_sa > 0.0);
            t.audit(&sg).unwrap();
            let (w, s) = sg.pseudo_label.as_ref().unwrap().simplex_error();
            assert!(w < 1e-6 && s >= 0.0);
        }
    }

    #[test]
    fn l_sa_changes_only_attention_gradients() {
        let (t, samples) = setup(TrainMode::Unlabeled);
        let (lb, ub) = batches(&t, &samples, 1);
        let sg = t.build_step_graph(&lb, Some(&ub));
        let with = t.gradients(&sg);
        let parts: Vec<Var> = [Some(sg.terms.l_s), sg.terms.l_u, sg.terms.l_x].into_iter().flatten().collect();
        let mut g2 = sg;
        let without_total = g2.graph.sum_all(&parts);
        let grads = g2.graph.backward(without_total);
        let mut attention_changed = false;
        for (i, v) in g2.bound.params() {
            let e = &t.model.entries()[i];
            let a = with[i].clone().unwrap_or_else(|| vec![0.0; e.value.len()]);
            let b = grads.get_or_zeros(v, e.value.len());
            if e.group.is_attention() {
                attention_changed |= a != b;
            } else {
                assert_eq!(a, b, "{}", e.name);
            }
        }
        assert!(attention_changed);
        let l_sa = g2.terms.l_sa.unwrap();
        let w_k = g2.bound.var(t.model.entries().iter().position(|e| e.name == "attention.key").unwrap());
        assert!(!g2.graph.backward(l_sa).is_zero(w_k));
    }

    #[test]
    fn identical_steps_give_identical_updates() {
        let run = || {
            let (mut t, samples) = setup(TrainMode::Unlabeled);
            for it in 0..2 {
                let (lb, ub) = batches(&t, &samples, it);
                t.step(it, &lb, Some(&ub)).unwrap();
            }
            t.model.entries().iter().map(|e| e.value.clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn supervised_only_uses_the_segmentation_loss_alone() {
        let (t, samples) = setup(TrainMode::SupervisedOnly);
        let (lb, ub) = batches(&t, &samples, 0);
        let sg = t.build_step_graph(&lb, Some(&ub));
        assert!(sg.terms.l_u.is_none() && sg.terms.l_x.is_none() && sg.terms.l_sa.is_none());
        assert_eq!(sg.report.total, sg.report.l_s);
    }

    #[test]
    fn identical_views_reduce_to_self_distillation() {
        let (mut t, samples) = setup(TrainMode::Unlabeled);
        t.fusion = FusionConfig { gamma: 1.0, temperature: 1.0, ..FusionConfig::default() };
        t.augment = AugmentConfig { jitter_strength: 0.0, cutout_size: 0, ..t.augment };
        let (lb, ub) = batches(&t, &samples, 0);
        assert_eq!(ub.weak, ub.strong);
        // With γ = 1 and T = 1 the target is softmax(p / Norm), and the
        // strong-view logits equal the weak-view logits p.
        let sg = t.build_step_graph(&lb, Some(&ub));
        let y = sg.pseudo_label.as_ref().unwrap();
        let mut g = Graph::new();
        let b = t.model.bind(&mut g);
        let x = g.constant(ub.weak.clone());
        let fp = t.model.forward(&mut g, &b, x, true);
        let p = g.value(fp.decoder_logits).clone();
        let s = p.shape().to_vec();
        let (c, plane) = (s[1], s[2] * s[3]);
        let (mut total, mut count) = (0.0, 0);
        for bi in 0..s[0] {
            for px in 0..plane {
                if !ub.include[bi * plane + px] {
                    continue;
                }
                let logits: Vec<f64> = (0..c).map(|k| p.data()[(bi * c + k) * plane + px]).collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + logits.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
                total -= (0..c).map(|k| y.probs.data()[(bi * c + k) * plane + px] * (logits[k] - lse)).sum::<f64>();
                count += 1;
            }
        }
        assert!((sg.report.l_u - total / count as f64).abs() < 1e-10);

        // With the plain-softmax source the target is the strong prediction
        // itself, so the loss is its mean entropy.
        t.cfg.pseudo_label = FusionVariant::DecoderOnly;
        let sg = t.build_step_graph(&lb, Some(&ub));
        let y = sg.pseudo_label.as_ref().unwrap();
        let mut ent = 0.0;
        for bi in 0..s[0] {
            for px in 0..plane {
                if ub.include[bi * plane + px] {
                    ent -= (0..c).map(|k| y.probs.data()[(bi * c + k) * plane + px]).map(|q| q * q.ln()).sum::<f64>();
                }
            }
        }
        assert!((sg.report.l_u - ent / count as f64).abs() < 1e-10);
    }

    #[test]
    fn nan_loss_aborts_with_batch_ids() {
        let (mut t, samples) = setup(TrainMode::Unlabeled);
        let (mut lb, ub) = batches(&t, &samples, 0);
        lb.images.data_mut()[0] = f64::NAN;
        match t.step(0, &lb, Some(&ub)) {
            Err(Error::Numerical { batch_ids, .. }) => {
                assert!(batch_ids.contains(&lb.ids[0]));
                assert!(batch_ids.contains(&ub.ids[0]));
            }
            other => panic!("{other:?}"),
        }
    }
}
