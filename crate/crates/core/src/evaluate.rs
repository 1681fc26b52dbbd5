//! Evaluation of a model snapshot and offline pseudo-label generation.

use serde::{Deserialize, Serialize};

use crate::autograd::kernels::{gather_pixel, softmax_in_place};
use crate::data::{LabelMask, Sample, IGNORE};
use crate::error::Result;
use crate::fusion::{argmax, fusion_variant, harden, FusionConfig, FusionVariant, PseudoLabel};
use crate::metrics::{miou, CalibrationBins, ConfusionMatrix, ECE_BINS};
use crate::network::SegModel;
use crate::tensor::Tensor;
use crate::training::{images_to_tensor, predict_logits};

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// ECE of the decoder softmax.
    pub ece: f64,
}

/// Adds every non-ignored pixel of a batch of distributions to `bins`,
/// scoring the top class against the ground truth.
fn add_calibration(probs: &Tensor, masks: &[LabelMask], bins: &mut CalibrationBins) {
    let s = probs.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut buf = vec![0.0; c];
    for (b, m) in masks.iter().enumerate() {
        for (p, &t) in m.classes().iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            gather_pixel(probs.data(), b, c, plane, p, &mut buf);
            let (k, conf) = argmax(&buf);
            bins.add(conf, k == t as usize);
        }
    }
}

fn softmax_nchw(logits: &Tensor) -> Tensor {
    let s = logits.shape().to_vec();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut out = logits.clone();
    let mut buf = vec![0.0; c];
    for b in 0..n {
        for p in 0..plane {
            gather_pixel(logits.data(), b, c, plane, p, &mut buf);
            softmax_in_place(&mut buf);
            crate::autograd::kernels::scatter_pixel(out.data_mut(), b, c, plane, p, &buf);
        }
    }
    out
}

fn argmax_masks(logits: &Tensor) -> Vec<LabelMask> {
    let s = logits.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let mut buf = vec![0.0; c];
    (0..n)
        .map(|b| {
            let classes = (0..plane)
                .map(|p| {
                    gather_pixel(logits.data(), b, c, plane, p, &mut buf);
                    argmax(&buf).0 as u8
                })
                .collect();
            LabelMask::new(h, w, classes)
        })
        .collect()
}

/// Eval-mode decoder logits of one chunk of samples.
pub fn decoder_logits(model: &SegModel, samples: &[Sample]) -> Tensor {
    let mut g = crate::autograd::Graph::new();
    let b = model.bind(&mut g);
    let x = g.constant(images_to_tensor(samples.iter().map(|s| &s.image)));
    let fp = model.forward(&mut g, &b, x, false);
    g.value(fp.decoder_logits).clone()
}

/// mIoU of argmax predictions and ECE of the decoder softmax over the
/// non-ignored pixels of `samples`.
pub fn evaluate(model: &SegModel, samples: &[Sample]) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    let mut bins = CalibrationBins::new(ECE_BINS);
    for chunk in samples.chunks(EVAL_BATCH) {
        let logits = decoder_logits(model, chunk);
        let masks: Vec<LabelMask> = chunk.iter().map(|s| s.mask.clone()).collect();
        for (t, p) in masks.iter().zip(argmax_masks(&logits)) {
            cm.accumulate(t, &p);
        }
        add_calibration(&softmax_nchw(&logits), &masks, &mut bins);
    }
    let iou = miou(&cm)?;
    Ok(EvalReport { miou: iou.miou, per_class_iou: iou.per_class, ece: bins.ece()? })
}

/// ECE of each pseudo-label construction on held-out pixel-labeled data,
/// with CAM classes gated by the classifier.
pub fn pseudo_label_calibration(
    model: &SegModel,
    samples: &[Sample],
    cfg: &FusionConfig,
    variants: &[FusionVariant],
) -> Result<Vec<(FusionVariant, f64)>> {
    let mut bins: Vec<CalibrationBins> = variants.iter().map(|_| CalibrationBins::new(ECE_BINS)).collect();
    for chunk in samples.chunks(EVAL_BATCH) {
        let (p, m) = predict_logits(model, &images_to_tensor(chunk.iter().map(|s| &s.image)));
        let masks: Vec<LabelMask> = chunk.iter().map(|s| s.mask.clone()).collect();
        for (v, b) in variants.iter().zip(bins.iter_mut()) {
            add_calibration(&fusion_variant(&p, &m, *v, cfg).probs, &masks, b);
        }
    }
    variants.iter().zip(&bins).map(|(v, b)| Ok((*v, b.ece()?))).collect()
}

/// One stored offline pseudo label.
#[derive(Debug, Clone)]
pub struct OfflineLabel {
    pub id: String,
    pub mask: LabelMask,
    pub ignore_fraction: f64,
}

/// Hardened decoder predictions: pixels whose softmax confidence exceeds
/// `threshold` keep their argmax class, the rest are ignored.
pub fn generate_offline_pseudo_labels(model: &SegModel, samples: &[Sample], threshold: f64) -> Vec<OfflineLabel> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let probs = softmax_nchw(&decoder_logits(model, chunk));
        for (s, mask) in chunk.iter().zip(harden(&PseudoLabel { probs }, threshold)) {
            let ignored = mask.classes().iter().filter(|&&v| v == IGNORE).count();
            let ignore_fraction = ignored as f64 / mask.classes().len() as f64;
            out.push(OfflineLabel { id: s.id.clone(), mask, ignore_fraction });
        }
    }
    out
}
