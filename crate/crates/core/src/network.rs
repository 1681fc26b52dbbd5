//! The segmentation network: a small dilated convolutional encoder, a light
//! decoder, a one-layer multi-label classifier, hypercolumn features,
//! Grad-CAM, and the parameters of the SGC module.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BnLayout, BnMode, ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::sgc::{sgc_forward, AttentionVars};
use crate::tensor::Tensor;

/// Epsilon guarding max-normalization of near-empty CAM channels.
pub const CAM_EPS: f64 = 1e-8;

/// Momentum of running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackbonePreset {
    /// Gradient-check sized encoder (a few thousand parameters).
    Tiny,
    /// Default desk-scale encoder.
    Desk,
    /// A wider desk-scale encoder, the second arm of the backbone ablation.
    DeskWide,
    /// Named for configuration compatibility; requires pretrained weights.
    Xception65,
    /// Named for configuration compatibility; requires pretrained weights.
    Resnet50,
}

impl BackbonePreset {
    pub fn name(self) -> &'static str {
        match self {
            BackbonePreset::Tiny => "tiny",
            BackbonePreset::Desk => "desk",
            BackbonePreset::DeskWide => "desk_wide",
            BackbonePreset::Xception65 => "xception65",
            BackbonePreset::Resnet50 => "resnet50",
        }
    }

    /// Stage widths, decoder width, and whether stages 2 to 4 carry a
    /// second convolution.
    fn widths(self) -> Result<([usize; 4], usize, bool)> {
        match self {
            BackbonePreset::Tiny => Ok(([4, 4, 6, 6], 6, false)),
            BackbonePreset::Desk => Ok(([12, 24, 32, 48], 32, true)),
            BackbonePreset::DeskWide => Ok(([16, 32, 48, 64], 48, true)),
            BackbonePreset::Xception65 | BackbonePreset::Resnet50 => Err(Error::config(
                "model.backbone",
                format!("`{}` needs ImageNet-pretrained weights, which are not provided", self.name()),
            )),
        }
    }
}

impl fmt::Display for BackbonePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackbonePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            BackbonePreset::Tiny,
            BackbonePreset::Desk,
            BackbonePreset::DeskWide,
            BackbonePreset::Xception65,
            BackbonePreset::Resnet50,
        ]
        .into_iter()
        .find(|b| b.name() == s)
        .ok_or_else(|| Error::config("model.backbone", format!("unknown backbone `{s}`")))
    }
}

/// Which encoder stages form the similarity features of the SGC module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypercolumnMode {
    LastTwoStages,
    LastStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackbonePreset,
    pub num_classes: usize,
    /// Width of the key/query projections.
    pub attention_dim: usize,
    pub hypercolumn: HypercolumnMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { backbone: BackbonePreset::Desk, num_classes: 4, attention_dim: 16, hypercolumn: HypercolumnMode::LastTwoStages }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.widths()?;
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config("model.num_classes", "must lie in [2, 255]"));
        }
        if self.attention_dim == 0 {
            return Err(Error::config("model.attention_dim", "must be positive"));
        }
        Ok(())
    }
}

/// Parameter groups. Θ is [`ParamGroup::Attention`]; θ is everything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Classifier,
    Attention,
}

impl ParamGroup {
    pub fn is_attention(self) -> bool {
        self == ParamGroup::Attention
    }
}

/// One named array of the model. Buffers (running statistics) are not
/// trainable.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct BnLayer {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    w: usize,
    bn: BnLayer,
    geom: ConvGeom,
}

#[derive(Debug, Clone, Copy)]
struct Layers {
    stages: [ConvBn; 4],
    extra: [Option<ConvBn>; 4],
    dec: ConvBn,
    dec_w: usize,
    dec_b: usize,
    cls_w: usize,
    cls_b: usize,
    w_k: usize,
    w_v: usize,
    w_c: usize,
    attn_bn: BnLayer,
}

/// Model parameters θ and Θ plus their layer layout.
#[derive(Debug, Clone)]
pub struct SegModel {
    config: ModelConfig,
    entries: Vec<ParamEntry>,
    layers: Layers,
}

/// Graph handles of every parameter for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    /// `(entry index, var)` of every trainable parameter.
    pub fn params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }

    pub fn var(&self, index: usize) -> Var {
        self.vars[index].expect("not a trainable parameter")
    }
}

/// Batch statistics produced by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    mean_index: usize,
    var_index: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Intermediate results of a forward pass.
#[derive(Debug, Clone)]
pub struct FeaturePack {
    pub stage3: Var,
    pub stage4: Var,
    pub pooled: Var,
    pub class_logits: Var,
    /// N × C × H × W, at input resolution.
    pub decoder_logits: Var,
    pub bn_updates: Vec<BnUpdate>,
}

struct Builder<'a, R: Rng> {
    entries: Vec<ParamEntry>,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn push(&mut self, name: String, group: ParamGroup, trainable: bool, value: Tensor) -> usize {
        self.entries.push(ParamEntry { name, group, trainable, value });
        self.entries.len() - 1
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(self.rng)).collect())
    }

    fn bn(&mut self, name: &str, group: ParamGroup, c: usize) -> BnLayer {
        BnLayer {
            gamma: self.push(format!("{name}.bn.gamma"), group, true, Tensor::filled(&[c], 1.0)),
            beta: self.push(format!("{name}.bn.beta"), group, true, Tensor::zeros(&[c])),
            mean: self.push(format!("{name}.bn.running_mean"), group, false, Tensor::zeros(&[c])),
            var: self.push(format!("{name}.bn.running_var"), group, false, Tensor::filled(&[c], 1.0)),
        }
    }

    fn conv_bn(&mut self, name: &str, group: ParamGroup, cin: usize, cout: usize, geom: ConvGeom) -> ConvBn {
        let k = geom.kernel;
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = self.normal(&[cout, cin, k, k], std);
        let w = self.push(format!("{name}.weight"), group, true, w);
        ConvBn { w, bn: self.bn(name, group, cout), geom }
    }
}

impl SegModel {
    /// Builds a freshly initialized model.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (w, dec_width, deep) = config.backbone.widths()?;
        let c = config.num_classes;
        let mut b = Builder { entries: Vec::new(), rng };
        use ParamGroup::*;
        let stages = [
            b.conv_bn("stage1", Encoder, 3, w[0], ConvGeom::new(3, 2, 1, 1)),
            b.conv_bn("stage2", Encoder, w[0], w[1], ConvGeom::new(3, 2, 1, 1)),
            b.conv_bn("stage3", Encoder, w[1], w[2], ConvGeom::same(3, 2)),
            b.conv_bn("stage4", Encoder, w[2], w[3], ConvGeom::same(3, 4)),
        ];
        let mut extra = [None; 4];
        if deep {
            for (i, dil) in [(1, 1), (2, 2), (3, 4)] {
                let name = format!("stage{}.b", i + 1);
                extra[i] = Some(b.conv_bn(&name, Encoder, w[i], w[i], ConvGeom::same(3, dil)));
            }
        }
        let dec = b.conv_bn("decoder.conv", Decoder, w[2] + w[3], dec_width, ConvGeom::same(3, 1));
        let t = b.normal(&[c, dec_width, 1, 1], (1.0 / dec_width as f64).sqrt());
        let dec_w = b.push("decoder.out.weight".into(), Decoder, true, t);
        let dec_b = b.push("decoder.out.bias".into(), Decoder, true, Tensor::zeros(&[c]));
        let t = b.normal(&[w[3], c - 1], (1.0 / w[3] as f64).sqrt());
        let cls_w = b.push("classifier.weight".into(), Classifier, true, t);
        let cls_b = b.push("classifier.bias".into(), Classifier, true, Tensor::zeros(&[c - 1]));
        let d = match config.hypercolumn {
            HypercolumnMode::LastTwoStages => w[2] + w[3],
            HypercolumnMode::LastStage => w[3],
        };
        let he = config.attention_dim;
        let t = b.normal(&[d, he], (1.0 / d as f64).sqrt());
        let w_k = b.push("attention.key".into(), Attention, true, t);
        let t = b.normal(&[d, he], (1.0 / d as f64).sqrt());
        let w_v = b.push("attention.query".into(), Attention, true, t);
        let mut eye = Tensor::zeros(&[c, c]);
        (0..c).for_each(|i| eye.data_mut()[i * c + i] = 1.0);
        let w_c = b.push("attention.out".into(), Attention, true, eye);
        let attn_bn = b.bn("attention.out", Attention, c);
        let layers = Layers { stages, extra, dec, dec_w, dec_b, cls_w, cls_b, w_k, w_v, w_c, attn_bn };
        Ok(Self { config, entries: b.entries, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Replaces parameter values by name; every entry must be present with
    /// a matching shape.
    pub fn load_values(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        let map: std::collections::HashMap<&str, &Tensor> = values.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for e in &mut self.entries {
            let t = map.get(e.name.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = (*t).clone();
        }
        Ok(())
    }

    /// Records every trainable parameter on `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.entries.iter().map(|e| e.trainable.then(|| g.param(e.value.clone()))).collect();
        Bound { vars }
    }

    fn bn_mode(&self, layer: BnLayer, train: bool) -> BnMode {
        if train {
            BnMode::Batch
        } else {
            BnMode::Running {
                mean: self.entries[layer.mean].value.data().to_vec(),
                var: self.entries[layer.var].value.data().to_vec(),
            }
        }
    }

    fn conv_bn_relu(&self, g: &mut Graph, b: &Bound, x: Var, l: ConvBn, train: bool, upd: &mut Vec<BnUpdate>) -> Var {
        let y = g.conv2d(x, b.var(l.w), None, l.geom);
        let (y, stats) = g.batch_norm(y, b.var(l.bn.gamma), b.var(l.bn.beta), BnLayout::Nchw, self.bn_mode(l.bn, train));
        if let Some((mean, var)) = stats {
            upd.push(BnUpdate { mean_index: l.bn.mean, var_index: l.bn.var, mean, var });
        }
        g.relu(y)
    }

    /// Forward pass on an N × 3 × H × W input. `train` selects batch
    /// statistics for every normalization layer.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var, train: bool) -> FeaturePack {
        let s = g.shape(x).to_vec();
        assert!(s.len() == 4 && s[1] == 3, "forward expects N×3×H×W input, got {s:?}");
        let (h, w) = (s[2], s[3]);
        let l = &self.layers;
        let mut upd = Vec::new();
        let mut outs = Vec::with_capacity(4);
        let mut cur = x;
        for (stage, extra) in l.stages.iter().zip(&l.extra) {
            cur = self.conv_bn_relu(g, b, cur, *stage, train, &mut upd);
            if let Some(e) = extra {
                cur = self.conv_bn_relu(g, b, cur, *e, train, &mut upd);
            }
            outs.push(cur);
        }
        let (stage3, stage4) = (outs[2], outs[3]);

        let cat = g.concat_channels(&[stage3, stage4]);
        let d = self.conv_bn_relu(g, b, cat, l.dec, train, &mut upd);
        let low = g.conv2d(d, b.var(l.dec_w), Some(b.var(l.dec_b)), ConvGeom::new(1, 1, 0, 1));
        let decoder_logits = g.resize(low, h, w);

        let pooled = g.global_avg_pool(stage4);
        let class_logits = g.linear(pooled, b.var(l.cls_w), Some(b.var(l.cls_b)));
        FeaturePack { stage3, stage4, pooled, class_logits, decoder_logits, bn_updates: upd }
    }

    /// Hypercolumn features at the last stage's resolution (N × D × H' × W').
    pub fn hypercolumn(&self, g: &mut Graph, fp: &FeaturePack) -> Var {
        hypercolumn(g, fp.stage3, fp.stage4, self.config.hypercolumn)
    }

    /// Blends batch statistics into the running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (idx, batch) in [(u.mean_index, &u.mean), (u.var_index, &u.var)] {
                for (r, v) in self.entries[idx].value.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
    }

    pub fn attention_vars(&self, b: &Bound) -> AttentionVars {
        let l = &self.layers;
        AttentionVars {
            w_k: b.var(l.w_k),
            w_v: b.var(l.w_v),
            w_c: b.var(l.w_c),
            bn_gamma: b.var(l.attn_bn.gamma),
            bn_beta: b.var(l.attn_bn.beta),
        }
    }

    /// SGC logits (N × C × H' × W') from value maps and hypercolumn values.
    /// Both inputs enter as constants.
    pub fn sgc(&self, g: &mut Graph, b: &Bound, values: &Tensor, hypercolumn: &Tensor, train: bool) -> (Var, Vec<BnUpdate>) {
        let bn = self.layers.attn_bn;
        let (out, stats) = sgc_forward(g, &self.attention_vars(b), values, hypercolumn, self.bn_mode(bn, train));
        let upd = stats
            .map(|(mean, var)| vec![BnUpdate { mean_index: bn.mean, var_index: bn.var, mean, var }])
            .unwrap_or_default();
        (out, upd)
    }
}

/// Channel concatenation of two stage outputs after resampling the first to
/// the second's resolution, or the last stage alone.
pub fn hypercolumn(g: &mut Graph, stage3: Var, stage4: Var, mode: HypercolumnMode) -> Var {
    match mode {
        HypercolumnMode::LastStage => stage4,
        HypercolumnMode::LastTwoStages => {
            let (h, w) = (g.shape(stage4)[2], g.shape(stage4)[3]);
            let a = if g.shape(stage3)[2..] == [h, w] { stage3 } else { g.resize(stage3, h, w) };
            g.concat_channels(&[a, stage4])
        }
    }
}

/// Grad-CAM channel weights for foreground class `class_index` (0-based
/// among the C − 1 classifier outputs): the spatial mean of
/// ∂ class_logit / ∂ features, per image. Returns N × D.
pub fn grad_cam_weights(g: &Graph, class_logits: Var, features: Var, class_index: usize) -> Tensor {
    let (n, k) = (g.shape(class_logits)[0], g.shape(class_logits)[1]);
    assert!(class_index < k, "class index {class_index} out of range for {k} foreground classes");
    let mut seed = Tensor::zeros(&[n, k]);
    (0..n).for_each(|b| seed.data_mut()[b * k + class_index] = 1.0);
    let grads = g.backward_with(class_logits, seed, Some(features));
    let s = g.shape(features);
    let (d, plane) = (s[1], s[2] * s[3]);
    let grad = grads.get_or_zeros(features, n * d * plane);
    let alpha = grad.chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect();
    Tensor::new(vec![n, d], alpha)
}

/// ReLU(Σ_d α_d · A_d) per image; `features` is N × D × H' × W', `alpha`
/// is N × D. Returns N × H' × W'.
pub fn cam_from_weights(features: &Tensor, alpha: &Tensor) -> Tensor {
    let s = features.shape();
    let (n, d, plane) = (s[0], s[1], s[2] * s[3]);
    let a = features.data();
    let mut out = vec![0.0; n * plane];
    for b in 0..n {
        let o = &mut out[b * plane..(b + 1) * plane];
        for ch in 0..d {
            let wgt = alpha.data()[b * d + ch];
            let f = &a[(b * d + ch) * plane..(b * d + ch + 1) * plane];
            o.iter_mut().zip(f).for_each(|(o, f)| *o += wgt * f);
        }
        o.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Tensor::new(vec![n, s[2], s[3]], out)
}

/// Grad-CAMs of every foreground class w.r.t. the last encoder stage,
/// N × (C − 1) × H' × W'.
pub fn grad_cams(g: &Graph, fp: &FeaturePack) -> Tensor {
    let k = g.shape(fp.class_logits)[1];
    let feats = g.value(fp.stage4);
    let s = feats.shape();
    let (n, plane) = (s[0], s[2] * s[3]);
    let mut out = vec![0.0; n * k * plane];
    for c in 0..k {
        let cam = cam_from_weights(feats, &grad_cam_weights(g, fp.class_logits, fp.stage4, c));
        for b in 0..n {
            out[(b * k + c) * plane..(b * k + c + 1) * plane].copy_from_slice(&cam.data()[b * plane..(b + 1) * plane]);
        }
    }
    Tensor::new(vec![n, k, s[2], s[3]], out)
}

/// Foreground presence from classifier logits (sigmoid > 0.5).
pub fn predicted_presence(class_logits: &Tensor) -> Vec<Vec<bool>> {
    let k = class_logits.dim(1);
    class_logits.data().chunks(k).map(|row| row.iter().map(|&z| z > 0.0).collect()).collect()
}

/// Value maps for the SGC module from foreground CAMs (N × (C−1) × H' × W'):
/// each present channel is max-normalized, absent channels are zeroed, and
/// a background channel `1 − max_c foreground_c` is prepended.
pub fn build_value_maps(cams: &Tensor, present: &[Vec<bool>]) -> Tensor {
    let s = cams.shape();
    let (n, k, plane) = (s[0], s[1], s[2] * s[3]);
    assert_eq!(present.len(), n, "one presence vector per image");
    let c = k + 1;
    let mut out = vec![0.0; n * c * plane];
    for b in 0..n {
        assert_eq!(present[b].len(), k);
        for f in 0..k {
            if !present[b][f] {
                continue;
            }
            let src = &cams.data()[(b * k + f) * plane..(b * k + f + 1) * plane];
            let max = src.iter().cloned().fold(0.0, f64::max);
            let dst = &mut out[(b * c + f + 1) * plane..(b * c + f + 2) * plane];
            if max > CAM_EPS {
                dst.iter_mut().zip(src).for_each(|(d, v)| *d = v / max);
            } else {
                dst.copy_from_slice(src);
            }
        }
        for p in 0..plane {
            let fg = (1..c).map(|ch| out[(b * c + ch) * plane + p]).fold(0.0, f64::max);
            out[b * c * plane + p] = 1.0 - fg;
        }
    }
    Tensor::new(vec![n, c, s[2], s[3]], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(c: usize) -> SegModel {
        let cfg = ModelConfig { backbone: BackbonePreset::Tiny, num_classes: c, attention_dim: 4, ..Default::default() };
        SegModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn input(n: usize, hw: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, 3, hw, hw], (0..n * 3 * hw * hw).map(|_| rng.gen()).collect())
    }

    #[test]
    fn tiny_model_is_small_and_shapes_hold() {
        let m = tiny(4);
        assert!(m.num_parameters() <= 5000, "{}", m.num_parameters());
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let x = g.constant(input(2, 16, 1));
        let fp = m.forward(&mut g, &b, x, true);
        assert_eq!(g.shape(fp.decoder_logits), &[2, 4, 16, 16]);
        assert_eq!(g.shape(fp.class_logits), &[2, 3]);
        assert_eq!(g.shape(fp.stage4), &[2, 6, 4, 4]);
        let hc = m.hypercolumn(&mut g, &fp);
        assert_eq!(g.shape(hc), &[2, 12, 4, 4]);
    }

    #[test]
    fn identical_inputs_give_identical_rows_in_eval_mode() {
        let m = tiny(3);
        let one = input(1, 16, 2);
        let x = Tensor::stack(&[one.batch_item(0), one.batch_item(0)]);
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let x = g.constant(x);
        let fp = m.forward(&mut g, &b, x, false);
        let out = g.value(fp.decoder_logits);
        assert_eq!(out.batch_item(0), out.batch_item(1));
    }

    #[test]
    fn pretrained_backbones_are_rejected() {
        let cfg = ModelConfig { backbone: BackbonePreset::Xception65, ..Default::default() };
        assert!(matches!(SegModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config { .. })));
        assert_eq!("resnet50".parse::<BackbonePreset>().unwrap(), BackbonePreset::Resnet50);
    }

    #[test]
    fn hypercolumn_of_identical_stages_duplicates_channels() {
        let mut g = Graph::new();
        let t = input(1, 4, 3);
        let a = g.constant(t.clone());
        let bb = g.constant(t.clone());
        let hc = hypercolumn(&mut g, a, bb, HypercolumnMode::LastTwoStages);
        assert_eq!(g.value(hc).data(), [t.data(), t.data()].concat().as_slice());
        assert_eq!(hypercolumn(&mut g, a, bb, HypercolumnMode::LastStage), bb);
    }

    #[test]
    fn single_channel_unit_gradient_cam_is_relu_of_features() {
        let f = Tensor::new(vec![1, 1, 2, 2], vec![0.5, -1.0, 2.0, -0.1]);
        let cam = cam_from_weights(&f, &Tensor::new(vec![1, 1], vec![1.0]));
        assert_eq!(cam.data(), &[0.5, 0.0, 2.0, 0.0]);
        let zero = cam_from_weights(&f, &Tensor::new(vec![1, 1], vec![0.0]));
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_cam_weights_of_linear_head_are_closed_form() {
        // logits = mean_pool(A)·W + b, so α_d = W[d, c] / 1 after averaging
        // the per-position gradient W[d, c] / L over L positions.
        let m = tiny(4);
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let x = g.constant(input(2, 16, 4));
        let fp = m.forward(&mut g, &b, x, true);
        let w = &m.entries()[m.layers.cls_w].value;
        let plane = 16.0;
        for c in 0..3 {
            let alpha = grad_cam_weights(&g, fp.class_logits, fp.stage4, c);
            for bi in 0..2 {
                for d in 0..6 {
                    let want = w.data()[d * 3 + c] / plane;
                    assert!((alpha.data()[bi * 6 + d] - want).abs() < 1e-12);
                }
            }
        }
        let cams = grad_cams(&g, &fp);
        assert!(cams.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn value_maps_follow_their_rules() {
        let zero = Tensor::zeros(&[1, 2, 2, 2]);
        let v = build_value_maps(&zero, &[vec![true, true]]);
        assert_eq!(&v.data()[..4], &[1.0; 4]);
        assert!(v.data()[4..].iter().all(|&x| x == 0.0));

        let mut peak = Tensor::zeros(&[1, 2, 2, 2]);
        peak.data_mut()[1] = 5.0;
        peak.data_mut()[4..].copy_from_slice(&[3.0, 3.0, 3.0, 3.0]);
        let v = build_value_maps(&peak, &[vec![true, false]]);
        assert_eq!(&v.data()[4..8], &[0.0, 1.0, 0.0, 0.0]);
        assert!(v.data()[8..].iter().all(|&x| x == 0.0), "absent class is zeroed");
        assert_eq!(&v.data()[..4], &[1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn overlapping_cams_give_pointwise_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cams = Tensor::new(vec![2, 3, 3, 3], (0..54).map(|_| rng.gen::<f64>() * 4.0).collect());
        let present = vec![vec![true, true, false], vec![false, true, true]];
        let v = build_value_maps(&cams, &present);
        for b in 0..2 {
            for p in 0..9 {
                let mut fg = 0.0f64;
                for f in 0..3 {
                    let val = v.data()[(b * 4 + f + 1) * 9 + p];
                    assert!((0.0..=1.0).contains(&val));
                    if present[b][f] {
                        let ch = &cams.data()[(b * 3 + f) * 9..(b * 3 + f + 1) * 9];
                        let max = ch.iter().cloned().fold(0.0, f64::max);
                        assert!((val - ch[p] / max).abs() < 1e-12);
                    } else {
                        assert_eq!(val, 0.0);
                    }
                    fg = fg.max(val);
                }
                assert!((v.data()[b * 4 * 9 + p] + fg - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_values_round_trip_by_name() {
        let a = tiny(3);
        let mut b = SegModel::new(*a.config(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let values: Vec<_> = a.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect();
        b.load_values(&values).unwrap();
        assert!(a.entries().iter().zip(b.entries()).all(|(x, y)| x.value == y.value));
        assert!(matches!(b.load_values(&values[1..]), Err(Error::Checkpoint(_))));
    }
}
