//! Calibrated fusion of decoder and SGC predictions into soft pseudo labels.
//!
//! For every pixel, the decoder logits `p` and SGC logits `m` are divided by
//! their joint Euclidean magnitude, turned into two distributions, mixed with
//! weight `gamma`, and sharpened with temperature `T`:
//!
//! ```text
//! N = sqrt(Σ_i p_i² + m_i²)
//! y = Sharpen(γ·softmax(p / N) + (1 − γ)·softmax(m / N), T)
//! ```
//!
//! The ablation variants in [`FusionVariant`] drop the normalization, the
//! sharpening, or one of the two sources.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::kernels::{gather_pixel, scatter_pixel, softmax_in_place};
use crate::data::{LabelMask, IGNORE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound of the normalization factor.
pub const NORM_EPS: f64 = 1e-8;

/// Hyperparameters of the pseudo-label fusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub gamma: f64,
    pub temperature: f64,
    pub mode: LabelMode,
    pub hard_threshold: f64,
}

/// Whether pseudo labels are used as distributions or hardened to one-hot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Soft,
    Hard,
}

/// Named fusion constant presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPreset {
    /// γ = 0.5, T = 0.5.
    LowData,
    /// γ = 0.3, T = 0.7, used with large unlabeled pools.
    HighData,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self::preset(FusionPreset::LowData)
    }
}

impl FusionConfig {
    pub fn preset(preset: FusionPreset) -> Self {
        let (gamma, temperature) = match preset {
            FusionPreset::LowData => (0.5, 0.5),
            FusionPreset::HighData => (0.3, 0.7),
        };
        Self { gamma, temperature, mode: LabelMode::Soft, hard_threshold: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("fusion.gamma", format!("must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(Error::config("fusion.temperature", format!("must lie in (0, 1], got {}", self.temperature)));
        }
        if !(self.hard_threshold > 0.0 && self.hard_threshold < 1.0) {
            return Err(Error::config(
                "fusion.hard_threshold",
                format!("must lie in (0, 1), got {}", self.hard_threshold),
            ));
        }
        Ok(())
    }
}

/// Per-pixel pseudo-label distributions, NCHW.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub probs: Tensor,
}

impl PseudoLabel {
    pub fn num_classes(&self) -> usize {
        self.probs.dim(1)
    }

    /// Largest deviation of any pixel's mass from 1, and the smallest entry.
    pub fn simplex_error(&self) -> (f64, f64) {
        let s = self.probs.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let d = self.probs.data();
        let mut worst = 0.0f64;
        for b in 0..n {
            for p in 0..plane {
                let sum: f64 = (0..c).map(|k| d[(b * c + k) * plane + p]).sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        (worst, d.iter().copied().fold(f64::INFINITY, f64::min))
    }
}

/// Joint magnitude of two logit vectors, floored at [`NORM_EPS`].
pub fn norm_factor(p: &[f64], m: &[f64]) -> f64 {
    assert_eq!(p.len(), m.len(), "norm_factor: length mismatch");
    let s: f64 = p.iter().zip(m).map(|(a, b)| a * a + b * b).sum();
    s.sqrt().max(NORM_EPS)
}

/// Temperature sharpening `a_i^{1/T} / Σ_j a_j^{1/T}`.
pub fn sharpen(p: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::config("temperature", format!("must be > 0, got {temperature}")));
    }
    let mut out = p.to_vec();
    sharpen_in_place(&mut out, temperature);
    Ok(out)
}

fn sharpen_in_place(p: &mut [f64], temperature: f64) {
    if temperature == 1.0 {
        return;
    }
    // Log domain avoids underflow of a^{1/T} for small T.
    for v in p.iter_mut() {
        *v = if *v > 0.0 { v.ln() / temperature } else { f64::NEG_INFINITY };
    }
    softmax_in_place(p);
}

/// Fused distribution of one pixel, written to `out`.
pub fn fuse_pixel(p: &[f64], m: &[f64], gamma: f64, temperature: f64, out: &mut [f64]) {
    let c = p.len();
    let norm = norm_factor(p, m);
    let mut a: Vec<f64> = p.iter().map(|v| v / norm).collect();
    let mut b: Vec<f64> = m.iter().map(|v| v / norm).collect();
    softmax_in_place(&mut a);
    softmax_in_place(&mut b);
    for k in 0..c {
        out[k] = gamma * a[k] + (1.0 - gamma) * b[k];
    }
    sharpen_in_place(out, temperature);
}

/// Vector-Jacobian product of [`fuse_pixel`]: returns (dp, dm) for upstream `dy`.
pub fn fuse_pixel_backward(p: &[f64], m: &[f64], gamma: f64, temperature: f64, dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let c = p.len();
    let sq: f64 = p.iter().zip(m).map(|(a, b)| a * a + b * b).sum();
    let raw = sq.sqrt();
    let norm = raw.max(NORM_EPS);
    let mut a: Vec<f64> = p.iter().map(|v| v / norm).collect();
    let mut b: Vec<f64> = m.iter().map(|v| v / norm).collect();
    softmax_in_place(&mut a);
    softmax_in_place(&mut b);
    let q: Vec<f64> = (0..c).map(|k| gamma * a[k] + (1.0 - gamma) * b[k]).collect();

    let dq: Vec<f64> = if temperature == 1.0 {
        dy.to_vec()
    } else {
        let mut r = q.clone();
        sharpen_in_place(&mut r, temperature);
        let dot: f64 = r.iter().zip(dy).map(|(x, y)| x * y).sum();
        (0..c).map(|k| r[k] * (dy[k] - dot) / (temperature * q[k])).collect()
    };
    let softmax_vjp = |s: &[f64], g: &[f64]| -> Vec<f64> {
        let dot: f64 = s.iter().zip(g).map(|(x, y)| x * y).sum();
        s.iter().zip(g).map(|(x, y)| x * (y - dot)).collect()
    };
    let da: Vec<f64> = dq.iter().map(|v| gamma * v).collect();
    let db: Vec<f64> = dq.iter().map(|v| (1.0 - gamma) * v).collect();
    let du = softmax_vjp(&a, &da);
    let dv = softmax_vjp(&b, &db);

    let mut dp: Vec<f64> = du.iter().map(|v| v / norm).collect();
    let mut dm: Vec<f64> = dv.iter().map(|v| v / norm).collect();
    if raw > NORM_EPS {
        // ∂(x/N)/∂N = −x/N², ∂N/∂z = z/N.
        let dn: f64 = -(0..c).map(|k| du[k] * p[k] + dv[k] * m[k]).sum::<f64>() / (norm * norm);
        for k in 0..c {
            dp[k] += dn * p[k] / norm;
            dm[k] += dn * m[k] / norm;
        }
    }
    (dp, dm)
}

fn map_pixels(shape: &[usize], mut f: impl FnMut(usize, usize, usize, usize, &mut [f64])) -> Vec<f64> {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![0.0; n * c * plane];
    let mut buf = vec![0.0; c];
    for b in 0..n {
        for pix in 0..plane {
            f(b, c, plane, pix, &mut buf);
            scatter_pixel(&mut out, b, c, plane, pix, &buf);
        }
    }
    out
}

pub(crate) fn fuse_nchw(p: &[f64], m: &[f64], shape: &[usize], gamma: f64, temperature: f64) -> Vec<f64> {
    let c = shape[1];
    let mut pv = vec![0.0; c];
    let mut mv = vec![0.0; c];
    map_pixels(shape, |b, c, plane, pix, out| {
        gather_pixel(p, b, c, plane, pix, &mut pv);
        gather_pixel(m, b, c, plane, pix, &mut mv);
        fuse_pixel(&pv, &mv, gamma, temperature, out);
    })
}

pub(crate) fn fuse_nchw_backward(
    p: &[f64],
    m: &[f64],
    shape: &[usize],
    gamma: f64,
    temperature: f64,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut dp = vec![0.0; p.len()];
    let mut dm = vec![0.0; m.len()];
    let (mut pv, mut mv, mut gv) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    for b in 0..n {
        for pix in 0..plane {
            gather_pixel(p, b, c, plane, pix, &mut pv);
            gather_pixel(m, b, c, plane, pix, &mut mv);
            gather_pixel(dy, b, c, plane, pix, &mut gv);
            let (a, bb) = fuse_pixel_backward(&pv, &mv, gamma, temperature, &gv);
            scatter_pixel(&mut dp, b, c, plane, pix, &a);
            scatter_pixel(&mut dm, b, c, plane, pix, &bb);
        }
    }
    (dp, dm)
}

fn check_pair(p: &Tensor, m: &Tensor) {
    assert_eq!(p.shape(), m.shape(), "fusion inputs must be aligned");
    assert_eq!(p.shape().len(), 4, "fusion inputs must be NCHW");
}

/// Calibrated fusion of decoder logits and SGC logits (both NCHW, same shape).
pub fn fuse(p_logits: &Tensor, m_logits: &Tensor, cfg: &FusionConfig) -> PseudoLabel {
    check_pair(p_logits, m_logits);
    let s = p_logits.shape().to_vec();
    let data = fuse_nchw(p_logits.data(), m_logits.data(), &s, cfg.gamma, cfg.temperature);
    PseudoLabel { probs: Tensor::new(s, data) }
}

/// Pixel → argmax class when its top probability exceeds `threshold`,
/// otherwise the ignore value. One mask per batch item.
pub fn harden(y: &PseudoLabel, threshold: f64) -> Vec<LabelMask> {
    let s = y.probs.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let d = y.probs.data();
    let mut buf = vec![0.0; c];
    (0..n)
        .map(|b| {
            let classes = (0..plane)
                .map(|pix| {
                    gather_pixel(d, b, c, plane, pix, &mut buf);
                    let (arg, max) = argmax(&buf);
                    if max > threshold {
                        arg as u8
                    } else {
                        IGNORE
                    }
                })
                .collect();
            LabelMask::new(h, w, classes)
        })
        .collect()
}

pub(crate) fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Pseudo-label construction alternatives compared in the calibration and
/// pseudo-label-source ablations.
///
/// | variant | pipeline |
/// |---|---|
/// | `decoder_only` | softmax(p) |
/// | `sgc_only` | softmax(m) |
/// | `mix_no_norm` | Sharpen(γ·softmax(p) + (1−γ)·softmax(m), T) |
/// | `mix_no_sharpen` | γ·softmax(p/N) + (1−γ)·softmax(m/N) |
/// | `full_no_norm_no_sharpen` | γ·softmax(p) + (1−γ)·softmax(m) |
/// | `hard_decoder` | one-hot argmax of p |
/// | `full` | Sharpen(γ·softmax(p/N) + (1−γ)·softmax(m/N), T) |
///
/// The set is a reconstruction of the fusion alternatives the method was
/// compared against; only `full` is the method itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    DecoderOnly,
    SgcOnly,
    MixNoNorm,
    MixNoSharpen,
    FullNoNormNoSharpen,
    HardDecoder,
    Full,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 7] = [
        FusionVariant::DecoderOnly,
        FusionVariant::SgcOnly,
        FusionVariant::MixNoNorm,
        FusionVariant::MixNoSharpen,
        FusionVariant::FullNoNormNoSharpen,
        FusionVariant::HardDecoder,
        FusionVariant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::DecoderOnly => "decoder_only",
            FusionVariant::SgcOnly => "sgc_only",
            FusionVariant::MixNoNorm => "mix_no_norm",
            FusionVariant::MixNoSharpen => "mix_no_sharpen",
            FusionVariant::FullNoNormNoSharpen => "full_no_norm_no_sharpen",
            FusionVariant::HardDecoder => "hard_decoder",
            FusionVariant::Full => "full",
        }
    }

    /// Whether the variant reads the SGC logits at all.
    pub fn uses_sgc(self) -> bool {
        !matches!(self, FusionVariant::DecoderOnly | FusionVariant::HardDecoder)
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("fusion variant", format!("unknown variant `{s}`")))
    }
}

/// Applies the named ablation pipeline. `Full` is identical to [`fuse`].
pub fn fusion_variant(p_logits: &Tensor, m_logits: &Tensor, variant: FusionVariant, cfg: &FusionConfig) -> PseudoLabel {
    check_pair(p_logits, m_logits);
    if variant == FusionVariant::Full {
        return fuse(p_logits, m_logits, cfg);
    }
    let s = p_logits.shape().to_vec();
    let (gamma, t) = (cfg.gamma, cfg.temperature);
    let c = s[1];
    let mut pv = vec![0.0; c];
    let mut mv = vec![0.0; c];
    let data = map_pixels(&s, |b, c, plane, pix, out| {
        gather_pixel(p_logits.data(), b, c, plane, pix, &mut pv);
        gather_pixel(m_logits.data(), b, c, plane, pix, &mut mv);
        match variant {
            FusionVariant::DecoderOnly => {
                out.copy_from_slice(&pv);
                softmax_in_place(out);
            }
            FusionVariant::SgcOnly => {
                out.copy_from_slice(&mv);
                softmax_in_place(out);
            }
            FusionVariant::HardDecoder => {
                let (arg, _) = argmax(&pv);
                out.iter_mut().enumerate().for_each(|(k, o)| *o = if k == arg { 1.0 } else { 0.0 });
            }
            FusionVariant::MixNoNorm | FusionVariant::FullNoNormNoSharpen => {
                softmax_in_place(&mut pv);
                softmax_in_place(&mut mv);
                for k in 0..c {
                    out[k] = gamma * pv[k] + (1.0 - gamma) * mv[k];
                }
                if variant == FusionVariant::MixNoNorm {
                    sharpen_in_place(out, t);
                }
            }
            FusionVariant::MixNoSharpen => fuse_pixel(&pv, &mv, gamma, 1.0, out),
            FusionVariant::Full => unreachable!(),
        }
    });
    PseudoLabel { probs: Tensor::new(s, data) }
}
