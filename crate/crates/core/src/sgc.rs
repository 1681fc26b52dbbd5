//! Self-attention refinement of Grad-CAM value maps.
//!
//! For one image with L regions, value scores `m` (L×C) and hypercolumn
//! features `h` (L×D):
//!
//! ```text
//! m̂ = (m + softmax_rows((h·W_k)(h·W_v)ᵀ) · m) · W_c
//! ```
//!
//! followed by a batch-normalized output transform over all regions of the
//! batch. The per-pixel softmax is left to the consumers.

use crate::autograd::{BnLayout, BnMode, Graph, Var};
use crate::autograd::kernels::softmax_in_place;
use crate::tensor::{gemm, Tensor};

/// Graph handles of the attention parameters Θ.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    /// D × He key projection.
    pub w_k: Var,
    /// D × He query projection.
    pub w_v: Var,
    /// C × C output mixing.
    pub w_c: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
}

/// Propagated scores for a single image, before the output transform.
/// `m` is L×C, `h` is L×D, `w_k` and `w_v` are D×He, `w_c` is C×C.
pub fn sgc_propagate(m: &Tensor, h: &Tensor, w_k: &Tensor, w_v: &Tensor, w_c: &Tensor) -> Tensor {
    let (l, c) = (m.dim(0), m.dim(1));
    let d = h.dim(1);
    let he = w_k.dim(1);
    assert_eq!(h.dim(0), l, "scores and features must cover the same regions");
    assert!(w_k.shape() == [d, he] && w_v.shape() == [d, he], "projection shape mismatch");
    assert_eq!(w_c.shape(), [c, c], "output mixing shape mismatch");

    let mut keys = vec![0.0; l * he];
    let mut queries = vec![0.0; l * he];
    gemm(l, d, he, 1.0, h.data(), false, w_k.data(), false, 0.0, &mut keys);
    gemm(l, d, he, 1.0, h.data(), false, w_v.data(), false, 0.0, &mut queries);
    let mut attn = vec![0.0; l * l];
    gemm(l, he, l, 1.0, &keys, false, &queries, true, 0.0, &mut attn);
    attn.chunks_mut(l).for_each(softmax_in_place);
    let mut summed = m.data().to_vec();
    gemm(l, l, c, 1.0, &attn, false, m.data(), false, 1.0, &mut summed);
    let mut out = vec![0.0; l * c];
    gemm(l, c, c, 1.0, &summed, false, w_c.data(), false, 0.0, &mut out);
    Tensor::new(vec![l, c], out)
}

fn nchw_to_rows(x: &Tensor, b: usize) -> Tensor {
    let s = x.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let src = &x.data()[b * c * plane..(b + 1) * c * plane];
    let mut out = vec![0.0; plane * c];
    for k in 0..c {
        for p in 0..plane {
            out[p * c + k] = src[k * plane + p];
        }
    }
    Tensor::new(vec![plane, c], out)
}

/// Records the SGC forward pass for a batch. `values` (N×C×H'×W') and
/// `hypercolumn` (N×D×H'×W') enter as constants, so gradients of anything
/// computed from the output reach only Θ. Returns N×C×H'×W' SGC logits and,
/// for [`BnMode::Batch`], the batch statistics of the output transform.
pub fn sgc_forward(
    g: &mut Graph,
    theta: &AttentionVars,
    values: &Tensor,
    hypercolumn: &Tensor,
    bn: BnMode,
) -> (Var, Option<(Vec<f64>, Vec<f64>)>) {
    let s = values.shape().to_vec();
    let (n, h, w) = (s[0], s[2], s[3]);
    assert_eq!(hypercolumn.dim(0), n);
    assert_eq!(&hypercolumn.shape()[2..], &s[2..], "hypercolumn and value maps are not aligned");
    let mut rows = Vec::with_capacity(n);
    for b in 0..n {
        let m = g.constant(nchw_to_rows(values, b));
        let feats = g.constant(nchw_to_rows(hypercolumn, b));
        let keys = g.matmul(feats, theta.w_k, false);
        let queries = g.matmul(feats, theta.w_v, false);
        let logits = g.matmul(keys, queries, true);
        let attn = g.softmax_rows(logits);
        let prop = g.matmul(attn, m, false);
        let summed = g.add(m, prop);
        rows.push(g.matmul(summed, theta.w_c, false));
    }
    let all = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
    let (normed, stats) = g.batch_norm(all, theta.bn_gamma, theta.bn_beta, BnLayout::Rows, bn);
    (g.rows_to_nchw(normed, n, h, w), stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect())
    }

    fn identity(c: usize) -> Tensor {
        let mut t = Tensor::zeros(&[c, c]);
        for i in 0..c {
            t.data_mut()[i * c + i] = 1.0;
        }
        t
    }

    /// Direct O(L²) evaluation of the propagation rule.
    fn loop_oracle(m: &Tensor, h: &Tensor, wk: &Tensor, wv: &Tensor, wc: &Tensor) -> Tensor {
        let (l, c, d, he) = (m.dim(0), m.dim(1), h.dim(1), wk.dim(1));
        let proj = |w: &Tensor, i: usize| -> Vec<f64> {
            (0..he).map(|e| (0..d).map(|k| h.data()[i * d + k] * w.data()[k * he + e]).sum()).collect()
        };
        let mut out = vec![0.0; l * c];
        for i in 0..l {
            let ki = proj(wk, i);
            let scores: Vec<f64> =
                (0..l).map(|j| ki.iter().zip(proj(wv, j)).map(|(a, b)| a * b).sum()).collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            let mut row = vec![0.0; c];
            for k in 0..c {
                row[k] = m.data()[i * c + k];
                for j in 0..l {
                    row[k] += (scores[j] - mx).exp() / z * m.data()[j * c + k];
                }
            }
            for k in 0..c {
                out[i * c + k] = (0..c).map(|q| row[q] * wc.data()[q * c + k]).sum();
            }
        }
        Tensor::new(vec![l, c], out)
    }

    #[test]
    fn single_region_doubles_the_score() {
        let m = Tensor::new(vec![1, 3], vec![0.2, 0.5, 1.0]);
        let h = Tensor::new(vec![1, 2], vec![0.3, -0.7]);
        let wk = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = sgc_propagate(&m, &h, &wk, &wk, &identity(3));
        assert_eq!(out.data(), &[0.4, 1.0, 2.0]);
    }

    #[test]
    fn constant_features_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = 5;
        let m = random(&mut rng, &[l, 3], 1.0).map(f64::abs);
        let h = Tensor::new(vec![l, 2], [0.4, -1.1].repeat(l));
        let wk = random(&mut rng, &[2, 4], 1.0);
        let wv = random(&mut rng, &[2, 4], 1.0);
        let out = sgc_propagate(&m, &h, &wk, &wv, &identity(3));
        for i in 0..l {
            for k in 0..3 {
                let mean = (0..l).map(|j| m.data()[j * 3 + k]).sum::<f64>() / l as f64;
                assert!((out.data()[i * 3 + k] - (m.data()[i * 3 + k] + mean)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matrix_form_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let l = rng.gen_range(1..=16);
            let c = rng.gen_range(2..=5);
            let d = rng.gen_range(1..=8);
            let he = rng.gen_range(1..=6);
            let m = random(&mut rng, &[l, c], 1.0).map(f64::abs);
            let h = random(&mut rng, &[l, d], 2.0);
            let wk = random(&mut rng, &[d, he], 1.0);
            let wv = random(&mut rng, &[d, he], 1.0);
            let wc = random(&mut rng, &[c, c], 1.0);
            let fast = sgc_propagate(&m, &h, &wk, &wv, &wc);
            let slow = loop_oracle(&m, &h, &wk, &wv, &wc);
            assert!(fast.max_abs_diff(&slow) < 1e-10);
        }
    }

    #[test]
    fn graph_forward_agrees_with_pure_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, c, d, he, hh, ww) = (2, 3, 4, 3, 3, 2);
        let values = random(&mut rng, &[n, c, hh, ww], 1.0).map(f64::abs);
        let hyper = random(&mut rng, &[n, d, hh, ww], 1.0);
        let wk = random(&mut rng, &[d, he], 1.0);
        let wv = random(&mut rng, &[d, he], 1.0);
        let wc = random(&mut rng, &[c, c], 1.0);
        let mut g = Graph::new();
        let theta = AttentionVars {
            w_k: g.param(wk.clone()),
            w_v: g.param(wv.clone()),
            w_c: g.param(wc.clone()),
            bn_gamma: g.param(Tensor::filled(&[c], 1.0)),
            bn_beta: g.param(Tensor::zeros(&[c])),
        };
        let running = BnMode::Running { mean: vec![0.0; c], var: vec![1.0 - crate::autograd::BN_EPS; c] };
        let (out, stats) = sgc_forward(&mut g, &theta, &values, &hyper, running);
        assert!(stats.is_none());
        let out = g.value(out);
        for b in 0..n {
            let want = sgc_propagate(&nchw_to_rows(&values, b), &nchw_to_rows(&hyper, b), &wk, &wv, &wc);
            let got = nchw_to_rows(&out.batch_item(b).reshape(&[1, c, hh, ww]), 0);
            assert!(got.max_abs_diff(&want) < 1e-9);
        }
    }
}
