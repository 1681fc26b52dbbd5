//! Forward and backward kernels for the dense operations used by the graph.

use crate::tensor::gemm;

/// Geometry of a square-kernel 2-D convolution over NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1 && dilation >= 1);
        Self { kernel, stride, padding, dilation }
    }

    /// "Same"-style padding for stride 1.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(kernel, 1, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let ho = (h + 2 * self.padding - span) / self.stride + 1;
        let wo = (w + 2 * self.padding - span) / self.stride + 1;
        (ho, wo)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize, cols: &mut [f64]) {
    let k = g.kernel;
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = (ky * g.dilation) as isize - g.padding as isize;
                let dx = (kx * g.dilation) as isize - g.padding as isize;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + dy;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + dx;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { xrow[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize, dx: &mut [f64]) {
    let k = g.kernel;
    let plane = ho * wo;
    for ci in 0..c {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let oy_off = (ky * g.dilation) as isize - g.padding as isize;
                let ox_off = (kx * g.dilation) as isize - g.padding as isize;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + oy_off;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride) as isize + ox_off;
                        if ix >= 0 && ix < w as isize {
                            dxc[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. `x`: (n, cin, h, w); `weight`: (cout, cin, k, k).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    g: ConvGeom,
) -> Vec<f64> {
    let (ho, wo) = g.output_size(h, w);
    let plane = ho * wo;
    let ckk = cin * g.kernel * g.kernel;
    let mut out = vec![0.0; n * cout * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; ckk * plane] };
    for b in 0..n {
        let xb = &x[b * cin * h * w..(b + 1) * cin * h * w];
        let ob = &mut out[b * cout * plane..(b + 1) * cout * plane];
        let src: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, cin, h, w, g, ho, wo, &mut cols);
            &cols
        };
        gemm(cout, ckk, plane, 1.0, weight, false, src, false, 0.0, ob);
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(plane).enumerate() {
                let bv = bias[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Convolution backward. Accumulates into whichever gradient buffers are given.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    g: ConvGeom,
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let (ho, wo) = g.output_size(h, w);
    let plane = ho * wo;
    let ckk = cin * g.kernel * g.kernel;
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; ckk * plane] };
    let mut dcols = if pointwise { Vec::new() } else { vec![0.0; ckk * plane] };
    for b in 0..n {
        let xb = &x[b * cin * h * w..(b + 1) * cin * h * w];
        let dyb = &dy[b * cout * plane..(b + 1) * cout * plane];
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in dyb.chunks(plane).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[f64] = if pointwise {
                xb
            } else {
                im2col(xb, cin, h, w, g, ho, wo, &mut cols);
                &cols
            };
            // dW (cout×ckk) += dY (cout×plane) · colsᵀ (plane×ckk)
            gemm(cout, plane, ckk, 1.0, dyb, false, src, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * cin * h * w..(b + 1) * cin * h * w];
            if pointwise {
                gemm(cin, cout, plane, 1.0, weight, true, dyb, false, 1.0, dxb);
            } else {
                gemm(ckk, cout, plane, 1.0, weight, true, dyb, false, 0.0, &mut dcols);
                col2im(&dcols, cin, h, w, g, ho, wo, dxb);
            }
        }
    }
}

/// Per-axis interpolation table for bilinear resizing with half-pixel centers.
#[derive(Debug, Clone)]
pub struct AxisInterp {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisInterp {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for d in 0..dst {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (s.floor() as usize).min(src - 1);
            let h = (l + 1).min(src - 1);
            lo.push(l);
            hi.push(h);
            frac.push(if h == l { 0.0 } else { s - l as f64 });
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resize of `planes` independent (h, w) planes to (ho, wo).
pub fn resize_forward(x: &[f64], planes: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    if h == ho && w == wo {
        return x.to_vec();
    }
    let ay = AxisInterp::new(h, ho);
    let ax = AxisInterp::new(w, wo);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
            for ox in 0..wo {
                let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_backward(dy: &[f64], planes: usize, h: usize, w: usize, ho: usize, wo: usize, dx: &mut [f64]) {
    if h == ho && w == wo {
        dx.iter_mut().zip(dy).for_each(|(a, b)| *a += b);
        return;
    }
    let ay = AxisInterp::new(h, ho);
    let ax = AxisInterp::new(w, wo);
    for p in 0..planes {
        let g = &dy[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
            for ox in 0..wo {
                let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                let v = g[oy * wo + ox];
                d[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += v * (1.0 - fy) * fx;
                d[y1 * w + x0] += v * fy * (1.0 - fx);
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    }
}

/// Numerically stable in-place softmax of one vector.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// log-softmax of one vector into `out`.
pub fn log_softmax(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for (o, x) in out.iter_mut().zip(v) {
        *o = x - lse;
    }
}

/// Gathers the class vector of pixel `pix` from an NCHW buffer.
#[inline]
pub fn gather_pixel(x: &[f64], n: usize, c: usize, plane: usize, pix: usize, out: &mut [f64]) {
    let base = n * c * plane + pix;
    for (k, o) in out.iter_mut().enumerate() {
        *o = x[base + k * plane];
    }
}

#[inline]
pub fn scatter_pixel(x: &mut [f64], n: usize, c: usize, plane: usize, pix: usize, v: &[f64]) {
    let base = n * c * plane + pix;
    for (k, val) in v.iter().enumerate() {
        x[base + k * plane] = *val;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_naive(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], cout: usize, g: ConvGeom) -> Vec<f64> {
        let (ho, wo) = g.output_size(h, w);
        let k = g.kernel;
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x[(ci * h + iy as usize) * w + ix as usize]
                                        * wt[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (cin, h, w, cout) = (2, 7, 6, 3);
        let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 7 % 13) as f64) * 0.1 - 0.5).collect();
        for g in [ConvGeom::new(3, 1, 1, 1), ConvGeom::new(3, 2, 1, 1), ConvGeom::new(3, 1, 2, 2), ConvGeom::new(1, 1, 0, 1)] {
            let wt: Vec<f64> =
                (0..cout * cin * g.kernel * g.kernel).map(|i| ((i * 5 % 11) as f64) * 0.07 - 0.3).collect();
            let got = conv2d_forward(&x, 1, cin, h, w, &wt, None, cout, g);
            let want = conv_naive(&x, cin, h, w, &wt, cout, g);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{g:?}");
            }
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = vec![2.5; 16];
        let up = resize_forward(&x, 1, 4, 4, 9, 7);
        assert!(up.iter().all(|v| (v - 2.5).abs() < 1e-12));
        let same = resize_forward(&x, 1, 4, 4, 4, 4);
        assert_eq!(same, x);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let (h, w, ho, wo) = (3, 5, 7, 4);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64).sin()).collect();
        let g: Vec<f64> = (0..ho * wo).map(|i| (i as f64 * 0.3).cos()).collect();
        let y = resize_forward(&x, 1, h, w, ho, wo);
        let mut dx = vec![0.0; h * w];
        resize_backward(&g, 1, h, w, ho, wo, &mut dx);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
