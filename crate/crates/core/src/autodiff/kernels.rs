//! Raw forward/backward kernels over flat `f32` buffers.
//!
//! Layout is NCHW everywhere. Matrix products go through `matrixmultiply`.

/// `c = a · b + beta · c` where `a` is `m×k`, `b` is `k×n`, both row-major
/// unless the matching `*_t` flag says the buffer holds the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], beta: f32) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe dense row-major buffers.
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(Self { c, h, w, kh, kw, stride, pad, oh, ow })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// True when im2col is the identity (1×1, stride 1, no padding).
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let ncol = g.col_cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let ncol = g.col_cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns output buffer and the stacked im2col matrices (empty when pointwise).
pub(crate) fn conv2d_forward(x: &[f32], n: usize, g: &ConvGeom, w: &[f32], out_c: usize, bias: Option<&[f32]>) -> (Vec<f32>, Vec<f32>) {
    let in_sz = g.c * g.h * g.w;
    let out_sz = out_c * g.col_cols();
    let col_sz = g.col_rows() * g.col_cols();
    let mut out = vec![0.0f32; n * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; n * col_sz] };
    for b in 0..n {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        if let Some(bias) = bias {
            for (o, chunk) in ob.chunks_mut(g.col_cols()).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[o]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(out_c, g.c, g.col_cols(), w, false, xb, false, ob, beta);
        } else {
            let cb = &mut cols[b * col_sz..(b + 1) * col_sz];
            im2col(xb, g, cb);
            gemm(out_c, g.col_rows(), g.col_cols(), w, false, cb, false, ob, beta);
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f32],
    cols: &[f32],
    n: usize,
    g: &ConvGeom,
    w: &[f32],
    out_c: usize,
    dy: &[f32],
    need: (bool, bool, bool),
) -> ConvGrads {
    let in_sz = g.c * g.h * g.w;
    let out_sz = out_c * g.col_cols();
    let col_sz = g.col_rows() * g.col_cols();
    let mut dx = need.0.then(|| vec![0.0f32; n * in_sz]);
    let mut dw = need.1.then(|| vec![0.0f32; out_c * g.col_rows()]);
    let mut db = need.2.then(|| vec![0.0f32; out_c]);
    let mut dcols = if need.0 && !g.is_pointwise() { vec![0.0f32; col_sz] } else { Vec::new() };
    for b in 0..n {
        let dyb = &dy[b * out_sz..(b + 1) * out_sz];
        let colb: &[f32] = if g.is_pointwise() { &x[b * in_sz..(b + 1) * in_sz] } else { &cols[b * col_sz..(b + 1) * col_sz] };
        if let Some(dw) = dw.as_mut() {
            gemm(out_c, g.col_cols(), g.col_rows(), dyb, false, colb, true, dw, 1.0);
        }
        if let Some(db) = db.as_mut() {
            for (o, chunk) in dyb.chunks(g.col_cols()).enumerate() {
                db[o] += chunk.iter().sum::<f32>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                gemm(g.c, out_c, g.col_cols(), w, true, dyb, false, dxb, 1.0);
            } else {
                gemm(g.col_rows(), out_c, g.col_cols(), w, true, dyb, false, &mut dcols, 0.0);
                col2im_add(&dcols, g, dxb);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Group normalisation over `[n, c, spatial]`; returns `(y, xhat, rstd)`.
pub(crate) fn group_norm_forward(
    x: &[f32],
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    eps: f32,
    gamma: &[f32],
    beta: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let cpg = c / groups;
    let m = cpg * spatial;
    let mut y = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    let mut rstd = vec![0.0f32; n * groups];
    for b in 0..n {
        for gi in 0..groups {
            let start = (b * c + gi * cpg) * spatial;
            let seg = &x[start..start + m];
            let mean = seg.iter().sum::<f32>() / m as f32;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / m as f32;
            let r = 1.0 / (var + eps).sqrt();
            rstd[b * groups + gi] = r;
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let off = start + ci * spatial;
                for s in 0..spatial {
                    let xh = (x[off + s] - mean) * r;
                    xhat[off + s] = xh;
                    y[off + s] = gamma[ch] * xh + beta[ch];
                }
            }
        }
    }
    (y, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    dy: &[f32],
    xhat: &[f32],
    rstd: &[f32],
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    gamma: &[f32],
    need: (bool, bool, bool),
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let cpg = c / groups;
    let m = (cpg * spatial) as f32;
    let mut dx = need.0.then(|| vec![0.0f32; dy.len()]);
    let mut dgamma = need.1.then(|| vec![0.0f32; c]);
    let mut dbeta = need.2.then(|| vec![0.0f32; c]);
    for b in 0..n {
        for gi in 0..groups {
            let start = (b * c + gi * cpg) * spatial;
            let mut sum_d = 0.0f32;
            let mut sum_dx = 0.0f32;
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let off = start + ci * spatial;
                let mut dg = 0.0f32;
                let mut dbt = 0.0f32;
                for s in 0..spatial {
                    let d = dy[off + s];
                    dg += d * xhat[off + s];
                    dbt += d;
                    let dxh = d * gamma[ch];
                    sum_d += dxh;
                    sum_dx += dxh * xhat[off + s];
                }
                if let Some(v) = dgamma.as_mut() {
                    v[ch] += dg;
                }
                if let Some(v) = dbeta.as_mut() {
                    v[ch] += dbt;
                }
            }
            if let Some(dx) = dx.as_mut() {
                let r = rstd[b * groups + gi];
                for ci in 0..cpg {
                    let ch = gi * cpg + ci;
                    let off = start + ci * spatial;
                    for s in 0..spatial {
                        let dxh = dy[off + s] * gamma[ch];
                        dx[off + s] = r / m * (m * dxh - sum_d - xhat[off + s] * sum_dx);
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Max pooling over `[planes, h, w]`. Padded cells never win.
pub(crate) fn max_pool_forward(
    x: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<f32>, Vec<u32>) {
    let mut out = vec![0.0f32; planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0usize;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = best;
                arg[o] = (p * h * w + best_i) as u32;
            }
        }
    }
    (out, arg)
}

/// One bilinear tap set: four flat offsets into a `h×w` plane with weights.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Taps {
    pub idx: [usize; 4],
    pub wt: [f32; 4],
}

/// Bilinear taps for sample point `(y, x)` in feature-pixel coordinates
/// (pixel centres at integers). Points more than one pixel outside give no taps.
pub(crate) fn bilinear_taps(y: f32, x: f32, h: usize, w: usize) -> Option<Taps> {
    if y < -1.0 || y > h as f32 || x < -1.0 || x > w as f32 {
        return None;
    }
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = y - y0 as f32;
    let lx = x - x0 as f32;
    let hy = 1.0 - ly;
    let hx = 1.0 - lx;
    Some(Taps { idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], wt: [hy * hx, hy * lx, ly * hx, ly * lx] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::new(2, 5, 4, 3, 3, 2, 1).unwrap();
        let x: Vec<f32> = (0..40).map(|i| (i as f32 * 0.37).sin()).collect();
        let c: Vec<f32> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f32 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im_add(&c, &g, &mut dx);
        let rhs: f32 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn taps_sum_to_one_inside() {
        let t = bilinear_taps(1.25, 2.5, 4, 4).unwrap();
        assert!((t.wt.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(bilinear_taps(-1.5, 0.0, 4, 4).is_none());
    }
}
