//! Slice-level numeric kernels. Shapes are validated by the caller (the tape).

/// Output length and leading pad for "same" padding with kernel `k` and stride `s`.
pub(crate) fn same_padding(len: usize, k: usize, s: usize) -> (usize, usize) {
    let out = len.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(len);
    (out, total / 2)
}

/// Range of output positions `o` for which `o * s + off - pad` lies in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, s: usize, off: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > off { (pad - off).div_ceil(s) } else { 0 };
    let hi = if in_len + pad > off { ((in_len - 1 + pad - off) / s + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

/// `c += a (m x k) * b (k x n)`
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c += a^T * b` with `a` stored as (k x m) and `b` as (k x n).
pub(crate) fn gemm_at_b(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

/// `c += a * b^T` with `a` stored as (m x k) and `b` as (n x k).
pub(crate) fn gemm_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_t: usize,
    pub pad_l: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], co: usize, kh: usize, kw: usize, stride: usize) -> Self {
        let (ho, pad_t) = same_padding(x[2], kh, stride);
        let (wo, pad_l) = same_padding(x[3], kw, stride);
        Self { n: x[0], ci: x[1], h: x[2], w: x[3], co, kh, kw, stride, ho, wo, pad_t, pad_l }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    fn patch(&self) -> usize {
        self.ci * self.kh * self.kw
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.ho * g.wo;
    cols.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g.ho, g.h, g.stride, ky, g.pad_t);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(g.wo, g.w, g.stride, kx, g.pad_l);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad_t;
                    for ox in ox_lo..ox_hi {
                        let ix = ox * g.stride + kx - g.pad_l;
                        dst[oy * g.wo + ox] = plane[iy * g.w + ix];
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.ho * g.wo;
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g.ho, g.h, g.stride, ky, g.pad_t);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(g.wo, g.w, g.stride, kx, g.pad_l);
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad_t;
                    for ox in ox_lo..ox_hi {
                        let ix = ox * g.stride + kx - g.pad_l;
                        plane[iy * g.w + ix] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.ho * g.wo;
    let in_sz = g.ci * g.h * g.w;
    let k = g.patch();
    let mut out = vec![0.0; g.n * g.co * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for n in 0..g.n {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let on = &mut out[n * g.co * p..(n + 1) * g.co * p];
        if g.is_pointwise() {
            gemm(w, xn, on, g.co, k, p);
        } else {
            im2col(xn, g, &mut cols);
            gemm(w, &cols, on, g.co, k, p);
        }
    }
    out
}

/// Returns `(dx, dw)`; either may be skipped.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let p = g.ho * g.wo;
    let in_sz = g.ci * g.h * g.w;
    let k = g.patch();
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let mut dcols = if g.is_pointwise() || !want_dx { Vec::new() } else { vec![0.0; k * p] };
    for n in 0..g.n {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let dyn_ = &dy[n * g.co * p..(n + 1) * g.co * p];
        if g.is_pointwise() {
            if let Some(dw) = dw.as_mut() {
                gemm_a_bt(dyn_, xn, dw, g.co, p, k);
            }
            if let Some(dx) = dx.as_mut() {
                gemm_at_b(w, dyn_, &mut dx[n * in_sz..(n + 1) * in_sz], k, g.co, p);
            }
        } else {
            if let Some(dw) = dw.as_mut() {
                im2col(xn, g, &mut cols);
                gemm_a_bt(dyn_, &cols, dw, g.co, p, k);
            }
            if let Some(dx) = dx.as_mut() {
                dcols.iter_mut().for_each(|v| *v = 0.0);
                gemm_at_b(w, dyn_, &mut dcols, k, g.co, p);
                col2im(&dcols, g, &mut dx[n * in_sz..(n + 1) * in_sz]);
            }
        }
    }
    (dx, dw)
}

/// Depthwise convolution; `w` has shape (C, 1, k, k) and `g.co == g.ci`.
pub(crate) fn depthwise_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (hw, ohw, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    let mut out = vec![0.0; g.n * g.ci * ohw];
    for n in 0..g.n {
        for c in 0..g.ci {
            let plane = &x[(n * g.ci + c) * hw..(n * g.ci + c + 1) * hw];
            let dst = &mut out[(n * g.ci + c) * ohw..(n * g.ci + c + 1) * ohw];
            let wc = &w[c * kk..(c + 1) * kk];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(g.ho, g.h, g.stride, ky, g.pad_t);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = valid_range(g.wo, g.w, g.stride, kx, g.pad_l);
                    let wv = wc[ky * g.kw + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad_t;
                        let src = &plane[iy * g.w..(iy + 1) * g.w];
                        let row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let base = kx + ox_lo - g.pad_l;
                            for (o, &s) in row[ox_lo..ox_hi].iter_mut().zip(&src[base..base + (ox_hi - ox_lo)]) {
                                *o += wv * s;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                row[ox] += wv * src[ox * g.stride + kx - g.pad_l];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (hw, ohw, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    for n in 0..g.n {
        for c in 0..g.ci {
            let xo = (n * g.ci + c) * hw;
            let yo = (n * g.ci + c) * ohw;
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(g.ho, g.h, g.stride, ky, g.pad_t);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = valid_range(g.wo, g.w, g.stride, kx, g.pad_l);
                    let wi = c * kk + ky * g.kw + kx;
                    let wv = w[wi];
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad_t;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * g.stride + kx - g.pad_l;
                            let d = dy[yo + oy * g.wo + ox];
                            acc += d * x[xo + iy * g.w + ix];
                            if let Some(dx) = dx.as_mut() {
                                dx[xo + iy * g.w + ix] += wv * d;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Max pooling; returns the output and, per output element, the flat index of the
/// selected input element.
pub(crate) fn max_pool_forward(x: &[f64], shape: &[usize], k: usize, s: usize) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, pt) = same_padding(h, k, s);
    let (wo, pl) = same_padding(w, k, s);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for oy in 0..ho {
            let y0 = (oy * s).saturating_sub(pt);
            let y1 = (oy * s + k - pt).min(h);
            for ox in 0..wo {
                let x0 = (ox * s).saturating_sub(pl);
                let x1 = (ox * s + k - pl).min(w);
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + y0 * w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let i = base + iy * w + ix;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(x[best_i]);
                arg.push(best_i);
            }
        }
    }
    (out, arg, ho, wo)
}

/// Average pooling over the in-bounds part of each window.
pub(crate) fn avg_pool_forward(x: &[f64], shape: &[usize], k: usize, s: usize) -> (Vec<f64>, usize, usize) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, pt) = same_padding(h, k, s);
    let (wo, pl) = same_padding(w, k, s);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for oy in 0..ho {
            let y0 = (oy * s).saturating_sub(pt);
            let y1 = (oy * s + k - pt).min(h);
            for ox in 0..wo {
                let x0 = (ox * s).saturating_sub(pl);
                let x1 = (ox * s + k - pl).min(w);
                let mut acc = 0.0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += x[base + iy * w + ix];
                    }
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    (out, ho, wo)
}

pub(crate) fn avg_pool_backward(dy: &[f64], shape: &[usize], k: usize, s: usize) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, pt) = same_padding(h, k, s);
    let (wo, pl) = same_padding(w, k, s);
    let mut dx = vec![0.0; n * c * h * w];
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for oy in 0..ho {
            let y0 = (oy * s).saturating_sub(pt);
            let y1 = (oy * s + k - pt).min(h);
            for ox in 0..wo {
                let x0 = (ox * s).saturating_sub(pl);
                let x1 = (ox * s + k - pl).min(w);
                let g = dy[(plane_idx * ho + oy) * wo + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        dx[base + iy * w + ix] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel sums over (N, spatial) for an (N, C, spatial) buffer.
pub(crate) fn channel_reduce(x: &[f64], n: usize, c: usize, sp: usize, mut f: impl FnMut(usize, &[f64])) {
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * sp;
            f(ci, &x[off..off + sp]);
        }
    }
}
