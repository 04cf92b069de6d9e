//! Convolutions via im2col + GEMM. Transposed convolution is implemented as
//! the adjoint of the strided convolution, so both share the same two
//! gather/scatter kernels.

use crate::gemm::gemm;
use crate::graph::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dCfg {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub dilation: usize,
}

impl Conv1dCfg {
    /// Stride 1, symmetric "same" padding for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self::same_dilated(kernel, 1)
    }

    pub fn same_dilated(kernel: usize, dilation: usize) -> Self {
        let p = dilation * (kernel - 1) / 2;
        Self {
            stride: 1,
            pad_left: p,
            pad_right: p,
            dilation,
        }
    }

    pub fn strided(stride: usize, pad_left: usize, pad_right: usize) -> Self {
        Self {
            stride,
            pad_left,
            pad_right,
            dilation: 1,
        }
    }

    pub fn out_len(&self, len: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + self.pad_left + self.pad_right;
        assert!(padded >= span, "conv1d input of length {len} shorter than kernel span {span}");
        (padded - span) / self.stride + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dCfg {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self { stride, padding }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col1d(x: &[f64], c: usize, l: usize, k: usize, stride: usize, pad: usize, dil: usize, n_out: usize) -> Vec<f64> {
    let mut cols = vec![0.0; c * k * n_out];
    for ci in 0..c {
        let xr = &x[ci * l..(ci + 1) * l];
        for kk in 0..k {
            let row = &mut cols[(ci * k + kk) * n_out..(ci * k + kk + 1) * n_out];
            let ts = valid_range(n_out, l, kk * dil, stride, pad);
            if ts.is_empty() {
                continue;
            }
            let x0 = ts.start * stride + kk * dil - pad;
            if stride == 1 {
                row[ts.clone()].copy_from_slice(&xr[x0..x0 + ts.len()]);
            } else {
                for (v, s) in row[ts].iter_mut().zip(xr[x0..].iter().step_by(stride)) {
                    *v = *s;
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im1d(cols: &[f64], c: usize, l: usize, k: usize, stride: usize, pad: usize, dil: usize, n_out: usize, out: &mut [f64]) {
    for ci in 0..c {
        let orow = &mut out[ci * l..(ci + 1) * l];
        for kk in 0..k {
            let row = &cols[(ci * k + kk) * n_out..(ci * k + kk + 1) * n_out];
            let ts = valid_range(n_out, l, kk * dil, stride, pad);
            if ts.is_empty() {
                continue;
            }
            let x0 = ts.start * stride + kk * dil - pad;
            for (o, v) in orow[x0..].iter_mut().step_by(stride).zip(&row[ts]) {
                *o += v;
            }
        }
    }
}

struct Geo2d {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

/// Output columns `ox` whose input column `ox * stride + k - pad` lies in
/// `0..len`.
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if len + pad > k { (len + pad - k).div_ceil(stride) } else { 0 };
    lo.min(out_len)..hi.min(out_len).max(lo.min(out_len))
}

fn im2col2d(x: &[f64], g: &Geo2d) -> Vec<f64> {
    let n_out = g.oh * g.ow;
    let mut cols = vec![0.0; g.c * g.kh * g.kw * n_out];
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            let ys = valid_range(g.oh, g.h, i, g.sh, g.ph);
            for j in 0..g.kw {
                let xs = valid_range(g.ow, g.w, j, g.sw, g.pw);
                if xs.is_empty() {
                    continue;
                }
                let r = (ci * g.kh + i) * g.kw + j;
                let row = &mut cols[r * n_out..(r + 1) * n_out];
                for oy in ys.clone() {
                    let y = oy * g.sh + i - g.ph;
                    let src = &plane[y * g.w..(y + 1) * g.w];
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    let x0 = xs.start * g.sw + j - g.pw;
                    if g.sw == 1 {
                        dst[xs.clone()].copy_from_slice(&src[x0..x0 + xs.len()]);
                    } else {
                        for (d, s) in dst[xs.clone()].iter_mut().zip(src[x0..].iter().step_by(g.sw)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im2d(cols: &[f64], g: &Geo2d, out: &mut [f64]) {
    let n_out = g.oh * g.ow;
    for ci in 0..g.c {
        let plane = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            let ys = valid_range(g.oh, g.h, i, g.sh, g.ph);
            for j in 0..g.kw {
                let xs = valid_range(g.ow, g.w, j, g.sw, g.pw);
                if xs.is_empty() {
                    continue;
                }
                let r = (ci * g.kh + i) * g.kw + j;
                let row = &cols[r * n_out..(r + 1) * n_out];
                for oy in ys.clone() {
                    let y = oy * g.sh + i - g.ph;
                    let dst = &mut plane[y * g.w..(y + 1) * g.w];
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    let x0 = xs.start * g.sw + j - g.pw;
                    for (d, s) in dst[x0..].iter_mut().step_by(g.sw).zip(&src[xs.clone()]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn add_bias_rows(y: &mut [f64], bias: &[f64], inner: usize) {
    for (row, b) in y.chunks_mut(inner).zip(bias.iter().cycle()) {
        for v in row {
            *v += b;
        }
    }
}

fn bias_grad(g: &[f64], channels: usize, inner: usize) -> Tensor {
    let mut d = vec![0.0; channels];
    for (i, row) in g.chunks(inner).enumerate() {
        d[i % channels] += row.iter().sum::<f64>();
    }
    Tensor::new(vec![channels], d)
}

impl<'g> Var<'g> {
    /// `x: [B, Cin, L]`, `w: [Cout, Cin, K]`, `b: [Cout]` -> `[B, Cout, Lout]`.
    pub fn conv1d(self, w: Var<'g>, b: Option<Var<'g>>, cfg: Conv1dCfg) -> Var<'g> {
        let x = self.value();
        let wv = w.value();
        assert!(x.rank() == 3 && wv.rank() == 3 && wv.dim(1) == x.dim(1), "conv1d {:?} with weight {:?}", x.shape(), wv.shape());
        let (bsz, cin, l) = (x.dim(0), x.dim(1), x.dim(2));
        let (cout, k) = (wv.dim(0), wv.dim(2));
        let lo = cfg.out_len(l, k);
        let ck = cin * k;
        let mut y = vec![0.0; bsz * cout * lo];
        for bi in 0..bsz {
            let xb = &x.data()[bi * cin * l..(bi + 1) * cin * l];
            let cols = im2col1d(xb, cin, l, k, cfg.stride, cfg.pad_left, cfg.dilation, lo);
            gemm(cout, ck, lo, wv.data(), false, &cols, false, &mut y[bi * cout * lo..(bi + 1) * cout * lo], 0.0);
        }
        if let Some(b) = &b {
            add_bias_rows(&mut y, b.value().data(), lo);
        }
        let mut parents = vec![self, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.graph.op(Tensor::new(vec![bsz, cout, lo], y), &parents, move || {
            move |g: &Tensor, need: &[bool]| {
                let mut dx = need[0].then(|| vec![0.0; bsz * cin * l]);
                let mut dw = need[1].then(|| vec![0.0; cout * ck]);
                for bi in 0..bsz {
                    let gb = &g.data()[bi * cout * lo..(bi + 1) * cout * lo];
                    if let Some(dw) = dw.as_mut() {
                        let xb = &x.data()[bi * cin * l..(bi + 1) * cin * l];
                        let cols = im2col1d(xb, cin, l, k, cfg.stride, cfg.pad_left, cfg.dilation, lo);
                        gemm(cout, lo, ck, gb, false, &cols, true, dw, 1.0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut dcols = vec![0.0; ck * lo];
                        gemm(ck, cout, lo, wv.data(), true, gb, false, &mut dcols, 0.0);
                        col2im1d(&dcols, cin, l, k, cfg.stride, cfg.pad_left, cfg.dilation, lo, &mut dx[bi * cin * l..(bi + 1) * cin * l]);
                    }
                }
                let mut res = vec![
                    dx.map(|d| Tensor::new(vec![bsz, cin, l], d)),
                    dw.map(|d| Tensor::new(vec![cout, cin, k], d)),
                ];
                if has_bias {
                    res.push(need[2].then(|| bias_grad(g.data(), cout, lo)));
                }
                res
            }
        })
    }

    /// Transposed 1-D convolution, full output length `(L - 1) * stride + K`.
    /// `x: [B, Cin, L]`, `w: [Cin, Cout, K]`.
    pub fn conv_transpose1d(self, w: Var<'g>, b: Option<Var<'g>>, stride: usize) -> Var<'g> {
        let x = self.value();
        let wv = w.value();
        assert!(x.rank() == 3 && wv.rank() == 3 && wv.dim(0) == x.dim(1), "conv_transpose1d {:?} with weight {:?}", x.shape(), wv.shape());
        let (bsz, cin, l) = (x.dim(0), x.dim(1), x.dim(2));
        let (cout, k) = (wv.dim(1), wv.dim(2));
        let lo = (l - 1) * stride + k;
        let ck = cout * k;
        let mut y = vec![0.0; bsz * cout * lo];
        for bi in 0..bsz {
            let xb = &x.data()[bi * cin * l..(bi + 1) * cin * l];
            let mut cols = vec![0.0; ck * l];
            gemm(ck, cin, l, wv.data(), true, xb, false, &mut cols, 0.0);
            col2im1d(&cols, cout, lo, k, stride, 0, 1, l, &mut y[bi * cout * lo..(bi + 1) * cout * lo]);
        }
        if let Some(b) = &b {
            add_bias_rows(&mut y, b.value().data(), lo);
        }
        let mut parents = vec![self, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.graph.op(Tensor::new(vec![bsz, cout, lo], y), &parents, move || {
            move |g: &Tensor, need: &[bool]| {
                let mut dx = need[0].then(|| vec![0.0; bsz * cin * l]);
                let mut dw = need[1].then(|| vec![0.0; cin * ck]);
                for bi in 0..bsz {
                    let gb = &g.data()[bi * cout * lo..(bi + 1) * cout * lo];
                    let gcols = im2col1d(gb, cout, lo, k, stride, 0, 1, l);
                    if let Some(dx) = dx.as_mut() {
                        gemm(cin, ck, l, wv.data(), false, &gcols, false, &mut dx[bi * cin * l..(bi + 1) * cin * l], 0.0);
                    }
                    if let Some(dw) = dw.as_mut() {
                        let xb = &x.data()[bi * cin * l..(bi + 1) * cin * l];
                        gemm(cin, l, ck, xb, false, &gcols, true, dw, 1.0);
                    }
                }
                let mut res = vec![
                    dx.map(|d| Tensor::new(vec![bsz, cin, l], d)),
                    dw.map(|d| Tensor::new(vec![cin, cout, k], d)),
                ];
                if has_bias {
                    res.push(need[2].then(|| bias_grad(g.data(), cout, lo)));
                }
                res
            }
        })
    }

    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, KH, KW]` -> `[B, Cout, OH, OW]`.
    pub fn conv2d(self, w: Var<'g>, b: Option<Var<'g>>, cfg: Conv2dCfg) -> Var<'g> {
        let x = self.value();
        let wv = w.value();
        assert!(x.rank() == 4 && wv.rank() == 4 && wv.dim(1) == x.dim(1), "conv2d {:?} with weight {:?}", x.shape(), wv.shape());
        let (bsz, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, kh, kw) = (wv.dim(0), wv.dim(2), wv.dim(3));
        let (sh, sw) = cfg.stride;
        let (ph, pw) = cfg.padding;
        assert!(h + 2 * ph >= kh && wd + 2 * pw >= kw, "conv2d input {:?} smaller than kernel", x.shape());
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (wd + 2 * pw - kw) / sw + 1;
        let geo = Geo2d { c: cin, h, w: wd, kh, kw, sh, sw, ph, pw, oh, ow };
        let ck = cin * kh * kw;
        let n = oh * ow;
        let mut y = vec![0.0; bsz * cout * n];
        for bi in 0..bsz {
            let xb = &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let cols = im2col2d(xb, &geo);
            gemm(cout, ck, n, wv.data(), false, &cols, false, &mut y[bi * cout * n..(bi + 1) * cout * n], 0.0);
        }
        if let Some(b) = &b {
            add_bias_rows(&mut y, b.value().data(), n);
        }
        let mut parents = vec![self, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.graph.op(Tensor::new(vec![bsz, cout, oh, ow], y), &parents, move || {
            move |g: &Tensor, need: &[bool]| {
                let plane = cin * h * wd;
                let mut dx = need[0].then(|| vec![0.0; bsz * plane]);
                let mut dw = need[1].then(|| vec![0.0; cout * ck]);
                for bi in 0..bsz {
                    let gb = &g.data()[bi * cout * n..(bi + 1) * cout * n];
                    if let Some(dw) = dw.as_mut() {
                        let cols = im2col2d(&x.data()[bi * plane..(bi + 1) * plane], &geo);
                        gemm(cout, n, ck, gb, false, &cols, true, dw, 1.0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut dcols = vec![0.0; ck * n];
                        gemm(ck, cout, n, wv.data(), true, gb, false, &mut dcols, 0.0);
                        col2im2d(&dcols, &geo, &mut dx[bi * plane..(bi + 1) * plane]);
                    }
                }
                let mut res = vec![
                    dx.map(|d| Tensor::new(vec![bsz, cin, h, wd], d)),
                    dw.map(|d| Tensor::new(vec![cout, cin, kh, kw], d)),
                ];
                if has_bias {
                    res.push(need[2].then(|| bias_grad(g.data(), cout, n)));
                }
                res
            }
        })
    }

    /// Average pooling on the last axis of `[.., L]`; padded positions count as zeros.
    pub fn avg_pool1d(self, kernel: usize, stride: usize, pad: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let l = *shape.last().expect("avg_pool1d on scalar");
        assert!(l + 2 * pad >= kernel, "avg_pool1d input too short");
        let lo = (l + 2 * pad - kernel) / stride + 1;
        let inv = 1.0 / kernel as f64;
        let mut y = Vec::with_capacity(x.numel() / l * lo);
        for row in x.data().chunks(l) {
            for t in 0..lo {
                let mut s = 0.0;
                for j in 0..kernel {
                    let idx = (t * stride + j) as isize - pad as isize;
                    if idx >= 0 && (idx as usize) < l {
                        s += row[idx as usize];
                    }
                }
                y.push(s * inv);
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = lo;
        self.graph.op(Tensor::new(out_shape, y), &[self], move || {
            move |g: &Tensor, _: &[bool]| {
                let mut dx = vec![0.0; g.numel() / lo * l];
                for (grow, drow) in g.data().chunks(lo).zip(dx.chunks_mut(l)) {
                    for (t, gv) in grow.iter().enumerate() {
                        for j in 0..kernel {
                            let idx = (t * stride + j) as isize - pad as isize;
                            if idx >= 0 && (idx as usize) < l {
                                drow[idx as usize] += gv * inv;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(shape.clone(), dx))]
            }
        })
    }
}
