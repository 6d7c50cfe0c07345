//! Flat-slice numeric kernels shared by the eager tensor functions and the tape.
//!
//! Every kernel uses a fixed loop and reduction order, so results are
//! bit-reproducible for identical inputs.

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(row, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `aᵀ · b` for `a[m×k]`, `b[m×n]`, accumulated into `out[k×n]`.
pub(crate) fn matmul_at_b_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(&mut out[p * n..(p + 1) * n], a[i * k + p], brow);
        }
    }
}

/// `a · bᵀ` for `a[m×n]`, `b[k×n]`, accumulated into `out[m×k]`.
pub(crate) fn matmul_a_bt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// Affine map over the last axis: `x[rows×cin] · w[cin×cout] + b`.
pub(crate) fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, rows: usize, cin: usize, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cout];
    for r in 0..rows {
        let orow = &mut out[r * cout..(r + 1) * cout];
        if let Some(b) = b {
            orow.copy_from_slice(b);
        }
        let xrow = &x[r * cin..(r + 1) * cin];
        for (i, &xv) in xrow.iter().enumerate() {
            axpy(orow, xv, &w[i * cout..(i + 1) * cout]);
        }
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Normalized values and reciprocal standard deviations for each row of `x[rows×cols]`.
pub(crate) fn normalize_rows(x: &[f64], rows: usize, cols: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; rows * cols];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

/// Per-channel mean and biased variance over all rows of `x[rows×channels]`.
pub(crate) fn channel_moments(x: &[f64], rows: usize, channels: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; channels];
    for r in 0..rows {
        for (m, v) in mean.iter_mut().zip(&x[r * channels..(r + 1) * channels]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; channels];
    for r in 0..rows {
        for ((s, v), m) in var.iter_mut().zip(&x[r * channels..(r + 1) * channels]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut var {
        *s /= rows as f64;
    }
    (mean, var)
}

/// Geometry of a frame-wise 2D convolution over `[frames, h, w, cin]` data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    #[inline]
    fn source(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

pub(crate) fn conv2d(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.frames * g.oh * g.ow * g.cout];
    for f in 0..g.frames {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o = ((f * g.oh + oy) * g.ow + ox) * g.cout;
                let orow = &mut out[o..o + g.cout];
                orow.copy_from_slice(b);
                for ky in 0..g.k {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.source(ox, kx, g.w) else { continue };
                        let xi = ((f * g.h + iy) * g.w + ix) * g.cin;
                        let wi = (ky * g.k + kx) * g.cin;
                        for ci in 0..g.cin {
                            let wrow = &w[(wi + ci) * g.cout..(wi + ci + 1) * g.cout];
                            axpy(orow, x[xi + ci], wrow);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of [`conv2d`].
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    for f in 0..g.frames {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o = ((f * g.oh + oy) * g.ow + ox) * g.cout;
                let drow = &dy[o..o + g.cout];
                if let Some(db) = db.as_deref_mut() {
                    axpy(db, 1.0, drow);
                }
                for ky in 0..g.k {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.source(ox, kx, g.w) else { continue };
                        let xi = ((f * g.h + iy) * g.w + ix) * g.cin;
                        let wi = (ky * g.k + kx) * g.cin;
                        for ci in 0..g.cin {
                            let wr = (wi + ci) * g.cout..(wi + ci + 1) * g.cout;
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xi + ci] += dot(drow, &w[wr.clone()]);
                            }
                            if let Some(dw) = dw.as_deref_mut() {
                                axpy(&mut dw[wr], x[xi + ci], drow);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Layout of a grouped token-mixing product: data viewed as
/// `[outer, tokens, inner, channels]`, mixing along `tokens`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct MixGeom {
    pub outer: usize,
    pub tokens: usize,
    pub inner: usize,
    pub channels: usize,
    pub groups: usize,
}

impl MixGeom {
    fn slab(&self) -> usize {
        self.inner * self.channels
    }
}

/// `y[o,i,s,c] = Σ_j r[grp(c), i, j] · x[o,j,s,c]` with contiguous channel groups.
pub(crate) fn grouped_mix(x: &[f64], r: &[f64], g: &MixGeom) -> Vec<f64> {
    let n = g.tokens;
    let slab = g.slab();
    let cg = g.channels / g.groups;
    let mut y = vec![0.0; x.len()];
    for o in 0..g.outer {
        for i in 0..n {
            let ybase = (o * n + i) * slab;
            for j in 0..n {
                let xbase = (o * n + j) * slab;
                if g.groups == 1 {
                    let rv = r[i * n + j];
                    axpy(&mut y[ybase..ybase + slab], rv, &x[xbase..xbase + slab]);
                    continue;
                }
                for s in 0..g.inner {
                    for gi in 0..g.groups {
                        let rv = r[(gi * n + i) * n + j];
                        let off = s * g.channels + gi * cg;
                        axpy(
                            &mut y[ybase + off..ybase + off + cg],
                            rv,
                            &x[xbase + off..xbase + off + cg],
                        );
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn grouped_mix_backward(
    x: &[f64],
    r: &[f64],
    dy: &[f64],
    g: &MixGeom,
    mut dx: Option<&mut [f64]>,
    mut dr: Option<&mut [f64]>,
) {
    let n = g.tokens;
    let slab = g.slab();
    let cg = g.channels / g.groups;
    for o in 0..g.outer {
        for i in 0..n {
            let ybase = (o * n + i) * slab;
            for j in 0..n {
                let xbase = (o * n + j) * slab;
                for s in 0..g.inner {
                    for gi in 0..g.groups {
                        let ri = (gi * n + i) * n + j;
                        let off = s * g.channels + gi * cg;
                        let dys = &dy[ybase + off..ybase + off + cg];
                        if let Some(dx) = dx.as_deref_mut() {
                            axpy(&mut dx[xbase + off..xbase + off + cg], r[ri], dys);
                        }
                        if let Some(dr) = dr.as_deref_mut() {
                            dr[ri] += dot(dys, &x[xbase + off..xbase + off + cg]);
                        }
                    }
                }
            }
        }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Copies `data` (shape `shape`) into the axis order `axes`.
pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let rank = axes.len();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    // The last axis is copied in a tight loop; the rest is an odometer.
    let last_len = out_shape[rank - 1];
    let last_step = step[rank - 1];
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut base = 0usize;
    loop {
        if last_step == 1 {
            out.extend_from_slice(&data[base..base + last_len]);
        } else {
            out.extend((0..last_len).map(|t| data[base + t * last_step]));
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}
