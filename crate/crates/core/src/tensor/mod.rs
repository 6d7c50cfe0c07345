//! Dense `f64` tensors, eager kernels and a define-by-run gradient tape.

pub mod gradcheck;
pub mod init;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::finite_diff_check;
pub use tape::{BatchNormStats, Tape, Var};

use crate::error::{Error, Result};
use kernels::ConvGeom;
use serde::{Deserialize, Serialize};

/// Dense row-major array of `f64` with strictly positive extents.
///
/// Gradient bookkeeping (`requires_grad`, accumulated gradients) lives on the
/// [`Tape`] node that wraps a tensor, not on the value itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        check_axes(axes, self.rank())?;
        let shape = axes.iter().map(|&a| self.shape[a]).collect::<Vec<_>>();
        Ok(Tensor {
            data: kernels::permute(&self.data, &self.shape, axes),
            shape,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Channel range `[start, start+len)` of the last axis.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let c = self.channels();
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_channels", format!("[{start}, {}) of {c}", start + len)));
        }
        let rows = self.len() / c;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * c + start..r * c + start + len]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        Tensor::new(shape, data)
    }

    /// Concatenation along the last axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Invalid("empty concat".into()))?;
        let lead = &first.shape[..first.rank() - 1];
        for p in parts {
            if &p.shape[..p.rank() - 1] != lead {
                return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", p.shape, first.shape)));
            }
        }
        let rows = first.len() / first.channels();
        let total: usize = parts.iter().map(|p| p.channels()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let c = p.channels();
                data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor::new(shape, data)
    }
}

pub(crate) fn check_axes(axes: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return Err(Error::shape("permute", format!("{} axes for rank {rank}", axes.len())));
    }
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(Error::shape("permute", format!("invalid axis order {axes:?}")));
        }
        seen[a] = true;
    }
    Ok(())
}

pub(crate) fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let out = kernels::matmul(a.data(), b.data(), m, k, n);
    ensure_finite("matmul", &out)?;
    Tensor::new([m, n], out)
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(Error::shape("matmul", format!("{a:?} x {b:?}"))),
    }
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("hadamard", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    ensure_finite("hadamard", &data)?;
    Tensor::new(a.shape().to_vec(), data)
}

/// Layer normalization over the last axis with affine `gain`/`bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.channels();
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(Error::shape("layer_norm", format!("affine {:?}/{:?} for {c} channels", gain.shape(), bias.shape())));
    }
    let rows = x.len() / c;
    let (mut xhat, _) = kernels::normalize_rows(x.data(), rows, c, eps);
    for r in 0..rows {
        for ((v, g), b) in xhat[r * c..(r + 1) * c].iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    ensure_finite("layer_norm", &xhat)?;
    Tensor::new(x.shape().to_vec(), xhat)
}

/// Exact (erf-based) GELU, `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| kernels::gelu(v)).collect(),
    }
}

/// `x[..., cin] · w[cin, cout] + b[cout]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (cin, cout) = linear_dims(x.shape(), w.shape(), Some(b.shape()))?;
    let rows = x.len() / cin;
    let out = kernels::linear(x.data(), w.data(), Some(b.data()), rows, cin, cout);
    ensure_finite("linear", &out)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::new(shape, out)
}

pub(crate) fn linear_dims(x: &[usize], w: &[usize], b: Option<&[usize]>) -> Result<(usize, usize)> {
    let cin = *x.last().unwrap();
    match w {
        [wi, wo] if *wi == cin && b.is_none_or(|b| b == [*wo]) => Ok((cin, *wo)),
        _ => Err(Error::shape("linear", format!("x {x:?}, w {w:?}, b {b:?}"))),
    }
}

/// Zero padding used by the frame-wise convolution.
///
/// Overlapping kernels (`k > stride`) pad `(k-1)/2` on each side so stride 2
/// halves an even extent (224 → 112); patchify kernels (`k <= stride`) use none.
pub fn conv_padding(kernel: usize, stride: usize) -> usize {
    if kernel > stride {
        (kernel - 1) / 2
    } else {
        0
    }
}

pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize) -> usize {
    (extent + 2 * conv_padding(kernel, stride) - kernel) / stride + 1
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], stride: usize) -> Result<ConvGeom> {
    let rank = x.len();
    if rank < 3 {
        return Err(Error::shape("conv2d", format!("input {x:?} needs [..., H, W, C]")));
    }
    let (h, wd, cin) = (x[rank - 3], x[rank - 2], x[rank - 1]);
    let (k, cout) = match w {
        [k1, k2, ci, co] if k1 == k2 && *ci == cin => (*k1, *co),
        _ => return Err(Error::shape("conv2d", format!("weight {w:?} for input {x:?}"))),
    };
    if stride == 0 || k == 0 {
        return Err(Error::Invalid(format!("conv kernel {k} stride {stride}")));
    }
    let pad = conv_padding(k, stride);
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::shape("conv2d", format!("{h}x{wd} frame smaller than kernel {k}")));
    }
    let frames = x[..rank - 3].iter().product();
    Ok(ConvGeom {
        frames,
        h,
        w: wd,
        cin,
        cout,
        k,
        stride,
        pad,
        oh: conv_output_extent(h, k, stride),
        ow: conv_output_extent(wd, k, stride),
    })
}

/// 2D convolution applied to each frame of `x[..., H, W, Cin]` independently,
/// with weights `w[k, k, Cin, Cout]`.
pub fn conv2d_framewise(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let g = conv_geom(x.shape(), w.shape(), stride)?;
    if b.shape() != [g.cout] {
        return Err(Error::shape("conv2d", format!("bias {:?}", b.shape())));
    }
    let out = kernels::conv2d(x.data(), w.data(), b.data(), &g);
    ensure_finite("conv2d", &out)?;
    let rank = x.rank();
    let mut shape = x.shape()[..rank - 3].to_vec();
    shape.extend([g.oh, g.ow, g.cout]);
    Tensor::new(shape, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running per-channel statistics of a batch norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub updates: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            updates: 0,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    /// Blends in batch moments; `var` is the biased batch variance over `count` rows.
    pub(crate) fn update(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let m = self.momentum;
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - m) * self.mean[c] + m * mean[c];
            self.var[c] = (1.0 - m) * self.var[c] + m * var[c] * unbias;
        }
        self.updates += 1;
    }
}

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Batch normalization over all non-channel axes of `x[..., C]`.
pub fn batch_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<Tensor> {
    let c = x.channels();
    if gain.shape() != [c] || bias.shape() != [c] || stats.mean.len() != c {
        return Err(Error::shape("batch_norm", format!("{c} channels")));
    }
    let rows = x.len() / c;
    let (mean, var) = match mode {
        Mode::Train => {
            let (m, v) = kernels::channel_moments(x.data(), rows, c);
            stats.update(&m, &v, rows);
            (m, v)
        }
        Mode::Eval => {
            if !stats.is_initialized() {
                return Err(Error::UninitializedStats);
            }
            (stats.mean.clone(), stats.var.clone())
        }
    };
    let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
    let mut out = x.data().to_vec();
    for r in 0..rows {
        for ch in 0..c {
            let v = &mut out[r * c + ch];
            *v = (*v - mean[ch]) * rstd[ch] * gain.data()[ch] + bias.data()[ch];
        }
    }
    ensure_finite("batch_norm", &out)?;
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new([2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new([0, 2], vec![]).is_err());
        let a = Tensor::zeros([2, 3]);
        assert!(matmul(&a, &a).is_err());
        assert!(hadamard(&a, &Tensor::zeros([3, 2])).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);
        let p = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let q = Tensor::new([2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(matmul(&p, &q).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(3, 4, 2), (16, 16, 16), (5, 1, 7), (1, 9, 1)] {
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            let c = matmul(&a, &b).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a.at(&[i, p]) * b.at(&[p, j]);
                    }
                    assert!((c.at(&[i, j]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn hadamard_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 4], &mut rng);
        assert_eq!(hadamard(&x, &Tensor::ones([3, 4])).unwrap(), x);
        assert_eq!(hadamard(&x, &Tensor::zeros([3, 4])).unwrap().data(), &[0.0; 12]);
        let a = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::new([3], vec![4.0, 5.0, 6.0]).unwrap();
        assert_eq!(hadamard(&a, &b).unwrap().data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn layer_norm_cases() {
        let (g, b) = (Tensor::ones([3]), Tensor::zeros([3]));
        let c = Tensor::full([2, 3], 5.0);
        assert!(layer_norm(&c, &g, &b, 1e-5).unwrap().data().iter().all(|&v| v == 0.0));
        let x = Tensor::new([2], vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &Tensor::ones([2]), &Tensor::zeros([2]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[6, 9], &mut rng);
        let y = layer_norm(&x, &Tensor::ones([9]), &Tensor::zeros([9]), 1e-12).unwrap();
        for r in 0..6 {
            let row = &y.data()[r * 9..(r + 1) * 9];
            let mean = row.iter().sum::<f64>() / 9.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_values() {
        let x = Tensor::new([4], vec![0.0, 1.0, 6.0, 9.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        // Φ(1) = 0.5·(1 + erf(1/√2)) = 0.8413447460685429
        assert!((y.data()[1] - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((y.data()[2] - 6.0).abs() < 1e-8);
        assert!((y.data()[3] - 9.0).abs() < 1e-8);
    }

    #[test]
    fn linear_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 3, 4], &mut rng);
        assert_eq!(linear(&x, &Tensor::identity(4), &Tensor::zeros([4])).unwrap(), x);
        let x = Tensor::new([2], vec![1.0, 1.0]).unwrap();
        let w = Tensor::new([2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(linear(&x, &w, &Tensor::ones([1])).unwrap().data(), &[3.0]);
        assert!(linear(&x, &Tensor::zeros([3, 1]), &Tensor::ones([1])).is_err());
    }

    #[test]
    fn conv_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 5, 5, 3], &mut rng);
        let mut w = Tensor::zeros([1, 1, 3, 3]);
        for c in 0..3 {
            w.set(&[0, 0, c, c], 1.0);
        }
        assert_eq!(conv2d_framewise(&x, &w, &Tensor::zeros([3]), 1).unwrap(), x);

        let c = 0.75;
        let img = Tensor::full([1, 6, 6, 1], c);
        let y = conv2d_framewise(&img, &Tensor::ones([3, 3, 1, 1]), &Tensor::zeros([1]), 1).unwrap();
        assert_eq!(y.shape(), &[1, 6, 6, 1]);
        assert!((y.at(&[0, 2, 3, 0]) - 9.0 * c).abs() < 1e-12);
        assert!((y.at(&[0, 0, 0, 0]) - 4.0 * c).abs() < 1e-12);

        assert_eq!(conv_output_extent(224, 3, 2), 112);
        assert_eq!(conv_output_extent(112, 3, 2), 56);
        assert_eq!(conv_output_extent(224, 4, 4), 56);
        assert_eq!(conv_output_extent(224, 2, 2), 112);
        assert!(conv2d_framewise(&x, &Tensor::zeros([3, 3, 3, 1]), &Tensor::zeros([1]), 0).is_err());
    }

    #[test]
    fn batch_norm_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[4, 3, 2], &mut rng);
        let (g, b) = (Tensor::ones([2]), Tensor::zeros([2]));
        let mut stats = RunningStats::new(2);
        assert!(matches!(
            batch_norm(&x, &g, &b, &mut stats, Mode::Eval),
            Err(Error::UninitializedStats)
        ));
        let y = batch_norm(&x, &g, &b, &mut stats, Mode::Train).unwrap();
        for ch in 0..2 {
            let mean: f64 = (0..12).map(|r| y.data()[r * 2 + ch]).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-10);
        }
        let constant = Tensor::full([3, 2], 4.0);
        let z = batch_norm(&constant, &g, &b, &mut RunningStats::new(2), Mode::Train).unwrap();
        assert!(z.data().iter().all(|v| v.abs() < 1e-12));

        let frozen = RunningStats {
            mean: vec![0.5, -1.0],
            var: vec![4.0, 0.25],
            momentum: 0.1,
            updates: 1,
        };
        let mut s = frozen.clone();
        let e = batch_norm(&x, &g, &b, &mut s, Mode::Eval).unwrap();
        assert_eq!(s, frozen);
        for r in 0..12 {
            for ch in 0..2 {
                let want = (x.data()[r * 2 + ch] - frozen.mean[ch]) / (frozen.var[ch] + BATCH_NORM_EPS).sqrt();
                assert!((e.data()[r * 2 + ch] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[2, 3, 4, 5], &mut rng);
        let p = x.permute(&[2, 0, 3, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 5, 3]);
        assert_eq!(p.at(&[1, 0, 4, 2]), x.at(&[0, 2, 1, 4]));
        assert_eq!(p.permute(&[1, 3, 0, 2]).unwrap(), x);
        assert!(x.permute(&[0, 0, 1, 2]).is_err());
    }
}
