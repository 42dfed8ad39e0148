//! Dense row-major tensors and the kernels every layer is built from.
//!
//! Feature maps are stored height × width × channels (channels fastest).
//! Convolution kernels are kh × kw × c_in × c_out. All convolutions are
//! cross-correlations: no kernel flip.

use crate::error::{Error, Result};
use crate::rng::Prng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} entries, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Column vector view of a slice.
    pub fn vector(data: &[f64]) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: data.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// A tensor of i.i.d. N(mean, std²) entries drawn in row-major order.
    pub fn gaussian(shape: &[usize], mean: f64, std: f64, rng: &mut Prng) -> Result<Self> {
        let mut t = Tensor::zeros(shape);
        t.gaussian_fill(mean, std, rng)?;
        Ok(t)
    }

    pub fn gaussian_fill(&mut self, mean: f64, std: f64, rng: &mut Prng) -> Result<()> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::invalid(format!("standard deviation {std} must be >= 0")));
        }
        for v in &mut self.data {
            *v = rng.gaussian(mean, std);
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_vec(&[c, r], out)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            [n] => Ok((n, 1)),
            _ => Err(Error::shape(format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bit-for-bit equality, distinguishing -0.0 from 0.0 and comparing NaN payloads.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c = a·b + beta·c` for row-major operands, optionally transposed.
///
/// `a` is m×k (or k×m when `trans_a`), `b` is k×n (or n×k when `trans_b`),
/// `c` is m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access the strides can produce.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of an m×k and a k×p tensor. A rank-1 right operand is
/// treated as a column vector and the result is rank-1 too.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.shape[..] {
        [m, k] => (m, k),
        _ => return Err(Error::shape(format!("matmul lhs must be 2-D, got {:?}", a.shape))),
    };
    let (k2, p) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} · {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * p];
    gemm(false, false, m, k, p, &a.data, &b.data, 0.0, &mut out);
    if b.shape.len() == 1 {
        Tensor::from_vec(&[m], out)
    } else {
        Tensor::from_vec(&[m, p], out)
    }
}

/// Matrix–vector product on raw slices: `w` is rows×cols.
pub(crate) fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        let row = &w[r * cols..(r + 1) * cols];
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
}

impl ConvShape {
    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn patch_len(&self) -> usize {
        self.taps() * self.cin
    }

    fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// Input pixel under kernel tap (dy, dx) for output pixel (py, px), if inside.
    #[inline]
    fn source(&self, py: usize, px: usize, dy: usize, dx: usize) -> Option<usize> {
        let iy = (py + dy).checked_sub(self.kh / 2)?;
        let ix = (px + dx).checked_sub(self.kw / 2)?;
        (iy < self.h && ix < self.w).then_some(iy * self.w + ix)
    }
}

fn conv_shape(x: &Tensor, k: &Tensor) -> Result<ConvShape> {
    let [h, w, cin] = x.shape[..] else {
        return Err(Error::shape(format!("conv input must be h×w×c, got {:?}", x.shape)));
    };
    let [kh, kw, kcin, cout] = k.shape[..] else {
        return Err(Error::shape(format!(
            "conv kernel must be kh×kw×c_in×c_out, got {:?}",
            k.shape
        )));
    };
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(format!(
            "same-padded convolution needs odd kernel extents, got {kh}×{kw}"
        )));
    }
    if kcin != cin {
        return Err(Error::shape(format!(
            "kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    Ok(ConvShape {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
    })
}

fn im2col(s: &ConvShape, x: &[f64]) -> Vec<f64> {
    let plen = s.patch_len();
    let mut cols = vec![0.0; s.pixels() * plen];
    for py in 0..s.h {
        for px in 0..s.w {
            let row = &mut cols[(py * s.w + px) * plen..][..plen];
            for dy in 0..s.kh {
                for dx in 0..s.kw {
                    if let Some(src) = s.source(py, px, dy, dx) {
                        let off = (dy * s.kw + dx) * s.cin;
                        row[off..off + s.cin].copy_from_slice(&x[src * s.cin..][..s.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(s: &ConvShape, cols: &[f64]) -> Vec<f64> {
    let plen = s.patch_len();
    let mut x = vec![0.0; s.pixels() * s.cin];
    for py in 0..s.h {
        for px in 0..s.w {
            let row = &cols[(py * s.w + px) * plen..][..plen];
            for dy in 0..s.kh {
                for dx in 0..s.kw {
                    if let Some(src) = s.source(py, px, dy, dx) {
                        let off = (dy * s.kw + dx) * s.cin;
                        let dst = &mut x[src * s.cin..][..s.cin];
                        for (d, v) in dst.iter_mut().zip(&row[off..off + s.cin]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Kernel of a single-output convolution rearranged as c_in × taps.
fn kernel_by_channel(s: &ConvShape, k: &[f64]) -> Vec<f64> {
    let taps = s.taps();
    let mut kt = vec![0.0; s.cin * taps];
    for tap in 0..taps {
        for ci in 0..s.cin {
            kt[ci * taps + tap] = k[tap * s.cin + ci];
        }
    }
    kt
}

pub(crate) fn conv_forward_raw(s: &ConvShape, x: &[f64], k: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = s.pixels();
    let mut out = vec![0.0; hw * s.cout];
    if s.cout == 1 {
        // One GEMM computes every tap's response at every input pixel; the
        // output then gathers the shifted responses. This avoids the
        // bandwidth-bound matrix–vector product an im2col would need.
        let taps = s.taps();
        let kt = kernel_by_channel(s, k);
        let mut z = vec![0.0; hw * taps];
        gemm(false, false, hw, s.cin, taps, x, &kt, 0.0, &mut z);
        for py in 0..s.h {
            for px in 0..s.w {
                let mut acc = bias[0];
                for dy in 0..s.kh {
                    for dx in 0..s.kw {
                        if let Some(src) = s.source(py, px, dy, dx) {
                            acc += z[src * taps + dy * s.kw + dx];
                        }
                    }
                }
                out[py * s.w + px] = acc;
            }
        }
    } else {
        let cols = im2col(s, x);
        for row in out.chunks_exact_mut(s.cout) {
            row.copy_from_slice(bias);
        }
        gemm(false, false, hw, s.patch_len(), s.cout, &cols, k, 1.0, &mut out);
    }
    out
}

/// Gradients of a same-padded convolution. Fields are `None` when not requested.
#[derive(Clone, Debug, Default)]
pub(crate) struct RawConvGrads {
    pub x: Option<Vec<f64>>,
    pub k: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv_backward_raw(
    s: &ConvShape,
    x: &[f64],
    k: &[f64],
    grad_out: &[f64],
    need_x: bool,
    need_params: bool,
) -> RawConvGrads {
    let hw = s.pixels();
    let mut grads = RawConvGrads::default();
    if need_params {
        let mut gb = vec![0.0; s.cout];
        for row in grad_out.chunks_exact(s.cout) {
            for (b, g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        grads.bias = Some(gb);
    }
    if s.cout == 1 {
        // shifted[q, tap] = grad_out at the output pixel that reads input q through tap.
        let taps = s.taps();
        let mut shifted = vec![0.0; hw * taps];
        for py in 0..s.h {
            for px in 0..s.w {
                let g = grad_out[py * s.w + px];
                for dy in 0..s.kh {
                    for dx in 0..s.kw {
                        if let Some(src) = s.source(py, px, dy, dx) {
                            shifted[src * taps + dy * s.kw + dx] = g;
                        }
                    }
                }
            }
        }
        if need_params {
            let mut gkt = vec![0.0; s.cin * taps];
            gemm(true, false, s.cin, hw, taps, x, &shifted, 0.0, &mut gkt);
            let mut gk = vec![0.0; taps * s.cin];
            for tap in 0..taps {
                for ci in 0..s.cin {
                    gk[tap * s.cin + ci] = gkt[ci * taps + tap];
                }
            }
            grads.k = Some(gk);
        }
        if need_x {
            let kt = kernel_by_channel(s, k);
            let mut gx = vec![0.0; hw * s.cin];
            gemm(false, true, hw, taps, s.cin, &shifted, &kt, 0.0, &mut gx);
            grads.x = Some(gx);
        }
    } else {
        let plen = s.patch_len();
        if need_params {
            let cols = im2col(s, x);
            let mut gk = vec![0.0; plen * s.cout];
            gemm(true, false, plen, hw, s.cout, &cols, grad_out, 0.0, &mut gk);
            grads.k = Some(gk);
        }
        if need_x {
            let mut gcols = vec![0.0; hw * plen];
            gemm(false, true, hw, s.cout, plen, grad_out, k, 0.0, &mut gcols);
            grads.x = Some(col2im(s, &gcols));
        }
    }
    grads
}

/// Same-padded 2-D cross-correlation: `x` is h×w×c_in, `k` is kh×kw×c_in×c_out
/// with odd kh, kw, zero padding of (kh−1)/2 and (kw−1)/2. Output is h×w×c_out.
pub fn conv2d_same(x: &Tensor, k: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let s = conv_shape(x, k)?;
    if bias.shape != [s.cout] {
        return Err(Error::shape(format!(
            "bias must have {} entries, got {:?}",
            s.cout, bias.shape
        )));
    }
    let out = conv_forward_raw(&s, &x.data, &k.data, &bias.data);
    Tensor::from_vec(&[s.h, s.w, s.cout], out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub grad_x: Tensor,
    pub grad_k: Tensor,
    pub grad_bias: Tensor,
}

/// Analytic gradients of [`conv2d_same`] with respect to input, kernel and bias.
pub fn conv2d_grads(x: &Tensor, k: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let s = conv_shape(x, k)?;
    if grad_out.shape != [s.h, s.w, s.cout] {
        return Err(Error::shape(format!(
            "grad_out must be {:?}, got {:?}",
            [s.h, s.w, s.cout],
            grad_out.shape
        )));
    }
    let g = conv_backward_raw(&s, &x.data, &k.data, &grad_out.data, true, true);
    Ok(ConvGrads {
        grad_x: Tensor::from_vec(&x.shape, g.x.unwrap_or_default())?,
        grad_k: Tensor::from_vec(&k.shape, g.k.unwrap_or_default())?,
        grad_bias: Tensor::from_vec(&[s.cout], g.bias.unwrap_or_default())?,
    })
}

pub(crate) fn conv_shape_of(h: usize, w: usize, cin: usize, k: &Tensor) -> ConvShape {
    ConvShape {
        h,
        w,
        cin,
        kh: k.shape[0],
        kw: k.shape[1],
        cout: k.shape[3],
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Passes `grad_out` where `x > 0`, zero elsewhere (including at 0).
pub fn relu_grad(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape != grad_out.shape {
        return Err(Error::shape(format!(
            "relu grad: {:?} vs {:?}",
            x.shape, grad_out.shape
        )));
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

pub(crate) fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if !(*x > 0.0) {
            *x = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the forward activation was clipped.
pub(crate) fn relu_mask_inplace(activation: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if !(a > 0.0) {
            *g = 0.0;
        }
    }
}
