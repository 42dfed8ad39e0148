//! Differentiable layers with hand-derived backward passes, and the losses.
//!
//! Layers do not own their weights. Each layer keeps [`ParamId`]s into a
//! [`LayerParams`] store owned by the model, which pairs every parameter with
//! a gradient accumulator of the same shape. Backward passes add into those
//! accumulators; callers zero them between steps.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::FftPlan;
use crate::rng::Prng;
use crate::tensor::{self, ConvShape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors and their gradient accumulators.
#[derive(Clone, Debug, Default)]
pub struct LayerParams {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl LayerParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    /// Replaces a parameter's value, keeping its name; resets its gradient.
    pub fn replace(&mut self, id: ParamId, value: Tensor) {
        self.grads[id.0] = Tensor::zeros(value.shape());
        self.values[id.0] = value;
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    /// Mutable values alongside read-only gradients, for optimizers.
    pub fn values_and_grads(&mut self) -> (&mut [Tensor], &[Tensor]) {
        (&mut self.values, &self.grads)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    fn split(&mut self, id: ParamId) -> (&Tensor, &mut Tensor) {
        (&self.values[id.0], &mut self.grads[id.0])
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// ---------------------------------------------------------------------------
// Fully connected

/// Gradients of `y = Wx + b`.
#[derive(Clone, Debug)]
pub struct FcGrads {
    pub grad_x: Tensor,
    pub grad_w: Tensor,
    pub grad_b: Tensor,
}

/// `y = Wx + b` for `W` out×in.
pub fn fc_forward(w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (out, inp) = w.dims2()?;
    if x.len() != inp || b.len() != out {
        return Err(Error::shape(format!(
            "fc {:?} with input {:?} and bias {:?}",
            w.shape(),
            x.shape(),
            b.shape()
        )));
    }
    let mut y = b.data().to_vec();
    let mut wx = vec![0.0; out];
    tensor::matvec(w.data(), out, inp, x.data(), &mut wx);
    add_into(&mut y, &wx);
    Tensor::from_vec(&[out], y)
}

pub fn fc_backward(w: &Tensor, x: &Tensor, grad_y: &Tensor) -> Result<FcGrads> {
    let (out, inp) = w.dims2()?;
    if x.len() != inp || grad_y.len() != out {
        return Err(Error::shape("fc backward operand lengths"));
    }
    let mut grad_w = Tensor::zeros(&[out, inp]);
    outer_add(grad_w.data_mut(), grad_y.data(), x.data());
    let mut grad_x = vec![0.0; inp];
    transposed_matvec_add(w.data(), out, inp, grad_y.data(), &mut grad_x);
    Ok(FcGrads {
        grad_x: Tensor::from_vec(&[inp], grad_x)?,
        grad_w,
        grad_b: grad_y.clone().reshape(&[out])?,
    })
}

/// `acc += u·vᵀ`
fn outer_add(acc: &mut [f64], u: &[f64], v: &[f64]) {
    let cols = v.len();
    for (i, &ui) in u.iter().enumerate() {
        if ui == 0.0 {
            continue;
        }
        for (a, &vj) in acc[i * cols..(i + 1) * cols].iter_mut().zip(v) {
            *a += ui * vj;
        }
    }
}

/// `acc += Wᵀ·g` for `W` rows×cols.
fn transposed_matvec_add(w: &[f64], rows: usize, cols: usize, g: &[f64], acc: &mut [f64]) {
    for (r, &gr) in g.iter().enumerate().take(rows) {
        if gr == 0.0 {
            continue;
        }
        for (a, &wv) in acc.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *a += gr * wv;
        }
    }
}

/// A fully connected layer over parameters in a [`LayerParams`] store.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn forward(&self, params: &LayerParams, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        let mut y = vec![0.0; self.outputs];
        tensor::matvec(params.value(self.weight).data(), self.outputs, self.inputs, x, &mut y);
        if let Some(b) = self.bias {
            add_into(&mut y, params.value(b).data());
        }
        y
    }

    /// Accumulates parameter gradients when `need_params`; returns `Wᵀ·grad_y`
    /// when `need_x`.
    pub fn backward(
        &self,
        params: &mut LayerParams,
        x: &[f64],
        grad_y: &[f64],
        need_x: bool,
        need_params: bool,
    ) -> Option<Vec<f64>> {
        if need_params {
            let (_, gw) = params.split(self.weight);
            outer_add(gw.data_mut(), grad_y, x);
            if let Some(b) = self.bias {
                add_into(params.grad_mut(b).data_mut(), grad_y);
            }
        }
        need_x.then(|| {
            let mut gx = vec![0.0; self.inputs];
            transposed_matvec_add(
                params.value(self.weight).data(),
                self.outputs,
                self.inputs,
                grad_y,
                &mut gx,
            );
            gx
        })
    }
}

// ---------------------------------------------------------------------------
// Circulant

fn zero_pad(x: &[f64], n: usize) -> Vec<f64> {
    let mut padded = vec![0.0; n];
    padded[..x.len()].copy_from_slice(x);
    padded
}

/// Dense `circ(c)`: entry (i, j) is `c[(i − j) mod n]`.
pub fn circulant_matrix(c: &[f64]) -> Tensor {
    let n = c.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = c[(i + n - j) % n];
        }
    }
    Tensor::from_vec(&[n, n], data).expect("square matrix")
}

/// `y = circ(c)·[x; 0]` with `x` zero-padded from length M to N = len(c).
pub fn circulant_forward(c: &Tensor, x: &Tensor) -> Result<Tensor> {
    let n = c.len();
    if x.len() > n {
        return Err(Error::invalid(format!(
            "circulant input length {} exceeds output length {n}",
            x.len()
        )));
    }
    let plan = FftPlan::new(n);
    let y = plan.convolve_spectra(&plan.forward_real(c.data()), &plan.forward_real(&zero_pad(x.data(), n)));
    Tensor::from_vec(&[n], y)
}

/// Returns `(grad_c, grad_x)`: the circular correlation of `grad_y` with the
/// padded input, and the first M entries of its correlation with `c`.
pub fn circulant_backward(c: &Tensor, x: &Tensor, grad_y: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = c.len();
    let m = x.len();
    if m > n || grad_y.len() != n {
        return Err(Error::shape("circulant backward operand lengths"));
    }
    let plan = FftPlan::new(n);
    let g_hat = plan.forward_real(grad_y.data());
    let grad_c = plan.correlate_spectra(&g_hat, &plan.forward_real(&zero_pad(x.data(), n)));
    let mut grad_x = plan.correlate_spectra(&g_hat, &plan.forward_real(c.data()));
    grad_x.truncate(m);
    Ok((Tensor::from_vec(&[n], grad_c)?, Tensor::from_vec(&[m], grad_x)?))
}

/// γ circulant layers sharing one zero-padded input. Output is laid out as an
/// N-pixel feature map with γ channels (channel fastest).
#[derive(Clone, Debug)]
pub struct CirculantBank {
    pub filters: Vec<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
    plan: Arc<FftPlan>,
}

impl CirculantBank {
    pub fn new(filters: Vec<ParamId>, inputs: usize, outputs: usize) -> Self {
        CirculantBank {
            filters,
            inputs,
            outputs,
            plan: Arc::new(FftPlan::new(outputs)),
        }
    }

    pub fn channels(&self) -> usize {
        self.filters.len()
    }

    fn spectrum(&self, v: &[f64]) -> Vec<Complex64> {
        self.plan.forward_real(&zero_pad(v, self.outputs))
    }

    pub fn forward(&self, params: &LayerParams, x: &[f64]) -> Vec<f64> {
        let gamma = self.channels();
        let x_hat = self.spectrum(x);
        let mut out = vec![0.0; self.outputs * gamma];
        for (k, &id) in self.filters.iter().enumerate() {
            let c_hat = self.spectrum(params.value(id).data());
            let y = self.plan.convolve_spectra(&c_hat, &x_hat);
            for (p, v) in y.into_iter().enumerate() {
                out[p * gamma + k] = v;
            }
        }
        out
    }

    pub fn backward(
        &self,
        params: &mut LayerParams,
        x: &[f64],
        grad_y: &[f64],
        need_x: bool,
        need_params: bool,
    ) -> Option<Vec<f64>> {
        let gamma = self.channels();
        let x_hat = need_params.then(|| self.spectrum(x));
        let mut grad_x = need_x.then(|| vec![0.0; self.outputs]);
        for (k, &id) in self.filters.iter().enumerate() {
            let g: Vec<f64> = (0..self.outputs).map(|p| grad_y[p * gamma + k]).collect();
            let g_hat = self.plan.forward_real(&g);
            if let Some(x_hat) = &x_hat {
                let gc = self.plan.correlate_spectra(&g_hat, x_hat);
                add_into(params.grad_mut(id).data_mut(), &gc);
            }
            if let Some(gx) = grad_x.as_mut() {
                let c_hat = self.spectrum(params.value(id).data());
                add_into(gx, &self.plan.correlate_spectra(&g_hat, &c_hat));
            }
        }
        grad_x.map(|mut gx| {
            gx.truncate(self.inputs);
            gx
        })
    }
}

// ---------------------------------------------------------------------------
// Convolutions

/// A same-padded convolution on a fixed spatial size.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub height: usize,
    pub width: usize,
}

impl Conv2d {
    fn shape(&self, params: &LayerParams) -> ConvShape {
        let k = params.value(self.kernel);
        tensor::conv_shape_of(self.height, self.width, k.shape()[2], k)
    }

    pub fn out_channels(&self, params: &LayerParams) -> usize {
        params.value(self.kernel).shape()[3]
    }

    pub fn forward(&self, params: &LayerParams, x: &[f64]) -> Vec<f64> {
        let s = self.shape(params);
        tensor::conv_forward_raw(&s, x, params.value(self.kernel).data(), params.value(self.bias).data())
    }

    pub fn backward(
        &self,
        params: &mut LayerParams,
        x: &[f64],
        grad_out: &[f64],
        need_x: bool,
        need_params: bool,
    ) -> Option<Vec<f64>> {
        let s = self.shape(params);
        let g = tensor::conv_backward_raw(&s, x, params.value(self.kernel).data(), grad_out, need_x, need_params);
        if let Some(gk) = &g.k {
            add_into(params.grad_mut(self.kernel).data_mut(), gk);
        }
        if let Some(gb) = &g.bias {
            add_into(params.grad_mut(self.bias).data_mut(), gb);
        }
        g.x
    }
}

/// Output extent of a valid (unpadded) strided convolution.
pub fn valid_output_extent(input: usize, kernel: usize, stride: usize) -> usize {
    if input < kernel {
        0
    } else {
        (input - kernel) / stride + 1
    }
}

fn strided_dims(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let [h, w, cin] = x.shape()[..] else {
        return Err(Error::shape(format!("expected h×w×c input, got {:?}", x.shape())));
    };
    let [kh, kw, kcin, cout] = k.shape()[..] else {
        return Err(Error::shape(format!("expected 4-D kernel, got {:?}", k.shape())));
    };
    if kcin != cin {
        return Err(Error::shape("strided conv channel mismatch"));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let oh = valid_output_extent(h, kh, stride);
    let ow = valid_output_extent(w, kw, stride);
    if oh == 0 || ow == 0 {
        return Err(Error::shape("input smaller than kernel"));
    }
    Ok((h, w, cin, kh, kw, cout, oh, ow))
}

/// Valid cross-correlation with equal vertical and horizontal stride.
pub fn conv2d_valid_strided(x: &Tensor, k: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (_, w, cin, kh, kw, cout, oh, ow) = strided_dims(x, k, stride)?;
    if bias.len() != cout {
        return Err(Error::shape("strided conv bias length"));
    }
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * cout..][..cout];
            o.copy_from_slice(bias.data());
            for dy in 0..kh {
                for dx in 0..kw {
                    let src = ((oy * stride + dy) * w + ox * stride + dx) * cin;
                    for ci in 0..cin {
                        let xv = xd[src + ci];
                        let krow = &kd[((dy * kw + dx) * cin + ci) * cout..][..cout];
                        for (ov, kv) in o.iter_mut().zip(krow) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[oh, ow, cout], out)
}

pub fn conv2d_valid_strided_grads(
    x: &Tensor,
    k: &Tensor,
    grad_out: &Tensor,
    stride: usize,
) -> Result<tensor::ConvGrads> {
    let (_, w, cin, kh, kw, cout, oh, ow) = strided_dims(x, k, stride)?;
    if grad_out.shape() != [oh, ow, cout] {
        return Err(Error::shape("strided conv grad_out shape"));
    }
    let (xd, kd, gd) = (x.data(), k.data(), grad_out.data());
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let g = &gd[(oy * ow + ox) * cout..][..cout];
            add_into(&mut gb, g);
            for dy in 0..kh {
                for dx in 0..kw {
                    let src = ((oy * stride + dy) * w + ox * stride + dx) * cin;
                    for ci in 0..cin {
                        let koff = ((dy * kw + dx) * cin + ci) * cout;
                        let xv = xd[src + ci];
                        let mut acc = 0.0;
                        for co in 0..cout {
                            gk[koff + co] += xv * g[co];
                            acc += kd[koff + co] * g[co];
                        }
                        gx[src + ci] += acc;
                    }
                }
            }
        }
    }
    Ok(tensor::ConvGrads {
        grad_x: Tensor::from_vec(x.shape(), gx)?,
        grad_k: Tensor::from_vec(k.shape(), gk)?,
        grad_bias: Tensor::from_vec(&[cout], gb)?,
    })
}

// ---------------------------------------------------------------------------
// Dropout, sigmoid

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Inverted dropout: survivors are scaled by 1/(1−p) at train time so the
/// inference pass is the identity.
#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} must be in [0, 1)")));
        }
        Ok(Dropout { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Multiplicative mask: 0 with probability p, else 1/(1−p).
    pub fn sample_mask(&self, len: usize, rng: &mut Prng) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.p);
        if self.p == 0.0 {
            return vec![1.0; len];
        }
        (0..len)
            .map(|_| if rng.uniform() < self.p { 0.0 } else { keep })
            .collect()
    }

    /// Applies dropout in `mode`, returning the output and the mask used.
    pub fn forward(&self, x: &[f64], mode: Mode, rng: &mut Prng) -> (Vec<f64>, Vec<f64>) {
        let mask = match mode {
            Mode::Infer => vec![1.0; x.len()],
            Mode::Train => self.sample_mask(x.len(), rng),
        };
        let y = apply_mask(x, &mask);
        (y, mask)
    }

    pub fn backward(&self, mask: &[f64], grad_y: &[f64]) -> Vec<f64> {
        apply_mask(grad_y, mask)
    }
}

pub fn apply_mask(x: &[f64], mask: &[f64]) -> Vec<f64> {
    x.iter().zip(mask).map(|(a, m)| a * m).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient through the sigmoid given its output `y`.
pub fn sigmoid_backward(y: f64, grad_out: f64) -> f64 {
    y * (1.0 - y) * grad_out
}

// ---------------------------------------------------------------------------
// Losses

/// A scalar loss with its gradient with respect to the prediction.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

/// `(1/B)·Σ_i ‖pred_i − target_i‖²` over a B×n batch (rank-1 means B = 1).
pub fn euclidean_loss(pred: &Tensor, target: &Tensor) -> Result<LossValue> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "loss operands {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let batch = if pred.shape().len() >= 2 { pred.shape()[0] } else { 1 };
    let scale = 1.0 / batch as f64;
    let mut value = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            value += d * d;
            2.0 * scale * d
        })
        .collect();
    Ok(LossValue {
        value: value * scale,
        grad: Tensor::from_vec(pred.shape(), grad)?,
    })
}

/// Per-sample term of [`euclidean_loss`]: returns ‖pred − target‖² and
/// writes `scale·2·(pred − target)` into `grad`.
pub(crate) fn squared_error(pred: &[f64], target: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    for ((g, p), t) in grad.iter_mut().zip(pred).zip(target) {
        let d = p - t;
        sum += d * d;
        *g = 2.0 * scale * d;
    }
    sum
}

/// Probabilities are clamped to `[ε, 1 − ε]` before the logarithms.
pub const BCE_EPSILON: f64 = 1e-7;

/// Binary cross-entropy `−c·ln p − (1 − c)·ln(1 − p)` of a probability.
///
/// The gradient with respect to `prob` is evaluated at the clamped value and
/// passed straight through the clamp, so a saturated discriminator still
/// receives a learning signal.
pub fn bce_loss(prob: f64, label: bool) -> LossValue {
    let p = prob.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    let (value, grad) = if label {
        (-p.ln(), -1.0 / p)
    } else {
        (-(1.0 - p).ln(), 1.0 / (1.0 - p))
    };
    LossValue {
        value,
        grad: Tensor::filled(&[1], grad),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::tensor::matmul;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::gaussian(shape, 0.0, 1.0, &mut Prng::new(seed)).unwrap()
    }

    #[test]
    fn fc_identity_and_hand_values() {
        let x = rand(&[4], 1);
        let y = fc_forward(&Tensor::identity(4), &Tensor::zeros(&[4]), &x).unwrap();
        assert_eq!(y, x);
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let y = fc_forward(&w, &b, &Tensor::filled(&[2], 1.0)).unwrap();
        assert_eq!(y.data(), &[4.0, 1.0]);
    }

    #[test]
    fn fc_gradients() {
        let (w, b, x) = (rand(&[20, 10], 2), rand(&[20], 3), rand(&[10], 4));
        let probe = rand(&[20], 5);
        let loss = |y: &Tensor| -> f64 { y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum() };
        let err_w = grad_check(
            |wp| {
                let y = fc_forward(wp, &b, &x).unwrap();
                (loss(&y), fc_backward(wp, &x, &probe).unwrap().grad_w)
            },
            &w,
            1e-5,
        )
        .unwrap();
        let err_x = grad_check(
            |xp| {
                let y = fc_forward(&w, &b, xp).unwrap();
                (loss(&y), fc_backward(&w, xp, &probe).unwrap().grad_x)
            },
            &x,
            1e-5,
        )
        .unwrap();
        let err_b = grad_check(
            |bp| {
                let y = fc_forward(&w, bp, &x).unwrap();
                (loss(&y), fc_backward(&w, &x, &probe).unwrap().grad_b)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err_w < 1e-6 && err_x < 1e-6 && err_b < 1e-6, "{err_w} {err_x} {err_b}");
    }

    #[test]
    fn fc_shape_mismatch() {
        let w = Tensor::zeros(&[3, 2]);
        assert!(fc_forward(&w, &Tensor::zeros(&[3]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn circulant_delta_is_identity() {
        let mut c = Tensor::zeros(&[16]);
        c.data_mut()[0] = 1.0;
        let x = rand(&[16], 6);
        let y = circulant_forward(&c, &x).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-14);
    }

    #[test]
    fn circulant_matches_dense_truncated_fc() {
        let (m, n) = (10, 33);
        let c = rand(&[n], 7);
        let x = rand(&[m], 8);
        let dense = circulant_matrix(c.data());
        let mut w = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for j in 0..m {
                w.data_mut()[i * m + j] = dense.data()[i * n + j];
            }
        }
        let via_fc = fc_forward(&w, &Tensor::zeros(&[n]), &x).unwrap();
        let via_fft = circulant_forward(&c, &x).unwrap();
        assert!(via_fc.max_abs_diff(&via_fft) < 1e-12);
        let via_matmul = matmul(&w, &x).unwrap();
        assert!(via_matmul.max_abs_diff(&via_fft) < 1e-12);
    }

    #[test]
    fn circulant_gradients() {
        let (m, n) = (10, 33);
        let (c, x, probe) = (rand(&[n], 9), rand(&[m], 10), rand(&[n], 11));
        let dot = |y: &Tensor| -> f64 { y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum() };
        let err_c = grad_check(
            |cp| {
                let y = circulant_forward(cp, &x).unwrap();
                (dot(&y), circulant_backward(cp, &x, &probe).unwrap().0)
            },
            &c,
            1e-5,
        )
        .unwrap();
        let err_x = grad_check(
            |xp| {
                let y = circulant_forward(&c, xp).unwrap();
                (dot(&y), circulant_backward(&c, xp, &probe).unwrap().1)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err_c < 1e-4 && err_x < 1e-4, "{err_c} {err_x}");
    }

    #[test]
    fn circulant_rejects_long_input() {
        assert!(matches!(
            circulant_forward(&Tensor::zeros(&[4]), &Tensor::zeros(&[5])),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = Prng::new(1);
        let x: Vec<f64> = (0..100).map(|v| v as f64).collect();
        let d = Dropout::new(0.5).unwrap();
        assert_eq!(d.forward(&x, Mode::Infer, &mut rng).0, x);
        let d0 = Dropout::new(0.0).unwrap();
        assert_eq!(d0.forward(&x, Mode::Train, &mut rng).0, x);
        assert!(Dropout::new(1.0).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = Prng::new(77);
        let d = Dropout::new(0.5).unwrap();
        let x = vec![1.0; 1_000_000];
        let (y, _) = d.forward(&x, Mode::Train, &mut rng);
        let kept = y.iter().filter(|&&v| v != 0.0).count() as f64 / y.len() as f64;
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((kept - 0.5).abs() < 0.005, "kept {kept}");
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn sigmoid_properties() {
        assert_eq!(sigmoid(0.0), 0.5);
        let mut rng = Prng::new(3);
        for _ in 0..100 {
            let x = rng.gaussian(0.0, 5.0);
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
        let x = 0.7;
        let eps = 1e-5;
        let numeric = (sigmoid(x + eps) - sigmoid(x - eps)) / (2.0 * eps);
        let analytic = sigmoid_backward(sigmoid(x), 1.0);
        assert!(crate::gradcheck::relative_error(analytic, numeric) < 1e-8);
    }

    #[test]
    fn euclidean_values() {
        let p = Tensor::from_vec(&[2, 2], vec![2.0, 0.0, 1.0, 1.0]).unwrap();
        let t = Tensor::zeros(&[2, 2]);
        assert_eq!(euclidean_loss(&p, &t).unwrap().value, 3.0);
        assert_eq!(euclidean_loss(&p, &p).unwrap().value, 0.0);
        assert!(euclidean_loss(&p, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn euclidean_gradient() {
        let target = rand(&[3, 5], 20);
        let pred = rand(&[3, 5], 21);
        let err = grad_check(
            |p| {
                let l = euclidean_loss(p, &target).unwrap();
                (l.value, l.grad)
            },
            &pred,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.5, true).value - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(1.0 - BCE_EPSILON, true).value < 2e-7);
        assert!((bce_loss(1e-12, true).value - 16.118_095_650_958_32).abs() < 1e-9);
        assert!(bce_loss(1.0, false).value.is_finite());
    }
}
