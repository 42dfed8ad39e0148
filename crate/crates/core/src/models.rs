//! ReconNet variants, the discriminator, the learnable linear encoder, and
//! checkpoint (de)serialization.
//!
//! A ReconNet maps m measurements of a 33×33 block to the block:
//!
//! ```text
//! first stage (FC m→1089, or γ circulant layers)  → 33×33×(1 or γ)
//! per unit: conv 11×11→64, ReLU · conv 1×1→32, ReLU · conv 7×7→1, ReLU
//! ```
//!
//! Every feature map stays 33×33. The first stage is linear. Network
//! outputs are not clamped; clamping to [0, 1] happens when blocks are
//! stitched back into an image.

use std::collections::BTreeMap;
use std::path::Path;

use crate::container::{Container, Dtype};
use crate::error::{Error, Result};
use crate::layers::{
    self, sigmoid, sigmoid_backward, CirculantBank, Conv2d, Dropout, LayerParams, Linear, Mode, ParamId,
};
use crate::rng::Prng;
use crate::sensing::{mr_to_m, MatrixKind, MeasurementMatrix, BLOCK_PIXELS};
use crate::tensor::{self, Tensor};

pub const BLOCK_SIDE: usize = 33;

/// (kernel side, output maps) for the three convolutions of a unit.
pub const UNIT_PLAN: [(usize, usize); 3] = [(11, 64), (1, 32), (7, 1)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FirstStage {
    Fc,
    CirculantBank { gamma: usize },
}

impl FirstStage {
    pub fn channels(&self) -> usize {
        match *self {
            FirstStage::Fc => 1,
            FirstStage::CirculantBank { gamma } => gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconNetSpec {
    pub mr: f64,
    pub m: usize,
    pub n_units: usize,
    pub first_stage: FirstStage,
}

impl ReconNetSpec {
    pub fn new(mr: f64, n_units: usize, first_stage: FirstStage) -> Result<Self> {
        Self::with_measurements(mr, mr_to_m(mr, BLOCK_PIXELS)?, n_units, first_stage)
    }

    pub fn with_measurements(mr: f64, m: usize, n_units: usize, first_stage: FirstStage) -> Result<Self> {
        if !(1..=2).contains(&n_units) {
            return Err(Error::invalid(format!("ReconNet uses 1 or 2 units, got {n_units}")));
        }
        if m == 0 || m > BLOCK_PIXELS {
            return Err(Error::invalid(format!("measurement count {m} outside 1..=1089")));
        }
        if let FirstStage::CirculantBank { gamma } = first_stage {
            if gamma < 1 {
                return Err(Error::invalid("circulant bank needs at least one layer"));
            }
        }
        Ok(ReconNetSpec {
            mr,
            m,
            n_units,
            first_stage,
        })
    }

    /// Two units behind an FC layer: the Euclidean-loss configuration.
    pub fn euclidean(mr: f64) -> Result<Self> {
        Self::new(mr, 2, FirstStage::Fc)
    }

    /// One unit behind an FC layer: the generator of adversarial training.
    pub fn adversarial(mr: f64) -> Result<Self> {
        Self::new(mr, 1, FirstStage::Fc)
    }
}

/// How the first stage is initialized.
#[derive(Clone, Copy, Debug)]
pub enum FcInit<'a> {
    /// i.i.d. N(0, std²) weights, zero bias.
    Gaussian { std: f64 },
    /// `W = Φᵀ`, zero bias. Only valid for an FC first stage.
    FromPhi(&'a MeasurementMatrix),
}

impl FcInit<'_> {
    /// Standard deviation that keeps first-stage outputs at input scale.
    pub fn default_gaussian(m: usize) -> FcInit<'static> {
        FcInit::Gaussian {
            std: 1.0 / (m as f64).sqrt(),
        }
    }
}

/// He-style standard deviation for a convolution with this fan-in.
fn conv_init_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
enum FirstLayer {
    Fc(Linear),
    Circulant(CirculantBank),
}

/// Which parameter groups a backward pass accumulates gradients for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradMask {
    pub first_stage: bool,
    pub convs: bool,
}

impl GradMask {
    pub const ALL: GradMask = GradMask {
        first_stage: true,
        convs: true,
    };
    pub const FIRST_STAGE_ONLY: GradMask = GradMask {
        first_stage: true,
        convs: false,
    };
    pub const NONE: GradMask = GradMask {
        first_stage: false,
        convs: false,
    };
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ReconNetTrace {
    pub input: Vec<f64>,
    /// `acts[0]` is the first-stage output; `acts[i + 1]` follows conv i and its ReLU.
    pub acts: Vec<Vec<f64>>,
}

impl ReconNetTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has activations")
    }
}

#[derive(Clone, Debug)]
pub struct ReconNet {
    spec: ReconNetSpec,
    params: LayerParams,
    first: FirstLayer,
    convs: Vec<Conv2d>,
}

impl ReconNet {
    pub fn build(spec: &ReconNetSpec, init: FcInit<'_>, rng: &mut Prng) -> Result<Self> {
        let mut params = LayerParams::new();
        let m = spec.m;
        let first = match (spec.first_stage, init) {
            (FirstStage::Fc, FcInit::FromPhi(phi)) => {
                if phi.m() != m || phi.n() != BLOCK_PIXELS {
                    return Err(Error::invalid(format!(
                        "Φ is {}×{}, network expects {m}×{BLOCK_PIXELS}",
                        phi.m(),
                        phi.n()
                    )));
                }
                let w = params.insert("fc.W", phi.phi.transpose()?)?;
                let b = params.insert("fc.b", Tensor::zeros(&[BLOCK_PIXELS]))?;
                FirstLayer::Fc(fc_layer(w, b, m))
            }
            (FirstStage::Fc, FcInit::Gaussian { std }) => {
                let w = params.insert("fc.W", Tensor::gaussian(&[BLOCK_PIXELS, m], 0.0, std, rng)?)?;
                let b = params.insert("fc.b", Tensor::zeros(&[BLOCK_PIXELS]))?;
                FirstLayer::Fc(fc_layer(w, b, m))
            }
            (FirstStage::CirculantBank { .. }, FcInit::FromPhi(_)) => {
                return Err(Error::invalid("Φᵀ initialization requires an FC first stage"));
            }
            (FirstStage::CirculantBank { gamma }, FcInit::Gaussian { std }) => {
                let filters = (0..gamma)
                    .map(|k| {
                        params.insert(
                            format!("circ.c[{k}]"),
                            Tensor::gaussian(&[BLOCK_PIXELS], 0.0, std, rng)?,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                FirstLayer::Circulant(CirculantBank::new(filters, m, BLOCK_PIXELS))
            }
        };
        let mut convs = Vec::with_capacity(3 * spec.n_units);
        let mut cin = spec.first_stage.channels();
        for _unit in 0..spec.n_units {
            for &(side, cout) in &UNIT_PLAN {
                let idx = convs.len() + 1;
                let std = conv_init_std(side * side * cin);
                let k = params.insert(
                    format!("conv{idx}.k"),
                    Tensor::gaussian(&[side, side, cin, cout], 0.0, std, rng)?,
                )?;
                let b = params.insert(format!("conv{idx}.b"), Tensor::zeros(&[cout]))?;
                convs.push(Conv2d {
                    kernel: k,
                    bias: b,
                    height: BLOCK_SIDE,
                    width: BLOCK_SIDE,
                });
                cin = cout;
            }
        }
        Ok(ReconNet {
            spec: spec.clone(),
            params,
            first,
            convs,
        })
    }

    pub fn spec(&self) -> &ReconNetSpec {
        &self.spec
    }

    pub fn m(&self) -> usize {
        self.spec.m
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LayerParams {
        &mut self.params
    }

    pub fn first_stage_ids(&self) -> Vec<ParamId> {
        match &self.first {
            FirstLayer::Fc(l) => vec![l.weight, l.bias.expect("fc has bias")],
            FirstLayer::Circulant(c) => c.filters.clone(),
        }
    }

    pub fn conv_ids(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(|c| [c.kernel, c.bias]).collect()
    }

    pub fn param_count(&self, include_bias: bool) -> usize {
        param_count(&self.params, include_bias)
    }

    fn check_input(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.spec.m {
            return Err(Error::shape(format!(
                "network expects {} measurements, got {}",
                self.spec.m,
                y.len()
            )));
        }
        Ok(())
    }

    fn first_forward(&self, y: &[f64]) -> Vec<f64> {
        match &self.first {
            FirstLayer::Fc(l) => l.forward(&self.params, y),
            FirstLayer::Circulant(c) => c.forward(&self.params, y),
        }
    }

    /// Reconstructs one block (1089 values, row-major 33×33) from its measurements.
    pub fn forward(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_input(y)?;
        let mut act = self.first_forward(y);
        for conv in &self.convs {
            act = conv.forward(&self.params, &act);
            tensor::relu_inplace(&mut act);
        }
        Ok(act)
    }

    /// Forward pass returning the block as a 33×33 tensor.
    pub fn reconstruct_block(&self, y: &[f64]) -> Result<Tensor> {
        Tensor::from_vec(&[BLOCK_SIDE, BLOCK_SIDE], self.forward(y)?)
    }

    pub fn forward_trace(&self, y: &[f64]) -> Result<ReconNetTrace> {
        self.check_input(y)?;
        let mut acts = Vec::with_capacity(self.convs.len() + 1);
        acts.push(self.first_forward(y));
        for conv in &self.convs {
            let mut a = conv.forward(&self.params, acts.last().unwrap());
            tensor::relu_inplace(&mut a);
            acts.push(a);
        }
        Ok(ReconNetTrace {
            input: y.to_vec(),
            acts,
        })
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the output block) through a
    /// traced forward pass. Parameter gradients are accumulated for the
    /// groups in `mask`; the gradient w.r.t. the measurements is returned
    /// when `need_input`.
    pub fn backward(
        &mut self,
        trace: &ReconNetTrace,
        grad_out: &[f64],
        mask: GradMask,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let mut grad = grad_out.to_vec();
        for (i, conv) in self.convs.iter().enumerate().rev() {
            tensor::relu_mask_inplace(&trace.acts[i + 1], &mut grad);
            let need_x = i > 0 || mask.first_stage || need_input;
            grad = conv.backward(&mut self.params, &trace.acts[i], &grad, need_x, mask.convs)?;
        }
        match &self.first {
            FirstLayer::Fc(l) => l.backward(&mut self.params, &trace.input, &grad, need_input, mask.first_stage),
            FirstLayer::Circulant(c) => c.backward(&mut self.params, &trace.input, &grad, need_input, mask.first_stage),
        }
    }

    /// A copy of this network whose FC first stage is replaced by a fresh one
    /// taking `m` measurements. Convolution parameters are copied unchanged.
    pub fn with_new_fc(&self, mr: f64, m: usize, init: FcInit<'_>, rng: &mut Prng) -> Result<Self> {
        if !matches!(self.spec.first_stage, FirstStage::Fc) {
            return Err(Error::invalid("only FC first stages can be replaced"));
        }
        let spec = ReconNetSpec::with_measurements(mr, m, self.spec.n_units, FirstStage::Fc)?;
        let mut fresh = ReconNet::build(&spec, init, rng)?;
        for id in self.conv_ids() {
            let name = self.params.name(id);
            let target = fresh.params.find(name).expect("same conv layout");
            fresh.params.replace(target, self.params.value(id).clone());
        }
        Ok(fresh)
    }
}

fn fc_layer(weight: ParamId, bias: ParamId, m: usize) -> Linear {
    Linear {
        weight,
        bias: Some(bias),
        inputs: m,
        outputs: BLOCK_PIXELS,
    }
}

/// Total parameter count. Bias tensors (names ending in `.b`) are skipped
/// unless `include_bias`.
pub fn param_count(params: &LayerParams, include_bias: bool) -> usize {
    params
        .iter()
        .filter(|(name, _)| include_bias || !name.ends_with(".b"))
        .map(|(_, t)| t.len())
        .sum()
}

/// Percentage of first-stage weights saved by γ circulant layers of length
/// n relative to an m×n FC layer.
pub fn circulant_reduction_percent(m: usize, gamma: usize) -> f64 {
    100.0 * (1.0 - (gamma * BLOCK_PIXELS) as f64 / (m * BLOCK_PIXELS) as f64)
}

// ---------------------------------------------------------------------------
// Discriminator

/// Three valid 4×4, stride-2 convolutions with four maps each (ReLU after
/// each), dropout, then FC to one logit and a sigmoid.
#[derive(Clone, Debug)]
pub struct DiscriminatorSpec {
    pub maps: usize,
    pub kernel: usize,
    pub stride: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            maps: 4,
            kernel: 4,
            stride: 2,
            layers: 3,
            dropout: 0.5,
        }
    }
}

impl DiscriminatorSpec {
    /// Spatial extents from the 33×33 input through each convolution.
    pub fn spatial_chain(&self) -> Vec<usize> {
        let mut chain = vec![BLOCK_SIDE];
        for _ in 0..self.layers {
            let s = *chain.last().unwrap();
            chain.push(layers::valid_output_extent(s, self.kernel, self.stride));
        }
        chain
    }

    pub fn fc_inputs(&self) -> usize {
        let s = *self.spatial_chain().last().unwrap();
        s * s * self.maps
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorTrace {
    /// Input block and the post-ReLU map after each convolution.
    pub maps: Vec<Tensor>,
    pub mask: Vec<f64>,
    pub dropped: Vec<f64>,
    pub prob: f64,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    params: LayerParams,
    convs: Vec<(ParamId, ParamId)>,
    fc: Linear,
    dropout: Dropout,
}

impl Discriminator {
    pub fn build(spec: &DiscriminatorSpec, rng: &mut Prng) -> Result<Self> {
        let chain = spec.spatial_chain();
        if chain.contains(&0) {
            return Err(Error::invalid("discriminator shrinks the block to nothing"));
        }
        let mut params = LayerParams::new();
        let mut convs = Vec::new();
        let mut cin = 1;
        for i in 0..spec.layers {
            let std = conv_init_std(spec.kernel * spec.kernel * cin);
            let k = params.insert(
                format!("d.conv{}.k", i + 1),
                Tensor::gaussian(&[spec.kernel, spec.kernel, cin, spec.maps], 0.0, std, rng)?,
            )?;
            let b = params.insert(format!("d.conv{}.b", i + 1), Tensor::zeros(&[spec.maps]))?;
            convs.push((k, b));
            cin = spec.maps;
        }
        let inputs = spec.fc_inputs();
        let w = params.insert(
            "d.fc.W",
            Tensor::gaussian(&[1, inputs], 0.0, 1.0 / (inputs as f64).sqrt(), rng)?,
        )?;
        let b = params.insert("d.fc.b", Tensor::zeros(&[1]))?;
        Ok(Discriminator {
            spec: spec.clone(),
            params,
            convs,
            fc: Linear {
                weight: w,
                bias: Some(b),
                inputs,
                outputs: 1,
            },
            dropout: Dropout::new(spec.dropout)?,
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LayerParams {
        &mut self.params
    }

    pub fn fc_ids(&self) -> (ParamId, ParamId) {
        (self.fc.weight, self.fc.bias.unwrap())
    }

    /// Probability that `block` (1089 values) is a real image block.
    /// Dropout draws from `rng` only in [`Mode::Train`].
    pub fn forward(&self, block: &[f64], mode: Mode, rng: &mut Prng) -> Result<f64> {
        Ok(self.forward_trace(block, mode, rng)?.prob)
    }

    pub fn forward_trace(&self, block: &[f64], mode: Mode, rng: &mut Prng) -> Result<DiscriminatorTrace> {
        let mask = match mode {
            Mode::Infer => vec![1.0; self.fc.inputs],
            Mode::Train => self.dropout.sample_mask(self.fc.inputs, rng),
        };
        self.forward_with_mask(block, mask)
    }

    /// Forward pass with an explicit dropout mask (1.0 everywhere = inference).
    pub fn forward_with_mask(&self, block: &[f64], mask: Vec<f64>) -> Result<DiscriminatorTrace> {
        if block.len() != BLOCK_PIXELS {
            return Err(Error::shape(format!(
                "discriminator expects a 33×33 block, got {} values",
                block.len()
            )));
        }
        if mask.len() != self.fc.inputs {
            return Err(Error::shape("dropout mask length"));
        }
        let mut maps = vec![Tensor::from_vec(&[BLOCK_SIDE, BLOCK_SIDE, 1], block.to_vec())?];
        for &(k, b) in &self.convs {
            let z = layers::conv2d_valid_strided(
                maps.last().unwrap(),
                self.params.value(k),
                self.params.value(b),
                self.spec.stride,
            )?;
            maps.push(tensor::relu(&z));
        }
        let dropped = layers::apply_mask(maps.last().unwrap().data(), &mask);
        let logit = self.fc.forward(&self.params, &dropped)[0];
        Ok(DiscriminatorTrace {
            maps,
            mask,
            dropped,
            prob: sigmoid(logit),
        })
    }

    /// Backpropagates `grad_prob` (d loss / d probability). Returns the
    /// gradient w.r.t. the input block; accumulates parameter gradients
    /// when `need_params`.
    pub fn backward(&mut self, trace: &DiscriminatorTrace, grad_prob: f64, need_params: bool) -> Result<Vec<f64>> {
        let grad_logit = sigmoid_backward(trace.prob, grad_prob);
        let g = self
            .fc
            .backward(&mut self.params, &trace.dropped, &[grad_logit], true, need_params)
            .unwrap();
        let g = self.dropout.backward(&trace.mask, &g);
        let mut grad = Tensor::from_vec(trace.maps.last().unwrap().shape(), g)?;
        for (i, &(k, b)) in self.convs.iter().enumerate().rev() {
            grad = tensor::relu_grad(&trace.maps[i + 1], &grad)?;
            let grads =
                layers::conv2d_valid_strided_grads(&trace.maps[i], self.params.value(k), &grad, self.spec.stride)?;
            if need_params {
                for (id, gt) in [(k, &grads.grad_k), (b, &grads.grad_bias)] {
                    self.params
                        .grad_mut(id)
                        .data_mut()
                        .iter_mut()
                        .zip(gt.data())
                        .for_each(|(a, v)| *a += v);
                }
            }
            grad = grads.grad_x;
        }
        Ok(grad.into_data())
    }
}

// ---------------------------------------------------------------------------
// Encoder

/// A single bias-free linear layer 1089 → m: the only kind of measurement
/// operator a block-wise optical sensor can realize.
#[derive(Clone, Debug)]
pub struct Encoder {
    params: LayerParams,
    layer: Linear,
}

impl Encoder {
    pub fn build(m: usize, rng: &mut Prng) -> Result<Self> {
        if m == 0 || m > BLOCK_PIXELS {
            return Err(Error::invalid(format!("encoder width {m} outside 1..=1089")));
        }
        let std = 1.0 / (BLOCK_PIXELS as f64).sqrt();
        Self::from_weight(Tensor::gaussian(&[m, BLOCK_PIXELS], 0.0, std, rng)?)
    }

    /// Encoder whose weight starts as the given m×1089 matrix.
    pub fn from_weight(weight: Tensor) -> Result<Self> {
        let (m, n) = weight.dims2()?;
        if n != BLOCK_PIXELS || weight.shape().len() != 2 {
            return Err(Error::shape(format!(
                "encoder weight must be m×1089, got {:?}",
                weight.shape()
            )));
        }
        let mut params = LayerParams::new();
        let w = params.insert("enc.W", weight)?;
        Ok(Encoder {
            params,
            layer: Linear {
                weight: w,
                bias: None,
                inputs: BLOCK_PIXELS,
                outputs: m,
            },
        })
    }

    pub fn m(&self) -> usize {
        self.layer.outputs
    }

    pub fn weight(&self) -> &Tensor {
        self.params.value(self.layer.weight)
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LayerParams {
        &mut self.params
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != BLOCK_PIXELS {
            return Err(Error::shape("encoder input must be a 1089-pixel block"));
        }
        Ok(self.layer.forward(&self.params, x))
    }

    pub fn backward(&mut self, x: &[f64], grad_y: &[f64]) {
        self.layer.backward(&mut self.params, x, grad_y, false, true);
    }

    /// The weight as a learned measurement matrix.
    pub fn export(&self, mr: f64) -> Result<MeasurementMatrix> {
        MeasurementMatrix::new(self.weight().clone(), mr, MatrixKind::Learned, None)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_FORMAT: &str = "reconnet";

/// A ReconNet, optionally its measurement matrix, and free-form metadata
/// (variant, seeds, iteration counts).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ReconNet,
    pub phi: Option<MeasurementMatrix>,
    pub metadata: BTreeMap<String, String>,
}

const ARCH_KEYS: [&str; 6] = ["model", "mr", "m", "units", "first_stage", "gamma"];

impl Checkpoint {
    pub fn new(model: ReconNet, phi: Option<MeasurementMatrix>) -> Self {
        Checkpoint {
            model,
            phi,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (k, v) in &self.metadata {
            c.set_meta(k.clone(), v);
        }
        let spec = self.model.spec();
        c.set_meta("model", CHECKPOINT_FORMAT);
        c.set_meta("mr", spec.mr);
        c.set_meta("m", spec.m);
        c.set_meta("units", spec.n_units);
        match spec.first_stage {
            FirstStage::Fc => c.set_meta("first_stage", "fc"),
            FirstStage::CirculantBank { gamma } => {
                c.set_meta("first_stage", "circulant");
                c.set_meta("gamma", gamma);
            }
        }
        for (name, t) in self.model.params().iter() {
            c.push_tensor(name, t.clone());
        }
        if let Some(phi) = &self.phi {
            phi.write_meta(&mut c, "phi.");
            c.push_tensor("phi", phi.phi.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("model")? != CHECKPOINT_FORMAT {
            return Err(Error::corrupt("not a ReconNet checkpoint"));
        }
        let first_stage = match c.meta("first_stage")? {
            "fc" => FirstStage::Fc,
            "circulant" => FirstStage::CirculantBank {
                gamma: c.meta_parse("gamma")?,
            },
            other => return Err(Error::corrupt(format!("unknown first stage {other}"))),
        };
        let spec = ReconNetSpec::with_measurements(
            c.meta_parse("mr")?,
            c.meta_parse("m")?,
            c.meta_parse("units")?,
            first_stage,
        )
        .map_err(|e| Error::corrupt(e.to_string()))?;
        let mut model = ReconNet::build(&spec, FcInit::Gaussian { std: 0.0 }, &mut Prng::new(0))?;
        let mut seen = vec![false; model.params.len()];
        let mut phi = None;
        for (name, t) in &c.tensors {
            if name == "phi" {
                phi = Some(MeasurementMatrix::read_meta(c, "phi.", t.clone())?);
                continue;
            }
            let id = model
                .params
                .find(name)
                .ok_or_else(|| Error::corrupt(format!("unknown tensor name {name}")))?;
            if model.params.value(id).shape() != t.shape() {
                return Err(Error::corrupt(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.value(id).shape()
                )));
            }
            model.params.replace(id, t.clone());
            seen[id.index()] = true;
        }
        if let Some(missing) = model.params.ids().find(|id| !seen[id.index()]) {
            return Err(Error::corrupt(format!("missing tensor {}", model.params.name(missing))));
        }
        let metadata = c
            .metadata
            .iter()
            .filter(|(k, _)| !ARCH_KEYS.contains(&k.as_str()) && !k.starts_with("phi."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Checkpoint { model, phi, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn save_as(&self, path: &Path, dtype: Dtype) -> Result<()> {
        self.to_container().save_as(path, dtype)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::gen_gaussian_orthonormal;

    #[test]
    fn conv_stack_and_fc_counts() {
        let spec = ReconNetSpec::euclidean(0.10).unwrap();
        let net = ReconNet::build(&spec, FcInit::default_gaussian(spec.m), &mut Prng::new(1)).unwrap();
        let fc_w = net.params().value(net.params().find("fc.W").unwrap());
        assert_eq!(fc_w.shape(), &[1089, 109]);
        assert_eq!(net.param_count(false), 118_701 + 22_720);
        let conv_only: usize = net
            .conv_ids()
            .iter()
            .filter(|id| !net.params().name(**id).ends_with(".b"))
            .map(|id| net.params().value(*id).len())
            .sum();
        assert_eq!(conv_only, 22_720);
    }

    #[test]
    fn circulant_bank_shapes() {
        let spec = ReconNetSpec::new(0.10, 2, FirstStage::CirculantBank { gamma: 5 }).unwrap();
        let net = ReconNet::build(&spec, FcInit::default_gaussian(spec.m), &mut Prng::new(2)).unwrap();
        let k = net.params().value(net.params().find("conv1.k").unwrap());
        assert_eq!(k.shape(), &[11, 11, 5, 64]);
        let y = vec![0.1; spec.m];
        assert_eq!(net.forward(&y).unwrap().len(), 1089);
        assert!(ReconNetSpec::new(0.1, 2, FirstStage::CirculantBank { gamma: 0 }).is_err());
    }

    #[test]
    fn fc_from_phi_projects() {
        let phi = gen_gaussian_orthonormal(1089, 0.25, 3).unwrap();
        let spec = ReconNetSpec::euclidean(0.25).unwrap();
        let net = ReconNet::build(&spec, FcInit::FromPhi(&phi), &mut Prng::new(4)).unwrap();
        let w = net.params().value(net.params().find("fc.W").unwrap());
        assert!(w.bitwise_eq(&phi.phi.transpose().unwrap()));
        let wrong = gen_gaussian_orthonormal(1089, 0.10, 3).unwrap();
        assert!(ReconNet::build(&spec, FcInit::FromPhi(&wrong), &mut Prng::new(4)).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let spec = ReconNetSpec::euclidean(0.04).unwrap();
        let mut net = ReconNet::build(&spec, FcInit::Gaussian { std: 0.0 }, &mut Prng::new(5)).unwrap();
        let ids: Vec<_> = net.params().ids().collect();
        for id in ids {
            net.params_mut().value_mut(id).fill(0.0);
        }
        let out = net.forward(&vec![0.7; 43]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        assert!(net.forward(&[0.0; 42]).is_err());
    }

    #[test]
    fn discriminator_chain_and_range() {
        let spec = DiscriminatorSpec::default();
        assert_eq!(spec.spatial_chain(), vec![33, 15, 6, 2]);
        assert_eq!(spec.fc_inputs(), 16);
        let mut rng = Prng::new(6);
        let mut d = Discriminator::build(&spec, &mut rng).unwrap();
        let block: Vec<f64> = (0..1089).map(|i| (i % 33) as f64 / 33.0).collect();
        let p = d.forward(&block, Mode::Train, &mut rng).unwrap();
        assert!(p > 0.0 && p < 1.0);
        let (w, b) = d.fc_ids();
        d.params_mut().value_mut(w).fill(0.0);
        d.params_mut().value_mut(b).fill(0.0);
        assert_eq!(d.forward(&block, Mode::Infer, &mut rng).unwrap(), 0.5);
        assert!(d.forward(&block[..100], Mode::Infer, &mut rng).is_err());
    }

    #[test]
    fn encoder_is_linear_and_exports() {
        let mut rng = Prng::new(7);
        let enc = Encoder::build(43, &mut rng).unwrap();
        assert_eq!(enc.weight().shape(), &[43, 1089]);
        let a: Vec<f64> = (0..1089).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = (0..1089).map(|_| rng.uniform()).collect();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
        let (ya, yb, ym) = (
            enc.forward(&a).unwrap(),
            enc.forward(&b).unwrap(),
            enc.forward(&mix).unwrap(),
        );
        for i in 0..43 {
            assert!((ym[i] - (2.0 * ya[i] - 0.5 * yb[i])).abs() < 1e-12);
        }
        let phi = enc.export(0.04).unwrap();
        assert_eq!(crate::sensing::sense(&phi, &a).unwrap(), ya);
        assert!(Encoder::build(0, &mut rng).is_err());
        assert!(Encoder::build(1090, &mut rng).is_err());
    }

    #[test]
    fn reduction_percentages() {
        let cases = [
            (272, 1, 99.63),
            (272, 13, 95.22),
            (109, 1, 99.08),
            (109, 5, 95.41),
            (43, 1, 97.67),
            (43, 2, 95.34),
            (10, 1, 90.00),
        ];
        for (m, gamma, pct) in cases {
            let got = circulant_reduction_percent(m, gamma);
            assert!((got - pct).abs() < 0.01, "m={m} γ={gamma}: {got}");
        }
    }

    #[test]
    fn checkpoint_rejects_unknown_and_missing_tensors() {
        let spec = ReconNetSpec::adversarial(0.01).unwrap();
        let net = ReconNet::build(&spec, FcInit::default_gaussian(10), &mut Prng::new(8)).unwrap();
        let mut c = Checkpoint::new(net.clone(), None).to_container();
        c.push_tensor("mystery", Tensor::zeros(&[1]));
        assert!(matches!(Checkpoint::from_container(&c), Err(Error::Corrupt(_))));
        let mut c = Checkpoint::new(net, None).to_container();
        c.tensors.remove(0);
        assert!(matches!(Checkpoint::from_container(&c), Err(Error::Corrupt(_))));
    }
}
