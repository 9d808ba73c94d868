//! Fully connected classifiers `2 -> D -> ... -> D -> 2`, optionally with
//! scaled residual connections, evaluated in float or quantized form.

use serde::{Deserialize, Serialize};

use crate::data::Point2;
use crate::error::{Error, Result};
use crate::nn::{affine, affine_backward, relu, relu_backward, DenseLayer, GradientSet, LayerGrad};
use crate::quant::{act_quantize_backward, quantize_matrix, ActQuantizer, QuantState};
use crate::rng::{LabRng, Stream};
use crate::tensor::Matrix;

/// Architecture of an FCDNN, written `width-depth` (e.g. `128-4`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    /// Number of weight layers, output layer included.
    pub depth: usize,
    #[serde(default)]
    pub residual: bool,
    #[serde(default = "two")]
    pub input_dim: usize,
    #[serde(default = "two")]
    pub output_dim: usize,
    /// Fixed gain applied to raw inputs before the first layer.
    #[serde(default = "one")]
    pub input_scale: f64,
}

fn two() -> usize {
    2
}

fn one() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn new(width: usize, depth: usize) -> Self {
        ModelConfig {
            width,
            depth,
            residual: false,
            input_dim: 2,
            output_dim: 2,
            input_scale: 1.0,
        }
    }

    pub fn residual(mut self, on: bool) -> Self {
        self.residual = on;
        self
    }

    pub fn with_input_scale(mut self, scale: f64) -> Self {
        self.input_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("width must be >= 1"));
        }
        if self.depth < 2 {
            return Err(Error::config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("input and output dimensions must be >= 1"));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::config(format!("input scale must be > 0, got {}", self.input_scale)));
        }
        Ok(())
    }

    /// Layer `(in, out)` dimensions in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let i = if l == 0 { self.input_dim } else { self.width };
                let o = if l + 1 == self.depth { self.output_dim } else { self.width };
                (i, o)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// `width-depth`, with an `r` suffix for residual models.
    pub fn name(&self) -> String {
        format!("{}-{}{}", self.width, self.depth, if self.residual { "r" } else { "" })
    }

    /// Whether hidden layer `l` adds its input back (scaled by one half).
    /// Residual links start at the second hidden layer, where input and
    /// output widths first agree.
    pub fn is_residual_layer(&self, l: usize) -> bool {
        self.residual && l >= 1 && l + 1 < self.depth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub layers: Vec<DenseLayer>,
}

impl Network {
    pub fn from_layers(config: ModelConfig, layers: Vec<DenseLayer>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::dim(format!("{} layers for depth {}", layers.len(), config.depth)));
        }
        for (l, ((i, o), layer)) in dims.iter().zip(&layers).enumerate() {
            if layer.in_dim() != *i || layer.out_dim() != *o || layer.bias.len() != *o {
                return Err(Error::dim(format!(
                    "layer {l} is {}x{}, expected {o}x{i}",
                    layer.out_dim(),
                    layer.in_dim()
                )));
            }
        }
        Ok(Network { config, layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// All weights and biases, flattened layer by layer.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let w = l.weight.data_mut();
            w.copy_from_slice(&flat[at..at + w.len()]);
            at += w.len();
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// A network together with its (optional) quantization state. The network
/// always holds the floating-point shadow weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub network: Network,
    pub quant: Option<QuantState>,
}

impl Model {
    pub fn float(network: Network) -> Self {
        Model { network, quant: None }
    }

    /// Quantization state to use for a pass: `None` selects the float view.
    pub fn view(&self, quantized: bool) -> Option<&QuantState> {
        if quantized {
            self.quant.as_ref()
        } else {
            None
        }
    }

    /// Weights as seen by quantized inference (shadow weights where weight
    /// quantization is off).
    pub fn effective_weights(&self) -> Result<Vec<Matrix>> {
        let bits = self.quant.as_ref().and_then(|q| q.spec.weight_bits);
        self.network
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| match (bits, &self.quant) {
                (Some(b), Some(q)) => quantize_matrix(&layer.weight, q.layers[l].delta, b),
                _ => Ok(layer.weight.clone()),
            })
            .collect()
    }
}

/// Weight initialisation scheme.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Normal weights with std `sqrt(2 / in_dim)`, zero biases.
    #[default]
    HeNormal,
    /// Weights and biases uniform on `±1 / sqrt(in_dim)`. The nonzero
    /// biases spread first-layer ReLU boundaries away from the origin.
    UniformFanIn,
}

/// He-normal network drawn from the seed's init stream.
pub fn build_fcdnn(config: ModelConfig, seed: u64) -> Result<Network> {
    build_fcdnn_with(config, seed, Init::HeNormal)
}

pub fn build_fcdnn_with(config: ModelConfig, seed: u64, init: Init) -> Result<Network> {
    config.validate()?;
    let mut rng = LabRng::new(seed, Stream::Init);
    let layers = config
        .layer_dims()
        .into_iter()
        .map(|(i, o)| {
            let (data, bias) = match init {
                Init::HeNormal => {
                    let std = (2.0 / i as f64).sqrt();
                    ((0..i * o).map(|_| std * rng.normal()).collect(), vec![0.0; o])
                }
                Init::UniformFanIn => {
                    let b = 1.0 / (i as f64).sqrt();
                    let w = (0..i * o).map(|_| rng.uniform_range(-b, b)).collect();
                    (w, (0..o).map(|_| rng.uniform_range(-b, b)).collect())
                }
            };
            DenseLayer::new(Matrix::from_vec(o, i, data).expect("sized"), bias).expect("sized")
        })
        .collect();
    Network::from_layers(config, layers)
}

/// Re-centres each first-layer unit so its boundary passes through a
/// randomly chosen input point: `b_j = -w_j . (s * x_p)`, with `s` the
/// model's input gain.
pub fn anchor_first_layer(net: &mut Network, points: &[Point2], seed: u64) -> Result<()> {
    if points.is_empty() {
        return Err(Error::config("cannot anchor to an empty point set"));
    }
    if net.config.input_dim != 2 {
        return Err(Error::dim("anchoring expects two-dimensional inputs"));
    }
    let gain = net.config.input_scale;
    let mut rng = LabRng::new(seed, Stream::Misc);
    let layer = &mut net.layers[0];
    for j in 0..layer.out_dim() {
        let p = points[rng.below(points.len())];
        let w = layer.weight.row(j);
        layer.bias[j] = -gain * (w[0] * p.x + w[1] * p.y);
    }
    Ok(())
}

/// Everything one layer's backward step needs.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Input actually consumed by the affine map.
    pub input: Matrix,
    /// Residual-sum input before it was quantized, when it was.
    pub raw_input: Option<Matrix>,
    /// Weights used in the pass (quantized view or shadow copy).
    pub weight: Matrix,
    pub pre_activation: Matrix,
    /// ReLU output before activation quantization (hidden layers only).
    pub relu_out: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Matrix,
    pub traces: Vec<LayerTrace>,
}

/// Forward pass. With `quant`, weights are replaced by their quantized view
/// under each layer's stored step size and hidden activations go through
/// the clipped activation quantizer.
pub fn forward(net: &Network, batch: &Matrix, quant: Option<&QuantState>) -> Result<ForwardPass> {
    run_forward(net, batch, quant, true)
}

/// [`forward`] restricted to residual networks.
pub fn forward_residual(net: &Network, batch: &Matrix, quant: Option<&QuantState>) -> Result<ForwardPass> {
    if !net.config.residual {
        return Err(Error::config("forward_residual called on a plain network"));
    }
    for l in 1..net.layers.len() {
        if net.config.is_residual_layer(l) && net.layers[l].in_dim() != net.layers[l].out_dim() {
            return Err(Error::config(format!(
                "residual layer {l} maps {} -> {}",
                net.layers[l].in_dim(),
                net.layers[l].out_dim()
            )));
        }
    }
    forward(net, batch, quant)
}

/// Logits only, evaluated in row chunks without keeping traces.
pub fn predict_logits(net: &Network, batch: &Matrix, quant: Option<&QuantState>) -> Result<Matrix> {
    const CHUNK: usize = 4096;
    if batch.rows() <= CHUNK {
        return Ok(run_forward(net, batch, quant, false)?.logits);
    }
    let cols = batch.cols();
    let mut out = Vec::with_capacity(batch.rows() * net.config.output_dim);
    for chunk in batch.data().chunks(CHUNK * cols) {
        let m = Matrix::from_vec(chunk.len() / cols, cols, chunk.to_vec())?;
        out.extend(run_forward(net, &m, quant, false)?.logits.into_data());
    }
    Matrix::from_vec(batch.rows(), net.config.output_dim, out)
}

fn check_quant(net: &Network, quant: Option<&QuantState>) -> Result<()> {
    if let Some(q) = quant {
        if q.layers.len() != net.layers.len() {
            return Err(Error::dim(format!(
                "quant state covers {} layers, network has {}",
                q.layers.len(),
                net.layers.len()
            )));
        }
    }
    Ok(())
}

fn run_forward(net: &Network, batch: &Matrix, quant: Option<&QuantState>, keep: bool) -> Result<ForwardPass> {
    check_quant(net, quant)?;
    if batch.cols() != net.config.input_dim {
        return Err(Error::dim(format!(
            "batch has {} columns, model input is {}",
            batch.cols(),
            net.config.input_dim
        )));
    }
    let spec = quant.map(|q| q.spec).unwrap_or_default();
    let last = net.layers.len() - 1;
    let mut traces = Vec::with_capacity(if keep { net.layers.len() } else { 0 });
    let gain = net.config.input_scale;
    let mut stream = if gain == 1.0 { batch.clone() } else { batch.map(|v| gain * v) };
    let mut stream_is_sum = false;

    for (l, layer) in net.layers.iter().enumerate() {
        let qs = quant.map(|q| q.layers[l]);

        let (input, raw_input) = match (stream_is_sum && spec.quantize_shortcut, spec.activation_bits, qs) {
            (true, Some(bits), Some(s)) => {
                let alpha = s.shortcut_alpha.ok_or_else(|| {
                    Error::config(format!("layer {l} consumes a quantized residual sum but has no shortcut clip level"))
                })?;
                let q = ActQuantizer::new(alpha, bits)?;
                (stream.map(|v| q.quantize(v)), Some(stream))
            }
            _ => (stream, None),
        };

        let weight = match (spec.weight_bits, qs) {
            (Some(bits), Some(s)) => quantize_matrix(&layer.weight, s.delta, bits)?,
            _ => layer.weight.clone(),
        };
        let z = affine(&input, &weight, &layer.bias)?;

        if l == last {
            if keep {
                traces.push(LayerTrace {
                    input,
                    raw_input,
                    weight,
                    pre_activation: z.clone(),
                    relu_out: None,
                });
            }
            return Ok(ForwardPass { logits: z, traces });
        }

        let a = relu(&z);
        let mut out = match (spec.activation_bits, qs) {
            (Some(bits), Some(s)) => {
                let q = ActQuantizer::new(s.alpha, bits)?;
                a.map(|v| q.quantize(v))
            }
            _ => a.clone(),
        };
        let residual = net.config.is_residual_layer(l);
        if residual {
            out.data_mut()
                .iter_mut()
                .zip(input.data())
                .for_each(|(o, s)| *o = 0.5 * (*o + s));
        }
        if keep {
            traces.push(LayerTrace {
                input,
                raw_input,
                weight,
                pre_activation: z,
                relu_out: Some(a),
            });
        }
        stream = out;
        stream_is_sum = residual;
    }
    unreachable!("a validated network has at least two layers")
}

/// Reverse-mode gradients of a loss whose logit gradient is `dlogits`.
///
/// Quantizers are differentiated straight-through: weight gradients are
/// taken at the weights used in the pass, activation gradients pass inside
/// the clip range, and clip levels receive the saturated upstream.
pub fn backward(net: &Network, pass: &ForwardPass, dlogits: &Matrix, quant: Option<&QuantState>) -> Result<GradientSet> {
    check_quant(net, quant)?;
    if pass.traces.len() != net.layers.len() {
        return Err(Error::Usage(format!(
            "forward cache holds {} layers, network has {}; run forward() with caching first",
            pass.traces.len(),
            net.layers.len()
        )));
    }
    dlogits.same_shape(&pass.logits)?;
    let spec = quant.map(|q| q.spec).unwrap_or_default();
    let mut grads = GradientSet::zeros_like(&net.layers);
    let last = net.layers.len() - 1;
    let mut upstream = dlogits.clone();

    for l in (0..=last).rev() {
        let trace = &pass.traces[l];
        let residual = net.config.is_residual_layer(l);
        let mut skip = None;

        let dz = if l == last {
            upstream
        } else {
            if residual {
                upstream.scale_in_place(0.5);
                skip = Some(upstream.clone());
            }
            let a = trace.relu_out.as_ref().expect("hidden layer trace");
            let da = match (spec.activation_bits, quant) {
                (Some(_), Some(q)) => {
                    let (dh, dalpha) = act_quantize_backward(&upstream, a, q.layers[l].alpha)?;
                    grads.alpha[l] += dalpha;
                    dh
                }
                _ => upstream,
            };
            relu_backward(&da, &trace.pre_activation)?
        };

        let (dw, db, mut dx) = affine_backward(&dz, &trace.input, &trace.weight)?;
        grads.layers[l] = LayerGrad { weight: dw, bias: db };
        if l == 0 {
            break;
        }
        if let Some(s) = skip {
            dx.add_scaled(&s, 1.0)?;
        }
        upstream = match (&trace.raw_input, quant) {
            (Some(raw), Some(q)) => {
                let alpha = q.layers[l].shortcut_alpha.expect("checked in forward");
                let (dh, dalpha) = act_quantize_backward(&dx, raw, alpha)?;
                grads.shortcut_alpha[l] += dalpha;
                dh
            }
            _ => dx,
        };
    }
    Ok(grads)
}

/// Collects hidden activations over `batch` to calibrate clip levels.
/// Returns, per layer, the ReLU outputs and (for residual-sum inputs) the
/// stream feeding the layer. Weights are quantized when `quant` asks for
/// it; activations stay in floating point.
pub fn collect_activations(net: &Network, batch: &Matrix, quant: Option<&QuantState>) -> Result<Vec<(Vec<f64>, Option<Vec<f64>>)>> {
    let float_acts = quant.map(|q| QuantState {
        spec: crate::quant::QuantSpec {
            activation_bits: None,
            ..q.spec
        },
        layers: q.layers.clone(),
    });
    let pass = run_forward(net, batch, float_acts.as_ref(), true)?;
    Ok(pass
        .traces
        .iter()
        .enumerate()
        .map(|(l, t)| {
            let relu = t.relu_out.as_ref().map(|m| m.data().to_vec()).unwrap_or_default();
            let stream = (l > 0 && net.config.is_residual_layer(l - 1)).then(|| t.input.data().to_vec());
            (relu, stream)
        })
        .collect())
}
