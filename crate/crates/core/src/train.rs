//! Training loops: float pretraining, quantized retraining with shadow
//! weights, cyclic-learning-rate fine-tuning and the orthogonality
//! (Lipschitz) regularizer.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate_accuracy, EvalSet};
use crate::model::{backward, collect_activations, forward, Model, Network};
use crate::nn::{adam_step, sgd_momentum_step, AdamState, softmax_cross_entropy, GradientSet, LayerGrad, OptimizerState};
use crate::quant::{optimal_step_size, percentile, ste_weight_backward, LayerQuantState, QuantSpec, QuantState, MIN_ALPHA};
use crate::rng::{LabRng, Stream};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Matrix};

/// Learning-rate factors of one cyclic schedule period.
pub const CLR_FACTORS: [f64; 8] = [
    1.0,
    0.316_227_766_016_837_94, // sqrt(0.1)
    0.1,
    0.031_622_776_601_683_8, // 0.1 * sqrt(0.1), as computed in f64
    0.01,
    0.031_622_776_601_683_8,
    0.1,
    0.316_227_766_016_837_94,
];

/// Discrete cyclic learning-rate schedule: the base rate is scaled by
/// eight factors that step down by `sqrt(10)` to `0.01` and back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClrSchedule {
    pub base_lr: f64,
    /// Iterations per cycle.
    pub cycle_period: usize,
    pub factors: [f64; 8],
}

impl ClrSchedule {
    pub fn new(base_lr: f64, cycle_period: usize) -> Result<Self> {
        let s = ClrSchedule {
            base_lr,
            cycle_period,
            factors: CLR_FACTORS,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config(format!("CLR base rate must be > 0, got {}", self.base_lr)));
        }
        if self.cycle_period == 0 {
            return Err(Error::config("CLR cycle period must be >= 1 iteration"));
        }
        Ok(())
    }

    pub fn lr(&self, iteration: usize) -> f64 {
        self.base_lr * clr_factor(iteration, self)
    }
}

/// Multiplier for `iteration`: segment `floor(8 * (it mod P) / P)`.
pub fn clr_factor(iteration: usize, schedule: &ClrSchedule) -> f64 {
    let p = schedule.cycle_period as u128;
    let pos = iteration as u128 % p;
    let segment = (8 * pos / p) as usize;
    schedule.factors[segment]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` once each milestone (a fraction of the total
    /// epochs) has passed.
    StepDecay { milestones: Vec<f64>, factor: f64 },
    Cyclic(ClrSchedule),
}

impl LrSchedule {
    /// Rate for a given epoch and run-relative iteration.
    pub fn lr(&self, base: f64, epoch: usize, total_epochs: usize, iteration: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { milestones, factor } => {
                let passed = milestones
                    .iter()
                    .filter(|&&m| epoch as f64 >= (m * total_epochs as f64).round())
                    .count();
                base * factor.powi(passed as i32)
            }
            LrSchedule::Cyclic(c) => c.lr(iteration),
        }
    }

    /// Rate in effect after the last epoch.
    pub fn final_lr(&self, base: f64, total_epochs: usize) -> f64 {
        self.lr(base, total_epochs.saturating_sub(1), total_epochs, 0)
    }
}

/// Update rule. Momentum is ignored by Adam.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    /// Weight of the orthogonality regularizer (0 disables it).
    pub lip_weight: f64,
    pub seed: u64,
    /// Score the eval set every this many epochs (and always after the
    /// last one); 0 scores only the final epoch.
    #[serde(default = "one")]
    pub eval_every: usize,
}

fn one() -> usize {
    1
}

impl TrainConfig {
    /// Float pretraining recipe: lr 0.1, x0.1 at 50% and 75% of training.
    pub fn pretrain(epochs: usize) -> Self {
        TrainConfig {
            optimizer: Optimizer::SgdMomentum,
            epochs,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            lr_schedule: LrSchedule::StepDecay {
                milestones: vec![0.5, 0.75],
                factor: 0.1,
            },
            lip_weight: 0.0,
            seed: 0,
            eval_every: 1,
        }
    }

    /// Quantized retraining recipe: lr 0.01, x0.1 at 50% and 80%.
    pub fn retrain(epochs: usize) -> Self {
        TrainConfig {
            epochs,
            lr: 0.01,
            lr_schedule: LrSchedule::StepDecay {
                milestones: vec![0.5, 0.8],
                factor: 0.1,
            },
            ..TrainConfig::pretrain(epochs)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_lip(mut self, weight: f64) -> Self {
        self.lip_weight = weight;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.lip_weight.is_finite() && self.lip_weight >= 0.0) {
            return Err(Error::config(format!("lip weight must be >= 0, got {}", self.lip_weight)));
        }
        if let LrSchedule::Cyclic(c) = &self.lr_schedule {
            c.validate()?;
        }
        Ok(())
    }

    pub fn evaluates_after(&self, epoch: usize) -> bool {
        epoch + 1 == self.epochs || (self.eval_every > 0 && (epoch + 1).is_multiple_of(self.eval_every))
    }

    pub fn batches_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::pretrain(200)
    }
}

/// One metric-log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Present on epochs where the eval set was scored.
    pub eval_accuracy: Option<f64>,
    pub lip_loss: f64,
}

/// Append-only training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    rows: Vec<MetricRow>,
}

impl MetricLog {
    pub const HEADER: &'static str = "epoch,iteration,lr,train_loss,eval_accuracy,lip_loss";

    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }

    pub fn extend(&mut self, other: MetricLog) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{:e},{:.10e},{},{:.10e}",
                r.epoch,
                r.iteration,
                r.lr,
                r.train_loss,
                r.eval_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default(),
                r.lip_loss
            )
            .expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::file(path, e))
    }
}

/// `1/2 * sum_l ||W_l W_lᵀ - I||_F^2` over all layers (the Gram matrix is
/// taken over each layer's output units) and its gradient `2 (W Wᵀ - I) W`.
///
/// The smaller of the two Gram matrices is formed: both share the nonzero
/// spectrum, so `||W Wᵀ - I||² = ||WᵀW - I||² + (out - in)`, and the gradient
/// `2 (W Wᵀ - I) W = 2 W (WᵀW - I)` is the same either way.
pub fn lipschitz_loss(net: &Network) -> Result<(f64, GradientSet)> {
    let mut total = 0.0;
    let mut grads = GradientSet::zeros_like(&net.layers);
    for (l, layer) in net.layers.iter().enumerate() {
        let w = &layer.weight;
        let (out, inp) = w.shape();
        let (loss, grad) = if out <= inp {
            let mut e = matmul_nt(w, w)?;
            for i in 0..out {
                e.set(i, i, e.get(i, i) - 1.0);
            }
            let g = matmul(&e, w)?;
            (0.5 * e.frobenius_sq(), g)
        } else {
            let mut e = matmul_tn(w, w)?;
            for i in 0..inp {
                e.set(i, i, e.get(i, i) - 1.0);
            }
            let g = matmul(w, &e)?;
            (0.5 * (e.frobenius_sq() + (out - inp) as f64), g)
        };
        total += loss;
        let mut g = grad;
        g.scale_in_place(2.0);
        grads.layers[l] = LayerGrad {
            weight: g,
            bias: vec![0.0; out],
        };
    }
    Ok((total, grads))
}

/// Cross-entropy of `model` on a batch plus `lip_weight * L_Lip`, with
/// gradients. Quantizers (if any, and if `quantized`) are differentiated
/// straight-through. Returns `(total_loss, lip_loss, grads)`.
pub fn loss_and_gradients(
    model: &Model,
    x: &Matrix,
    labels: &[u8],
    quantized: bool,
    lip_weight: f64,
) -> Result<(f64, f64, GradientSet)> {
    let view = model.view(quantized);
    let pass = forward(&model.network, x, view)?;
    let (ce, dlogits) = softmax_cross_entropy(&pass.logits, labels)?;
    let mut grads = ste_weight_backward(backward(&model.network, &pass, &dlogits, view)?);
    let mut lip = 0.0;
    if lip_weight > 0.0 {
        let (l, g) = lipschitz_loss(&model.network)?;
        grads.add_scaled(&g, lip_weight)?;
        lip = l;
    }
    Ok((ce + lip_weight * lip, lip, grads))
}

/// Recomputes every layer's weight step from the current shadow weights.
pub fn refresh_step_sizes(model: &mut Model) -> Result<()> {
    let Some(q) = model.quant.as_mut() else { return Ok(()) };
    let Some(bits) = q.spec.weight_bits else { return Ok(()) };
    for (state, layer) in q.layers.iter_mut().zip(&model.network.layers) {
        state.delta = optimal_step_size(layer.weight.data(), bits)?.delta;
    }
    Ok(())
}

/// Percentile used to initialise activation clip levels.
pub const ALPHA_INIT_PERCENTILE: f64 = 0.999;

/// Builds the initial quantization state for `spec`: fresh weight steps and
/// clip levels at the 99.9th percentile of the float activations over
/// `calibration`.
pub fn init_quant_state(network: &Network, spec: QuantSpec, calibration: &Matrix) -> Result<QuantState> {
    spec.validate()?;
    let n = network.layers.len();
    let mut state = QuantState {
        spec,
        layers: vec![
            LayerQuantState {
                delta: 1.0,
                alpha: 1.0,
                shortcut_alpha: None,
            };
            n
        ],
    };
    if let Some(bits) = spec.weight_bits {
        for (s, layer) in state.layers.iter_mut().zip(&network.layers) {
            s.delta = optimal_step_size(layer.weight.data(), bits)?.delta;
        }
    }
    if spec.activation_bits.is_some() {
        let acts = collect_activations(network, calibration, Some(&state))?;
        let clip = |v: &[f64]| {
            let p = percentile(v, ALPHA_INIT_PERCENTILE);
            if p > MIN_ALPHA {
                p
            } else {
                1.0
            }
        };
        for (l, (relu, stream)) in acts.iter().enumerate() {
            if l + 1 < n {
                state.layers[l].alpha = clip(relu);
            }
            if spec.quantize_shortcut {
                state.layers[l].shortcut_alpha = stream.as_deref().map(clip);
            }
        }
    }
    Ok(state)
}

/// Inputs and labels as a design matrix.
pub fn to_matrix(samples: &[Sample]) -> (Matrix, Vec<u8>) {
    let mut data = Vec::with_capacity(samples.len() * 2);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        data.push(s.point.x);
        data.push(s.point.y);
        labels.push(s.label);
    }
    (Matrix::from_vec(samples.len(), 2, data).expect("sized"), labels)
}

/// Cycles through shuffled mini-batches, reshuffling at each pass.
struct BatchStream<'a> {
    samples: &'a [Sample],
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: LabRng,
}

impl<'a> BatchStream<'a> {
    fn new(samples: &'a [Sample], batch: usize, seed: u64) -> Self {
        let mut rng = LabRng::new(seed, Stream::Shuffle);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        rng.shuffle(&mut order);
        BatchStream {
            samples,
            order,
            pos: 0,
            batch,
            rng,
        }
    }

    fn next_batch(&mut self) -> (Matrix, Vec<u8>) {
        if self.pos >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let mut data = Vec::with_capacity((end - self.pos) * 2);
        let mut labels = Vec::with_capacity(end - self.pos);
        for &i in &self.order[self.pos..end] {
            let s = &self.samples[i];
            data.push(s.point.x);
            data.push(s.point.y);
            labels.push(s.label);
        }
        self.pos = end;
        (Matrix::from_vec(labels.len(), 2, data).expect("sized"), labels)
    }
}

/// Optimizer bookkeeping over weights, biases and clip levels.
enum Stepper {
    Sgd(OptimizerState),
    Adam(AdamState),
}

impl Stepper {
    fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(match cfg.optimizer {
            Optimizer::SgdMomentum => Stepper::Sgd(OptimizerState::new(cfg.lr, cfg.momentum)?),
            Optimizer::Adam => Stepper::Adam(AdamState::new(cfg.lr)?),
        })
    }

    fn step(&mut self, model: &mut Model, grads: &GradientSet, lr: f64) -> Result<()> {
        let learn_alpha = model
            .quant
            .as_ref()
            .is_some_and(|q| q.spec.activation_bits.is_some());
        let mut alphas = Vec::new();
        let mut alpha_grads = Vec::new();
        if let (true, Some(q)) = (learn_alpha, &model.quant) {
            let last = q.layers.len() - 1;
            for (l, s) in q.layers.iter().enumerate() {
                if l < last {
                    alphas.push(s.alpha);
                    alpha_grads.push(grads.alpha[l]);
                }
                if let Some(a) = s.shortcut_alpha {
                    alphas.push(a);
                    alpha_grads.push(grads.shortcut_alpha[l]);
                }
            }
        }

        let mut params: Vec<&mut [f64]> = Vec::with_capacity(2 * model.network.layers.len() + 1);
        for layer in &mut model.network.layers {
            params.push(layer.weight.data_mut());
            params.push(&mut layer.bias);
        }
        let mut g: Vec<&[f64]> = Vec::with_capacity(params.len() + 1);
        for lg in &grads.layers {
            g.push(lg.weight.data());
            g.push(&lg.bias);
        }
        if learn_alpha {
            params.push(&mut alphas);
            g.push(&alpha_grads);
        }
        match self {
            Stepper::Sgd(st) => {
                st.lr = lr;
                sgd_momentum_step(&mut params, &g, st)?;
            }
            Stepper::Adam(st) => {
                st.lr = lr;
                adam_step(&mut params, &g, st)?;
            }
        }

        if let (true, Some(q)) = (learn_alpha, model.quant.as_mut()) {
            let last = q.layers.len() - 1;
            let mut it = alphas.into_iter();
            for (l, s) in q.layers.iter_mut().enumerate() {
                if l < last {
                    s.alpha = it.next().expect("alpha").max(MIN_ALPHA);
                }
                if let Some(a) = s.shortcut_alpha.as_mut() {
                    *a = it.next().expect("shortcut alpha").max(MIN_ALPHA);
                }
            }
        }
        Ok(())
    }
}

/// Shared mini-batch loop for pretraining and retraining.
fn train_epochs(model: &mut Model, data: &LabeledDataset, eval: &EvalSet, cfg: &TrainConfig) -> Result<MetricLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let quantized = model.quant.is_some();
    let mut log = MetricLog::default();
    let mut batches = BatchStream::new(&data.samples, cfg.batch_size, cfg.seed);
    let per_epoch = cfg.batches_per_epoch(data.len());
    let mut stepper = Stepper::new(cfg)?;
    let mut iteration = 0;

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut lip_last = 0.0;
        let mut lr = cfg.lr;
        for _ in 0..per_epoch {
            lr = cfg.lr_schedule.lr(cfg.lr, epoch, cfg.epochs, iteration);
            if quantized {
                refresh_step_sizes(model)?;
            }
            let (x, labels) = batches.next_batch();
            let (loss, lip, grads) = loss_and_gradients(model, &x, &labels, quantized, cfg.lip_weight)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, iteration, loss });
            }
            stepper.step(model, &grads, lr)?;
            loss_sum += loss;
            lip_last = lip;
            iteration += 1;
        }
        if quantized {
            refresh_step_sizes(model)?;
        }
        log.push(MetricRow {
            epoch,
            iteration,
            lr,
            train_loss: loss_sum / per_epoch as f64,
            eval_accuracy: if cfg.evaluates_after(epoch) {
                Some(evaluate_accuracy(model, eval, quantized)?)
            } else {
                None
            },
            lip_loss: lip_last,
        });
    }
    Ok(log)
}

/// Float training with the configured schedule.
pub fn pretrain_float(network: Network, data: &LabeledDataset, eval: &EvalSet, cfg: &TrainConfig) -> Result<(Model, MetricLog)> {
    let mut model = Model::float(network);
    let log = train_epochs(&mut model, data, eval, cfg)?;
    Ok((model, log))
}

/// Quantization-aware retraining of a pretrained float network.
///
/// Each step quantizes the shadow weights with freshly optimised per-layer
/// steps, runs forward and backward through the quantized model, and
/// applies the straight-through gradients to the shadow weights. Clip
/// levels are calibrated on the training set and then learned.
pub fn retrain_quantized(
    network: Network,
    data: &LabeledDataset,
    eval: &EvalSet,
    spec: QuantSpec,
    cfg: &TrainConfig,
) -> Result<(Model, MetricLog)> {
    let (calib, _) = to_matrix(&data.samples);
    let state = init_quant_state(&network, spec, &calib)?;
    let mut model = Model {
        network,
        quant: Some(state),
    };
    let log = train_epochs(&mut model, data, eval, cfg)?;
    Ok((model, log))
}

/// Continues quantized training under a cyclic schedule for `cycles` full
/// periods, returning the model with the best evaluation accuracy seen at
/// any cycle boundary (the starting model included).
pub fn finetune_clr(
    model: Model,
    data: &LabeledDataset,
    eval: &EvalSet,
    schedule: &ClrSchedule,
    cycles: usize,
    cfg: &TrainConfig,
) -> Result<(Model, MetricLog)> {
    schedule.validate()?;
    let cfg = TrainConfig {
        lr: schedule.base_lr,
        lr_schedule: LrSchedule::Cyclic(schedule.clone()),
        ..cfg.clone()
    };
    cfg.validate()?;
    let quantized = model.quant.is_some();
    let mut log = MetricLog::default();
    let start_acc = evaluate_accuracy(&model, eval, quantized)?;
    let mut best = (start_acc, model.clone());
    let mut current = model;
    let mut batches = BatchStream::new(&data.samples, cfg.batch_size, cfg.seed);
    let mut stepper = Stepper::new(&cfg)?;
    let mut iteration = 0;

    for cycle in 0..cycles {
        let mut loss_sum = 0.0;
        let mut lip_last = 0.0;
        for _ in 0..schedule.cycle_period {
            let lr = schedule.lr(iteration);
            if quantized {
                refresh_step_sizes(&mut current)?;
            }
            let (x, labels) = batches.next_batch();
            let (loss, lip, grads) = loss_and_gradients(&current, &x, &labels, quantized, cfg.lip_weight)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch: cycle,
                    iteration,
                    loss,
                });
            }
            stepper.step(&mut current, &grads, lr)?;
            loss_sum += loss;
            lip_last = lip;
            iteration += 1;
        }
        if quantized {
            refresh_step_sizes(&mut current)?;
        }
        let acc = evaluate_accuracy(&current, eval, quantized)?;
        log.push(MetricRow {
            epoch: cycle,
            iteration,
            lr: schedule.lr(iteration.saturating_sub(1)),
            train_loss: loss_sum / schedule.cycle_period as f64,
            eval_accuracy: Some(acc),
            lip_loss: lip_last,
        });
        if acc > best.0 {
            best = (acc, current.clone());
        }
    }
    Ok((best.1, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::model::{build_fcdnn, ModelConfig};
    use crate::nn::{compare_gradients, DenseLayer};
    use crate::quant::quantize_matrix;

    #[test]
    fn clr_examples() {
        let s = ClrSchedule::new(1.0, 80).unwrap();
        assert_eq!(clr_factor(0, &s), 1.0);
        assert_eq!(clr_factor(40, &s), 0.01);
        assert_eq!(clr_factor(80, &s), 1.0);
        let seq: Vec<f64> = (0..8).map(|k| clr_factor(k * 10, &s)).collect();
        assert_eq!(seq, CLR_FACTORS.to_vec());
        let sq = 0.1f64.sqrt();
        assert_eq!(CLR_FACTORS, [1.0, sq, 0.1, 0.1 * sq, 0.01, 0.1 * sq, 0.1, sq]);
        // log10 symmetric about the midpoint.
        for k in 1..8 {
            let a = CLR_FACTORS[k].log10();
            let b = CLR_FACTORS[8 - k].log10();
            assert!((a - b).abs() < 1e-15);
        }
        assert!(ClrSchedule::new(1.0, 0).is_err());
        assert!(ClrSchedule::new(0.0, 8).is_err());
    }

    #[test]
    fn step_decay_schedule() {
        let s = LrSchedule::StepDecay {
            milestones: vec![0.5, 0.75],
            factor: 0.1,
        };
        assert_eq!(s.lr(0.1, 0, 8, 0), 0.1);
        assert!((s.lr(0.1, 4, 8, 0) - 0.01).abs() < 1e-15);
        assert!((s.lr(0.1, 6, 8, 0) - 0.001).abs() < 1e-15);
        assert!((s.final_lr(0.01, 10) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn lipschitz_examples() {
        let id = DenseLayer::new(Matrix::identity(4), vec![0.0; 4]).unwrap();
        let net = Network::from_layers(
            ModelConfig {
                width: 4,
                depth: 2,
                residual: false,
                input_dim: 4,
                output_dim: 4,
                input_scale: 1.0,
            },
            vec![id.clone(), id],
        )
        .unwrap();
        let (l, g) = lipschitz_loss(&net).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.flat_params().iter().all(|&v| v == 0.0));

        let mut two = Matrix::identity(3);
        two.scale_in_place(2.0);
        let layer = DenseLayer::new(two, vec![0.0; 3]).unwrap();
        let cfg = ModelConfig {
            width: 3,
            depth: 2,
            residual: false,
            input_dim: 3,
            output_dim: 3,
            input_scale: 1.0,
        };
        let net = Network::from_layers(cfg, vec![layer.clone(), DenseLayer::new(Matrix::identity(3), vec![0.0; 3]).unwrap()]).unwrap();
        assert_eq!(lipschitz_loss(&net).unwrap().0, 13.5);
    }

    #[test]
    fn lipschitz_rectangular_matches_output_gram() {
        // Direct evaluation with the output-side Gram matrix.
        let net = build_fcdnn(ModelConfig::new(5, 3), 11).unwrap();
        let (l, _) = lipschitz_loss(&net).unwrap();
        let mut direct = 0.0;
        for layer in &net.layers {
            let mut e = matmul_nt(&layer.weight, &layer.weight).unwrap();
            for i in 0..e.rows() {
                e.set(i, i, e.get(i, i) - 1.0);
            }
            direct += 0.5 * e.frobenius_sq();
        }
        assert!((l - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn lipschitz_gradient_matches_differences() {
        let cfg = ModelConfig {
            width: 8,
            depth: 2,
            residual: false,
            input_dim: 8,
            output_dim: 8,
            input_scale: 1.0,
        };
        let net = build_fcdnn(cfg, 5).unwrap();
        let (_, g) = lipschitz_loss(&net).unwrap();
        let mut probe = net.clone();
        let f = |p: &[f64]| {
            probe.set_flat_params(p).unwrap();
            lipschitz_loss(&probe).unwrap().0
        };
        let report = compare_gradients(f, &net.flat_params(), &g.flat_params(), 1e-5, 1e-6).unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn tiny_data() -> (LabeledDataset, EvalSet) {
        let spec = DatasetSpec {
            ring_count: 1,
            points_per_semicircle: 16,
            subsamples_per_core: 3,
            ..Default::default()
        };
        let data = LabeledDataset::generate(&spec).unwrap();
        let eval = EvalSet::generate(&spec, 20.0).unwrap();
        (data, eval)
    }

    #[test]
    fn zero_epochs_leave_the_network_alone() {
        let (data, eval) = tiny_data();
        let net = build_fcdnn(ModelConfig::new(8, 3), 0).unwrap();
        let (model, log) = pretrain_float(net.clone(), &data, &eval, &TrainConfig::pretrain(0)).unwrap();
        assert_eq!(model.network, net);
        assert!(log.rows().is_empty());
    }

    #[test]
    fn pretraining_is_reproducible_and_learns() {
        let (data, eval) = tiny_data();
        let net = build_fcdnn(ModelConfig::new(16, 3), 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            ..TrainConfig::pretrain(30)
        };
        let (a, la) = pretrain_float(net.clone(), &data, &eval, &cfg).unwrap();
        let (b, lb) = pretrain_float(net, &data, &eval, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.to_csv(), lb.to_csv());
        let first = la.rows()[0].train_loss;
        let last = la.last().unwrap().train_loss;
        assert!(last < first, "{first} -> {last}");
        assert!(la.to_csv().starts_with(MetricLog::HEADER));
    }

    #[test]
    fn retraining_keeps_shadow_weights_and_a_consistent_view() {
        let (data, eval) = tiny_data();
        let net = build_fcdnn(ModelConfig::new(16, 3), 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            ..TrainConfig::retrain(2)
        };
        let (model, log) = retrain_quantized(net.clone(), &data, &eval, QuantSpec::both(2, 2), &cfg).unwrap();
        assert_eq!(log.rows().len(), 2);
        let q = model.quant.as_ref().unwrap();
        for (layer, s) in model.network.layers.iter().zip(&q.layers) {
            let fresh = optimal_step_size(layer.weight.data(), 2).unwrap().delta;
            assert_eq!(s.delta, fresh);
            // Shadow weights are not rounded in place.
            let view = quantize_matrix(&layer.weight, s.delta, 2).unwrap();
            assert_ne!(view, layer.weight);
            assert!(s.alpha > 0.0);
        }
        assert_ne!(model.network, net);
    }

    #[test]
    fn one_step_moves_shadow_weights_under_a_frozen_view() {
        // A tiny gradient step changes the shadow weights even though the
        // quantized view of them does not move.
        let (data, _) = tiny_data();
        let net = build_fcdnn(ModelConfig::new(16, 3), 3).unwrap();
        let (x, labels) = to_matrix(&data.samples[..32]);
        let state = init_quant_state(&net, QuantSpec::weights(2), &x).unwrap();
        let mut model = Model { network: net, quant: Some(state) };
        let before_view = model.effective_weights().unwrap();
        let before = model.network.clone();
        let (_, _, grads) = loss_and_gradients(&model, &x, &labels, true, 0.0).unwrap();
        let cfg = TrainConfig { lr: 1e-6, momentum: 0.0, ..TrainConfig::retrain(1) };
        Stepper::new(&cfg).unwrap().step(&mut model, &grads, 1e-6).unwrap();
        assert_ne!(model.network, before);
        assert_eq!(model.effective_weights().unwrap(), before_view);
    }

    #[test]
    fn finetune_with_zero_cycles_is_identity() {
        let (data, eval) = tiny_data();
        let net = build_fcdnn(ModelConfig::new(8, 3), 4).unwrap();
        let model = Model::float(net);
        let sched = ClrSchedule::new(1e-3, 8).unwrap();
        let (out, log) = finetune_clr(model.clone(), &data, &eval, &sched, 0, &TrainConfig::retrain(1)).unwrap();
        assert_eq!(out, model);
        assert!(log.rows().is_empty());
    }

    #[test]
    fn diverging_run_aborts() {
        let (data, eval) = tiny_data();
        let mut net = build_fcdnn(ModelConfig::new(16, 4), 6).unwrap();
        for layer in &mut net.layers {
            layer.weight.scale_in_place(1e120);
        }
        let cfg = TrainConfig::pretrain(5);
        assert!(matches!(pretrain_float(net, &data, &eval, &cfg), Err(Error::Diverged { .. })));
    }
}
