//! Recipes and the model grids behind each reproduced figure.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Window};
use crate::error::{Error, Result};
use crate::eval::{evaluate_accuracy, EvalSet, DEFAULT_EVAL_DENSITY};
use crate::model::{anchor_first_layer, build_fcdnn_with, Init, Model, ModelConfig};
use crate::quant::QuantSpec;
use crate::train::{finetune_clr, pretrain_float, retrain_quantized, ClrSchedule, LrSchedule, MetricLog, Optimizer, TrainConfig};

/// Everything needed to turn an architecture and a seed into trained
/// float, quantized and fine-tuned models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub init: Init,
    /// Scale raw inputs to unit RMS over the training set.
    pub standardize_inputs: bool,
    /// Place each first-layer boundary through a random training point.
    pub anchor_first_layer: bool,
    pub pretrain: TrainConfig,
    pub retrain: TrainConfig,
    /// Fine-tuning cycle length in epochs.
    pub clr_cycle_epochs: usize,
    pub clr_cycles: usize,
    /// Fine-tuning base rate as a multiple of the last retraining rate.
    pub clr_base_multiplier: f64,
    pub eval_density: f64,
}

impl Default for Recipe {
    fn default() -> Self {
        Recipe::desk()
    }
}

impl Recipe {
    /// Desk-scale schedule used by default: Adam on unit-RMS inputs with
    /// fan-in uniform init and data-anchored first-layer biases, 200
    /// pretraining and 60 retraining epochs.
    pub fn desk() -> Self {
        Recipe {
            init: Init::UniformFanIn,
            standardize_inputs: true,
            anchor_first_layer: true,
            pretrain: TrainConfig {
                optimizer: Optimizer::Adam,
                lr: 1e-3,
                eval_every: 0,
                lr_schedule: LrSchedule::StepDecay {
                    milestones: vec![0.8, 0.9],
                    factor: 0.1,
                },
                ..TrainConfig::pretrain(200)
            },
            retrain: TrainConfig {
                optimizer: Optimizer::Adam,
                lr: 1e-3,
                eval_every: 0,
                ..TrainConfig::retrain(60)
            },
            ..Recipe::long()
        }
    }

    /// Long schedule: SGD with momentum, 200 pretraining and 100
    /// retraining epochs, He-normal init on raw inputs.
    pub fn long() -> Self {
        Recipe {
            init: Init::HeNormal,
            standardize_inputs: false,
            anchor_first_layer: false,
            pretrain: TrainConfig::pretrain(200),
            retrain: TrainConfig::retrain(100),
            clr_cycle_epochs: 8,
            clr_cycles: 5,
            clr_base_multiplier: 10.0,
            eval_density: DEFAULT_EVAL_DENSITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.retrain.validate()?;
        if self.clr_cycle_epochs == 0 {
            return Err(Error::config("CLR cycle must span at least one epoch"));
        }
        if !(self.clr_base_multiplier.is_finite() && self.clr_base_multiplier > 0.0) {
            return Err(Error::config("CLR base multiplier must be > 0"));
        }
        if !(self.eval_density.is_finite() && self.eval_density > 0.0) {
            return Err(Error::config("eval density must be > 0"));
        }
        Ok(())
    }

    /// Input gain for `data` under this recipe.
    pub fn input_scale(&self, data: &LabeledDataset) -> f64 {
        if self.standardize_inputs {
            unit_rms_scale(data)
        } else {
            1.0
        }
    }

    /// Base rate and period (in iterations) of the fine-tuning schedule.
    pub fn clr_schedule(&self, samples: usize) -> Result<ClrSchedule> {
        let last = self.retrain.lr_schedule.final_lr(self.retrain.lr, self.retrain.epochs);
        let period = self.clr_cycle_epochs * self.retrain.batches_per_epoch(samples);
        ClrSchedule::new(self.clr_base_multiplier * last, period)
    }
}

/// `1 / rms` of all input coordinates; 1 for an all-zero set.
pub fn unit_rms_scale(data: &LabeledDataset) -> f64 {
    let n = 2 * data.samples.len();
    let ss: f64 = data.samples.iter().map(|s| s.point.x * s.point.x + s.point.y * s.point.y).sum();
    if n == 0 || ss == 0.0 {
        1.0
    } else {
        (n as f64 / ss).sqrt()
    }
}

/// Builds and trains a float model for `arch` from `seed`.
pub fn pretrain_model(arch: ModelConfig, seed: u64, recipe: &Recipe, data: &LabeledDataset, eval: &EvalSet) -> Result<(Model, MetricLog)> {
    let arch = arch.with_input_scale(recipe.input_scale(data));
    let mut net = build_fcdnn_with(arch, seed, recipe.init)?;
    if recipe.anchor_first_layer {
        let points: Vec<_> = data.samples.iter().map(|s| s.point).collect();
        anchor_first_layer(&mut net, &points, seed)?;
    }
    pretrain_float(net, data, eval, &recipe.pretrain.clone().with_seed(seed))
}

/// Quantized retraining of a float model, optionally with the
/// orthogonality regularizer.
pub fn retrain_model(
    float: &Model,
    spec: QuantSpec,
    lip_weight: f64,
    seed: u64,
    recipe: &Recipe,
    data: &LabeledDataset,
    eval: &EvalSet,
) -> Result<(Model, MetricLog)> {
    let cfg = recipe.retrain.clone().with_seed(seed).with_lip(lip_weight);
    retrain_quantized(float.network.clone(), data, eval, spec, &cfg)
}

/// CLR fine-tuning with the recipe's cycle settings.
pub fn finetune_model(model: Model, lip_weight: f64, seed: u64, recipe: &Recipe, data: &LabeledDataset, eval: &EvalSet) -> Result<(Model, MetricLog)> {
    let schedule = recipe.clr_schedule(data.len())?;
    let cfg = recipe.retrain.clone().with_seed(seed.wrapping_add(1)).with_lip(lip_weight);
    finetune_clr(model, data, eval, &schedule, recipe.clr_cycles, &cfg)
}

/// One panel of a figure: an architecture and an optional quantization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub arch: ModelConfig,
    pub quant: Option<QuantSpec>,
}

impl Cell {
    /// `128-4`, `128-4_W2AF`, ...
    pub fn name(&self) -> String {
        match self.quant {
            None => self.arch.name(),
            Some(q) => format!("{}_{}", self.arch.name(), q.tag()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Figure {
    /// Float capacity: 128-3, 128-4, 256-3 plus the dataset itself.
    Fig1,
    /// {128-4, 256-4, 128-8} x {W2, A2, W2A2}.
    Fig2,
    /// Residual {128-4, 128-8} x {W2, A2, W2A2}.
    Fig3,
}

impl Figure {
    pub fn cells(&self) -> Vec<Cell> {
        let quants = [QuantSpec::weights(2), QuantSpec::activations(2), QuantSpec::both(2, 2)];
        let grid = |archs: &[ModelConfig]| {
            archs
                .iter()
                .flat_map(|&arch| quants.iter().map(move |&q| Cell { arch, quant: Some(q) }))
                .collect()
        };
        match self {
            Figure::Fig1 => [(128, 3), (128, 4), (256, 3)]
                .iter()
                .map(|&(w, d)| Cell {
                    arch: ModelConfig::new(w, d),
                    quant: None,
                })
                .collect(),
            Figure::Fig2 => grid(&[ModelConfig::new(128, 4), ModelConfig::new(256, 4), ModelConfig::new(128, 8)]),
            Figure::Fig3 => grid(&[
                ModelConfig::new(128, 4).residual(true),
                ModelConfig::new(128, 8).residual(true),
            ]),
        }
    }

    /// Float architectures the figure's cells start from, in order.
    pub fn architectures(&self) -> Vec<ModelConfig> {
        let mut out: Vec<ModelConfig> = Vec::new();
        for c in self.cells() {
            if !out.contains(&c.arch) {
                out.push(c.arch);
            }
        }
        out
    }

    /// Map window: the full plane for the float figure, the bottom-right
    /// quarter for the quantized ones.
    pub fn window(&self) -> Window {
        match self {
            Figure::Fig1 => Window::full(),
            _ => Window::quarter(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Figure::Fig1 => "fig1",
            Figure::Fig2 => "fig2",
            Figure::Fig3 => "fig3",
        }
    }
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig1" => Ok(Figure::Fig1),
            "fig2" => Ok(Figure::Fig2),
            "fig3" => Ok(Figure::Fig3),
            _ => Err(Error::config(format!("unknown figure {s:?}; expected fig1, fig2 or fig3"))),
        }
    }
}

/// Trained result of one cell.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub cell: Cell,
    pub seed: u64,
    pub model: Model,
    pub log: MetricLog,
    pub accuracy: f64,
}

/// Trains one cell from an already pretrained float model of its
/// architecture.
pub fn run_cell(cell: Cell, float: &Model, seed: u64, recipe: &Recipe, data: &LabeledDataset, eval: &EvalSet) -> Result<CellOutcome> {
    let (model, log) = match cell.quant {
        None => (float.clone(), MetricLog::default()),
        Some(q) => retrain_model(float, q, 0.0, seed, recipe, data, eval)?,
    };
    let accuracy = evaluate_accuracy(&model, eval, cell.quant.is_some())?;
    Ok(CellOutcome {
        cell,
        seed,
        model,
        log,
        accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;

    #[test]
    fn figure_grids() {
        assert_eq!(Figure::Fig1.cells().len(), 3);
        let f2 = Figure::Fig2.cells();
        assert_eq!(f2.len(), 9);
        assert_eq!(Figure::Fig2.architectures().len(), 3);
        assert!(Figure::Fig3.cells().iter().all(|c| c.arch.residual));
        assert_eq!(f2[0].name(), "128-4_W2AF");
        assert_eq!(Figure::Fig3.cells()[5].name(), "128-8r_W2A2");
        assert_eq!("fig2".parse::<Figure>().unwrap(), Figure::Fig2);
        assert!("fig4".parse::<Figure>().is_err());
    }

    #[test]
    fn clr_schedule_follows_the_last_retraining_rate() {
        let recipe = Recipe::long();
        let s = recipe.clr_schedule(20_000).unwrap();
        // 0.01 decayed twice by 10x, times 10.
        assert!((s.base_lr - 1e-3).abs() < 1e-15);
        assert_eq!(s.cycle_period, 8 * 157);
    }

    #[test]
    fn unit_rms() {
        let data = LabeledDataset::generate(&DatasetSpec::default()).unwrap();
        let s = unit_rms_scale(&data);
        let ms: f64 = data
            .samples
            .iter()
            .map(|p| (s * p.point.x).powi(2) + (s * p.point.y).powi(2))
            .sum::<f64>()
            / (2 * data.len()) as f64;
        assert!((ms - 1.0).abs() < 1e-12);
    }
}
