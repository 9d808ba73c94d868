//! JSON experiment configuration. Every field is optional; command-line
//! flags override file values, which override built-in defaults.

use std::fs;
use std::path::Path;

use qdnn_core::data::DatasetSpec;
use qdnn_core::model::Init;
use qdnn_core::train::{LrSchedule, Optimizer, TrainConfig};
use qdnn_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub quant: QuantSection,
    #[serde(default)]
    pub pretrain: TrainSection,
    #[serde(default)]
    pub retrain: TrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub map: MapSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub r: Option<f64>,
    pub rings: Option<usize>,
    pub points: Option<usize>,
    pub subsamples: Option<usize>,
    pub sigma: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub width: Option<usize>,
    pub depth: Option<usize>,
    pub residual: Option<bool>,
    pub init: Option<Init>,
    pub standardize_inputs: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSection {
    pub wbits: Option<u32>,
    pub abits: Option<u32>,
    pub quantize_shortcut: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: Option<Optimizer>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub milestones: Option<Vec<f64>>,
    pub decay: Option<f64>,
    pub lip: Option<f64>,
    pub seed: Option<u64>,
    pub eval_every: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub clr_cycle: Option<String>,
    pub cycles: Option<usize>,
    pub base_lr: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSection {
    pub window: Option<[f64; 4]>,
    pub res: Option<usize>,
    pub shading: Option<qdnn_core::eval::Shading>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub density: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::File {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// First present value wins.
pub fn pick<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

impl DatasetSection {
    pub fn overlay(&self, flags: &DatasetSection) -> Result<DatasetSpec> {
        let d = DatasetSpec::default();
        let r = pick(flags.r, self.r, d.r);
        let spec = DatasetSpec {
            r,
            ring_count: pick(flags.rings, self.rings, d.ring_count),
            points_per_semicircle: pick(flags.points, self.points, d.points_per_semicircle),
            subsamples_per_core: pick(flags.subsamples, self.subsamples, d.subsamples_per_core),
            noise_sigma: pick(flags.sigma, self.sigma, r / 3.0),
            seed: pick(flags.seed, self.seed, d.seed),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl TrainSection {
    /// Overlays flags and this section onto `base`.
    pub fn overlay(&self, flags: &TrainSection, base: TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base;
        cfg.optimizer = pick(flags.optimizer, self.optimizer, cfg.optimizer);
        cfg.epochs = pick(flags.epochs, self.epochs, cfg.epochs);
        cfg.batch_size = pick(flags.batch_size, self.batch_size, cfg.batch_size);
        cfg.lr = pick(flags.lr, self.lr, cfg.lr);
        cfg.momentum = pick(flags.momentum, self.momentum, cfg.momentum);
        cfg.lip_weight = pick(flags.lip, self.lip, cfg.lip_weight);
        cfg.seed = pick(flags.seed, self.seed, cfg.seed);
        cfg.eval_every = pick(flags.eval_every, self.eval_every, cfg.eval_every);
        let milestones = flags.milestones.clone().or_else(|| self.milestones.clone());
        let decay = flags.decay.or(self.decay);
        if milestones.is_some() || decay.is_some() {
            let (m0, f0) = match &cfg.lr_schedule {
                LrSchedule::StepDecay { milestones, factor } => (milestones.clone(), *factor),
                _ => (Vec::new(), 0.1),
            };
            cfg.lr_schedule = LrSchedule::StepDecay {
                milestones: milestones.unwrap_or(m0),
                factor: decay.unwrap_or(f0),
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `8-epochs`, `8-epoch` or a bare iteration count into
/// iterations, given the number of iterations per epoch.
pub fn parse_cycle(text: &str, iters_per_epoch: usize) -> Result<usize> {
    let t = text.trim();
    let n = if let Some(e) = t.strip_suffix("-epochs").or_else(|| t.strip_suffix("-epoch")) {
        let e: usize = e
            .parse()
            .map_err(|_| Error::Config(format!("bad CLR cycle {text:?}")))?;
        e * iters_per_epoch
    } else {
        let t = t.strip_suffix("-iterations").unwrap_or(t);
        t.parse()
            .map_err(|_| Error::Config(format!("bad CLR cycle {text:?}; use N-epochs or an iteration count")))?
    };
    if n == 0 {
        return Err(Error::Config("CLR cycle must be at least one iteration".into()));
    }
    Ok(n)
}
