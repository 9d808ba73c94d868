//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use qdnn_core::checkpoint::{from_json, to_json};
use qdnn_core::data::{DatasetSpec, LabeledDataset, Window};
use qdnn_core::eval::{
    encode_ppm, encode_samples_ppm, evaluate_accuracy, predict_map, report_csv, EvalSet, ReportRow, Shading,
    DEFAULT_EVAL_DENSITY,
};
use qdnn_core::experiment::{pretrain_model, run_cell, Figure, Recipe};
use qdnn_core::model::{Model, ModelConfig};
use qdnn_core::quant::QuantSpec;
use qdnn_core::train::{finetune_clr, retrain_quantized, ClrSchedule, MetricLog, TrainConfig};
use qdnn_core::{Error, Result};

use crate::config::{parse_cycle, pick, FileConfig, TrainSection};
use crate::workers::{run_all, worker_count};
use crate::{
    Cli, Command, DataSource, EvalArgs, FinetuneArgs, GenDataArgs, MapArgs, ReproduceArgs, RetrainArgs, TrainArgs,
};

pub const DEFAULT_MAP_RES: usize = 401;

struct Ctx {
    out_dir: PathBuf,
    file: FileConfig,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    fn recipe(&self) -> Recipe {
        let mut r = Recipe::default();
        r.init = pick(None, self.file.model.init, r.init);
        r.standardize_inputs = pick(None, self.file.model.standardize_inputs, r.standardize_inputs);
        r.eval_density = pick(None, self.file.eval.density, r.eval_density);
        r
    }

    fn pretrain_config(&self, flags: &TrainSection) -> Result<TrainConfig> {
        self.file.pretrain.overlay(flags, self.recipe().pretrain)
    }

    fn retrain_config(&self, flags: &TrainSection) -> Result<TrainConfig> {
        self.file.retrain.overlay(flags, self.recipe().retrain)
    }

    /// Training set and eval set for a command.
    fn data(&self, src: &DataSource) -> Result<(LabeledDataset, EvalSet)> {
        let data = match &src.data {
            Some(p) => LabeledDataset::load(&self.path(p))?,
            None => LabeledDataset::generate(&self.file.dataset.overlay(&src.dataset.section())?)?,
        };
        let density = pick(src.density, self.file.eval.density, DEFAULT_EVAL_DENSITY);
        let eval = EvalSet::generate(&data.spec, density)?;
        Ok((data, eval))
    }

    fn load_model(&self, p: &Path) -> Result<Model> {
        let path = self.path(p);
        let text = fs::read_to_string(&path).map_err(|e| Error::File {
            path: path.clone(),
            source: e,
        })?;
        from_json(&text, &path)
    }
}

/// Writes through a temporary sibling and renames it into place, so a
/// failed command never leaves a half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e| Error::File {
        path: path.to_path_buf(),
        source: e,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    if let Err(e) = fs::write(&tmp, bytes) {
        let _ = fs::remove_file(&tmp);
        return Err(io(e));
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io(e)
    })
}

fn save_model(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, to_json(model)?.as_bytes())
}

fn save_log(log: &MetricLog, path: &Path) -> Result<()> {
    write_atomic(path, log.to_csv().as_bytes())
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(&resolve(&cli.out_dir, p))?,
        None => FileConfig::default(),
    };
    fs::create_dir_all(&cli.out_dir).map_err(|e| Error::File {
        path: cli.out_dir.clone(),
        source: e,
    })?;
    let ctx = Ctx {
        out_dir: cli.out_dir,
        file,
    };
    match cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Retrain(a) => retrain(&ctx, a),
        Command::Finetune(a) => finetune(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Map(a) => map(&ctx, a),
        Command::Reproduce(a) => reproduce(&ctx, a),
    }
}

fn resolve(out_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() || p.exists() {
        p.to_path_buf()
    } else {
        out_dir.join(p)
    }
}

fn gen_data(ctx: &Ctx, a: GenDataArgs) -> Result<()> {
    let spec = ctx.file.dataset.overlay(&a.dataset.section())?;
    let data = LabeledDataset::generate(&spec)?;
    let out = ctx.path(&a.output);
    // Save under temporary names, then move both files into place.
    let tmp = out.with_extension("tmp.csv");
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::File {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let result = data.save(&tmp).and_then(|()| {
        let mv = |from: &Path, to: &Path| {
            fs::rename(from, to).map_err(|e| Error::File {
                path: to.to_path_buf(),
                source: e,
            })
        };
        mv(&tmp.with_extension("json"), &out.with_extension("json"))?;
        mv(&tmp, &out)
    });
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
        let _ = fs::remove_file(tmp.with_extension("json"));
    }
    result?;
    let [zeros, ones] = data.label_counts();
    println!("core={} total={}", spec.core_count(), data.len());
    println!("label0={zeros} label1={ones}");
    println!("wrote {}", out.display());
    Ok(())
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let (data, eval) = ctx.data(&a.source)?;
    let m = &ctx.file.model;
    let arch = ModelConfig::new(pick(a.width, m.width, 128), pick(a.depth, m.depth, 4))
        .residual(a.residual || m.residual.unwrap_or(false));
    let mut recipe = ctx.recipe();
    recipe.pretrain = ctx.pretrain_config(&a.train.section())?;
    let seed = recipe.pretrain.seed;
    let (model, log) = pretrain_model(arch, seed, &recipe, &data, &eval)?;
    save_model(&model, &ctx.path(&a.output))?;
    save_log(&log, &ctx.path(&a.metrics))?;
    let acc = evaluate_accuracy(&model, &eval, false)?;
    println!("{} float accuracy {acc:.2}%", arch.name());
    Ok(())
}

fn quant_spec(ctx: &Ctx, wbits: Option<u32>, abits: Option<u32>, shortcut: bool) -> Result<QuantSpec> {
    let q = &ctx.file.quant;
    let spec = QuantSpec {
        weight_bits: wbits.or(q.wbits),
        activation_bits: abits.or(q.abits),
        quantize_shortcut: shortcut || q.quantize_shortcut.unwrap_or(false),
    };
    spec.validate()?;
    Ok(spec)
}

fn retrain(ctx: &Ctx, a: RetrainArgs) -> Result<()> {
    let float = ctx.load_model(&a.checkpoint)?;
    let (data, eval) = ctx.data(&a.source)?;
    let spec = quant_spec(ctx, a.quant.wbits, a.quant.abits, a.quant.quantize_shortcut)?;
    let cfg = ctx.retrain_config(&a.train.section())?;
    let (model, log) = retrain_quantized(float.network, &data, &eval, spec, &cfg)?;
    save_model(&model, &ctx.path(&a.output))?;
    save_log(&log, &ctx.path(&a.metrics))?;
    let acc = evaluate_accuracy(&model, &eval, true)?;
    println!("{} {} accuracy {acc:.2}%", model.network.config.name(), spec.tag());
    Ok(())
}

fn finetune(ctx: &Ctx, a: FinetuneArgs) -> Result<()> {
    let model = ctx.load_model(&a.checkpoint)?;
    let (data, eval) = ctx.data(&a.source)?;
    let cfg = ctx.retrain_config(&a.train.section())?;
    let f = &ctx.file.finetune;
    let cycle = pick(a.clr_cycle, f.clr_cycle.clone(), "8-epochs".to_string());
    let period = parse_cycle(&cycle, cfg.batches_per_epoch(data.len()))?;
    let cycles = pick(a.cycles, f.cycles, 5);
    let last = cfg.lr_schedule.final_lr(cfg.lr, cfg.epochs);
    let base = pick(a.base_lr, f.base_lr, 10.0 * last);
    let schedule = ClrSchedule::new(base, period)?;
    let (best, log) = finetune_clr(model, &data, &eval, &schedule, cycles, &cfg)?;
    save_model(&best, &ctx.path(&a.output))?;
    save_log(&log, &ctx.path(&a.metrics))?;
    let quantized = best.quant.is_some();
    let acc = evaluate_accuracy(&best, &eval, quantized)?;
    println!(
        "finetuned {} cycles x {period} iterations (base lr {base:e}); best accuracy {acc:.2}%",
        cycles
    );
    Ok(())
}

fn report_row(model: &Model, quantized: bool, accuracy: f64, seed: u64) -> ReportRow {
    let c = model.network.config;
    let spec = model.view(quantized).map(|q| q.spec).unwrap_or_default();
    ReportRow {
        model: c.name(),
        width: c.width,
        depth: c.depth,
        residual: c.residual,
        n_w: spec.weight_bits,
        n_a: spec.activation_bits,
        accuracy_pct: accuracy,
        seed,
    }
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let model = ctx.load_model(&a.checkpoint)?;
    let (_, eval) = ctx.data(&a.source)?;
    let quantized = model.quant.is_some() && !a.float;
    let acc = evaluate_accuracy(&model, &eval, quantized)?;
    let row = report_row(&model, quantized, acc, a.seed);
    qdnn_core::eval::append_report(&ctx.path(&a.report), std::slice::from_ref(&row)).or_else(|e| match e {
        // The report directory may not exist yet.
        Error::File { .. } => {
            let p = ctx.path(&a.report);
            if let Some(d) = p.parent() {
                fs::create_dir_all(d).map_err(|e| Error::File {
                    path: d.to_path_buf(),
                    source: e,
                })?;
            }
            qdnn_core::eval::append_report(&p, std::slice::from_ref(&row))
        }
        e => Err(e),
    })?;
    println!("{}", row.to_csv_line());
    Ok(())
}

fn map(ctx: &Ctx, a: MapArgs) -> Result<()> {
    let model = ctx.load_model(&a.checkpoint)?;
    let m = &ctx.file.map;
    let window = if a.quarter {
        Window::quarter()
    } else {
        match a.window.as_deref().map(|w| [w[0], w[1], w[2], w[3]]).or(m.window) {
            Some([x0, x1, y0, y1]) => Window::new(x0, x1, y0, y1),
            None => Window::full(),
        }
    };
    let res = pick(a.res, m.res, DEFAULT_MAP_RES);
    let shading = pick(a.shading, m.shading, Shading::Label);
    let quantized = model.quant.is_some() && !a.float;
    let pm = predict_map(&model, window, (res, res), quantized)?;
    let out = ctx.path(&a.output);
    write_atomic(&out, &encode_ppm(&pm, shading))?;
    println!("wrote {res}x{res} map to {}", out.display());
    Ok(())
}

struct Job {
    seed: u64,
    arch: ModelConfig,
}

struct JobOutput {
    seed: u64,
    float: (Model, MetricLog),
    cells: Vec<qdnn_core::experiment::CellOutcome>,
}

fn reproduce(ctx: &Ctx, a: ReproduceArgs) -> Result<()> {
    let fig: Figure = a.figure.parse()?;
    let mut recipe = ctx.recipe();
    recipe.pretrain = ctx.pretrain_config(&TrainSection {
        epochs: a.pretrain_epochs,
        ..Default::default()
    })?;
    recipe.retrain = ctx.retrain_config(&TrainSection {
        epochs: a.retrain_epochs,
        ..Default::default()
    })?;
    if let Some(d) = a.density {
        recipe.eval_density = d;
    }
    recipe.validate()?;
    let spec: DatasetSpec = ctx.file.dataset.overlay(&a.dataset.section())?;
    let data = LabeledDataset::generate(&spec)?;
    let eval = EvalSet::generate(&spec, recipe.eval_density)?;
    let res = pick(a.res, ctx.file.map.res, DEFAULT_MAP_RES);
    let window = fig.window();
    let dir = ctx.out_dir.join(fig.name());

    let jobs: Vec<Job> = (0..a.seeds.max(1))
        .flat_map(|k| {
            fig.architectures()
                .into_iter()
                .map(move |arch| Job { seed: a.seed + k, arch })
        })
        .collect();
    let cells = fig.cells();
    let outputs = run_all(&jobs, worker_count(), |job| -> Result<JobOutput> {
        let float = pretrain_model(job.arch, job.seed, &recipe, &data, &eval)?;
        let outcomes = cells
            .iter()
            .filter(|c| c.arch == job.arch)
            .map(|&c| run_cell(c, &float.0, job.seed, &recipe, &data, &eval))
            .collect::<Result<Vec<_>>>()?;
        Ok(JobOutput {
            seed: job.seed,
            float,
            cells: outcomes,
        })
    });

    let mut rows = Vec::new();
    if fig == Figure::Fig1 {
        write_atomic(&dir.join("maps/dataset.ppm"), &encode_samples_ppm(&data.samples, window, (res, res)))?;
    }
    for out in outputs {
        let out = out?;
        let arch = out.float.0.network.config.name();
        save_model(&out.float.0, &dir.join(format!("checkpoints/{arch}_float_s{}.json", out.seed)))?;
        save_log(&out.float.1, &dir.join(format!("logs/{arch}_float_s{}.csv", out.seed)))?;
        for c in out.cells {
            let name = c.cell.name();
            let quantized = c.cell.quant.is_some();
            if quantized {
                save_model(&c.model, &dir.join(format!("checkpoints/{name}_s{}.json", c.seed)))?;
                save_log(&c.log, &dir.join(format!("logs/{name}_s{}.csv", c.seed)))?;
            }
            let pm = predict_map(&c.model, window, (res, res), quantized)?;
            write_atomic(
                &dir.join(format!("maps/{name}_s{}.ppm", c.seed)),
                &encode_ppm(&pm, Shading::Label),
            )?;
            println!("{name} seed {} accuracy {:.2}%", c.seed, c.accuracy);
            rows.push((c.cell, report_row(&c.model, quantized, c.accuracy, c.seed)));
        }
    }
    // Table order: figure cell order, then seed.
    rows.sort_by_key(|(cell, row)| (cells.iter().position(|c| c == cell).unwrap_or(usize::MAX), row.seed));
    let table: Vec<ReportRow> = rows.into_iter().map(|(_, r)| r).collect();
    let summary = dir.join("summary.csv");
    write_atomic(&summary, report_csv(&table).as_bytes())?;
    println!("wrote {}", summary.display());
    Ok(())
}
