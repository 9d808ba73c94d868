//! Accuracy against the oracle set, prediction maps and their PPM
//! rendering, SQNR, and the accuracy report format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{generate_eval_set, generate_grid, DatasetSpec, Sample, Window};
use crate::error::{Error, Result};
use crate::model::{predict_logits, Model};
use crate::nn::{argmax_rows, class0_probability};
use crate::tensor::Matrix;

/// Lattice density (points per unit length) of the default eval set.
pub const DEFAULT_EVAL_DENSITY: f64 = 100.0;

/// Oracle-labelled points packed for batched evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub inputs: Matrix,
    pub labels: Vec<u8>,
}

impl EvalSet {
    pub fn generate(spec: &DatasetSpec, density: f64) -> Result<Self> {
        Ok(Self::from_samples(&generate_eval_set(spec, density)?))
    }

    pub fn from_samples(samples: &[Sample]) -> Self {
        let data = samples.iter().flat_map(|s| [s.point.x, s.point.y]).collect();
        EvalSet {
            inputs: Matrix::from_vec(samples.len(), 2, data).expect("sized"),
            labels: samples.iter().map(|s| s.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Percentage of eval points whose argmax logit matches the oracle label.
pub fn evaluate_accuracy(model: &Model, eval: &EvalSet, quantized: bool) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::config("eval set is empty"));
    }
    let logits = predict_logits(&model.network, &eval.inputs, model.view(quantized))?;
    let hits = argmax_rows(&logits)
        .iter()
        .zip(&eval.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(100.0 * hits as f64 / eval.len() as f64)
}

/// Network predictions over a grid; row-major with row 0 at `ymin`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    pub window: Window,
    /// `(nx, ny)`.
    pub resolution: (usize, usize),
    pub labels: Vec<u8>,
    /// Class-0 probability per cell.
    pub probs: Vec<f64>,
}

pub fn predict_map(model: &Model, window: Window, resolution: (usize, usize), quantized: bool) -> Result<PredictionMap> {
    let grid = generate_grid(window, resolution)?;
    let data = grid.iter().flat_map(|p| [p.x, p.y]).collect();
    let inputs = Matrix::from_vec(grid.len(), 2, data).expect("sized");
    let logits = predict_logits(&model.network, &inputs, model.view(quantized))?;
    Ok(PredictionMap {
        window,
        resolution,
        labels: argmax_rows(&logits),
        probs: class0_probability(&logits),
    })
}

impl PredictionMap {
    /// Fraction of cells whose label differs from `other`'s.
    pub fn disagreement(&self, other: &PredictionMap) -> Result<f64> {
        if self.resolution != other.resolution {
            return Err(Error::dim(format!(
                "maps of resolution {:?} and {:?}",
                self.resolution, other.resolution
            )));
        }
        let diff = self.labels.iter().zip(&other.labels).filter(|(a, b)| a != b).count();
        Ok(diff as f64 / self.labels.len().max(1) as f64)
    }
}

pub const LABEL0_RGB: [u8; 3] = [230, 60, 60];
pub const LABEL1_RGB: [u8; 3] = [60, 60, 230];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shading {
    /// Flat colour per predicted label.
    #[default]
    Label,
    /// Blend of the two colours by class-0 probability.
    Probability,
}

/// Binary P6 bytes for `map`. Image row 0 is the top of the window (`ymax`).
pub fn encode_ppm(map: &PredictionMap, shading: Shading) -> Vec<u8> {
    let (nx, ny) = map.resolution;
    let mut out = format!("P6\n{nx} {ny}\n255\n").into_bytes();
    out.reserve(3 * nx * ny);
    for row in (0..ny).rev() {
        for col in 0..nx {
            let i = row * nx + col;
            let rgb = match shading {
                Shading::Label => {
                    if map.labels[i] == 0 {
                        LABEL0_RGB
                    } else {
                        LABEL1_RGB
                    }
                }
                Shading::Probability => {
                    let p = map.probs[i].clamp(0.0, 1.0);
                    let mut c = [0u8; 3];
                    for k in 0..3 {
                        let v = p * LABEL0_RGB[k] as f64 + (1.0 - p) * LABEL1_RGB[k] as f64;
                        c[k] = v.round() as u8;
                    }
                    c
                }
            };
            out.extend_from_slice(&rgb);
        }
    }
    out
}

pub fn render_map(map: &PredictionMap, path: &Path, shading: Shading) -> Result<()> {
    fs::write(path, encode_ppm(map, shading)).map_err(|e| Error::file(path, e))
}

/// Scatter plot of labelled samples on a white background, in the same
/// orientation as [`encode_ppm`]. Samples outside the window are skipped.
pub fn encode_samples_ppm(samples: &[Sample], window: Window, resolution: (usize, usize)) -> Vec<u8> {
    let (nx, ny) = resolution;
    let mut pixels = vec![255u8; 3 * nx * ny];
    let sx = (nx.max(2) - 1) as f64 / (window.xmax - window.xmin);
    let sy = (ny.max(2) - 1) as f64 / (window.ymax - window.ymin);
    for s in samples {
        let (x, y) = (s.point.x, s.point.y);
        if !(window.xmin..=window.xmax).contains(&x) || !(window.ymin..=window.ymax).contains(&y) {
            continue;
        }
        let col = ((x - window.xmin) * sx).round() as usize;
        let row = ((window.ymax - y) * sy).round() as usize;
        let i = 3 * (row.min(ny - 1) * nx + col.min(nx - 1));
        let rgb = if s.label == 0 { LABEL0_RGB } else { LABEL1_RGB };
        pixels[i..i + 3].copy_from_slice(&rgb);
    }
    let mut out = format!("P6\n{nx} {ny}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

/// Reported in place of +inf when the reconstruction is exact.
pub const SQNR_CAP_DB: f64 = 300.0;

/// `10 log10(sum x² / sum (x - x̂)²)` in dB, capped at [`SQNR_CAP_DB`].
pub fn sqnr(original: &[f64], quantized: &[f64]) -> Result<f64> {
    if original.len() != quantized.len() {
        return Err(Error::dim(format!(
            "sqnr of {} values against {}",
            original.len(),
            quantized.len()
        )));
    }
    let signal: f64 = original.iter().map(|x| x * x).sum();
    if signal == 0.0 || !signal.is_finite() {
        return Err(Error::Undefined("sqnr of a zero-energy signal".into()));
    }
    let noise: f64 = original.iter().zip(quantized).map(|(x, q)| (x - q) * (x - q)).sum();
    if noise == 0.0 {
        return Ok(SQNR_CAP_DB);
    }
    Ok((10.0 * (signal / noise).log10()).min(SQNR_CAP_DB))
}

/// One row of the accuracy report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub width: usize,
    pub depth: usize,
    pub residual: bool,
    /// Weight bits; `None` is float.
    pub n_w: Option<u32>,
    pub n_a: Option<u32>,
    pub accuracy_pct: f64,
    pub seed: u64,
}

pub const REPORT_HEADER: &str = "model,width,depth,residual,n_W,n_A,accuracy_pct,seed";

impl ReportRow {
    pub fn to_csv_line(&self) -> String {
        let bits = |b: Option<u32>| b.map_or_else(|| "float".to_string(), |b| b.to_string());
        format!(
            "{},{},{},{},{},{},{:.4},{}",
            self.model,
            self.width,
            self.depth,
            self.residual,
            bits(self.n_w),
            bits(self.n_a),
            self.accuracy_pct,
            self.seed
        )
    }
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{}", r.to_csv_line()).expect("string write");
    }
    s
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    use std::io::Write;
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::file(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(REPORT_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.to_csv_line());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::file(path, e))
}
