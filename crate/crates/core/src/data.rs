//! Synthetic two-class ring dataset.
//!
//! Each label owns alternating concentric semicircles: the upper half-plane
//! rings are centred at the origin, the lower half-plane rings at `(r, 0)`,
//! with radii at odd or even multiples of `r` depending on label and half.
//! Training samples are the deterministic ring points ("cores") plus
//! Gaussian-jittered copies; accuracy is scored against [`true_label`].

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{LabRng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub point: Point2,
    /// Class index, 0 or 1.
    pub label: u8,
}

/// Which half-plane a semicircle lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Half {
    /// `y > 0`, centred at the origin.
    Upper,
    /// `y <= 0`, centred at `(r, 0)`.
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub r: f64,
    pub ring_count: usize,
    pub points_per_semicircle: usize,
    pub subsamples_per_core: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let r = 0.1;
        DatasetSpec {
            r,
            ring_count: 5,
            points_per_semicircle: 100,
            subsamples_per_core: 9,
            noise_sigma: r / 3.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(Error::config(format!("r must be > 0, got {}", self.r)));
        }
        if self.ring_count == 0 {
            return Err(Error::config("ring_count must be >= 1"));
        }
        if self.points_per_semicircle == 0 {
            return Err(Error::config("points_per_semicircle must be >= 1"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn core_count(&self) -> usize {
        4 * self.ring_count * self.points_per_semicircle
    }

    pub fn total_count(&self) -> usize {
        self.core_count() * (1 + self.subsamples_per_core)
    }

    /// Radius of ring `i` of the given label in the given half.
    pub fn ring_radius(&self, label: u8, half: Half, ring: usize) -> f64 {
        let odd = (2 * ring + 1) as f64 * self.r;
        let even = (2 * ring + 2) as f64 * self.r;
        match (label, half) {
            (0, Half::Upper) | (1, Half::Lower) => odd,
            _ => even,
        }
    }

    pub fn center(&self, half: Half) -> Point2 {
        match half {
            Half::Upper => Point2::new(0.0, 0.0),
            Half::Lower => Point2::new(self.r, 0.0),
        }
    }

    /// Largest ring-centred radius covered by the evaluation region.
    pub fn eval_outer_radius(&self) -> f64 {
        (2 * self.ring_count) as f64 * self.r + 0.5 * self.r
    }

    pub fn eval_inner_radius(&self) -> f64 {
        0.5 * self.r
    }
}

/// Point on a label's ring at an explicit angle (radians, measured from the
/// ring centre).
pub fn semicircle_point(spec: &DatasetSpec, label: u8, half: Half, ring: usize, angle: f64) -> Point2 {
    let c = spec.center(half);
    let rad = spec.ring_radius(label, half, ring);
    Point2::new(c.x + rad * angle.cos(), c.y + rad * angle.sin())
}

/// Deterministic ring points: for each label, ring and half, `points_per_semicircle`
/// points at evenly spaced angles.
pub fn generate_core_samples(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let n = spec.points_per_semicircle;
    let mut out = Vec::with_capacity(spec.core_count());
    for label in 0..2u8 {
        for ring in 0..spec.ring_count {
            for half in [Half::Upper, Half::Lower] {
                let offset = match half {
                    Half::Upper => 0.0,
                    Half::Lower => PI,
                };
                for j in 0..n {
                    // Bin midpoints keep every point strictly off the y = 0 seam.
                    let angle = offset + PI * (j as f64 + 0.5) / n as f64;
                    out.push(Sample {
                        point: semicircle_point(spec, label, half, ring, angle),
                        label,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// `subsamples_per_core` jittered copies of every core sample, with i.i.d.
/// N(0, noise_sigma²) noise per coordinate. Labels are inherited.
pub fn generate_subsamples(core: &[Sample], spec: &DatasetSpec, rng: &mut LabRng) -> Result<Vec<Sample>> {
    spec.validate()?;
    if core.is_empty() {
        return Err(Error::config("cannot subsample an empty core set"));
    }
    let mut out = Vec::with_capacity(core.len() * spec.subsamples_per_core);
    for s in core {
        for _ in 0..spec.subsamples_per_core {
            let (ex, ey) = rng.normal_pair();
            out.push(Sample {
                point: Point2::new(
                    s.point.x + spec.noise_sigma * ex,
                    s.point.y + spec.noise_sigma * ey,
                ),
                label: s.label,
            });
        }
    }
    Ok(out)
}

/// Ground-truth label of any point in the plane.
///
/// The ring-centred radius is snapped to the nearest multiple of `r`
/// (clamped to the populated ring range); the parity of that multiple picks
/// the label, with opposite conventions in the two halves.
pub fn true_label(p: Point2, spec: &DatasetSpec) -> u8 {
    let upper = p.y > 0.0;
    let c = spec.center(if upper { Half::Upper } else { Half::Lower });
    let rho = (p.x - c.x).hypot(p.y - c.y);
    let k = (rho / spec.r).round().clamp(1.0, (2 * spec.ring_count) as f64) as u64;
    let odd = k % 2 == 1;
    match (upper, odd) {
        (true, true) | (false, false) => 0,
        _ => 1,
    }
}

/// The training set: core samples followed by their subsamples.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let core = generate_core_samples(spec)?;
        let mut rng = LabRng::new(spec.seed, Stream::Data);
        let subs = generate_subsamples(&core, spec, &mut rng)?;
        let mut samples = core;
        samples.extend(subs);
        Ok(LabeledDataset {
            spec: spec.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label_counts(&self) -> [usize; 2] {
        label_counts(&self.samples)
    }

    /// Writes `<stem>.csv` and `<stem>.json` (metadata sidecar).
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        write_samples_csv(csv_path, &self.samples)?;
        let meta = DatasetMetadata {
            spec: self.spec.clone(),
            core_count: self.spec.core_count(),
            total_count: self.samples.len(),
            label_counts: self.label_counts(),
        };
        let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        let meta_path = csv_path.with_extension("json");
        fs::write(&meta_path, json + "\n").map_err(|e| Error::file(&meta_path, e))
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let meta_path = csv_path.with_extension("json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::file(&meta_path, e))?;
        let meta: DatasetMetadata =
            serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        let samples = read_samples_csv(csv_path)?;
        if samples.len() != meta.total_count {
            return Err(Error::format(
                csv_path,
                format!("expected {} rows, found {}", meta.total_count, samples.len()),
            ));
        }
        Ok(LabeledDataset {
            spec: meta.spec,
            samples,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub spec: DatasetSpec,
    pub core_count: usize,
    pub total_count: usize,
    pub label_counts: [usize; 2],
}

pub fn label_counts(samples: &[Sample]) -> [usize; 2] {
    let ones = samples.iter().filter(|s| s.label == 1).count();
    [samples.len() - ones, ones]
}

/// Oracle-labelled evaluation points on a square lattice of spacing
/// `1 / density`, restricted to the annulus `[0.5 r, (2 rings + 0.5) r]`
/// around each half's centre.
pub fn generate_eval_set(spec: &DatasetSpec, density: f64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if !(density.is_finite() && density > 0.0) {
        return Err(Error::config(format!("density must be > 0, got {density}")));
    }
    let inner = spec.eval_inner_radius();
    let outer = spec.eval_outer_radius();
    let (xmin, xmax) = (-outer, spec.r + outer);
    let (ymin, ymax) = (-outer, outer);
    let (ix0, ix1) = ((xmin * density).ceil() as i64, (xmax * density).floor() as i64);
    let (iy0, iy1) = ((ymin * density).ceil() as i64, (ymax * density).floor() as i64);

    let mut out = Vec::new();
    for iy in iy0..=iy1 {
        let y = iy as f64 / density;
        let c = spec.center(if y > 0.0 { Half::Upper } else { Half::Lower });
        for ix in ix0..=ix1 {
            let x = ix as f64 / density;
            let rho = (x - c.x).hypot(y - c.y);
            if rho < inner || rho > outer {
                continue;
            }
            let point = Point2::new(x, y);
            out.push(Sample {
                point,
                label: true_label(point, spec),
            });
        }
    }
    Ok(out)
}

/// Rectangular viewing window in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Window {
    pub const fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Self {
        Window { xmin, xmax, ymin, ymax }
    }

    /// The full `(-1.1, 1.1)²` view.
    pub const fn full() -> Self {
        Window::new(-1.1, 1.1, -1.1, 1.1)
    }

    /// Bottom-right quadrant, `x > 0, y < 0`.
    pub const fn quarter() -> Self {
        Window::new(0.0, 1.1, -1.1, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.xmin, self.xmax, self.ymin, self.ymax].iter().all(|v| v.is_finite());
        if !finite || self.xmin >= self.xmax || self.ymin >= self.ymax {
            return Err(Error::config(format!("degenerate window {self:?}")));
        }
        Ok(())
    }
}

/// Row-major lattice spanning the window inclusively; row 0 is `ymin`.
pub fn generate_grid(window: Window, resolution: (usize, usize)) -> Result<Vec<Point2>> {
    window.validate()?;
    let (nx, ny) = resolution;
    if nx < 2 || ny < 2 {
        return Err(Error::config(format!("grid resolution must be >= 2 per axis, got {nx}x{ny}")));
    }
    let step = |lo: f64, hi: f64, n: usize, i: usize| {
        if i == n - 1 {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        let y = step(window.ymin, window.ymax, ny, iy);
        for ix in 0..nx {
            out.push(Point2::new(step(window.xmin, window.xmax, nx, ix), y));
        }
    }
    Ok(out)
}

pub fn write_samples_csv(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut text = String::with_capacity(samples.len() * 48 + 16);
    text.push_str("x,y,label\n");
    for s in samples {
        // 17 significant digits round-trip every f64 exactly.
        writeln!(text, "{:.16e},{:.16e},{}", s.point.x, s.point.y, s.label).expect("string write");
    }
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("x,y,label") => {}
        other => {
            return Err(Error::format(path, format!("bad header {other:?}")));
        }
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(path, format!("row {}: {what}", n + 2));
        let mut fields = line.split(',');
        let mut next_f64 = || -> Result<f64> {
            fields
                .next()
                .ok_or_else(|| bad("missing field"))?
                .parse::<f64>()
                .map_err(|_| bad("not a number"))
        };
        let x = next_f64()?;
        let y = next_f64()?;
        let label = fields
            .next()
            .ok_or_else(|| bad("missing label"))?
            .parse::<u8>()
            .map_err(|_| bad("bad label"))?;
        if label > 1 {
            return Err(bad("label must be 0 or 1"));
        }
        let point = Point2::new(x, y);
        if !point.is_finite() {
            return Err(bad("non-finite coordinate"));
        }
        out.push(Sample { point, label });
    }
    Ok(out)
}
