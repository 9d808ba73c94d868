//! Dense-network primitives: affine layers, ReLU, softmax cross-entropy,
//! gradient containers and SGD with momentum.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, matmul_tn, matmul, Matrix};

/// One fully connected layer, `y = x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out_dim x in_dim`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::dim(format!(
                "bias has {} entries for a {}-output layer",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(DenseLayer { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

/// Batched affine map; `x` holds one sample per row.
pub fn dense_forward(x: &Matrix, layer: &DenseLayer) -> Result<Matrix> {
    affine(x, &layer.weight, &layer.bias)
}

/// `x Wᵀ + b` with an explicit weight (used for quantized views).
pub(crate) fn affine(x: &Matrix, weight: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if x.cols() != weight.cols() {
        return Err(Error::dim(format!(
            "input has {} columns, layer expects {}",
            x.cols(),
            weight.cols()
        )));
    }
    let mut y = matmul_nt(x, weight)?;
    let cols = y.cols();
    for row in y.data_mut().chunks_exact_mut(cols) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
    Ok(y)
}

/// Gradients of an affine map given the upstream gradient `dy`.
/// Returns `(dW, db, dx)`.
pub(crate) fn affine_backward(dy: &Matrix, x: &Matrix, weight: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let dw = matmul_tn(dy, x)?;
    let db = dy.column_sums();
    let dx = matmul(dy, weight)?;
    Ok((dw, db, dx))
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Passes `upstream` where `x > 0`; the subgradient at 0 is 0.
pub fn relu_backward(upstream: &Matrix, x: &Matrix) -> Result<Matrix> {
    upstream.same_shape(x)?;
    let data = upstream
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

/// Subnormal floats are orders of magnitude slower to multiply on common
/// hardware and carry no useful signal here.
#[inline]
pub fn flush_subnormal(v: f64) -> f64 {
    if v.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        v
    }
}

/// Mean negative log-likelihood over the batch and its gradient with
/// respect to the logits, `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[u8]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::dim(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let n = logits.rows();
    let k = logits.cols();
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::dim(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = Matrix::zeros(n, k);
    let mut loss = 0.0;
    let inv_n = 1.0 / n.max(1) as f64;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label as usize];
        for (j, &v) in row.iter().enumerate() {
            let p = flush_subnormal((v - log_z).exp());
            let target = if j == label as usize { 1.0 } else { 0.0 };
            grad.set(i, j, (p - target) * inv_n);
        }
    }
    Ok((loss * inv_n, grad))
}

/// Softmax probability of class 0 for each row of two-class logits.
pub fn class0_probability(logits: &Matrix) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            1.0 / (1.0 + (row[1] - row[0]).exp())
        })
        .collect()
}

/// Row-wise argmax (ties go to the lower class index).
pub fn argmax_rows(logits: &Matrix) -> Vec<u8> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients mirroring a network's parameters. `alpha` and
/// `shortcut_alpha` hold the clip-level gradients of activation quantizers
/// (one slot per layer; zero where no quantizer exists).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
    pub alpha: Vec<f64>,
    pub shortcut_alpha: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(layers: &[DenseLayer]) -> Self {
        GradientSet {
            layers: layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
            alpha: vec![0.0; layers.len()],
            shortcut_alpha: vec![0.0; layers.len()],
        }
    }

    /// `self += s * other` over every entry.
    pub fn add_scaled(&mut self, other: &GradientSet, s: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::dim("gradient sets cover different layer counts"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled(&b.weight, s)?;
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += s * y);
        }
        self.alpha.iter_mut().zip(&other.alpha).for_each(|(x, y)| *x += s * y);
        self.shortcut_alpha
            .iter_mut()
            .zip(&other.shortcut_alpha)
            .for_each(|(x, y)| *x += s * y);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.scale_in_place(s);
            l.bias.iter_mut().for_each(|v| *v *= s);
        }
        self.alpha.iter_mut().for_each(|v| *v *= s);
        self.shortcut_alpha.iter_mut().for_each(|v| *v *= s);
    }

    /// Weight and bias gradients flattened in parameter order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
            && self.alpha.iter().all(|v| v.is_finite())
            && self.shortcut_alpha.iter().all(|v| v.is_finite())
    }
}

/// Momentum buffers plus step hyperparameters.
///
/// Buffers are created lazily on the first step, one per parameter group,
/// and every later step must present groups of identical lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(OptimizerState {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// `v <- mu v + g; p <- p - lr v` for each parameter group.
pub fn sgd_momentum_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(format!(
            "{} parameter groups but {} gradient groups",
            params.len(),
            grads.len()
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::dim("parameter group count changed between steps"));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::dim(format!(
                "parameter group of {} entries, gradient {}, buffer {}",
                p.len(),
                g.len(),
                v.len()
            )));
        }
        for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vi = state.momentum * *vi + gi;
            *pi -= state.lr * *vi;
        }
    }
    Ok(())
}

/// Adam moment estimates (Kingma & Ba), created lazily like
/// [`OptimizerState`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config(format!("learning rate must be > 0, got {lr}")));
        }
        Ok(AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam update for each parameter group.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(format!(
            "{} parameter groups but {} gradient groups",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::dim("parameter group count changed between steps"));
    }
    state.step += 1;
    let c1 = 1.0 - state.beta1.powi(state.step as i32);
    let c2 = 1.0 - state.beta2.powi(state.step as i32);
    let (b1, b2) = (state.beta1, state.beta2);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::dim(format!(
                "parameter group of {} entries, gradient {}, buffer {}",
                p.len(),
                g.len(),
                m.len()
            )));
        }
        for i in 0..p.len() {
            m[i] = flush_subnormal(b1 * m[i] + (1.0 - b1) * g[i]);
            v[i] = flush_subnormal(b2 * v[i] + (1.0 - b2) * g[i] * g[i]);
            p[i] -= state.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Central-difference derivative of `f` along coordinate `i` of `x`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &mut [f64], i: usize, step: f64) -> f64 {
    let orig = x[i];
    x[i] = orig + step;
    let plus = f(x);
    x[i] = orig - step;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * step)
}

/// Outcome of comparing analytic and numerical gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Index (in flattened parameter order) of the worst entry.
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor for relative errors, so entries whose true gradient is
/// ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn compare_gradients(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if x.len() != analytic.len() {
        return Err(Error::dim(format!(
            "{} parameters but {} analytic gradients",
            x.len(),
            analytic.len()
        )));
    }
    let mut work = x.to_vec();
    let mut worst = (0.0, 0);
    for i in 0..x.len() {
        let numeric = central_difference(&mut f, &mut work, i, step);
        let err = relative_error(analytic[i], numeric);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: x.len(),
        tolerance,
        passed: worst.0 <= tolerance,
    })
}
