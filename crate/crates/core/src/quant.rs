//! Uniform clip-and-round quantization.
//!
//! Weights use the signed form with one step size per layer, chosen to
//! minimise the squared quantization error. Hidden activations use the
//! unsigned form with a learnable clip level `alpha` (PACT style), whose
//! step is `alpha / (2^n - 1)`. Retraining keeps floating-point shadow
//! weights and routes gradients straight through the rounding.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DenseLayer, GradientSet};
use crate::tensor::Matrix;

/// Bit-width policy for a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: Option<u32>,
    pub activation_bits: Option<u32>,
    /// Also quantize residual-sum streams before they feed the next layer.
    #[serde(default)]
    pub quantize_shortcut: bool,
}

impl QuantSpec {
    pub fn weights(bits: u32) -> Self {
        QuantSpec {
            weight_bits: Some(bits),
            ..Default::default()
        }
    }

    pub fn activations(bits: u32) -> Self {
        QuantSpec {
            activation_bits: Some(bits),
            ..Default::default()
        }
    }

    pub fn both(weight_bits: u32, activation_bits: u32) -> Self {
        QuantSpec {
            weight_bits: Some(weight_bits),
            activation_bits: Some(activation_bits),
            quantize_shortcut: false,
        }
    }

    pub fn with_shortcut(mut self, on: bool) -> Self {
        self.quantize_shortcut = on;
        self
    }

    pub fn is_enabled(&self) -> bool {
        self.weight_bits.is_some() || self.activation_bits.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        for (what, bits) in [("weight", self.weight_bits), ("activation", self.activation_bits)] {
            if let Some(b) = bits {
                if !(2..=8).contains(&b) {
                    return Err(Error::config(format!("{what} bits must be in 2..=8, got {b}")));
                }
            }
        }
        if !self.is_enabled() {
            return Err(Error::config("quantization spec enables neither weights nor activations"));
        }
        Ok(())
    }

    /// Short tag such as `W2A2`, `W2AF`, `WFA2`.
    pub fn tag(&self) -> String {
        let part = |b: Option<u32>| b.map_or_else(|| "F".to_string(), |b| b.to_string());
        format!("W{}A{}", part(self.weight_bits), part(self.activation_bits))
    }
}

/// Per-layer quantizer parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantState {
    /// Weight step size.
    pub delta: f64,
    /// Clip level of this layer's output activations (unused on the
    /// output layer).
    pub alpha: f64,
    /// Clip level applied to a residual-sum input, when that is quantized.
    #[serde(default)]
    pub shortcut_alpha: Option<f64>,
}

/// Quantization policy plus the per-layer state it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantState {
    pub spec: QuantSpec,
    pub layers: Vec<LayerQuantState>,
}

/// Smallest clip level the optimizer may drive `alpha` to.
pub const MIN_ALPHA: f64 = 1e-6;

/// Clip range plus step of a uniform quantizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformQuantizer {
    pub delta: f64,
    pub lo: f64,
    pub hi: f64,
}

impl UniformQuantizer {
    /// Symmetric grid `{-L..L} * delta`, `L = 2^(n-1) - 1`.
    pub fn signed(delta: f64, bits: u32) -> Result<Self> {
        check_delta(delta)?;
        if !(2..=31).contains(&bits) {
            return Err(Error::config(format!("signed quantizer needs 2..=31 bits, got {bits}")));
        }
        let top = delta * signed_levels(bits) as f64;
        Ok(UniformQuantizer { delta, lo: -top, hi: top })
    }

    /// Grid `{0..2^n - 1} * delta`.
    pub fn unsigned(delta: f64, bits: u32) -> Result<Self> {
        check_delta(delta)?;
        if !(1..=31).contains(&bits) {
            return Err(Error::config(format!("unsigned quantizer needs 1..=31 bits, got {bits}")));
        }
        Ok(UniformQuantizer {
            delta,
            lo: 0.0,
            hi: delta * ((1u64 << bits) - 1) as f64,
        })
    }

    /// Clip, then round half up onto the grid.
    #[inline]
    pub fn quantize(&self, x: f64) -> f64 {
        let c = x.clamp(self.lo, self.hi);
        self.delta * (c / self.delta + 0.5).floor()
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::config(format!("step size must be > 0, got {delta}")));
    }
    Ok(())
}

/// `2^(n-1) - 1`, the largest signed code magnitude.
pub fn signed_levels(bits: u32) -> u64 {
    (1u64 << (bits - 1)) - 1
}

/// Quantize every value with [`UniformQuantizer`].
pub fn uniform_quantize(x: &[f64], delta: f64, bits: u32, signed: bool) -> Result<Vec<f64>> {
    let q = if signed {
        UniformQuantizer::signed(delta, bits)?
    } else {
        UniformQuantizer::unsigned(delta, bits)?
    };
    Ok(x.iter().map(|&v| q.quantize(v)).collect())
}

/// Result of a step-size search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSize {
    pub delta: f64,
    pub sse: f64,
    /// Set when every weight is zero; `delta` is then 1 by convention.
    pub degenerate: bool,
}

/// Number of coarse grid points in the step-size search.
pub const STEP_GRID_POINTS: usize = 2000;
const REFINE_ITERS: usize = 60;
const REFINE_CELLS: usize = 8;
/// Largest `weights * levels` for which the exact piecewise sweep runs.
pub const EXACT_SWEEP_LIMIT: usize = 1 << 20;
const POLISH_ITERS: usize = 8;

/// Squared error of quantizing a layer with any step size, in
/// `O(levels * log n)` per query using sorted magnitudes and prefix sums.
///
/// The error of the signed quantizer depends only on `|w|`: magnitudes in
/// `[(j - 1/2) delta, (j + 1/2) delta)` map to code `j`, and everything at or
/// above `(L - 1/2) delta` clips to `L`. Rounding ties cost `(delta/2)^2`
/// either way.
#[derive(Debug, Clone)]
pub struct SseProfile {
    mags: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    levels: u64,
}

impl SseProfile {
    pub fn new(weights: &[f64], bits: u32) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("cannot size the step of an empty layer"));
        }
        if !(2..=31).contains(&bits) {
            return Err(Error::config(format!("weight quantization needs 2..=31 bits, got {bits}")));
        }
        let mut mags: Vec<f64> = weights.iter().map(|w| w.abs()).collect();
        mags.sort_unstable_by(f64::total_cmp);
        let mut s1 = Vec::with_capacity(mags.len() + 1);
        let mut s2 = Vec::with_capacity(mags.len() + 1);
        let (mut a, mut b) = (0.0, 0.0);
        s1.push(0.0);
        s2.push(0.0);
        for &m in &mags {
            a += m;
            b += m * m;
            s1.push(a);
            s2.push(b);
        }
        Ok(SseProfile {
            mags,
            s1,
            s2,
            levels: signed_levels(bits),
        })
    }

    pub fn max_abs(&self) -> f64 {
        *self.mags.last().expect("non-empty")
    }

    /// Calls `f(code, count, sum, sum_sq)` for every non-empty code bin.
    fn for_each_bin(&self, delta: f64, mut f: impl FnMut(f64, f64, f64, f64)) {
        let n = self.mags.len();
        let mut start = 0;
        for j in 0..=self.levels {
            let end = if j == self.levels {
                n
            } else {
                let edge = (j as f64 + 0.5) * delta;
                start + self.mags[start..].partition_point(|&m| m < edge)
            };
            if end > start {
                f(
                    j as f64,
                    (end - start) as f64,
                    self.s1[end] - self.s1[start],
                    self.s2[end] - self.s2[start],
                );
            }
            start = end;
            if start == n {
                break;
            }
        }
    }

    pub fn sse(&self, delta: f64) -> f64 {
        let mut total = 0.0;
        // Within-bin spread plus the offset of the bin mean from its code;
        // the spread term does not depend on `delta`, so steps sharing a
        // code assignment compare without cancellation noise.
        self.for_each_bin(delta, |j, cnt, sum, sq| {
            let mean = sum / cnt;
            let spread = (sq - sum * mean).max(0.0);
            let offset = mean - j * delta;
            total += spread + cnt * offset * offset;
        });
        total
    }

    /// Global minimiser over `(0, upper]`, found by sweeping every code
    /// transition `delta = |w| / (j + 1/2)` in increasing order. Between
    /// transitions the error is `C - 2 A delta + B delta^2`, with `A` and `B`
    /// updated in O(1) per transition. `None` above [`EXACT_SWEEP_LIMIT`].
    pub fn exact_minimum(&self, upper: f64) -> Option<(f64, f64)> {
        let levels = self.levels as usize;
        if self.mags.len().saturating_mul(levels) > EXACT_SWEEP_LIMIT {
            return None;
        }
        let nonzero = &self.mags[self.mags.partition_point(|&m| m == 0.0)..];
        let l = self.levels as f64;
        let c = *self.s2.last().expect("non-empty");
        let mut a = l * nonzero.iter().sum::<f64>();
        let mut b = l * l * nonzero.len() as f64;
        let mut lo = 0.0;
        let mut best: Option<(f64, f64)> = None;
        let mut visit = |lo: f64, hi: f64, a: f64, b: f64| {
            if hi <= lo {
                return;
            }
            let d = if b > 0.0 { (a / b).clamp(lo, hi) } else { hi };
            if d <= 0.0 {
                return;
            }
            let sse = c - 2.0 * a * d + b * d * d;
            if best.is_none_or(|(_, s)| sse < s) {
                best = Some((d, sse));
            }
        };
        // Transitions for one code j are sorted because the magnitudes are,
        // so a merge over the per-code cursors visits them in order. Bit
        // patterns of positive floats order like the floats themselves.
        let at = |j: usize, i: usize| nonzero[i] / (j as f64 + 0.5);
        if levels == 1 {
            for (i, &m) in nonzero.iter().enumerate() {
                let step = at(0, i);
                if step > upper {
                    break;
                }
                visit(lo, step, a, b);
                a -= m;
                b -= 1.0;
                lo = step;
            }
            visit(lo, upper, a, b);
            return best;
        }
        let mut heads: BinaryHeap<Reverse<(u64, usize, usize)>> = (0..levels)
            .filter(|_| !nonzero.is_empty())
            .map(|j| Reverse((at(j, 0).to_bits(), j, 0)))
            .collect();
        while let Some(Reverse((bits, j, i))) = heads.pop() {
            let step = f64::from_bits(bits);
            if step > upper {
                break;
            }
            visit(lo, step, a, b);
            // Code drops from j + 1 to j just above this step.
            a -= nonzero[i];
            b -= 2.0 * j as f64 + 1.0;
            lo = step;
            if i + 1 < nonzero.len() {
                heads.push(Reverse((at(j, i + 1).to_bits(), j, i + 1)));
            }
        }
        visit(lo, upper, a, b);
        best
    }

    /// Exact minimiser of the error for the code assignment induced by
    /// `delta`: with bins fixed the error is quadratic in the step, giving
    /// `sum(j * S1_j) / sum(j^2 * n_j)`.
    pub fn polish(&self, delta: f64) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        self.for_each_bin(delta, |j, cnt, sum, _| {
            num += j * sum;
            den += j * j * cnt;
        });
        (den > 0.0 && num > 0.0).then(|| num / den)
    }
}

/// Step size minimising `sum (w - Q(w))^2` for a layer.
///
/// A grid of [`STEP_GRID_POINTS`] values over `(0, max|w|]` (plus the
/// naive `max|w| / L`) is scanned and the best few cells are refined with
/// a ternary search. When the layer has at most [`EXACT_SWEEP_LIMIT`] code
/// transitions, every piece of the error curve is also minimised exactly,
/// which catches dips narrower than a grid cell. Ties resolve to the
/// smaller step.
pub fn optimal_step_size(weights: &[f64], bits: u32) -> Result<StepSize> {
    let profile = SseProfile::new(weights, bits)?;
    let max = profile.max_abs();
    if max == 0.0 {
        return Ok(StepSize {
            delta: 1.0,
            sse: 0.0,
            degenerate: true,
        });
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    let consider = |delta: f64, sse: f64, best: &mut (f64, f64)| {
        if sse < best.1 || (sse == best.1 && delta < best.0) {
            *best = (delta, sse);
        }
    };
    let grid_step = max / STEP_GRID_POINTS as f64;
    let mut coarse: Vec<(f64, usize)> = (1..=STEP_GRID_POINTS)
        .map(|k| {
            let delta = grid_step * k as f64;
            let sse = profile.sse(delta);
            consider(delta, sse, &mut best);
            (sse, k)
        })
        .collect();
    let naive = max / profile.levels as f64;
    consider(naive, profile.sse(naive), &mut best);

    // With many levels and few weights the error curve has narrow dips, so
    // the best coarse cell need not hold the global minimum. Refine several.
    coarse.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for &(_, k) in coarse.iter().take(REFINE_CELLS) {
        let mut lo = grid_step * (k as f64 - 1.0).max(1e-3);
        let mut hi = grid_step * (k as f64 + 1.0);
        for _ in 0..REFINE_ITERS {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            let (f1, f2) = (profile.sse(m1), profile.sse(m2));
            consider(m1, f1, &mut best);
            consider(m2, f2, &mut best);
            if f1 <= f2 {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let mut at = (lo + hi) / 2.0;
        for _ in 0..POLISH_ITERS {
            let Some(delta) = profile.polish(at) else { break };
            if delta == at {
                break;
            }
            consider(delta, profile.sse(delta), &mut best);
            at = delta;
        }
    }
    if let Some((delta, _)) = profile.exact_minimum(max) {
        consider(delta, profile.sse(delta), &mut best);
    }
    // The polished step is the exact optimum of its piece, so it also wins
    // rounding-level ties against grid points.
    for _ in 0..POLISH_ITERS {
        let Some(delta) = profile.polish(best.0) else { break };
        let sse = profile.sse(delta);
        if sse > best.1 || delta == best.0 {
            break;
        }
        best = (delta, sse);
    }
    Ok(StepSize {
        delta: best.0,
        sse: best.1,
        degenerate: false,
    })
}

/// Signed quantization of a weight matrix with a given step.
pub fn quantize_matrix(m: &Matrix, delta: f64, bits: u32) -> Result<Matrix> {
    let q = UniformQuantizer::signed(delta, bits)?;
    Ok(m.map(|v| q.quantize(v)))
}

/// Quantized view of a stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    pub weights: Vec<Matrix>,
    pub deltas: Vec<f64>,
}

/// Fresh per-layer step sizes and the quantized weights they induce.
/// Biases stay in floating point; the input layers are not modified.
pub fn quantize_weights(layers: &[DenseLayer], bits: u32) -> Result<QuantizedWeights> {
    let mut weights = Vec::with_capacity(layers.len());
    let mut deltas = Vec::with_capacity(layers.len());
    for layer in layers {
        let step = optimal_step_size(layer.weight.data(), bits)?;
        weights.push(quantize_matrix(&layer.weight, step.delta, bits)?);
        deltas.push(step.delta);
    }
    Ok(QuantizedWeights { weights, deltas })
}

/// Quantizer for activations clipped to `[0, alpha]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActQuantizer {
    alpha: f64,
    delta: f64,
    top: f64,
}

impl ActQuantizer {
    pub fn new(alpha: f64, bits: u32) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::config(format!("clip level must be > 0, got {alpha}")));
        }
        if !(1..=31).contains(&bits) {
            return Err(Error::config(format!("activation bits must be in 1..=31, got {bits}")));
        }
        let top = ((1u64 << bits) - 1) as f64;
        Ok(ActQuantizer {
            alpha,
            delta: alpha / top,
            top,
        })
    }

    pub fn step(&self) -> f64 {
        self.delta
    }

    /// The top code is returned as `alpha` itself, so saturated inputs map
    /// to the clip level exactly.
    #[inline]
    pub fn quantize(&self, h: f64) -> f64 {
        let c = h.clamp(0.0, self.alpha);
        let k = (c / self.delta + 0.5).floor().min(self.top);
        if k >= self.top {
            self.alpha
        } else {
            self.delta * k
        }
    }
}

/// Unsigned activation quantization with clip level `alpha`.
pub fn act_quantize_forward(h: &Matrix, alpha: f64, bits: u32) -> Result<Matrix> {
    let q = ActQuantizer::new(alpha, bits)?;
    Ok(h.map(|v| q.quantize(v)))
}

/// Straight-through gradients of the clipped quantizer: `dh` passes where
/// `0 <= h < alpha`, and `dalpha` collects the upstream over saturated
/// entries.
pub fn act_quantize_backward(upstream: &Matrix, h: &Matrix, alpha: f64) -> Result<(Matrix, f64)> {
    upstream.same_shape(h)?;
    let mut dalpha = 0.0;
    let data = upstream
        .data()
        .iter()
        .zip(h.data())
        .map(|(&g, &v)| {
            if v >= alpha {
                dalpha += g;
                0.0
            } else if v >= 0.0 {
                g
            } else {
                0.0
            }
        })
        .collect();
    Ok((Matrix::from_vec(h.rows(), h.cols(), data)?, dalpha))
}

/// Gradients taken at the quantized weights are applied unchanged to the
/// floating-point shadow weights.
pub fn ste_weight_backward(upstream: GradientSet) -> GradientSet {
    upstream
}

/// Nearest-rank percentile (`q` in `[0, 1]`) of a set of values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    let rank = ((q.clamp(0.0, 1.0) * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    let (_, nth, _) = v.select_nth_unstable_by(rank, f64::total_cmp);
    *nth
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_two_bit_examples() {
        let out = uniform_quantize(&[0.2, 0.3, 10.0], 0.5, 2, true).unwrap();
        assert_eq!(out, vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn unsigned_two_bit_examples() {
        let out = uniform_quantize(&[1.7, -0.3], 0.5, 2, false).unwrap();
        assert_eq!(out, vec![1.5, 0.0]);
    }

    #[test]
    fn bad_step_rejected() {
        assert!(matches!(uniform_quantize(&[1.0], 0.0, 2, true), Err(Error::Config(_))));
        assert!(uniform_quantize(&[1.0], -1.0, 2, false).is_err());
        assert!(uniform_quantize(&[1.0], 0.5, 1, true).is_err());
    }

    #[test]
    fn grid_points_are_fixed() {
        let q = UniformQuantizer::signed(0.37, 3).unwrap();
        for k in -3..=3 {
            let v = 0.37 * k as f64;
            assert_eq!(q.quantize(v), v);
        }
    }

    /// Direct SSE: quantize every weight.
    fn direct_sse(w: &[f64], delta: f64, bits: u32) -> f64 {
        let q = UniformQuantizer::signed(delta, bits).unwrap();
        w.iter().map(|&v| (v - q.quantize(v)).powi(2)).sum()
    }

    #[test]
    fn sse_profile_matches_direct_evaluation() {
        let w: Vec<f64> = (0..257).map(|i| ((i as f64) * 1.37).sin() * 0.8).collect();
        for bits in [2, 3, 4, 8] {
            let p = SseProfile::new(&w, bits).unwrap();
            for delta in [0.01, 0.05, 0.13, 0.4, 0.8, 1.5] {
                let a = p.sse(delta);
                let b = direct_sse(&w, delta, bits);
                assert!((a - b).abs() <= 1e-10 * b.max(1.0), "bits {bits} delta {delta}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ternary_step_example() {
        let s = optimal_step_size(&[-1.0, -0.5, 0.5, 1.0], 2).unwrap();
        assert!((s.delta - 0.75).abs() < 1e-9, "{s:?}");
        assert!((s.sse - 0.25).abs() < 1e-12);
        assert!(!s.degenerate);
    }

    #[test]
    fn representable_layer_has_zero_error() {
        let d0 = 0.3;
        let w: Vec<f64> = [-2.0, -1.0, 0.0, 1.0, 2.0, 1.0, -2.0].iter().map(|k| k * d0).collect();
        let s = optimal_step_size(&w, 3).unwrap();
        assert!(s.sse < 1e-12, "{s:?}");
        assert!((s.delta - d0).abs() / d0 < 1e-9, "{s:?}");
    }

    #[test]
    fn zero_layer_is_degenerate() {
        let s = optimal_step_size(&[0.0; 10], 2).unwrap();
        assert_eq!(s, StepSize { delta: 1.0, sse: 0.0, degenerate: true });
        assert!(optimal_step_size(&[], 2).is_err());
        assert!(optimal_step_size(&[1.0], 1).is_err());
    }

    #[test]
    fn act_quantizer_examples() {
        let h = Matrix::from_rows(&[&[0.0, 1.4, 3.0, 7.5]]).unwrap();
        let q = act_quantize_forward(&h, 3.0, 2).unwrap();
        assert_eq!(q.data(), &[0.0, 1.0, 3.0, 3.0]);
        // Saturation returns alpha exactly even when alpha/3*3 != alpha.
        let alpha = 0.1;
        let q = act_quantize_forward(&Matrix::from_rows(&[&[5.0]]).unwrap(), alpha, 2).unwrap();
        assert_eq!(q.data(), &[alpha]);
        assert!(act_quantize_forward(&h, 0.0, 2).is_err());
    }

    #[test]
    fn act_backward_examples() {
        let h = Matrix::from_rows(&[&[0.5, 1.0, 2.5]]).unwrap();
        let up = Matrix::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let (dh, da) = act_quantize_backward(&up, &h, 3.0).unwrap();
        assert_eq!(dh, up);
        assert_eq!(da, 0.0);
        let (dh, da) = act_quantize_backward(&up, &h, 0.4).unwrap();
        assert_eq!(dh.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(da, 6.0);
    }

    #[test]
    fn clip_level_gradient_matches_differences() {
        // Oracle on the clipping envelope only (no rounding):
        // f(alpha) = sum g * clip(h, 0, alpha).
        let h = Matrix::from_rows(&[&[0.1, 0.9, 1.7, 2.2, 0.0, 3.1]]).unwrap();
        let g = Matrix::from_rows(&[&[0.3, -1.1, 0.7, 2.0, 5.0, -0.4]]).unwrap();
        let alpha = 1.3;
        let envelope = |a: f64| -> f64 {
            h.data().iter().zip(g.data()).map(|(&v, &w)| w * v.clamp(0.0, a)).sum()
        };
        let step = 1e-6;
        let numeric = (envelope(alpha + step) - envelope(alpha - step)) / (2.0 * step);
        let (_, da) = act_quantize_backward(&g, &h, alpha).unwrap();
        assert!((numeric - da).abs() / da.abs() < 1e-5, "{numeric} vs {da}");
    }

    #[test]
    fn ste_is_identity() {
        let layers = vec![DenseLayer::zeros(2, 3)];
        let mut g = GradientSet::zeros_like(&layers);
        g.layers[0].weight.set(1, 1, 4.0);
        assert_eq!(ste_weight_backward(g.clone()), g);
        let zero = GradientSet::zeros_like(&layers);
        assert_eq!(ste_weight_backward(zero.clone()), zero);
    }

    #[test]
    fn quantize_weights_is_idempotent_and_per_layer() {
        let w1: Vec<f64> = (0..64).map(|i| ((i as f64) * 0.71).sin()).collect();
        let l1 = DenseLayer::new(Matrix::from_vec(8, 8, w1.clone()).unwrap(), vec![0.0; 8]).unwrap();
        let l2 = DenseLayer::new(
            Matrix::from_vec(8, 8, w1.iter().map(|v| v * 10.0).collect()).unwrap(),
            vec![1.0; 8],
        )
        .unwrap();
        let layers = vec![l1, l2];
        let qw = quantize_weights(&layers, 2).unwrap();
        assert!((qw.deltas[1] / qw.deltas[0] - 10.0).abs() < 1e-6, "{:?}", qw.deltas);

        let requant: Vec<DenseLayer> = layers
            .iter()
            .zip(&qw.weights)
            .map(|(l, w)| DenseLayer::new(w.clone(), l.bias.clone()).unwrap())
            .collect();
        let again = quantize_weights(&requant, 2).unwrap();
        for (a, b) in again.weights.iter().zip(&qw.weights) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12 * y.abs(), "{x} vs {y}");
            }
        }

        for (layer, (w, &d)) in layers.iter().zip(qw.weights.iter().zip(&qw.deltas)) {
            for (&a, &b) in layer.weight.data().iter().zip(w.data()) {
                if a.abs() <= d {
                    assert!((a - b).abs() <= d / 2.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.999), 999.0);
        assert_eq!(percentile(&v, 1.0), 1000.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
    }
}
