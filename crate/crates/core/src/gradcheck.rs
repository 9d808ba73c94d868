//! Finite-difference checks of the network's analytic gradients.
//!
//! Derivatives use the fourth-order five-point stencil, which keeps
//! truncation error negligible at steps large enough to avoid round-off.
//! A difference quotient is meaningless when a probe moves a ReLU or clip
//! unit across its kink. Each coordinate is therefore
//! probed with a shrinking step until the piecewise-linear regime of every
//! unit is unchanged on both sides; coordinates that never settle are
//! skipped and counted.

use crate::error::{Error, Result};
use crate::model::{backward, forward, ForwardPass, LayerTrace, Model, Network};
use crate::nn::{affine, relative_error, softmax_cross_entropy, GradientSet};
use crate::quant::{LayerQuantState, QuantSpec, QuantState};
use crate::tensor::Matrix;
use crate::train::loss_and_gradients;

/// Halvings tried before a coordinate is declared kinked.
const MAX_SHRINK: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates whose every probe straddled a kink.
    pub skipped: usize,
}

impl FdReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance && self.checked > 0
    }
}

/// Runs the kink-aware comparison. `eval(x)` returns the loss and a
/// regime fingerprint (one byte per unit per row) at parameters `x`.
pub fn kink_aware_check(
    mut eval: impl FnMut(&[f64]) -> Result<(f64, Vec<u8>)>,
    x: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<FdReport> {
    if x.len() != analytic.len() {
        return Err(Error::dim(format!(
            "{} parameters but {} analytic gradients",
            x.len(),
            analytic.len()
        )));
    }
    let (_, base) = eval(x)?;
    let mut work = x.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        skipped: 0,
    };
    for i in 0..x.len() {
        let mut h = step;
        let mut numeric = None;
        for _ in 0..=MAX_SHRINK {
            let mut at = |offset: f64| -> Result<(f64, bool)> {
                work[i] = x[i] + offset;
                let (f, regime) = eval(&work)?;
                Ok((f, regime == base))
            };
            let probes = [at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?];
            work[i] = x[i];
            if probes.iter().all(|p| p.1) {
                let [p2, p1, m1, m2] = probes.map(|p| p.0);
                numeric = Some((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h));
                break;
            }
            h *= 0.5;
        }
        match numeric {
            Some(n) => {
                report.checked += 1;
                let err = relative_error(analytic[i], n);
                if err > report.max_rel_error || err.is_nan() {
                    report.max_rel_error = err;
                    report.worst_index = i;
                }
            }
            None => report.skipped += 1,
        }
    }
    Ok(report)
}

fn relu_fingerprint(pass: &ForwardPass) -> Vec<u8> {
    pass.traces
        .iter()
        .filter(|t| t.relu_out.is_some())
        .flat_map(|t| t.pre_activation.data().iter().map(|&z| u8::from(z > 0.0)))
        .collect()
}

/// Checks cross-entropy plus `lip_weight * L_Lip` of a float network
/// (plain or residual) with respect to every weight and bias.
pub fn check_float_network(net: &Network, x: &Matrix, labels: &[u8], lip_weight: f64, step: f64) -> Result<FdReport> {
    let model = Model::float(net.clone());
    let (_, _, grads) = loss_and_gradients(&model, x, labels, false, lip_weight)?;
    let mut probe = net.clone();
    kink_aware_check(
        |p| {
            probe.set_flat_params(p)?;
            let m = Model::float(probe.clone());
            let (loss, _, _) = loss_and_gradients(&m, x, labels, false, lip_weight)?;
            let pass = forward(&probe, x, None)?;
            Ok((loss, relu_fingerprint(&pass)))
        },
        &net.flat_params(),
        &grads.flat_params(),
        step,
    )
}

/// Forward pass with each hidden activation clipped to `[0, alpha_l]` and
/// left unrounded: the envelope the activation quantizer's
/// straight-through gradient differentiates. Plain networks only.
pub fn pact_envelope_forward(net: &Network, x: &Matrix, alphas: &[f64]) -> Result<ForwardPass> {
    if net.config.residual {
        return Err(Error::config("envelope forward covers plain networks only"));
    }
    if alphas.len() + 1 != net.layers.len() {
        return Err(Error::dim(format!(
            "{} clip levels for {} hidden layers",
            alphas.len(),
            net.layers.len() - 1
        )));
    }
    let last = net.layers.len() - 1;
    let gain = net.config.input_scale;
    let mut stream = x.map(|v| gain * v);
    let mut traces = Vec::with_capacity(net.layers.len());
    for (l, layer) in net.layers.iter().enumerate() {
        let z = affine(&stream, &layer.weight, &layer.bias)?;
        if l == last {
            traces.push(LayerTrace {
                input: stream,
                raw_input: None,
                weight: layer.weight.clone(),
                pre_activation: z.clone(),
                relu_out: None,
            });
            return Ok(ForwardPass { logits: z, traces });
        }
        let a = z.map(|v| v.max(0.0));
        let out = a.map(|v| v.min(alphas[l]));
        traces.push(LayerTrace {
            input: stream,
            raw_input: None,
            weight: layer.weight.clone(),
            pre_activation: z,
            relu_out: Some(a),
        });
        stream = out;
    }
    unreachable!("a validated network has at least two layers")
}

fn envelope_fingerprint(pass: &ForwardPass, alphas: &[f64]) -> Vec<u8> {
    pass.traces
        .iter()
        .zip(alphas)
        .flat_map(|(t, &alpha)| {
            t.pre_activation.data().iter().map(move |&z| match z {
                z if z <= 0.0 => 0,
                z if z >= alpha => 2,
                _ => 1,
            })
        })
        .collect()
}

/// Checks the straight-through backward of clipped activations against
/// differences of the unrounded clip envelope, over weights, biases and
/// the clip levels.
pub fn check_pact_envelope(net: &Network, x: &Matrix, labels: &[u8], alphas: &[f64], step: f64) -> Result<FdReport> {
    let n_params = net.param_count();
    // Only the clip levels matter to the backward pass.
    let quant = QuantState {
        spec: QuantSpec::activations(8),
        layers: (0..net.layers.len())
            .map(|l| LayerQuantState {
                delta: 1.0,
                alpha: alphas.get(l).copied().unwrap_or(1.0),
                shortcut_alpha: None,
            })
            .collect(),
    };
    let pass = pact_envelope_forward(net, x, alphas)?;
    let (_, dlogits) = softmax_cross_entropy(&pass.logits, labels)?;
    let grads: GradientSet = backward(net, &pass, &dlogits, Some(&quant))?;
    let mut analytic = grads.flat_params();
    analytic.extend_from_slice(&grads.alpha[..alphas.len()]);

    let mut point = net.flat_params();
    point.extend_from_slice(alphas);
    let mut probe = net.clone();
    kink_aware_check(
        |p| {
            probe.set_flat_params(&p[..n_params])?;
            let a = &p[n_params..];
            let pass = pact_envelope_forward(&probe, x, a)?;
            let (loss, _) = softmax_cross_entropy(&pass.logits, labels)?;
            Ok((loss, envelope_fingerprint(&pass, a)))
        },
        &point,
        &analytic,
        step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_fcdnn, ModelConfig};
    use crate::rng::{LabRng, Stream};

    fn batch(seed: u64, n: usize) -> (Matrix, Vec<u8>) {
        let mut rng = LabRng::new(seed, Stream::Misc);
        let x = Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
        let labels = (0..n).map(|_| rng.below(2) as u8).collect();
        (x, labels)
    }

    #[test]
    fn float_network_gradients() {
        let net = build_fcdnn(ModelConfig::new(6, 3), 3).unwrap();
        let (x, y) = batch(1, 5);
        let r = check_float_network(&net, &x, &y, 0.0, 1e-4).unwrap();
        assert!(r.passes(1e-5), "{r:?}");
    }

    #[test]
    fn wrong_gradients_are_caught() {
        let r = kink_aware_check(|p| Ok((p[0] * p[0], vec![])), &[1.5], &[2.0], 1e-4).unwrap();
        assert!(!r.passes(1e-5));
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn kinks_are_skipped_not_failed() {
        // |x| at 0 never settles into one regime.
        let r = kink_aware_check(|p| Ok((p[0].abs(), vec![u8::from(p[0] > 0.0)])), &[0.0], &[0.0], 1e-4).unwrap();
        assert_eq!((r.checked, r.skipped), (0, 1));
        assert!(!r.passes(1e-5));
    }

    #[test]
    fn envelope_rejects_residual_nets() {
        let net = build_fcdnn(ModelConfig::new(4, 4).residual(true), 0).unwrap();
        let (x, _) = batch(0, 2);
        assert!(pact_envelope_forward(&net, &x, &[1.0, 1.0, 1.0]).is_err());
    }
}
