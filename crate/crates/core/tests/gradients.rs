use qdnn_core::gradcheck::{check_float_network, check_pact_envelope};
use qdnn_core::model::{build_fcdnn_with, Init, ModelConfig};
use qdnn_core::rng::{LabRng, Stream};
use qdnn_core::Matrix;

const TOL: f64 = 1e-5;

fn batch(seed: u64) -> (Matrix, Vec<u8>) {
    let mut rng = LabRng::new(seed, Stream::Misc);
    let x = Matrix::from_vec(8, 2, (0..16).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
    (x, (0..8).map(|_| rng.below(2) as u8).collect())
}

#[test]
fn plain_and_residual_nets() {
    for residual in [false, true] {
        for seed in 0..3 {
            let net = build_fcdnn_with(ModelConfig::new(16, 3).residual(residual), seed, Init::UniformFanIn).unwrap();
            let (x, y) = batch(seed);
            let r = check_float_network(&net, &x, &y, 0.0, 1e-4).unwrap();
            assert!(r.passes(TOL), "residual={residual} seed={seed}: {r:?}");
        }
    }
}

#[test]
fn with_orthogonality_term() {
    let net = build_fcdnn_with(ModelConfig::new(16, 3), 5, Init::UniformFanIn).unwrap();
    let (x, y) = batch(5);
    let r = check_float_network(&net, &x, &y, 0.3, 1e-4).unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn clip_envelope() {
    let net = build_fcdnn_with(ModelConfig::new(16, 3), 9, Init::UniformFanIn).unwrap();
    let (x, y) = batch(9);
    let r = check_pact_envelope(&net, &x, &y, &[0.4, 0.3], 1e-4).unwrap();
    assert!(r.passes(TOL), "{r:?}");
    assert!(r.checked > r.skipped);
}
