//! Analytic gradients against central finite differences.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scl_core::snapshot::Aggregation;
use scl_core::toy::{generate_synthetic, loss_and_grads, DualEncoder, GroupSpec, ToyDataset, ToyDims};

const STEP: f64 = 1e-5;

fn flatten(enc: &DualEncoder) -> Vec<f64> {
    enc.w_video
        .iter()
        .chain(enc.w_text.iter())
        .copied()
        .chain(std::iter::once(enc.log_tau))
        .collect()
}

fn unflatten(template: &DualEncoder, params: &[f64]) -> DualEncoder {
    let nv = template.w_video.len();
    let nt = template.w_text.len();
    DualEncoder {
        w_video: Array2::from_shape_vec(template.w_video.raw_dim(), params[..nv].to_vec()).unwrap(),
        w_text: Array2::from_shape_vec(template.w_text.raw_dim(), params[nv..nv + nt].to_vec()).unwrap(),
        log_tau: params[nv + nt],
    }
}

fn relative_error(enc: &DualEncoder, data: &ToyDataset, ids: &[usize], mode: Aggregation) -> f64 {
    let lg = loss_and_grads(enc, ids, data, mode).unwrap();
    let analytic: Vec<f64> = lg
        .grad_video
        .iter()
        .chain(lg.grad_text.iter())
        .copied()
        .chain(std::iter::once(lg.grad_log_tau))
        .collect();
    let base = flatten(enc);
    let numeric: Vec<f64> = (0..base.len())
        .map(|k| {
            let mut p = base.clone();
            p[k] += STEP;
            let up = loss_and_grads(&unflatten(enc, &p), ids, data, mode).unwrap().loss;
            p[k] -= 2.0 * STEP;
            let down = loss_and_grads(&unflatten(enc, &p), ids, data, mode).unwrap().loss;
            (up - down) / (2.0 * STEP)
        })
        .collect();
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    let worst = analytic
        .iter()
        .zip(&numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    worst / scale
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let dims: ToyDims = "3,5,3,2".parse().unwrap();
    for mode in Aggregation::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + mode as u64);
        for trial in 0..20 {
            let data = generate_synthetic(6, dims, &GroupSpec::singletons(6), 0.5, rng.random()).unwrap();
            let mut enc = DualEncoder::init(4, dims.d_video, dims.d_text, &mut rng);
            enc.log_tau = rng.random_range(-2.5..0.0);
            let ids = [rng.random_range(0..2), rng.random_range(2..4), rng.random_range(4..6)];
            let err = relative_error(&enc, &data, &ids, mode);
            assert!(err < 1e-4, "{mode} trial {trial}: relative error {err}");
        }
    }
}
