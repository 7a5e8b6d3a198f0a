//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::mlp::{Gradients, Mlp};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss` around `params`.
///
/// Probes every coordinate when `probe_count >= params.len()`, otherwise a
/// seeded random subset.
pub fn check_flat<F>(params: &[f64], mut loss: F, analytic: &[f64], probe_count: usize, h: f64, seed: u64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let n = params.len();
    let coords: Vec<usize> = if probe_count >= n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&mut rng, n, probe_count).into_vec()
    };
    let mut work = params.to_vec();
    let mut worst = 0.0_f64;
    for i in coords {
        let orig = work[i];
        work[i] = orig + h;
        let plus = loss(&work);
        work[i] = orig - h;
        let minus = loss(&work);
        work[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], fd));
    }
    worst
}

/// Max relative error between the analytic gradient returned by `loss_fn` and
/// central differences over the network's parameters.
pub fn grad_check<F>(mlp: &Mlp, loss_fn: F, probe_count: usize, h: f64) -> f64
where
    F: Fn(&Mlp) -> (f64, Gradients),
{
    let (_, grads) = loss_fn(mlp);
    let analytic = grads.flatten();
    let mut probe = mlp.clone();
    check_flat(
        &mlp.flat_params(),
        |p| {
            probe.set_flat_params(p).expect("same shape");
            loss_fn(&probe).0
        },
        &analytic,
        probe_count,
        h,
        0x9e37_79b9,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mlp::Activation;
    use ndarray::{Array2, Axis};

    fn sq_loss(m: &Mlp) -> (f64, Gradients) {
        let x = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let (out, cache) = m.forward(x.view()).unwrap();
        let target = Array2::from_shape_fn(out.dim(), |(i, j)| 0.1 * (i as f64) - 0.2 * (j as f64));
        let diff = &out - &target;
        let b = out.nrows() as f64;
        let loss = diff.mapv(|d| d * d).sum() / b;
        let (g, _) = m.backward(&cache, (diff * (2.0 / b)).view()).unwrap();
        (loss, g)
    }

    #[test]
    fn correct_backward_passes() {
        for act in [Activation::Tanh, Activation::LeakyRelu, Activation::Relu] {
            let m = Mlp::new(&[3, 8, 8, 2], act, Activation::Tanh, 21).unwrap();
            let err = grad_check(&m, sq_loss, usize::MAX, DEFAULT_STEP);
            assert!(err <= 1e-4, "{act:?}: {err}");
        }
    }

    #[test]
    fn corrupted_gradient_detected() {
        let m = Mlp::new(&[3, 8, 8, 2], Activation::Tanh, Activation::Identity, 4).unwrap();
        let corrupted = |m: &Mlp| {
            let (l, mut g) = sq_loss(m);
            g.layers[1].0.mapv_inplace(|v| v * 1.01);
            g.layers[1].1.mapv_inplace(|v| v * 1.01);
            (l, g)
        };
        assert!(grad_check(&m, corrupted, usize::MAX, DEFAULT_STEP) > 1e-3);
    }

    #[test]
    fn zero_network_zero_loss() {
        let m = Mlp::zeros(&[3, 4, 1], Activation::Relu, Activation::Identity).unwrap();
        let zero_loss = |m: &Mlp| {
            let x = Array2::from_elem((2, 3), 0.5);
            let (out, cache) = m.forward(x.view()).unwrap();
            let loss = out.sum_axis(Axis(0))[0] * 0.0;
            let (g, _) = m.backward(&cache, Array2::zeros(out.dim()).view()).unwrap();
            (loss, g)
        };
        assert_eq!(grad_check(&m, zero_loss, usize::MAX, DEFAULT_STEP), 0.0);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
