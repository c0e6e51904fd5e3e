//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use rand::Rng;
use tailmix::losses::LossConfig;
use tailmix::nn::{activation_pattern, backward, forward, Arch, ModelParams, Parameters};
use tailmix::Tensor;

pub const FD_EPS: f64 = 1e-3;

/// Relative error with a floor on the denominator so that gradients that are
/// zero in both routes compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn loss_only(params: &ModelParams<f64>, batch: &Tensor<f64>, labels: &[usize], loss: &LossConfig) -> f64 {
    let out = forward(params, batch).unwrap();
    loss.evaluate(&out.logits, labels, None).unwrap().0
}

/// Max relative error over every parameter between the analytic gradient and
/// a central finite difference with step `FD_EPS`.
///
/// Where the stencil straddles a ReLU or max-pool kink (the activation pattern
/// at either end differs from the centre) the step is shrunk tenfold until it
/// no longer does; the network is not differentiable across a kink. Returns
/// the worst error, where it occurred, and how many coordinates needed a
/// smaller step.
pub fn max_grad_error(
    params: &ModelParams<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    loss: &LossConfig,
) -> (f64, String, usize) {
    let base_pattern = activation_pattern(params, batch).unwrap();
    let mut refined = 0;
    let (_, grads) = backward(params, batch, labels, loss, None).unwrap();
    let grads: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect();
    let mut worst = (0.0, String::new());
    let mut probe = params.clone();
    for (ti, (name, analytic)) in grads.iter().enumerate() {
        for (j, &g) in analytic.iter().enumerate() {
            let orig = probe.tensors()[ti].1.data()[j];
            let mut eps = FD_EPS;
            let numeric = loop {
                probe.tensors_mut()[ti].1.data_mut()[j] = orig + eps;
                let up = loss_only(&probe, batch, labels, loss);
                let up_same = activation_pattern(&probe, batch).unwrap() == base_pattern;
                probe.tensors_mut()[ti].1.data_mut()[j] = orig - eps;
                let down = loss_only(&probe, batch, labels, loss);
                let down_same = activation_pattern(&probe, batch).unwrap() == base_pattern;
                probe.tensors_mut()[ti].1.data_mut()[j] = orig;
                if (up_same && down_same) || eps < 1e-8 {
                    break (up - down) / (2.0 * eps);
                }
                if eps == FD_EPS {
                    refined += 1;
                }
                eps /= 10.0;
            };
            let e = rel_err(g, numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{j}]: analytic {g:e} numeric {numeric:e}"));
            }
        }
    }
    (worst.0, worst.1, refined)
}

pub fn small_arch(n_classes: usize) -> Arch {
    Arch {
        in_channels: 3,
        height: 8,
        width: 8,
        channels: vec![4, 5, 6],
        n_classes,
    }
}

pub fn random_instance(rng: &mut impl Rng, arch: &Arch, n: usize) -> (ModelParams<f64>, Tensor<f64>, Vec<usize>) {
    let mut params = ModelParams::<f64>::init(arch, rng).unwrap();
    for (_, t) in params.tensors_mut() {
        if t.ndim() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    let batch = Tensor::from_fn(&[n, arch.in_channels, arch.height, arch.width], |_| rng.gen_range(-1.0..1.0));
    let labels = (0..n).map(|_| rng.gen_range(0..arch.n_classes)).collect();
    (params, batch, labels)
}

/// A cache with non-negative, partly zero features, random maps and
/// softmax rows; `counts[c]` samples of class `c`.
pub fn random_cache(rng: &mut impl Rng, counts: &[usize], k: usize, h: usize, w: usize) -> tailmix::cam::FeatureCache {
    let n_classes = counts.len();
    let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    let n = labels.len();
    let features = Tensor::from_fn(&[n, k, h, w], |_| {
        if rng.gen_bool(0.3) {
            0.0
        } else {
            rng.gen_range(0.0..2.0f32)
        }
    });
    let cams = Tensor::from_fn(&[n, h, w], |_| rng.gen_range(-1.0..1.0f32));
    let mut probs = Vec::with_capacity(n * n_classes);
    for _ in 0..n {
        let e: Vec<f32> = (0..n_classes).map(|_| rng.gen_range(-2.0..2.0f32).exp()).collect();
        let z: f32 = e.iter().sum();
        probs.extend(e.iter().map(|v| v / z));
    }
    tailmix::cam::FeatureCache {
        fingerprint: "random".into(),
        n_classes,
        features,
        cams,
        probs: Tensor::new(vec![n, n_classes], probs).unwrap(),
        labels,
    }
}
