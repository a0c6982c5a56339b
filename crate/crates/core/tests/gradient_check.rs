//! Analytic back-propagation against central finite differences.

use dlsched_core::nn::{cross_entropy, cross_entropy_grad, softmax, Head, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

/// Loss evaluated purely through forward passes.
fn loss(net: &Network<f64>, xs: &[f64], batch: usize, targets: &[usize], ys: &[f64]) -> f64 {
    let d = net.input_dim();
    (0..batch)
        .map(|b| {
            let out = net.forward(&xs[b * d..(b + 1) * d]).unwrap();
            match net.head() {
                Head::Softmax => cross_entropy(&softmax(&out), targets[b]),
                Head::Linear => 0.5 * (out[0] - ys[b]).powi(2),
            }
        })
        .sum()
}

fn upstream(net: &Network<f64>, xs: &[f64], batch: usize, targets: &[usize], ys: &[f64]) -> Vec<f64> {
    let d = net.input_dim();
    let k = net.output_dim();
    let mut g = vec![0.0; batch * k];
    for b in 0..batch {
        let out = net.forward(&xs[b * d..(b + 1) * d]).unwrap();
        match net.head() {
            Head::Softmax => cross_entropy_grad(&softmax(&out), targets[b], &mut g[b * k..(b + 1) * k]),
            Head::Linear => g[b] = out[0] - ys[b],
        }
    }
    g
}

fn param_mut(net: &mut Network<f64>, layer: usize, which: usize, i: usize) -> &mut f64 {
    let layer = &mut net.layers_mut()[layer];
    if which == 0 {
        &mut layer.weights[i]
    } else {
        &mut layer.bias[i]
    }
}

/// ‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖) over all parameters.
fn relative_error(seed: u64, head: Head) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = rng.random_range(2..7);
    let outputs = if head == Head::Linear { 1 } else { rng.random_range(2..6) };
    let mut net = Network::<f64>::new(&[inputs, 8, 8, outputs], head, &mut rng);
    for l in net.layers_mut() {
        l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    let batch = 3;
    let xs: Vec<f64> = (0..batch * inputs).map(|_| rng.random_range(-2.0..2.0)).collect();
    let targets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..outputs)).collect();
    let ys: Vec<f64> = (0..batch).map(|_| rng.random_range(-1.0..1.0)).collect();

    let d_out = upstream(&net, &xs, batch, &targets, &ys);
    let grads = net.gradient(&xs, batch, &d_out).unwrap();
    let analytic: Vec<f64> = grads.slices().flat_map(|s| s.iter().copied()).collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let n_layers = net.layers().len();
    for l in 0..n_layers {
        for which in 0..2 {
            let len = if which == 0 { net.layers()[l].weights.len() } else { net.layers()[l].bias.len() };
            for i in 0..len {
                let orig = *param_mut(&mut net, l, which, i);
                *param_mut(&mut net, l, which, i) = orig + H;
                let up = loss(&net, &xs, batch, &targets, &ys);
                *param_mut(&mut net, l, which, i) = orig - H;
                let down = loss(&net, &xs, batch, &targets, &ys);
                *param_mut(&mut net, l, which, i) = orig;
                numeric.push((up - down) / (2.0 * H));
            }
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

#[test]
fn policy_gradients_match_finite_differences() {
    for seed in 0..100 {
        let e = relative_error(seed, Head::Softmax);
        assert!(e < 1e-4, "seed {seed}: relative error {e}");
    }
}

#[test]
fn value_gradients_match_finite_differences() {
    for seed in 100..200 {
        let e = relative_error(seed, Head::Linear);
        assert!(e < 1e-4, "seed {seed}: relative error {e}");
    }
}
