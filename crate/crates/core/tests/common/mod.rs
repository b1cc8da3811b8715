//! Shared test oracles. Everything here is independent of the library's
//! differentiation and sampling paths: finite differences, classical RK4,
//! composite Simpson quadrature.

#![allow(dead_code)]

use splitmeanflow::autodiff::{Tape, Tensor};
use splitmeanflow::model::{NetConfig, VelocityNet};
use splitmeanflow::rng::substream;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Central finite difference of a scalar function of one packed f64 vector.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Relative error with a guard for near-zero references.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / (want.abs() + 1e-6)
}

/// Classical fixed-step RK4 for dz/dtau = v(z, tau), integrating tau from
/// `t0` to `t1` (either direction) in `n` steps.
pub fn rk4_solve(
    v: &dyn Fn(&[f64], f64) -> Vec<f64>,
    z0: &[f64],
    t0: f64,
    t1: f64,
    n: usize,
) -> Vec<f64> {
    let h = (t1 - t0) / n as f64;
    let mut z = z0.to_vec();
    let mut t = t0;
    let axpy = |z: &[f64], k: &[f64], c: f64| -> Vec<f64> {
        z.iter().zip(k).map(|(a, b)| a + c * b).collect()
    };
    for _ in 0..n {
        let k1 = v(&z, t);
        let k2 = v(&axpy(&z, &k1, h / 2.0), t + h / 2.0);
        let k3 = v(&axpy(&z, &k2, h / 2.0), t + h / 2.0);
        let k4 = v(&axpy(&z, &k3, h), t + h);
        for i in 0..z.len() {
            z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += h;
    }
    z
}

/// Composite Simpson quadrature of a vector-valued integrand on [a, b].
pub fn simpson(f: &dyn Fn(f64) -> Vec<f64>, a: f64, b: f64, intervals: usize) -> Vec<f64> {
    let n = if intervals % 2 == 0 { intervals } else { intervals + 1 };
    let h = (b - a) / n as f64;
    let mut acc = f(a);
    let fb = f(b);
    for i in 0..acc.len() {
        acc[i] += fb[i];
    }
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        let fx = f(a + k as f64 * h);
        for i in 0..acc.len() {
            acc[i] += w * fx[i];
        }
    }
    acc.iter().map(|s| s * h / 3.0).collect()
}

/// A small fully random conditional net (output layer randomized too, so
/// gradients are generically nonzero everywhere).
pub fn random_net(seed: u64, cfg: NetConfig) -> VelocityNet {
    let mut rng = substream(seed, "init");
    let mut net = VelocityNet::init(cfg, &mut rng).unwrap();
    let blocks: Vec<Vec<f64>> = net
        .param_blocks()
        .iter()
        .map(|b| b.iter().map(|_| rng.random_range(-0.5..0.5)).collect())
        .collect();
    net.set_param_blocks(&blocks).unwrap();
    net
}

pub fn tiny_cfg(num_classes: usize) -> NetConfig {
    NetConfig {
        data_dim: 2,
        hidden_dim: 6,
        hidden_layers: 2,
        time_embed_dim: 4,
        num_classes,
        cond_embed_dim: 4,
    }
}

/// Pack a net's parameter blocks into one flat vector (for fd sweeps).
pub fn flatten_params(net: &VelocityNet) -> Vec<f64> {
    net.param_blocks().into_iter().flatten().collect()
}

/// Write a flat vector back into the net's parameter blocks.
pub fn unflatten_params(net: &mut VelocityNet, flat: &[f64]) {
    let mut blocks = net.param_blocks();
    let mut off = 0;
    for b in blocks.iter_mut() {
        let n = b.len();
        b.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    net.set_param_blocks(&blocks).unwrap();
}

/// Random batch inputs for a net.
pub fn random_inputs(
    rng: &mut ChaCha8Rng,
    batch: usize,
    dim: usize,
    num_classes: usize,
) -> (Tensor, Tensor, Tensor, Option<Vec<usize>>) {
    let z = Tensor::matrix(
        batch,
        dim,
        (0..batch * dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap();
    let mut times: Vec<(f64, f64)> = (0..batch)
        .map(|_| {
            let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
            if a <= b {
                (a, b)
            } else {
                (b, a)
            }
        })
        .collect();
    times.iter_mut().for_each(|p| *p = (p.0, p.1.max(p.0 + 1e-3).min(1.0)));
    let r = Tensor::vector(times.iter().map(|p| p.0).collect());
    let t = Tensor::vector(times.iter().map(|p| p.1).collect());
    let cond = (num_classes > 0)
        .then(|| (0..batch).map(|_| rng.random_range(0..=num_classes)).collect());
    (z, r, t, cond)
}

/// Scalar loss used for gradient checks: mean of squares of the net output.
pub fn scalar_loss_of_params(
    net: &VelocityNet,
    flat: &[f64],
    z: &Tensor,
    r: &Tensor,
    t: &Tensor,
    cond: Option<&[usize]>,
) -> f64 {
    let mut probe = net.with_param_blocks(&net.param_blocks()).unwrap();
    unflatten_params(&mut probe, flat);
    let out = probe.forward(z, r, t, cond).unwrap();
    out.square().mean().item()
}

/// Reverse-mode gradient of the same scalar loss, flattened.
pub fn reverse_grad_of_params(
    net: &VelocityNet,
    z: &Tensor,
    r: &Tensor,
    t: &Tensor,
    cond: Option<&[usize]>,
) -> Vec<f64> {
    let tape = Tape::new();
    let tracked = net.track(&tape);
    let out = tracked.forward(z, r, t, cond).unwrap();
    let loss = out.square().mean();
    let grads = splitmeanflow::autodiff::backward(&loss).unwrap();
    tracked
        .param_grads(&grads)
        .unwrap()
        .into_iter()
        .flatten()
        .collect()
}
