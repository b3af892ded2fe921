//! Pairwise inner products of neuron gradients and the empirical tangent
//! kernel, computed from the rank-one-per-layer factorization of weight
//! gradients instead of materialized gradient vectors.
//!
//! For targets seeded at layer `l`, the gradient block in layer `k` is
//! `d(k) z(k-1)^T / sqrt(fan_k)` with a right factor `z(k-1)` shared by all
//! targets, so
//!
//! ```text
//! <grad a, grad b> = sum_k <d_a(k), d_b(k)> <z_a(k-1), z_b(k-1)> / fan_k
//! ```
//!
//! exactly. For neuron pairs the inputs coincide and the `z` factor is a
//! squared norm; for the tangent kernel the targets are the output at
//! different inputs.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grad::{cotangent_stacks, layer_inputs};
use crate::models::network::Network;
use crate::numerics::{self, DenseMatrix};

/// Gram matrix of pre-activation gradients for the selected neurons of one
/// layer: entry `(a, b)` is the inner product of the full parameter
/// gradients of neurons `indices[a]` and `indices[b]`.
pub fn pre_activation_gram(
    net: &Network,
    theta: &[f64],
    x: &[f64],
    layer: usize,
    indices: &[usize],
) -> Result<DenseMatrix> {
    if layer == 0 || layer > net.num_layers() {
        return Err(Error::InvalidArgument("layer out of range".into()));
    }
    if indices.is_empty() {
        return Err(Error::InvalidArgument("need at least one neuron".into()));
    }
    let m = net.width(layer);
    if indices.iter().any(|&i| i >= m) {
        return Err(Error::InvalidArgument("neuron index out of range".into()));
    }
    let trace = net.forward(theta, x)?;
    let s = indices.len();
    let mut seeds = DenseMatrix::zeros(s, m)?;
    for (row, &i) in indices.iter().enumerate() {
        seeds.set(row, i, 1.0);
    }
    let stacks = cotangent_stacks(net, theta, &trace, layer, seeds);
    let zs = layer_inputs(net, &trace, layer);
    let mut gram = DenseMatrix::zeros(s, s)?;
    for k in 1..=layer {
        let z = &zs[k - 1];
        let weight = numerics::dot(z, z) / net.fan_in(k) as f64;
        if weight == 0.0 {
            continue;
        }
        let dd = stacks[k - 1].matmul_nt(&stacks[k - 1]);
        for (g, &d) in gram.data_mut().iter_mut().zip(dd.data()) {
            *g += weight * d;
        }
    }
    Ok(gram)
}

/// Empirical tangent kernel: `K[a][b] = <grad f(x_a), grad f(x_b)>` over
/// the full parameter vector, assembled from per-input cotangent stacks.
pub fn ntk(net: &Network, theta: &[f64], inputs: &[Vec<f64>]) -> Result<DenseMatrix> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("need at least one input".into()));
    }
    let num_layers = net.num_layers();
    let n = inputs.len();
    // Per input: the cotangent vectors d(k) and layer inputs z(k-1).
    let mut ds: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    let mut zs_all: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    for x in inputs {
        let trace = net.forward(theta, x)?;
        let mut seeds = DenseMatrix::zeros(1, 1)?;
        seeds.set(0, 0, 1.0);
        let stacks = cotangent_stacks(net, theta, &trace, num_layers, seeds);
        ds.push(stacks.iter().map(|s| s.row(0).to_vec()).collect());
        zs_all.push(layer_inputs(net, &trace, num_layers));
    }
    let mut k = DenseMatrix::zeros(n, n)?;
    for a in 0..n {
        for b in a..n {
            let mut acc = 0.0;
            for l in 0..num_layers {
                let dz = numerics::dot(&zs_all[a][l], &zs_all[b][l]);
                if dz == 0.0 {
                    continue;
                }
                acc += numerics::dot(&ds[a][l], &ds[b][l]) * dz / net.fan_in(l + 1) as f64;
            }
            k.set(a, b, acc);
            k.set(b, a, acc);
        }
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{grad, GradTarget};
    use crate::models::activation::Activation;
    use crate::models::network::{build_network, NetworkSpec};
    use crate::numerics::Rng;

    #[test]
    fn gram_matches_explicit_gradients() {
        for spec in [
            NetworkSpec::mlp(3, &[5, 4, 3], Activation::Tanh),
            NetworkSpec::densenet(3, &[5, 4, 3], Activation::Sigmoid),
        ] {
            let mut rng = Rng::new(80);
            let (net, theta) = build_network(spec, &mut rng).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            for layer in 1..=3usize {
                let m = net.width(layer);
                let indices: Vec<usize> = (0..m).collect();
                let gram =
                    pre_activation_gram(&net, theta.values(), &x, layer, &indices).unwrap();
                let grads: Vec<Vec<f64>> = indices
                    .iter()
                    .map(|&i| {
                        grad(&net, theta.values(), &x, GradTarget::pre(layer, i)).unwrap()
                    })
                    .collect();
                for a in 0..m {
                    for b in 0..m {
                        let expected = numerics::dot(&grads[a], &grads[b]);
                        let got = gram.get(a, b);
                        assert!(
                            (got - expected).abs() <= 1e-10 * (1.0 + expected.abs()),
                            "layer {layer} ({a},{b}): {got} vs {expected}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn layer1_gram_off_diagonal_exactly_zero() {
        let mut rng = Rng::new(81);
        let (net, theta) =
            build_network(NetworkSpec::mlp(4, &[6], Activation::Tanh), &mut rng).unwrap();
        let x = [0.2, -0.4, 0.6, -0.8];
        let indices: Vec<usize> = (0..6).collect();
        let gram = pre_activation_gram(&net, theta.values(), &x, 1, &indices).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                if a != b {
                    assert_eq!(gram.get(a, b), 0.0);
                }
            }
        }
    }

    #[test]
    fn ntk_matches_explicit_gradients_and_is_symmetric() {
        let mut rng = Rng::new(82);
        let (net, theta) =
            build_network(NetworkSpec::densenet(2, &[4, 3], Activation::Tanh), &mut rng)
                .unwrap();
        let inputs: Vec<Vec<f64>> =
            (0..5).map(|_| (0..2).map(|_| rng.normal()).collect()).collect();
        let k = ntk(&net, theta.values(), &inputs).unwrap();
        let grads: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| grad(&net, theta.values(), x, GradTarget::Output).unwrap())
            .collect();
        for a in 0..5 {
            for b in 0..5 {
                let expected = numerics::dot(&grads[a], &grads[b]);
                assert!(
                    (k.get(a, b) - expected).abs() <= 1e-10 * (1.0 + expected.abs()),
                    "({a},{b})"
                );
                assert_eq!(k.get(a, b), k.get(b, a));
            }
        }
    }
}
