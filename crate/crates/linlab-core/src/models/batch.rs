//! Whole-dataset forward and loss-gradient passes, expressed as matrix
//! products so full-batch training is not bound by per-sample matvecs.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::models::network::Network;
use crate::numerics::DenseMatrix;

/// Per-layer batched activations; row `a` of each matrix belongs to input
/// `a` of the batch.
pub struct BatchTrace {
    pub pre: Vec<DenseMatrix>,
    pub post: Vec<DenseMatrix>,
}

impl BatchTrace {
    /// Network outputs, one per batch row.
    pub fn outputs(&self) -> Vec<f64> {
        let last = self.pre.last().expect("at least one layer");
        (0..last.rows()).map(|a| last.get(a, 0)).collect()
    }
}

fn layer_input_batch(net: &Network, inputs: &DenseMatrix, trace: &BatchTrace, l: usize) -> DenseMatrix {
    let n = inputs.rows();
    let fan = net.fan_in(l);
    let mut z = DenseMatrix::zeros(n, fan).expect("positive dims");
    let blocks = net.input_blocks(l);
    for (src, range) in blocks {
        let src_m: &DenseMatrix = if src == 0 { inputs } else { &trace.post[src - 1] };
        for a in 0..n {
            z.row_mut(a)[range.clone()].copy_from_slice(src_m.row(a));
        }
    }
    z
}

pub fn forward_batch(net: &Network, theta: &[f64], inputs: &DenseMatrix) -> Result<BatchTrace> {
    if theta.len() != net.param_len() {
        return Err(Error::InvalidArgument("theta length mismatch".into()));
    }
    if inputs.cols() != net.input_dim() {
        return Err(Error::InvalidArgument("input dimension mismatch".into()));
    }
    let act = net.activation();
    let mut trace = BatchTrace {
        pre: Vec::with_capacity(net.num_layers()),
        post: Vec::with_capacity(net.num_layers()),
    };
    for l in 1..=net.num_layers() {
        let z = layer_input_batch(net, inputs, &trace, l);
        let shape = net.layout().layer(l);
        let w = DenseMatrix::from_vec(
            shape.rows,
            shape.cols,
            theta[shape.offset..shape.offset + shape.len()].to_vec(),
        )?;
        let mut pre = z.matmul_nt(&w);
        let inv = 1.0 / fmath::sqrt(shape.cols as f64);
        for v in pre.data_mut() {
            *v *= inv;
        }
        if !pre.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NumericFailure(alloc::format!(
                "non-finite pre-activation at layer {l}"
            )));
        }
        let mut post = pre.clone();
        for v in post.data_mut() {
            *v = act.apply(*v);
        }
        trace.pre.push(pre);
        trace.post.push(post);
    }
    Ok(trace)
}

/// Square loss `0.5 * sum_a (f(x_a) - y_a)^2` and its full parameter
/// gradient, accumulated over the whole batch with one backward pass.
pub fn loss_and_grad(
    net: &Network,
    theta: &[f64],
    inputs: &DenseMatrix,
    labels: &[f64],
    grad: &mut [f64],
) -> Result<f64> {
    let n = inputs.rows();
    if labels.len() != n {
        return Err(Error::InvalidArgument("labels/inputs length mismatch".into()));
    }
    if grad.len() != net.param_len() {
        return Err(Error::InvalidArgument("gradient buffer length mismatch".into()));
    }
    let trace = forward_batch(net, theta, inputs)?;
    let outputs = trace.outputs();
    let mut loss = 0.0;
    let mut resid = DenseMatrix::zeros(n, 1)?;
    for a in 0..n {
        let r = outputs[a] - labels[a];
        loss += 0.5 * r * r;
        resid.set(a, 0, r);
    }
    grad.fill(0.0);

    let act = net.activation();
    let num_layers = net.num_layers();
    // Cotangents of the batched pre-activations, filled top-down. DenseNet
    // layers fan their input cotangent out to every earlier layer, so keep
    // per-layer accumulators and finalize layer l-1 once every consumer
    // above it has contributed.
    let mut dpre: Vec<Option<DenseMatrix>> = (0..num_layers).map(|_| None).collect();
    let mut dpost_acc: Vec<DenseMatrix> = (1..num_layers)
        .map(|l| DenseMatrix::zeros(n, net.width(l)).expect("positive dims"))
        .collect();
    dpre[num_layers - 1] = Some(resid);

    for l in (1..=num_layers).rev() {
        let dp = dpre[l - 1].take().expect("cotangent computed");
        let shape = net.layout().layer(l);
        let inv = 1.0 / fmath::sqrt(shape.cols as f64);
        let z = layer_input_batch(net, inputs, &trace, l);
        // grad W(l) = dpre^T Z / sqrt(fan).
        let dpt = dp.transpose();
        let gw = dpt.matmul(&z);
        let gslice = &mut grad[shape.offset..shape.offset + shape.len()];
        for (g, &v) in gslice.iter_mut().zip(gw.data()) {
            *g = v * inv;
        }
        if l == 1 {
            continue;
        }
        // Push dZ = dpre W / sqrt(fan) into the input-block accumulators.
        let w = DenseMatrix::from_vec(
            shape.rows,
            shape.cols,
            theta[shape.offset..shape.offset + shape.len()].to_vec(),
        )?;
        let dz = dp.matmul(&w);
        for (src, range) in net.input_blocks(l) {
            if src == 0 {
                continue;
            }
            let acc = &mut dpost_acc[src - 1];
            for a in 0..n {
                let dz_row = &dz.row(a)[range.clone()];
                for (t, &v) in acc.row_mut(a).iter_mut().zip(dz_row) {
                    *t += v * inv;
                }
            }
        }
        // Everything feeding layer l-1's post-activations has now been
        // accumulated (consumers are processed in descending order).
        let mut dpre_prev = dpost_acc[l - 2].clone();
        let pre_prev = &trace.pre[l - 2];
        for a in 0..n {
            for (t, &p) in dpre_prev.row_mut(a).iter_mut().zip(pre_prev.row(a)) {
                *t *= act.d1(p);
            }
        }
        dpre[l - 2] = Some(dpre_prev);
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::activation::Activation;
    use crate::models::network::{build_network, NetworkSpec};
    use crate::numerics::Rng;

    fn batch_of(net: &Network, rng: &mut Rng, n: usize) -> DenseMatrix {
        DenseMatrix::gaussian(n, net.input_dim(), rng).unwrap()
    }

    #[test]
    fn batched_forward_matches_single() {
        for spec in [
            NetworkSpec::mlp(3, &[5, 4], Activation::Tanh),
            NetworkSpec::densenet(3, &[5, 4], Activation::Sigmoid),
        ] {
            let mut rng = Rng::new(21);
            let (net, theta) = build_network(spec, &mut rng).unwrap();
            let x = batch_of(&net, &mut rng, 6);
            let bt = forward_batch(&net, theta.values(), &x).unwrap();
            for a in 0..6 {
                let t = net.forward(theta.values(), x.row(a)).unwrap();
                assert!((bt.outputs()[a] - t.output()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_loss_grad_matches_central_differences() {
        for spec in [
            NetworkSpec::mlp(2, &[4, 3], Activation::Tanh),
            NetworkSpec::densenet(2, &[4, 3], Activation::Softplus),
        ] {
            let mut rng = Rng::new(22);
            let (net, theta) = build_network(spec, &mut rng).unwrap();
            let x = batch_of(&net, &mut rng, 5);
            let labels: Vec<f64> = (0..5).map(|_| rng.rademacher()).collect();
            let mut grad = vec![0.0; net.param_len()];
            loss_and_grad(&net, theta.values(), &x, &labels, &mut grad).unwrap();

            let loss_fn = |t: &[f64]| {
                let bt = forward_batch(&net, t, &x).unwrap();
                bt.outputs()
                    .iter()
                    .zip(&labels)
                    .map(|(f, y)| 0.5 * (f - y) * (f - y))
                    .sum::<f64>()
            };
            let mut probe = Rng::new(23);
            for _ in 0..25 {
                let i = probe.below(net.param_len() as u64) as usize;
                let h = crate::numerics::fd_step(theta.values()[i]);
                let fd =
                    crate::numerics::central_diff(loss_fn, theta.values(), i, h).unwrap();
                let denom = grad[i].abs().max(fd.abs()).max(1e-8);
                assert!(
                    (grad[i] - fd).abs() / denom < 1e-6,
                    "coord {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }
}
