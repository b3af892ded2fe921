//! Exact reverse-mode gradients and Hessian-vector products for the network
//! output or any single neuron, partial gradients restricted to parameter
//! sub-spaces, sampled smoothness estimates, and the matrix-free spectral
//! norm of the layer-Jacobian Gram operator.
//!
//! Every weight-gradient block of a scalar target has rank one: the block
//! for layer `k` is `d(k) z(k-1)^T / sqrt(fan_k)`, where `d(k)` is the
//! cotangent of the layer-`k` pre-activations and `z(k-1)` is the layer
//! input. All routines here are built on that factorization; the cotangent
//! recursion is run for a whole stack of seed rows at once so callers can
//! batch many targets into matrix products.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::fmath;
use crate::models::assembly::AssemblyModel;
use crate::models::network::{EvalTrace, LayerShape, Network};
use crate::numerics::rng::Rng;
use crate::numerics::{self, DenseMatrix, SpectralEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pre,
    Post,
}

/// What to differentiate: the network output, or one neuron of one layer
/// before or after its activation. Layers are 1-based to match the model
/// definition; neuron indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Output,
    Neuron {
        layer: usize,
        index: usize,
        stage: Stage,
    },
}

impl GradTarget {
    pub fn pre(layer: usize, index: usize) -> Self {
        GradTarget::Neuron {
            layer,
            index,
            stage: Stage::Pre,
        }
    }

    pub fn post(layer: usize, index: usize) -> Self {
        GradTarget::Neuron {
            layer,
            index,
            stage: Stage::Post,
        }
    }

    pub fn resolve(&self, net: &Network) -> Result<(usize, usize, Stage)> {
        match *self {
            GradTarget::Output => Ok((net.num_layers(), 0, Stage::Pre)),
            GradTarget::Neuron { layer, index, stage } => {
                if layer == 0 || layer > net.num_layers() {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "layer {layer} out of range 1..={}",
                        net.num_layers()
                    )));
                }
                if index >= net.width(layer) {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "neuron {index} out of range for layer {layer} of width {}",
                        net.width(layer)
                    )));
                }
                Ok((layer, index, stage))
            }
        }
    }
}

/// A Hessian-vector probe: direction, base point and target, bundled so a
/// sweep can carry its probes around as plain data.
#[derive(Debug, Clone)]
pub struct HvpProbe {
    pub base: Vec<f64>,
    pub direction: Vec<f64>,
    pub target: GradTarget,
}

impl HvpProbe {
    pub fn run(&self, net: &Network, x: &[f64]) -> Result<Vec<f64>> {
        hvp(net, &self.base, x, &self.direction, self.target)
    }
}

/// Parameter sub-spaces named by the layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlice {
    Full,
    /// `theta(l)`: all layers up to and including `l`.
    UpToLayer(usize),
    Layer(usize),
    Row {
        layer: usize,
        index: usize,
    },
}

impl ParamSlice {
    pub fn resolve(&self, net: &Network) -> Result<Range<usize>> {
        let layout = net.layout();
        let check = |l: usize| -> Result<()> {
            if l == 0 || l > net.num_layers() {
                Err(Error::InvalidArgument(alloc::format!(
                    "layer {l} out of range 1..={}",
                    net.num_layers()
                )))
            } else {
                Ok(())
            }
        };
        match *self {
            ParamSlice::Full => Ok(0..layout.total_len()),
            ParamSlice::UpToLayer(l) => {
                check(l)?;
                Ok(0..layout.prefix_len(l))
            }
            ParamSlice::Layer(l) => {
                check(l)?;
                Ok(layout.layer_range(l))
            }
            ParamSlice::Row { layer, index } => {
                check(layer)?;
                if index >= net.width(layer) {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "row {index} out of range for layer {layer}"
                    )));
                }
                Ok(layout.row_range(layer, index))
            }
        }
    }
}

#[inline]
fn w_slice<'a>(theta: &'a [f64], shape: &LayerShape) -> &'a [f64] {
    &theta[shape.offset..shape.offset + shape.len()]
}

/// Layer inputs `z(l-1)` for `l = 1..=up_to`, materialized once.
pub(crate) fn layer_inputs(net: &Network, trace: &EvalTrace, up_to: usize) -> Vec<Vec<f64>> {
    (1..=up_to).map(|l| net.layer_input(trace, l)).collect()
}

/// Runs the cotangent recursion down from `seed_layer` for a stack of seed
/// rows (one row per target). Returns `stacks[k-1]`, an `S x m_k` matrix of
/// pre-activation cotangents, for every `k <= seed_layer`.
pub(crate) fn cotangent_stacks(
    net: &Network,
    theta: &[f64],
    trace: &EvalTrace,
    seed_layer: usize,
    seeds: DenseMatrix,
) -> Vec<DenseMatrix> {
    let s = seeds.rows();
    let act = net.activation();
    let mut stacks: Vec<Option<DenseMatrix>> = (0..seed_layer).map(|_| None).collect();
    // Accumulators for the post-activation cotangents of layers below the
    // seed. A DenseNet layer contributes to every earlier layer, so these
    // are finalized only when the descending loop reaches them.
    let mut acc: Vec<Option<DenseMatrix>> = (0..seed_layer).map(|_| None).collect();
    stacks[seed_layer - 1] = Some(seeds);
    for k in (2..=seed_layer).rev() {
        let dt = stacks[k - 1].as_ref().expect("computed");
        let shape = net.layout().layer(k);
        let inv = 1.0 / fmath::sqrt(shape.cols as f64);
        let mut u = vec![0.0; s * shape.cols];
        numerics::gemm(s, shape.rows, shape.cols, dt.data(), w_slice(theta, shape), &mut u);
        for (src, range) in net.input_blocks(k) {
            if src == 0 {
                continue;
            }
            let width = range.len();
            let a = acc[src - 1].get_or_insert_with(|| {
                DenseMatrix::zeros(s, width).expect("positive dims")
            });
            for row in 0..s {
                let u_row = &u[row * shape.cols + range.start..row * shape.cols + range.end];
                for (t, &v) in a.row_mut(row).iter_mut().zip(u_row) {
                    *t += v * inv;
                }
            }
        }
        let mut d = acc[k - 2].take().expect("layer below seed always has a consumer");
        let pre_prev = &trace.pre[k - 2];
        for row in 0..s {
            for (t, &p) in d.row_mut(row).iter_mut().zip(pre_prev) {
                *t *= act.d1(p);
            }
        }
        stacks[k - 2] = Some(d);
    }
    stacks.into_iter().map(|m| m.expect("filled")).collect()
}

fn seed_for(net: &Network, trace: &EvalTrace, layer: usize, index: usize, stage: Stage) -> DenseMatrix {
    let mut seeds = DenseMatrix::zeros(1, net.width(layer)).expect("positive dims");
    let v = match stage {
        Stage::Pre => 1.0,
        Stage::Post => net.activation().d1(trace.pre[layer - 1][index]),
    };
    seeds.set(0, index, v);
    seeds
}

/// Value of the target given a forward trace.
pub fn target_value(net: &Network, trace: &EvalTrace, target: GradTarget) -> Result<f64> {
    let (layer, index, stage) = target.resolve(net)?;
    Ok(match stage {
        Stage::Pre => trace.pre[layer - 1][index],
        Stage::Post => trace.post[layer - 1][index],
    })
}

/// Exact reverse-mode gradient of the target with respect to the full flat
/// parameter vector. Entries for parameters the target does not depend on
/// are exactly zero.
pub fn grad(net: &Network, theta: &[f64], x: &[f64], target: GradTarget) -> Result<Vec<f64>> {
    let (layer, index, stage) = target.resolve(net)?;
    let trace = net.forward(theta, x)?;
    Ok(grad_with_trace(net, theta, &trace, layer, index, stage))
}

pub(crate) fn grad_with_trace(
    net: &Network,
    theta: &[f64],
    trace: &EvalTrace,
    layer: usize,
    index: usize,
    stage: Stage,
) -> Vec<f64> {
    let seeds = seed_for(net, trace, layer, index, stage);
    let stacks = cotangent_stacks(net, theta, trace, layer, seeds);
    let zs = layer_inputs(net, trace, layer);
    let mut out = vec![0.0; net.param_len()];
    for k in 1..=layer {
        let shape = net.layout().layer(k);
        let inv = 1.0 / fmath::sqrt(shape.cols as f64);
        let d = stacks[k - 1].row(0);
        let z = &zs[k - 1];
        for (i, &di) in d.iter().enumerate() {
            if di == 0.0 {
                continue;
            }
            let r = net.layout().row_range(k, i);
            numerics::axpy(di * inv, z, &mut out[r]);
        }
    }
    out
}

/// Gradient restricted to a layout slice. Concatenating the `Layer(l)`
/// slices for `l = 1..=L` reproduces the full gradient exactly.
pub fn partial_grad(
    net: &Network,
    theta: &[f64],
    x: &[f64],
    target: GradTarget,
    slice: ParamSlice,
) -> Result<Vec<f64>> {
    let range = slice.resolve(net)?;
    let g = grad(net, theta, x, target)?;
    Ok(g[range].to_vec())
}

/// Tangent (directional-derivative) trace along `v`: `rpre[l-1]` and
/// `rpost[l-1]` are the derivatives of the layer-`l` activations in the
/// direction `v` at the current parameters.
pub(crate) struct TangentTrace {
    pub rpre: Vec<Vec<f64>>,
    pub rpost: Vec<Vec<f64>>,
}

pub(crate) fn tangent_forward(
    net: &Network,
    theta: &[f64],
    trace: &EvalTrace,
    zs: &[Vec<f64>],
    v: &[f64],
    up_to: usize,
) -> TangentTrace {
    let act = net.activation();
    let mut rpre: Vec<Vec<f64>> = Vec::with_capacity(up_to);
    let mut rpost: Vec<Vec<f64>> = Vec::with_capacity(up_to);
    for l in 1..=up_to {
        let shape = net.layout().layer(l);
        let inv = 1.0 / fmath::sqrt(shape.cols as f64);
        let w = w_slice(theta, shape);
        let vw = w_slice(v, shape);
        // rz(l-1) mirrors the layer input with x contributing zero tangent.
        let rz = tangent_layer_input(net, &rpost, l, shape.cols);
        let mut rp = vec![0.0; shape.rows];
        for (i, rp_i) in rp.iter_mut().enumerate() {
            let row = &w[i * shape.cols..(i + 1) * shape.cols];
            let vrow = &vw[i * shape.cols..(i + 1) * shape.cols];
            *rp_i = (numerics::dot(vrow, &zs[l - 1]) + numerics::dot(row, &rz)) * inv;
        }
        let rq = rp
            .iter()
            .zip(&trace.pre[l - 1])
            .map(|(&r, &p)| act.d1(p) * r)
            .collect();
        rpre.push(rp);
        rpost.push(rq);
    }
    TangentTrace { rpre, rpost }
}

fn tangent_layer_input(net: &Network, rpost: &[Vec<f64>], l: usize, fan: usize) -> Vec<f64> {
    let mut rz = vec![0.0; fan];
    for (src, range) in net.input_blocks(l) {
        if src == 0 {
            continue; // input tangent is zero
        }
        rz[range].copy_from_slice(&rpost[src - 1]);
    }
    rz
}

/// Hessian-vector product `H v` of the target, computed by differentiating
/// the reverse pass along `v` (forward-over-reverse). Exact to rounding.
pub fn hvp(
    net: &Network,
    theta: &[f64],
    x: &[f64],
    v: &[f64],
    target: GradTarget,
) -> Result<Vec<f64>> {
    if v.len() != net.param_len() {
        return Err(Error::InvalidArgument("direction length mismatch".into()));
    }
    if !v.iter().all(|t| t.is_finite()) {
        return Err(Error::NumericFailure("direction must be finite".into()));
    }
    let (ls, index, stage) = target.resolve(net)?;
    let trace = net.forward(theta, x)?;
    let zs = layer_inputs(net, &trace, ls);
    let tangent = tangent_forward(net, theta, &trace, &zs, v, ls);
    let act = net.activation();

    // Seed cotangent and its tangent at the target layer.
    let m_ls = net.width(ls);
    let mut d = vec![0.0; m_ls];
    let mut rd = vec![0.0; m_ls];
    match stage {
        Stage::Pre => d[index] = 1.0,
        Stage::Post => {
            let p = trace.pre[ls - 1][index];
            d[index] = act.d1(p);
            rd[index] = act.d2(p) * tangent.rpre[ls - 1][index];
        }
    }

    let mut out = vec![0.0; net.param_len()];
    // Accumulators of (cotangent, tangent-of-cotangent) for post-activation
    // layers below the seed, finalized in descending order.
    let mut acc: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..ls).map(|_| None).collect();
    let mut cur = (d, rd);
    for k in (1..=ls).rev() {
        let (d, rd) = &cur;
        let shape = net.layout().layer(k);
        let inv = 1.0 / fmath::sqrt(shape.cols as f64);
        let w = w_slice(theta, shape);
        let vw = w_slice(v, shape);
        let z = &zs[k - 1];
        let rz = tangent_layer_input(net, &tangent.rpost, k, shape.cols);
        // H v block for W(k): [rd x z + d x rz] / sqrt(fan).
        for i in 0..shape.rows {
            let r = net.layout().row_range(k, i);
            let o = &mut out[r];
            if rd[i] != 0.0 {
                numerics::axpy(rd[i] * inv, z, o);
            }
            if d[i] != 0.0 {
                numerics::axpy(d[i] * inv, &rz, o);
            }
        }
        if k == 1 {
            break;
        }
        // Push u = W^T d / sqrt(fan) and ru = (V^T d + W^T rd) / sqrt(fan)
        // into the block accumulators.
        let mut u = vec![0.0; shape.cols];
        let mut ru = vec![0.0; shape.cols];
        for i in 0..shape.rows {
            let row = &w[i * shape.cols..(i + 1) * shape.cols];
            let vrow = &vw[i * shape.cols..(i + 1) * shape.cols];
            if d[i] != 0.0 {
                numerics::axpy(d[i] * inv, row, &mut u);
                numerics::axpy(d[i] * inv, vrow, &mut ru);
            }
            if rd[i] != 0.0 {
                numerics::axpy(rd[i] * inv, row, &mut ru);
            }
        }
        for (src, range) in net.input_blocks(k) {
            if src == 0 {
                continue;
            }
            let width = range.len();
            let slot = acc[src - 1].get_or_insert_with(|| (vec![0.0; width], vec![0.0; width]));
            for (t, &s) in slot.0.iter_mut().zip(&u[range.clone()]) {
                *t += s;
            }
            for (t, &s) in slot.1.iter_mut().zip(&ru[range]) {
                *t += s;
            }
        }
        // Finalize layer k-1: d = s1 * da, rd = s2 * rpre * da + s1 * rda.
        let (da, rda) = acc[k - 2].take().expect("consumer processed");
        let pre_prev = &trace.pre[k - 2];
        let rpre_prev = &tangent.rpre[k - 2];
        let mut d_new = vec![0.0; da.len()];
        let mut rd_new = vec![0.0; da.len()];
        for i in 0..da.len() {
            let s1 = act.d1(pre_prev[i]);
            let s2 = act.d2(pre_prev[i]);
            d_new[i] = s1 * da[i];
            rd_new[i] = s2 * rpre_prev[i] * da[i] + s1 * rda[i];
        }
        cur = (d_new, rd_new);
    }
    Ok(out)
}

/// Gradient of `sum_i u_i post(l)_i` with respect to `theta(l)` (the
/// vector-Jacobian product of the layer-`l` post-activations).
pub(crate) fn vjp_post(
    net: &Network,
    theta: &[f64],
    trace: &EvalTrace,
    layer: usize,
    u: &[f64],
) -> Vec<f64> {
    let act = net.activation();
    let mut seeds = DenseMatrix::zeros(1, net.width(layer)).expect("positive dims");
    for (i, (&ui, &p)) in u.iter().zip(&trace.pre[layer - 1]).enumerate() {
        seeds.set(0, i, ui * act.d1(p));
    }
    let stacks = cotangent_stacks(net, theta, trace, layer, seeds);
    let zs = layer_inputs(net, trace, layer);
    let mut out = vec![0.0; net.layout().prefix_len(layer)];
    for k in 1..=layer {
        let shape = net.layout().layer(k);
        let inv = 1.0 / fmath::sqrt(shape.cols as f64);
        let d = stacks[k - 1].row(0);
        let z = &zs[k - 1];
        for (i, &di) in d.iter().enumerate() {
            if di == 0.0 {
                continue;
            }
            let r = net.layout().row_range(k, i);
            numerics::axpy(di * inv, z, &mut out[r]);
        }
    }
    out
}

/// Jacobian-vector product of the layer-`l` post-activations along a
/// direction over `theta(l)`.
pub(crate) fn jvp_post(
    net: &Network,
    theta: &[f64],
    trace: &EvalTrace,
    zs: &[Vec<f64>],
    layer: usize,
    dir: &[f64],
) -> Vec<f64> {
    debug_assert_eq!(dir.len(), net.layout().prefix_len(layer));
    let mut full = vec![0.0; net.param_len()];
    full[..dir.len()].copy_from_slice(dir);
    let t = tangent_forward(net, theta, trace, zs, &full, layer);
    t.rpost[layer - 1].clone()
}

/// Spectral norm of the Gram operator `J J^T` of the layer-`l`
/// post-activation Jacobian `J = d post(l) / d theta(l)`, estimated by
/// power iteration built from one VJP and one JVP per application. The
/// `m_l x p(l)` Jacobian is never materialized.
pub fn jacobian_gram_spectral(
    net: &Network,
    theta: &[f64],
    x: &[f64],
    layer: usize,
    tol: f64,
    max_iter: usize,
) -> Result<SpectralEstimate> {
    if layer == 0 || layer > net.num_layers() {
        return Err(Error::InvalidArgument("layer out of range".into()));
    }
    let trace = net.forward(theta, x)?;
    let zs = layer_inputs(net, &trace, layer);
    let m = net.width(layer);
    let apply = |u: &[f64], out: &mut [f64]| {
        let g = vjp_post(net, theta, &trace, layer, u);
        let r = jvp_post(net, theta, &trace, &zs, layer, &g);
        out.copy_from_slice(&r);
    };
    // The Gram operator is self-adjoint, so both roles use the same body.
    let apply2 = |u: &[f64], out: &mut [f64]| {
        let g = vjp_post(net, theta, &trace, layer, u);
        let r = jvp_post(net, theta, &trace, &zs, layer, &g);
        out.copy_from_slice(&r);
    };
    numerics::spectral_norm(apply, apply2, m, m, tol, max_iter)
}

/// A differentiable scalar model: the common face of network targets,
/// assemblies and toy functions for the linearity metrics.
pub trait DiffModel {
    fn param_len(&self) -> usize;
    fn eval(&self, theta: &[f64], x: &[f64]) -> f64;
    /// Writes the gradient into `out` and returns the value.
    fn grad_into(&self, theta: &[f64], x: &[f64], out: &mut [f64]) -> f64;
    /// Disjoint nonlinear parameter blocks (sub-model slices), if the model
    /// has that structure. Probing concentrated on single blocks is what
    /// exposes worst-case curvature; an empty list means unstructured.
    fn param_blocks(&self) -> Vec<Range<usize>> {
        Vec::new()
    }
}

/// A network plus a chosen target, viewed as one scalar model.
pub struct NetworkTarget<'a> {
    pub net: &'a Network,
    pub target: GradTarget,
}

impl<'a> NetworkTarget<'a> {
    pub fn new(net: &'a Network, target: GradTarget) -> Self {
        NetworkTarget { net, target }
    }
}

impl<'a> DiffModel for NetworkTarget<'a> {
    fn param_len(&self) -> usize {
        self.net.param_len()
    }

    fn eval(&self, theta: &[f64], x: &[f64]) -> f64 {
        let trace = self.net.forward(theta, x).expect("valid dimensions");
        target_value(self.net, &trace, self.target).expect("valid target")
    }

    fn grad_into(&self, theta: &[f64], x: &[f64], out: &mut [f64]) -> f64 {
        let (layer, index, stage) = self.target.resolve(self.net).expect("valid target");
        let trace = self.net.forward(theta, x).expect("valid dimensions");
        let g = grad_with_trace(self.net, theta, &trace, layer, index, stage);
        out.copy_from_slice(&g);
        target_value(self.net, &trace, self.target).expect("valid target")
    }

    fn param_blocks(&self) -> Vec<Range<usize>> {
        // Rows of the layers strictly below the target layer: the target is
        // linear in its own layer's rows, so curvature lives below.
        let (layer, _, _) = self.target.resolve(self.net).expect("valid target");
        let mut blocks = Vec::new();
        for l in 1..layer {
            for i in 0..self.net.width(l) {
                blocks.push(self.net.layout().row_range(l, i));
            }
        }
        blocks
    }
}

impl DiffModel for AssemblyModel {
    fn param_len(&self) -> usize {
        AssemblyModel::param_len(self)
    }

    fn eval(&self, theta: &[f64], x: &[f64]) -> f64 {
        self.value(theta, x)
    }

    fn grad_into(&self, theta: &[f64], x: &[f64], out: &mut [f64]) -> f64 {
        AssemblyModel::grad_into(self, theta, x, out)
    }

    fn param_blocks(&self) -> Vec<Range<usize>> {
        self.slices().iter().filter(|s| !s.is_empty()).cloned().collect()
    }
}

/// Exact Lagrange remainder of the first-order Taylor expansion at
/// `theta0`: `f(theta0 + delta) - f(theta0) - <grad f(theta0), delta>`.
pub fn quadratic_form<M: DiffModel + ?Sized>(
    model: &M,
    theta0: &[f64],
    delta: &[f64],
    x: &[f64],
) -> f64 {
    let mut g0 = vec![0.0; model.param_len()];
    let f0 = model.grad_into(theta0, x, &mut g0);
    let theta1: Vec<f64> = theta0.iter().zip(delta).map(|(a, b)| a + b).collect();
    let f1 = model.eval(&theta1, x);
    f1 - f0 - numerics::dot(&g0, delta)
}

/// A sampled lower bound on the gradient-Lipschitz constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaEstimate {
    pub beta_hat: f64,
    pub probes_used: usize,
}

fn lipschitz_ratio(g0: &[f64], g1: &[f64], r: f64) -> f64 {
    let mut s = 0.0;
    for (a, b) in g0.iter().zip(g1) {
        let d = a - b;
        s += d * d;
    }
    fmath::sqrt(s) / r
}

/// Smoothness of a generic scalar model over its own parameter space:
/// max over probes of `|grad(theta0 + delta) - grad(theta0)| / |delta|`
/// with probe radii stratified over `(0, r_max]`.
pub fn estimate_beta_model<M: DiffModel + ?Sized>(
    model: &M,
    theta0: &[f64],
    x: &[f64],
    r_max: f64,
    probes: usize,
    rng: &mut Rng,
) -> Result<BetaEstimate> {
    if probes == 0 {
        return Err(Error::InvalidArgument("need at least one probe".into()));
    }
    if !(r_max > 0.0) {
        return Err(Error::InvalidArgument("r_max must be positive".into()));
    }
    let p = model.param_len();
    let mut g0 = vec![0.0; p];
    model.grad_into(theta0, x, &mut g0);
    let mut g1 = vec![0.0; p];
    let mut theta1 = theta0.to_vec();
    let mut beta: f64 = 0.0;
    for j in 0..probes {
        let r = r_max * (j + 1) as f64 / probes as f64;
        let delta = numerics::sphere_sample(p, r, rng)?;
        for ((t, &t0), &d) in theta1.iter_mut().zip(theta0).zip(&delta) {
            *t = t0 + d;
        }
        model.grad_into(&theta1, x, &mut g1);
        beta = beta.max(lipschitz_ratio(&g0, &g1, r));
    }
    Ok(BetaEstimate {
        beta_hat: beta,
        probes_used: probes,
    })
}

/// Smoothness of the layer-`l` neurons of a network, each perturbed within
/// its own dependency slice (`theta(l-1)` plus its private row). Reports
/// the max over up to `max_targets` neurons (sampled without replacement
/// when the layer is wider) and `probes_per_target` probes each.
pub fn estimate_beta_net(
    net: &Network,
    theta0: &[f64],
    x: &[f64],
    layer: usize,
    stage: Stage,
    max_targets: usize,
    r_max: f64,
    probes_per_target: usize,
    rng: &mut Rng,
) -> Result<BetaEstimate> {
    if layer == 0 || layer > net.num_layers() {
        return Err(Error::InvalidArgument("layer out of range".into()));
    }
    if max_targets == 0 || probes_per_target == 0 {
        return Err(Error::InvalidArgument("need at least one target and probe".into()));
    }
    let m = net.width(layer);
    let indices = sample_indices(m, max_targets, rng);
    let shared = net.layout().prefix_len(layer - 1);
    let mut beta: f64 = 0.0;
    let mut probes_used = 0;
    let mut theta1 = theta0.to_vec();
    for &i in &indices {
        let target = GradTarget::Neuron { layer, index: i, stage };
        let g0 = grad(net, theta0, x, target)?;
        let row = net.layout().row_range(layer, i);
        let dep_dim = shared + row.len();
        for j in 0..probes_per_target {
            let r = r_max * (j + 1) as f64 / probes_per_target as f64;
            let s = numerics::sphere_sample(dep_dim, r, rng)?;
            theta1.copy_from_slice(theta0);
            for (t, &d) in theta1[..shared].iter_mut().zip(&s[..shared]) {
                *t += d;
            }
            for (t, &d) in theta1[row.clone()].iter_mut().zip(&s[shared..]) {
                *t += d;
            }
            let g1 = grad(net, &theta1, x, target)?;
            beta = beta.max(lipschitz_ratio(&g0, &g1, r));
            probes_used += 1;
        }
    }
    Ok(BetaEstimate {
        beta_hat: beta,
        probes_used,
    })
}

/// Smoothness of the sub-models of an assembly over their own parameter
/// slices, using the raw (unscaled) sub-model gradients.
pub fn estimate_beta_assembly(
    asm: &AssemblyModel,
    theta0: &[f64],
    x: &[f64],
    r_max: f64,
    probes_per_sub: usize,
    max_subs: usize,
    rng: &mut Rng,
) -> Result<BetaEstimate> {
    if probes_per_sub == 0 || max_subs == 0 {
        return Err(Error::InvalidArgument("need at least one probe and sub-model".into()));
    }
    let m = asm.num_sub_models();
    let indices = sample_indices(m, max_subs, rng);
    let mut beta: f64 = 0.0;
    let mut probes_used = 0;
    let mut theta1 = theta0.to_vec();
    for &i in &indices {
        let slice = asm.slices()[i].clone();
        if slice.is_empty() {
            continue;
        }
        let mut g0 = vec![0.0; slice.len()];
        asm.sub_grad(i, theta0, x, &mut g0);
        let mut g1 = vec![0.0; slice.len()];
        for j in 0..probes_per_sub {
            let r = r_max * (j + 1) as f64 / probes_per_sub as f64;
            let delta = numerics::sphere_sample(slice.len(), r, rng)?;
            theta1.copy_from_slice(theta0);
            for (t, &d) in theta1[slice.clone()].iter_mut().zip(&delta) {
                *t += d;
            }
            asm.sub_grad(i, &theta1, x, &mut g1);
            beta = beta.max(lipschitz_ratio(&g0, &g1, r));
            probes_used += 1;
        }
    }
    Ok(BetaEstimate {
        beta_hat: beta,
        probes_used,
    })
}

/// `count` distinct indices from `0..n` (all of them when `count >= n`),
/// drawn without replacement.
pub(crate) fn sample_indices(n: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    // Partial Fisher-Yates over an index table.
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + rng.below((n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::activation::Activation;
    use crate::models::network::{build_network, NetworkSpec};

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
    }

    #[test]
    fn layer1_pre_gradient_is_input_over_sqrt_d() {
        let mut rng = Rng::new(31);
        let (net, theta) =
            build_network(NetworkSpec::mlp(4, &[3, 2], Activation::Tanh), &mut rng).unwrap();
        let x = [1.0, -2.0, 0.5, 3.0];
        let g = grad(&net, theta.values(), &x, GradTarget::pre(1, 1)).unwrap();
        let row = net.layout().row_range(1, 1);
        let scale = 1.0 / (4.0f64).sqrt();
        for (k, gk) in g.iter().enumerate() {
            if row.contains(&k) {
                let j = k - row.start;
                assert!((gk - x[j] * scale).abs() < 1e-15);
            } else {
                assert_eq!(*gk, 0.0, "entry {k} should be exactly zero");
            }
        }
    }

    #[test]
    fn two_layer_output_weight_gradient_is_hidden_activation() {
        let mut rng = Rng::new(32);
        let (net, theta) =
            build_network(NetworkSpec::mlp(3, &[5], Activation::Tanh), &mut rng).unwrap();
        let x = [0.3, -0.8, 1.2];
        let trace = net.forward(theta.values(), &x).unwrap();
        let g = grad(&net, theta.values(), &x, GradTarget::Output).unwrap();
        let r = net.layout().layer_range(2);
        let scale = 1.0 / (5.0f64).sqrt();
        for (j, k) in r.enumerate() {
            assert!((g[k] - trace.post[0][j] * scale).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_everywhere() {
        let cases = [
            (NetworkSpec::mlp(3, &[4, 3], Activation::Tanh), GradTarget::Output),
            (
                NetworkSpec::mlp(3, &[4, 3], Activation::Sigmoid),
                GradTarget::pre(2, 1),
            ),
            (
                NetworkSpec::densenet(3, &[4, 3], Activation::Softplus),
                GradTarget::post(2, 2),
            ),
            (
                NetworkSpec::densenet(3, &[4, 3], Activation::Tanh),
                GradTarget::Output,
            ),
        ];
        for (ci, (spec, target)) in cases.into_iter().enumerate() {
            let mut rng = Rng::new(40 + ci as u64);
            let (net, theta) = build_network(spec, &mut rng).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let g = grad(&net, theta.values(), &x, target).unwrap();
            let f = |t: &[f64]| {
                let trace = net.forward(t, &x).unwrap();
                target_value(&net, &trace, target).unwrap()
            };
            for _ in 0..40 {
                let i = rng.below(net.param_len() as u64) as usize;
                let h = numerics::fd_step(theta.values()[i]);
                let fd = numerics::central_diff(f, theta.values(), i, h).unwrap();
                if fd.abs() < 1e-9 && g[i].abs() < 1e-9 {
                    continue;
                }
                assert!(
                    rel_err(g[i], fd) < 1e-6,
                    "case {ci} coord {i}: {} vs {}",
                    g[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn partial_grad_full_range_equals_grad() {
        let mut rng = Rng::new(50);
        let (net, theta) =
            build_network(NetworkSpec::mlp(2, &[4], Activation::Tanh), &mut rng).unwrap();
        let x = [0.5, -0.5];
        let g = grad(&net, theta.values(), &x, GradTarget::Output).unwrap();
        let pg = partial_grad(&net, theta.values(), &x, GradTarget::Output, ParamSlice::Full)
            .unwrap();
        assert_eq!(g, pg);
    }

    #[test]
    fn partial_grad_other_private_row_is_exact_zero() {
        let mut rng = Rng::new(51);
        let (net, theta) =
            build_network(NetworkSpec::mlp(3, &[6, 5], Activation::Sigmoid), &mut rng).unwrap();
        let x = [0.1, 0.2, 0.3];
        // Gradient of neuron (2, 1) w.r.t. the private row of neuron (2, 3).
        let pg = partial_grad(
            &net,
            theta.values(),
            &x,
            GradTarget::post(2, 1),
            ParamSlice::Row { layer: 2, index: 3 },
        )
        .unwrap();
        assert!(pg.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_slices_concatenate_to_full_gradient() {
        let mut rng = Rng::new(52);
        let (net, theta) =
            build_network(NetworkSpec::densenet(2, &[3, 3], Activation::Tanh), &mut rng)
                .unwrap();
        let x = [1.0, -1.0];
        let g = grad(&net, theta.values(), &x, GradTarget::Output).unwrap();
        let mut cat = Vec::new();
        for l in 1..=net.num_layers() {
            cat.extend(
                partial_grad(&net, theta.values(), &x, GradTarget::Output, ParamSlice::Layer(l))
                    .unwrap(),
            );
        }
        assert_eq!(g, cat);
    }

    #[test]
    fn hvp_of_linear_target_is_zero() {
        let mut rng = Rng::new(60);
        let (net, theta) =
            build_network(NetworkSpec::mlp(3, &[4], Activation::Tanh), &mut rng).unwrap();
        let x = [0.4, 0.5, -0.6];
        let v: Vec<f64> = (0..net.param_len()).map(|_| rng.normal()).collect();
        let h = hvp(&net, theta.values(), &x, &v, GradTarget::pre(1, 2)).unwrap();
        assert!(h.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn hvp_matches_fd_of_gradient() {
        for (ci, spec) in [
            NetworkSpec::mlp(2, &[4, 3], Activation::Tanh),
            NetworkSpec::densenet(2, &[4, 3], Activation::Sigmoid),
        ]
        .into_iter()
        .enumerate()
        {
            let mut rng = Rng::new(61 + ci as u64);
            let (net, theta) = build_network(spec, &mut rng).unwrap();
            let x = [0.7, -0.2];
            let target = GradTarget::Output;
            let p = net.param_len();
            let v = numerics::sphere_sample(p, 1.0, &mut rng).unwrap();
            let hv = hvp(&net, theta.values(), &x, &v, target).unwrap();
            let h = 1e-5;
            let tp: Vec<f64> = theta.values().iter().zip(&v).map(|(t, d)| t + h * d).collect();
            let tm: Vec<f64> = theta.values().iter().zip(&v).map(|(t, d)| t - h * d).collect();
            let gp = grad(&net, &tp, &x, target).unwrap();
            let gm = grad(&net, &tm, &x, target).unwrap();
            let scale = hv.iter().map(|t| t * t).sum::<f64>().sqrt().max(1e-12);
            for i in 0..p {
                let fd = (gp[i] - gm[i]) / (2.0 * h);
                assert!(
                    (hv[i] - fd).abs() / scale < 1e-5,
                    "case {ci} coord {i}: {} vs {}",
                    hv[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn hvp_is_linear_and_symmetric() {
        let mut rng = Rng::new(63);
        let (net, theta) =
            build_network(NetworkSpec::mlp(2, &[5, 4], Activation::Softplus), &mut rng).unwrap();
        let x = [0.2, 0.9];
        let p = net.param_len();
        let u = numerics::sphere_sample(p, 1.0, &mut rng).unwrap();
        let v = numerics::sphere_sample(p, 1.0, &mut rng).unwrap();
        let target = GradTarget::Output;
        let hu = hvp(&net, theta.values(), &x, &u, target).unwrap();
        let hv = hvp(&net, theta.values(), &x, &v, target).unwrap();
        // Linearity: H(2u + 3v) = 2 Hu + 3 Hv.
        let w: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * a + 3.0 * b).collect();
        let hw = hvp(&net, theta.values(), &x, &w, target).unwrap();
        let scale = hw.iter().map(|t| t * t).sum::<f64>().sqrt();
        for i in 0..p {
            let lin = 2.0 * hu[i] + 3.0 * hv[i];
            assert!((hw[i] - lin).abs() <= 1e-10 * scale.max(1.0));
        }
        // Symmetry: <u, Hv> = <v, Hu>.
        let uhv = numerics::dot(&u, &hv);
        let vhu = numerics::dot(&v, &hu);
        assert!(rel_err(uhv, vhu) < 1e-10, "{uhv} vs {vhu}");
    }

    #[test]
    fn two_layer_hvp_stays_in_sub_model_slice() {
        // Direction supported on one hidden neuron's parameters: the
        // product must vanish identically outside that neuron's slice.
        let mut rng = Rng::new(64);
        let (net, theta) =
            build_network(NetworkSpec::mlp(3, &[6], Activation::Tanh), &mut rng).unwrap();
        let x = [0.5, 0.1, -0.7];
        let p = net.param_len();
        let i = 2;
        let row1 = net.layout().row_range(1, i);
        let out_row = net.layout().row_range(2, 0);
        let u_idx = out_row.start + i;
        let mut v = vec![0.0; p];
        for k in row1.clone() {
            v[k] = rng.normal();
        }
        v[u_idx] = rng.normal();
        let h = hvp(&net, theta.values(), &x, &v, GradTarget::Output).unwrap();
        for k in 0..p {
            let in_slice = row1.contains(&k) || k == u_idx;
            if !in_slice {
                assert_eq!(h[k], 0.0, "leak at {k}");
            }
        }
    }

    #[test]
    fn quadratic_form_zero_delta_and_linear_cases() {
        let mut rng = Rng::new(65);
        let (net, theta) =
            build_network(NetworkSpec::mlp(2, &[3], Activation::Tanh), &mut rng).unwrap();
        let x = [0.3, 0.4];
        let model = NetworkTarget::new(&net, GradTarget::Output);
        let zero = vec![0.0; net.param_len()];
        assert_eq!(quadratic_form(&model, theta.values(), &zero, &x), 0.0);
        let lin = NetworkTarget::new(&net, GradTarget::pre(1, 0));
        let delta = numerics::sphere_sample(net.param_len(), 2.0, &mut rng).unwrap();
        let q = quadratic_form(&lin, theta.values(), &delta, &x);
        assert!(q.abs() < 1e-12);
    }

    struct Square;

    impl DiffModel for Square {
        fn param_len(&self) -> usize {
            1
        }
        fn eval(&self, theta: &[f64], _x: &[f64]) -> f64 {
            theta[0] * theta[0]
        }
        fn grad_into(&self, theta: &[f64], _x: &[f64], out: &mut [f64]) -> f64 {
            out[0] = 2.0 * theta[0];
            theta[0] * theta[0]
        }
    }

    struct SineModel;

    impl DiffModel for SineModel {
        fn param_len(&self) -> usize {
            1
        }
        fn eval(&self, theta: &[f64], _x: &[f64]) -> f64 {
            theta[0].sin()
        }
        fn grad_into(&self, theta: &[f64], _x: &[f64], out: &mut [f64]) -> f64 {
            out[0] = theta[0].cos();
            theta[0].sin()
        }
    }

    #[test]
    fn quadratic_form_of_square_toy() {
        let q = quadratic_form(&Square, &[0.0], &[1.0], &[]);
        assert!((q - 1.0).abs() < 1e-15);
    }

    #[test]
    fn beta_of_sine_is_at_most_one() {
        let mut rng = Rng::new(66);
        let est = estimate_beta_model(&SineModel, &[0.3], &[], 2.0, 400, &mut rng).unwrap();
        assert!(est.beta_hat <= 1.0 + 1e-9);
        assert!(est.beta_hat > 0.8, "beta {}", est.beta_hat);
    }

    #[test]
    fn beta_of_linear_target_is_zero() {
        let mut rng = Rng::new(67);
        let (net, theta) =
            build_network(NetworkSpec::mlp(2, &[3], Activation::Tanh), &mut rng).unwrap();
        let est = estimate_beta_net(
            &net,
            theta.values(),
            &[0.5, -0.5],
            1,
            Stage::Pre,
            3,
            1.0,
            10,
            &mut rng,
        )
        .unwrap();
        assert_eq!(est.beta_hat, 0.0);
    }

    #[test]
    fn jacobian_gram_layer1_matches_dense_oracle() {
        // Layer-1 rows are x/sqrt(d) in disjoint slices, so the Gram of the
        // post-activation Jacobian is diagonal with entries
        // d1(pre_i)^2 |x|^2 / d.
        let mut rng = Rng::new(70);
        let (net, theta) =
            build_network(NetworkSpec::mlp(4, &[6], Activation::Tanh), &mut rng).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let trace = net.forward(theta.values(), &x).unwrap();
        let xn2 = numerics::dot(&x, &x);
        let expected = trace.pre[0]
            .iter()
            .map(|&p| {
                let s = Activation::Tanh.d1(p);
                s * s * xn2 / 4.0
            })
            .fold(0.0f64, f64::max);
        let est =
            jacobian_gram_spectral(&net, theta.values(), &x, 1, 1e-12, 20_000).unwrap();
        assert!(
            (est.value - expected).abs() <= 1e-8 * expected,
            "{} vs {expected}",
            est.value
        );
    }

    #[test]
    fn jacobian_gram_identity_activation_single_layer() {
        let net = Network::new(NetworkSpec::mlp(5, &[3], Activation::Linear)).unwrap();
        let theta: Vec<f64> = (0..net.param_len()).map(|i| i as f64 * 0.1 - 0.7).collect();
        let x = [1.0, 2.0, -1.0, 0.5, 0.25];
        let xn2: f64 = x.iter().map(|v| v * v).sum();
        let est = jacobian_gram_spectral(&net, &theta, &x, 1, 1e-12, 10_000).unwrap();
        assert!((est.value - xn2 / 5.0).abs() < 1e-10);
    }

    use crate::models::network::Network;

    #[test]
    fn sample_indices_without_replacement() {
        let mut rng = Rng::new(71);
        let idx = sample_indices(100, 10, &mut rng);
        assert_eq!(idx.len(), 10);
        for w in idx.windows(2) {
            assert!(w[0] < w[1]);
        }
        let all = sample_indices(5, 10, &mut rng);
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }
}
