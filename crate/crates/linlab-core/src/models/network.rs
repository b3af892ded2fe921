//! Fully-connected networks with a scalar output and no biases:
//!
//! ```text
//! z(0) = x
//! pre(l) = W(l) z(l-1) / sqrt(fan_l)      post(l) = act(pre(l))
//! f = pre(L)[0]
//! ```
//!
//! An MLP feeds layer `l` only `post(l-1)`. A DenseNet feeds it the
//! concatenation `[post(l-1), ..., post(1), x]`, and `fan_l` is always the
//! size of the layer input, so each layer is scaled by the square root of
//! its own fan-in.
//!
//! Parameters live in one flat vector; the layout maps layer matrices and
//! per-neuron rows onto disjoint slices of it, which is what the whole
//! assembly decomposition is expressed in.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::fmath;
use crate::models::activation::Activation;
use crate::numerics::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Mlp,
    DenseNet,
}

impl Architecture {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mlp" => Ok(Architecture::Mlp),
            "densenet" => Ok(Architecture::DenseNet),
            other => Err(Error::InvalidArgument(alloc::format!(
                "unknown architecture '{other}'"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Mlp => "mlp",
            Architecture::DenseNet => "densenet",
        }
    }
}

/// Architecture descriptor. `hidden` holds the widths `m_1 .. m_{L-1}`; the
/// output width is fixed to 1, so a spec with `hidden.len() = L - 1` builds
/// an `L`-layer network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub architecture: Architecture,
}

impl NetworkSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], activation: Activation) -> Self {
        NetworkSpec {
            input_dim,
            hidden: hidden.to_vec(),
            activation,
            architecture: Architecture::Mlp,
        }
    }

    pub fn densenet(input_dim: usize, hidden: &[usize], activation: Activation) -> Self {
        NetworkSpec {
            input_dim,
            hidden: hidden.to_vec(),
            activation,
            architecture: Architecture::DenseNet,
        }
    }

    /// Number of weight layers `L` (hidden layers plus the output layer).
    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be >= 1".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one hidden layer is required".into(),
            ));
        }
        if self.hidden.iter().any(|&m| m == 0) {
            return Err(Error::InvalidArgument("hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Width of layer `l` in `1..=L` (layer `L` is the scalar output).
    pub fn width(&self, layer: usize) -> usize {
        if layer == self.num_layers() {
            1
        } else {
            self.hidden[layer - 1]
        }
    }

    /// Fan-in of layer `l`: previous width for an MLP, total concatenated
    /// width for a DenseNet.
    pub fn fan_in(&self, layer: usize) -> usize {
        match self.architecture {
            Architecture::Mlp => {
                if layer == 1 {
                    self.input_dim
                } else {
                    self.hidden[layer - 2]
                }
            }
            Architecture::DenseNet => {
                let hidden_below: usize = self.hidden[..layer - 1].iter().sum();
                hidden_below + self.input_dim
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Maps layers and per-neuron rows onto disjoint slices of the flat
/// parameter vector. Layer `l` occupies `layer_range(l)`; row `i` of its
/// weight matrix (the incoming weights of neuron `i`) occupies
/// `row_range(l, i)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    layers: Vec<LayerShape>,
    total: usize,
}

impl ParamLayout {
    pub fn from_spec(spec: &NetworkSpec) -> ParamLayout {
        let mut layers = Vec::with_capacity(spec.num_layers());
        let mut offset = 0;
        for l in 1..=spec.num_layers() {
            let rows = spec.width(l);
            let cols = spec.fan_in(l);
            layers.push(LayerShape { offset, rows, cols });
            offset += rows * cols;
        }
        ParamLayout {
            layers,
            total: offset,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerShape {
        &self.layers[l - 1]
    }

    pub fn layer_range(&self, l: usize) -> Range<usize> {
        let s = self.layer(l);
        s.offset..s.offset + s.len()
    }

    pub fn row_range(&self, l: usize, i: usize) -> Range<usize> {
        let s = self.layer(l);
        debug_assert!(i < s.rows);
        let start = s.offset + i * s.cols;
        start..start + s.cols
    }

    /// Length of the parameter prefix `theta(l)` covering layers `1..=l`.
    pub fn prefix_len(&self, l: usize) -> usize {
        if l == 0 {
            0
        } else {
            self.layer_range(l).end
        }
    }
}

/// Flat 64-bit parameter vector plus the layout that names its slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<ParamLayout>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "parameter length {} does not match layout length {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-layer pre- and post-activations cached from one forward pass.
/// `pre[l-1]` and `post[l-1]` hold layer `l`; the output is `pre[L-1][0]`.
#[derive(Debug, Clone)]
pub struct EvalTrace {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl EvalTrace {
    pub fn output(&self) -> f64 {
        self.pre.last().expect("trace has at least one layer")[0]
    }
}

/// An immutable model: spec plus layout. Parameters are passed explicitly
/// to every evaluation, so concurrent use over distinct inputs is safe.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layout: Arc<ParamLayout>,
}

/// Builds the model and draws `theta_0` with i.i.d. standard-normal entries.
pub fn build_network(spec: NetworkSpec, rng: &mut Rng) -> Result<(Network, ParamVector)> {
    spec.validate()?;
    let net = Network::new(spec)?;
    let theta = net.init_params(rng);
    Ok((net, theta))
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layout = Arc::new(ParamLayout::from_spec(&spec));
        Ok(Network { spec, layout })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn layout_arc(&self) -> Arc<ParamLayout> {
        Arc::clone(&self.layout)
    }

    pub fn num_layers(&self) -> usize {
        self.spec.num_layers()
    }

    pub fn width(&self, layer: usize) -> usize {
        self.spec.width(layer)
    }

    pub fn fan_in(&self, layer: usize) -> usize {
        self.spec.fan_in(layer)
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn activation(&self) -> Activation {
        self.spec.activation
    }

    pub fn architecture(&self) -> Architecture {
        self.spec.architecture
    }

    pub fn param_len(&self) -> usize {
        self.layout.total_len()
    }

    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let mut values = vec![0.0; self.layout.total_len()];
        rng.fill_normal(&mut values);
        ParamVector {
            values,
            layout: Arc::clone(&self.layout),
        }
    }

    /// The input vector `z(l-1)` that layer `l` consumes, given the trace.
    pub(crate) fn layer_input(&self, trace: &EvalTrace, layer: usize) -> Vec<f64> {
        match self.spec.architecture {
            Architecture::Mlp => {
                if layer == 1 {
                    trace.input.clone()
                } else {
                    trace.post[layer - 2].clone()
                }
            }
            Architecture::DenseNet => {
                let mut z = Vec::with_capacity(self.fan_in(layer));
                for j in (1..layer).rev() {
                    z.extend_from_slice(&trace.post[j - 1]);
                }
                z.extend_from_slice(&trace.input);
                z
            }
        }
    }

    /// Column blocks of layer `l`'s weight matrix, as (source, range) pairs
    /// where source is the layer whose post-activations feed those columns
    /// (0 means the raw input).
    pub(crate) fn input_blocks(&self, layer: usize) -> Vec<(usize, Range<usize>)> {
        match self.spec.architecture {
            Architecture::Mlp => {
                if layer == 1 {
                    vec![(0, 0..self.spec.input_dim)]
                } else {
                    vec![(layer - 1, 0..self.width(layer - 1))]
                }
            }
            Architecture::DenseNet => {
                let mut blocks = Vec::new();
                let mut start = 0;
                for j in (1..layer).rev() {
                    let w = self.width(j);
                    blocks.push((j, start..start + w));
                    start += w;
                }
                blocks.push((0, start..start + self.spec.input_dim));
                blocks
            }
        }
    }

    pub fn forward(&self, theta: &[f64], x: &[f64]) -> Result<EvalTrace> {
        if theta.len() != self.param_len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "theta length {} does not match parameter count {}",
                theta.len(),
                self.param_len()
            )));
        }
        if x.len() != self.spec.input_dim {
            return Err(Error::InvalidArgument(alloc::format!(
                "input length {} does not match input_dim {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        let act = self.spec.activation;
        let num_layers = self.num_layers();
        let mut trace = EvalTrace {
            input: x.to_vec(),
            pre: Vec::with_capacity(num_layers),
            post: Vec::with_capacity(num_layers),
        };
        for l in 1..=num_layers {
            let z = self.layer_input(&trace, l);
            let shape = self.layout.layer(l);
            let inv_sqrt_fan = 1.0 / fmath::sqrt(shape.cols as f64);
            let w = &theta[shape.offset..shape.offset + shape.len()];
            let mut pre = vec![0.0; shape.rows];
            for (i, pi) in pre.iter_mut().enumerate() {
                let row = &w[i * shape.cols..(i + 1) * shape.cols];
                *pi = crate::numerics::dot(row, &z) * inv_sqrt_fan;
            }
            if !pre.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericFailure(alloc::format!(
                    "non-finite pre-activation at layer {l}"
                )));
            }
            let post = pre.iter().map(|&v| act.apply(v)).collect();
            trace.pre.push(pre);
            trace.post.push(post);
        }
        Ok(trace)
    }
}
