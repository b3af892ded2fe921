//! Model families: fully-connected networks (MLP and DenseNet variants)
//! with per-neuron parameter slices, and generic assemblies of sub-models.

pub mod activation;
pub mod assembly;
pub mod batch;
pub mod network;

pub use activation::Activation;
pub use assembly::{
    assemble, check_no_domination, AssemblyModel, AssemblySpec, ConstOne, DominationReport,
    LinearSubModel, NeuronSubModel, ScalarParam, ScalingRule, SubModel, WeightRule,
    DEFAULT_MAGNITUDE_RANGE,
};
pub use network::{
    build_network, Architecture, EvalTrace, LayerShape, Network, NetworkSpec, ParamLayout,
    ParamVector,
};
