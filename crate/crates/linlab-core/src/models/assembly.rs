//! Generic assembly models: `f(theta; x) = (1/s(m)) * sum_i v_i g_i(w_i; x)`
//! over sub-models with pairwise disjoint parameter slices. The weights
//! `v_i` are fixed at construction and never trained.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::fmath;
use crate::models::activation::Activation;
use crate::numerics::rng::Rng;

/// A sub-model: a scalar function of its own parameter slice and the input.
/// `grad` is the gradient with respect to the sub-model's own parameters,
/// unscaled by any assembly weight.
pub trait SubModel {
    fn param_len(&self) -> usize;
    fn value(&self, w: &[f64], x: &[f64]) -> f64;
    fn grad(&self, w: &[f64], x: &[f64], out: &mut [f64]);
}

/// One hidden neuron with its output weight: `g(w, u; x) = u * act(c w.x)`.
/// The parameter slice is `[w_1 .. w_d, u]`. With `input_scale = 1/sqrt(d)`
/// this is exactly one summand of a two-layer network.
#[derive(Debug, Clone)]
pub struct NeuronSubModel {
    pub input_dim: usize,
    pub activation: Activation,
    pub input_scale: f64,
}

impl SubModel for NeuronSubModel {
    fn param_len(&self) -> usize {
        self.input_dim + 1
    }

    fn value(&self, w: &[f64], x: &[f64]) -> f64 {
        let z = self.input_scale * crate::numerics::dot(&w[..self.input_dim], x);
        w[self.input_dim] * self.activation.apply(z)
    }

    fn grad(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.input_dim;
        let z = self.input_scale * crate::numerics::dot(&w[..d], x);
        let u = w[d];
        let s1 = self.activation.d1(z);
        for j in 0..d {
            out[j] = u * s1 * self.input_scale * x[j];
        }
        out[d] = self.activation.apply(z);
    }
}

/// `g(w) = w` on a single parameter; the identity sub-model.
#[derive(Debug, Clone, Copy)]
pub struct ScalarParam;

impl SubModel for ScalarParam {
    fn param_len(&self) -> usize {
        1
    }

    fn value(&self, w: &[f64], _x: &[f64]) -> f64 {
        w[0]
    }

    fn grad(&self, _w: &[f64], _x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }
}

/// `g(w; x) = w . x`; linear in both, curvature-free.
#[derive(Debug, Clone, Copy)]
pub struct LinearSubModel {
    pub input_dim: usize,
}

impl SubModel for LinearSubModel {
    fn param_len(&self) -> usize {
        self.input_dim
    }

    fn value(&self, w: &[f64], x: &[f64]) -> f64 {
        crate::numerics::dot(w, &x[..self.input_dim])
    }

    fn grad(&self, _w: &[f64], x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&x[..self.input_dim]);
    }
}

/// Parameter-free constant sub-model, `g = 1`.
#[derive(Debug, Clone, Copy)]
pub struct ConstOne;

impl SubModel for ConstOne {
    fn param_len(&self) -> usize {
        0
    }

    fn value(&self, _w: &[f64], _x: &[f64]) -> f64 {
        1.0
    }

    fn grad(&self, _w: &[f64], _x: &[f64], _out: &mut [f64]) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRule {
    AllOnes,
    Rademacher,
    Gaussian,
}

impl WeightRule {
    pub fn draw(&self, m: usize, rng: &mut Rng) -> Vec<f64> {
        match self {
            WeightRule::AllOnes => vec![1.0; m],
            WeightRule::Rademacher => (0..m).map(|_| rng.rademacher()).collect(),
            WeightRule::Gaussian => (0..m).map(|_| rng.normal()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingRule {
    SqrtM,
    M,
}

impl ScalingRule {
    pub fn eval(&self, m: usize) -> f64 {
        match self {
            ScalingRule::SqrtM => fmath::sqrt(m as f64),
            ScalingRule::M => m as f64,
        }
    }
}

/// Sub-model slice list plus the weight and scaling rules.
#[derive(Debug, Clone)]
pub struct AssemblySpec {
    pub slices: Vec<Range<usize>>,
    pub weight_rule: WeightRule,
    pub scaling: ScalingRule,
}

impl AssemblySpec {
    /// Consecutive disjoint slices of the given lengths.
    pub fn contiguous(dims: &[usize], weight_rule: WeightRule, scaling: ScalingRule) -> Self {
        let mut slices = Vec::with_capacity(dims.len());
        let mut offset = 0;
        for &d in dims {
            slices.push(offset..offset + d);
            offset += d;
        }
        AssemblySpec {
            slices,
            weight_rule,
            scaling,
        }
    }
}

pub struct AssemblyModel {
    subs: Vec<Box<dyn SubModel>>,
    slices: Vec<Range<usize>>,
    weights: Vec<f64>,
    scaling: f64,
    param_len: usize,
}

/// Validates slice disjointness, draws the fixed weights, and wires the
/// sub-models into a callable assembly.
pub fn assemble(
    spec: &AssemblySpec,
    subs: Vec<Box<dyn SubModel>>,
    rng: &mut Rng,
) -> Result<AssemblyModel> {
    if subs.is_empty() {
        return Err(Error::InvalidArgument("assembly needs at least one sub-model".into()));
    }
    if subs.len() != spec.slices.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "{} sub-models but {} slices",
            subs.len(),
            spec.slices.len()
        )));
    }
    for (i, (sub, slice)) in subs.iter().zip(&spec.slices).enumerate() {
        if sub.param_len() != slice.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "sub-model {i} has {} parameters but slice length {}",
                sub.param_len(),
                slice.len()
            )));
        }
    }
    let mut sorted: Vec<&Range<usize>> = spec.slices.iter().filter(|s| !s.is_empty()).collect();
    sorted.sort_by_key(|s| s.start);
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(Error::InvariantViolation(alloc::format!(
                "parameter slices {:?} and {:?} overlap",
                pair[0],
                pair[1]
            )));
        }
    }
    let param_len = spec.slices.iter().map(|s| s.end).max().unwrap_or(0);
    let weights = spec.weight_rule.draw(subs.len(), rng);
    let scaling = spec.scaling.eval(subs.len());
    Ok(AssemblyModel {
        subs,
        slices: spec.slices.clone(),
        weights,
        scaling,
        param_len,
    })
}

impl AssemblyModel {
    pub fn num_sub_models(&self) -> usize {
        self.subs.len()
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn slices(&self) -> &[Range<usize>] {
        &self.slices
    }

    pub fn init_params(&self, rng: &mut Rng) -> Vec<f64> {
        let mut theta = vec![0.0; self.param_len];
        rng.fill_normal(&mut theta);
        theta
    }

    pub fn value(&self, theta: &[f64], x: &[f64]) -> f64 {
        debug_assert_eq!(theta.len(), self.param_len);
        let mut acc = 0.0;
        for ((sub, slice), &v) in self.subs.iter().zip(&self.slices).zip(&self.weights) {
            acc += v * sub.value(&theta[slice.clone()], x);
        }
        acc / self.scaling
    }

    /// Raw sub-model outputs `g_i(w_i; x)`.
    pub fn sub_values(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        self.subs
            .iter()
            .zip(&self.slices)
            .map(|(sub, slice)| sub.value(&theta[slice.clone()], x))
            .collect()
    }

    /// Gradient of one sub-model with respect to its own slice.
    pub fn sub_grad(&self, i: usize, theta: &[f64], x: &[f64], out: &mut [f64]) {
        self.subs[i].grad(&theta[self.slices[i].clone()], x, out);
    }

    /// Full-assembly gradient: restricted to slice `i` it is
    /// `(v_i / s(m)) * grad g_i`, zero elsewhere.
    pub fn grad_into(&self, theta: &[f64], x: &[f64], out: &mut [f64]) -> f64 {
        debug_assert_eq!(out.len(), self.param_len);
        out.fill(0.0);
        let mut acc = 0.0;
        for ((sub, slice), &v) in self.subs.iter().zip(&self.slices).zip(&self.weights) {
            let w = &theta[slice.clone()];
            acc += v * sub.value(w, x);
            sub.grad(w, x, &mut out[slice.clone()]);
            crate::numerics::scale(&mut out[slice.clone()], v / self.scaling);
        }
        acc / self.scaling
    }
}

/// Report for the no-dominating-sub-model check: the median/max ratio of
/// sub-model magnitudes, and whether the max sits inside `[a, b]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DominationReport {
    pub ratio: f64,
    pub pass: bool,
    pub max_abs: f64,
    pub median_abs: f64,
    pub max_in_range: bool,
}

/// Defaults for the magnitude window `[a, b]`; the analysis leaves the
/// constants abstract, so these are deliberately loose.
pub const DEFAULT_MAGNITUDE_RANGE: (f64, f64) = (1e-6, 1e6);

pub fn check_no_domination(
    outputs: &[f64],
    c: f64,
    range: (f64, f64),
) -> Result<DominationReport> {
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("need at least one sub-model output".into()));
    }
    if !(0.0 < c && c < 1.0) {
        return Err(Error::InvalidArgument("c must lie in (0, 1)".into()));
    }
    let mut mags: Vec<f64> = outputs.iter().map(|&g| fmath::abs(g)).collect();
    mags.sort_unstable_by(f64::total_cmp);
    let max_abs = *mags.last().unwrap();
    if max_abs == 0.0 {
        return Err(Error::DegenerateInput(
            "all sub-model outputs are zero; ratio undefined".into(),
        ));
    }
    let n = mags.len();
    let median_abs = if n % 2 == 1 {
        mags[n / 2]
    } else {
        0.5 * (mags[n / 2 - 1] + mags[n / 2])
    };
    let ratio = median_abs / max_abs;
    Ok(DominationReport {
        ratio,
        pass: ratio >= c,
        max_abs,
        median_abs,
        max_in_range: (range.0..=range.1).contains(&max_abs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_identity_sub_model_is_identity() {
        let spec = AssemblySpec::contiguous(&[1], WeightRule::AllOnes, ScalingRule::SqrtM);
        let asm = assemble(&spec, vec![Box::new(ScalarParam)], &mut Rng::new(0)).unwrap();
        // m = 1 so s(m) = 1 and v = 1: f = g.
        assert_eq!(asm.value(&[2.5], &[]), 2.5);
    }

    #[test]
    fn overlapping_slices_rejected() {
        let spec = AssemblySpec {
            slices: vec![0..2, 1..3],
            weight_rule: WeightRule::AllOnes,
            scaling: ScalingRule::SqrtM,
        };
        let subs: Vec<Box<dyn SubModel>> = vec![
            Box::new(LinearSubModel { input_dim: 2 }),
            Box::new(LinearSubModel { input_dim: 2 }),
        ];
        assert!(matches!(
            assemble(&spec, subs, &mut Rng::new(0)),
            Err(Error::InvariantViolation(_))
        ));
    }

    #[test]
    fn slice_independence_is_exact() {
        // Writing to slice i changes no other sub-model output.
        let spec = AssemblySpec::contiguous(&[3, 3, 3], WeightRule::AllOnes, ScalingRule::SqrtM);
        let subs: Vec<Box<dyn SubModel>> = (0..3)
            .map(|_| {
                Box::new(NeuronSubModel {
                    input_dim: 2,
                    activation: Activation::Tanh,
                    input_scale: 1.0,
                }) as Box<dyn SubModel>
            })
            .collect();
        let asm = assemble(&spec, subs, &mut Rng::new(1)).unwrap();
        let mut theta = asm.init_params(&mut Rng::new(2));
        let x = [0.4, -0.9];
        let before = asm.sub_values(&theta, &x);
        theta[0] += 10.0;
        theta[2] -= 3.0;
        let after = asm.sub_values(&theta, &x);
        assert_ne!(before[0], after[0]);
        assert_eq!(before[1], after[1]);
        assert_eq!(before[2], after[2]);
    }

    #[test]
    fn rademacher_sum_of_ones_has_unit_scale() {
        // f = sum(v_i)/sqrt(m) with g = 1: over seeds, mean ~ 0 and
        // standard deviation ~ 1 (within 10%).
        let m = 10_000;
        let mut vals = Vec::new();
        for seed in 0..100 {
            let spec = AssemblySpec::contiguous(
                &vec![0; m],
                WeightRule::Rademacher,
                ScalingRule::SqrtM,
            );
            let subs: Vec<Box<dyn SubModel>> =
                (0..m).map(|_| Box::new(ConstOne) as Box<dyn SubModel>).collect();
            let asm = assemble(&spec, subs, &mut Rng::new(seed)).unwrap();
            vals.push(asm.value(&[], &[]));
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.3, "mean {mean}");
        let sd = var.sqrt();
        assert!((0.9..=1.1).contains(&sd), "sd {sd}");
    }

    #[test]
    fn domination_report_uniform_outputs() {
        let r = check_no_domination(&[0.5; 8], 0.99, DEFAULT_MAGNITUDE_RANGE).unwrap();
        assert_eq!(r.ratio, 1.0);
        assert!(r.pass);
        assert!(r.max_in_range);
    }

    #[test]
    fn domination_report_single_spike_fails() {
        let mut outputs = vec![0.0; 100];
        outputs[0] = 1.0;
        let r = check_no_domination(&outputs, 0.1, DEFAULT_MAGNITUDE_RANGE).unwrap();
        assert_eq!(r.ratio, 0.0);
        assert!(!r.pass);
    }

    #[test]
    fn domination_all_zero_is_degenerate() {
        assert!(matches!(
            check_no_domination(&[0.0; 4], 0.5, DEFAULT_MAGNITUDE_RANGE),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn domination_rejects_bad_c() {
        assert!(check_no_domination(&[1.0], 0.0, DEFAULT_MAGNITUDE_RANGE).is_err());
        assert!(check_no_domination(&[1.0], 1.0, DEFAULT_MAGNITUDE_RANGE).is_err());
    }
}
