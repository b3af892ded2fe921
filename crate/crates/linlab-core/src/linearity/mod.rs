//! Linearity metrics and bound verifiers: Taylor-remainder probing with the
//! assembly and pre-activation curvature bounds, neuron-gradient cosine
//! statistics, normal-vector constancy, tangent-kernel drift, the cross-term
//! decomposition of the remainder, and Monte-Carlo checks of the Gaussian
//! norm bounds the theory leans on.

pub mod gram;

pub use gram::{ntk, pre_activation_gram};

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::grad::{self, DiffModel, GradTarget, NetworkTarget};
use crate::models::network::Network;
use crate::numerics::{self, DenseMatrix, Rng};

/// `|cos|` from raw inner products, exact at the Cauchy-Schwarz boundary:
/// identical gradients give exactly 1, orthogonal ones exactly 0.
pub fn abs_cosine(dot_ab: f64, dot_aa: f64, dot_bb: f64) -> f64 {
    let num2 = dot_ab * dot_ab;
    let denom2 = dot_aa * dot_bb;
    if num2 >= denom2 {
        1.0
    } else {
        fmath::sqrt(num2 / denom2)
    }
}

fn signed_cosine(dot_ab: f64, dot_aa: f64, dot_bb: f64) -> f64 {
    let c = abs_cosine(dot_ab, dot_aa, dot_bb);
    if dot_ab < 0.0 {
        -c
    } else {
        c
    }
}

/// Average absolute cosine between pre-activation gradients of one layer.
#[derive(Debug, Clone)]
pub struct CosineStats {
    pub layer: usize,
    pub width: usize,
    pub mean_abs_cos: f64,
    /// Number of (pair, input) terms averaged.
    pub n_terms: usize,
    pub n_pairs: usize,
    /// Per-input means, in input order.
    pub per_sample: Vec<f64>,
    /// Pairs skipped because a gradient was identically zero.
    pub skipped: usize,
}

/// Caps keeping the pair statistic cheap on wide layers. Pairs are drawn
/// among a neuron subsample, which leaves the all-pairs mean unbiased.
pub const DEFAULT_MAX_PAIRS: usize = 2000;
pub const DEFAULT_MAX_NEURONS: usize = 128;

/// Mean `|cos|` over sampled distinct neuron pairs of layer `layer` and over
/// all inputs. Gradient inner products come from the layer Gram; zero
/// gradients skip the pair and are counted in `skipped`.
pub fn cosine_stats(
    net: &Network,
    theta: &[f64],
    layer: usize,
    inputs: &[Vec<f64>],
    max_pairs: usize,
    max_neurons: usize,
    rng: &mut Rng,
) -> Result<CosineStats> {
    if layer == 0 || layer > net.num_layers() {
        return Err(Error::InvalidArgument("layer out of range".into()));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("need at least one input".into()));
    }
    if max_pairs == 0 || max_neurons < 2 {
        return Err(Error::InvalidArgument(
            "need max_pairs >= 1 and max_neurons >= 2".into(),
        ));
    }
    let m = net.width(layer);
    if m < 2 {
        return Err(Error::DegenerateInput(alloc::format!(
            "layer {layer} has width {m}; no pairs exist"
        )));
    }
    let selected = grad::sample_indices(m, max_neurons, rng);
    let s = selected.len();
    let all_pairs = s * (s - 1) / 2;
    let pairs: Vec<(usize, usize)> = if all_pairs <= max_pairs {
        let mut p = Vec::with_capacity(all_pairs);
        for a in 0..s {
            for b in (a + 1)..s {
                p.push((a, b));
            }
        }
        p
    } else {
        let mut seen = BTreeSet::new();
        let mut p = Vec::with_capacity(max_pairs);
        while p.len() < max_pairs {
            let a = rng.below(s as u64) as usize;
            let b = rng.below(s as u64) as usize;
            if a == b {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                p.push(key);
            }
        }
        p
    };

    let mut per_sample = Vec::with_capacity(inputs.len());
    let mut total = 0.0;
    let mut n_terms = 0usize;
    let mut skipped = 0usize;
    for x in inputs {
        let g = pre_activation_gram(net, theta, x, layer, &selected)?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for &(a, b) in &pairs {
            let daa = g.get(a, a);
            let dbb = g.get(b, b);
            if daa <= 0.0 || dbb <= 0.0 {
                skipped += 1;
                continue;
            }
            sum += abs_cosine(g.get(a, b), daa, dbb);
            count += 1;
        }
        per_sample.push(if count > 0 { sum / count as f64 } else { 0.0 });
        total += sum;
        n_terms += count;
    }
    if n_terms == 0 {
        return Err(Error::DegenerateInput(
            "every sampled pair had a zero gradient".into(),
        ));
    }
    Ok(CosineStats {
        layer,
        width: m,
        mean_abs_cos: total / n_terms as f64,
        n_terms,
        n_pairs: pairs.len(),
        per_sample,
        skipped,
    })
}

/// Curvature bound for an assembly with unit-magnitude weights:
/// `beta r^2 / (2 s(m))`.
pub fn assembly_remainder_bound(beta: f64, r: f64, scaling: f64) -> f64 {
    beta * r * r / (2.0 * scaling)
}

/// Curvature bound for a pre-activation assembled from the layer below,
/// with that layer's incoming weights frozen at initialization:
/// `beta r max_i |w0_i| / (2 sqrt(m))`.
pub fn preactivation_remainder_bound(beta: f64, r: f64, max_w0: f64, width: usize) -> f64 {
    beta * r * max_w0 / (2.0 * fmath::sqrt(width as f64))
}

/// Which curvature bound a remainder report should be paired with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RemainderBound {
    None,
    /// Assembly bound with the given sampled smoothness and scaling `s(m)`.
    Assembly { beta_hat: f64, scaling: f64 },
    /// Pre-activation bound with sampled smoothness, the max magnitude of
    /// the frozen incoming weights, and the assembled width.
    PreActivation {
        beta_hat: f64,
        max_w0: f64,
        width: usize,
    },
}

impl RemainderBound {
    fn eval(&self, r: f64) -> Option<f64> {
        match *self {
            RemainderBound::None => None,
            RemainderBound::Assembly { beta_hat, scaling } => {
                Some(assembly_remainder_bound(beta_hat, r, scaling))
            }
            RemainderBound::PreActivation {
                beta_hat,
                max_w0,
                width,
            } => Some(preactivation_remainder_bound(beta_hat, r, max_w0, width)),
        }
    }

    fn beta(&self) -> Option<f64> {
        match *self {
            RemainderBound::None => None,
            RemainderBound::Assembly { beta_hat, .. } => Some(beta_hat),
            RemainderBound::PreActivation { beta_hat, .. } => Some(beta_hat),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemainderReport {
    pub radius: f64,
    pub probes: usize,
    pub max_abs_remainder: f64,
    /// Radius of the probe achieving the max.
    pub argmax_radius: f64,
    /// Bound evaluated at the full radius, when one was requested.
    pub bound: Option<f64>,
    pub beta_hat: Option<f64>,
    /// Max remainder against the full-radius bound.
    pub pass: Option<bool>,
    /// Probes whose remainder exceeded the bound at their own radius.
    pub probe_violations: usize,
}

/// Max `|f(theta0 + delta) - f(theta0) - <grad, delta>|` over probe points
/// in the ball of the given radius.
///
/// Probe radii are stratified over `(0, radius]`. Directions alternate
/// between the full sphere and spheres concentrated on single nonlinear
/// parameter blocks (when the model exposes them): the bounds control the
/// ball supremum, and on assemblies that supremum is approached at
/// block-concentrated points while isotropic directions spread curvature
/// mass `1/m`-thin and systematically under-read it.
pub fn remainder_at<M: DiffModel + ?Sized>(
    model: &M,
    theta0: &[f64],
    x: &[f64],
    radius: f64,
    probes: usize,
    bound: RemainderBound,
    rng: &mut Rng,
) -> Result<RemainderReport> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("radius must be positive".into()));
    }
    if probes == 0 {
        return Err(Error::InvalidArgument("need at least one probe".into()));
    }
    let p = model.param_len();
    let mut g0 = vec![0.0; p];
    let f0 = model.grad_into(theta0, x, &mut g0);
    let blocks = model.param_blocks();
    let mut theta1 = vec![0.0; p];
    let mut delta = vec![0.0; p];
    let mut max_abs = 0.0f64;
    let mut argmax_radius = 0.0;
    let mut probe_violations = 0usize;
    for j in 0..probes {
        let r = radius * (j + 1) as f64 / probes as f64;
        delta.iter_mut().for_each(|d| *d = 0.0);
        if blocks.is_empty() || j % 2 == 0 {
            let s = numerics::sphere_sample(p, r, rng)?;
            delta.copy_from_slice(&s);
        } else {
            let block = blocks[rng.below(blocks.len() as u64) as usize].clone();
            let s = numerics::sphere_sample(block.len(), r, rng)?;
            delta[block].copy_from_slice(&s);
        }
        for ((t, &t0), &d) in theta1.iter_mut().zip(theta0).zip(&delta) {
            *t = t0 + d;
        }
        let f1 = model.eval(&theta1, x);
        let rem = fmath::abs(f1 - f0 - numerics::dot(&g0, &delta));
        if let Some(b) = bound.eval(r) {
            if rem > b {
                probe_violations += 1;
            }
        }
        if rem > max_abs {
            max_abs = rem;
            argmax_radius = r;
        }
    }
    let bound_at_radius = bound.eval(radius);
    Ok(RemainderReport {
        radius,
        probes,
        max_abs_remainder: max_abs,
        argmax_radius,
        bound: bound_at_radius,
        beta_hat: bound.beta(),
        pass: bound_at_radius.map(|b| max_abs <= b),
        probe_violations,
    })
}

/// Minimum cosine between the target's gradient at `theta0` and at probe
/// points in the ball of radius `r_max`. Values near 1 mean the level sets
/// stay hyper-planes with a fixed normal across the neighborhood.
/// `r_max = 0` is 1 by definition.
pub fn normal_constancy(
    net: &Network,
    theta0: &[f64],
    target: GradTarget,
    r_max: f64,
    probes: usize,
    x: &[f64],
    rng: &mut Rng,
) -> Result<f64> {
    if r_max < 0.0 {
        return Err(Error::InvalidArgument("radius must be non-negative".into()));
    }
    if r_max == 0.0 {
        return Ok(1.0);
    }
    if probes == 0 {
        return Err(Error::InvalidArgument("need at least one probe".into()));
    }
    let g0 = grad::grad(net, theta0, x, target)?;
    let d00 = numerics::dot(&g0, &g0);
    if d00 == 0.0 {
        return Err(Error::DegenerateInput("gradient vanishes at theta0".into()));
    }
    let p = net.param_len();
    let mut theta1 = vec![0.0; p];
    let mut min_cos = f64::INFINITY;
    for j in 0..probes {
        let r = r_max * (j + 1) as f64 / probes as f64;
        let delta = numerics::sphere_sample(p, r, rng)?;
        for ((t, &t0), &d) in theta1.iter_mut().zip(theta0).zip(&delta) {
            *t = t0 + d;
        }
        let g1 = grad::grad(net, &theta1, x, target)?;
        let d11 = numerics::dot(&g1, &g1);
        if d11 == 0.0 {
            return Err(Error::DegenerateInput("gradient vanishes at a probe point".into()));
        }
        let c = signed_cosine(numerics::dot(&g0, &g1), d00, d11);
        min_cos = min_cos.min(c);
    }
    Ok(min_cos)
}

/// Relative Frobenius drift of the tangent kernel.
pub fn ntk_drift(k0: &DenseMatrix, kt: &DenseMatrix) -> Result<f64> {
    if k0.rows() != kt.rows() || k0.cols() != kt.cols() {
        return Err(Error::InvalidArgument("kernel dimensions differ".into()));
    }
    let n0 = k0.frobenius_norm();
    if n0 == 0.0 {
        return Err(Error::DegenerateInput("reference kernel is zero".into()));
    }
    let mut diff2 = 0.0;
    for (a, b) in k0.data().iter().zip(kt.data()) {
        let d = a - b;
        diff2 += d * d;
    }
    Ok(fmath::sqrt(diff2) / n0)
}

#[derive(Debug, Clone, Copy)]
pub struct PsdCheck {
    pub min_eigenvalue: f64,
    pub trace: f64,
    pub ok: bool,
}

/// Positive-semidefiniteness up to `-tol_factor * trace` on the smallest
/// eigenvalue (dense Jacobi eigensolve; kernels here are small).
pub fn check_psd(k: &DenseMatrix, tol_factor: f64) -> Result<PsdCheck> {
    if k.rows() != k.cols() {
        return Err(Error::InvalidArgument("matrix must be square".into()));
    }
    let eig = numerics::jacobi_eigenvalues(k)?;
    let min_eigenvalue = *eig.last().expect("non-empty");
    let trace: f64 = (0..k.rows()).map(|i| k.get(i, i)).sum();
    Ok(PsdCheck {
        min_eigenvalue,
        trace,
        ok: min_eigenvalue >= -tol_factor * trace.max(0.0),
    })
}

/// Outcome of one Monte-Carlo bound verification.
#[derive(Debug, Clone, Copy)]
pub struct VerifyReport {
    pub fraction: f64,
    pub trials: usize,
    /// The probability the bound claims, which may be vacuous (<= 0) at
    /// small sizes; vacuous bounds are reported, never asserted.
    pub bound: f64,
    pub vacuous: bool,
}

/// Trials run in fixed-size chunks with child seeds, so a parallel driver
/// partitioning chunks across tasks reproduces the sequential result.
const VERIFY_CHUNK: usize = 64;

fn run_chunked<F>(m: usize, trials: usize, seed: u64, bound: f64, mut success: F) -> Result<VerifyReport>
where
    F: FnMut(usize, &mut Rng) -> Result<bool>,
{
    if m == 0 {
        return Err(Error::InvalidArgument("size must be >= 1".into()));
    }
    if trials == 0 {
        return Err(Error::DegenerateInput("zero trials".into()));
    }
    let mut successes = 0usize;
    let mut done = 0usize;
    let mut chunk = 0u64;
    while done < trials {
        let this = VERIFY_CHUNK.min(trials - done);
        let mut rng = Rng::child(seed, chunk);
        for _ in 0..this {
            if success(m, &mut rng)? {
                successes += 1;
            }
        }
        done += this;
        chunk += 1;
    }
    Ok(VerifyReport {
        fraction: successes as f64 / trials as f64,
        trials,
        bound,
        vacuous: bound <= 0.0,
    })
}

/// Fraction of `m x m` standard Gaussian matrices with spectral norm at
/// most `3 sqrt(m)`; claimed probability `1 - 2 exp(-m/2)`.
pub fn verify_weight_spectral(m: usize, trials: usize, seed: u64) -> Result<VerifyReport> {
    let bound = 1.0 - 2.0 * fmath::exp(-(m as f64) / 2.0);
    let threshold = 3.0 * fmath::sqrt(m as f64);
    run_chunked(m, trials, seed, bound, |m, rng| {
        let w = DenseMatrix::gaussian(m, m, rng)?;
        let est = numerics::spectral_norm_matrix(&w, 1e-6, 2000)?;
        Ok(est.value <= threshold)
    })
}

/// Fraction of standard Gaussian vectors in dimension `m` with squared norm
/// at most `5m`; claimed probability `1 - exp(-m)`.
pub fn verify_chi_square(m: usize, trials: usize, seed: u64) -> Result<VerifyReport> {
    let bound = 1.0 - fmath::exp(-(m as f64));
    let threshold = 5.0 * m as f64;
    run_chunked(m, trials, seed, bound, |m, rng| {
        let mut s = 0.0;
        for _ in 0..m {
            let z = rng.normal();
            s += z * z;
        }
        Ok(s <= threshold)
    })
}

/// Fraction of trials where the max magnitude of `m` i.i.d. standard
/// normals is at most `ln m`; claimed probability
/// `1 - 2 exp(-0.5 ln^2 m + ln m)`, vacuous for small `m`.
pub fn verify_max_gaussian(m: usize, trials: usize, seed: u64) -> Result<VerifyReport> {
    let lm = fmath::ln(m as f64);
    let bound = 1.0 - 2.0 * fmath::exp(-0.5 * lm * lm + lm);
    run_chunked(m, trials, seed, bound, |m, rng| {
        let mut mx = 0.0f64;
        for _ in 0..m {
            mx = mx.max(fmath::abs(rng.normal()));
        }
        Ok(mx <= lm)
    })
}

/// Remainder split for a layer-`(l+1)` pre-activation when the perturbation
/// has both an incoming-weight part and a below-layer part.
#[derive(Debug, Clone, Copy)]
pub struct CrossTermReport {
    /// Remainder under the incoming-weight part alone. The pre-activation
    /// is linear in those weights, so this is zero to rounding.
    pub a: f64,
    /// Remainder under the below-layer part alone.
    pub b: f64,
    /// Interaction: full remainder minus `a` minus `b`.
    pub c: f64,
    /// `r^2 sqrt(gram_norm) / sqrt(m_l)` with `r` the full perturbation
    /// radius.
    pub c_bound: f64,
    pub c_pass: bool,
    /// Spectral norm of the layer-`l` Jacobian Gram operator.
    pub gram_norm: f64,
    pub w_radius: f64,
    pub theta_radius: f64,
    pub target_value: f64,
}

/// Decomposes the remainder of the layer-`(l+1)` pre-activation (neuron 0)
/// at `theta` around `theta0` into weight-only, below-only and interaction
/// parts. `gram_norm` may carry a precomputed Jacobian-Gram spectral norm
/// for layer `l`; otherwise it is estimated here.
pub fn cross_term(
    net: &Network,
    theta0: &[f64],
    theta: &[f64],
    x: &[f64],
    layer: usize,
    gram_norm: Option<f64>,
) -> Result<CrossTermReport> {
    if layer == 0 || layer + 1 > net.num_layers() {
        return Err(Error::InvalidArgument(alloc::format!(
            "need 1 <= layer and layer + 1 <= {}",
            net.num_layers()
        )));
    }
    if theta.len() != net.param_len() || theta0.len() != net.param_len() {
        return Err(Error::InvalidArgument("parameter length mismatch".into()));
    }
    let target = GradTarget::pre(layer + 1, 0);
    let model = NetworkTarget::new(net, target);
    let p = net.param_len();
    let mut g0 = vec![0.0; p];
    let f0 = model.grad_into(theta0, x, &mut g0);

    let delta: Vec<f64> = theta.iter().zip(theta0).map(|(a, b)| a - b).collect();
    let w_range = net.layout().row_range(layer + 1, 0);
    let prefix = net.layout().prefix_len(layer);

    let rem_of = |mask: &dyn Fn(usize) -> bool| -> f64 {
        let mut t1 = theta0.to_vec();
        let mut dot = 0.0;
        for (i, &d) in delta.iter().enumerate() {
            if mask(i) {
                t1[i] += d;
                dot += g0[i] * d;
            }
        }
        model.eval(&t1, x) - f0 - dot
    };

    let a = rem_of(&|i| w_range.contains(&i));
    let b = rem_of(&|i| i < prefix);
    let full = rem_of(&|_| true);
    let c = full - a - b;

    let gram = match gram_norm {
        Some(g) => g,
        None => jacobian_gram_default(net, theta0, x, layer)?,
    };
    let w_radius = numerics::norm(&delta[w_range]);
    let theta_radius = numerics::norm(&delta[..prefix]);
    let r2 = w_radius * w_radius + theta_radius * theta_radius;
    let c_bound = r2 * fmath::sqrt(gram) / fmath::sqrt(net.width(layer) as f64);
    Ok(CrossTermReport {
        a,
        b,
        c,
        c_bound,
        c_pass: fmath::abs(c) <= c_bound,
        gram_norm: gram,
        w_radius,
        theta_radius,
        target_value: f0,
    })
}

fn jacobian_gram_default(net: &Network, theta: &[f64], x: &[f64], layer: usize) -> Result<f64> {
    Ok(grad::jacobian_gram_spectral(
        net,
        theta,
        x,
        layer,
        numerics::DEFAULT_SPECTRAL_TOL,
        2000,
    )?
    .value)
}
