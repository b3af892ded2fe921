use crate::error::{Error, Result};
use crate::fmath;

/// Twice-differentiable, injective activations. ReLU is rejected at parse
/// time: the curvature analysis needs a second derivative everywhere, and
/// level-set reasoning needs injectivity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Softplus,
    /// Degenerate baseline with zero curvature; handy for exactness checks.
    Linear,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softplus" => Ok(Activation::Softplus),
            "linear" => Ok(Activation::Linear),
            "relu" => Err(Error::UnsupportedActivation(
                "relu is not twice differentiable".into(),
            )),
            other => Err(Error::UnsupportedActivation(alloc::format!(
                "unknown activation '{other}'"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
            Activation::Linear => "linear",
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => fmath::tanh(x),
            Activation::Sigmoid => sigmoid(x),
            // Stable softplus: max(x, 0) + ln(1 + exp(-|x|)).
            Activation::Softplus => {
                let m = if x > 0.0 { x } else { 0.0 };
                m + fmath::ln_1p(fmath::exp(-fmath::abs(x)))
            }
            Activation::Linear => x,
        }
    }

    /// First derivative.
    #[inline]
    pub fn d1(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = fmath::tanh(x);
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
            Activation::Linear => 1.0,
        }
    }

    /// Second derivative.
    #[inline]
    pub fn d2(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = fmath::tanh(x);
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Activation::Softplus => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Linear => 0.0,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + fmath::exp(-x))
    } else {
        let e = fmath::exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_is_rejected() {
        assert!(matches!(
            Activation::parse("relu"),
            Err(Error::UnsupportedActivation(_))
        ));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for act in [
            Activation::Tanh,
            Activation::Sigmoid,
            Activation::Softplus,
            Activation::Linear,
        ] {
            for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
                let fd1 = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!(
                    (act.d1(x) - fd1).abs() < 1e-8,
                    "{} d1 at {x}",
                    act.name()
                );
                let fd2 = (act.d1(x + h) - act.d1(x - h)) / (2.0 * h);
                assert!(
                    (act.d2(x) - fd2).abs() < 1e-7,
                    "{} d2 at {x}",
                    act.name()
                );
            }
        }
    }

    #[test]
    fn injective_on_grid() {
        // Strict monotonicity on a dense grid implies injectivity there.
        for act in [
            Activation::Tanh,
            Activation::Sigmoid,
            Activation::Softplus,
            Activation::Linear,
        ] {
            let mut prev = act.apply(-8.0);
            let mut x = -8.0 + 1e-3;
            while x <= 8.0 {
                let y = act.apply(x);
                assert!(y > prev, "{} not strictly increasing at {x}", act.name());
                prev = y;
                x += 1e-3;
            }
        }
    }

    #[test]
    fn softplus_stable_at_extremes() {
        let sp = Activation::Softplus;
        assert!(sp.apply(800.0).is_finite());
        assert!((sp.apply(800.0) - 800.0).abs() < 1e-9);
        assert!(sp.apply(-800.0) >= 0.0);
    }
}
