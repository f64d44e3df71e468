use serde::{Deserialize, Serialize};

/// Pointwise nonlinearity used between layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "slope")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Elu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at `x` given the forward output `y = apply(x)`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    /// Global Lipschitz constant, used by the contraction bound
    /// `L · ‖W‖₂ · ρ(A_eff)`.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => slope.abs().max(1.0),
            _ => 1.0,
        }
    }

    pub fn name(self) -> String {
        match self {
            Activation::Identity => "identity".into(),
            Activation::Relu => "relu".into(),
            Activation::LeakyRelu(s) => format!("leaky_relu({s})"),
            Activation::Elu => "elu".into(),
            Activation::Tanh => "tanh".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Activation> {
        let s = s.trim();
        match s {
            "identity" | "none" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "elu" => Some(Activation::Elu),
            "tanh" => Some(Activation::Tanh),
            "leaky_relu" => Some(Activation::LeakyRelu(0.2)),
            _ => {
                let inner = s.strip_prefix("leaky_relu(")?.strip_suffix(')')?;
                inner.parse().ok().map(Activation::LeakyRelu)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_at_minus_one() {
        assert_eq!(Activation::LeakyRelu(0.2).apply(-1.0), -0.2);
    }

    #[test]
    fn parse_round_trips_names() {
        for a in [
            Activation::Identity,
            Activation::Relu,
            Activation::LeakyRelu(0.1),
            Activation::Elu,
            Activation::Tanh,
        ] {
            assert_eq!(Activation::parse(&a.name()), Some(a));
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for a in [Activation::Elu, Activation::Tanh, Activation::LeakyRelu(0.3)] {
            for &x in &[-1.3, -0.2, 0.4, 2.0] {
                let fd = (a.apply(x + h) - a.apply(x - h)) / (2.0 * h);
                assert!((fd - a.derivative(x, a.apply(x))).abs() < 1e-8, "{a:?} at {x}");
            }
        }
    }
}
