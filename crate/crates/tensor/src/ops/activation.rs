use std::fmt;
use std::str::FromStr;

use crate::element::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    /// tanh approximation, cubic coefficient 0.044715.
    Gelu,
    Sigmoid,
    /// `clamp(x / 6 + 1 / 2, 0, 1)`.
    HardSigmoid,
}

const GELU_CUBIC: f64 = 0.044715;

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
            Activation::HardSigmoid => "hard_sigmoid",
        }
    }

    #[inline]
    pub fn apply<T: Element>(self, x: T) -> T {
        let half = T::from_f64_lossy(0.5);
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                let k = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
                let c = T::from_f64_lossy(GELU_CUBIC);
                half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::HardSigmoid => {
                (x / T::from_f64_lossy(6.0) + half).max(T::zero()).min(T::one())
            }
        }
    }

    /// dy/dx at `x`.
    #[inline]
    pub fn derivative<T: Element>(self, x: T) -> T {
        let half = T::from_f64_lossy(0.5);
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let k = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
                let c = T::from_f64_lossy(GELU_CUBIC);
                let three = T::from_f64_lossy(3.0);
                let t = (k * (x + c * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::HardSigmoid => {
                let three = T::from_f64_lossy(3.0);
                if x > -three && x < three {
                    T::one() / T::from_f64_lossy(6.0)
                } else {
                    T::zero()
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "hard_sigmoid" | "hardsigmoid" => Ok(Activation::HardSigmoid),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}
