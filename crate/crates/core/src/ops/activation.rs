use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    HSwish,
    HSigmoid,
}

impl Activation {
    pub fn apply<T: Element>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::HSigmoid => hsigmoid(v),
            Activation::HSwish => v * hsigmoid(v),
        }
    }

    /// Derivative at `v`. relu'(0) = 0 and hsigmoid' is 0 on its clamp
    /// boundaries; hswish uses the right-hand limit at ±3.
    pub fn derivative<T: Element>(self, v: T) -> T {
        let three = T::of(3.0);
        match self {
            Activation::Relu => {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::HSigmoid => {
                if v > -three && v < three {
                    T::of(1.0 / 6.0)
                } else {
                    T::zero()
                }
            }
            Activation::HSwish => {
                if v < -three {
                    T::zero()
                } else if v >= three {
                    T::one()
                } else {
                    (v + v + three) / T::of(6.0)
                }
            }
        }
    }

    /// Points where the derivative jumps.
    pub fn kinks(self) -> &'static [f64] {
        match self {
            Activation::Relu => &[0.0],
            Activation::HSwish | Activation::HSigmoid => &[-3.0, 3.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::HSwish => "hswish",
            Activation::HSigmoid => "hsigmoid",
        }
    }
}

fn hsigmoid<T: Element>(v: T) -> T {
    let six = T::of(6.0);
    (v + T::of(3.0)).max(T::zero()).min(six) / six
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "hswish" | "hard_swish" => Ok(Activation::HSwish),
            "hsigmoid" | "hard_sigmoid" => Ok(Activation::HSigmoid),
            other => Err(Error::Domain(format!("unknown nonlinearity `{other}`"))),
        }
    }
}

pub fn activation_forward<T: Element>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// Gradient w.r.t. the activation input `x`.
pub fn activation_backward<T: Element>(
    x: &Tensor<T>,
    kind: Activation,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    x.zip_map(grad_out, |v, g| g * kind.derivative(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn closed_form_values() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert_eq!(Activation::HSwish.apply(3.0), 3.0);
        assert_eq!(Activation::HSwish.apply(-3.0), 0.0);
        assert_eq!(Activation::HSigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::HSigmoid.apply(10.0), 1.0);
    }

    #[test]
    fn kink_derivatives() {
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert_eq!(Activation::HSigmoid.derivative(3.0), 0.0);
        assert_eq!(Activation::HSigmoid.derivative(-3.0), 0.0);
        assert_eq!(Activation::HSwish.derivative(3.0), 1.0);
    }

    #[test]
    fn backward_matches_finite_differences_away_from_kinks() {
        let xs: Vec<f64> = (0..400).map(|i| -5.0 + i as f64 * 0.025 + 0.0031).collect();
        for kind in [Activation::Relu, Activation::HSwish, Activation::HSigmoid] {
            let pts: Vec<f64> = xs
                .iter()
                .copied()
                .filter(|v| kind.kinks().iter().all(|k| (v - k).abs() > 1e-3))
                .collect();
            let x = Tensor::from_vec(Shape::new(1, pts.len(), 1, 1), pts.clone()).unwrap();
            let ones = Tensor::full(x.shape(), 1.0);
            let g = activation_backward(&x, kind, &ones).unwrap();
            let eps = 1e-5;
            for (i, &v) in pts.iter().enumerate() {
                let fd = (kind.apply(v + eps) - kind.apply(v - eps)) / (2.0 * eps);
                let an = g.data()[i];
                assert!(
                    (fd - an).abs() / 1f64.max(fd.abs()).max(an.abs()) < 1e-6,
                    "{kind} at {v}"
                );
            }
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!("hswish".parse::<Activation>().unwrap(), Activation::HSwish);
        assert!("gelu".parse::<Activation>().is_err());
    }
}
