use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Tanh,
    Linear,
}

impl Activation {
    pub fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Elu => elu(z),
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    pub fn derivative<S: Scalar>(self, z: S, a: S) -> S {
        match self {
            Activation::Elu => {
                if z > S::zero() {
                    S::one()
                } else {
                    // d/dz (e^z - 1) = e^z = a + 1
                    a + S::one()
                }
            }
            Activation::Tanh => S::one() - a * a,
            Activation::Linear => S::one(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        }
    }
}

/// Exponential linear unit with α = 1.
#[inline]
pub fn elu<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    // Split on sign so exp never overflows.
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
