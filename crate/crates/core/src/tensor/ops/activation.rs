use crate::scalar::Scalar;
use crate::tensor::tape::Op;
use crate::tensor::{Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    /// Exact form `x * Phi(x)` with the Gaussian CDF.
    Gelu,
    Silu,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Gelu => "gelu",
            Activation::Silu => "silu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => x * gauss_cdf(x),
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given input `x` and output `y`.
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Gelu => gauss_cdf(x) + x * gauss_pdf(x),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gauss_cdf<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gauss_pdf<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = T::lit(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * T::lit(0.5)).exp()
}

impl<T: Scalar> Tape<T> {
    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(out, Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }
}

pub(crate) fn activation_backward<T: Scalar>(
    kind: Activation,
    g: &Tensor<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
) -> Tensor<T> {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .zip(y.data())
        .map(|((&g, &x), &y)| g * kind.derivative(x, y))
        .collect();
    Tensor::new(g.shape(), data).expect("same shape")
}
