//! Bottleneck image adapter: `Y = up(GELU(down(X))) + X`, with the inner
//! width fixed at a quarter of the hidden size.

use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::Rng;
use thiserror::Error;

/// Hidden size divided by bottleneck width.
pub const BOTTLENECK_DIVISOR: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdapterError {
    #[error("hidden size {0} must be positive and divisible by {BOTTLENECK_DIVISOR}")]
    Hidden(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The four adapter parameters. `T` is [`Tensor`] for stored weights and
/// [`Var`] once bound to a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights<T = Tensor> {
    /// `[hidden × hidden/4]`
    pub w_down: T,
    pub b_down: T,
    /// `[hidden/4 × hidden]`
    pub w_up: T,
    pub b_up: T,
}

pub fn bottleneck_dim(hidden: usize) -> Result<usize, AdapterError> {
    if hidden == 0 || !hidden.is_multiple_of(BOTTLENECK_DIVISOR) {
        return Err(AdapterError::Hidden(hidden));
    }
    Ok(hidden / BOTTLENECK_DIVISOR)
}

/// Scalar count of one adapter: both weight matrices plus both biases.
pub fn adapter_param_count(hidden: usize) -> Result<usize, AdapterError> {
    let b = bottleneck_dim(hidden)?;
    Ok(hidden * b + b + b * hidden + hidden)
}

impl AdapterWeights<Tensor> {
    /// Down path uniform in `±1/sqrt(hidden)`, up path and both biases zero,
    /// so a fresh adapter is the identity.
    pub fn init(hidden: usize, rng: &mut impl Rng) -> Result<Self, AdapterError> {
        let b = bottleneck_dim(hidden)?;
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_down = (0..hidden * b).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(Self {
            w_down: Tensor::matrix(hidden, b, w_down)?,
            b_down: Tensor::zeros(vec![b]),
            w_up: Tensor::zeros(vec![b, hidden]),
            b_up: Tensor::zeros(vec![hidden]),
        })
    }

    pub fn hidden(&self) -> usize {
        self.w_down.shape().first().copied().unwrap_or(0)
    }

    pub fn numel(&self) -> usize {
        self.w_down.numel() + self.b_down.numel() + self.w_up.numel() + self.b_up.numel()
    }
}

fn check_shapes(x: &Tensor, w: &AdapterWeights<&Tensor>) -> Result<(), TensorError> {
    let (h, b) = w.w_down.matrix_dims("adapter")?;
    let (b2, h2) = w.w_up.matrix_dims("adapter")?;
    let ok = b == b2 && h == h2 && w.b_down.shape() == [b] && w.b_up.shape() == [h] && x.ndim() >= 1 && x.cols() == h;
    if !ok {
        return Err(crate::tensor::shape_err(
            "adapter",
            format!(
                "input {:?} against w_down {:?}, w_up {:?}",
                x.shape(),
                w.w_down.shape(),
                w.w_up.shape()
            ),
        ));
    }
    Ok(())
}

/// Adapter on a tape; `x` is `[seq × hidden]`.
pub fn adapter_forward_on(tape: &mut Tape, x: Var, w: &AdapterWeights<Var>) -> Result<Var, TensorError> {
    let view = AdapterWeights {
        w_down: tape.value(w.w_down),
        b_down: tape.value(w.b_down),
        w_up: tape.value(w.w_up),
        b_up: tape.value(w.b_up),
    };
    check_shapes(tape.value(x), &view)?;
    let down = tape.matmul(x, w.w_down)?;
    let down = tape.add_row(down, w.b_down)?;
    let act = tape.gelu(down);
    let up = tape.matmul(act, w.w_up)?;
    let up = tape.add_row(up, w.b_up)?;
    tape.add(up, x)
}

/// Gradient-free adapter forward.
pub fn adapter_forward(x: &Tensor, w: &AdapterWeights) -> Result<Tensor, AdapterError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = AdapterWeights {
        w_down: tape.constant(w.w_down.clone()),
        b_down: tape.constant(w.b_down.clone()),
        w_up: tape.constant(w.w_up.clone()),
        b_up: tape.constant(w.b_up.clone()),
    };
    let y = adapter_forward_on(&mut tape, xv, &wv)?;
    Ok(tape.value(y).clone())
}
