//! Linear maps and small MLPs expressed as tape operations.

use eqgat_autodiff::{Tape, Var};

use crate::error::{EqgatError, Result};
use crate::params::{Bound, Init, ParamId};

/// `y = x W^T + b` on row-stacked inputs `[M, in]`, with `W` stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = init.weight(&format!("{name}.weight"), out_dim, in_dim)?;
        let bias = if bias {
            Some(init.bias(&format!("{name}.bias"), out_dim)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(EqgatError::Shape {
                what: "linear input".into(),
                expected: vec![shape.first().copied().unwrap_or(0), self.in_dim],
                actual: shape,
            });
        }
        let wt = tape.transpose(p[self.weight])?;
        let y = tape.matmul(x, wt)?;
        match self.bias {
            Some(b) => {
                let tiled = tape.broadcast(p[b], 0, shape[0])?;
                Ok(tape.add(y, tiled)?)
            }
            None => Ok(y),
        }
    }
}

/// Bias-free map over the channel axis of `[N, 3, in]` vector features.
///
/// Each spatial row is transformed identically, so the map commutes with
/// rotations acting on axis 1.
#[derive(Debug, Clone)]
pub struct VectorLinear {
    pub weight: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl VectorLinear {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: init.weight(&format!("{name}.weight"), out_dim, in_dim)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, v: Var) -> Result<Var> {
        let shape = tape.shape(v).to_vec();
        if shape.len() != 3 || shape[1] != 3 || shape[2] != self.in_dim {
            return Err(EqgatError::Shape {
                what: "vector linear input".into(),
                expected: vec![shape.first().copied().unwrap_or(0), 3, self.in_dim],
                actual: shape,
            });
        }
        let n = shape[0];
        let flat = tape.reshape(v, vec![3 * n, self.in_dim])?;
        let wt = tape.transpose(p[self.weight])?;
        let y = tape.matmul(flat, wt)?;
        Ok(tape.reshape(y, vec![n, 3, self.out_dim])?)
    }
}

/// `Linear -> SiLU -> Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(init, &format!("{name}.0"), in_dim, hidden, true)?,
            output: Linear::new(init, &format!("{name}.1"), hidden, out_dim, true)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.silu(h)?;
        self.output.forward(tape, p, h)
    }
}
