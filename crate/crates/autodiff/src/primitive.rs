//! Primitive operations and their vector-Jacobian products.
//!
//! Elementwise primitives require identical shapes; there is no implicit
//! broadcasting. Use [`Primitive::Broadcast`] to tile along a new axis.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// Swap the two axes of a matrix.
    Transpose,
    /// Multiply by a constant.
    Scale(f64),
    /// Add a constant.
    Shift(f64),
    /// Sum over `axis`, removing it.
    Sum {
        axis: usize,
    },
    /// Insert a new axis of length `size` at `axis`, repeating the input.
    Broadcast {
        axis: usize,
        size: usize,
    },
    Concat {
        axis: usize,
    },
    /// Contiguous slice `start..start + len` along `axis`. Splits are built from these.
    Narrow {
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// Select rows (first axis) by index; rows may repeat.
    Gather {
        rows: Arc<[usize]>,
    },
    /// Sum input row `r` into output row `rows[r]`, for an output of `size` rows.
    ScatterAdd {
        rows: Arc<[usize]>,
        size: usize,
    },
    Sigmoid,
    Silu,
    Sin,
    Cos,
    Sqrt,
    Abs,
    /// `sqrt(sum(x^2) + eps^2)` over `axis`, removing it.
    SafeNorm {
        axis: usize,
        eps: f64,
    },
    /// Cross product of two arrays whose `axis` has length 3.
    Cross {
        axis: usize,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Scale(_) => "scale",
            Primitive::Shift(_) => "shift",
            Primitive::Sum { .. } => "sum",
            Primitive::Broadcast { .. } => "broadcast",
            Primitive::Concat { .. } => "concat",
            Primitive::Narrow { .. } => "narrow",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Gather { .. } => "gather",
            Primitive::ScatterAdd { .. } => "scatter_add",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Silu => "silu",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Sqrt => "sqrt",
            Primitive::Abs => "abs",
            Primitive::SafeNorm { .. } => "safe_norm",
            Primitive::Cross { .. } => "cross",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::MatMul
            | Primitive::Cross { .. } => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }

    /// Evaluates the primitive on concrete inputs.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let op = self.name();
        match self.arity() {
            Some(n) if inputs.len() != n => {
                return Err(AutodiffError::InvalidArgument {
                    op,
                    reason: format!("expected {n} inputs, got {}", inputs.len()),
                })
            }
            None if inputs.is_empty() => {
                return Err(AutodiffError::InvalidArgument {
                    op,
                    reason: "expected at least one input".into(),
                })
            }
            _ => {}
        }

        match self {
            Primitive::Add => binary(op, inputs[0], inputs[1], |a, b| a + b),
            Primitive::Sub => binary(op, inputs[0], inputs[1], |a, b| a - b),
            Primitive::Mul => binary(op, inputs[0], inputs[1], |a, b| a * b),
            Primitive::Div => binary(op, inputs[0], inputs[1], |a, b| a / b),
            Primitive::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(mismatch(op, a, b));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Ok(Tensor::from_parts(vec![m, n], gemm_nn(a.data(), b.data(), m, k, n)))
            }
            Primitive::Transpose => {
                let a = inputs[0];
                if a.ndim() != 2 {
                    return Err(invalid(op, format!("expected a matrix, got shape {:?}", a.shape())));
                }
                let (m, n) = (a.shape()[0], a.shape()[1]);
                Ok(Tensor::from_parts(vec![n, m], transpose(a.data(), m, n)))
            }
            Primitive::Scale(c) => Ok(unary(inputs[0], |x| c * x)),
            Primitive::Shift(c) => Ok(unary(inputs[0], |x| x + c)),
            Primitive::Sum { axis } => {
                let x = inputs[0];
                let (outer, dim, inner) = split_at_axis(op, x.shape(), *axis)?;
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        let src = &x.data()[(o * dim + d) * inner..][..inner];
                        let dst = &mut out[o * inner..][..inner];
                        for (y, v) in dst.iter_mut().zip(src) {
                            *y += v;
                        }
                    }
                }
                Ok(Tensor::from_parts(remove_axis(x.shape(), *axis), out))
            }
            Primitive::Broadcast { axis, size } => {
                let x = inputs[0];
                if *axis > x.ndim() {
                    return Err(invalid(
                        op,
                        format!("axis {axis} out of range for shape {:?}", x.shape()),
                    ));
                }
                let outer: usize = x.shape()[..*axis].iter().product();
                let inner: usize = x.shape()[*axis..].iter().product();
                let mut out = Vec::with_capacity(outer * size * inner);
                for o in 0..outer {
                    let block = &x.data()[o * inner..][..inner];
                    for _ in 0..*size {
                        out.extend_from_slice(block);
                    }
                }
                let mut shape = x.shape().to_vec();
                shape.insert(*axis, *size);
                Ok(Tensor::from_parts(shape, out))
            }
            Primitive::Concat { axis } => {
                let first = inputs[0];
                let (outer, _, inner) = split_at_axis(op, first.shape(), *axis)?;
                let mut total = 0;
                for t in inputs {
                    let same_rank = t.ndim() == first.ndim();
                    let same_rest = same_rank
                        && t.shape()
                            .iter()
                            .zip(first.shape())
                            .enumerate()
                            .all(|(i, (a, b))| i == *axis || a == b);
                    if !same_rest {
                        return Err(mismatch(op, first, t));
                    }
                    total += t.shape()[*axis];
                }
                let mut out = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for t in inputs {
                        let d = t.shape()[*axis];
                        out.extend_from_slice(&t.data()[o * d * inner..][..d * inner]);
                    }
                }
                let mut shape = first.shape().to_vec();
                shape[*axis] = total;
                Ok(Tensor::from_parts(shape, out))
            }
            Primitive::Narrow { axis, start, len } => {
                let x = inputs[0];
                let (outer, dim, inner) = split_at_axis(op, x.shape(), *axis)?;
                if start + len > dim {
                    return Err(invalid(
                        op,
                        format!("range {start}..{} exceeds axis length {dim}", start + len),
                    ));
                }
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    out.extend_from_slice(&x.data()[(o * dim + start) * inner..][..len * inner]);
                }
                let mut shape = x.shape().to_vec();
                shape[*axis] = *len;
                Ok(Tensor::from_parts(shape, out))
            }
            Primitive::Reshape { shape } => {
                let x = inputs[0];
                if shape.iter().product::<usize>() != x.numel() {
                    return Err(AutodiffError::ShapeMismatch {
                        op,
                        lhs: x.shape().to_vec(),
                        rhs: shape.clone(),
                    });
                }
                Ok(Tensor::from_parts(shape.clone(), x.data().to_vec()))
            }
            Primitive::Gather { rows } => {
                let x = inputs[0];
                let (n, row) = rows_layout(op, x)?;
                let mut out = Vec::with_capacity(rows.len() * row);
                for &r in rows.iter() {
                    if r >= n {
                        return Err(invalid(op, format!("row {r} out of range for {n} rows")));
                    }
                    out.extend_from_slice(&x.data()[r * row..][..row]);
                }
                let mut shape = x.shape().to_vec();
                shape[0] = rows.len();
                Ok(Tensor::from_parts(shape, out))
            }
            Primitive::ScatterAdd { rows, size } => {
                let x = inputs[0];
                let (n, row) = rows_layout(op, x)?;
                if n != rows.len() {
                    return Err(invalid(
                        op,
                        format!("{} row indices for an input with {n} rows", rows.len()),
                    ));
                }
                let mut out = vec![0.0; size * row];
                // Ascending input order keeps the accumulation bitwise reproducible.
                for (src, &r) in rows.iter().enumerate() {
                    if r >= *size {
                        return Err(invalid(op, format!("target row {r} out of range for {size} rows")));
                    }
                    let dst = &mut out[r * row..][..row];
                    for (y, v) in dst.iter_mut().zip(&x.data()[src * row..][..row]) {
                        *y += v;
                    }
                }
                let mut shape = x.shape().to_vec();
                shape[0] = *size;
                Ok(Tensor::from_parts(shape, out))
            }
            Primitive::Sigmoid => Ok(unary(inputs[0], sigmoid)),
            Primitive::Silu => Ok(unary(inputs[0], |x| x * sigmoid(x))),
            Primitive::Sin => Ok(unary(inputs[0], f64::sin)),
            Primitive::Cos => Ok(unary(inputs[0], f64::cos)),
            Primitive::Sqrt => Ok(unary(inputs[0], f64::sqrt)),
            Primitive::Abs => Ok(unary(inputs[0], f64::abs)),
            Primitive::SafeNorm { axis, eps } => {
                let x = inputs[0];
                let (outer, dim, inner) = split_at_axis(op, x.shape(), *axis)?;
                let mut out = vec![eps * eps; outer * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        let src = &x.data()[(o * dim + d) * inner..][..inner];
                        for (y, v) in out[o * inner..][..inner].iter_mut().zip(src) {
                            *y += v * v;
                        }
                    }
                }
                out.iter_mut().for_each(|y| *y = y.sqrt());
                Ok(Tensor::from_parts(remove_axis(x.shape(), *axis), out))
            }
            Primitive::Cross { axis } => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() != b.shape() {
                    return Err(mismatch(op, a, b));
                }
                let (outer, dim, inner) = split_at_axis(op, a.shape(), *axis)?;
                if dim != 3 {
                    return Err(invalid(
                        op,
                        format!("axis {axis} of shape {:?} must have length 3", a.shape()),
                    ));
                }
                Ok(Tensor::from_parts(
                    a.shape().to_vec(),
                    cross(a.data(), b.data(), outer, inner),
                ))
            }
        }
    }

    /// Vector-Jacobian product: given the upstream gradient of the output,
    /// returns the gradient for every input flagged in `needs`.
    pub fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        let g = grad.data();
        let like = |t: &Tensor, data: Vec<f64>| Tensor::from_parts(t.shape().to_vec(), data);
        match self {
            Primitive::Add => vec![want(0).then(|| grad.clone()), want(1).then(|| grad.clone())],
            Primitive::Sub => vec![
                want(0).then(|| grad.clone()),
                want(1).then(|| like(grad, g.iter().map(|x| -x).collect())),
            ],
            Primitive::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    want(0).then(|| like(grad, g.iter().zip(b).map(|(g, b)| g * b).collect())),
                    want(1).then(|| like(grad, g.iter().zip(a).map(|(g, a)| g * a).collect())),
                ]
            }
            Primitive::Div => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    want(0).then(|| like(grad, g.iter().zip(b).map(|(g, b)| g / b).collect())),
                    want(1).then(|| {
                        like(
                            grad,
                            g.iter().zip(a).zip(b).map(|((g, a), b)| -g * a / (b * b)).collect(),
                        )
                    }),
                ]
            }
            Primitive::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                vec![
                    want(0).then(|| like(a, gemm_nt(g, b.data(), m, n, k))),
                    want(1).then(|| like(b, gemm_tn(a.data(), g, m, k, n))),
                ]
            }
            Primitive::Transpose => {
                let (m, n) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                vec![want(0).then(|| like(inputs[0], transpose(g, n, m)))]
            }
            Primitive::Scale(c) => vec![want(0).then(|| like(grad, g.iter().map(|x| c * x).collect()))],
            Primitive::Shift(_) | Primitive::Reshape { .. } => {
                vec![want(0).then(|| like(inputs[0], g.to_vec()))]
            }
            Primitive::Sum { axis } => {
                let x = inputs[0];
                vec![want(0).then(|| {
                    let size = x.shape()[*axis];
                    let tiled = Primitive::Broadcast { axis: *axis, size }
                        .forward(&[grad])
                        .expect("sum gradient broadcast");
                    like(x, tiled.into_data())
                })]
            }
            Primitive::Broadcast { axis, .. } => vec![want(0).then(|| {
                Primitive::Sum { axis: *axis }
                    .forward(&[grad])
                    .expect("broadcast gradient reduction")
            })],
            Primitive::Concat { axis } => {
                let mut start = 0;
                inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let len = t.shape()[*axis];
                        let piece = want(i).then(|| {
                            Primitive::Narrow {
                                axis: *axis,
                                start,
                                len,
                            }
                            .forward(&[grad])
                            .expect("concat gradient slice")
                        });
                        start += len;
                        piece
                    })
                    .collect()
            }
            Primitive::Narrow { axis, start, len } => {
                let x = inputs[0];
                vec![want(0).then(|| {
                    let (outer, dim, inner) = split_at_axis("narrow", x.shape(), *axis).expect("narrow shape");
                    let mut out = vec![0.0; x.numel()];
                    for o in 0..outer {
                        out[(o * dim + start) * inner..][..len * inner]
                            .copy_from_slice(&g[o * len * inner..][..len * inner]);
                    }
                    like(x, out)
                })]
            }
            Primitive::Gather { rows } => {
                let x = inputs[0];
                vec![want(0).then(|| {
                    Primitive::ScatterAdd {
                        rows: rows.clone(),
                        size: x.shape()[0],
                    }
                    .forward(&[grad])
                    .expect("gather gradient scatter")
                })]
            }
            Primitive::ScatterAdd { rows, .. } => vec![want(0).then(|| {
                Primitive::Gather { rows: rows.clone() }
                    .forward(&[grad])
                    .expect("scatter gradient gather")
            })],
            Primitive::Sigmoid => {
                let y = output.data();
                vec![want(0).then(|| like(grad, g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()))]
            }
            Primitive::Silu => {
                let x = inputs[0].data();
                vec![want(0).then(|| {
                    like(
                        grad,
                        g.iter()
                            .zip(x)
                            .map(|(g, &x)| {
                                let s = sigmoid(x);
                                g * (s + x * s * (1.0 - s))
                            })
                            .collect(),
                    )
                })]
            }
            Primitive::Sin => {
                let x = inputs[0].data();
                vec![want(0).then(|| like(grad, g.iter().zip(x).map(|(g, x)| g * x.cos()).collect()))]
            }
            Primitive::Cos => {
                let x = inputs[0].data();
                vec![want(0).then(|| like(grad, g.iter().zip(x).map(|(g, x)| -g * x.sin()).collect()))]
            }
            Primitive::Sqrt => {
                let y = output.data();
                vec![want(0).then(|| like(grad, g.iter().zip(y).map(|(g, y)| g / (2.0 * y)).collect()))]
            }
            Primitive::Abs => {
                let x = inputs[0].data();
                vec![want(0).then(|| {
                    like(
                        grad,
                        g.iter()
                            .zip(x)
                            .map(|(g, &x)| if x == 0.0 { 0.0 } else { g * x.signum() })
                            .collect(),
                    )
                })]
            }
            Primitive::SafeNorm { axis, .. } => {
                let x = inputs[0];
                vec![want(0).then(|| {
                    let (outer, dim, inner) = split_at_axis("safe_norm", x.shape(), *axis).expect("safe_norm shape");
                    let y = output.data();
                    let mut out = vec![0.0; x.numel()];
                    for o in 0..outer {
                        for d in 0..dim {
                            let base = (o * dim + d) * inner;
                            for i in 0..inner {
                                let norm = y[o * inner + i];
                                // With eps = 0 the norm can vanish; the subgradient 0 is used there.
                                if norm > 0.0 {
                                    out[base + i] = g[o * inner + i] * x.data()[base + i] / norm;
                                }
                            }
                        }
                    }
                    like(x, out)
                })]
            }
            Primitive::Cross { axis } => {
                let (a, b) = (inputs[0], inputs[1]);
                let (outer, _, inner) = split_at_axis("cross", a.shape(), *axis).expect("cross shape");
                vec![
                    want(0).then(|| like(a, cross(b.data(), g, outer, inner))),
                    want(1).then(|| like(b, cross(g, a.data(), outer, inner))),
                ]
            }
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())?;
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        match self {
            Primitive::Scale(c) | Primitive::Shift(c) => write!(f, "({c})"),
            Primitive::Sum { axis } | Primitive::Concat { axis } | Primitive::Cross { axis } => {
                write!(f, "({axis})")
            }
            Primitive::Broadcast { axis, size } => write!(f, "({axis},{size})"),
            Primitive::Narrow { axis, start, len } => write!(f, "({axis},{start},{len})"),
            Primitive::Reshape { shape } => write!(f, "({})", join(shape)),
            Primitive::Gather { rows } => write!(f, "({})", join(rows)),
            Primitive::ScatterAdd { rows, size } => {
                if rows.is_empty() {
                    write!(f, "({size})")
                } else {
                    write!(f, "({size},{})", join(rows))
                }
            }
            Primitive::SafeNorm { axis, eps } => write!(f, "({axis},{eps})"),
            _ => Ok(()),
        }
    }
}

/// Parses the textual form produced by `Display`, e.g. `sigmoid`, `sum(1)`,
/// `safe_norm(0,1e-8)` or `scatter_add(2,0,0,1)` (target size first).
impl FromStr for Primitive {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(open) if s.ends_with(')') => (&s[..open], &s[open + 1..s.len() - 1]),
            Some(_) => return Err(AutodiffError::UnknownPrimitive(s.to_string())),
            None => (s, ""),
        };
        let args: Vec<&str> = args.split(',').map(str::trim).filter(|a| !a.is_empty()).collect();
        let bad = || AutodiffError::UnknownPrimitive(s.to_string());
        let real = |i: usize| args.get(i).and_then(|a| a.parse::<f64>().ok()).ok_or_else(bad);
        let int = |i: usize| args.get(i).and_then(|a| a.parse::<usize>().ok()).ok_or_else(bad);
        let ints = |from: usize| -> Result<Vec<usize>> { (from..args.len()).map(int).collect() };
        let exact = |n: usize, p: Primitive| if args.len() == n { Ok(p) } else { Err(bad()) };

        match name {
            "add" => exact(0, Primitive::Add),
            "sub" => exact(0, Primitive::Sub),
            "mul" => exact(0, Primitive::Mul),
            "div" => exact(0, Primitive::Div),
            "matmul" => exact(0, Primitive::MatMul),
            "transpose" => exact(0, Primitive::Transpose),
            "sigmoid" => exact(0, Primitive::Sigmoid),
            "silu" => exact(0, Primitive::Silu),
            "sin" => exact(0, Primitive::Sin),
            "cos" => exact(0, Primitive::Cos),
            "sqrt" => exact(0, Primitive::Sqrt),
            "abs" => exact(0, Primitive::Abs),
            "scale" => exact(1, Primitive::Scale(real(0)?)),
            "shift" => exact(1, Primitive::Shift(real(0)?)),
            "sum" => exact(1, Primitive::Sum { axis: int(0)? }),
            "concat" => exact(1, Primitive::Concat { axis: int(0)? }),
            "cross" => exact(1, Primitive::Cross { axis: int(0)? }),
            "broadcast" => exact(
                2,
                Primitive::Broadcast {
                    axis: int(0)?,
                    size: int(1)?,
                },
            ),
            "narrow" => exact(
                3,
                Primitive::Narrow {
                    axis: int(0)?,
                    start: int(1)?,
                    len: int(2)?,
                },
            ),
            "safe_norm" => exact(
                2,
                Primitive::SafeNorm {
                    axis: int(0)?,
                    eps: real(1)?,
                },
            ),
            "reshape" => Ok(Primitive::Reshape { shape: ints(0)? }),
            "gather" => Ok(Primitive::Gather { rows: ints(0)?.into() }),
            "scatter_add" => Ok(Primitive::ScatterAdd {
                size: int(0)?,
                rows: ints(1)?.into(),
            }),
            _ => Err(bad()),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, reason: String) -> AutodiffError {
    AutodiffError::InvalidArgument { op, reason }
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a, b));
    }
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    ))
}

/// `(outer, dim, inner)` sizes around `axis`.
fn split_at_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(invalid(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

fn remove_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    out.remove(axis);
    out
}

fn rows_layout(op: &'static str, x: &Tensor) -> Result<(usize, usize)> {
    if x.ndim() == 0 {
        return Err(invalid(op, "input must have at least one axis".into()));
    }
    Ok((x.shape()[0], x.shape()[1..].iter().product()))
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `a[m,k] * b[k,n]`.
fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..][..n];
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == 0.0 {
                continue;
            }
            for (y, &bv) in row.iter_mut().zip(&b[p * n..][..n]) {
                *y += aik * bv;
            }
        }
    }
    c
}

/// `g[m,n] * b[k,n]^T -> [m,k]`.
fn gemm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let gi = &g[i * n..][..n];
        for p in 0..k {
            c[i * k + p] = gi.iter().zip(&b[p * n..][..n]).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a[m,k]^T * g[m,n] -> [k,n]`.
fn gemm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let gi = &g[i * n..][..n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (y, &gv) in c[p * n..][..n].iter_mut().zip(gi) {
                *y += aip * gv;
            }
        }
    }
    c
}

fn cross(a: &[f64], b: &[f64], outer: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; outer * 3 * inner];
    for o in 0..outer {
        let base = o * 3 * inner;
        for i in 0..inner {
            let at = |d: usize| base + d * inner + i;
            let (ax, ay, az) = (a[at(0)], a[at(1)], a[at(2)]);
            let (bx, by, bz) = (b[at(0)], b[at(1)], b[at(2)]);
            out[at(0)] = ay * bz - az * by;
            out[at(1)] = az * bx - ax * bz;
            out[at(2)] = ax * by - ay * bx;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_is_componentwise() {
        let out = Primitive::Add
            .forward(&[&t(&[2], &[1.0, 2.0]), &t(&[2], &[3.0, 4.0])])
            .unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn identity_matmul_returns_input() {
        let p = t(&[3, 1], &[0.3, -1.2, 7.5]);
        let out = Primitive::MatMul.forward(&[&Tensor::eye(3), &p]).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn scatter_add_sums_duplicate_rows() {
        let op = Primitive::ScatterAdd {
            rows: vec![0, 0, 1].into(),
            size: 2,
        };
        let out = op.forward(&[&t(&[3, 1], &[1.0, 2.0, 3.0])]).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[3.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let err = Primitive::Mul
            .forward(&[&t(&[2], &[1.0, 2.0]), &t(&[3], &[1.0, 2.0, 3.0])])
            .unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("mul") && msg.contains("[2]") && msg.contains("[3]"),
            "{msg}"
        );
    }

    #[test]
    fn matmul_inner_dimension_checked() {
        let err = Primitive::MatMul
            .forward(&[&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])])
            .unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn unknown_primitive_is_rejected() {
        assert!(matches!(
            "softmax".parse::<Primitive>(),
            Err(AutodiffError::UnknownPrimitive(_))
        ));
        assert!("sum".parse::<Primitive>().is_err());
        assert!("sum(1".parse::<Primitive>().is_err());
    }

    #[test]
    fn display_round_trips_through_parse() {
        let ops = [
            Primitive::Add,
            Primitive::Sum { axis: 1 },
            Primitive::SafeNorm { axis: 0, eps: 1e-8 },
            Primitive::Narrow {
                axis: 1,
                start: 2,
                len: 3,
            },
            Primitive::ScatterAdd {
                rows: vec![0, 0, 1].into(),
                size: 2,
            },
            Primitive::Gather {
                rows: vec![2, 0].into(),
            },
            Primitive::Reshape { shape: vec![3, 4] },
            Primitive::Scale(-0.5),
        ];
        for op in ops {
            assert_eq!(op.to_string().parse::<Primitive>().unwrap(), op);
        }
    }

    #[test]
    fn cross_follows_right_hand_rule() {
        let x = t(&[3], &[1.0, 0.0, 0.0]);
        let y = t(&[3], &[0.0, 1.0, 0.0]);
        let z = Primitive::Cross { axis: 0 }.forward(&[&x, &y]).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        let c = Primitive::Concat { axis: 1 }.forward(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = Primitive::Narrow {
            axis: 1,
            start: 0,
            len: 2,
        }
        .forward(&[&c])
        .unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn broadcast_then_sum_scales_by_size() {
        let x = t(&[2], &[1.0, -2.0]);
        let b = Primitive::Broadcast { axis: 0, size: 3 }.forward(&[&x]).unwrap();
        assert_eq!(b.shape(), &[3, 2]);
        let s = Primitive::Sum { axis: 0 }.forward(&[&b]).unwrap();
        assert_eq!(s.data(), &[3.0, -6.0]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
