use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{axis_split, Scalar, Tensor};

use super::graph::{Contributions, Graph, Node, Op, Var};

/// Variance floor inside layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-6;

impl<T: Scalar> Graph<T> {
    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(arg_err("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mut max = T::neg_infinity();
                for i in 0..len {
                    max = max.max(xv[at(i)]);
                }
                let mut total = T::zero();
                for i in 0..len {
                    let e = (xv[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                let inv = T::one() / total;
                for i in 0..len {
                    out[at(i)] *= inv;
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis })
    }

    /// Layer normalization along `axis` with learned affine `gamma`, `beta`
    /// (both shaped `[shape[axis]]`).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(arg_err("layernorm", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        if self.shape(gamma) != [len] || self.shape(beta) != [len] {
            return Err(shape_err(
                "layernorm",
                format!("affine {:?}/{:?} vs axis len {len}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let inv_len = T::from_f64(1.0 / len as f64);
        let eps = T::from_f64(LAYERNORM_EPS);
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mean = (0..len).map(|i| xv[at(i)]).sum::<T>() * inv_len;
                let var = (0..len)
                    .map(|i| {
                        let d = xv[at(i)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    * inv_len;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + j] = r;
                for i in 0..len {
                    let h = (xv[at(i)] - mean) * r;
                    xhat[at(i)] = h;
                    out[at(i)] = h * gv[i] + bv[i];
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            },
        )
    }
}

pub(super) fn softmax_backward<T: Scalar>(
    out: &Tensor<T>,
    x: Var,
    axis: usize,
    g: &[T],
) -> Contributions<T> {
    let (outer, len, inner) = axis_split(out.shape(), axis);
    let y = out.data();
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let dot: T = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
            for i in 0..len {
                dx[at(i)] = y[at(i)] * (g[at(i)] - dot);
            }
        }
    }
    vec![(x, dx)]
}

#[allow(clippy::too_many_arguments)]
pub(super) fn layernorm_backward<T: Scalar>(
    nodes: &[Node<T>],
    x: Var,
    gamma: Var,
    beta: Var,
    axis: usize,
    xhat: &[T],
    rstd: &[T],
    g: &[T],
) -> Contributions<T> {
    let shape = nodes[x.0].value.shape();
    let (outer, len, inner) = axis_split(shape, axis);
    let gv = nodes[gamma.0].value.data();
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); len];
    let mut dbeta = vec![T::zero(); len];
    let inv_len = T::from_f64(1.0 / len as f64);
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let mut mean_d = T::zero();
            let mut mean_dh = T::zero();
            for i in 0..len {
                let d = g[at(i)] * gv[i];
                mean_d += d;
                mean_dh += d * xhat[at(i)];
                dgamma[i] += g[at(i)] * xhat[at(i)];
                dbeta[i] += g[at(i)];
            }
            mean_d *= inv_len;
            mean_dh *= inv_len;
            let r = rstd[o * inner + j];
            for i in 0..len {
                let d = g[at(i)] * gv[i];
                dx[at(i)] = r * (d - mean_d - xhat[at(i)] * mean_dh);
            }
        }
    }
    let mut c = Vec::new();
    if nodes[x.0].requires_grad {
        c.push((x, dx));
    }
    if nodes[gamma.0].requires_grad {
        c.push((gamma, dgamma));
    }
    if nodes[beta.0].requires_grad {
        c.push((beta, dbeta));
    }
    c
}
