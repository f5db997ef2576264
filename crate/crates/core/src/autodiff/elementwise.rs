use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

use super::graph::{Contributions, Graph, Node, Op, Var};

// tanh-approximation constants, fixed for the whole crate
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s; `b` repeats
    /// over the leading axes.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(
                "add_broadcast",
                format!("{sb:?} is not a suffix of {sa:?}"),
            ));
        }
        let inner = self.value(b).numel();
        let bv = self.value(b).data();
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % inner])
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(out, Op::AddBroadcast(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| T::from_f64(gelu_scalar(v.as_f64())));
        self.push(out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| T::from_f64(1.0 / (1.0 + (-v.as_f64()).exp())));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(arg_err("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let out = permute_data(self.value(x), perm);
        self.push(out, Op::Permute(x, perm.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_f64(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x))
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute_data<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let numel = src.len();
    let mut out = Vec::with_capacity(numel);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        out.push(src[offset]);
        // odometer increment over the output index
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= step[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves size")
}

pub(super) fn mul_backward<T: Scalar>(
    nodes: &[Node<T>],
    a: Var,
    b: Var,
    g: &[T],
) -> Contributions<T> {
    let av = nodes[a.0].value.data();
    let bv = nodes[b.0].value.data();
    let mut c = Vec::new();
    if nodes[a.0].requires_grad {
        c.push((a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect()));
    }
    if nodes[b.0].requires_grad {
        c.push((b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect()));
    }
    c
}

pub(super) fn add_broadcast_backward<T: Scalar>(
    nodes: &[Node<T>],
    a: Var,
    b: Var,
    g: &[T],
) -> Contributions<T> {
    let mut c = Vec::new();
    if nodes[a.0].requires_grad {
        c.push((a, g.to_vec()));
    }
    if nodes[b.0].requires_grad {
        let inner = nodes[b.0].value.numel();
        let mut db = vec![T::zero(); inner];
        for chunk in g.chunks(inner) {
            for (d, &v) in db.iter_mut().zip(chunk) {
                *d += v;
            }
        }
        c.push((b, db));
    }
    c
}

pub(super) fn relu_backward<T: Scalar>(nodes: &[Node<T>], x: Var, g: &[T]) -> Contributions<T> {
    let xv = nodes[x.0].value.data();
    vec![(
        x,
        xv.iter()
            .zip(g)
            .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
            .collect(),
    )]
}

pub(super) fn gelu_backward<T: Scalar>(nodes: &[Node<T>], x: Var, g: &[T]) -> Contributions<T> {
    let xv = nodes[x.0].value.data();
    vec![(
        x,
        xv.iter()
            .zip(g)
            .map(|(&v, &gv)| gv * T::from_f64(gelu_grad_scalar(v.as_f64())))
            .collect(),
    )]
}

pub(super) fn permute_backward<T: Scalar>(
    nodes: &[Node<T>],
    x: Var,
    perm: &[usize],
    g: &[T],
) -> Contributions<T> {
    let in_shape = nodes[x.0].value.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut inverse = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let gt = Tensor::new(out_shape, g.to_vec()).expect("grad matches output");
    vec![(x, permute_data(&gt, &inverse).into_data())]
}
