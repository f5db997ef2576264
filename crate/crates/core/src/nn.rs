//! Parameter storage and the basic layers used by every model.
//!
//! A model owns a [`ParamStore`] of named tensors. Layers only hold
//! [`ParamId`]s; each forward pass binds the store into a fresh
//! [`Graph`](crate::autodiff::Graph) as leaves and hands the layers a
//! [`Bound`] table to look their variables up in.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{arg_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type InitRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered table of named parameters. Insertion order is the canonical
/// iteration order for binding, optimizers and checkpoints.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor by name from `other`, checking shapes.
    pub fn load_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, t) in other {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?} vs stored {:?}",
                    t.shape(),
                    self.tensors[id.0].shape()
                )));
            }
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }

    /// Adds every parameter to `g` as a gradient-requiring leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Adds every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// The graph variables of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Uniform in `[-bound, bound)` with `bound = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut InitRng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

/// Uniform in `[-bound, bound)` with `bound = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut InitRng,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

/// `[rows, cols]` matrix with orthonormal columns when `rows >= cols`,
/// otherwise orthonormal rows. Random start, modified Gram-Schmidt.
pub fn orthogonal<T: Scalar>(rows: usize, cols: usize, rng: &mut InitRng) -> Tensor<T> {
    // orthonormalise the `k` vectors of length `len` along the shorter side
    let (k, len) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(k);
    while vecs.len() < k {
        let mut v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(u) {
                *a -= d * b;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        vecs.push(v);
    }
    Tensor::from_fn(&[rows, cols], |i| {
        let (r, c) = (i / cols, i % cols);
        T::from_f64(if rows >= cols { vecs[c][r] } else { vecs[r][c] })
    })
}

/// Square identity matrix.
pub fn identity<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square `kernel`, Kaiming-uniform weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut InitRng,
    ) -> Self {
        let shape = [c_out, c_in, kernel, kernel];
        let w = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&shape, c_in * kernel * kernel, rng),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Conv2d {
            w,
            b,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut InitRng,
    ) -> Self {
        Self::new(store, name, c_in, c_out, 3, 1, 1, true, rng)
    }

    pub fn pointwise<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
        rng: &mut InitRng,
    ) -> Self {
        Self::new(store, name, c_in, c_out, 1, 1, 0, bias, rng)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), self.b.map(|b| p.var(b)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl DepthwiseConv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut InitRng,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[channels, 1, kernel, kernel], kernel * kernel, rng),
        );
        let b = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[channels])));
        DepthwiseConv2d { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.depthwise_conv2d(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Xavier-uniform weights `[c_in, c_out]`, zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
        rng: &mut InitRng,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            xavier_uniform(&[c_in, c_out], c_in, c_out, rng),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

/// Learned affine normalisation over one axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, axis: usize) -> Result<Var> {
        g.layernorm(x, p.var(self.gamma), p.var(self.beta), axis)
    }
}

/// Reshape `[N,C,H,W]` to channel-last tokens `[N,H*W,C]`.
pub fn to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(arg_err("to_tokens", format!("expected [N,C,H,W], got {s:?}")));
    }
    let t = g.permute(x, &[0, 2, 3, 1])?;
    g.reshape(t, &[s[0], s[2] * s[3], s[1]])
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<T: Scalar>(g: &mut Graph<T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(t).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(arg_err("from_tokens", format!("{s:?} is not [N,{h}*{w},C]")));
    }
    let x = g.reshape(t, &[s[0], h, w, s[2]])?;
    g.permute(x, &[0, 3, 1, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_param_count() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = InitRng::seed_from_u64(0);
        Linear::new(&mut store, "fc", 2, 3, true, &mut rng);
        assert_eq!(store.count(), 9);
    }

    #[test]
    fn orthogonal_columns_and_rows() {
        let mut rng = InitRng::seed_from_u64(3);
        for (r, c) in [(8, 5), (5, 8), (6, 6)] {
            let m = orthogonal::<f64>(r, c, &mut rng);
            let (k, len, at): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if r >= c {
                (c, r, Box::new(|v, i| m.get(&[i, v])))
            } else {
                (r, c, Box::new(|v, i| m.get(&[v, i])))
            };
            for a in 0..k {
                for b in 0..k {
                    let d: f64 = (0..len).map(|i| at(a, i) * at(b, i)).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn token_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64));
        let t = to_tokens(&mut g, x).unwrap();
        assert_eq!(g.shape(t), &[2, 20, 3]);
        assert_eq!(g.value(t).get(&[1, 7, 2]), g.value(x).get(&[1, 2, 1, 2]));
        let back = from_tokens(&mut g, t, 4, 5).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn load_from_checks_names_and_shapes() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[2]));
        assert!(store
            .load_from(&[("a".into(), Tensor::full(&[2], 1.0))])
            .is_ok());
        assert_eq!(store.get(ParamId(0)).data(), &[1.0, 1.0]);
        assert!(store.load_from(&[("b".into(), Tensor::zeros(&[2]))]).is_err());
        assert!(store.load_from(&[("a".into(), Tensor::zeros(&[3]))]).is_err());
    }
}
