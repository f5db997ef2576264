use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

use super::graph::{Contributions, Graph, Node, Op, Var};

fn rank4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err(op, format!("expected [N,C,H,W], got {shape:?}"))),
    }
}

/// Source index for each of `out` destination positions of a nearest-index
/// resize from `inp` positions: `floor(d * inp / out)`.
pub fn nearest_index_map(inp: usize, out: usize) -> Vec<usize> {
    (0..out).map(|d| d * inp / out).collect()
}

impl<T: Scalar> Graph<T> {
    /// 2x2 max pooling with stride 2. Odd extents keep a truncated trailing
    /// window, so the output is `ceil(H/2) x ceil(W/2)`. Ties resolve to the
    /// first maximum in row-major window order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = rank4("maxpool2d", self.shape(x))?;
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for iy in 2 * oy..(2 * oy + 2).min(h) {
                        for ix in 2 * ox..(2 * ox + 2).min(w) {
                            let idx = base + iy * w + ix;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(out, Op::MaxPool2d { x, argmax })
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn avgpool_spatial(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = rank4("avgpool_spatial", self.shape(x))?;
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Tensor::new(vec![n, c], out)?, Op::AvgPoolSpatial(x))
    }

    /// Nearest-neighbour 2x upsampling; with `target` the output takes that
    /// exact extent via the nearest-index map instead.
    pub fn upsample_nearest2x(&mut self, x: Var, target: Option<(usize, usize)>) -> Result<Var> {
        let (_, _, h, w) = rank4("upsample_nearest2x", self.shape(x))?;
        let (th, tw) = target.unwrap_or((2 * h, 2 * w));
        self.resize_nearest(x, th, tw)
    }

    pub fn resize_nearest(&mut self, x: Var, th: usize, tw: usize) -> Result<Var> {
        let (n, c, h, w) = rank4("resize_nearest", self.shape(x))?;
        if th == 0 || tw == 0 {
            return Err(arg_err("resize_nearest", "target extent must be positive"));
        }
        let ry = nearest_index_map(h, th);
        let rx = nearest_index_map(w, tw);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * th * tw);
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for &sy in &ry {
                for &sx in &rx {
                    out.push(src[sy * w + sx]);
                }
            }
        }
        self.push(Tensor::new(vec![n, c, th, tw], out)?, Op::ResizeNearest(x))
    }
}

pub(super) fn maxpool_backward<T: Scalar>(
    nodes: &[Node<T>],
    x: Var,
    argmax: &[usize],
    g: &[T],
) -> Contributions<T> {
    let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
    for (&src, &gv) in argmax.iter().zip(g) {
        dx[src] += gv;
    }
    vec![(x, dx)]
}

pub(super) fn avgpool_backward<T: Scalar>(nodes: &[Node<T>], x: Var, g: &[T]) -> Contributions<T> {
    let s = nodes[x.0].value.shape();
    let hw = s[2] * s[3];
    let inv = T::from_f64(1.0 / hw as f64);
    let mut dx = Vec::with_capacity(nodes[x.0].value.numel());
    for &gv in g {
        dx.extend(std::iter::repeat_n(gv * inv, hw));
    }
    vec![(x, dx)]
}

pub(super) fn resize_backward<T: Scalar>(
    nodes: &[Node<T>],
    x: Var,
    out_shape: &[usize],
    g: &[T],
) -> Contributions<T> {
    let s = nodes[x.0].value.shape();
    let (h, w) = (s[2], s[3]);
    let (th, tw) = (out_shape[2], out_shape[3]);
    let ry = nearest_index_map(h, th);
    let rx = nearest_index_map(w, tw);
    let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
    for plane in 0..s[0] * s[1] {
        let gp = &g[plane * th * tw..(plane + 1) * th * tw];
        let dp = &mut dx[plane * h * w..(plane + 1) * h * w];
        for (oy, &sy) in ry.iter().enumerate() {
            for (ox, &sx) in rx.iter().enumerate() {
                dp[sy * w + sx] += gp[oy * tw + ox];
            }
        }
    }
    vec![(x, dx)]
}
