use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

use super::graph::{Contributions, Graph, Node, Op, Var};

/// Output extent of a strided window, or `None` when it is not integral.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], geo: &ConvGeom, cols: &mut [T]) {
    let p = geo.p();
    for ci in 0..geo.c_in {
        let plane = &x[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (ci * geo.kh + ky) * geo.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..geo.ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    let line = &mut dst[oy * geo.wo..(oy + 1) * geo.wo];
                    if iy < 0 || iy >= geo.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        *d = if ix < 0 || ix >= geo.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], geo: &ConvGeom, dx: &mut [T]) {
    let p = geo.p();
    for ci in 0..geo.c_in {
        let plane = &mut dx[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (ci * geo.kh + ky) * geo.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..geo.ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let line = &src[oy * geo.wo..(oy + 1) * geo.wo];
                    let dst = &mut plane[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < geo.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation of `x[N,C_in,H,W]` with `w[C_out,C_in,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", format!("input {sx:?} vs kernel {sw:?}")));
        }
        let (n, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let (Some(ho), Some(wo)) = (
            conv_out_extent(h, kh, stride, pad),
            conv_out_extent(wd, kw, stride, pad),
        ) else {
            return Err(shape_err(
                "conv2d",
                format!("non-integral output for {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}"),
            ));
        };
        let geo = ConvGeom {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        };
        let (k, p) = (geo.k(), geo.p());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * c_out * p];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for s in 0..n {
            let xs = &xv[s * c_in * h * wd..(s + 1) * c_in * h * wd];
            let os = &mut out[s * c_out * p..(s + 1) * c_out * p];
            if let Some(b) = b {
                for (co, &bv) in self.value(b).data().iter().enumerate() {
                    os[co * p..(co + 1) * p].fill(bv);
                }
            }
            let src: &[T] = if geo.is_pointwise() {
                xs
            } else {
                im2col(xs, &geo, &mut cols);
                &cols
            };
            T::gemm(c_out, k, p, T::one(), wv, k as isize, 1, src, p as isize, 1, T::one(), os, p as isize, 1);
        }
        let out = Tensor::new(vec![n, c_out, ho, wo], out)?;
        self.push(out, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Per-channel convolution with "same" padding: `w[C,1,kh,kw]`, odd kernel.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[1] != 1 {
            return Err(shape_err(
                "depthwise_conv2d",
                format!("input {sx:?} vs kernel {sw:?}"),
            ));
        }
        let (kh, kw) = (sw[2], sw[3]);
        if kh % 2 == 0 || kw % 2 == 0 || kh != kw {
            return Err(shape_err(
                "depthwise_conv2d",
                format!("kernel must be square and odd, got {kh}x{kw}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [sx[1]] {
                return Err(shape_err("depthwise_conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let pad = kh / 2;
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let hw = h * wd;
        let mut out = vec![T::zero(); n * c * hw];
        for s in 0..n {
            for ch in 0..c {
                let plane = &xv[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                let dst = &mut out[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                if let Some(b) = b {
                    dst.fill(self.value(b).data()[ch]);
                }
                let kern = &wv[ch * kh * kw..(ch + 1) * kh * kw];
                depthwise_plane(kern, h, wd, kh, pad, |oi, ii, wgt| {
                    dst[oi] += wgt * plane[ii];
                });
            }
        }
        let out = Tensor::new(sx, out)?;
        self.push(out, Op::DepthwiseConv2d { x, w, b, pad })
    }
}

/// Visits every (output index, input index, weight) triple of a same-padded
/// single-plane correlation. Rows are walked contiguously.
fn depthwise_plane<T: Scalar>(
    kern: &[T],
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    mut visit: impl FnMut(usize, usize, T),
) {
    for ky in 0..k {
        for kx in 0..k {
            let wgt = kern[ky * k + kx];
            let dy = ky as isize - pad as isize;
            let dx = kx as isize - pad as isize;
            let oy0 = (-dy).max(0) as usize;
            let oy1 = (h as isize - dy).min(h as isize).max(0) as usize;
            let ox0 = (-dx).max(0) as usize;
            let ox1 = (w as isize - dx).min(w as isize).max(0) as usize;
            for oy in oy0..oy1 {
                let iy = (oy as isize + dy) as usize;
                for ox in ox0..ox1 {
                    let ix = (ox as isize + dx) as usize;
                    visit(oy * w + ox, iy * w + ix, wgt);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward<T: Scalar>(
    nodes: &[Node<T>],
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
    g: &[T],
) -> Contributions<T> {
    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
    let sx = xv.shape();
    let sw = wv.shape();
    let geo = ConvGeom {
        c_in: sx[1],
        h: sx[2],
        w: sx[3],
        kh: sw[2],
        kw: sw[3],
        ho: out_shape[2],
        wo: out_shape[3],
        stride,
        pad,
    };
    let (n, c_out) = (sx[0], sw[0]);
    let (k, p) = (geo.k(), geo.p());
    let in_len = geo.c_in * geo.h * geo.w;
    let need_x = nodes[x.0].requires_grad;
    let need_w = nodes[w.0].requires_grad;
    let mut dx = if need_x { vec![T::zero(); xv.numel()] } else { Vec::new() };
    let mut dw = if need_w { vec![T::zero(); wv.numel()] } else { Vec::new() };
    let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { k * p }];
    let mut dcols = vec![T::zero(); if need_x && !geo.is_pointwise() { k * p } else { 0 }];
    for s in 0..n {
        let gs = &g[s * c_out * p..(s + 1) * c_out * p];
        let xs = &xv.data()[s * in_len..(s + 1) * in_len];
        if need_w {
            let src: &[T] = if geo.is_pointwise() {
                xs
            } else {
                im2col(xs, &geo, &mut cols);
                &cols
            };
            // dW += G @ cols^T
            T::gemm(c_out, p, k, T::one(), gs, p as isize, 1, src, 1, p as isize, T::one(), &mut dw, k as isize, 1);
        }
        if need_x {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if geo.is_pointwise() {
                T::gemm(k, c_out, p, T::one(), wv.data(), 1, k as isize, gs, p as isize, 1, T::one(), dxs, p as isize, 1);
            } else {
                T::gemm(k, c_out, p, T::one(), wv.data(), 1, k as isize, gs, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                col2im(&dcols, &geo, dxs);
            }
        }
    }
    let mut c = Vec::new();
    if need_x {
        c.push((x, dx));
    }
    if need_w {
        c.push((w, dw));
    }
    if let Some(b) = b {
        if nodes[b.0].requires_grad {
            c.push((b, channel_sums(g, n, c_out, p)));
        }
    }
    c
}

fn channel_sums<T: Scalar>(g: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for s in 0..n {
        for (ch, d) in db.iter_mut().enumerate() {
            let start = (s * c + ch) * p;
            *d += g[start..start + p].iter().copied().sum::<T>();
        }
    }
    db
}

pub(super) fn depthwise_backward<T: Scalar>(
    nodes: &[Node<T>],
    x: Var,
    w: Var,
    b: Option<Var>,
    pad: usize,
    g: &[T],
) -> Contributions<T> {
    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
    let sx = xv.shape();
    let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let k = wv.shape()[2];
    let hw = h * wd;
    let need_x = nodes[x.0].requires_grad;
    let need_w = nodes[w.0].requires_grad;
    let mut dx = vec![T::zero(); if need_x { xv.numel() } else { 0 }];
    let mut dw = vec![T::zero(); if need_w { wv.numel() } else { 0 }];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            let plane = &xv.data()[off..off + hw];
            let gp = &g[off..off + hw];
            let kern = &wv.data()[ch * k * k..(ch + 1) * k * k];
            if need_x {
                let dxp = &mut dx[off..off + hw];
                depthwise_plane(kern, h, wd, k, pad, |oi, ii, wgt| {
                    dxp[ii] += wgt * gp[oi];
                });
            }
            if need_w {
                let dwk = &mut dw[ch * k * k..(ch + 1) * k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let dy = ky as isize - pad as isize;
                        let dxo = kx as isize - pad as isize;
                        let mut acc = T::zero();
                        for oy in 0..h {
                            let iy = oy as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wd {
                                let ix = ox as isize + dxo;
                                if ix >= 0 && ix < wd as isize {
                                    acc += gp[oy * wd + ox] * plane[iy as usize * wd + ix as usize];
                                }
                            }
                        }
                        dwk[ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    if need_x {
        out.push((x, dx));
    }
    if need_w {
        out.push((w, dw));
    }
    if let Some(b) = b {
        if nodes[b.0].requires_grad {
            out.push((b, channel_sums(g, n, c, hw)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 3, 4, 5], |i| (i as f64 * 0.37).sin()));
        let eye = g.constant(Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }));
        let y = g.conv2d(x, eye, None, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn ones_kernel_on_constant_field() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 5, 5], 2.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 1, 5, 5]);
        assert_eq!(out.get(&[0, 0, 2, 2]), 18.0);
        // corners see four taps
        assert_eq!(out.get(&[0, 0, 0, 0]), 8.0);
    }

    #[test]
    fn non_integral_extent_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 10, 10]));
        let w = g.constant(Tensor::zeros(&[4, 3, 4, 4]));
        assert!(g.conv2d(x, w, None, 4, 0).is_err());
        assert_eq!(conv_out_extent(32, 4, 4, 0), Some(8));
        assert_eq!(conv_out_extent(5, 3, 2, 1), Some(3));
    }

    #[test]
    fn depthwise_delta_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 2, 4, 4], |i| i as f64));
        let w = g.constant(Tensor::from_fn(&[2, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 }));
        let y = g.depthwise_conv2d(x, w, None).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn depthwise_channels_never_mix() {
        let kern = Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64 * 0.7).cos());
        let base = Tensor::from_fn(&[1, 2, 5, 5], |i| (i as f64 * 1.3).sin());
        let mut zeroed = base.clone();
        zeroed.data_mut()[..25].fill(0.0);
        let mut g = Graph::<f64>::new();
        let w = g.constant(kern);
        let a = g.constant(base);
        let b = g.constant(zeroed);
        let ya = g.depthwise_conv2d(a, w, None).unwrap();
        let yb = g.depthwise_conv2d(b, w, None).unwrap();
        assert_eq!(&g.value(ya).data()[25..], &g.value(yb).data()[25..]);
        assert_ne!(&g.value(ya).data()[..25], &g.value(yb).data()[..25]);
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 7, 5], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
        let w = Tensor::<f64>::from_fn(&[4, 3, 3, 3], |i| ((i * 104729) % 97) as f64 / 48.0 - 1.0);
        let (stride, pad) = (2, 1);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let out = g.value(y);
        let (ho, wo) = (out.shape()[2], out.shape()[3]);
        for n in 0..2 {
            for co in 0..4 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if (0..7).contains(&iy) && (0..5).contains(&ix) {
                                        acc += x.get(&[n, ci, iy as usize, ix as usize])
                                            * w.get(&[co, ci, ky, kx]);
                                    }
                                }
                            }
                        }
                        assert!((out.get(&[n, co, oy, ox]) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
