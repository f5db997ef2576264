use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

use super::graph::{Contributions, Graph, Node, Op, Var};

impl<T: Scalar> Graph<T> {
    /// `a[m,k] @ b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// Batched product `a[B,m,k] @ b[B,k,n]`, or `a @ b^T` with `b[B,n,k]`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (bm, m, k) = match sa[..] {
            [bm, m, k] => (bm, m, k),
            _ => return Err(shape_err("bmm", format!("lhs must be rank 3, got {sa:?}"))),
        };
        let (bn, kb, n) = match (trans_b, &sb[..]) {
            (false, &[bn, kb, n]) => (bn, kb, n),
            (true, &[bn, n, kb]) => (bn, kb, n),
            _ => return Err(shape_err("bmm", format!("rhs must be rank 3, got {sb:?}"))),
        };
        if bm != bn || k != kb {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); bm * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..bm {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &bv[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        self.push(Tensor::new(vec![bm, m, n], out)?, Op::Bmm { a, b, trans_b })
    }

    /// Affine map over the last axis: `x[..., c_in] @ w[c_in, c_out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let c_in = *sx.last().ok_or_else(|| shape_err("linear", "scalar input"))?;
        if sw.len() != 2 || sw[0] != c_in {
            return Err(shape_err("linear", format!("input {sx:?} vs weight {sw:?}")));
        }
        let c_out = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} vs out {c_out}", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).numel() / c_in;
        let mut out = vec![T::zero(); rows * c_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(c_out) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            rows,
            c_in,
            c_out,
            T::one(),
            self.value(x).data(),
            c_in as isize,
            1,
            self.value(w).data(),
            c_out as isize,
            1,
            T::one(),
            &mut out,
            c_out as isize,
            1,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = c_out;
        self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b })
    }
}

pub(super) fn matmul_backward<T: Scalar>(
    nodes: &[Node<T>],
    a: Var,
    b: Var,
    g: &[T],
) -> Contributions<T> {
    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
    let mut c = Vec::new();
    if nodes[a.0].requires_grad {
        // dA = dC @ B^T
        let mut da = vec![T::zero(); m * k];
        T::gemm(m, n, k, T::one(), g, n as isize, 1, bv.data(), 1, n as isize, T::zero(), &mut da, k as isize, 1);
        c.push((a, da));
    }
    if nodes[b.0].requires_grad {
        // dB = A^T @ dC
        let mut db = vec![T::zero(); k * n];
        T::gemm(k, m, n, T::one(), av.data(), 1, k as isize, g, n as isize, 1, T::zero(), &mut db, n as isize, 1);
        c.push((b, db));
    }
    c
}

pub(super) fn bmm_backward<T: Scalar>(
    nodes: &[Node<T>],
    a: Var,
    b: Var,
    trans_b: bool,
    g: &[T],
) -> Contributions<T> {
    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
    let (bm, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
    let n = if trans_b { bv.shape()[1] } else { bv.shape()[2] };
    let mut c = Vec::new();
    if nodes[a.0].requires_grad {
        let mut da = vec![T::zero(); bm * m * k];
        // dA = G @ B^T  (B stored [k,n]) or G @ B (B stored [n,k])
        let (rsb, csb) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
        for i in 0..bm {
            T::gemm(
                m,
                n,
                k,
                T::one(),
                &g[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
                &bv.data()[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut da[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
            );
        }
        c.push((a, da));
    }
    if nodes[b.0].requires_grad {
        let mut db = vec![T::zero(); bm * k * n];
        for i in 0..bm {
            let gi = &g[i * m * n..(i + 1) * m * n];
            let ai = &av.data()[i * m * k..(i + 1) * m * k];
            let dbi = &mut db[i * k * n..(i + 1) * k * n];
            if trans_b {
                // dB[n,k] = G^T @ A
                T::gemm(n, m, k, T::one(), gi, 1, n as isize, ai, k as isize, 1, T::zero(), dbi, k as isize, 1);
            } else {
                // dB[k,n] = A^T @ G
                T::gemm(k, m, n, T::one(), ai, 1, k as isize, gi, n as isize, 1, T::zero(), dbi, n as isize, 1);
            }
        }
        c.push((b, db));
    }
    c
}

pub(super) fn linear_backward<T: Scalar>(
    nodes: &[Node<T>],
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &[T],
) -> Contributions<T> {
    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
    let (c_in, c_out) = (wv.shape()[0], wv.shape()[1]);
    let rows = xv.numel() / c_in;
    let mut c = Vec::new();
    if nodes[x.0].requires_grad {
        let mut dx = vec![T::zero(); rows * c_in];
        T::gemm(rows, c_out, c_in, T::one(), g, c_out as isize, 1, wv.data(), 1, c_out as isize, T::zero(), &mut dx, c_in as isize, 1);
        c.push((x, dx));
    }
    if nodes[w.0].requires_grad {
        let mut dw = vec![T::zero(); c_in * c_out];
        T::gemm(c_in, rows, c_out, T::one(), xv.data(), 1, c_in as isize, g, c_out as isize, 1, T::zero(), &mut dw, c_out as isize, 1);
        c.push((w, dw));
    }
    if let Some(b) = b {
        if nodes[b.0].requires_grad {
            let mut db = vec![T::zero(); c_out];
            for row in g.chunks(c_out) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            c.push((b, db));
        }
    }
    c
}
