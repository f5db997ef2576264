use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

fn dims(op: &'static str, x: &Tensor<f64>) -> Result<(usize, usize)> {
    match x.shape() {
        &[n, p] if n >= 2 => Ok((n, p)),
        &[n, _] => Err(arg_err(op, format!("need at least 2 rows, got {n}"))),
        s => Err(shape_err(op, format!("expected [n, p], got {s:?}"))),
    }
}

fn center_columns(x: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for j in 0..p {
        let mean = (0..n).map(|i| x[i * p + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * p + j] -= mean;
        }
    }
    out
}

/// Squared Frobenius norm of `a^T b` for row-major `a: [n, p]`, `b: [n, q]`.
fn cross_frob2(a: &[f64], p: usize, b: &[f64], q: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..q {
            let s: f64 = (0..n).map(|t| a[t * p + i] * b[t * q + j]).sum();
            total += s * s;
        }
    }
    total
}

/// Linear CKA between row-aligned representations `x: [n, p]`, `y: [n, q]`.
pub fn linear_cka(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    let (n, p) = dims("linear_cka", x)?;
    let (m, q) = dims("linear_cka", y)?;
    if n != m {
        return Err(shape_err("linear_cka", format!("row counts differ: {n} vs {m}")));
    }
    let xc = center_columns(x.data(), n, p);
    let yc = center_columns(y.data(), n, q);
    let xx = cross_frob2(&xc, p, &xc, p, n).sqrt();
    let yy = cross_frob2(&yc, q, &yc, q, n).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(arg_err("linear_cka", "input has zero variance"));
    }
    Ok(cross_frob2(&yc, q, &xc, p, n) / (xx * yy))
}

/// RBF bandwidth choice for [`kernel_cka`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median of the pairwise Euclidean distances, per input.
    Median,
    Fixed(f64),
}

fn sq_dists(x: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = (0..p).map(|k| (x[i * p + k] - x[j * p + k]).powi(2)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Double-centred RBF Gram matrix.
fn centered_rbf(x: &Tensor<f64>, bw: Bandwidth) -> Result<Vec<f64>> {
    let (n, p) = dims("kernel_cka", x)?;
    let d2 = sq_dists(x.data(), n, p);
    let sigma = match bw {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Median => {
            let pairs = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
            median(pairs.map(|(i, j)| d2[i * n + j].sqrt()).collect())
        }
    };
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(arg_err("kernel_cka", format!("bandwidth {sigma} is not positive; input has zero variance")));
    }
    let mut k: Vec<f64> = d2.iter().map(|&v| (-v / (2.0 * sigma * sigma)).exp()).collect();
    let row: Vec<f64> = (0..n).map(|i| k[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let all = row.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] += all - row[i] - row[j];
        }
    }
    Ok(k)
}

/// Kernel CKA with RBF kernels: `HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))`.
pub fn kernel_cka(x: &Tensor<f64>, y: &Tensor<f64>, bw: Bandwidth) -> Result<f64> {
    if x.shape().first() != y.shape().first() {
        return Err(shape_err("kernel_cka", format!("row counts differ: {:?} vs {:?}", x.shape(), y.shape())));
    }
    let k = centered_rbf(x, bw)?;
    let l = centered_rbf(y, bw)?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let kk = dot(&k, &k);
    let ll = dot(&l, &l);
    if kk == 0.0 || ll == 0.0 {
        return Err(arg_err("kernel_cka", "input has zero variance"));
    }
    Ok(dot(&k, &l) / (kk * ll).sqrt())
}

/// `[C, H, W]` feature map as an `[H * W, C]` token matrix.
pub fn tokens_of(features: &Tensor<f64>) -> Result<Tensor<f64>> {
    let &[c, h, w] = features.shape() else {
        return Err(shape_err("tokens_of", format!("expected [C, H, W], got {:?}", features.shape())));
    };
    let n = h * w;
    let x = features.data();
    Tensor::new(vec![n, c], (0..n * c).map(|i| x[(i % c) * n + i / c]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CkaVariant {
    Linear,
    Kernel,
}

impl CkaVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            CkaVariant::Linear => "linear",
            CkaVariant::Kernel => "kernel",
        }
    }

    pub fn compute(self, x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
        match self {
            CkaVariant::Linear => linear_cka(x, y),
            CkaVariant::Kernel => kernel_cka(x, y, Bandwidth::Median),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            n,
            mean: f64::NAN,
            median: f64::NAN,
            std: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Summary {
        n,
        mean,
        median: median(values.to_vec()),
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkaRow {
    pub block: usize,
    pub summary: Summary,
}

/// Per-block CKA statistics across samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CkaReport {
    pub variant: CkaVariant,
    pub rows: Vec<CkaRow>,
}

impl CkaReport {
    pub const CSV_HEADER: &'static str = "variant,block,n,mean,median,std";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let m = &r.summary;
            // writing to a String cannot fail
            let _ = writeln!(s, "{},{},{},{},{},{}", self.variant.as_str(), r.block, m.n, m.mean, m.median, m.std);
        }
        s
    }
}
