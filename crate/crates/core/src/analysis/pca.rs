use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

use super::eigen::symmetric_eigen;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// Unit principal directions over channels, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Every covariance eigenvalue, descending.
    pub eigenvalues: Vec<f64>,
    /// Share of total variance carried by each returned component.
    pub explained: Vec<f64>,
    /// `[k, H, W]`, each component min-max scaled to `[0, 1]`.
    pub image: Tensor<f64>,
}

/// Projects a `[C, H, W]` feature map onto its top `k` principal directions,
/// treating the `H * W` positions as samples. Each direction's sign is fixed
/// so that its largest-magnitude entry is positive.
pub fn pca_project(features: &Tensor<f64>, k: usize) -> Result<Pca> {
    let &[c, h, w] = features.shape() else {
        return Err(shape_err("pca_project", format!("expected [C, H, W], got {:?}", features.shape())));
    };
    if k == 0 || k > c {
        return Err(arg_err("pca_project", format!("k = {k} must lie in 1..={c}")));
    }
    let n = h * w;
    let x = features.data();
    let means: Vec<f64> = (0..c).map(|ch| x[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let centered: Vec<f64> = (0..c * n).map(|i| x[i] - means[i / n]).collect();
    let denom = (n.max(2) - 1) as f64;
    let mut cov = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let s: f64 = (0..n).map(|t| centered[i * n + t] * centered[j * n + t]).sum::<f64>() / denom;
            cov[i * c + j] = s;
            cov[j * c + i] = s;
        }
    }
    let (eigenvalues, vectors) = symmetric_eigen(&cov, c)?;
    let total: f64 = eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    let mut image = Vec::with_capacity(k * n);
    for (lam, mut v) in eigenvalues.iter().zip(vectors).take(k) {
        let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        let proj: Vec<f64> = (0..n)
            .map(|t| (0..c).map(|ch| v[ch] * centered[ch * n + t]).sum())
            .collect();
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        image.extend(proj.iter().map(|&p| if range > 0.0 { (p - lo) / range } else { 0.0 }));
        explained.push(if total > 0.0 { lam.max(0.0) / total } else { 0.0 });
        components.push(v);
    }
    Ok(Pca {
        components,
        eigenvalues,
        explained,
        image: Tensor::new(vec![k, h, w], image)?,
    })
}
