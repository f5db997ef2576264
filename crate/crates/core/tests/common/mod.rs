#![allow(dead_code)]

use eivit::analysis::OTSU_BINS;
use eivit::harness::RunConfig;
use eivit::{Precision, Tensor};

/// A seconds-scale run: 16x16 images, two one-block stages, 64-bit.
pub fn small_config(seed: u64, steps: usize) -> RunConfig {
    let text = format!(
        r#"
[model]
image_size = 16
patch_size = 4
dims = [8, 16]
depths = [1, 1]
heads = [2, 2]

[model.acp]
n_lpu = 1

[model.cat]
num_concepts = 4

[train]
seed = {seed}
steps = {steps}
batch_size = 4
lr = 1e-3
eval_every = 2

[data]
n_train = 16
n_test = 6
size = 16
"#
    );
    let mut cfg = RunConfig::from_toml(&text).unwrap();
    cfg.reseed(seed);
    cfg.train.precision = Precision::F64;
    cfg
}

fn rows(t: &Tensor<f64>) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

/// Concatenates the pre-projection maps along channels and applies one 1x1
/// projection whose weight is the horizontal stack of the per-level weights
/// and whose bias is the sum of the per-level biases.
pub fn concat_then_project(maps: &[Tensor<f64>], weights: &[Tensor<f64>], biases: &[Tensor<f64>]) -> Tensor<f64> {
    let s = maps[0].shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let k = maps.len();
    let mut cat = vec![0.0; n * k * c * h * w];
    for b in 0..n {
        for (m, map) in maps.iter().enumerate() {
            for ch in 0..c {
                for px in 0..h * w {
                    cat[((b * k * c) + m * c + ch) * h * w + px] = map.data()[(b * c + ch) * h * w + px];
                }
            }
        }
    }
    let mut stacked = vec![0.0; c * k * c];
    for (m, wt) in weights.iter().enumerate() {
        for o in 0..c {
            for i in 0..c {
                stacked[o * k * c + m * c + i] = wt.data()[o * c + i];
            }
        }
    }
    let bias: Vec<f64> = (0..c).map(|o| biases.iter().map(|b| b.data()[o]).sum()).collect();
    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        for o in 0..c {
            for px in 0..h * w {
                let mut acc = bias[o];
                for i in 0..k * c {
                    acc += stacked[o * k * c + i] * cat[(b * k * c + i) * h * w + px];
                }
                out[(b * c + o) * h * w + px] = acc;
            }
        }
    }
    Tensor::new(s, out).unwrap()
}

/// Biased HSIC by direct summation:
/// `S_KL / n^2 + S_K S_L / n^4 - 2 sum_ijk K_ij L_ik / n^3`.
pub fn hsic_direct(k: &[f64], l: &[f64], n: usize) -> f64 {
    let nf = n as f64;
    let mut a = 0.0;
    let mut sk = 0.0;
    let mut sl = 0.0;
    let mut c = 0.0;
    for i in 0..n {
        for j in 0..n {
            a += k[i * n + j] * l[i * n + j];
            sk += k[i * n + j];
            sl += l[i * n + j];
            for m in 0..n {
                c += k[i * n + j] * l[i * n + m];
            }
        }
    }
    a / (nf * nf) + sk * sl / nf.powi(4) - 2.0 * c / nf.powi(3)
}

pub fn linear_gram(x: &Tensor<f64>) -> Vec<f64> {
    let (n, p) = rows(x);
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = (0..p).map(|c| x.get(&[i, c]) * x.get(&[j, c])).sum();
        }
    }
    k
}

pub fn rbf_gram_median(x: &Tensor<f64>) -> Vec<f64> {
    let (n, p) = rows(x);
    let dist = |i: usize, j: usize| (0..p).map(|c| (x.get(&[i, c]) - x.get(&[j, c])).powi(2)).sum::<f64>().sqrt();
    let mut ds: Vec<f64> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            ds.push(dist(i, j));
        }
    }
    ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = ds.len();
    let sigma = if m % 2 == 1 { ds[m / 2] } else { (ds[m / 2 - 1] + ds[m / 2]) / 2.0 };
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = (-dist(i, j).powi(2) / (2.0 * sigma * sigma)).exp();
        }
    }
    k
}

pub fn cka_direct(k: &[f64], l: &[f64], n: usize) -> f64 {
    hsic_direct(k, l, n) / (hsic_direct(k, k, n) * hsic_direct(l, l, n)).sqrt()
}

/// Exhaustive Otsu over every split of a 256-bin histogram, in floating
/// point with weights and class means. Strict `>` keeps the lowest split.
pub fn otsu_brute(values: &[f64]) -> usize {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut hist = vec![0.0; OTSU_BINS];
    for &v in values {
        let b = ((v - min) / (max - min) * OTSU_BINS as f64).floor() as usize;
        hist[b.min(OTSU_BINS - 1)] += 1.0;
    }
    let n = values.len() as f64;
    let mut best = (0, -1.0);
    for t in 0..OTSU_BINS - 1 {
        let w0: f64 = hist[..=t].iter().sum::<f64>() / n;
        let w1 = 1.0 - w0;
        if w0 == 0.0 || w1 <= 0.0 {
            continue;
        }
        let m0 = hist[..=t].iter().enumerate().map(|(i, c)| i as f64 * c).sum::<f64>() / (w0 * n);
        let m1 = hist[t + 1..].iter().enumerate().map(|(i, c)| (i + t + 1) as f64 * c).sum::<f64>() / (w1 * n);
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best.1 * (1.0 + 1e-12) {
            best = (t, var);
        }
    }
    best.0
}
