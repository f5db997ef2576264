use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

use super::graph::{Contributions, Graph, Node, Op, Var};

impl<T: Scalar> Graph<T> {
    /// Mean softmax cross-entropy of `logits[N,K]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match *self.shape(logits) {
            [n, k] => (n, k),
            ref s => return Err(shape_err("cross_entropy", format!("expected [N,K], got {s:?}"))),
        };
        if labels.len() != n {
            return Err(shape_err("cross_entropy", format!("{} labels for batch {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(arg_err("cross_entropy", format!("label {bad} >= {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = 0.0f64;
        for (row, (&label, p)) in lv.chunks(k).zip(labels.iter().zip(probs.chunks_mut(k))) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - max).exp();
                z += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= z;
            }
            total += (z.ln() + max - row[label]).as_f64();
        }
        let loss = Tensor::scalar(T::from_f64(total / n as f64));
        self.push(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean absolute error over rows whose `row_mask` entry is nonzero.
    /// `target` has the shape of `pred`; rows are the leading axis.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<T>, row_mask: &[bool]) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        if target.shape() != shape.as_slice() {
            return Err(shape_err("l1_loss", format!("pred {shape:?} vs target {:?}", target.shape())));
        }
        let rows = shape.first().copied().unwrap_or(1);
        if row_mask.len() != rows {
            return Err(shape_err("l1_loss", format!("{} mask rows for {rows}", row_mask.len())));
        }
        let width = target.numel() / rows.max(1);
        let mask: Vec<T> = row_mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { T::one() } else { T::zero() }, width))
            .collect();
        let count = row_mask.iter().filter(|&&m| m).count() * width;
        let pv = self.value(pred).data();
        let sum: T = pv
            .iter()
            .zip(target.data())
            .zip(&mask)
            .map(|((&p, &t), &m)| (p - t).abs() * m)
            .sum();
        let loss = if count == 0 {
            T::zero()
        } else {
            sum / T::from_f64(count as f64)
        };
        self.push(
            Tensor::scalar(loss),
            Op::L1 {
                pred,
                target: target.data().to_vec(),
                mask,
                count,
            },
        )
    }
}

pub(super) fn cross_entropy_backward<T: Scalar>(
    logits: Var,
    labels: &[usize],
    probs: &[T],
    g: &[T],
) -> Contributions<T> {
    let n = labels.len();
    let k = probs.len() / n.max(1);
    let scale = g[0] / T::from_f64(n as f64);
    let mut d = probs.to_vec();
    for (row, &label) in d.chunks_mut(k).zip(labels) {
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    vec![(logits, d)]
}

pub(super) fn l1_backward<T: Scalar>(
    nodes: &[Node<T>],
    pred: Var,
    target: &[T],
    mask: &[T],
    count: usize,
    g: &[T],
) -> Contributions<T> {
    if count == 0 {
        return vec![(pred, vec![T::zero(); target.len()])];
    }
    let scale = g[0] / T::from_f64(count as f64);
    let pv = nodes[pred.0].value.data();
    let d = pv
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((&p, &t), &m)| {
            let diff = p - t;
            let sign = if diff > T::zero() {
                T::one()
            } else if diff < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            sign * m * scale
        })
        .collect();
    vec![(pred, d)]
}
