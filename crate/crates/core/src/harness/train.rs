use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::data::{load_dataset, preprocess, sample_seed, Dataset, PreprocessConfig, Sample};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Precision, Scalar, Tensor};
use crate::transformer::Model;

use super::archive;
use super::config::{DataConfig, RunConfig};
use super::metrics::{score, MetricsRecord, Prediction, Scores};
use super::optim::{clip_grad_norm, Adam};

const AUGMENT_STREAM: u64 = 0xa06_3e27;
const EVAL_BATCH: usize = 50;

/// A preprocessed minibatch.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// `[N, 4]`; rows whose box was dropped are zero and masked out.
    pub boxes: Tensor<T>,
    pub box_mask: Vec<bool>,
}

impl<T: Scalar> Batch<T> {
    /// `seeds[i]` drives augmentation of `samples[i]` when `train` is set.
    pub fn build(samples: &[&Sample], cfg: &PreprocessConfig, train: bool, seeds: &[u64]) -> Self {
        let mut images = Vec::new();
        let mut boxes = Vec::with_capacity(samples.len() * 4);
        let mut box_mask = Vec::with_capacity(samples.len());
        let mut extent = 0;
        for (s, &seed) in samples.iter().zip(seeds) {
            let p = preprocess(s, cfg, train, seed);
            extent = p.image.shape()[1];
            images.extend(p.image.data().iter().map(|&v| T::from_f64(v)));
            match p.bbox {
                Some(b) => {
                    boxes.extend(b.iter().map(|&v| T::from_f64(v)));
                    box_mask.push(true);
                }
                None => {
                    boxes.extend([T::zero(); 4]);
                    box_mask.push(false);
                }
            }
        }
        let n = samples.len();
        Batch {
            images: Tensor::new(vec![n, 3, extent, extent], images).expect("uniform crop extent"),
            labels: samples.iter().map(|s| s.label).collect(),
            boxes: Tensor::new(vec![n, 4], boxes).expect("four per sample"),
            box_mask,
        }
    }
}

/// Cross-entropy plus `box_weight` times the masked L1 box error.
pub fn batch_loss<T: Scalar>(
    model: &Model,
    g: &mut Graph<T>,
    p: &Bound,
    batch: &Batch<T>,
    box_weight: f64,
) -> Result<Var> {
    let x = g.constant(batch.images.clone());
    let out = model.forward(g, p, x)?;
    let ce = g.cross_entropy(out.logits, &batch.labels)?;
    match out.boxes {
        Some(b) if box_weight != 0.0 => {
            let l1 = g.l1_loss(b, &batch.boxes, &batch.box_mask)?;
            let l1 = g.scale(l1, box_weight)?;
            g.add(ce, l1)
        }
        _ => Ok(ce),
    }
}

/// Model, parameters and optimiser state, advanced one step at a time.
/// The batch for a step is a pure function of `(train.seed, step)`, so a
/// resumed trainer sees exactly the batches an uninterrupted one would.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore<T>,
    pub adam: Adam<T>,
    pub step: usize,
    loss_sum: f64,
    loss_count: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, store) = Model::new::<T>(&cfg.model)?;
        let t = &cfg.train;
        let adam = Adam::new(&store, t.beta1, t.beta2, t.adam_eps, t.weight_decay);
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            store,
            adam,
            step: 0,
            loss_sum: 0.0,
            loss_count: 0,
        })
    }

    /// Dataset positions `step * B .. (step + 1) * B`, walking a fresh
    /// seeded permutation each epoch.
    pub fn batch_positions(&self, n: usize, step: usize) -> Vec<(usize, usize)> {
        let b = self.cfg.train.batch_size;
        let mut perm_epoch = usize::MAX;
        let mut perm: Vec<usize> = Vec::new();
        (step * b..(step + 1) * b)
            .map(|pos| {
                let epoch = pos / n;
                if epoch != perm_epoch {
                    perm = (0..n).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.cfg.train.seed, epoch));
                    perm.shuffle(&mut rng);
                    perm_epoch = epoch;
                }
                (pos, perm[pos % n])
            })
            .collect()
    }

    pub fn train_batch(&self, samples: &[Sample], step: usize) -> Batch<T> {
        let picks = self.batch_positions(samples.len(), step);
        let chosen: Vec<&Sample> = picks.iter().map(|&(_, i)| &samples[i]).collect();
        let seeds: Vec<u64> = picks
            .iter()
            .map(|&(pos, _)| sample_seed(self.cfg.train.seed ^ AUGMENT_STREAM, pos))
            .collect();
        Batch::build(&chosen, &self.cfg.train.augment, true, &seeds)
    }

    /// Loss and parameter gradients of `batch` at the current weights.
    pub fn loss_and_grads(&self, batch: &Batch<T>) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let loss = batch_loss(&self.model, &mut g, &p, batch, self.cfg.train.box_loss_weight)?;
        g.backward(loss)?;
        let value = g.value(loss).data()[0].as_f64();
        Ok((value, p.0.iter().map(|&v| g.grad_tensor(v)).collect()))
    }

    /// One optimiser update; returns the loss before the update.
    pub fn train_step(&mut self, train: &[Sample]) -> Result<f64> {
        let step = self.step;
        let numeric = |e: Error| match e {
            Error::NonFinite { op } => Error::Numeric {
                step,
                detail: format!("non-finite value from {op}"),
            },
            other => other,
        };
        let batch = self.train_batch(train, step);
        let (loss, mut grads) = self.loss_and_grads(&batch).map_err(numeric)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Numeric {
                step,
                detail: format!("loss {loss} or its gradient is not finite"),
            });
        }
        if let Some(c) = self.cfg.train.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = self.cfg.train.lr_at(step);
        self.adam.step(&mut self.store, &grads, lr);
        self.step += 1;
        self.loss_sum += loss;
        self.loss_count += 1;
        Ok(loss)
    }

    /// Class and box predictions for `samples` (eval preprocessing).
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<Prediction>> {
        predict(&self.model, &self.store, &self.cfg.train.augment, samples)
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<Scores> {
        let preds = self.predict(samples)?;
        let truth: Vec<_> = samples.iter().map(|s| (s.label, s.bbox)).collect();
        Ok(score(&preds, &truth))
    }

    /// Trains to `train.steps`, evaluating on the test split at the
    /// configured cadence and always after the last step.
    pub fn run(&mut self, ds: &Dataset, mut on_record: impl FnMut(&MetricsRecord)) -> Result<Vec<MetricsRecord>> {
        let total = self.cfg.train.steps;
        let every = self.cfg.train.eval_every;
        let mut log = Vec::new();
        while self.step < total {
            self.train_step(&ds.train)?;
            let done = self.step;
            if done == total || (every > 0 && done.is_multiple_of(every)) {
                let rec = MetricsRecord {
                    step: done,
                    loss: self.loss_sum / self.loss_count.max(1) as f64,
                    scores: self.evaluate(&ds.test)?,
                };
                self.loss_sum = 0.0;
                self.loss_count = 0;
                on_record(&rec);
                log.push(rec);
            }
        }
        Ok(log)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "checkpoint",
            "step": self.step,
            "adam_t": self.adam.t,
            "config": serde_json::to_value(&self.cfg).map_err(|e| Error::Format(e.to_string()))?,
        });
        let names = self.store.names();
        let mut tensors: Vec<(String, &Tensor<T>)> = Vec::with_capacity(3 * names.len());
        for (n, t) in names.iter().zip(self.store.tensors()) {
            tensors.push((format!("param.{n}"), t));
        }
        for (n, t) in names.iter().zip(&self.adam.m) {
            tensors.push((format!("adam.m.{n}"), t));
        }
        for (n, t) in names.iter().zip(&self.adam.v) {
            tensors.push((format!("adam.v.{n}"), t));
        }
        archive::save(path, meta, &tensors)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let arc = archive::load(path)?;
        Self::from_archive(&arc)
    }

    pub fn from_archive(arc: &archive::Archive) -> Result<Self> {
        if arc.meta["kind"] != "checkpoint" {
            return Err(Error::Format("archive is not a checkpoint".into()));
        }
        let cfg: RunConfig = serde_json::from_value(arc.meta["config"].clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut tr = Trainer::new(&cfg)?;
        tr.store.load_from(&arc.with_prefix::<T>("param."))?;
        for (prefix, slot) in [("adam.m.", &mut tr.adam.m), ("adam.v.", &mut tr.adam.v)] {
            let mut moments = ParamStore::<T>::new();
            for (n, t) in tr.store.iter() {
                moments.add(n.to_string(), Tensor::zeros(t.shape()));
            }
            moments.load_from(&arc.with_prefix::<T>(prefix))?;
            *slot = moments.tensors().to_vec();
        }
        let field = |k: &str| {
            arc.meta[k]
                .as_u64()
                .ok_or_else(|| Error::Format(format!("checkpoint missing {k}")))
        };
        tr.step = field("step")? as usize;
        tr.adam.t = field("adam_t")?;
        Ok(tr)
    }

    pub fn precision() -> Precision {
        if T::BITS == 64 {
            Precision::F64
        } else {
            Precision::F32
        }
    }
}

/// Loads `data.dir` when set, otherwise generates the configured dataset.
pub fn load_data(data: &DataConfig) -> Result<Dataset> {
    match &data.dir {
        Some(dir) => load_dataset(dir),
        None => Dataset::generate(data.n_train, data.n_test, data.size, data.difficulty, data.seed),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub log: Vec<MetricsRecord>,
    /// Test-split scores after the last step.
    pub scores: Scores,
    pub params: usize,
}

/// Trains a fresh model at the configured precision and evaluates it.
pub fn train_and_evaluate(cfg: &RunConfig, ds: &Dataset) -> Result<RunOutcome> {
    fn go<T: Scalar>(cfg: &RunConfig, ds: &Dataset) -> Result<RunOutcome> {
        let mut tr = Trainer::<T>::new(cfg)?;
        let log = tr.run(ds, |_| {})?;
        let scores = log.last().map_or_else(|| tr.evaluate(&ds.test), |r| Ok(r.scores))?;
        Ok(RunOutcome {
            log,
            scores,
            params: tr.store.count(),
        })
    }
    match cfg.train.precision {
        Precision::F32 => go::<f32>(cfg, ds),
        Precision::F64 => go::<f64>(cfg, ds),
    }
}

/// Batched inference with eval preprocessing.
pub fn predict<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    pre: &PreprocessConfig,
    samples: &[Sample],
) -> Result<Vec<Prediction>> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::<T>::build(&refs, pre, false, &vec![0; refs.len()]);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(batch.images);
        let out = model.forward(&mut g, &p, x)?;
        let logits = g.value(out.logits);
        let k = logits.shape()[1];
        for (i, row) in logits.data().chunks(k).enumerate() {
            let label = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0;
            let bbox = out.boxes.map(|b| {
                let d = &g.value(b).data()[4 * i..4 * i + 4];
                [d[0].as_f64(), d[1].as_f64(), d[2].as_f64(), d[3].as_f64()]
            });
            preds.push(Prediction { label, bbox });
        }
    }
    Ok(preds)
}
