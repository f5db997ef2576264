//! Feature and attention dumps for the analysis readers.
//!
//! A dump is an archive (see [`super::archive`]) whose metadata is
//! `{"kind": "dump", "model": <block kind>, "blocks": [...], "sample_ids": [...]}`
//! and whose tensors are, for every listed block `b` and sample `i`:
//!
//! - `features.block{b}.sample{i}`: the block output, `[C, H, W]`;
//! - `attention.block{b}.sample{i}`: self-attention probabilities,
//!   `[heads, H * W, H * W]`.
//!
//! Block indices count from 0 across all stages.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Graph;
use crate::data::{PreprocessConfig, Sample};
use crate::error::{arg_err, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::transformer::Model;

use super::archive;
use super::train::Batch;

const DUMP_BATCH: usize = 25;

/// Runs `samples` through the model and writes the requested blocks.
pub fn dump_model<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    pre: &PreprocessConfig,
    samples: &[Sample],
    blocks: &[usize],
    path: &Path,
) -> Result<()> {
    let n_blocks = model.num_blocks();
    if let Some(&b) = blocks.iter().find(|&&b| b >= n_blocks) {
        return Err(arg_err("dump", format!("block {b} out of range, model has {n_blocks}")));
    }
    let mut owned: Vec<(String, Tensor<T>)> = Vec::new();
    for chunk in samples.chunks(DUMP_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::<T>::build(&refs, pre, false, &vec![0; refs.len()]);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(batch.images);
        let out = model.forward(&mut g, &p, x)?;
        for &b in blocks {
            let tr = &out.blocks[b];
            let feats = g.value(tr.out);
            let attn = g.value(tr.attn);
            let fs = feats.shape()[1..].to_vec();
            let heads = attn.shape()[0] / chunk.len();
            let as_ = [heads, attn.shape()[1], attn.shape()[2]];
            let (fn_, an) = (fs.iter().product::<usize>(), as_.iter().product::<usize>());
            for (i, s) in chunk.iter().enumerate() {
                let f = feats.data()[i * fn_..(i + 1) * fn_].to_vec();
                owned.push((format!("features.block{b}.sample{}", s.id), Tensor::new(fs.clone(), f)?));
                let a = attn.data()[i * an..(i + 1) * an].to_vec();
                owned.push((format!("attention.block{b}.sample{}", s.id), Tensor::new(as_.to_vec(), a)?));
            }
        }
    }
    let meta = serde_json::json!({
        "kind": "dump",
        "model": model.cfg.block_kind.as_str(),
        "blocks": blocks,
        "sample_ids": samples.iter().map(|s| s.id).collect::<Vec<_>>(),
    });
    let refs: Vec<(String, &Tensor<T>)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
    archive::save(path, meta, &refs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dump {
    pub model: String,
    pub blocks: Vec<usize>,
    pub sample_ids: Vec<usize>,
    /// Keyed by `(block, sample id)`.
    pub features: BTreeMap<(usize, usize), Tensor<f64>>,
    pub attention: BTreeMap<(usize, usize), Tensor<f64>>,
}

impl Dump {
    /// `(sample id, features)` of one block, in sample order.
    pub fn block_features(&self, block: usize) -> Vec<(usize, &Tensor<f64>)> {
        self.sample_ids
            .iter()
            .filter_map(|&id| self.features.get(&(block, id)).map(|t| (id, t)))
            .collect()
    }
}

pub fn load_dump(path: &Path) -> Result<Dump> {
    let arc = archive::load(path)?;
    if arc.meta["kind"] != "dump" {
        return Err(Error::Format(format!("{} is not a feature dump", path.display())));
    }
    let list = |k: &str| -> Result<Vec<usize>> {
        arc.meta[k]
            .as_array()
            .ok_or_else(|| Error::Format(format!("dump missing {k}")))?
            .iter()
            .map(|v| v.as_u64().map(|x| x as usize).ok_or_else(|| Error::Format(format!("bad entry in {k}"))))
            .collect()
    };
    let blocks = list("blocks")?;
    let sample_ids = list("sample_ids")?;
    let mut features = BTreeMap::new();
    let mut attention = BTreeMap::new();
    for &b in &blocks {
        for &id in &sample_ids {
            for (kind, map) in [("features", &mut features), ("attention", &mut attention)] {
                let name = format!("{kind}.block{b}.sample{id}");
                let t = arc
                    .get(&name)
                    .ok_or_else(|| Error::Format(format!("dump missing tensor {name}")))?;
                map.insert((b, id), t.clone());
            }
        }
    }
    Ok(Dump {
        model: arc.meta["model"].as_str().unwrap_or_default().to_string(),
        blocks,
        sample_ids,
        features,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_concealed_shapes;
    use crate::transformer::ModelConfig;

    #[test]
    fn dump_round_trip_matches_forward() {
        let (model, store) = Model::new::<f64>(&ModelConfig::default()).unwrap();
        let samples = gen_concealed_shapes(3, 32, 32, 0.3, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.eiv");
        let pre = PreprocessConfig::default();
        dump_model(&model, &store, &pre, &samples, &[0, 3], &path).unwrap();
        let d = load_dump(&path).unwrap();
        assert_eq!(d.blocks, vec![0, 3]);
        assert_eq!(d.features[&(3, 2)].shape(), &[32, 4, 4]);
        assert_eq!(d.attention[&(0, 1)].shape(), &[2, 64, 64]);
        let rows = d.attention[&(0, 1)].data().chunks(64);
        for r in rows {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(dump_model(&model, &store, &pre, &samples, &[4], &path).is_err());
    }
}
