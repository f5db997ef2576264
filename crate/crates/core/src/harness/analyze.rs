//! Drivers that turn feature dumps into images and reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{
    attention_map_enhance, pca_project, scale_to_u8, summarize, tokens_of, write_pgm, write_ppm, CkaReport, CkaRow,
    CkaVariant,
};
use crate::error::{arg_err, Result};
use crate::tensor::Tensor;

use super::dump::Dump;

/// Images are upscaled by an integer factor to at least this extent.
const MIN_IMAGE_EXTENT: usize = 64;

fn upscale(values: &[u8], h: usize, w: usize, channels: usize) -> (Vec<u8>, usize, usize) {
    let f = MIN_IMAGE_EXTENT.div_ceil(h.max(w)).max(1);
    let (oh, ow) = (h * f, w * f);
    let mut out = Vec::with_capacity(oh * ow * channels);
    for y in 0..oh {
        for x in 0..ow {
            let i = (y / f) * w + x / f;
            out.extend_from_slice(&values[i * channels..(i + 1) * channels]);
        }
    }
    (out, oh, ow)
}

/// Writes one RGB image per (block, sample) whose channels are the top
/// three principal components, plus `pca_explained.csv`.
pub fn pca_images(dump: &Dump, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut csv = String::from("block,sample,pc1,pc2,pc3\n");
    for (&(block, id), feats) in &dump.features {
        let &[c, h, w] = feats.shape() else {
            return Err(arg_err("pca_images", "features must be [C, H, W]"));
        };
        let k = c.min(3);
        let pca = pca_project(feats, k)?;
        let n = h * w;
        let mut rgb = vec![0u8; 3 * n];
        for comp in 0..k {
            let px = pca.image.data()[comp * n..(comp + 1) * n].iter().map(|v| (v * 255.0).round() as u8);
            for (i, v) in px.enumerate() {
                rgb[3 * i + comp] = v;
            }
        }
        let (img, oh, ow) = upscale(&rgb, h, w, 3);
        let path = out_dir.join(format!("pca_block{block}_sample{id}.ppm"));
        write_ppm(&path, ow, oh, &img)?;
        written.push(path);
        let mut ev = pca.explained.clone();
        ev.resize(3, 0.0);
        let _ = writeln!(csv, "{block},{id},{},{},{}", ev[0], ev[1], ev[2]);
    }
    let path = out_dir.join("pca_explained.csv");
    fs::write(&path, csv)?;
    written.push(path);
    Ok(written)
}

/// Per-block CKA between the token matrices of two dumps over their shared
/// samples. Blocks present in only one dump are skipped.
pub fn cka_report(a: &Dump, b: &Dump, variant: CkaVariant) -> Result<CkaReport> {
    let mut rows = Vec::new();
    for &block in a.blocks.iter().filter(|blk| b.blocks.contains(blk)) {
        let mut values = Vec::new();
        for (id, fa) in a.block_features(block) {
            if let Some(fb) = b.features.get(&(block, id)) {
                values.push(variant.compute(&tokens_of(fa)?, &tokens_of(fb)?)?);
            }
        }
        rows.push(CkaRow {
            block,
            summary: summarize(&values),
        });
    }
    Ok(CkaReport { variant, rows })
}

/// Head-averaged attention of every (block, sample) as greyscale images,
/// raw and after Otsu enhancement.
pub fn attention_images(dump: &Dump, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (&(block, id), attn) in &dump.attention {
        let &[heads, t, t2] = attn.shape() else {
            return Err(arg_err("attention_images", "attention must be [heads, T, T]"));
        };
        let mut mean = vec![0.0; t * t2];
        for hd in attn.data().chunks(t * t2) {
            for (m, v) in mean.iter_mut().zip(hd) {
                *m += v / heads as f64;
            }
        }
        let mean = Tensor::new(vec![t, t2], mean)?;
        let enhanced = attention_map_enhance(&mean)?;
        for (tag, map) in [("raw", &mean), ("otsu", &enhanced)] {
            let (img, oh, ow) = upscale(&scale_to_u8(map.data()), t, t2, 1);
            let path = out_dir.join(format!("attention_block{block}_sample{id}_{tag}.pgm"));
            write_pgm(&path, ow, oh, &img)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_concealed_shapes, PreprocessConfig};
    use crate::harness::dump::{dump_model, load_dump};
    use crate::transformer::{BlockKind, Model, ModelConfig};

    fn dump_of(kind: BlockKind, dir: &Path) -> Dump {
        let cfg = ModelConfig {
            block_kind: kind,
            ..ModelConfig::default()
        };
        let (model, store) = Model::new::<f32>(&cfg).unwrap();
        let samples = gen_concealed_shapes(3, 32, 32, 0.3, 5).unwrap();
        let path = dir.join(format!("{}.eiv", kind.as_str()));
        dump_model(&model, &store, &PreprocessConfig::default(), &samples, &[0, 2], &path).unwrap();
        load_dump(&path).unwrap()
    }

    #[test]
    fn reports_and_images_cover_every_entry() {
        let dir = tempfile::tempdir().unwrap();
        let a = dump_of(BlockKind::Baseline, dir.path());
        let b = dump_of(BlockKind::Enhanced, dir.path());
        let before = a.clone();
        let rep = cka_report(&a, &b, CkaVariant::Linear).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert!(rep.rows.iter().all(|r| r.summary.n == 3 && (0.0..=1.0 + 1e-9).contains(&r.summary.mean)));
        let self_rep = cka_report(&a, &a, CkaVariant::Kernel).unwrap();
        assert!(self_rep.rows.iter().all(|r| (r.summary.mean - 1.0).abs() < 1e-9));
        let pca = pca_images(&a, &dir.path().join("pca")).unwrap();
        assert_eq!(pca.len(), 7);
        let att = attention_images(&a, &dir.path().join("att")).unwrap();
        assert_eq!(att.len(), 12);
        assert_eq!(a, before);
    }
}
