//! Dataset directory layout:
//!
//! - `train.bin`, `test.bin`: magic `EIDS`, then little-endian `u32`
//!   version, count, channels, height, width, then `count * 3 * H * W`
//!   bytes of pixels in sample order.
//! - `manifest.tsv`: a `# key=value ...` metadata line, a header line, then
//!   one tab-separated row per sample: `id split label cx cy w h seed`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{gen_concealed_shapes, Sample};

const MAGIC: &[u8; 4] = b"EIDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub height: usize,
    pub width: usize,
    pub difficulty: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Train samples come from `seed`, test samples from a derived seed; ids
    /// are unique across both splits.
    pub fn generate(n_train: usize, n_test: usize, size: usize, difficulty: f64, seed: u64) -> Result<Self> {
        let train = gen_concealed_shapes(n_train, size, size, difficulty, seed)?;
        let mut test = gen_concealed_shapes(n_test, size, size, difficulty, seed ^ 0x7e57_7e57_7e57_7e57)?;
        for s in &mut test {
            s.id += n_train;
        }
        Ok(Dataset {
            meta: DatasetMeta {
                height: size,
                width: size,
                difficulty,
                seed,
            },
            train,
            test,
        })
    }
}

fn write_split(path: &Path, samples: &[Sample], meta: &DatasetMeta) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + samples.len() * 3 * meta.height * meta.width);
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, samples.len() as u32, 3, meta.height as u32, meta.width as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in samples {
        buf.extend_from_slice(&s.image);
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_split(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut f = fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut head = [0u8; 24];
    f.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != VERSION as usize || word(2) != 3 {
        return Err(Error::Format(format!("{}: unsupported version or channels", path.display())));
    }
    let (n, h, w) = (word(1), word(3), word(4));
    let mut pixels = Vec::new();
    f.read_to_end(&mut pixels)?;
    if pixels.len() != n * 3 * h * w {
        return Err(Error::Format(format!(
            "{}: expected {} pixel bytes, found {}",
            path.display(),
            n * 3 * h * w,
            pixels.len()
        )));
    }
    Ok((n, h, w, pixels))
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_split(&dir.join("train.bin"), &ds.train, &ds.meta)?;
    write_split(&dir.join("test.bin"), &ds.test, &ds.meta)?;
    let mut m = fs::File::create(dir.join("manifest.tsv"))?;
    let meta = &ds.meta;
    writeln!(
        m,
        "# height={} width={} difficulty={} seed={}",
        meta.height, meta.width, meta.difficulty, meta.seed
    )?;
    writeln!(m, "id\tsplit\tlabel\tcx\tcy\tw\th\tseed")?;
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        for s in samples {
            let [cx, cy, bw, bh] = s.bbox;
            writeln!(m, "{}\t{split}\t{}\t{cx}\t{cy}\t{bw}\t{bh}\t{}", s.id, s.label, s.seed)?;
        }
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Format(format!("manifest: bad {what} {field:?}")))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.tsv");
    let file = fs::File::open(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().ok_or_else(|| Error::Format("manifest: empty".into()))??;
    let mut meta = DatasetMeta {
        height: 0,
        width: 0,
        difficulty: 0.0,
        seed: 0,
    };
    for kv in first.trim_start_matches('#').split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest: bad metadata {kv:?}")))?;
        match k {
            "height" => meta.height = parse(v, k)?,
            "width" => meta.width = parse(v, k)?,
            "difficulty" => meta.difficulty = parse(v, k)?,
            "seed" => meta.seed = parse(v, k)?,
            _ => return Err(Error::Format(format!("manifest: unknown key {k}"))),
        }
    }
    lines.next();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(Error::Format(format!("manifest: expected 8 fields in {line:?}")));
        }
        let sample = Sample {
            id: parse(f[0], "id")?,
            label: parse(f[2], "label")?,
            bbox: [parse(f[3], "cx")?, parse(f[4], "cy")?, parse(f[5], "w")?, parse(f[6], "h")?],
            seed: parse(f[7], "seed")?,
            height: meta.height,
            width: meta.width,
            image: Vec::new(),
        };
        match f[1] {
            "train" => train.push(sample),
            "test" => test.push(sample),
            other => return Err(Error::Format(format!("manifest: unknown split {other}"))),
        }
    }
    for (name, samples) in [("train", &mut train), ("test", &mut test)] {
        let (n, h, w, pixels) = read_split(&dir.join(format!("{name}.bin")))?;
        if n != samples.len() || h != meta.height || w != meta.width {
            return Err(Error::Format(format!(
                "{name}.bin holds {n} images of {h}x{w}, manifest lists {} of {}x{}",
                samples.len(),
                meta.height,
                meta.width
            )));
        }
        for (s, px) in samples.iter_mut().zip(pixels.chunks(3 * h * w)) {
            s.image = px.to_vec();
        }
    }
    Ok(Dataset { meta, train, test })
}
