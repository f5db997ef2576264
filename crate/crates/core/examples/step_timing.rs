//! Times training steps of the default model configuration.

use std::time::Instant;

use eivit::data::Dataset;
use eivit::harness::{RunConfig, Trainer};
use eivit::transformer::BlockKind;

fn main() -> eivit::Result<()> {
    let ds = Dataset::generate(64, 16, 32, 0.3, 7)?;
    for kind in [BlockKind::Baseline, BlockKind::Enhanced] {
        let mut cfg = RunConfig::with_seed(0);
        cfg.model.block_kind = kind;
        let mut tr = Trainer::<f32>::new(&cfg)?;
        tr.train_step(&ds.train)?;
        let t0 = Instant::now();
        let n = 5;
        for _ in 0..n {
            tr.train_step(&ds.train)?;
        }
        println!(
            "{}: {:.1} ms/step (batch {}), {} params",
            kind.as_str(),
            t0.elapsed().as_secs_f64() * 1e3 / n as f64,
            cfg.train.batch_size,
            tr.store.count()
        );
    }
    Ok(())
}
