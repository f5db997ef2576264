//! `eivit`: dataset generation, training, evaluation, ablations, dumps and
//! analyses from the command line.
//!
//! Exit codes: 0 on success, 2 for configuration or argument errors, 3 for
//! numeric failures (non-finite training state, failed gradient checks,
//! degenerate histograms), 1 for anything else (I/O, malformed files).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use eivit::analysis::CkaVariant;
use eivit::data::{save_dataset, Dataset};
use eivit::harness::{
    ablation_acp, ablation_cat, ablation_isolation, attention_images, cat_ablation_values, cka_report, dump_model,
    load_data, load_dump, param_matched_baseline, pca_images, run_suite, AblationTable, MetricsRecord, RunConfig,
    Trainer, ACP_ABLATION_VALUES,
};
use eivit::transformer::count_params;
use eivit::{Error, Precision, Scalar};

#[derive(Parser)]
#[command(name = "eivit", version, about = "Enhanced-interaction ViT experiments on a CPU autodiff engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; defaults apply to every omitted key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training and init seeds (the data seed for generate-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Arithmetic precision for training.
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Linear,
    Kernel,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the concealed-shapes dataset into --out.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model; writes metrics.csv, checkpoint.eiv and config.toml.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep the ACP pyramid depth.
    AblateAcp {
        #[command(flatten)]
        common: Common,
        /// Comma-separated depths (default 1..7).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    /// Sweep the CAT concept count.
    AblateCat {
        #[command(flatten)]
        common: Common,
        /// Comma-separated concept counts (default depends on model width).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    /// Baseline, ACP only, CAT only and both.
    AblateIsolation {
        #[command(flatten)]
        common: Common,
    },
    /// Dump block features and attention of a checkpoint on test samples.
    Dump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated block indices counted across stages (default: all).
        #[arg(long, value_delimiter = ',')]
        blocks: Option<Vec<usize>>,
        /// Number of test samples to dump.
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// PCA projections of a dump as PPM images.
    AnalyzePca {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dump: PathBuf,
    },
    /// Per-block CKA between two dumps, as CSV.
    AnalyzeCka {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dump_a: PathBuf,
        #[arg(long)]
        dump_b: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        variant: VariantArg,
    },
    /// Raw and Otsu-enhanced attention maps of a dump as PGM images.
    AnalyzeAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dump: PathBuf,
    },
    /// Run every registered gradient check; fails if any exceeds its tolerance.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Only checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Parameter counts of the configured model and its baselines.
    CountParams {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::with_seed(0),
    };
    if let Some(s) = common.seed {
        cfg.reseed(s);
    }
    if let Some(p) = &common.precision {
        cfg.train.precision = Precision::from_bits(p.parse()?)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_table(table: &AblationTable, dir: &Path, name: &str) -> Result<()> {
    let csv = table.to_csv();
    print!("{csv}");
    fs::write(dir.join(name), csv)?;
    let failed = table.rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        eprintln!("{failed} of {} rows failed", table.rows.len());
    }
    Ok(())
}

fn train_with<T: Scalar>(cfg: &RunConfig, resume: Option<&Path>, dir: &Path) -> Result<()> {
    let mut tr = match resume {
        Some(p) => {
            let mut tr = Trainer::<T>::load_checkpoint(p)?;
            tr.cfg.train.steps = cfg.train.steps;
            tr
        }
        None => Trainer::<T>::new(cfg)?,
    };
    let ds = load_data(&tr.cfg.data)?;
    fs::write(dir.join("config.toml"), tr.cfg.to_toml())?;
    let mut csv = format!("{}\n", MetricsRecord::CSV_HEADER);
    let result = tr.run(&ds, |r| {
        let row = r.csv_row();
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
    });
    fs::write(dir.join("metrics.csv"), &csv)?;
    result?;
    tr.save_checkpoint(&dir.join("checkpoint.eiv"))?;
    Ok(())
}

fn evaluate_with<T: Scalar>(path: &Path, common: &Common) -> Result<()> {
    let tr = Trainer::<T>::load_checkpoint(path)?;
    let ds = load_data(&tr.cfg.data)?;
    let rec = MetricsRecord {
        step: tr.step,
        loss: f64::NAN,
        scores: tr.evaluate(&ds.test)?,
    };
    let text = format!("{}\n{}\n", MetricsRecord::CSV_HEADER, rec.csv_row());
    print!("{text}");
    if common.out.is_some() {
        fs::write(out_dir(common)?.join("evaluation.csv"), text)?;
    }
    Ok(())
}

fn dump_with<T: Scalar>(path: &Path, blocks: Option<&[usize]>, samples: usize, out: &Path) -> Result<()> {
    let tr = Trainer::<T>::load_checkpoint(path)?;
    let ds = load_data(&tr.cfg.data)?;
    let all: Vec<usize> = (0..tr.model.num_blocks()).collect();
    let blocks = blocks.unwrap_or(&all);
    let n = samples.min(ds.test.len());
    dump_model(&tr.model, &tr.store, &tr.cfg.train.augment, &ds.test[..n], blocks, out)?;
    Ok(())
}

fn checkpoint_precision(path: &Path) -> Result<Precision> {
    Ok(eivit::harness::archive::load(path)?.precision)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            let Some(dir) = &common.out else {
                bail!(Error::Config("generate-data needs --out".into()));
            };
            let d = &cfg.data;
            let ds = Dataset::generate(d.n_train, d.n_test, d.size, d.difficulty, d.seed)?;
            save_dataset(dir, &ds)?;
            println!("wrote {} train and {} test samples to {}", ds.train.len(), ds.test.len(), dir.display());
        }
        Command::Train { common, resume } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common)?;
            let precision = match &resume {
                Some(p) => checkpoint_precision(p)?,
                None => cfg.train.precision,
            };
            match precision {
                Precision::F32 => train_with::<f32>(&cfg, resume.as_deref(), &dir)?,
                Precision::F64 => train_with::<f64>(&cfg, resume.as_deref(), &dir)?,
            }
        }
        Command::Evaluate { common, checkpoint } => match checkpoint_precision(&checkpoint)? {
            Precision::F32 => evaluate_with::<f32>(&checkpoint, &common)?,
            Precision::F64 => evaluate_with::<f64>(&checkpoint, &common)?,
        },
        Command::AblateAcp { common, values } => {
            let cfg = load_config(&common)?;
            let ds = load_data(&cfg.data)?;
            let values = values.unwrap_or_else(|| ACP_ABLATION_VALUES.to_vec());
            write_table(&ablation_acp(&cfg, &values, &ds), &out_dir(&common)?, "ablation_acp.csv")?;
        }
        Command::AblateCat { common, values } => {
            let cfg = load_config(&common)?;
            let ds = load_data(&cfg.data)?;
            let values = values.unwrap_or_else(|| cat_ablation_values(&cfg.model));
            write_table(&ablation_cat(&cfg, &values, &ds), &out_dir(&common)?, "ablation_cat.csv")?;
        }
        Command::AblateIsolation { common } => {
            let cfg = load_config(&common)?;
            let ds = load_data(&cfg.data)?;
            write_table(&ablation_isolation(&cfg, &ds), &out_dir(&common)?, "ablation_isolation.csv")?;
        }
        Command::Dump {
            common,
            checkpoint,
            blocks,
            samples,
        } => {
            let out = out_dir(&common)?.join("dump.eiv");
            match checkpoint_precision(&checkpoint)? {
                Precision::F32 => dump_with::<f32>(&checkpoint, blocks.as_deref(), samples, &out)?,
                Precision::F64 => dump_with::<f64>(&checkpoint, blocks.as_deref(), samples, &out)?,
            }
            println!("wrote {}", out.display());
        }
        Command::AnalyzePca { common, dump } => {
            let files = pca_images(&load_dump(&dump)?, &out_dir(&common)?)?;
            println!("wrote {} files", files.len());
        }
        Command::AnalyzeCka {
            common,
            dump_a,
            dump_b,
            variant,
        } => {
            let (a, b) = (load_dump(&dump_a)?, load_dump(&dump_b)?);
            let dir = out_dir(&common)?;
            let variants = match variant {
                VariantArg::Linear => vec![CkaVariant::Linear],
                VariantArg::Kernel => vec![CkaVariant::Kernel],
                VariantArg::Both => vec![CkaVariant::Linear, CkaVariant::Kernel],
            };
            for v in variants {
                let csv = cka_report(&a, &b, v)?.to_csv();
                print!("{csv}");
                fs::write(dir.join(format!("cka_{}.csv", v.as_str())), csv)?;
            }
        }
        Command::AnalyzeAttention { common, dump } => {
            let files = attention_images(&load_dump(&dump)?, &out_dir(&common)?)?;
            println!("wrote {} files", files.len());
        }
        Command::Gradcheck { common: _, seeds, filter } => {
            let rows = run_suite(&seeds, filter.as_deref());
            let mut failed = 0;
            println!("check,seed,max_rel_error,tolerance,status");
            for r in &rows {
                let status = match &r.outcome {
                    Err(e) => format!("error: {e}"),
                    Ok(_) if r.passed() => "ok".into(),
                    Ok(_) => "FAIL".into(),
                };
                failed += usize::from(!r.passed());
                println!("{},{},{:.3e},{:.0e},{status}", r.name, r.seed, r.max_rel_error(), r.tolerance);
            }
            if rows.is_empty() {
                bail!(Error::Config("no registered check matches the filter".into()));
            }
            if failed > 0 {
                bail!(Error::Numeric {
                    step: 0,
                    detail: format!("{failed} of {} gradient checks failed", rows.len()),
                });
            }
        }
        Command::CountParams { common } => {
            let cfg = load_config(&common)?;
            let model = &cfg.model;
            let mut same_width = model.clone();
            same_width.block_kind = eivit::transformer::BlockKind::Baseline;
            let matched = param_matched_baseline(model)?;
            println!("model,dims,params");
            let dims = |d: &[usize]| d.iter().map(usize::to_string).collect::<Vec<_>>().join("/");
            println!("{},{},{}", model.block_kind.as_str(), dims(&model.dims), count_params(model)?);
            println!("baseline,{},{}", dims(&same_width.dims), count_params(&same_width)?);
            println!("baseline-matched,{},{}", dims(&matched.dims), count_params(&matched)?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::InvalidArgument { .. } | Error::Shape { .. } => 2,
                Error::Numeric { .. } | Error::NonFinite { .. } | Error::DegenerateHistogram => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::num::ParseIntError>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
