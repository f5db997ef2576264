//! Ablation sweeps: ACP pyramid depth, CAT concept count, and the four-way
//! isolation of the two modules. Each sweep trains one model per row with
//! the base config's seeds and always emits one row per requested value.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::transformer::{count_params, AcpBound, BlockKind, ModelConfig};

use super::config::RunConfig;
use super::metrics::Scores;
use super::train::train_and_evaluate;

pub const ACP_ABLATION_VALUES: [usize; 7] = [1, 2, 3, 4, 5, 6, 7];
pub const CAT_ABLATION_VALUES: [usize; 5] = [32, 64, 128, 256, 512];
/// Concept counts used instead when the full range exceeds the model width.
pub const TOY_CAT_ABLATION_VALUES: [usize; 5] = [8, 16, 32, 64, 128];
pub const ISOLATION_KINDS: [BlockKind; 4] =
    [BlockKind::Baseline, BlockKind::AcpOnly, BlockKind::CatOnly, BlockKind::Enhanced];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// The swept value as printed in the first column.
    pub value: String,
    /// Per-stage pyramid depth actually built, `-` when ACP is absent.
    pub effective_n_lpu: String,
    pub params: Option<usize>,
    pub scores: Option<Scores>,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    /// Name of the swept column (`n_lpu`, `num_concepts` or `config`).
    pub column: &'static str,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn header(&self) -> String {
        format!("{},mAP50,mAP75,AR,accuracy,mean_iou,params,effective_n_lpu,status", self.column)
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        for r in &self.rows {
            let (a50, a75, ar, acc, iou) = match &r.scores {
                Some(m) => (
                    m.ap50.to_string(),
                    m.ap75.to_string(),
                    m.ar.to_string(),
                    m.accuracy.to_string(),
                    m.mean_iou.to_string(),
                ),
                None => Default::default(),
            };
            let params = r.params.map(|p| p.to_string()).unwrap_or_default();
            let status = r.status.replace([',', '\n'], ";");
            // writing to a String cannot fail
            let _ = writeln!(
                s,
                "{},{a50},{a75},{ar},{acc},{iou},{params},{},{status}",
                r.value, r.effective_n_lpu
            );
        }
        s
    }
}

fn effective(cfg: &ModelConfig) -> String {
    if !cfg.block_kind.has_acp() {
        return "-".into();
    }
    cfg.effective_n_lpu()
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("/")
}

fn run_row(value: String, cfg: &RunConfig, ds: &Dataset) -> AblationRow {
    let effective_n_lpu = effective(&cfg.model);
    let params = count_params(&cfg.model).ok();
    match cfg.validate().and_then(|_| train_and_evaluate(cfg, ds)) {
        Ok(out) => AblationRow {
            value,
            effective_n_lpu,
            params: Some(out.params),
            scores: Some(out.scores),
            status: "ok".into(),
        },
        Err(e) => AblationRow {
            value,
            effective_n_lpu,
            params,
            scores: None,
            status: format!("failed: {e}"),
        },
    }
}

/// One enhanced model per pyramid depth. Depths beyond a stage's token grid
/// are clamped per stage and the depth actually built is reported.
pub fn ablation_acp(base: &RunConfig, values: &[usize], ds: &Dataset) -> AblationTable {
    let rows = values
        .iter()
        .map(|&n| {
            let mut cfg = base.clone();
            cfg.model.acp.n_lpu = n;
            cfg.model.acp_bound = AcpBound::Clamp;
            run_row(n.to_string(), &cfg, ds)
        })
        .collect();
    AblationTable {
        column: "n_lpu",
        rows,
    }
}

/// The default concept counts for `model`: the full range, or the reduced
/// one when any full-range count exceeds the narrowest stage.
pub fn cat_ablation_values(model: &ModelConfig) -> Vec<usize> {
    let narrowest = model.dims.iter().copied().min().unwrap_or(0);
    if CAT_ABLATION_VALUES.iter().any(|&l| l > narrowest) {
        TOY_CAT_ABLATION_VALUES.to_vec()
    } else {
        CAT_ABLATION_VALUES.to_vec()
    }
}

pub fn ablation_cat(base: &RunConfig, values: &[usize], ds: &Dataset) -> AblationTable {
    let rows = values
        .iter()
        .map(|&l| {
            let mut cfg = base.clone();
            cfg.model.cat.num_concepts = Some(l);
            run_row(l.to_string(), &cfg, ds)
        })
        .collect();
    AblationTable {
        column: "num_concepts",
        rows,
    }
}

/// Baseline, ACP only, CAT only and both, all at the base config's width.
pub fn ablation_isolation(base: &RunConfig, ds: &Dataset) -> AblationTable {
    let rows = ISOLATION_KINDS
        .iter()
        .map(|&kind| {
            let mut cfg = base.clone();
            cfg.model.block_kind = kind;
            run_row(kind.as_str().into(), &cfg, ds)
        })
        .collect();
    AblationTable {
        column: "config",
        rows,
    }
}

/// A baseline config whose stage widths are scaled by a common factor so its
/// parameter count is as close as possible to `reference`'s. Widths move in
/// steps of 1/8 of the reference widths and must stay divisible by the
/// head counts.
pub fn param_matched_baseline(reference: &ModelConfig) -> Result<ModelConfig> {
    let target = count_params(reference)? as i64;
    let mut best: Option<(i64, ModelConfig)> = None;
    for k in 1..=64usize {
        if reference.dims.iter().any(|&d| (d * k) % 8 != 0) {
            continue;
        }
        let mut cfg = reference.clone();
        cfg.block_kind = BlockKind::Baseline;
        cfg.dims = reference.dims.iter().map(|&d| d * k / 8).collect();
        if cfg.validate().is_err() {
            continue;
        }
        let gap = (count_params(&cfg)? as i64 - target).abs();
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, cfg));
        }
    }
    best.map(|(_, c)| c)
        .ok_or_else(|| Error::Config("no width keeps every stage divisible by its heads".into()))
}
