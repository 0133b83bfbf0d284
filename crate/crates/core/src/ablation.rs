//! Block-depth and loss-term sweeps. Every row trains from the same seed on
//! the same episode stream and is evaluated with the same protocol.

use serde::{Deserialize, Serialize};

use crate::episodes::{FoldSpec, VolumePool};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::exec::Exec;
use crate::losses::LossTerms;
use crate::train::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub n_blocks: usize,
    pub losses: String,
    pub mean_dice: f64,
    pub final_loss: f64,
}

fn run(
    pool: &dyn VolumePool,
    fold: &FoldSpec,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    exec: Exec,
    label: String,
) -> Result<AblationRow> {
    let out = train(pool, fold, cfg, |_| {})?;
    let report = evaluate(&out.model, pool, fold, eval, exec)?;
    Ok(AblationRow {
        label,
        n_blocks: cfg.model.rpt.n_blocks,
        losses: cfg.losses.label().to_string(),
        mean_dice: report.mean,
        final_loss: out.log.last().map_or(f64::NAN, |r| r.total),
    })
}

/// One train-and-evaluate cycle per transformer depth.
pub fn ablate_blocks(
    pool: &dyn VolumePool,
    fold: &FoldSpec,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    l_values: &[usize],
    exec: Exec,
) -> Result<Vec<AblationRow>> {
    if l_values.is_empty() {
        return Err(Error::Parameter("empty block sweep".into()));
    }
    l_values
        .iter()
        .map(|&l| {
            let mut c = cfg.clone();
            c.model.rpt.n_blocks = l;
            run(pool, fold, &c, eval, exec, format!("L={l}"))
        })
        .collect()
}

/// The cross-entropy-only, cross-entropy plus boundary, and all-terms rows.
pub fn ablate_losses(
    pool: &dyn VolumePool,
    fold: &FoldSpec,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    exec: Exec,
) -> Result<Vec<AblationRow>> {
    [LossTerms::CE_ONLY, LossTerms::CE_BOUNDARY, LossTerms::ALL]
        .into_iter()
        .map(|terms| {
            let mut c = cfg.clone();
            c.losses = terms;
            run(pool, fold, &c, eval, exec, terms.label().to_string())
        })
        .collect()
}
