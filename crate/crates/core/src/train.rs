//! Episodic training loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor};
use crate::episodes::{sampler::draw_seed, EpisodeSampler, FoldSpec, Mode, SamplerConfig, VolumePool};
use crate::error::{Error, Result};
use crate::losses::{self, combined_loss_var, LossTerms};
use crate::model::{ModelConfig, RptModel};
use crate::transformer::DeadQuery;
use crate::optim::{Optimizer, OptimizerSpec};

/// Consecutive unusable episodes tolerated before training gives up.
const MAX_SKIPS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplicative decay applied every `lr_step` iterations.
    pub lr_decay: f64,
    pub lr_step: usize,
    pub seed: u64,
    pub iters_per_epoch: usize,
    pub optimizer: OptimizerSpec,
    pub losses: LossTerms,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    /// The full-length schedule: 30k iterations, batch 1, lr 1e-3 decayed by
    /// 0.8 every 1000 iterations, 10 regions and 3 blocks.
    fn default() -> Self {
        TrainConfig {
            iterations: 30_000,
            batch_size: 1,
            lr0: 1e-3,
            lr_decay: 0.8,
            lr_step: 1000,
            seed: 0,
            iters_per_epoch: losses::DEFAULT_ITERS_PER_EPOCH,
            optimizer: OptimizerSpec::default(),
            losses: LossTerms::default(),
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale run: the full schedule cut to 2000 iterations.
    pub fn desk() -> Self {
        TrainConfig {
            iterations: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr_step == 0 || self.iters_per_epoch == 0 {
            return Err(Error::Parameter(
                "batch_size, lr_step and iters_per_epoch must be positive".into(),
            ));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Parameter("learning-rate schedule out of range".into()));
        }
        self.model.validate()
    }
}

/// `lr0 * decay^floor(iter / step)`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((iter / cfg.lr_step) as i32)
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub ce: f64,
    pub dice: f64,
    pub boundary: f64,
    pub eta: f64,
    pub total: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub model: RptModel,
    pub log: Vec<LogRow>,
    /// Episodes dropped because their masks or prototypes were degenerate.
    pub skipped: usize,
}

fn recoverable(e: &Error) -> bool {
    matches!(e, Error::EmptyMask(_) | Error::DegeneratePrototype(_))
}

fn finite(t: &Tensor) -> bool {
    t.iter().all(|x| x.is_finite())
}

/// Train from a fresh initialisation.
pub fn train(
    pool: &dyn VolumePool,
    fold: &FoldSpec,
    cfg: &TrainConfig,
    on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = RptModel::init(cfg.model, cfg.seed)?;
    let sampler = EpisodeSampler::new(pool, fold, cfg.seed, Mode::Train, &cfg.sampler)?;
    train_with(model, &sampler, cfg, on_row)
}

/// Continue training `model` on episodes from `sampler`.
pub fn train_with(
    mut model: RptModel,
    sampler: &EpisodeSampler,
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut draw = 0u64;
    let mut skipped = 0usize;
    for it in 0..cfg.iterations {
        let eta = losses::eta(losses::epoch_of(it, cfg.iters_per_epoch));
        let lr = lr_at(it, cfg);
        let diverged = |stage: &str, params: &crate::params::Params| Error::Diverged {
            iteration: it,
            stage: stage.to_string(),
            last_good: Box::new(params.clone()),
        };
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut row = LogRow {
            iter: it,
            ce: 0.0,
            dice: 0.0,
            boundary: 0.0,
            eta,
            total: 0.0,
            lr,
        };
        let mut done = 0;
        let mut streak = 0;
        while done < cfg.batch_size {
            let ep = sampler.sample(draw)?;
            let region_seed = draw_seed(cfg.seed ^ 0x5_EED0_F2E6_10A5, draw);
            draw += 1;
            let mut g = Graph::new();
            let fwd = match model.forward_on(
                &mut g,
                &ep.support_image,
                &ep.support_mask,
                &ep.query_image,
                region_seed,
                DeadQuery::KeepPrevious,
            ) {
                Ok(f) => f,
                Err(e) if recoverable(&e) && streak < MAX_SKIPS => {
                    skipped += 1;
                    streak += 1;
                    continue;
                }
                Err(e) if e.is_numeric() => return Err(diverged(&e.to_string(), &model.params)),
                Err(e) => return Err(e),
            };
            let (loss, bundle) = match combined_loss_var(&mut g, fwd.full, &ep.query_mask, eta, cfg.losses) {
                Ok(v) => v,
                Err(e) if e.is_numeric() => return Err(diverged("loss", &model.params)),
                Err(e) => return Err(e),
            };
            let step = g.param_grads(&g.backward(loss));
            for (name, gr) in step {
                if !finite(&gr) {
                    return Err(diverged(&format!("gradient of {name}"), &model.params));
                }
                match grads.get_mut(&name) {
                    Some(acc) => *acc += &gr,
                    None => {
                        grads.insert(name, gr);
                    }
                }
            }
            let k = cfg.batch_size as f64;
            row.ce += bundle.ce / k;
            row.dice += bundle.dice / k;
            row.boundary += bundle.boundary / k;
            row.total += bundle.total / k;
            done += 1;
            streak = 0;
        }
        if cfg.batch_size > 1 {
            let k = cfg.batch_size as f64;
            for gr in grads.values_mut() {
                gr.mapv_inplace(|x| x / k);
            }
        }
        let before = model.params.clone();
        opt.step(&mut model.params, &grads, lr);
        if !model.params.all_finite() {
            return Err(diverged("parameter update", &before));
        }
        on_row(&row);
        log.push(row);
    }
    Ok(TrainOutcome {
        model,
        log,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-3);
        assert!((lr_at(1000, &cfg) - 8e-4).abs() < 1e-18);
        assert!((lr_at(2500, &cfg) - 6.4e-4).abs() < 1e-18);
        assert_eq!(lr_at(999, &cfg), lr_at(0, &cfg));
    }

    #[test]
    fn defaults_are_the_full_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.iterations, 30_000);
        assert_eq!(cfg.batch_size, 1);
        assert_eq!(cfg.model.n_regions, 10);
        assert_eq!(cfg.model.rpt.n_blocks, 3);
        assert_eq!(TrainConfig::desk().iterations, 2000);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"iterations": 5, "bogus": 1}"#).is_err());
    }
}
