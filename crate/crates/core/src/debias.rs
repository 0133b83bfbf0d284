//! Paired comparison of the full model against the single-prototype,
//! no-filter baseline when the support carries intra-class outliers.
//!
//! Both models train on the same clean synthetic pool with the same seed.
//! Evaluation episodes take the support from a patient whose organs all carry
//! lesion blobs, on a slice that shows the lesion, and the query from a clean
//! patient.

use std::collections::BTreeSet;

use ndarray::Array3;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::{
    cluster_pseudo_masks, generate_synthetic_volume, sampler::draw_seed, Episode, FoldSpec,
    InMemoryPool, PatientData, SamplerConfig, Setting, SliceStack, SynthParams,
};
use crate::error::{Error, Result};
use crate::eval::DiceCounts;
use crate::exec::{self, Exec};
use crate::model::Segmenter;
use crate::train::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebiasConfig {
    pub train_patients: usize,
    /// Patients on each side of the evaluation split.
    pub eval_patients: usize,
    pub episodes: usize,
    /// Anatomy and lesion shape; lesions are switched on for support
    /// patients only.
    pub synth: SynthParams,
    /// Lesion voxels per support slice below which the slice is not used.
    pub min_lesion_pixels: usize,
    /// Off gives the clean-support control.
    pub support_lesions: bool,
    /// Applied to both arms; the model section is replaced per arm.
    pub train: TrainConfig,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        DebiasConfig {
            train_patients: 8,
            eval_patients: 4,
            episodes: 20,
            // large, bright lesions: a quarter of the organ section at 1.5 above
            // the organ mean, enough to pull a single global prototype off
            synth: SynthParams {
                lesion_size: 0.5,
                lesion_contrast: 1.5,
                ..SynthParams::default()
            },
            min_lesion_pixels: 20,
            support_lesions: true,
            train: TrainConfig::desk(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DebiasRow {
    pub seed: u64,
    /// Mean per-episode Dice (%).
    pub full: f64,
    pub baseline: f64,
}

impl DebiasRow {
    pub fn full_wins(&self) -> bool {
        self.full > self.baseline
    }
}

fn patient(seed: u64, synth: &SynthParams, id: &str, lesions: bool) -> Result<crate::episodes::VolumeScan> {
    let params = SynthParams {
        lesion_prob: if lesions { 1.0 } else { 0.0 },
        ..synth.clone()
    };
    generate_synthetic_volume(seed, &params, id)
}

/// Per-slice count of lesion voxels of `class`: labelled voxels brighter than
/// the class median by half the lesion contrast.
fn lesion_counts(scan: &crate::episodes::VolumeScan, class: i32, contrast: f64) -> Vec<usize> {
    let mut inside: Vec<f32> = scan
        .voxels
        .iter()
        .zip(scan.labels.iter())
        .filter(|(_, &l)| l == class)
        .map(|(&v, _)| v)
        .collect();
    if inside.is_empty() {
        return vec![0; scan.dims().0];
    }
    inside.sort_by(f32::total_cmp);
    let cut = inside[inside.len() / 2] as f64 + contrast / 2.0;
    count_per_slice(&scan.voxels, &scan.labels, |v, l| l == class && v as f64 > cut)
}

fn count_per_slice(voxels: &Array3<f32>, labels: &Array3<i32>, f: impl Fn(f32, i32) -> bool) -> Vec<usize> {
    voxels
        .outer_iter()
        .zip(labels.outer_iter())
        .map(|(v, l)| v.iter().zip(l.iter()).filter(|(&v, &l)| f(v, l)).count())
        .collect()
}

/// The contaminated-support, clean-query episodes for one seed.
pub fn lesion_episodes(seed: u64, cfg: &DebiasConfig) -> Result<Vec<Episode>> {
    let sampler = SamplerConfig::default();
    let size = cfg.train.sampler.image_size;
    let mut supports = Vec::new();
    let mut queries = Vec::new();
    for i in 0..cfg.eval_patients {
        let s = patient(
            draw_seed(seed, 1000 + i as u64),
            &cfg.synth,
            &format!("lesion{i}"),
            cfg.support_lesions,
        )?;
        let lesions: Vec<Vec<usize>> = (1..=cfg.synth.n_classes as i32)
            .map(|c| lesion_counts(&s, c, cfg.synth.lesion_contrast))
            .collect();
        let data = PatientData { scan: s, pseudo: None };
        supports.push((SliceStack::new(&data, size), lesions));
        let q = patient(draw_seed(seed, 2000 + i as u64), &cfg.synth, &format!("clean{i}"), false)?;
        queries.push(SliceStack::new(&PatientData { scan: q, pseudo: None }, size));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(seed, 3000));
    let classes: Vec<i32> = (1..=cfg.synth.n_classes as i32).collect();
    let mut out = Vec::with_capacity(cfg.episodes);
    let mut attempts = 0;
    while out.len() < cfg.episodes {
        attempts += 1;
        if attempts > 100 * cfg.episodes.max(1) {
            return Err(Error::Exhausted {
                class: "lesion-bearing support slice".into(),
            });
        }
        let class = *classes.choose(&mut rng).expect("at least one class");
        let (st, lesions) = supports.choose(&mut rng).expect("eval patients");
        let ci = (class - 1) as usize;
        let zs: Vec<usize> = (0..st.depth())
            .filter(|&z| {
                (!cfg.support_lesions || lesions[ci][z] >= cfg.min_lesion_pixels)
                    && st.class_mask(z, class).iter().filter(|&&b| b).count() >= sampler.min_foreground
            })
            .collect();
        let qt = queries.choose(&mut rng).expect("eval patients");
        let qz: Vec<usize> = (0..qt.depth())
            .filter(|&z| qt.class_mask(z, class).iter().filter(|&&b| b).count() >= sampler.min_foreground)
            .collect();
        let (Some(&sz), Some(&qz)) = (zs.choose(&mut rng), qz.choose(&mut rng)) else {
            continue;
        };
        out.push(Episode {
            support_image: st.images[sz].clone(),
            support_mask: st.class_mask(sz, class),
            query_image: qt.images[qz].clone(),
            query_mask: qt.class_mask(qz, class),
            class_id: class,
            support_patient: st.patient.clone(),
            query_patient: qt.patient.clone(),
            support_slice: sz,
            query_slice: qz,
        });
    }
    Ok(out)
}

/// Mean per-episode Dice (%) at the 0.5 threshold.
pub fn mean_episode_dice(seg: &dyn Segmenter, episodes: &[Episode], exec: Exec) -> Result<f64> {
    let scores = exec::map(exec, episodes, |ep| -> Result<f64> {
        let p = seg.segment(ep)?;
        let mut c = DiceCounts::default();
        let pred: Vec<bool> = p.iter().map(|&v| v > 0.5).collect();
        c.add(pred.iter(), ep.query_mask.iter());
        Ok(c.score())
    });
    let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    if scores.is_empty() {
        return Err(Error::Parameter("no episodes".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Train both arms on one seed's clean pool and score them on the same
/// contaminated episodes.
pub fn debias_trial(seed: u64, cfg: &DebiasConfig, exec: Exec) -> Result<DebiasRow> {
    if cfg.train_patients == 0 || cfg.eval_patients == 0 || cfg.episodes == 0 {
        return Err(Error::Parameter("debias pools and episode count must be positive".into()));
    }
    let mut pool = InMemoryPool::new();
    let mut ids = Vec::new();
    for i in 0..cfg.train_patients {
        let id = format!("train{i}");
        let scan = patient(draw_seed(seed, i as u64), &cfg.synth, &id, false)?;
        let pseudo = cluster_pseudo_masks(&scan, &cfg.train.sampler.clustering)?;
        pool.insert(PatientData { scan, pseudo: Some(pseudo) });
        ids.push(id);
    }
    let fold = FoldSpec {
        fold_index: 0,
        train_patients: ids,
        test_patients: Vec::new(),
        setting: Setting::One,
        test_classes: BTreeSet::new(),
    };
    let episodes = lesion_episodes(seed, cfg)?;

    let arm = |model: crate::model::ModelConfig| -> Result<f64> {
        let tc = TrainConfig {
            seed,
            model,
            ..cfg.train.clone()
        };
        let out = train(&pool, &fold, &tc, |_| {})?;
        mean_episode_dice(&out.model, &episodes, exec)
    };
    let full = arm(cfg.train.model)?;
    let baseline = arm(cfg.train.model.baseline())?;
    Ok(DebiasRow { seed, full, baseline })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episodes_have_lesion_supports_and_clean_queries() {
        let cfg = DebiasConfig {
            eval_patients: 2,
            episodes: 6,
            ..Default::default()
        };
        let eps = lesion_episodes(3, &cfg).unwrap();
        assert_eq!(eps.len(), 6);
        for ep in &eps {
            assert!(ep.support_patient.starts_with("lesion"));
            assert!(ep.query_patient.starts_with("clean"));
            assert!(ep.support_mask.iter().any(|&b| b));
            assert!(ep.query_mask.iter().any(|&b| b));
        }
        assert_eq!(eps, lesion_episodes(3, &cfg).unwrap());
    }
}
