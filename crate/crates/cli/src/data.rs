use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{Context, Result};

use rpt::episodes::rfv::{
    pseudo_path, read_manifest, read_pseudo, read_volume, volume_path, write_manifest, write_pseudo,
    write_volume, ClassInfo, Manifest,
};
use rpt::episodes::sampler::draw_seed;
use rpt::episodes::{
    cluster_pseudo_masks, generate_synthetic_volume, make_folds, ClusterParams, FoldSpec, InMemoryPool,
    PatientData, SynthParams,
};

use crate::config::RunConfig;

pub struct DataSpec {
    pub patients: usize,
    pub classes: usize,
    pub seed: u64,
    pub size: usize,
    pub depth: usize,
    pub granularity: usize,
}

pub fn patient_id(i: usize) -> String {
    format!("patient{i:03}")
}

/// Synthetic volumes, their pseudo-masks and a manifest under `root`.
pub fn make_data(root: &Path, spec: &DataSpec) -> Result<Manifest> {
    if spec.patients == 0 {
        return Err(rpt::Error::Parameter("--patients must be positive".into()).into());
    }
    let synth = SynthParams {
        depth: spec.depth,
        height: spec.size,
        width: spec.size,
        n_classes: spec.classes,
        ..Default::default()
    };
    synth.validate()?;
    let clustering = ClusterParams::with_granularity(spec.granularity);
    std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let mut ids = Vec::with_capacity(spec.patients);
    for i in 0..spec.patients {
        let id = patient_id(i);
        let scan = generate_synthetic_volume(draw_seed(spec.seed, i as u64), &synth, &id)?;
        let pseudo = cluster_pseudo_masks(&scan, &clustering)?;
        write_volume(&volume_path(root, &id), &scan)?;
        write_pseudo(&pseudo_path(root, &id), &pseudo)?;
        ids.push(id);
    }
    let manifest = Manifest {
        patients: ids,
        classes: (1..=spec.classes as i32)
            .map(|id| ClassInfo {
                id,
                name: format!("organ{id}"),
            })
            .collect(),
        dims: [spec.depth, spec.size, spec.size],
        seed: spec.seed,
        granularity: spec.granularity,
        modality: "synthetic".into(),
        synth: Some(synth),
    };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

pub struct Dataset {
    pub manifest: Manifest,
    pub pool: InMemoryPool,
}

pub fn load(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root).with_context(|| format!("no dataset at {}", root.display()))?;
    let mut pool = InMemoryPool::new();
    for id in &manifest.patients {
        let scan = read_volume(&volume_path(root, id), id)?;
        let pp = pseudo_path(root, id);
        let pseudo = if pp.exists() { Some(read_pseudo(&pp, id)?) } else { None };
        pool.insert(PatientData { scan, pseudo });
    }
    Ok(Dataset { manifest, pool })
}

impl Dataset {
    pub fn test_classes(&self, cfg: &RunConfig) -> BTreeSet<i32> {
        if cfg.test_classes.is_empty() {
            self.manifest.classes.iter().map(|c| c.id).collect()
        } else {
            cfg.test_classes.iter().copied().collect()
        }
    }

    pub fn folds(&self, cfg: &RunConfig) -> Result<Vec<FoldSpec>> {
        Ok(make_folds(&self.manifest.patients, cfg.setting, &self.test_classes(cfg))?)
    }

    pub fn fold(&self, cfg: &RunConfig, k: usize) -> Result<FoldSpec> {
        let mut folds = self.folds(cfg)?;
        if k >= folds.len() {
            return Err(rpt::Error::Parameter(format!("fold {k} out of range 0..{}", folds.len())).into());
        }
        Ok(folds.swap_remove(k))
    }

    /// Evaluation settings with the manifest's class names.
    pub fn eval_config(&self, cfg: &RunConfig) -> rpt::eval::EvalConfig {
        let mut e = cfg.eval.clone();
        for c in &self.manifest.classes {
            e.class_names.entry(c.id).or_insert_with(|| c.name.clone());
        }
        e
    }
}
