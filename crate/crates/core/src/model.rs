//! The full few-shot segmenter and the fixtures used to bound evaluation.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{dyn2, to2, Graph, Var};
use crate::checkpoint;
use crate::encoder::Encoder;
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::imageops;
use crate::params::Params;
use crate::prototypes::{
    self, estimate_query_mask_var, map_pool, mask_from_logits, query_logits_var,
    query_prototype_var, regional_prototypes_var, voronoi_partition, RegionMaskSet, ThresholdHead,
};
use crate::transformer::{rpt_forward_var, DeadQuery, RptConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width `C`.
    pub width: usize,
    /// Maximum number of Voronoi regions `N_f`.
    pub n_regions: usize,
    pub rpt: RptConfig,
    /// Seed of the region partition at inference time.
    pub region_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            n_regions: prototypes::DEFAULT_REGIONS,
            rpt: RptConfig::default(),
            region_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Single global prototype and no Search & Filter.
    pub fn baseline(self) -> Self {
        ModelConfig {
            n_regions: 1,
            rpt: RptConfig {
                search_filter: false,
                ..self.rpt
            },
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        Encoder::new(self.width)?;
        if self.n_regions == 0 {
            return Err(Error::Parameter("n_regions must be at least 1".into()));
        }
        self.rpt.validate(self.width)
    }
}

/// Graph nodes of one episode's forward pass.
pub struct Forward {
    /// Foreground probability on the feature grid, `[h, w]`.
    pub grid: Var,
    /// Foreground probability upsampled to the image, `[H, W]`.
    pub full: Var,
    pub tau: Var,
    pub regions: RegionMaskSet,
    /// Rectified support prototypes after each block.
    pub blocks: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RptModel {
    pub cfg: ModelConfig,
    pub params: Params,
}

impl RptModel {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Encoder::new(cfg.width)?.init(&mut rng);
        params.extend(ThresholdHead { width: cfg.width }.init(&mut rng));
        params.extend(cfg.rpt.init(cfg.width, &mut rng)?);
        Ok(RptModel { cfg, params })
    }

    pub fn encoder(&self) -> Encoder {
        Encoder { width: self.cfg.width }
    }

    pub fn head(&self) -> ThresholdHead {
        ThresholdHead { width: self.cfg.width }
    }

    /// Record the forward pass on `g` with the given region seed.
    pub fn forward_on(
        &self,
        g: &mut Graph,
        support: &Array2<f64>,
        support_mask: &Array2<bool>,
        query: &Array2<f64>,
        region_seed: u64,
        dead: DeadQuery,
    ) -> Result<Forward> {
        if support.dim() != support_mask.dim() {
            return Err(Error::Input("support image and mask differ in shape".into()));
        }
        let enc = self.encoder();
        let fs = enc.forward(g, &self.params, support)?;
        let fq = enc.forward(g, &self.params, query)?;
        let (h, w) = (g.shape(fs)[1], g.shape(fs)[2]);
        let (qh, qw) = (g.shape(fq)[1], g.shape(fq)[2]);
        let ts = prototypes::tokens(g, fs)?;
        let tq = prototypes::tokens(g, fq)?;

        let grid_mask = imageops::downsample_mask(support_mask, h, w);
        let regions = voronoi_partition(&grid_mask, self.cfg.n_regions, region_seed)
            .map_err(|e| e.in_stage("support mask"))?;
        let ps0 = regional_prototypes_var(g, ts, &regions)?;
        let flat = grid_mask.mapv(|b| b as u8 as f64).into_shape_with_order((1, h * w)).expect("flat");
        let fg = g.constant(dyn2(flat));
        let pg = map_pool(g, ts, fg)?;

        let tau = self.head().forward(g, &self.params, tq)?;
        let m0 = estimate_query_mask_var(g, tq, pg, tau).map_err(|e| e.in_stage("initial query"))?;
        let pq0 = match query_prototype_var(g, tq, m0) {
            Ok(p) => p,
            Err(Error::EmptyMask(_)) if dead == DeadQuery::KeepPrevious => pg,
            Err(e) => return Err(e.in_stage("initial query")),
        };
        let trace = rpt_forward_var(g, &self.params, &self.cfg.rpt, ps0, tq, tau, pq0, dead)?;
        let gap = g.mean_axis(trace.support, 0)?;
        let logits = query_logits_var(g, tq, gap, tau).map_err(|e| e.in_stage("prediction"))?;
        let logits = g.reshape(logits, &[qh, qw])?;
        let grid = mask_from_logits(g, logits);

        // the similarity map is interpolated before the sigmoid so the
        // decision contour is not snapped to the feature grid
        let (big_h, big_w) = query.dim();
        let uh = g.constant(dyn2(imageops::bilinear_matrix(big_h, qh)));
        let uwt = g.constant(dyn2(imageops::bilinear_matrix(big_w, qw).reversed_axes()));
        let rows = g.matmul(uh, logits)?;
        let up = g.matmul(rows, uwt)?;
        let full = mask_from_logits(g, up);
        Ok(Forward {
            grid,
            full,
            tau,
            regions,
            blocks: trace.blocks,
        })
    }

    /// Full-resolution foreground probabilities for a query.
    pub fn predict_images(
        &self,
        support: &Array2<f64>,
        support_mask: &Array2<bool>,
        query: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        if !support_mask.iter().any(|&b| b) {
            return Err(Error::EmptyMask("support mask has no foreground".into()));
        }
        let mut g = Graph::new();
        let f = match self.forward_on(&mut g, support, support_mask, query, self.cfg.region_seed, DeadQuery::Error) {
            Ok(f) => f,
            // the support is non-empty, so this is the query estimate dying
            // out: the prediction is background everywhere
            Err(Error::EmptyMask(_)) => return Ok(Array2::zeros(query.dim())),
            Err(e) => return Err(e),
        };
        let out = to2(g.value(f.full))?;
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("prediction"));
        }
        Ok(out)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            kind: ModelKind::Rpt,
            model: Some(self.cfg),
            extra: serde_json::Value::Null,
        }
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            extra,
            ..self.meta()
        };
        checkpoint::save(path, &serde_json::to_value(meta)?, &self.params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Rpt,
    /// Returns the query ground truth; an evaluation upper bound.
    Oracle,
    /// Predicts background everywhere; an evaluation lower bound.
    ConstantBackground,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Anything that maps an episode to query foreground probabilities at
/// full image resolution.
pub trait Segmenter: Sync {
    fn segment(&self, episode: &Episode) -> Result<Array2<f64>>;
}

impl Segmenter for RptModel {
    fn segment(&self, ep: &Episode) -> Result<Array2<f64>> {
        self.predict_images(&ep.support_image, &ep.support_mask, &ep.query_image)
    }
}

pub struct Oracle;

impl Segmenter for Oracle {
    fn segment(&self, ep: &Episode) -> Result<Array2<f64>> {
        Ok(ep.query_mask.mapv(|b| b as u8 as f64))
    }
}

pub struct ConstantBackground;

impl Segmenter for ConstantBackground {
    fn segment(&self, ep: &Episode) -> Result<Array2<f64>> {
        Ok(Array2::zeros(ep.query_image.dim()))
    }
}

/// Write a parameter-free fixture checkpoint.
pub fn save_fixture(path: &Path, kind: ModelKind) -> Result<()> {
    let meta = CheckpointMeta {
        kind,
        model: None,
        extra: serde_json::Value::Null,
    };
    checkpoint::save(path, &serde_json::to_value(meta)?, &Params::new())
}

/// Load any checkpoint as a segmenter.
pub fn load_segmenter(path: &Path) -> Result<(CheckpointMeta, Box<dyn Segmenter>)> {
    let (meta, params) = checkpoint::load(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(meta).map_err(|e| Error::format(path, format!("bad metadata: {e}")))?;
    let seg: Box<dyn Segmenter> = match meta.kind {
        ModelKind::Oracle => Box::new(Oracle),
        ModelKind::ConstantBackground => Box::new(ConstantBackground),
        ModelKind::Rpt => {
            let cfg = meta
                .model
                .ok_or_else(|| Error::format(path, "model checkpoint without a model config"))?;
            let model = RptModel::init(cfg, 0)?;
            for (name, t) in model.params.iter() {
                match params.get(name) {
                    Some(p) if p.shape() == t.shape() => {}
                    Some(p) => {
                        return Err(Error::format(
                            path,
                            format!("`{name}` has shape {:?}, expected {:?}", p.shape(), t.shape()),
                        ))
                    }
                    None => return Err(Error::format(path, format!("missing tensor `{name}`"))),
                }
            }
            Box::new(RptModel { cfg, params })
        }
    };
    Ok((meta, seg))
}

pub fn load_model(path: &Path) -> Result<RptModel> {
    let (meta, params) = checkpoint::load(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(meta).map_err(|e| Error::format(path, format!("bad metadata: {e}")))?;
    match (meta.kind, meta.model) {
        (ModelKind::Rpt, Some(cfg)) => Ok(RptModel { cfg, params }),
        _ => Err(Error::format(path, "not a trained model checkpoint")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn episode_images(n: usize) -> (Array2<f64>, Array2<bool>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mask = Array2::from_shape_fn((n, n), |(r, c)| {
            let (dr, dc) = (r as f64 - n as f64 / 2.0, c as f64 - n as f64 / 2.0);
            dr * dr + dc * dc < (n as f64 / 4.0).powi(2)
        });
        let img = mask.mapv(|b| if b { 1.0 } else { -0.5 }) + Array2::from_shape_simple_fn((n, n), || rng.random_range(-0.1..0.1));
        (img.clone(), mask, img.mapv(|v| v * 0.9))
    }

    #[test]
    fn prediction_has_image_shape_and_range() {
        let cfg = ModelConfig { width: 8, ..Default::default() };
        let m = RptModel::init(cfg, 1).unwrap();
        let (s, sm, q) = episode_images(40);
        let p = m.predict_images(&s, &sm, &q).unwrap();
        assert_eq!(p.dim(), (40, 40));
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(p, m.predict_images(&s, &sm, &q).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig { width: 8, ..Default::default() };
        let m = RptModel::init(cfg, 3).unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path, serde_json::json!({"iterations": 0})).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
        let (meta, _) = load_segmenter(&path).unwrap();
        assert_eq!(meta.kind, ModelKind::Rpt);
        save_fixture(&path, ModelKind::Oracle).unwrap();
        assert_eq!(load_segmenter(&path).unwrap().0.kind, ModelKind::Oracle);
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn baseline_config() {
        let b = ModelConfig::default().baseline();
        assert_eq!(b.n_regions, 1);
        assert!(!b.rpt.search_filter);
        assert_eq!(b.rpt.n_blocks, 3);
    }
}
