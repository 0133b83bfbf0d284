//! The region-enhanced prototypical transformer.
//!
//! Each block first runs Search & Filter (affinity of every regional support
//! prototype with the query prototype, a selective map dropping low-affinity
//! regions, softmax aggregation), then post-norm self-attention and a
//! post-norm MLP over the region tokens. Between blocks the query prototype
//! is re-estimated from the mean of the rectified support prototypes.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{dyn2, to2, Graph, Var};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::params::{self, Params};
use crate::prototypes::{
    estimate_query_mask_var, feature_tokens, query_prototype_var, MaskKind, RegionalPrototypeSet,
    SoftMask, ThresholdHead,
};

/// Finite stand-in for minus infinity in the additive selective map.
pub const MASKED: f64 = -1e9;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RptConfig {
    pub n_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Run Search & Filter at the start of each block. Off means the block
    /// sees the support prototypes unchanged.
    pub search_filter: bool,
    /// Replace filtered rows by an affinity-weighted mix of the support
    /// prototypes instead of scaling the query prototype.
    pub alt_attention: bool,
}

impl Default for RptConfig {
    fn default() -> Self {
        RptConfig {
            n_blocks: 3,
            heads: 4,
            mlp_ratio: 4,
            search_filter: true,
            alt_attention: false,
        }
    }
}

impl RptConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Parameter("at least one transformer block is required".into()));
        }
        if self.heads == 0 || !width.is_multiple_of(self.heads) {
            return Err(Error::Parameter(format!(
                "width {width} is not divisible into {} heads",
                self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Parameter("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn init(&self, width: usize, rng: &mut impl Rng) -> Result<Params> {
        self.validate(width)?;
        let c = width;
        let hidden = self.mlp_ratio * c;
        let mut p = Params::new();
        for l in 0..self.n_blocks {
            let pre = block_prefix(l);
            for m in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("{pre}.attn.{m}"), params::normal(rng, &[c, c], (1.0 / c as f64).sqrt()));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                p.insert(format!("{pre}.attn.{b}"), params::zeros(&[1, c]));
            }
            p.insert(format!("{pre}.mlp.w1"), params::normal(rng, &[c, hidden], (2.0 / c as f64).sqrt()));
            p.insert(format!("{pre}.mlp.b1"), params::zeros(&[1, hidden]));
            p.insert(format!("{pre}.mlp.w2"), params::normal(rng, &[hidden, c], (1.0 / hidden as f64).sqrt()));
            p.insert(format!("{pre}.mlp.b2"), params::zeros(&[1, c]));
            for ln in ["ln1", "ln2"] {
                p.insert(format!("{pre}.{ln}.gamma"), params::ones(&[1, c]));
                p.insert(format!("{pre}.{ln}.beta"), params::zeros(&[1, c]));
            }
        }
        Ok(p)
    }
}

pub fn block_prefix(l: usize) -> String {
    format!("rpt.block{l}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMap {
    pub values: Array1<f64>,
}

/// Region keep/drop pattern: 0 where kept, minus infinity where filtered.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveMap {
    pub values: Array1<f64>,
    pub xi: f64,
}

impl SelectiveMap {
    pub fn kept(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v == 0.0).collect()
    }

    /// The map with minus infinity replaced by [`MASKED`], as a column.
    pub fn additive(&self) -> Array2<f64> {
        self.values
            .mapv(|v| if v == 0.0 { 0.0 } else { MASKED })
            .insert_axis(Axis(1))
    }
}

/// `A = P_s P_q^T`, raw dot products.
pub fn affinity(ps: &Array2<f64>, pq: &Array1<f64>) -> Result<AffinityMap> {
    if ps.ncols() != pq.len() {
        return Err(Error::Input("prototype widths differ".into()));
    }
    Ok(AffinityMap { values: ps.dot(pq) })
}

/// Keep region `i` iff `A_i >= xi` with `xi = (min(A) + mean(A)) / 2`.
pub fn selective_map(a: &AffinityMap) -> Result<SelectiveMap> {
    let v = &a.values;
    if v.is_empty() {
        return Err(Error::Input("empty affinity map".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("affinity"));
    }
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = v.mean().expect("non-empty");
    let xi = (min + mean) / 2.0;
    // the maximum is never below xi, but rounding in the mean can push a
    // constant map just above it
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let xi = xi.min(max);
    Ok(SelectiveMap {
        values: v.mapv(|x| if x >= xi { 0.0 } else { f64::NEG_INFINITY }),
        xi,
    })
}

fn check(g: &Graph, v: Var, stage: &str) -> Result<Var> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::numeric(stage))
    }
}

/// Softmax over regions of `P_s P_q^T + S` as a column `[N_f, 1]`.
fn region_weights(g: &mut Graph, ps: Var, pq: Var) -> Result<(Var, SelectiveMap)> {
    let pqt = g.transpose(pq)?;
    let a = g.matmul(ps, pqt)?;
    let a = check(g, a, "affinity")?;
    let amap = AffinityMap {
        values: to2(g.value(a))?.column(0).to_owned(),
    };
    let s = selective_map(&amap)?;
    let mask = g.constant(dyn2(s.additive()));
    let logits = g.add(a, mask)?;
    let row = g.transpose(logits)?;
    let w = g.softmax_rows(row)?;
    Ok((g.transpose(w)?, s))
}

/// Search & Filter aggregation: row `i` is `w_i * P_q`.
pub fn sf_aggregate_var(g: &mut Graph, ps: Var, pq: Var) -> Result<(Var, SelectiveMap)> {
    let (w, s) = region_weights(g, ps, pq)?;
    Ok((g.matmul(w, pq)?, s))
}

/// Alternative reading: kept rows pass through, filtered rows become the
/// affinity-weighted mix of the support prototypes.
fn sf_alternative_var(g: &mut Graph, ps: Var, pq: Var) -> Result<Var> {
    let (w, s) = region_weights(g, ps, pq)?;
    let wt = g.transpose(w)?;
    let mix = g.matmul(wt, ps)?;
    let keep = s.kept().iter().map(|&k| k as u8 as f64).collect::<Array1<f64>>();
    let keep = g.constant(dyn2(keep.clone().insert_axis(Axis(1))));
    let drop = g.rsub(1.0, keep);
    let a = g.mul(ps, keep)?;
    let b = g.mul(drop, mix)?;
    g.add(a, b)
}

pub fn sf_aggregate(ps: &Array2<f64>, pq: &Array1<f64>, s: &SelectiveMap) -> Result<Array2<f64>> {
    if s.values.len() != ps.nrows() || ps.ncols() != pq.len() {
        return Err(Error::Input("aggregation shapes do not conform".into()));
    }
    let logits = ps.dot(pq) + s.additive().column(0);
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.mapv(|x| (x - m).exp());
    let w = &e / e.sum();
    Ok(w.insert_axis(Axis(1)).dot(&pq.clone().insert_axis(Axis(0))))
}

fn layer_norm(g: &mut Graph, params: &Params, x: Var, prefix: &str) -> Result<Var> {
    let mean = g.mean_axis(x, 1)?;
    let xc = g.sub(x, mean)?;
    let sq = g.mul(xc, xc)?;
    let var = g.mean_axis(sq, 1)?;
    let var = g.shift(var, LN_EPS);
    let sd = g.sqrt(var);
    let y = g.div(xc, sd)?;
    let gamma = g.param(params, &format!("{prefix}.gamma"))?;
    let beta = g.param(params, &format!("{prefix}.beta"))?;
    let y = g.mul(y, gamma)?;
    g.add(y, beta)
}

fn affine(g: &mut Graph, params: &Params, x: Var, w: &str, b: &str) -> Result<Var> {
    let w = g.param(params, w)?;
    let b = g.param(params, b)?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Multi-head self-attention over the rows of `x` `[N, C]`.
fn attention(g: &mut Graph, params: &Params, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    let d = c / heads;
    let q = affine(g, params, x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = affine(g, params, x, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let v = affine(g, params, x, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
    let wo = g.param(params, &format!("{prefix}.wo"))?;
    let mut out: Option<Var> = None;
    for h in 0..heads {
        let (lo, hi) = (h * d, (h + 1) * d);
        let qh = g.slice(q, 1, lo, hi)?;
        let kh = g.slice(k, 1, lo, hi)?;
        let vh = g.slice(v, 1, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax_rows(scores)?;
        let ctx = g.matmul(attn, vh)?;
        // concatenating heads then projecting equals summing per-head projections
        let wo_h = g.slice(wo, 0, lo, hi)?;
        let proj = g.matmul(ctx, wo_h)?;
        out = Some(match out {
            Some(acc) => g.add(acc, proj)?,
            None => proj,
        });
    }
    let bo = g.param(params, &format!("{prefix}.bo"))?;
    g.add(out.expect("at least one head"), bo)
}

/// One block: Search & Filter, then attention and MLP with post-norm residuals.
pub fn bat_block_var(
    g: &mut Graph,
    params: &Params,
    cfg: &RptConfig,
    l: usize,
    ps: Var,
    pq: Var,
) -> Result<Var> {
    let pre = block_prefix(l);
    let po = if !cfg.search_filter {
        ps
    } else if cfg.alt_attention {
        sf_alternative_var(g, ps, pq)?
    } else {
        sf_aggregate_var(g, ps, pq)?.0
    };
    let po = check(g, po, "search-filter")?;
    let att = attention(g, params, po, &format!("{pre}.attn"), cfg.heads)?;
    let res = g.add(att, po)?;
    let x1 = layer_norm(g, params, res, &format!("{pre}.ln1"))?;
    let x1 = check(g, x1, "attention")?;
    let h = affine(g, params, x1, &format!("{pre}.mlp.w1"), &format!("{pre}.mlp.b1"))?;
    let h = g.relu(h);
    let h = affine(g, params, h, &format!("{pre}.mlp.w2"), &format!("{pre}.mlp.b2"))?;
    let res = g.add(h, x1)?;
    let out = layer_norm(g, params, res, &format!("{pre}.ln2"))?;
    check(g, out, "mlp")
}

/// Rectified support prototypes plus per-block traces of both prototypes.
pub struct RptTrace {
    pub support: Var,
    pub blocks: Vec<Var>,
    pub queries: Vec<Var>,
}

/// What a block does when its query mask estimate has (near) zero mass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DeadQuery {
    /// Propagate the empty-mask error.
    #[default]
    Error,
    /// Keep the previous query prototype. Training uses this: a collapsed
    /// threshold kills every episode, and skipping them leaves no gradient
    /// that could bring it back.
    KeepPrevious,
}

/// Run `L` blocks, re-estimating the query prototype after each one.
#[allow(clippy::too_many_arguments)]
pub fn rpt_forward_var(
    g: &mut Graph,
    params: &Params,
    cfg: &RptConfig,
    ps0: Var,
    q_tokens: Var,
    tau: Var,
    pq0: Var,
    dead: DeadQuery,
) -> Result<RptTrace> {
    cfg.validate(g.shape(ps0)[1])?;
    let (mut ps, mut pq) = (ps0, pq0);
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    let mut queries = Vec::with_capacity(cfg.n_blocks);
    for l in 0..cfg.n_blocks {
        let stage = format!("block {}", l + 1);
        ps = bat_block_var(g, params, cfg, l, ps, pq).map_err(|e| e.in_stage(&stage))?;
        let gap = g.mean_axis(ps, 0)?;
        let m = estimate_query_mask_var(g, q_tokens, gap, tau).map_err(|e| e.in_stage(&stage))?;
        pq = match query_prototype_var(g, q_tokens, m) {
            Ok(p) => p,
            Err(Error::EmptyMask(_)) if dead == DeadQuery::KeepPrevious => pq,
            Err(e) => return Err(e.in_stage(&stage)),
        };
        blocks.push(ps);
        queries.push(pq);
    }
    Ok(RptTrace {
        support: ps,
        blocks,
        queries,
    })
}

/// Foreground `[n, 1]` from the mean of the final support prototypes.
pub fn predict_var(g: &mut Graph, q_tokens: Var, ps_final: Var, tau: Var) -> Result<Var> {
    let gap = g.mean_axis(ps_final, 0)?;
    estimate_query_mask_var(g, q_tokens, gap, tau)
}

fn row_const(g: &mut Graph, v: &Array1<f64>) -> Var {
    g.constant(dyn2(v.clone().insert_axis(Axis(0))))
}

pub fn bat_block(
    params: &Params,
    cfg: &RptConfig,
    l: usize,
    ps: &Array2<f64>,
    pq: &Array1<f64>,
) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let psv = g.constant(dyn2(ps.clone()));
    let pqv = row_const(&mut g, pq);
    let out = bat_block_var(&mut g, params, cfg, l, psv, pqv)?;
    to2(g.value(out))
}

/// Inference-mode forward: threshold from the shared head, the initial
/// query prototype from the global support prototype, then `L` blocks.
/// Returns the final support prototypes and one entry per block.
pub fn rpt_forward(
    params: &Params,
    cfg: &RptConfig,
    head: &ThresholdHead,
    regional: &RegionalPrototypeSet,
    global: &Array1<f64>,
    fq: &FeatureMap,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let mut g = Graph::new();
    let tokens = g.constant(dyn2(feature_tokens(fq)));
    let tau = head.forward(&mut g, params, tokens)?;
    let pg = row_const(&mut g, global);
    let m0 = estimate_query_mask_var(&mut g, tokens, pg, tau)?;
    let pq0 = query_prototype_var(&mut g, tokens, m0)?;
    let ps0 = g.constant(dyn2(regional.prototypes.clone()));
    let trace = rpt_forward_var(&mut g, params, cfg, ps0, tokens, tau, pq0, DeadQuery::Error)?;
    let blocks = trace
        .blocks
        .iter()
        .map(|&b| to2(g.value(b)))
        .collect::<Result<Vec<_>>>()?;
    Ok((to2(g.value(trace.support))?, blocks))
}

/// Foreground and background soft masks on the feature grid.
pub fn predict_masks(fq: &FeatureMap, ps_final: &Array2<f64>, tau: f64) -> Result<(SoftMask, SoftMask)> {
    if ps_final.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("final prototypes"));
    }
    let mut g = Graph::new();
    let tokens = g.constant(dyn2(feature_tokens(fq)));
    let ps = g.constant(dyn2(ps_final.clone()));
    let t = g.constant(dyn2(Array2::from_elem((1, 1), tau)));
    let m = predict_var(&mut g, tokens, ps, t)?;
    let values = g
        .value(m)
        .clone()
        .into_shape_with_order(fq.grid())
        .map_err(|e| Error::Input(e.to_string()))?;
    let fg = SoftMask {
        values,
        kind: MaskKind::Foreground,
    };
    let bg = fg.complement();
    Ok((fg, bg))
}
