//! Cross-entropy, Dice and boundary losses and their scheduled combination.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{dyn2, Graph, Var};
use crate::error::{Error, Result};

pub const BCE_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;
pub const DEFAULT_ITERS_PER_EPOCH: usize = 1000;

/// Signed distance to the ground-truth boundary, negative inside.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub phi: Array2<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub ce: f64,
    pub dice: f64,
    pub boundary: f64,
    pub eta: f64,
    pub total: f64,
}

/// Which loss terms contribute. Disabled terms are neither computed nor
/// differentiated and report zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossTerms {
    pub dice: bool,
    pub boundary: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms {
            dice: true,
            boundary: true,
        }
    }
}

impl LossTerms {
    pub const CE_ONLY: LossTerms = LossTerms { dice: false, boundary: false };
    pub const CE_BOUNDARY: LossTerms = LossTerms { dice: false, boundary: true };
    pub const ALL: LossTerms = LossTerms { dice: true, boundary: true };

    pub fn label(&self) -> &'static str {
        match (self.dice, self.boundary) {
            (false, false) => "ce",
            (false, true) => "ce+boundary",
            (true, false) => "ce+dice",
            (true, true) => "ce+boundary+dice",
        }
    }
}

/// Weight of the Dice term: starts at 1, drops by 0.01 per epoch, floored at 0.
pub fn eta(epoch: usize) -> f64 {
    (1.0 - 0.01 * epoch as f64).max(0.0)
}

pub fn epoch_of(iter: usize, iters_per_epoch: usize) -> usize {
    iter / iters_per_epoch.max(1)
}

fn check_shapes(a: &Array2<f64>, b: &Array2<bool>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Input(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn gt_const(g: &mut Graph, gt: &Array2<bool>) -> Var {
    g.constant(dyn2(gt.mapv(|b| b as u8 as f64)))
}

/// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
pub fn bce_var(g: &mut Graph, pred: Var, gt: &Array2<bool>) -> Result<Var> {
    let y = gt_const(g, gt);
    let p = g.clamp(pred, BCE_EPS, 1.0 - BCE_EPS);
    let lp = g.log(p);
    let q = g.rsub(1.0, p);
    let lq = g.log(q);
    let ny = g.rsub(1.0, y);
    let a = g.mul(y, lp)?;
    let b = g.mul(ny, lq)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.scale(m, -1.0))
}

/// `1 - (2 sum(p*g) + s) / (sum(p) + sum(g) + s)`.
pub fn dice_var(g: &mut Graph, pred: Var, gt: &Array2<bool>) -> Result<Var> {
    let y = gt_const(g, gt);
    let inter = g.mul(pred, y)?;
    let inter = g.sum(inter);
    let num = g.scale(inter, 2.0);
    let num = g.shift(num, DICE_SMOOTH);
    let sp = g.sum(pred);
    let sy = g.sum(y);
    let den = g.add(sp, sy)?;
    let den = g.shift(den, DICE_SMOOTH);
    let r = g.div(num, den)?;
    Ok(g.rsub(1.0, r))
}

/// Mean of `phi * pred`.
pub fn boundary_var(g: &mut Graph, pred: Var, dist: &DistanceMap) -> Result<Var> {
    let phi = g.constant(dyn2(dist.phi.clone()));
    let prod = g.mul(phi, pred)?;
    Ok(g.mean(prod))
}

fn eval1(
    pred: &Array2<f64>,
    f: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(dyn2(pred.clone()));
    let out = f(&mut g, p)?;
    Ok(g.scalar(out))
}

pub fn bce_loss(pred: &Array2<f64>, gt: &Array2<bool>) -> Result<f64> {
    check_shapes(pred, gt)?;
    eval1(pred, |g, p| bce_var(g, p, gt))
}

pub fn dice_loss(pred: &Array2<f64>, gt: &Array2<bool>) -> Result<f64> {
    check_shapes(pred, gt)?;
    eval1(pred, |g, p| dice_var(g, p, gt))
}

pub fn boundary_loss(pred: &Array2<f64>, dist: &DistanceMap) -> Result<f64> {
    if pred.dim() != dist.phi.dim() {
        return Err(Error::Input("prediction and distance map differ in shape".into()));
    }
    eval1(pred, |g, p| boundary_var(g, p, dist))
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas).
fn dt1(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf))
    };
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[k]].is_infinite() {
            v[k] = q;
            continue;
        }
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if f[v[0]].is_infinite() {
        out.fill(f64::INFINITY);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true` site.
pub fn squared_edt(sites: &Array2<bool>) -> Array2<f64> {
    let (h, w) = sites.dim();
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut d = sites.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    for c in 0..w {
        for r in 0..h {
            f[r] = d[[r, c]];
        }
        dt1(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            d[[r, c]] = out[r];
        }
    }
    for r in 0..h {
        for c in 0..w {
            f[c] = d[[r, c]];
        }
        dt1(&f[..w], &mut out[..w], &mut v, &mut z);
        for c in 0..w {
            d[[r, c]] = out[c];
        }
    }
    d
}

/// Foreground pixels with a 4-neighbour in the background.
pub fn inner_boundary(gt: &Array2<bool>) -> Array2<bool> {
    let (h, w) = gt.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        gt[[r, c]]
            && ((r > 0 && !gt[[r - 1, c]])
                || (r + 1 < h && !gt[[r + 1, c]])
                || (c > 0 && !gt[[r, c - 1]])
                || (c + 1 < w && !gt[[r, c + 1]]))
    })
}

/// Distance to the ground-truth boundary, negated on foreground pixels.
pub fn signed_distance(gt: &Array2<bool>) -> Result<DistanceMap> {
    let fg = gt.iter().filter(|&&b| b).count();
    if fg == 0 || fg == gt.len() {
        return Err(Error::DegenerateMask(format!(
            "ground truth has {fg} of {} pixels in the foreground",
            gt.len()
        )));
    }
    let d = squared_edt(&inner_boundary(gt));
    let mut phi = d.mapv(f64::sqrt);
    phi.zip_mut_with(gt, |p, &inside| {
        if inside {
            *p = -*p;
        }
    });
    Ok(DistanceMap { phi })
}

/// The combined loss as a graph node plus its scalar breakdown. The boundary
/// term is skipped when the ground truth is all foreground or all background.
pub fn combined_loss_var(
    g: &mut Graph,
    pred: Var,
    gt: &Array2<bool>,
    eta: f64,
    terms: LossTerms,
) -> Result<(Var, LossBundle)> {
    if g.shape(pred) != [gt.nrows(), gt.ncols()] {
        return Err(Error::Input(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            g.shape(pred),
            gt.dim()
        )));
    }
    let mut bundle = LossBundle {
        eta,
        ..Default::default()
    };
    let ce = bce_var(g, pred, gt)?;
    bundle.ce = g.scalar(ce);
    let mut total = ce;
    if terms.dice {
        let d = dice_var(g, pred, gt)?;
        bundle.dice = g.scalar(d);
        let w = g.scale(d, eta);
        total = g.add(total, w)?;
    }
    if terms.boundary {
        match signed_distance(gt) {
            Ok(dist) => {
                let b = boundary_var(g, pred, &dist)?;
                bundle.boundary = g.scalar(b);
                let w = g.scale(b, 1.0 - eta);
                total = g.add(total, w)?;
            }
            Err(Error::DegenerateMask(_)) => {}
            Err(e) => return Err(e),
        }
    }
    bundle.total = g.scalar(total);
    if !bundle.total.is_finite() {
        return Err(Error::numeric("loss"));
    }
    Ok((total, bundle))
}

pub fn combined_loss(
    pred: &Array2<f64>,
    gt: &Array2<bool>,
    epoch: usize,
    terms: LossTerms,
) -> Result<LossBundle> {
    let mut g = Graph::new();
    let p = g.constant(dyn2(pred.clone()));
    Ok(combined_loss_var(&mut g, p, gt, eta(epoch), terms)?.1)
}
