//! Masked average pooling, Voronoi regional prototypes and the query
//! prototype path with its learned threshold.
//!
//! Graph functions work on features laid out as `[pixels, C]` tokens; the
//! plain wrappers take a [`FeatureMap`] and build a throwaway graph.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{dyn2, to2, Graph, Var};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::params::{self, Params};

/// Fixed scale on the cosine similarity in the query mask.
pub const ALPHA: f64 = 20.0;
/// Added to both norms of a cosine similarity.
pub const COS_EPS: f64 = 1e-8;
/// Below this total weight a soft query mask counts as empty.
pub const MIN_QUERY_MASS: f64 = 1e-6;
pub const DEFAULT_REGIONS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Foreground,
    Background,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub values: Array2<f64>,
    pub kind: MaskKind,
}

impl SoftMask {
    pub fn complement(&self) -> SoftMask {
        SoftMask {
            values: self.values.mapv(|v| 1.0 - v),
            kind: match self.kind {
                MaskKind::Foreground => MaskKind::Background,
                MaskKind::Background => MaskKind::Foreground,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMaskSet {
    pub masks: Vec<Array2<bool>>,
    pub seeds: Vec<(usize, usize)>,
}

impl RegionMaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Disjoint, non-empty regions whose union is exactly `foreground`.
    pub fn validate(&self, foreground: &Array2<bool>) -> Result<()> {
        let mut cover = Array2::<u32>::zeros(foreground.dim());
        for (n, m) in self.masks.iter().enumerate() {
            if m.dim() != foreground.dim() {
                return Err(Error::Input(format!("region {n} has the wrong grid")));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::EmptyMask(format!("region {n} is empty")));
            }
            cover.zip_mut_with(m, |c, &b| *c += b as u32);
        }
        for (c, &f) in cover.iter().zip(foreground) {
            if *c != f as u32 {
                return Err(Error::Input("regions do not partition the foreground".into()));
            }
        }
        Ok(())
    }

    /// Region indicator rows, `[N_f, pixels]`.
    pub fn matrix(&self) -> Array2<f64> {
        let n = self.masks.first().map_or(0, |m| m.len());
        let mut out = Array2::zeros((self.masks.len(), n));
        for (mut row, m) in out.rows_mut().into_iter().zip(&self.masks) {
            for (o, &b) in row.iter_mut().zip(m.iter()) {
                *o = b as u8 as f64;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionalPrototypeSet {
    pub prototypes: Array2<f64>,
    pub n_regions: usize,
}

fn d2(a: (usize, usize), b: (usize, usize)) -> i64 {
    let dr = a.0 as i64 - b.0 as i64;
    let dc = a.1 as i64 - b.1 as i64;
    dr * dr + dc * dc
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, ties: &[T]) -> T {
    ties[rng.random_range(0..ties.len())]
}

/// Label each foreground pixel with its nearest seed (ties to the lower index).
pub fn assign_to_seeds(foreground: &Array2<bool>, seeds: &[(usize, usize)]) -> Vec<Array2<bool>> {
    let mut masks = vec![Array2::from_elem(foreground.dim(), false); seeds.len()];
    for ((r, c), &f) in foreground.indexed_iter() {
        if !f {
            continue;
        }
        let mut best = 0;
        for (i, &s) in seeds.iter().enumerate().skip(1) {
            if d2((r, c), s) < d2((r, c), seeds[best]) {
                best = i;
            }
        }
        if let Some(m) = masks.get_mut(best) {
            m[[r, c]] = true;
        }
    }
    masks
}

/// Split the foreground into Voronoi cells around farthest-point seeds.
///
/// The first seed is the foreground pixel closest to the centroid; each later
/// seed is the pixel farthest from all chosen seeds. Exact ties are broken by
/// the seeded generator, so the result is a function of the inputs alone.
pub fn voronoi_partition(
    foreground: &Array2<bool>,
    n_regions: usize,
    rng_seed: u64,
) -> Result<RegionMaskSet> {
    if n_regions == 0 {
        return Err(Error::Parameter("n_regions must be at least 1".into()));
    }
    let pixels: Vec<(usize, usize)> = foreground
        .indexed_iter()
        .filter(|(_, &f)| f)
        .map(|(ix, _)| ix)
        .collect();
    if pixels.is_empty() {
        return Err(Error::EmptyMask("support foreground has no pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let count = pixels.len() as f64;
    let cr = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / count;
    let cc = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / count;
    let to_centre: Vec<f64> = pixels
        .iter()
        .map(|p| (p.0 as f64 - cr).powi(2) + (p.1 as f64 - cc).powi(2))
        .collect();
    let closest = to_centre.iter().copied().fold(f64::INFINITY, f64::min);
    let ties: Vec<usize> = (0..pixels.len()).filter(|&i| to_centre[i] == closest).collect();
    let mut seeds = vec![pixels[pick(&mut rng, &ties)]];

    let k = n_regions.min(pixels.len());
    let mut nearest: Vec<i64> = pixels.iter().map(|&p| d2(p, seeds[0])).collect();
    while seeds.len() < k {
        let far = *nearest.iter().max().expect("non-empty");
        let ties: Vec<usize> = (0..pixels.len()).filter(|&i| nearest[i] == far).collect();
        let s = pixels[pick(&mut rng, &ties)];
        seeds.push(s);
        for (d, &p) in nearest.iter_mut().zip(&pixels) {
            *d = (*d).min(d2(p, s));
        }
    }
    let masks = assign_to_seeds(foreground, &seeds);
    Ok(RegionMaskSet { masks, seeds })
}

/// `[C, h, w]` features as `[h*w, C]` tokens.
pub fn tokens(g: &mut Graph, feats: Var) -> Result<Var> {
    let flat = crate::encoder::flatten(g, feats)?;
    g.transpose(flat)
}

/// Plain-array token view of a feature map.
pub fn feature_tokens(f: &FeatureMap) -> Array2<f64> {
    f.flat().reversed_axes().as_standard_layout().into_owned()
}

/// Weighted means of tokens `[n, C]` under each row of `weights` `[k, n]`.
pub fn map_pool(g: &mut Graph, tokens: Var, weights: Var) -> Result<Var> {
    let sums = g.sum_axis(weights, 1)?;
    if let Some(i) = g.value(sums).iter().position(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::EmptyMask(format!("pooling weights of row {i} sum to zero")));
    }
    let num = g.matmul(weights, tokens)?;
    g.div(num, sums)
}

/// Weighted mean of `f` under the non-negative mask `m`, one value per channel.
pub fn masked_average_pool(f: &FeatureMap, m: &Array2<f64>) -> Result<Array1<f64>> {
    if m.dim() != f.grid() {
        return Err(Error::Input(format!(
            "mask {:?} does not match feature grid {:?}",
            m.dim(),
            f.grid()
        )));
    }
    if m.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Input("mask weights must be finite and non-negative".into()));
    }
    let mut g = Graph::new();
    let t = g.constant(dyn2(feature_tokens(f)));
    let w = g.constant(dyn2(m.to_owned().into_shape_with_order((1, m.len())).expect("flat")));
    let p = map_pool(&mut g, t, w)?;
    Ok(to2(g.value(p))?.row(0).to_owned())
}

/// Regional prototypes `[N_f, C]` as one pooled matmul over the region matrix.
pub fn regional_prototypes_var(g: &mut Graph, tokens: Var, regions: &RegionMaskSet) -> Result<Var> {
    if regions.is_empty() {
        return Err(Error::EmptyMask("no regions".into()));
    }
    let n = g.shape(tokens)[0];
    if regions.masks[0].len() != n {
        return Err(Error::Input(format!(
            "regions cover {} pixels, features have {n}",
            regions.masks[0].len()
        )));
    }
    let v = g.constant(dyn2(regions.matrix()));
    map_pool(g, tokens, v)
}

pub fn regional_prototypes(f: &FeatureMap, regions: &RegionMaskSet) -> Result<RegionalPrototypeSet> {
    if regions.masks.iter().any(|m| m.dim() != f.grid()) {
        return Err(Error::Input("regions do not match the feature grid".into()));
    }
    let mut g = Graph::new();
    let t = g.constant(dyn2(feature_tokens(f)));
    let p = regional_prototypes_var(&mut g, t, regions)?;
    Ok(RegionalPrototypeSet {
        prototypes: to2(g.value(p))?,
        n_regions: regions.len(),
    })
}

/// Global average pool, a `C x C` affine layer, ReLU, then a `C x 1` affine
/// layer giving the scalar threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdHead {
    pub width: usize,
}

impl ThresholdHead {
    pub fn init(&self, rng: &mut impl Rng) -> Params {
        let c = self.width;
        let mut p = Params::new();
        p.insert("head.fc1.weight", params::normal(rng, &[c, c], (2.0 / c as f64).sqrt()));
        p.insert("head.fc1.bias", params::zeros(&[1, c]));
        // small output weights keep the initial threshold near zero
        p.insert("head.fc2.weight", params::normal(rng, &[c, 1], 0.1 / (c as f64).sqrt()));
        p.insert("head.fc2.bias", params::zeros(&[1, 1]));
        p
    }

    /// Threshold `[1, 1]` from query tokens `[n, C]`.
    pub fn forward(&self, g: &mut Graph, params: &Params, tokens: Var) -> Result<Var> {
        let gap = g.mean_axis(tokens, 0)?;
        let w1 = g.param(params, "head.fc1.weight")?;
        let b1 = g.param(params, "head.fc1.bias")?;
        let w2 = g.param(params, "head.fc2.weight")?;
        let b2 = g.param(params, "head.fc2.bias")?;
        let h = g.matmul(gap, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h);
        let t = g.matmul(h, w2)?;
        g.add(t, b2)
    }
}

pub fn compute_threshold(f: &FeatureMap, head: &ThresholdHead, params: &Params) -> Result<f64> {
    let mut g = Graph::new();
    let t = g.constant(dyn2(feature_tokens(f)));
    let tau = head.forward(&mut g, params, t)?;
    let v = g.scalar(tau);
    if !v.is_finite() {
        return Err(Error::numeric("threshold head"));
    }
    Ok(v)
}

/// Per-token cosine similarity `[n, 1]` between tokens `[n, C]` and `p` `[1, C]`.
pub fn cosine_var(g: &mut Graph, tokens: Var, p: Var) -> Result<Var> {
    let pt = g.transpose(p)?;
    let dots = g.matmul(tokens, pt)?;
    let sq = g.mul(tokens, tokens)?;
    let fnorm = g.sum_axis(sq, 1)?;
    let fnorm = g.sqrt(fnorm);
    let fnorm = g.shift(fnorm, COS_EPS);
    let psq = g.mul(p, p)?;
    let pnorm = g.sum(psq);
    let pnorm = g.sqrt(pnorm);
    let pnorm = g.shift(pnorm, COS_EPS);
    let denom = g.mul(fnorm, pnorm)?;
    g.div(dots, denom)
}

/// Foreground logits `[n, 1]`: `ALPHA * cos + tau`.
pub fn query_logits_var(g: &mut Graph, tokens: Var, p: Var, tau: Var) -> Result<Var> {
    let pv = g.value(p);
    if pv.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("prototype"));
    }
    if pv.iter().all(|&x| x == 0.0) {
        return Err(Error::DegeneratePrototype("prototype has zero norm".into()));
    }
    let cos = cosine_var(g, tokens, p)?;
    let z = g.scale(cos, ALPHA);
    g.add(z, tau)
}

/// `1 - sigmoid(-z)`.
pub fn mask_from_logits(g: &mut Graph, z: Var) -> Var {
    let neg = g.scale(z, -1.0);
    let s = g.sigmoid(neg);
    g.rsub(1.0, s)
}

/// Soft foreground `[n, 1]`: `1 - sigmoid(-ALPHA * cos - tau)`.
pub fn estimate_query_mask_var(g: &mut Graph, tokens: Var, p: Var, tau: Var) -> Result<Var> {
    let z = query_logits_var(g, tokens, p, tau)?;
    Ok(mask_from_logits(g, z))
}

pub fn estimate_query_mask(f: &FeatureMap, p: &Array1<f64>, tau: f64) -> Result<SoftMask> {
    if p.len() != f.channels() {
        return Err(Error::Input("prototype width does not match features".into()));
    }
    let mut g = Graph::new();
    let t = g.constant(dyn2(feature_tokens(f)));
    let pv = g.constant(dyn2(p.clone().insert_axis(Axis(0))));
    let tv = g.constant(dyn2(Array2::from_elem((1, 1), tau)));
    let m = estimate_query_mask_var(&mut g, t, pv, tv)?;
    let values = g
        .value(m)
        .clone()
        .into_shape_with_order(f.grid())
        .map_err(|e| Error::Input(e.to_string()))?;
    Ok(SoftMask {
        values,
        kind: MaskKind::Foreground,
    })
}

/// Soft-weighted mean `[1, C]` of tokens under a mask `[n, 1]`.
pub fn query_prototype_var(g: &mut Graph, tokens: Var, mask: Var) -> Result<Var> {
    let mass: f64 = g.value(mask).sum();
    if !mass.is_finite() {
        return Err(Error::numeric("query mask"));
    }
    if mass < MIN_QUERY_MASS {
        return Err(Error::EmptyMask(format!("query mask mass {mass:e}")));
    }
    let w = g.transpose(mask)?;
    map_pool(g, tokens, w)
}

pub fn query_prototype(f: &FeatureMap, mask: &SoftMask) -> Result<Array1<f64>> {
    if mask.values.dim() != f.grid() {
        return Err(Error::Input("mask does not match the feature grid".into()));
    }
    let mut g = Graph::new();
    let t = g.constant(dyn2(feature_tokens(f)));
    let n = mask.values.len();
    let m = g.constant(dyn2(mask.values.to_owned().into_shape_with_order((n, 1)).expect("flat")));
    let p = query_prototype_var(&mut g, t, m)?;
    Ok(to2(g.value(p))?.row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Source;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};
    use rand_distr::{Distribution, Uniform};

    fn fmap(values: Array3<f64>) -> FeatureMap {
        FeatureMap {
            values,
            stride: 8,
            source: Source::Query,
        }
    }

    fn random_fmap(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        fmap(Array3::from_shape_simple_fn((c, h, w), || u.sample(&mut rng)))
    }

    fn loop_pool(f: &FeatureMap, m: &Array2<f64>) -> Vec<f64> {
        let (c, h, w) = f.values.dim();
        let total: f64 = m.sum();
        (0..c)
            .map(|k| {
                let mut s = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        s += f.values[[k, i, j]] * m[[i, j]];
                    }
                }
                s / total
            })
            .collect()
    }

    #[test]
    fn map_constant_field() {
        let mut v = Array3::zeros((2, 3, 3));
        v.index_axis_mut(Axis(0), 0).fill(1.0);
        v.index_axis_mut(Axis(0), 1).fill(2.0);
        let m = array![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.0, 0.0, 0.0]];
        let p = masked_average_pool(&fmap(v), &m).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn map_diagonal_mask() {
        let f = fmap(array![[[1.0, 2.0], [3.0, 4.0]]]);
        let p = masked_average_pool(&f, &array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(p[0], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn map_soft_half_equals_full() {
        let f = random_fmap(4, 5, 6, 1);
        let a = masked_average_pool(&f, &Array2::from_elem((5, 6), 0.5)).unwrap();
        let b = masked_average_pool(&f, &Array2::ones((5, 6))).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn map_empty_mask_errors() {
        let f = random_fmap(2, 3, 3, 0);
        assert!(matches!(
            masked_average_pool(&f, &Array2::zeros((3, 3))),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn single_pixel_single_region() {
        let mut fg = Array2::from_elem((8, 8), false);
        fg[[3, 5]] = true;
        let r = voronoi_partition(&fg, 10, 0).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.seeds, vec![(3, 5)]);
        r.validate(&fg).unwrap();
    }

    #[test]
    fn strip_split_by_brute_force() {
        let fg = Array2::from_elem((1, 10), true);
        let seeds = [(0, 0), (0, 9)];
        let masks = assign_to_seeds(&fg, &seeds);
        // brute force: nearest seed, first on ties
        for j in 0..10 {
            let d: Vec<i64> = seeds.iter().map(|s| (j as i64 - s.1 as i64).abs()).collect();
            let want = if d[1] < d[0] { 1 } else { 0 };
            assert!(masks[want][[0, j]]);
            assert!(!masks[1 - want][[0, j]]);
        }
        let sizes: Vec<usize> = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).collect();
        assert_eq!(sizes, vec![5, 5]);
    }

    #[test]
    fn strip_partition_uses_both_ends() {
        let fg = Array2::from_elem((1, 10), true);
        let r = voronoi_partition(&fg, 2, 4).unwrap();
        assert_eq!(r.len(), 2);
        r.validate(&fg).unwrap();
    }

    #[test]
    fn random_masks_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let p = rng.random_range(0.05..0.9);
            let fg = Array2::from_shape_simple_fn((12, 9), || rng.random_bool(p));
            if !fg.iter().any(|&b| b) {
                continue;
            }
            let n = rng.random_range(1..15);
            let r = voronoi_partition(&fg, n, trial).unwrap();
            r.validate(&fg).unwrap();
            let count = fg.iter().filter(|&&b| b).count();
            assert_eq!(r.len(), n.min(count));
            assert_eq!(r, voronoi_partition(&fg, n, trial).unwrap());
        }
    }

    #[test]
    fn empty_foreground_errors() {
        let fg = Array2::from_elem((4, 4), false);
        assert!(matches!(voronoi_partition(&fg, 3, 0), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn regional_rows_match_loop() {
        let f = random_fmap(5, 6, 7, 3);
        let fg = Array2::from_shape_fn((6, 7), |(i, j)| (i + j) % 3 != 0);
        let r = voronoi_partition(&fg, 3, 9).unwrap();
        let set = regional_prototypes(&f, &r).unwrap();
        assert_eq!(set.n_regions, 3);
        for (n, m) in r.masks.iter().enumerate() {
            let want = loop_pool(&f, &m.mapv(|b| b as u8 as f64));
            for (k, w) in want.iter().enumerate() {
                assert_abs_diff_eq!(set.prototypes[[n, k]], *w, epsilon = 1e-12);
            }
        }
        let whole = RegionMaskSet {
            masks: vec![fg.clone()],
            seeds: vec![(0, 1)],
        };
        let global = masked_average_pool(&f, &fg.mapv(|b| b as u8 as f64)).unwrap();
        let one = regional_prototypes(&f, &whole).unwrap();
        for (a, b) in one.prototypes.row(0).iter().zip(&global) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_field_identical_rows() {
        let f = fmap(Array3::from_shape_fn((3, 5, 5), |(k, _, _)| k as f64 - 1.0));
        let fg = Array2::from_elem((5, 5), true);
        let set = regional_prototypes(&f, &voronoi_partition(&fg, 4, 0).unwrap()).unwrap();
        for row in set.prototypes.rows() {
            assert_eq!(row.to_vec(), vec![-1.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn threshold_zero_features_zero_bias() {
        let head = ThresholdHead { width: 4 };
        let p = head.init(&mut ChaCha8Rng::seed_from_u64(0));
        let tau = compute_threshold(&fmap(Array3::zeros((4, 3, 3))), &head, &p).unwrap();
        assert_eq!(tau, 0.0);
    }

    #[test]
    fn threshold_permutation_invariant() {
        let head = ThresholdHead { width: 3 };
        let p = head.init(&mut ChaCha8Rng::seed_from_u64(1));
        let f = random_fmap(3, 4, 4, 2);
        let mut flipped = f.clone();
        flipped.values.invert_axis(Axis(1));
        flipped.values.swap_axes(1, 2);
        let a = compute_threshold(&f, &head, &p).unwrap();
        let b = compute_threshold(&flipped, &head, &p).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn query_mask_closed_forms() {
        // pixel 0 aligned with p, pixel 1 orthogonal
        let f = fmap(array![[[1.0, 0.0]], [[0.0, 2.0]]]);
        let m = estimate_query_mask(&f, &array![3.0, 0.0], 0.0).unwrap();
        let aligned = 1.0 - crate::autograd::sigmoid(-20.0);
        assert_abs_diff_eq!(m.values[[0, 0]], aligned, epsilon = 1e-9);
        assert!((1.0 - m.values[[0, 0]] - 2.06e-9).abs() < 1e-11);
        assert_abs_diff_eq!(m.values[[0, 1]], 0.5, epsilon = 1e-12);
        let bg = m.complement();
        for (a, b) in m.values.iter().zip(&bg.values) {
            assert_abs_diff_eq!(a + b, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn query_mask_zero_prototype_errors() {
        let f = random_fmap(2, 2, 2, 0);
        assert!(matches!(
            estimate_query_mask(&f, &array![0.0, 0.0], 0.0),
            Err(Error::DegeneratePrototype(_))
        ));
    }

    #[test]
    fn query_prototype_uniform_and_point() {
        let f = random_fmap(3, 4, 5, 7);
        let uniform = SoftMask {
            values: Array2::ones((4, 5)),
            kind: MaskKind::Foreground,
        };
        let p = query_prototype(&f, &uniform).unwrap();
        for k in 0..3 {
            let mean = f.values.index_axis(Axis(0), k).mean().unwrap();
            assert_abs_diff_eq!(p[k], mean, epsilon = 1e-12);
        }
        let mut point = Array2::zeros((4, 5));
        point[[2, 3]] = 1.0;
        let p = query_prototype(&f, &SoftMask { values: point, kind: MaskKind::Foreground }).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(p[k], f.values[[k, 2, 3]], epsilon = 1e-12);
        }
    }

    #[test]
    fn query_prototype_soft_matches_loop() {
        let f = random_fmap(4, 3, 5, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Array2::from_shape_simple_fn((3, 5), || rng.random_range(0.0..1.0));
        let p = query_prototype(&f, &SoftMask { values: m.clone(), kind: MaskKind::Foreground }).unwrap();
        for (a, b) in p.iter().zip(loop_pool(&f, &m)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let tiny = SoftMask { values: Array2::from_elem((3, 5), 1e-9), kind: MaskKind::Foreground };
        assert!(matches!(query_prototype(&f, &tiny), Err(Error::EmptyMask(_))));
    }
}
