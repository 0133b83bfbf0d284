//! Supervoxel pseudo-masks by seeded region growing.
//!
//! Seeds sit on a regular 3-D grid whose spacing is the cube root of the
//! requested granularity. All regions then grow at once through a priority
//! queue keyed on intensity distance to the region's running mean plus a
//! spatial term, so each voxel joins the cheapest region that reaches it
//! through its 6-neighbourhood. With edge weighting on, a step between
//! neighbours whose intensities differ by more than `edge_threshold`
//! (in global standard deviations) is forbidden. Voxels no region can reach
//! form extra clusters of their own, and fragments below `min_size` merge
//! into the adjacent cluster with the closest mean intensity. Every cluster
//! is 6-connected by construction.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::volume::VolumeScan;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoMaskSet {
    pub volume_ref: String,
    pub clusters: Array3<i32>,
    pub num_clusters: usize,
}

impl PseudoMaskSet {
    /// Wrap a precomputed cluster array, checking the partition invariants.
    pub fn from_clusters(volume_ref: &str, clusters: Array3<i32>) -> Result<Self> {
        let num_clusters = clusters.iter().copied().max().map_or(0, |m| m as usize + 1);
        let set = PseudoMaskSet {
            volume_ref: volume_ref.to_string(),
            clusters,
            num_clusters,
        };
        set.validate()?;
        Ok(set)
    }

    /// Voxel count per cluster id.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters];
        for &c in self.clusters.iter() {
            sizes[c as usize] += 1;
        }
        sizes
    }

    /// Every voxel carries an id in range and every id is one 6-connected piece.
    pub fn validate(&self) -> Result<()> {
        if self.clusters.iter().any(|&c| c < 0 || c as usize >= self.num_clusters) {
            return Err(Error::Input("cluster id out of range".into()));
        }
        let (d, h, w) = self.clusters.dim();
        let mut seen = Array3::from_elem((d, h, w), false);
        let mut visited_ids = vec![false; self.num_clusters];
        for (idx, &c) in self.clusters.indexed_iter() {
            if seen[idx] {
                continue;
            }
            if visited_ids[c as usize] {
                return Err(Error::Input(format!("cluster {c} is not connected")));
            }
            visited_ids[c as usize] = true;
            flood(&self.clusters, &mut seen, idx, |v| v == c);
        }
        Ok(())
    }
}

fn neighbours(
    (z, y, x): (usize, usize, usize),
    (d, h, w): (usize, usize, usize),
) -> impl Iterator<Item = (usize, usize, usize)> {
    [
        (z.wrapping_sub(1), y, x),
        (z + 1, y, x),
        (z, y.wrapping_sub(1), x),
        (z, y + 1, x),
        (z, y, x.wrapping_sub(1)),
        (z, y, x + 1),
    ]
    .into_iter()
    .filter(move |&(a, b, c)| a < d && b < h && c < w)
}

fn flood<T: Copy>(
    arr: &Array3<T>,
    seen: &mut Array3<bool>,
    start: (usize, usize, usize),
    member: impl Fn(T) -> bool,
) -> Vec<(usize, usize, usize)> {
    let dims = arr.dim();
    let mut out = vec![start];
    seen[start] = true;
    let mut q = VecDeque::from([start]);
    while let Some(p) = q.pop_front() {
        for n in neighbours(p, dims) {
            if !seen[n] && member(arr[n]) {
                seen[n] = true;
                out.push(n);
                q.push_back(n);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterParams {
    /// Target voxels per cluster.
    pub granularity: usize,
    pub edge_weighting: bool,
    /// Intensity step, in global standard deviations, that blocks growth.
    pub edge_threshold: f64,
    /// Weight of the normalised seed distance against intensity distance.
    pub spatial_weight: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            granularity: 2000,
            edge_weighting: true,
            edge_threshold: 1.0,
            spatial_weight: 0.5,
        }
    }
}

impl ClusterParams {
    pub fn with_granularity(granularity: usize) -> Self {
        ClusterParams {
            granularity,
            ..Default::default()
        }
    }
}

#[derive(PartialEq)]
struct Entry {
    cost: f64,
    order: u64,
    voxel: (usize, usize, usize),
    region: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (cost, insertion order)
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.order.cmp(&self.order))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Grid seed positions along one axis of length `n` with `k` cells.
fn axis_seeds(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| ((2 * i + 1) * n / (2 * k)).min(n - 1)).collect()
}

pub fn cluster_pseudo_masks(volume: &VolumeScan, params: &ClusterParams) -> Result<PseudoMaskSet> {
    if params.granularity < 8 {
        return Err(Error::Parameter(format!(
            "granularity {} below 8 voxels",
            params.granularity
        )));
    }
    let dims = volume.dims();
    let (d, h, w) = dims;
    let total = d * h * w;

    let (mean, std) = crate::imageops::standardize(volume.voxels.iter().map(|&v| v as f64));
    let img = volume.voxels.mapv(|v| (v as f64 - mean) / std);

    let spacing = (params.granularity.min(total) as f64).cbrt();
    let cells = |n: usize| ((n as f64 / spacing).round() as usize).clamp(1, n);
    let (kz, ky, kx) = if params.granularity >= total {
        (1, 1, 1)
    } else {
        (cells(d), cells(h), cells(w))
    };
    let mut seeds = Vec::with_capacity(kz * ky * kx);
    for &z in &axis_seeds(d, kz) {
        for &y in &axis_seeds(h, ky) {
            for &x in &axis_seeds(w, kx) {
                seeds.push((z, y, x));
            }
        }
    }

    let blocked = |a: (usize, usize, usize), b: (usize, usize, usize)| {
        params.edge_weighting && (img[a] - img[b]).abs() > params.edge_threshold
    };

    const UNSET: i32 = -1;
    let mut assign = Array3::from_elem(dims, UNSET);
    let mut sums = vec![0.0; seeds.len()];
    let mut counts = vec![0usize; seeds.len()];
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    for (r, &s) in seeds.iter().enumerate() {
        heap.push(Entry {
            cost: 0.0,
            order,
            voxel: s,
            region: r,
        });
        order += 1;
    }
    while let Some(Entry { voxel, region, .. }) = heap.pop() {
        if assign[voxel] != UNSET {
            continue;
        }
        assign[voxel] = region as i32;
        sums[region] += img[voxel];
        counts[region] += 1;
        let rmean = sums[region] / counts[region] as f64;
        let seed = seeds[region];
        for n in neighbours(voxel, dims) {
            if assign[n] != UNSET || blocked(voxel, n) {
                continue;
            }
            let dz = n.0 as f64 - seed.0 as f64;
            let dy = n.1 as f64 - seed.1 as f64;
            let dx = n.2 as f64 - seed.2 as f64;
            let dist = (dz * dz + dy * dy + dx * dx).sqrt() / spacing;
            heap.push(Entry {
                cost: (img[n] - rmean).abs() + params.spatial_weight * dist,
                order,
                voxel: n,
                region,
            });
            order += 1;
        }
    }

    // unreachable voxels: one cluster per edge-respecting component
    let mut next = seeds.len() as i32;
    let mut seen = Array3::from_elem(dims, false);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = (z, y, x);
                if assign[p] != UNSET || seen[p] {
                    continue;
                }
                seen[p] = true;
                let mut q = VecDeque::from([p]);
                while let Some(v) = q.pop_front() {
                    assign[v] = next;
                    for n in neighbours(v, dims) {
                        if !seen[n] && assign[n] == UNSET && !blocked(v, n) {
                            seen[n] = true;
                            q.push_back(n);
                        }
                    }
                }
                next += 1;
            }
        }
    }

    merge_fragments(&mut assign, &img, next as usize, (params.granularity / 8).max(1));
    Ok(relabel(volume, assign))
}

/// Fold clusters smaller than `min_size` into the adjacent cluster with the
/// closest mean intensity. Merging two touching connected sets keeps the
/// result connected.
fn merge_fragments(assign: &mut Array3<i32>, img: &Array3<f64>, n: usize, min_size: usize) {
    let dims = assign.dim();
    let mut members: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); n];
    let mut sums = vec![0.0; n];
    for (idx, &c) in assign.indexed_iter() {
        members[c as usize].push(idx);
        sums[c as usize] += img[idx];
    }
    let mut live = members.iter().filter(|m| !m.is_empty()).count();
    let mut changed = true;
    while changed && live > 1 {
        changed = false;
        for small in 0..n {
            let size = members[small].len();
            if size == 0 || size >= min_size {
                continue;
            }
            let mean = |c: usize, m: &Vec<Vec<_>>| sums[c] / m[c].len() as f64;
            let own = mean(small, &members);
            let mut best: Option<(f64, i32)> = None;
            for &idx in &members[small] {
                for nb in neighbours(idx, dims) {
                    let o = assign[nb];
                    if o as usize == small {
                        continue;
                    }
                    let gap = (mean(o as usize, &members) - own).abs();
                    if best.is_none_or(|(g, id)| gap < g || (gap == g && o < id)) {
                        best = Some((gap, o));
                    }
                }
            }
            let Some((_, target)) = best else { continue };
            let moved = std::mem::take(&mut members[small]);
            for &idx in &moved {
                assign[idx] = target;
            }
            sums[target as usize] += sums[small];
            sums[small] = 0.0;
            members[target as usize].extend(moved);
            live -= 1;
            changed = true;
            if live <= 1 {
                break;
            }
        }
    }
}

/// Renumber cluster ids densely in raster order of first appearance.
fn relabel(volume: &VolumeScan, assign: Array3<i32>) -> PseudoMaskSet {
    let mut map = std::collections::HashMap::new();
    let clusters = assign.mapv(|c| {
        let next = map.len() as i32;
        *map.entry(c).or_insert(next)
    });
    PseudoMaskSet {
        volume_ref: volume.patient_id.clone(),
        num_clusters: map.len(),
        clusters,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::volume::{generate_synthetic_volume, SynthParams};

    fn uniform(d: usize, h: usize, w: usize) -> VolumeScan {
        VolumeScan::new(
            Array3::from_elem((d, h, w), 1.0),
            Array3::zeros((d, h, w)),
            "u",
            "test",
        )
        .unwrap()
    }

    #[test]
    fn uniform_volume_grid_count() {
        let v = uniform(16, 16, 16);
        let p = cluster_pseudo_masks(&v, &ClusterParams::with_granularity(512)).unwrap();
        assert!(p.num_clusters <= 16 && p.num_clusters >= 1, "{}", p.num_clusters);
        assert_eq!(p.sizes().iter().sum::<usize>(), 16 * 16 * 16);
        p.validate().unwrap();
    }

    #[test]
    fn granularity_covering_volume_gives_one_cluster() {
        let v = uniform(16, 16, 16);
        let p = cluster_pseudo_masks(&v, &ClusterParams::with_granularity(4096)).unwrap();
        assert_eq!(p.num_clusters, 1);
        let p = cluster_pseudo_masks(&v, &ClusterParams::with_granularity(1 << 20)).unwrap();
        assert_eq!(p.num_clusters, 1);
    }

    #[test]
    fn rejects_tiny_granularity() {
        assert!(cluster_pseudo_masks(&uniform(16, 16, 16), &ClusterParams::with_granularity(7)).is_err());
    }

    #[test]
    fn count_tracks_granularity() {
        let v = generate_synthetic_volume(2, &SynthParams::cube(32, 2), "p").unwrap();
        for g in [64usize, 256, 1000] {
            let p = cluster_pseudo_masks(&v, &ClusterParams::with_granularity(g)).unwrap();
            let target = (32 * 32 * 32) as f64 / g as f64;
            let n = p.num_clusters as f64;
            assert!(n >= target / 2.0 && n <= target * 2.0, "g={g}: {n} vs {target}");
            p.validate().unwrap();
        }
    }

    #[test]
    fn clusters_respect_intensity_edge() {
        let (d, h, w) = (16, 16, 16);
        let vox = Array3::from_shape_fn((d, h, w), |(_, _, x)| if x < 8 { 0.0 } else { 1.0 });
        let v = VolumeScan::new(vox.clone(), Array3::zeros((d, h, w)), "half", "test").unwrap();
        // granularity chosen so seed cells straddle the split
        for g in [300usize, 512, 1500] {
            let p = cluster_pseudo_masks(&v, &ClusterParams::with_granularity(g)).unwrap();
            p.validate().unwrap();
            let global = {
                let m = vox.mean().unwrap();
                vox.mapv(|x| (x - m) * (x - m)).mean().unwrap()
            };
            for c in 0..p.num_clusters as i32 {
                let vals: Vec<f32> = vox
                    .iter()
                    .zip(p.clusters.iter())
                    .filter(|(_, &k)| k == c)
                    .map(|(&x, _)| x)
                    .collect();
                let m = vals.iter().sum::<f32>() / vals.len() as f32;
                let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / vals.len() as f32;
                assert!(var < global, "cluster {c} straddles the edge (g={g})");
                assert_eq!(var, 0.0);
            }
        }
    }

    #[test]
    fn precomputed_disconnected_cluster_rejected() {
        let mut c = Array3::zeros((1, 1, 3));
        c[[0, 0, 1]] = 1;
        assert!(PseudoMaskSet::from_clusters("x", c).is_err());
    }
}
