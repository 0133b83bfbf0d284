//! Patient pools, cross-validation folds and 1-way 1-shot episode sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use ndarray::{s, Array2, Array3};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::supervoxel::{cluster_pseudo_masks, ClusterParams, PseudoMaskSet};
use super::volume::VolumeScan;
use crate::error::{Error, Result};
use crate::imageops;

#[derive(Clone, Debug)]
pub struct PatientData {
    pub scan: VolumeScan,
    pub pseudo: Option<PseudoMaskSet>,
}

/// Read access to a set of patient volumes.
pub trait VolumePool: Sync {
    fn patient_ids(&self) -> Vec<String>;
    fn patient(&self, id: &str) -> Option<&PatientData>;
}

#[derive(Clone, Debug, Default)]
pub struct InMemoryPool {
    patients: BTreeMap<String, PatientData>,
}

impl InMemoryPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, data: PatientData) {
        self.patients.insert(data.scan.patient_id.clone(), data);
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }
}

impl VolumePool for InMemoryPool {
    fn patient_ids(&self) -> Vec<String> {
        self.patients.keys().cloned().collect()
    }

    fn patient(&self, id: &str) -> Option<&PatientData> {
        self.patients.get(id)
    }
}

/// Pool wrapper that records every patient id read through it.
pub struct AccessLog<'a, P: VolumePool> {
    inner: &'a P,
    log: Mutex<Vec<String>>,
}

impl<'a, P: VolumePool> AccessLog<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        AccessLog {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn accessed(&self) -> BTreeSet<String> {
        self.log.lock().expect("log poisoned").iter().cloned().collect()
    }
}

impl<P: VolumePool> VolumePool for AccessLog<'_, P> {
    fn patient_ids(&self) -> Vec<String> {
        self.inner.patient_ids()
    }

    fn patient(&self, id: &str) -> Option<&PatientData> {
        self.log.lock().expect("log poisoned").push(id.to_string());
        self.inner.patient(id)
    }
}

/// Supervision setting: test classes may appear in training backgrounds
/// (`One`) or every training slice containing them is removed (`Two`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Setting {
    One,
    Two,
}

impl TryFrom<u8> for Setting {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Setting::One),
            2 => Ok(Setting::Two),
            _ => Err(format!("setting must be 1 or 2, got {v}")),
        }
    }
}

impl From<Setting> for u8 {
    fn from(s: Setting) -> u8 {
        match s {
            Setting::One => 1,
            Setting::Two => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold_index: usize,
    pub train_patients: Vec<String>,
    pub test_patients: Vec<String>,
    pub setting: Setting,
    pub test_classes: BTreeSet<i32>,
}

pub const NUM_FOLDS: usize = 5;

/// Split patients into five contiguous test blocks; the first
/// `len % 5` folds take one extra patient.
pub fn make_folds(
    patients: &[String],
    setting: Setting,
    test_classes: &BTreeSet<i32>,
) -> Result<Vec<FoldSpec>> {
    if patients.len() < NUM_FOLDS {
        return Err(Error::Parameter(format!(
            "need at least {NUM_FOLDS} patients for cross-validation, got {}",
            patients.len()
        )));
    }
    let base = patients.len() / NUM_FOLDS;
    let extra = patients.len() % NUM_FOLDS;
    let mut start = 0;
    let mut folds = Vec::with_capacity(NUM_FOLDS);
    for k in 0..NUM_FOLDS {
        let size = base + usize::from(k < extra);
        let test: Vec<String> = patients[start..start + size].to_vec();
        let train: Vec<String> = patients[..start]
            .iter()
            .chain(&patients[start + size..])
            .cloned()
            .collect();
        folds.push(FoldSpec {
            fold_index: k,
            train_patients: train,
            test_patients: test,
            setting,
            test_classes: test_classes.clone(),
        });
        start += size;
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support_image: Array2<f64>,
    pub support_mask: Array2<bool>,
    pub query_image: Array2<f64>,
    pub query_mask: Array2<bool>,
    pub class_id: i32,
    pub support_patient: String,
    pub query_patient: String,
    pub support_slice: usize,
    pub query_slice: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Axial slices of one patient, standardised per volume and resized to a
/// square working size.
#[derive(Clone, Debug)]
pub struct SliceStack {
    pub patient: String,
    pub images: Vec<Array2<f64>>,
    pub labels: Vec<Array2<i32>>,
    pub clusters: Option<Vec<Array2<i32>>>,
}

fn axial<T: Copy>(vol: &Array3<T>, z: usize) -> Array2<T> {
    vol.slice(s![z, .., ..]).to_owned()
}

impl SliceStack {
    pub fn new(data: &PatientData, size: usize) -> Self {
        let scan = &data.scan;
        let (mean, std) = imageops::standardize(scan.voxels.iter().map(|&v| v as f64));
        let d = scan.dims().0;
        let images = (0..d)
            .map(|z| {
                let img = axial(&scan.voxels, z).mapv(|v| (v as f64 - mean) / std);
                imageops::resize_bilinear(&img, size, size)
            })
            .collect();
        let labels = (0..d)
            .map(|z| imageops::resize_nearest(&axial(&scan.labels, z), size, size))
            .collect();
        let clusters = data.pseudo.as_ref().map(|p| {
            (0..d)
                .map(|z| imageops::resize_nearest(&axial(&p.clusters, z), size, size))
                .collect()
        });
        SliceStack {
            patient: scan.patient_id.clone(),
            images,
            labels,
            clusters,
        }
    }

    pub fn depth(&self) -> usize {
        self.images.len()
    }

    pub fn class_mask(&self, z: usize, class: i32) -> Array2<bool> {
        self.labels[z].mapv(|l| l == class)
    }

    pub fn slice_has_any(&self, z: usize, classes: &BTreeSet<i32>) -> bool {
        self.labels[z].iter().any(|l| classes.contains(l))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub image_size: usize,
    /// Minimum foreground pixels of a support slice.
    pub min_foreground: usize,
    /// Used when a patient has no precomputed pseudo-masks.
    pub clustering: ClusterParams,
    /// Share of a pseudo-class's outer border that must be an intensity edge
    /// (by the clustering's `edge_threshold`) for it to be trained on. Pieces
    /// of a uniform region cannot be told apart by appearance; 0 disables.
    pub min_edge_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            image_size: 128,
            min_foreground: 100,
            clustering: ClusterParams::default(),
            min_edge_fraction: 0.5,
        }
    }
}

/// Mix a base seed with a draw index (splitmix64 finaliser).
pub fn draw_seed(seed: u64, draw: u64) -> u64 {
    let mut z = seed ^ draw.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Border {
    count: usize,
    /// 4-neighbour pairs leaving the cluster.
    pairs: usize,
    /// Those pairs whose outside pixel differs from the cluster mean by more
    /// than the edge threshold.
    edges: usize,
}

fn border_stats(image: &Array2<f64>, clusters: &Array2<i32>, threshold: f64) -> BTreeMap<i32, Border> {
    let mut sums: BTreeMap<i32, (usize, f64)> = BTreeMap::new();
    for (&c, &v) in clusters.iter().zip(image) {
        let e = sums.entry(c).or_default();
        e.0 += 1;
        e.1 += v;
    }
    let mut out: BTreeMap<i32, Border> = sums
        .iter()
        .map(|(&c, &(n, _))| (c, Border { count: n, ..Default::default() }))
        .collect();
    let (h, w) = clusters.dim();
    for ((r, col), &c) in clusters.indexed_iter() {
        let mean = sums[&c].1 / sums[&c].0 as f64;
        let b = out.get_mut(&c).expect("cluster counted");
        for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (r as i64 + dr, col as i64 + dc);
            if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                continue;
            }
            let q = (nr as usize, nc as usize);
            if clusters[q] != c {
                b.pairs += 1;
                if (image[q] - mean).abs() > threshold {
                    b.edges += 1;
                }
            }
        }
    }
    out
}

/// Per stack: (support-eligible slices, slices with any foreground).
type ClassSlices = Vec<(Vec<usize>, Vec<usize>)>;

/// Draw-indexed episode source. Building it prepares slices and the
/// candidate index; [`EpisodeSampler::sample`] is then a pure function of
/// the draw index.
pub struct EpisodeSampler {
    mode: Mode,
    seed: u64,
    stacks: Vec<SliceStack>,
    /// Train: (stack, cluster id) -> slices with enough foreground.
    train_index: Vec<(usize, i32, Vec<usize>)>,
    /// Eval: class -> slices per stack.
    eval_index: BTreeMap<i32, ClassSlices>,
}

impl EpisodeSampler {
    pub fn new(
        pool: &dyn VolumePool,
        fold: &FoldSpec,
        seed: u64,
        mode: Mode,
        cfg: &SamplerConfig,
    ) -> Result<Self> {
        let patients = match mode {
            Mode::Train => &fold.train_patients,
            Mode::Eval => &fold.test_patients,
        };
        if patients.is_empty() {
            return Err(Error::Parameter("empty patient pool".into()));
        }
        let mut stacks = Vec::with_capacity(patients.len());
        for id in patients {
            let data = pool
                .patient(id)
                .ok_or_else(|| Error::Input(format!("patient `{id}` not in pool")))?;
            let stack = if mode == Mode::Train && data.pseudo.is_none() {
                let pseudo = cluster_pseudo_masks(&data.scan, &cfg.clustering)?;
                SliceStack::new(
                    &PatientData {
                        scan: data.scan.clone(),
                        pseudo: Some(pseudo),
                    },
                    cfg.image_size,
                )
            } else {
                SliceStack::new(data, cfg.image_size)
            };
            stacks.push(stack);
        }

        let mut train_index = Vec::new();
        let mut eval_index = BTreeMap::new();
        match mode {
            Mode::Train => {
                for (si, st) in stacks.iter().enumerate() {
                    let clusters = st.clusters.as_ref().expect("train stacks carry clusters");
                    let mut by_cluster: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
                    for (z, slice_clusters) in clusters.iter().enumerate().take(st.depth()) {
                        if fold.setting == Setting::Two && st.slice_has_any(z, &fold.test_classes) {
                            continue;
                        }
                        let borders = border_stats(&st.images[z], slice_clusters, cfg.clustering.edge_threshold);
                        let total = cfg.image_size * cfg.image_size;
                        for (c, b) in borders {
                            // a cluster covering the whole slice gives no contrast
                            let contrast = b.pairs > 0
                                && b.edges as f64 >= cfg.min_edge_fraction * b.pairs as f64;
                            if b.count >= cfg.min_foreground && b.count < total && contrast {
                                by_cluster.entry(c).or_default().push(z);
                            }
                        }
                    }
                    for (c, zs) in by_cluster {
                        if zs.len() >= 2 {
                            train_index.push((si, c, zs));
                        }
                    }
                }
                if train_index.is_empty() {
                    return Err(Error::Exhausted {
                        class: "any pseudo-class".into(),
                    });
                }
            }
            Mode::Eval => {
                for &class in &fold.test_classes {
                    let per_stack: Vec<(Vec<usize>, Vec<usize>)> = stacks
                        .iter()
                        .map(|st| {
                            let mut support = Vec::new();
                            let mut any = Vec::new();
                            for z in 0..st.depth() {
                                let n = st.labels[z].iter().filter(|&&l| l == class).count();
                                if n > 0 {
                                    any.push(z);
                                }
                                if n >= cfg.min_foreground {
                                    support.push(z);
                                }
                            }
                            (support, any)
                        })
                        .collect();
                    eval_index.insert(class, per_stack);
                }
            }
        }
        Ok(EpisodeSampler {
            mode,
            seed,
            stacks,
            train_index,
            eval_index,
        })
    }

    pub fn stacks(&self) -> &[SliceStack] {
        &self.stacks
    }

    pub fn sample(&self, draw: u64) -> Result<Episode> {
        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(self.seed, draw));
        match self.mode {
            Mode::Train => {
                let (si, cluster, zs) = self
                    .train_index
                    .choose(&mut rng)
                    .expect("non-empty index checked at construction");
                let a = rng.random_range(0..zs.len());
                let mut b = rng.random_range(0..zs.len() - 1);
                if b >= a {
                    b += 1;
                }
                let st = &self.stacks[*si];
                let clusters = st.clusters.as_ref().expect("train stacks carry clusters");
                let mask = |z: usize| clusters[z].mapv(|c| c == *cluster);
                Ok(Episode {
                    support_image: st.images[zs[a]].clone(),
                    support_mask: mask(zs[a]),
                    query_image: st.images[zs[b]].clone(),
                    query_mask: mask(zs[b]),
                    class_id: *cluster,
                    support_patient: st.patient.clone(),
                    query_patient: st.patient.clone(),
                    support_slice: zs[a],
                    query_slice: zs[b],
                })
            }
            Mode::Eval => {
                let classes: Vec<i32> = self.eval_index.keys().copied().collect();
                let class = *classes
                    .choose(&mut rng)
                    .ok_or_else(|| Error::Parameter("fold has no test classes".into()))?;
                let per_stack = &self.eval_index[&class];
                let supports: Vec<usize> =
                    (0..per_stack.len()).filter(|&i| !per_stack[i].0.is_empty()).collect();
                let sp = *supports.choose(&mut rng).ok_or(Error::Exhausted {
                    class: class.to_string(),
                })?;
                let queries: Vec<usize> = (0..per_stack.len())
                    .filter(|&i| i != sp && !per_stack[i].1.is_empty())
                    .collect();
                let qp = *queries.choose(&mut rng).ok_or(Error::Exhausted {
                    class: class.to_string(),
                })?;
                let sz = *per_stack[sp].0.choose(&mut rng).expect("non-empty");
                let qz = *per_stack[qp].1.choose(&mut rng).expect("non-empty");
                let (ss, qs) = (&self.stacks[sp], &self.stacks[qp]);
                Ok(Episode {
                    support_image: ss.images[sz].clone(),
                    support_mask: ss.class_mask(sz, class),
                    query_image: qs.images[qz].clone(),
                    query_mask: qs.class_mask(qz, class),
                    class_id: class,
                    support_patient: ss.patient.clone(),
                    query_patient: qs.patient.clone(),
                    support_slice: sz,
                    query_slice: qz,
                })
            }
        }
    }
}

/// One-off episode draw. Prefer [`EpisodeSampler`] for streams.
pub fn sample_episode(
    pool: &dyn VolumePool,
    fold: &FoldSpec,
    seed: u64,
    mode: Mode,
    draw: u64,
    cfg: &SamplerConfig,
) -> Result<Episode> {
    EpisodeSampler::new(pool, fold, seed, mode, cfg)?.sample(draw)
}
