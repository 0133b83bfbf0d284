//! Volumetric Dice evaluation over a fold's test patients.
//!
//! For each test class and query patient, the support comes from the next
//! test patient (cycling) that contains the class. The class's slice range in
//! both volumes is split into `chunks` equal parts; every query slice in chunk
//! `k` is segmented with the middle slice of the support's chunk `k`. Dice is
//! accumulated over the query's whole class range.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::episodes::{Episode, FoldSpec, SamplerConfig, SliceStack, VolumePool};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::model::Segmenter;

pub const PROTOCOL: &str = "1-way 1-shot; support from the next test patient containing the class; \
class slice range split into equal chunks, each query chunk uses the middle support slice of the \
matching chunk; volumetric Dice over the query class range; predictions binarised at 0.5";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub chunks: usize,
    pub threshold: f64,
    pub image_size: usize,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub class_names: BTreeMap<i32, String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            chunks: 3,
            threshold: 0.5,
            image_size: SamplerConfig::default().image_size,
            class_names: BTreeMap::new(),
        }
    }
}

impl EvalConfig {
    pub fn class_name(&self, id: i32) -> String {
        self.class_names
            .get(&id)
            .cloned()
            .unwrap_or_else(|| format!("class_{id}"))
    }
}

/// Running overlap counts for a Dice score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiceCounts {
    pub intersection: u64,
    pub predicted: u64,
    pub truth: u64,
}

impl DiceCounts {
    pub fn add<'a>(&mut self, pred: impl IntoIterator<Item = &'a bool>, gt: impl IntoIterator<Item = &'a bool>) {
        for (&p, &g) in pred.into_iter().zip(gt) {
            self.intersection += (p && g) as u64;
            self.predicted += p as u64;
            self.truth += g as u64;
        }
    }

    pub fn merge(&mut self, other: DiceCounts) {
        self.intersection += other.intersection;
        self.predicted += other.predicted;
        self.truth += other.truth;
    }

    pub fn both_empty(&self) -> bool {
        self.predicted == 0 && self.truth == 0
    }

    /// Dice in percent; 100 when both sets are empty.
    pub fn score(&self) -> f64 {
        if self.both_empty() {
            100.0
        } else {
            100.0 * 2.0 * self.intersection as f64 / (self.predicted + self.truth) as f64
        }
    }
}

/// Volumetric Dice in percent between two binary volumes.
pub fn dice_score(pred: &Array3<bool>, gt: &Array3<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Input("prediction and ground truth differ in shape".into()));
    }
    let mut c = DiceCounts::default();
    c.add(pred.iter(), gt.iter());
    Ok(c.score())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub class: String,
    pub query_patient: String,
    pub support_patient: String,
    pub dice: f64,
    /// Both prediction and ground truth were empty; the score is the 100 convention.
    pub both_empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: u8,
    pub fold: usize,
    pub per_class: BTreeMap<String, f64>,
    pub mean: f64,
    pub cases: Vec<CaseResult>,
    pub skipped: Vec<String>,
    pub fingerprint: String,
    pub protocol: String,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# protocol: {}", self.protocol);
        let _ = writeln!(s, "# setting {} fold {} config {}", self.setting, self.fold, self.fingerprint);
        let _ = writeln!(s, "{:<20} {:>8}", "class", "dice(%)");
        for (name, d) in &self.per_class {
            let _ = writeln!(s, "{name:<20} {d:>8.2}");
        }
        let _ = writeln!(s, "{:<20} {:>8.2}", "mean", self.mean);
        for sk in &self.skipped {
            let _ = writeln!(s, "# skipped: {sk}");
        }
        for c in self.cases.iter().filter(|c| c.both_empty) {
            let _ = writeln!(s, "# empty prediction and truth: {} {}", c.class, c.query_patient);
        }
        s
    }
}

/// Fold reports with their means and the mean over folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub folds: Vec<EvalReport>,
    pub fold_means: Vec<f64>,
    pub grand_mean: f64,
}

pub fn aggregate(folds: Vec<EvalReport>) -> CrossValReport {
    let fold_means: Vec<f64> = folds.iter().map(|r| r.mean).collect();
    let grand_mean = mean(&fold_means);
    CrossValReport {
        folds,
        fold_means,
        grand_mean,
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Stable 64-bit FNV-1a hash of a config's JSON form, as hex.
pub fn fingerprint<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn class_slices(st: &SliceStack, class: i32) -> Vec<usize> {
    (0..st.depth())
        .filter(|&z| st.labels[z].iter().any(|&l| l == class))
        .collect()
}

/// Chunk index of `z` within `lo..=hi` split into `chunks` parts.
pub fn chunk_of(z: usize, lo: usize, hi: usize, chunks: usize) -> usize {
    let len = hi - lo + 1;
    ((z - lo) * chunks / len).min(chunks - 1)
}

/// Middle slice of chunk `k` of `lo..=hi`.
pub fn chunk_middle(k: usize, lo: usize, hi: usize, chunks: usize) -> usize {
    let len = hi - lo + 1;
    let start = lo + k * len / chunks;
    let end = (lo + (k + 1) * len / chunks).saturating_sub(1).clamp(start, hi);
    (start + end) / 2
}

/// Evaluate `seg` on a fold's test patients.
pub fn evaluate(
    seg: &dyn Segmenter,
    pool: &dyn VolumePool,
    fold: &FoldSpec,
    cfg: &EvalConfig,
    exec: Exec,
) -> Result<EvalReport> {
    if cfg.chunks == 0 {
        return Err(Error::Parameter("chunks must be positive".into()));
    }
    if fold.test_patients.len() < 2 {
        return Err(Error::Parameter(
            "evaluation needs at least two test patients (support and query differ)".into(),
        ));
    }
    let mut stacks = Vec::with_capacity(fold.test_patients.len());
    for id in &fold.test_patients {
        let data = pool
            .patient(id)
            .ok_or_else(|| Error::Input(format!("patient `{id}` not in pool")))?;
        stacks.push(SliceStack::new(data, cfg.image_size));
    }
    let n = stacks.len();
    let mut per_class = BTreeMap::new();
    let mut cases = Vec::new();
    let mut skipped = Vec::new();
    for &class in &fold.test_classes {
        let name = cfg.class_name(class);
        let ranges: Vec<Vec<usize>> = stacks.iter().map(|st| class_slices(st, class)).collect();
        let mut scores = Vec::new();
        for qi in 0..n {
            let qs = &stacks[qi];
            if ranges[qi].is_empty() {
                skipped.push(format!("{name}: absent from query patient {}", qs.patient));
                continue;
            }
            let Some(si) = (1..n).map(|k| (qi + k) % n).find(|&i| !ranges[i].is_empty()) else {
                skipped.push(format!("{name}: no support patient for {}", qs.patient));
                continue;
            };
            let ss = &stacks[si];
            let (qlo, qhi) = (ranges[qi][0], *ranges[qi].last().expect("non-empty"));
            let (slo, shi) = (ranges[si][0], *ranges[si].last().expect("non-empty"));
            let support_slice = |k: usize| {
                let mid = chunk_middle(k, slo, shi, cfg.chunks);
                // nearest slice that actually contains the class
                *ranges[si]
                    .iter()
                    .min_by_key(|&&z| (z as i64 - mid as i64).abs())
                    .expect("non-empty")
            };
            let zs: Vec<usize> = (qlo..=qhi).collect();
            let counts = exec::map(exec, &zs, |&z| -> Result<DiceCounts> {
                let sz = support_slice(chunk_of(z, qlo, qhi, cfg.chunks));
                let ep = Episode {
                    support_image: ss.images[sz].clone(),
                    support_mask: ss.class_mask(sz, class),
                    query_image: qs.images[z].clone(),
                    query_mask: qs.class_mask(z, class),
                    class_id: class,
                    support_patient: ss.patient.clone(),
                    query_patient: qs.patient.clone(),
                    support_slice: sz,
                    query_slice: z,
                };
                let prob = seg.segment(&ep)?;
                if prob.dim() != ep.query_mask.dim() {
                    return Err(Error::Input("segmenter output has the wrong shape".into()));
                }
                let pred: Array2<bool> = prob.mapv(|p| p > cfg.threshold);
                let mut c = DiceCounts::default();
                c.add(pred.iter(), ep.query_mask.iter());
                Ok(c)
            });
            let mut total = DiceCounts::default();
            for c in counts {
                total.merge(c?);
            }
            let dice = total.score();
            scores.push(dice);
            cases.push(CaseResult {
                class: name.clone(),
                query_patient: qs.patient.clone(),
                support_patient: ss.patient.clone(),
                dice,
                both_empty: total.both_empty(),
            });
        }
        if !scores.is_empty() {
            per_class.insert(name, mean(&scores));
        }
    }
    let class_scores: Vec<f64> = per_class.values().copied().collect();
    Ok(EvalReport {
        setting: fold.setting.into(),
        fold: fold.fold_index,
        mean: mean(&class_scores),
        per_class,
        cases,
        skipped,
        fingerprint: fingerprint(cfg),
        protocol: format!("{PROTOCOL}; chunks={}", cfg.chunks),
    })
}
