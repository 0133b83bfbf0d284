//! Volumes and the synthetic bias-controlled volume generator.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labelled 3-D scan. Axis order is (depth, height, width); axial slices
/// run along the first axis.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeScan {
    pub voxels: Array3<f32>,
    pub labels: Array3<i32>,
    pub patient_id: String,
    pub modality_tag: String,
}

impl VolumeScan {
    pub fn new(
        voxels: Array3<f32>,
        labels: Array3<i32>,
        patient_id: impl Into<String>,
        modality_tag: impl Into<String>,
    ) -> Result<Self> {
        let v = VolumeScan {
            voxels,
            labels,
            patient_id: patient_id.into(),
            modality_tag: modality_tag.into(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    /// Largest label value present.
    pub fn num_classes(&self) -> i32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.voxels.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::Input(format!("empty volume {:?}", self.voxels.dim())));
        }
        if self.labels.dim() != self.voxels.dim() {
            return Err(Error::Input(format!(
                "voxel dims {:?} differ from label dims {:?}",
                self.voxels.dim(),
                self.labels.dim()
            )));
        }
        let k = self.num_classes();
        if k < 0 || self.labels.iter().any(|&l| l < 0) {
            return Err(Error::Input("negative label".into()));
        }
        let mut seen = vec![false; k as usize + 1];
        for &l in self.labels.iter() {
            seen[l as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Input(format!(
                "label set is not contiguous: {missing} missing below {k}"
            )));
        }
        Ok(())
    }
}

/// Hook for real datasets: map an external file to a [`VolumeScan`].
///
/// The built-in [`crate::episodes::rfv::RfvAdapter`] reads the native volume
/// format; converters for medical formats implement this trait and hand the
/// resulting volumes to the same pool and sampler.
pub trait VolumeAdapter {
    fn load(&self, path: &Path, patient_id: &str) -> Result<VolumeScan>;
}

/// Shape and bias controls for [`generate_synthetic_volume`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    /// Probability that an organ carries lesion sub-blobs.
    pub lesion_prob: f64,
    /// Lesion radius relative to the organ radii.
    pub lesion_size: f64,
    /// Lesion intensity offset over the organ mean.
    pub lesion_contrast: f64,
    /// Std of the per-patient, per-organ intensity shift.
    pub intensity_shift: f64,
    /// Amplitude of the radial contour deformation, relative to the radius.
    pub contour_jitter: f64,
    pub noise: f64,
    /// Unlabelled background structures.
    pub distractors: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            depth: 32,
            height: 128,
            width: 128,
            n_classes: 2,
            lesion_prob: 0.0,
            lesion_size: 0.3,
            lesion_contrast: 0.9,
            intensity_shift: 0.0,
            contour_jitter: 0.0,
            noise: 0.04,
            distractors: 3,
        }
    }
}

impl SynthParams {
    pub fn cube(side: usize, n_classes: usize) -> Self {
        SynthParams {
            depth: side,
            height: side,
            width: side,
            n_classes,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.depth < 16 || self.height < 16 || self.width < 16 {
            return bad(format!(
                "volume dims must be >= 16, got {}x{}x{}",
                self.depth, self.height, self.width
            ));
        }
        if !(1..=ORGANS.len()).contains(&self.n_classes) {
            return bad(format!("n_classes must be in 1..={}", ORGANS.len()));
        }
        if !(0.0..=1.0).contains(&self.lesion_prob) {
            return bad(format!("lesion_prob {} outside [0, 1]", self.lesion_prob));
        }
        if !(0.05..=0.5).contains(&self.lesion_size) {
            return bad(format!("lesion_size {} outside [0.05, 0.5]", self.lesion_size));
        }
        if !(0.0..=0.5).contains(&self.contour_jitter) {
            return bad(format!("contour_jitter {} outside [0, 0.5]", self.contour_jitter));
        }
        for (name, v) in [
            ("intensity_shift", self.intensity_shift),
            ("noise", self.noise),
            ("lesion_contrast", self.lesion_contrast),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Canonical organ layout: in-plane centre (y, x) as fractions of the slice,
/// and mean intensity.
const ORGANS: [((f64, f64), f64); 4] = [
    ((0.3, 0.3), 0.9),
    ((0.3, 0.7), 0.6),
    ((0.7, 0.3), 1.2),
    ((0.7, 0.7), 0.75),
];
const BODY_INTENSITY: f64 = 0.2;
const ORGAN_RADIUS: f64 = 0.12;

/// Star-shaped deformed ellipsoid in normalised coordinates.
struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    angle: f64,
    harmonics: [(f64, f64); 3],
    tilt: (f64, f64),
    jitter: f64,
}

impl Blob {
    fn local(&self, p: [f64; 3]) -> [f64; 3] {
        let dz = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let dx = p[2] - self.center[2];
        let (s, c) = self.angle.sin_cos();
        let ry = c * dy - s * dx;
        let rx = s * dy + c * dx;
        [dz / self.radii[0], ry / self.radii[1], rx / self.radii[2]]
    }

    fn boundary(&self, u: [f64; 3]) -> f64 {
        if self.jitter == 0.0 {
            return 1.0;
        }
        let theta = u[1].atan2(u[2]);
        let psi = u[0].atan2((u[1] * u[1] + u[2] * u[2]).sqrt());
        let mut n = 0.0;
        let mut norm = 0.0;
        for (m, &(a, phase)) in self.harmonics.iter().enumerate() {
            n += a * ((m as f64 + 2.0) * theta + phase).cos();
            norm += a.abs();
        }
        n += self.tilt.0 * (2.0 * psi + self.tilt.1).sin();
        norm += self.tilt.0.abs();
        1.0 + self.jitter * n / norm.max(1e-12)
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let u = self.local(p);
        let rho = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        rho <= self.boundary(u)
    }

    fn random(
        rng: &mut impl Rng,
        center: [f64; 3],
        radii: [f64; 3],
        jitter: f64,
    ) -> Blob {
        let mut harmonics = [(0.0, 0.0); 3];
        for h in harmonics.iter_mut() {
            *h = (rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0 * PI));
        }
        Blob {
            center,
            radii,
            angle: rng.random_range(-0.4..0.4),
            harmonics,
            tilt: (rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0 * PI)),
            jitter,
        }
    }
}

/// Generate one synthetic patient volume. Deterministic in `seed`.
///
/// Each class is a deformed ellipsoid at a class-specific position and
/// intensity, perturbed per patient in scale, rotation, position, contour and
/// intensity. Lesions are bright ellipsoidal sub-blobs inside an organ that
/// keep the organ's label.
pub fn generate_synthetic_volume(
    seed: u64,
    params: &SynthParams,
    patient_id: &str,
) -> Result<VolumeScan> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h, w) = (params.depth, params.height, params.width);
    let (df, hf, wf) = (d as f64, h as f64, w as f64);

    let mut intensity = Array3::<f64>::zeros((d, h, w));
    let mut labels = Array3::<i32>::zeros((d, h, w));

    // body cross-section, constant along depth
    let body_shift = rng.random_range(-0.03..0.03);
    for ((_, y, x), v) in intensity.indexed_iter_mut() {
        let ny = (y as f64 + 0.5) / hf - 0.5;
        let nx = (x as f64 + 0.5) / wf - 0.5;
        if (ny / 0.46).powi(2) + (nx / 0.46).powi(2) <= 1.0 {
            *v = BODY_INTENSITY + body_shift;
        }
    }

    for _ in 0..params.distractors {
        let r = rng.random_range(0.05..0.09);
        let center = [
            rng.random_range(0.15..0.85) * df,
            rng.random_range(0.2..0.8) * hf,
            rng.random_range(0.2..0.8) * wf,
        ];
        let radii = [rng.random_range(0.15..0.3) * df, r * hf, r * wf];
        let blob = Blob::random(&mut rng, center, radii, 0.2);
        let level = rng.random_range(0.3..0.45);
        paint(&blob, d, h, w, |z, y, x| intensity[[z, y, x]] = level);
    }

    let k = params.n_classes;
    let z_radius = (0.6 / (k as f64 + 1.0)).min(0.35);
    let shift = Normal::new(0.0, params.intensity_shift.max(1e-12)).expect("valid std");
    for (idx, &((cy, cx), base)) in ORGANS.iter().take(k).enumerate() {
        let class = idx as i32 + 1;
        let cz = (idx as f64 + 1.0) / (k as f64 + 1.0);
        let center = [
            (cz + rng.random_range(-0.03..0.03)) * df,
            (cy + rng.random_range(-0.03..0.03)) * hf,
            (cx + rng.random_range(-0.03..0.03)) * wf,
        ];
        let radii = [
            z_radius * df * rng.random_range(0.85..1.15),
            ORGAN_RADIUS * hf * rng.random_range(0.85..1.15),
            ORGAN_RADIUS * wf * rng.random_range(0.85..1.15),
        ];
        let organ = Blob::random(&mut rng, center, radii, params.contour_jitter);
        let mean = base
            + if params.intensity_shift > 0.0 {
                shift.sample(&mut rng)
            } else {
                0.0
            };
        paint(&organ, d, h, w, |z, y, x| {
            intensity[[z, y, x]] = mean;
            labels[[z, y, x]] = class;
        });

        if rng.random::<f64>() < params.lesion_prob {
            let n_lesions = if rng.random::<f64>() < 0.5 { 1 } else { 2 };
            for _ in 0..n_lesions {
                // direction and depth inside the organ, in normalised coordinates
                let dir = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0f64),
                ];
                let len = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-9);
                let depth = rng.random_range(0.0..0.3);
                let offset = [dir[0] / len * depth, dir[1] / len * depth, dir[2] / len * depth];
                let size = params.lesion_size;
                paint(&organ, d, h, w, |z, y, x| {
                    let u = organ.local([z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5]);
                    let q = [(u[0] - offset[0]), (u[1] - offset[1]), (u[2] - offset[2])];
                    if (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt() <= size {
                        intensity[[z, y, x]] = mean + params.lesion_contrast;
                    }
                });
            }
        }
    }

    // low-frequency texture plus white noise
    let phase: [f64; 3] = [
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
    ];
    let noise = Normal::new(0.0, params.noise.max(1e-12)).expect("valid std");
    let voxels = Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        let base = intensity[[z, y, x]];
        let tex = 0.02
            * ((2.0 * PI * 2.0 * y as f64 / hf + phase[0]).sin()
                + (2.0 * PI * 3.0 * x as f64 / wf + phase[1]).sin()
                + (2.0 * PI * z as f64 / df + phase[2]).sin());
        let n = if params.noise > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        (base + tex + n) as f32
    });

    VolumeScan::new(voxels, labels, patient_id, "synthetic")
}

/// Visit every voxel whose centre lies inside `blob`, scanning its bounding box.
fn paint(blob: &Blob, d: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    let reach = 1.0 + blob.jitter;
    let span = |c: f64, r: f64, n: usize| {
        let lo = ((c - r * reach).floor().max(0.0)) as usize;
        let hi = ((c + r * reach).ceil().max(0.0) as usize).min(n);
        lo..hi
    };
    // rotation mixes y and x, so use the larger in-plane radius for both
    let rp = blob.radii[1].max(blob.radii[2]);
    for z in span(blob.center[0], blob.radii[0], d) {
        for y in span(blob.center[1], rp, h) {
            for x in span(blob.center[2], rp, w) {
                if blob.contains([z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5]) {
                    f(z, y, x);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    /// Number of 6-connected components of voxels with label `class`.
    fn components(labels: &Array3<i32>, class: i32) -> usize {
        let (d, h, w) = labels.dim();
        let mut seen = Array3::from_elem((d, h, w), false);
        let mut count = 0;
        for ((z, y, x), &l) in labels.indexed_iter() {
            if l != class || seen[[z, y, x]] {
                continue;
            }
            count += 1;
            let mut q = VecDeque::from([(z, y, x)]);
            seen[[z, y, x]] = true;
            while let Some((z, y, x)) = q.pop_front() {
                let nb = [
                    (z.wrapping_sub(1), y, x),
                    (z + 1, y, x),
                    (z, y.wrapping_sub(1), x),
                    (z, y + 1, x),
                    (z, y, x.wrapping_sub(1)),
                    (z, y, x + 1),
                ];
                for (a, b, c) in nb {
                    if a < d && b < h && c < w && !seen[[a, b, c]] && labels[[a, b, c]] == class {
                        seen[[a, b, c]] = true;
                        q.push_back((a, b, c));
                    }
                }
            }
        }
        count
    }

    #[test]
    fn deterministic_and_connected() {
        let p = SynthParams::cube(32, 2);
        let a = generate_synthetic_volume(7, &p, "p0").unwrap();
        let b = generate_synthetic_volume(7, &p, "p0").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_classes(), 2);
        for class in 1..=2 {
            assert_eq!(components(&a.labels, class), 1, "class {class}");
        }
    }

    #[test]
    fn seed_changes_geometry() {
        let p = SynthParams::cube(32, 2);
        let a = generate_synthetic_volume(7, &p, "p").unwrap();
        let b = generate_synthetic_volume(8, &p, "p").unwrap();
        assert_ne!(a.labels, b.labels);
    }

    #[test]
    fn jittered_organs_stay_connected() {
        let p = SynthParams {
            contour_jitter: 0.5,
            intensity_shift: 0.1,
            lesion_prob: 1.0,
            ..SynthParams::cube(32, 4)
        };
        for seed in 0..5 {
            let v = generate_synthetic_volume(seed, &p, "p").unwrap();
            for class in 1..=4 {
                assert_eq!(components(&v.labels, class), 1, "seed {seed} class {class}");
            }
        }
    }

    #[test]
    fn every_lesioned_object_has_outliers() {
        let p = SynthParams {
            lesion_prob: 1.0,
            ..SynthParams::cube(32, 3)
        };
        for seed in 0..5 {
            let v = generate_synthetic_volume(seed, &p, "p").unwrap();
            for class in 1..=3 {
                let vals: Vec<f64> = v
                    .voxels
                    .iter()
                    .zip(v.labels.iter())
                    .filter(|(_, &l)| l == class)
                    .map(|(&x, _)| x as f64)
                    .collect();
                let n = vals.len() as f64;
                let mu = vals.iter().sum::<f64>() / n;
                let sd = (vals.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
                let outliers = vals.iter().filter(|&&x| x > mu + 3.0 * sd).count();
                assert!(outliers >= 1, "seed {seed} class {class}: no outliers");
            }
        }
        // and none without lesions
        let clean = generate_synthetic_volume(0, &SynthParams::cube(32, 3), "p").unwrap();
        for class in 1..=3 {
            let vals: Vec<f64> = clean
                .voxels
                .iter()
                .zip(clean.labels.iter())
                .filter(|(_, &l)| l == class)
                .map(|(&x, _)| x as f64)
                .collect();
            let n = vals.len() as f64;
            let mu = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
            assert!(vals.iter().filter(|&&x| x > mu + 3.0 * sd).count() < 10);
        }
    }

    #[test]
    fn parameter_validation() {
        let bad = [
            SynthParams::cube(8, 2),
            SynthParams {
                lesion_prob: 1.5,
                ..SynthParams::cube(16, 1)
            },
            SynthParams {
                n_classes: 0,
                ..SynthParams::cube(16, 1)
            },
            SynthParams {
                contour_jitter: -0.1,
                ..SynthParams::cube(16, 1)
            },
        ];
        for p in bad {
            assert!(matches!(
                generate_synthetic_volume(0, &p, "x"),
                Err(Error::Parameter(_))
            ));
        }
    }

    #[test]
    fn label_contiguity_enforced() {
        let vox = Array3::zeros((2, 2, 2));
        let mut lab = Array3::zeros((2, 2, 2));
        lab[[0, 0, 0]] = 2;
        assert!(VolumeScan::new(vox.clone(), lab.clone(), "p", "m").is_err());
        lab[[1, 1, 1]] = 1;
        assert!(VolumeScan::new(vox, lab, "p", "m").is_ok());
    }
}
