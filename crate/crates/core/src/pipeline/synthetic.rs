//! Synthetic occluded re-identification benchmark.
//!
//! Identity appearance lives in a low-rank subspace shared by everyone: each
//! identity draws one latent per body part, so keypoints of the same limb
//! agree. A sample renders its keypoint features (appearance + a shared body
//! component + camera and per-sample nuisance confined to a second
//! low-rank subspace + isotropic noise) as
//! small Gaussian blobs into a `c×h×w` feature map at jittered canonical
//! sites, and emits one heatmap per keypoint: a sharp bump on an arbitrary
//! per-keypoint offset. An occluded sample hides a contiguous band of
//! keypoints: their heatmaps are flattened and the map region they cover is
//! painted with an identity-independent occluder pattern.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::semantic::{FeatureMap, HeatmapSet};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_ids: usize,
    pub samples_per_id: usize,
    pub occlusion_rate: f64,
    pub noise_sigma: f64,
    pub heat_sharpness: f64,
    pub seed: u64,
    pub k: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub cameras: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_ids: 20,
            samples_per_id: 8,
            occlusion_rate: 0.5,
            noise_sigma: 0.3,
            heat_sharpness: 10.0,
            seed: 0,
            k: 14,
            c: 32,
            h: 16,
            w: 8,
            cameras: 4,
        }
    }
}

const APPEARANCE_RANK: usize = 6;
const APPEARANCE_SCALE: f64 = 1.0;
const KEYPOINT_SCALE: f64 = 0.3;
const NUISANCE_RANK: usize = 4;
const CAMERA_SCALE: f64 = 1.5;
const POSE_SCALE: f64 = 0.75;
const BODY_SCALE: f64 = 0.5;
const BACKGROUND_SIGMA: f64 = 0.1;
const BLOB_SIGMA: f64 = 0.8;
const HEAT_SIGMA: f64 = 1.0;
const HEAT_NOISE: f64 = 0.05;
const FLAT_NOISE: f64 = 0.01;
const HEAT_OFFSET: f64 = 3.0;
const OCCLUDER_TYPES: usize = 3;

/// Canonical `(row, col)` keypoint sites on a 16×8 grid, in skeleton order.
const SITES_14: [(f64, f64); 14] = [
    (1.0, 4.0),
    (2.5, 4.0),
    (3.5, 2.0),
    (3.5, 6.0),
    (5.5, 1.0),
    (5.5, 7.0),
    (7.5, 1.0),
    (7.5, 7.0),
    (8.5, 3.0),
    (8.5, 5.0),
    (11.5, 3.0),
    (11.5, 5.0),
    (14.5, 3.0),
    (14.5, 5.0),
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 || self.samples_per_id == 0 || self.cameras == 0 {
            return Err(Error::Invalid("need ≥2 identities, ≥1 sample per identity and ≥1 camera".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(Error::Invalid("occlusion_rate must lie in [0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.heat_sharpness > 0.0) {
            return Err(Error::Invalid("noise_sigma must be ≥ 0 and heat_sharpness > 0".into()));
        }
        if self.k == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Invalid("dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Keypoint sites scaled to the configured grid; other K spread down the
    /// vertical axis.
    fn sites(&self) -> Vec<(f64, f64)> {
        let (sy, sx) = (self.h as f64 / 16.0, self.w as f64 / 8.0);
        if self.k == SITES_14.len() {
            SITES_14.iter().map(|&(y, x)| (y * sy, x * sx)).collect()
        } else {
            (0..self.k)
                .map(|i| {
                    let y = (i as f64 + 0.5) * self.h as f64 / self.k as f64;
                    let x = if i % 2 == 0 { 0.3 } else { 0.7 } * self.w as f64;
                    (y, x)
                })
                .collect()
        }
    }
}

/// Body-part index of every keypoint: head, torso, arms, legs for the
/// 14-point skeleton; consecutive groups of three otherwise.
fn body_parts(k: usize) -> Vec<usize> {
    if k == SITES_14.len() {
        vec![0, 0, 1, 1, 2, 2, 2, 2, 1, 1, 3, 3, 3, 3]
    } else {
        (0..k).map(|i| i / 3).collect()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (k, c, h, w) = (spec.k, spec.c, spec.h, spec.w);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rank = NUISANCE_RANK.min(c);

    let embed = |basis: &[Vec<f64>], z: &[f64]| -> Vec<f64> {
        (0..c).map(|j| basis.iter().zip(z).map(|(b, zi)| b[j] * zi).sum()).collect()
    };
    let appearance: Vec<Vec<f64>> = (0..APPEARANCE_RANK.min(c)).map(|_| gaussian_vec(&mut rng, c, 1.0)).collect();
    let basis: Vec<Vec<f64>> = (0..rank).map(|_| gaussian_vec(&mut rng, c, 1.0 / (c as f64).sqrt())).collect();
    let nuisance = |z: &[f64]| embed(&basis, z);
    let body: Vec<Vec<f64>> = (0..k).map(|_| gaussian_vec(&mut rng, c, BODY_SCALE)).collect();
    let parts = body_parts(k);
    let part_count = parts.iter().max().map_or(0, |p| p + 1);
    let prototypes: Vec<Vec<Vec<f64>>> = (0..spec.num_ids)
        .map(|_| {
            let latents: Vec<Vec<f64>> = (0..part_count)
                .map(|_| gaussian_vec(&mut rng, appearance.len(), APPEARANCE_SCALE))
                .collect();
            parts
                .iter()
                .map(|&p| {
                    let own = gaussian_vec(&mut rng, appearance.len(), KEYPOINT_SCALE);
                    let z: Vec<f64> = latents[p].iter().zip(&own).map(|(a, b)| a + b).collect();
                    embed(&appearance, &z)
                })
                .collect()
        })
        .collect();
    let scale = (c as f64).sqrt() * CAMERA_SCALE;
    let cameras: Vec<Vec<Vec<f64>>> = (0..spec.cameras)
        .map(|_| {
            let shared = gaussian_vec(&mut rng, rank, scale);
            (0..k)
                .map(|_| {
                    let own = gaussian_vec(&mut rng, rank, 0.5 * scale);
                    nuisance(&shared.iter().zip(&own).map(|(a, b)| a + b).collect::<Vec<_>>())
                })
                .collect()
        })
        .collect();
    let occluders: Vec<Vec<f64>> = (0..OCCLUDER_TYPES).map(|_| gaussian_vec(&mut rng, c, 1.0)).collect();
    let canonical = spec.sites();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let mut samples = Vec::with_capacity(spec.num_ids * spec.samples_per_id);
    for (id, proto) in prototypes.iter().enumerate() {
        for j in 0..spec.samples_per_id {
            let camera = j % spec.cameras;
            let pose = nuisance(&gaussian_vec(&mut rng, rank, (c as f64).sqrt() * POSE_SCALE));
            let sites: Vec<(f64, f64)> = canonical
                .iter()
                .map(|&(y, x)| {
                    let dy = rng.random_range(-1i32..=1) as f64;
                    let dx = rng.random_range(-1i32..=1) as f64;
                    ((y + dy).clamp(0.0, (h - 1) as f64).round(), (x + dx).clamp(0.0, (w - 1) as f64).round())
                })
                .collect();

            let mut map: Vec<f64> = (0..c * h * w)
                .map(|_| BACKGROUND_SIGMA * noise.sample(&mut rng))
                .collect();
            for kp in 0..k {
                let feature: Vec<f64> = (0..c)
                    .map(|ch| {
                        body[kp][ch] + proto[kp][ch] + cameras[camera][kp][ch] + pose[ch]
                            + spec.noise_sigma * noise.sample(&mut rng)
                    })
                    .collect();
                let (sy, sx) = sites[kp];
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - sy).powi(2) + (x as f64 - sx).powi(2);
                        if d2 > 4.0 {
                            continue;
                        }
                        let g = (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
                        for (ch, f) in feature.iter().enumerate() {
                            map[(ch * h + y) * w + x] += g * f;
                        }
                    }
                }
            }

            let mut occluded = vec![false; k];
            if k > 1 && rng.random_bool(spec.occlusion_rate) {
                let len = rng.random_range(2..=(k / 2).max(2)).min(k);
                let start = rng.random_range(0..=k - len);
                occluded[start..start + len].iter_mut().for_each(|o| *o = true);
                let pattern = &occluders[rng.random_range(0..OCCLUDER_TYPES)];
                let band = &sites[start..start + len];
                let y0 = band.iter().map(|s| s.0).fold(f64::INFINITY, f64::min) - 1.0;
                let y1 = band.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max) + 1.0;
                let x0 = band.iter().map(|s| s.1).fold(f64::INFINITY, f64::min) - 1.0;
                let x1 = band.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max) + 1.0;
                for y in 0..h {
                    for x in 0..w {
                        let (yf, xf) = (y as f64, x as f64);
                        if yf < y0 || yf > y1 || xf < x0 || xf > x1 {
                            continue;
                        }
                        for (ch, p) in pattern.iter().enumerate() {
                            map[(ch * h + y) * w + x] = p + BACKGROUND_SIGMA * noise.sample(&mut rng);
                        }
                    }
                }
            } else if k == 1 && rng.random_bool(spec.occlusion_rate) {
                occluded[0] = true;
            }

            let mut heat = vec![0.0; k * h * w];
            for kp in 0..k {
                let offset = rng.random_range(-HEAT_OFFSET..HEAT_OFFSET);
                let (sy, sx) = sites[kp];
                for y in 0..h {
                    for x in 0..w {
                        let v = if occluded[kp] {
                            FLAT_NOISE * noise.sample(&mut rng)
                        } else {
                            let d2 = (y as f64 - sy).powi(2) + (x as f64 - sx).powi(2);
                            spec.heat_sharpness * (-d2 / (2.0 * HEAT_SIGMA * HEAT_SIGMA)).exp()
                                + HEAT_NOISE * noise.sample(&mut rng)
                        };
                        heat[(kp * h + y) * w + x] = offset + v;
                    }
                }
            }

            samples.push(Sample {
                identity: id as u32,
                camera: camera as u32,
                occluded,
                m_cnn: FeatureMap::new(Tensor::new(vec![c, h, w], map)?)?,
                heatmaps: HeatmapSet::new(Tensor::new(vec![k, h, w], heat)?)?,
            });
        }
    }
    Dataset::new(k, c, h, w, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic::{extract_confidences, normalize_heatmaps};

    fn betas(d: &Dataset) -> Vec<Vec<f64>> {
        d.samples
            .iter()
            .map(|s| {
                extract_confidences(&normalize_heatmaps(&s.heatmaps).unwrap())
                    .unwrap()
                    .local()
                    .to_vec()
            })
            .collect()
    }

    #[test]
    fn unoccluded_confidences_are_high() {
        let spec = SyntheticSpec {
            occlusion_rate: 0.0,
            num_ids: 4,
            samples_per_id: 3,
            ..SyntheticSpec::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        assert!(betas(&d).iter().flatten().all(|&b| b > 0.5));
        assert!(d.samples.iter().all(|s| s.occluded.iter().all(|&o| !o)));
    }

    #[test]
    fn full_occlusion_leaves_a_diffuse_keypoint() {
        let spec = SyntheticSpec {
            occlusion_rate: 1.0,
            num_ids: 4,
            samples_per_id: 3,
            ..SyntheticSpec::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        let limit = 2.0 / (spec.h * spec.w) as f64;
        for (s, b) in d.samples.iter().zip(betas(&d)) {
            assert!(b.iter().any(|&x| x < limit));
            for (o, x) in s.occluded.iter().zip(&b) {
                assert_eq!(*o, *x < limit);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticSpec {
            num_ids: 3,
            samples_per_id: 2,
            ..SyntheticSpec::default()
        };
        let (mut a, mut b) = (Vec::new(), Vec::new());
        generate_synthetic(&spec).unwrap().write(&mut a).unwrap();
        generate_synthetic(&spec).unwrap().write(&mut b).unwrap();
        assert_eq!(a, b);
        let other = SyntheticSpec { seed: 1, ..spec };
        let mut c = Vec::new();
        generate_synthetic(&other).unwrap().write(&mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn small_grids_are_supported() {
        let spec = SyntheticSpec {
            k: 4,
            c: 3,
            h: 6,
            w: 4,
            num_ids: 2,
            samples_per_id: 2,
            occlusion_rate: 1.0,
            ..SyntheticSpec::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        assert_eq!(d.len(), 4);
        assert!(generate_synthetic(&SyntheticSpec { num_ids: 1, ..spec }).is_err());
    }
}
