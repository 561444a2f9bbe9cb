//! Synthetic frame-feature sequences with per-identity means, per-camera
//! offsets, frame noise and occlusion frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, SequenceRecord};
use crate::error::{Result, ScanError};
use crate::numkit::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_identities: usize,
    pub n_cameras: usize,
    pub frames_per_sequence: usize,
    pub feature_dim: usize,
    pub camera_offset_scale: f64,
    pub frame_noise_sigma: f64,
    /// Probability that a frame is replaced by the shared distractor.
    pub occlusion_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_identities: 32,
            n_cameras: 2,
            frames_per_sequence: 100,
            feature_dim: 64,
            camera_offset_scale: 0.1,
            frame_noise_sigma: 1.0,
            occlusion_prob: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_identities", self.n_identities),
            ("n_cameras", self.n_cameras),
            ("frames_per_sequence", self.frames_per_sequence),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ScanError::Config(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..1.0).contains(&self.occlusion_prob) {
            return Err(ScanError::Config(format!(
                "occlusion_prob must lie in [0, 1), got {}",
                self.occlusion_prob
            )));
        }
        if !(self.camera_offset_scale >= 0.0) || !(self.frame_noise_sigma >= 0.0) {
            return Err(ScanError::Config("noise scales must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generator internals exposed for verification and visualisation.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    pub distractor: Vec<f64>,
    /// Per record, whether each frame is an occlusion frame.
    pub occluded: Vec<Vec<bool>>,
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

/// Stored values are rounded to `f32` so the on-disk format is lossless.
fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

pub fn synthesize(cfg: &SyntheticConfig) -> Result<Dataset> {
    Ok(synthesize_with_truth(cfg)?.0)
}

pub fn synthesize_with_truth(cfg: &SyntheticConfig) -> Result<(Dataset, SyntheticTruth)> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let distractor: Vec<f64> = normal_vec(&mut rng, d, 1.0).into_iter().map(quantize).collect();
    let means: Vec<Vec<f64>> = (0..cfg.n_identities)
        .map(|_| normal_vec(&mut rng, d, 1.0))
        .collect();
    let offsets: Vec<Vec<f64>> = (0..cfg.n_cameras)
        .map(|_| normal_vec(&mut rng, d, cfg.camera_offset_scale))
        .collect();

    let mut records = Vec::with_capacity(cfg.n_identities * cfg.n_cameras);
    let mut occluded = Vec::with_capacity(records.capacity());
    for (identity, mean) in means.iter().enumerate() {
        for (camera, offset) in offsets.iter().enumerate() {
            let mut features = Matrix::zeros(cfg.frames_per_sequence, d);
            let mut mask = Vec::with_capacity(cfg.frames_per_sequence);
            for t in 0..cfg.frames_per_sequence {
                let occ = rng.gen_bool(cfg.occlusion_prob);
                // noise is drawn either way so occlusion does not shift later draws
                let noise = normal_vec(&mut rng, d, cfg.frame_noise_sigma);
                let row = features.row_mut(t);
                if occ {
                    row.copy_from_slice(&distractor);
                } else {
                    for k in 0..d {
                        row[k] = quantize(mean[k] + offset[k] + noise[k]);
                    }
                }
                mask.push(occ);
            }
            records.push(SequenceRecord {
                identity: identity as u32,
                camera: camera as u32,
                features,
            });
            occluded.push(mask);
        }
    }
    Ok((Dataset::new(d, records)?, SyntheticTruth { distractor, occluded }))
}
