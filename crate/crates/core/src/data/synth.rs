//! Synthetic kinematic chains whose 2D→3D inverse has a known mode set.
//!
//! Every bone of a sample shares one depth sign. A 2D pose therefore
//! determines its 3D pose up to a global depth flip, and the oracle can list
//! the modes exactly.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PoseDataset, PoseSample, Skeleton};
use crate::camera::CameraModel;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub bones: usize,
    /// Empty means unit length for every bone.
    pub bone_lengths: Vec<f64>,
    /// Bone angle from the depth axis, radians.
    pub polar: [f64; 2],
    /// Bone angle in the image plane, radians.
    pub azimuth: [f64; 2],
    pub samples: usize,
    /// Probability that a sample is stored with negated depth.
    pub reflection_mix: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            bones: 4,
            bone_lengths: Vec::new(),
            polar: [PI / 6.0, 5.0 * PI / 6.0],
            azimuth: [-PI, PI],
            samples: 10_000,
            reflection_mix: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bones == 0 {
            return Err(Error::config("bones", "need at least one bone"));
        }
        if !self.bone_lengths.is_empty() && self.bone_lengths.len() != self.bones {
            return Err(Error::config("bone_lengths", format!("{} lengths for {} bones", self.bone_lengths.len(), self.bones)));
        }
        if let Some(l) = self.bone_lengths.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::config("bone_lengths", format!("{l} is not positive")));
        }
        if !(0.0..=1.0).contains(&self.reflection_mix) {
            return Err(Error::config("reflection_mix", format!("{} outside [0, 1]", self.reflection_mix)));
        }
        let [p0, p1] = self.polar;
        if !(0.0 <= p0 && p0 <= p1 && p1 <= PI) {
            return Err(Error::config("polar", format!("[{p0}, {p1}] is not within [0, π]")));
        }
        let [a0, a1] = self.azimuth;
        if !(a0.is_finite() && a1.is_finite() && a0 <= a1) {
            return Err(Error::config("azimuth", format!("[{a0}, {a1}] is not an interval")));
        }
        Ok(())
    }

    pub fn lengths(&self) -> Vec<f64> {
        if self.bone_lengths.is_empty() {
            vec![1.0; self.bones]
        } else {
            self.bone_lengths.clone()
        }
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton::chain(self.bones)
    }

    pub fn oracle(&self) -> Oracle {
        Oracle { bone_lengths: self.lengths(), polar: self.polar, reflection_mix: self.reflection_mix }
    }

    /// One 3D chain, root at the origin, drawn from `rng`.
    pub fn sample_pose<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let sign = if rng.random::<f64>() < self.reflection_mix { -1.0 } else { 1.0 };
        let lengths = self.lengths();
        let mut y = vec![0.0; 3 * (self.bones + 1)];
        for (b, &len) in lengths.iter().enumerate() {
            let theta = rng.random_range(self.polar[0]..=self.polar[1]);
            let phi = rng.random_range(self.azimuth[0]..=self.azimuth[1]);
            let step = [len * theta.sin() * phi.cos(), len * theta.sin() * phi.sin(), sign * len * theta.cos().abs()];
            for k in 0..3 {
                y[3 * (b + 1) + k] = y[3 * b + k] + step[k];
            }
        }
        y
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Orthographic image of a 3D pose: drop the depth coordinate.
pub fn drop_depth(y: &[f64]) -> Vec<f64> {
    y.chunks(3).flat_map(|j| [j[0], j[1]]).collect()
}

/// Negates every joint's depth.
pub fn reflect_depth(y: &[f64]) -> Vec<f64> {
    y.chunks(3).flat_map(|j| [j[0], j[1], -j[2]]).collect()
}

/// Dataset plus its oracle. Sample `i` depends only on `(seed, i)`.
pub fn generate(spec: &SynthSpec) -> Result<(PoseDataset, Oracle)> {
    spec.validate()?;
    let samples = (0..spec.samples)
        .map(|i| {
            let y = spec.sample_pose(&mut sample_rng(spec.seed, i as u64));
            PoseSample::new(drop_depth(&y), y, None)
        })
        .collect();
    Ok((PoseDataset::new(spec.skeleton(), samples)?, spec.oracle()))
}

/// Poses seen by several orthographic cameras, each view inside the
/// generator's own distribution so a network trained on [`generate`] applies
/// to every camera. Returns the world poses and one dataset per camera.
pub fn generate_multiview(spec: &SynthSpec, cameras: &[CameraModel]) -> Result<(Vec<Vec<f64>>, Vec<PoseDataset>)> {
    spec.validate()?;
    let oracle = spec.oracle();
    let skeleton = spec.skeleton();
    let mut world = Vec::with_capacity(spec.samples);
    let mut views: Vec<Vec<PoseSample>> = vec![Vec::new(); cameras.len()];
    let limit = 1000 * spec.samples.max(1) as u64;
    let mut attempt = 0u64;
    while world.len() < spec.samples {
        if attempt >= limit {
            return Err(Error::config("cameras", "no poses fit every camera's view distribution"));
        }
        let y = spec.sample_pose(&mut sample_rng(spec.seed, attempt));
        attempt += 1;
        let cam_poses: Vec<Vec<f64>> = cameras.iter().map(|c| c.world_to_camera(&y)).collect();
        if !cam_poses.iter().all(|p| oracle.in_support(p)) {
            continue;
        }
        for ((cam, p), view) in cameras.iter().zip(cam_poses).zip(&mut views) {
            let x = cam.project(&p)?;
            view.push(PoseSample::new(x, p, Some(cam.id)));
        }
        world.push(y);
    }
    let datasets = views.into_iter().map(|v| PoseDataset::new(skeleton.clone(), v)).collect::<Result<_>>()?;
    Ok((world, datasets))
}

/// Closed-form solution set of the synthetic inverse problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub bone_lengths: Vec<f64>,
    pub polar: [f64; 2],
    pub reflection_mix: f64,
}

impl Oracle {
    /// Every 3D pose the generator could have produced for image `x`
    /// (root-centred, root at the origin).
    pub fn modes(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n = self.bone_lengths.len() + 1;
        let mut up = vec![0.0; 3 * n];
        for (b, &len) in self.bone_lengths.iter().enumerate() {
            let dx = x[2 * (b + 1)] - x[2 * b];
            let dy = x[2 * (b + 1) + 1] - x[2 * b + 1];
            let dz = (len * len - dx * dx - dy * dy).max(0.0).sqrt();
            let j = b + 1;
            up[3 * j] = x[2 * j] - x[0];
            up[3 * j + 1] = x[2 * j + 1] - x[1];
            up[3 * j + 2] = up[3 * b + 2] + dz;
        }
        match self.reflection_mix {
            m if m <= 0.0 => vec![up],
            m if m >= 1.0 => vec![reflect_depth(&up)],
            _ => {
                let down = reflect_depth(&up);
                vec![up, down]
            }
        }
    }

    /// Whether a root-centred 3D chain could have come from the generator.
    pub fn in_support(&self, y: &[f64]) -> bool {
        let [p0, p1] = self.polar;
        let (c0, c1) = (p0.cos().abs(), p1.cos().abs());
        let c_max = c0.max(c1);
        let c_min = if p0 <= PI / 2.0 && PI / 2.0 <= p1 { 0.0 } else { c0.min(c1) };
        let mut sign = 0.0f64;
        for (b, &len) in self.bone_lengths.iter().enumerate() {
            let dz = y[3 * (b + 1) + 2] - y[3 * b + 2];
            let bone_len = super::joint_dist(y, b + 1, b, 3);
            if (bone_len - len).abs() > 1e-9 * len.max(1.0) {
                return false;
            }
            // the generator folds cosθ to |cosθ| and applies one shared sign
            let c = dz.abs() / len;
            if c > c_max + 1e-12 || c < c_min - 1e-12 {
                return false;
            }
            if dz != 0.0 {
                if sign != 0.0 && sign != dz.signum() {
                    return false;
                }
                sign = dz.signum();
            }
        }
        match self.reflection_mix {
            m if m <= 0.0 => sign >= 0.0,
            m if m >= 1.0 => sign <= 0.0,
            _ => true,
        }
    }
}
