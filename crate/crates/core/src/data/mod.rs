//! Pose datasets: skeletons, normalization, missing-joint augmentation and splits.

mod io;
pub mod synth;

pub use io::{load_companion, load_dataset, save_dataset, save_json, sibling, stats_path, Companion};
pub use synth::{reflect_depth, Oracle, SynthSpec};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Joint tree with the metadata the metrics and augmentation need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub names: Vec<String>,
    /// `parents[root] == root`.
    pub parents: Vec<usize>,
    /// Fallback PCKh segment.
    pub reference: (usize, usize),
    /// Preferred PCKh segment when present.
    #[serde(default)]
    pub head: Option<(usize, usize)>,
    /// Joints eligible for occlusion.
    pub limbs: Vec<usize>,
}

impl Skeleton {
    pub fn new(
        names: Vec<String>,
        parents: Vec<usize>,
        reference: (usize, usize),
        head: Option<(usize, usize)>,
        limbs: Vec<usize>,
    ) -> Result<Self> {
        let s = Self { names, parents, reference, head, limbs };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.parents.len();
        if n == 0 {
            return Err(Error::config("skeleton", "no joints"));
        }
        if self.names.len() != n {
            return Err(Error::config("skeleton", format!("{} names for {n} joints", self.names.len())));
        }
        let roots: Vec<usize> = (0..n).filter(|&j| self.parents[j] == j).collect();
        if roots.len() != 1 {
            return Err(Error::config("skeleton", format!("expected exactly one root, found {roots:?}")));
        }
        for start in 0..n {
            let (mut j, mut hops) = (start, 0);
            while self.parents[j] != j {
                j = self.parents[j];
                hops += 1;
                if j >= n || hops > n {
                    return Err(Error::config("skeleton", format!("joint {start} does not reach the root")));
                }
            }
        }
        let segments = std::iter::once(self.reference).chain(self.head);
        for (a, b) in segments {
            if a >= n || b >= n || a == b {
                return Err(Error::config("skeleton", format!("segment ({a}, {b}) is invalid")));
            }
        }
        if let Some(&l) = self.limbs.iter().find(|&&l| l >= n) {
            return Err(Error::config("skeleton", format!("limb joint {l} does not exist")));
        }
        let mut sorted = self.limbs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.limbs.len() {
            return Err(Error::config("skeleton", "limb joints repeat"));
        }
        Ok(())
    }

    /// Serial chain of `bones` bones rooted at joint 0. Every non-root joint is a limb joint.
    pub fn chain(bones: usize) -> Self {
        let n = bones + 1;
        Self {
            names: (0..n).map(|j| if j == 0 { "root".to_string() } else { format!("j{j}") }).collect(),
            parents: (0..n).map(|j| j.saturating_sub(1)).collect(),
            reference: (0, 1.min(bones)),
            head: None,
            limbs: (1..n).collect(),
        }
    }

    /// The common 16-joint body layout.
    pub fn human16() -> Self {
        const NAMES: [&str; 16] = [
            "Hip", "RHip", "RKnee", "RFoot", "LHip", "LKnee", "LFoot", "Spine", "Thorax", "Head", "LShoulder",
            "LElbow", "LWrist", "RShoulder", "RElbow", "RWrist",
        ];
        Self {
            names: NAMES.iter().map(|s| s.to_string()).collect(),
            parents: vec![0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 8, 10, 11, 8, 13, 14],
            reference: (0, 7),
            head: Some((8, 9)),
            limbs: vec![11, 12, 14, 15, 2, 3, 5, 6],
        }
    }

    pub fn joints(&self) -> usize {
        self.parents.len()
    }

    pub fn root(&self) -> usize {
        (0..self.joints()).find(|&j| self.parents[j] == j).unwrap_or(0)
    }

    pub fn pckh_segment(&self) -> (usize, usize) {
        self.head.unwrap_or(self.reference)
    }

    /// Sum of parent→child distances of `pose` (3D).
    pub fn total_length(&self, pose: &[f64]) -> f64 {
        (0..self.joints())
            .filter(|&j| self.parents[j] != j)
            .map(|j| joint_dist(pose, j, self.parents[j], 3))
            .sum()
    }
}

pub(crate) fn joint_dist(pose: &[f64], a: usize, b: usize, dim: usize) -> f64 {
    (0..dim).map(|k| (pose[a * dim + k] - pose[b * dim + k]).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    /// `2N` image coordinates.
    pub x: Vec<f64>,
    /// `3N` root-centred 3D coordinates.
    pub y: Vec<f64>,
    pub camera: Option<u32>,
    pub visible: Vec<bool>,
}

impl PoseSample {
    pub fn new(x: Vec<f64>, y: Vec<f64>, camera: Option<u32>) -> Self {
        let n = x.len() / 2;
        Self { x, y, camera, visible: vec![true; n] }
    }

    pub fn joints(&self) -> usize {
        self.visible.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseDataset {
    pub skeleton: Skeleton,
    pub samples: Vec<PoseSample>,
}

impl PoseDataset {
    pub fn new(skeleton: Skeleton, samples: Vec<PoseSample>) -> Result<Self> {
        let n = skeleton.joints();
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != 2 * n || s.y.len() != 3 * n || s.visible.len() != n {
                return Err(Error::Dimension(format!(
                    "sample {i} has {}/{}/{} values, skeleton has {n} joints",
                    s.x.len(),
                    s.y.len(),
                    s.visible.len()
                )));
            }
        }
        Ok(Self { skeleton, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn joints(&self) -> usize {
        self.skeleton.joints()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self { skeleton: self.skeleton.clone(), samples: indices.iter().map(|&i| self.samples[i].clone()).collect() }
    }
}

/// Translates `y` so its root joint sits at the origin.
pub fn root_center(y: &mut [f64], root: usize) {
    let r = [y[3 * root], y[3 * root + 1], y[3 * root + 2]];
    for joint in y.chunks_mut(3) {
        for k in 0..3 {
            joint[k] -= r[k];
        }
    }
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-dimension mean and standard deviation of the training inputs and targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean_x: Vec<f64>,
    pub std_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    pub std_y: Vec<f64>,
}

/// Too many dimensions hit the standard-deviation floor.
#[derive(Clone, Debug, PartialEq)]
pub struct SuspiciousData {
    pub floored: usize,
    pub dims: usize,
}

impl std::fmt::Display for SuspiciousData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} of {} dimensions have (near-)zero variance", self.floored, self.dims)
    }
}

fn moments(columns: usize, rows: impl Iterator<Item = Vec<Option<f64>>>) -> (Vec<f64>, Vec<f64>) {
    let mut count = vec![0usize; columns];
    let mut mean = vec![0.0; columns];
    let mut m2 = vec![0.0; columns];
    // Welford, per column
    for row in rows {
        for (k, v) in row.into_iter().enumerate() {
            if let Some(v) = v {
                count[k] += 1;
                let delta = v - mean[k];
                mean[k] += delta / count[k] as f64;
                m2[k] += delta * (v - mean[k]);
            }
        }
    }
    let std = m2.iter().zip(&count).map(|(&m, &c)| if c > 0 { (m / c as f64).sqrt() } else { 0.0 }).collect();
    (mean, std)
}

impl NormStats {
    /// Statistics over the visible inputs and root-centred targets of `samples`.
    pub fn compute(samples: &[PoseSample], skeleton: &Skeleton) -> Result<(Self, Option<SuspiciousData>)> {
        if samples.len() < 2 {
            return Err(Error::config("dataset", "normalization statistics need at least 2 samples"));
        }
        let n = skeleton.joints();
        let root = skeleton.root();
        let (mean_x, mut std_x) = moments(
            2 * n,
            samples.iter().map(|s| s.x.iter().enumerate().map(|(k, &v)| s.visible[k / 2].then_some(v)).collect()),
        );
        let (mut mean_y, mut std_y) = moments(
            3 * n,
            samples.iter().map(|s| {
                let mut y = s.y.clone();
                root_center(&mut y, root);
                y.into_iter().map(Some).collect()
            }),
        );
        let mut floored = 0;
        for (k, s) in std_x.iter_mut().enumerate().chain(std_y.iter_mut().enumerate().map(|(k, s)| (k + 2 * n, s))) {
            let is_root_y = k >= 2 * n && (k - 2 * n) / 3 == root;
            if *s < STD_FLOOR {
                *s = STD_FLOOR;
                if !is_root_y {
                    floored += 1;
                }
            }
        }
        for k in 0..3 {
            mean_y[3 * root + k] = 0.0;
            std_y[3 * root + k] = 1.0;
        }
        let dims = 2 * n + 3 * (n - 1);
        let warning = (floored * 10 > dims).then_some(SuspiciousData { floored, dims });
        Ok((Self { mean_x, std_x, mean_y, std_y }, warning))
    }

    pub fn joints(&self) -> usize {
        self.mean_x.len() / 2
    }

    /// Hex SHA-256 over the little-endian bytes of all four arrays.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for arr in [&self.mean_x, &self.std_x, &self.mean_y, &self.std_y] {
            h.update((arr.len() as u64).to_le_bytes());
            for v in arr {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Invisible joints become 0, the training mean.
    pub fn normalize_x(&self, x: &[f64], visible: &[bool]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(k, &v)| if visible[k / 2] { (v - self.mean_x[k]) / self.std_x[k] } else { 0.0 })
            .collect()
    }

    pub fn denormalize_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(k, &v)| v * self.std_x[k] + self.mean_x[k]).collect()
    }

    pub fn normalize_y(&self, y: &[f64], root: usize) -> Vec<f64> {
        let mut c = y.to_vec();
        root_center(&mut c, root);
        c.iter().enumerate().map(|(k, &v)| (v - self.mean_y[k]) / self.std_y[k]).collect()
    }

    pub fn denormalize_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().enumerate().map(|(k, &v)| v * self.std_y[k] + self.mean_y[k]).collect()
    }

    pub fn normalize(&self, s: &PoseSample, root: usize) -> PoseSample {
        PoseSample {
            x: self.normalize_x(&s.x, &s.visible),
            y: self.normalize_y(&s.y, root),
            camera: s.camera,
            visible: s.visible.clone(),
        }
    }

    pub fn denormalize(&self, s: &PoseSample) -> PoseSample {
        PoseSample { x: self.denormalize_x(&s.x), y: self.denormalize_y(&s.y), camera: s.camera, visible: s.visible.clone() }
    }
}

/// Hides `k` distinct limb joints chosen uniformly, writing `fill` (a `2N`
/// vector) into their image coordinates. Targets are untouched.
pub fn occlude<R: Rng + ?Sized>(
    sample: &PoseSample,
    k: usize,
    skeleton: &Skeleton,
    fill: &[f64],
    rng: &mut R,
) -> Result<PoseSample> {
    let limbs = &skeleton.limbs;
    if k > limbs.len() {
        return Err(Error::config("occlusion_k", format!("{k} exceeds the {} limb joints", limbs.len())));
    }
    let mut out = sample.clone();
    for i in index::sample(rng, limbs.len(), k) {
        let j = limbs[i];
        out.visible[j] = false;
        out.x[2 * j] = fill[2 * j];
        out.x[2 * j + 1] = fill[2 * j + 1];
    }
    Ok(out)
}

/// Deterministic disjoint split; each side keeps the original sample order.
pub fn split(ds: &PoseDataset, train_fraction: f64, seed: u64) -> Result<(PoseDataset, PoseDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config("train_fraction", format!("{train_fraction} outside (0, 1)")));
    }
    let n = ds.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::config("train_fraction", format!("split of {n} samples leaves one side empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train: Vec<usize> = index::sample(&mut rng, n, n_train).into_vec();
    train.sort_unstable();
    let mut in_train = vec![false; n];
    train.iter().for_each(|&i| in_train[i] = true);
    let test: Vec<usize> = (0..n).filter(|&i| !in_train[i]).collect();
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_dataset(n: usize, seed: u64) -> PoseDataset {
        let spec = SynthSpec { samples: n, seed, ..SynthSpec::default() };
        synth::generate(&spec).unwrap().0
    }

    #[test]
    fn skeletons_validate() {
        Skeleton::chain(4).validate().unwrap();
        Skeleton::human16().validate().unwrap();
        let mut bad = Skeleton::chain(2);
        bad.parents = vec![0, 2, 1];
        assert!(bad.validate().is_err());
        let mut bad = Skeleton::chain(2);
        bad.reference = (0, 7);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn normalized_training_set_is_standardized() {
        let ds = random_dataset(500, 1);
        let root = ds.skeleton.root();
        let (stats, warn) = NormStats::compute(&ds.samples, &ds.skeleton).unwrap();
        assert!(warn.is_none());
        let normed: Vec<PoseSample> = ds.samples.iter().map(|s| stats.normalize(s, root)).collect();
        let (again, _) = NormStats::compute(&normed, &ds.skeleton).unwrap();
        // the root's image coordinates are identically zero in this data
        for k in 2..10 {
            assert!(again.mean_x[k].abs() < 1e-9 && (again.std_x[k] - 1.0).abs() < 1e-9);
        }
        for k in 3..15 {
            assert!(again.mean_y[k].abs() < 1e-9 && (again.std_y[k] - 1.0).abs() < 1e-9);
        }
        assert_eq!(&stats.std_y[..3], &[1.0; 3]);
        for s in &normed {
            assert_eq!(&stats.denormalize_y(&s.y)[..3], &[0.0; 3]);
        }
    }

    #[test]
    fn root_centering() {
        let mut y = vec![1.0, 2.0, 3.0, 4.0, 4.0, 4.0];
        root_center(&mut y, 0);
        assert_eq!(y, vec![0.0, 0.0, 0.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn constant_dimensions_trigger_warning() {
        let skel = Skeleton::chain(1);
        let samples: Vec<PoseSample> =
            (0..5).map(|_| PoseSample::new(vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0], None)).collect();
        let (stats, warn) = NormStats::compute(&samples, &skel).unwrap();
        assert!(stats.std_x.iter().all(|&s| s == STD_FLOOR));
        assert_eq!(warn, Some(SuspiciousData { floored: 7, dims: 7 }));
    }

    #[test]
    fn fingerprint_tracks_values() {
        let ds = random_dataset(50, 2);
        let (a, _) = NormStats::compute(&ds.samples, &ds.skeleton).unwrap();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.mean_x[0] += 1e-12;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn occlusion_contract() {
        let skel = Skeleton::human16();
        let s = PoseSample::new((0..32).map(|v| v as f64).collect(), vec![0.0; 48], Some(1));
        let fill = vec![-7.0; 32];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(occlude(&s, 0, &skel, &fill, &mut rng).unwrap(), s);
        let o = occlude(&s, 1, &skel, &fill, &mut rng).unwrap();
        let hidden: Vec<usize> = (0..16).filter(|&j| !o.visible[j]).collect();
        assert_eq!(hidden.len(), 1);
        assert!(skel.limbs.contains(&hidden[0]));
        assert_eq!(&o.x[2 * hidden[0]..2 * hidden[0] + 2], &[-7.0, -7.0]);
        assert_eq!(o.y, s.y);
        assert!(occlude(&s, 9, &skel, &fill, &mut rng).is_err());
    }

    #[test]
    fn occlusion_is_uniform_over_limbs() {
        let skel = Skeleton::human16();
        let s = PoseSample::new(vec![0.0; 32], vec![0.0; 48], None);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = [0usize; 16];
        for _ in 0..10_000 {
            let o = occlude(&s, 1, &skel, &[0.0; 32], &mut rng).unwrap();
            counts[o.visible.iter().position(|v| !v).unwrap()] += 1;
        }
        for &l in &skel.limbs {
            let frac = counts[l] as f64 / 10_000.0;
            assert!((frac - 0.125).abs() < 0.01, "{l}: {frac}");
        }
    }

    #[test]
    fn split_contract() {
        let ds = random_dataset(1000, 3);
        let (a, b) = split(&ds, 0.8, 9).unwrap();
        assert_eq!((a.len(), b.len()), (800, 200));
        let (a2, b2) = split(&ds, 0.8, 9).unwrap();
        assert_eq!((&a, &b), (&a2, &b2));
        let mut all: Vec<_> = a.samples.iter().chain(&b.samples).map(|s| s.x[2].to_bits()).collect();
        let mut orig: Vec<_> = ds.samples.iter().map(|s| s.x[2].to_bits()).collect();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);
        assert!(split(&ds, 1.0, 0).is_err());
        assert!(split(&ds.subset(&[0, 1]), 0.1, 0).is_err());
    }
}
