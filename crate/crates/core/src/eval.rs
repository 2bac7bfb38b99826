//! Pose metrics, rigid alignment, multi-view fusion and the evaluation report.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::data::{joint_dist, Skeleton};
use crate::error::{Error, Result};

/// Mean per-joint Euclidean distance between two `3N` poses.
pub fn mpjpe(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() % 3 != 0 || a.is_empty() {
        return Err(Error::Dimension(format!("cannot compare poses of {} and {} values", a.len(), b.len())));
    }
    if let Some(index) = a.iter().chain(b).position(|v| !v.is_finite()) {
        return Err(Error::Numeric { what: "mpjpe: non-finite coordinate".into(), index: index % a.len() });
    }
    let n = a.len() / 3;
    Ok(a.chunks(3).zip(b.chunks(3)).map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>().sqrt()).sum::<f64>()
        / n as f64)
}

/// The kernel means for one input, in pose units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSet {
    pub poses: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub source: usize,
}

impl HypothesisSet {
    pub fn new(poses: Vec<Vec<f64>>, alphas: Vec<f64>, sigmas: Vec<f64>, source: usize) -> Result<Self> {
        if poses.is_empty() || poses.len() != alphas.len() || poses.len() != sigmas.len() {
            return Err(Error::Dimension(format!(
                "{} poses, {} alphas, {} sigmas",
                poses.len(),
                alphas.len(),
                sigmas.len()
            )));
        }
        let sum: f64 = alphas.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("mixing coefficients sum to {sum}")));
        }
        Ok(Self { poses, alphas, sigmas, source })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Index of the largest α, lowest index on ties.
    pub fn top_alpha(&self) -> usize {
        let mut best = 0;
        for (i, &a) in self.alphas.iter().enumerate() {
            if a > self.alphas[best] {
                best = i;
            }
        }
        best
    }
}

/// Hypothesis closest to `gt`, lowest index on ties.
pub fn best_hypothesis(hs: &HypothesisSet, gt: &[f64]) -> Result<(usize, f64)> {
    let mut best = (0, f64::INFINITY);
    for (i, p) in hs.poses.iter().enumerate() {
        let e = mpjpe(p, gt)?;
        if e < best.1 {
            best = (i, e);
        }
    }
    Ok(best)
}

fn centroid(p: &[f64]) -> Vector3<f64> {
    let n = (p.len() / 3) as f64;
    p.chunks(3).fold(Vector3::zeros(), |acc, j| acc + Vector3::new(j[0], j[1], j[2])) / n
}

/// Rigid (optionally similarity) transform of `a` that minimizes the summed
/// squared joint distance to `b`. Reflections are excluded.
/// Returns the transformed `a` and its MPJPE to `b`.
pub fn procrustes_align(a: &[f64], b: &[f64], allow_scale: bool) -> Result<(Vec<f64>, f64)> {
    mpjpe(a, b)?;
    let (ca, cb) = (centroid(a), centroid(b));
    let pa: Vec<Vector3<f64>> = a.chunks(3).map(|j| Vector3::new(j[0], j[1], j[2]) - ca).collect();
    let pb: Vec<Vector3<f64>> = b.chunks(3).map(|j| Vector3::new(j[0], j[1], j[2]) - cb).collect();
    let h: Matrix3<f64> = pa.iter().zip(&pb).map(|(p, q)| p * q.transpose()).sum();

    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegeneratePose("SVD did not converge".into())),
    };
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let scale_ref = pa.iter().chain(&pb).map(|p| p.norm_squared()).sum::<f64>();
    if !(s[order[1]] > 1e-12 * scale_ref.max(f64::MIN_POSITIVE)) {
        return Err(Error::DegeneratePose("fewer than three non-collinear joints".into()));
    }
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(order[2], order[2])] = -1.0;
    }
    let r = v * d * u.transpose();
    let scale = if allow_scale {
        let trace: f64 = (0..3).map(|k| s[k] * d[(k, k)]).sum();
        trace / pa.iter().map(|p| p.norm_squared()).sum::<f64>()
    } else {
        1.0
    };
    let aligned: Vec<f64> = pa.iter().flat_map(|p| (scale * (r * p) + cb).data.0[0]).collect();
    let err = mpjpe(&aligned, b)?;
    Ok((aligned, err))
}

/// Percentage of 2D joints within `factor` × the reference segment length
/// (measured on `reference`). Inclusive at the threshold.
pub fn pckh(projected: &[f64], reference: &[f64], skeleton: &Skeleton, factor: f64) -> Result<f64> {
    if projected.len() != reference.len() || projected.len() != 2 * skeleton.joints() {
        return Err(Error::Dimension(format!("{} vs {} image coordinates", projected.len(), reference.len())));
    }
    let (a, b) = skeleton.pckh_segment();
    let seg = joint_dist(reference, a, b, 2);
    if !(seg > 0.0) {
        return Err(Error::Domain("reference segment has zero length".into()));
    }
    let thr = factor * seg;
    let n = skeleton.joints();
    let hits = (0..n)
        .filter(|&j| {
            let d = ((projected[2 * j] - reference[2 * j]).powi(2) + (projected[2 * j + 1] - reference[2 * j + 1]).powi(2)).sqrt();
            d <= thr
        })
        .count();
    Ok(100.0 * hits as f64 / n as f64)
}

/// Percentage of 3D joints within `threshold` of ground truth, inclusive.
pub fn pck3d(pred: &[f64], gt: &[f64], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::Domain(format!("3DPCK threshold {threshold} must be positive")));
    }
    mpjpe(pred, gt)?;
    let n = pred.len() / 3;
    let hits = (0..n).filter(|&j| dist3(pred, gt, j) <= threshold).count();
    Ok(100.0 * hits as f64 / n as f64)
}

fn dist3(a: &[f64], b: &[f64], j: usize) -> f64 {
    (0..3).map(|k| (a[3 * j + k] - b[3 * j + k]).powi(2)).sum::<f64>().sqrt()
}

/// Fraction of oracle modes with at least one hypothesis within MPJPE `tau`.
pub fn mode_coverage(hs: &HypothesisSet, modes: &[Vec<f64>], tau: f64) -> Result<f64> {
    if modes.is_empty() {
        return Err(Error::Domain("no oracle modes".into()));
    }
    let mut covered = 0;
    for m in modes {
        let mut hit = false;
        for p in &hs.poses {
            if mpjpe(p, m)? <= tau {
                hit = true;
                break;
            }
        }
        covered += hit as usize;
    }
    Ok(covered as f64 / modes.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseStrategy {
    /// Exhaustive when the number of combinations is at most 10⁴, greedy otherwise.
    Auto,
    Exhaustive,
    Greedy,
}

pub const EXHAUSTIVE_LIMIT: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    /// Joint-wise average of the selected world-frame hypotheses.
    pub pose: Vec<f64>,
    /// Chosen hypothesis per camera, in input order.
    pub selection: Vec<usize>,
    /// Summed pairwise world-frame MPJPE of the selection.
    pub cost: f64,
}

fn selection_cost(world: &[Vec<Vec<f64>>], pick: &[usize]) -> Result<f64> {
    let mut cost = 0.0;
    for c in 0..world.len() {
        for d in c + 1..world.len() {
            cost += mpjpe(&world[c][pick[c]], &world[d][pick[d]])?;
        }
    }
    Ok(cost)
}

/// Picks one hypothesis per camera so the world-frame poses agree best,
/// then averages them.
pub fn multiview_fuse(sets: &[HypothesisSet], cams: &[CameraModel], strategy: FuseStrategy) -> Result<Fusion> {
    if sets.len() < 2 {
        return Err(Error::Fusion("fusion needs at least two cameras; use single-view prediction instead".into()));
    }
    if sets.len() != cams.len() {
        return Err(Error::Fusion(format!("{} hypothesis sets for {} cameras", sets.len(), cams.len())));
    }
    let world: Vec<Vec<Vec<f64>>> =
        sets.iter().zip(cams).map(|(s, c)| s.poses.iter().map(|p| c.camera_to_world(p)).collect()).collect();
    let sizes: Vec<usize> = sets.iter().map(HypothesisSet::len).collect();
    let combos = sizes.iter().try_fold(1usize, |acc, &m| acc.checked_mul(m));
    let exhaustive = match strategy {
        FuseStrategy::Exhaustive => true,
        FuseStrategy::Greedy => false,
        FuseStrategy::Auto => combos.is_some_and(|c| c <= EXHAUSTIVE_LIMIT),
    };

    let (selection, cost) = if exhaustive {
        let total = combos.ok_or_else(|| Error::Fusion("too many hypothesis combinations".into()))?;
        let mut pick = vec![0usize; sets.len()];
        let mut best = (pick.clone(), f64::INFINITY);
        for _ in 0..total {
            let c = selection_cost(&world, &pick)?;
            // lexicographic enumeration, so strict < keeps the smallest tuple
            if c < best.1 {
                best = (pick.clone(), c);
            }
            for k in (0..pick.len()).rev() {
                pick[k] += 1;
                if pick[k] < sizes[k] {
                    break;
                }
                pick[k] = 0;
            }
        }
        best
    } else {
        let mut pick: Vec<usize> = sets.iter().map(HypothesisSet::top_alpha).collect();
        let mut cost = selection_cost(&world, &pick)?;
        loop {
            let mut improved = false;
            for c in 0..pick.len() {
                for i in 0..sizes[c] {
                    if i == pick[c] {
                        continue;
                    }
                    let mut trial = pick.clone();
                    trial[c] = i;
                    let t = selection_cost(&world, &trial)?;
                    if t < cost || (t == cost && trial < pick) {
                        pick = trial;
                        cost = t;
                        improved = true;
                    }
                }
            }
            if !improved {
                break (pick, cost);
            }
        }
    };

    // average in camera-id order so permuting the inputs gives identical bits
    let mut order: Vec<usize> = (0..cams.len()).collect();
    order.sort_by_key(|&c| (cams[c].id, c));
    let len = world[0][0].len();
    let mut pose = vec![0.0; len];
    for &c in &order {
        for (acc, v) in pose.iter_mut().zip(&world[c][selection[c]]) {
            *acc += v;
        }
    }
    let k = cams.len() as f64;
    pose.iter_mut().for_each(|v| *v /= k);
    Ok(Fusion { pose, selection, cost })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub pckh_factor: f64,
    pub pck3d_threshold: f64,
    /// Mode-coverage tolerance; only used when oracle modes are supplied.
    pub tau: f64,
    pub allow_scale: bool,
}

impl EvalConfig {
    /// 3DPCK at 15% and mode coverage at 10% of the skeleton's total bone length.
    pub fn for_chain_length(length: f64) -> Self {
        Self { pckh_factor: 0.5, pck3d_threshold: 0.15 * length, tau: 0.1 * length, allow_scale: false }
    }

    /// Millimetre-scale data: the customary 150 mm 3DPCK threshold.
    pub fn metric() -> Self {
        Self { pckh_factor: 0.5, pck3d_threshold: 150.0, tau: 100.0, allow_scale: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub best_index: usize,
    /// Protocol #1 with best-hypothesis scoring.
    pub mpjpe_best: f64,
    pub mpjpe_top_alpha: f64,
    /// Protocol #2 with best-hypothesis scoring.
    pub mpjpe_aligned: f64,
    /// Mean over all hypotheses of their reprojection PCKh.
    pub pckh: f64,
    pub pck3d: f64,
    pub spread: Option<f64>,
    pub mode_coverage: Option<f64>,
}

/// Scores one hypothesis set. `x` is the 2D input the hypotheses were lifted from.
pub fn evaluate_sample(
    hs: &HypothesisSet,
    gt: &[f64],
    x: &[f64],
    skeleton: &Skeleton,
    cfg: &EvalConfig,
    modes: Option<&[Vec<f64>]>,
) -> Result<SampleMetrics> {
    let (best_index, mpjpe_best) = best_hypothesis(hs, gt)?;
    let mpjpe_top_alpha = mpjpe(&hs.poses[hs.top_alpha()], gt)?;
    let mpjpe_aligned = protocol2(hs, gt, cfg.allow_scale)?;
    let root = skeleton.root();
    let mut pckh_sum = 0.0;
    for p in &hs.poses {
        // orthographic reprojection, anchored at the input's root
        let proj: Vec<f64> = p
            .chunks(3)
            .flat_map(|j| [j[0] - p[3 * root] + x[2 * root], j[1] - p[3 * root + 1] + x[2 * root + 1]])
            .collect();
        pckh_sum += pckh(&proj, x, skeleton, cfg.pckh_factor)?;
    }
    let spread = (hs.len() > 1).then(|| {
        let d = (gt.len() as f64).sqrt();
        let mut total = 0.0;
        let mut pairs = 0.0;
        for i in 0..hs.len() {
            for j in i + 1..hs.len() {
                total += hs.poses[i].iter().zip(&hs.poses[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                pairs += 1.0;
            }
        }
        total / pairs / d
    });
    Ok(SampleMetrics {
        best_index,
        mpjpe_best,
        mpjpe_top_alpha,
        mpjpe_aligned,
        pckh: pckh_sum / hs.len() as f64,
        pck3d: pck3d(&hs.poses[best_index], gt, cfg.pck3d_threshold)?,
        spread,
        mode_coverage: modes.map(|m| mode_coverage(hs, m, cfg.tau)).transpose()?,
    })
}

/// Protocol #2 under best-hypothesis scoring: the smallest error over
/// hypotheses, each scored after the better of no alignment and the
/// least-squares rigid alignment.
pub fn protocol2(hs: &HypothesisSet, gt: &[f64], allow_scale: bool) -> Result<f64> {
    let mut best = f64::INFINITY;
    for p in &hs.poses {
        let raw = mpjpe(p, gt)?;
        let aligned = match procrustes_align(p, gt, allow_scale) {
            Ok((_, e)) => e,
            Err(Error::DegeneratePose(_)) => raw,
            Err(e) => return Err(e),
        };
        best = best.min(raw.min(aligned));
    }
    Ok(best)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub count: usize,
    pub mpjpe_best: f64,
    pub mpjpe_top_alpha: f64,
    pub mpjpe_aligned: f64,
    pub pckh: f64,
    pub pck3d: f64,
    pub spread: Option<f64>,
    pub spread_median: Option<f64>,
    pub mode_coverage: Option<f64>,
}

impl GroupSummary {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a SampleMetrics>) -> Self {
        let samples: Vec<&SampleMetrics> = samples.into_iter().collect();
        let n = samples.len();
        let mean = |f: &dyn Fn(&SampleMetrics) -> f64| samples.iter().map(|s| f(s)).sum::<f64>() / n.max(1) as f64;
        let opt_mean = |f: &dyn Fn(&SampleMetrics) -> Option<f64>| {
            let v: Option<Vec<f64>> = samples.iter().map(|s| f(s)).collect();
            v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        let spread_median = samples.iter().map(|s| s.spread).collect::<Option<Vec<f64>>>().and_then(|mut v| {
            if v.is_empty() {
                return None;
            }
            v.sort_by(f64::total_cmp);
            let m = v.len() / 2;
            Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
        });
        Self {
            count: n,
            mpjpe_best: mean(&|s| s.mpjpe_best),
            mpjpe_top_alpha: mean(&|s| s.mpjpe_top_alpha),
            mpjpe_aligned: mean(&|s| s.mpjpe_aligned),
            pckh: mean(&|s| s.pckh),
            pck3d: mean(&|s| s.pck3d),
            spread: opt_mean(&|s| s.spread),
            spread_median,
            mode_coverage: opt_mean(&|s| s.mode_coverage),
        }
    }
}

/// One evaluation with a given number of hidden limb joints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRow {
    pub occluded: usize,
    pub mpjpe_best: f64,
    /// Relative to the full-input row.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: GroupSummary,
    /// Keyed by camera id, `"none"` for samples without one.
    pub groups: BTreeMap<String, GroupSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degradation: Vec<DegradationRow>,
    pub config: EvalConfig,
}

impl EvalReport {
    pub fn from_samples(samples: &[(Option<u32>, SampleMetrics)], config: EvalConfig) -> Self {
        let mut keyed: BTreeMap<String, Vec<&SampleMetrics>> = BTreeMap::new();
        for (cam, m) in samples {
            keyed.entry(cam.map_or_else(|| "none".to_string(), |c| format!("cam{c}"))).or_default().push(m);
        }
        Self {
            overall: GroupSummary::from_samples(samples.iter().map(|(_, m)| m)),
            groups: keyed.into_iter().map(|(k, v)| (k, GroupSummary::from_samples(v))).collect(),
            degradation: Vec::new(),
            config,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>7} {:>10} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8}",
            "group", "n", "P1 best", "P1 top-α", "P2 best", "PCKh", "3DPCK", "spread", "modes"
        )?;
        let mut row = |name: &str, g: &GroupSummary| {
            writeln!(
                f,
                "{:<8} {:>7} {:>10.4} {:>10.4} {:>10.4} {:>8.2} {:>8.2} {:>8} {:>8}",
                name,
                g.count,
                g.mpjpe_best,
                g.mpjpe_top_alpha,
                g.mpjpe_aligned,
                g.pckh,
                g.pck3d,
                opt(g.spread, 4),
                opt(g.mode_coverage, 3)
            )
        };
        for (name, g) in &self.groups {
            row(name, g)?;
        }
        row("all", &self.overall)?;
        if !self.degradation.is_empty() {
            writeln!(f, "\n{:<10} {:>10} {:>8}", "occluded", "P1 best", "ratio")?;
            for d in &self.degradation {
                writeln!(f, "{:<10} {:>10.4} {:>8.3}", d.occluded, d.mpjpe_best, d.ratio)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::side_camera;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(poses: Vec<Vec<f64>>) -> HypothesisSet {
        let m = poses.len();
        HypothesisSet::new(poses, vec![1.0 / m as f64; m], vec![1.0; m], 0).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn mpjpe_examples() {
        let a = vec![0.0; 48];
        let mut b = a.clone();
        b[0] = 3.0;
        assert_eq!(mpjpe(&a, &a).unwrap(), 0.0);
        assert_eq!(mpjpe(&a, &b).unwrap(), 0.1875);
        assert_eq!(mpjpe(&b, &a).unwrap(), 0.1875);
        b[4] = f64::INFINITY;
        assert!(matches!(mpjpe(&a, &b), Err(Error::Numeric { .. })));
    }

    #[test]
    fn best_hypothesis_examples() {
        let gt = vec![1.0, 2.0, 3.0];
        let hs = set(vec![vec![0.0; 3]]);
        assert_eq!(best_hypothesis(&hs, &gt).unwrap(), (0, mpjpe(&[0.0; 3], &gt).unwrap()));
        let hs = set(vec![vec![9.0; 3], vec![8.0; 3], vec![7.0; 3], gt.clone(), vec![6.0; 3]]);
        assert_eq!(best_hypothesis(&hs, &gt).unwrap(), (3, 0.0));
        let near = vec![1.0, 2.0, 4.0];
        let hs = set(vec![vec![9.0; 3], near.clone(), vec![7.0; 3], vec![6.0; 3], near]);
        assert_eq!(best_hypothesis(&hs, &gt).unwrap().0, 1);
    }

    fn rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = nalgebra::Unit::new_normalize(Vector3::new(rng.random(), rng.random(), rng.random::<f64>() + 0.1));
        nalgebra::Rotation3::from_axis_angle(&axis, rng.random_range(-3.0..3.0)).into_inner()
    }

    fn transform(p: &[f64], r: &Matrix3<f64>, s: f64, t: Vector3<f64>) -> Vec<f64> {
        p.chunks(3).flat_map(|j| (s * (r * Vector3::new(j[0], j[1], j[2])) + t).data.0[0]).collect()
    }

    #[test]
    fn procrustes_recovers_rigid_and_scaled_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = random_pose(&mut rng, 16);
            let r = rotation(&mut rng);
            let t = Vector3::new(rng.random(), rng.random(), rng.random());
            let b = transform(&a, &r, 1.0, t);
            assert!(procrustes_align(&a, &b, false).unwrap().1 < 1e-9);
        }
        let a = random_pose(&mut rng, 16);
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        assert!(procrustes_align(&a, &b, true).unwrap().1 < 1e-9);
        assert!(procrustes_align(&a, &b, false).unwrap().1 > 0.0);
    }

    #[test]
    fn procrustes_excludes_reflections_and_rejects_degenerate_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_pose(&mut rng, 8);
        let b = crate::data::reflect_depth(&a);
        assert!(procrustes_align(&a, &b, false).unwrap().1 > 1e-3);
        let line: Vec<f64> = (0..5).flat_map(|k| [k as f64, 2.0 * k as f64, 0.0]).collect();
        assert!(matches!(procrustes_align(&line, &line, false), Err(Error::DegeneratePose(_))));
    }

    #[test]
    fn pckh_examples() {
        let skel = Skeleton::chain(3);
        let reference = vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 0.0];
        assert_eq!(pckh(&reference, &reference, &skel, 0.5).unwrap(), 100.0);
        let shifted: Vec<f64> = reference.iter().enumerate().map(|(k, v)| if k % 2 == 1 { v + 0.5 + 1e-9 } else { *v }).collect();
        assert_eq!(pckh(&shifted, &reference, &skel, 0.5).unwrap(), 0.0);
        let mut half = reference.clone();
        half[5] += 2.0;
        half[7] += 2.0;
        assert_eq!(pckh(&half, &reference, &skel, 0.5).unwrap(), 50.0);
        let degenerate = vec![0.0; 8];
        assert!(matches!(pckh(&degenerate, &degenerate, &skel, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn pck3d_examples() {
        let gt = vec![0.0; 6];
        assert_eq!(pck3d(&gt, &gt, 0.1).unwrap(), 100.0);
        assert_eq!(pck3d(&[0.2, 0.0, 0.0, 0.0, 0.2, 0.0], &gt, 0.1).unwrap(), 0.0);
        assert_eq!(pck3d(&[0.1, 0.0, 0.0, 0.0, 0.2, 0.0], &gt, 0.1).unwrap(), 50.0);
    }

    #[test]
    fn mode_coverage_examples() {
        let modes = vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, -1.0]];
        assert_eq!(mode_coverage(&set(modes.clone()), &modes, 1e-9).unwrap(), 1.0);
        assert_eq!(mode_coverage(&set(vec![modes[0].clone(); 3]), &modes, 0.1).unwrap(), 0.5);
        assert_eq!(mode_coverage(&set(vec![vec![9.0; 3]]), &modes, f64::INFINITY).unwrap(), 1.0);
    }

    #[test]
    fn fusion_resolves_reflection() {
        let cams = [CameraModel::identity(0), side_camera(1)];
        let spec = crate::data::SynthSpec { samples: 20, seed: 3, ..Default::default() };
        let oracle = spec.oracle();
        let (world, views) = crate::data::synth::generate_multiview(&spec, &cams).unwrap();
        for (i, w) in world.iter().enumerate() {
            let sets: Vec<HypothesisSet> = views.iter().map(|v| set(oracle.modes(&v.samples[i].x))).collect();
            let fused = multiview_fuse(&sets, &cams, FuseStrategy::Auto).unwrap();
            assert!(mpjpe(&fused.pose, w).unwrap() < 1e-9);
            let wrong: Vec<usize> = fused.selection.iter().map(|&s| 1 - s).collect();
            let world_sets: Vec<Vec<Vec<f64>>> =
                sets.iter().zip(&cams).map(|(s, c)| s.poses.iter().map(|p| c.camera_to_world(p)).collect()).collect();
            for mixed in [vec![fused.selection[0], wrong[1]], vec![wrong[0], fused.selection[1]]] {
                assert!(selection_cost(&world_sets, &mixed).unwrap() > 1e-6);
            }
        }
    }

    #[test]
    fn fusion_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cams = [CameraModel::identity(0), side_camera(1), CameraModel::identity(2)];
        let truth = random_pose(&mut rng, 5);
        let sets: Vec<HypothesisSet> = cams
            .iter()
            .map(|c| {
                let mut poses: Vec<Vec<f64>> = (0..4).map(|_| random_pose(&mut rng, 5)).collect();
                poses.insert(rng.random_range(0..5), c.world_to_camera(&truth));
                set(poses)
            })
            .collect();
        let ex = multiview_fuse(&sets, &cams, FuseStrategy::Exhaustive).unwrap();
        assert!(mpjpe(&ex.pose, &truth).unwrap() < 1e-12);
        let auto = multiview_fuse(&sets, &cams, FuseStrategy::Auto).unwrap();
        assert_eq!(auto, ex);
        let perm = [2, 0, 1];
        let psets: Vec<HypothesisSet> = perm.iter().map(|&i| sets[i].clone()).collect();
        let pcams: Vec<CameraModel> = perm.iter().map(|&i| cams[i].clone()).collect();
        assert_eq!(multiview_fuse(&psets, &pcams, FuseStrategy::Exhaustive).unwrap().pose, ex.pose);
        assert!(matches!(multiview_fuse(&sets[..1], &cams[..1], FuseStrategy::Auto), Err(Error::Fusion(_))));
    }

    #[test]
    fn report_layout() {
        let m = SampleMetrics {
            best_index: 0,
            mpjpe_best: 1.0,
            mpjpe_top_alpha: 2.0,
            mpjpe_aligned: 0.5,
            pckh: 100.0,
            pck3d: 80.0,
            spread: Some(0.3),
            mode_coverage: None,
        };
        let r = EvalReport::from_samples(&[(Some(1), m.clone()), (None, m)], EvalConfig::for_chain_length(4.0));
        assert_eq!(r.overall.count, 2);
        assert_eq!(r.groups.len(), 2);
        let text = r.to_string();
        assert!(text.contains("cam1") && text.contains("all"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
