//! Property tests over the mixture head, metrics, cameras and normalization.

use mdnpose::camera::{CameraModel, Projection};
use mdnpose::data::synth::generate;
use mdnpose::data::{NormStats, PoseSample, Skeleton, SynthSpec};
use mdnpose::eval::{multiview_fuse, pck3d, pckh, procrustes_align, FuseStrategy, HypothesisSet};
use mdnpose::mdn::{hypothesis_spread, total_loss, MdnConfig, MdnHead, MdnNetwork, MdnParams, NetworkConfig};
use mdnpose::nn::{Mode, Module, Pass};
use mdnpose::optim::{adam_step, apply_constraints, AdamState};
use mdnpose::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn rotation(r: &mut ChaCha8Rng) -> [f64; 9] {
    let q = uniform(r, 4, -1.0, 1.0);
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

fn camera(r: &mut ChaCha8Rng, id: u32) -> CameraModel {
    let t = uniform(r, 3, -5.0, 5.0);
    CameraModel::new(id, Projection::Orthographic, rotation(r), [t[0], t[1], t[2]]).unwrap()
}

fn params(alpha: Vec<f64>, mu: Vec<f64>, sigma: Vec<f64>, d: usize) -> MdnParams<f64> {
    let m = alpha.len();
    MdnParams::new(
        Tensor::new(vec![1, m], alpha).unwrap(),
        Tensor::new(vec![1, m, d], mu).unwrap(),
        Tensor::new(vec![1, m], sigma).unwrap(),
    )
    .unwrap()
}

fn head_params(seed: u64, m: usize, d: usize, log_scale: f64) -> MdnParams<f64> {
    let mut r = rng(seed);
    let head = MdnHead::new(6, d, &MdnConfig::with_kernels(m, 2.0), &mut r);
    let scale = 10f64.powf(log_scale);
    let x = Tensor::new(vec![3, 6], uniform(&mut r, 18, -scale, scale)).unwrap();
    let mut pass = Pass::eval();
    let xv = pass.input(x);
    let v = head.forward(&mut pass, xv).unwrap();
    MdnParams::from_vars(&pass.graph, &v)
}

/// A random mixture with moderate widths and a target near it.
fn mixture(seed: u64, m: usize, d: usize) -> (MdnParams<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let raw = uniform(&mut r, m, 0.05, 1.0);
    let total: f64 = raw.iter().sum();
    let alpha = raw.iter().map(|a| a / total).collect();
    let p = params(alpha, uniform(&mut r, m * d, -2.0, 2.0), uniform(&mut r, m, 0.2, 3.0), d);
    (p, Tensor::new(vec![1, d], uniform(&mut r, d, -2.0, 2.0)).unwrap())
}

fn single_kernel_nll(mu: &[f64], sigma: f64, y: &[f64]) -> f64 {
    let d = y.len() as f64;
    let sq: f64 = mu.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
    0.5 * d * (2.0 * std::f64::consts::PI).ln() + d * sigma.ln() + sq / (2.0 * sigma * sigma)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn head_outputs_stay_on_the_simplex(seed in any::<u64>(), m in 1usize..10, d in 1usize..8, log_scale in -3.0f64..4.0) {
        let p = head_params(seed, m, d, log_scale);
        for b in 0..p.batch() {
            let a = p.alpha_row(b);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(a.iter().all(|&v| (1e-8..=1.0).contains(&v)), "{a:?}");
            prop_assert!(p.sigma_row(b).iter().all(|&s| (1e-15..=1e15).contains(&s)));
        }
    }

    #[test]
    fn kernel_order_does_not_matter(seed in any::<u64>(), m in 2usize..8, d in 1usize..10, shift in 1usize..8) {
        let (p, y) = mixture(seed, m, d);
        let order: Vec<usize> = (0..m).map(|i| (i + shift) % m).collect();
        let q = params(
            order.iter().map(|&i| p.alpha_row(0)[i]).collect(),
            order.iter().flat_map(|&i| p.hypothesis(0, i).to_vec()).collect(),
            order.iter().map(|&i| p.sigma_row(0)[i]).collect(),
            d,
        );
        let lambda = vec![2.5; m];
        prop_assert!((p.nll(&y).unwrap() - q.nll(&y).unwrap()).abs() <= 1e-12);
        prop_assert!((p.prior(&lambda).unwrap() - q.prior(&lambda).unwrap()).abs() <= 1e-12);
        prop_assert!((hypothesis_spread(&p).unwrap()[0] - hypothesis_spread(&q).unwrap()[0]).abs() <= 1e-12);
    }

    #[test]
    fn coincident_kernels_reduce_to_one_gaussian(seed in any::<u64>(), m in 1usize..8, d in 1usize..10) {
        let (p, y) = mixture(seed, m, d);
        let mu0 = p.hypothesis(0, 0).to_vec();
        let s0 = p.sigma_row(0)[0];
        let q = params(p.alpha_row(0).to_vec(), (0..m).flat_map(|_| mu0.clone()).collect(), vec![s0; m], d);
        let exact = single_kernel_nll(&mu0, s0, y.data());
        let got = q.nll(&y).unwrap();
        prop_assert!((got - exact).abs() <= 16.0 * f64::EPSILON * exact.abs().max(1.0), "{got} vs {exact}");
        prop_assert!(m == 1 || hypothesis_spread(&q).unwrap()[0] == 0.0);
    }

    #[test]
    fn mixture_nll_is_bounded_by_its_kernels(seed in any::<u64>(), m in 1usize..8, d in 1usize..10) {
        let (p, y) = mixture(seed, m, d);
        let singles: Vec<f64> = (0..m).map(|i| single_kernel_nll(p.hypothesis(0, i), p.sigma_row(0)[i], y.data())).collect();
        let best = singles.iter().copied().fold(f64::INFINITY, f64::min);
        let nll = p.nll(&y).unwrap();
        prop_assert!(nll >= best - (m as f64).ln() - 1e-12);
        // and no better than a single kernel carrying all the weight
        prop_assert!(nll >= best - 1e-12);
    }

    #[test]
    fn scale_alignment_never_hurts(seed in any::<u64>(), joints in 3usize..17) {
        let mut r = rng(seed);
        let a = uniform(&mut r, 3 * joints, -1.0, 1.0);
        let b = uniform(&mut r, 3 * joints, -1.0, 1.0);
        // the fit is least squares, so compare squared residuals rather than MPJPE
        let sq = |p: &[f64]| p.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let (rigid, _) = procrustes_align(&a, &b, false).unwrap();
        let (similar, _) = procrustes_align(&a, &b, true).unwrap();
        prop_assert!(sq(&similar) <= sq(&rigid) + 1e-12, "{} > {}", sq(&similar), sq(&rigid));
    }

    #[test]
    fn pck_is_monotone_in_its_threshold(seed in any::<u64>(), t1 in 0.0f64..2.0, t2 in 0.0f64..2.0) {
        let mut r = rng(seed);
        let sk = Skeleton::chain(4);
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let ref2 = uniform(&mut r, 10, -1.0, 1.0);
        let pred2 = uniform(&mut r, 10, -1.0, 1.0);
        prop_assert!(pckh(&pred2, &ref2, &sk, lo).unwrap() <= pckh(&pred2, &ref2, &sk, hi).unwrap());
        let gt = uniform(&mut r, 15, -1.0, 1.0);
        let pred = uniform(&mut r, 15, -1.0, 1.0);
        prop_assert!(pck3d(&pred, &gt, lo).unwrap() <= pck3d(&pred, &gt, hi).unwrap());
    }

    #[test]
    fn cameras_are_rigid_and_invertible(seed in any::<u64>(), joints in 1usize..17) {
        let mut r = rng(seed);
        let cam = camera(&mut r, 0);
        let pose = uniform(&mut r, 3 * joints, -3.0, 3.0);
        let c = cam.world_to_camera(&pose);
        let back = cam.camera_to_world(&c);
        prop_assert!(pose.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
        let dist = |p: &[f64], i: usize, j: usize| (0..3).map(|k| (p[3 * i + k] - p[3 * j + k]).powi(2)).sum::<f64>().sqrt();
        for i in 0..joints {
            for j in i + 1..joints {
                prop_assert!((dist(&pose, i, j) - dist(&c, i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalization_round_trips(seed in any::<u64>()) {
        let spec = SynthSpec { samples: 50, seed, ..SynthSpec::default() };
        let (ds, _) = generate(&spec).unwrap();
        let (stats, _) = NormStats::compute(&ds.samples, &ds.skeleton).unwrap();
        for s in &ds.samples {
            let back = stats.denormalize(&stats.normalize(s, 0));
            prop_assert!(back.x.iter().zip(&s.x).all(|(a, b)| (a - b).abs() <= 1e-10));
            // the generator roots every chain at the origin
            prop_assert!(back.y.iter().zip(&s.y).all(|(a, b)| (a - b).abs() <= 1e-10));
        }
    }

    #[test]
    fn greedy_fusion_matches_exhaustive(seed in any::<u64>(), cams in 2usize..4, m in 2usize..6) {
        let mut r = rng(seed);
        let joints = 16;
        let truth = uniform(&mut r, 3 * joints, -1.0, 1.0);
        // decoys sit along mutually orthogonal offsets, so no two of them agree
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < cams * m {
            let mut v = uniform(&mut r, 3 * joints, -1.0, 1.0);
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            basis.push(v.iter().map(|x| x / n).collect());
        }
        let models: Vec<CameraModel> = (0..cams).map(|c| camera(&mut r, c as u32)).collect();
        let mut sets = Vec::new();
        for (c, cam) in models.iter().enumerate() {
            let right = r.random_range(0..m);
            let poses: Vec<Vec<f64>> = (0..m)
                .map(|k| {
                    let world: Vec<f64> = if k == right {
                        truth.iter().map(|v| v + r.random_range(-0.01..0.01)).collect()
                    } else {
                        let len = r.random_range(2.0..10.0);
                        truth.iter().zip(&basis[c * m + k]).map(|(v, b)| v + len * b).collect()
                    };
                    cam.world_to_camera(&world)
                })
                .collect();
            let raw = uniform(&mut r, m, 0.1, 1.0);
            let total: f64 = raw.iter().sum();
            sets.push(HypothesisSet::new(poses, raw.iter().map(|a| a / total).collect(), vec![1.0; m], 0).unwrap());
        }
        let full = multiview_fuse(&sets, &models, FuseStrategy::Exhaustive).unwrap();
        let greedy = multiview_fuse(&sets, &models, FuseStrategy::Greedy).unwrap();
        prop_assert_eq!(&full.selection, &greedy.selection);
        prop_assert!(full.pose.iter().zip(&greedy.pose).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

/// One hundred optimizer steps on a small network; the windowed mean of
/// the per-step loss must keep falling.
#[test]
fn smoke_training_loss_falls_on_average() {
    let (ds, _) = generate(&SynthSpec { samples: 1000, seed: 9, ..SynthSpec::default() }).unwrap();
    let (stats, _) = NormStats::compute(&ds.samples, &ds.skeleton).unwrap();
    let norm: Vec<PoseSample> = ds.samples.iter().map(|s| stats.normalize(s, 0)).collect();
    let cfg = NetworkConfig { input_dim: 10, output_dim: 15, width: 64, blocks: 2, dropout: 0.1, mdn: MdnConfig::with_kernels(5, 2.0) };
    let mut r = rng(3);
    let mut net = MdnNetwork::<f64>::new(cfg.clone(), &mut r).unwrap();
    let mut adam = AdamState::default();
    let (steps, batch, window) = (100, 32, 20);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let idx: Vec<usize> = (0..batch).map(|_| r.random_range(0..norm.len())).collect();
        let x = Tensor::new(vec![batch, 10], idx.iter().flat_map(|&i| norm[i].x.clone()).collect()).unwrap();
        let y = Tensor::new(vec![batch, 15], idx.iter().flat_map(|&i| norm[i].y.clone()).collect()).unwrap();
        net.zero_grad();
        let mut drop_rng = rng(1000 + step as u64);
        let mut pass = Pass::new(Mode::Train, Some(&mut drop_rng));
        let (xv, yv) = (pass.input(x), pass.input(y));
        let p = net.forward(&mut pass, xv).unwrap();
        let l = total_loss(&mut pass.graph, &p, yv, &cfg.mdn).unwrap();
        losses.push(pass.graph.value(l).data()[0]);
        pass.graph.backward(l).unwrap();
        net.accumulate_grads(&pass).unwrap();
        net.apply_batch_stats(&pass).unwrap();
        adam_step(&mut net, &mut adam, 1e-3).unwrap();
        apply_constraints(&mut net, 1.0);
    }
    let means: Vec<f64> = losses.chunks(window).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for pair in means.windows(2) {
        assert!(pair[1] < pair[0], "trailing means {means:?}");
    }
}
