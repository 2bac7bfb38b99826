//! Training loop, its configuration, and the inference bundle it produces.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, NormStats, PoseDataset, PoseSample, Skeleton, SuspiciousData};
use crate::error::{Error, Result};
use crate::eval::{evaluate_sample, DegradationRow, EvalConfig, EvalReport, HypothesisSet, SampleMetrics};
use crate::mdn::{total_loss, MdnConfig, MdnNetwork, MdnParams, NetworkConfig};
use crate::nn::{Mode, Module, Pass};
use crate::optim::{adam_step, apply_constraints, AdamState, LrSchedule};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub m: usize,
    pub lambda: f64,
    pub gamma_elu: f64,
    pub lr: f64,
    pub decay_rate: f64,
    pub decay_steps: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub max_norm: f64,
    pub alpha_clip: [f64; 2],
    pub sigma_clip: [f64; 2],
    /// Training samples hide a uniformly drawn `0..=occlusion_k` limb joints.
    pub occlusion_k: usize,
    pub width: usize,
    pub blocks: usize,
    pub validation_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mdn = MdnConfig::default();
        let lr = LrSchedule::default();
        Self {
            seed: 0,
            m: mdn.m,
            lambda: 2.0,
            gamma_elu: mdn.gamma_elu,
            lr: lr.base_lr,
            decay_rate: lr.decay_rate,
            decay_steps: lr.decay_steps,
            batch_size: 64,
            epochs: 200,
            dropout: 0.5,
            max_norm: 1.0,
            alpha_clip: mdn.alpha_clip,
            sigma_clip: mdn.sigma_clip,
            occlusion_k: 0,
            width: 1024,
            blocks: 2,
            validation_fraction: 0.1,
            data: None,
            checkpoint: None,
            loss_log: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn mdn(&self) -> MdnConfig {
        MdnConfig {
            m: self.m,
            gamma_elu: self.gamma_elu,
            lambda: vec![self.lambda; self.m],
            alpha_clip: self.alpha_clip,
            sigma_clip: self.sigma_clip,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { base_lr: self.lr, decay_rate: self.decay_rate, decay_steps: self.decay_steps }
    }

    pub fn network(&self, joints: usize) -> NetworkConfig {
        NetworkConfig {
            input_dim: 2 * joints,
            output_dim: 3 * joints,
            width: self.width,
            blocks: self.blocks,
            dropout: self.dropout,
            mdn: self.mdn(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mdn().validate()?;
        self.schedule().validate()?;
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "batch normalization needs at least 2 samples per batch"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        if !(self.max_norm > 0.0 && self.max_norm.is_finite()) {
            return Err(Error::config("max_norm", format!("{} must be positive", self.max_norm)));
        }
        if self.width == 0 {
            return Err(Error::config("width", "must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction", format!("{} outside (0, 1)", self.validation_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Network plus everything needed to map raw 2D input to raw 3D hypotheses.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub network: MdnNetwork<T>,
    pub stats: NormStats,
    pub skeleton: Skeleton,
}

fn to_tensor<T: Scalar>(rows: usize, cols: usize, data: impl Iterator<Item = f64>) -> Result<Tensor<T>> {
    Ok(Tensor::new(vec![rows, cols], data.map(T::lit).collect())?)
}

const INFER_CHUNK: usize = 512;

impl<T: Scalar> Model<T> {
    pub fn joints(&self) -> usize {
        self.skeleton.joints()
    }

    pub fn kernels(&self) -> usize {
        self.network.config.mdn.m
    }

    fn check_joints(&self, ds_joints: usize) -> Result<()> {
        if ds_joints != self.joints() {
            return Err(Error::Dimension(format!("data has {ds_joints} joints, model expects {}", self.joints())));
        }
        Ok(())
    }

    /// Mixture parameters in normalized units.
    pub fn predict_normalized(&self, samples: &[PoseSample]) -> Result<Vec<MdnParams<T>>> {
        let n = self.joints();
        let mut out = Vec::new();
        for chunk in samples.chunks(INFER_CHUNK) {
            for s in chunk {
                self.check_joints(s.joints())?;
            }
            let x = to_tensor(chunk.len(), 2 * n, chunk.iter().flat_map(|s| self.stats.normalize_x(&s.x, &s.visible)))?;
            out.push(self.network.predict(&x)?);
        }
        Ok(out)
    }

    /// Denormalized, root-centred hypotheses for each sample.
    pub fn hypotheses(&self, samples: &[PoseSample]) -> Result<Vec<HypothesisSet>> {
        let m = self.kernels();
        let root = self.skeleton.root();
        let mut out = Vec::with_capacity(samples.len());
        for p in self.predict_normalized(samples)? {
            for b in 0..p.batch() {
                let poses = (0..m)
                    .map(|i| {
                        let mu: Vec<f64> = p.hypothesis(b, i).iter().map(|v| v.to_f64_lossless()).collect();
                        let mut pose = self.stats.denormalize_y(&mu);
                        data::root_center(&mut pose, root);
                        pose
                    })
                    .collect();
                // σ is isotropic in normalized units; report it scaled by the mean target std
                let sigma_scale = mean_std(&self.stats.std_y, self.skeleton.root());
                let alphas = p.alpha_row(b).iter().map(|a| a.to_f64_lossless()).collect();
                let sigmas = p.sigma_row(b).iter().map(|s| s.to_f64_lossless() * sigma_scale).collect();
                out.push(HypothesisSet::new(poses, alphas, sigmas, out.len())?);
            }
        }
        Ok(out)
    }

    /// Scores every sample; `modes` supplies oracle solutions per sample.
    pub fn evaluate(
        &self,
        ds: &PoseDataset,
        cfg: &EvalConfig,
        modes: Option<&dyn Fn(&PoseSample) -> Vec<Vec<f64>>>,
    ) -> Result<(EvalReport, Vec<SampleMetrics>)> {
        self.check_joints(ds.joints())?;
        let sets = self.hypotheses(&ds.samples)?;
        let root = self.skeleton.root();
        let mut metrics = Vec::with_capacity(sets.len());
        for (hs, s) in sets.iter().zip(&ds.samples) {
            let mut gt = s.y.clone();
            data::root_center(&mut gt, root);
            let oracle = modes.map(|f| f(s));
            metrics.push(evaluate_sample(hs, &gt, &s.x, &self.skeleton, cfg, oracle.as_deref())?);
        }
        let keyed: Vec<(Option<u32>, SampleMetrics)> = ds.samples.iter().map(|s| s.camera).zip(metrics.iter().cloned()).collect();
        Ok((EvalReport::from_samples(&keyed, *cfg), metrics))
    }
}

impl<T: Scalar> Model<T> {
    /// Copy of `ds` with `k` random limb joints hidden per sample. Sample `i`
    /// draws from its own stream of `seed`.
    pub fn occluded(&self, ds: &PoseDataset, k: usize, seed: u64) -> Result<PoseDataset> {
        let samples = ds
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| data::occlude(s, k, &ds.skeleton, &self.stats.mean_x, &mut stream_rng(seed, i as u64)))
            .collect::<Result<_>>()?;
        PoseDataset::new(ds.skeleton.clone(), samples)
    }

    /// Best-hypothesis error with 0..=max_k hidden limb joints.
    pub fn degradation(&self, ds: &PoseDataset, cfg: &EvalConfig, max_k: usize, seed: u64) -> Result<Vec<DegradationRow>> {
        let mut rows: Vec<DegradationRow> = Vec::with_capacity(max_k + 1);
        for k in 0..=max_k {
            let view = if k == 0 { ds.clone() } else { self.occluded(ds, k, seed)? };
            let (report, _) = self.evaluate(&view, cfg, None)?;
            let base = rows.first().map_or(report.overall.mpjpe_best, |r| r.mpjpe_best);
            rows.push(DegradationRow { occluded: k, mpjpe_best: report.overall.mpjpe_best, ratio: report.overall.mpjpe_best / base });
        }
        Ok(rows)
    }
}

fn mean_std(std_y: &[f64], root: usize) -> f64 {
    let vals: Vec<f64> = std_y.iter().enumerate().filter(|(k, _)| k / 3 != root).map(|(_, &s)| s).collect();
    if vals.is_empty() {
        1.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Optimizer and bookkeeping that a resumed run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub optimizer: AdamState<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

/// Normalized training and validation arrays.
struct Prepared {
    train: Vec<PoseSample>,
    val: Vec<PoseSample>,
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub state: TrainState<T>,
    data: Prepared,
}

/// Everything derived from the seed uses its own stream, so epochs can be
/// replayed independently.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = u64::MAX;

fn prepare(config: &TrainConfig, ds: &PoseDataset) -> Result<(NormStats, Option<SuspiciousData>, Prepared)> {
    let (train, val) = data::split(ds, 1.0 - config.validation_fraction, config.seed)?;
    let (stats, warning) = NormStats::compute(&train.samples, &ds.skeleton)?;
    let root = ds.skeleton.root();
    let norm = |d: &PoseDataset| d.samples.iter().map(|s| stats.normalize(s, root)).collect();
    let prepared = Prepared { train: norm(&train), val: norm(&val) };
    Ok((stats, warning, prepared))
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run. The warning reports dimensions whose spread hit the floor.
    pub fn new(config: TrainConfig, ds: &PoseDataset) -> Result<(Self, Option<SuspiciousData>)> {
        config.validate()?;
        if config.occlusion_k > ds.skeleton.limbs.len() {
            return Err(Error::config("occlusion_k", format!("{} exceeds the {} limb joints", config.occlusion_k, ds.skeleton.limbs.len())));
        }
        let (stats, warning, data) = prepare(&config, ds)?;
        let network = MdnNetwork::new(config.network(ds.joints()), &mut stream_rng(config.seed, INIT_STREAM))?;
        let model = Model { network, stats, skeleton: ds.skeleton.clone() };
        let state = TrainState { config, optimizer: AdamState::default(), epoch: 0, history: Vec::new() };
        Ok((Self { model, state, data }, warning))
    }

    /// Continues a run from a checkpoint on the same dataset.
    pub fn resume(model: Model<T>, state: TrainState<T>, ds: &PoseDataset) -> Result<Self> {
        if ds.joints() != model.joints() {
            return Err(Error::Dimension(format!("data has {} joints, checkpoint has {}", ds.joints(), model.joints())));
        }
        let (stats, _, data) = prepare(&state.config, ds)?;
        if stats.fingerprint() != model.stats.fingerprint() {
            return Err(Error::Provenance("normalization statistics differ from the checkpoint's; wrong dataset or split".into()));
        }
        Ok(Self { model, state, data })
    }

    pub fn train_len(&self) -> usize {
        self.data.train.len()
    }

    pub fn val_len(&self) -> usize {
        self.data.val.len()
    }

    fn batch_tensors(&self, samples: &[&PoseSample]) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = self.model.joints();
        let x = to_tensor(samples.len(), 2 * n, samples.iter().flat_map(|s| s.x.iter().copied()))?;
        let y = to_tensor(samples.len(), 3 * n, samples.iter().flat_map(|s| s.y.iter().copied()))?;
        Ok((x, y))
    }

    /// Mean total loss over `samples` with the network in eval mode.
    pub fn eval_loss(&self, samples: &[PoseSample]) -> Result<f64> {
        let mdn = &self.model.network.config.mdn;
        let mut total = 0.0;
        for chunk in samples.chunks(INFER_CHUNK) {
            let refs: Vec<&PoseSample> = chunk.iter().collect();
            let (x, y) = self.batch_tensors(&refs)?;
            let mut pass = Pass::eval();
            let xv = pass.input(x);
            let yv = pass.input(y);
            let p = self.model.network.forward(&mut pass, xv)?;
            let l = total_loss(&mut pass.graph, &p, yv, mdn)?;
            total += pass.graph.value(l).data()[0].to_f64_lossless() * chunk.len() as f64;
        }
        Ok(total / samples.len().max(1) as f64)
    }

    pub fn validation_loss(&self) -> Result<f64> {
        self.eval_loss(&self.data.val)
    }

    /// One shuffled pass over the training split. A trailing batch smaller
    /// than 2 is skipped.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.state.epoch;
        let cfg = self.state.config.clone();
        let mut rng = stream_rng(cfg.seed, epoch as u64);
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut rng);
        let schedule = cfg.schedule();
        let skeleton = self.model.skeleton.clone();
        let zero_fill = vec![0.0; 2 * skeleton.joints()];
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let occluded: Vec<PoseSample>;
            let refs: Vec<&PoseSample> = if cfg.occlusion_k > 0 {
                occluded = idx
                    .iter()
                    .map(|&i| {
                        let k = rng.random_range(0..=cfg.occlusion_k);
                        data::occlude(&self.data.train[i], k, &skeleton, &zero_fill, &mut rng)
                    })
                    .collect::<Result<_>>()?;
                occluded.iter().collect()
            } else {
                idx.iter().map(|&i| &self.data.train[i]).collect()
            };
            let (x, y) = self.batch_tensors(&refs)?;

            self.model.network.zero_grad();
            let loss = {
                let mut pass = Pass::new(Mode::Train, Some(&mut rng as &mut dyn RngCore));
                let xv = pass.input(x);
                let yv = pass.input(y);
                let p = self.model.network.forward(&mut pass, xv)?;
                let l = match total_loss(&mut pass.graph, &p, yv, &self.model.network.config.mdn) {
                    Ok(l) => l,
                    Err(Error::Numeric { .. }) | Err(Error::Tensor(_)) => {
                        return Err(Error::NumericAbort { epoch: epoch + 1, batch })
                    }
                    Err(e) => return Err(e),
                };
                let value = pass.graph.value(l).data()[0].to_f64_lossless();
                if !value.is_finite() {
                    return Err(Error::NumericAbort { epoch: epoch + 1, batch });
                }
                pass.graph.backward(l)?;
                let net = &mut self.model.network;
                net.accumulate_grads(&pass)?;
                net.apply_batch_stats(&pass)?;
                value
            };
            let lr = T::lit(schedule.lr_at(self.state.optimizer.step));
            match adam_step(&mut self.model.network, &mut self.state.optimizer, lr) {
                Err(Error::Numeric { .. }) => return Err(Error::NumericAbort { epoch: epoch + 1, batch }),
                other => other?,
            }
            apply_constraints(&mut self.model.network, T::lit(cfg.max_norm));
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        let log = EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss: self.validation_loss()?,
            lr: schedule.lr_at(self.state.optimizer.step),
        };
        self.state.epoch += 1;
        self.state.history.push(log.clone());
        Ok(log)
    }

    /// Runs the remaining epochs, calling `after_epoch` once each has finished.
    pub fn fit(&mut self, mut after_epoch: impl FnMut(&Self, &EpochLog) -> Result<()>) -> Result<()> {
        while self.state.epoch < self.state.config.epochs {
            let log = self.run_epoch()?;
            after_epoch(self, &log)?;
        }
        Ok(())
    }
}

pub fn write_loss_log(history: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for row in history {
        w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 2, message: e.to_string() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SynthSpec};

    fn smoke(samples: usize) -> (TrainConfig, PoseDataset) {
        let (ds, _) = generate(&SynthSpec { samples, seed: 1, ..Default::default() }).unwrap();
        let cfg = TrainConfig { width: 32, epochs: 3, batch_size: 32, dropout: 0.1, ..Default::default() };
        (cfg, ds)
    }

    #[test]
    fn config_defaults_and_validation() {
        let d = TrainConfig::default();
        assert_eq!((d.m, d.lambda, d.lr, d.batch_size, d.epochs, d.dropout), (5, 2.0, 0.001, 64, 200, 0.5));
        let back = TrainConfig::from_toml(&d.to_toml()).unwrap();
        assert_eq!(back, d);
        assert!(TrainConfig::from_toml("m = 0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert_eq!(TrainConfig::from_toml("epochs = 7").unwrap().epochs, 7);
    }

    #[test]
    fn loss_goes_down() {
        let (cfg, ds) = smoke(600);
        let (mut t, warn) = Trainer::<f64>::new(cfg, &ds).unwrap();
        assert!(warn.is_none());
        let start = t.validation_loss().unwrap();
        t.fit(|_, _| Ok(())).unwrap();
        assert_eq!(t.state.history.len(), 3);
        assert!(t.state.history.last().unwrap().val_loss < start);
    }

    #[test]
    fn epochs_are_reproducible_and_resumable() {
        let (cfg, ds) = smoke(300);
        let (mut a, _) = Trainer::<f64>::new(cfg.clone(), &ds).unwrap();
        a.fit(|_, _| Ok(())).unwrap();

        let (mut b, _) = Trainer::<f64>::new(cfg, &ds).unwrap();
        b.run_epoch().unwrap();
        let mut c = Trainer::resume(b.model.clone(), b.state.clone(), &ds).unwrap();
        c.fit(|_, _| Ok(())).unwrap();
        assert_eq!(a.model, c.model);
        assert_eq!(a.state, c.state);
    }

    #[test]
    fn occlusion_training_runs() {
        let (mut cfg, ds) = smoke(200);
        cfg.occlusion_k = 2;
        cfg.epochs = 1;
        let (mut t, _) = Trainer::<f64>::new(cfg.clone(), &ds).unwrap();
        t.fit(|_, _| Ok(())).unwrap();
        cfg.occlusion_k = 5;
        assert!(matches!(Trainer::<f64>::new(cfg, &ds), Err(Error::Config { .. })));
    }

    #[test]
    fn loss_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let rows = vec![EpochLog { epoch: 1, train_loss: 0.1 + 0.2, val_loss: -3.5, lr: 1e-3 }];
        write_loss_log(&rows, &path).unwrap();
        assert_eq!(read_loss_log(&path).unwrap(), rows);
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("epoch,train_loss,val_loss,lr"));
    }
}
