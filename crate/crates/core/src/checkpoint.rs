//! Binary checkpoint: `MDNCKPT1`, a u32 LE descriptor length, a JSON
//! descriptor, then every declared array as f64 LE in declaration order.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{NormStats, Skeleton};
use crate::error::{Error, Result};
use crate::mdn::{MdnNetwork, NetworkConfig};
use crate::nn::Module;
use crate::optim::AdamState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{EpochLog, Model, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"MDNCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamRecord {
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    /// Number of parameters with moment buffers; 0 before the first step.
    buffers: usize,
}

/// Per-epoch RNG streams derive from the seed, so this is the full RNG state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngRecord {
    seed: u64,
    next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRecord {
    config: TrainConfig,
    history: Vec<EpochLog>,
    adam: AdamRecord,
    rng: RngRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    version: u32,
    scalar: String,
    architecture: NetworkConfig,
    joints: usize,
    kernels: usize,
    skeleton: Skeleton,
    stats_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainRecord>,
    arrays: Vec<ArrayEntry>,
}

/// A trained model and, optionally, what is needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub state: Option<TrainState<T>>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn scalar_name<T: 'static>() -> String {
    std::any::type_name::<T>().to_string()
}

fn param_names<T: Scalar>(net: &MdnNetwork<T>) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    net.visit("", &mut |name, t| out.push((name.to_string(), t.shape().to_vec())));
    out
}

fn buffer_names<T: Scalar>(net: &MdnNetwork<T>) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    net.visit_buffers("", &mut |name, t| out.push((name.to_string(), t.shape().to_vec())));
    out
}

const STATS_FIELDS: [&str; 4] = ["stats.mean_x", "stats.std_x", "stats.mean_y", "stats.std_y"];

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: Model<T>, state: Option<TrainState<T>>) -> Self {
        Self { model, state }
    }

    pub fn joints(&self) -> usize {
        self.model.joints()
    }

    pub fn kernels(&self) -> usize {
        self.model.kernels()
    }

    /// Fails unless the checkpoint was built for `joints` joints and `kernels` kernels.
    pub fn expect(&self, joints: Option<usize>, kernels: Option<usize>) -> Result<()> {
        if let Some(n) = joints.filter(|&n| n != self.joints()) {
            return Err(Error::Dimension(format!("checkpoint has N={}, expected N={n}", self.joints())));
        }
        if let Some(m) = kernels.filter(|&m| m != self.kernels()) {
            return Err(Error::Dimension(format!("checkpoint has M={}, expected M={m}", self.kernels())));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = &self.model.network;
        let mut arrays = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &mut dyn Iterator<Item = f64>| {
            arrays.push(ArrayEntry { name, shape });
            values.extend(data);
        };
        net.visit("", &mut |name, t| {
            push(name.to_string(), t.shape().to_vec(), &mut t.data().iter().map(|v| v.to_f64_lossless()))
        });
        net.visit_buffers("", &mut |name, t| {
            push(name.to_string(), t.shape().to_vec(), &mut t.data().iter().map(|v| v.to_f64_lossless()))
        });
        let stats = &self.model.stats;
        for (name, v) in STATS_FIELDS.iter().zip([&stats.mean_x, &stats.std_x, &stats.mean_y, &stats.std_y]) {
            push(name.to_string(), vec![v.len()], &mut v.iter().copied());
        }

        let training = match &self.state {
            None => None,
            Some(state) => {
                let opt = &state.optimizer;
                let names = param_names(net);
                if !opt.m.is_empty() && (opt.m.len() != names.len() || opt.v.len() != names.len()) {
                    return Err(ckpt_err("optimizer state does not match the network's parameters"));
                }
                for (moment, buffers) in [("m", &opt.m), ("v", &opt.v)] {
                    for ((name, shape), buf) in names.iter().zip(buffers) {
                        push(format!("adam.{moment}.{name}"), shape.clone(), &mut buf.iter().map(|v| v.to_f64_lossless()));
                    }
                }
                Some(TrainRecord {
                    // where the run writes its outputs is not part of the run
                    config: TrainConfig { checkpoint: None, loss_log: None, ..state.config.clone() },
                    history: state.history.clone(),
                    adam: AdamRecord {
                        step: opt.step,
                        beta1: opt.beta1.to_f64_lossless(),
                        beta2: opt.beta2.to_f64_lossless(),
                        epsilon: opt.epsilon.to_f64_lossless(),
                        buffers: opt.m.len(),
                    },
                    rng: RngRecord { seed: state.config.seed, next_epoch: state.epoch },
                })
            }
        };

        let descriptor = Descriptor {
            version: FORMAT_VERSION,
            scalar: scalar_name::<T>(),
            architecture: net.config.clone(),
            joints: self.joints(),
            kernels: self.kernels(),
            skeleton: self.model.skeleton.clone(),
            stats_fingerprint: stats.fingerprint(),
            training,
            arrays,
        };
        let text = serde_json::to_vec(&descriptor).map_err(|e| ckpt_err(e.to_string()))?;
        let len = u32::try_from(text.len()).map_err(|_| ckpt_err("descriptor exceeds 4 GiB"))?;
        let mut out = Vec::with_capacity(12 + text.len() + 8 * values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&text);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(ckpt_err("not a checkpoint (bad magic)"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + len).ok_or_else(|| ckpt_err("truncated descriptor"))?;
        let d: Descriptor = serde_json::from_slice(body).map_err(|e| ckpt_err(format!("descriptor: {e}")))?;
        if d.version != FORMAT_VERSION {
            return Err(ckpt_err(format!("unsupported checkpoint version {}", d.version)));
        }
        if d.scalar != scalar_name::<T>() {
            return Err(ckpt_err(format!("checkpoint stores {} weights, loader expects {}", d.scalar, scalar_name::<T>())));
        }
        let arch = &d.architecture;
        if arch.input_dim != 2 * d.joints || arch.output_dim != 3 * d.joints || arch.mdn.m != d.kernels {
            return Err(ckpt_err("descriptor N/M disagree with the architecture"));
        }
        if d.skeleton.joints() != d.joints {
            return Err(ckpt_err("skeleton joint count disagrees with N"));
        }

        let payload = &bytes[12 + len..];
        let total: usize = d.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
        if payload.len() != 8 * total {
            return Err(ckpt_err(format!("payload holds {} bytes, descriptor declares {}", payload.len(), 8 * total)));
        }
        let mut floats = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut entries = d.arrays.iter();
        let mut next = |expect: &str, shape: Option<&[usize]>| -> Result<Vec<f64>> {
            let e = entries.next().ok_or_else(|| ckpt_err(format!("missing array {expect}")))?;
            if e.name != expect {
                return Err(ckpt_err(format!("expected array {expect}, found {}", e.name)));
            }
            if let Some(s) = shape.filter(|s| *s != e.shape.as_slice()) {
                return Err(ckpt_err(format!("array {expect} has shape {:?}, architecture needs {s:?}", e.shape)));
            }
            let n: usize = e.shape.iter().product();
            Ok(floats.by_ref().take(n).collect())
        };

        // A throwaway initialization is fully overwritten below.
        let mut network = MdnNetwork::<T>::new(arch.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let params = param_names(&network);
        let buffers = buffer_names(&network);
        let mut loaded = Vec::with_capacity(params.len() + buffers.len());
        for (name, shape) in params.iter().chain(&buffers) {
            loaded.push(next(name, Some(shape))?);
        }
        let mut it = loaded.into_iter();
        let mut fill = |_: &str, t: &mut Tensor<T>| {
            for (dst, src) in t.data_mut().iter_mut().zip(it.next().unwrap()) {
                *dst = T::lit(src);
            }
        };
        network.visit_mut("", &mut fill);
        network.visit_buffers_mut("", &mut fill);

        let dims = [2 * d.joints, 2 * d.joints, 3 * d.joints, 3 * d.joints];
        let mut stat_arrays = Vec::with_capacity(4);
        for (name, dim) in STATS_FIELDS.iter().zip(dims) {
            stat_arrays.push(next(name, Some(&[dim]))?);
        }
        let mut sa = stat_arrays.into_iter();
        let stats = NormStats {
            mean_x: sa.next().unwrap(),
            std_x: sa.next().unwrap(),
            mean_y: sa.next().unwrap(),
            std_y: sa.next().unwrap(),
        };
        if stats.fingerprint() != d.stats_fingerprint {
            return Err(Error::Provenance("stored normalization statistics do not match their fingerprint".into()));
        }

        let state = match d.training {
            None => None,
            Some(tr) => {
                let lit = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
                let mut m = Vec::new();
                let mut v = Vec::new();
                if tr.adam.buffers > 0 {
                    if tr.adam.buffers != params.len() {
                        return Err(ckpt_err("optimizer buffers do not match the network's parameters"));
                    }
                    for (moment, out) in [("m", &mut m), ("v", &mut v)] {
                        for (name, shape) in &params {
                            out.push(lit(&next(&format!("adam.{moment}.{name}"), Some(shape))?));
                        }
                    }
                }
                if tr.rng.seed != tr.config.seed {
                    return Err(ckpt_err("RNG seed disagrees with the training config"));
                }
                tr.config.validate()?;
                Some(TrainState {
                    optimizer: AdamState {
                        step: tr.adam.step,
                        beta1: T::lit(tr.adam.beta1),
                        beta2: T::lit(tr.adam.beta2),
                        epsilon: T::lit(tr.adam.epsilon),
                        m,
                        v,
                    },
                    epoch: tr.rng.next_epoch,
                    history: tr.history,
                    config: tr.config,
                })
            }
        };
        if let Some(extra) = entries.next() {
            return Err(ckpt_err(format!("unexpected array {}", extra.name)));
        }
        Ok(Self { model: Model { network, stats, skeleton: d.skeleton }, state })
    }

    /// Writes through a temporary file so a failed save leaves the old one intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        let io = |e| Error::io(path, e);
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
