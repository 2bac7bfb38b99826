use std::path::Path;

use mdnpose::camera::{load_cameras, save_cameras, side_camera, CameraModel};
use mdnpose::data::synth::{generate, generate_multiview};
use mdnpose::data::{load_companion, Companion, load_dataset, root_center, save_dataset, save_json, sibling, NormStats, Oracle, PoseDataset, SynthSpec};
use mdnpose::eval::{best_hypothesis, mpjpe, multiview_fuse, EvalConfig, FuseStrategy};
use mdnpose::train::{write_loss_log, TrainConfig, Trainer};
use mdnpose::{Checkpoint, Error, Result};

use crate::input::read_inputs;
use crate::{EvalArgs, FuseArgs, GenDataArgs, PredictArgs, Strategy, TrainArgs};

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, e.into())
}

/// Names the offending flag rather than the struct field.
fn as_flag(e: Error) -> Error {
    match e {
        Error::Config { field, message } => Error::Config { field: format!("--{}", field.replace('_', "-")), message },
        other => other,
    }
}

fn save_with_stats(ds: &PoseDataset, path: &Path) -> Result<()> {
    let (stats, warning) = NormStats::compute(&ds.samples, &ds.skeleton)?;
    if let Some(w) = warning {
        eprintln!("warning: {}: {w}", path.display());
    }
    save_dataset(ds, Some(&stats), path)?;
    println!("wrote {} ({} samples, N={})", path.display(), ds.len(), ds.joints());
    Ok(())
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SynthSpec {
        bones: a.bones,
        bone_lengths: a.bone_lengths,
        samples: a.samples,
        reflection_mix: a.reflection_mix,
        seed: a.seed,
        ..SynthSpec::default()
    };
    spec.validate().map_err(as_flag)?;
    if a.views == 1 {
        let (ds, _) = generate(&spec)?;
        save_with_stats(&ds, &a.out)?;
    } else {
        let cams = [CameraModel::identity(0), side_camera(1)];
        let (_, views) = generate_multiview(&spec, &cams)?;
        save_with_stats(&views[0], &a.out)?;
        save_with_stats(&views[1], &sibling(&a.out, "cam1.csv"))?;
        save_cameras(&cams, &sibling(&a.out, "cameras.json"))?;
    }
    let oracle_path = sibling(&a.out, "oracle.json");
    save_json(&spec.oracle(), &oracle_path)?;
    println!("wrote {}", oracle_path.display());
    Ok(())
}

fn resolve_config(a: &TrainArgs, base: Option<TrainConfig>) -> Result<TrainConfig> {
    let mut c = match (&a.config, base) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, Some(b)) => b,
        (None, None) => TrainConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => {$(if let Some(v) = a.$f.clone() { c.$f = v; })*};
    }
    set!(seed, m, lambda, gamma_elu, lr, decay_rate, decay_steps, batch_size, epochs, dropout, max_norm, occlusion_k, width, blocks, validation_fraction);
    if a.data.is_some() {
        c.data = a.data.clone();
    }
    if a.checkpoint.is_some() {
        c.checkpoint = a.checkpoint.clone();
    }
    if a.loss_log.is_some() {
        c.loss_log = a.loss_log.clone();
    }
    c.validate()?;
    Ok(c)
}

/// Fields that may change between a run and its continuation.
fn resumable_view(c: &TrainConfig) -> TrainConfig {
    TrainConfig { epochs: 0, data: None, checkpoint: None, loss_log: None, ..c.clone() }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let resumed = a.resume.as_deref().map(Checkpoint::<f64>::load).transpose()?;
    let base = resumed.as_ref().and_then(|c| c.state.as_ref()).map(|s| s.config.clone());
    let cfg = resolve_config(&a, base)?;
    if a.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let data = cfg.data.clone().ok_or_else(|| Error::config("data", "no dataset given (--data or `data` in the config)"))?;
    let ckpt_path = match (&cfg.checkpoint, &a.resume) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => p.clone(),
        (None, None) => sibling(&data, "ckpt"),
    };
    let log_path = cfg.loss_log.clone().unwrap_or_else(|| sibling(&ckpt_path, "loss.csv"));
    let ds = load_dataset(&data)?;

    let mut trainer = match resumed {
        Some(ck) => {
            let mut state = ck.state.ok_or_else(|| Error::Checkpoint("checkpoint holds no optimizer state to resume from".into()))?;
            if resumable_view(&state.config) != resumable_view(&cfg) {
                return Err(Error::config("resume", "settings differ from the checkpoint's; only epochs and paths may change"));
            }
            state.config = cfg;
            Trainer::resume(ck.model, state, &ds)?
        }
        None => {
            let (t, warning) = Trainer::new(cfg, &ds)?;
            if let Some(w) = warning {
                eprintln!("warning: {w}");
            }
            // an untrained checkpoint, so a first-epoch abort still leaves one behind
            Checkpoint::new(t.model.clone(), Some(t.state.clone())).save(&ckpt_path)?;
            t
        }
    };
    // the statistics the model normalizes with, for `eval --stats`
    let stats_out = sibling(&ckpt_path, "stats.json");
    save_json(&Companion { skeleton: trainer.model.skeleton.clone(), stats: Some(trainer.model.stats.clone()) }, &stats_out)?;
    if !a.quiet {
        println!("training on {} samples, validating on {}", trainer.train_len(), trainer.val_len());
    }
    let quiet = a.quiet;
    let outcome = trainer.fit(|t, log| {
        Checkpoint::new(t.model.clone(), Some(t.state.clone())).save(&ckpt_path)?;
        write_loss_log(&t.state.history, &log_path)?;
        if !quiet {
            println!(
                "epoch {:>4}  train {:>12.6}  val {:>12.6}  lr {:.3e}",
                log.epoch, log.train_loss, log.val_loss, log.lr
            );
        }
        Ok(())
    });
    if let Err(e @ Error::NumericAbort { .. }) = outcome {
        eprintln!("last good checkpoint kept at {}", ckpt_path.display());
        return Err(e);
    }
    outcome?;
    println!("wrote {}, {} and {}", ckpt_path.display(), log_path.display(), stats_out.display());
    Ok(())
}

fn eval_config(ds: &PoseDataset, metric: bool, allow_scale: bool) -> EvalConfig {
    let mut cfg = if metric {
        EvalConfig::metric()
    } else {
        let n = ds.len().max(1) as f64;
        EvalConfig::for_chain_length(ds.samples.iter().map(|s| ds.skeleton.total_length(&s.y)).sum::<f64>() / n)
    };
    cfg.allow_scale = allow_scale;
    cfg
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::<f64>::load(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    ck.expect(Some(ds.joints()), None)?;
    if let Some(p) = &a.stats {
        let stats = load_companion(p)?.stats.ok_or_else(|| Error::config("stats", format!("{} holds no statistics", p.display())))?;
        if stats.fingerprint() != ck.model.stats.fingerprint() {
            return Err(Error::Provenance(format!(
                "{} was not the normalization the checkpoint was trained with",
                p.display()
            )));
        }
    }
    let oracle: Option<Oracle> = match &a.oracle {
        None => None,
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Parse { path: p.clone(), line: e.line(), message: e.to_string() })?)
        }
    };
    let cfg = eval_config(&ds, a.metric, a.allow_scale);
    let modes = oracle.as_ref().map(|o| move |s: &mdnpose::data::PoseSample| o.modes(&s.x));
    let (mut report, _) = ck.model.evaluate(&ds, &cfg, modes.as_ref().map(|f| f as &dyn Fn(&_) -> _))?;
    if a.occlude_k > 0 {
        report.degradation = ck.model.degradation(&ds, &cfg, a.occlude_k, a.seed)?;
    }
    print!("{report}");
    if let Some(p) = &a.json {
        std::fs::write(p, report.to_json() + "\n").map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn coord_headers(joints: usize) -> impl Iterator<Item = String> {
    (0..joints).flat_map(|j| ["x", "y", "z"].map(move |c| format!("j{j}_{c}")))
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let ck = Checkpoint::<f64>::load(&a.checkpoint)?;
    let n = ck.joints();
    let inputs = read_inputs(&a.input, n)?;
    let sets = ck.model.hypotheses(&inputs.samples)?;
    let mut w = csv::Writer::from_path(&a.out).map_err(csv_err(&a.out))?;
    let header: Vec<String> =
        ["row", "rank", "hypothesis", "alpha", "sigma"].into_iter().map(String::from).chain(coord_headers(n)).collect();
    w.write_record(&header).map_err(csv_err(&a.out))?;
    for (row, hs) in sets.iter().enumerate() {
        let mut order: Vec<usize> = (0..hs.len()).collect();
        order.sort_by(|&p, &q| hs.alphas[q].total_cmp(&hs.alphas[p]));
        for (rank, &i) in order.iter().enumerate() {
            let mut rec = vec![row.to_string(), rank.to_string(), i.to_string(), hs.alphas[i].to_string(), hs.sigmas[i].to_string()];
            rec.extend(hs.poses[i].iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err(&a.out))?;
        }
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    println!("wrote {} hypotheses for {} rows to {}", ck.kernels(), sets.len(), a.out.display());
    Ok(())
}

fn view_camera(path: &Path, position: usize, samples: &[mdnpose::data::PoseSample], cams: &[CameraModel]) -> Result<CameraModel> {
    let ids: Vec<Option<u32>> = samples.iter().map(|s| s.camera).collect();
    let id = match ids.first().copied().flatten() {
        Some(first) if ids.iter().all(|&c| c == Some(first)) => first,
        None if ids.iter().all(Option::is_none) => {
            return cams.get(position).cloned().ok_or_else(|| {
                Error::config("view", format!("{} has no camera ids and there is no camera #{position}", path.display()))
            })
        }
        _ => return Err(Error::config("view", format!("{} mixes camera ids", path.display()))),
    };
    cams.iter()
        .find(|c| c.id == id)
        .cloned()
        .ok_or_else(|| Error::config("view", format!("{} is from camera {id}, which the camera file does not define", path.display())))
}

pub fn fuse_views(a: FuseArgs) -> Result<()> {
    if a.views.len() < 2 {
        return Err(Error::Fusion("fusion needs at least two views; use `predict` for a single camera".into()));
    }
    let ck = Checkpoint::<f64>::load(&a.checkpoint)?;
    let n = ck.joints();
    let root = ck.model.skeleton.root();
    let all_cams = load_cameras(&a.cameras)?;
    let mut cams = Vec::new();
    let mut inputs = Vec::new();
    for (i, path) in a.views.iter().enumerate() {
        let inp = read_inputs(path, n)?;
        cams.push(view_camera(path, i, &inp.samples, &all_cams)?);
        inputs.push(inp);
    }
    let count = inputs[0].samples.len();
    if let Some((p, inp)) = a.views.iter().zip(&inputs).find(|(_, inp)| inp.samples.len() != count) {
        return Err(Error::config("view", format!("{} has {} rows, expected {count}", p.display(), inp.samples.len())));
    }
    let sets: Vec<_> = inputs.iter().map(|inp| ck.model.hypotheses(&inp.samples)).collect::<Result<_>>()?;
    let strategy = match a.strategy {
        Strategy::Auto => FuseStrategy::Auto,
        Strategy::Exhaustive => FuseStrategy::Exhaustive,
        Strategy::Greedy => FuseStrategy::Greedy,
    };
    let truth = inputs[0].has_truth;
    let (mut fused_err, mut mono_err) = (0.0, 0.0);

    let mut w = csv::Writer::from_path(&a.out).map_err(csv_err(&a.out))?;
    let header: Vec<String> = ["row", "selection", "cost"].into_iter().map(String::from).chain(coord_headers(n)).collect();
    w.write_record(&header).map_err(csv_err(&a.out))?;
    for s in 0..count {
        let per_view: Vec<_> = sets.iter().map(|v| v[s].clone()).collect();
        let fusion = multiview_fuse(&per_view, &cams, strategy)?;
        let selection: Vec<String> = fusion.selection.iter().map(usize::to_string).collect();
        let mut rec = vec![s.to_string(), selection.join(";"), fusion.cost.to_string()];
        rec.extend(fusion.pose.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err(&a.out))?;
        if truth {
            let mut gt_cam = inputs[0].samples[s].y.clone();
            root_center(&mut gt_cam, root);
            let mut gt_world = cams[0].camera_to_world(&gt_cam);
            root_center(&mut gt_world, root);
            let mut pose = fusion.pose;
            root_center(&mut pose, root);
            fused_err += mpjpe(&pose, &gt_world)?;
            mono_err += best_hypothesis(&per_view[0], &gt_cam)?.1;
        }
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    println!("fused {count} samples from {} views into {}", cams.len(), a.out.display());
    if truth && count > 0 {
        let k = count as f64;
        println!("fused MPJPE {:.6}", fused_err / k);
        println!("monocular best-hypothesis MPJPE (camera {}) {:.6}", cams[0].id, mono_err / k);
    }
    Ok(())
}
