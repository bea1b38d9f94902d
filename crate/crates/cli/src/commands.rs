use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use log::info;
use serde_json::{json, Value};
use videosaur::decoder::{DecodeProbe, DecoderShape};
use videosaur::formats::{read_features, write_masks, write_targets, MaskFile};
use videosaur::model::evaluate_block_pattern;
use videosaur::targets::build_targets;
use videosaur::{DecoderConfig, DecoderKind, MetricsReport, TrainConfig, Trainer};

use crate::config;
use crate::error::CliError;
use crate::ConfigArgs;

/// Default held-out seed; training data never uses it unless asked to.
pub const EVAL_SEED: u64 = 1_000_003;

pub const CHECKPOINT_FILE: &str = "checkpoint.vsck";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// Writes `value` to stdout; a closed pipe is not an error.
fn print_json(value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io(Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

pub fn print_config(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = config::load(args.config.as_deref(), &args.sets)?;
    print_json(&serde_json::to_value(cfg).expect("config serializes"))
}

pub fn train(args: &ConfigArgs, out: &Path, resume: bool, until: Option<u64>) -> Result<(), CliError> {
    let cfg = config::load(args.config.as_deref(), &args.sets)?;
    create_dir(out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let mut trainer = if resume {
        Trainer::resume(&ckpt, &cfg).map_err(CliError::file(&ckpt))?
    } else {
        Trainer::new(cfg.clone())?
    };
    write_json(&out.join("config.json"), &cfg)?;
    let until = until.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    info!("training from step {} to {until}", trainer.step);

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = Arc::clone(&stop);
        // A second handler cannot be installed within one process; training
        // then simply runs without SIGINT checkpointing.
        let _ = ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst));
    }

    let log_path = out.join("train_log.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    let mut io_error: Option<CliError> = None;
    let started = Instant::now();
    trainer.run(until, |t, rep| {
        let every = t.config.log_every.max(1);
        if rep.step % every == 0 || rep.step == until {
            info!(
                "step {} loss {:.4} (sim {:.4} rec {:.4}) lr {:.2e} grad {:.3} {:.1}s",
                rep.step,
                rep.loss.total,
                rep.loss.sim,
                rep.loss.rec,
                rep.lr,
                rep.grad_norm,
                started.elapsed().as_secs_f64()
            );
            let line = serde_json::to_string(rep).expect("report serializes");
            if let Err(e) = writeln!(log, "{line}") {
                io_error = Some(CliError::io(&log_path, e));
                return Ok(false);
            }
        }
        let every = t.config.checkpoint_every;
        if every > 0 && rep.step % every == 0 {
            t.save(&ckpt)?;
        }
        Ok(!stop.load(Ordering::SeqCst))
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    trainer.save(&ckpt).map_err(CliError::file(&ckpt))?;
    if stop.load(Ordering::SeqCst) && trainer.step < until {
        return Err(CliError::Interrupted(ckpt));
    }
    info!("saved {}", ckpt.display());
    Ok(())
}

fn metrics_json(r: &MetricsReport) -> Value {
    json!({
        "fg_ari_video": r.fg_ari_video,
        "mbo_video": r.mbo_video,
        "fg_ari_image": r.fg_ari_image_mean,
        "mbo_image": r.mbo_image_mean,
        "empty_foreground_videos": r.empty_foreground_videos,
    })
}

/// Loads a checkpoint and applies `--set` overrides to its `data` section.
pub fn load_for_inference(checkpoint: &Path, sets: &[String]) -> Result<Trainer, CliError> {
    let mut trainer = Trainer::load(checkpoint).map_err(CliError::file(checkpoint))?;
    if let Some(bad) = sets.iter().find(|s| !s.starts_with("data.")) {
        return Err(CliError::Config(format!(
            "only data.* keys can be overridden at evaluation, got `{bad}`"
        )));
    }
    if !sets.is_empty() {
        let base = serde_json::to_value(&trainer.config).expect("config serializes");
        let tmp = config::overlay(base, sets)?;
        trainer.config.data = tmp.data;
    }
    Ok(trainer)
}

pub fn eval(checkpoint: &Path, slots: Option<usize>, videos: u64, seed: u64, sets: &[String]) -> Result<(), CliError> {
    let trainer = load_for_inference(checkpoint, sets)?;
    let k = slots.unwrap_or(trainer.config.model.num_slots);
    if k == 0 {
        return Err(CliError::Config("--slots must be at least 1".into()));
    }
    if videos == 0 {
        return Err(CliError::Config("--videos must be at least 1".into()));
    }
    let data = &trainer.config.data;
    let report = trainer.evaluate(data, seed, videos, k)?;
    let baseline = evaluate_block_pattern(data, seed, videos, trainer.config.model.num_slots)?;
    print_json(&json!({
        "checkpoint": checkpoint.display().to_string(),
        "step": trainer.step,
        "num_slots": k,
        "trained_slots": trainer.config.model.num_slots,
        "num_videos": videos,
        "seed": seed,
        "metrics": metrics_json(&report),
        "block_baseline": metrics_json(&baseline),
    }))
}

pub fn targets(features: &Path, out: &Path, k: usize, tau: f64, stats: Option<&Path>) -> Result<(), CliError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(CliError::Config(format!("--tau must be positive, got {tau}")));
    }
    let blocks = read_features(features).map_err(CliError::file(features))?;
    let mut probs = Vec::with_capacity(blocks.len());
    let mut per_video = Vec::with_capacity(blocks.len());
    for b in &blocks {
        let t = build_targets(b, k, tau).map_err(CliError::file(features))?;
        per_video.push(t.stats());
        probs.push(t.probs);
    }
    write_targets(out, &probs).map_err(CliError::file(out))?;
    let stats_path = stats.map_or_else(|| out.with_extension("json"), Path::to_path_buf);
    write_json(
        &stats_path,
        &json!({
            "features": features.display().to_string(),
            "shift": k,
            "temperature": tau,
            "num_videos": blocks.len(),
            "degenerate_rows": per_video.iter().map(|s| s.degenerate_rows).sum::<usize>(),
            "videos": per_video,
        }),
    )?;
    info!("wrote {} and {}", out.display(), stats_path.display());
    Ok(())
}

pub struct BenchArgs {
    pub decoder: String,
    pub slots: Vec<usize>,
    pub reps: usize,
    pub patches: usize,
    pub slot_dim: usize,
    pub features: usize,
    pub hidden: usize,
}

pub fn bench(a: &BenchArgs) -> Result<(), CliError> {
    let kind: DecoderKind = a.decoder.parse().map_err(|e: videosaur::Error| CliError::Config(e.to_string()))?;
    if a.slots.is_empty() || a.reps == 0 {
        return Err(CliError::Config("--slots and --reps must be non-empty".into()));
    }
    let shape = DecoderShape {
        num_patches: a.patches,
        slot_dim: a.slot_dim,
        feature_dim: a.features,
    };
    let cfg = DecoderConfig {
        kind,
        hidden: a.hidden,
        alloc_hidden: a.hidden,
        ..DecoderConfig::default()
    };
    let mut runs = Vec::with_capacity(a.slots.len());
    for &k in &a.slots {
        let probe = DecodeProbe::new(shape, &cfg, k, 0)?;
        let flops = probe.run()?;
        let mut best = f64::INFINITY;
        for _ in 0..a.reps {
            let start = Instant::now();
            probe.run()?;
            best = best.min(start.elapsed().as_secs_f64());
        }
        runs.push((k, best, flops));
    }
    let (k0, t0, f0) = runs[0];
    let (k1, t1, f1) = runs[runs.len() - 1];
    print_json(&json!({
        "decoder": a.decoder,
        "num_patches": a.patches,
        "slot_dim": a.slot_dim,
        "reps": a.reps,
        "runs": runs.iter().map(|&(k, t, f)| json!({
            "slots": k,
            "seconds": t,
            "flops": f,
        })).collect::<Vec<_>>(),
        "ratio": {
            "from_slots": k0,
            "to_slots": k1,
            "time": t1 / t0,
            "flops": f1 as f64 / f0 as f64,
        },
    }))
}

pub fn export(args: &ConfigArgs, out: &Path, videos: u64, seed: u64) -> Result<(), CliError> {
    let cfg: TrainConfig = config::load(args.config.as_deref(), &args.sets)?;
    create_dir(out)?;
    let mut inputs = Vec::with_capacity(videos as usize);
    let mut targets = Vec::with_capacity(videos as usize);
    let mut ids = Vec::new();
    for i in 0..videos {
        let v = videosaur::data::generate(&cfg.data, seed, i)?;
        let (a, b) = videosaur::features::extract_synthetic(&v, &cfg.features)?;
        inputs.push(a);
        targets.push(b);
        ids.extend_from_slice(&v.gt_masks);
    }
    let paths: [PathBuf; 3] = [
        out.join("inputs.vsft"),
        out.join("targets.vsft"),
        out.join("masks.vsmk"),
    ];
    let write = |p: &Path, blocks| videosaur::formats::write_features(p, blocks).map_err(CliError::file(p));
    write(&paths[0], &inputs)?;
    write(&paths[1], &targets)?;
    let masks = MaskFile {
        num_videos: videos as usize,
        num_frames: cfg.data.clip_len,
        num_patches: cfg.data.num_patches(),
        ids,
    };
    write_masks(&paths[2], &masks).map_err(CliError::file(&paths[2]))?;
    write_json(&out.join("config.json"), &cfg)?;
    info!("exported {videos} videos to {}", out.display());
    Ok(())
}
