//! Training loop, metrics log and model evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{error, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::eval::{evaluate, ApInterpolation, EvalReport};
use crate::harness::scene::{gen_dataset, Scene};
use crate::harness::sampling::sampling_stats;
use crate::model::{Detection, Model};
use crate::numcore::{AdamW, Graph};

/// Keeps evaluation scenes disjoint from training scenes.
const EVAL_SEED_SALT: u64 = 0x00E7_A1u64 << 32;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SNAPSHOT_FILE: &str = "model.rtrw";
pub const CONFIG_FILE: &str = "config.txt";

/// One metrics-log line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub iou: f64,
    pub first_stage: f64,
    pub lr: f64,
}

pub fn train_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    gen_dataset(cfg.train.seed, cfg.train.train_scenes, &cfg.scene)
}

pub fn eval_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    gen_dataset(cfg.train.seed ^ EVAL_SEED_SALT, cfg.train.eval_scenes, &cfg.scene)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct DivergenceDump {
    step: usize,
    scene_seeds: Vec<u64>,
    loss: f64,
}

/// Loss of one batch; gradients are left accumulated in the returned graph's
/// parameter leaves.
fn batch_step(model: &Model, batch: &[&Scene]) -> Result<(LogRecord, Vec<Vec<f64>>)> {
    let g = Graph::new();
    let p = model.params.bind(&g);
    let mut total = None;
    let mut rec = LogRecord {
        step: 0,
        loss: 0.0,
        cls: 0.0,
        reg: 0.0,
        iou: 0.0,
        first_stage: 0.0,
        lr: 0.0,
    };
    let scale = 1.0 / batch.len() as f64;
    for scene in batch {
        let out = model.forward(&p, g.constant(scene.image.clone()))?;
        let l = model.loss(&out, &scene.targets)?;
        rec.cls += l.cls * scale;
        rec.reg += l.reg * scale;
        rec.iou += l.iou * scale;
        rec.first_stage += l.first_stage * scale;
        let t = l.total.scale(scale);
        total = Some(match total {
            None => t,
            Some(acc) => acc + t,
        });
    }
    let total = total.ok_or_else(|| Error::input("empty batch"))?;
    rec.loss = total.item();
    if !rec.loss.is_finite() {
        return Ok((rec, Vec::new()));
    }
    g.backward(total)?;
    Ok((rec, p.grads()))
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Train a fresh model on `data`. Each logged record is passed to `sink`.
///
/// A non-finite loss aborts with [`Error::Diverged`], naming the seeds of the
/// offending batch.
pub fn train(cfg: &RunConfig, data: &[Scene], mut sink: impl FnMut(&LogRecord) -> Result<()>) -> Result<Model> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::input("no training scenes"));
    }
    let t = &cfg.train;
    let mut model = Model::new(cfg.model.clone(), t.seed)?;
    let mut opt = AdamW::new(&model.params, t.lr, t.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed.wrapping_add(1));
    for step in 0..t.steps {
        let batch: Vec<&Scene> = (0..t.batch_size).map(|_| &data[rng.gen_range(0..data.len())]).collect();
        let (mut rec, mut grads) = batch_step(&model, &batch)?;
        rec.step = step;
        rec.lr = t.lr_at(step);
        if !rec.loss.is_finite() {
            let dump = DivergenceDump {
                step,
                scene_seeds: batch.iter().map(|s| s.seed).collect(),
                loss: rec.loss,
            };
            let detail = serde_json::to_string(&dump).unwrap_or_default();
            error!("non-finite loss: {detail}");
            return Err(Error::Diverged { step, detail });
        }
        if step % t.log_every == 0 || step + 1 == t.steps {
            sink(&rec)?;
        }
        clip(&mut grads, t.grad_clip);
        opt.step(&mut model.params, &grads, rec.lr);
    }
    Ok(model)
}

pub fn predict_all(model: &Model, scenes: &[Scene]) -> Result<Vec<Vec<Detection>>> {
    scenes.iter().map(|s| model.predict(&s.image)).collect()
}

pub fn evaluate_model(model: &Model, scenes: &[Scene], interp: ApInterpolation) -> Result<EvalReport> {
    let preds = predict_all(model, scenes)?;
    let gts: Vec<_> = scenes.iter().map(|s| s.targets.clone()).collect();
    let mut report = evaluate(&preds, &gts, model.cfg.num_classes, interp);
    report.containment = Some(sampling_stats(model, scenes)?.in_target);
    Ok(report)
}

/// Train with metrics log, snapshot and config written to `out_dir`.
pub fn run_training(cfg: &RunConfig, out_dir: &Path) -> Result<Model> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.to_text())?;
    let data = train_scenes(cfg)?;
    let mut log = BufWriter::new(File::create(out_dir.join(METRICS_FILE))?);
    let result = train(cfg, &data, |rec| {
        info!("step {} loss {:.4}", rec.step, rec.loss);
        serde_json::to_writer(&mut log, rec).map_err(|e| Error::Format(e.to_string()))?;
        log.write_all(b"\n")?;
        Ok(())
    });
    log.flush()?;
    if let Err(Error::Diverged { detail, .. }) = &result {
        fs::write(out_dir.join("diverged.json"), detail)?;
    }
    let model = result?;
    model.params.save(out_dir.join(SNAPSHOT_FILE))?;
    Ok(model)
}

/// Rebuild a trained model from a run directory.
pub fn load_run(dir: &Path) -> Result<(RunConfig, Model)> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let snap = crate::numcore::ParamStore::load(dir.join(SNAPSHOT_FILE))?;
    let n = model.params.load_matching(&snap)?;
    if n != model.params.len() {
        return Err(Error::Format(format!(
            "snapshot provides {n} of {} parameters",
            model.params.len()
        )));
    }
    Ok((cfg, model))
}
