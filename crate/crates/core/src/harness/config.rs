//! Flat `key = value` run configuration covering model, optimizer and data.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::scene::SceneParams;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Fraction of the run after which the learning rate drops 10x.
    pub lr_drop_at: f64,
    pub log_every: usize,
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            steps: 2000,
            batch_size: 2,
            grad_clip: 0.1,
            lr_drop_at: 0.8,
            log_every: 50,
            seed: 0,
            train_scenes: 200,
            eval_scenes: 50,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if (step as f64) < self.lr_drop_at * self.steps as f64 {
            self.lr
        } else {
            self.lr * 0.1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneParams,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    /// Desk-scale preset for the dense scenes: a raised learning rate so
    /// that 2000 steps of batch 2 separate the ablation variants.
    pub fn desk() -> Self {
        RunConfig {
            train: TrainConfig {
                lr: 1e-3,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// Apply one setting; unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "image_size" => {
                self.model.image_size = num(key, v)?;
                self.scene.image_size = self.model.image_size;
            }
            "num_classes" => {
                self.model.num_classes = num(key, v)?;
                self.scene.num_classes = self.model.num_classes;
            }
            "lr" => self.train.lr = num(key, v)?,
            "weight_decay" => self.train.weight_decay = num(key, v)?,
            "steps" => self.train.steps = num(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "grad_clip" => self.train.grad_clip = num(key, v)?,
            "lr_drop_at" => self.train.lr_drop_at = num(key, v)?,
            "log_every" => self.train.log_every = num(key, v)?,
            "seed" => self.train.seed = num(key, v)?,
            "train_scenes" => self.train.train_scenes = num(key, v)?,
            "eval_scenes" => self.train.eval_scenes = num(key, v)?,
            "preset" => self.scene.preset = v.parse()?,
            "density" => self.scene.density = num(key, v)?,
            "noise" => self.scene.noise = num(key, v)?,
            "overlap_cap" => self.scene.overlap_cap = num(key, v)?,
            "long_min" => self.scene.long_side.0 = num(key, v)?,
            "long_max" => self.scene.long_side.1 = num(key, v)?,
            "aspect_min" => self.scene.aspect.0 = num(key, v)?,
            "aspect_max" => self.scene.aspect.1 = num(key, v)?,
            _ => {
                if !self.model.set(key, v)? {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        let t = &self.train;
        if !(t.lr > 0.0) || t.batch_size == 0 || t.log_every == 0 || t.train_scenes == 0 || t.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid training settings {t:?}")));
        }
        if self.model.image_size != self.scene.image_size || self.model.num_classes != self.scene.num_classes {
            return Err(Error::Config("model and scene disagree on image size or classes".into()));
        }
        Ok(())
    }

    /// Every setting with its current value, model keys first.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let s = &self.scene;
        let mut out = self.model.entries();
        out.extend([
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("lr_drop_at", t.lr_drop_at.to_string()),
            ("log_every", t.log_every.to_string()),
            ("seed", t.seed.to_string()),
            ("train_scenes", t.train_scenes.to_string()),
            ("eval_scenes", t.eval_scenes.to_string()),
            ("preset", s.preset.to_string()),
            ("density", s.density.to_string()),
            ("noise", s.noise.to_string()),
            ("overlap_cap", s.overlap_cap.to_string()),
            ("long_min", s.long_side.0.to_string()),
            ("long_max", s.long_side.1.to_string()),
            ("aspect_min", s.aspect.0.to_string()),
            ("aspect_max", s.aspect.1.to_string()),
        ]);
        out
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Every setting, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.set("alpha", "inf").unwrap();
        cfg.set("preset", "sparse").unwrap();
        cfg.set("image_size", "32").unwrap();
        cfg.set("lr", "0.0005").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("steps 10").is_err());
        assert!(RunConfig::parse("steps = ten").is_err());
        let c = RunConfig::parse("# comment\nsteps = 7 # trailing\n").unwrap();
        assert_eq!(c.train.steps, 7);
    }

    #[test]
    fn every_key_is_settable() {
        let base = RunConfig::desk();
        for (k, v) in base.entries() {
            let mut c = RunConfig::default();
            c.set(k, &v).unwrap();
        }
        let keys = RunConfig::keys();
        let mut dedup = keys.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), keys.len());
    }
}
