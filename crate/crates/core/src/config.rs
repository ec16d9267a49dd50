//! Flat `dotted.key = value` run configuration.
//!
//! Lines starting with `#` (and anything after a `#`) are comments. Unknown
//! keys are rejected. [`RunConfig::to_text`] writes every key and parses
//! back to the same configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;

/// Environment variable that replaces the `--config` path.
pub const CONFIG_ENV: &str = "PROTOPROMPT_CONFIG";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            seed: 0,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs"),
        }
    }
}

/// Every key accepted by the parser, in echo order. `backbone.profile` is
/// also accepted and applied before all other keys.
pub const KEYS: &[&str] = &[
    "seed",
    "paths.data_dir",
    "paths.run_dir",
    "data.image_size",
    "data.shift_knob",
    "data.unlabeled",
    "data.source_labeled",
    "data.target_test",
    "data.target_pool",
    "backbone.patch_size",
    "backbone.channels",
    "backbone.embed_dim",
    "backbone.num_layers",
    "backbone.num_heads",
    "backbone.mlp_ratio",
    "backbone.injection_layers",
    "backbone.init_gain",
    "backbone.ln_eps",
    "backbone.pixel_mean",
    "backbone.pixel_std",
    "backbone.position_scale",
    "spem.k",
    "spem.reduced_dim",
    "spem.hidden_dim",
    "spem.tau",
    "spem.refresh_interval",
    "spem.n_init",
    "spem.max_iter",
    "pretrain.epochs",
    "pretrain.batch_size",
    "pretrain.lr",
    "pretrain.weight_decay",
    "pretrain.warmup_epochs",
    "pretrain.beta1",
    "pretrain.beta2",
    "pretrain.eps",
    "pretrain.lambda1",
    "pretrain.lambda2",
    "pretrain.use_spem",
    "pretrain.use_dapa",
    "pretrain.align_dim",
    "pretrain.eval_size",
    "augment.crop_min",
    "augment.crop_max",
    "augment.aspect_min",
    "augment.aspect_max",
    "augment.flip",
    "augment.brightness",
    "augment.contrast",
    "augment.noise_sigma",
    "head.epochs",
    "head.batch_size",
    "head.lr",
    "head.weight_decay",
    "head.warmup_epochs",
    "head.focal_alpha",
    "head.focal_gamma",
    "eval.score_threshold",
    "eval.nms_iou",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn auto(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "auto" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn show_auto(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |n| n.to_string())
}

impl RunConfig {
    /// The experiment with every stage seeded from `self.seed`.
    pub fn resolved(&self) -> ExperimentConfig {
        self.experiment.seeded(self.seed)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let e = &self.experiment;
        let (b, p, h) = (&e.backbone, &e.pretrain, &e.head);
        let a = &p.augment;
        Some(match key {
            "seed" => self.seed.to_string(),
            "paths.data_dir" => self.data_dir.display().to_string(),
            "paths.run_dir" => self.run_dir.display().to_string(),
            "data.image_size" => e.data.image_size.to_string(),
            "data.shift_knob" => e.data.shift_knob.to_string(),
            "data.unlabeled" => e.data.unlabeled.to_string(),
            "data.source_labeled" => e.data.source_labeled.to_string(),
            "data.target_test" => e.data.target_test.to_string(),
            "data.target_pool" => e.data.target_pool.to_string(),
            "backbone.patch_size" => b.patch_size.to_string(),
            "backbone.channels" => b.channels.to_string(),
            "backbone.embed_dim" => b.embed_dim.to_string(),
            "backbone.num_layers" => b.num_layers.to_string(),
            "backbone.num_heads" => b.num_heads.to_string(),
            "backbone.mlp_ratio" => b.mlp_ratio.to_string(),
            "backbone.injection_layers" => b
                .injection_layers
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "backbone.init_gain" => b.init_gain.to_string(),
            "backbone.ln_eps" => b.ln_eps.to_string(),
            "backbone.pixel_mean" => b.pixel_mean.to_string(),
            "backbone.pixel_std" => b.pixel_std.to_string(),
            "backbone.position_scale" => b.position_scale.to_string(),
            "spem.k" => p.spem.num_prompts.to_string(),
            "spem.reduced_dim" => p.spem.reduced_dim.to_string(),
            "spem.hidden_dim" => show_auto(p.spem.hidden_dim),
            "spem.tau" => p.spem.temperature.to_string(),
            "spem.refresh_interval" => p.spem.refresh_interval.to_string(),
            "spem.n_init" => p.spem.n_init.to_string(),
            "spem.max_iter" => p.spem.max_iter.to_string(),
            "pretrain.epochs" => p.epochs.to_string(),
            "pretrain.batch_size" => p.batch_size.to_string(),
            "pretrain.lr" => p.optim.base_lr.to_string(),
            "pretrain.weight_decay" => p.optim.weight_decay.to_string(),
            "pretrain.warmup_epochs" => p.optim.warmup_epochs.to_string(),
            "pretrain.beta1" => p.optim.beta1.to_string(),
            "pretrain.beta2" => p.optim.beta2.to_string(),
            "pretrain.eps" => p.optim.eps.to_string(),
            "pretrain.lambda1" => p.weights.prompt.to_string(),
            "pretrain.lambda2" => p.weights.dapa.to_string(),
            "pretrain.use_spem" => p.use_spem.to_string(),
            "pretrain.use_dapa" => p.use_dapa.to_string(),
            "pretrain.align_dim" => show_auto(p.align_dim),
            "pretrain.eval_size" => p.eval_size.to_string(),
            "augment.crop_min" => a.crop_scale.0.to_string(),
            "augment.crop_max" => a.crop_scale.1.to_string(),
            "augment.aspect_min" => a.aspect.0.to_string(),
            "augment.aspect_max" => a.aspect.1.to_string(),
            "augment.flip" => a.flip.to_string(),
            "augment.brightness" => a.brightness.to_string(),
            "augment.contrast" => a.contrast.to_string(),
            "augment.noise_sigma" => a.noise_sigma.to_string(),
            "head.epochs" => h.epochs.to_string(),
            "head.batch_size" => h.batch_size.to_string(),
            "head.lr" => h.optim.base_lr.to_string(),
            "head.weight_decay" => h.optim.weight_decay.to_string(),
            "head.warmup_epochs" => h.optim.warmup_epochs.to_string(),
            "head.focal_alpha" => h.focal.alpha.to_string(),
            "head.focal_gamma" => h.focal.gamma.to_string(),
            "eval.score_threshold" => e.score_threshold.to_string(),
            "eval.nms_iou" => e.nms_iou.to_string(),
            _ => return None,
        })
    }

    /// Sets one key; the value is validated only syntactically here.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let e = &mut self.experiment;
        match key {
            "seed" => self.seed = num(key, v)?,
            "paths.data_dir" => self.data_dir = PathBuf::from(v),
            "paths.run_dir" => self.run_dir = PathBuf::from(v),
            "backbone.profile" => {
                e.backbone = match v {
                    "desk" => BackboneConfig::desk(),
                    "full" => BackboneConfig::full(),
                    _ => return Err(Error::Config(format!("{key}: unknown profile {v:?}"))),
                };
                e.data.image_size = e.backbone.image_size;
            }
            "data.image_size" => {
                e.data.image_size = num(key, v)?;
                e.backbone.image_size = e.data.image_size;
            }
            "data.shift_knob" => e.data.shift_knob = num(key, v)?,
            "data.unlabeled" => e.data.unlabeled = num(key, v)?,
            "data.source_labeled" => e.data.source_labeled = num(key, v)?,
            "data.target_test" => e.data.target_test = num(key, v)?,
            "data.target_pool" => e.data.target_pool = num(key, v)?,
            "backbone.patch_size" => e.backbone.patch_size = num(key, v)?,
            "backbone.channels" => e.backbone.channels = num(key, v)?,
            "backbone.embed_dim" => e.backbone.embed_dim = num(key, v)?,
            "backbone.num_layers" => e.backbone.num_layers = num(key, v)?,
            "backbone.num_heads" => e.backbone.num_heads = num(key, v)?,
            "backbone.mlp_ratio" => e.backbone.mlp_ratio = num(key, v)?,
            "backbone.injection_layers" => {
                e.backbone.injection_layers = if v.is_empty() {
                    Default::default()
                } else {
                    v.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "backbone.init_gain" => e.backbone.init_gain = num(key, v)?,
            "backbone.ln_eps" => e.backbone.ln_eps = num(key, v)?,
            "backbone.pixel_mean" => e.backbone.pixel_mean = num(key, v)?,
            "backbone.pixel_std" => e.backbone.pixel_std = num(key, v)?,
            "backbone.position_scale" => e.backbone.position_scale = num(key, v)?,
            "spem.k" => e.pretrain.spem.num_prompts = num(key, v)?,
            "spem.reduced_dim" => e.pretrain.spem.reduced_dim = num(key, v)?,
            "spem.hidden_dim" => e.pretrain.spem.hidden_dim = auto(key, v)?,
            "spem.tau" => e.pretrain.spem.temperature = num(key, v)?,
            "spem.refresh_interval" => e.pretrain.spem.refresh_interval = num(key, v)?,
            "spem.n_init" => e.pretrain.spem.n_init = num(key, v)?,
            "spem.max_iter" => e.pretrain.spem.max_iter = num(key, v)?,
            "pretrain.epochs" => {
                e.pretrain.epochs = num(key, v)?;
                e.pretrain.optim.total_epochs = e.pretrain.epochs;
            }
            "pretrain.batch_size" => e.pretrain.batch_size = num(key, v)?,
            "pretrain.lr" => e.pretrain.optim.base_lr = num(key, v)?,
            "pretrain.weight_decay" => e.pretrain.optim.weight_decay = num(key, v)?,
            "pretrain.warmup_epochs" => e.pretrain.optim.warmup_epochs = num(key, v)?,
            "pretrain.beta1" => e.pretrain.optim.beta1 = num(key, v)?,
            "pretrain.beta2" => e.pretrain.optim.beta2 = num(key, v)?,
            "pretrain.eps" => e.pretrain.optim.eps = num(key, v)?,
            "pretrain.lambda1" => e.pretrain.weights.prompt = num(key, v)?,
            "pretrain.lambda2" => e.pretrain.weights.dapa = num(key, v)?,
            "pretrain.use_spem" => e.pretrain.use_spem = boolean(key, v)?,
            "pretrain.use_dapa" => e.pretrain.use_dapa = boolean(key, v)?,
            "pretrain.align_dim" => e.pretrain.align_dim = auto(key, v)?,
            "pretrain.eval_size" => e.pretrain.eval_size = num(key, v)?,
            "augment.crop_min" => e.pretrain.augment.crop_scale.0 = num(key, v)?,
            "augment.crop_max" => e.pretrain.augment.crop_scale.1 = num(key, v)?,
            "augment.aspect_min" => e.pretrain.augment.aspect.0 = num(key, v)?,
            "augment.aspect_max" => e.pretrain.augment.aspect.1 = num(key, v)?,
            "augment.flip" => e.pretrain.augment.flip = boolean(key, v)?,
            "augment.brightness" => e.pretrain.augment.brightness = num(key, v)?,
            "augment.contrast" => e.pretrain.augment.contrast = num(key, v)?,
            "augment.noise_sigma" => e.pretrain.augment.noise_sigma = num(key, v)?,
            "head.epochs" => {
                e.head.epochs = num(key, v)?;
                e.head.optim.total_epochs = e.head.epochs;
            }
            "head.batch_size" => e.head.batch_size = num(key, v)?,
            "head.lr" => e.head.optim.base_lr = num(key, v)?,
            "head.weight_decay" => e.head.optim.weight_decay = num(key, v)?,
            "head.warmup_epochs" => e.head.optim.warmup_epochs = num(key, v)?,
            "head.focal_alpha" => e.head.focal.alpha = num(key, v)?,
            "head.focal_gamma" => e.head.focal.gamma = num(key, v)?,
            "eval.score_threshold" => e.score_threshold = num(key, v)?,
            "eval.nms_iou" => e.nms_iou = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `text` on top of `self`, then validates the result.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let location = format!("{origin}:{}", i + 1);
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    location,
                    message: format!("expected `key = value`, got {line:?}"),
                });
            };
            pairs.push((location, k.trim().to_string(), v.trim().to_string()));
        }
        // the profile replaces the whole backbone block, so it goes first
        pairs.sort_by_key(|(_, k, _)| k != "backbone.profile");
        for (location, k, v) in pairs {
            self.set(&k, &v).map_err(|e| Error::Parse {
                location,
                message: e.to_string(),
            })?;
        }
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, "<config>")?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let text = overrides.join("\n");
        self.apply_text(&text, "--set")
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# protoprompt run configuration\n");
        for k in KEYS {
            s.push_str(&format!("{k} = {}\n", self.get(k).expect("listed key")));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        e.backbone.validate()?;
        if e.backbone.image_size != e.data.image_size {
            return Err(Error::Config(format!(
                "backbone expects {} px images but data.image_size is {}",
                e.backbone.image_size, e.data.image_size
            )));
        }
        if !(0.0..=1.0).contains(&e.data.shift_knob) {
            return Err(Error::Config(format!("data.shift_knob {} outside [0, 1]", e.data.shift_knob)));
        }
        if e.data.unlabeled == 0 || e.data.source_labeled == 0 || e.data.target_test == 0 {
            return Err(Error::Config("data split sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&e.nms_iou) || !(0.0..1.0).contains(&e.score_threshold) {
            return Err(Error::Config("eval thresholds must lie in [0, 1]".into()));
        }
        e.pretrain.validate()?;
        e.head.validate()
    }
}

#[cfg(test)]
mod tests;
