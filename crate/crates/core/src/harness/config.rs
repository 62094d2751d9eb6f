//! Flat `section.key = value` experiment configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Every key has a
//! default; unknown or repeated keys are errors. Floats are written with
//! Rust's shortest round-trip formatting, so `parse(to_text())` is exact.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::detector::{ModelConfig, Optimizer, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{ClsLossKind, TargetKind};
use crate::matching::{HighOrderBase, MatcherSchedule};
use crate::rank::PositionalVariant;
use crate::scene::GenConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Model init and scene-order seed; `--seed` overrides it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub gen: GenConfig,
    /// `classes`, `grid` and `feature_dim` follow `gen`; `init_seed` follows `seed`.
    pub model: ModelConfig,
    /// `seed` follows the experiment seed.
    pub train: TrainConfig,
    /// Detections kept per scene for evaluation.
    pub top_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data_seed: 0,
            train_scenes: 2000,
            val_scenes: 500,
            gen: GenConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            top_k: 100,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true|false, got `{v}`"))),
    }
}

fn parse_enum<T: std::str::FromStr<Err = String>>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|e: String| Error::Config(format!("`{key}`: {e}")))
}

impl ExperimentConfig {
    /// `(key, value)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = |x: f64| format!("{x:?}");
        let (m, t, gen) = (&self.model, &self.train, &self.gen);
        vec![
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("data.seed", self.data_seed.to_string()),
            ("data.train_scenes", self.train_scenes.to_string()),
            ("data.val_scenes", self.val_scenes.to_string()),
            ("data.grid", gen.grid.to_string()),
            ("data.feature_dim", gen.dim.to_string()),
            ("data.classes", gen.num_classes.to_string()),
            ("data.max_objects", gen.max_objects.to_string()),
            ("data.noise", f(gen.noise)),
            ("data.min_size", f(gen.min_size)),
            ("data.max_size", f(gen.max_size)),
            ("data.max_mutual_iou", f(gen.max_mutual_iou)),
            ("data.bump_scale", f(gen.bump_scale)),
            ("data.signature_seed", gen.signature_seed.to_string()),
            ("model.layers", m.layers.to_string()),
            ("model.queries", m.queries.to_string()),
            ("model.width", m.width.to_string()),
            ("model.attn_prior", m.attn_prior.to_string()),
            ("rank.enable_head", m.rank_head.to_string()),
            ("rank.enable_qrl", m.query_rank.to_string()),
            ("rank.positional_variant", m.positional.as_str().into()),
            ("loss.cls_kind", t.cls.kind.as_str().into()),
            ("loss.target_kind", t.cls.target.kind.as_str().into()),
            ("loss.target_power", f(t.cls.target.power)),
            ("loss.lambda_giou", f(t.weights.lambda_giou)),
            ("loss.lambda_l1", f(t.weights.lambda_l1)),
            ("loss.lambda_cls", f(t.weights.lambda_cls)),
            ("loss.gamma", f(t.weights.gamma)),
            ("matcher.enable_high_order", t.high_order.to_string()),
            ("matcher.alpha", f(t.matcher.alpha)),
            ("matcher.switch_fraction", f(t.matcher.schedule.switch_fraction)),
            ("matcher.high_order_base", t.matcher.base.as_str().into()),
            ("train.steps", t.steps.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.optimizer", t.optimizer.as_str().into()),
            ("train.rate", f(t.rate)),
            ("train.weight_decay", f(t.weight_decay)),
            ("train.clip", f(t.clip)),
            ("eval.top_k", self.top_k.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, gen) = (&mut self.model, &mut self.train, &mut self.gen);
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data.seed" => self.data_seed = parse_num(key, v)?,
            "data.train_scenes" => self.train_scenes = parse_num(key, v)?,
            "data.val_scenes" => self.val_scenes = parse_num(key, v)?,
            "data.grid" => gen.grid = parse_num(key, v)?,
            "data.feature_dim" => gen.dim = parse_num(key, v)?,
            "data.classes" => gen.num_classes = parse_num(key, v)?,
            "data.max_objects" => gen.max_objects = parse_num(key, v)?,
            "data.noise" => gen.noise = parse_num(key, v)?,
            "data.min_size" => gen.min_size = parse_num(key, v)?,
            "data.max_size" => gen.max_size = parse_num(key, v)?,
            "data.max_mutual_iou" => gen.max_mutual_iou = parse_num(key, v)?,
            "data.bump_scale" => gen.bump_scale = parse_num(key, v)?,
            "data.signature_seed" => gen.signature_seed = parse_num(key, v)?,
            "model.layers" => m.layers = parse_num(key, v)?,
            "model.queries" => m.queries = parse_num(key, v)?,
            "model.width" => m.width = parse_num(key, v)?,
            "model.attn_prior" => m.attn_prior = parse_bool(key, v)?,
            "rank.enable_head" => m.rank_head = parse_bool(key, v)?,
            "rank.enable_qrl" => m.query_rank = parse_bool(key, v)?,
            "rank.positional_variant" => m.positional = parse_enum::<PositionalVariant>(key, v)?,
            "loss.cls_kind" => t.cls.kind = parse_enum::<ClsLossKind>(key, v)?,
            "loss.target_kind" => t.cls.target.kind = parse_enum::<TargetKind>(key, v)?,
            "loss.target_power" => t.cls.target.power = parse_num(key, v)?,
            "loss.lambda_giou" => t.weights.lambda_giou = parse_num(key, v)?,
            "loss.lambda_l1" => t.weights.lambda_l1 = parse_num(key, v)?,
            "loss.lambda_cls" => t.weights.lambda_cls = parse_num(key, v)?,
            "loss.gamma" => t.weights.gamma = parse_num(key, v)?,
            "matcher.enable_high_order" => t.high_order = parse_bool(key, v)?,
            "matcher.alpha" => t.matcher.alpha = parse_num(key, v)?,
            "matcher.switch_fraction" => {
                t.matcher.schedule = MatcherSchedule::new(parse_num(key, v)?).map_err(|e| Error::Config(e.to_string()))?
            }
            "matcher.high_order_base" => t.matcher.base = parse_enum::<HighOrderBase>(key, v)?,
            "train.steps" => t.steps = parse_num(key, v)?,
            "train.batch" => t.batch = parse_num(key, v)?,
            "train.optimizer" => t.optimizer = parse_enum::<Optimizer>(key, v)?,
            "train.rate" => t.rate = parse_num(key, v)?,
            "train.weight_decay" => t.weight_decay = parse_num(key, v)?,
            "train.clip" => t.clip = parse_num(key, v)?,
            "eval.top_k" => self.top_k = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by the file's keys, then checked.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            cfg.set(k, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(e))))?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Copies shared fields into the model and training sections.
    pub fn sync(&mut self) {
        self.model.classes = self.gen.num_classes;
        self.model.grid = self.gen.grid;
        self.model.feature_dim = self.gen.dim;
        self.model.init_seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.sync();
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.train.cls.target.apply(1.0, 1.0).map_err(|e| Error::Config(strip(e)))?;
        if !(self.train.matcher.alpha > 0.0 && self.train.matcher.alpha.is_finite()) {
            return Err(Error::Config(format!("matcher.alpha must be positive, got {}", self.train.matcher.alpha)));
        }
        let gen = &self.gen;
        if gen.max_objects == 0 || !(0.0 < gen.min_size && gen.min_size <= gen.max_size && gen.max_size <= 1.0) {
            return Err(Error::Config("data: need max_objects > 0 and 0 < min_size <= max_size <= 1".into()));
        }
        if !(gen.noise >= 0.0 && gen.bump_scale > 0.0) {
            return Err(Error::Config("data: noise must be >= 0 and bump_scale > 0".into()));
        }
        if self.train_scenes == 0 || self.val_scenes == 0 {
            return Err(Error::Config("data: train and val scene counts must be positive".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("eval.top_k must be positive".into()));
        }
        Ok(())
    }

    /// Detections kept per scene, capped by the available (query, class) pairs.
    pub fn eval_k(&self) -> usize {
        self.top_k.min(self.model.queries * self.model.classes)
    }

    /// First 12 hex digits of SHA-256 over the canonical text without `seed`
    /// and `out_dir`, so that seeds of one experiment share a prefix.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "seed" && k != "out_dir" {
                h.update(format!("{k} = {v}\n"));
            }
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// `out_dir/<hash>-s<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("{}-s{}", self.hash(), self.seed))
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
