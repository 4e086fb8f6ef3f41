//! Flat `key=value` run configuration with dotted keys.
//!
//! Every tunable of every component has exactly one key. Unknown keys are
//! rejected, and [`RunConfig::to_text`] lists all keys in a fixed order so
//! that the text doubles as a canonical fingerprint.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::str::FromStr;

use crate::checkpoint::digest_hex;
use crate::error::{Error, Result};
use crate::model::{LossSpace, ModelConfig, TrainConfig, Variant};
use crate::odesolve::SolverMethod;
use crate::vqvae::{CodebookMode, VqTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub samples: usize,
    pub shapes: usize,
    pub frames: usize,
    pub size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            samples: 200,
            shapes: 1,
            frames: 8,
            size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: VqTrainConfig,
    pub train: TrainConfig,
    /// Pretrained VQ-VAE checkpoint loaded before full-model training.
    pub vqvae_path: String,
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: VqTrainConfig::default(),
            train: TrainConfig::default(),
            vqvae_path: String::new(),
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Input(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Input(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn show(v: impl Display) -> String {
    v.to_string()
}

impl RunConfig {
    /// Sets one key. Seeds of the training stages follow `seed` unless set
    /// explicitly, and the fixed RK4 step follows `data.frames`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data.samples" => self.data.samples = parse(key, value)?,
            "data.shapes" => self.data.shapes = parse(key, value)?,
            "data.frames" => self.data.frames = parse(key, value)?,
            "data.size" => self.data.size = parse(key, value)?,
            "vq.codebook_size" => m.vq.codebook_size = parse(key, value)?,
            "vq.code_dim" => m.vq.code_dim = parse(key, value)?,
            "vq.width1" => m.vq.width1 = parse(key, value)?,
            "vq.width2" => m.vq.width2 = parse(key, value)?,
            "vq.groups" => m.vq.groups = parse(key, value)?,
            "vq.beta" => m.vq.beta = parse(key, value)?,
            "vq.decay" => m.vq.decay = parse(key, value)?,
            "vq.eps_count" => m.vq.eps_count = parse(key, value)?,
            "vq.dead_threshold" => m.vq.dead_threshold = parse(key, value)?,
            "vq.dead_patience" => m.vq.dead_patience = parse(key, value)?,
            "vq.mode" => m.vq.mode = CodebookMode::parse(value)?,
            "fusion.d_model" => m.fusion.d_model = parse(key, value)?,
            "fusion.blocks" => m.fusion.blocks = parse(key, value)?,
            "fusion.heads" => m.fusion.heads = parse(key, value)?,
            "fusion.ffn" => m.fusion.ffn = parse(key, value)?,
            "fusion.max_len" => m.fusion.max_len = parse(key, value)?,
            "fusion.max_grid" => m.fusion.max_grid = parse(key, value)?,
            "fusion.out_gain" => m.fusion.out_gain = parse(key, value)?,
            "model.augment_channels" => m.augment_channels = parse(key, value)?,
            "model.hidden" => m.hidden = parse(key, value)?,
            "model.groups" => m.groups = parse(key, value)?,
            "model.out_gain" => m.out_gain = parse(key, value)?,
            "solver.method" => m.solver.method = SolverMethod::parse(value)?,
            "solver.rtol" => m.solver.rtol = parse(key, value)?,
            "solver.atol" => m.solver.atol = parse(key, value)?,
            "solver.h_init" => m.solver.h_init = parse(key, value)?,
            "solver.h_min" => m.solver.h_min = parse(key, value)?,
            "solver.h_max" => m.solver.h_max = parse(key, value)?,
            "solver.max_steps" => m.solver.max_steps = parse(key, value)?,
            "solver.safety" => m.solver.safety = parse(key, value)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, value)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, value)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, value)?,
            "pretrain.grad_clip" => self.pretrain.grad_clip = parse(key, value)?,
            "pretrain.data_init" => self.pretrain.data_init = parse_bool(key, value)?,
            "pretrain.seed" => self.pretrain.seed = parse(key, value)?,
            "train.lr" => self.train.adam.lr = parse(key, value)?,
            "train.beta1" => self.train.adam.beta1 = parse(key, value)?,
            "train.beta2" => self.train.adam.beta2 = parse(key, value)?,
            "train.eps" => self.train.adam.eps = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.max_steps" => self.train.max_steps = parse(key, value)?,
            "train.beta" => self.train.beta = parse(key, value)?,
            "train.loss_space" => self.train.loss_space = LossSpace::parse(value)?,
            "train.latent_weight" => self.train.latent_weight = parse(key, value)?,
            "train.grad_clip" => self.train.grad_clip = parse(key, value)?,
            "train.freeze_encoder" => self.train.freeze_encoder = parse_bool(key, value)?,
            "train.freeze_decoder" => self.train.freeze_decoder = parse_bool(key, value)?,
            "train.freeze_codebook" => self.train.freeze_codebook = parse_bool(key, value)?,
            "train.baseline" => m.variant = Variant::parse(value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "paths.vqvae" => self.vqvae_path = value.to_string(),
            _ => return Err(Error::Input(format!("unknown config key {key:?}"))),
        }
        self.explicit.insert(key.to_string());
        self.derive();
        Ok(())
    }

    fn derive(&mut self) {
        if !self.explicit.contains("pretrain.seed") {
            self.pretrain.seed = self.seed;
        }
        if !self.explicit.contains("train.seed") {
            self.train.seed = self.seed;
        }
        self.model.train_frames = self.data.frames;
        if !self.explicit.contains("solver.h_init") && self.data.frames >= 2 {
            let h = 1.0 / (self.data.frames - 1) as f64;
            self.model.solver.h_init = h;
            if self.model.solver.h_max < h {
                self.model.solver.h_max = h;
            }
        }
        if !self.explicit.contains("fusion.max_grid") {
            let side = self.data.size / crate::vqvae::DOWNSAMPLE;
            self.model.fusion.max_grid = self.model.fusion.max_grid.max(side);
        }
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("config line {}: expected key=value, got {raw:?}", no + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        vec![
            ("seed", show(self.seed)),
            ("data.samples", show(self.data.samples)),
            ("data.shapes", show(self.data.shapes)),
            ("data.frames", show(self.data.frames)),
            ("data.size", show(self.data.size)),
            ("vq.codebook_size", show(m.vq.codebook_size)),
            ("vq.code_dim", show(m.vq.code_dim)),
            ("vq.width1", show(m.vq.width1)),
            ("vq.width2", show(m.vq.width2)),
            ("vq.groups", show(m.vq.groups)),
            ("vq.beta", show(m.vq.beta)),
            ("vq.decay", show(m.vq.decay)),
            ("vq.eps_count", show(m.vq.eps_count)),
            ("vq.dead_threshold", show(m.vq.dead_threshold)),
            ("vq.dead_patience", show(m.vq.dead_patience)),
            ("vq.mode", show(m.vq.mode.name())),
            ("fusion.d_model", show(m.fusion.d_model)),
            ("fusion.blocks", show(m.fusion.blocks)),
            ("fusion.heads", show(m.fusion.heads)),
            ("fusion.ffn", show(m.fusion.ffn)),
            ("fusion.max_len", show(m.fusion.max_len)),
            ("fusion.max_grid", show(m.fusion.max_grid)),
            ("fusion.out_gain", show(m.fusion.out_gain)),
            ("model.augment_channels", show(m.augment_channels)),
            ("model.hidden", show(m.hidden)),
            ("model.groups", show(m.groups)),
            ("model.out_gain", show(m.out_gain)),
            ("solver.method", show(m.solver.method.name())),
            ("solver.rtol", show(m.solver.rtol)),
            ("solver.atol", show(m.solver.atol)),
            ("solver.h_init", show(m.solver.h_init)),
            ("solver.h_min", show(m.solver.h_min)),
            ("solver.h_max", show(m.solver.h_max)),
            ("solver.max_steps", show(m.solver.max_steps)),
            ("solver.safety", show(m.solver.safety)),
            ("pretrain.epochs", show(self.pretrain.epochs)),
            ("pretrain.batch_size", show(self.pretrain.batch_size)),
            ("pretrain.lr", show(self.pretrain.lr)),
            ("pretrain.grad_clip", show(self.pretrain.grad_clip)),
            ("pretrain.data_init", show(self.pretrain.data_init)),
            ("pretrain.seed", show(self.pretrain.seed)),
            ("train.lr", show(self.train.adam.lr)),
            ("train.beta1", show(self.train.adam.beta1)),
            ("train.beta2", show(self.train.adam.beta2)),
            ("train.eps", show(self.train.adam.eps)),
            ("train.epochs", show(self.train.epochs)),
            ("train.batch_size", show(self.train.batch_size)),
            ("train.max_steps", show(self.train.max_steps)),
            ("train.beta", show(self.train.beta)),
            ("train.loss_space", show(self.train.loss_space.name())),
            ("train.latent_weight", show(self.train.latent_weight)),
            ("train.grad_clip", show(self.train.grad_clip)),
            ("train.freeze_encoder", show(self.train.freeze_encoder)),
            ("train.freeze_decoder", show(self.train.freeze_decoder)),
            ("train.freeze_codebook", show(self.train.freeze_codebook)),
            ("train.baseline", show(m.variant.name())),
            ("train.seed", show(self.train.seed)),
            ("paths.vqvae", self.vqvae_path.clone()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// SHA-256 of [`RunConfig::to_text`].
    pub fn digest(&self) -> String {
        digest_hex(self.to_text().as_bytes())
    }
}
