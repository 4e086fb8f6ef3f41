use rand::seq::SliceRandom;

use super::{TivOdeModel, Variant};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::keyed_rng;
use crate::odesolve::TimeGrid;
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::scalar::{lit, Scalar};
use crate::shapesdata::VideoSample;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vqvae::CodebookMode;

const TAG_SHUFFLE: u32 = 20;
const TAG_RESEED: u32 = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSpace {
    Pixel,
    PixelLatent,
}

impl LossSpace {
    pub fn name(self) -> &'static str {
        match self {
            LossSpace::Pixel => "pixel",
            LossSpace::PixelLatent => "pixel+latent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(LossSpace::Pixel),
            "pixel+latent" => Ok(LossSpace::PixelLatent),
            other => Err(Error::Input(format!("unknown loss space {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps in total; 0 means no limit.
    pub max_steps: u64,
    /// Commitment weight on solved latents.
    pub beta: f64,
    pub loss_space: LossSpace,
    pub latent_weight: f64,
    pub grad_clip: f64,
    pub freeze_encoder: bool,
    pub freeze_decoder: bool,
    pub freeze_codebook: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            epochs: 10,
            batch_size: 1,
            max_steps: 0,
            beta: 0.25,
            loss_space: LossSpace::PixelLatent,
            latent_weight: 1.0,
            grad_clip: 1.0,
            freeze_encoder: true,
            freeze_decoder: true,
            freeze_codebook: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.adam.lr > 0.0
            && self.epochs > 0
            && self.batch_size > 0
            && self.beta >= 0.0
            && self.latent_weight >= 0.0
            && self.grad_clip > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub commit: f64,
    pub latent: f64,
}

impl StepLog {
    /// Tab-separated log line.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}",
            self.step, self.epoch, self.loss, self.recon, self.commit, self.latent
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub adam: Adam<T>,
    pub step: u64,
    pub epoch: usize,
    pub log: Vec<StepLog>,
}

struct Losses<T> {
    total: Tensor<T>,
    recon: f64,
    commit: f64,
    latent: f64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            config,
            adam: Adam::new(config.adam),
            step: 0,
            epoch: 0,
            log: Vec::new(),
        })
    }

    pub fn finished(&self) -> bool {
        self.config.max_steps > 0 && self.step >= self.config.max_steps
    }

    pub fn save_into(&self, ck: &mut Checkpoint<T>) {
        ck.set_meta("train.step", self.step);
        ck.set_meta("train.epoch", self.epoch);
        ck.set_meta("train.adam_step", self.adam.step_count());
        for (name, t) in self.adam.state() {
            ck.push(format!("opt.{name}"), &t);
        }
    }

    /// Trainer state saved by [`Trainer::save_into`]; the log starts empty.
    pub fn restore(config: TrainConfig, ck: &Checkpoint<T>) -> Result<Self> {
        let num = |key: &str| -> Result<u64> {
            ck.meta(key)?
                .parse()
                .map_err(|_| Error::Input(format!("bad checkpoint value for {key}")))
        };
        let mut t = Self::new(config)?;
        t.step = num("train.step")?;
        t.epoch = num("train.epoch")? as usize;
        t.adam = Adam::restore(config.adam, num("train.adam_step")?, &ck.with_prefix("opt."))?;
        Ok(t)
    }

    /// Marks frozen components of `model` as constants.
    pub fn apply_freeze(&self, model: &mut TivOdeModel<T>) {
        model.vq.params.set_trainable_prefix("enc.", !self.config.freeze_encoder);
        model.vq.params.set_trainable_prefix("dec.", !self.config.freeze_decoder);
    }

    fn codebook_trainable(&self) -> bool {
        !self.config.freeze_codebook
    }

    /// One optimizer step on `batch`; all samples must share one time grid.
    pub fn training_step(&mut self, model: &mut TivOdeModel<T>, batch: &[&VideoSample]) -> Result<StepLog> {
        let first = batch.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        if batch.iter().any(|s| s.times != first.times) {
            return Err(Error::Input("samples in a batch must share one time grid".into()));
        }
        let grid = TimeGrid::new(first.times.clone())?;
        if grid.times()[0] != 0.0 {
            return Err(Error::Input("training videos start at t = 0".into()));
        }
        self.apply_freeze(model);
        let ids = batch
            .iter()
            .map(|s| model.tokenize(&s.caption))
            .collect::<Result<Vec<_>>>()?;
        let frames = grid.len();
        // Targets in time-major order: index i·B + b.
        let targets = Tensor::stack(
            &(0..frames)
                .flat_map(|i| batch.iter().map(move |s| s.frame::<T>(i)))
                .collect::<Vec<_>>(),
        )?;
        let tape = Tape::new();
        let b = model.bind(&tape, self.codebook_trainable());
        let bsz = batch.len();
        let states = match model.config.variant {
            Variant::Node | Variant::TransAll => {
                let x0 = tape.narrow(&targets, 0, 0, bsz)?;
                let z0 = model.vq.encode(&tape, &b.vq, &x0)?;
                let xi0 = model.initial_state(&tape, &b, &z0, &ids)?;
                let states = if model.config.variant == Variant::Node {
                    model.solve(&tape, &b, &xi0, &grid, &model.config.solver)?
                } else {
                    model.lattice_indices(&grid)?;
                    model.rollout(&tape, &b, &xi0, frames - 1)?
                };
                let parts: Vec<&Tensor<T>> = states.iter().collect();
                tape.concat(&parts, 0)?
            }
            Variant::TransNext => {
                model.lattice_indices(&grid)?;
                let z = model.vq.encode(&tape, &b.vq, &targets)?;
                let mut preds = Vec::with_capacity(frames);
                let mut observed = Vec::with_capacity(frames - 1);
                for i in 0..frames - 1 {
                    let zi = tape.narrow(&z, 0, i * bsz, bsz)?;
                    observed.push(model.initial_state(&tape, &b, &zi, &ids)?);
                }
                preds.push(observed[0].clone());
                for (i, s) in observed.iter().enumerate() {
                    preds.push(model.transition(&tape, &b, s, i as f64 * model.step_dt())?);
                }
                let parts: Vec<&Tensor<T>> = preds.iter().collect();
                tape.concat(&parts, 0)?
            }
        };
        let decoded = model.decode_states(&tape, &b, &[states])?;
        let losses = self.losses(model, &tape, &decoded, &targets)?;
        let loss = losses.total.item().to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                seed: self.config.seed,
            });
        }
        let grads = tape.backward(&losses.total)?;
        let mut g_vq = model.vq.params.gradients(&b.vq, &grads);
        let mut g_fusion = model.fusion.params.gradients(&b.fusion, &grads);
        let mut g_dyn = model.dynamics_params.gradients(&b.dynamics, &grads);
        let gradient_codebook = self.codebook_trainable() && model.config.vq.mode == CodebookMode::Gradient;
        let mut g_code = if gradient_codebook {
            grads.wrt(&b.vectors).to_vec()
        } else {
            Vec::new()
        };
        {
            let mut refs: Vec<&mut Vec<T>> = g_vq
                .iter_mut()
                .chain(g_fusion.iter_mut())
                .chain(g_dyn.iter_mut())
                .map(|(_, g)| g)
                .collect();
            if gradient_codebook {
                refs.push(&mut g_code);
            }
            clip_grad_norm(&mut refs, self.config.grad_clip);
        }
        self.adam.begin_step();
        self.adam.apply(&mut model.vq.params, &g_vq, "vq.")?;
        self.adam.apply(&mut model.fusion.params, &g_fusion, "fusion.")?;
        self.adam.apply(&mut model.dynamics_params, &g_dyn, "dyn.")?;
        if gradient_codebook {
            let next = self
                .adam
                .update("vq.codebook.vectors", &model.vq.codebook.vectors, &g_code)?;
            model.vq.codebook.set_vectors(next)?;
        } else if self.codebook_trainable() {
            let mut rng = keyed_rng(self.config.seed, TAG_RESEED, self.step);
            model
                .vq
                .codebook
                .ema_update(&decoded.latents.detach(), &decoded.quant.indices, &mut rng)?;
        }
        let entry = StepLog {
            step: self.step,
            epoch: self.epoch,
            loss,
            recon: losses.recon,
            commit: losses.commit,
            latent: losses.latent,
        };
        self.step += 1;
        self.log.push(entry);
        Ok(entry)
    }

    fn losses(&self, model: &TivOdeModel<T>, tape: &Tape<T>, d: &super::Decoded<T>, targets: &Tensor<T>) -> Result<Losses<T>> {
        let cfg = &self.config;
        let recon = tape.mse(&d.frames, targets)?;
        let commit = tape.scale(
            &tape.mse(&d.latents, &tape.stop_gradient(&d.quant.codes))?,
            lit(cfg.beta),
        );
        let mut total = tape.add(&recon, &commit)?;
        if self.codebook_trainable() && model.config.vq.mode == CodebookMode::Gradient {
            let align = tape.mse(&tape.stop_gradient(&d.latents), &d.quant.codes)?;
            total = tape.add(&total, &align)?;
        }
        let mut latent = 0.0;
        if cfg.loss_space == LossSpace::PixelLatent {
            let z_target = model.vq.encode_frames(targets)?;
            let term = tape.scale(&tape.mse(&d.latents, &z_target)?, lit(cfg.latent_weight));
            latent = term.item().to_f64_lossy();
            total = tape.add(&total, &term)?;
        }
        Ok(Losses {
            recon: recon.item().to_f64_lossy(),
            commit: commit.item().to_f64_lossy(),
            latent,
            total,
        })
    }
}

/// One shuffled pass over `samples` in batches; the order depends only on
/// the seed and epoch number. Stops early once `max_steps` is reached.
pub fn train_epoch<T: Scalar>(
    model: &mut TivOdeModel<T>,
    trainer: &mut Trainer<T>,
    samples: &[VideoSample],
) -> Result<EpochStats> {
    if samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut keyed_rng(trainer.config.seed, TAG_SHUFFLE, trainer.epoch as u64));
    let mut total = 0.0;
    let mut steps = 0;
    for chunk in order.chunks(trainer.config.batch_size) {
        if trainer.finished() {
            break;
        }
        let batch: Vec<&VideoSample> = chunk.iter().map(|&i| &samples[i]).collect();
        total += trainer.training_step(model, &batch)?.loss;
        steps += 1;
    }
    let stats = EpochStats {
        epoch: trainer.epoch,
        steps,
        loss: if steps > 0 { total / steps as f64 } else { f64::NAN },
    };
    trainer.epoch += 1;
    Ok(stats)
}
