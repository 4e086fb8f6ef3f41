use rand::seq::SliceRandom;

use super::{grid_to_sites, usage_entropy, CodebookMode, VqVae};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::keyed_rng;
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

const TAG_SHUFFLE: u32 = 1;
const TAG_RESEED: u32 = 2;
const TAG_INIT: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Seed the codebook from encoder outputs of the first batch.
    pub data_init: bool,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        VqTrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 2e-3,
            grad_clip: 1.0,
            seed: 0,
            data_init: true,
        }
    }
}

/// One line of the pretraining loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqStepLog {
    pub step: u64,
    pub total: f64,
    pub recon: f64,
    pub align: f64,
    pub commit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqEpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub recon: f64,
    pub align: f64,
    pub commit: f64,
    /// Code-usage entropy (nats) over every site seen this epoch.
    pub usage_entropy: f64,
}

/// Optimizer state and counters of a pretraining run.
#[derive(Debug, Clone)]
pub struct VqTrainer<T> {
    pub config: VqTrainConfig,
    pub adam: Adam<T>,
    pub step: u64,
    pub epoch: usize,
    pub log: Vec<VqStepLog>,
    /// Code indices chosen in the most recent step.
    pub last_indices: Vec<usize>,
}

impl<T: Scalar> VqTrainer<T> {
    pub fn new(config: VqTrainConfig) -> Result<Self> {
        if config.batch_size == 0 || config.lr <= 0.0 || config.grad_clip <= 0.0 {
            return Err(Error::Input(format!("invalid pretraining config {config:?}")));
        }
        Ok(VqTrainer {
            config,
            adam: Adam::new(AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            }),
            step: 0,
            epoch: 0,
            log: Vec::new(),
            last_indices: Vec::new(),
        })
    }

    pub fn save_into(&self, ck: &mut Checkpoint<T>) {
        ck.set_meta("train.step", self.step);
        ck.set_meta("train.epoch", self.epoch);
        ck.set_meta("train.adam_step", self.adam.step_count());
        for (name, t) in self.adam.state() {
            ck.push(format!("opt.{name}"), &t);
        }
    }

    pub fn restore(config: VqTrainConfig, ck: &Checkpoint<T>) -> Result<Self> {
        let num = |key: &str| -> Result<u64> {
            ck.meta(key)?
                .parse()
                .map_err(|_| Error::Input(format!("bad checkpoint value for {key}")))
        };
        let mut t = Self::new(config)?;
        t.step = num("train.step")?;
        t.epoch = num("train.epoch")? as usize;
        t.adam = Adam::restore(t.adam.config, num("train.adam_step")?, &ck.with_prefix("opt."))?;
        Ok(t)
    }

    /// One optimizer step on a stacked batch `[B, 1, H, W]`.
    pub fn train_step(&mut self, model: &mut VqVae<T>, batch: &Tensor<T>) -> Result<VqStepLog> {
        if self.step == 0 && self.config.data_init {
            let z = model.encode_frames(batch)?;
            let sites = grid_to_sites(&z)?;
            let mut rng = keyed_rng(self.config.seed, TAG_INIT, 0);
            model.codebook.init_from_sites(&sites, &mut rng)?;
        }
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let vectors = model.bind_codebook(&tape, true);
        let out = model.forward(&tape, &bound, &vectors, batch)?;
        let total = out.losses.total.item().to_f64_lossy();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                seed: self.config.seed,
            });
        }
        let grads = tape.backward(&out.losses.total)?;
        let mut param_grads = model.params.gradients(&bound, &grads);
        let gradient_mode = model.config.mode == CodebookMode::Gradient;
        let mut code_grad = if gradient_mode {
            grads.wrt(&vectors).to_vec()
        } else {
            Vec::new()
        };
        {
            let mut refs: Vec<&mut Vec<T>> = param_grads.iter_mut().map(|(_, g)| g).collect();
            if gradient_mode {
                refs.push(&mut code_grad);
            }
            clip_grad_norm(&mut refs, self.config.grad_clip);
        }
        self.adam.begin_step();
        self.adam.apply(&mut model.params, &param_grads, "")?;
        if gradient_mode {
            let next = self
                .adam
                .update("codebook.vectors", &model.codebook.vectors, &code_grad)?;
            model.codebook.set_vectors(next)?;
        } else {
            let mut rng = keyed_rng(self.config.seed, TAG_RESEED, self.step);
            model
                .codebook
                .ema_update(&out.z_e.detach(), &out.quant.indices, &mut rng)?;
        }
        let entry = VqStepLog {
            step: self.step,
            total,
            recon: out.losses.recon.item().to_f64_lossy(),
            align: out.losses.align.item().to_f64_lossy(),
            commit: out.losses.commit.item().to_f64_lossy(),
        };
        self.step += 1;
        self.log.push(entry);
        self.last_indices = out.quant.indices;
        Ok(entry)
    }
}

/// One shuffled pass over `images` (each `[1, H, W]` or `[1, 1, H, W]`).
/// The shuffle depends only on the seed and the epoch number, so a resumed
/// run replays the same batches as an unbroken one.
pub fn pretrain_epoch<T: Scalar>(
    model: &mut VqVae<T>,
    trainer: &mut VqTrainer<T>,
    images: &[Tensor<T>],
) -> Result<VqEpochStats> {
    if images.is_empty() {
        return Err(Error::Input("no training images".into()));
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut keyed_rng(trainer.config.seed, TAG_SHUFFLE, trainer.epoch as u64));
    let (mut recon, mut align, mut commit) = (0.0, 0.0, 0.0);
    let mut all_indices = Vec::new();
    let mut steps = 0;
    for chunk in order.chunks(trainer.config.batch_size) {
        let items: Vec<Tensor<T>> = chunk
            .iter()
            .map(|&i| as_batch_item(&images[i]))
            .collect::<Result<_>>()?;
        let batch = Tensor::stack(&items)?;
        let entry = trainer.train_step(model, &batch)?;
        recon += entry.recon;
        align += entry.align;
        commit += entry.commit;
        steps += 1;
        all_indices.extend_from_slice(&trainer.last_indices);
    }
    let stats = VqEpochStats {
        epoch: trainer.epoch,
        steps,
        recon: recon / steps as f64,
        align: align / steps as f64,
        commit: commit / steps as f64,
        usage_entropy: usage_entropy(&all_indices, model.codebook.size()),
    };
    trainer.epoch += 1;
    Ok(stats)
}

fn as_batch_item<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    match image.shape() {
        [1, h, w] | [1, 1, h, w] => image.reshaped(&[1, 1, *h, *w]),
        [h, w] => image.reshaped(&[1, 1, *h, *w]),
        other => Err(Error::dim("pretrain", format!("image shape {other:?}"))),
    }
}
