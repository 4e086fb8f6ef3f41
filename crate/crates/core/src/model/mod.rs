//! The full pipeline: encode, fuse, evolve, quantize, decode.
//!
//! Three variants share every component except the latent dynamics: the
//! augmented neural ODE, and two step-wise transition baselines that apply
//! the same convolutional network as a discrete residual map.

mod train;

pub use train::{train_epoch, EpochStats, LossSpace, StepLog, TrainConfig, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{tokenize, Fusion, FusionConfig, Vocabulary};
use crate::nn::{Bound, Conv, GroupNorm, Init, ParamStore};
use crate::odesolve::{augment, project, solve_at, SolverConfig, TapeSystem, TimeGrid};
use crate::scalar::{lit, Scalar};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vqvae::{Quantized, VqConfig, VqVae};

/// Latent dynamics used between frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Continuous-time augmented neural ODE.
    Node,
    /// Discrete map rolled out from the first frame, trained on the rollout.
    TransAll,
    /// Discrete map trained on observed frame pairs, rolled out at test time.
    TransNext,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::TransAll, Variant::TransNext, Variant::Node];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Node => "node",
            Variant::TransAll => "trans_all",
            Variant::TransNext => "trans_next",
        }
    }

    /// Row label of the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Node => "TiV-ODE",
            Variant::TransAll => "TiV-TransAll",
            Variant::TransNext => "TiV-TransNext",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "node" => Ok(Variant::Node),
            "trans_all" => Ok(Variant::TransAll),
            "trans_next" => Ok(Variant::TransNext),
            other => Err(Error::Input(format!("unknown baseline {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub vq: VqConfig,
    pub fusion: FusionConfig,
    pub augment_channels: usize,
    /// Channel width of the hidden layers of the dynamics network.
    pub hidden: usize,
    pub groups: usize,
    /// Gain of the last dynamics layer at initialization.
    pub out_gain: f64,
    pub solver: SolverConfig,
    pub variant: Variant,
    /// Frames per training video; fixes the step of the discrete baselines.
    pub train_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vq: VqConfig::default(),
            fusion: FusionConfig::default(),
            augment_channels: 4,
            hidden: 32,
            groups: 8,
            out_gain: 0.1,
            solver: SolverConfig::rk4(1.0 / 7.0),
            variant: Variant::Node,
            train_frames: 8,
        }
    }
}

/// Time-conditioned convolutional vector field over `c_aug + 1` channels,
/// the extra channel holding `t` at every site.
#[derive(Debug, Clone, Copy)]
struct Dynamics {
    conv1: Conv,
    norm1: GroupNorm,
    conv2: Conv,
    norm2: GroupNorm,
    conv3: Conv,
}

impl Dynamics {
    fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound<T>, xi: &Tensor<T>, t: T) -> Result<Tensor<T>> {
        if xi.rank() != 4 {
            return Err(Error::dim("f_theta", format!("state {:?}", xi.shape())));
        }
        let s = xi.shape();
        let time = Tensor::full(&[s[0], 1, s[2], s[3]], t);
        let h = tape.concat(&[xi, &time], 1)?;
        let h = self.conv1.forward(tape, p, &h)?;
        let h = tape.silu(&self.norm1.forward(tape, p, &h)?);
        let h = self.conv2.forward(tape, p, &h)?;
        let h = tape.silu(&self.norm2.forward(tape, p, &h)?);
        self.conv3.forward(tape, p, &h)
    }
}

/// Parameters of every component bound to one tape.
pub struct Bindings<T> {
    pub vq: Bound<T>,
    pub fusion: Bound<T>,
    pub dynamics: Bound<T>,
    pub vectors: Tensor<T>,
}

/// Decoded frames of a batch of latent grids.
pub struct Decoded<T> {
    pub latents: Tensor<T>,
    pub quant: Quantized<T>,
    pub frames: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct TivOdeModel<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub vq: VqVae<T>,
    pub fusion: Fusion<T>,
    pub dynamics_params: ParamStore<T>,
    dynamics: Dynamics,
}

impl<T: Scalar> TivOdeModel<T> {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let c = &config;
        c.solver.validate()?;
        if c.train_frames < 2 {
            return Err(Error::Input("train_frames must be at least 2".into()));
        }
        let state = c.vq.code_dim + c.augment_channels;
        if c.hidden == 0 || c.hidden % c.groups != 0 {
            return Err(Error::Input(format!(
                "dynamics width {} not divisible by {} groups",
                c.hidden, c.groups
            )));
        }
        let vq = VqVae::new(c.vq, seed.wrapping_add(1))?;
        let fusion = Fusion::new(c.fusion, vocab.size(), c.vq.code_dim, seed.wrapping_add(2))?;
        let mut init = Init::new(seed.wrapping_add(3));
        let mut p = ParamStore::new();
        let dynamics = Dynamics {
            conv1: Conv::new(&mut p, "conv1", state + 1, c.hidden, 3, 1, 1, &mut init),
            norm1: GroupNorm::new(&mut p, "norm1", c.hidden, c.groups),
            conv2: Conv::new(&mut p, "conv2", c.hidden, c.hidden, 3, 1, 1, &mut init),
            norm2: GroupNorm::new(&mut p, "norm2", c.hidden, c.groups),
            conv3: Conv::scaled(&mut p, "conv3", c.hidden, state, 3, 1, 1, &mut init, c.out_gain),
        };
        Ok(TivOdeModel {
            config,
            vocab,
            vq,
            fusion,
            dynamics_params: p,
            dynamics,
        })
    }

    /// Channels of the ODE state including augmentation.
    pub fn state_channels(&self) -> usize {
        self.config.vq.code_dim + self.config.augment_channels
    }

    pub fn bind(&self, tape: &Tape<T>, codebook_trainable: bool) -> Bindings<T> {
        Bindings {
            vq: self.vq.params.bind(tape),
            fusion: self.fusion.params.bind(tape),
            dynamics: self.dynamics_params.bind(tape),
            vectors: self.vq.bind_codebook(tape, codebook_trainable),
        }
    }

    /// `dξ/dt = f_θ(ξ, t)` for `ξ[B, c_aug, h, w]`; for the baselines, the
    /// increment of one step.
    pub fn f_theta(&self, tape: &Tape<T>, b: &Bindings<T>, xi: &Tensor<T>, t: T) -> Result<Tensor<T>> {
        if xi.rank() != 4 || xi.shape()[1] != self.state_channels() {
            return Err(Error::dim(
                "f_theta",
                format!("expected [B, {}, h, w], got {:?}", self.state_channels(), xi.shape()),
            ));
        }
        self.dynamics.forward(tape, &b.dynamics, xi, t)
    }

    pub fn tokenize(&self, caption: &str) -> Result<Vec<usize>> {
        tokenize(caption, &self.vocab, self.config.fusion.max_len)
    }

    /// Augmented initial state for latents `z[B, c, h, w]` and per-sample ids.
    pub fn initial_state(&self, tape: &Tape<T>, b: &Bindings<T>, z: &Tensor<T>, ids: &[Vec<usize>]) -> Result<Tensor<T>> {
        let xi0 = self.fusion.fuse_batch(tape, &b.fusion, z, ids)?;
        augment(tape, &xi0, self.config.augment_channels)
    }

    /// ODE states at every time of `grid`, which must start at 0.
    pub fn solve(&self, tape: &Tape<T>, b: &Bindings<T>, xi0: &Tensor<T>, grid: &TimeGrid, solver: &SolverConfig) -> Result<Vec<Tensor<T>>> {
        if grid.times()[0] != 0.0 {
            return Err(Error::Contract("ODE grids start at t = 0".into()));
        }
        let sys = TapeSystem::new(tape, |tape: &Tape<T>, y: &Tensor<T>, t: T| self.f_theta(tape, b, y, t));
        Ok(solve_at(&sys, xi0, grid, solver)?.states)
    }

    /// One application of the discrete baseline map.
    pub fn transition(&self, tape: &Tape<T>, b: &Bindings<T>, xi: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        let d = self.f_theta(tape, b, xi, lit(t))?;
        tape.add(xi, &d)
    }

    /// Unit step of the discrete baselines.
    pub fn step_dt(&self) -> f64 {
        1.0 / (self.config.train_frames - 1) as f64
    }

    /// Lattice indices `k` with `times[i] = k·Δ`, or an unsupported-grid error.
    pub fn lattice_indices(&self, grid: &TimeGrid) -> Result<Vec<usize>> {
        let dt = self.step_dt();
        grid.times()
            .iter()
            .map(|&t| {
                let k = (t / dt).round();
                if (k * dt - t).abs() <= 1e-9 {
                    Ok(k as usize)
                } else {
                    Err(Error::UnsupportedGrid(format!(
                        "time {t} is not a multiple of the training step {dt}; step-wise baselines cannot resample time"
                    )))
                }
            })
            .collect()
    }

    /// Rollout of the discrete map from `xi0` for `steps` steps; returns
    /// `steps + 1` states including `xi0`.
    pub fn rollout(&self, tape: &Tape<T>, b: &Bindings<T>, xi0: &Tensor<T>, steps: usize) -> Result<Vec<Tensor<T>>> {
        let mut states = vec![xi0.clone()];
        for k in 0..steps {
            let next = self.transition(tape, b, &states[k], k as f64 * self.step_dt())?;
            states.push(next);
        }
        Ok(states)
    }

    /// Drops augmentation, quantizes and decodes each state; states are
    /// concatenated along the batch axis in order.
    pub fn decode_states(&self, tape: &Tape<T>, b: &Bindings<T>, states: &[Tensor<T>]) -> Result<Decoded<T>> {
        let c = self.config.vq.code_dim;
        let projected = states
            .iter()
            .map(|s| project(tape, s, c))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = projected.iter().collect();
        let latents = tape.concat(&refs, 0)?;
        let quant = self.vq.quantize(tape, &latents, &b.vectors)?;
        let frames = self.vq.decode(tape, &b.vq, &quant.z_q)?;
        Ok(Decoded {
            latents,
            quant,
            frames,
        })
    }

    /// Projected latent states `[1, c, h, w]` at the times of `grid`.
    pub fn generate_latents(&self, x0: &Tensor<T>, caption: &str, grid: &TimeGrid, solver: &SolverConfig) -> Result<Vec<Tensor<T>>> {
        let tape = Tape::inference();
        let b = self.bind(&tape, false);
        let states = self.states_for(&tape, &b, x0, caption, grid, solver)?;
        states
            .iter()
            .map(|s| project(&tape, s, self.config.vq.code_dim))
            .collect()
    }

    fn states_for(&self, tape: &Tape<T>, b: &Bindings<T>, x0: &Tensor<T>, caption: &str, grid: &TimeGrid, solver: &SolverConfig) -> Result<Vec<Tensor<T>>> {
        let ids = self.tokenize(caption)?;
        let z = self.vq.encode(tape, &b.vq, x0)?;
        if z.shape()[0] != 1 {
            return Err(Error::dim("generate", format!("expected one image, got {:?}", x0.shape())));
        }
        let xi0 = self.initial_state(tape, b, &z, &[ids.clone()])?;
        match self.config.variant {
            Variant::Node => {
                let (anchored, skip) = grid.anchored_at_zero();
                let states = self.solve(tape, b, &xi0, &anchored, solver)?;
                Ok(states.into_iter().skip(skip).collect())
            }
            Variant::TransAll => {
                let ks = self.lattice_indices(grid)?;
                let all = self.rollout(tape, b, &xi0, *ks.last().expect("grid is non-empty"))?;
                Ok(ks.iter().map(|&k| all[k].clone()).collect())
            }
            Variant::TransNext => {
                let ks = self.lattice_indices(grid)?;
                let last = *ks.last().expect("grid is non-empty");
                let mut all = vec![xi0];
                for k in 0..last {
                    let next = self.transition(tape, b, &all[k], k as f64 * self.step_dt())?;
                    let frame = self.decode_states(tape, b, &[next])?.frames;
                    let z = self.vq.encode(tape, &b.vq, &frame)?;
                    all.push(self.initial_state(tape, b, &z, &[ids.clone()])?);
                }
                Ok(ks.iter().map(|&k| all[k].clone()).collect())
            }
        }
    }

    /// Frames `[1, 1, H, W]` at every time of `grid` from image `x0[1, 1, H, W]`.
    /// All frames come from one solve.
    pub fn generate(&self, x0: &Tensor<T>, caption: &str, grid: &TimeGrid) -> Result<Vec<Tensor<T>>> {
        self.generate_with(x0, caption, grid, &self.config.solver)
    }

    pub fn generate_with(&self, x0: &Tensor<T>, caption: &str, grid: &TimeGrid, solver: &SolverConfig) -> Result<Vec<Tensor<T>>> {
        let tape = Tape::inference();
        let b = self.bind(&tape, false);
        let states = self.states_for(&tape, &b, x0, caption, grid, solver)?;
        let decoded = self.decode_states(&tape, &b, &states)?;
        (0..states.len()).map(|i| decoded.frames.index_outer(i)).collect()
    }

    /// Every named tensor of the model, with component prefixes.
    pub fn named_tensors(&self, ck: &mut Checkpoint<T>) {
        self.vq.save_into(ck, "vq.");
        for (name, t) in self.fusion.params.iter() {
            ck.push(format!("fusion.{name}"), t);
        }
        for (name, t) in self.dynamics_params.iter() {
            ck.push(format!("dyn.{name}"), t);
        }
    }

    /// Loads weights saved by [`TivOdeModel::named_tensors`].
    pub fn load_tensors(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        self.vq.load_from(ck, "vq.")?;
        let names: Vec<String> = self.fusion.params.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            self.fusion.params.load(&n, ck.get(&format!("fusion.{n}"))?.clone())?;
        }
        let names: Vec<String> = self.dynamics_params.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            self.dynamics_params.load(&n, ck.get(&format!("dyn.{n}"))?.clone())?;
        }
        Ok(())
    }

    /// Weights plus the resolved run configuration, its hash, and the
    /// vocabulary with its hash.
    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Result<Checkpoint<T>> {
        if cfg.model != self.config {
            return Err(Error::Contract("run configuration does not describe this model".into()));
        }
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "tivode-model");
        for (k, v) in cfg.entries() {
            ck.set_meta(format!("cfg.{k}"), v);
        }
        ck.set_meta("config_hash", cfg.digest());
        ck.set_meta("vocab", self.vocab.tokens().join(","));
        ck.set_meta("vocab_hash", self.vocab.digest());
        self.named_tensors(&mut ck);
        Ok(ck)
    }

    /// Rebuilds a model and its run configuration from a checkpoint,
    /// verifying both fingerprints.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<(Self, RunConfig)> {
        if ck.meta("kind")? != "tivode-model" {
            return Err(Error::Input("checkpoint does not hold a full model".into()));
        }
        let pairs: Vec<(&str, &str)> = ck
            .metadata
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("cfg.").map(|k| (k, v.as_str())))
            .collect();
        let cfg = RunConfig::from_pairs(pairs)?;
        if cfg.digest() != ck.meta("config_hash")? {
            return Err(Error::Input("checkpoint config hash does not match its configuration".into()));
        }
        let vocab = Vocabulary::new(&ck.meta("vocab")?.split(',').collect::<Vec<_>>())?;
        if vocab.digest() != ck.meta("vocab_hash")? {
            return Err(Error::Input("checkpoint vocabulary hash mismatch".into()));
        }
        let mut model = TivOdeModel::new(cfg.model, vocab, 0)?;
        model.load_tensors(ck)?;
        Ok((model, cfg))
    }
}
