//! Convolutional VQ-VAE: encoder, nearest-code quantizer, decoder.
//!
//! The encoder downsamples by 4 with two stride-2 convolutions; the decoder
//! mirrors it with nearest-neighbour upsampling and ends in a sigmoid.

mod codebook;
mod train;

pub use codebook::{grid_to_sites, usage_entropy, Codebook, Quantized};
pub use train::{pretrain_epoch, VqEpochStats, VqTrainConfig, VqTrainer};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, GroupNorm, Init, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Spatial downsampling ratio of the encoder.
pub const DOWNSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodebookMode {
    /// Vectors follow EMA cluster means; the alignment term is monitored only.
    Ema,
    /// Vectors are parameters trained through the alignment term.
    Gradient,
}

impl CodebookMode {
    pub fn name(self) -> &'static str {
        match self {
            CodebookMode::Ema => "ema",
            CodebookMode::Gradient => "gradient",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ema" => Ok(CodebookMode::Ema),
            "gradient" => Ok(CodebookMode::Gradient),
            other => Err(Error::Input(format!("unknown codebook mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    pub width1: usize,
    pub width2: usize,
    pub groups: usize,
    pub beta: f64,
    pub decay: f64,
    pub eps_count: f64,
    pub dead_threshold: f64,
    pub dead_patience: u32,
    pub mode: CodebookMode,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            codebook_size: 64,
            code_dim: 32,
            width1: 32,
            width2: 64,
            groups: 8,
            beta: 0.25,
            decay: 0.99,
            eps_count: 1e-5,
            dead_threshold: 1e-3,
            dead_patience: 50,
            mode: CodebookMode::Ema,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Encoder {
    conv1: Conv,
    norm1: GroupNorm,
    conv2: Conv,
    norm2: GroupNorm,
    proj: Conv,
}

#[derive(Debug, Clone, Copy)]
struct Decoder {
    conv_in: Conv,
    norm1: GroupNorm,
    conv_mid: Conv,
    norm2: GroupNorm,
    conv_out: Conv,
}

/// Loss terms; `total` is what gets differentiated.
#[derive(Debug, Clone)]
pub struct VqLosses<T> {
    pub total: Tensor<T>,
    pub recon: Tensor<T>,
    pub align: Tensor<T>,
    pub commit: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct VqForward<T> {
    pub z_e: Tensor<T>,
    pub quant: Quantized<T>,
    pub x_hat: Tensor<T>,
    pub losses: VqLosses<T>,
}

#[derive(Debug, Clone)]
pub struct VqVae<T> {
    pub config: VqConfig,
    pub params: ParamStore<T>,
    pub codebook: Codebook<T>,
    encoder: Encoder,
    decoder: Decoder,
}

impl<T: Scalar> VqVae<T> {
    pub fn new(config: VqConfig, seed: u64) -> Result<Self> {
        let c = &config;
        if c.width1 % c.groups != 0 || c.width2 % c.groups != 0 {
            return Err(Error::Input(format!(
                "widths {}/{} not divisible by {} groups",
                c.width1, c.width2, c.groups
            )));
        }
        let mut init = Init::new(seed);
        let mut p = ParamStore::new();
        let encoder = Encoder {
            conv1: Conv::new(&mut p, "enc.conv1", 1, c.width1, 4, 2, 1, &mut init),
            norm1: GroupNorm::new(&mut p, "enc.norm1", c.width1, c.groups),
            conv2: Conv::new(&mut p, "enc.conv2", c.width1, c.width2, 4, 2, 1, &mut init),
            norm2: GroupNorm::new(&mut p, "enc.norm2", c.width2, c.groups),
            proj: Conv::new(&mut p, "enc.proj", c.width2, c.code_dim, 1, 1, 0, &mut init),
        };
        let decoder = Decoder {
            conv_in: Conv::new(&mut p, "dec.conv_in", c.code_dim, c.width2, 3, 1, 1, &mut init),
            norm1: GroupNorm::new(&mut p, "dec.norm1", c.width2, c.groups),
            conv_mid: Conv::new(&mut p, "dec.conv_mid", c.width2, c.width1, 3, 1, 1, &mut init),
            norm2: GroupNorm::new(&mut p, "dec.norm2", c.width1, c.groups),
            conv_out: Conv::new(&mut p, "dec.conv_out", c.width1, 1, 3, 1, 1, &mut init),
        };
        let bound = 1.0 / c.codebook_size as f64;
        let mut codebook = Codebook::from_vectors(
            init.uniform(&[c.codebook_size, c.code_dim], bound),
            c.decay,
        )?;
        codebook.eps_count = c.eps_count;
        codebook.dead_threshold = c.dead_threshold;
        codebook.dead_patience = c.dead_patience;
        Ok(VqVae {
            config,
            params: p,
            codebook,
            encoder,
            decoder,
        })
    }

    /// Latent grid shape `(h, w)` for an `H × W` image.
    pub fn latent_hw(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height % DOWNSAMPLE != 0 || width % DOWNSAMPLE != 0 || height == 0 || width == 0 {
            return Err(Error::dim(
                "encode",
                format!("image {height}x{width} not divisible by downsampling ratio {DOWNSAMPLE}"),
            ));
        }
        Ok((height / DOWNSAMPLE, width / DOWNSAMPLE))
    }

    /// `x[B, 1, H, W]` to `z_e[B, N, H/4, W/4]`.
    pub fn encode(&self, tape: &Tape<T>, p: &Bound<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.shape()[1] != 1 {
            return Err(Error::dim("encode", format!("expected [B, 1, H, W], got {:?}", x.shape())));
        }
        self.latent_hw(x.shape()[2], x.shape()[3])?;
        let e = &self.encoder;
        let h = e.conv1.forward(tape, p, x)?;
        let h = tape.silu(&e.norm1.forward(tape, p, &h)?);
        let h = e.conv2.forward(tape, p, &h)?;
        let h = tape.silu(&e.norm2.forward(tape, p, &h)?);
        e.proj.forward(tape, p, &h)
    }

    /// `z[B, N, h, w]` to `x̂[B, 1, 4h, 4w]` in `[0, 1]`.
    pub fn decode(&self, tape: &Tape<T>, p: &Bound<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.rank() != 4 || z.shape()[1] != self.config.code_dim {
            return Err(Error::dim(
                "decode",
                format!(
                    "expected [B, {}, h, w], got {:?}",
                    self.config.code_dim,
                    z.shape()
                ),
            ));
        }
        let d = &self.decoder;
        let h = d.conv_in.forward(tape, p, z)?;
        let h = tape.silu(&d.norm1.forward(tape, p, &h)?);
        let h = tape.upsample(&h, 2)?;
        let h = d.conv_mid.forward(tape, p, &h)?;
        let h = tape.silu(&d.norm2.forward(tape, p, &h)?);
        let h = tape.upsample(&h, 2)?;
        let h = d.conv_out.forward(tape, p, &h)?;
        Ok(tape.sigmoid(&h))
    }

    /// Codebook vectors as seen by `tape`: a leaf in gradient mode when
    /// `trainable`, a constant otherwise.
    pub fn bind_codebook(&self, tape: &Tape<T>, trainable: bool) -> Tensor<T> {
        if trainable && self.config.mode == CodebookMode::Gradient {
            tape.leaf(&self.codebook.vectors)
        } else {
            self.codebook.vectors.clone()
        }
    }

    pub fn quantize(&self, tape: &Tape<T>, z_e: &Tensor<T>, vectors: &Tensor<T>) -> Result<Quantized<T>> {
        self.codebook.quantize(tape, z_e, vectors)
    }

    /// Encode, quantize, decode and score one batch.
    pub fn forward(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        vectors: &Tensor<T>,
        x: &Tensor<T>,
    ) -> Result<VqForward<T>> {
        let z_e = self.encode(tape, p, x)?;
        let quant = self.quantize(tape, &z_e, vectors)?;
        let x_hat = self.decode(tape, p, &quant.z_q)?;
        let losses = vq_loss(tape, x, &x_hat, &z_e, &quant.codes, self.config.beta, self.config.mode)?;
        Ok(VqForward {
            z_e,
            quant,
            x_hat,
            losses,
        })
    }

    /// Inference-only reconstruction.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let p = self.params.bind(&tape);
        let z_e = self.encode(&tape, &p, x)?;
        let q = self.quantize(&tape, &z_e, &self.codebook.vectors)?;
        self.decode(&tape, &p, &q.z_q)
    }

    pub fn encode_frames(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let p = self.params.bind(&tape);
        self.encode(&tape, &p, x)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.set_trainable_prefix("", !frozen);
    }

    /// Appends weights and codebook state under `prefix`.
    pub fn save_into(&self, ck: &mut Checkpoint<T>, prefix: &str) {
        for (name, t) in self.params.iter() {
            ck.push(format!("{prefix}{name}"), t);
        }
        let cb = &self.codebook;
        let (k, n) = (cb.size(), cb.dim());
        ck.push(format!("{prefix}codebook.vectors"), &cb.vectors);
        ck.push(
            format!("{prefix}codebook.ema_counts"),
            &Tensor::from_parts(vec![k], cb.ema_counts.clone()),
        );
        ck.push(
            format!("{prefix}codebook.ema_sums"),
            &Tensor::from_parts(vec![k, n], cb.ema_sums.clone()),
        );
        let streak = cb.dead_streak.iter().map(|&s| lit(s as f64)).collect();
        ck.push(format!("{prefix}codebook.dead_streak"), &Tensor::from_parts(vec![k], streak));
    }

    pub fn load_from(&mut self, ck: &Checkpoint<T>, prefix: &str) -> Result<()> {
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = ck.get(&format!("{prefix}{name}"))?;
            self.params.load(&name, t.clone())?;
        }
        let vectors = ck.get(&format!("{prefix}codebook.vectors"))?.clone();
        if vectors.shape() != self.codebook.vectors.shape() {
            return Err(Error::dim("codebook", format!("checkpoint {:?}", vectors.shape())));
        }
        let counts = ck.get(&format!("{prefix}codebook.ema_counts"))?;
        let sums = ck.get(&format!("{prefix}codebook.ema_sums"))?;
        let streak = ck.get(&format!("{prefix}codebook.dead_streak"))?;
        let cb = &mut self.codebook;
        if counts.numel() != cb.size() || sums.numel() != cb.size() * cb.dim() || streak.numel() != cb.size() {
            return Err(Error::Input("codebook statistics have the wrong size".into()));
        }
        cb.vectors = vectors;
        cb.ema_counts = counts.to_vec();
        cb.ema_sums = sums.to_vec();
        cb.dead_streak = streak.data().iter().map(|v| v.to_f64_lossy() as u32).collect();
        Ok(())
    }
}

/// Reconstruction, alignment and commitment terms with mean reductions.
///
/// `align` compares detached encoder output to the codes (gradient only to
/// the codebook); `commit` is `beta` times the distance of the encoder
/// output to detached codes. `total = recon + commit`, plus `align` when the
/// codebook is gradient-trained.
pub fn vq_loss<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    x_hat: &Tensor<T>,
    z_e: &Tensor<T>,
    codes: &Tensor<T>,
    beta: f64,
    mode: CodebookMode,
) -> Result<VqLosses<T>> {
    if beta < 0.0 {
        return Err(Error::Input(format!("negative commitment weight {beta}")));
    }
    let recon = tape.mse(x_hat, x)?;
    let align = tape.mse(&tape.stop_gradient(z_e), codes)?;
    let commit = tape.scale(&tape.mse(z_e, &tape.stop_gradient(codes))?, lit(beta));
    let mut total = tape.add(&recon, &commit)?;
    if mode == CodebookMode::Gradient {
        total = tape.add(&total, &align)?;
    }
    Ok(VqLosses {
        total,
        recon,
        align,
        commit,
    })
}
