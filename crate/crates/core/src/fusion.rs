//! Caption tokenization and cross-attention fusion of caption and image
//! latents into the initial ODE state.

use std::path::Path;

use crate::checkpoint::digest_hex;
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
/// Ids below this value are reserved.
pub const RESERVED: usize = 2;

/// Closed word list; token `i` of the list has id `i + RESERVED`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = Vec::with_capacity(words.len());
        for w in words {
            let w = w.as_ref().trim().to_lowercase();
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Input(format!("invalid vocabulary token {w:?}")));
            }
            if tokens.contains(&w) {
                return Err(Error::Input(format!("duplicate vocabulary token {w:?}")));
            }
            tokens.push(w);
        }
        Ok(Vocabulary { tokens })
    }

    /// Number of ids including the reserved ones.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn id(&self, word: &str) -> usize {
        self.tokens
            .iter()
            .position(|t| t == word)
            .map_or(UNK, |i| i + RESERVED)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        match id {
            PAD => Some("<pad>"),
            UNK => Some("<unk>"),
            _ => self.tokens.get(id - RESERVED).map(String::as_str),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        Self::new(&words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn digest(&self) -> String {
        digest_hex(self.to_text().as_bytes())
    }
}

/// Lowercased whitespace tokens mapped to ids, padded or truncated to
/// exactly `max_len`.
pub fn tokenize(caption: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
    let mut ids: Vec<usize> = caption
        .split_whitespace()
        .map(|w| vocab.id(&w.to_lowercase()))
        .collect();
    if ids.is_empty() {
        return Err(Error::Input("empty caption".into()));
    }
    ids.resize(max_len, PAD);
    Ok(ids)
}

/// Attention mask: `true` for real tokens.
pub fn key_mask(ids: &[usize]) -> Vec<bool> {
    ids.iter().map(|&i| i != PAD).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    /// Largest latent grid side supported by the positional tables.
    pub max_grid: usize,
    /// Gain of the output projection at initialization.
    pub out_gain: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            d_model: 64,
            blocks: 2,
            heads: 4,
            ffn: 128,
            max_len: 20,
            max_grid: 16,
            out_gain: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm_ff: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Text and image embeddings plus the cross-attention stack.
#[derive(Debug, Clone)]
pub struct Fusion<T> {
    pub config: FusionConfig,
    pub channels: usize,
    pub params: ParamStore<T>,
    tok_table: ParamId,
    text_pos: ParamId,
    row_table: ParamId,
    col_table: ParamId,
    image_proj: Linear,
    pos_proj: Linear,
    blocks: Vec<Block>,
    norm_out: LayerNorm,
    out_proj: Linear,
}

impl<T: Scalar> Fusion<T> {
    /// Fusion over a vocabulary of `vocab_size` ids for latents with
    /// `channels` channels.
    pub fn new(config: FusionConfig, vocab_size: usize, channels: usize, seed: u64) -> Result<Self> {
        let c = &config;
        if c.d_model == 0 || c.heads == 0 || c.d_model % c.heads != 0 || c.d_model % 2 != 0 {
            return Err(Error::Input(format!(
                "d_model {} must be even and divisible by {} heads",
                c.d_model, c.heads
            )));
        }
        if c.max_len == 0 || c.max_grid == 0 || vocab_size <= RESERVED {
            return Err(Error::Input("fusion needs max_len, max_grid and a vocabulary".into()));
        }
        let mut init = Init::new(seed);
        let mut p = ParamStore::new();
        let d = c.d_model;
        let tok_table = p.add("tok_embed", init.normal(&[vocab_size, d], 1.0));
        let text_pos = p.add("text_pos", init.normal(&[c.max_len, d], 0.1));
        let row_table = p.add("row_embed", init.normal(&[c.max_grid, d / 2], 1.0));
        let col_table = p.add("col_embed", init.normal(&[c.max_grid, d / 2], 1.0));
        let image_proj = Linear::new(&mut p, "image_proj", channels, d, &mut init);
        let pos_proj = Linear::new(&mut p, "pos_proj", d, d, &mut init);
        let blocks = (0..c.blocks)
            .map(|i| {
                let n = |s: &str| format!("block{i}.{s}");
                Block {
                    norm_q: LayerNorm::new(&mut p, &n("norm_q"), d),
                    norm_kv: LayerNorm::new(&mut p, &n("norm_kv"), d),
                    wq: Linear::new(&mut p, &n("wq"), d, d, &mut init),
                    wk: Linear::new(&mut p, &n("wk"), d, d, &mut init),
                    wv: Linear::new(&mut p, &n("wv"), d, d, &mut init),
                    wo: Linear::new(&mut p, &n("wo"), d, d, &mut init),
                    norm_ff: LayerNorm::new(&mut p, &n("norm_ff"), d),
                    ff1: Linear::new(&mut p, &n("ff1"), d, c.ffn, &mut init),
                    ff2: Linear::new(&mut p, &n("ff2"), c.ffn, d, &mut init),
                }
            })
            .collect();
        let norm_out = LayerNorm::new(&mut p, "norm_out", d);
        let out_proj = Linear::scaled(&mut p, "out_proj", d, channels, &mut init, c.out_gain);
        Ok(Fusion {
            config,
            channels,
            params: p,
            tok_table,
            text_pos,
            row_table,
            col_table,
            image_proj,
            pos_proj,
            blocks,
            norm_out,
            out_proj,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.params.get(self.tok_table).shape()[0]
    }

    /// Token plus positional embeddings, `[max_len, d_model]`.
    pub fn embed_text(&self, tape: &Tape<T>, p: &Bound<T>, ids: &[usize]) -> Result<Tensor<T>> {
        if ids.len() != self.config.max_len {
            return Err(Error::Contract(format!(
                "expected {} token ids, got {}",
                self.config.max_len,
                ids.len()
            )));
        }
        let tok = tape.embedding(p.get(self.tok_table), ids)?;
        tape.add(&tok, p.get(self.text_pos))
    }

    /// `z[1, c, h, w]` to `[h·w, d_model]` tokens in row-major site order,
    /// each with its projected row/column embedding added.
    pub fn embed_image_tokens(&self, tape: &Tape<T>, p: &Bound<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let s = z.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != self.channels {
            return Err(Error::dim(
                "embed_image_tokens",
                format!("expected [1, {}, h, w], got {s:?}", self.channels),
            ));
        }
        let (h, w) = (s[2], s[3]);
        if h > self.config.max_grid || w > self.config.max_grid {
            return Err(Error::dim(
                "embed_image_tokens",
                format!("grid {h}x{w} exceeds {}", self.config.max_grid),
            ));
        }
        let sites = tape.permute(z, &[0, 2, 3, 1])?;
        let sites = tape.reshape(&sites, &[h * w, self.channels])?;
        let content = self.image_proj.forward(tape, p, &sites)?;
        let rows: Vec<usize> = (0..h * w).map(|i| i / w).collect();
        let cols: Vec<usize> = (0..h * w).map(|i| i % w).collect();
        let re = tape.embedding(p.get(self.row_table), &rows)?;
        let ce = tape.embedding(p.get(self.col_table), &cols)?;
        let pos = self.pos_proj.forward(tape, p, &tape.concat(&[&re, &ce], 1)?)?;
        tape.add(&content, &pos)
    }

    #[allow(clippy::type_complexity)]
    fn project_qkv(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        b: &Block,
        x: &Tensor<T>,
        text: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let q = b.wq.forward(tape, p, &b.norm_q.forward(tape, p, x)?)?;
        let kv = b.norm_kv.forward(tape, p, text)?;
        Ok((q, b.wk.forward(tape, p, &kv)?, b.wv.forward(tape, p, &kv)?))
    }

    fn head(&self, tape: &Tape<T>, t: &Tensor<T>, h: usize) -> Result<Tensor<T>> {
        let dh = self.config.d_model / self.config.heads;
        tape.narrow(t, 1, h * dh, dh)
    }

    fn block_forward(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        b: &Block,
        x: &Tensor<T>,
        text: &Tensor<T>,
        mask: &[bool],
    ) -> Result<Tensor<T>> {
        let (q, k, v) = self.project_qkv(tape, p, b, x, text)?;
        let heads = (0..self.config.heads)
            .map(|h| {
                tape.scaled_dot_attention(
                    &self.head(tape, &q, h)?,
                    &self.head(tape, &k, h)?,
                    &self.head(tape, &v, h)?,
                    Some(mask),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = heads.iter().collect();
        let a = b.wo.forward(tape, p, &tape.concat(&refs, 1)?)?;
        let x = tape.add(x, &a)?;
        let f = b.ff1.forward(tape, p, &b.norm_ff.forward(tape, p, &x)?)?;
        let f = b.ff2.forward(tape, p, &tape.silu(&f))?;
        tape.add(&x, &f)
    }

    /// Cross-attention stack over image tokens `[h·w, d]` with text tokens
    /// as keys and values; returns the stack output before re-projection.
    pub fn fuse_tokens(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        image: &Tensor<T>,
        text: &Tensor<T>,
        mask: &[bool],
    ) -> Result<Tensor<T>> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::Input("caption has no tokens to attend to".into()));
        }
        let mut x = image.clone();
        for b in &self.blocks {
            x = self.block_forward(tape, p, b, &x, text, mask)?;
        }
        Ok(x)
    }

    /// Initial state `ξ0[1, c, h, w]` for latent `z[1, c, h, w]` and caption
    /// ids: `z` plus the re-projected fusion output.
    pub fn fuse(&self, tape: &Tape<T>, p: &Bound<T>, z: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
        let mask = key_mask(ids);
        let text = self.embed_text(tape, p, ids)?;
        let image = self.embed_image_tokens(tape, p, z)?;
        let x = self.fuse_tokens(tape, p, &image, &text, &mask)?;
        let x = self.out_proj.forward(tape, p, &self.norm_out.forward(tape, p, &x)?)?;
        let (h, w) = (z.shape()[2], z.shape()[3]);
        let x = tape.reshape(&x, &[1, h, w, self.channels])?;
        let x = tape.permute(&x, &[0, 3, 1, 2])?;
        tape.add(z, &x)
    }

    /// [`Fusion::fuse`] for each sample of `z[B, c, h, w]` with its own ids.
    pub fn fuse_batch(&self, tape: &Tape<T>, p: &Bound<T>, z: &Tensor<T>, ids: &[Vec<usize>]) -> Result<Tensor<T>> {
        let b = z.shape()[0];
        if ids.len() != b {
            return Err(Error::dim("fuse_batch", format!("{} captions for batch of {b}", ids.len())));
        }
        let parts = (0..b)
            .map(|i| {
                let zi = tape.narrow(z, 0, i, 1)?;
                self.fuse(tape, p, &zi, &ids[i])
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        tape.concat(&refs, 0)
    }

    /// Attention weights `[h·w, max_len]` of head `head` in block `block`,
    /// for inspection.
    pub fn attention_weights(&self, z: &Tensor<T>, ids: &[usize], block: usize, head: usize) -> Result<Tensor<T>> {
        if head >= self.config.heads {
            return Err(Error::Input(format!("head {head} out of range")));
        }
        let tape = Tape::inference();
        let p = self.params.bind(&tape);
        let mask = key_mask(ids);
        let text = self.embed_text(&tape, &p, ids)?;
        let mut x = self.embed_image_tokens(&tape, &p, z)?;
        for (i, b) in self.blocks.iter().enumerate() {
            if i == block {
                let (q, k, v) = self.project_qkv(&tape, &p, b, &x, &text)?;
                let (_, wts) = tape.attention_with_weights(
                    &self.head(&tape, &q, head)?,
                    &self.head(&tape, &k, head)?,
                    &self.head(&tape, &v, head)?,
                    Some(&mask),
                )?;
                return Ok(wts);
            }
            x = self.block_forward(&tape, &p, b, &x, &text, &mask)?;
        }
        Err(Error::Input(format!("block {block} out of range")))
    }
}
