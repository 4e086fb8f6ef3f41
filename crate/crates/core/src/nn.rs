//! Parameter storage and the small set of layers the models are built from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Named weights of a model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

/// Parameters registered on one tape for one forward pass.
pub struct Bound<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Bound<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value: value.detach(),
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.trainable = trainable;
        }
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::dim(
                "param_set",
                format!(
                    "{}: {:?} vs {:?}",
                    slot.name,
                    slot.value.shape(),
                    value.shape()
                ),
            ));
        }
        slot.value = value.detach();
        Ok(())
    }

    /// Overwrites `name` with `value` (shape must match).
    pub fn load(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter {name}")))?;
        self.set(id, value)
    }

    /// Trainable parameters become leaves of `tape`; frozen ones are constants.
    pub fn bind(&self, tape: &Tape<T>) -> Bound<T> {
        Bound {
            tensors: self
                .entries
                .iter()
                .map(|e| {
                    if e.trainable {
                        tape.leaf(&e.value)
                    } else {
                        e.value.detach()
                    }
                })
                .collect(),
        }
    }

    /// Gradients of the trainable parameters, zero-filled when a parameter
    /// did not reach the root.
    pub fn gradients(&self, bound: &Bound<T>, grads: &Gradients<T>) -> Vec<(ParamId, Vec<T>)> {
        self.ids()
            .filter(|&id| self.is_trainable(id))
            .map(|id| (id, grads.wrt(bound.get(id)).to_vec()))
            .collect()
    }

    pub fn count_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Independent random stream for `(seed, tag, index)`, so every consumer
/// (shuffles, reseeds, sample draws) can be replayed from a known position.
pub fn keyed_rng(seed: u64, tag: u32, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((tag as u64) << 40) ^ index);
    rng
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| lit(self.rng.gen_range(-bound..=bound)))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        use rand_distr::{Distribution, StandardNormal};
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                lit(z * std)
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

/// Affine map over the last axis of `x[L, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: &mut Init,
    ) -> Self {
        Self::scaled(store, name, fan_in, fan_out, init, 1.0)
    }

    /// Like [`Linear::new`] with the weight bound multiplied by `gain`.
    pub fn scaled<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: &mut Init,
        gain: f64,
    ) -> Self {
        let bound = gain / (fan_in as f64).sqrt();
        Linear {
            weight: store.add(format!("{name}.weight"), init.uniform(&[fan_in, fan_out], bound)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = tape.matmul(x, p.get(self.weight))?;
        tape.broadcast_add(&y, p.get(self.bias), 1)
    }
}

/// Convolution with per-channel bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: &mut Init,
    ) -> Self {
        Self::scaled(store, name, in_ch, out_ch, kernel, stride, pad, init, 1.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn scaled<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: &mut Init,
        gain: f64,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = gain / (fan_in as f64).sqrt();
        Conv {
            weight: store.add(
                format!("{name}.weight"),
                init.uniform(&[out_ch, in_ch, kernel, kernel], bound),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = tape.conv2d(x, p.get(self.weight), self.stride, self.pad)?;
        tape.broadcast_add(&y, p.get(self.bias), 1)
    }
}

/// Group normalization followed by a learned per-channel affine map.
#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        GroupNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = tape.group_norm(x, self.groups, lit(NORM_EPS))?;
        let y = tape.broadcast_mul(&y, p.get(self.gamma), 1)?;
        tape.broadcast_add(&y, p.get(self.beta), 1)
    }
}

/// Normalization over the feature axis of `x[L, d]`.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (l, d) = (x.shape()[0], x.shape()[1]);
        let y = tape.reshape(x, &[l, 1, d])?;
        let y = tape.group_norm(&y, 1, lit(NORM_EPS))?;
        let y = tape.reshape(&y, &[l, d])?;
        let y = tape.broadcast_mul(&y, p.get(self.gamma), 1)?;
        tape.broadcast_add(&y, p.get(self.beta), 1)
    }
}
