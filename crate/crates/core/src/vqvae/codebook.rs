use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::{lit, Scalar};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Discrete code vectors with exponential-moving-average cluster statistics.
#[derive(Debug, Clone)]
pub struct Codebook<T> {
    /// `[K, N]`
    pub vectors: Tensor<T>,
    pub ema_counts: Vec<T>,
    /// `K × N`, row-major.
    pub ema_sums: Vec<T>,
    /// Consecutive updates each code has spent below the dead threshold.
    pub dead_streak: Vec<u32>,
    pub decay: f64,
    pub eps_count: f64,
    pub dead_threshold: f64,
    pub dead_patience: u32,
}

/// Result of snapping an encoder grid onto the codebook.
#[derive(Debug, Clone)]
pub struct Quantized<T> {
    /// Straight-through output: code values forward, identity gradient to `z_e`.
    pub z_q: Tensor<T>,
    /// Selected code vectors in grid layout; tracked when the codebook is.
    pub codes: Tensor<T>,
    /// Row-major `(b, y, x)` site order.
    pub indices: Vec<usize>,
}

/// `[B, N, h, w]` grid to `[B·h·w, N]` site rows.
pub fn grid_to_sites<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    if z.rank() != 4 {
        return Err(Error::dim("grid_to_sites", format!("{:?}", z.shape())));
    }
    let (b, n, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]);
    Tensor::new(&[b * h * w, n], kernels::permute(z.data(), z.shape(), &[0, 2, 3, 1]))
}

fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

impl<T: Scalar> Codebook<T> {
    /// Codebook with the given vectors; EMA statistics start at count 1 per
    /// code so `vectors == sums / counts` holds from the outset.
    pub fn from_vectors(vectors: Tensor<T>, decay: f64) -> Result<Self> {
        if vectors.rank() != 2 || vectors.shape()[0] < 2 {
            return Err(Error::dim(
                "codebook",
                format!("need [K >= 2, N] vectors, got {:?}", vectors.shape()),
            ));
        }
        if !vectors.all_finite() {
            return Err(Error::Input("codebook vectors must be finite".into()));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Input(format!("decay {decay} outside [0, 1)")));
        }
        let k = vectors.shape()[0];
        Ok(Codebook {
            ema_sums: vectors.to_vec(),
            ema_counts: vec![T::one(); k],
            dead_streak: vec![0; k],
            vectors,
            decay,
            eps_count: 1e-5,
            dead_threshold: 1e-3,
            dead_patience: 50,
        })
    }

    pub fn size(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vector(&self, k: usize) -> &[T] {
        let n = self.dim();
        &self.vectors.data()[k * n..(k + 1) * n]
    }

    /// Index of the nearest code (Euclidean), ties to the lowest index.
    pub fn nearest(&self, site: &[T]) -> usize {
        let mut best = (T::infinity(), 0);
        for k in 0..self.size() {
            let d = squared_distance(site, self.vector(k));
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    /// Nearest-code index for every site of `z_e[B, N, h, w]`.
    pub fn assign(&self, z_e: &Tensor<T>) -> Result<Vec<usize>> {
        if z_e.rank() != 4 || z_e.shape()[1] != self.dim() {
            return Err(Error::dim(
                "quantize",
                format!(
                    "latent {:?} against codebook of dimension {}",
                    z_e.shape(),
                    self.dim()
                ),
            ));
        }
        let sites = grid_to_sites(z_e)?;
        Ok(sites.data().chunks(self.dim()).map(|s| self.nearest(s)).collect())
    }

    /// Snaps `z_e` to its nearest codes. `vectors` is the codebook as seen
    /// by `tape` (a leaf when the codebook is trained by gradient).
    pub fn quantize(&self, tape: &Tape<T>, z_e: &Tensor<T>, vectors: &Tensor<T>) -> Result<Quantized<T>> {
        let indices = self.assign(z_e)?;
        let (b, n, h, w) = (z_e.shape()[0], z_e.shape()[1], z_e.shape()[2], z_e.shape()[3]);
        let rows = tape.embedding(vectors, &indices)?;
        let codes = tape.permute(&tape.reshape(&rows, &[b, h, w, n])?, &[0, 3, 1, 2])?;
        let z_q = tape.straight_through(z_e, &codes)?;
        Ok(Quantized {
            z_q,
            codes,
            indices,
        })
    }

    /// One EM-style update from a batch of encoder sites and their codes.
    /// Codes whose count stays below the dead threshold for `dead_patience`
    /// consecutive updates are re-seeded to a random site of the batch.
    pub fn ema_update<R: Rng>(&mut self, z_e: &Tensor<T>, indices: &[usize], rng: &mut R) -> Result<()> {
        let sites = grid_to_sites(z_e)?;
        let (k, n) = (self.size(), self.dim());
        if sites.shape()[1] != n || sites.shape()[0] != indices.len() {
            return Err(Error::dim(
                "ema_update",
                format!("{} indices for sites {:?}", indices.len(), sites.shape()),
            ));
        }
        let mut counts = vec![T::zero(); k];
        let mut sums = vec![T::zero(); k * n];
        for (site, &idx) in sites.data().chunks(n).zip(indices) {
            if idx >= k {
                return Err(Error::Contract(format!("code index {idx} out of range")));
            }
            counts[idx] += T::one();
            for (a, &v) in sums[idx * n..(idx + 1) * n].iter_mut().zip(site) {
                *a += v;
            }
        }
        let d: T = lit(self.decay);
        let keep = T::one() - d;
        for c in 0..k {
            self.ema_counts[c] = d * self.ema_counts[c] + keep * counts[c];
            for j in 0..n {
                let i = c * n + j;
                self.ema_sums[i] = d * self.ema_sums[i] + keep * sums[i];
            }
        }
        let nsites = indices.len();
        for c in 0..k {
            if self.ema_counts[c].to_f64_lossy() < self.dead_threshold {
                self.dead_streak[c] += 1;
            } else {
                self.dead_streak[c] = 0;
            }
            if self.dead_streak[c] >= self.dead_patience && nsites > 0 {
                let pick = rng.gen_range(0..nsites);
                let src = &sites.data()[pick * n..(pick + 1) * n];
                self.ema_sums[c * n..(c + 1) * n].copy_from_slice(src);
                self.ema_counts[c] = T::one();
                self.dead_streak[c] = 0;
            }
        }
        self.refresh_vectors();
        Ok(())
    }

    fn refresh_vectors(&mut self) {
        let n = self.dim();
        let eps: T = lit(self.eps_count);
        let mut v = vec![T::zero(); self.ema_sums.len()];
        for (c, &count) in self.ema_counts.iter().enumerate() {
            let denom = count.max(eps);
            for j in 0..n {
                v[c * n + j] = self.ema_sums[c * n + j] / denom;
            }
        }
        self.vectors = Tensor::from_parts(self.vectors.shape().to_vec(), v);
    }

    /// Replaces the vectors (gradient-trained mode) and resets the EMA
    /// statistics to match them.
    pub fn set_vectors(&mut self, vectors: Tensor<T>) -> Result<()> {
        if vectors.shape() != self.vectors.shape() {
            return Err(Error::dim(
                "codebook",
                format!("{:?} vs {:?}", vectors.shape(), self.vectors.shape()),
            ));
        }
        let n = self.dim();
        for (c, &count) in self.ema_counts.iter().enumerate() {
            let denom = count.max(lit(self.eps_count));
            for j in 0..n {
                self.ema_sums[c * n + j] = vectors.data()[c * n + j] * denom;
            }
        }
        self.vectors = vectors.detach();
        Ok(())
    }

    /// Seeds the vectors from distinct random rows of `sites[S, N]`.
    pub fn init_from_sites<R: Rng>(&mut self, sites: &Tensor<T>, rng: &mut R) -> Result<()> {
        let (s, n) = (sites.shape()[0], sites.shape()[1]);
        if n != self.dim() || s == 0 {
            return Err(Error::dim("codebook_init", format!("sites {:?}", sites.shape())));
        }
        let picks = rand::seq::index::sample(rng, s, self.size().min(s));
        let mut v = self.vectors.to_vec();
        for (c, row) in picks.iter().enumerate() {
            v[c * n..(c + 1) * n].copy_from_slice(&sites.data()[row * n..(row + 1) * n]);
        }
        self.ema_counts.iter_mut().for_each(|c| *c = T::one());
        self.ema_sums = v.clone();
        self.vectors = Tensor::from_parts(self.vectors.shape().to_vec(), v);
        Ok(())
    }
}

/// Shannon entropy (nats) of the code histogram of `indices`.
pub fn usage_entropy(indices: &[usize], codebook_size: usize) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let mut hist = vec![0usize; codebook_size];
    for &i in indices {
        hist[i] += 1;
    }
    let n = indices.len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}
