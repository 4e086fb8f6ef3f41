//! Reference computations that share no code with the implementation they
//! check: central finite differences, brute-force nearest neighbours, the
//! k-means M-step and a plain SSIM evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finite-difference step used throughout the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences restricted to the coordinates in `indices`.
pub fn central_diff_at(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    indices: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn random_vec(seed: u64, n: usize, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Index of the nearest codeword for each site by exhaustive search, ties to
/// the lowest index.
pub fn brute_force_argmin(sites: &[Vec<f64>], codebook: &[Vec<f64>]) -> Vec<usize> {
    sites
        .iter()
        .map(|s| {
            let mut best = (f64::INFINITY, 0);
            for (k, e) in codebook.iter().enumerate() {
                let d: f64 = s.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1
        })
        .collect()
}

/// Cluster means of `sites` under `assign`; empty clusters keep `previous`.
pub fn kmeans_m_step(sites: &[Vec<f64>], assign: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = previous[0].len();
    let mut sums = vec![vec![0.0; dim]; previous.len()];
    let mut counts = vec![0usize; previous.len()];
    for (s, &k) in sites.iter().zip(assign) {
        counts[k] += 1;
        for (acc, v) in sums[k].iter_mut().zip(s) {
            *acc += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((sum, n), prev)| {
            if n == 0 {
                prev.clone()
            } else {
                sum.into_iter().map(|v| v / n as f64).collect()
            }
        })
        .collect()
}

/// SSIM by direct evaluation of the luminance/contrast/structure formula on
/// every `win × win` window, averaged. Images are row-major `h × w`.
pub fn ssim_direct(a: &[f64], b: &[f64], h: usize, w: usize, win: usize, max: f64) -> f64 {
    let c1 = (0.01 * max).powi(2);
    let c2 = (0.03 * max).powi(2);
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - win {
        for x in 0..=w - win {
            let px: Vec<(f64, f64)> = (0..win)
                .flat_map(|dy| (0..win).map(move |dx| (y + dy) * w + x + dx))
                .map(|i| (a[i], b[i]))
                .collect();
            let ma = px.iter().map(|p| p.0).sum::<f64>() / n;
            let mb = px.iter().map(|p| p.1).sum::<f64>() / n;
            let va = px.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / n;
            let vb = px.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / n;
            let cov = px.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}
