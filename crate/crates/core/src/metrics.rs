//! Pixel-space image metrics: MSE, PSNR and SSIM with a uniform window.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 7;

fn check_pair(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(op, format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("mse", a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10·log10(max² / MSE)`; `f64::INFINITY` when the images are identical.
pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / m).log10())
}

/// Summed-area table with a zero border: `(h + 1) × (w + 1)`.
fn integral(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += img[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn window_sum(s: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let stride = w + 1;
    s[(y + k) * stride + x + k] - s[y * stride + x + k] - s[(y + k) * stride + x] + s[y * stride + x]
}

/// Mean SSIM over all fully contained `window × window` patches of two
/// `h × w` images, with population statistics inside each patch and
/// constants `(0.01·max)²`, `(0.03·max)²`.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, window: usize, max_val: f64) -> Result<f64> {
    check_pair("ssim", a, b)?;
    if a.len() != h * w {
        return Err(Error::dim("ssim", format!("{} values for {h}x{w}", a.len())));
    }
    if window == 0 || h < window || w < window {
        return Err(Error::Input(format!("image {h}x{w} is smaller than the {window}x{window} window")));
    }
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (sa, sb) = (integral(a, h, w), integral(b, h, w));
    let (saa, sbb, sab) = (integral(&sq(a), h, w), integral(&sq(b), h, w), integral(&prod, h, w));
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - window {
        for x in 0..=w - window {
            let ma = window_sum(&sa, w, y, x, window) / n;
            let mb = window_sum(&sb, w, y, x, window) / n;
            let va = (window_sum(&saa, w, y, x, window) / n - ma * ma).max(0.0);
            let vb = (window_sum(&sbb, w, y, x, window) / n - mb * mb).max(0.0);
            let cov = window_sum(&sab, w, y, x, window) / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub ssim: f64,
    pub psnr: f64,
    pub mse: f64,
}

pub fn score_frame(pred: &[f64], truth: &[f64], h: usize, w: usize) -> Result<FrameScore> {
    Ok(FrameScore {
        ssim: ssim(pred, truth, h, w, SSIM_WINDOW, 1.0)?,
        psnr: psnr(pred, truth, 1.0)?,
        mse: mse(pred, truth)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
struct VideoScores {
    group: String,
    frames: Vec<FrameScore>,
}

/// Per-frame scores of many videos with grouped aggregates.
///
/// PSNR means are taken over finite frames only; frames with zero error are
/// counted separately as `psnr_infinite_frames`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    videos: Vec<VideoScores>,
    groups: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub frames: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub psnr_infinite: usize,
    pub mse: f64,
}

fn aggregate<'a>(frames: impl Iterator<Item = &'a FrameScore>) -> Aggregate {
    let (mut n, mut ssim, mut mse, mut psnr, mut finite, mut inf) = (0, 0.0, 0.0, 0.0, 0, 0);
    for f in frames {
        n += 1;
        ssim += f.ssim;
        mse += f.mse;
        if f.psnr.is_finite() {
            psnr += f.psnr;
            finite += 1;
        } else {
            inf += 1;
        }
    }
    let div = |v: f64, k: usize| if k == 0 { f64::NAN } else { v / k as f64 };
    Aggregate {
        frames: n,
        ssim: div(ssim, n),
        psnr: div(psnr, finite),
        psnr_infinite: inf,
        mse: div(mse, n),
    }
}

impl MetricReport {
    /// Report whose group breakdown always lists `groups` (possibly empty).
    pub fn with_groups(groups: &[&str]) -> Self {
        MetricReport {
            videos: Vec::new(),
            groups: groups.iter().map(|g| g.to_string()).collect(),
        }
    }

    /// Scores `pred` against `truth` frame by frame; both are `T` images of
    /// `h × w`.
    pub fn add_video(&mut self, group: &str, pred: &[Vec<f64>], truth: &[Vec<f64>], h: usize, w: usize) -> Result<()> {
        if pred.len() != truth.len() || pred.is_empty() {
            return Err(Error::dim("report", format!("{} vs {} frames", pred.len(), truth.len())));
        }
        let frames = pred
            .iter()
            .zip(truth)
            .map(|(p, t)| score_frame(p, t, h, w))
            .collect::<Result<Vec<_>>>()?;
        if !self.groups.iter().any(|g| g == group) {
            self.groups.push(group.to_string());
        }
        self.videos.push(VideoScores {
            group: group.to_string(),
            frames,
        });
        Ok(())
    }

    pub fn overall(&self) -> Aggregate {
        aggregate(self.videos.iter().flat_map(|v| v.frames.iter()))
    }

    pub fn group(&self, group: &str) -> Aggregate {
        aggregate(self.videos.iter().filter(|v| v.group == group).flat_map(|v| v.frames.iter()))
    }

    /// Per-video aggregates in insertion order.
    pub fn videos(&self) -> Vec<Aggregate> {
        self.videos.iter().map(|v| aggregate(v.frames.iter())).collect()
    }

    /// Mean over videos of the per-frame SSIM at each frame index.
    pub fn ssim_by_frame_index(&self) -> Vec<f64> {
        let mut by: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for v in &self.videos {
            for (i, f) in v.frames.iter().enumerate() {
                let e = by.entry(i).or_default();
                e.0 += f.ssim;
                e.1 += 1;
            }
        }
        by.values().map(|(s, n)| s / *n as f64).collect()
    }

    /// Line-oriented `key=value` text.
    pub fn to_text(&self) -> String {
        let num = |v: f64| {
            if v.is_nan() {
                "none".to_string()
            } else {
                format!("{v:.6}")
            }
        };
        let mut out = String::new();
        let all = self.overall();
        let _ = writeln!(out, "videos={}", self.videos.len());
        let _ = writeln!(out, "frames={}", all.frames);
        let _ = writeln!(out, "ssim_mean={}", num(all.ssim));
        let _ = writeln!(out, "psnr_mean={}", num(all.psnr));
        let _ = writeln!(out, "psnr_infinite_frames={}", all.psnr_infinite);
        let _ = writeln!(out, "mse_mean={}", num(all.mse));
        for g in &self.groups {
            let a = self.group(g);
            let _ = writeln!(out, "group.{g}.videos={}", self.videos.iter().filter(|v| &v.group == g).count());
            let _ = writeln!(out, "group.{g}.ssim={}", num(a.ssim));
            let _ = writeln!(out, "group.{g}.psnr={}", num(a.psnr));
            let _ = writeln!(out, "group.{g}.mse={}", num(a.mse));
        }
        for (i, s) in self.ssim_by_frame_index().iter().enumerate() {
            let _ = writeln!(out, "frame_index.{i}.ssim={}", num(*s));
        }
        for (i, v) in self.videos().iter().enumerate() {
            let _ = writeln!(out, "video.{i}.ssim={} psnr={} mse={}", num(v.ssim), num(v.psnr), num(v.mse));
        }
        out
    }
}

/// Parses `key=value` lines, as written by [`MetricReport::to_text`], into a
/// map. Lines with several `key=value` pairs contribute the first pair's key
/// with the remainder as value.
pub fn parse_report(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
