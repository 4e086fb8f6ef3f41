//! Synthetic moving-shapes videos with templated captions.
//!
//! Shapes follow sine trajectories over normalized time `t ∈ [0, 1]`, so a
//! ground-truth frame exists at every `t`, not only at the stored frames.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::checkpoint::Cursor;
use crate::error::{Error, Result};
use crate::nn::keyed_rng;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;
/// Samples per shard file.
pub const SHARD_SIZE: usize = 100;
const TAG_SAMPLE: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MotionPattern {
    UpThenDown,
    LeftThenRight,
    DownThenUp,
    RightThenLeft,
    Static,
}

impl MotionPattern {
    pub const ALL: [MotionPattern; 5] = [
        MotionPattern::UpThenDown,
        MotionPattern::LeftThenRight,
        MotionPattern::DownThenUp,
        MotionPattern::RightThenLeft,
        MotionPattern::Static,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionPattern::UpThenDown => "up_then_down",
            MotionPattern::LeftThenRight => "left_then_right",
            MotionPattern::DownThenUp => "down_then_up",
            MotionPattern::RightThenLeft => "right_then_left",
            MotionPattern::Static => "static",
        }
    }

    /// Words following the glyph in a caption clause.
    pub fn phrase(self) -> &'static str {
        match self {
            MotionPattern::UpThenDown => "moves up then down",
            MotionPattern::LeftThenRight => "moves left then right",
            MotionPattern::DownThenUp => "moves down then up",
            MotionPattern::RightThenLeft => "moves right then left",
            MotionPattern::Static => "stays still",
        }
    }

    /// Unit displacement `(d_row, d_col)` at the extremum.
    fn direction(self) -> (f64, f64) {
        match self {
            MotionPattern::UpThenDown => (-1.0, 0.0),
            MotionPattern::DownThenUp => (1.0, 0.0),
            MotionPattern::LeftThenRight => (0.0, -1.0),
            MotionPattern::RightThenLeft => (0.0, 1.0),
            MotionPattern::Static => (0.0, 0.0),
        }
    }

    /// The pattern moving the opposite way along the same axis; static maps
    /// to itself.
    pub fn reversed(self) -> Self {
        match self {
            MotionPattern::UpThenDown => MotionPattern::DownThenUp,
            MotionPattern::DownThenUp => MotionPattern::UpThenDown,
            MotionPattern::LeftThenRight => MotionPattern::RightThenLeft,
            MotionPattern::RightThenLeft => MotionPattern::LeftThenRight,
            MotionPattern::Static => MotionPattern::Static,
        }
    }
}

impl fmt::Display for MotionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Glyph {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl Glyph {
    pub const ALL: [Glyph; 4] = [Glyph::Square, Glyph::Circle, Glyph::Triangle, Glyph::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Glyph::Square => "square",
            Glyph::Circle => "circle",
            Glyph::Triangle => "triangle",
            Glyph::Cross => "cross",
        }
    }

    /// Signed distance (pixels) from `(r, c)` to the glyph filling the
    /// `size × size` box at the origin; negative inside.
    fn sdf(self, r: f64, c: f64, size: f64) -> f64 {
        let half = size / 2.0;
        match self {
            Glyph::Square => box_sdf(r - half, c - half, half, half),
            Glyph::Circle => ((r - half).powi(2) + (c - half).powi(2)).sqrt() - half,
            Glyph::Triangle => {
                convex_sdf(&[(0.0, half), (size, size), (size, 0.0)], r, c)
            }
            Glyph::Cross => {
                let arm = size / 6.0;
                let a = box_sdf(r - half, c - half, half, arm);
                let b = box_sdf(r - half, c - half, arm, half);
                a.min(b)
            }
        }
    }
}

impl fmt::Display for Glyph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn box_sdf(dr: f64, dc: f64, hr: f64, hc: f64) -> f64 {
    let qr = dr.abs() - hr;
    let qc = dc.abs() - hc;
    let outside = (qr.max(0.0).powi(2) + qc.max(0.0).powi(2)).sqrt();
    outside + qr.max(qc).min(0.0)
}

/// Exact signed distance to a convex polygon with clockwise-or-counter
/// vertices given as `(row, col)`.
fn convex_sdf(poly: &[(f64, f64)], r: f64, c: f64) -> f64 {
    let mut dist = f64::INFINITY;
    let mut inside = true;
    let n = poly.len();
    let orient = {
        let (a, b, c2) = (poly[0], poly[1], poly[2]);
        ((b.0 - a.0) * (c2.1 - a.1) - (b.1 - a.1) * (c2.0 - a.0)).signum()
    };
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let (er, ec) = (b.0 - a.0, b.1 - a.1);
        let (pr, pc) = (r - a.0, c - a.1);
        let len2 = er * er + ec * ec;
        let s = ((pr * er + pc * ec) / len2).clamp(0.0, 1.0);
        let d = ((pr - s * er).powi(2) + (pc - s * ec).powi(2)).sqrt();
        dist = dist.min(d);
        if (er * pc - ec * pr) * orient < 0.0 {
            inside = false;
        }
    }
    if inside {
        -dist
    } else {
        dist
    }
}

/// One shape and its motion. Positions are the top-left corner of the glyph's
/// bounding box, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub glyph: Glyph,
    pub size: f64,
    pub intensity: f64,
    pub row: f64,
    pub col: f64,
    pub pattern: MotionPattern,
    pub amplitude: f64,
}

impl ShapeSpec {
    /// Bounding box swept over `t ∈ [0, 1]`: `(row_min, col_min, row_max, col_max)`.
    pub fn swept_box(&self) -> (f64, f64, f64, f64) {
        let (dr, dc) = self.pattern.direction();
        let (r1, c1) = (self.row + dr * self.amplitude, self.col + dc * self.amplitude);
        (
            self.row.min(r1),
            self.col.min(c1),
            self.row.max(r1) + self.size,
            self.col.max(c1) + self.size,
        )
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let (r0, c0, r1, c1) = self.swept_box();
        let ok = self.size > 0.0
            && self.intensity > 0.0
            && self.intensity <= 1.0
            && self.amplitude >= 0.0
            && r0 >= 0.0
            && c0 >= 0.0
            && r1 <= height as f64
            && c1 <= width as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "shape {self:?} leaves the {height}x{width} canvas"
            )))
        }
    }

    /// Whether the glyph covers any part of pixel `(i, j)` at time `t`.
    pub fn covers(&self, t: f64, i: usize, j: usize) -> bool {
        let (r, c) = trajectory(self, t);
        self.glyph.sdf(i as f64 + 0.5 - r, j as f64 + 0.5 - c, self.size) < 0.5
    }
}

/// Top-left position of the glyph at time `t`.
pub fn trajectory(spec: &ShapeSpec, t: f64) -> (f64, f64) {
    let s = spec.amplitude * (std::f64::consts::PI * t).sin();
    let (dr, dc) = spec.pattern.direction();
    (spec.row + dr * s, spec.col + dc * s)
}

/// Anti-aliased frame before intensity quantization. Coverage of a pixel is
/// `clamp(0.5 - d, 0, 1)` with `d` the signed distance from its centre, so
/// frames vary continuously with `t`. Shapes compose by maximum.
pub fn render_continuous(specs: &[ShapeSpec], t: f64, height: usize, width: usize) -> Vec<f64> {
    let mut img = vec![0.0; height * width];
    for spec in specs {
        let (r, c) = trajectory(spec, t);
        for i in 0..height {
            for j in 0..width {
                let d = spec.glyph.sdf(i as f64 + 0.5 - r, j as f64 + 0.5 - c, spec.size);
                let v = (0.5 - d).clamp(0.0, 1.0) * spec.intensity;
                let px = &mut img[i * width + j];
                *px = f64::max(*px, v);
            }
        }
    }
    img
}

/// Frame as stored in datasets: [`render_continuous`] rounded to `k / 255`.
pub fn render_frame(specs: &[ShapeSpec], t: f64, height: usize, width: usize) -> Vec<f64> {
    render_continuous(specs, t, height, width)
        .into_iter()
        .map(|v| to_byte(v) as f64 / 255.0)
        .collect()
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn caption_for(specs: &[ShapeSpec]) -> String {
    specs
        .iter()
        .map(|s| format!("the {} {}", s.glyph, s.pattern.phrase()))
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Inverse of [`caption_for`]: `(glyph, pattern)` per clause.
pub fn parse_caption(caption: &str) -> Result<Vec<(Glyph, MotionPattern)>> {
    let bad = || Error::Input(format!("caption {caption:?} does not follow the template"));
    let words: Vec<String> = caption.split_whitespace().map(str::to_lowercase).collect();
    let mut out = Vec::new();
    for clause in words.split(|w| w == "and") {
        let [the, glyph, rest @ ..] = clause else {
            return Err(bad());
        };
        if the != "the" {
            return Err(bad());
        }
        let glyph = Glyph::ALL
            .into_iter()
            .find(|g| g.name() == glyph)
            .ok_or_else(bad)?;
        let phrase = rest.join(" ");
        let pattern = MotionPattern::ALL
            .into_iter()
            .find(|p| p.phrase() == phrase)
            .ok_or_else(bad)?;
        out.push((glyph, pattern));
    }
    Ok(out)
}

/// Every word the caption grammar can produce, in a fixed order.
pub fn caption_words() -> Vec<&'static str> {
    vec![
        "the", "moves", "stays", "still", "up", "down", "left", "right", "then", "and", "square",
        "circle", "triangle", "cross",
    ]
}

/// Uniform grid `{i / (T − 1)}`.
pub fn uniform_times(frames: usize) -> Vec<f64> {
    (0..frames).map(|i| i as f64 / (frames - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub times: Vec<f64>,
    /// One `H·W` row-major image per time, values `k / 255`.
    pub frames: Vec<Vec<f64>>,
    pub caption: String,
}

impl VideoSample {
    /// Frame `i` as a `[1, 1, H, W]` tensor.
    pub fn frame<T: Scalar>(&self, i: usize) -> Tensor<T> {
        Tensor::from_parts(
            vec![1, 1, self.height, self.width],
            self.frames[i].iter().map(|&v| lit(v)).collect(),
        )
    }

    /// All frames as `[T, 1, H, W]`.
    pub fn frames_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.frames.iter().flatten().map(|&v| lit(v)).collect();
        Tensor::from_parts(vec![self.frames.len(), 1, self.height, self.width], data)
    }
}

/// Canvas-dependent generation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeDraw {
    pub min_size: usize,
    pub max_size: usize,
    pub amplitude: f64,
}

impl ShapeDraw {
    /// Defaults scaled from a 32-pixel canvas: sizes 7..=10, amplitude 8.
    pub fn for_canvas(height: usize, width: usize) -> Self {
        let scale = height.min(width) as f64 / 32.0;
        ShapeDraw {
            min_size: ((7.0 * scale).round() as usize).max(2),
            max_size: ((10.0 * scale).round() as usize).max(3),
            amplitude: (8.0 * scale).round(),
        }
    }
}

fn boxes_overlap(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> bool {
    a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3
}

/// Draws `n_shapes` specs for `seed`: distinct glyphs, integer positions,
/// intensities on the `k / 255` lattice. Swept boxes avoid each other when a
/// placement is found within a bounded number of tries.
pub fn draw_specs(seed: u64, n_shapes: usize, height: usize, width: usize) -> Result<Vec<ShapeSpec>> {
    if n_shapes == 0 || n_shapes > Glyph::ALL.len() {
        return Err(Error::Input(format!(
            "n_shapes must be in 1..={}, got {n_shapes}",
            Glyph::ALL.len()
        )));
    }
    let draw = ShapeDraw::for_canvas(height, width);
    if (draw.max_size as f64 + 2.0 * draw.amplitude) > height.min(width) as f64 {
        return Err(Error::Input(format!("canvas {height}x{width} too small")));
    }
    let mut rng = keyed_rng(seed, TAG_SAMPLE, 0);
    let glyphs = sample(&mut rng, Glyph::ALL.len(), n_shapes);
    let mut specs: Vec<ShapeSpec> = Vec::with_capacity(n_shapes);
    for g in glyphs.iter() {
        let glyph = Glyph::ALL[g];
        let pattern = MotionPattern::ALL[rng.gen_range(0..MotionPattern::ALL.len())];
        let size = rng.gen_range(draw.min_size..=draw.max_size) as f64;
        let intensity = rng.gen_range(153..=255) as f64 / 255.0;
        let mut chosen = None;
        for attempt in 0..200 {
            let spec = place(&mut rng, glyph, pattern, size, intensity, draw.amplitude, height, width);
            let clear = specs
                .iter()
                .all(|s| !boxes_overlap(s.swept_box(), spec.swept_box()));
            if clear || attempt == 199 {
                chosen = Some(spec);
                if clear {
                    break;
                }
            }
        }
        specs.push(chosen.expect("placement loop always yields a spec"));
    }
    Ok(specs)
}

#[allow(clippy::too_many_arguments)]
fn place<R: Rng>(
    rng: &mut R,
    glyph: Glyph,
    pattern: MotionPattern,
    size: f64,
    intensity: f64,
    amplitude: f64,
    height: usize,
    width: usize,
) -> ShapeSpec {
    let (dr, dc) = pattern.direction();
    let range = |extent: usize, d: f64| {
        let lo = if d < 0.0 { amplitude } else { 0.0 };
        let hi = extent as f64 - size - if d > 0.0 { amplitude } else { 0.0 };
        rng_int(lo, hi)
    };
    let (rlo, rhi) = range(height, dr);
    let (clo, chi) = range(width, dc);
    ShapeSpec {
        glyph,
        size,
        intensity,
        row: rng.gen_range(rlo..=rhi) as f64,
        col: rng.gen_range(clo..=chi) as f64,
        pattern,
        amplitude,
    }
}

fn rng_int(lo: f64, hi: f64) -> (i64, i64) {
    (lo.ceil() as i64, hi.floor() as i64)
}

/// Deterministic sample for `seed` with uniform times `{i / (T − 1)}`.
pub fn make_sample(seed: u64, n_shapes: usize, frames: usize, height: usize, width: usize) -> Result<VideoSample> {
    if frames < 2 {
        return Err(Error::Input(format!("need at least 2 frames, got {frames}")));
    }
    let specs = draw_specs(seed, n_shapes, height, width)?;
    let times = uniform_times(frames);
    Ok(VideoSample {
        seed,
        height,
        width,
        frames: times.iter().map(|&t| render_frame(&specs, t, height, width)).collect(),
        times,
        caption: caption_for(&specs),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Largest number of samples one `(split, base seed)` pair may draw.
pub const SEEDS_PER_BASE: u64 = 1 << 24;

/// Seed of sample `index`: splits occupy disjoint high-bit ranges and each
/// base seed a disjoint block inside its split.
pub fn sample_seed(split: Split, base: u64, index: u64) -> u64 {
    assert!(index < SEEDS_PER_BASE, "sample index {index} out of range");
    let tag = match split {
        Split::Train => 0u64,
        Split::Val => 1,
        Split::Test => 2,
    };
    (tag << 62) | ((base & ((1 << 38) - 1)) << 24) | index
}

/// Description of a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetInfo {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub shapes: usize,
    pub vocab: Vec<String>,
}

impl DatasetInfo {
    pub fn manifest(&self) -> String {
        let shards = self.count.div_ceil(SHARD_SIZE);
        format!(
            "format_version={DATASET_FORMAT_VERSION}\ncount={}\nheight={}\nwidth={}\nframes={}\nshapes={}\nshards={shards}\nshard_size={SHARD_SIZE}\nvocab={}\n",
            self.count,
            self.height,
            self.width,
            self.frames,
            self.shapes,
            self.vocab.join(",")
        )
    }

    fn parse(text: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                offset: line_no as u64,
                reason: format!("manifest line {line:?} is not key=value"),
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k).ok_or_else(|| Error::Format {
                offset: 0,
                reason: format!("manifest lacks {k}"),
            })
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Format {
                offset: 0,
                reason: format!("manifest value for {k} is not a count"),
            })
        };
        let version = num("format_version")?;
        if version != DATASET_FORMAT_VERSION as usize {
            return Err(Error::Format {
                offset: 0,
                reason: format!("dataset format version {version}, expected {DATASET_FORMAT_VERSION}"),
            });
        }
        Ok(DatasetInfo {
            count: num("count")?,
            height: num("height")?,
            width: num("width")?,
            frames: num("frames")?,
            shapes: num("shapes")?,
            vocab: get("vocab")?.split(',').map(str::to_string).collect(),
        })
    }
}

fn encode_sample(s: &VideoSample, out: &mut Vec<u8>) -> Result<()> {
    let caption = s.caption.as_bytes();
    let t = u16::try_from(s.frames.len()).map_err(|_| Error::Input("too many frames".into()))?;
    let clen = u16::try_from(caption.len()).map_err(|_| Error::Input("caption too long".into()))?;
    out.extend_from_slice(&s.seed.to_le_bytes());
    out.extend_from_slice(&t.to_le_bytes());
    out.extend_from_slice(&clen.to_le_bytes());
    out.extend_from_slice(caption);
    for f in &s.frames {
        out.extend(f.iter().map(|&v| to_byte(v)));
    }
    Ok(())
}

/// Writes `manifest.txt` and `shard-%04d.bin` files under `dir`.
pub fn write_dataset(dir: &Path, info: &DatasetInfo, samples: &[VideoSample]) -> Result<()> {
    if samples.len() != info.count {
        return Err(Error::Contract(format!(
            "manifest count {} but {} samples",
            info.count,
            samples.len()
        )));
    }
    for s in samples {
        if s.height != info.height || s.width != info.width || s.frames.len() != info.frames {
            return Err(Error::Contract(format!("sample {} does not match the manifest", s.seed)));
        }
    }
    fs::create_dir_all(dir)?;
    for (i, chunk) in samples.chunks(SHARD_SIZE).enumerate() {
        let mut bytes = Vec::new();
        for s in chunk {
            encode_sample(s, &mut bytes)?;
        }
        let mut f = BufWriter::new(fs::File::create(dir.join(shard_name(i)))?);
        f.write_all(&bytes)?;
        f.flush()?;
    }
    fs::write(dir.join("manifest.txt"), info.manifest())?;
    Ok(())
}

pub fn shard_name(i: usize) -> String {
    format!("shard-{i:04}.bin")
}

pub fn read_manifest(dir: &Path) -> Result<DatasetInfo> {
    DatasetInfo::parse(&fs::read_to_string(dir.join("manifest.txt"))?)
}

/// Reads a dataset written by [`write_dataset`]. Truncated or inconsistent
/// shards yield a format error carrying the byte offset.
pub fn read_dataset(dir: &Path) -> Result<(DatasetInfo, Vec<VideoSample>)> {
    let info = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(info.count);
    let shards = info.count.div_ceil(SHARD_SIZE);
    let pixels = info.height * info.width;
    for i in 0..shards {
        let bytes = fs::read(dir.join(shard_name(i)))?;
        let mut r = Cursor::new(bytes.as_slice());
        let n = SHARD_SIZE.min(info.count - i * SHARD_SIZE);
        for _ in 0..n {
            let seed = r.u64()?;
            let t = r.u16()? as usize;
            if t != info.frames {
                return Err(r.fail(format!("sample has {t} frames, manifest says {}", info.frames)));
            }
            let clen = r.u16()? as usize;
            let caption = String::from_utf8(r.bytes(clen)?).map_err(|_| r.fail("caption is not UTF-8"))?;
            let mut frames = Vec::with_capacity(t);
            for _ in 0..t {
                frames.push(r.bytes(pixels)?.into_iter().map(|b| b as f64 / 255.0).collect());
            }
            samples.push(VideoSample {
                seed,
                height: info.height,
                width: info.width,
                times: uniform_times(t),
                frames,
                caption,
            });
        }
        if !r.at_end()? {
            return Err(r.fail("trailing bytes in shard"));
        }
    }
    Ok((info, samples))
}

/// Generates `count` samples of `split` from `base` seed.
pub fn generate(
    split: Split,
    base: u64,
    count: usize,
    n_shapes: usize,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<(DatasetInfo, Vec<VideoSample>)> {
    let samples = (0..count as u64)
        .map(|i| make_sample(sample_seed(split, base, i), n_shapes, frames, height, width))
        .collect::<Result<Vec<_>>>()?;
    let info = DatasetInfo {
        count,
        height,
        width,
        frames,
        shapes: n_shapes,
        vocab: caption_words().into_iter().map(str::to_string).collect(),
    };
    Ok((info, samples))
}
