//! Run orchestration behind the `tivode` binary: dataset generation,
//! pretraining, training, generation, evaluation and the variant ablation.
//!
//! Every command is a pure function of its configuration, the dataset bytes
//! and the seed. Outputs land in one directory together with the resolved
//! configuration.

mod pgm;
mod times;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use tivode::checkpoint::Checkpoint;
use tivode::config::RunConfig;
use tivode::error::{Error, Result};
use tivode::fusion::Vocabulary;
use tivode::metrics::MetricReport;
use tivode::model::{train_epoch, TivOdeModel, Trainer, Variant};
use tivode::odesolve::TimeGrid;
use tivode::shapesdata::{
    make_sample, parse_caption, read_dataset, sample_seed, write_dataset, DatasetInfo, MotionPattern, Split,
    VideoSample,
};
use tivode::vqvae::{pretrain_epoch, VqTrainer, VqVae};
use tivode::Tensor64;

pub use pgm::{read_pgm, write_pgm};
pub use times::{frame_name, parse_times};

/// Largest number of shapes per sample.
pub const MAX_SHAPES: usize = 3;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Input(_) | Error::Dimension { .. } | Error::Contract(_) | Error::UnsupportedGrid(_) => 2,
        Error::Io(_) | Error::Format { .. } => 3,
        Error::NonFiniteLoss { .. } => 4,
        Error::Integration { .. } | Error::Stiffness { .. } | Error::Budget { .. } => 5,
    }
}

/// Worker threads for data generation, from `TIVODE_THREADS` (default 1).
pub fn thread_count() -> usize {
    std::env::var("TIVODE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenDataArgs {
    pub split: Split,
    pub samples: usize,
    pub shapes: usize,
    pub frames: usize,
    pub size: usize,
    pub seed: u64,
}

/// Renders a dataset into `out` and returns its manifest.
pub fn gen_data(out: &Path, args: &GenDataArgs) -> Result<DatasetInfo> {
    if args.shapes == 0 || args.shapes > MAX_SHAPES {
        return Err(Error::Input(format!("--shapes must be in 1..={MAX_SHAPES}, got {}", args.shapes)));
    }
    if args.samples == 0 || args.frames < 2 || args.size < 8 {
        return Err(Error::Input("need at least one sample, two frames and an 8-pixel canvas".into()));
    }
    let threads = thread_count().min(args.samples);
    let chunk = args.samples.div_ceil(threads);
    let render = |range: std::ops::Range<usize>| -> Result<Vec<VideoSample>> {
        range
            .map(|i| {
                let seed = sample_seed(args.split, args.seed, i as u64);
                make_sample(seed, args.shapes, args.frames, args.size, args.size)
            })
            .collect()
    };
    let parts: Vec<Result<Vec<VideoSample>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let range = (w * chunk)..((w + 1) * chunk).min(args.samples);
                s.spawn(move || render(range))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("render worker panicked")).collect()
    });
    let mut samples = Vec::with_capacity(args.samples);
    for p in parts {
        samples.extend(p?);
    }
    let info = DatasetInfo {
        count: args.samples,
        height: args.size,
        width: args.size,
        frames: args.frames,
        shapes: args.shapes,
        vocab: tivode::shapesdata::caption_words().into_iter().map(str::to_string).collect(),
    };
    write_dataset(out, &info, &samples)?;
    Ok(info)
}

/// Reads a configuration file, or the defaults when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse_text(&fs::read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn check_dataset(cfg: &RunConfig, info: &DatasetInfo) -> Result<()> {
    if info.height != cfg.data.size || info.width != cfg.data.size || info.frames != cfg.data.frames {
        return Err(Error::Input(format!(
            "dataset is {}x{} with {} frames but the configuration expects {}x{} with {}",
            info.height, info.width, info.frames, cfg.data.size, cfg.data.size, cfg.data.frames
        )));
    }
    Ok(())
}

fn vocabulary(info: &DatasetInfo) -> Result<Vocabulary> {
    Vocabulary::new(&info.vocab)
}

fn epoch_files(out: &Path, stem: &str) -> Result<Vec<(usize, PathBuf)>> {
    let mut found = Vec::new();
    if !out.exists() {
        return Ok(found);
    }
    for entry in fs::read_dir(out)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(num) = name
            .strip_prefix(stem)
            .and_then(|r| r.strip_prefix("-epoch-"))
            .and_then(|r| r.strip_suffix(".ckpt"))
        {
            if let Ok(k) = num.parse::<usize>() {
                found.push((k, path));
            }
        }
    }
    found.sort();
    Ok(found)
}

fn epoch_path(out: &Path, stem: &str, epoch: usize) -> PathBuf {
    out.join(format!("{stem}-epoch-{epoch:03}.ckpt"))
}

/// Keeps the header and the first `steps` rows of a TSV log.
fn truncate_log(path: &Path, steps: u64) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let kept: String = text
        .lines()
        .take(1 + steps as usize)
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept)?;
    Ok(())
}

fn append_lines(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

fn archive_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    Ok(())
}

pub const PRETRAIN_LOG_HEADER: &str = "step\ttotal\trecon\talign\tcommit";
pub const TRAIN_LOG_HEADER: &str = "step\tepoch\tloss\trecon\tcommit\tlatent";

/// Outcome of a pretraining run.
#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    /// Mean reconstruction MSE per epoch, for the epochs run by this call.
    pub epoch_recon: Vec<f64>,
}

/// VQ-VAE pretraining on every frame of the dataset. Writes
/// `vqvae-epoch-NNN.ckpt` after each epoch, `vqvae.ckpt` at the end and
/// appends to `pretrain_log.tsv`. With `resume`, continues from the latest
/// epoch checkpoint in `out`.
pub fn pretrain(cfg: &RunConfig, data: &Path, out: &Path, resume: bool) -> Result<PretrainSummary> {
    let (info, samples) = read_dataset(data)?;
    check_dataset(cfg, &info)?;
    archive_config(out, cfg)?;
    let images: Vec<Tensor64> = samples
        .iter()
        .flat_map(|s| (0..s.frames.len()).map(move |i| s.frame(i)))
        .collect();
    let mut model = VqVae::<f64>::new(cfg.model.vq, cfg.pretrain.seed)?;
    let mut trainer = VqTrainer::new(cfg.pretrain)?;
    let log_path = out.join("pretrain_log.tsv");
    let latest = if resume { epoch_files(out, "vqvae")?.pop() } else { None };
    match latest {
        Some((_, path)) => {
            let ck = Checkpoint::load(&path)?;
            check_config_hash(&ck, cfg)?;
            model.load_from(&ck, "")?;
            trainer = VqTrainer::restore(cfg.pretrain, &ck)?;
            truncate_log(&log_path, trainer.step)?;
        }
        None => {
            let _ = fs::remove_file(&log_path);
        }
    }
    let mut epoch_recon = Vec::new();
    while trainer.epoch < cfg.pretrain.epochs {
        let first = trainer.log.len();
        let stats = pretrain_epoch(&mut model, &mut trainer, &images)?;
        let lines: Vec<String> = trainer.log[first..]
            .iter()
            .map(|l| format!("{}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}", l.step, l.total, l.recon, l.align, l.commit))
            .collect();
        append_lines(&log_path, PRETRAIN_LOG_HEADER, &lines)?;
        epoch_recon.push(stats.recon);
        let ck = vq_checkpoint(&model, &trainer, cfg);
        ck.save(&epoch_path(out, "vqvae", stats.epoch))?;
    }
    let checkpoint = out.join("vqvae.ckpt");
    vq_checkpoint(&model, &trainer, cfg).save(&checkpoint)?;
    Ok(PretrainSummary { checkpoint, epoch_recon })
}

fn vq_checkpoint(model: &VqVae<f64>, trainer: &VqTrainer<f64>, cfg: &RunConfig) -> Checkpoint<f64> {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "tivode-vqvae");
    ck.set_meta("config_hash", cfg.digest());
    model.save_into(&mut ck, "");
    trainer.save_into(&mut ck);
    ck
}

fn check_config_hash(ck: &Checkpoint<f64>, cfg: &RunConfig) -> Result<()> {
    if ck.meta("config_hash")? != cfg.digest() {
        return Err(Error::Input("checkpoint was written under a different configuration".into()));
    }
    Ok(())
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps: u64,
    /// Loss of every step run by this call.
    pub losses: Vec<f64>,
}

/// Full-model training. Loads the pretrained VQ-VAE from `paths.vqvae` when
/// set, writes `model-epoch-NNN.ckpt` after each epoch and `model.ckpt` at
/// the end, and appends to `train_log.tsv`. Runs until `train.epochs` epochs
/// or `train.max_steps` steps, whichever comes first.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: bool) -> Result<TrainSummary> {
    let (info, samples) = read_dataset(data)?;
    check_dataset(cfg, &info)?;
    archive_config(out, cfg)?;
    let log_path = out.join("train_log.tsv");
    let latest = if resume { epoch_files(out, "model")?.pop() } else { None };
    let (mut model, mut trainer) = match latest {
        Some((_, path)) => {
            let ck = Checkpoint::load(&path)?;
            check_config_hash(&ck, cfg)?;
            let (model, _) = TivOdeModel::from_checkpoint(&ck)?;
            let trainer = Trainer::restore(cfg.train, &ck)?;
            truncate_log(&log_path, trainer.step)?;
            (model, trainer)
        }
        None => {
            let _ = fs::remove_file(&log_path);
            let mut model = TivOdeModel::new(cfg.model, vocabulary(&info)?, cfg.seed)?;
            if !cfg.vqvae_path.is_empty() {
                let ck = Checkpoint::load(Path::new(&cfg.vqvae_path))?;
                model.vq.load_from(&ck, "")?;
            }
            (model, Trainer::new(cfg.train)?)
        }
    };
    let mut losses = Vec::new();
    while trainer.epoch < cfg.train.epochs && !trainer.finished() {
        let first = trainer.log.len();
        let stats = train_epoch(&mut model, &mut trainer, &samples)?;
        let lines: Vec<String> = trainer.log[first..].iter().map(|l| l.to_line()).collect();
        losses.extend(trainer.log[first..].iter().map(|l| l.loss));
        append_lines(&log_path, TRAIN_LOG_HEADER, &lines)?;
        model_checkpoint(&model, &trainer, cfg)?.save(&epoch_path(out, "model", stats.epoch))?;
    }
    let checkpoint = out.join("model.ckpt");
    model_checkpoint(&model, &trainer, cfg)?.save(&checkpoint)?;
    Ok(TrainSummary {
        checkpoint,
        steps: trainer.step,
        losses,
    })
}

fn model_checkpoint(model: &TivOdeModel<f64>, trainer: &Trainer<f64>, cfg: &RunConfig) -> Result<Checkpoint<f64>> {
    let mut ck = model.to_checkpoint(cfg)?;
    trainer.save_into(&mut ck);
    Ok(ck)
}

pub fn load_model(ckpt: &Path) -> Result<(TivOdeModel<f64>, RunConfig)> {
    TivOdeModel::from_checkpoint(&Checkpoint::load(ckpt)?)
}

/// Frames at every time of `grid` from the first frame `image`.
pub fn generate_frames(model: &TivOdeModel<f64>, image: &[f64], size: (usize, usize), caption: &str, grid: &TimeGrid) -> Result<Vec<Vec<f64>>> {
    let (h, w) = size;
    let x0 = Tensor64::new(&[1, 1, h, w], image.to_vec())?;
    Ok(model
        .generate(&x0, caption, grid)?
        .iter()
        .map(|f| f.to_vec())
        .collect())
}

/// `generate` command: one PGM per time plus `manifest.txt`.
pub fn generate_to_dir(ckpt: &Path, image: &Path, caption: &str, times: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let grid = parse_times(times)?;
    let (model, cfg) = load_model(ckpt)?;
    let (pixels, h, w) = read_pgm(image)?;
    if h != cfg.data.size || w != cfg.data.size {
        return Err(Error::Input(format!(
            "image is {h}x{w}, the model was trained on {0}x{0}",
            cfg.data.size
        )));
    }
    let frames = generate_frames(&model, &pixels, (h, w), caption, &grid)?;
    fs::create_dir_all(out_dir)?;
    let mut manifest = format!(
        "checkpoint={}\nimage={}\ncaption={caption}\nvariant={}\nsolver={}\nframes={}\n",
        ckpt.display(),
        image.display(),
        model.config.variant.name(),
        model.config.solver.method.name(),
        frames.len()
    );
    let mut written = Vec::with_capacity(frames.len());
    for (t, f) in grid.times().iter().zip(&frames) {
        let name = frame_name(*t);
        write_pgm(&out_dir.join(&name), f, h, w)?;
        manifest.push_str(&format!("frame={t:.4}\t{name}\n"));
        written.push(out_dir.join(name));
    }
    fs::write(out_dir.join("manifest.txt"), manifest)?;
    Ok(written)
}

/// Group of a sample in the per-pattern breakdown: the motion pattern of its
/// first caption clause.
pub fn pattern_group(caption: &str) -> Result<&'static str> {
    let clauses = parse_caption(caption)?;
    Ok(clauses
        .first()
        .ok_or_else(|| Error::Input(format!("caption {caption:?} has no clause")))?
        .1
        .name())
}

/// Scores generated videos against every sample of `samples`, each from its
/// first frame and caption at its native times.
pub fn evaluate_model(model: &TivOdeModel<f64>, samples: &[VideoSample]) -> Result<MetricReport> {
    let groups: Vec<&str> = MotionPattern::ALL.iter().map(|p| p.name()).collect();
    let mut report = MetricReport::with_groups(&groups);
    for s in samples {
        let grid = TimeGrid::new(s.times.clone())?;
        let pred = generate_frames(model, &s.frames[0], (s.height, s.width), &s.caption, &grid)?;
        report.add_video(pattern_group(&s.caption)?, &pred, &s.frames, s.height, s.width)?;
    }
    Ok(report)
}

/// `evaluate` command; writes the report text and returns it.
pub fn evaluate(ckpt: &Path, data: &Path, report: &Path) -> Result<MetricReport> {
    let (model, cfg) = load_model(ckpt)?;
    let (info, samples) = read_dataset(data)?;
    if info.height != cfg.data.size || info.width != cfg.data.size {
        return Err(Error::Input("evaluation data does not match the model's frame size".into()));
    }
    let r = evaluate_model(&model, &samples)?;
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(report, r.to_text())?;
    Ok(r)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub ssim: f64,
    pub mse: f64,
}

pub const ABLATION_HEADER: &str = "model\tssim\tmse";

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{}\t{:.6}\t{:.6}\n", r.variant.label(), r.ssim, r.mse));
    }
    s
}

/// Trains every variant with the same configuration and step budget into
/// `out/<variant>`, scores each on `eval_data`, and writes `ablation.tsv`.
pub fn ablate(cfg: &RunConfig, data: &Path, eval_data: &Path, out: &Path) -> Result<Vec<AblationRow>> {
    archive_config(out, cfg)?;
    let (_, eval_samples) = read_dataset(eval_data)?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut c = cfg.clone();
        c.set("train.baseline", variant.name())?;
        let run = train(&c, data, &out.join(variant.name()), false)?;
        let (model, _) = load_model(&run.checkpoint)?;
        let report = evaluate_model(&model, &eval_samples)?;
        fs::write(out.join(variant.name()).join("report.txt"), report.to_text())?;
        let all = report.overall();
        rows.push(AblationRow {
            variant,
            ssim: all.ssim,
            mse: all.mse,
        });
    }
    fs::write(out.join("ablation.tsv"), ablation_table(&rows))?;
    Ok(rows)
}
