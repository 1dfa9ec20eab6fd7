//! Command-line front end.

use crate::bilevel::{gradient_path_check, CheckSettings};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{build_unpaired_split, degrade, derive_seed, make_phantom, LoadedSplit, Split};
use crate::error::{invalid, Error, Result};
use crate::imageio::{load_gray, save_gray};
use crate::model::Model;
use crate::train::{evaluate, Batch, StepReport, Trainer, TrainingSet};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "cueguide", version, about = "Exemplar-guided unpaired image enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic unpaired split with masks
    MakeData(MakeData),
    /// Pretrain the HQ cue extractor as an autoencoder
    PretrainCue(Pretrain),
    /// Plain enhancement training, optionally followed by segmentation-only steps
    Train(Train),
    /// Cooperative training of the enhancer and the segmentation head
    TrainCoop(TrainCoop),
    /// Enhance PNG images with a trained checkpoint
    Enhance(Enhance),
    /// Measure enhanced test images and write per-image CSV
    Eval(Eval),
    /// Check the gradient path decomposition of the cooperative objective
    Gradcheck(Gradcheck),
}

#[derive(Args, Debug)]
struct Common {
    /// run configuration (TOML); defaults apply for missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// dataset root, overriding `data.root`
    #[arg(long)]
    data: Option<PathBuf>,
    /// global seed, overriding `seed`
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct MakeData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_hq: usize,
    #[arg(long, default_value_t = 200)]
    n_lq: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "train")]
    split: Split,
    /// take degradation ranges from this run configuration
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Pretrain {
    #[command(flatten)]
    common: Common,
    /// continue from this checkpoint
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// per-epoch loss log (CSV)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Train {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// segmentation-only steps on the frozen enhancer after training
    #[arg(long, default_value_t = 0)]
    downstream_steps: usize,
    /// loss log (CSV), one row every `train.log_every` steps
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainCoop {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// keep the segmentation head fixed; only the enhancer adapts
    #[arg(long)]
    freeze_downstream: bool,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Enhance {
    #[arg(long)]
    ckpt: PathBuf,
    /// a PNG file or a directory of PNG files
    #[arg(long)]
    input: PathBuf,
    /// HQ guidance image (required for hq_vector checkpoints)
    #[arg(long)]
    guide: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// per-image CSV; printed to stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    /// summary (mean and std per column) as JSON
    #[arg(long)]
    summary: Option<PathBuf>,
    /// use this HQ test image as guidance for every input
    #[arg(long)]
    guidance_index: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// also write the enhanced images here
    #[arg(long)]
    save_images: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Gradcheck {
    /// parameters to check at; a fresh model from `--config` otherwise
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// side length of the synthetic probe batch
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 8)]
    fd_probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// write the report here as well as to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Failures print one `error: <kind>: <message>` line on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), single_line(&e.to_string()));
            1
        }
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::MakeData(a) => make_data(a),
        Command::PretrainCue(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::TrainCoop(a) => train_coop(a),
        Command::Enhance(a) => enhance(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<Option<RunConfig>> {
    path.map(RunConfig::load).transpose()
}

/// Builds the session: from `--init` when given (with `--config` replacing the
/// stored configuration), else fresh from `--config` or the defaults.
fn session(common: &Common, init: Option<&Path>) -> Result<Trainer> {
    let file = load_config(common.config.as_deref())?;
    let ckpt = init.map(Checkpoint::load).transpose()?;
    let mut config = match (&file, &ckpt) {
        (Some(c), _) => c.clone(),
        (None, Some(k)) => k.config.clone(),
        (None, None) => RunConfig::default(),
    };
    if let Some(root) = &common.data {
        config.data.root = root.clone();
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    match ckpt {
        Some(k) => Trainer::resume(config, &k),
        None => Trainer::new(config),
    }
}

struct Log(Option<std::fs::File>);

impl Log {
    fn create(path: Option<&Path>, header: &str) -> Result<Self> {
        let Some(path) = path else { return Ok(Self(None)) };
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", header).map_err(|e| Error::io(path, e))?;
        Ok(Self(Some(f)))
    }

    fn row(&mut self, line: &str) -> Result<()> {
        if let Some(f) = &mut self.0 {
            writeln!(f, "{}", line).map_err(|e| Error::io("log", e))?;
        }
        Ok(())
    }
}

fn make_data(a: MakeData) -> Result<()> {
    let degradation = match load_config(a.config.as_deref())? {
        Some(c) => c.data.degradation,
        None => Default::default(),
    };
    let m = build_unpaired_split(a.n_hq, a.n_lq, a.size, a.seed, &a.out, a.split, &degradation)?;
    println!(
        "wrote {} HQ and {} LQ images to {}",
        m.hq_ids.len(),
        m.lq_ids.len(),
        a.out.join(a.split.as_str()).display()
    );
    Ok(())
}

fn training_split(trainer: &Trainer) -> Result<LoadedSplit> {
    let split = LoadedSplit::load(&trainer.config.data.root, Split::Train)?;
    if split.manifest.size % 16 != 0 {
        return Err(invalid!("training images must have a side divisible by 16"));
    }
    Ok(split)
}

fn pretrain(a: Pretrain) -> Result<()> {
    let mut t = session(&a.common, a.init.as_deref())?;
    let split = training_split(&t)?;
    let mut images = split.hq.clone();
    if t.config.pretrain.include_lq {
        images.extend(split.lq.iter().cloned());
    }
    let epochs = a.epochs.unwrap_or(t.config.pretrain.epochs);
    let mut log = Log::create(a.log.as_deref(), "epoch,loss")?;
    for _ in 0..epochs {
        let loss = t.pretrain_epoch(&images)?;
        let epoch = t.counter(crate::train::PHASE_PRETRAIN);
        eprintln!("pretrain epoch {} loss {:.6}", epoch, loss);
        log.row(&format!("{},{:.8}", epoch, loss))?;
    }
    t.checkpoint().save(&a.out)
}

fn run_steps(
    t: &mut Trainer,
    steps: usize,
    log: &mut Log,
    mut step: impl FnMut(&mut Trainer) -> Result<StepReport>,
) -> Result<()> {
    let every = t.config.train.log_every.max(1);
    for i in 0..steps {
        let r = step(t)?;
        if (i + 1) % every == 0 || i + 1 == steps {
            eprintln!("{}", r.csv_row());
            log.row(&r.csv_row())?;
        }
    }
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut t = session(&a.common, a.init.as_deref())?;
    let data = TrainingSet::from_split(&training_split(&t)?);
    let steps = a.steps.unwrap_or(t.config.train.steps);
    let mut log = Log::create(a.log.as_deref(), StepReport::CSV_HEADER)?;
    run_steps(&mut t, steps, &mut log, |t| t.train_step(&data))?;
    for i in 0..a.downstream_steps {
        let loss = t.downstream_step(&data)?;
        if (i + 1) % t.config.train.log_every.max(1) == 0 {
            let row = format!("downstream,{},,,,,,{:.8},{:.8}", t.counter(crate::train::PHASE_DOWNSTREAM) - 1, loss, loss);
            eprintln!("{}", row);
            log.row(&row)?;
        }
    }
    t.checkpoint().save(&a.out)
}

fn train_coop(a: TrainCoop) -> Result<()> {
    let mut t = session(&a.common, a.init.as_deref())?;
    if a.freeze_downstream {
        t.config.coop.freeze_downstream = true;
    }
    let data = TrainingSet::from_split(&training_split(&t)?);
    let steps = a.steps.unwrap_or(t.config.coop.steps);
    let mut log = Log::create(a.log.as_deref(), StepReport::CSV_HEADER)?;
    run_steps(&mut t, steps, &mut log, |t| t.coop_step(&data))?;
    t.checkpoint().save(&a.out)
}

fn model_from(ckpt: &Checkpoint) -> Result<Model> {
    let mut model = Model::new(&ckpt.config.model, ckpt.config.seed);
    ckpt.apply_to(&mut model.store)?;
    Ok(model)
}

fn enhance(a: Enhance) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = model_from(&ckpt)?;
    let guide = a.guide.as_deref().map(load_gray).transpose()?;
    if model.config.guidance.needs_exemplar() && guide.is_none() {
        return Err(invalid!("this checkpoint uses hq_vector guidance; pass --guide"));
    }
    let inputs: Vec<PathBuf> = if a.input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&a.input)
            .map_err(|e| Error::io(&a.input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        v
    } else {
        vec![a.input.clone()]
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for path in &inputs {
        let y = load_gray(path)?;
        let xhat = model.enhance(&y, guide.as_ref())?;
        let name = path.file_name().ok_or_else(|| invalid!("input {} has no file name", path.display()))?;
        save_gray(&a.out.join(name), &xhat)?;
    }
    println!("enhanced {} images into {}", inputs.len(), a.out.display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = model_from(&ckpt)?;
    let split = LoadedSplit::load(&a.data, a.split)?;
    let mut eval = ckpt.config.eval.clone();
    if a.guidance_index.is_some() {
        eval.guidance_index = a.guidance_index;
    }
    let seed = a.seed.unwrap_or(ckpt.config.seed);
    let (mut report, outputs) = evaluate(&model, &split, &eval, seed)?;
    report.checkpoint = a.ckpt.display().to_string();
    if let Some(dir) = &a.save_images {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (m, x) in report.images.iter().zip(&outputs) {
            save_gray(&dir.join(format!("{}.png", m.id)), x)?;
        }
    }
    match &a.out {
        Some(path) => std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?,
        None => print!("{}", report.to_csv()),
    }
    if let Some(path) = &a.summary {
        let text = serde_json::to_string_pretty(&report.summary_json()).expect("summary serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// A one-image probe batch: a degraded phantom, an unrelated clean phantom as
/// guidance, and the degraded phantom's mask.
pub fn probe_batch(size: usize, seed: u64) -> Result<Batch> {
    let lq = make_phantom(derive_seed(&[seed, 1]), size)?;
    let hq = make_phantom(derive_seed(&[seed, 2]), size)?;
    let y = degrade(&lq, &Default::default(), derive_seed(&[seed, 3]))?;
    let z = hq.batch();
    let mask = lq.mask.reshape(vec![1, 1, size, size]);
    Ok(Batch {
        y,
        z_alt: z.clone(),
        z,
        mask: Some(mask),
    })
}

fn gradcheck(a: Gradcheck) -> Result<()> {
    let (config, model) = match &a.ckpt {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let model = model_from(&ckpt)?;
            (ckpt.config, model)
        }
        None => {
            let config = load_config(a.config.as_deref())?.unwrap_or_default();
            let model = Model::new(&config.model, config.seed);
            (config, model)
        }
    };
    let batch = probe_batch(a.size, a.seed)?;
    let settings = CheckSettings {
        samples: a.samples,
        fd_probes: a.fd_probes,
        seed: a.seed,
        ..CheckSettings::default()
    };
    let report = gradient_path_check(&model, &batch, &config.train.weights, &settings)?;
    let status = if report.passes(1e-6, 1e-9, 1e-3) { "pass" } else { "fail" };
    let text = format!("status = {}\n{}", status, report.to_text());
    print!("{}", text);
    if let Some(path) = &a.out {
        std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
