//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use facefill::assessment::{self, BundleKey, Denominator};
use facefill::checkpoint::Checkpoint;
use facefill::data::{self, load_image, save_landmarks, save_png, scan_dataset, Split};
use facefill::embedder::ConvEmbedder;
use facefill::inference::InferenceModel;
use facefill::masking::{self, generate_irregular_mask, load_segmentation_mask, save_mask_png, Bucket, MaskSpec};
use facefill::metrics::{evaluate_corpus, Inpainter, MaskSource, OracleInpainter};
use facefill::network::Ablation;
use facefill::training::{self, load_training_set, train_loop, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "facefill", version, about = "Face inpainting with joint landmark prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a generator/discriminator pair.
    Train(TrainArgs),
    /// Inpaint one image.
    Infer(InferArgs),
    /// PSNR/SSIM/FID per mask-ratio bucket.
    Evaluate(EvaluateArgs),
    /// Generate random irregular masks.
    Maskgen(MaskgenArgs),
    /// Aggregate expert ratings into valid-probability and ranking tables.
    Assess(AssessArgs),
    /// Build a blinded rating bundle and its key.
    Bundle(BundleArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
    /// Write a synthetic annotated face dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset root with images and 68-point landmark files.
    #[arg(long, required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Train on this many synthetic faces instead of --data.
    #[arg(long, conflicts_with = "data")]
    synthetic: Option<usize>,
    /// TOML config; explicit flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// baseline, base+lmk or full.
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    residual_blocks: Option<usize>,
    #[arg(long)]
    disc_channels: Option<usize>,
    #[arg(long)]
    lr_g: Option<f64>,
    #[arg(long)]
    lr_d: Option<f64>,
    #[arg(long)]
    decay_interval: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    w_hole: Option<f64>,
    /// Per-sample sum of squared landmark errors instead of the mean.
    #[arg(long)]
    lmk_loss_sum: bool,
    /// Feature extractor weights for the perceptual and style losses.
    #[arg(long)]
    embedder: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Single-channel PNG, 255 = hole.
    #[arg(long)]
    mask: PathBuf,
    /// Output PNG; defaults to `<image stem>.inpainted.png` next to the image.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restore known pixels from the input.
    #[arg(long)]
    composite: bool,
    /// Write predicted landmarks (one `x y` line per point).
    #[arg(long)]
    landmarks_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the identity model that returns the ground truth.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
    /// Working side for --oracle.
    #[arg(long, default_value_t = 256)]
    side: usize,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated buckets, e.g. `0-20,20-40`.
    #[arg(long, value_delimiter = ',', default_values_t = vec!["0-20".to_string(), "20-40".to_string(), "40-60".to_string()])]
    buckets: Vec<String>,
    /// Use `<dir>/<image stem>.png` masks instead of generated ones.
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long, alias = "seed", default_value_t = 0)]
    mask_seed: u64,
    /// Feature extractor weights; a seeded random extractor otherwise.
    #[arg(long)]
    embedder: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    embedder_seed: u64,
    /// JSON report path; a `.txt` table is written beside it.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MaskgenArgs {
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    side: usize,
    #[arg(long)]
    bucket: Option<Bucket>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct AssessArgs {
    /// CSV with header rater,case,slot,valid,rank.
    #[arg(long)]
    ratings: PathBuf,
    #[arg(long)]
    key: PathBuf,
    /// JSON report path; tables and joined records are written beside it.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = Denominator::PerRating)]
    denominator: Denominator,
}

#[derive(Args, Debug)]
struct BundleArgs {
    /// Directory with one subdirectory of outputs per model (and optional `input/`).
    #[arg(long)]
    cases: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Slot-to-model key; keep it away from raters.
    #[arg(long)]
    key: PathBuf,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    #[arg(long, default_value_t = facefill_service::DEFAULT_MAX_BODY)]
    max_body_bytes: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 256)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Error carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: msg.into() }
}

impl From<facefill::Error> for Failure {
    fn from(e: facefill::Error) -> Self {
        Failure { code: EXIT_RUNTIME, message: e.to_string() }
    }
}

impl From<facefill_service::ServiceError> for Failure {
    fn from(e: facefill_service::ServiceError) -> Self {
        Failure { code: EXIT_RUNTIME, message: e.to_string() }
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: EXIT_RUNTIME, message: format!("{}: {e}", path.display()) }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a, out),
        Command::Infer(a) => infer(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Maskgen(a) => maskgen(a, out),
        Command::Assess(a) => assess(a, out),
        Command::Bundle(a) => bundle(a, out),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn train_config(a: &TrainArgs, resumed: Option<&Checkpoint>) -> Result<TrainConfig, Failure> {
    let mut cfg = match (&a.config, resumed) {
        (Some(p), _) => TrainConfig::load(p).map_err(|e| usage(e.to_string()))?,
        (None, Some(ck)) => ck.train.clone(),
        (None, None) => TrainConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(
            if let Some(v) = a.$flag.clone() {
                cfg.$field = v;
            }
        )*};
    }
    set!(ablation => ablation, seed => seed, max_steps => max_steps, batch_size => batch_size, side => input_side,
        base_channels => base_channels, residual_blocks => residual_blocks, disc_channels => disc_channels,
        lr_g => lr_g, lr_d => lr_d, decay_interval => decay_interval, checkpoint_every => checkpoint_every,
        w_hole => w_hole);
    if a.lmk_loss_sum {
        cfg.lmk_loss_sum = true;
    }
    if let Some(p) = &a.embedder {
        cfg.embedder_weights = Some(p.clone());
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<(), Failure> {
    if let Some(d) = &a.data {
        if !d.is_dir() {
            return Err(usage(format!("data directory {} does not exist", d.display())));
        }
    }
    let resumed = match &a.resume {
        Some(p) if !p.exists() => {
            return Err(Failure { code: EXIT_RUNTIME, message: format!("resume checkpoint {} not found", p.display()) })
        }
        Some(p) => Some(Checkpoint::load(p)?.0),
        None => None,
    };
    let cfg = train_config(&a, resumed.as_ref())?;
    let samples = match (&a.data, a.synthetic) {
        (Some(d), _) => {
            let manifest = scan_dataset(d, Split::Train)?;
            if manifest.dropped > 0 {
                log::warn!("{} images without landmarks were left out", manifest.dropped);
            }
            load_training_set(&manifest, cfg.input_side)?
        }
        (None, Some(n)) => training::synthetic_samples(n, cfg.input_side, cfg.seed),
        (None, None) => return Err(usage("one of --data or --synthetic is required")),
    };
    let mut trainer = match resumed {
        Some(ck) => Trainer::from_checkpoint(ck, cfg, samples)?,
        None => Trainer::new(cfg, samples)?,
    };
    fs::create_dir_all(&a.out).map_err(|e| io_fail(&a.out, e))?;
    fs::write(a.out.join("config.toml"), trainer.cfg.to_toml()).map_err(|e| io_fail(&a.out, e))?;
    let log_path = a.out.join("metrics.jsonl");
    let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| io_fail(&log_path, e))?;
    let outcome = train_loop(&mut trainer, &a.out, &mut log)?;
    let _ = writeln!(out, "trained {} steps; checkpoint {} ({})", outcome.steps, outcome.final_checkpoint.display(), outcome.checkpoint_id);
    Ok(())
}

fn default_output(image: &Path) -> PathBuf {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    image.with_file_name(format!("{stem}.inpainted.png"))
}

fn infer(a: InferArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let model = InferenceModel::load(&a.checkpoint)?;
    let image = load_image(&a.image)?;
    let mask = load_segmentation_mask(&a.mask)?;
    let r = model.run(&image, &mask, a.composite)?;
    let dst = a.out.clone().unwrap_or_else(|| default_output(&a.image));
    save_png(&r.output, &dst)?;
    let _ = writeln!(out, "wrote {}", dst.display());
    if let Some(p) = &a.landmarks_out {
        match &r.landmarks {
            Some(l) => {
                save_landmarks(l, p)?;
                let _ = writeln!(out, "wrote {}", p.display());
            }
            None => return Err(usage("this checkpoint has no landmark branch; drop --landmarks-out")),
        }
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Result<(), Failure> {
    if !a.data.is_dir() {
        return Err(usage(format!("data directory {} does not exist", a.data.display())));
    }
    let buckets = a.buckets.iter().map(|b| b.parse::<Bucket>()).collect::<Result<Vec<_>, _>>().map_err(|e| usage(e.to_string()))?;
    let model: Box<dyn Inpainter> = match &a.checkpoint {
        Some(p) => Box::new(InferenceModel::load(p)?),
        None => Box::new(OracleInpainter),
    };
    let side = match &a.checkpoint {
        Some(p) => InferenceModel::load(p)?.config().input_side,
        None => a.side,
    };
    let manifest = scan_dataset(&a.data, Split::Eval)?;
    let images = manifest
        .entries
        .iter()
        .map(|e| data::resize(&load_image(&e.image)?.to_rgb(), side, side))
        .collect::<Result<Vec<_>, facefill::Error>>()?;
    let source = match &a.masks {
        Some(dir) => MaskSource::Given(
            manifest
                .entries
                .iter()
                .map(|e| {
                    let stem = e.image.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                    load_segmentation_mask(&dir.join(format!("{stem}.png")))?.resize(side, side)
                })
                .collect::<Result<_, _>>()?,
        ),
        None => MaskSource::Generated { seed: a.mask_seed, buckets },
    };
    let embedder = match &a.embedder {
        Some(p) => ConvEmbedder::load(p)?,
        None => ConvEmbedder::seeded(a.embedder_seed),
    };
    let report = evaluate_corpus(model.as_ref(), &images, &source, &embedder)?;
    let table = report.to_table();
    let _ = write!(out, "{table}");
    if let Some(p) = &a.report {
        fs::write(p, report.to_json()).map_err(|e| io_fail(p, e))?;
        let t = p.with_extension("txt");
        fs::write(&t, &table).map_err(|e| io_fail(&t, e))?;
    }
    Ok(())
}

fn maskgen(a: MaskgenArgs, out: &mut dyn Write) -> Result<(), Failure> {
    if a.side == 0 {
        return Err(usage("--side must be positive"));
    }
    let spec = MaskSpec::for_side(a.side).with_bucket(a.bucket);
    fs::create_dir_all(&a.out_dir).map_err(|e| io_fail(&a.out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for i in 0..a.count {
        let m = generate_irregular_mask(&mut rng, &spec, a.side)?;
        let p = a.out_dir.join(format!("mask-{i:04}.png"));
        save_mask_png(&m, &p)?;
        let _ = writeln!(out, "{} ratio {:.4}", p.display(), masking::mask_ratio(&m));
    }
    Ok(())
}

fn assess(a: AssessArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let records = assessment::load_ratings(&a.ratings).map_err(|e| match e {
        facefill::Error::Protocol(m) => usage(m),
        other => other.into(),
    })?;
    let key = BundleKey::load(&a.key)?;
    let report = assessment::assess(&records, &key, a.denominator).map_err(|e| match e {
        facefill::Error::Protocol(m) => usage(m),
        other => other.into(),
    })?;
    let tables = format!("{}\n{}", report.valid_table(), report.ranking_table());
    let _ = write!(out, "{tables}");
    if let Some(p) = &a.report {
        fs::write(p, report.to_json()).map_err(|e| io_fail(p, e))?;
        for (ext, body) in [("txt", tables), ("records.csv", report.records_csv())] {
            let t = p.with_extension(ext);
            fs::write(&t, body).map_err(|e| io_fail(&t, e))?;
        }
    }
    Ok(())
}

fn bundle(a: BundleArgs, out: &mut dyn Write) -> Result<(), Failure> {
    if !a.cases.is_dir() {
        return Err(usage(format!("cases directory {} does not exist", a.cases.display())));
    }
    let cases = assessment::scan_case_outputs(&a.cases)?;
    let (b, key) = assessment::build_bundle(&cases, a.seed).map_err(|e| match e {
        facefill::Error::Protocol(m) => usage(m),
        other => other.into(),
    })?;
    let written = assessment::write_bundle(&b, &a.out)?;
    key.save(&a.key)?;
    let _ = writeln!(out, "bundled {} cases into {}; key {}", written.cases.len(), a.out.display(), a.key.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), Failure> {
    let cfg = facefill_service::ServiceConfig { listen: a.listen, checkpoint: a.checkpoint, max_body_bytes: a.max_body_bytes };
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure { code: EXIT_RUNTIME, message: e.to_string() })?;
    rt.block_on(facefill_service::serve(cfg))?;
    Ok(())
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let images = a.out.join("images");
    let landmarks = a.out.join("landmarks");
    for d in [&images, &landmarks] {
        fs::create_dir_all(d).map_err(|e| io_fail(d, e))?;
    }
    for (i, s) in training::synthetic_samples(a.count, a.side, a.seed).into_iter().enumerate() {
        save_png(&s.image, &images.join(format!("face-{i:04}.png")))?;
        if let Some(l) = &s.landmarks {
            save_landmarks(l, &landmarks.join(format!("face-{i:04}.txt")))?;
        }
    }
    let _ = writeln!(out, "wrote {} faces to {}", a.count, a.out.display());
    Ok(())
}
