//! Command-line front end: dataset ingestion, fusion augmentation, attention
//! benchmarking, training, evaluation, and activation-map rendering.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cmt_core::attention::{measure_cost, AttentionConfig, AttentionKind, CostReport};
use cmt_core::ffa::{augment_dataset, FfaConfig};
use cmt_core::imageio;
use cmt_core::interpret::{grad_cam, render_overlay, CamSidecar};
use cmt_core::metrics::{binarize, confusion, paper_literal_report, report};
use cmt_core::model::{load_checkpoint, save_checkpoint, CifeConfig, CmtConfig, CmtModel};
use cmt_core::training::{
    steps_per_epoch, toy_dataset, train_loop, Sample, TrainConfig,
};
use cmt_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cmt", about = "Multi-level attention classifier toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Index a class-per-directory dataset into disjoint 8:1:1 splits.
    Ingest(IngestArgs),
    /// Generate beta-weighted fusions of same-class images.
    Augment(AugmentArgs),
    /// Compare analytic and measured attention costs.
    Bench(BenchArgs),
    /// Train the classifier; `--toy` runs the synthetic descent check.
    Train(TrainArgs),
    /// Evaluate a trained model and emit the metrics report.
    Eval(EvalArgs),
    /// Render a class activation overlay for one image.
    Cam(CamArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Random seed; defaults to the CMT_SEED environment variable, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Flat JSON config file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flat file-backed defaults mirroring the command flags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    seed: Option<u64>,
    out: Option<String>,
    hw: Option<usize>,
    p: Option<usize>,
    alpha: Option<f64>,
    count: Option<usize>,
    kind: Option<String>,
    c: Option<usize>,
    g: Option<usize>,
    gp: Option<usize>,
    heads: Option<usize>,
    trials: Option<usize>,
    encoders: Option<usize>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr_max: Option<f64>,
    lr_min: Option<f64>,
    warmup: Option<usize>,
    threshold: Option<f64>,
    ffa: Option<usize>,
    paper_literal: Option<bool>,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("{}: {}", p.display(), e)))
            }
        }
    }
}

/// Flag value, then config-file value, then the built-in default.
fn pick<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn resolve_seed(common: &Common, file: &RunConfig) -> u64 {
    common
        .seed
        .or(file.seed)
        .or_else(|| std::env::var("CMT_SEED").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0)
}

fn resolve_out(common: &Common, file: &RunConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| file.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

// ---- ingest -----------------------------------------------------------------

#[derive(Args)]
struct IngestArgs {
    /// Dataset root with one subdirectory per class.
    #[arg(long)]
    root: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitEntry {
    class: String,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetIndex {
    classes: Vec<String>,
    train: Vec<SplitEntry>,
    val: Vec<SplitEntry>,
    test: Vec<SplitEntry>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm"))
        .unwrap_or(false)
}

fn cmd_ingest(args: &IngestArgs) -> Result<()> {
    let file_cfg = RunConfig::load(args.common.config.as_deref())?;
    let seed = resolve_seed(&args.common, &file_cfg);
    let out = resolve_out(&args.common, &file_cfg);

    let mut classes: Vec<String> = std::fs::read_dir(&args.root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Dataset(format!(
            "{} contains no class directories",
            args.root.display()
        )));
    }

    let mut digests: BTreeMap<Vec<u8>, (String, String)> = BTreeMap::new();
    let mut index = DatasetIndex {
        classes: classes.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (ci, class) in classes.iter().enumerate() {
        let dir = args.root.join(class);
        let mut files: Vec<String> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| is_image(p))
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        files.sort();
        if files.len() < 10 {
            return Err(Error::Dataset(format!(
                "class '{}' holds {} images; need at least 10",
                class,
                files.len()
            )));
        }
        for f in &files {
            let bytes = std::fs::read(dir.join(f))?;
            let digest = Sha256::digest(&bytes).to_vec();
            if let Some((other_class, other_file)) = digests.get(&digest) {
                if other_class != class {
                    return Err(Error::Dataset(format!(
                        "identical image in two classes: {}/{} and {}/{}",
                        other_class, other_file, class, f
                    )));
                }
            }
            digests.insert(digest, (class.clone(), f.clone()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ci as u64));
        files.shuffle(&mut rng);
        let n = files.len();
        let n_train = n * 8 / 10;
        let n_val = (n - n_train) / 2;
        for (i, f) in files.into_iter().enumerate() {
            let entry = SplitEntry {
                class: class.clone(),
                file: f,
            };
            if i < n_train {
                index.train.push(entry);
            } else if i < n_train + n_val {
                index.val.push(entry);
            } else {
                index.test.push(entry);
            }
        }
    }
    std::fs::create_dir_all(&out)?;
    let json = serde_json::to_string_pretty(&index)?;
    imageio::write_atomic(&out.join("index.json"), json.as_bytes())?;
    eprintln!(
        "indexed {} classes: {} train / {} val / {} test",
        index.classes.len(),
        index.train.len(),
        index.val.len(),
        index.test.len()
    );
    Ok(())
}

// ---- augment ----------------------------------------------------------------

#[derive(Args)]
struct AugmentArgs {
    /// Class directory holding the source images.
    #[arg(long = "in")]
    input: PathBuf,
    /// Number of fused images to emit.
    #[arg(long)]
    count: Option<usize>,
    /// Patch grid size.
    #[arg(long)]
    p: Option<usize>,
    /// Symmetric beta parameter.
    #[arg(long)]
    alpha: Option<f64>,
    #[command(flatten)]
    common: Common,
}

fn cmd_augment(args: &AugmentArgs) -> Result<()> {
    let file_cfg = RunConfig::load(args.common.config.as_deref())?;
    let seed = resolve_seed(&args.common, &file_cfg);
    let out = resolve_out(&args.common, &file_cfg);
    let count = pick(args.count, file_cfg.count, 8);
    let patch = pick(args.p, file_cfg.p, 2);
    let alpha = pick(args.alpha, file_cfg.alpha, 0.4);
    let cfg = FfaConfig::new(patch, alpha)?;
    let manifest = augment_dataset(&args.input, &out, count, &cfg, seed)?;
    eprintln!("wrote {} fused images to {}", manifest.len(), out.display());
    Ok(())
}

// ---- bench -------------------------------------------------------------------

#[derive(Args)]
struct BenchArgs {
    /// Which attention to measure: mhsa, mmsa, or both.
    #[arg(long)]
    kind: Option<String>,
    /// Channels.
    #[arg(long)]
    c: Option<usize>,
    /// Square feature-map side length.
    #[arg(long)]
    hw: Option<usize>,
    /// Level-1 window grid.
    #[arg(long)]
    g: Option<usize>,
    /// Level-2 downsample factor.
    #[arg(long)]
    gp: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    heads: Option<usize>,
    /// Timed repetitions per kind.
    #[arg(long)]
    trials: Option<usize>,
    #[command(flatten)]
    common: Common,
}

/// Deterministic slice of a cost report; wall-clock timings stay out of the
/// primary artifact and go to stderr instead.
#[derive(Debug, Serialize)]
struct BenchArtifact<'a> {
    kind: &'a AttentionKind,
    c: usize,
    h: usize,
    w: usize,
    g: usize,
    g_prime: usize,
    heads: usize,
    analytic_macs: u64,
    measured_macs: u64,
    trials: usize,
}

impl<'a> From<&'a CostReport> for BenchArtifact<'a> {
    fn from(r: &'a CostReport) -> Self {
        BenchArtifact {
            kind: &r.kind,
            c: r.c,
            h: r.h,
            w: r.w,
            g: r.g,
            g_prime: r.g_prime,
            heads: r.heads,
            analytic_macs: r.analytic_macs,
            measured_macs: r.measured_macs,
            trials: r.trials,
        }
    }
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let file_cfg = RunConfig::load(args.common.config.as_deref())?;
    let seed = resolve_seed(&args.common, &file_cfg);
    let out = resolve_out(&args.common, &file_cfg);
    let kind = pick(args.kind.clone(), file_cfg.kind.clone(), "both".to_string());
    let c = pick(args.c, file_cfg.c, 16);
    let hw = pick(args.hw, file_cfg.hw, 8);
    let g = pick(args.g, file_cfg.g, 2);
    let gp = pick(args.gp, file_cfg.gp, 2);
    let heads = pick(args.heads, file_cfg.heads, 2);
    let trials = pick(args.trials, file_cfg.trials, 5);

    let kinds: Vec<AttentionKind> = match kind.as_str() {
        "mhsa" => vec![AttentionKind::Mhsa],
        "mmsa" => vec![AttentionKind::Mmsa],
        "both" => vec![AttentionKind::Mhsa, AttentionKind::Mmsa],
        other => {
            return Err(Error::config(format!(
                "--kind must be mhsa, mmsa, or both, got '{}'",
                other
            )))
        }
    };
    let cfg = AttentionConfig::new(c, heads, g, gp)?;
    cfg.check_spatial(hw, hw)?;

    let mut lines = String::new();
    for k in kinds {
        let r = measure_cost(k, &cfg, hw, hw, trials, seed)?;
        eprintln!(
            "{:?}: analytic {} measured {} median {} ns over {} trials",
            r.kind, r.analytic_macs, r.measured_macs, r.wall_ns_median, r.trials
        );
        lines.push_str(&serde_json::to_string(&BenchArtifact::from(&r))?);
        lines.push('\n');
    }
    std::fs::create_dir_all(&out)?;
    imageio::write_atomic(&out.join("bench.jsonl"), lines.as_bytes())?;
    print!("{}", lines);
    Ok(())
}

// ---- train -------------------------------------------------------------------

/// Everything an artifact consumer needs to reload the model.
#[derive(Debug, Serialize, Deserialize)]
struct ModelCard {
    config: CmtConfig,
    hw: usize,
    threshold: f64,
    classes: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Train on the built-in synthetic 4-class set.
    #[arg(long)]
    toy: bool,
    /// Dataset index produced by `ingest`.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Directory the index paths are relative to.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Square input resize target.
    #[arg(long)]
    hw: Option<usize>,
    /// Encoder blocks.
    #[arg(long)]
    encoders: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Fused samples added per real sample each epoch (0 disables FFA).
    #[arg(long)]
    ffa: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    common: Common,
}

fn load_split(
    index: &DatasetIndex,
    entries: &[SplitEntry],
    root: &Path,
    hw: usize,
) -> Result<Vec<Sample>> {
    let classes = index.classes.len();
    entries
        .iter()
        .map(|e| {
            let img = imageio::read_image(&root.join(&e.class).join(&e.file))?;
            let rgb = imageio::to_rgb(&img)?;
            let resized = imageio::resize_bilinear(&rgb, hw, hw)?;
            let k = index
                .classes
                .iter()
                .position(|c| c == &e.class)
                .ok_or_else(|| Error::Dataset(format!("unknown class '{}'", e.class)))?;
            let mut labels = vec![0u8; classes];
            labels[k] = 1;
            Ok(Sample {
                image: resized,
                labels,
            })
        })
        .collect()
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let file_cfg = RunConfig::load(args.common.config.as_deref())?;
    let seed = resolve_seed(&args.common, &file_cfg);
    let out = resolve_out(&args.common, &file_cfg);
    let threshold = pick(args.threshold, file_cfg.threshold, 0.5);

    let (model_cfg, hw, classes, train, eval) = if args.toy {
        let per_class = 16;
        let data = toy_dataset(per_class, seed);
        let names = (0..4).map(|k| format!("class{}", k)).collect();
        (CmtConfig::toy(), 32, names, data.clone(), data)
    } else {
        let index_path = args
            .index
            .as_ref()
            .ok_or_else(|| Error::config("need --toy or --index"))?;
        let root = args
            .data_root
            .as_ref()
            .ok_or_else(|| Error::config("--index requires --data-root"))?;
        let index: DatasetIndex = serde_json::from_str(&std::fs::read_to_string(index_path)?)
            .map_err(|e| Error::config(format!("{}: {}", index_path.display(), e)))?;
        let hw = pick(args.hw, file_cfg.hw, 360);
        let cife = CifeConfig::default();
        let (fh, fw) = cife.output_dims(hw, hw)?;
        let attention = AttentionConfig::new(cife.out_channels(), 2, 2, 2)?;
        attention.check_spatial(fh, fw)?;
        let encoders = pick(args.encoders, file_cfg.encoders, 1);
        let mut cfg = CmtConfig::new(cife, encoders, attention)?;
        cfg.classes = index.classes.len();
        cfg.check()?;
        let train = load_split(&index, &index.train, root, hw)?;
        let eval = load_split(&index, &index.val, root, hw)?;
        (cfg, hw, index.classes.clone(), train, eval)
    };

    let mut tcfg = if args.toy {
        TrainConfig::toy(train.len() / 4)
    } else {
        TrainConfig::default()
    };
    tcfg.seed = seed;
    tcfg.threshold = threshold;
    tcfg.epochs = pick(args.epochs, file_cfg.epochs, tcfg.epochs);
    tcfg.batch_size = pick(args.batch, file_cfg.batch, tcfg.batch_size);
    tcfg.lr_max = pick(args.lr_max, file_cfg.lr_max, tcfg.lr_max);
    tcfg.lr_min = pick(args.lr_min, file_cfg.lr_min, tcfg.lr_min);
    tcfg.warmup_steps = pick(args.warmup, file_cfg.warmup, tcfg.warmup_steps);
    tcfg.ffa_per_sample = pick(args.ffa, file_cfg.ffa, tcfg.ffa_per_sample);
    if hw % tcfg.ffa_patch != 0 && tcfg.ffa_per_sample > 0 {
        return Err(Error::config(format!(
            "input size {} not divisible by the {} patch grid",
            hw, tcfg.ffa_patch
        )));
    }
    tcfg.total_steps = tcfg.epochs * steps_per_epoch(train.len(), &tcfg);
    tcfg.check()?;

    let mut model = CmtModel::new(model_cfg.clone(), seed)?;
    std::fs::create_dir_all(&out)?;
    let mut log = Vec::new();
    let history = train_loop(&mut model, &train, &eval, &tcfg, Some(&mut log))?;
    imageio::write_atomic(&out.join("train_log.jsonl"), &log)?;
    save_checkpoint(&out.join("model.ckpt"), &model)?;
    let card = ModelCard {
        config: model_cfg,
        hw,
        threshold,
        classes,
    };
    imageio::write_atomic(
        &out.join("config.json"),
        serde_json::to_string_pretty(&card)?.as_bytes(),
    )?;
    if let Some(last) = history.last() {
        eprintln!(
            "trained {} epochs: loss {:.4} OF1 {:.3} CF1 {:.3}",
            history.len(),
            last.mean_loss,
            last.of1,
            last.cf1
        );
    }
    Ok(())
}

// ---- eval --------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    /// Directory holding model.ckpt and config.json from `train`.
    #[arg(long)]
    model: PathBuf,
    /// Evaluate on the synthetic set instead of an indexed dataset.
    #[arg(long)]
    toy: bool,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Which split of the index to score.
    #[arg(long, default_value = "test")]
    split: String,
    /// Additionally emit the aggregate formulas exactly as printed.
    #[arg(long)]
    paper_literal: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    classes: Vec<String>,
    /// Per-class precision on the 0..1 scale.
    per_class_precision: Vec<f64>,
    per_class_recall: Vec<f64>,
    /// Aggregates scaled by 100.
    cp: f64,
    cr: f64,
    cf1: f64,
    op: f64,
    or_: f64,
    of1: f64,
    empty_classes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    paper_literal: Option<cmt_core::metrics::PaperLiteralReport>,
}

fn load_model(dir: &Path) -> Result<(CmtModel, ModelCard)> {
    let card_path = dir.join("config.json");
    let card: ModelCard = serde_json::from_str(&std::fs::read_to_string(&card_path)?)
        .map_err(|e| Error::config(format!("{}: {}", card_path.display(), e)))?;
    let model = load_checkpoint(&dir.join("model.ckpt"), &card.config)?;
    Ok((model, card))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let file_cfg = RunConfig::load(args.common.config.as_deref())?;
    let seed = resolve_seed(&args.common, &file_cfg);
    let out = resolve_out(&args.common, &file_cfg);
    let paper_literal = args.paper_literal || file_cfg.paper_literal.unwrap_or(false);
    let (model, card) = load_model(&args.model)?;

    let samples = if args.toy {
        toy_dataset(16, seed)
    } else {
        let index_path = args
            .index
            .as_ref()
            .ok_or_else(|| Error::config("need --toy or --index"))?;
        let root = args
            .data_root
            .as_ref()
            .ok_or_else(|| Error::config("--index requires --data-root"))?;
        let index: DatasetIndex = serde_json::from_str(&std::fs::read_to_string(index_path)?)
            .map_err(|e| Error::config(format!("{}: {}", index_path.display(), e)))?;
        let entries = match args.split.as_str() {
            "train" => &index.train,
            "val" => &index.val,
            "test" => &index.test,
            other => {
                return Err(Error::config(format!(
                    "--split must be train, val, or test, got '{}'",
                    other
                )))
            }
        };
        load_split(&index, entries, root, card.hw)?
    };

    let mut preds = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in &samples {
        let probs = model.predict(&s.image)?;
        preds.push(binarize(&probs, card.threshold));
        targets.push(s.labels.clone());
    }
    let r = report(&confusion(&preds, &targets, model.config.classes)?);
    let literal = if paper_literal {
        Some(paper_literal_report(&preds, &targets, model.config.classes)?)
    } else {
        None
    };
    let eval = EvalReport {
        classes: card.classes.clone(),
        per_class_precision: r.per_class.iter().map(|c| c.precision).collect(),
        per_class_recall: r.per_class.iter().map(|c| c.recall).collect(),
        cp: r.cp * 100.0,
        cr: r.cr * 100.0,
        cf1: r.cf1 * 100.0,
        op: r.op * 100.0,
        or_: r.or_ * 100.0,
        of1: r.of1 * 100.0,
        empty_classes: r.empty_classes,
        paper_literal: literal,
    };
    std::fs::create_dir_all(&out)?;
    let json = serde_json::to_string_pretty(&eval)?;
    imageio::write_atomic(&out.join("eval_report.json"), json.as_bytes())?;
    println!("{}", json);
    Ok(())
}

// ---- cam ---------------------------------------------------------------------

#[derive(Args)]
struct CamArgs {
    /// Directory holding model.ckpt and config.json from `train`.
    #[arg(long)]
    model: PathBuf,
    /// Input image (PNG/PGM/PPM).
    #[arg(long)]
    image: PathBuf,
    /// Target class index.
    #[arg(long = "class")]
    class: usize,
    #[command(flatten)]
    common: Common,
}

fn cmd_cam(args: &CamArgs) -> Result<()> {
    let file_cfg = RunConfig::load(args.common.config.as_deref())?;
    let out = resolve_out(&args.common, &file_cfg);
    let (model, card) = load_model(&args.model)?;
    let raw = imageio::read_image(&args.image)?;
    let rgb = imageio::to_rgb(&raw)?;
    let image = imageio::resize_bilinear(&rgb, card.hw, card.hw)?;
    let cam = grad_cam(&model, &image, args.class)?;
    let overlay = render_overlay(&image, &cam)?;
    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string());
    std::fs::create_dir_all(&out)?;
    let png = out.join(format!("cam_c{}_{}.png", args.class, stem));
    imageio::write_image_png(&png, &overlay)?;
    let sidecar = CamSidecar {
        input: args.image.display().to_string(),
        class: args.class,
        raw_min: cam.raw_min,
        raw_max: cam.raw_max,
    };
    imageio::write_atomic(
        &png.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?.as_bytes(),
    )?;
    eprintln!("wrote {}", png.display());
    Ok(())
}

// ---- entry -------------------------------------------------------------------

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parameter(_) | Error::Schedule(_) | Error::Serde(_) => 2,
        _ => 3,
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Ingest(a) => cmd_ingest(a),
        Cmd::Augment(a) => cmd_augment(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Cam(a) => cmd_cam(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code_for(&e))
        }
    }
}
