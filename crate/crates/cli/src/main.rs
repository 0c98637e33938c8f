//! Command-line front end for the quantization toolkit: train the bundled
//! toy classifier, synthesize calibration batches from a frozen checkpoint,
//! calibrate quantizer clipping ranges, evaluate accuracy, export
//! patch-similarity density curves, and run the loss-ablation grid.
//!
//! Every flag can also be supplied from a TOML file via `--config`; explicit
//! flags win over the file, the file wins over built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use vitq_core::calib::{
    evaluate_fp, evaluate_top1, export_density_report, mean_mode_count, model_from_table,
    parse_strategy, quant_table_json, run_ablation, run_calibration, wrap_model, QuantTable,
};
use vitq_core::checkpoint::{load_checkpoint, save_checkpoint};
use vitq_core::data::{generate_toy_dataset, ToyDataset};
use vitq_core::model::{train_toy_model, ModelConfig, TrainConfig};
use vitq_core::quant::ObserverConfig;
use vitq_core::synth::{export_pngs, generate_samples, load_batch, save_batch, GenConfig, LossSelection};

/// The bundled dataset is fixed; training/generation seeds vary per run.
const DATASET_SEED: u64 = 0;

const DEFAULT_EPOCHS: usize = 30;
const DEFAULT_TRAIN_BATCH: usize = 16;
const DEFAULT_TRAIN_LR: f64 = 1e-3;
const DEFAULT_PER_CLASS: usize = 60;
const DEFAULT_TEST_FRAC: f64 = 0.25;
const DEFAULT_STEPS: usize = 200;
const DEFAULT_GEN_LR: f64 = 0.05;
const DEFAULT_GEN_BATCH: usize = 32;
const DEFAULT_ALPHA1: f64 = 1.0;
const DEFAULT_ALPHA2: f64 = 0.05;
const DEFAULT_GRID: usize = 256;
const DEFAULT_BITS: u32 = 8;
const DEFAULT_GAMMA: f64 = 1e-5;
const DEFAULT_BETA: f64 = 0.9;

#[derive(Parser)]
#[command(
    name = "vitq",
    version,
    about = "Data-free quantization toolkit for small vision transformers"
)]
struct Cli {
    /// TOML file supplying defaults for any flag (flags win over the file).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the bundled toy classifier and save a checkpoint
    TrainToy(TrainToyArgs),
    /// Synthesize a calibration batch from a frozen checkpoint
    Generate(GenerateArgs),
    /// Calibrate quantizer clipping ranges from a sample batch
    Calibrate(CalibrateArgs),
    /// Evaluate top-1 accuracy, full precision or from a quant table
    Evaluate(EvaluateArgs),
    /// Export per-layer patch-similarity density curves as CSV
    Density(DensityArgs),
    /// Run the loss-combination ablation grid
    Ablate(AblateArgs),
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    test_frac: Option<f64>,
    /// Checkpoint manifest path (a sibling .bin blob is written next to it)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Checkpoint manifest of the frozen model
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Weight on the one-hot class loss
    #[arg(long)]
    alpha1: Option<f64>,
    /// Weight on the total-variation smoothness loss
    #[arg(long)]
    alpha2: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Entropy-estimate grid resolution
    #[arg(long)]
    grid: Option<usize>,
    /// Loss subset: "pse+oh+tv", "pse", "oh+tv", ..., or "none"
    #[arg(long)]
    loss: Option<String>,
    /// Batch manifest path (a sibling .bin blob is written next to it)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also export one PNG preview per image into this directory
    #[arg(long)]
    png_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Sample batch manifest to calibrate on
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Weight bit width (32 bypasses weight quantization)
    #[arg(long)]
    kw: Option<u32>,
    /// Activation bit width (32 bypasses activation quantization)
    #[arg(long)]
    ka: Option<u32>,
    /// minmax, ema, percentile, or omse
    #[arg(long)]
    strategy: Option<String>,
    /// Percentile tail fraction clipped per side
    #[arg(long)]
    gamma: Option<f64>,
    /// EMA decay toward the previous running extreme
    #[arg(long)]
    beta: Option<f64>,
    /// Also quantize attention probabilities
    #[arg(long)]
    probs: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Quant table JSON; omit to evaluate in full precision
    #[arg(long)]
    table: Option<PathBuf>,
    /// "train" or "test"
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    test_frac: Option<f64>,
    /// Optional JSON report path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DensityArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    samples: Option<PathBuf>,
    /// CSV output path (`layer,x,density` rows)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    kw: Option<u32>,
    #[arg(long)]
    ka: Option<u32>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    test_frac: Option<f64>,
    /// JSON output path for the accuracy rows
    #[arg(long)]
    out: Option<PathBuf>,
}

/// File-config mirror of the flags, one table per subcommand.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(rename = "train-toy", default)]
    train_toy: TrainToySection,
    #[serde(default)]
    generate: GenerateSection,
    #[serde(default)]
    calibrate: CalibrateSection,
    #[serde(default)]
    evaluate: EvaluateSection,
    #[serde(default)]
    density: DensitySection,
    #[serde(default)]
    ablate: AblateSection,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct TrainToySection {
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    per_class: Option<usize>,
    test_frac: Option<f64>,
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct GenerateSection {
    model: Option<PathBuf>,
    steps: Option<usize>,
    lr: Option<f64>,
    batch: Option<usize>,
    alpha1: Option<f64>,
    alpha2: Option<f64>,
    seed: Option<u64>,
    grid: Option<usize>,
    loss: Option<String>,
    out: Option<PathBuf>,
    png_dir: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct CalibrateSection {
    model: Option<PathBuf>,
    samples: Option<PathBuf>,
    kw: Option<u32>,
    ka: Option<u32>,
    strategy: Option<String>,
    gamma: Option<f64>,
    beta: Option<f64>,
    probs: Option<bool>,
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct EvaluateSection {
    model: Option<PathBuf>,
    table: Option<PathBuf>,
    split: Option<String>,
    per_class: Option<usize>,
    test_frac: Option<f64>,
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct DensitySection {
    model: Option<PathBuf>,
    samples: Option<PathBuf>,
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct AblateSection {
    model: Option<PathBuf>,
    steps: Option<usize>,
    lr: Option<f64>,
    batch: Option<usize>,
    alpha1: Option<f64>,
    alpha2: Option<f64>,
    seed: Option<u64>,
    grid: Option<usize>,
    kw: Option<u32>,
    ka: Option<u32>,
    strategy: Option<String>,
    gamma: Option<f64>,
    beta: Option<f64>,
    per_class: Option<usize>,
    test_frac: Option<f64>,
    out: Option<PathBuf>,
}

fn pick<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config file {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config file {}", p.display()))
        }
    }
}

fn parse_loss(spec: &str) -> Result<LossSelection> {
    let mut sel = LossSelection {
        pse: false,
        one_hot: false,
        tv: false,
    };
    if spec == "none" {
        return Ok(sel);
    }
    for tok in spec.split('+') {
        match tok {
            "pse" => sel.pse = true,
            "oh" => sel.one_hot = true,
            "tv" => sel.tv = true,
            other => bail!("unknown loss term {other:?} (expected pse, oh, tv, or none)"),
        }
    }
    Ok(sel)
}

fn toy_splits(per_class: usize, test_frac: f64) -> Result<(ToyDataset, ToyDataset)> {
    let dataset = generate_toy_dataset(per_class, DATASET_SEED);
    Ok(dataset.split(test_frac, DATASET_SEED)?)
}

fn run_train_toy(a: TrainToyArgs, f: TrainToySection) -> Result<()> {
    let tc = TrainConfig {
        epochs: pick(a.epochs, f.epochs, DEFAULT_EPOCHS),
        batch_size: pick(a.batch, f.batch, DEFAULT_TRAIN_BATCH),
        lr: pick(a.lr, f.lr, DEFAULT_TRAIN_LR),
        seed: pick(a.seed, f.seed, 0),
    };
    let per_class = pick(a.per_class, f.per_class, DEFAULT_PER_CLASS);
    let test_frac = pick(a.test_frac, f.test_frac, DEFAULT_TEST_FRAC);
    let out = pick(a.out, f.out, PathBuf::from("toy_model.json"));

    let (train, test) = toy_splits(per_class, test_frac)?;
    let cfg = ModelConfig::toy();
    let outcome = train_toy_model(&cfg, &train, &tc)?;
    let train_top1 = evaluate_fp(&outcome.params, &train.images.view(), &train.labels, "train")?;
    let test_top1 = evaluate_fp(&outcome.params, &test.images.view(), &test.labels, "heldout")?;
    save_checkpoint(&outcome.params, &out)?;
    println!(
        "trained {} epochs on {} images: train top-1 {:.4}, heldout top-1 {:.4}",
        tc.epochs,
        train.len(),
        train_top1.top1,
        test_top1.top1
    );
    println!("checkpoint -> {}", out.display());
    Ok(())
}

fn run_generate(a: GenerateArgs, f: GenerateSection) -> Result<()> {
    let model = pick(a.model, f.model, PathBuf::from("toy_model.json"));
    let params = load_checkpoint(&model)?;
    let classes = params.config().num_classes;

    let steps = pick(a.steps, f.steps, DEFAULT_STEPS);
    let seed = pick(a.seed, f.seed, 0);
    let batch = pick(a.batch, f.batch, DEFAULT_GEN_BATCH);
    let mut gc = GenConfig::new(steps, seed, classes);
    gc.lr = pick(a.lr, f.lr, DEFAULT_GEN_LR);
    gc.batch_size = batch;
    gc.targets = (0..batch).map(|i| i % classes).collect();
    gc.weights.alpha1 = pick(a.alpha1, f.alpha1, DEFAULT_ALPHA1);
    gc.weights.alpha2 = pick(a.alpha2, f.alpha2, DEFAULT_ALPHA2);
    gc.entropy.grid_points = pick(a.grid, f.grid, DEFAULT_GRID);
    let loss = pick(a.loss, f.loss, "pse+oh+tv".to_string());
    gc.select = parse_loss(&loss)?;
    let out = pick(a.out, f.out, PathBuf::from("samples.json"));

    let batch = generate_samples(&params, &gc)?;
    save_batch(&batch, &out)?;
    match batch.loss_history.last() {
        Some(last) => println!(
            "generated {} images in {} steps (loss {:.4} -> {:.4}) -> {}",
            batch.images.dim().0,
            steps,
            batch.loss_history[0].total,
            last.total,
            out.display()
        ),
        None => println!(
            "wrote {} raw noise images (0 steps) -> {}",
            batch.images.dim().0,
            out.display()
        ),
    }
    if let Some(dir) = a.png_dir.or(f.png_dir) {
        let files = export_pngs(&batch, &dir)?;
        println!("previews: {} PNGs -> {}", files.len(), dir.display());
    }
    Ok(())
}

fn run_calibrate(a: CalibrateArgs, f: CalibrateSection) -> Result<()> {
    let model = pick(a.model, f.model, PathBuf::from("toy_model.json"));
    let samples_path = pick(a.samples, f.samples, PathBuf::from("samples.json"));
    let out = pick(a.out, f.out, PathBuf::from("quant_table.json"));
    let strategy_name = pick(a.strategy, f.strategy, "minmax".to_string());
    let mut ocfg = ObserverConfig::new(parse_strategy(&strategy_name)?);
    ocfg.percentile = pick(a.gamma, f.gamma, DEFAULT_GAMMA);
    ocfg.ema_decay = pick(a.beta, f.beta, DEFAULT_BETA);
    let probs = a.probs || f.probs.unwrap_or(false);

    let params = load_checkpoint(&model)?;
    let samples = load_batch(&samples_path)?;
    let kw = pick(a.kw, f.kw, DEFAULT_BITS);
    let ka = pick(a.ka, f.ka, DEFAULT_BITS);
    let mut qm = wrap_model(&params, kw, ka, ocfg, probs)?;
    let provenance = if samples.loss_history.is_empty() {
        "noise"
    } else {
        "generated"
    };
    let report = run_calibration(&mut qm, &samples, provenance)?;
    fs::write(&out, quant_table_json(&qm)?)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "calibrated {} activation sites (W{kw}/A{ka}, {strategy_name}, {} samples, {:.2}s) -> {}",
        report.sites.len(),
        report.num_samples,
        report.seconds,
        out.display()
    );
    Ok(())
}

fn run_evaluate(a: EvaluateArgs, f: EvaluateSection) -> Result<()> {
    let model = pick(a.model, f.model, PathBuf::from("toy_model.json"));
    let per_class = pick(a.per_class, f.per_class, DEFAULT_PER_CLASS);
    let test_frac = pick(a.test_frac, f.test_frac, DEFAULT_TEST_FRAC);
    let split = pick(a.split, f.split, "test".to_string());
    let params = load_checkpoint(&model)?;
    let (train, test) = toy_splits(per_class, test_frac)?;
    let (set, name) = match split.as_str() {
        "train" => (&train, "train"),
        "test" => (&test, "heldout"),
        other => bail!("unknown split {other:?} (expected train or test)"),
    };

    let report = match a.table.or(f.table) {
        Some(table_path) => {
            let text = fs::read_to_string(&table_path)
                .with_context(|| format!("reading {}", table_path.display()))?;
            let table: QuantTable = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", table_path.display()))?;
            let qm = model_from_table(&params, &table)?;
            evaluate_top1(&qm, &set.images.view(), &set.labels, name)?
        }
        None => evaluate_fp(&params, &set.images.view(), &set.labels, name)?,
    };
    println!(
        "top-1 {:.4} on {} ({} images)",
        report.top1, report.dataset, report.num_images
    );
    if let Some(out) = a.out.or(f.out) {
        fs::write(&out, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", out.display()))?;
        println!("report -> {}", out.display());
    }
    Ok(())
}

fn run_density(a: DensityArgs, f: DensitySection) -> Result<()> {
    let model = pick(a.model, f.model, PathBuf::from("toy_model.json"));
    let samples_path = pick(a.samples, f.samples, PathBuf::from("samples.json"));
    let out = pick(a.out, f.out, PathBuf::from("density.csv"));
    let params = load_checkpoint(&model)?;
    let samples = load_batch(&samples_path)?;
    let curves = export_density_report(&params, &samples.images.view(), &out)?;
    println!(
        "{} per-layer curves ({} samples, mean modes {:.2}) -> {}",
        curves.len(),
        samples.images.dim().0,
        mean_mode_count(&curves, 0.05),
        out.display()
    );
    Ok(())
}

fn run_ablate(a: AblateArgs, f: AblateSection) -> Result<()> {
    let model = pick(a.model, f.model, PathBuf::from("toy_model.json"));
    let params = load_checkpoint(&model)?;
    let classes = params.config().num_classes;

    let steps = pick(a.steps, f.steps, DEFAULT_STEPS);
    let seed = pick(a.seed, f.seed, 0);
    let batch = pick(a.batch, f.batch, DEFAULT_GEN_BATCH);
    let mut gc = GenConfig::new(steps, seed, classes);
    gc.lr = pick(a.lr, f.lr, DEFAULT_GEN_LR);
    gc.batch_size = batch;
    gc.targets = (0..batch).map(|i| i % classes).collect();
    gc.weights.alpha1 = pick(a.alpha1, f.alpha1, DEFAULT_ALPHA1);
    gc.weights.alpha2 = pick(a.alpha2, f.alpha2, DEFAULT_ALPHA2);
    gc.entropy.grid_points = pick(a.grid, f.grid, DEFAULT_GRID);

    let strategy_name = pick(a.strategy, f.strategy, "minmax".to_string());
    let mut ocfg = ObserverConfig::new(parse_strategy(&strategy_name)?);
    ocfg.percentile = pick(a.gamma, f.gamma, DEFAULT_GAMMA);
    ocfg.ema_decay = pick(a.beta, f.beta, DEFAULT_BETA);
    let kw = pick(a.kw, f.kw, DEFAULT_BITS);
    let ka = pick(a.ka, f.ka, DEFAULT_BITS);

    let per_class = pick(a.per_class, f.per_class, DEFAULT_PER_CLASS);
    let test_frac = pick(a.test_frac, f.test_frac, DEFAULT_TEST_FRAC);
    let (_, test) = toy_splits(per_class, test_frac)?;

    let rows = run_ablation(
        &params,
        &gc,
        &test.images.view(),
        &test.labels,
        kw,
        ka,
        ocfg,
        false,
    )?;
    println!("loss ablation at W{kw}/A{ka} ({strategy_name}), heldout top-1:");
    for row in &rows {
        println!("  {:<10} {:.4}", row.name, row.top1);
    }
    if let Some(out) = a.out.or(f.out) {
        fs::write(&out, serde_json::to_string_pretty(&rows)?)
            .with_context(|| format!("writing {}", out.display()))?;
        println!("rows -> {}", out.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let file = load_file_config(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::TrainToy(a) => run_train_toy(a, file.train_toy),
        Cmd::Generate(a) => run_generate(a, file.generate),
        Cmd::Calibrate(a) => run_calibrate(a, file.calibrate),
        Cmd::Evaluate(a) => run_evaluate(a, file.evaluate),
        Cmd::Density(a) => run_density(a, file.density),
        Cmd::Ablate(a) => run_ablate(a, file.ablate),
    }
}
