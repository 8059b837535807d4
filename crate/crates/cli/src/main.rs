use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use supersam::gradsuite::{max_rel_error, run_suite, SuiteOptions};
use supersam::io::checkpoint::{self, CheckpointMeta};
use supersam::io::config::RunConfig;
use supersam::io::netpbm::{quantize, read_ppm, write_pgm};
use supersam::io::{dataset, report};
use supersam::metrics::classification_report;
use supersam::net::{INPUT_CHANNELS, INPUT_SIZE};
use supersam::split::stratified_split;
use supersam::synth::generate_dataset;
use supersam::train::{evaluate, examples, train};
use supersam::Variant;

#[derive(Parser)]
#[command(name = "supersam", version, about = "Pose-supervised spatial attention for PPE crop classification")]
struct Cli {
    /// Run configuration (JSON). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the data and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Train a classifier on a dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Score a checkpoint on the test split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify one 64×64 PPM crop.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        image: PathBuf,
        /// Write the predicted attention mask as an 8-bit PGM.
        #[arg(long)]
        emit_mask: Option<PathBuf>,
    },
    /// Finite-difference gradient check of every layer.
    GradCheck {
        /// Double one layer's backward pass (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    Ok(config)
}

fn required(arg: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    arg.clone()
        .or_else(|| fallback.clone())
        .with_context(|| format!("no {what} given (flag or config paths section)"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let mut config = load_config(cli)?;
    match &cli.command {
        Command::Gen { out, n_samples } => {
            let out = required(out, &config.paths.data_dir, "output directory")?;
            if let Some(n) = n_samples {
                config.synth.n_samples = *n;
            }
            let samples = generate_dataset(&config.synth)?;
            dataset::write_dataset(&out, &samples, &config.synth, cli.force)?;
            let positives = samples.iter().filter(|s| s.label == 1).count();
            println!("wrote {} samples ({positives} positive) to {}", samples.len(), out.display());
        }
        Command::Train {
            data,
            out,
            lambda,
            variant,
            max_epochs,
        } => {
            let data = required(data, &config.paths.data_dir, "dataset directory")?;
            let out = required(out, &config.paths.checkpoint, "checkpoint path")?;
            if let Some(l) = lambda {
                config.train.lambda = *l;
            }
            if let Some(v) = variant {
                config.train.variant = *v;
            }
            if let Some(e) = max_epochs {
                config.train.max_epochs = *e;
            }
            config.validate().map_err(anyhow::Error::msg)?;
            cmd_train(&config, &data, &out)?;
        }
        Command::Eval { checkpoint, data, out } => {
            let ckpt = required(checkpoint, &config.paths.checkpoint, "checkpoint path")?;
            let data = required(data, &config.paths.data_dir, "dataset directory")?;
            let out = required(out, &config.paths.report, "report path")?;
            cmd_eval(&ckpt, &data, &out)?;
        }
        Command::Infer {
            checkpoint,
            image,
            emit_mask,
        } => {
            let ckpt = required(checkpoint, &config.paths.checkpoint, "checkpoint path")?;
            cmd_infer(&ckpt, image, emit_mask.as_deref())?;
        }
        Command::GradCheck { corrupt } => {
            return cmd_grad_check(config.train.seed, corrupt.clone());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn history_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name("history.csv")
}

fn cmd_train(config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let (manifest, samples) = dataset::read_dataset(data)?;
    let ppe = manifest.synth.ppe.clone();
    let split = stratified_split(&samples, |s| s.label, config.split_ratios, config.train.seed)?;
    let train_set = examples(&split.train, &ppe);
    let val_set = examples(&split.val, &ppe);
    let outcome = train(&train_set, &val_set, &config.train)?;
    let best = *outcome.best();
    checkpoint::save(
        out,
        &outcome.model,
        CheckpointMeta {
            train_config: config.train.clone(),
            ppe,
            split_ratios: Some(config.split_ratios),
            metrics: [
                ("best_epoch".to_string(), best.epoch as f64),
                ("val_loss".to_string(), best.val_loss),
                ("val_accuracy".to_string(), best.val_accuracy),
            ]
            .into(),
        },
    )?;
    report::write_history(&history_path(out), &outcome.history)?;
    println!(
        "variant {} trained {} epochs (best {}): validation accuracy {}",
        config.train.variant,
        outcome.history.len(),
        best.epoch,
        best.val_accuracy
    );
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    if !ckpt.exists() {
        bail!("checkpoint {} does not exist", ckpt.display());
    }
    let (model, manifest) = checkpoint::load(ckpt)?;
    let (_, samples) = dataset::read_dataset(data)?;
    let ratios = manifest.split_ratios.unwrap_or(supersam::io::config::DEFAULT_SPLIT);
    let split = stratified_split(&samples, |s| s.label, ratios, manifest.train_config.seed)?;
    let test = examples(&split.test, &manifest.ppe);
    let eval = evaluate(&model, &test, &manifest.train_config)?;
    let labels: Vec<u8> = test.iter().map(|e| e.label).collect();
    let metrics = classification_report(&eval.predictions, &labels)?;
    let csv = report::write_report(out, &metrics)?;
    println!("test accuracy {} on {} samples", metrics.accuracy, test.len());
    if let (Some(bce), Some(iou)) = (eval.attention_bce, eval.mask_iou) {
        println!("attention bce {bce}, mask iou {iou}");
    }
    println!("wrote {} and {}", out.display(), csv.display());
    Ok(())
}

fn cmd_infer(ckpt: &Path, image: &Path, emit_mask: Option<&Path>) -> Result<()> {
    let (model, _) = checkpoint::load(ckpt)?;
    if emit_mask.is_some() && model.variant == Variant::Plain {
        bail!("--emit-mask needs an attention block, but this checkpoint is variant plain (use sam or super_sam)");
    }
    let img = read_ppm(image)?;
    if img.shape() != [INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE] {
        bail!("{}: expected a {INPUT_SIZE}×{INPUT_SIZE} RGB image, got {:?}", image.display(), img.shape());
    }
    let pred = model.classify_crop(&img)?;
    println!("label {} confidence {}", u8::from(pred.probability >= 0.5), pred.probability);
    if let (Some(path), Some(mask)) = (emit_mask, pred.mask) {
        let pixels: Vec<u8> = mask.values.iter().map(|&v| quantize(v)).collect();
        write_pgm(path, mask.width, mask.height, &pixels)?;
        println!("wrote {}×{} mask to {}", mask.width, mask.height, path.display());
    }
    Ok(())
}

fn cmd_grad_check(seed: u64, corrupt: Option<String>) -> Result<ExitCode> {
    let checks = run_suite(&SuiteOptions { seed, corrupt })?;
    let mut all = true;
    for c in &checks {
        println!("{}", c.layer);
        println!("{}", c.report);
        all &= c.report.passed();
    }
    println!(
        "max relative error {:.3e} over {} layers: {}",
        max_rel_error(&checks),
        checks.len(),
        if all { "PASS" } else { "FAIL" }
    );
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
