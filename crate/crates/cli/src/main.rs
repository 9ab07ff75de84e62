//! `fine`: dataset generation, training, evaluation, ablation and φ export.
//!
//! Exit codes: 0 ok, 2 configuration, 3 io, 4 diverged loss, 5 shape mismatch.

mod config;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fine_core::data::{build_dataset, read_dataset, DataError, Dataset, DatasetConfig, SourceConfig, SplitSide};
use fine_core::model::{load_checkpoint, save_checkpoint, BackboneKind, FineModel, ModelConfig, ModelError};
use fine_core::train::{
    ablation_csv, evaluate, export_phi, loss_curve_csv, run_ablation, train_with, AblationFlags, AblationGrid,
    TrainConfig, TrainError,
};
use fine_core::transform::{Family, SampleMode};

use config::{AblateArgs, DumpPhiArgs, EvalArgs, FileConfig, GenerateArgs, ModeArg, SideArg, SourceArg, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "fine", version, about = "Function composition from key/value weight memories on geometric IQ tasks")]
struct Cli {
    /// JSON config file; flags override its keys [default: none]
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for all randomness [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a task dataset
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Train and evaluate over a grid of memory sizes, layer counts and training-set sizes
    Ablate(AblateArgs),
    /// Export the composed-weight vector of every task
    DumpPhi(DumpPhiArgs),
}

#[derive(Debug)]
struct CliError {
    code: u8,
    msg: String,
}

fn config_err(msg: impl Display) -> CliError {
    CliError {
        code: 2,
        msg: msg.to_string(),
    }
}

fn io_err(msg: impl Display) -> CliError {
    CliError {
        code: 3,
        msg: msg.to_string(),
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let code = match e {
            DataError::Io { .. }
            | DataError::BadMagic { .. }
            | DataError::Truncated { .. }
            | DataError::CountMismatch(_)
            | DataError::Manifest(_) => 3,
            _ => 2,
        };
        CliError {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::Shape(_) => 5,
            ModelError::Io { .. } | ModelError::Manifest(_) => 3,
            _ => 2,
        };
        CliError {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Diverged { .. } => CliError {
                code: 4,
                msg: e.to_string(),
            },
            TrainError::Io { .. } => io_err(e),
            TrainError::Config(_) => config_err(e),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn required<T>(v: Option<T>, field: &str) -> Result<T> {
    v.ok_or_else(|| config_err(format!("missing required field `{field}`")))
}

fn existing_file(p: &Path, field: &str) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(io_err(format!("`{field}`: {} does not exist", p.display())))
    }
}

fn writable(p: &Path, field: &str) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() && !d.is_dir() => Err(io_err(format!(
            "`{field}`: directory {} does not exist",
            d.display()
        ))),
        _ => Ok(()),
    }
}

fn positive(v: usize, field: &str) -> Result<usize> {
    if v == 0 {
        Err(config_err(format!("`{field}` must be at least 1")))
    } else {
        Ok(v)
    }
}

fn write_file(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| io_err(format!("{}: {e}", p.display())))
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(p) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(p).map_err(|e| io_err(format!("config {}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("config {}: {e}", p.display())))
}

fn cmd_generate(a: GenerateArgs, seed: u64) -> Result<()> {
    let out = required(a.out, "generate.out")?;
    writable(&out, "generate.out")?;
    let families = a.families.unwrap_or_else(|| vec![Family::Translation]);
    if families.is_empty() {
        return Err(config_err("`generate.families` is empty"));
    }
    let mode = match (a.mode, a.constraint) {
        (Some(ModeArg::PaperGrid), Some(_)) => {
            return Err(config_err("`generate.constraint` needs mode constrained"));
        }
        (Some(ModeArg::Constrained), None) => {
            return Err(config_err("`generate.mode` constrained needs `generate.constraint`"));
        }
        (_, Some(side)) => SampleMode::Constrained(side.into()),
        _ => SampleMode::PaperGrid,
    };
    let source = match a.source.unwrap_or(SourceArg::Glyph) {
        SourceArg::Glyph => SourceConfig::ProceduralGlyph {
            class_count: a.glyph_classes.unwrap_or(40),
            per_class: positive(a.glyph_per_class.unwrap_or(4), "generate.glyph_per_class")?,
            seed: a.glyph_seed.unwrap_or(seed),
        },
        SourceArg::Idx => {
            let images = required(a.idx_images, "generate.idx_images")?;
            let labels = required(a.idx_labels, "generate.idx_labels")?;
            existing_file(&images, "generate.idx_images")?;
            existing_file(&labels, "generate.idx_labels")?;
            SourceConfig::MnistIdx { images, labels }
        }
    };
    let cfg = DatasetConfig {
        source,
        image_side: a.side.unwrap_or(16),
        families,
        mode,
        task_count: positive(a.count.unwrap_or(1000), "generate.count")?,
        side: match a.split.unwrap_or(SideArg::Train) {
            SideArg::Train => SplitSide::Train,
            SideArg::Test => SplitSide::Test,
        },
        train_classes: a.train_classes.unwrap_or_default(),
        test_classes: a.test_classes.unwrap_or_default(),
        probe_same_class: a.probe_same_class.unwrap_or(false),
        seed,
    };
    let ds = build_dataset(&cfg, &out)?;
    println!("{}", serde_json::to_string_pretty(&ds.manifest).expect("manifest serialises"));
    Ok(())
}

fn open_dataset(p: &Path, field: &str) -> Result<Dataset> {
    existing_file(p, field)?;
    Ok(read_dataset(p)?)
}

fn check_side(model: &FineModel, data: &Dataset) -> Result<()> {
    let (m, d) = (model.config().image_side, data.manifest.image_side);
    if m != d {
        return Err(CliError {
            code: 5,
            msg: format!("checkpoint expects {m}x{m} images, dataset has {d}x{d}"),
        });
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, seed: u64) -> Result<()> {
    let data_path = required(a.data, "train.data")?;
    let out = required(a.out, "train.out")?;
    existing_file(&data_path, "train.data")?;
    writable(&out, "train.out")?;
    let loss_csv = a.loss_csv.unwrap_or_else(|| out.with_extension("loss.csv"));
    writable(&loss_csv, "train.loss_csv")?;
    let data = read_dataset(&data_path)?;
    let base = ModelConfig {
        image_side: data.manifest.image_side,
        embed_dim: a.embed_dim.unwrap_or(32),
        backbone: a.backbone.map(Into::into).unwrap_or(BackboneKind::Nice),
        nice_layers: a.layers.unwrap_or(4),
        memories: a.memories.unwrap_or(16),
        seed,
    };
    let flags = AblationFlags {
        query_as_weights: a.ablate.is_some(),
        ..AblationFlags::default()
    };
    let tcfg = TrainConfig {
        epochs: a.epochs.unwrap_or(50),
        batch_size_train: a.batch_size.unwrap_or(32),
        batch_size_eval: a.eval_batch_size.unwrap_or(100),
        lr: a.lr.unwrap_or(3e-4),
        clip_threshold: a.clip.unwrap_or(10.0),
        seed,
        checkpoint_every: a.checkpoint_every.unwrap_or(0),
        checkpoint_dir: a.checkpoint_dir,
        ablation: flags.clone(),
    };
    tcfg.validate()?;
    let mut model = FineModel::new(flags.apply(&base))?;
    let epochs = tcfg.epochs;
    let curve = train_with(&mut model, &data, &tcfg, |e| {
        println!(
            "epoch {}/{epochs} loss {:.4} running-accuracy {:.4}",
            e.epoch, e.loss_mean, e.train_accuracy
        );
    })?;
    save_checkpoint(&model, &out)?;
    write_file(&loss_csv, &loss_curve_csv(&curve))?;
    let rep = evaluate(&model, &data, tcfg.batch_size_eval, seed)?;
    println!(
        "trained {} epochs on {} tasks; final train accuracy {:.4}; checkpoint {}",
        epochs,
        data.len(),
        rep.accuracy,
        out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs, seed: u64) -> Result<()> {
    let ck = required(a.checkpoint, "eval.checkpoint")?;
    let data_path = required(a.data, "eval.data")?;
    existing_file(&ck, "eval.checkpoint")?;
    existing_file(&data_path, "eval.data")?;
    if let Some(o) = &a.out {
        writable(o, "eval.out")?;
    }
    let batch = positive(a.batch_size.unwrap_or(100), "eval.batch_size")?;
    let model = load_checkpoint(&ck)?;
    let data = read_dataset(&data_path)?;
    check_side(&model, &data)?;
    let rep = evaluate(&model, &data, batch, seed)?;
    let csv = rep.to_csv();
    match &a.out {
        Some(o) => write_file(o, &csv)?,
        None => print!("{csv}"),
    }
    println!(
        "accuracy {:.4} over {} tasks (loss {:.4}, dataset {})",
        rep.accuracy, rep.count, rep.loss_mean, rep.dataset_digest
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs, seed: u64) -> Result<()> {
    let tr = required(a.train_data, "ablate.train_data")?;
    let te = required(a.test_data, "ablate.test_data")?;
    let out = required(a.out, "ablate.out")?;
    writable(&out, "ablate.out")?;
    let train_set = open_dataset(&tr, "ablate.train_data")?;
    let test_set = open_dataset(&te, "ablate.test_data")?;
    if train_set.manifest.image_side != test_set.manifest.image_side {
        return Err(CliError {
            code: 5,
            msg: "train and test datasets differ in image side".into(),
        });
    }
    let grid = AblationGrid {
        memories: a.memories.unwrap_or_else(|| vec![1, 16]),
        layers: a.layers.unwrap_or_else(|| vec![4]),
        train_sizes: a.train_sizes.unwrap_or_else(|| vec![train_set.len()]),
        repeats: a.repeats.unwrap_or(3),
    };
    let base = ModelConfig {
        image_side: train_set.manifest.image_side,
        embed_dim: a.embed_dim.unwrap_or(32),
        seed,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        epochs: a.epochs.unwrap_or(50),
        batch_size_train: a.batch_size.unwrap_or(32),
        batch_size_eval: a.eval_batch_size.unwrap_or(100),
        lr: a.lr.unwrap_or(3e-4),
        clip_threshold: a.clip.unwrap_or(10.0),
        seed,
        ..TrainConfig::default()
    };
    tcfg.validate()?;
    let rows = run_ablation(&grid, &base, &tcfg, &train_set, &test_set)?;
    write_file(&out, &ablation_csv(&rows))?;
    println!("{} runs written to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_dump_phi(a: DumpPhiArgs) -> Result<()> {
    let ck = required(a.checkpoint, "dump_phi.checkpoint")?;
    let data_path = required(a.data, "dump_phi.data")?;
    let out = required(a.out, "dump_phi.out")?;
    existing_file(&ck, "dump_phi.checkpoint")?;
    existing_file(&data_path, "dump_phi.data")?;
    writable(&out, "dump_phi.out")?;
    let batch = positive(a.batch_size.unwrap_or(100), "dump_phi.batch_size")?;
    let model = load_checkpoint(&ck)?;
    let data = read_dataset(&data_path)?;
    check_side(&model, &data)?;
    let rows = export_phi(&model, &data, &out, batch)?;
    println!(
        "{rows} rows of {} composed weights written to {}",
        model.config().phi_len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = load_file_config(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    match cli.command {
        Command::Generate(a) => cmd_generate(a.merge(file.generate), seed),
        Command::Train(a) => cmd_train(a.merge(file.train), seed),
        Command::Eval(a) => cmd_eval(a.merge(file.eval), seed),
        Command::Ablate(a) => cmd_ablate(a.merge(file.ablate), seed),
        Command::DumpPhi(a) => cmd_dump_phi(a.merge(file.dump_phi)),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
