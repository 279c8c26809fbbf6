use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tlc_core::data::{generate, parse_csv, write_csv, DataKind, Dataset, LabelColumn};
use tlc_core::experiment::{prepare, run_experiment, ExperimentConfig};
use tlc_core::metrics::CollapseMode;
use tlc_core::store::CheckpointMetadata;
use tlc_core::{
    collapse_and_recalibrate, collapse_layer, compare_substitutions, count_flops, evaluate, load_checkpoint,
    partition_neurons, rank_layers, rank_layers_baseline, save_checkpoint, train_model, LayerId, RankCriterion,
    TlcError,
};

#[derive(Parser)]
#[command(name = "tlc", version, about = "Train, rank and collapse layers of batch-normalized MLPs")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Worker threads for the parallel kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic 2-D dataset as CSV.
    GenData {
        #[arg(long)]
        kind: DataKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dense network described by an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report accuracy and loss of a checkpoint on a CSV dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Rank hidden layers by removal impact or by a magnitude baseline.
    Rank {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "tlc")]
        criterion: RankCriterion,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Collapse one hidden layer into its successor.
    Collapse {
        #[arg(long)]
        ckpt: PathBuf,
        /// Layer id, as `3` or `L3`.
        #[arg(long)]
        layer: String,
        #[arg(long, default_value = "tlc")]
        mode: CollapseMode,
        #[arg(long)]
        out: PathBuf,
        /// CSV whose features recalibrate downstream batch norms.
        #[arg(long)]
        calib: Option<PathBuf>,
    },
    /// KL divergence of TLC, always-ON and always-OFF substitutions per layer.
    Compare {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, compress and report a full experiment.
    Tlc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_layer(s: &str) -> Result<LayerId> {
    let digits = s.strip_prefix('L').unwrap_or(s);
    let n = digits.parse::<u32>().with_context(|| format!("invalid layer id {s:?}"))?;
    Ok(LayerId(n))
}

/// Loads a CSV with the label in the last column, detecting a header row.
fn load_data(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let name = path.display().to_string();
    let has_header = text
        .lines()
        .next()
        .is_some_and(|line| line.split(',').any(|f| f.trim().parse::<f64>().is_err()));
    Ok(parse_csv(&text, &name, has_header, LabelColumn::Last)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            kind,
            n,
            classes,
            noise,
            seed,
            out,
        } => {
            let data = generate(kind, n, classes, noise, seed)?;
            write_csv(&data, &out)?;
            eprintln!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Train { config, out } => {
            let config = ExperimentConfig::load(&config)?;
            let prepared = prepare(&config)?;
            let (model, _) = train_model(
                &prepared.model,
                &prepared.splits.train,
                Some(&prepared.splits.val),
                &prepared.schedule,
            )
            .map_err(|e| e.in_stage("dense training"))?;
            let meta = CheckpointMetadata {
                schedule: Some(prepared.schedule.clone()),
                seed: Some(config.seed),
                dataset_fingerprint: Some(prepared.splits.train.fingerprint()),
                notes: Default::default(),
            };
            save_checkpoint(&model, &meta, &out)?;
            print_json(&serde_json::json!({
                "val": evaluate(&model, &prepared.splits.val)?,
                "test": evaluate(&model, &prepared.splits.test)?,
                "cost": count_flops(&model),
            }))?;
        }
        Command::Eval { ckpt, data } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let data = load_data(&data)?;
            print_json(&evaluate(&model, &data)?)?;
        }
        Command::Rank {
            ckpt,
            data,
            criterion,
            out,
            batch_size,
        } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let data = load_data(&data)?;
            let ranking = match criterion {
                RankCriterion::Tlc => rank_layers(&model, &data, &data.features)?,
                other => rank_layers_baseline(&model, other, &data, batch_size, &data.features)?,
            };
            write_json(&out, &ranking)?;
            for e in &ranking.entries {
                println!("{}", e.layer_id);
            }
        }
        Command::Collapse {
            ckpt,
            layer,
            mode,
            out,
            calib,
        } => {
            let (model, meta) = load_checkpoint(&ckpt)?;
            let id = parse_layer(&layer)?;
            let collapsed = match calib {
                Some(path) => collapse_and_recalibrate(&model, id, mode, &load_data(&path)?.features)?,
                None => collapse_layer(&model, id, mode)?,
            };
            save_checkpoint(&collapsed, &meta, &out)?;
            print_json(&count_flops(&collapsed))?;
        }
        Command::Compare { ckpt, data, out } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let data = load_data(&data)?;
            let mut rows = Vec::new();
            for layer in model.layers() {
                let removable = match partition_neurons(layer) {
                    Ok(p) => p.is_removable(),
                    Err(TlcError::StatisticsAbsent(_)) => true,
                    Err(e) => return Err(e.into()),
                };
                if removable {
                    rows.extend(compare_substitutions(&model, layer.id, &data, &data.features)?);
                }
            }
            if rows.is_empty() {
                bail!("no removable layer to compare");
            }
            write_json(&out, &rows)?;
        }
        Command::Tlc { config, out } => {
            let config = ExperimentConfig::load(&config)?;
            let outcome = run_experiment(&config, &out)?;
            let c = &outcome.report.metrics.compression;
            println!(
                "removed {} layer(s): val {:.4} -> {:.4}, test {:.4} -> {:.4}, flops {} -> {}",
                c.removed_layers.len(),
                c.initial_val_accuracy,
                c.final_val_accuracy,
                c.dense_test_accuracy,
                c.final_test_accuracy,
                c.cost_before.flops_per_sample,
                c.cost_after.flops_per_sample,
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.threads {
        Some(n) => tlc_core::par::with_threads(n, || run(cli)),
        None => run(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
