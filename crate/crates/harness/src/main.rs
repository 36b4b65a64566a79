//! `mvanet` command line: synthetic data generation, training, evaluation,
//! protocol runs, gradient checking, and feature export.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, config, or
//! inputs), 2 runtime failure. Diagnostics go to standard error;
//! machine-readable results go to files only.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mvanet_core::checkpoint;
use mvanet_core::data::{self, Profile, SynthConfig};
use mvanet_core::export::export_features;
use mvanet_core::gradcheck::run_layer_suite;
use mvanet_core::model::Model;
use mvanet_core::optim::{train_epochs, train_log_csv, TrainConfig};
use mvanet_core::rng::Rng;

use mvanet_harness::config::RunConfig;
use mvanet_harness::metrics::{compute_metrics, write_decisions, EvalReport};
use mvanet_harness::protocol::{evaluate_manifest, run_protocol};
use mvanet_harness::Error;

#[derive(Parser)]
#[command(
    name = "mvanet",
    about = "Multi-branch presentation-attack-detection network: train, evaluate, and verify",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic database (PGMs + manifest)
    Synth {
        /// Images per class
        #[arg(long)]
        n: usize,
        /// Database profile: A, B, or C
        #[arg(long)]
        profile: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side in pixels
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model per the config and write a checkpoint + training log
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Train only on this database id from the manifest
        #[arg(long)]
        train_db: Option<String>,
    },
    /// Evaluate a checkpoint on manifests, one report per database
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest path(s), comma separated
        #[arg(long, value_delimiter = ',')]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Label for the report's train_db column
        #[arg(long, default_value = "checkpoint")]
        train_label: String,
    },
    /// Run the full cross- or intra-database protocol from a config
    RunProtocol {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient-check every layer and the whole small model (f64)
    Gradcheck {
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        /// Seeded random instances per check
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Export conv feature maps (PGM) or base features (PGM + CSV)
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (P5 PGM)
        #[arg(long)]
        image: PathBuf,
        /// conv1..conv5 or base-features
        #[arg(long)]
        layer: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own usage; keep everything on stderr and
            // exit 1 for any argument problem
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            eprint!("{e}");
            return if is_help { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> mvanet_harness::Result<()> {
    match cli.cmd {
        Cmd::Synth { n, profile, seed, size, out } => {
            let profile = Profile::parse(&profile).ok_or_else(|| Error::Contract {
                op: "synth",
                msg: format!("unknown profile `{profile}` (expected A, B, or C)"),
            })?;
            let cfg = SynthConfig::new(n, profile, seed, size)?;
            let manifest = data::generate(&cfg, &out)?;
            eprintln!(
                "wrote {} images and manifest.csv to {}",
                manifest.samples.len(),
                out.display()
            );
            Ok(())
        }

        Cmd::Train { config, seed, out, train_db } => {
            let mut cfg = RunConfig::parse_file(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::Io(out.clone(), e))?;
            let manifest = data::Manifest::load_merged(&cfg.manifests)?;
            let manifest = match &train_db {
                Some(db) => {
                    let filtered = manifest.filter_database(db);
                    if filtered.samples.is_empty() {
                        return Err(Error::Contract {
                            op: "train",
                            msg: format!("database `{db}` absent from manifest"),
                        });
                    }
                    filtered
                }
                None => manifest,
            };
            let spec = cfg.network_spec()?;
            let dataset = data::LoadedDataset::<f32>::load(&manifest, spec.input_size)?;
            let mut model = Model::<f32>::new(spec, &mut Rng::derive(cfg.seed, 0))?;
            let train_cfg = TrainConfig {
                batch: cfg.batch,
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                epochs: cfg.epochs,
                seed: Rng::derive(cfg.seed, 1).state(),
            };
            eprintln!(
                "training on {} samples for {} epochs (batch {}, lr {})",
                dataset.len(),
                cfg.epochs,
                cfg.batch,
                cfg.lr
            );
            let (log, adam) = train_epochs(&mut model, &dataset, &train_cfg)?;
            for e in &log {
                eprintln!(
                    "epoch {}: loss {:.6} acc {:.2}% ({:.1}s)",
                    e.epoch, e.mean_loss, e.train_accuracy, e.wall_seconds
                );
            }
            let log_path = out.join("train_log.csv");
            std::fs::write(&log_path, train_log_csv(&log))
                .map_err(|e| Error::Io(log_path, e))?;
            checkpoint::save(&model, cfg.epochs as u64, Some(&adam), &out.join("checkpoint.ckpt"))?;
            eprintln!("checkpoint written to {}", out.join("checkpoint.ckpt").display());
            Ok(())
        }

        Cmd::Eval { checkpoint, manifest, out, batch, train_label } => {
            std::fs::create_dir_all(&out).map_err(|e| Error::Io(out.clone(), e))?;
            let (model, _, _) = mvanet_core::checkpoint::load::<f32>(&checkpoint)?;
            let merged = data::Manifest::load_merged(&manifest)?;
            let mut rows = String::from(EvalReport::CSV_HEADER);
            rows.push('\n');
            let mut human = String::new();
            for db in merged.databases() {
                let part = merged.filter_database(&db);
                let decisions = evaluate_manifest(&model, &part, batch)?;
                write_decisions(&out.join(format!("decisions_{db}.csv")), &decisions)?;
                let pairs: Vec<_> = decisions.iter().map(|d| (d.label, d.predicted)).collect();
                let report = compute_metrics(&pairs, &train_label, &db)?;
                rows.push_str(&report.csv_row());
                rows.push('\n');
                human.push_str(&report.human_line());
                human.push('\n');
                eprintln!("{}", report.human_line());
            }
            for (name, content) in [("report.csv", rows), ("report.txt", human)] {
                let p = out.join(name);
                std::fs::write(&p, content).map_err(|e| Error::Io(p, e))?;
            }
            Ok(())
        }

        Cmd::RunProtocol { config, seed, out } => {
            let mut cfg = RunConfig::parse_file(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let outcome = run_protocol(&cfg, &out)?;
            for fold in &outcome.folds {
                for r in &fold.reports {
                    eprintln!("{}", r.human_line());
                }
            }
            if !outcome.failures.is_empty() {
                for (db, err) in &outcome.failures {
                    eprintln!("fold {db} FAILED: {err}");
                }
                return Err(Error::Contract {
                    op: "run_protocol",
                    msg: format!("{} fold(s) failed", outcome.failures.len()),
                });
            }
            eprintln!("reports written to {}", out.display());
            Ok(())
        }

        Cmd::Gradcheck { seed, instances } => {
            let entries = run_layer_suite(seed, instances)
                .map_err(mvanet_harness::Error::Core)?;
            let mut worst = 0.0f64;
            for e in &entries {
                eprintln!(
                    "gradcheck {:24} max rel err {:.3e} over {} instances",
                    e.name, e.max_rel_err, e.instances
                );
                worst = worst.max(e.max_rel_err);
            }
            if worst < 1e-4 {
                eprintln!("gradcheck PASS (worst {worst:.3e} < 1e-4)");
                Ok(())
            } else {
                Err(Error::Io(
                    PathBuf::from("gradcheck"),
                    std::io::Error::other(format!("worst relative error {worst:.3e} >= 1e-4")),
                ))
            }
        }

        Cmd::ExportFeatures { checkpoint, image, layer, out } => {
            let (model, _, _) = mvanet_core::checkpoint::load::<f32>(&checkpoint)?;
            let size = model.spec().input_size;
            let img = data::decode_image::<f32>(&image, size)?;
            let x = mvanet_core::tensor::stack(&[&img])?;
            let summary = export_features(&model, &x, &layer, &out)?;
            eprintln!("wrote {} file(s) to {}", summary.files_written, out.display());
            Ok(())
        }
    }
}
