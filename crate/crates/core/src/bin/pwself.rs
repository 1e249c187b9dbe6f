use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pwself::eval::{export_features, extract_features, knn_classify, linear_probe, FeatureSource, ProbeConfig};
use pwself::geometry::{match_patches, CropRecord};
use pwself::imagedata::load_cifar10_dir;
use pwself::trainer::{checkpoint_path, run as run_training, Checkpoint, TrainConfig, Trainer, METRICS_FILE};

#[derive(Parser)]
#[command(name = "pwself", version, about = "Patch-wise self-distillation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the token correspondence between two crops.
    Match {
        /// First crop as x0,y0,x1,y1,size,flip.
        #[arg(long)]
        a: CropRecord,
        /// Second crop as x0,y0,x1,y1,size,flip.
        #[arg(long)]
        b: CropRecord,
        /// Patch size in view pixels.
        #[arg(long)]
        patch: usize,
        /// Patch size of the second crop, when it differs.
        #[arg(long)]
        patch_b: Option<usize>,
    },
    /// Train from a CIFAR-10 binary directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint in `--out`; the config must match it.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint with KNN and linear probes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Neighbour counts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "10,20")]
        knn: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        linear_epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        linear_lr: f64,
        /// teacher, student, teacher.head or student.head.
        #[arg(long, default_value = "teacher")]
        source: FeatureSource,
        /// Also write the train and test features under this directory.
        #[arg(long)]
        export: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> pwself::Result<()> {
    match cli.command {
        Command::Match { a, b, patch, patch_b } => {
            println!("{}", match_patches(&a, &b, patch, patch_b.unwrap_or(patch))?);
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
        } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let splits = load_cifar10_dir(&data, cfg.train_limit, Some(0))?;
            let trainer = if resume {
                let ckpt = Checkpoint::load(&checkpoint_path(&out))?;
                if ckpt.config.hash() != cfg.hash() {
                    return Err(pwself::Error::Config(format!(
                        "{} was written with a different config",
                        checkpoint_path(&out).display()
                    )));
                }
                Trainer::resume(ckpt)
            } else {
                Trainer::new(&cfg, &splits.train.images)?
            };
            let report = run_training(trainer, &splits.train.images, Some(&out))?;
            for e in &report.epochs {
                eprintln!(
                    "epoch {} loss {:.6} teacher_entropy {:.4} center_norm {:.4}",
                    e.epoch, e.mean_loss, e.teacher_cls_entropy, e.center_norm
                );
            }
            println!(
                "metrics={} checkpoint={}",
                out.join(METRICS_FILE).display(),
                checkpoint_path(&out).display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            knn,
            linear_epochs,
            linear_lr,
            source,
            export,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let splits = load_cifar10_dir(&data, ckpt.config.train_limit, ckpt.config.test_limit)?;
            if splits.test.is_empty() {
                return Err(pwself::Error::Config(format!(
                    "no test_batch.bin in {}",
                    data.display()
                )));
            }
            let train_fs = extract_features(&ckpt, &splits.train, source)?;
            let test_fs = extract_features(&ckpt, &splits.test, source)?;
            if let Some(dir) = export {
                std::fs::create_dir_all(&dir).map_err(|e| pwself::Error::Config(format!("{}: {e}", dir.display())))?;
                export_features(&train_fs, &dir.join("train.manifest"))?;
                export_features(&test_fs, &dir.join("test.manifest"))?;
            }
            let mut parts = Vec::new();
            for k in knn {
                parts.push(format!("knn@{k}={:.4}", knn_classify(&train_fs, &test_fs, k)?));
            }
            let probe = ProbeConfig {
                epochs: linear_epochs,
                lr: linear_lr,
                seed: ckpt.config.seed,
                ..ProbeConfig::default()
            };
            parts.push(format!("linear={:.4}", linear_probe(&train_fs, &test_fs, &probe)?));
            println!("{}", parts.join(", "));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
