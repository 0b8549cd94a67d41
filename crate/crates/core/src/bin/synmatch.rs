use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use synmatch::data::manifest::{split_file_name, MANIFEST_FILE};
use synmatch::data::{build_split, generate_synthetic_dataset, DatasetManifest, GenConfig, Setting};
use synmatch::train::{ablate, consistency_track, evaluate_checkpoint, runs, EpochReport, TrainConfig, Trainer};
use synmatch::Result;

#[derive(Parser)]
#[command(name = "synmatch", version, about = "Sparse-annotation segmentation training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic segmentation dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a split manifest next to the dataset manifest.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        setting: Setting,
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        no_l_org: bool,
        #[arg(long)]
        no_l_syn: bool,
        #[arg(long)]
        dump_synth: Option<PathBuf>,
        /// Override config fields, e.g. `--set epochs=10`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints per-sample and aggregate CSV rows.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Write predicted label maps as PGM files here.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the four-way loss ablation.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Track pseudo-label consistency for SynMatch and FixMatch-mode runs.
    Consistency {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn load_config(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_file(path)?;
    let mut pairs = Vec::new();
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| synmatch::Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        pairs.push((k.trim(), v.trim()));
    }
    cfg.apply(pairs)?;
    Ok(cfg)
}

fn log_epoch(run: &str, r: &EpochReport) {
    let mut line = format!(
        "[{run}] epoch {} loss {:.4} masked {:.3} val_dsc {:.4}",
        r.epoch, r.mean_loss, r.mean_masked_fraction, r.val.mean_dsc
    );
    if let Some(c) = r.consistency {
        line += &format!(" syn_pseudo {:.4} pseudo_gt {:.4}", c.dice_syn_pseudo, c.dice_pseudo_gt);
    }
    if r.improved {
        line += " *";
    }
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { out, n, size, classes, seed } => {
            let cfg = GenConfig { n, size, classes, seed, ..GenConfig::default() };
            let m = generate_synthetic_dataset(&out, &cfg)?;
            println!("{}", out.join(MANIFEST_FILE).display());
            eprintln!("{} samples, {} classes, {}x{}", m.samples.len(), m.num_classes, size, size);
        }
        Cmd::Split { data, setting, fraction, seed } => {
            let base = DatasetManifest::load(&data.join(MANIFEST_FILE))?;
            let split = build_split(&base, &data, setting, fraction, seed)?;
            let path = data.join(split_file_name(setting, fraction, seed));
            split.save(&path)?;
            let s = split.split.as_ref().expect("split manifests carry a split");
            println!("{}", path.display());
            eprintln!(
                "labeled {} unlabeled {} val {} test {}",
                s.labeled.len(),
                s.unlabeled.len(),
                s.val.len(),
                s.test.len()
            );
        }
        Cmd::Train { config, no_l_org, no_l_syn, dump_synth, overrides, resume } => {
            let mut cfg = load_config(&config, &overrides)?;
            cfg.use_l_org &= !no_l_org;
            cfg.use_l_syn &= !no_l_syn;
            if dump_synth.is_some() {
                cfg.dump_synth = dump_synth;
            }
            let mut trainer = match resume {
                Some(ckpt) => {
                    let data = synmatch::data::Dataset::load(&cfg.manifest)?;
                    Trainer::resume(cfg, data, &ckpt)?
                }
                None => Trainer::from_config(cfg)?,
            };
            let s = trainer.fit(|r| log_epoch("train", r))?;
            println!("{}", synmatch::metrics::METRICS_HEADER);
            println!("{}", s.test.csv_line());
            eprintln!("best epoch {} val_dsc {:.4}; logs in {}", s.best_epoch, s.best_val_dsc, s.out_dir.display());
        }
        Cmd::Eval { ckpt, data, split, dump, out } => {
            let eval = evaluate_checkpoint(&ckpt, &data, &split, dump.as_ref())?;
            runs::emit(&eval, out.as_deref())?;
        }
        Cmd::Ablate { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let report = ablate(&cfg, log_epoch)?;
            print!("{}", report.csv());
        }
        Cmd::Consistency { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let track = consistency_track(&cfg, log_epoch)?;
            print!("{}", track.csv());
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
