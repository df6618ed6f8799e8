use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use csdasa::harness::{
    build_domains_from_text, evaluate, load_checkpoint, load_dataset, pretrain_source, run_bench, save_checkpoint, split, synth_subjects,
    transfer_adapt, write_dataset, write_results, ExperimentConfig, ShiftMagnitudes,
};
use csdasa::imaging::{ElectrodeMontage, SubjectDomain};
use csdasa::losses::Bandwidth;
use csdasa::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "csdasa", version, about = "Cross-subject domain adaptation for multi-frame EEG images")]
struct Cli {
    /// TOML configuration layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base configuration: `paper` (full-size model) or `desk`.
    #[arg(long, global = true, default_value = "paper")]
    preset: String,

    /// Override any configuration key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(flatten)]
    train: TrainFlags,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long, global = true)]
    epochs_pretrain: Option<usize>,
    #[arg(long, global = true)]
    epochs_adapt: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    /// Weight of the discrepancy term.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Kernel bandwidth: `median` or a positive number.
    #[arg(long, global = true)]
    bandwidth: Option<String>,
    /// Labeled target samples used during adaptation.
    #[arg(long, global = true)]
    n_labeled: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert raw electrode series to a dataset container.
    BuildImages {
        /// Lines of `subject trial label electrode v1 .. vT`.
        #[arg(long)]
        input: PathBuf,
        /// Lines of `name x y z`; the built-in 64-electrode layout if absent.
        #[arg(long)]
        montage: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a synthetic multi-subject dataset.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Shift preset: none, low, medium or high.
        #[arg(long)]
        shift: Option<String>,
    },
    /// Train on one source subject.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        source: String,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Adapt a pretrained checkpoint from its source subject to a target.
    Transfer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Accuracy of a checkpoint on one subject's held-out split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        subject: String,
        /// Evaluate every sample instead of the held-out split.
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// One-to-one transfer over all subject pairs plus baselines.
    Bench {
        #[arg(long)]
        seed: u64,
        /// Dataset container; synthetic subjects from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::preset(&cli.preset)?;
    if let Some(path) = &cli.config {
        cfg = ExperimentConfig::load(path, cfg)?;
    }
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    let t = &cli.train;
    let train = &mut cfg.train;
    train.epochs_pretrain = t.epochs_pretrain.unwrap_or(train.epochs_pretrain);
    train.epochs_adapt = t.epochs_adapt.unwrap_or(train.epochs_adapt);
    train.lr = t.lr.unwrap_or(train.lr);
    train.batch = t.batch.unwrap_or(train.batch);
    train.n_labeled = t.n_labeled.unwrap_or(train.n_labeled);
    cfg.model.gamma = t.gamma.unwrap_or(cfg.model.gamma);
    if let Some(b) = &t.bandwidth {
        cfg.model.kernel.bandwidth = match b.as_str() {
            "median" => Bandwidth::Median,
            v => Bandwidth::Fixed(v.parse().map_err(|_| Error::Config(format!("bad bandwidth {v:?}")))?),
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn find_subject<'a>(domains: &'a [SubjectDomain], id: &str) -> Result<&'a SubjectDomain> {
    domains
        .iter()
        .find(|d| d.subject_id == id)
        .ok_or_else(|| Error::Config(format!("subject {id:?} not in dataset")))
}

fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    match cli.command {
        Command::BuildImages { input, montage, output } => {
            let montage = match montage {
                Some(p) => ElectrodeMontage::parse(&read_text(&p)?)?,
                None => ElectrodeMontage::standard_64(),
            };
            let domains = build_domains_from_text(&read_text(&input)?, &montage, &cfg.imaging)?;
            write_dataset(&output, &domains)?;
            let n: usize = domains.iter().map(SubjectDomain::len).sum();
            println!("wrote {} subjects, {n} samples to {}", domains.len(), output.display());
        }
        Command::Synth { output, seed, shift } => {
            let mut synth = cfg.synth.clone();
            if let Some(level) = shift {
                synth.shift = ShiftMagnitudes::preset(&level)?;
            }
            let domains = synth_subjects(&synth, seed)?;
            write_dataset(&output, &domains)?;
            println!("wrote {} synthetic subjects to {}", domains.len(), output.display());
        }
        Command::Pretrain { data, source, output, seed } => {
            let domains = load_dataset(&data)?;
            let out = pretrain_source(find_subject(&domains, &source)?, &cfg.model, &cfg.train, seed)?;
            save_checkpoint(&output, &out.checkpoint)?;
            let m = &out.checkpoint.meta;
            println!("{source}: {} epochs, train {:.2}%, val {:.2}%", m.epochs_run, m.train_accuracy, m.val_accuracy);
        }
        Command::Transfer { data, checkpoint, target, output, seed } => {
            let domains = load_dataset(&data)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let (source_train, _) = split(find_subject(&domains, &ckpt.meta.source_id)?, seed)?;
            let (target_train, _) = split(find_subject(&domains, &target)?, seed)?;
            let out = transfer_adapt(&ckpt, &source_train, &target_train, &cfg.train, seed)?;
            for e in &out.log {
                info!("epoch {}: ce {} mmd {}", e.epoch, e.ce, e.mmd);
            }
            save_checkpoint(&output, &out.checkpoint)?;
            let last = out.log.last().copied().unwrap_or(out.initial);
            println!("{}->{target}: mmd {:.6} -> {:.6}, ce {:.4}", ckpt.meta.source_id, out.initial.mmd, last.mmd, last.ce);
        }
        Command::Evaluate { data, checkpoint, subject, all, seed } => {
            let domains = load_dataset(&data)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let domain = find_subject(&domains, &subject)?;
            let eval = if all { evaluate(&ckpt, domain)? } else { evaluate(&ckpt, &split(domain, seed)?.1)? };
            println!("{subject}: accuracy {:.2}%", eval.accuracy);
            for (y, row) in eval.confusion.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
                println!("  true {y}: {}", cells.join(""));
            }
        }
        Command::Bench { seed, data, out } => {
            let domains = match data {
                Some(p) => load_dataset(&p)?,
                None => synth_subjects(&cfg.synth, seed)?,
            };
            let result = run_bench(&domains, &cfg.model, &cfg.train, seed)?;
            write_results(&out, &result)?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            print!("{}", fs::read_to_string(out.join("table.txt"))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
