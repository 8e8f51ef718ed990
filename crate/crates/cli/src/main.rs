use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use prompt_mil::harness::{
    cmd_ablate_k, cmd_bench_mem, cmd_eval, cmd_gen_data, cmd_print_config, cmd_train, ExperimentConfig, Record,
};
use prompt_mil::synth::Split;
use prompt_mil::trainer::TrainMode;
use prompt_mil::Result;

#[derive(Parser)]
#[command(
    name = "prompt-mil",
    version,
    about = "Prompt-tuned MIL on synthetic whole-slide bags"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment config; unset fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training, data, and pretraining seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Prompt,
    Conventional,
    Full,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Prompt => TrainMode::Prompt,
            ModeArg::Conventional => TrainMode::Conventional,
            ModeArg::Full => TrainMode::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it to disk.
    GenData(Common),
    /// Train a model and write report.jsonl and best.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Evaluate a checkpoint on one split of the data its config describes.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Compare peak saved activations of full-graph and three-step training.
    BenchMem {
        #[command(flatten)]
        common: Common,
        /// Bag sizes; defaults to the config's bench sizes.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Train one prompt model per prompt count on shared data.
    AblateK {
        #[command(flatten)]
        common: Common,
        /// Prompt counts; defaults to the config's ablation values.
        #[arg(long = "k", value_delimiter = ',')]
        k_values: Option<Vec<usize>>,
    },
    /// Print the default config as TOML.
    PrintConfig,
}

fn load(common: &Common, mode: Option<ModeArg>) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(mode) = mode {
        cfg.mode = mode.into();
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    Ok((cfg, out))
}

fn print_records(records: &[Record]) {
    for r in records {
        println!("{}", r.to_line());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let (cfg, out) = load(&common, None)?;
            let fingerprint = cmd_gen_data(&cfg, &out)?;
            println!("wrote {} fingerprint {fingerprint:016x}", out.display());
        }
        Command::Train { common, mode } => {
            let (cfg, out) = load(&common, mode)?;
            let outcome = cmd_train(&cfg, &out)?;
            print_records(&outcome.records[1..]);
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Eval { checkpoint, split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            print_records(&[cmd_eval(&checkpoint, split)?]);
        }
        Command::BenchMem { common, sizes } => {
            let (cfg, out) = load(&common, None)?;
            let sizes = sizes.unwrap_or_else(|| cfg.bench.sizes.clone());
            print_records(&cmd_bench_mem(&cfg, &sizes, &out)?);
        }
        Command::AblateK { common, k_values } => {
            let (cfg, out) = load(&common, None)?;
            let ks = k_values.unwrap_or_else(|| cfg.ablation.k_values.clone());
            let rows = cmd_ablate_k(&cfg, &ks, &out)?;
            print_table(&rows, &out);
        }
        Command::PrintConfig => print!("{}", cmd_print_config()),
    }
    Ok(())
}

fn print_table(rows: &[Record], out: &Path) {
    println!(
        "{:>3}  {:>8}  {:>8}  {:>8}  {:>5}  data",
        "k", "test_acc", "auroc", "val_acc", "epoch"
    );
    for r in rows {
        if let Record::Ablation {
            k,
            accuracy,
            auroc,
            val_accuracy,
            best_epoch,
            data_fingerprint,
            ..
        } = r
        {
            let auroc = auroc.map_or("-".to_string(), |a| format!("{a:.4}"));
            println!("{k:>3}  {accuracy:>8.4}  {auroc:>8}  {val_accuracy:>8.4}  {best_epoch:>5}  {data_fingerprint}");
        }
    }
    println!("runs in {}", out.display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
