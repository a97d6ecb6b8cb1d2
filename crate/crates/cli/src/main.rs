use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use switchtx::data::Split;
use switchtx::interpret::{Baseline, IgConfig, Rule, TargetMode};
use switchtx::{Error, Result};
use switchtx_cli::commands::{self, Selection};
use switchtx_cli::{error_line, exit_code, RunConfig};

#[derive(Parser)]
#[command(name = "switchtx", version, about = "Train, evaluate and inspect dense and switch transformer classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (TOML, or JSON when the extension is .json).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable. Values are parsed as TOML, falling back to a string.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    set: Vec<(String, String)>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_parser = ["dense", "switch"])]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut kv = self.set.clone();
        let mut push = |k: &str, v: String| kv.push((k.to_string(), v));
        if let Some(d) = &self.output_dir {
            push("output_dir", toml_string(&d.display().to_string()));
        }
        if let Some(d) = &self.dataset {
            push("dataset", toml_string(&d.display().to_string()));
        }
        if let Some(v) = &self.variant {
            push("variant", toml_string(v));
        }
        if let Some(e) = self.epochs {
            push("epochs", e.to_string());
        }
        if let Some(s) = self.seed {
            push("train_seed", s.to_string());
        }
        RunConfig::load(self.config.as_deref(), &kv)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Pad,
    Zero,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Right,
    Trapezoid,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    True,
    Predicted,
}

#[derive(Subcommand)]
enum Command {
    /// Train with early stopping; writes a checkpoint, logs and a validation report.
    Train(Common),
    /// Train for `long_epochs` without early stopping and write the generalisation gap.
    TrainLong(Common),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Integrated-gradients attributions for chosen or misclassified examples.
    Attribute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated example ids.
        #[arg(long, value_delimiter = ',', conflicts_with = "misclassified", required_unless_present = "misclassified")]
        ids: Vec<String>,
        /// Attribute every misclassified example of `--split`, false negatives first.
        #[arg(long)]
        misclassified: bool,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 128)]
        steps: usize,
        #[arg(long, value_enum, default_value = "pad")]
        baseline: BaselineArg,
        #[arg(long, value_enum, default_value = "right")]
        rule: RuleArg,
        #[arg(long, value_enum, default_value = "true")]
        target: TargetArg,
    },
    /// Pooled hidden states per layer and split, as TSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated block indices; all blocks when omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "train,val")]
        splits: Vec<SplitArg>,
    },
    /// Write the configured synthetic corpus as JSON lines.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let run = commands::run_train(&c.load()?, false)?;
            print_train(&run);
        }
        Command::TrainLong(c) => {
            let run = commands::run_train(&c.load()?, true)?;
            print_train(&run);
        }
        Command::Eval { common, checkpoint, split } => {
            let report = commands::run_eval(&common.load()?, &checkpoint, split.into())?;
            println!("{report}");
        }
        Command::Attribute { common, checkpoint, ids, misclassified, split, steps, baseline, rule, target } => {
            let ig = IgConfig {
                num_steps: steps,
                baseline: match baseline {
                    BaselineArg::Pad => Baseline::Pad,
                    BaselineArg::Zero => Baseline::Zero,
                },
                rule: match rule {
                    RuleArg::Right => Rule::Right,
                    RuleArg::Trapezoid => Rule::Trapezoid,
                },
                target: match target {
                    TargetArg::True => TargetMode::True,
                    TargetArg::Predicted => TargetMode::Predicted,
                },
            };
            let selection = if misclassified { Selection::Misclassified(split.into()) } else { Selection::Ids(ids) };
            let reports = commands::run_attribute(&common.load()?, &checkpoint, &selection, &ig)?;
            for r in &reports {
                print!("{}", r.highlighted());
            }
            eprintln!("{} attribution report(s)", reports.len());
        }
        Command::ExportEmbeddings { common, checkpoint, layers, splits } => {
            let splits: Vec<Split> = splits.into_iter().map(Split::from).collect();
            for name in commands::run_export_embeddings(&common.load()?, &checkpoint, &layers, &splits)? {
                println!("{name}");
            }
        }
        Command::GenData { common, out } => {
            let n = commands::run_gen_data(&common.load()?, &out)?;
            println!("wrote {n} examples to {}", out.display());
        }
    }
    Ok(())
}

fn print_train(run: &commands::TrainRun) {
    let o = &run.outcome;
    for w in &o.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "epochs run {} (best {}), stop: {}, optimizer steps {}",
        o.epochs_run, o.best_epoch, o.stop_reason, o.optimizer_steps
    );
    println!("validation:\n{}", run.val_report);
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> ExitCode {
    eprintln!("{}", error_line(e));
    ExitCode::from(exit_code(e) as u8)
}
