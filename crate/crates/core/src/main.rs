use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use earnings_qlora::config::PipelineConfig;
use earnings_qlora::ingestion::Variant;
use earnings_qlora::pipeline;
use earnings_qlora::Result;

#[derive(Parser)]
#[command(name = "earnings-qlora", version, about = "Earnings-report direction prediction pipeline")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "earnings.toml")]
    config: PathBuf,
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Base,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Collect quarter records into the output directory.
    Ingest,
    /// Build the train/test instruction datasets.
    Build,
    /// Fine-tune adapters and write a checkpoint.
    Train,
    /// Score the checkpoint on the test split.
    Eval,
    /// ingest, build, train, and eval in sequence.
    Run,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(v) = cli.variant {
        cfg.variant = match v {
            VariantArg::Base => Variant::Base,
            VariantArg::Full => Variant::Full,
        };
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    let ingest = |cfg: &PipelineConfig| -> Result<()> {
        println!("records {}", pipeline::cmd_ingest(cfg)?);
        Ok(())
    };
    let build = |cfg: &PipelineConfig| -> Result<()> {
        let s = pipeline::cmd_build(cfg)?;
        println!("train {} test {} dropped {}", s.n_train, s.n_test, s.dropped);
        Ok(())
    };
    let train = |cfg: &PipelineConfig| -> Result<()> {
        let s = pipeline::cmd_train(cfg)?;
        println!("steps {} final_loss {:.6}", s.steps, s.final_loss);
        Ok(())
    };
    let eval = |cfg: &PipelineConfig| -> Result<()> {
        let r = pipeline::cmd_eval(cfg)?;
        println!(
            "accuracy {:.4} weighted_f1 {:.4} mcc {:.4} parse_failure_rate {:.4}",
            r.accuracy, r.weighted_f1, r.mcc, r.parse_failure_rate
        );
        Ok(())
    };
    match cli.command {
        Command::Ingest => ingest(&cfg),
        Command::Build => build(&cfg),
        Command::Train => train(&cfg),
        Command::Eval => eval(&cfg),
        Command::Run => {
            ingest(&cfg)?;
            build(&cfg)?;
            train(&cfg)?;
            eval(&cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
