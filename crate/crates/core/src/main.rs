use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coverlab::cli::{self, ExperimentConfig, ExperimentKind, ExperimentRecord, ReportFormat};
use coverlab::hitting::{self, ConstantsParams};
use coverlab::{Error, Result};

#[derive(Parser)]
#[command(name = "coverlab", version, about = "Random walk cover and Gaussian free field experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<u64>,
    /// Output directory (default: config's output_dir, else `out/<experiment>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    WalkUncovered(RunArgs),
    Surrogate(RunArgs),
    ExcursionDiagnostics(RunArgs),
    HittingConstants(RunArgs),
    ChenStein(RunArgs),
    Gff(RunArgs),
    Discriminate(RunArgs),
    /// Estimate G(0), p_d, c_d and C_d and write the constants cache.
    Constants {
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long, default_value = "constants_d3.json")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Walks for the return-frequency estimate.
        #[arg(long)]
        walks: Option<u64>,
    },
    /// Emit CSV tables and a text summary from a record.
    Report {
        #[arg(long)]
        record: PathBuf,
        /// csv, summary, long or all.
        #[arg(long, default_value = "all")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the shipped desk-scale preset configs.
    Presets {
        #[arg(long, default_value = "presets")]
        out: PathBuf,
    },
}

fn run_experiment(kind: ExperimentKind, args: RunArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if config.experiment != kind {
        return Err(Error::Usage(format!(
            "config describes a {} experiment, not {}",
            config.experiment.name(),
            kind.name()
        )));
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(r) = args.replicas {
        config.replicas = r;
    }
    let out = args
        .out
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(kind.name()));
    let record = cli::run(&config, &out)?;
    cli::report(&record, ReportFormat::All, &out)?;
    println!("{}", cli::summary_text(&record));
    println!("record written to {}", out.join("record.json").display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::WalkUncovered(a) => run_experiment(ExperimentKind::WalkUncovered, a),
        Command::Surrogate(a) => run_experiment(ExperimentKind::Surrogate, a),
        Command::ExcursionDiagnostics(a) => run_experiment(ExperimentKind::ExcursionDiagnostics, a),
        Command::HittingConstants(a) => run_experiment(ExperimentKind::HittingConstants, a),
        Command::ChenStein(a) => run_experiment(ExperimentKind::ChenStein, a),
        Command::Gff(a) => run_experiment(ExperimentKind::Gff, a),
        Command::Discriminate(a) => run_experiment(ExperimentKind::Discriminate, a),
        Command::Constants { d, out, seed, walks } => {
            let mut params = ConstantsParams::default();
            if let Some(s) = seed {
                params.seed = s;
            }
            if let Some(w) = walks {
                params.mc_walks = w;
            }
            let c = hitting::estimate_constants(d, &params)?;
            c.save(&out)?;
            let (id, id_se) = c.identity_check();
            println!("G0 = {}\np_d = {}\nc_d = {}\nC_d = {}", c.g0, c.p_d, c.c_d, c.big_c);
            println!("G0 (1 - p_mc) = {id} ± {id_se}");
            println!("written to {}", out.display());
            Ok(())
        }
        Command::Report { record, format, out } => {
            let format: ReportFormat = format.parse()?;
            let rec = ExperimentRecord::load(&record)?;
            let dir = out.unwrap_or_else(|| record.parent().map(PathBuf::from).unwrap_or_default());
            for p in cli::report(&rec, format, &dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Presets { out } => {
            std::fs::create_dir_all(&out)?;
            for (name, c) in cli::presets() {
                let p = out.join(format!("{name}.json"));
                cli::atomic_write(&p, serde_json::to_string_pretty(&c)?.as_bytes())?;
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("coverlab: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
