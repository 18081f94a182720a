use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use riskdistill_core::pipeline::{parse_config, run_all, run_stage, write_report, RunManifest, Stage, StageOutcome};
use riskdistill_core::Error;

const CONFIG_ERROR: u8 = 2;
const STAGE_FAILURE: u8 = 3;

/// Synthetic-cohort risk distillation: generate, teach, train, evaluate, associate, explain.
#[derive(Debug, Parser)]
#[command(name = "riskdistill", version)]
struct Cli {
    /// A stage name, `all`, or `report`.
    command: String,
    #[arg(long)]
    config: PathBuf,
    /// Overrides `global_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Skip stages whose manifest entries are still current.
    #[arg(long)]
    resume: bool,
}

enum Command {
    Stage(Stage),
    All,
    Report,
}

fn parse_command(s: &str) -> Option<Command> {
    match s {
        "all" => Some(Command::All),
        "report" => Some(Command::Report),
        other => Stage::parse(other).map(Command::Stage),
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("RISKDISTILL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("RISKDISTILL_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn exit_for(e: &Error) -> ExitCode {
    ExitCode::from(if matches!(e, Error::Config(_)) {
        CONFIG_ERROR
    } else {
        STAGE_FAILURE
    })
}

fn outcome_word(o: StageOutcome) -> &'static str {
    match o {
        StageOutcome::Ran => "done",
        StageOutcome::UpToDate => "up to date",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(command) = parse_command(&cli.command) else {
        let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
        eprintln!(
            "unknown command {:?}; expected all, report or one of {}",
            cli.command,
            names.join(", ")
        );
        return ExitCode::from(CONFIG_ERROR);
    };
    if let Err(m) = configure_threads() {
        eprintln!("configuration error: {m}");
        return ExitCode::from(CONFIG_ERROR);
    }
    let mut config = match parse_config(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            // an unreadable config file counts as a config error too
            eprintln!("{e}");
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    if let Some(s) = cli.seed {
        config.global_seed = s;
    }
    if let Some(d) = cli.output_dir {
        config.output_dir = d;
    }
    if let Err(e) = config.validate() {
        eprintln!("{e}");
        return exit_for(&e);
    }

    let force = !cli.resume;
    let result = match command {
        Command::All => run_all(&config, force).map(|(_, outcomes)| {
            for (s, o) in outcomes {
                println!("{s}: {}", outcome_word(o));
            }
        }),
        Command::Stage(stage) => RunManifest::load(&config.output_dir)
            .and_then(|mut m| run_stage(&config, stage, &mut m, force))
            .map(|o| println!("{stage}: {}", outcome_word(o))),
        Command::Report => RunManifest::load(&config.output_dir)
            .and_then(|m| write_report(&m, &config.output_dir))
            .map(|p| println!("report: {}", p.display())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            exit_for(&e)
        }
    }
}
