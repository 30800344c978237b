mod pipeline;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pipeline::{export_dir, parse_stages, CliError, Pipeline};
use wkam_core::scenario::Scenario;

#[derive(Parser)]
#[command(name = "wkam", version, about = "Weak KAM selection pipeline on sub-Riemannian tori")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Scenario TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Name of a built-in scenario (see `wkam list`).
    #[arg(long)]
    builtin: Option<String>,
}

#[derive(Args)]
struct Common {
    #[command(flatten)]
    source: Source,
    /// Output root; artifacts go to `<out>/<scenario>/<stage>/`.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, env = "WKAM_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Runs pipeline stages.
    Run {
        #[command(flatten)]
        common: Common,
        /// `all` or a comma separated subset of
        /// hormander,potential,classes,graphs,select,simulate,fp,verify.
        #[arg(long, default_value = "all")]
        stages: String,
    },
    /// Re-checks existing artifacts against the scenario oracles.
    Verify {
        #[command(flatten)]
        common: Common,
    },
    /// Converts every `.wkgf` field below a directory to `.csv`.
    Export {
        /// Directory to scan.
        dir: PathBuf,
    },
    /// Lists the built-in scenarios.
    List,
}

fn load_scenario(src: &Source) -> Result<Scenario, CliError> {
    let cfg = |e: wkam_core::scenario::ScenarioError| CliError::Config(e.to_string());
    match (&src.config, &src.builtin) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            Scenario::from_toml(&text).map_err(cfg)
        }
        (None, Some(name)) => Scenario::builtin(name).map_err(cfg),
        (None, None) => Err(CliError::Config("pass --config or --builtin".into())),
    }
}

fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn execute(common: &Common, stages: &[&'static str]) -> Result<(), CliError> {
    init_threads(common.threads)?;
    let mut sc = load_scenario(&common.source)?;
    if let Some(seed) = common.seed {
        sc.seed = seed;
    }
    let s = sc.structure().map_err(|e| CliError::Config(e.to_string()))?;
    let pipeline = Pipeline::new(&sc, &s, &common.out, sc.seed)?;
    pipeline.run(stages)?;
    eprintln!("[wkam] artifacts in {}", pipeline.root().display());
    Ok(())
}

fn export(dir: &Path) -> Result<(), CliError> {
    let written = export_dir(dir)?;
    for p in &written {
        println!("{}", p.display());
    }
    eprintln!("[wkam] exported {} field(s)", written.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { common, stages } => parse_stages(stages).and_then(|st| execute(common, &st)),
        Command::Verify { common } => execute(common, &["verify"]),
        Command::Export { dir } => export(dir),
        Command::List => {
            for name in Scenario::builtin_names() {
                println!("{name}");
            }
            Ok(())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
