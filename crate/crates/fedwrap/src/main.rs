use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use fedwrap::app::{self, DataSource};
use fedwrap::config::{parse_arch, ClientConfig, ExperimentConfig, ServerConfig};
use fedwrap::core::dataset::PartitionSpec;
use fedwrap::core::model::TrainHp;
use fedwrap::core::wrapper::WrapperMode;
use fedwrap::experiment::{run_experiment, write_bundle, COST_FILE, REPORT_FILE};
use fedwrap::{io, synth, Error, Result};

#[derive(Parser)]
#[command(name = "fedwrap", version, about = "Federated ensemble wrappers around pre-trained local models")]
struct Cli {
    /// Configuration file of the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file for `synth` and `infer`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Wrapper mode: stacking or bagging.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<WrapperMode>,
    /// Dirichlet concentration.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Number of clients.
    #[arg(long, global = true)]
    clients: Option<usize>,
    /// Federation rounds.
    #[arg(long, global = true)]
    rounds: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

fn parse_mode(s: &str) -> std::result::Result<WrapperMode, String> {
    match s {
        "stacking" => Ok(WrapperMode::Stacking),
        "bagging" => Ok(WrapperMode::Bagging),
        _ => Err(format!("unknown mode {s:?}; expected stacking or bagging")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Split a table into client files and a balanced test set.
    Partition(PartitionArgs),
    /// Train one client's local model from a partition manifest.
    TrainLocal(TrainLocalArgs),
    /// Run the coordinator (`--config server.toml`).
    Serve,
    /// Take part in a federation as a client (`--config client.toml`).
    Join,
    /// Predict with a saved wrapper.
    Infer(InferArgs),
    /// Run a whole experiment in process (`--config experiment.toml`).
    Simulate,
    /// Print report.csv files as a table.
    Report(ReportArgs),
    /// Write the synthetic bank table and its schema.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long, requires = "schema")]
    csv: Option<PathBuf>,
    #[arg(long, requires = "csv")]
    schema: Option<PathBuf>,
    /// Rows of the synthetic bank table when no CSV is given.
    #[arg(long, default_value_t = 20_000)]
    surrogate_rows: usize,
    /// imbalanced, non-iid or bank-imbalanced.
    #[arg(long, default_value = "non-iid")]
    partition_mode: String,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
}

#[derive(Args)]
struct TrainLocalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    client: String,
    /// LR or MLP-<width>.
    #[arg(long, default_value = "LR")]
    arch: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    state: PathBuf,
    /// Processed CSV (`row_id,<features>,label`).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20_000)]
    rows: usize,
    #[arg(long)]
    schema_out: Option<PathBuf>,
}

/// Serve exits on its own when interrupted; the other commands stop at once.
static COOPERATIVE_STOP: AtomicBool = AtomicBool::new(false);

fn main() -> ExitCode {
    let cli = Cli::parse();
    let interrupt = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&interrupt);
    let _ = ctrlc::set_handler(move || {
        flag.store(true, Ordering::SeqCst);
        if !COOPERATIVE_STOP.load(Ordering::SeqCst) {
            eprintln!("error: interrupted");
            std::process::exit(130);
        }
    });
    match run(cli, interrupt) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn need_config(cli: &Cli, what: &str) -> Result<PathBuf> {
    cli.config.clone().ok_or_else(|| Error::Config(format!("{what} needs --config <file>")))
}

fn need_out(cli: &Cli, what: &str) -> Result<PathBuf> {
    cli.out.clone().ok_or_else(|| Error::Config(format!("{what} needs --out <path>")))
}

fn run(cli: Cli, interrupt: Arc<AtomicBool>) -> Result<()> {
    match &cli.command {
        Command::Partition(a) => {
            let out = need_out(&cli, "partition")?;
            let seed = cli.seed.unwrap_or(0);
            let source = match (&a.csv, &a.schema) {
                (Some(csv), Some(schema)) => DataSource::Csv { csv: csv.clone(), schema: schema.clone() },
                _ => DataSource::Surrogate { rows: a.surrogate_rows, seed },
            };
            let spec = PartitionSpec {
                n_clients: cli.clients.unwrap_or(10),
                alpha: cli.alpha.unwrap_or(0.5),
                mode: app::parse_partition_mode(&a.partition_mode)?,
                seed,
                test_fraction: a.test_fraction,
            };
            let manifest = app::partition(&source, &spec, &out)?;
            println!(
                "wrote {} client files and {} test rows to {}",
                manifest.clients.len(),
                manifest.test.rows.len(),
                out.display()
            );
        }
        Command::TrainLocal(a) => {
            let out = need_out(&cli, "train-local")?;
            let hp = TrainHp {
                learning_rate: a.learning_rate,
                batch_size: a.batch_size,
                local_epochs: a.epochs,
                l2: 0.0,
                seed: cli.seed.unwrap_or(0),
            };
            let model = app::train_local(&a.manifest, &a.client, parse_arch(&a.arch)?, &hp, &out)?;
            println!("wrote {} to {}", model.spec.descriptor(), out.display());
        }
        Command::Serve => {
            let mut cfg = ServerConfig::load(&need_config(&cli, "serve")?)?;
            if let Some(r) = cli.rounds {
                cfg.train_config.rounds = r;
            }
            if let Some(m) = cli.mode {
                cfg.mode = m;
            }
            if let Some(s) = cli.seed {
                cfg.train_config.seed = s;
            }
            if let Some(o) = &cli.out {
                cfg.out = Some(o.clone());
            }
            COOPERATIVE_STOP.store(true, Ordering::SeqCst);
            let outcome = app::serve(&cfg, interrupt, |addr| {
                println!("listening on {addr}");
            })?;
            println!("federation finished after {} rounds", outcome.log.len());
        }
        Command::Join => {
            let mut cfg = ClientConfig::load(&need_config(&cli, "join")?)?;
            if let Some(m) = cli.mode {
                cfg.mode = m;
            }
            if let Some(o) = &cli.out {
                cfg.state_file = Some(o.clone());
            }
            let (_, state) = app::join(&cfg)?;
            let mode = state.mode().map(|m| m.to_string()).unwrap_or_default();
            match &cfg.state_file {
                Some(p) => println!("client {} finished ({mode}); state saved to {}", cfg.client_id, p.display()),
                None => println!("client {} finished ({mode})", cfg.client_id),
            }
        }
        Command::Infer(a) => {
            let result = app::infer(&a.state, &a.data)?;
            match &cli.out {
                Some(p) => io::write_file(p, &result.csv)?,
                None => print!("{}", result.csv),
            }
            let s = result.scores;
            eprintln!("accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4}", s.accuracy, s.precision, s.recall, s.f1);
        }
        Command::Simulate => {
            let path = need_config(&cli, "simulate")?;
            let mut cfg = ExperimentConfig::load(&path)?;
            apply_overrides(&cli, &mut cfg);
            let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("results").join(&cfg.name));
            let result = run_experiment(&cfg)?;
            write_bundle(&out, &result)?;
            print!("{}", app::render_reports(&io::read_report(&out.join(REPORT_FILE))?));
            if result.baseline_log.is_some() {
                println!("training-cost comparison: {}", out.join(COST_FILE).display());
            }
        }
        Command::Report(a) => {
            let mut rows = Vec::new();
            for f in &a.files {
                rows.extend(io::read_report(f)?);
            }
            print!("{}", app::render_reports(&rows));
        }
        Command::Synth(a) => {
            let out = need_out(&cli, "synth")?;
            io::write_file(&out, synth::bank_surrogate_csv(a.rows, cli.seed.unwrap_or(0)))?;
            if let Some(s) = &a.schema_out {
                io::write_file(s, synth::BANK_SCHEMA)?;
            }
            println!("wrote {} rows to {}", a.rows, out.display());
        }
    }
    Ok(())
}

fn apply_overrides(cli: &Cli, cfg: &mut ExperimentConfig) {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(a) = cli.alpha {
        cfg.partition.alpha = a;
    }
    if let Some(n) = cli.clients {
        cfg.partition.n_clients = n;
    }
    if let Some(r) = cli.rounds {
        cfg.train_config.rounds = r;
    }
    if let Some(m) = cli.mode {
        cfg.wrapper.mode = m;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
}
