//! The `simulate` pipeline: data, partition, local pre-training, wrapper
//! federation, optional FedAvg-from-scratch baseline, report bundle.

use std::path::Path;

use fedwrap_core::dataset::{build_partition, Dataset, Partition, PartitionMode, PartitionSpec};
use fedwrap_core::federation::RoundLogRow;
use fedwrap_core::metrics::MetricsReport;
use fedwrap_core::sim::{assign_architectures, fedavg_from_scratch, simulate, train_locals, Arch, SimConfig};
use fedwrap_core::wrapper::LocalModelHandle;
use serde::Serialize;

use crate::config::{arch_hidden, parse_arch, ExperimentConfig};
use crate::io::{self, write_file};
use crate::net::WallClock;
use crate::synth::{bank_surrogate_csv, BANK_SCHEMA};
use crate::{Error, Result};

pub fn bank_schema() -> io::Schema {
    toml::from_str(BANK_SCHEMA).expect("built-in schema parses")
}

/// The configured CSV, or the bank surrogate seeded with `seed`.
pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, String)> {
    match (&cfg.data, &cfg.schema) {
        (Some(data), Some(schema)) => Ok((io::load_raw(data, schema)?, data.display().to_string())),
        (None, None) => {
            let source = format!("bank-surrogate(rows={}, seed={seed})", cfg.surrogate_rows);
            let text = bank_surrogate_csv(cfg.surrogate_rows, seed);
            Ok((io::load_csv_text(&text, &source, &bank_schema())?, source))
        }
        _ => Err(Error::Config("data and schema must be given together".into())),
    }
}

pub fn setting_name(mode: PartitionMode) -> &'static str {
    match mode {
        PartitionMode::Imbalanced => "imbalanced",
        PartitionMode::NonIid => "non-iid",
        PartitionMode::BankImbalanced => "bank-non-iid",
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TracePoint {
    pub pipeline: &'static str,
    pub round: u32,
    pub elapsed_ms: u64,
    pub test_accuracy: f64,
}

/// Accuracy-over-time comparison between the wrapper and plain FedAvg.
#[derive(Debug, Clone, Serialize)]
pub struct CostComparison {
    /// Mean accuracy of the untouched local models.
    pub local_level: f64,
    pub wrapper_ms_to_level: Option<u64>,
    pub fedavg_ms_to_level: Option<u64>,
    pub wrapper_final_accuracy: f64,
    pub fedavg_final_accuracy: f64,
}

/// First elapsed time at which the trace reaches `level`.
pub fn time_to_level(log: &[RoundLogRow], level: f64) -> Option<u64> {
    log.iter().find(|r| r.test_accuracy.is_some_and(|a| a >= level)).map(|r| r.elapsed_ms)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub name: String,
    pub source: String,
    pub partition: Partition,
    pub report: MetricsReport,
    pub log: Vec<RoundLogRow>,
    pub baseline_log: Option<Vec<RoundLogRow>>,
    pub archs: Vec<Arch>,
}

impl ExperimentOutput {
    pub fn trace(&self) -> Vec<TracePoint> {
        let mut out = Vec::new();
        let mut push = |pipeline, log: &[RoundLogRow]| {
            for r in log {
                if let Some(a) = r.test_accuracy {
                    out.push(TracePoint { pipeline, round: r.round, elapsed_ms: r.elapsed_ms, test_accuracy: a });
                }
            }
        };
        push("wrapper", &self.log);
        if let Some(b) = &self.baseline_log {
            push("fedavg", b);
        }
        out
    }

    pub fn cost_comparison(&self) -> Option<CostComparison> {
        let baseline = self.baseline_log.as_ref()?;
        let level = self.report.local.accuracy.mean;
        let last = |log: &[RoundLogRow]| log.last().and_then(|r| r.test_accuracy).unwrap_or(0.0);
        Some(CostComparison {
            local_level: level,
            wrapper_ms_to_level: time_to_level(&self.log, level),
            fedavg_ms_to_level: time_to_level(baseline, level),
            wrapper_final_accuracy: last(&self.log),
            fedavg_final_accuracy: last(baseline),
        })
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let seed = cfg.seed;
    let (data, source) = load_data(cfg, seed)?;
    let spec = PartitionSpec {
        n_clients: cfg.partition.n_clients,
        alpha: cfg.partition.alpha,
        mode: cfg.partition.mode,
        seed,
        test_fraction: cfg.partition.test_fraction,
    };
    let partition = build_partition(&data, &spec)?;
    let archs = assign_architectures(spec.n_clients, &cfg.architecture_mix()?)?;
    let locals: Vec<LocalModelHandle> =
        train_locals(&partition, &archs, &cfg.local_train.hp(), seed)?.into_iter().map(LocalModelHandle::from).collect();

    let sim = SimConfig {
        mode: cfg.wrapper.mode,
        rounds: cfg.train_config.rounds,
        translator_hidden: arch_hidden(parse_arch(&cfg.wrapper.translator)?),
        feature_mode: cfg.wrapper.feature_mode,
        hp: cfg.train_config.hp(),
        fusion_weight: cfg.infer_config.fusion_weight,
        threshold: cfg.infer_config.threshold,
        seed,
        token: "simulation".into(),
        timeout_ms: cfg.train_config.timeout_ms,
        track_accuracy: cfg.baseline.is_some(),
        trace_output: cfg.baseline.as_ref().map(|b| b.trace_output).unwrap_or_default(),
    };
    let outcome = simulate(&partition, &locals, &sim, &WallClock::new())?;

    let baseline_log = match &cfg.baseline {
        Some(b) => {
            let arch = parse_arch(&b.arch)?;
            let spec = arch.spec(data.in_dim(), data.n_classes());
            let bcfg = SimConfig { rounds: b.rounds.unwrap_or(sim.rounds), ..sim.clone() };
            Some(fedavg_from_scratch(&partition, spec, &bcfg, &WallClock::new())?.log)
        }
        None => None,
    };
    Ok(ExperimentOutput {
        name: cfg.name.clone(),
        source,
        partition,
        report: outcome.report,
        log: outcome.log,
        baseline_log,
        archs,
    })
}

pub const REPORT_FILE: &str = "report.csv";
pub const PER_CLIENT_FILE: &str = "per_client.csv";
pub const ROUND_LOG_FILE: &str = "round_log.csv";
pub const BASELINE_LOG_FILE: &str = "fedavg_round_log.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const COST_FILE: &str = "cost_comparison.json";

/// Writes the report bundle. `report.csv`, `per_client.csv` and
/// `histogram.csv` depend only on the inputs; the round logs and timing
/// trace carry wall-clock times.
pub fn write_bundle(out: &Path, result: &ExperimentOutput) -> Result<()> {
    let n = result.partition.client_datasets.len();
    let setting = setting_name(result.partition.spec.mode);
    write_file(&out.join(REPORT_FILE), io::report_csv(n, setting, &result.report))?;
    write_file(&out.join(PER_CLIENT_FILE), io::per_client_csv(&result.report))?;
    write_file(&out.join(io::HISTOGRAM_FILE), io::histogram_csv(&result.partition))?;
    write_file(&out.join(ROUND_LOG_FILE), io::round_log_csv(&result.log))?;
    if let Some(b) = &result.baseline_log {
        write_file(&out.join(BASELINE_LOG_FILE), io::round_log_csv(b))?;
        let mut timing = String::from("pipeline,round,elapsed_ms,test_accuracy\n");
        for p in result.trace() {
            timing.push_str(&format!("{},{},{},{}\n", p.pipeline, p.round, p.elapsed_ms, p.test_accuracy));
        }
        write_file(&out.join(TIMING_FILE), timing)?;
        if let Some(c) = result.cost_comparison() {
            io::write_json(&out.join(COST_FILE), &c)?;
        }
    }
    Ok(())
}
