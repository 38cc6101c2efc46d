//! What each subcommand does, minus argument parsing.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use fedwrap_core::dataset::{build_partition, Dataset, PartitionMode, PartitionSpec};
use fedwrap_core::federation::{FederationOutcome, FederationPlan};
use fedwrap_core::metrics::{metrics_from_confusion, ConfusionMatrix, Scores};
use fedwrap_core::model::{Model, TrainHp};
use fedwrap_core::runtime::client::{ClientRole, ClientSession, SessionOutput};
use fedwrap_core::sim::{initial_global, task_for, Arch};
use fedwrap_core::wrapper::{wrapper_infer, WrapperConfig, WrapperMode, WrapperState};

use crate::config::{arch_hidden, endpoint_addr, parse_arch, ClientConfig, ServerConfig};
use crate::experiment::bank_schema;
use crate::io::{self, PartitionManifest};
use crate::net::{run_session, ClientTimeouts, Server};
use crate::state::StateFile;
use crate::synth::bank_surrogate_csv;
use crate::{Error, Result};

/// Where `partition` reads its rows from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Csv { csv: PathBuf, schema: PathBuf },
    Surrogate { rows: usize, seed: u64 },
}

pub fn load_source(source: &DataSource) -> Result<(Dataset, String)> {
    match source {
        DataSource::Csv { csv, schema } => Ok((io::load_raw(csv, schema)?, csv.display().to_string())),
        DataSource::Surrogate { rows, seed } => {
            let name = format!("bank-surrogate(rows={rows}, seed={seed})");
            Ok((io::load_csv_text(&bank_surrogate_csv(*rows, *seed), &name, &bank_schema())?, name))
        }
    }
}

pub fn partition(source: &DataSource, spec: &PartitionSpec, out: &Path) -> Result<PartitionManifest> {
    let (data, name) = load_source(source)?;
    let partition = build_partition(&data, spec)?;
    io::write_partition(out, &name, &partition)
}

/// Trains one client's local model from a partition manifest.
pub fn train_local(manifest_path: &Path, client: &str, arch: Arch, hp: &TrainHp, out: &Path) -> Result<Model> {
    let (manifest, dir) = io::read_manifest(manifest_path)?;
    let entry = manifest.client(client)?;
    let data = io::read_processed(&dir.join(&entry.file), &manifest.class_names)?;
    let model = Model::init(arch.spec(data.in_dim(), data.n_classes()), hp.seed)?;
    let model = model.sgd_train(&data, hp)?.model;
    io::write_model(out, &model)?;
    Ok(model)
}

pub fn server_plan(cfg: &ServerConfig) -> Result<(FederationPlan, Vec<fedwrap_core::model::ParamBlock>)> {
    let spec = cfg.translator_spec()?;
    let plan = FederationPlan {
        rounds: cfg.train_config.rounds,
        expected_clients: cfg.clients.iter().cloned().collect(),
        translator_spec: spec,
        hp: cfg.train_config.hp(),
        timeout_ms: cfg.train_config.timeout_ms,
    };
    plan.validate()?;
    let initial = match cfg.mode {
        WrapperMode::Stacking => initial_global(spec, cfg.train_config.seed)?,
        WrapperMode::Bagging => Vec::new(),
    };
    Ok((plan, initial))
}

/// Binds, reports the bound address through `on_bound`, then coordinates
/// the federation. The round log goes to `<out>/round_log.csv` when `out`
/// is set.
pub fn serve(
    cfg: &ServerConfig,
    interrupt: Arc<AtomicBool>,
    on_bound: impl FnOnce(SocketAddr),
) -> Result<FederationOutcome> {
    let addr = endpoint_addr(cfg.server()?)?;
    let token = cfg.token()?.to_string();
    let (plan, initial) = server_plan(cfg)?;
    let server = Server::bind(addr, interrupt)?;
    on_bound(server.local_addr());
    let outcome = server.run(&plan, cfg.mode, &token, initial, &mut |_, _| None)?;
    if let Some(out) = &cfg.out {
        io::write_file(&out.join(crate::experiment::ROUND_LOG_FILE), io::round_log_csv(&outcome.log))?;
    }
    Ok(outcome)
}

fn class_names(cfg: &ClientConfig, n_classes: usize) -> Result<Vec<String>> {
    if cfg.class_names.is_empty() {
        return Ok((0..n_classes).map(|c| c.to_string()).collect());
    }
    if cfg.class_names.len() != n_classes {
        return Err(Error::Config(format!(
            "{} class_names for a local model with {n_classes} classes",
            cfg.class_names.len()
        )));
    }
    Ok(cfg.class_names.clone())
}

/// The wrapper config a `join` runs with.
pub fn wrapper_config(cfg: &ClientConfig) -> Result<WrapperConfig> {
    let local = io::read_model(&cfg.local_model)?;
    let names = class_names(cfg, local.spec.n_classes)?;
    let data = io::read_processed(&cfg.train_dataset, &names)?;
    let hidden = arch_hidden(parse_arch(&cfg.translator)?);
    let mut wc = WrapperConfig::new(
        cfg.client_id.clone(),
        cfg.clients.clone(),
        local.into(),
        data,
        hidden,
        cfg.train_config.hp(),
    );
    wc.feature_mode = cfg.feature_mode;
    wc.translator.in_dim = wc.stack_in_dim();
    wc.threshold = cfg.infer_config.threshold;
    wc.fusion_weight = cfg.infer_config.fusion_weight;
    if let Some(ep) = &cfg.client_addr {
        wc.client_addr = ep.clone();
    }
    wc.server_addr = cfg.server()?.clone();
    wc.validate()?;
    Ok(wc)
}

/// Registers with the server, takes part until Done and saves the state
/// file when one is configured.
pub fn join(cfg: &ClientConfig) -> Result<(WrapperConfig, WrapperState)> {
    let wc = wrapper_config(cfg)?;
    let addr = endpoint_addr(cfg.server()?)?;
    let role = match cfg.mode {
        WrapperMode::Stacking => ClientRole::stacking(wc.clone())?,
        WrapperMode::Bagging => ClientRole::bagging(wc.clone())?,
    };
    let session = ClientSession::new(cfg.client_id.clone(), cfg.token()?, role);
    let timeouts = ClientTimeouts {
        connect: Duration::from_millis(cfg.connect_timeout_ms),
        idle: Duration::from_millis(cfg.train_config.timeout_ms.saturating_mul(2).max(1_000)),
    };
    let state = match run_session(session, addr, timeouts)? {
        SessionOutput::Wrapper(state) => state,
        SessionOutput::Plain(_) => unreachable!("join runs wrapper roles only"),
    };
    if let Some(path) = &cfg.state_file {
        StateFile::capture(&wc, &state)?.save(path)?;
    }
    Ok((wc, state))
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub csv: String,
    pub scores: Scores,
}

/// Fused predictions for every row of a processed CSV.
/// Output columns: `row_id,label,predicted,p_<class>...`.
pub fn infer(state_path: &Path, data_path: &Path) -> Result<Inference> {
    let saved = StateFile::load(state_path)?;
    let (cfg, state) = saved.restore(state_path)?;
    let data = io::read_processed(data_path, &saved.class_names)?;
    if data.in_dim() != cfg.local_model.in_dim() {
        return Err(Error::format(
            data_path,
            format!("{} features, the saved wrapper expects {}", data.in_dim(), cfg.local_model.in_dim()),
        ));
    }
    let mut csv = String::from("row_id,label,predicted");
    for c in &saved.class_names {
        csv.push_str(&format!(",p_{c}"));
    }
    csv.push('\n');
    let mut predicted = Vec::with_capacity(data.n_rows());
    for (i, (x, y)) in data.rows().enumerate() {
        let (probs, label) = wrapper_infer(&cfg, &state, x)?;
        csv.push_str(&format!("{},{y},{label}", data.row_ids()[i]));
        for p in probs {
            csv.push_str(&format!(",{p}"));
        }
        csv.push('\n');
        predicted.push(label);
    }
    let scores = ConfusionMatrix::from_labels(data.n_classes(), data.labels(), &predicted)
        .and_then(|cm| metrics_from_confusion(&cm, task_for(data.n_classes())))
        .map_err(|e| Error::format(data_path, e))?;
    Ok(Inference { csv, scores })
}

pub fn parse_partition_mode(s: &str) -> Result<PartitionMode> {
    match s {
        "imbalanced" => Ok(PartitionMode::Imbalanced),
        "non-iid" | "noniid" => Ok(PartitionMode::NonIid),
        "bank-imbalanced" | "bank" => Ok(PartitionMode::BankImbalanced),
        _ => Err(Error::Config(format!("unknown partition mode {s:?}; expected imbalanced, non-iid or bank-imbalanced"))),
    }
}

/// Table rows `metric  local mean±std  wrapper mean±std` for report files.
pub fn render_reports(rows: &[io::ReportRow]) -> String {
    let mut out = format!("{:<6} {:<14} {:<10} {:>17} {:>17}\n", "n", "setting", "metric", "local", "wrapper");
    for r in rows {
        out.push_str(&format!(
            "{:<6} {:<14} {:<10} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}\n",
            r.n_clients, r.setting, r.metric, r.local_mean, r.local_std, r.wrapper_mean, r.wrapper_std
        ));
    }
    out
}
