//! TOML configuration for `serve`, `join` and `simulate`.
//!
//! Field names follow the wrapper's configuration record: `client_id`,
//! `clients`, `local_model`, `train_dataset`, `translator`,
//! `client_addr`, `server_addr`, `train_config`, `infer_config`.

use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};

use fedwrap_core::dataset::PartitionMode;
use fedwrap_core::federation::DEFAULT_TIMEOUT_MS;
use fedwrap_core::model::{ModelSpec, TrainHp};
use fedwrap_core::sim::{Arch, TraceOutput};
use fedwrap_core::wrapper::{Endpoint, FeatureMode, WrapperMode, DEFAULT_FUSION_WEIGHT, DEFAULT_THRESHOLD};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const ENV_ADDR: &str = "FEDWRAP_ADDR";
pub const ENV_TOKEN: &str = "FEDWRAP_TOKEN";

/// Parses "LR", "MLP-16" (case-insensitive) and the bare "mlp16".
pub fn parse_arch(s: &str) -> Result<Arch> {
    let lower = s.trim().to_ascii_lowercase();
    if lower == "lr" {
        return Ok(Arch::Lr);
    }
    let width = lower.strip_prefix("mlp-").or_else(|| lower.strip_prefix("mlp"));
    match width.and_then(|w| w.parse::<usize>().ok()) {
        Some(h) if h > 0 => Ok(Arch::Mlp(h)),
        _ => Err(Error::Config(format!("unknown architecture {s:?}; expected LR or MLP-<width>"))),
    }
}

pub fn arch_hidden(arch: Arch) -> Option<usize> {
    match arch {
        Arch::Lr => None,
        Arch::Mlp(h) => Some(h),
    }
}

pub fn endpoint_addr(ep: &Endpoint) -> Result<SocketAddr> {
    (ep.ip.as_str(), ep.port)
        .to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .ok_or_else(|| Error::Config(format!("cannot resolve {}:{}", ep.ip, ep.port)))
}

fn parse_endpoint(s: &str) -> Result<Endpoint> {
    let (ip, port) = s
        .rsplit_once(':')
        .ok_or_else(|| Error::Config(format!("{ENV_ADDR}={s:?} is not ip:port")))?;
    let port = port.parse().map_err(|_| Error::Config(format!("{ENV_ADDR}={s:?} has a bad port")))?;
    Ok(Endpoint { ip: ip.to_string(), port })
}

/// Fills a missing address and token from the environment.
fn env_fallback(addr: &mut Option<Endpoint>, token: &mut Option<String>) -> Result<()> {
    if addr.is_none() {
        if let Ok(v) = std::env::var(ENV_ADDR) {
            *addr = Some(parse_endpoint(&v)?);
        }
    }
    if token.is_none() {
        if let Ok(v) = std::env::var(ENV_TOKEN) {
            *token = Some(v);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

fn default_rounds() -> u32 {
    10
}
fn default_epochs() -> usize {
    10
}
fn default_lr() -> f64 {
    0.05
}
fn default_batch() -> usize {
    32
}
fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_MS
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: default_rounds(),
            local_epochs: default_epochs(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            l2: 0.0,
            seed: 0,
            timeout_ms: default_timeout(),
        }
    }
}

impl TrainConfig {
    pub fn hp(&self) -> TrainHp {
        TrainHp {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
            l2: self.l2,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_fusion")]
    pub fusion_weight: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_fusion() -> f64 {
    DEFAULT_FUSION_WEIGHT
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { threshold: default_threshold(), fusion_weight: default_fusion() }
    }
}

fn default_mode() -> WrapperMode {
    WrapperMode::Stacking
}
fn default_translator() -> String {
    "MLP-16".into()
}
fn default_connect_timeout() -> u64 {
    5_000
}

/// Configuration of one `join`ing client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub client_id: String,
    pub clients: Vec<String>,
    /// Path of the serialized local model.
    #[serde(alias = "local model")]
    pub local_model: PathBuf,
    /// Processed CSV (`row_id,<features>,label`).
    pub train_dataset: PathBuf,
    #[serde(default = "default_translator")]
    pub translator: String,
    #[serde(default = "default_mode")]
    pub mode: WrapperMode,
    #[serde(default)]
    pub feature_mode: FeatureMode,
    /// Class names in id order; defaults to "0", "1", ...
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub client_addr: Option<Endpoint>,
    #[serde(default)]
    pub server_addr: Option<Endpoint>,
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default)]
    pub train_config: TrainConfig,
    #[serde(default)]
    pub infer_config: InferConfig,
    #[serde(default = "default_connect_timeout")]
    pub connect_timeout_ms: u64,
    /// Where the trained wrapper is saved.
    #[serde(default)]
    pub state_file: Option<PathBuf>,
}

impl ClientConfig {
    /// Reads the file, resolves relative paths against its directory and
    /// applies the environment fallbacks.
    pub fn load(path: &Path) -> Result<ClientConfig> {
        let mut cfg: ClientConfig = crate::io::read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.local_model = base.join(&cfg.local_model);
        cfg.train_dataset = base.join(&cfg.train_dataset);
        cfg.state_file = cfg.state_file.map(|p| base.join(p));
        env_fallback(&mut cfg.server_addr, &mut cfg.token)?;
        Ok(cfg)
    }

    pub fn server(&self) -> Result<&Endpoint> {
        self.server_addr
            .as_ref()
            .ok_or_else(|| Error::Config(format!("server_addr is not set (config or {ENV_ADDR})")))
    }

    pub fn token(&self) -> Result<&str> {
        self.token.as_deref().ok_or_else(|| Error::Config(format!("token is not set (config or {ENV_TOKEN})")))
    }
}

/// Configuration of the coordinator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    /// Expected client ids.
    pub clients: Vec<String>,
    #[serde(default = "default_translator")]
    pub translator: String,
    /// Raw feature count of the client data.
    pub in_dim: usize,
    pub n_classes: usize,
    #[serde(default = "default_mode")]
    pub mode: WrapperMode,
    #[serde(default)]
    pub feature_mode: FeatureMode,
    #[serde(default)]
    pub server_addr: Option<Endpoint>,
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default)]
    pub train_config: TrainConfig,
    /// Directory for the round log.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ServerConfig {
    pub fn load(path: &Path) -> Result<ServerConfig> {
        let mut cfg: ServerConfig = crate::io::read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.out = cfg.out.map(|p| base.join(p));
        env_fallback(&mut cfg.server_addr, &mut cfg.token)?;
        Ok(cfg)
    }

    pub fn translator_spec(&self) -> Result<ModelSpec> {
        let in_dim = self.in_dim + self.feature_mode.width(self.n_classes);
        Ok(parse_arch(&self.translator)?.spec(in_dim, self.n_classes))
    }

    pub fn server(&self) -> Result<&Endpoint> {
        self.server_addr
            .as_ref()
            .ok_or_else(|| Error::Config(format!("server_addr is not set (config or {ENV_ADDR})")))
    }

    pub fn token(&self) -> Result<&str> {
        self.token.as_deref().ok_or_else(|| Error::Config(format!("token is not set (config or {ENV_TOKEN})")))
    }
}

fn default_alpha() -> f64 {
    0.5
}
fn default_test_fraction() -> f64 {
    0.1
}
fn default_surrogate_rows() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub n_clients: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub mode: PartitionMode,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShare {
    pub arch: String,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrapperSection {
    #[serde(default = "default_mode")]
    pub mode: WrapperMode,
    #[serde(default = "default_translator")]
    pub translator: String,
    #[serde(default)]
    pub feature_mode: FeatureMode,
}

impl Default for WrapperSection {
    fn default() -> Self {
        WrapperSection { mode: default_mode(), translator: default_translator(), feature_mode: FeatureMode::Probs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    /// Architecture trained from scratch by plain FedAvg.
    #[serde(default = "default_translator")]
    pub arch: String,
    #[serde(default)]
    pub rounds: Option<u32>,
    /// Wrapper output traced against the baseline.
    #[serde(default)]
    pub trace_output: TraceOutput,
}

/// The experiment description read by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Raw CSV; when absent the bank surrogate is generated.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<PathBuf>,
    #[serde(default = "default_surrogate_rows")]
    pub surrogate_rows: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub partition: PartitionConfig,
    pub models: Vec<ModelShare>,
    /// Local model pre-training.
    #[serde(default)]
    pub local_train: TrainConfig,
    #[serde(default)]
    pub wrapper: WrapperSection,
    /// Federation rounds and the translator's local phase.
    #[serde(default)]
    pub train_config: TrainConfig,
    #[serde(default)]
    pub infer_config: InferConfig,
    /// Also run FedAvg from scratch for the training-cost comparison.
    #[serde(default)]
    pub baseline: Option<BaselineSection>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig = crate::io::read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data = cfg.data.map(|p| base.join(p));
        cfg.schema = cfg.schema.map(|p| base.join(p));
        cfg.out = cfg.out.map(|p| base.join(p));
        Ok(cfg)
    }

    pub fn architecture_mix(&self) -> Result<Vec<(Arch, f64)>> {
        self.models.iter().map(|m| Ok((parse_arch(&m.arch)?, m.fraction))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.is_some() != self.schema.is_some() {
            return Err(Error::Config("data and schema must be given together".into()));
        }
        if let Some(p) = self.data.iter().chain(&self.schema).find(|p| !p.exists()) {
            return Err(Error::Config(format!("{} does not exist", p.display())));
        }
        self.architecture_mix()?;
        parse_arch(&self.wrapper.translator)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architecture_names() {
        assert_eq!(parse_arch("LR").unwrap(), Arch::Lr);
        assert_eq!(parse_arch("MLP-16").unwrap(), Arch::Mlp(16));
        assert_eq!(parse_arch("mlp24").unwrap(), Arch::Mlp(24));
        assert!(parse_arch("MLP-0").is_err());
        assert!(parse_arch("svm").is_err());
    }

    #[test]
    fn client_config_accepts_spaced_field_names() {
        let text = r#"
client_id = "0"
clients = ["1", "2"]
local_model = "m.fwm"
train_dataset = "c.csv"
translator = "LR"
token = "s"
[client_addr]
ip = "127.0.0.1"
port = 0
[server_addr]
ip = "127.0.0.1"
port = 7070
[train_config]
local_epochs = 3
[infer_config]
threshold = 0.4
"#;
        let cfg: ClientConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.clients, ["1", "2"]);
        assert_eq!(cfg.train_config.local_epochs, 3);
        assert_eq!(cfg.train_config.rounds, 10);
        assert_eq!(cfg.infer_config.threshold, 0.4);
        assert_eq!(cfg.server().unwrap().port, 7070);
    }

    #[test]
    fn endpoint_from_env_string() {
        assert_eq!(parse_endpoint("10.0.0.1:99").unwrap(), Endpoint { ip: "10.0.0.1".into(), port: 99 });
        assert!(parse_endpoint("nope").is_err());
    }

    #[test]
    fn server_translator_covers_stacked_width() {
        let cfg: ServerConfig = toml::from_str("clients=[\"0\"]\nin_dim=5\nn_classes=2\ntranslator=\"MLP-8\"").unwrap();
        assert_eq!(cfg.translator_spec().unwrap(), ModelSpec::mlp3(7, 8, 2));
    }
}
