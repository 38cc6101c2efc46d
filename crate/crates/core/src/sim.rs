//! Deterministic in-process federation.
//!
//! [`SimLink`] carries encoded frames between one [`ServerMachine`] driver
//! and every [`ClientSession`] in memory. Clients are stepped in sorted-id
//! order whenever the server runs out of events, so a run is a pure
//! function of its inputs apart from the round log's elapsed times.
//!
//! [`ServerMachine`]: crate::runtime::server::ServerMachine

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{largest_remainder, DataError, Dataset, Partition};
use crate::federation::{Clock, FederationError, FederationPlan, RoundLogRow, DEFAULT_TIMEOUT_MS};
use crate::metrics::{confusion, metrics_from_confusion, ClientScores, MetricsReport, Scores, TaskKind};
use crate::model::{Model, ModelSpec, ParamBlock, TrainHp};
use crate::runtime::client::{ClientError, ClientRole, ClientSession, SessionOutput};
use crate::runtime::protocol::{decode, encode, FrameDecoder};
use crate::runtime::server::{coordinate, ConnId, CoordinatorSetup, Link, LinkEvent};
use crate::wrapper::{
    decide_label, federated_predict, round_seed, wrapper_infer, FeatureMode, LocalModelHandle, StackingState,
    WrapperConfig, WrapperError, WrapperMode, WrapperState, DEFAULT_FUSION_WEIGHT, DEFAULT_THRESHOLD,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error("client {id}: {error}")]
    Client { id: String, error: ClientError },
    #[error(transparent)]
    Wrapper(#[from] WrapperError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<crate::model::ModelError> for SimError {
    fn from(e: crate::model::ModelError) -> Self {
        SimError::Wrapper(e.into())
    }
}

impl From<crate::metrics::MetricsError> for SimError {
    fn from(e: crate::metrics::MetricsError) -> Self {
        SimError::Wrapper(e.into())
    }
}

/// Client ids are the partition indices in decimal.
pub fn client_id(index: usize) -> String {
    index.to_string()
}

/// Local architecture: logistic regression or an MLP of the given width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Lr,
    Mlp(usize),
}

impl Arch {
    pub fn spec(self, in_dim: usize, n_classes: usize) -> ModelSpec {
        match self {
            Arch::Lr => ModelSpec::logistic(in_dim, n_classes),
            Arch::Mlp(h) => ModelSpec::mlp3(in_dim, h, n_classes),
        }
    }
}

/// Expands `(arch, fraction)` shares into one architecture per client,
/// rounding counts by largest remainder and keeping the listed order.
pub fn assign_architectures(n_clients: usize, mix: &[(Arch, f64)]) -> Result<Vec<Arch>, WrapperError> {
    if mix.is_empty() || mix.iter().any(|(_, f)| !(*f > 0.0) || !f.is_finite()) {
        return Err(WrapperError::Config("architecture mix needs positive fractions".into()));
    }
    let total: f64 = mix.iter().map(|(_, f)| f).sum();
    if libm::fabs(total - 1.0) > 1e-9 {
        return Err(WrapperError::Config(format!("architecture fractions sum to {total}, not 1")));
    }
    let weights: Vec<f64> = mix.iter().map(|(_, f)| *f).collect();
    let counts = largest_remainder(&weights, n_clients);
    Ok(mix.iter().zip(counts).flat_map(|((a, _), c)| core::iter::repeat_n(*a, c)).collect())
}

/// Pre-trains each client's local model on its own data. Client `i` uses
/// the seed `round_seed(seed, i)` for both init and shuffling.
pub fn train_locals(partition: &Partition, archs: &[Arch], hp: &TrainHp, seed: u64) -> Result<Vec<Model>, SimError> {
    if archs.len() != partition.client_datasets.len() {
        return Err(WrapperError::Config(format!(
            "{} architectures for {} clients",
            archs.len(),
            partition.client_datasets.len()
        ))
        .into());
    }
    archs
        .iter()
        .zip(&partition.client_datasets)
        .enumerate()
        .map(|(i, (arch, data))| {
            let s = round_seed(seed, i as u32);
            let model = Model::init(arch.spec(data.in_dim(), data.n_classes()), s)?;
            Ok(model.sgd_train(data, &hp.with_seed(s))?.model)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mode: WrapperMode,
    pub rounds: u32,
    /// Translator hidden width; `None` for a logistic translator.
    pub translator_hidden: Option<usize>,
    pub feature_mode: FeatureMode,
    /// Local-phase hyperparameters of the translator or fusion layer.
    pub hp: TrainHp,
    pub fusion_weight: f64,
    pub threshold: f64,
    pub seed: u64,
    pub token: String,
    pub timeout_ms: u64,
    /// Evaluate test accuracy after every round for the round log.
    pub track_accuracy: bool,
    /// Which wrapper output the round log's accuracy is measured on.
    #[serde(default)]
    pub trace_output: TraceOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceOutput {
    /// The aggregator's fused output.
    #[default]
    Fused,
    /// The translator alone.
    Federated,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            mode: WrapperMode::Stacking,
            rounds: 10,
            translator_hidden: Some(16),
            feature_mode: FeatureMode::Probs,
            hp: TrainHp::default(),
            fusion_weight: DEFAULT_FUSION_WEIGHT,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            token: "fedwrap".into(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
            track_accuracy: false,
            trace_output: TraceOutput::Fused,
        }
    }
}

/// Wrapper configs for every client, as a live deployment would set them.
pub fn client_configs(
    partition: &Partition,
    locals: &[LocalModelHandle],
    cfg: &SimConfig,
) -> Result<Vec<WrapperConfig>, SimError> {
    let n = partition.client_datasets.len();
    if locals.len() != n {
        return Err(WrapperError::Config(format!("{} local models for {n} clients", locals.len())).into());
    }
    let ids: Vec<String> = (0..n).map(client_id).collect();
    let mut out = Vec::with_capacity(n);
    for (i, (local, data)) in locals.iter().zip(&partition.client_datasets).enumerate() {
        let peers = ids.iter().filter(|p| **p != ids[i]).cloned().collect();
        let hp = cfg.hp.with_seed(round_seed(cfg.seed ^ 0x5EED, i as u32));
        let mut wc = WrapperConfig::new(ids[i].clone(), peers, local.clone(), data.clone(), cfg.translator_hidden, hp);
        wc.feature_mode = cfg.feature_mode;
        wc.translator.in_dim = wc.stack_in_dim();
        wc.fusion_weight = cfg.fusion_weight;
        wc.threshold = cfg.threshold;
        wc.validate()?;
        out.push(wc);
    }
    Ok(out)
}

pub fn plan_for(translator: ModelSpec, n_clients: usize, cfg: &SimConfig) -> FederationPlan {
    FederationPlan {
        rounds: cfg.rounds,
        expected_clients: (0..n_clients).map(client_id).collect(),
        translator_spec: translator,
        hp: cfg.hp,
        timeout_ms: cfg.timeout_ms,
    }
}

/// Initial global translator parameters.
pub fn initial_global(translator: ModelSpec, seed: u64) -> Result<Vec<ParamBlock>, SimError> {
    Ok(Model::init(translator, seed)?.params)
}

/// In-memory [`Link`] hosting the client sessions.
#[derive(Debug)]
pub struct SimLink {
    sessions: Vec<ClientSession>,
    inbox: Vec<VecDeque<Vec<u8>>>,
    closed: Vec<bool>,
    decoders: Vec<FrameDecoder>,
    events: VecDeque<LinkEvent>,
}

impl SimLink {
    /// Connects every session and queues its registration.
    pub fn new(mut sessions: Vec<ClientSession>) -> SimLink {
        sessions.sort_by(|a, b| a.id().cmp(b.id()));
        let n = sessions.len();
        let mut link = SimLink {
            inbox: (0..n).map(|_| VecDeque::new()).collect(),
            closed: alloc::vec![false; n],
            decoders: (0..n).map(|_| FrameDecoder::default()).collect(),
            events: VecDeque::new(),
            sessions,
        };
        for i in 0..n {
            link.events.push_back(LinkEvent::Connected(i as ConnId));
            let frame = encode(&link.sessions[i].register());
            link.to_server(i, &frame);
        }
        link
    }

    fn to_server(&mut self, i: usize, frame: &[u8]) {
        self.decoders[i].push(frame);
        while let Some(r) = self.decoders[i].next_message() {
            self.events.push_back(LinkEvent::Frame(i as ConnId, r));
        }
    }

    /// Lets each client, in id order, consume its inbox. `false` when no
    /// client had anything to do.
    pub fn step_clients(&mut self) -> bool {
        let mut progressed = false;
        for i in 0..self.sessions.len() {
            while let Some(frame) = self.inbox[i].pop_front() {
                progressed = true;
                let replies = match decode(&frame) {
                    Ok(msg) => self.sessions[i].handle(msg),
                    Err(e) => {
                        self.sessions[i].connection_lost(&e.to_string());
                        Vec::new()
                    }
                };
                for r in replies {
                    let bytes = encode(&r);
                    self.to_server(i, &bytes);
                }
            }
            if self.closed[i] && !self.sessions[i].is_done() {
                self.sessions[i].connection_lost("closed by server");
                progressed = true;
            }
            if !self.closed[i] && self.sessions[i].is_done() && self.sessions[i].failed() {
                self.closed[i] = true;
                self.events.push_back(LinkEvent::Disconnected(i as ConnId));
                progressed = true;
            }
        }
        progressed
    }

    /// Delivers everything still in flight to the clients.
    pub fn settle(&mut self) {
        while self.step_clients() {}
    }

    pub fn into_sessions(self) -> Vec<ClientSession> {
        self.sessions
    }
}

impl Link for SimLink {
    fn poll(&mut self, _deadline_ms: u64) -> Result<Option<LinkEvent>, FederationError> {
        loop {
            if let Some(ev) = self.events.pop_front() {
                return Ok(Some(ev));
            }
            // Nothing left anywhere means nobody will ever answer; treat as
            // the deadline passing.
            if !self.step_clients() {
                return Ok(None);
            }
        }
    }

    fn send(&mut self, conn: ConnId, frame: Vec<u8>) {
        let i = conn as usize;
        if i < self.inbox.len() && !self.closed[i] {
            self.inbox[i].push_back(frame);
        }
    }

    fn close(&mut self, conn: ConnId) {
        if let Some(c) = self.closed.get_mut(conn as usize) {
            *c = true;
        }
    }
}

pub fn task_for(n_classes: usize) -> TaskKind {
    if n_classes == 2 {
        TaskKind::BinaryPositive
    } else {
        TaskKind::MacroMulticlass
    }
}

/// Local, fused-wrapper and federated-only scores on the shared test set.
pub fn evaluate_client(cfg: &WrapperConfig, state: &WrapperState, test: &Dataset) -> Result<ClientScores, SimError> {
    let task = task_for(test.n_classes());
    let score = |predict: &mut dyn FnMut(&[f64]) -> Result<usize, SimError>| -> Result<Scores, SimError> {
        let cm = confusion(predict, test)?;
        Ok(metrics_from_confusion(&cm, task)?)
    };
    let local = score(&mut |x| Ok(cfg.local_model.predict_label(x, cfg.threshold)?))?;
    let wrapper = score(&mut |x| Ok(wrapper_infer(cfg, state, x)?.1))?;
    let federated = score(&mut |x| Ok(decide_label(&federated_predict(cfg, state, x)?, cfg.threshold)))?;
    Ok(ClientScores { client_id: cfg.client_id.clone(), descriptor: cfg.local_model.descriptor(), local, wrapper, federated })
}

/// Accuracy of `predict` on `test`.
pub fn accuracy_of(mut predict: impl FnMut(&[f64]) -> Result<usize, SimError>, test: &Dataset) -> Result<f64, SimError> {
    let cm = confusion(&mut predict, test)?;
    Ok(cm.trace() as f64 / cm.total() as f64)
}

#[derive(Debug, Clone)]
pub struct SimClient {
    pub config: WrapperConfig,
    pub state: WrapperState,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub clients: Vec<SimClient>,
    pub report: MetricsReport,
    pub log: Vec<RoundLogRow>,
    /// Final global translator parameters; empty in bagging mode.
    pub global: Vec<ParamBlock>,
}

/// Runs the full wrapper federation in process and scores every client.
pub fn simulate(
    partition: &Partition,
    locals: &[LocalModelHandle],
    cfg: &SimConfig,
    clock: &dyn Clock,
) -> Result<SimOutcome, SimError> {
    let configs = client_configs(partition, locals, cfg)?;
    let translator = configs.first().ok_or_else(|| WrapperError::Config("no clients".into()))?.translator;
    let mut sessions = Vec::with_capacity(configs.len());
    for wc in &configs {
        let role = match cfg.mode {
            WrapperMode::Stacking => ClientRole::stacking(wc.clone())?,
            WrapperMode::Bagging => ClientRole::bagging(wc.clone())?,
        };
        sessions.push(ClientSession::new(wc.client_id.clone(), cfg.token.clone(), role));
    }
    let plan = plan_for(translator, configs.len(), cfg);
    let initial = match cfg.mode {
        WrapperMode::Stacking => initial_global(translator, cfg.seed)?,
        WrapperMode::Bagging => Vec::new(),
    };
    let test = &partition.test_set;
    let mut evaluator = |round: u32, global: &[ParamBlock]| -> Option<f64> {
        if !cfg.track_accuracy {
            return None;
        }
        mean_stacking_accuracy(&configs, global, round, test, cfg.trace_output).ok()
    };
    let mut link = SimLink::new(sessions);
    let setup = CoordinatorSetup { plan: &plan, mode: cfg.mode, token: &cfg.token, initial };
    let outcome = coordinate(&mut link, setup, clock, &mut evaluator)?;
    link.settle();

    let mut clients = Vec::with_capacity(configs.len());
    for (session, config) in link.into_sessions().into_iter().zip(configs) {
        let id = session.id().to_string();
        let state = match session.outcome() {
            Ok(SessionOutput::Wrapper(state)) => state,
            Ok(SessionOutput::Plain(_)) => unreachable!("wrapper roles only"),
            Err(error) => return Err(SimError::Client { id, error }),
        };
        clients.push(SimClient { config, state });
    }
    let per_client =
        clients.iter().map(|c| evaluate_client(&c.config, &c.state, test)).collect::<Result<Vec<_>, _>>()?;
    Ok(SimOutcome { clients, report: MetricsReport::from_clients(per_client), log: outcome.log, global: outcome.global })
}

/// Mean over clients of the wrapper accuracy with `global` loaded into
/// each translator.
pub fn mean_stacking_accuracy(
    configs: &[WrapperConfig],
    global: &[ParamBlock],
    round: u32,
    test: &Dataset,
    output: TraceOutput,
) -> Result<f64, SimError> {
    let mut total = 0.0;
    for wc in configs {
        let translator = Model::from_params(wc.translator, global.to_vec(), 0)?;
        let state = WrapperState::Stacking(StackingState { translator, rounds_completed: round, stack_in_dim: wc.stack_in_dim() });
        total += match output {
            TraceOutput::Fused => accuracy_of(|x| Ok(wrapper_infer(wc, &state, x)?.1), test)?,
            TraceOutput::Federated => {
                accuracy_of(|x| Ok(decide_label(&federated_predict(wc, &state, x)?, wc.threshold)), test)?
            }
        };
    }
    Ok(total / configs.len() as f64)
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub model: Model,
    pub log: Vec<RoundLogRow>,
}

/// Plain FedAvg of one `spec` model trained from scratch on raw features,
/// over the same protocol and transport as the wrapper.
pub fn fedavg_from_scratch(
    partition: &Partition,
    spec: ModelSpec,
    cfg: &SimConfig,
    clock: &dyn Clock,
) -> Result<BaselineOutcome, SimError> {
    let n = partition.client_datasets.len();
    let mut sessions = Vec::with_capacity(n);
    for (i, data) in partition.client_datasets.iter().enumerate() {
        let hp = cfg.hp.with_seed(round_seed(cfg.seed ^ 0x5EED, i as u32));
        sessions.push(ClientSession::new(client_id(i), cfg.token.clone(), ClientRole::plain(spec, data.clone(), hp)?));
    }
    let plan = plan_for(spec, n, cfg);
    let test = &partition.test_set;
    let threshold = cfg.threshold;
    let mut evaluator = |_: u32, global: &[ParamBlock]| -> Option<f64> {
        if !cfg.track_accuracy {
            return None;
        }
        let model = Model::from_params(spec, global.to_vec(), 0).ok()?;
        accuracy_of(|x| Ok(decide_label(&model.predict_proba(x)?, threshold)), test).ok()
    };
    let mut link = SimLink::new(sessions);
    let setup = CoordinatorSetup { plan: &plan, mode: WrapperMode::Stacking, token: &cfg.token, initial: initial_global(spec, cfg.seed)? };
    let outcome = coordinate(&mut link, setup, clock, &mut evaluator)?;
    link.settle();
    let model = Model::from_params(spec, outcome.global, cfg.seed)?;
    Ok(BaselineOutcome { model, log: outcome.log })
}
