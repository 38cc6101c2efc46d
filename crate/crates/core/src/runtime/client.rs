//! Client side of the protocol as a sans-IO session.
//!
//! A [`ClientSession`] turns server messages into replies and local
//! training steps. The socket agent and the simulator drive the same
//! session, so both see identical message handling.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::dataset::Dataset;
use crate::model::{Model, ModelSpec, ParamBlock, TrainHp};
use crate::runtime::protocol::{Message, Payload};
use crate::runtime::server::{ClientPhase, SERVER_ID};
use crate::wrapper::{
    bagging_fit, round_seed, BaggingState, LocalModelHandle, StackingState, StackingTrainer, WrapperConfig,
    WrapperError, WrapperMode, WrapperState,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClientError {
    /// Connection lost; the run may be retried.
    #[error("transport error in round {round}: {message}")]
    Transport { round: u32, message: String },
    /// The server sent something the session cannot accept.
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("server reported: {0}")]
    Server(String),
    #[error(transparent)]
    Wrapper(#[from] WrapperError),
}

impl ClientError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ClientError::Transport { .. })
    }
}

/// What the session trains.
#[derive(Debug, Clone)]
pub enum ClientRole {
    /// Translator over stacked inputs.
    Stacking { cfg: WrapperConfig, trainer: StackingTrainer, state: StackingState },
    /// Bagging member: shares its local model and fuses everyone's.
    Bagging { cfg: WrapperConfig, peers: BTreeMap<String, LocalModelHandle> },
    /// Ordinary FedAvg participant training one model on raw features.
    Plain { model: Model, data: Dataset, hp: TrainHp },
}

impl ClientRole {
    pub fn stacking(cfg: WrapperConfig) -> Result<ClientRole, WrapperError> {
        let trainer = StackingTrainer::new(&cfg)?;
        let state = StackingState::new(&cfg, cfg.train.seed)?;
        Ok(ClientRole::Stacking { cfg, trainer, state })
    }

    pub fn bagging(cfg: WrapperConfig) -> Result<ClientRole, WrapperError> {
        cfg.validate()?;
        if cfg.local_model.as_model().is_none() {
            return Err(WrapperError::UnsupportedModel(format!(
                "{} cannot be serialized for sharing",
                cfg.local_model.descriptor()
            )));
        }
        let mut peers = BTreeMap::new();
        peers.insert(cfg.client_id.clone(), cfg.local_model.clone());
        Ok(ClientRole::Bagging { cfg, peers })
    }

    pub fn plain(spec: ModelSpec, data: Dataset, hp: TrainHp) -> Result<ClientRole, WrapperError> {
        hp.validate()?;
        Ok(ClientRole::Plain { model: Model::init(spec, hp.seed)?, data, hp })
    }

    fn mode(&self) -> WrapperMode {
        match self {
            ClientRole::Bagging { .. } => WrapperMode::Bagging,
            _ => WrapperMode::Stacking,
        }
    }

    fn translator(&self) -> Option<ModelSpec> {
        match self {
            ClientRole::Stacking { cfg, .. } => Some(cfg.translator),
            ClientRole::Plain { model, .. } => Some(model.spec),
            ClientRole::Bagging { .. } => None,
        }
    }
}

/// Result of a finished session.
#[derive(Debug, Clone)]
pub enum SessionOutput {
    Wrapper(WrapperState),
    Plain(Model),
}

#[derive(Debug)]
pub struct ClientSession {
    id: String,
    token: String,
    phase: ClientPhase,
    role: ClientRole,
    roster: Vec<String>,
    failure: Option<ClientError>,
    output: Option<SessionOutput>,
}

impl ClientSession {
    pub fn new(id: impl Into<String>, token: impl Into<String>, role: ClientRole) -> Self {
        ClientSession {
            id: id.into(),
            token: token.into(),
            phase: ClientPhase::Unregistered,
            role,
            roster: Vec::new(),
            failure: None,
            output: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn phase(&self) -> ClientPhase {
        self.phase
    }

    pub fn roster(&self) -> &[String] {
        &self.roster
    }

    pub fn is_done(&self) -> bool {
        self.output.is_some() || self.failure.is_some()
    }

    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn register(&self) -> Message {
        self.msg(0, Payload::Register { mode: self.role.mode(), translator: self.role.translator() })
    }

    fn msg(&self, round: u32, payload: Payload) -> Message {
        Message::new(round, self.id.clone(), self.token.clone(), payload)
    }

    fn current_round(&self) -> u32 {
        match self.phase {
            ClientPhase::InRound(n) => n,
            _ => 0,
        }
    }

    /// The connection dropped before the session finished.
    pub fn connection_lost(&mut self, detail: &str) {
        if self.is_done() {
            return;
        }
        let round = self.current_round();
        self.fail(ClientError::Transport { round, message: format!("connection lost during round {round}: {detail}") });
    }

    fn fail(&mut self, e: ClientError) {
        if self.failure.is_none() {
            self.failure = Some(e);
        }
    }

    /// Consumes one server message, returning the replies to send. After a
    /// failure every further message is ignored.
    pub fn handle(&mut self, msg: Message) -> Vec<Message> {
        if self.is_done() {
            return Vec::new();
        }
        match self.step(msg) {
            Ok(out) => out,
            Err(e) => {
                let reply = match &e {
                    ClientError::Protocol(m) => Some(self.msg(self.current_round(), Payload::Error { message: m.clone() })),
                    _ => None,
                };
                self.fail(e);
                reply.into_iter().collect()
            }
        }
    }

    fn step(&mut self, msg: Message) -> Result<Vec<Message>, ClientError> {
        if msg.token != self.token {
            return Err(ClientError::Protocol("message carries the wrong token".into()));
        }
        let relayed_share = matches!(msg.payload, Payload::ModelShare { .. });
        if !relayed_share && msg.sender != SERVER_ID {
            return Err(ClientError::Protocol(format!("{} from {:?} instead of the server", msg.kind(), msg.sender)));
        }
        match (self.phase, msg.payload) {
            (_, Payload::Error { message }) => Err(ClientError::Server(message)),
            (ClientPhase::Unregistered, Payload::RegisterAck { roster }) => {
                if !roster.contains(&self.id) {
                    return Err(ClientError::Protocol("roster does not include this client".into()));
                }
                self.roster = roster;
                self.phase = ClientPhase::Registered;
                match &self.role {
                    ClientRole::Bagging { cfg, .. } => {
                        let bytes = cfg.local_model.as_model().expect("checked at construction").to_bytes();
                        Ok(alloc::vec![self.msg(0, Payload::ModelShare { model: bytes })])
                    }
                    _ => Ok(Vec::new()),
                }
            }
            (ClientPhase::Registered | ClientPhase::InRound(_), Payload::RoundStart { params }) => {
                let expected = self.current_round() + 1;
                if msg.round != expected {
                    return Err(ClientError::Protocol(format!(
                        "RoundStart({}) while expecting round {expected}",
                        msg.round
                    )));
                }
                self.phase = ClientPhase::InRound(expected);
                let (params, n_samples, loss) = self.train(&params, expected)?;
                Ok(alloc::vec![self.msg(expected, Payload::Update { params, n_samples, loss })])
            }
            (ClientPhase::Registered, Payload::ModelShare { model }) => {
                let ClientRole::Bagging { peers, cfg } = &mut self.role else {
                    return Err(ClientError::Protocol("model share sent to a stacking client".into()));
                };
                if msg.sender == cfg.client_id || !self.roster.contains(&msg.sender) {
                    return Err(ClientError::Protocol(format!("model share from unexpected sender {:?}", msg.sender)));
                }
                let model = Model::from_bytes(&model).map_err(|e| ClientError::Protocol(format!("bad shared model: {e}")))?;
                if peers.insert(msg.sender.clone(), model.into()).is_some() {
                    return Err(ClientError::Protocol(format!("second model from {:?}", msg.sender)));
                }
                Ok(Vec::new())
            }
            (ClientPhase::Registered, Payload::ModelShareAck) if self.role.mode() == WrapperMode::Bagging => {
                Ok(Vec::new())
            }
            (ClientPhase::Registered | ClientPhase::InRound(_), Payload::Done { params }) => {
                let last = self.current_round();
                self.phase = ClientPhase::Finished;
                self.output = Some(self.conclude(params, last)?);
                Ok(Vec::new())
            }
            (phase, payload) => Err(ClientError::Protocol(format!("unexpected {} in phase {phase:?}", payload.kind()))),
        }
    }

    fn train(&mut self, global: &[ParamBlock], round: u32) -> Result<(Vec<ParamBlock>, u64, f64), ClientError> {
        match &mut self.role {
            ClientRole::Stacking { trainer, state, .. } => {
                let out = trainer.train_round(state, global, round)?;
                Ok((out.params, out.n_samples as u64, out.loss))
            }
            ClientRole::Plain { model, data, hp } => {
                model.load_params(global).map_err(|_| {
                    WrapperError::Federation("global parameters do not match the local model".into())
                })?;
                let out = model.sgd_train(data, &hp.with_seed(round_seed(hp.seed, round))).map_err(WrapperError::from)?;
                *model = out.model;
                Ok((model.params.clone(), data.n_rows() as u64, out.final_loss))
            }
            ClientRole::Bagging { .. } => Err(ClientError::Protocol("round started in a bagging federation".into())),
        }
    }

    fn conclude(&mut self, params: Option<Vec<ParamBlock>>, round: u32) -> Result<SessionOutput, ClientError> {
        match &mut self.role {
            ClientRole::Stacking { state, .. } => {
                let params = params.ok_or_else(|| ClientError::Protocol("Done without final parameters".into()))?;
                state
                    .translator
                    .load_params(&params)
                    .map_err(|e| ClientError::Protocol(format!("final parameters: {e}")))?;
                state.rounds_completed = round;
                Ok(SessionOutput::Wrapper(WrapperState::Stacking(state.clone())))
            }
            ClientRole::Plain { model, .. } => {
                let params = params.ok_or_else(|| ClientError::Protocol("Done without final parameters".into()))?;
                model.load_params(&params).map_err(|e| ClientError::Protocol(format!("final parameters: {e}")))?;
                Ok(SessionOutput::Plain(model.clone()))
            }
            ClientRole::Bagging { cfg, peers } => {
                if peers.len() != self.roster.len() {
                    let missing: Vec<&String> = self.roster.iter().filter(|id| !peers.contains_key(*id)).collect();
                    return Err(ClientError::Protocol(format!("federation ended without models from {missing:?}")));
                }
                let state: BaggingState = bagging_fit(cfg, core::mem::take(peers))?;
                Ok(SessionOutput::Wrapper(WrapperState::Bagging(state)))
            }
        }
    }

    /// Final outcome. A failed or unfinished session yields the error; the
    /// caller's wrapper then stays untrained.
    pub fn outcome(self) -> Result<SessionOutput, ClientError> {
        if let Some(e) = self.failure {
            return Err(e);
        }
        let round = self.current_round();
        self.output.ok_or(ClientError::Transport { round, message: "session ended before Done".into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use alloc::string::ToString;
    use alloc::vec;

    fn data() -> Dataset {
        Dataset::new(vec![0.0, 1.0, 1.0, 0.0, 0.5, 0.5, 1.0, 1.0], 2, vec![0, 1, 0, 1], 2).unwrap()
    }

    fn server(round: u32, payload: Payload) -> Message {
        Message::new(round, SERVER_ID, "t", payload)
    }

    fn stacking_session(lr: f64) -> ClientSession {
        let local = Model::init(ModelSpec::logistic(2, 2), 1).unwrap();
        let hp = TrainHp { learning_rate: lr, ..TrainHp::default() };
        let cfg = WrapperConfig::new("0", vec![], local.into(), data(), Some(4), hp);
        ClientSession::new("0", "t", ClientRole::stacking(cfg).unwrap())
    }

    #[test]
    fn round_before_ack_is_a_violation() {
        let mut s = stacking_session(0.1);
        let out = s.handle(server(1, Payload::RoundStart { params: vec![] }));
        assert!(matches!(out[0].payload, Payload::Error { .. }));
        assert!(matches!(s.outcome(), Err(ClientError::Protocol(_))));
    }

    #[test]
    fn rounds_must_be_consecutive() {
        let mut s = stacking_session(0.1);
        s.handle(server(0, Payload::RegisterAck { roster: vec!["0".to_string()] }));
        assert_eq!(s.phase(), ClientPhase::Registered);
        s.handle(server(2, Payload::RoundStart { params: vec![] }));
        assert!(matches!(s.outcome(), Err(ClientError::Protocol(m)) if m.contains("RoundStart(2)")));
    }

    #[test]
    fn zero_step_keeps_translator() {
        let mut s = stacking_session(0.0);
        let global = Model::init(ModelSpec::mlp3(4, 4, 2), 9).unwrap().params;
        s.handle(server(0, Payload::RegisterAck { roster: vec!["0".to_string()] }));
        for round in 1..=3 {
            let out = s.handle(server(round, Payload::RoundStart { params: global.clone() }));
            match &out[0].payload {
                Payload::Update { params, n_samples, .. } => {
                    assert_eq!(params, &global);
                    assert_eq!(*n_samples, 4);
                }
                other => panic!("unexpected {other:?}"),
            }
        }
        s.handle(server(3, Payload::Done { params: Some(global.clone()) }));
        match s.outcome().unwrap() {
            SessionOutput::Wrapper(WrapperState::Stacking(st)) => {
                assert_eq!(st.translator.params, global);
                assert_eq!(st.rounds_completed, 3);
            }
            _ => panic!("expected a stacking state"),
        }
    }

    #[test]
    fn lost_connection_names_the_round() {
        let mut s = stacking_session(0.1);
        let global = Model::init(ModelSpec::mlp3(4, 4, 2), 9).unwrap().params;
        s.handle(server(0, Payload::RegisterAck { roster: vec!["0".to_string()] }));
        s.handle(server(1, Payload::RoundStart { params: global.clone() }));
        s.handle(server(2, Payload::RoundStart { params: global }));
        s.connection_lost("eof");
        let err = s.outcome().unwrap_err();
        assert!(err.is_retriable());
        assert!(err.to_string().contains("round 2"), "{err}");
    }

    #[test]
    fn wrong_token_from_server_is_rejected() {
        let mut s = stacking_session(0.1);
        s.handle(Message::new(0, SERVER_ID, "x", Payload::RegisterAck { roster: vec!["0".to_string()] }));
        assert_eq!(s.phase(), ClientPhase::Unregistered);
        assert!(s.outcome().is_err());
    }
}
