//! Coordinator state machine and the driver that runs it over a [`Link`].
//!
//! [`ServerMachine`] is sans-IO: it consumes connection events and queues
//! [`Action`]s. Socket servers and the in-process simulator both feed it
//! through the [`Link`] trait, so they share one implementation of
//! registration, authorization, round gating and model relaying.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::federation::{
    run_round_loop, Clock, ClientUpdate, Evaluator, FederationError, FederationOutcome, FederationPlan,
    RoundTransport,
};
use crate::model::{ModelSpec, ParamBlock};
use crate::runtime::protocol::{encode, Message, MessageKind, Payload, ProtocolError};
use crate::wrapper::WrapperMode;

/// Sender id used on every server-originated message.
pub const SERVER_ID: &str = "server";

pub type ConnId = u64;

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send(ConnId, Message),
    Close(ConnId),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinkEvent {
    Connected(ConnId),
    Frame(ConnId, Result<Message, ProtocolError>),
    Disconnected(ConnId),
}

/// Byte transport under the coordinator.
pub trait Link {
    /// Next event, or `None` once `deadline_ms` passes without one.
    fn poll(&mut self, deadline_ms: u64) -> Result<Option<LinkEvent>, FederationError>;
    fn send(&mut self, conn: ConnId, frame: Vec<u8>);
    fn close(&mut self, conn: ConnId);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerPhase {
    AwaitingRoster,
    /// Roster complete, first round not yet opened.
    Ready,
    RoundOpen(u32),
    Aggregating(u32),
    /// Bagging: waiting for every participant's model.
    Sharing,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientPhase {
    Unregistered,
    Registered,
    InRound(u32),
    Finished,
}

#[derive(Debug, Clone)]
struct Slot {
    conn: ConnId,
    phase: ClientPhase,
    submitted: bool,
}

pub struct ServerMachine {
    mode: WrapperMode,
    token: String,
    roster: BTreeSet<String>,
    translator: ModelSpec,
    conns: BTreeMap<ConnId, Option<String>>,
    clients: BTreeMap<String, Slot>,
    phase: ServerPhase,
    shared: BTreeSet<String>,
    updates: VecDeque<ClientUpdate>,
    actions: Vec<Action>,
}

impl ServerMachine {
    pub fn new(mode: WrapperMode, token: impl Into<String>, plan: &FederationPlan) -> Self {
        ServerMachine {
            mode,
            token: token.into(),
            roster: plan.expected_clients.clone(),
            translator: plan.translator_spec,
            conns: BTreeMap::new(),
            clients: BTreeMap::new(),
            phase: ServerPhase::AwaitingRoster,
            shared: BTreeSet::new(),
            updates: VecDeque::new(),
            actions: Vec::new(),
        }
    }

    pub fn phase(&self) -> ServerPhase {
        self.phase
    }

    pub fn client_phase(&self, id: &str) -> ClientPhase {
        self.clients.get(id).map_or(ClientPhase::Unregistered, |s| s.phase)
    }

    pub fn registered(&self) -> Vec<String> {
        self.clients.keys().cloned().collect()
    }

    pub fn missing(&self) -> Vec<String> {
        self.roster.iter().filter(|c| !self.clients.contains_key(*c)).cloned().collect()
    }

    pub fn roster_complete(&self) -> bool {
        self.phase != ServerPhase::AwaitingRoster
    }

    pub fn shares_complete(&self) -> bool {
        self.mode == WrapperMode::Bagging && self.shared.len() == self.roster.len()
    }

    pub fn drain_actions(&mut self) -> Vec<Action> {
        core::mem::take(&mut self.actions)
    }

    pub fn take_update(&mut self) -> Option<ClientUpdate> {
        self.updates.pop_front()
    }

    pub fn handle(&mut self, event: LinkEvent) {
        match event {
            LinkEvent::Connected(conn) => {
                self.conns.insert(conn, None);
            }
            LinkEvent::Disconnected(conn) => self.on_disconnect(conn),
            LinkEvent::Frame(conn, Ok(msg)) => self.on_message(conn, msg),
            LinkEvent::Frame(conn, Err(e)) => self.reject(conn, 0, &format!("{e}")),
        }
    }

    /// Opens `round`, sending the global parameters to every client.
    pub fn begin_round(&mut self, round: u32, global: &[ParamBlock]) -> Result<(), FederationError> {
        let expected = match self.phase {
            ServerPhase::Ready => 1,
            ServerPhase::Aggregating(n) => n + 1,
            other => {
                return Err(FederationError::Transport(format!("cannot open round {round} in phase {other:?}")))
            }
        };
        if round != expected {
            return Err(FederationError::Transport(format!("round {round} opened out of order")));
        }
        self.phase = ServerPhase::RoundOpen(round);
        let ids: Vec<String> = self.clients.keys().cloned().collect();
        for id in ids {
            let slot = self.clients.get_mut(&id).expect("listed");
            slot.phase = ClientPhase::InRound(round);
            slot.submitted = false;
            let conn = slot.conn;
            self.push(conn, round, Payload::RoundStart { params: global.to_vec() });
        }
        Ok(())
    }

    /// Marks the current round as closed for new updates.
    pub fn close_round(&mut self) {
        if let ServerPhase::RoundOpen(n) = self.phase {
            self.phase = ServerPhase::Aggregating(n);
        }
    }

    pub fn finish(&mut self, global: Option<&[ParamBlock]>) {
        let round = match self.phase {
            ServerPhase::Aggregating(n) | ServerPhase::RoundOpen(n) => n,
            _ => 0,
        };
        self.phase = ServerPhase::Done;
        let ids: Vec<String> = self.clients.keys().cloned().collect();
        for id in ids {
            let slot = self.clients.get_mut(&id).expect("listed");
            slot.phase = ClientPhase::Finished;
            let conn = slot.conn;
            self.push(conn, round, Payload::Done { params: global.map(|g| g.to_vec()) });
        }
    }

    /// Broadcasts an error to every connection and closes them all.
    pub fn fail(&mut self, reason: &str) {
        if matches!(self.phase, ServerPhase::Done | ServerPhase::Failed) {
            return;
        }
        let round = match self.phase {
            ServerPhase::RoundOpen(n) | ServerPhase::Aggregating(n) => n,
            _ => 0,
        };
        self.phase = ServerPhase::Failed;
        let conns: Vec<ConnId> = self.conns.keys().copied().collect();
        for conn in conns {
            self.push(conn, round, Payload::Error { message: reason.to_string() });
            self.actions.push(Action::Close(conn));
        }
        self.conns.clear();
    }

    fn push(&mut self, conn: ConnId, round: u32, payload: Payload) {
        self.actions.push(Action::Send(conn, Message::new(round, SERVER_ID, self.token.clone(), payload)));
    }

    /// Error frame then close. The connection is forgotten, so anything it
    /// still sends is ignored.
    fn reject(&mut self, conn: ConnId, round: u32, reason: &str) {
        if self.conns.remove(&conn).is_none() {
            return;
        }
        self.push(conn, round, Payload::Error { message: reason.to_string() });
        self.actions.push(Action::Close(conn));
        self.forget_conn(conn);
    }

    fn on_disconnect(&mut self, conn: ConnId) {
        self.conns.remove(&conn);
        self.forget_conn(conn);
    }

    /// Before the roster completes a lost client may register again; after
    /// that its slot stays and the round barrier times out.
    fn forget_conn(&mut self, conn: ConnId) {
        if self.phase == ServerPhase::AwaitingRoster {
            self.clients.retain(|_, s| s.conn != conn);
        }
    }

    fn on_message(&mut self, conn: ConnId, msg: Message) {
        let Some(bound) = self.conns.get(&conn).cloned() else {
            return;
        };
        if msg.token != self.token {
            self.reject(conn, msg.round, "unauthorized");
            return;
        }
        if matches!(self.phase, ServerPhase::Done | ServerPhase::Failed) {
            self.reject(conn, msg.round, "federation is over");
            return;
        }
        match (&msg.payload, bound) {
            (Payload::Register { mode, translator }, None) => {
                let (mode, translator) = (*mode, *translator);
                self.on_register(conn, msg, mode, translator)
            }
            (Payload::Register { .. }, Some(_)) => self.reject(conn, msg.round, "already registered"),
            (_, None) => {
                let reason = format!("{} before registration", msg.kind());
                self.reject(conn, msg.round, &reason)
            }
            (_, Some(id)) if id != msg.sender => self.reject(conn, msg.round, "sender does not match registration"),
            (Payload::Update { .. }, Some(_)) => self.on_update(conn, msg),
            (Payload::ModelShare { .. }, Some(_)) => self.on_share(conn, msg),
            (Payload::Error { .. }, Some(_)) => self.on_disconnect(conn),
            (_, Some(_)) => {
                let reason = format!("unexpected {} from a client", msg.kind());
                self.reject(conn, msg.round, &reason)
            }
        }
    }

    fn on_register(&mut self, conn: ConnId, msg: Message, mode: WrapperMode, translator: Option<ModelSpec>) {
        if self.phase != ServerPhase::AwaitingRoster {
            self.reject(conn, 0, "registration is closed");
            return;
        }
        if !self.roster.contains(&msg.sender) {
            self.reject(conn, 0, &format!("unknown client id {:?}", msg.sender));
            return;
        }
        if self.clients.contains_key(&msg.sender) {
            self.reject(conn, 0, "duplicate id");
            return;
        }
        if mode != self.mode {
            self.reject(conn, 0, &format!("server runs {} but client requested {}", self.mode, mode));
            return;
        }
        if self.mode == WrapperMode::Stacking && translator != Some(self.translator) {
            self.reject(conn, 0, "heterogeneous translator: spec differs from the federation's");
            return;
        }
        self.conns.insert(conn, Some(msg.sender.clone()));
        self.clients.insert(msg.sender, Slot { conn, phase: ClientPhase::Registered, submitted: false });
        if self.clients.len() == self.roster.len() {
            self.phase = match self.mode {
                WrapperMode::Stacking => ServerPhase::Ready,
                WrapperMode::Bagging => ServerPhase::Sharing,
            };
            let roster: Vec<String> = self.roster.iter().cloned().collect();
            let conns: Vec<ConnId> = self.clients.values().map(|s| s.conn).collect();
            for c in conns {
                self.push(c, 0, Payload::RegisterAck { roster: roster.clone() });
            }
        }
    }

    fn on_update(&mut self, conn: ConnId, msg: Message) {
        let ServerPhase::RoundOpen(round) = self.phase else {
            self.reject(conn, msg.round, "no round is open");
            return;
        };
        if msg.round != round {
            self.reject(conn, msg.round, &format!("update for round {} while round {round} is open", msg.round));
            return;
        }
        let slot = self.clients.get_mut(&msg.sender).expect("bound connections have slots");
        if slot.submitted {
            self.reject(conn, round, "duplicate update");
            return;
        }
        let Payload::Update { params, n_samples, loss } = msg.payload else { unreachable!() };
        let layout = self.translator.layout();
        let shapes_ok = layout.len() == params.len()
            && layout.iter().zip(&params).all(|((name, shape), b)| *name == b.name && *shape == b.shape);
        if !shapes_ok || n_samples == 0 || params.iter().any(|b| b.values.iter().any(|v| !v.is_finite())) {
            self.reject(conn, round, "update does not match the translator spec");
            return;
        }
        slot.submitted = true;
        self.updates.push_back(ClientUpdate { client_id: msg.sender, round, params, n_samples, loss });
    }

    fn on_share(&mut self, conn: ConnId, msg: Message) {
        if self.phase != ServerPhase::Sharing {
            self.reject(conn, msg.round, "model sharing is not open");
            return;
        }
        if !self.shared.insert(msg.sender.clone()) {
            self.reject(conn, msg.round, "model already shared");
            return;
        }
        let Payload::ModelShare { model } = msg.payload else { unreachable!() };
        let targets: Vec<ConnId> =
            self.clients.iter().filter(|(id, _)| **id != msg.sender).map(|(_, s)| s.conn).collect();
        for target in targets {
            // Relayed frames keep the originating sender id.
            self.actions.push(Action::Send(
                target,
                Message::new(msg.round, msg.sender.clone(), self.token.clone(), Payload::ModelShare {
                    model: model.clone(),
                }),
            ));
        }
        self.push(conn, msg.round, Payload::ModelShareAck);
    }
}

/// [`RoundTransport`] over a [`ServerMachine`] and a [`Link`].
pub struct MachineTransport<'a, L: Link> {
    pub machine: ServerMachine,
    pub link: &'a mut L,
}

impl<L: Link> MachineTransport<'_, L> {
    pub fn flush(&mut self) {
        for action in self.machine.drain_actions() {
            match action {
                Action::Send(conn, msg) => self.link.send(conn, encode(&msg)),
                Action::Close(conn) => self.link.close(conn),
            }
        }
    }

    /// Feeds one event; `false` when the deadline passed instead.
    fn pump(&mut self, deadline_ms: u64) -> Result<bool, FederationError> {
        match self.link.poll(deadline_ms)? {
            Some(ev) => {
                self.machine.handle(ev);
                self.flush();
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn await_roster(&mut self, deadline_ms: u64) -> Result<(), FederationError> {
        while !self.machine.roster_complete() {
            if !self.pump(deadline_ms)? {
                return Err(FederationError::StartupTimeout { missing: self.machine.missing() });
            }
        }
        Ok(())
    }

    pub fn await_shares(&mut self, deadline_ms: u64) -> Result<(), FederationError> {
        while !self.machine.shares_complete() {
            if !self.pump(deadline_ms)? {
                let missing = self
                    .machine
                    .registered()
                    .into_iter()
                    .filter(|id| !self.machine.shared.contains(id))
                    .collect();
                return Err(FederationError::RoundTimeout { round: 0, missing });
            }
        }
        Ok(())
    }

    pub fn fail(&mut self, reason: &str) {
        self.machine.fail(reason);
        self.flush();
    }
}

impl<L: Link> RoundTransport for MachineTransport<'_, L> {
    fn broadcast_round(&mut self, round: u32, global: &[ParamBlock]) -> Result<(), FederationError> {
        // The loop only broadcasts once the previous round is aggregated.
        self.machine.close_round();
        self.machine.begin_round(round, global)?;
        self.flush();
        Ok(())
    }

    fn next_update(&mut self, _round: u32, deadline_ms: u64) -> Result<Option<ClientUpdate>, FederationError> {
        loop {
            if let Some(u) = self.machine.take_update() {
                return Ok(Some(u));
            }
            if !self.pump(deadline_ms)? {
                self.machine.close_round();
                return Ok(None);
            }
        }
    }

    fn finish(&mut self, global: &[ParamBlock]) -> Result<(), FederationError> {
        self.machine.close_round();
        self.machine.finish(Some(global));
        self.flush();
        Ok(())
    }
}

/// Everything a coordinator run needs besides the link.
pub struct CoordinatorSetup<'a> {
    pub plan: &'a FederationPlan,
    pub mode: WrapperMode,
    pub token: &'a str,
    pub initial: Vec<ParamBlock>,
}

/// Registration, then the round loop (stacking) or the model exchange
/// (bagging), then `Done`. Any failure is broadcast as an `Error` frame.
pub fn coordinate<L: Link>(
    link: &mut L,
    setup: CoordinatorSetup<'_>,
    clock: &dyn Clock,
    evaluator: &mut Evaluator<'_>,
) -> Result<FederationOutcome, FederationError> {
    setup.plan.validate()?;
    let machine = ServerMachine::new(setup.mode, setup.token, setup.plan);
    let mut transport = MachineTransport { machine, link };
    let result = (|| {
        transport.await_roster(clock.now_ms().saturating_add(setup.plan.timeout_ms))?;
        match setup.mode {
            WrapperMode::Stacking => run_round_loop(setup.plan, setup.initial, &mut transport, clock, evaluator),
            WrapperMode::Bagging => {
                transport.await_shares(clock.now_ms().saturating_add(setup.plan.timeout_ms))?;
                transport.machine.finish(None);
                transport.flush();
                Ok(FederationOutcome { global: Vec::new(), log: Vec::new() })
            }
        }
    })();
    if let Err(e) = &result {
        transport.fail(&format!("{e}"));
    }
    result
}

impl core::fmt::Debug for ServerMachine {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("ServerMachine")
            .field("mode", &self.mode)
            .field("phase", &self.phase)
            .field("registered", &self.clients.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Kinds a server ever accepts from clients.
pub const CLIENT_KINDS: [MessageKind; 4] =
    [MessageKind::Register, MessageKind::Update, MessageKind::ModelShare, MessageKind::Error];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, TrainHp};
    use alloc::vec;

    fn plan(ids: &[&str]) -> FederationPlan {
        FederationPlan {
            rounds: 2,
            expected_clients: ids.iter().map(|s| s.to_string()).collect(),
            translator_spec: ModelSpec::logistic(3, 2),
            hp: TrainHp::default(),
            timeout_ms: 1000,
        }
    }

    fn reg(id: &str, token: &str) -> Message {
        Message::new(0, id, token, Payload::Register {
            mode: WrapperMode::Stacking,
            translator: Some(ModelSpec::logistic(3, 2)),
        })
    }

    fn errors_to(actions: &[Action], conn: ConnId) -> Vec<String> {
        actions
            .iter()
            .filter_map(|a| match a {
                Action::Send(c, Message { payload: Payload::Error { message }, .. }) if *c == conn => {
                    Some(message.clone())
                }
                _ => None,
            })
            .collect()
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let mut m = ServerMachine::new(WrapperMode::Stacking, "t", &plan(&["0", "1"]));
        m.handle(LinkEvent::Connected(1));
        m.handle(LinkEvent::Connected(2));
        m.handle(LinkEvent::Frame(1, Ok(reg("0", "t"))));
        m.handle(LinkEvent::Frame(2, Ok(reg("0", "t"))));
        let actions = m.drain_actions();
        assert_eq!(errors_to(&actions, 2), vec!["duplicate id".to_string()]);
        assert!(actions.contains(&Action::Close(2)));
        assert_eq!(m.client_phase("0"), ClientPhase::Registered);
    }

    #[test]
    fn wrong_token_never_registers() {
        let mut m = ServerMachine::new(WrapperMode::Stacking, "t", &plan(&["0"]));
        m.handle(LinkEvent::Connected(1));
        m.handle(LinkEvent::Frame(1, Ok(reg("0", "nope"))));
        assert_eq!(errors_to(&m.drain_actions(), 1), vec!["unauthorized".to_string()]);
        assert_eq!(m.client_phase("0"), ClientPhase::Unregistered);
    }

    #[test]
    fn mismatched_translator_is_rejected() {
        let mut m = ServerMachine::new(WrapperMode::Stacking, "t", &plan(&["0"]));
        m.handle(LinkEvent::Connected(1));
        let mut msg = reg("0", "t");
        msg.payload = Payload::Register { mode: WrapperMode::Stacking, translator: Some(ModelSpec::mlp3(3, 16, 2)) };
        m.handle(LinkEvent::Frame(1, Ok(msg)));
        assert!(errors_to(&m.drain_actions(), 1)[0].contains("heterogeneous"));
    }

    #[test]
    fn update_gating_follows_rounds() {
        let mut m = ServerMachine::new(WrapperMode::Stacking, "t", &plan(&["0"]));
        m.handle(LinkEvent::Connected(1));
        m.handle(LinkEvent::Frame(1, Ok(reg("0", "t"))));
        assert_eq!(m.phase(), ServerPhase::Ready);
        let acks = m.drain_actions();
        assert!(matches!(&acks[0], Action::Send(1, Message { payload: Payload::RegisterAck { .. }, .. })));

        let params = Model::init(ModelSpec::logistic(3, 2), 0).unwrap().params;
        m.begin_round(1, &params).unwrap();
        assert_eq!(m.client_phase("0"), ClientPhase::InRound(1));
        m.drain_actions();
        let update =
            |round| Message::new(round, "0", "t", Payload::Update { params: params.clone(), n_samples: 4, loss: 0.1 });
        m.handle(LinkEvent::Frame(1, Ok(update(1))));
        assert!(m.drain_actions().is_empty());
        assert_eq!(m.take_update().unwrap().round, 1);
        // A second update in the same round is a protocol violation.
        m.handle(LinkEvent::Frame(1, Ok(update(1))));
        assert_eq!(errors_to(&m.drain_actions(), 1), vec!["duplicate update".to_string()]);
    }

    #[test]
    fn round_cannot_skip_ahead() {
        let mut m = ServerMachine::new(WrapperMode::Stacking, "t", &plan(&["0"]));
        m.handle(LinkEvent::Connected(1));
        m.handle(LinkEvent::Frame(1, Ok(reg("0", "t"))));
        assert!(m.begin_round(2, &[]).is_err());
        m.begin_round(1, &[]).unwrap();
        assert!(m.begin_round(2, &[]).is_err(), "round 1 must be aggregated first");
        m.close_round();
        m.begin_round(2, &[]).unwrap();
    }

    #[test]
    fn model_shares_are_relayed_to_peers() {
        let mut p = plan(&["0", "1", "2"]);
        p.rounds = 1;
        let mut m = ServerMachine::new(WrapperMode::Bagging, "t", &p);
        for (conn, id) in [(10, "0"), (11, "1"), (12, "2")] {
            m.handle(LinkEvent::Connected(conn));
            m.handle(LinkEvent::Frame(conn, Ok(Message::new(0, id, "t", Payload::Register {
                mode: WrapperMode::Bagging,
                translator: None,
            }))));
        }
        assert_eq!(m.phase(), ServerPhase::Sharing);
        m.drain_actions();
        m.handle(LinkEvent::Frame(11, Ok(Message::new(0, "1", "t", Payload::ModelShare { model: vec![1, 2] }))));
        let actions = m.drain_actions();
        let relayed: Vec<ConnId> = actions
            .iter()
            .filter_map(|a| match a {
                Action::Send(c, msg) if msg.kind() == MessageKind::ModelShare && msg.sender == "1" => Some(*c),
                _ => None,
            })
            .collect();
        assert_eq!(relayed, vec![10, 12]);
        assert!(actions.iter().any(|a| matches!(a, Action::Send(11, msg) if msg.kind() == MessageKind::ModelShareAck)));
        assert!(!m.shares_complete());
    }

    #[test]
    fn unregistered_traffic_is_rejected() {
        let mut m = ServerMachine::new(WrapperMode::Stacking, "t", &plan(&["0"]));
        m.handle(LinkEvent::Connected(5));
        m.handle(LinkEvent::Frame(5, Ok(Message::new(1, "0", "t", Payload::Done { params: None }))));
        let actions = m.drain_actions();
        assert_eq!(errors_to(&actions, 5).len(), 1);
        // Closed connections are ignored afterwards.
        m.handle(LinkEvent::Frame(5, Ok(reg("0", "t"))));
        assert!(m.drain_actions().is_empty());
    }
}
