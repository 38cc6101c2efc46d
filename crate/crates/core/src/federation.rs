//! FedAvg aggregation and the round loop shared by live and simulated runs.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::model::{same_layout, ModelSpec, ParamBlock, TrainHp};

/// Default per-round (and registration) timeout.
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FederationError {
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("round {round} timed out waiting for {missing:?}")]
    RoundTimeout { round: u32, missing: Vec<String> },
    #[error("registration timed out waiting for {missing:?}")]
    StartupTimeout { missing: Vec<String> },
    #[error("invalid federation plan: {0}")]
    Plan(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("interrupted")]
    Interrupted,
    #[error("client failure: {0}")]
    Client(String),
}

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: String,
    pub round: u32,
    pub params: Vec<ParamBlock>,
    pub n_samples: u64,
    /// Final local training loss, used for the round log only.
    #[serde(default)]
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationPlan {
    pub rounds: u32,
    pub expected_clients: BTreeSet<String>,
    pub translator_spec: ModelSpec,
    pub hp: TrainHp,
    pub timeout_ms: u64,
}

impl FederationPlan {
    pub fn validate(&self) -> Result<(), FederationError> {
        if self.rounds == 0 {
            return Err(FederationError::Plan("rounds must be at least 1".into()));
        }
        if self.expected_clients.is_empty() {
            return Err(FederationError::Plan("no expected clients".into()));
        }
        if self.timeout_ms == 0 {
            return Err(FederationError::Plan("timeout_ms must be positive".into()));
        }
        self.translator_spec.validate().map_err(|e| FederationError::Plan(format!("{e}")))?;
        self.hp.validate().map_err(|e| FederationError::Plan(format!("{e}")))
    }
}

/// Sample-weighted mean of the updates' parameters. Updates are summed in
/// sorted client-id order so the result does not depend on arrival order.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<Vec<ParamBlock>, FederationError> {
    let first = updates.first().ok_or_else(|| FederationError::Aggregation("no updates to aggregate".into()))?;
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(FederationError::Aggregation(format!("duplicate update from {:?}", pair[0].client_id)));
        }
    }
    for u in &sorted {
        if u.round != first.round {
            return Err(FederationError::Aggregation(format!(
                "update from {:?} is for round {}, expected {}",
                u.client_id, u.round, first.round
            )));
        }
        if !same_layout(&u.params, &first.params) {
            return Err(FederationError::Aggregation(format!(
                "update from {:?} has a different parameter layout",
                u.client_id
            )));
        }
        if u.n_samples == 0 {
            return Err(FederationError::Aggregation(format!("update from {:?} has zero samples", u.client_id)));
        }
    }
    let total: u64 = sorted.iter().map(|u| u.n_samples).sum();
    let mut out: Vec<ParamBlock> =
        first.params.iter().map(|b| ParamBlock::zeros(&b.name, b.shape.clone())).collect();
    for u in sorted {
        let w = u.n_samples as f64 / total as f64;
        for (acc, block) in out.iter_mut().zip(&u.params) {
            for (a, v) in acc.values.iter_mut().zip(&block.values) {
                *a += w * v;
            }
        }
    }
    Ok(out)
}

/// Millisecond time source. Live runs use wall-clock time; tests and
/// deterministic simulations may use [`ManualClock`].
pub trait Clock {
    fn now_ms(&self) -> u64;
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(Cell<u64>);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        ManualClock(Cell::new(start_ms))
    }

    pub fn advance(&self, ms: u64) {
        self.0.set(self.0.get() + ms);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.get()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLogRow {
    pub round: u32,
    /// Training time since the loop started, evaluation time excluded.
    pub elapsed_ms: u64,
    pub mean_client_loss: f64,
    pub test_accuracy: Option<f64>,
    pub participants: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationOutcome {
    pub global: Vec<ParamBlock>,
    pub log: Vec<RoundLogRow>,
}

/// What the round loop needs from a transport.
pub trait RoundTransport {
    /// Sends the current global parameters to every client.
    fn broadcast_round(&mut self, round: u32, global: &[ParamBlock]) -> Result<(), FederationError>;
    /// Next update for `round`, or `None` once `deadline_ms` has passed.
    fn next_update(&mut self, round: u32, deadline_ms: u64) -> Result<Option<ClientUpdate>, FederationError>;
    /// Announces the final parameters and ends the federation.
    fn finish(&mut self, global: &[ParamBlock]) -> Result<(), FederationError>;
}

/// Per-round hook returning the test accuracy for the new global parameters.
pub type Evaluator<'a> = dyn FnMut(u32, &[ParamBlock]) -> Option<f64> + 'a;

/// Broadcast, collect every expected update (barrier with timeout),
/// aggregate, log; repeated `plan.rounds` times, then finish.
pub fn run_round_loop(
    plan: &FederationPlan,
    initial: Vec<ParamBlock>,
    transport: &mut dyn RoundTransport,
    clock: &dyn Clock,
    evaluator: &mut Evaluator<'_>,
) -> Result<FederationOutcome, FederationError> {
    plan.validate()?;
    let start = clock.now_ms();
    let mut eval_ms = 0u64;
    let mut global = initial;
    let mut log = Vec::with_capacity(plan.rounds as usize);
    for round in 1..=plan.rounds {
        transport.broadcast_round(round, &global)?;
        let deadline = clock.now_ms().saturating_add(plan.timeout_ms);
        let mut pending: BTreeMap<String, ClientUpdate> = BTreeMap::new();
        while pending.len() < plan.expected_clients.len() {
            match transport.next_update(round, deadline)? {
                Some(update) => {
                    if update.round != round {
                        return Err(FederationError::Aggregation(format!(
                            "update from {:?} is for round {}, loop is at round {}",
                            update.client_id, update.round, round
                        )));
                    }
                    if !plan.expected_clients.contains(&update.client_id) {
                        return Err(FederationError::Aggregation(format!(
                            "update from unexpected client {:?}",
                            update.client_id
                        )));
                    }
                    if pending.contains_key(&update.client_id) {
                        return Err(FederationError::Aggregation(format!(
                            "duplicate update from {:?}",
                            update.client_id
                        )));
                    }
                    pending.insert(update.client_id.clone(), update);
                }
                None => {
                    let missing =
                        plan.expected_clients.iter().filter(|c| !pending.contains_key(*c)).cloned().collect();
                    return Err(FederationError::RoundTimeout { round, missing });
                }
            }
        }
        let updates: Vec<ClientUpdate> = pending.into_values().collect();
        global = fedavg_aggregate(&updates)?;
        let elapsed_ms = clock.now_ms().saturating_sub(start).saturating_sub(eval_ms);
        let mean_client_loss = updates.iter().map(|u| u.loss).sum::<f64>() / updates.len() as f64;
        let eval_start = clock.now_ms();
        let test_accuracy = evaluator(round, &global);
        eval_ms += clock.now_ms().saturating_sub(eval_start);
        log.push(RoundLogRow {
            round,
            elapsed_ms,
            mean_client_loss,
            test_accuracy,
            participants: updates.into_iter().map(|u| u.client_id).collect(),
        });
    }
    transport.finish(&global)?;
    Ok(FederationOutcome { global, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn upd(id: &str, round: u32, v: Vec<f64>, n: u64) -> ClientUpdate {
        let params = vec![ParamBlock { name: "w".into(), shape: vec![v.len()], values: v }];
        ClientUpdate { client_id: id.into(), round, params, n_samples: n, loss: 0.0 }
    }

    #[test]
    fn weighted_mean_by_hand() {
        let out = fedavg_aggregate(&[upd("a", 1, vec![2.0], 1), upd("b", 1, vec![4.0], 3)]).unwrap();
        assert_eq!(out[0].values, vec![3.5]);
    }

    #[test]
    fn single_client_is_exact() {
        let u = upd("a", 1, vec![0.1, 1.0 / 3.0, -7.25], 17);
        assert_eq!(fedavg_aggregate(&[u.clone()]).unwrap(), u.params);
    }

    #[test]
    fn order_does_not_matter() {
        let a = upd("a", 2, vec![0.1, 0.7], 5);
        let b = upd("b", 2, vec![0.3, -0.2], 9);
        let c = upd("c", 2, vec![1.1, 0.05], 2);
        let x = fedavg_aggregate(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = fedavg_aggregate(&[c, a, b]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rejects_malformed_sets() {
        assert!(fedavg_aggregate(&[]).is_err());
        assert!(fedavg_aggregate(&[upd("a", 1, vec![1.0], 1), upd("a", 1, vec![1.0], 1)]).is_err());
        assert!(fedavg_aggregate(&[upd("a", 1, vec![1.0], 1), upd("b", 2, vec![1.0], 1)]).is_err());
        assert!(fedavg_aggregate(&[upd("a", 1, vec![1.0], 1), upd("b", 1, vec![1.0, 2.0], 1)]).is_err());
    }

    /// Transport whose clients echo the global parameters plus a constant.
    struct Echo {
        clients: Vec<(String, f64, u64)>,
        queue: Vec<ClientUpdate>,
        finished: Option<Vec<ParamBlock>>,
        silent: Option<String>,
    }

    impl RoundTransport for Echo {
        fn broadcast_round(&mut self, round: u32, global: &[ParamBlock]) -> Result<(), FederationError> {
            for (id, delta, n) in &self.clients {
                if self.silent.as_deref() == Some(id.as_str()) {
                    continue;
                }
                let mut params = global.to_vec();
                params[0].values.iter_mut().for_each(|v| *v += delta);
                self.queue.push(ClientUpdate { client_id: id.clone(), round, params, n_samples: *n, loss: 1.0 });
            }
            Ok(())
        }

        fn next_update(&mut self, _round: u32, _deadline: u64) -> Result<Option<ClientUpdate>, FederationError> {
            Ok(if self.queue.is_empty() { None } else { Some(self.queue.remove(0)) })
        }

        fn finish(&mut self, global: &[ParamBlock]) -> Result<(), FederationError> {
            self.finished = Some(global.to_vec());
            Ok(())
        }
    }

    fn plan(ids: &[&str], rounds: u32) -> FederationPlan {
        FederationPlan {
            rounds,
            expected_clients: ids.iter().map(|s| s.to_string()).collect(),
            translator_spec: ModelSpec::logistic(1, 2),
            hp: TrainHp::default(),
            timeout_ms: 100,
        }
    }

    #[test]
    fn loop_logs_every_round() {
        let mut t = Echo {
            clients: vec![("a".into(), 1.0, 1), ("b".into(), 3.0, 1), ("c".into(), 2.0, 2)],
            queue: vec![],
            finished: None,
            silent: None,
        };
        let clock = ManualClock::new(0);
        let init = vec![ParamBlock { name: "w".into(), shape: vec![1], values: vec![0.0] }];
        let out = run_round_loop(&plan(&["a", "b", "c"], 2), init, &mut t, &clock, &mut |_, _| None).unwrap();
        assert_eq!(out.log.len(), 2);
        assert!(out.log.iter().all(|r| r.participants.len() == 3));
        // Each round adds the weighted mean delta (1 + 3 + 2*2) / 4 = 2.
        assert_eq!(out.global[0].values, vec![4.0]);
        assert_eq!(t.finished, Some(out.global));
    }

    #[test]
    fn missing_client_times_out_by_name() {
        let mut t = Echo {
            clients: vec![("a".into(), 1.0, 1), ("b".into(), 1.0, 1)],
            queue: vec![],
            finished: None,
            silent: Some("b".into()),
        };
        let init = vec![ParamBlock { name: "w".into(), shape: vec![1], values: vec![0.0] }];
        let err = run_round_loop(&plan(&["a", "b"], 3), init, &mut t, &ManualClock::new(0), &mut |_, _| None)
            .unwrap_err();
        assert_eq!(err, FederationError::RoundTimeout { round: 1, missing: vec!["b".into()] });
    }
}
