//! Ensemble wrappers that federate an existing local classifier.
//!
//! The stacking wrapper trains a translator model, homogeneous across all
//! clients, on the raw input extended with the local model's features. The
//! bagging wrapper collects every participant's model and learns a
//! non-negative linear re-weighting of their probability outputs. At
//! inference the aggregator blends the federated output with the local
//! model's own output, so a fusion weight of zero reproduces the local
//! model exactly.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataError, Dataset};
use crate::math;
use crate::model::{Model, ModelError, ModelSpec, ParamBlock, TrainHp};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WrapperError {
    #[error("unsupported local model: {0}")]
    UnsupportedModel(String),
    #[error("federation error: {0}")]
    Federation(String),
    #[error("lifecycle error: {0}")]
    Lifecycle(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

/// The interface a pre-existing local model must offer.
pub trait Classifier: Send + Sync {
    fn in_dim(&self) -> usize;
    fn n_classes(&self) -> usize;
    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>, ModelError>;
    /// Internal representation for stacking; `None` for non-parametric models.
    fn feature_vec(&self, _x: &[f64]) -> Option<Result<Vec<f64>, ModelError>> {
        None
    }
    fn descriptor(&self) -> String;
    /// The shareable parametric model behind this classifier, if any.
    fn as_model(&self) -> Option<&Model> {
        None
    }
}

impl Classifier for Model {
    fn in_dim(&self) -> usize {
        self.spec.in_dim
    }

    fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        Model::predict_proba(self, x)
    }

    fn feature_vec(&self, x: &[f64]) -> Option<Result<Vec<f64>, ModelError>> {
        Some(self.forward(x).map(|r| r.features))
    }

    fn descriptor(&self) -> String {
        self.spec.descriptor()
    }

    fn as_model(&self) -> Option<&Model> {
        Some(self)
    }
}

/// Shared handle to a local model.
#[derive(Clone)]
pub struct LocalModelHandle(Arc<dyn Classifier>);

impl LocalModelHandle {
    pub fn new(model: impl Classifier + 'static) -> Self {
        LocalModelHandle(Arc::new(model))
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.0.predict_proba(x)
    }

    pub fn feature_vec(&self, x: &[f64]) -> Option<Result<Vec<f64>, ModelError>> {
        self.0.feature_vec(x)
    }

    pub fn in_dim(&self) -> usize {
        self.0.in_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.0.n_classes()
    }

    pub fn descriptor(&self) -> String {
        self.0.descriptor()
    }

    pub fn as_model(&self) -> Option<&Model> {
        self.0.as_model()
    }

    /// Decision of the bare local model under the wrapper's threshold rule.
    pub fn predict_label(&self, x: &[f64], threshold: f64) -> Result<usize, ModelError> {
        Ok(decide_label(&self.predict_proba(x)?, threshold))
    }
}

impl fmt::Debug for LocalModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("LocalModelHandle").field(&self.descriptor()).finish()
    }
}

impl From<Model> for LocalModelHandle {
    fn from(m: Model) -> Self {
        LocalModelHandle::new(m)
    }
}

/// Which local-model signal is appended to the raw input for stacking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// The local probability vector (always `n_classes` wide).
    Probs,
    /// The local feature vector, zero-padded or truncated to this width.
    HiddenPadded(usize),
}

impl Default for FeatureMode {
    fn default() -> Self {
        FeatureMode::Probs
    }
}

impl FeatureMode {
    pub fn width(&self, n_classes: usize) -> usize {
        match *self {
            FeatureMode::Probs => n_classes,
            FeatureMode::HiddenPadded(d) => d,
        }
    }
}

/// `ip:port` pair as written in configuration files.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Endpoint {
    pub ip: String,
    pub port: u16,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_FUSION_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct WrapperConfig {
    pub local_model: LocalModelHandle,
    pub train_dataset: Dataset,
    pub translator: ModelSpec,
    pub client_id: String,
    pub clients: Vec<String>,
    pub client_addr: Endpoint,
    pub server_addr: Endpoint,
    pub feature_mode: FeatureMode,
    pub threshold: f64,
    pub fusion_weight: f64,
    pub train: TrainHp,
}

impl WrapperConfig {
    /// Config with default addresses, feature mode, threshold and fusion
    /// weight; the translator spec is derived from `translator_hidden`
    /// (`None` for logistic regression).
    pub fn new(
        client_id: impl Into<String>,
        clients: Vec<String>,
        local_model: LocalModelHandle,
        train_dataset: Dataset,
        translator_hidden: Option<usize>,
        train: TrainHp,
    ) -> WrapperConfig {
        let n_classes = train_dataset.n_classes();
        let in_dim = stack_in_dim(train_dataset.in_dim(), n_classes, FeatureMode::Probs);
        let translator = match translator_hidden {
            Some(h) => ModelSpec::mlp3(in_dim, h, n_classes),
            None => ModelSpec::logistic(in_dim, n_classes),
        };
        WrapperConfig {
            local_model,
            train_dataset,
            translator,
            client_id: client_id.into(),
            clients,
            client_addr: Endpoint::default(),
            server_addr: Endpoint::default(),
            feature_mode: FeatureMode::Probs,
            threshold: DEFAULT_THRESHOLD,
            fusion_weight: DEFAULT_FUSION_WEIGHT,
            train,
        }
    }

    pub fn stack_in_dim(&self) -> usize {
        stack_in_dim(self.train_dataset.in_dim(), self.train_dataset.n_classes(), self.feature_mode)
    }

    /// Every participant id, this client included, sorted.
    pub fn roster(&self) -> Vec<String> {
        let mut all = self.clients.clone();
        all.push(self.client_id.clone());
        all.sort();
        all
    }

    pub fn validate(&self) -> Result<(), WrapperError> {
        if self.client_id.is_empty() {
            return Err(WrapperError::Config("client_id is empty".into()));
        }
        if self.clients.contains(&self.client_id) {
            return Err(WrapperError::Config(format!("client_id {:?} also listed in clients", self.client_id)));
        }
        let mut peers = self.clients.clone();
        peers.sort();
        peers.dedup();
        if peers.len() != self.clients.len() {
            return Err(WrapperError::Config("clients contains duplicate ids".into()));
        }
        if self.translator.n_classes != self.train_dataset.n_classes() {
            return Err(WrapperError::Config(format!(
                "translator has {} classes, dataset has {}",
                self.translator.n_classes,
                self.train_dataset.n_classes()
            )));
        }
        if self.translator.in_dim != self.stack_in_dim() {
            return Err(WrapperError::Config(format!(
                "translator in_dim {} does not match the stacked input width {}",
                self.translator.in_dim,
                self.stack_in_dim()
            )));
        }
        self.translator.validate()?;
        if self.local_model.in_dim() != self.train_dataset.in_dim() {
            return Err(WrapperError::Config(format!(
                "local model expects {} features, dataset has {}",
                self.local_model.in_dim(),
                self.train_dataset.in_dim()
            )));
        }
        if self.local_model.n_classes() != self.train_dataset.n_classes() {
            return Err(WrapperError::Config("local model and dataset disagree on n_classes".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(WrapperError::Config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(WrapperError::Config(format!(
                "fusion_weight must lie in [0, 1], got {}",
                self.fusion_weight
            )));
        }
        self.train.validate()?;
        Ok(())
    }
}

pub fn stack_in_dim(raw_in_dim: usize, n_classes: usize, mode: FeatureMode) -> usize {
    raw_in_dim + mode.width(n_classes)
}

/// `x` followed by the local model's probabilities or padded features.
pub fn build_stacking_input(cfg: &WrapperConfig, x: &[f64]) -> Result<Vec<f64>, WrapperError> {
    stacking_input(&cfg.local_model, cfg.feature_mode, x)
}

fn stacking_input(local: &LocalModelHandle, mode: FeatureMode, x: &[f64]) -> Result<Vec<f64>, WrapperError> {
    if x.len() != local.in_dim() {
        return Err(WrapperError::Input(format!("expected {} features, got {}", local.in_dim(), x.len())));
    }
    let extra = match mode {
        FeatureMode::Probs => local.predict_proba(x)?,
        FeatureMode::HiddenPadded(d) => {
            let mut f = match local.feature_vec(x) {
                Some(f) => f?,
                None => {
                    return Err(WrapperError::UnsupportedModel(format!(
                        "{} exposes no feature vector; use the probability feature mode",
                        local.descriptor()
                    )))
                }
            };
            f.resize(d, 0.0);
            f
        }
    };
    let mut out = Vec::with_capacity(x.len() + extra.len());
    out.extend_from_slice(x);
    out.extend(extra);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackingState {
    pub translator: Model,
    pub rounds_completed: u32,
    pub stack_in_dim: usize,
}

impl StackingState {
    pub fn new(cfg: &WrapperConfig, seed: u64) -> Result<StackingState, WrapperError> {
        cfg.validate()?;
        Ok(StackingState { translator: Model::init(cfg.translator, seed)?, rounds_completed: 0, stack_in_dim: cfg.stack_in_dim() })
    }
}

/// Output of one local stacking phase.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRound {
    pub params: Vec<ParamBlock>,
    pub n_samples: usize,
    pub loss: f64,
}

/// Local side of the stacking wrapper. The stacked training set is built
/// once, since the local model never changes.
#[derive(Debug, Clone)]
pub struct StackingTrainer {
    stacked: Dataset,
    hp: TrainHp,
}

impl StackingTrainer {
    pub fn new(cfg: &WrapperConfig) -> Result<StackingTrainer, WrapperError> {
        cfg.validate()?;
        let names = (0..cfg.stack_in_dim()).map(|i| format!("s{i}")).collect();
        let stacked = cfg.train_dataset.map_features(names, |x| build_stacking_input(cfg, x))?;
        Ok(StackingTrainer { stacked, hp: cfg.train })
    }

    pub fn stacked_data(&self) -> &Dataset {
        &self.stacked
    }

    /// Loads `global`, trains locally for the configured epochs and returns
    /// the updated parameters with the local sample count.
    pub fn train_round(
        &self,
        state: &mut StackingState,
        global: &[ParamBlock],
        round: u32,
    ) -> Result<LocalRound, WrapperError> {
        state.translator.load_params(global).map_err(|_| {
            WrapperError::Federation(
                "global parameters do not match the local translator; translators must be homogeneous".into(),
            )
        })?;
        let hp = self.hp.with_seed(round_seed(self.hp.seed, round));
        let out = state.translator.sgd_train(&self.stacked, &hp)?;
        state.translator = out.model;
        state.rounds_completed = round;
        Ok(LocalRound { params: state.translator.params.clone(), n_samples: self.stacked.n_rows(), loss: out.final_loss })
    }
}

/// Per-round shuffle seed derived from the client's base seed.
pub fn round_seed(base: u64, round: u32) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stacking_predict(state: &StackingState, cfg: &WrapperConfig, x: &[f64]) -> Result<Vec<f64>, WrapperError> {
    let stacked = build_stacking_input(cfg, x)?;
    Ok(state.translator.predict_proba(&stacked)?)
}

/// Floor applied to fused class scores before normalization.
const SCORE_FLOOR: f64 = 1e-12;

/// Non-negative linear map from concatenated member probabilities
/// (`n_models * n_classes` wide) to class scores, normalized to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionLayer {
    pub n_models: usize,
    pub n_classes: usize,
    /// Row-major `[n_classes, n_models * n_classes]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FusionLayer {
    /// Block-wise `(1/M) I`, zero bias: the plain average of members.
    pub fn averaging(n_models: usize, n_classes: usize) -> FusionLayer {
        let width = n_models * n_classes;
        let mut weight = vec![0.0; n_classes * width];
        let share = 1.0 / n_models as f64;
        for c in 0..n_classes {
            for m in 0..n_models {
                weight[c * width + m * n_classes + c] = share;
            }
        }
        FusionLayer { n_models, n_classes, weight, bias: vec![0.0; n_classes] }
    }

    pub fn input_width(&self) -> usize {
        self.n_models * self.n_classes
    }

    fn scores(&self, stacked_probs: &[f64]) -> Vec<f64> {
        let mut s = math::affine(&self.weight, &self.bias, stacked_probs);
        for v in &mut s {
            if *v < SCORE_FLOOR {
                *v = SCORE_FLOOR;
            }
        }
        s
    }

    pub fn predict(&self, stacked_probs: &[f64]) -> Vec<f64> {
        let s = self.scores(stacked_probs);
        let total: f64 = s.iter().sum();
        s.into_iter().map(|v| v / total).collect()
    }

    /// Mean negative log-likelihood and its gradient on a batch of rows of
    /// the precomputed member-probability matrix.
    fn loss_and_grad(&self, inputs: &[f64], labels: &[usize], batch: &[usize]) -> (f64, Vec<f64>, Vec<f64>) {
        let width = self.input_width();
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.bias.len()];
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let p = &inputs[i * width..(i + 1) * width];
            let y = labels[i];
            let s = self.scores(p);
            let total: f64 = s.iter().sum();
            loss -= libm::log(s[y] / total);
            for (k, sk) in s.iter().enumerate() {
                let mut g = 1.0 / total;
                if k == y {
                    g -= 1.0 / sk;
                }
                g *= scale;
                gb[k] += g;
                for (w, pj) in gw[k * width..(k + 1) * width].iter_mut().zip(p) {
                    *w += g * pj;
                }
            }
        }
        (loss * scale, gw, gb)
    }
}

#[derive(Debug, Clone)]
pub struct BaggingState {
    /// Members in id order; the own model is included.
    pub peer_models: BTreeMap<String, LocalModelHandle>,
    pub fusion: FusionLayer,
}

impl BaggingState {
    /// Untrained state whose output is the unweighted member average.
    pub fn averaging(peer_models: BTreeMap<String, LocalModelHandle>) -> Result<BaggingState, WrapperError> {
        let first = peer_models
            .values()
            .next()
            .ok_or_else(|| WrapperError::Federation("bagging needs at least one model".into()))?;
        let (n_classes, in_dim) = (first.n_classes(), first.in_dim());
        for (id, m) in &peer_models {
            if m.n_classes() != n_classes {
                return Err(WrapperError::Federation(format!(
                    "model from {id:?} has {} classes, expected {n_classes}",
                    m.n_classes()
                )));
            }
            if m.in_dim() != in_dim {
                return Err(WrapperError::Federation(format!(
                    "model from {id:?} takes {} features, expected {in_dim}",
                    m.in_dim()
                )));
            }
        }
        let fusion = FusionLayer::averaging(peer_models.len(), n_classes);
        Ok(BaggingState { peer_models, fusion })
    }

    /// Member probabilities concatenated in id order.
    pub fn member_probs(&self, x: &[f64]) -> Result<Vec<f64>, WrapperError> {
        let mut out = Vec::with_capacity(self.fusion.input_width());
        for m in self.peer_models.values() {
            out.extend(m.predict_proba(x)?);
        }
        Ok(out)
    }
}

/// Fits the fusion layer on the local training set by projected SGD,
/// starting from the averaging map.
pub fn bagging_fit(
    cfg: &WrapperConfig,
    peer_models: BTreeMap<String, LocalModelHandle>,
) -> Result<BaggingState, WrapperError> {
    cfg.train.validate()?;
    let mut state = BaggingState::averaging(peer_models)?;
    if state.fusion.n_classes != cfg.train_dataset.n_classes() {
        return Err(WrapperError::Federation("peer models and local data disagree on n_classes".into()));
    }
    let data = &cfg.train_dataset;
    let mut inputs = Vec::with_capacity(data.n_rows() * state.fusion.input_width());
    for (x, _) in data.rows() {
        inputs.extend(state.member_probs(x)?);
    }
    let hp = cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..data.n_rows()).collect();
    for epoch in 0..hp.local_epochs {
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(hp.batch_size).enumerate() {
            let (loss, gw, gb) = state.fusion.loss_and_grad(&inputs, data.labels(), batch);
            if !loss.is_finite() {
                return Err(ModelError::Divergence { epoch, batch: b, loss }.into());
            }
            if hp.learning_rate == 0.0 {
                continue;
            }
            for (w, g) in state.fusion.weight.iter_mut().zip(&gw) {
                *w = (*w - hp.learning_rate * g).max(0.0);
            }
            for (w, g) in state.fusion.bias.iter_mut().zip(&gb) {
                *w = (*w - hp.learning_rate * g).max(0.0);
            }
        }
    }
    Ok(state)
}

pub fn bagging_predict(state: &BaggingState, x: &[f64]) -> Result<Vec<f64>, WrapperError> {
    Ok(state.fusion.predict(&state.member_probs(x)?))
}

/// `w * federated + (1 - w) * local`.
pub fn aggregate_outputs(local: &[f64], federated: &[f64], fusion_weight: f64) -> Result<Vec<f64>, WrapperError> {
    if local.len() != federated.len() {
        return Err(WrapperError::Input(format!(
            "local output has {} classes, federated output has {}",
            local.len(),
            federated.len()
        )));
    }
    if !(0.0..=1.0).contains(&fusion_weight) {
        return Err(WrapperError::Input(format!("fusion weight {fusion_weight} outside [0, 1]")));
    }
    Ok(local.iter().zip(federated).map(|(l, f)| fusion_weight * f + (1.0 - fusion_weight) * l).collect())
}

/// Binary: class 1 iff its probability reaches the threshold. Otherwise
/// argmax with the lowest index winning ties.
pub fn decide_label(probs: &[f64], threshold: f64) -> usize {
    if probs.len() == 2 {
        usize::from(probs[1] >= threshold)
    } else {
        math::argmax(probs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WrapperMode {
    Stacking,
    Bagging,
}

impl fmt::Display for WrapperMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WrapperMode::Stacking => "stacking",
            WrapperMode::Bagging => "bagging",
        })
    }
}

/// Federated part of a wrapper, tagged by lifecycle.
#[derive(Debug, Clone)]
pub enum WrapperState {
    Untrained,
    Stacking(StackingState),
    Bagging(BaggingState),
}

impl WrapperState {
    pub fn is_trained(&self) -> bool {
        !matches!(self, WrapperState::Untrained)
    }

    pub fn mode(&self) -> Option<WrapperMode> {
        match self {
            WrapperState::Untrained => None,
            WrapperState::Stacking(_) => Some(WrapperMode::Stacking),
            WrapperState::Bagging(_) => Some(WrapperMode::Bagging),
        }
    }
}

/// Output of the federated model alone.
pub fn federated_predict(cfg: &WrapperConfig, state: &WrapperState, x: &[f64]) -> Result<Vec<f64>, WrapperError> {
    match state {
        WrapperState::Untrained => Err(WrapperError::Lifecycle("wrapper has not been trained".into())),
        WrapperState::Stacking(s) => stacking_predict(s, cfg, x),
        WrapperState::Bagging(b) => bagging_predict(b, x),
    }
}

/// Fused probabilities and the decided label.
pub fn wrapper_infer(cfg: &WrapperConfig, state: &WrapperState, x: &[f64]) -> Result<(Vec<f64>, usize), WrapperError> {
    let federated = federated_predict(cfg, state, x)?;
    let local = cfg.local_model.predict_proba(x)?;
    let fused = aggregate_outputs(&local, &federated, cfg.fusion_weight)?;
    let label = decide_label(&fused, cfg.threshold);
    Ok((fused, label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;
    use alloc::string::ToString;

    fn zero_lr(in_dim: usize, n_classes: usize) -> Model {
        let mut m = Model::init(ModelSpec::logistic(in_dim, n_classes), 0).unwrap();
        for b in &mut m.params {
            b.values.iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }

    fn cfg_for(local: Model, data: Dataset, mode: FeatureMode) -> WrapperConfig {
        let mut cfg = WrapperConfig::new("0", vec!["1".into()], local.into(), data, Some(4), TrainHp::default());
        cfg.feature_mode = mode;
        cfg.translator.in_dim = cfg.stack_in_dim();
        cfg
    }

    fn toy_data(in_dim: usize) -> Dataset {
        let n = 8;
        let features = (0..n * in_dim).map(|i| (i % 7) as f64 * 0.1 - 0.3).collect();
        let labels = (0..n).map(|i| i % 2).collect();
        Dataset::new(features, in_dim, labels, 2).unwrap()
    }

    /// Classifier without a feature vector, standing in for a tree model.
    struct Stump;

    impl Classifier for Stump {
        fn in_dim(&self) -> usize {
            4
        }
        fn n_classes(&self) -> usize {
            2
        }
        fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
            Ok(if x[0] > 0.0 { vec![0.2, 0.8] } else { vec![0.9, 0.1] })
        }
        fn descriptor(&self) -> String {
            "stump".into()
        }
    }

    #[test]
    fn probs_mode_widths() {
        let cfg = cfg_for(zero_lr(4, 2), toy_data(4), FeatureMode::Probs);
        let s = build_stacking_input(&cfg, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s, vec![1.0, 2.0, 3.0, 4.0, 0.5, 0.5]);
    }

    #[test]
    fn hidden_padding_and_truncation() {
        let mlp18 = Model::init(ModelSpec::mlp3(4, 18, 2), 3).unwrap();
        let cfg = cfg_for(mlp18.clone(), toy_data(4), FeatureMode::HiddenPadded(16));
        let x = [0.1, 0.2, 0.3, 0.4];
        let s = build_stacking_input(&cfg, &x).unwrap();
        assert_eq!(s.len(), 20);
        assert_eq!(&s[4..], &mlp18.forward(&x).unwrap().features[..16]);

        let mlp16 = Model::init(ModelSpec::mlp3(4, 16, 2), 3).unwrap();
        let cfg = cfg_for(mlp16.clone(), toy_data(4), FeatureMode::HiddenPadded(16));
        assert_eq!(&build_stacking_input(&cfg, &x).unwrap()[4..], &mlp16.forward(&x).unwrap().features[..]);

        let lr = Model::init(ModelSpec::logistic(4, 2), 3).unwrap();
        let cfg = cfg_for(lr.clone(), toy_data(4), FeatureMode::HiddenPadded(16));
        let s = build_stacking_input(&cfg, &x).unwrap();
        assert_eq!(&s[4..6], &lr.forward(&x).unwrap().logits[..]);
        assert!(s[6..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_parametric_model_cannot_use_hidden_features() {
        let mut cfg = cfg_for(zero_lr(4, 2), toy_data(4), FeatureMode::HiddenPadded(8));
        cfg.local_model = LocalModelHandle::new(Stump);
        assert!(matches!(
            build_stacking_input(&cfg, &[1.0, 0.0, 0.0, 0.0]),
            Err(WrapperError::UnsupportedModel(_))
        ));
        cfg.feature_mode = FeatureMode::Probs;
        assert_eq!(build_stacking_input(&cfg, &[1.0, 0.0, 0.0, 0.0]).unwrap()[4..], [0.2, 0.8]);
    }

    #[test]
    fn client_may_not_list_itself() {
        let mut cfg = cfg_for(zero_lr(4, 2), toy_data(4), FeatureMode::Probs);
        cfg.clients.push("0".into());
        assert!(matches!(cfg.validate(), Err(WrapperError::Config(_))));
    }

    #[test]
    fn zero_learning_rate_round_returns_global() {
        let mut cfg = cfg_for(zero_lr(4, 2), toy_data(4), FeatureMode::Probs);
        cfg.train.learning_rate = 0.0;
        let trainer = StackingTrainer::new(&cfg).unwrap();
        let mut state = StackingState::new(&cfg, 1).unwrap();
        let global = Model::init(cfg.translator, 9).unwrap().params;
        let out = trainer.train_round(&mut state, &global, 1).unwrap();
        assert_eq!(out.params, global);
        assert_eq!(out.n_samples, 8);
    }

    #[test]
    fn heterogeneous_translator_is_rejected() {
        let cfg = cfg_for(zero_lr(4, 2), toy_data(4), FeatureMode::Probs);
        let trainer = StackingTrainer::new(&cfg).unwrap();
        let mut state = StackingState::new(&cfg, 1).unwrap();
        let other = Model::init(ModelSpec::mlp3(6, 5, 2), 0).unwrap().params;
        assert!(matches!(trainer.train_round(&mut state, &other, 1), Err(WrapperError::Federation(_))));
    }

    #[test]
    fn zero_translator_predicts_uniform() {
        let cfg = cfg_for(zero_lr(4, 2), toy_data(4), FeatureMode::Probs);
        let mut state = StackingState::new(&cfg, 1).unwrap();
        assert_eq!(state.translator.spec.kind, ModelKind::Mlp3);
        for b in &mut state.translator.params {
            b.values.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(stacking_predict(&state, &cfg, &[0.3, 0.1, -2.0, 5.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn aggregator_endpoints_and_midpoint() {
        let (l, f) = ([0.8, 0.2], [0.2, 0.8]);
        assert_eq!(aggregate_outputs(&l, &f, 0.0).unwrap(), l.to_vec());
        assert_eq!(aggregate_outputs(&l, &f, 1.0).unwrap(), f.to_vec());
        let mid = aggregate_outputs(&l, &f, 0.5).unwrap();
        assert!((mid[0] - 0.5).abs() < 1e-15 && (mid[1] - 0.5).abs() < 1e-15);
        assert!(aggregate_outputs(&l, &[1.0], 0.5).is_err());
    }

    #[test]
    fn threshold_and_argmax_rules() {
        assert_eq!(decide_label(&[0.5, 0.5], 0.5), 1);
        assert_eq!(decide_label(&[0.51, 0.49], 0.5), 0);
        assert_eq!(decide_label(&[0.3, 0.3, 0.4], 0.5), 2);
        assert_eq!(decide_label(&[0.4, 0.4, 0.2], 0.5), 0);
    }

    #[test]
    fn untrained_wrapper_refuses_inference() {
        let cfg = cfg_for(zero_lr(4, 2), toy_data(4), FeatureMode::Probs);
        assert!(matches!(
            wrapper_infer(&cfg, &WrapperState::Untrained, &[0.0; 4]),
            Err(WrapperError::Lifecycle(_))
        ));
    }

    #[test]
    fn single_member_bagging_is_identity() {
        let m = Model::init(ModelSpec::mlp3(4, 5, 3), 2).unwrap();
        let members: BTreeMap<String, LocalModelHandle> = [("0".to_string(), m.clone().into())].into();
        let state = BaggingState::averaging(members).unwrap();
        let x = [0.4, -0.2, 1.0, 0.0];
        let got = bagging_predict(&state, &x).unwrap();
        for (a, b) in got.iter().zip(m.predict_proba(&x).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bagging_rejects_class_mismatch() {
        let members: BTreeMap<String, LocalModelHandle> = [
            ("0".to_string(), Model::init(ModelSpec::logistic(4, 2), 0).unwrap().into()),
            ("1".to_string(), Model::init(ModelSpec::logistic(4, 3), 0).unwrap().into()),
        ]
        .into();
        assert!(matches!(BaggingState::averaging(members), Err(WrapperError::Federation(_))));
    }
}
