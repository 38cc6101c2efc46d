//! Parametric classifiers with hand-derived gradients.
//!
//! Two architectures are supported: multinomial logistic regression and a
//! three-hidden-layer ReLU perceptron. Parameters are stored as flat,
//! row-major [`ParamBlock`]s so they can be averaged, shipped over the wire
//! and serialized without knowing the architecture.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::math;

/// Magic prefix of the model byte format.
pub const MODEL_MAGIC: &[u8; 4] = b"FWM1";
/// Current model byte format version.
pub const MODEL_FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numerical divergence at epoch {epoch}, batch {batch}: loss is {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("model decode failed: {0}")]
    Decode(String),
    #[error("unsupported model format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    LogisticRegression,
    Mlp3,
}

/// Architecture description. `hidden_dim` is ignored (and kept at zero) for
/// logistic regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub in_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    pub n_classes: usize,
}

impl ModelSpec {
    pub fn logistic(in_dim: usize, n_classes: usize) -> Self {
        ModelSpec { kind: ModelKind::LogisticRegression, in_dim, hidden_dim: 0, n_classes }
    }

    pub fn mlp3(in_dim: usize, hidden_dim: usize, n_classes: usize) -> Self {
        ModelSpec { kind: ModelKind::Mlp3, in_dim, hidden_dim, n_classes }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_dim == 0 {
            return Err(ModelError::Config("in_dim must be at least 1".into()));
        }
        if self.n_classes < 2 {
            return Err(ModelError::Config("n_classes must be at least 2".into()));
        }
        if self.kind == ModelKind::Mlp3 && self.hidden_dim == 0 {
            return Err(ModelError::Config("hidden_dim must be at least 1 for an MLP".into()));
        }
        Ok(())
    }

    /// Block names and shapes in storage order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (i, h, c) = (self.in_dim, self.hidden_dim, self.n_classes);
        match self.kind {
            ModelKind::LogisticRegression => vec![("weight", vec![c, i]), ("bias", vec![c])],
            ModelKind::Mlp3 => vec![
                ("hidden1.weight", vec![h, i]),
                ("hidden1.bias", vec![h]),
                ("hidden2.weight", vec![h, h]),
                ("hidden2.bias", vec![h]),
                ("hidden3.weight", vec![h, h]),
                ("hidden3.bias", vec![h]),
                ("out.weight", vec![c, h]),
                ("out.bias", vec![c]),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, shape)| shape.iter().product::<usize>()).sum()
    }

    /// Width of the vector returned as [`ForwardResult::features`].
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            ModelKind::LogisticRegression => self.n_classes,
            ModelKind::Mlp3 => self.hidden_dim,
        }
    }

    /// Short architecture label, e.g. `LR` or `MLP-16`.
    pub fn descriptor(&self) -> String {
        match self.kind {
            ModelKind::LogisticRegression => "LR".to_string(),
            ModelKind::Mlp3 => format!("MLP-{}", self.hidden_dim),
        }
    }
}

/// A named, row-major tensor of parameters. Matrices have shape
/// `[rows, cols]`, vectors `[len]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamBlock {
    pub fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        ParamBlock { name: name.to_string(), shape, values: vec![0.0; len] }
    }

    pub fn is_weight(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Checks that two block lists have identical names and shapes.
pub fn same_layout(a: &[ParamBlock], b: &[ParamBlock]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.name == y.name && x.shape == y.shape && x.values.len() == y.values.len()
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub features: Vec<f64>,
}

/// Local training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHp {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainHp {
    fn default() -> Self {
        TrainHp { learning_rate: 0.05, batch_size: 32, local_epochs: 10, l2: 0.0, seed: 0 }
    }
}

impl TrainHp {
    /// A learning rate of exactly zero is accepted and turns training into a
    /// no-op; negative or non-finite rates are rejected.
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be at least 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(ModelError::Config("local_epochs must be at least 1".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(ModelError::Config(format!("l2 must be non-negative, got {}", self.l2)));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// One labelled example borrowed from a dataset.
pub type Sample<'a> = (&'a [f64], usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<ParamBlock>,
    pub seed: u64,
}

/// Result of [`Model::sgd_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean mini-batch loss over the final epoch.
    pub final_loss: f64,
}

impl Model {
    /// Glorot-uniform weights, zero biases; deterministic in `(spec, seed)`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let mut block = ParamBlock::zeros(name, shape);
                if block.is_weight() {
                    let (fan_out, fan_in) = (block.shape[0], block.shape[1]);
                    let s = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                    for v in &mut block.values {
                        *v = rng.random_range(-s..s);
                    }
                }
                block
            })
            .collect();
        Ok(Model { spec, params, seed })
    }

    /// Builds a model from explicit blocks, checking them against the spec.
    pub fn from_params(spec: ModelSpec, params: Vec<ParamBlock>, seed: u64) -> Result<Model, ModelError> {
        spec.validate()?;
        let layout = spec.layout();
        if layout.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter blocks, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), block) in layout.iter().zip(&params) {
            if block.name != *name || block.shape != *shape || block.values.len() != shape.iter().product::<usize>() {
                return Err(ModelError::Config(format!(
                    "block {:?} with shape {:?} does not match expected {:?} {:?}",
                    block.name, block.shape, name, shape
                )));
            }
            if block.values.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Config(format!("block {:?} has non-finite values", block.name)));
            }
        }
        Ok(Model { spec, params, seed })
    }

    /// Replaces all parameters, keeping spec and seed.
    pub fn load_params(&mut self, params: &[ParamBlock]) -> Result<(), ModelError> {
        if !same_layout(&self.params, params) {
            return Err(ModelError::Config("parameter blocks do not match the model layout".into()));
        }
        self.params = params.to_vec();
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|b| b.values.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardResult, ModelError> {
        self.check_input(x)?;
        let acts = self.activations(x);
        let logits = acts.logits;
        let probs = math::softmax(&logits);
        let features = match self.spec.kind {
            ModelKind::LogisticRegression => logits.clone(),
            ModelKind::Mlp3 => acts.hidden.last().cloned().unwrap_or_default(),
        };
        Ok(ForwardResult { logits, probs, features })
    }

    /// Softmax probabilities only.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_input(x)?;
        Ok(math::softmax(&self.activations(x).logits))
    }

    /// Mean cross-entropy plus `l2 * ||W||^2 / 2` over the weight matrices.
    pub fn loss(&self, batch: &[Sample<'_>], l2: f64) -> Result<f64, ModelError> {
        self.check_batch(batch)?;
        let mut total = 0.0;
        for &(x, y) in batch {
            let logits = self.activations(x).logits;
            total += math::logsumexp(&logits) - logits[y];
        }
        Ok(total / batch.len() as f64 + self.l2_penalty(l2))
    }

    /// Exact gradient of [`Model::loss`], same block layout as `params`.
    pub fn grad(&self, batch: &[Sample<'_>], l2: f64) -> Result<Vec<ParamBlock>, ModelError> {
        Ok(self.loss_and_grad(batch, l2)?.1)
    }

    pub fn loss_and_grad(&self, batch: &[Sample<'_>], l2: f64) -> Result<(f64, Vec<ParamBlock>), ModelError> {
        self.check_batch(batch)?;
        let mut grads: Vec<ParamBlock> =
            self.params.iter().map(|b| ParamBlock::zeros(&b.name, b.shape.clone())).collect();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for &(x, y) in batch {
            total += self.accumulate_sample(x, y, scale, &mut grads);
        }
        if l2 > 0.0 {
            for (g, p) in grads.iter_mut().zip(&self.params) {
                if p.is_weight() {
                    for (gv, pv) in g.values.iter_mut().zip(&p.values) {
                        *gv += l2 * pv;
                    }
                }
            }
        }
        Ok((total * scale + self.l2_penalty(l2), grads))
    }

    /// Mini-batch SGD with a seeded shuffle per epoch.
    pub fn sgd_train(&self, data: &Dataset, hp: &TrainHp) -> Result<TrainOutcome, ModelError> {
        hp.validate()?;
        if data.n_rows() == 0 {
            return Err(ModelError::Input("training data is empty".into()));
        }
        if data.in_dim() != self.spec.in_dim {
            return Err(ModelError::Input(format!(
                "data has {} features, model expects {}",
                data.in_dim(),
                self.spec.in_dim
            )));
        }
        let mut model = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut order: Vec<usize> = (0..data.n_rows()).collect();
        let mut final_loss = 0.0;
        let mut batch: Vec<Sample<'_>> = Vec::with_capacity(hp.batch_size);
        for epoch in 0..hp.local_epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut n_batches = 0usize;
            for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| (data.row(i), data.label(i))));
                let (loss, grads) = model.loss_and_grad(&batch, hp.l2)?;
                if !loss.is_finite() {
                    return Err(ModelError::Divergence { epoch, batch: b, loss });
                }
                if hp.learning_rate > 0.0 {
                    for (p, g) in model.params.iter_mut().zip(&grads) {
                        for (pv, gv) in p.values.iter_mut().zip(&g.values) {
                            *pv -= hp.learning_rate * gv;
                        }
                    }
                }
                epoch_loss += loss;
                n_batches += 1;
            }
            final_loss = epoch_loss / n_batches as f64;
        }
        if model.params.iter().any(|b| b.values.iter().any(|v| !v.is_finite())) {
            return Err(ModelError::Divergence { epoch: hp.local_epochs - 1, batch: 0, loss: f64::NAN });
        }
        Ok(TrainOutcome { model, final_loss })
    }

    /// Fraction of rows whose argmax prediction equals the label.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64, ModelError> {
        if data.n_rows() == 0 {
            return Err(ModelError::Input("evaluation data is empty".into()));
        }
        let mut hits = 0usize;
        for i in 0..data.n_rows() {
            let p = self.predict_proba(data.row(i))?;
            if math::argmax(&p) == data.label(i) {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.n_rows() as f64)
    }

    /// Serializes to the `FWM1` byte format: magic, u16 big-endian version,
    /// u32 big-endian header length, JSON header, then every block's values
    /// as little-endian f64 in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ModelHeader {
            kind: self.spec.kind,
            in_dim: self.spec.in_dim,
            hidden_dim: self.spec.hidden_dim,
            n_classes: self.spec.n_classes,
            seed: self.seed,
            block_names: self.params.iter().map(|b| b.name.clone()).collect(),
            block_shapes: self.params.iter().map(|b| b.shape.clone()).collect(),
        };
        let header = serde_json::to_vec(&header).expect("model header is always serializable");
        let mut out = Vec::with_capacity(10 + header.len() + self.param_count() * 8);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_be_bytes());
        out.extend_from_slice(&(header.len() as u32).to_be_bytes());
        out.extend_from_slice(&header);
        for block in &self.params {
            for v in &block.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model, ModelError> {
        let decode = |msg: &str| ModelError::Decode(msg.to_string());
        if bytes.len() < 10 {
            return Err(decode("truncated preamble"));
        }
        if &bytes[..4] != MODEL_MAGIC {
            return Err(decode("bad magic"));
        }
        let version = u16::from_be_bytes([bytes[4], bytes[5]]);
        if version != MODEL_FORMAT_VERSION {
            return Err(ModelError::Version { found: version, expected: MODEL_FORMAT_VERSION });
        }
        let header_len = u32::from_be_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let body = &bytes[10..];
        if body.len() < header_len {
            return Err(decode("truncated header"));
        }
        let header: ModelHeader = serde_json::from_slice(&body[..header_len])
            .map_err(|e| ModelError::Decode(format!("bad header: {e}")))?;
        let spec = ModelSpec {
            kind: header.kind,
            in_dim: header.in_dim,
            hidden_dim: header.hidden_dim,
            n_classes: header.n_classes,
        };
        spec.validate().map_err(|e| ModelError::Decode(e.to_string()))?;
        if header.block_names.len() != header.block_shapes.len() {
            return Err(decode("block name and shape lists differ in length"));
        }
        let layout = spec.layout();
        let matches = layout.len() == header.block_names.len()
            && layout
                .iter()
                .zip(header.block_names.iter().zip(&header.block_shapes))
                .all(|((name, shape), (hn, hs))| name == hn && shape == hs);
        if !matches {
            return Err(decode("block layout does not match the model spec"));
        }
        let mut data = &body[header_len..];
        let expected = spec.param_count() * 8;
        if data.len() != expected {
            return Err(ModelError::Decode(format!(
                "expected {} bytes of parameters, found {}",
                expected,
                data.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let mut block = ParamBlock::zeros(name, shape);
            for v in &mut block.values {
                let (head, rest) = data.split_at(8);
                let mut raw = [0u8; 8];
                raw.copy_from_slice(head);
                *v = f64::from_le_bytes(raw);
                data = rest;
            }
            params.push(block);
        }
        Model::from_params(spec, params, header.seed).map_err(|e| ModelError::Decode(e.to_string()))
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.spec.in_dim {
            return Err(ModelError::Input(format!(
                "expected {} features, got {}",
                self.spec.in_dim,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Input("input contains non-finite values".into()));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &[Sample<'_>]) -> Result<(), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Input("batch is empty".into()));
        }
        for &(x, y) in batch {
            self.check_input(x)?;
            if y >= self.spec.n_classes {
                return Err(ModelError::Input(format!(
                    "label {} out of range for {} classes",
                    y, self.spec.n_classes
                )));
            }
        }
        Ok(())
    }

    fn l2_penalty(&self, l2: f64) -> f64 {
        if l2 == 0.0 {
            return 0.0;
        }
        let sq: f64 = self
            .params
            .iter()
            .filter(|b| b.is_weight())
            .flat_map(|b| b.values.iter())
            .map(|v| v * v)
            .sum();
        0.5 * l2 * sq
    }

    /// Hidden post-activations (empty for LR) and output logits.
    fn activations(&self, x: &[f64]) -> Activations {
        let p = &self.params;
        match self.spec.kind {
            ModelKind::LogisticRegression => Activations {
                hidden: Vec::new(),
                logits: math::affine(&p[0].values, &p[1].values, x),
            },
            ModelKind::Mlp3 => {
                let mut hidden = Vec::with_capacity(3);
                let mut input = x.to_vec();
                for layer in 0..3 {
                    let mut h = math::affine(&p[2 * layer].values, &p[2 * layer + 1].values, &input);
                    math::relu_in_place(&mut h);
                    input = h.clone();
                    hidden.push(h);
                }
                let logits = math::affine(&p[6].values, &p[7].values, &input);
                Activations { hidden, logits }
            }
        }
    }

    /// Adds `scale * dloss/dparams` for one sample into `grads`, returns the
    /// sample's cross-entropy.
    fn accumulate_sample(&self, x: &[f64], y: usize, scale: f64, grads: &mut [ParamBlock]) -> f64 {
        let acts = self.activations(x);
        let probs = math::softmax(&acts.logits);
        let loss = math::logsumexp(&acts.logits) - acts.logits[y];
        let mut delta: Vec<f64> = probs.iter().map(|p| p * scale).collect();
        delta[y] -= scale;

        match self.spec.kind {
            ModelKind::LogisticRegression => {
                outer_add(&mut grads[0].values, &delta, x);
                add_into(&mut grads[1].values, &delta);
            }
            ModelKind::Mlp3 => {
                let p = &self.params;
                let mut upstream = delta;
                // Walk output layer, then hidden3, hidden2, hidden1.
                for layer in (0..4).rev() {
                    let input: &[f64] = if layer == 0 { x } else { &acts.hidden[layer - 1] };
                    let (w, rest) = grads[2 * layer..].split_at_mut(1);
                    outer_add(&mut w[0].values, &upstream, input);
                    add_into(&mut rest[0].values, &upstream);
                    if layer == 0 {
                        break;
                    }
                    let mut down = math::transpose_mul(&p[2 * layer].values, &upstream, input.len());
                    for (d, a) in down.iter_mut().zip(input) {
                        if *a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    upstream = down;
                }
            }
        }
        loss
    }
}

struct Activations {
    hidden: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: ModelKind,
    in_dim: usize,
    hidden_dim: usize,
    n_classes: usize,
    seed: u64,
    block_names: Vec<String>,
    block_shapes: Vec<Vec<usize>>,
}

fn outer_add(dst: &mut [f64], rows: &[f64], cols: &[f64]) {
    for (r, row) in rows.iter().zip(dst.chunks_exact_mut(cols.len())) {
        if *r == 0.0 {
            continue;
        }
        for (d, c) in row.iter_mut().zip(cols) {
            *d += r * c;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
