//! Saved wrapper state: everything `infer` needs to reproduce predictions.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use fedwrap_core::dataset::Dataset;
use fedwrap_core::model::{Model, TrainHp};
use fedwrap_core::wrapper::{
    BaggingState, FeatureMode, FusionLayer, LocalModelHandle, StackingState, WrapperConfig, WrapperMode, WrapperState,
};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum FederatedPart {
    Stacking { translator: String, rounds_completed: u32 },
    Bagging { peers: BTreeMap<String, String>, fusion: FusionLayer },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub version: u32,
    pub client_id: String,
    pub clients: Vec<String>,
    pub class_names: Vec<String>,
    pub feature_mode: FeatureMode,
    pub threshold: f64,
    pub fusion_weight: f64,
    /// Base64 of the serialized local model.
    pub local_model: String,
    pub federated: FederatedPart,
}

fn model_b64(m: &LocalModelHandle) -> Result<String> {
    let model = m
        .as_model()
        .ok_or_else(|| Error::Config(format!("{} cannot be saved", m.descriptor())))?;
    Ok(B64.encode(model.to_bytes()))
}

fn model_from_b64(path: &Path, s: &str) -> Result<Model> {
    let bytes = B64.decode(s).map_err(|e| Error::format(path, e))?;
    Model::from_bytes(&bytes).map_err(|e| Error::format(path, e))
}

impl StateFile {
    pub fn capture(cfg: &WrapperConfig, state: &WrapperState) -> Result<StateFile> {
        let federated = match state {
            WrapperState::Untrained => return Err(Error::Config("cannot save an untrained wrapper".into())),
            WrapperState::Stacking(s) => FederatedPart::Stacking {
                translator: B64.encode(s.translator.to_bytes()),
                rounds_completed: s.rounds_completed,
            },
            WrapperState::Bagging(b) => FederatedPart::Bagging {
                peers: b.peer_models.iter().map(|(id, m)| Ok((id.clone(), model_b64(m)?))).collect::<Result<_>>()?,
                fusion: b.fusion.clone(),
            },
        };
        Ok(StateFile {
            version: STATE_VERSION,
            client_id: cfg.client_id.clone(),
            clients: cfg.clients.clone(),
            class_names: cfg.train_dataset.class_names().to_vec(),
            feature_mode: cfg.feature_mode,
            threshold: cfg.threshold,
            fusion_weight: cfg.fusion_weight,
            local_model: model_b64(&cfg.local_model)?,
            federated,
        })
    }

    pub fn mode(&self) -> WrapperMode {
        match self.federated {
            FederatedPart::Stacking { .. } => WrapperMode::Stacking,
            FederatedPart::Bagging { .. } => WrapperMode::Bagging,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<StateFile> {
        let s: StateFile = crate::io::read_json(path)?;
        if s.version != STATE_VERSION {
            return Err(Error::format(path, format!("state version {} (expected {STATE_VERSION})", s.version)));
        }
        Ok(s)
    }

    /// Rebuilds an inference-ready config and state. The config carries a
    /// single placeholder training row, which inference never reads.
    pub fn restore(&self, path: &Path) -> Result<(WrapperConfig, WrapperState)> {
        let local = model_from_b64(path, &self.local_model)?;
        let (in_dim, n_classes) = (local.spec.in_dim, local.spec.n_classes);
        if self.class_names.len() != n_classes {
            return Err(Error::format(path, "class_names do not match the local model"));
        }
        let placeholder = Dataset::from_parts(
            vec![0.0; in_dim],
            in_dim,
            vec![0],
            n_classes,
            (0..in_dim).map(|i| format!("x{i}")).collect(),
            self.class_names.clone(),
            vec![0],
        )?;
        let mut cfg = WrapperConfig::new(
            self.client_id.clone(),
            self.clients.clone(),
            local.into(),
            placeholder,
            None,
            TrainHp::default(),
        );
        cfg.feature_mode = self.feature_mode;
        cfg.threshold = self.threshold;
        cfg.fusion_weight = self.fusion_weight;
        let state = match &self.federated {
            FederatedPart::Stacking { translator, rounds_completed } => {
                let translator = model_from_b64(path, translator)?;
                cfg.translator = translator.spec;
                if translator.spec.in_dim != cfg.stack_in_dim() {
                    return Err(Error::format(path, "translator width does not match the stacked input"));
                }
                WrapperState::Stacking(StackingState {
                    translator,
                    rounds_completed: *rounds_completed,
                    stack_in_dim: cfg.stack_in_dim(),
                })
            }
            FederatedPart::Bagging { peers, fusion } => {
                let peer_models = peers
                    .iter()
                    .map(|(id, m)| Ok((id.clone(), LocalModelHandle::from(model_from_b64(path, m)?))))
                    .collect::<Result<BTreeMap<_, _>>>()?;
                let mut b = BaggingState::averaging(peer_models)?;
                if fusion.n_models != b.fusion.n_models || fusion.n_classes != b.fusion.n_classes {
                    return Err(Error::format(path, "fusion layer does not match the peer models"));
                }
                b.fusion = fusion.clone();
                WrapperState::Bagging(b)
            }
        };
        Ok((cfg, state))
    }
}
