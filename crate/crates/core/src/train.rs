//! Adam optimization over example batches, with per-epoch checkpoints and
//! a machine-parsable loss log.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::batch_indices;
use crate::nnet::{sequence_loss, Example, LossOptions, ModelConfig, ModelParams, ParamGrads};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "desk-nmt v1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("checkpoint {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nnet(#[from] crate::nnet::NnetError),
}

/// Adam optimizer state: first and second moment estimates per parameter
/// plus the step counter. Defaults follow the standard bias-corrected form
/// (lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, Tensor::zeros(&t.shape)))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients, naming
/// the offending parameter, without touching the model.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ModelParams,
    grads: &ParamGrads,
) -> Result<(), TrainError> {
    if let Some(name) = grads.first_non_finite() {
        return Err(TrainError::NonFiniteGradient(name.to_string()));
    }
    state.t += 1;
    let t = state.t as i32;
    let corr1 = 1.0 - state.beta1.powi(t);
    let corr2 = 1.0 - state.beta2.powi(t);
    for (name, theta) in params.named_mut() {
        let g = grads
            .get(&name)
            .unwrap_or_else(|| panic!("gradient missing for {name}"));
        let m = state.m.get_mut(&name).expect("moment missing");
        let v = state.v.get_mut(&name).expect("moment missing");
        for j in 0..theta.data.len() {
            let gj = g.data[j];
            m.data[j] = state.beta1 * m.data[j] + (1.0 - state.beta1) * gj;
            v.data[j] = state.beta2 * v.data[j] + (1.0 - state.beta2) * gj * gj;
            let m_hat = m.data[j] / corr1;
            let v_hat = v.data[j] / corr2;
            theta.data[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    /// Global-norm gradient clipping threshold; off by default.
    pub clip_norm: Option<f64>,
    /// Directory for per-epoch checkpoints (`epoch-K.json`) and the final
    /// `model.json`; no checkpoints are written when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 16,
            seed: 0,
            lr: 1e-3,
            clip_norm: None,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Total negative log-likelihood divided by predicted token count.
    pub mean_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    /// `epoch<TAB>mean_loss<TAB>seconds`, one line per epoch.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&format!("{}\t{:.6}\t{:.3}\n", e.epoch, e.mean_loss, e.seconds));
        }
        s
    }
}

/// Run `cfg.epochs` of Adam over seeded minibatches of `examples`. Batch
/// gradients are the mean over the batch's per-pair gradients, so learning
/// rate semantics do not depend on batch size. Deterministic given the
/// seed; aborts if the loss turns non-finite.
pub fn train(
    params: &mut ModelParams,
    examples: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    let mut adam = AdamState::new(params, cfg.lr);
    let mut log = TrainLog::default();
    let opts = LossOptions {
        training: true,
        factor_loss_weight: 1.0,
    };
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut total_loss = 0.0;
        let mut total_tokens = 0usize;
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37).wrapping_add(epoch as u64));
        let batches = batch_indices(
            examples.len(),
            cfg.batch_size,
            cfg.seed.wrapping_add(epoch as u64),
        );
        for (batch_no, batch) in batches.iter().enumerate() {
            let mut acc = ParamGrads::zeros_like(params);
            let mut batch_loss = 0.0;
            for &idx in batch {
                let out = sequence_loss(params, &examples[idx], &opts, Some(&mut dropout_rng))?;
                if !out.total.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: batch_no,
                    });
                }
                batch_loss += out.total;
                total_loss += out.total;
                total_tokens += out.predicted_tokens;
                acc.add(&out.grads);
            }
            let _ = batch_loss;
            acc.scale(1.0 / batch.len() as f64);
            if let Some(clip) = cfg.clip_norm {
                let norm = acc.global_norm();
                if norm > clip {
                    acc.scale(clip / norm);
                }
            }
            adam_step(&mut adam, params, &acc)?;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: total_loss / total_tokens.max(1) as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        log.epochs.push(stats);
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            save_checkpoint(params, &dir.join(format!("epoch-{epoch}.json")))?;
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(params, &dir.join("model.json"))?;
    }
    Ok(log)
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

/// Write all parameters as a single JSON document. Serialization is
/// decimal shortest-round-trip, so values reload exactly.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), TrainError> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        config: params.config.clone(),
        tensors: params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
    };
    let json = serde_json::to_string(&file).expect("checkpoint serialization");
    std::fs::write(path, json).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let bad = |reason: String| TrainError::BadCheckpoint {
        path: path.display().to_string(),
        reason,
    };
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| bad(format!("parse error: {e}")))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unknown format {:?}", file.format)));
    }
    let mut params = ModelParams::init(&file.config, 0)?;
    let expected: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for name in &expected {
        if !file.tensors.contains_key(name) {
            return Err(bad(format!("missing tensor {name}")));
        }
    }
    for name in file.tensors.keys() {
        if !expected.contains(name) {
            return Err(bad(format!("unexpected tensor {name}")));
        }
    }
    for (name, t) in params.named_mut() {
        let loaded = &file.tensors[&name];
        if loaded.shape != t.shape {
            return Err(bad(format!(
                "tensor {name}: shape {:?} does not match config shape {:?}",
                loaded.shape, t.shape
            )));
        }
        if !loaded.is_finite() {
            return Err(bad(format!("tensor {name} has non-finite values")));
        }
        *t = loaded.clone();
    }
    Ok(params)
}
