use serde::{Deserialize, Serialize};

use crate::balancing::{BalanceConfig, BalanceLoss, Scope};
use crate::error::{Error, Result};
use crate::gating::GateKind;

/// Token mixing before each MoE layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attention {
    /// Single-head causal scaled dot-product attention.
    #[default]
    SimpleCausal,
    None,
}

fn default_gate_init_scale() -> f64 {
    1.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub layers: usize,
    /// Hidden size D.
    pub hidden: usize,
    /// Expert hidden size D_act.
    pub expert_hidden: usize,
    /// Experts per layer N.
    pub experts: usize,
    pub gate: GateKind,
    #[serde(default)]
    pub attention: Attention,
    pub seed: u64,
    /// Low-rank gate init: `A_gate` entries have std `s·θ/√(D·r)`, so
    /// `‖x·A‖ ≈ s·θ` for RMS-normalised `x`.
    #[serde(default = "default_gate_init_scale")]
    pub gate_init_scale: f64,
}

impl ModelConfig {
    /// Desk-scale reference: vocab 64, T 64, D 64, D_act 32, N 8, r 8, L 4.
    pub fn reference() -> Self {
        ModelConfig {
            vocab: 64,
            seq_len: 64,
            layers: 4,
            hidden: 64,
            expert_hidden: 32,
            experts: 8,
            gate: GateKind::RoutingFree { r: 8, theta: 1.0 },
            attention: Attention::SimpleCausal,
            seed: 0,
            gate_init_scale: default_gate_init_scale(),
        }
    }

    /// Gradient-check scale: vocab 16, T 8, D 16, D_act 8, N 4, r 4, L 2.
    pub fn micro() -> Self {
        ModelConfig {
            vocab: 16,
            seq_len: 8,
            layers: 2,
            hidden: 16,
            expert_hidden: 8,
            experts: 4,
            gate: GateKind::RoutingFree { r: 4, theta: 1.0 },
            attention: Attention::SimpleCausal,
            seed: 0,
            gate_init_scale: default_gate_init_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.vocab", self.vocab),
            ("model.seq_len", self.seq_len),
            ("model.layers", self.layers),
            ("model.hidden", self.hidden),
            ("model.expert_hidden", self.expert_hidden),
            ("model.experts", self.experts),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.vocab < 2 {
            return Err(Error::config("model.vocab", "must be at least 2"));
        }
        if self.seq_len < 2 {
            return Err(Error::config("model.seq_len", "must be at least 2"));
        }
        if !(self.gate_init_scale > 0.0 && self.gate_init_scale.is_finite()) {
            return Err(Error::config("model.gate_init_scale", "must be positive"));
        }
        self.gate
            .validate(self.experts)
            .map_err(|e| match e {
                Error::Config { field, reason } => Error::config(format!("model.{field}"), reason),
                other => other,
            })
    }
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.95]
}

fn default_grad_clip() -> f64 {
    1.0
}

fn default_eval_every() -> usize {
    250
}

fn default_val_batches() -> usize {
    4
}

fn default_corpus_tokens() -> usize {
    200_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub balance: BalanceConfig,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default)]
    pub weight_decay: f64,
    /// Global gradient-norm bound; `0` disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    /// Validation cadence in steps; the final step is always evaluated.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_val_batches")]
    pub val_batches: usize,
    #[serde(default = "default_corpus_tokens")]
    pub corpus_tokens: usize,
}

impl TrainConfig {
    /// lr 1e-3, 5000 steps, batch 32, λ₀ 1e-10, η 0.02, μ 0.5, ρ∞ 0.25, global scope.
    pub fn reference() -> Self {
        TrainConfig {
            lr: 1e-3,
            steps: 5000,
            batch_size: 32,
            balance: BalanceConfig {
                scope: Scope::Global,
                ..BalanceConfig::default()
            },
            betas: default_betas(),
            weight_decay: 0.0,
            grad_clip: default_grad_clip(),
            eval_every: default_eval_every(),
            val_batches: default_val_batches(),
            corpus_tokens: default_corpus_tokens(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("must be positive, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::config("train.steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        for (i, b) in self.betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return Err(Error::config(format!("train.betas[{i}]"), "must lie in [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("train.grad_clip", "must be non-negative"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be at least 1"));
        }
        if self.val_batches == 0 {
            return Err(Error::config("train.val_batches", "must be at least 1"));
        }
        self.balance.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::config(format!("train.{field}"), reason),
            other => other,
        })
    }

    /// The balancing loss in effect for `gate`.
    pub fn balance_loss(&self, gate: &GateKind) -> Result<BalanceLoss> {
        let loss = self.balance.loss.unwrap_or(match gate {
            GateKind::StandardTopK { .. } | GateKind::AoeTopK { .. } => BalanceLoss::Switch,
            _ => BalanceLoss::Unified,
        });
        if loss == BalanceLoss::Switch && gate.top_k().is_none() {
            return Err(Error::config(
                "train.balance.loss",
                format!("Switch loss needs a TopK gate, got {}", gate.name()),
            ));
        }
        Ok(loss)
    }
}
