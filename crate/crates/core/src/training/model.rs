use rand::Rng;

use super::config::{Attention, ModelConfig};
use super::corpus::Batch;
use crate::error::{Error, Result};
use crate::gating::{
    moe_layer_forward_with, ExpertParams, ForwardOptions, GateKind, LayerOutput, MoeLayerParams,
};
use crate::numerics::{Tape, Tensor, Var, RMS_EPS};
use crate::rng::{stream, Stream};

/// Initial value of every routing-free expert bias.
pub const BIAS_INIT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockLayout {
    pub attention: Option<AttentionLayout>,
    pub norm: usize,
    pub moe: MoeLayerParams<usize>,
}

/// Positions of every parameter in [`Model::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub embed: usize,
    pub blocks: Vec<BlockLayout>,
    pub final_norm: usize,
}

/// Embedding, `L` blocks of `[attention + residual; RMSNorm; MoE + residual]`,
/// final RMSNorm, and an output projection tied to the embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
    pub names: Vec<String>,
    pub layout: Layout,
}

/// Closed-form parameter count for `config`.
pub fn expected_param_count(config: &ModelConfig) -> usize {
    let (v, d, da, n) = (config.vocab, config.hidden, config.expert_hidden, config.experts);
    let attention = match config.attention {
        Attention::SimpleCausal => d + 4 * d * d,
        Attention::None => 0,
    };
    let expert = match config.gate.rank() {
        None => 3 * d * da,
        Some(r) => d * r + r * da + 2 * d * da,
    };
    let router = if config.gate.uses_router() { d * n } else { 0 };
    let bias = if matches!(config.gate, GateKind::RoutingFree { .. }) { n } else { 0 };
    let block = attention + d + router + bias + n * expert;
    v * d + config.layers * block + d
}

struct Builder<'r, R: Rng> {
    params: Vec<Tensor>,
    names: Vec<String>,
    rng: &'r mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    fn randn(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let t = Tensor::randn(shape, std, self.rng);
        self.push(name, t)
    }

    fn ones(&mut self, name: String, d: usize) -> usize {
        self.push(name, Tensor::full(&[d], 1.0))
    }
}

impl Model {
    /// Fresh parameters drawn from the config seed.
    pub fn build(config: &ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = stream(config.seed, Stream::Init);
        let (v, d, da, n) = (config.vocab, config.hidden, config.expert_hidden, config.experts);
        let inv_d = 1.0 / (d as f64).sqrt();
        let mut b = Builder {
            params: Vec::new(),
            names: Vec::new(),
            rng: &mut rng,
        };
        let embed = b.randn("embed".into(), &[v, d], inv_d);
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("block{l}");
            let attention = match config.attention {
                Attention::SimpleCausal => Some(AttentionLayout {
                    norm: b.ones(format!("{p}.attn_norm"), d),
                    wq: b.randn(format!("{p}.attn.wq"), &[d, d], inv_d),
                    wk: b.randn(format!("{p}.attn.wk"), &[d, d], inv_d),
                    wv: b.randn(format!("{p}.attn.wv"), &[d, d], inv_d),
                    wo: b.randn(format!("{p}.attn.wo"), &[d, d], inv_d),
                }),
                Attention::None => None,
            };
            let norm = b.ones(format!("{p}.moe_norm"), d);
            let router = config
                .gate
                .uses_router()
                .then(|| b.randn(format!("{p}.moe.router"), &[d, n], inv_d));
            let bias = matches!(config.gate, GateKind::RoutingFree { .. })
                .then(|| b.push(format!("{p}.moe.bias"), Tensor::full(&[n], BIAS_INIT)));
            let down_std = 1.0 / ((da * n) as f64).sqrt();
            let experts = (0..n)
                .map(|i| {
                    let e = format!("{p}.moe.expert{i}");
                    match config.gate.rank() {
                        None => ExpertParams::Glu {
                            w_up: b.randn(format!("{e}.w_up"), &[d, da], inv_d),
                            w_gate: b.randn(format!("{e}.w_gate"), &[d, da], inv_d),
                            w_down: b.randn(format!("{e}.w_down"), &[da, d], down_std),
                        },
                        Some(r) => {
                            let theta = match config.gate {
                                GateKind::RoutingFree { theta, .. } if theta > 0.0 => theta,
                                _ => 1.0,
                            };
                            let a_std = config.gate_init_scale * theta / ((d * r) as f64).sqrt();
                            ExpertParams::LowRank {
                                a_gate: b.randn(format!("{e}.a_gate"), &[d, r], a_std),
                                b_gate: b.randn(format!("{e}.b_gate"), &[r, da], 1.0 / (r as f64).sqrt()),
                                w_up: b.randn(format!("{e}.w_up"), &[d, da], inv_d),
                                w_down: b.randn(format!("{e}.w_down"), &[da, d], down_std),
                            }
                        }
                    }
                })
                .collect();
            blocks.push(BlockLayout {
                attention,
                norm,
                moe: MoeLayerParams {
                    gate: config.gate,
                    experts,
                    router,
                    bias,
                },
            });
        }
        let final_norm = b.ones("final_norm".into(), d);
        let Builder { params, names, .. } = b;
        let model = Model {
            config: config.clone(),
            params,
            names,
            layout: Layout {
                embed,
                blocks,
                final_norm,
            },
        };
        debug_assert_eq!(model.param_count(), expected_param_count(config));
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Register every parameter as a gradient-tracked leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Register every parameter as a constant (inference).
    pub fn register_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Replace the parameter set, checking names and shapes against the layout.
    pub fn load_params(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.iter().enumerate() {
            if *name != self.names[i] {
                return Err(Error::Format(format!("tensor {i}: expected {}, found {name}", self.names[i])));
            }
            if t.shape() != self.params[i].shape() {
                return Err(Error::dim("checkpoint tensor", self.params[i].shape(), t.shape()));
            }
        }
        self.params = named.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }

    /// Full forward pass over `batch`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], batch: &Batch, opts: ForwardOptions) -> Result<Forward> {
        let cfg = &self.config;
        if batch.seq_len != cfg.seq_len {
            return Err(Error::dim("forward", &[cfg.seq_len], &[batch.seq_len]));
        }
        let lay = &self.layout;
        let mut x = tape.embedding(vars[lay.embed], &batch.inputs)?;
        let mut layers = Vec::with_capacity(lay.blocks.len());
        let mut margin = f64::INFINITY;
        for block in &lay.blocks {
            if let Some(a) = &block.attention {
                let n = tape.rmsnorm_rows(x, Some(vars[a.norm]), RMS_EPS)?;
                let q = tape.matmul(n, vars[a.wq])?;
                let k = tape.matmul(n, vars[a.wk])?;
                let v = tape.matmul(n, vars[a.wv])?;
                let att = tape.causal_attention(q, k, v, cfg.seq_len)?;
                let o = tape.matmul(att, vars[a.wo])?;
                x = tape.add(x, o)?;
            }
            let n = tape.rmsnorm_rows(x, Some(vars[block.norm]), RMS_EPS)?;
            let moe = block.moe.map(|&i| vars[i]);
            let out = moe_layer_forward_with(tape, n, &moe, opts)?;
            margin = margin.min(out.margin);
            x = out.h;
            layers.push(out);
        }
        let n = tape.rmsnorm_rows(x, Some(vars[lay.final_norm]), RMS_EPS)?;
        let et = tape.transpose(vars[lay.embed])?;
        let logits = tape.matmul(n, et)?;
        let loss_lm = tape.cross_entropy(logits, &batch.targets)?;
        Ok(Forward {
            logits,
            loss_lm,
            layers,
            margin,
        })
    }
}

/// Output of [`Model::forward`].
pub struct Forward {
    pub logits: Var,
    pub loss_lm: Var,
    pub layers: Vec<LayerOutput>,
    /// Smallest gate distance to a kink or threshold over all layers.
    pub margin: f64,
}
