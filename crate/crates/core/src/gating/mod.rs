//! Gating mechanisms, expert FFNs, and the MoE layer forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ExpertPart, Tape, Tensor, Var, NORM_EPS};

/// Gate selection with its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum GateKind {
    /// Router logits, softmax over the top `k`.
    StandardTopK { k: usize },
    /// `relu(x·router)`, unnormalised.
    ReMoE,
    /// Top-`k` softmax over the experts' own low-rank projection norms.
    AoeTopK { k: usize, r: usize },
    /// Self-activation: `relu(‖x·A‖ − b)` thresholded at `theta`.
    RoutingFree { r: usize, theta: f64 },
}

impl GateKind {
    pub fn validate(&self, n_experts: usize) -> Result<()> {
        let check_k = |k: usize| {
            if k == 0 || k > n_experts {
                Err(Error::config(
                    "gate.k",
                    format!("must satisfy 1 <= k <= N = {n_experts}, got {k}"),
                ))
            } else {
                Ok(())
            }
        };
        let check_r = |r: usize| {
            if r == 0 {
                Err(Error::config("gate.r", "must be at least 1"))
            } else {
                Ok(())
            }
        };
        match *self {
            GateKind::StandardTopK { k } => check_k(k),
            GateKind::ReMoE => Ok(()),
            GateKind::AoeTopK { k, r } => check_k(k).and(check_r(r)),
            GateKind::RoutingFree { r, theta } => {
                check_r(r)?;
                if !(theta >= 0.0 && theta.is_finite()) {
                    return Err(Error::config("gate.theta", format!("must be finite and >= 0, got {theta}")));
                }
                Ok(())
            }
        }
    }

    pub fn uses_router(&self) -> bool {
        matches!(self, GateKind::StandardTopK { .. } | GateKind::ReMoE)
    }

    /// Rank of the per-expert gate projection, for the low-rank expert form.
    pub fn rank(&self) -> Option<usize> {
        match *self {
            GateKind::AoeTopK { r, .. } | GateKind::RoutingFree { r, .. } => Some(r),
            _ => None,
        }
    }

    pub fn top_k(&self) -> Option<usize> {
        match *self {
            GateKind::StandardTopK { k } | GateKind::AoeTopK { k, .. } => Some(k),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GateKind::StandardTopK { .. } => "StandardTopK",
            GateKind::ReMoE => "ReMoE",
            GateKind::AoeTopK { .. } => "AoeTopK",
            GateKind::RoutingFree { .. } => "RoutingFree",
        }
    }
}

/// One expert's weights.
#[derive(Clone, Debug, PartialEq)]
pub enum ExpertParams<T> {
    /// `[silu(x·W_up) ⊙ (x·W_gate)]·W_down`.
    Glu { w_up: T, w_gate: T, w_down: T },
    /// `[silu(x·A_gate·B_gate) ⊙ (x·W_up)]·W_down`.
    LowRank {
        a_gate: T,
        b_gate: T,
        w_up: T,
        w_down: T,
    },
}

impl<T> ExpertParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ExpertParams<U> {
        match self {
            ExpertParams::Glu { w_up, w_gate, w_down } => ExpertParams::Glu {
                w_up: f(w_up),
                w_gate: f(w_gate),
                w_down: f(w_down),
            },
            ExpertParams::LowRank {
                a_gate,
                b_gate,
                w_up,
                w_down,
            } => ExpertParams::LowRank {
                a_gate: f(a_gate),
                b_gate: f(b_gate),
                w_up: f(w_up),
                w_down: f(w_down),
            },
        }
    }

    /// Parameters with their short names.
    pub fn named(&self) -> Vec<(&'static str, &T)> {
        match self {
            ExpertParams::Glu { w_up, w_gate, w_down } => {
                vec![("w_up", w_up), ("w_gate", w_gate), ("w_down", w_down)]
            }
            ExpertParams::LowRank {
                a_gate,
                b_gate,
                w_up,
                w_down,
            } => vec![
                ("a_gate", a_gate),
                ("b_gate", b_gate),
                ("w_up", w_up),
                ("w_down", w_down),
            ],
        }
    }

    pub fn a_gate(&self) -> Option<&T> {
        match self {
            ExpertParams::LowRank { a_gate, .. } => Some(a_gate),
            ExpertParams::Glu { .. } => None,
        }
    }
}

/// Weights of one MoE layer. `T` is a stored [`Tensor`], a tape [`Var`], or an index.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayerParams<T> {
    pub gate: GateKind,
    pub experts: Vec<ExpertParams<T>>,
    /// `[D×N]`, StandardTopK and ReMoE only.
    pub router: Option<T>,
    /// Per-expert biases `[N]`, RoutingFree only.
    pub bias: Option<T>,
}

impl<T> MoeLayerParams<T> {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Apply `f` to every parameter, in the order of [`named`](Self::named).
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> MoeLayerParams<U> {
        let router = self.router.as_ref().map(&mut f);
        let bias = self.bias.as_ref().map(&mut f);
        MoeLayerParams {
            gate: self.gate,
            experts: self.experts.iter().map(|e| e.map(&mut f)).collect(),
            router,
            bias,
        }
    }

    /// Every parameter with a dotted name such as `expert3.w_up`.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        if let Some(r) = &self.router {
            out.push(("router".to_string(), r));
        }
        if let Some(b) = &self.bias {
            out.push(("bias".to_string(), b));
        }
        for (i, e) in self.experts.iter().enumerate() {
            for (n, t) in e.named() {
                out.push((format!("expert{i}.{n}"), t));
            }
        }
        out
    }

    /// Structural checks: router and bias present exactly when the gate needs
    /// them, and every expert in the parameterization the gate implies.
    pub fn check_structure(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::config("experts", "a layer needs at least one expert"));
        }
        self.gate.validate(self.experts.len())?;
        if self.router.is_some() != self.gate.uses_router() {
            return Err(Error::config(
                "router",
                format!("router presence does not match gate {}", self.gate.name()),
            ));
        }
        let rf = matches!(self.gate, GateKind::RoutingFree { .. });
        if self.bias.is_some() != rf {
            return Err(Error::config("bias", "biases are present iff the gate is RoutingFree"));
        }
        let low_rank = self.gate.rank().is_some();
        for e in &self.experts {
            if matches!(e, ExpertParams::LowRank { .. }) != low_rank {
                return Err(Error::config(
                    "experts",
                    format!("expert parameterization does not match gate {}", self.gate.name()),
                ));
            }
        }
        Ok(())
    }
}

impl MoeLayerParams<Tensor> {
    /// Check that every shape agrees with hidden size `d`.
    pub fn check_shapes(&self, d: usize) -> Result<()> {
        self.check_structure()?;
        let n = self.n_experts();
        if let Some(r) = &self.router {
            expect_shape("router", r, &[d, n])?;
        }
        if let Some(b) = &self.bias {
            expect_shape("bias", b, &[n])?;
        }
        let d_act = match &self.experts[0] {
            ExpertParams::Glu { w_up, .. } | ExpertParams::LowRank { w_up, .. } => w_up.cols(),
        };
        let rank = self.gate.rank().unwrap_or(0);
        for e in &self.experts {
            match e {
                ExpertParams::Glu { w_up, w_gate, w_down } => {
                    expect_shape("w_up", w_up, &[d, d_act])?;
                    expect_shape("w_gate", w_gate, &[d, d_act])?;
                    expect_shape("w_down", w_down, &[d_act, d])?;
                }
                ExpertParams::LowRank {
                    a_gate,
                    b_gate,
                    w_up,
                    w_down,
                } => {
                    expect_shape("a_gate", a_gate, &[d, rank])?;
                    expect_shape("b_gate", b_gate, &[rank, d_act])?;
                    expect_shape("w_up", w_up, &[d, d_act])?;
                    expect_shape("w_down", w_down, &[d_act, d])?;
                }
            }
        }
        Ok(())
    }
}

fn expect_shape(what: &'static str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::dim(what, t.shape(), shape));
    }
    Ok(())
}

/// Softmax over the top `k` router logits per token.
pub fn gate_standard(tape: &mut Tape, x: Var, router: Var, k: usize) -> Result<Var> {
    let logits = tape.matmul(x, router)?;
    tape.topk_softmax(logits, k)
}

/// `relu(x·router)`.
pub fn gate_remoe(tape: &mut Tape, x: Var, router: Var) -> Result<Var> {
    let logits = tape.matmul(x, router)?;
    Ok(tape.relu(logits))
}

/// Concatenated projection `x·[A_1 | … | A_N]`, `[T×(N·r)]`.
fn low_rank_projection(tape: &mut Tape, x: Var, a_gates: &[Var]) -> Result<Var> {
    let a_all = if a_gates.len() == 1 {
        a_gates[0]
    } else {
        tape.concat_cols(a_gates)?
    };
    tape.matmul(x, a_all)
}

/// Top-`k` softmax over `‖x·A_gate,i‖₂`.
pub fn gate_aoe(tape: &mut Tape, x: Var, a_gates: &[Var], k: usize) -> Result<Var> {
    let xa = low_rank_projection(tape, x, a_gates)?;
    let scores = tape.group_l2_norm(xa, a_gates.len(), NORM_EPS)?;
    tape.topk_softmax(scores, k)
}

/// `G = relu(‖x·A_gate,i‖₂ − b_i)` and the binary activation `f`.
pub fn gate_routing_free(
    tape: &mut Tape,
    x: Var,
    a_gates: &[Var],
    bias: Var,
    theta: f64,
) -> Result<(Var, Tensor)> {
    let xa = low_rank_projection(tape, x, a_gates)?;
    let (g, f, _) = routing_free_from_projection(tape, xa, a_gates.len(), bias, theta)?;
    Ok((g, f))
}

fn routing_free_from_projection(
    tape: &mut Tape,
    xa: Var,
    n: usize,
    bias: Var,
    theta: f64,
) -> Result<(Var, Tensor, f64)> {
    let norms = tape.group_l2_norm(xa, n, NORM_EPS)?;
    let pre = tape.sub_bias(norms, bias)?;
    let g = tape.relu(pre);
    let f = activation_mask(tape.value(g), theta);
    let mut margin = f64::INFINITY;
    for &p in tape.value(pre).data() {
        margin = margin.min(p.abs());
    }
    if theta > 0.0 {
        for &gv in tape.value(g).data() {
            margin = margin.min((gv - theta).abs());
        }
    }
    Ok((g, f, margin))
}

/// `f = 1` where `G ≥ θ` and `G > 0`.
///
/// The second condition only matters at `θ = 0`, where it keeps experts whose
/// gate the ReLU already closed out of the active set.
pub fn activation_mask(g: &Tensor, theta: f64) -> Tensor {
    g.map(|v| if v >= theta && v > 0.0 { 1.0 } else { 0.0 })
}

/// GLU expert on every row of `x`.
pub fn expert_ffn_glu(tape: &mut Tape, x: Var, params: &ExpertParams<Var>) -> Result<Var> {
    match *params {
        ExpertParams::Glu { w_up, w_gate, w_down } => glu_path(tape, x, w_up, w_gate, w_down),
        ExpertParams::LowRank { .. } => Err(Error::config(
            "experts",
            "expert_ffn_glu needs GLU parameters",
        )),
    }
}

fn glu_path(tape: &mut Tape, x: Var, w_up: Var, w_gate: Var, w_down: Var) -> Result<Var> {
    let u = tape.matmul(x, w_up)?;
    let u = tape.silu(u);
    let g = tape.matmul(x, w_gate)?;
    let h = tape.mul(u, g)?;
    tape.matmul(h, w_down)
}

/// Low-rank expert on every row of `x`; returns `(y, x·A_gate)`.
pub fn expert_ffn_aoe(tape: &mut Tape, x: Var, params: &ExpertParams<Var>) -> Result<(Var, Var)> {
    match *params {
        ExpertParams::LowRank {
            a_gate,
            b_gate,
            w_up,
            w_down,
        } => {
            let xa = tape.matmul(x, a_gate)?;
            let y = low_rank_path(tape, x, xa, b_gate, w_up, w_down)?;
            Ok((y, xa))
        }
        ExpertParams::Glu { .. } => Err(Error::config(
            "experts",
            "expert_ffn_aoe needs low-rank parameters",
        )),
    }
}

fn low_rank_path(tape: &mut Tape, x: Var, xa: Var, b_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
    let gb = tape.matmul(xa, b_gate)?;
    let gb = tape.silu(gb);
    let u = tape.matmul(x, w_up)?;
    let h = tape.mul(gb, u)?;
    tape.matmul(h, w_down)
}

/// How inactive token-expert pairs are handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExpertMode {
    /// Experts run only on their active rows.
    #[default]
    Skip,
    /// Every expert runs on every row; inactive outputs are zeroed by the mask.
    Dense,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub mode: ExpertMode,
    /// Replaces the configured RoutingFree threshold (inference sweeps).
    pub theta: Option<f64>,
}

/// Result of [`moe_layer_forward`].
pub struct LayerOutput {
    /// `Σ_i w[·,i]·E_i(x) + x`.
    pub h: Var,
    /// Differentiable gate values `[T×N]` used as the density proxy.
    pub g: Var,
    /// Binary activation `[T×N]`.
    pub f: Tensor,
    /// Full softmax over router scores, TopK gates only (Switch loss).
    pub probs: Option<Var>,
    /// Smallest distance of any gate quantity to a kink or threshold.
    pub margin: f64,
}

/// MoE layer with residual, skipping experts on rows where they are inactive.
pub fn moe_layer_forward(tape: &mut Tape, x: Var, layer: &MoeLayerParams<Var>) -> Result<LayerOutput> {
    moe_layer_forward_with(tape, x, layer, ForwardOptions::default())
}

pub fn moe_layer_forward_with(
    tape: &mut Tape,
    x: Var,
    layer: &MoeLayerParams<Var>,
    opts: ForwardOptions,
) -> Result<LayerOutput> {
    layer.check_structure()?;
    let (t, d) = tape.value(x).dims2()?;
    let n = layer.n_experts();
    let missing = |what: &str| Error::config(what, "missing for this gate kind");

    // Gate values, binary mask, combination weights, and the shared projection.
    let mut xa_all = None;
    let mut probs = None;
    let (g, f, margin) = match layer.gate {
        GateKind::StandardTopK { k } => {
            let router = layer.router.ok_or_else(|| missing("router"))?;
            let logits = tape.matmul(x, router)?;
            let margin = topk_margin(tape.value(logits), k);
            probs = Some(tape.softmax_rows(logits)?);
            let w = tape.topk_softmax(logits, k)?;
            (w, positive_mask(tape.value(w)), margin)
        }
        GateKind::ReMoE => {
            let router = layer.router.ok_or_else(|| missing("router"))?;
            let logits = tape.matmul(x, router)?;
            let margin = tape.value(logits).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            let w = tape.relu(logits);
            (w, positive_mask(tape.value(w)), margin)
        }
        GateKind::AoeTopK { k, .. } => {
            let a = a_gates(layer)?;
            let xa = low_rank_projection(tape, x, &a)?;
            xa_all = Some(xa);
            let scores = tape.group_l2_norm(xa, n, NORM_EPS)?;
            let margin = topk_margin(tape.value(scores), k);
            probs = Some(tape.softmax_rows(scores)?);
            let w = tape.topk_softmax(scores, k)?;
            (w, positive_mask(tape.value(w)), margin)
        }
        GateKind::RoutingFree { theta, .. } => {
            let a = a_gates(layer)?;
            let bias = layer.bias.ok_or_else(|| missing("bias"))?;
            let xa = low_rank_projection(tape, x, &a)?;
            xa_all = Some(xa);
            routing_free_from_projection(tape, xa, n, bias, opts.theta.unwrap_or(theta))?
        }
    };

    let weights = match opts.mode {
        ExpertMode::Skip => g,
        ExpertMode::Dense => {
            let mask = tape.constant(f.clone());
            tape.mul(g, mask)?
        }
    };

    let rank = layer.gate.rank().unwrap_or(0);
    let mut parts = Vec::new();
    for (i, expert) in layer.experts.iter().enumerate() {
        let rows: Vec<usize> = match opts.mode {
            ExpertMode::Skip => (0..t).filter(|&r| f.get(r, i) != 0.0).collect(),
            ExpertMode::Dense => (0..t).collect(),
        };
        if rows.is_empty() {
            continue;
        }
        let xs = if rows.len() == t { x } else { tape.gather_rows(x, &rows)? };
        let y = match *expert {
            ExpertParams::Glu { w_up, w_gate, w_down } => glu_path(tape, xs, w_up, w_gate, w_down)?,
            ExpertParams::LowRank { b_gate, w_up, w_down, .. } => {
                let xa_all = xa_all.ok_or_else(|| missing("a_gate"))?;
                let xa = tape.gather_block(xa_all, &rows, i * rank, rank)?;
                low_rank_path(tape, xs, xa, b_gate, w_up, w_down)?
            }
        };
        parts.push(ExpertPart {
            expert: i,
            output: y,
            rows,
        });
    }
    let mixed = tape.expert_combine(weights, parts, d)?;
    let h = tape.add(mixed, x)?;
    Ok(LayerOutput {
        h,
        g,
        f,
        probs,
        margin,
    })
}

fn a_gates(layer: &MoeLayerParams<Var>) -> Result<Vec<Var>> {
    layer
        .experts
        .iter()
        .map(|e| {
            e.a_gate()
                .copied()
                .ok_or_else(|| Error::config("experts", "low-rank gate needs A_gate per expert"))
        })
        .collect()
}

fn positive_mask(w: &Tensor) -> Tensor {
    w.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Gap between the k-th and (k+1)-th largest score, minimised over rows.
fn topk_margin(scores: &Tensor, k: usize) -> f64 {
    let n = scores.cols();
    if k >= n {
        return f64::INFINITY;
    }
    (0..scores.rows())
        .map(|i| {
            let mut row = scores.row(i).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            row[k - 1] - row[k]
        })
        .fold(f64::INFINITY, f64::min)
}
