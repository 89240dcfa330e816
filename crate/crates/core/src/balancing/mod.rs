//! Activation densities, balancing losses, and the adaptive coefficient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Where densities and balancing losses are measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    /// One loss and one controller per layer.
    #[default]
    PerLayer,
    /// All layers' experts pooled into a single axis.
    Global,
}

/// Which auxiliary loss a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BalanceLoss {
    /// `μ·L_EB + (1−μ)·L_TB`.
    Unified,
    /// `N·Σ f_i·P_i` over router probabilities (TopK gates only).
    Switch,
}

/// How the loss coefficient evolves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coefficient {
    /// Multiplicative controller driven by the measured density.
    #[default]
    Adaptive,
    /// Held at `lambda0`.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceConfig {
    pub mu: f64,
    pub rho_inf: f64,
    pub lambda0: f64,
    pub eta: f64,
    #[serde(default)]
    pub scope: Scope,
    /// `None` picks the gate's default: Switch for TopK gates, Unified otherwise.
    #[serde(default)]
    pub loss: Option<BalanceLoss>,
    #[serde(default)]
    pub coefficient: Coefficient,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            mu: 0.5,
            rho_inf: 0.25,
            lambda0: 1e-10,
            eta: 0.02,
            scope: Scope::PerLayer,
            loss: None,
            coefficient: Coefficient::Adaptive,
        }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::config("balance.mu", format!("must lie in [0, 1], got {}", self.mu)));
        }
        if !(self.rho_inf > 0.0 && self.rho_inf < 1.0) {
            return Err(Error::config(
                "balance.rho_inf",
                format!("must lie in (0, 1), got {}", self.rho_inf),
            ));
        }
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return Err(Error::config("balance.lambda0", format!("must be positive, got {}", self.lambda0)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("balance.eta", format!("must be positive, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Controller state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BalanceState {
    pub lambda_t: f64,
    pub step: u64,
}

impl BalanceState {
    pub fn new(lambda0: f64) -> Self {
        BalanceState {
            lambda_t: lambda0,
            step: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensityStats {
    pub rho: f64,
    pub rho_tilde: f64,
    pub per_layer_rho: Vec<f64>,
}

/// Mean of a binary activation matrix.
pub fn density(f: &Tensor) -> Result<f64> {
    if f.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract("density expects a binary matrix".into()));
    }
    Ok(f.mean())
}

/// Mean of the gate values; differentiable.
pub fn density_proxy(tape: &mut Tape, g: Var) -> Var {
    tape.mean(g)
}

fn same_shape(tape: &Tape, op: &'static str, f: Var, g: Var) -> Result<(usize, usize)> {
    let (fs, gs) = (tape.value(f).shape(), tape.value(g).shape());
    if fs != gs {
        return Err(Error::dim(op, fs, gs));
    }
    tape.value(g).dims2()
}

/// `(1/|E|) Σ_i mean_t f[t,i] · mean_t G[t,i]`, with `f` detached.
pub fn loss_eb(tape: &mut Tape, f: Var, g: Var) -> Result<Var> {
    let (_, e) = same_shape(tape, "loss_eb", f, g)?;
    let f = tape.detach(f);
    let fm = tape.col_mean(f)?;
    let gm = tape.col_mean(g)?;
    let s = tape.dot(fm, gm)?;
    Ok(tape.scale(s, 1.0 / e as f64))
}

/// `(1/|B|) Σ_t mean_i f[t,i] · mean_j G[t,j]`, with `f` detached.
pub fn loss_tb(tape: &mut Tape, f: Var, g: Var) -> Result<Var> {
    let (b, _) = same_shape(tape, "loss_tb", f, g)?;
    let f = tape.detach(f);
    let fm = tape.row_mean(f)?;
    let gm = tape.row_mean(g)?;
    let s = tape.dot(fm, gm)?;
    Ok(tape.scale(s, 1.0 / b as f64))
}

/// `μ·L_EB + (1−μ)·L_TB`.
pub fn loss_lb(tape: &mut Tape, f: Var, g: Var, mu: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::config("mu", format!("must lie in [0, 1], got {mu}")));
    }
    let eb = loss_eb(tape, f, g)?;
    let tb = loss_tb(tape, f, g)?;
    let eb = tape.scale(eb, mu);
    let tb = tape.scale(tb, 1.0 - mu);
    tape.add(eb, tb)
}

/// `coef · N · Σ_i f_frac[i]·P_frac[i]`, with `f_frac` detached.
pub fn switch_aux_loss(tape: &mut Tape, f_frac: Var, p_frac: Var, coef: f64) -> Result<Var> {
    let (fs, ps) = (tape.value(f_frac).shape(), tape.value(p_frac).shape());
    if fs != ps || fs.len() != 1 {
        return Err(Error::dim("switch_aux_loss", fs, ps));
    }
    let n = fs[0] as f64;
    let f = tape.detach(f_frac);
    let s = tape.dot(f, p_frac)?;
    Ok(tape.scale(s, coef * n))
}

/// Dispatch fractions `count_i / (T·K)` and mean router probabilities.
pub fn switch_fractions(tape: &mut Tape, f: &Tensor, probs: Var, k: usize) -> Result<(Var, Var)> {
    let (t, n) = f.dims2()?;
    let mut counts = vec![0.0; n];
    for row in f.data().chunks(n) {
        for (c, v) in counts.iter_mut().zip(row) {
            *c += v;
        }
    }
    let denom = (t * k) as f64;
    let f_frac = tape.constant(Tensor::vector(counts.into_iter().map(|c| c / denom).collect()));
    let p_frac = tape.col_mean(probs)?;
    Ok((f_frac, p_frac))
}

/// `sign(x)` with `sign(0) = 0`.
pub fn sign(x: f64) -> i32 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// `λ_{t+1} = λ_t · (1+η)^sign(ρ_t − ρ∞)`.
pub fn lambda_update(state: BalanceState, rho_t: f64, rho_inf: f64, eta: f64) -> BalanceState {
    let factor = match sign(rho_t - rho_inf) {
        1 => 1.0 + eta,
        -1 => 1.0 / (1.0 + eta),
        _ => 1.0,
    };
    BalanceState {
        lambda_t: state.lambda_t * factor,
        step: state.step + 1,
    }
}

/// `lm + λ·lb`; `λ` enters as a constant.
pub fn total_loss(tape: &mut Tape, lm: Var, lb: Var, lambda_t: f64) -> Result<Var> {
    let weighted = tape.scale(lb, lambda_t);
    tape.add(lm, weighted)
}

/// Group per-layer activations by scope: one `(f, G)` pair per layer, or a
/// single pair with every layer's experts side by side.
pub fn collect_scope(
    tape: &mut Tape,
    per_layer_f: &[Var],
    per_layer_g: &[Var],
    scope: Scope,
) -> Result<Vec<(Var, Var)>> {
    if per_layer_f.len() != per_layer_g.len() || per_layer_f.is_empty() {
        return Err(Error::dim("collect_scope", &[per_layer_f.len()], &[per_layer_g.len()]));
    }
    let tokens = tape.value(per_layer_g[0]).rows();
    for (&f, &g) in per_layer_f.iter().zip(per_layer_g) {
        same_shape(tape, "collect_scope", f, g)?;
        if tape.value(g).rows() != tokens {
            return Err(Error::dim("collect_scope", &[tokens], tape.value(g).shape()));
        }
    }
    match scope {
        Scope::PerLayer => Ok(per_layer_f.iter().copied().zip(per_layer_g.iter().copied()).collect()),
        Scope::Global if per_layer_f.len() == 1 => Ok(vec![(per_layer_f[0], per_layer_g[0])]),
        Scope::Global => {
            let f = tape.concat_cols(per_layer_f)?;
            let g = tape.concat_cols(per_layer_g)?;
            Ok(vec![(f, g)])
        }
    }
}
