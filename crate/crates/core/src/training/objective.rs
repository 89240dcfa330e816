use super::model::Forward;
use crate::balancing::{
    collect_scope, density, loss_lb, switch_aux_loss, switch_fractions, total_loss, BalanceConfig,
    BalanceLoss, DensityStats, Scope,
};
use crate::error::{Error, Result};
use crate::gating::GateKind;
use crate::numerics::{Tape, Var};

/// Total loss and the scalars reported alongside it.
pub struct Objective {
    pub total: Var,
    pub loss_lm: f64,
    /// Mean of the group losses.
    pub loss_lb: f64,
    pub lambda: f64,
    pub group_losses: Vec<f64>,
    pub density: DensityStats,
}

/// `L_LM + λ·(1/G)·Σ_g L_g` over the balancing groups of `fwd`.
pub fn objective(
    tape: &mut Tape,
    fwd: &Forward,
    gate: &GateKind,
    balance: &BalanceConfig,
    loss_kind: BalanceLoss,
    lambda: f64,
) -> Result<Objective> {
    let layers = fwd.layers.len();

    let per_layer_rho: Vec<f64> = fwd.layers.iter().map(|o| density(&o.f)).collect::<Result<_>>()?;
    let rho = per_layer_rho.iter().sum::<f64>() / layers as f64;
    let rho_tilde = fwd.layers.iter().map(|o| tape.value(o.g).mean()).sum::<f64>() / layers as f64;

    let group_vars: Vec<Var> = match loss_kind {
        BalanceLoss::Unified => {
            let fs: Vec<Var> = fwd.layers.iter().map(|o| tape.constant(o.f.clone())).collect();
            let gs: Vec<Var> = fwd.layers.iter().map(|o| o.g).collect();
            collect_scope(tape, &fs, &gs, balance.scope)?
                .into_iter()
                .map(|(f, g)| loss_lb(tape, f, g, balance.mu))
                .collect::<Result<_>>()?
        }
        BalanceLoss::Switch => {
            let k = gate
                .top_k()
                .ok_or_else(|| Error::config("train.balance.loss", "Switch loss needs a TopK gate"))?;
            let mut per_layer = Vec::with_capacity(layers);
            for o in &fwd.layers {
                let probs = o
                    .probs
                    .ok_or_else(|| Error::config("train.balance.loss", "gate produced no router probabilities"))?;
                let (ff, pf) = switch_fractions(tape, &o.f, probs, k)?;
                per_layer.push(switch_aux_loss(tape, ff, pf, 1.0)?);
            }
            match balance.scope {
                Scope::PerLayer => per_layer,
                Scope::Global => {
                    let mut acc = per_layer[0];
                    for &v in &per_layer[1..] {
                        acc = tape.add(acc, v)?;
                    }
                    vec![tape.scale(acc, 1.0 / layers as f64)]
                }
            }
        }
    };
    let group_losses: Vec<f64> = group_vars.iter().map(|&v| tape.value(v).item()).collect();

    let mut lb = group_vars[0];
    for &v in &group_vars[1..] {
        lb = tape.add(lb, v)?;
    }
    let lb = tape.scale(lb, 1.0 / group_vars.len() as f64);
    let total = total_loss(tape, fwd.loss_lm, lb, lambda)?;
    Ok(Objective {
        total,
        loss_lm: tape.value(fwd.loss_lm).item(),
        loss_lb: tape.value(lb).item(),
        lambda,
        group_losses,
        density: DensityStats {
            rho,
            rho_tilde,
            per_layer_rho,
        },
    })
}
