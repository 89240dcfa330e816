//! Inference-time threshold sweeps, FLOPs accounting, and paired statistics.

mod paired;

use std::io::{Read, Write};

use serde::Serialize;

pub use paired::{ln_gamma, paired_t_test, student_t_pdf, student_t_sf, PairedStats};

use crate::balancing::density;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::gating::{ExpertMode, ForwardOptions, GateKind};
use crate::numerics::Tape;
use crate::training::{Attention, Batch, Model, ModelConfig};

/// One threshold of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub theta: f64,
    /// Fraction of token-expert pairs with `f = 1`, over all layers and batches.
    pub rho_eff: f64,
    /// Estimated FLOPs per token at `rho_eff`.
    pub flops: f64,
    pub val_loss: f64,
}

/// Evaluate `model` on `batches` with the activation threshold replaced by each
/// of `thetas`. Gate values are unchanged; only the mask moves.
pub fn threshold_sweep(exec: Execution, model: &Model, batches: &[Batch], thetas: &[f64]) -> Result<Vec<SweepRow>> {
    if !matches!(model.config.gate, GateKind::RoutingFree { .. }) {
        return Err(Error::config(
            "model.gate",
            format!("threshold sweeps need a RoutingFree gate, got {}", model.config.gate.name()),
        ));
    }
    if thetas.is_empty() {
        return Err(Error::config("thetas", "at least one threshold is required"));
    }
    if let Some(&bad) = thetas.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(Error::config("thetas", format!("thresholds must be finite and non-negative, got {bad}")));
    }
    if batches.is_empty() {
        return Err(Error::config("batches", "at least one evaluation batch is required"));
    }
    let rows = exec::map(exec, thetas, |&theta| sweep_point(model, batches, theta));
    rows.into_iter().collect()
}

fn sweep_point(model: &Model, batches: &[Batch], theta: f64) -> Result<SweepRow> {
    let opts = ForwardOptions {
        mode: ExpertMode::Skip,
        theta: Some(theta),
    };
    let (mut loss, mut tokens) = (0.0, 0usize);
    let (mut active, mut pairs) = (0.0, 0usize);
    for b in batches {
        let mut tape = Tape::new();
        let vars = model.register_frozen(&mut tape);
        let fwd = model.forward(&mut tape, &vars, b, opts)?;
        loss += tape.value(fwd.loss_lm).item() * b.targets.len() as f64;
        tokens += b.targets.len();
        for l in &fwd.layers {
            active += density(&l.f)? * l.f.numel() as f64;
            pairs += l.f.numel();
        }
    }
    let rho_eff = active / pairs as f64;
    Ok(SweepRow {
        theta,
        rho_eff,
        flops: flops_estimate(&model.config, rho_eff),
        val_loss: loss / tokens as f64,
    })
}

/// Forward FLOPs per token (2 per multiply-accumulate).
///
/// Per layer: attention projections `4D²` plus scores and values `2·T·D`
/// (full context), the gate (`D·N` router, or `N·D·r` for the per-expert
/// projections, which is also all an inactive expert costs), and
/// `ρ_eff·N` active expert paths of `3·D·D_act` (GLU) or `(r + 2D)·D_act`
/// (low-rank, reusing the gate projection). Plus the tied output projection
/// `D·V`. Norms, softmaxes and residual adds are not counted.
pub fn flops_estimate(config: &ModelConfig, rho_eff: f64) -> f64 {
    let (d, d_act, n) = (config.hidden as f64, config.expert_hidden as f64, config.experts as f64);
    let attention = match config.attention {
        Attention::SimpleCausal => 4.0 * d * d + 2.0 * config.seq_len as f64 * d,
        Attention::None => 0.0,
    };
    let (gate, path) = match config.gate.rank() {
        Some(r) => (n * d * r as f64, (r as f64 + 2.0 * d) * d_act),
        None => (d * n, 3.0 * d * d_act),
    };
    let layer = attention + gate + rho_eff * n * path;
    2.0 * (config.layers as f64 * layer + d * config.vocab as f64)
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a two-column CSV (with header) of paired scores `a, b`.
pub fn read_pairs<R: Read>(input: R) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Format(format!("row {row}: {e}")))?;
        if rec.len() != 2 {
            return Err(Error::Format(format!("row {row}: expected 2 columns, found {}", rec.len())));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Format(format!("row {row}: not a number: {s:?}")))
        };
        a.push(parse(&rec[0])?);
        b.push(parse(&rec[1])?);
    }
    Ok((a, b))
}

pub fn write_stats_csv<W: Write>(out: W, stats: &PairedStats) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "mean_delta", "t", "p", "d", "wins", "losses"])?;
    w.write_record([
        stats.n.to_string(),
        stats.mean_delta.to_string(),
        stats.t_stat.to_string(),
        stats.p_one_sided.to_string(),
        stats.cohens_d.to_string(),
        stats.wins.to_string(),
        stats.losses.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}
