//! α-β cost model of one MoE layer under expert parallelism.
//!
//! Compute terms count multiply-accumulates and are converted to seconds by
//! `compute_rate`. Communication follows the α-β rule: `n` bytes over one hop
//! cost `α + n/B`.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::rng::{stream, Stream};

/// One layer on `m` devices hosting `n / m` experts each.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    pub n: usize,
    pub m: usize,
    /// Tokens in the batch.
    pub t: usize,
    pub d: usize,
    pub d_act: usize,
    /// Low-rank gate dimension.
    pub r: usize,
    /// Experts per token in standard MoE.
    pub k: usize,
    /// Expected activated experts per token in the routing-free layer, `ρ∞·N`.
    pub k_eff: f64,
    /// Bytes per element.
    pub bytes: f64,
    /// Per-hop startup latency (seconds).
    pub alpha: f64,
    /// Per-link bandwidth (bytes per second).
    pub bandwidth: f64,
    /// Multiply-accumulates per second.
    pub compute_rate: f64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("cost.n", self.n),
            ("cost.m", self.m),
            ("cost.t", self.t),
            ("cost.d", self.d),
            ("cost.d_act", self.d_act),
            ("cost.r", self.r),
            ("cost.k", self.k),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.n % self.m != 0 {
            return Err(Error::config(
                "cost.m",
                format!("{} experts do not split evenly over {} devices", self.n, self.m),
            ));
        }
        if self.k > self.n {
            return Err(Error::config("cost.k", format!("must not exceed N = {}", self.n)));
        }
        if !(self.k_eff > 0.0 && self.k_eff <= self.n as f64) {
            return Err(Error::config("cost.k_eff", format!("must lie in (0, N = {}]", self.n)));
        }
        let physical = [
            ("cost.bytes", self.bytes),
            ("cost.alpha", self.alpha),
            ("cost.bandwidth", self.bandwidth),
            ("cost.compute_rate", self.compute_rate),
        ];
        for (field, v) in physical {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    /// Set `k_eff = ρ∞·N`.
    pub fn with_density(mut self, rho_inf: f64) -> Self {
        self.k_eff = rho_inf * self.n as f64;
        self
    }

    /// `k_eff` rounded to a whole number of experts.
    pub fn k_eff_count(&self) -> usize {
        self.k_eff.round() as usize
    }

    /// Seconds to move `elements_per_token` elements for every token, split over `m` links.
    fn bandwidth_term(&self, elements_per_token: f64) -> f64 {
        elements_per_token * self.t as f64 * self.d as f64 * self.bytes / (self.m as f64 * self.bandwidth)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    StandardMoe,
    RoutingFree,
}

/// Per-term seconds; terms not used by `arch` are zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostBreakdown {
    pub arch: Arch,
    pub t_routing: f64,
    /// One All-to-All pass (dispatch or return).
    pub t_a2a: f64,
    pub t_expert: f64,
    pub t_ag: f64,
    pub t_scoring: f64,
    pub t_expert_star: f64,
    pub t_combine: f64,
    pub total: f64,
    /// Multiply-accumulates on one device's critical path.
    pub macs_total: f64,
}

impl CostBreakdown {
    /// The architecture's total rebuilt from its terms.
    pub fn recompose(&self) -> f64 {
        match self.arch {
            Arch::StandardMoe => self.t_routing + self.t_expert + 2.0 * self.t_a2a,
            Arch::RoutingFree => self.t_scoring + self.t_expert_star + self.t_ag + self.t_combine,
        }
    }

    fn empty(arch: Arch) -> Self {
        CostBreakdown {
            arch,
            t_routing: 0.0,
            t_a2a: 0.0,
            t_expert: 0.0,
            t_ag: 0.0,
            t_scoring: 0.0,
            t_expert_star: 0.0,
            t_combine: 0.0,
            total: 0.0,
            macs_total: 0.0,
        }
    }
}

/// Router, softmax and top-K on every token, then a blocking All-to-All each way.
pub fn cost_standard_moe(p: &CostParams) -> Result<CostBreakdown> {
    p.validate()?;
    let (n, m, t, d, d_act, k) = (p.n as f64, p.m as f64, p.t as f64, p.d as f64, p.d_act as f64, p.k as f64);
    let routing_macs = t * (d + 2.0) * n;
    let expert_macs = 3.0 * k * (t / m) * d * d_act;
    let mut c = CostBreakdown::empty(Arch::StandardMoe);
    c.t_routing = routing_macs / p.compute_rate;
    c.t_expert = expert_macs / p.compute_rate;
    c.t_a2a = (m - 1.0) * p.alpha + p.bandwidth_term(k);
    c.total = c.t_routing + c.t_expert + 2.0 * (m - 1.0) * p.alpha + 2.0 * p.bandwidth_term(k);
    c.macs_total = routing_macs + expert_macs;
    Ok(c)
}

/// All-Gather of the batch, local scoring of `n/m` experts, point-to-point return.
///
/// Scoring is summed onto the critical path rather than overlapped with the
/// All-Gather, which makes the estimate conservative.
pub fn cost_rfmoe(p: &CostParams) -> Result<CostBreakdown> {
    p.validate()?;
    let (n, m, t, d, d_act, r) = (p.n as f64, p.m as f64, p.t as f64, p.d as f64, p.d_act as f64, p.r as f64);
    let scoring_macs = t * d * r * (n / m);
    let expert_macs = p.k_eff * (t / m) * (r + 2.0 * d) * d_act;
    let mut c = CostBreakdown::empty(Arch::RoutingFree);
    c.t_scoring = scoring_macs / p.compute_rate;
    c.t_expert_star = expert_macs / p.compute_rate;
    c.t_ag = (m - 1.0) * p.alpha + p.bandwidth_term(m - 1.0);
    c.t_combine = p.alpha + p.bandwidth_term(p.k_eff);
    c.total = c.t_scoring + c.t_expert_star + m * p.alpha + p.bandwidth_term(m - 1.0 + p.k_eff);
    c.macs_total = scoring_macs + expert_macs;
    Ok(c)
}

/// Compute-cost ratio routing-free / standard at `K = K_eff`:
/// `(rD + (K/N)(r+2D)·D_act) / ((D+2)M + (K/N)·3D·D_act)`.
pub fn compute_ratio(p: &CostParams) -> f64 {
    let (n, m, d, d_act, r, k) = (p.n as f64, p.m as f64, p.d as f64, p.d_act as f64, p.r as f64, p.k as f64);
    let frac = k / n;
    (r * d + frac * (r + 2.0 * d) * d_act) / ((d + 2.0) * m + frac * 3.0 * d * d_act)
}

/// Communication savings of the routing-free layer: `(Δα, Δ_B)` with
/// `Δα = (M−2)α` and `Δ_B = (K+1−M)·T·D·b/(M·B)`.
pub fn comm_deltas(p: &CostParams) -> (f64, f64) {
    let m = p.m as f64;
    ((m - 2.0) * p.alpha, p.bandwidth_term(p.k as f64 + 1.0 - m))
}

/// One row of the grid-sweep output.
#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub params: CostParams,
    pub moe_t_routing: f64,
    pub moe_t_a2a: f64,
    pub moe_t_expert: f64,
    pub moe_total: f64,
    pub rf_t_ag: f64,
    pub rf_t_scoring: f64,
    pub rf_t_expert_star: f64,
    pub rf_t_combine: f64,
    pub rf_total: f64,
    pub compute_ratio: f64,
    pub delta_alpha: f64,
    pub delta_b: f64,
}

pub fn evaluate(p: &CostParams) -> Result<CostRow> {
    let moe = cost_standard_moe(p)?;
    let rf = cost_rfmoe(p)?;
    let (delta_alpha, delta_b) = comm_deltas(p);
    Ok(CostRow {
        params: *p,
        moe_t_routing: moe.t_routing,
        moe_t_a2a: moe.t_a2a,
        moe_t_expert: moe.t_expert,
        moe_total: moe.total,
        rf_t_ag: rf.t_ag,
        rf_t_scoring: rf.t_scoring,
        rf_t_expert_star: rf.t_expert_star,
        rf_t_combine: rf.t_combine,
        rf_total: rf.total,
        compute_ratio: compute_ratio(p),
        delta_alpha,
        delta_b,
    })
}

/// Evaluate every grid point; order is preserved.
pub fn evaluate_grid(exec: Execution, grid: &[CostParams]) -> Vec<Result<CostRow>> {
    exec::map(exec, grid, evaluate)
}

/// Input row of a grid file. A missing `k_eff` means `k_eff = k`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRow {
    n: usize,
    m: usize,
    t: usize,
    d: usize,
    d_act: usize,
    r: usize,
    k: usize,
    #[serde(default)]
    k_eff: Option<f64>,
    bytes: f64,
    alpha: f64,
    bandwidth: f64,
    compute_rate: f64,
}

/// Parse a grid CSV. Each entry pairs the 1-based data row number with the
/// parsed and validated point, or the reason it was rejected.
pub fn read_grid<R: Read>(input: R) -> Result<Vec<(usize, Result<CostParams>)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<GridRow>().enumerate() {
        let parsed = rec.map_err(|e| Error::Format(e.to_string())).and_then(|g| {
            let p = CostParams {
                n: g.n,
                m: g.m,
                t: g.t,
                d: g.d,
                d_act: g.d_act,
                r: g.r,
                k: g.k,
                k_eff: g.k_eff.unwrap_or(g.k as f64),
                bytes: g.bytes,
                alpha: g.alpha,
                bandwidth: g.bandwidth,
                compute_rate: g.compute_rate,
            };
            p.validate()?;
            Ok(p)
        });
        out.push((i + 1, parsed));
    }
    Ok(out)
}

/// Output columns: the input parameters, then the cost terms.
pub const GRID_COLUMNS: [&str; 24] = [
    "n", "m", "t", "d", "d_act", "r", "k", "k_eff", "bytes", "alpha", "bandwidth", "compute_rate",
    "moe_t_routing", "moe_t_a2a", "moe_t_expert", "moe_total", "rf_t_ag", "rf_t_scoring", "rf_t_expert_star",
    "rf_t_combine", "rf_total", "compute_ratio", "delta_alpha", "delta_b",
];

impl CostRow {
    fn record(&self) -> Vec<String> {
        let p = &self.params;
        let ints = [p.n, p.m, p.t, p.d, p.d_act, p.r, p.k].map(|v| v.to_string());
        let floats = [
            p.k_eff,
            p.bytes,
            p.alpha,
            p.bandwidth,
            p.compute_rate,
            self.moe_t_routing,
            self.moe_t_a2a,
            self.moe_t_expert,
            self.moe_total,
            self.rf_t_ag,
            self.rf_t_scoring,
            self.rf_t_expert_star,
            self.rf_t_combine,
            self.rf_total,
            self.compute_ratio,
            self.delta_alpha,
            self.delta_b,
        ]
        .map(|v| format!("{v:e}"));
        ints.into_iter().chain(floats).collect()
    }
}

pub fn write_grid_csv<W: Write>(out: W, rows: &[CostRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(GRID_COLUMNS)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Random points with `r < D/4`, `M ≤ D_act/4` and `K = K_eff`.
pub fn random_grid(seed: u64, count: usize) -> Vec<CostParams> {
    let mut rng = stream(seed, Stream::Grid);
    (0..count)
        .map(|_| {
            let d = 1usize << rng.random_range(6..=12);
            let d_act = d >> rng.random_range(0..=2);
            let m = rng.random_range(1..=(d_act / 4).min(64));
            let n = m * rng.random_range(1..=8);
            let k = rng.random_range(1..=n);
            let log_uniform = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| {
                10f64.powf(rng.random_range(lo..hi))
            };
            CostParams {
                n,
                m,
                t: rng.random_range(1..=8192),
                d,
                d_act,
                r: rng.random_range(1..d / 4),
                k,
                k_eff: k as f64,
                bytes: [1.0, 2.0, 4.0][rng.random_range(0..3)],
                alpha: log_uniform(&mut rng, -7.0, -4.0),
                bandwidth: log_uniform(&mut rng, 9.0, 12.0),
                compute_rate: log_uniform(&mut rng, 11.0, 15.0),
            }
        })
        .collect()
}
