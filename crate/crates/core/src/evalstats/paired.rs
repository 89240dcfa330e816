use std::f64::consts::PI;
use std::fmt;

use crate::error::{Error, Result};

/// One-sided paired comparison of `b` against `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedStats {
    pub n: usize,
    /// Mean of `b − a`.
    pub mean_delta: f64,
    pub t_stat: f64,
    /// `P(T > t)` under Student-t with `n − 1` degrees of freedom.
    pub p_one_sided: f64,
    /// Mean difference over the sample sd of the differences.
    pub cohens_d: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

impl fmt::Display for PairedStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>4} {:>10} {:>8} {:>8} {:>8} {:>5} {:>6}", "n", "mean_delta", "t", "p", "d", "wins", "losses")?;
        write!(
            f,
            "{:>4} {:>+10.4} {:>8.4} {:>8.5} {:>8.4} {:>5} {:>6}",
            self.n, self.mean_delta, self.t_stat, self.p_one_sided, self.cohens_d, self.wins, self.losses
        )
    }
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedStats> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Contract(format!("need at least 2 pairs, got {n}")));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Contract("scores must be finite".into()));
    }
    let delta: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let mean = delta.iter().sum::<f64>() / n as f64;
    let var = delta.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    // Differences that agree to rounding error are a constant shift.
    if sd <= 1e-12 * mean.abs() {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let t = mean / (sd / (n as f64).sqrt());
    let wins = delta.iter().filter(|&&d| d > 0.0).count();
    let losses = delta.iter().filter(|&&d| d < 0.0).count();
    Ok(PairedStats {
        n,
        mean_delta: mean,
        t_stat: t,
        p_one_sided: student_t_sf(t, (n - 1) as f64),
        cohens_d: mean / sd,
        wins,
        losses,
        ties: n - wins - losses,
    })
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection.
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = C[0];
    for (i, &c) in C.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

pub fn student_t_pdf(t: f64, df: f64) -> f64 {
    let ln_norm = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * PI).ln();
    (ln_norm - (df + 1.0) / 2.0 * (t * t / df).ln_1p()).exp()
}

/// Upper tail `P(T > t)`, by adaptive Simpson quadrature of the density.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    assert!(df > 0.0, "degrees of freedom must be positive");
    if t.is_nan() {
        return f64::NAN;
    }
    if t < 0.0 {
        return 1.0 - student_t_sf(-t, df);
    }
    if t.is_infinite() {
        return 0.0;
    }
    let f = |x: f64| student_t_pdf(x, df);
    let body = adaptive_simpson(&f, 0.0, t, 1e-13, 50);
    (0.5 - body).max(0.0)
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (fa, fb) = (f(a), f(b));
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}
