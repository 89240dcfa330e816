use std::io::Write;

use crate::error::Result;

/// One training step's diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_lm: f64,
    pub loss_lb: f64,
    pub lambda: f64,
    pub rho: f64,
    pub rho_tilde: f64,
    pub per_layer_rho: Vec<f64>,
    pub val_loss: Option<f64>,
}

/// `step,loss_total,loss_lm,loss_lb,lambda,rho,rho_tilde,rho_l0..rho_l{L-1},val_loss`.
pub fn metrics_header(layers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "loss_total", "loss_lm", "loss_lb", "lambda", "rho", "rho_tilde"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..layers).map(|l| format!("rho_l{l}")));
    h.push("val_loss".into());
    h
}

impl MetricsRecord {
    pub fn to_row(&self) -> Vec<String> {
        let mut row = vec![
            self.step.to_string(),
            self.loss_total.to_string(),
            self.loss_lm.to_string(),
            self.loss_lb.to_string(),
            self.lambda.to_string(),
            self.rho.to_string(),
            self.rho_tilde.to_string(),
        ];
        row.extend(self.per_layer_rho.iter().map(f64::to_string));
        row.push(self.val_loss.map(|v| v.to_string()).unwrap_or_default());
        row
    }
}

/// CSV sink for [`MetricsRecord`]s.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W, layers: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(metrics_header(layers))?;
        Ok(MetricsWriter { inner })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.inner.write_record(rec.to_row())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}
