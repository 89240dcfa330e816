use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, TrainConfig};
use super::corpus::{synth_corpus, Batch, Corpus};
use super::metrics::MetricsRecord;
use super::model::Model;
use super::objective::{objective, Objective};
use super::optim::{clip_global_norm, AdamW};
use crate::balancing::{lambda_update, BalanceLoss, BalanceState, Coefficient};
use crate::error::{Error, Result};
use crate::gating::ForwardOptions;
use crate::numerics::{Tape, Tensor};
use crate::rng::{stream, Stream};

/// Gradients of the total objective with respect to every parameter.
pub fn gradients(
    model: &Model,
    batch: &Batch,
    config: &TrainConfig,
    loss_kind: BalanceLoss,
    lambda: f64,
) -> Result<(Vec<Tensor>, ObjectiveValues)> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let fwd = model.forward(&mut tape, &vars, batch, ForwardOptions::default())?;
    let obj = objective(&mut tape, &fwd, &model.config.gate, &config.balance, loss_kind, lambda)?;
    let values = ObjectiveValues::new(&tape, &obj);
    let mut grads = tape.backward(obj.total)?;
    let g = vars
        .iter()
        .map(|&v| grads.take(v).expect("every parameter is a leaf"))
        .collect();
    Ok((g, values))
}

/// Plain-value summary of an [`Objective`].
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValues {
    pub total: f64,
    pub loss_lm: f64,
    pub loss_lb: f64,
    pub lambda: f64,
    pub rho: f64,
    pub rho_tilde: f64,
    pub per_layer_rho: Vec<f64>,
}

impl ObjectiveValues {
    fn new(tape: &Tape, obj: &Objective) -> Self {
        ObjectiveValues {
            total: tape.value(obj.total).item(),
            loss_lm: obj.loss_lm,
            loss_lb: obj.loss_lb,
            lambda: obj.lambda,
            rho: obj.density.rho,
            rho_tilde: obj.density.rho_tilde,
            per_layer_rho: obj.density.per_layer_rho.clone(),
        }
    }
}

/// Mean next-token loss of `model` over `batches`, weighted by token count.
pub fn evaluate_loss(model: &Model, batches: &[Batch], opts: ForwardOptions) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for b in batches {
        let mut tape = Tape::new();
        let vars = model.register_frozen(&mut tape);
        let fwd = model.forward(&mut tape, &vars, b, opts)?;
        total += tape.value(fwd.loss_lm).item() * b.targets.len() as f64;
        tokens += b.targets.len();
    }
    Ok(total / tokens as f64)
}

/// Owns the model, optimizer, controller, and data for one run.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub loss_kind: BalanceLoss,
    pub corpus: Corpus,
    optimizer: AdamW,
    controller: BalanceState,
    batch_rng: ChaCha8Rng,
    val_batches: Vec<Batch>,
    step: usize,
    last: Option<MetricsRecord>,
}

impl Trainer {
    pub fn new(model_config: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        Self::from_model(Model::build(model_config)?, config)
    }

    pub fn from_model(model: Model, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let loss_kind = config.balance_loss(&model.config.gate)?;
        let mc = &model.config;
        let min_tokens = 20 * (mc.seq_len + 1);
        if config.corpus_tokens < min_tokens {
            return Err(Error::config(
                "train.corpus_tokens",
                format!("must be at least {min_tokens} for seq_len {}", mc.seq_len),
            ));
        }
        let corpus = synth_corpus(mc.seed, mc.vocab, config.corpus_tokens);
        let val_batches = Batch::sequential(&corpus.val, config.batch_size, mc.seq_len, config.val_batches);
        Ok(Trainer {
            optimizer: AdamW::new(&model.params, config.lr, config.betas, config.weight_decay),
            controller: BalanceState::new(config.balance.lambda0),
            batch_rng: stream(mc.seed, Stream::Batches),
            val_batches,
            corpus,
            loss_kind,
            config: config.clone(),
            model,
            step: 0,
            last: None,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn lambda(&self) -> f64 {
        self.controller.lambda_t
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.controller.lambda_t = lambda;
    }

    pub fn last_record(&self) -> Option<&MetricsRecord> {
        self.last.as_ref()
    }

    pub fn validation_batches(&self) -> &[Batch] {
        &self.val_batches
    }

    pub fn next_batch(&mut self) -> Batch {
        let mc = &self.model.config;
        Batch::sample(&self.corpus.train, self.config.batch_size, mc.seq_len, &mut self.batch_rng)
    }

    pub fn validation_loss(&self) -> Result<f64> {
        evaluate_loss(&self.model, &self.val_batches, ForwardOptions::default())
    }

    /// Forward, backward, optimizer step, then controller update on the batch density.
    pub fn train_step(&mut self, batch: &Batch) -> Result<MetricsRecord> {
        let step = self.step + 1;
        let (mut grads, v) = gradients(&self.model, batch, &self.config, self.loss_kind, self.lambda())?;
        if !v.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: format!("loss_total = {} (loss_lm = {}, loss_lb = {})", v.total, v.loss_lm, v.loss_lb),
            });
        }
        let norm = if self.config.grad_clip > 0.0 {
            clip_global_norm(&mut grads, self.config.grad_clip)
        } else {
            super::optim::global_norm(&grads)
        };
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: format!("gradient norm = {norm}"),
            });
        }
        self.optimizer.step(&mut self.model.params, &grads)?;
        if self.config.balance.coefficient == Coefficient::Adaptive {
            let b = &self.config.balance;
            self.controller = lambda_update(self.controller, v.rho, b.rho_inf, b.eta);
        }
        self.step = step;
        let rec = MetricsRecord {
            step,
            loss_total: v.total,
            loss_lm: v.loss_lm,
            loss_lb: v.loss_lb,
            lambda: v.lambda,
            rho: v.rho,
            rho_tilde: v.rho_tilde,
            per_layer_rho: v.per_layer_rho,
            val_loss: None,
        };
        self.last = Some(rec.clone());
        Ok(rec)
    }

    /// Sample a batch and train on it; evaluates validation loss on schedule.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let batch = self.next_batch();
        let mut rec = self.train_step(&batch)?;
        if rec.step % self.config.eval_every == 0 || rec.step == self.config.steps {
            rec.val_loss = Some(self.validation_loss()?);
            self.last = Some(rec.clone());
        }
        Ok(rec)
    }

    /// Run the remaining configured steps, handing each record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let rec = self.step()?;
            sink(&rec)?;
        }
        Ok(())
    }
}

/// Train from scratch and collect every record.
pub fn train_loop(model_config: &ModelConfig, config: &TrainConfig) -> Result<(Model, Vec<MetricsRecord>)> {
    let mut t = Trainer::new(model_config, config)?;
    let mut records = Vec::with_capacity(config.steps);
    t.run(|r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((t.model, records))
}
