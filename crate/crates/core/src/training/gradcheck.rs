//! End-to-end gradient check of the training objective.

use rand::Rng;

use super::config::{ModelConfig, TrainConfig};
use super::corpus::{synth_corpus, Batch};
use super::model::Model;
use super::objective::objective;
use crate::error::{Error, Result};
use crate::gating::ForwardOptions;
use crate::numerics::{relative_error, Tape, Tensor};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub samples: usize,
    /// Fixed balancing coefficient.
    pub lambda: f64,
    pub batch_size: usize,
    pub step: f64,
    /// Required distance of every gate quantity from a kink or threshold.
    pub min_margin: f64,
    /// Model seeds tried (starting at the config seed) until one clears the margin.
    pub max_tries: usize,
    pub tolerance: f64,
    /// Negative control: scale the backward rule of the loss node by 1.5.
    pub inject_fault: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            samples: 50,
            lambda: 0.5,
            batch_size: 2,
            step: 1e-5,
            min_margin: 1e-3,
            max_tries: 500,
            tolerance: 1e-4,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub model_seed: u64,
    pub margin: f64,
    pub samples: Vec<GradSample>,
    pub max_rel_err: f64,
    pub passed: bool,
}

struct Evaluated {
    loss: f64,
    masks: Vec<Tensor>,
    margin: f64,
}

fn evaluate_objective(
    model: &Model,
    batch: &Batch,
    train: &TrainConfig,
    lambda: f64,
    fault: bool,
    want_grads: bool,
) -> Result<(Evaluated, Option<Vec<Tensor>>)> {
    let kind = train.balance_loss(&model.config.gate)?;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let fwd = model.forward(&mut tape, &vars, batch, ForwardOptions::default())?;
    let obj = objective(&mut tape, &fwd, &model.config.gate, &train.balance, kind, lambda)?;
    let mut total = obj.total;
    if fault {
        let value = tape.value(total).clone();
        total = tape.custom(&[total], value, Box::new(|g, _, _| vec![g.map(|v| 1.5 * v)]));
    }
    let ev = Evaluated {
        loss: tape.value(total).item(),
        masks: fwd.layers.iter().map(|l| l.f.clone()).collect(),
        margin: fwd.margin,
    };
    let grads = if want_grads {
        let mut g = tape.backward(total)?;
        Some(vars.iter().map(|&v| g.take(v).expect("leaf gradient")).collect())
    } else {
        None
    };
    Ok((ev, grads))
}

/// Compare analytic gradients of `L_LM + λ·L_LB` against central differences
/// at `opts.samples` randomly chosen parameter entries.
pub fn gradcheck(model_config: &ModelConfig, train: &TrainConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    model_config.validate()?;
    train.balance.validate()?;
    let corpus = synth_corpus(model_config.seed, model_config.vocab, 40 * (model_config.seq_len + 1));

    for attempt in 0..opts.max_tries as u64 {
        let mut cfg = model_config.clone();
        cfg.seed = model_config.seed.wrapping_add(attempt);
        let mut model = Model::build(&cfg)?;
        let mut rng = stream(cfg.seed, Stream::GradCheck);
        let batch = Batch::sample(&corpus.train, opts.batch_size, cfg.seq_len, &mut rng);
        let (base, grads) = evaluate_objective(&model, &batch, train, opts.lambda, opts.inject_fault, true)?;
        if base.margin < opts.min_margin {
            continue;
        }
        let grads = grads.expect("requested");

        let mut samples = Vec::with_capacity(opts.samples);
        let mut masks_moved = false;
        for _ in 0..opts.samples {
            let p = rng.random_range(0..model.params.len());
            let i = rng.random_range(0..model.params[p].numel());
            let orig = model.params[p].data()[i];
            let at = |v: f64, model: &mut Model| -> Result<Evaluated> {
                model.params[p].data_mut()[i] = v;
                Ok(evaluate_objective(model, &batch, train, opts.lambda, false, false)?.0)
            };
            let plus = at(orig + opts.step, &mut model)?;
            let minus = at(orig - opts.step, &mut model)?;
            model.params[p].data_mut()[i] = orig;
            if plus.masks != base.masks || minus.masks != base.masks {
                masks_moved = true;
                break;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * opts.step);
            let analytic = grads[p].data()[i];
            samples.push(GradSample {
                param: model.names[p].clone(),
                index: i,
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric, 1e-6),
            });
        }
        if masks_moved {
            continue;
        }
        let max_rel_err = samples.iter().map(|s| s.rel_err).fold(0.0, f64::max);
        return Ok(GradcheckReport {
            model_seed: cfg.seed,
            margin: base.margin,
            passed: max_rel_err <= opts.tolerance,
            samples,
            max_rel_err,
        });
    }
    Err(Error::Degenerate(format!(
        "no model seed within {} tries kept every gate {} away from a kink",
        opts.max_tries, opts.min_margin
    )))
}
