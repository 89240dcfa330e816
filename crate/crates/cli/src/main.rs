mod run_config;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rfmoe::epcost::{evaluate_grid, read_grid, write_grid_csv};
use rfmoe::evalstats::{paired_t_test, read_pairs, threshold_sweep, write_stats_csv, write_sweep_csv};
use rfmoe::exec::Execution;
use rfmoe::training::{checkpoint, gradcheck, synth_corpus, Batch, GradcheckOptions, MetricsWriter, Trainer};
use rfmoe::Error;

use run_config::RunConfig;

#[derive(Parser)]
#[command(name = "rfmoe", version, about = "Routing-free mixture-of-experts experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, model.ckpt and the resolved config.toml.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides model.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        /// Scale the loss backward rule by 1.5 (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Evaluate the expert-parallel cost model over a CSV grid.
    Simep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Exec::Parallel)]
        exec: Exec,
    },
    /// Re-evaluate a checkpoint with the activation threshold replaced.
    SweepTheta {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        thetas: Vec<f64>,
        #[arg(long, default_value_t = 4)]
        batches: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Length of the regenerated corpus; validation windows come from its last 10%.
        #[arg(long, default_value_t = 200_000)]
        corpus_tokens: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Exec::Parallel)]
        exec: Exec,
    },
    /// One-sided paired t-test on a two-column CSV of scores.
    Stats {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Exec {
    Sequential,
    Parallel,
}

impl From<Exec> for Execution {
    fn from(e: Exec) -> Self {
        match e {
            Exec::Sequential => Execution::Sequential,
            Exec::Parallel => Execution::Parallel,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

/// Exit status 1: bad input or configuration. Exit status 2: numerical failure.
enum Failure {
    Invalid(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => Failure::Numerical(e.to_string()),
            other => Failure::Invalid(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out),
        Command::Gradcheck {
            config,
            seed,
            samples,
            inject_fault,
        } => cmd_gradcheck(&config, seed, samples, inject_fault),
        Command::Simep { grid, out, exec } => cmd_simep(&grid, out.as_deref(), exec.into()),
        Command::SweepTheta {
            checkpoint,
            thetas,
            batches,
            batch_size,
            corpus_tokens,
            out,
            exec,
        } => cmd_sweep_theta(&checkpoint, &thetas, batches, batch_size, corpus_tokens, out.as_deref(), exec.into()),
        Command::Stats { pairs, format, out } => cmd_stats(&pairs, format, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Stdout, or a file when `path` is given.
fn sink(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_train(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> CmdResult {
    let mut rc = RunConfig::load(path)?;
    if let Some(s) = seed {
        rc.model.seed = s;
    }
    if let Some(o) = out {
        rc.output_dir = o;
    }
    rc.validate()?;
    let mut trainer = Trainer::new(&rc.model, &rc.train)?;
    fs::create_dir_all(&rc.output_dir)?;
    fs::write(rc.output_dir.join("config.toml"), rc.to_toml()?)?;

    let metrics = BufWriter::new(File::create(rc.output_dir.join("metrics.csv"))?);
    let mut writer = MetricsWriter::new(metrics, rc.model.layers)?;
    let (log_every, steps) = (rc.log_every, rc.train.steps);
    let outcome = trainer.run(|r| {
        if r.step % log_every == 0 || r.step == steps || r.val_loss.is_some() {
            writer.write(r)?;
        }
        Ok(())
    });
    writer.flush()?;
    outcome?;
    checkpoint::save(&trainer.model, &rc.output_dir.join("model.ckpt"))?;
    if let Some(r) = trainer.last_record() {
        println!(
            "step {} loss_lm {:.4} rho {:.4} val_loss {}",
            r.step,
            r.loss_lm,
            r.rho,
            r.val_loss.map(|v| format!("{v:.4}")).unwrap_or_default()
        );
    }
    Ok(())
}

fn cmd_gradcheck(path: &Path, seed: Option<u64>, samples: usize, inject_fault: bool) -> CmdResult {
    let mut rc = RunConfig::load(path)?;
    if let Some(s) = seed {
        rc.model.seed = s;
    }
    rc.validate()?;
    let opts = GradcheckOptions {
        samples,
        inject_fault,
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&rc.model, &rc.train, &opts)?;
    println!(
        "gate {} model_seed {} margin {:.3e} samples {} max_rel_err {:.3e} tolerance {:.0e}",
        rc.model.gate.name(),
        report.model_seed,
        report.margin,
        report.samples.len(),
        report.max_rel_err,
        opts.tolerance
    );
    if report.passed {
        println!("PASS");
        Ok(())
    } else {
        let worst = report
            .samples
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            .map(|s| format!("{}[{}]: analytic {:.6e} numeric {:.6e}", s.param, s.index, s.analytic, s.numeric))
            .unwrap_or_default();
        println!("FAIL");
        Err(Failure::Numerical(format!("gradient check failed; worst {worst}")))
    }
}

fn cmd_simep(grid: &Path, out: Option<&Path>, exec: Execution) -> CmdResult {
    let parsed = read_grid(File::open(grid)?)?;
    let mut points = Vec::new();
    for (row, p) in parsed {
        match p {
            Ok(p) => points.push(p),
            Err(e) => eprintln!("warning: skipping grid row {row}: {e}"),
        }
    }
    if points.is_empty() {
        return Err(Failure::Invalid(format!("{}: no valid grid rows", grid.display())));
    }
    let rows = evaluate_grid(exec, &points).into_iter().collect::<rfmoe::Result<Vec<_>>>()?;
    write_grid_csv(sink(out)?, &rows)?;
    Ok(())
}

fn cmd_sweep_theta(
    ckpt: &Path,
    thetas: &[f64],
    batches: usize,
    batch_size: usize,
    corpus_tokens: usize,
    out: Option<&Path>,
    exec: Execution,
) -> CmdResult {
    let model = checkpoint::load(ckpt)?;
    let mc = &model.config;
    if batches == 0 || batch_size == 0 {
        return Err(Failure::Invalid("--batches and --batch-size must be positive".into()));
    }
    if corpus_tokens < 20 * (mc.seq_len + 1) {
        return Err(Failure::Invalid(format!(
            "--corpus-tokens must be at least {}",
            20 * (mc.seq_len + 1)
        )));
    }
    let corpus = synth_corpus(mc.seed, mc.vocab, corpus_tokens);
    let eval = Batch::sequential(&corpus.val, batch_size, mc.seq_len, batches);
    let rows = threshold_sweep(exec, &model, &eval, thetas)?;
    write_sweep_csv(sink(out)?, &rows)?;
    Ok(())
}

fn cmd_stats(pairs: &Path, format: Format, out: Option<&Path>) -> CmdResult {
    let (a, b) = read_pairs(File::open(pairs)?).map_err(|e| Failure::Invalid(format!("{}: {e}", pairs.display())))?;
    let stats = paired_t_test(&a, &b)?;
    let mut w = sink(out)?;
    match format {
        Format::Csv => write_stats_csv(&mut w, &stats)?,
        Format::Table => writeln!(w, "{stats}")?,
    }
    w.flush()?;
    Ok(())
}
