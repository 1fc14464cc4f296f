//! Optimizer, learning-rate schedule, the training loop, checkpoints and the
//! finite-difference gradient harness.

pub mod checkpoint;
mod gradcheck;
mod optim;
mod state;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

pub use gradcheck::{check_gradient, grad_check, relative_error, REL_FLOOR};
pub use optim::{adam_step, adam_update_values, clip_global_norm, lr_at, AdamMoments, OptimConfig};
pub use state::TrainState;

use crate::error::{ensure, Error, Result};
use crate::model::{ForwardOptions, LanguageModel, NllMetrics, Params, Trace};
use crate::rng;

/// Supplies training windows of `n + 1` tokens.
///
/// Windows must be a pure function of the arguments so that a run resumed from
/// a checkpoint sees the same data as an uninterrupted one.
pub trait WindowSource: Sync {
    fn window(&self, seed: u64, step: u64, index: usize, n: usize) -> Vec<u32>;
}

/// Contiguous windows from a token sequence, with uniformly drawn starts and
/// wraparound at the end.
#[derive(Debug, Clone)]
pub struct CorpusWindows<'a> {
    tokens: &'a [u32],
}

impl<'a> CorpusWindows<'a> {
    pub fn new(tokens: &'a [u32], n: usize) -> Result<Self> {
        ensure!(
            tokens.len() > n,
            "corpus of {} tokens is too small for sequence length {n}",
            tokens.len()
        );
        Ok(Self { tokens })
    }
}

impl WindowSource for CorpusWindows<'_> {
    fn window(&self, seed: u64, step: u64, index: usize, n: usize) -> Vec<u32> {
        let len = self.tokens.len();
        let start = rng::stream(seed, &[0xda7a, step, index as u64]).random_range(0..len);
        (0..=n).map(|i| self.tokens[(start + i) % len]).collect()
    }
}

/// Non-overlapping evaluation windows of `n + 1` tokens from the front of
/// `tokens`, at most `max` of them. A sequence shorter than one window
/// yields a single window wrapping around to its start.
pub fn eval_windows(tokens: &[u32], n: usize, max: usize) -> Result<Vec<Vec<u32>>> {
    ensure!(!tokens.is_empty(), "evaluation set is empty");
    ensure!(n >= 1 && max >= 1, "need a positive window length and count");
    if tokens.len() < n + 1 {
        return Ok(vec![(0..=n).map(|i| tokens[i % tokens.len()]).collect()]);
    }
    Ok(tokens
        .chunks_exact(n + 1)
        .take(max)
        .map(<[u32]>::to_vec)
        .collect())
}

/// Mean per-token metrics over `windows`. Read-only: centroids are not touched.
pub fn evaluate(model: &LanguageModel, windows: &[Vec<u32>], seed: u64) -> Result<NllMetrics> {
    ensure!(!windows.is_empty(), "nothing to evaluate");
    let per: Vec<(f64, usize)> = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let m = model.evaluate_window(w, rng::derive(seed, &[0xe7a1, i as u64]))?;
            Ok((m.nats * (w.len() - 1) as f64, w.len() - 1))
        })
        .collect::<Result<_>>()?;
    let (sum, count) = per.iter().fold((0.0, 0), |(s, c), &(x, k)| (s + x, c + k));
    Ok(NllMetrics::from_nats(sum / count as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub batch: usize,
    /// Evaluate every this many steps; 0 evaluates only at the start and end.
    pub eval_every: u64,
    pub eval_windows: usize,
    /// Save a checkpoint every this many steps; 0 disables checkpoints.
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            batch: 4,
            eval_every: 100,
            eval_windows: 8,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        ensure!(self.batch >= 1, "batch must be >= 1");
        ensure!(self.eval_windows >= 1, "eval_windows must be >= 1");
        ensure!(
            self.checkpoint_every == 0 || self.checkpoint_dir.is_some(),
            "checkpoint cadence set without a checkpoint directory"
        );
        Ok(())
    }
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    /// Mean training loss of the batch in nats per token.
    pub loss: f64,
    pub grad_norm: f64,
    pub attn_macs: u64,
    pub centroid_updates: usize,
}

/// Per-interval training and evaluation figures.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub step: u64,
    pub lr: f64,
    /// Mean training loss over the steps since the previous row.
    pub train: Option<NllMetrics>,
    pub eval: Option<NllMetrics>,
    pub attn_macs: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
    /// Every step's training loss in nats, in order.
    pub losses: Vec<f64>,
    /// Wall-clock seconds per reported interval, kept apart from the rows so
    /// that the rows are reproducible.
    pub timings: Vec<(u64, f64)>,
}

fn metric_cells(m: Option<NllMetrics>) -> String {
    match m {
        Some(m) => format!("{:.6}\t{:.6}", m.nats, m.bits_per_dim),
        None => "-\t-".into(),
    }
}

impl TrainReport {
    pub fn final_eval(&self) -> Option<NllMetrics> {
        self.rows.iter().rev().find_map(|r| r.eval)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("step\tlr\ttrain_nats\ttrain_bpd\teval_nats\teval_bpd\tattn_macs\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{:.6e}\t{}\t{}\t{}",
                r.step,
                r.lr,
                metric_cells(r.train),
                metric_cells(r.eval),
                r.attn_macs
            );
        }
        s
    }

    pub fn timings_tsv(&self) -> String {
        let mut s = String::from("step\tseconds\n");
        for (step, secs) in &self.timings {
            let _ = writeln!(s, "{step}\t{secs:.6}");
        }
        s
    }
}

/// Owns the training state and advances it one optimizer step at a time.
pub struct Trainer {
    pub state: TrainState,
    pub config: TrainConfig,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(state: TrainState, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            state,
            config,
            last_checkpoint: None,
        })
    }

    pub fn last_checkpoint(&self) -> Option<&PathBuf> {
        self.last_checkpoint.as_ref()
    }

    fn numeric_abort(&self, what: String) -> Error {
        let at = match &self.last_checkpoint {
            Some(p) => format!("last good checkpoint: {}", p.display()),
            None => "no checkpoint has been written".into(),
        };
        Error::Numeric(format!("{what}; {at}"))
    }

    /// One optimizer step: sample a batch, forward, loss, backward, clip,
    /// Adam, then one centroid update per routing head.
    pub fn step(&mut self, source: &dyn WindowSource) -> Result<StepStats> {
        let st = &self.state;
        let t = st.step + 1;
        let n = st.config().max_seq;
        let lr = lr_at(t, self.config.optim.lr, self.config.optim.warmup)?;
        let results: Vec<(f64, Params, Trace)> = (0..self.config.batch)
            .into_par_iter()
            .map(|b| {
                let window = source.window(st.seed, t, b, n);
                let opts = ForwardOptions {
                    train: true,
                    plan_seed: rng::derive(st.seed, &[0x5eed, t, b as u64]),
                    frozen: None,
                };
                st.model.loss_and_grad(&window, &opts)
            })
            .collect::<Result<_>>()?;

        let scale = 1.0 / results.len() as f64;
        let mut loss = 0.0;
        let mut macs = 0;
        let mut grads = st.model.params.zeros_like();
        for (l, g, tr) in &results {
            loss += l;
            macs += tr.attn_macs;
            grads.add_assign(g);
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(self.numeric_abort(format!("non-finite training loss at step {t}")));
        }
        grads.scale(scale);
        let grad_norm = match self.config.optim.clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => grads.global_norm(),
        };

        let state = &mut self.state;
        if let Err(e) = adam_step(&mut state.model.params, &mut state.moments, &grads, t, lr, &self.config.optim) {
            return Err(self.numeric_abort(e.to_string()));
        }
        let traces: Vec<&Trace> = results.iter().map(|r| &r.2).collect();
        let centroid_updates = self.state.model.apply_centroid_updates(&traces)?;
        self.state.step = t;

        if self.config.checkpoint_every > 0 && t.is_multiple_of(self.config.checkpoint_every) {
            if let Some(dir) = &self.config.checkpoint_dir {
                let path = dir.join(format!("step-{t:08}.rtck"));
                checkpoint::save(&self.state, &path)?;
                self.last_checkpoint = Some(path);
            }
        }
        Ok(StepStats {
            step: t,
            lr,
            loss,
            grad_norm,
            attn_macs: macs,
            centroid_updates,
        })
    }

    /// Runs `steps` more steps. The report starts with an evaluation of the
    /// current state and gains a row every `eval_every` steps and at the end.
    pub fn run(&mut self, source: &dyn WindowSource, eval: &[Vec<u32>], steps: u64) -> Result<TrainReport> {
        let eval_seed = rng::derive(self.state.seed, &[0xe7a1]);
        let mut report = TrainReport::default();
        let mut clock = Instant::now();
        report.rows.push(ReportRow {
            step: self.state.step,
            lr: 0.0,
            train: None,
            eval: Some(evaluate(&self.state.model, eval, eval_seed)?),
            attn_macs: 0,
        });
        report.timings.push((self.state.step, clock.elapsed().as_secs_f64()));

        let (mut sum, mut count, mut macs) = (0.0, 0u64, 0u64);
        for i in 1..=steps {
            let s = self.step(source)?;
            report.losses.push(s.loss);
            sum += s.loss;
            count += 1;
            macs += s.attn_macs;
            let due = self.config.eval_every > 0 && s.step % self.config.eval_every == 0;
            if due || i == steps {
                report.rows.push(ReportRow {
                    step: s.step,
                    lr: s.lr,
                    train: Some(NllMetrics::from_nats(sum / count as f64)),
                    eval: Some(evaluate(&self.state.model, eval, eval_seed)?),
                    attn_macs: macs,
                });
                report.timings.push((s.step, clock.elapsed().as_secs_f64()));
                clock = Instant::now();
                (sum, count, macs) = (0.0, 0, 0);
            }
        }
        Ok(report)
    }
}

/// Trains a fresh model on a token corpus. `eval_tokens` defaults to the
/// training tokens when empty.
pub fn train(
    model: crate::model::ModelConfig,
    config: TrainConfig,
    tokens: &[u32],
    eval_tokens: &[u32],
    seed: u64,
    steps: u64,
) -> Result<(TrainState, TrainReport)> {
    let n = model.max_seq;
    let source = CorpusWindows::new(tokens, n)?;
    let eval_src = if eval_tokens.is_empty() { tokens } else { eval_tokens };
    let windows = eval_windows(eval_src, n, config.eval_windows)?;
    let mut trainer = Trainer::new(TrainState::new(model, seed)?, config)?;
    let report = trainer.run(&source, &windows, steps)?;
    Ok((trainer.state, report))
}

#[cfg(test)]
mod tests;
