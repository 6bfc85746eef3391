//! Inference benchmark: one shared encoder pass feeding every head versus
//! one encoder pass per head.

use std::time::{Duration, Instant};

use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::encoder::{EncoderParams, InputBatch, Mode};
use crate::error::{Error, Result};
use crate::heads::{self, HeadKind, HeadParams, TaskSpec};
use crate::rng;
use crate::tokenizer::{CLS, RESERVED, SEP};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub n_inputs: usize,
    /// Timed repetitions; the median is reported.
    pub reps: usize,
    /// Untimed repetitions run first.
    pub warmups: usize,
    /// Tokens per input, `[CLS]` and `[SEP]` included. Capped at the
    /// encoder's `max_seq_len`.
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_inputs: 16,
            reps: 5,
            warmups: 2,
            seq_len: 64,
            seed: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_inputs == 0 {
            return Err(Error::Config("benchmark needs at least one input".into()));
        }
        if self.reps < 5 {
            return Err(Error::Config(format!("need at least 5 timed repetitions, got {}", self.reps)));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must leave room for [CLS] and [SEP]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub heads: usize,
    pub n_inputs: usize,
    pub seq_len: usize,
    pub shared_forwards: u64,
    pub isolated_forwards: u64,
    pub shared: Duration,
    pub isolated: Duration,
}

impl BenchReport {
    pub fn forward_ratio(&self) -> f64 {
        self.isolated_forwards as f64 / self.shared_forwards as f64
    }

    pub fn wall_ratio(&self) -> f64 {
        self.isolated.as_secs_f64() / self.shared.as_secs_f64()
    }
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "heads\t{}", self.heads)?;
        writeln!(f, "inputs\t{}", self.n_inputs)?;
        writeln!(f, "seq_len\t{}", self.seq_len)?;
        writeln!(f, "shared_forwards\t{}", self.shared_forwards)?;
        writeln!(f, "isolated_forwards\t{}", self.isolated_forwards)?;
        writeln!(f, "shared_median_s\t{:.6}", self.shared.as_secs_f64())?;
        writeln!(f, "isolated_median_s\t{:.6}", self.isolated.as_secs_f64())?;
        writeln!(f, "forward_ratio\t{:.3}", self.forward_ratio())?;
        write!(f, "wall_ratio\t{:.3}", self.wall_ratio())
    }
}

/// Random single-segment inputs over the non-reserved vocabulary.
pub fn random_inputs(encoder: &EncoderParams, n: usize, seq_len: usize, seed: u64) -> Vec<InputBatch> {
    let cfg = &encoder.config;
    let len = seq_len.min(cfg.max_seq_len);
    let mut r = rng::stream(seed, "bench", &[]);
    (0..n)
        .map(|_| {
            let mut ids = vec![CLS];
            ids.extend((2..len).map(|_| r.random_range(RESERVED.len()..cfg.vocab_size)));
            ids.push(SEP);
            InputBatch {
                batch: 1,
                seq_len: len,
                token_ids: ids,
                segment_ids: vec![0; len],
                attention_mask: vec![1; len],
            }
        })
        .collect()
}

fn apply_head(tape: &mut Tape, hidden: crate::autodiff::Var, task: &TaskSpec, head: &HeadParams) -> Result<Tensor> {
    let out = match task.head_kind {
        HeadKind::Ner => heads::ner_logits(tape, hidden, head)?,
        HeadKind::Sts => heads::sts_predict(tape, hidden, head)?,
        HeadKind::Nli => heads::nli_logits(tape, hidden, head)?,
    };
    Ok(tape.value(out).clone())
}

/// Head outputs for every input, computed with one encoder pass per input.
/// Returns the outputs and the number of encoder passes.
pub fn shared_pass(
    encoder: &EncoderParams,
    tasks: &[TaskSpec],
    heads: &[HeadParams],
    inputs: &[InputBatch],
) -> Result<(Vec<Vec<Tensor>>, u64)> {
    let mut forwards = 0;
    let mut outs = Vec::with_capacity(inputs.len());
    for input in inputs {
        let mut tape = Tape::new();
        let hidden = encoder.forward(&mut tape, input, Mode::Eval)?;
        forwards += 1;
        let row = tasks
            .iter()
            .zip(heads)
            .map(|(t, h)| apply_head(&mut tape, hidden, t, h))
            .collect::<Result<Vec<_>>>()?;
        outs.push(row);
    }
    Ok((outs, forwards))
}

/// Same outputs as [`shared_pass`], but each head runs its own encoder pass.
pub fn isolated_pass(
    encoder: &EncoderParams,
    tasks: &[TaskSpec],
    heads: &[HeadParams],
    inputs: &[InputBatch],
) -> Result<(Vec<Vec<Tensor>>, u64)> {
    let mut forwards = 0;
    let mut outs = Vec::with_capacity(inputs.len());
    for input in inputs {
        let mut row = Vec::with_capacity(tasks.len());
        for (t, h) in tasks.iter().zip(heads) {
            let mut tape = Tape::new();
            let hidden = encoder.forward(&mut tape, input, Mode::Eval)?;
            forwards += 1;
            row.push(apply_head(&mut tape, hidden, t, h)?);
        }
        outs.push(row);
    }
    Ok((outs, forwards))
}

fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

type Pass = fn(&EncoderParams, &[TaskSpec], &[HeadParams], &[InputBatch]) -> Result<(Vec<Vec<Tensor>>, u64)>;

fn time_pass(
    pass: Pass,
    cfg: &BenchConfig,
    encoder: &EncoderParams,
    tasks: &[TaskSpec],
    heads: &[HeadParams],
    inputs: &[InputBatch],
) -> Result<(Duration, u64)> {
    for _ in 0..cfg.warmups {
        pass(encoder, tasks, heads, inputs)?;
    }
    let mut times = Vec::with_capacity(cfg.reps);
    let mut forwards = 0;
    for _ in 0..cfg.reps {
        let start = Instant::now();
        let (_, f) = pass(encoder, tasks, heads, inputs)?;
        times.push(start.elapsed());
        forwards = f;
    }
    Ok((median(times), forwards))
}

/// Times both modes. Encoder-forward counts are exact; the wall-clock
/// figures are medians over `cfg.reps` runs.
pub fn bench(encoder: &EncoderParams, tasks: &[TaskSpec], heads: &[HeadParams], cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    if tasks.is_empty() || tasks.len() != heads.len() {
        return Err(Error::Config(format!(
            "benchmark needs one head per task and at least one task, got {} tasks and {} heads",
            tasks.len(),
            heads.len()
        )));
    }
    let inputs = random_inputs(encoder, cfg.n_inputs, cfg.seq_len, cfg.seed);
    let (shared, shared_forwards) = time_pass(shared_pass, cfg, encoder, tasks, heads, &inputs)?;
    let (isolated, isolated_forwards) = time_pass(isolated_pass, cfg, encoder, tasks, heads, &inputs)?;
    Ok(BenchReport {
        heads: tasks.len(),
        n_inputs: cfg.n_inputs,
        seq_len: inputs[0].seq_len,
        shared_forwards,
        isolated_forwards,
        shared,
        isolated,
    })
}
