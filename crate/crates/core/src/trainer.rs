//! Multitask training schedules and the single-task fine-tuning baseline.
//!
//! Every schedule shares one update rule: a batch of task `i` runs through
//! the encoder and head `i`, and the optimizer updates the encoder and that
//! head only. Losses of different heads are never mixed.

use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Optimizer, Param, Parameters, Tape};
use crate::data::{Batch, BatchIter, BatchTargets, TaskData, TaskFeatures, Targets};
use crate::encoder::{EncoderConfig, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::heads::{self, clamp_score, ner_decode, HeadKind, HeadParams, TagSet, TaskSpec};
use crate::metrics::{accuracy, micro_f1, pearson, MetricKind, MetricReport, SpanSet, Support};
use crate::rng;

/// Batch size used for evaluation forward passes.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    RoundRobin,
    Proportional,
    SingleTask,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::RoundRobin => "round_robin",
            Schedule::Proportional => "proportional",
            Schedule::SingleTask => "single_task",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        [Schedule::RoundRobin, Schedule::Proportional, Schedule::SingleTask].into_iter().find(|s| s.code() == code)
    }
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Schedule::RoundRobin, Schedule::Proportional, Schedule::SingleTask]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown schedule {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub alpha: f64,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub outer_loops: usize,
    pub seed: u64,
    pub schedule: Schedule,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            alpha: 5e-5,
            optimizer: OptimizerKind::Sgd,
            adam: AdamConfig::default(),
            outer_loops: 1,
            seed: 1,
            schedule: Schedule::RoundRobin,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.outer_loops == 0 {
            return Err(Error::Config("outer_loops must be >= 1".into()));
        }
        Ok(())
    }

    pub fn new_optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(self.adam)),
        }
    }
}

/// One update of the log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub outer_loop: u64,
    pub iteration: u64,
    pub step: u64,
    pub task_id: String,
    /// Batches drawn from this task so far in the outer loop, this one
    /// excluded.
    pub batch_index: u64,
    pub loss: f64,
    /// Wrap counters of every task after the draw, in registry order.
    pub wraps: Vec<u64>,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wraps: Vec<String> = self.wraps.iter().map(u64::to_string).collect();
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{:.16e}\t{}",
            self.outer_loop,
            self.iteration,
            self.step,
            self.task_id,
            self.batch_index,
            self.loss,
            wraps.join(",")
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub metrics: Vec<(String, MetricReport)>,
}

impl TrainLog {
    /// One tab-separated line per record: outer loop, iteration, step, task,
    /// batch index, loss (17 significant digits), wrap counters.
    pub fn to_tsv(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Position in the schedule. `slot` is the next task within a round-robin
/// iteration; `drawn` counts batches per task in the current outer loop.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    pub outer_loop: u64,
    pub iteration: u64,
    pub slot: usize,
    pub step: u64,
    pub drawn: Vec<u64>,
}

/// Forward, backward and one optimizer update of the encoder and `head` on
/// `batch`. Returns the loss before the update.
pub fn update_step(
    encoder: &mut EncoderParams,
    head: &mut HeadParams,
    kind: HeadKind,
    batch: &Batch,
    optimizer: &mut Optimizer,
    alpha: f64,
    mode: Mode,
) -> Result<f64> {
    let mut tape = Tape::new();
    let hidden = encoder.forward(&mut tape, &batch.input, mode)?;
    let loss = match (&batch.targets, kind) {
        (BatchTargets::Tags(t), HeadKind::Ner) => heads::ner_loss(&mut tape, hidden, head, t)?.0,
        (BatchTargets::Scores(s), HeadKind::Sts) => heads::sts_loss(&mut tape, hidden, head, s)?.0,
        (BatchTargets::Classes(c), HeadKind::Nli) => heads::nli_loss(&mut tape, hidden, head, c)?.0,
        _ => return Err(Error::Data(format!("batch targets do not fit a {} head", kind.name()))),
    };
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    tape.backward(loss)?;
    let mut params: Vec<&mut Param> = encoder.params_mut();
    params.extend(head.params_mut());
    for p in params.iter_mut() {
        p.zero_grad();
    }
    tape.accumulate_param_grads(&mut params)?;
    optimizer.step(&mut params, alpha)?;
    Ok(value)
}

/// Training state of a task registry: encoder, heads, batch iterators,
/// optimizer and schedule position. Datasets are passed to [`Trainer::step`].
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainerConfig,
    pub encoder: EncoderParams,
    pub tasks: Vec<TaskSpec>,
    pub heads: Vec<HeadParams>,
    pub iters: Vec<BatchIter>,
    pub optimizer: Optimizer,
    pub progress: Progress,
    /// Task sampler of the proportional schedule.
    pub sampler: Option<ChaCha8Rng>,
}

impl Trainer {
    /// Fresh encoder and heads from `config.seed`.
    pub fn new(config: TrainerConfig, encoder_config: &EncoderConfig, tasks: Vec<TaskSpec>, train_sizes: &[usize]) -> Result<Self> {
        let encoder = EncoderParams::init(encoder_config, config.seed)?;
        let heads = tasks
            .iter()
            .map(|t| HeadParams::init(t, encoder_config.hidden_dim, encoder_config.init_std, config.seed))
            .collect();
        Self::with_params(config, encoder, tasks, heads, train_sizes)
    }

    pub fn with_params(
        config: TrainerConfig,
        encoder: EncoderParams,
        tasks: Vec<TaskSpec>,
        heads: Vec<HeadParams>,
        train_sizes: &[usize],
    ) -> Result<Self> {
        config.validate()?;
        if tasks.is_empty() {
            return Err(Error::Config("task registry is empty".into()));
        }
        if config.schedule == Schedule::SingleTask && tasks.len() != 1 {
            return Err(Error::Config(format!("single_task schedule with {} tasks", tasks.len())));
        }
        if train_sizes.len() != tasks.len() || heads.len() != tasks.len() {
            return Err(Error::Config("tasks, heads and datasets differ in number".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            t.validate()?;
            if tasks[..i].iter().any(|u| u.task_id == t.task_id) {
                return Err(Error::Config(format!("duplicate task_id {:?}", t.task_id)));
            }
            let h = &heads[i];
            if h.out_dim() != t.out_dim() || h.hidden_dim() != encoder.config.hidden_dim {
                return Err(Error::Config(format!("head shape does not fit task {:?}", t.task_id)));
            }
        }
        if let Some(i) = train_sizes.iter().position(|&n| n == 0) {
            return Err(Error::Data(format!("training set of task {:?} is empty", tasks[i].task_id)));
        }
        let iters = tasks
            .iter()
            .zip(train_sizes)
            .map(|(t, &n)| BatchIter::new(n, t.batch_size, iter_seed(config.seed, &t.task_id), true))
            .collect::<Result<Vec<_>>>()?;
        let sampler = (config.schedule == Schedule::Proportional).then(|| rng::stream(config.seed, "proportional", &[]));
        Ok(Trainer {
            optimizer: config.new_optimizer(),
            progress: Progress {
                drawn: vec![0; tasks.len()],
                ..Progress::default()
            },
            config,
            encoder,
            tasks,
            heads,
            iters,
            sampler,
        })
    }

    /// Steps in one outer loop: the largest batch count for round robin
    /// (each iteration then visits every task), the sum of batch counts for
    /// proportional sampling.
    pub fn iterations_per_loop(&self) -> u64 {
        let counts = self.iters.iter().map(|it| it.batches_per_epoch() as u64);
        match self.config.schedule {
            Schedule::Proportional => counts.sum(),
            _ => counts.max().unwrap_or(0),
        }
    }

    pub fn is_done(&self) -> bool {
        self.progress.outer_loop >= self.config.outer_loops as u64
    }

    fn pick_task(&mut self) -> Result<usize> {
        match self.config.schedule {
            Schedule::Proportional => {
                let weights: Vec<usize> = self.iters.iter().map(BatchIter::len).collect();
                let dist = WeightedIndex::new(&weights).map_err(|e| Error::Data(e.to_string()))?;
                let r = self.sampler.as_mut().ok_or_else(|| Error::State("proportional sampler missing".into()))?;
                Ok(dist.sample(r))
            }
            _ => Ok(self.progress.slot),
        }
    }

    /// Performs the next update of the schedule; `None` once all outer loops
    /// are done.
    pub fn step(&mut self, data: &[TaskData]) -> Result<Option<LogRecord>> {
        if self.is_done() {
            return Ok(None);
        }
        if data.len() != self.tasks.len() {
            return Err(Error::Config("data does not match the task registry".into()));
        }
        if self.progress.iteration == 0 && self.progress.slot == 0 {
            for it in &mut self.iters {
                it.begin_outer_loop();
            }
            self.progress.drawn.iter_mut().for_each(|d| *d = 0);
        }
        let ti = self.pick_task()?;
        let indices = self.iters[ti].next_batch().expect("cycling iterator");
        let batch = data[ti].train.collate(&indices)?;
        let mode = Mode::Train {
            seed: self.config.seed,
            step: self.progress.step,
        };
        let loss = update_step(
            &mut self.encoder,
            &mut self.heads[ti],
            self.tasks[ti].head_kind,
            &batch,
            &mut self.optimizer,
            self.config.alpha,
            mode,
        )
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {}: {m}", self.progress.step)),
            e => e,
        })?;
        let p = &mut self.progress;
        let record = LogRecord {
            outer_loop: p.outer_loop,
            iteration: p.iteration,
            step: p.step,
            task_id: self.tasks[ti].task_id.clone(),
            batch_index: p.drawn[ti],
            loss,
            wraps: self.iters.iter().map(BatchIter::wraps).collect(),
        };
        p.drawn[ti] += 1;
        p.step += 1;
        let advance_iteration = match self.config.schedule {
            Schedule::Proportional => true,
            _ => {
                p.slot += 1;
                if p.slot == self.tasks.len() {
                    p.slot = 0;
                    true
                } else {
                    false
                }
            }
        };
        if advance_iteration {
            p.iteration += 1;
            let per_loop = self.iterations_per_loop();
            let p = &mut self.progress;
            if p.iteration == per_loop {
                p.iteration = 0;
                p.outer_loop += 1;
            }
        }
        Ok(Some(record))
    }

    /// Runs until `outer_loop` outer loops are complete (or all are).
    pub fn run_until(&mut self, outer_loop: u64, data: &[TaskData], log: &mut TrainLog) -> Result<()> {
        while self.progress.outer_loop < outer_loop {
            match self.step(data)? {
                Some(r) => log.records.push(r),
                None => break,
            }
        }
        Ok(())
    }

    /// Trains to completion, then evaluates every task on its test split.
    pub fn run(&mut self, data: &[TaskData]) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        self.run_until(self.config.outer_loops as u64, data, &mut log)?;
        log.metrics = self.evaluate_all(data)?;
        Ok(log)
    }

    pub fn evaluate_all(&self, data: &[TaskData]) -> Result<Vec<(String, MetricReport)>> {
        self.tasks
            .iter()
            .zip(&self.heads)
            .zip(data)
            .map(|((t, h), d)| Ok((t.task_id.clone(), evaluate(&self.encoder, t, h, &d.test)?)))
            .collect()
    }
}

fn iter_seed(seed: u64, task_id: &str) -> u64 {
    rng::derive_seed(seed, &format!("batches/{task_id}"), &[])
}

fn check_sizes(tasks: &[TaskSpec], data: &[TaskData]) -> Result<Vec<usize>> {
    if tasks.len() != data.len() {
        return Err(Error::Config("tasks and datasets differ in number".into()));
    }
    Ok(data.iter().map(|d| d.train.len()).collect())
}

/// Algorithm-style round robin over `tasks`.
pub fn round_robin_train(encoder_config: &EncoderConfig, tasks: Vec<TaskSpec>, data: &[TaskData], cfg: &TrainerConfig) -> Result<(Trainer, TrainLog)> {
    train_with(Schedule::RoundRobin, encoder_config, tasks, data, cfg)
}

pub fn proportional_train(encoder_config: &EncoderConfig, tasks: Vec<TaskSpec>, data: &[TaskData], cfg: &TrainerConfig) -> Result<(Trainer, TrainLog)> {
    train_with(Schedule::Proportional, encoder_config, tasks, data, cfg)
}

fn train_with(
    schedule: Schedule,
    encoder_config: &EncoderConfig,
    tasks: Vec<TaskSpec>,
    data: &[TaskData],
    cfg: &TrainerConfig,
) -> Result<(Trainer, TrainLog)> {
    let sizes = check_sizes(&tasks, data)?;
    let cfg = TrainerConfig {
        schedule,
        ..cfg.clone()
    };
    let mut trainer = Trainer::new(cfg, encoder_config, tasks, &sizes)?;
    let log = trainer.run(data)?;
    Ok((trainer, log))
}

/// Test-set predictions of one task.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    Spans(Vec<SpanSet>),
    /// Clamped to `[0, 5]`.
    Scores(Vec<f64>),
    Classes(Vec<usize>),
}

pub fn predict(encoder: &EncoderParams, task: &TaskSpec, head: &HeadParams, features: &TaskFeatures) -> Result<Predictions> {
    let tags = match task.head_kind {
        HeadKind::Ner => Some(TagSet::new(&task.label_names)?),
        _ => None,
    };
    let mut spans = Vec::new();
    let mut values = Vec::new();
    let mut classes = Vec::new();
    let all: Vec<usize> = (0..features.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let batch = features.collate(chunk)?;
        let mut tape = Tape::new();
        let hidden = encoder.forward(&mut tape, &batch.input, Mode::Eval)?;
        match task.head_kind {
            HeadKind::Ner => {
                let logits = heads::ner_logits(&mut tape, hidden, head)?;
                let c = head.out_dim();
                let per_row = batch.input.seq_len * c;
                let data = tape.value(logits).data();
                let tags = tags.as_ref().expect("ner tag set");
                for (r, &i) in chunk.iter().enumerate() {
                    let row = &data[r * per_row..(r + 1) * per_row];
                    spans.push(ner_decode(row, c, &features.encodings[i], tags)?.into_iter().collect());
                }
            }
            HeadKind::Sts => {
                let raw = heads::sts_predict(&mut tape, hidden, head)?;
                values.extend(tape.value(raw).data().iter().map(|&v| clamp_score(v)));
            }
            HeadKind::Nli => {
                let logits = heads::nli_logits(&mut tape, hidden, head)?;
                let c = head.out_dim();
                classes.extend(tape.value(logits).data().chunks(c).map(heads::argmax));
            }
        }
    }
    Ok(match task.head_kind {
        HeadKind::Ner => Predictions::Spans(spans),
        HeadKind::Sts => Predictions::Scores(values),
        HeadKind::Nli => Predictions::Classes(classes),
    })
}

/// Scores predictions against the gold targets of `features`.
///
/// A constant score prediction (typical early in training, when every raw
/// output clamps to the same bound) has no defined correlation; it is
/// scored 0 so that model selection and training reports stay total.
pub fn score(preds: &Predictions, features: &TaskFeatures) -> Result<MetricReport> {
    match (preds, &features.targets) {
        (Predictions::Spans(p), Targets::Tags(_)) => micro_f1(p, &features.gold_spans),
        (Predictions::Scores(p), Targets::Scores(_)) if p.len() >= 2 && p.iter().all(|&v| v == p[0]) => {
            Ok(MetricReport {
                metric: MetricKind::Pearson,
                value: 0.0,
                support: Support::Count { n: p.len() },
            })
        }
        (Predictions::Scores(p), Targets::Scores(g)) => pearson(p, g),
        (Predictions::Classes(p), Targets::Classes(g)) => accuracy(p, g),
        _ => Err(Error::Eval("predictions do not match the task's targets".into())),
    }
}

pub fn evaluate(encoder: &EncoderParams, task: &TaskSpec, head: &HeadParams, features: &TaskFeatures) -> Result<MetricReport> {
    score(&predict(encoder, task, head, features)?, features)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneCell {
    pub seed: u64,
    pub epoch: usize,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    /// One cell per (seed, epoch), seeds in the given order.
    pub table: Vec<FinetuneCell>,
    pub best: FinetuneCell,
    /// Snapshot of the trainer at the best cell.
    pub model: Trainer,
    pub logs: Vec<TrainLog>,
}

/// Single-task fine-tuning from a fresh model per seed, evaluated after
/// every epoch; keeps the best cell (ties: lowest `(seed, epoch)`).
pub fn sequential_finetune(
    task: &TaskSpec,
    data: &TaskData,
    encoder_config: &EncoderConfig,
    cfg: &TrainerConfig,
    seeds: &[u64],
    epochs: usize,
) -> Result<FinetuneResult> {
    if epochs == 0 || seeds.is_empty() {
        return Err(Error::Config("sequential fine-tuning needs >= 1 seed and epoch".into()));
    }
    let mut table = Vec::with_capacity(seeds.len() * epochs);
    let mut best: Option<(FinetuneCell, Trainer)> = None;
    let mut logs = Vec::with_capacity(seeds.len());
    let data = std::slice::from_ref(data);
    for &seed in seeds {
        let c = TrainerConfig {
            seed,
            outer_loops: epochs,
            schedule: Schedule::SingleTask,
            ..cfg.clone()
        };
        let mut trainer = Trainer::new(c, encoder_config, vec![task.clone()], &[data[0].train.len()])?;
        let mut log = TrainLog::default();
        for epoch in 1..=epochs {
            trainer.run_until(epoch as u64, data, &mut log)?;
            let value = evaluate(&trainer.encoder, task, &trainer.heads[0], &data[0].test)?.value;
            let cell = FinetuneCell { seed, epoch, value };
            table.push(cell);
            let better = match &best {
                None => true,
                Some((b, _)) => value > b.value || (value == b.value && (seed, epoch) < (b.seed, b.epoch)),
            };
            if better {
                best = Some((cell, trainer.clone()));
            }
        }
        logs.push(log);
    }
    let (best, model) = best.expect("at least one cell");
    Ok(FinetuneResult {
        table,
        best,
        model,
        logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{prepare, synth_labels, DataSource};

    pub(crate) fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            vocab_size: 120,
            max_seq_len: 40,
            num_segments: 2,
            dropout_rate: 0.1,
            init_std: 0.1,
        }
    }

    fn spec(id: &str, kind: HeadKind, n: usize, bs: usize, seed: u64) -> TaskSpec {
        let classes = if kind == HeadKind::Nli { 3 } else { 0 };
        TaskSpec::new(
            id,
            kind,
            synth_labels(kind, classes),
            bs,
            DataSource::Synthetic {
                n_train: n,
                n_test: 12,
                seed,
                vocab_size: 30,
            },
        )
        .unwrap()
    }

    fn setup(sizes: &[(HeadKind, usize)], bs: usize) -> (Vec<TaskSpec>, Vec<TaskData>) {
        let specs: Vec<TaskSpec> = sizes
            .iter()
            .enumerate()
            .map(|(i, &(k, n))| spec(&format!("t{i}"), k, n, bs, i as u64))
            .collect();
        let (_, data) = prepare(&specs, 120, 40).unwrap();
        (specs, data)
    }

    fn cfg(schedule: Schedule) -> TrainerConfig {
        TrainerConfig {
            alpha: 1e-3,
            optimizer: OptimizerKind::Adam,
            schedule,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn round_robin_accounting() {
        let (specs, data) = setup(&[(HeadKind::Ner, 10), (HeadKind::Sts, 5), (HeadKind::Nli, 2)], 1);
        let (_, log) = round_robin_train(&tiny_encoder(), specs, &data, &cfg(Schedule::RoundRobin)).unwrap();
        assert_eq!(log.records.len(), 30);
        assert_eq!(log.records.last().unwrap().iteration, 9);
        for t in ["t0", "t1", "t2"] {
            assert_eq!(log.records.iter().filter(|r| r.task_id == t).count(), 10);
        }
        assert_eq!(log.records.last().unwrap().wraps, [0, 1, 4]);
        assert_eq!(log.metrics.len(), 3);
    }

    #[test]
    fn outer_loops_restart_wraps() {
        let (specs, data) = setup(&[(HeadKind::Ner, 4), (HeadKind::Nli, 3)], 2);
        let c = TrainerConfig {
            outer_loops: 3,
            ..cfg(Schedule::RoundRobin)
        };
        let (_, log) = round_robin_train(&tiny_encoder(), specs, &data, &c).unwrap();
        assert_eq!(log.records.len(), 3 * 2 * 2);
        for r in &log.records {
            assert_eq!(r.wraps[0], 0);
        }
    }

    #[test]
    fn single_task_schedules_agree() {
        let (specs, data) = setup(&[(HeadKind::Nli, 9)], 2);
        let e = tiny_encoder();
        let (_, rr) = round_robin_train(&e, specs.clone(), &data, &cfg(Schedule::RoundRobin)).unwrap();
        let (_, pr) = proportional_train(&e, specs.clone(), &data, &cfg(Schedule::Proportional)).unwrap();
        let ft = sequential_finetune(&specs[0], &data[0], &e, &cfg(Schedule::SingleTask), &[1], 1).unwrap();
        assert_eq!(rr.records.len(), 5);
        assert_eq!(rr.to_tsv(), pr.to_tsv());
        assert_eq!(rr.to_tsv(), ft.logs[0].to_tsv());
    }

    #[test]
    fn proportional_step_count() {
        let (specs, data) = setup(&[(HeadKind::Ner, 7), (HeadKind::Sts, 4)], 2);
        let (_, log) = proportional_train(&tiny_encoder(), specs, &data, &cfg(Schedule::Proportional)).unwrap();
        assert_eq!(log.records.len(), 4 + 2);
    }

    #[test]
    fn head_isolation() {
        let (specs, data) = setup(&[(HeadKind::Ner, 4), (HeadKind::Sts, 4), (HeadKind::Nli, 4)], 2);
        let c = TrainerConfig {
            optimizer: OptimizerKind::Sgd,
            alpha: 0.1,
            ..cfg(Schedule::RoundRobin)
        };
        let mut tr = Trainer::new(c, &tiny_encoder(), specs, &[4, 4, 4]).unwrap();
        for i in 0..3 {
            let before_heads = tr.heads.clone();
            let before_enc = tr.encoder.clone();
            let rec = tr.step(&data).unwrap().unwrap();
            assert_eq!(rec.task_id, format!("t{i}"));
            for j in 0..3 {
                assert_eq!(tr.heads[j] == before_heads[j], j != i, "head {j} after update {i}");
            }
            assert_ne!(tr.encoder, before_enc);
        }
    }

    #[test]
    fn zero_alpha_sgd_keeps_parameters() {
        let (specs, data) = setup(&[(HeadKind::Sts, 4)], 4);
        let mut tr = Trainer::new(TrainerConfig::default(), &tiny_encoder(), specs, &[4]).unwrap();
        let batch = data[0].train.collate(&[0, 1, 2, 3]).unwrap();
        let (enc0, head0) = (tr.encoder.clone(), tr.heads[0].clone());
        let loss = update_step(&mut tr.encoder, &mut tr.heads[0], HeadKind::Sts, &batch, &mut Optimizer::Sgd, 0.0, Mode::Eval).unwrap();
        assert!(loss > 0.0);
        assert_eq!(tr.encoder, enc0);
        assert_eq!(tr.heads[0], head0);
    }

    #[test]
    fn sgd_step_descends() {
        let (specs, data) = setup(&[(HeadKind::Nli, 6)], 6);
        let mut e = tiny_encoder();
        e.dropout_rate = 0.0;
        let mut tr = Trainer::new(TrainerConfig::default(), &e, specs, &[6]).unwrap();
        let batch = data[0].train.collate(&[0, 1, 2, 3, 4, 5]).unwrap();
        let (h, k) = (&mut tr.heads[0], HeadKind::Nli);
        let l0 = update_step(&mut tr.encoder, h, k, &batch, &mut Optimizer::Sgd, 1e-3, Mode::Eval).unwrap();
        let l1 = update_step(&mut tr.encoder, h, k, &batch, &mut Optimizer::Sgd, 0.0, Mode::Eval).unwrap();
        assert!(l1 < l0, "{l1} !< {l0}");
    }

    #[test]
    fn determinism() {
        let (specs, data) = setup(&[(HeadKind::Ner, 6), (HeadKind::Nli, 5)], 2);
        let c = TrainerConfig {
            outer_loops: 2,
            ..cfg(Schedule::Proportional)
        };
        let a = proportional_train(&tiny_encoder(), specs.clone(), &data, &c).unwrap().1;
        let b = proportional_train(&tiny_encoder(), specs, &data, &c).unwrap().1;
        assert_eq!(a.to_tsv(), b.to_tsv());
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn registry_errors() {
        let (specs, _) = setup(&[(HeadKind::Ner, 3), (HeadKind::Nli, 3)], 2);
        let e = tiny_encoder();
        assert!(matches!(Trainer::new(cfg(Schedule::RoundRobin), &e, specs.clone(), &[3, 0]), Err(Error::Data(_))));
        assert!(matches!(Trainer::new(cfg(Schedule::SingleTask), &e, specs.clone(), &[3, 3]), Err(Error::Config(_))));
        let dup = vec![specs[0].clone(), specs[0].clone()];
        assert!(matches!(Trainer::new(cfg(Schedule::RoundRobin), &e, dup, &[3, 3]), Err(Error::Config(_))));
        let bad = TrainerConfig {
            alpha: 0.0,
            ..TrainerConfig::default()
        };
        assert!(matches!(Trainer::new(bad, &e, specs, &[3, 3]), Err(Error::Config(_))));
    }

    #[test]
    fn finetune_table_and_tie_break() {
        let (specs, data) = setup(&[(HeadKind::Nli, 4)], 4);
        let r = sequential_finetune(&specs[0], &data[0], &tiny_encoder(), &cfg(Schedule::SingleTask), &[2, 1], 3).unwrap();
        assert_eq!(r.table.len(), 6);
        let max = r.table.iter().map(|c| c.value).fold(f64::MIN, f64::max);
        assert_eq!(r.best.value, max);
        let first = r.table.iter().filter(|c| c.value == max).map(|c| (c.seed, c.epoch)).min().unwrap();
        assert_eq!((r.best.seed, r.best.epoch), first);
    }

    #[test]
    fn constant_scores_rate_zero() {
        let (_, data) = setup(&[(HeadKind::Sts, 4)], 4);
        let n = data[0].test.len();
        let r = score(&Predictions::Scores(vec![5.0; n]), &data[0].test).unwrap();
        assert_eq!((r.metric, r.value), (MetricKind::Pearson, 0.0));
    }
}
