//! The subcommands, as library functions. Each returns its report; the
//! binary prints it and maps errors to exit codes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mtcb::autodiff::OpKind;
use mtcb::bench::{self, BenchReport};
use mtcb::checkpoint::{self, Checkpoint};
use mtcb::data::{self, Examples, TaskData, TaskFeatures, Targets};
use mtcb::encoder::EncoderParams;
use mtcb::gradsuite::{self, CheckOutcome};
use mtcb::heads::{HeadKind, HeadParams, TaskSpec};
use mtcb::metrics::{MetricReport, Support};
use mtcb::tokenizer::Vocab;
use mtcb::trainer::{self, FinetuneCell, Predictions, Schedule, TrainLog, Trainer};
use mtcb::{Error, Result};

use crate::config::RunConfig;

/// Vocabulary file stored next to a checkpoint.
pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn dataset_file_name(task: &TaskSpec, split: &str) -> String {
    let ext = if task.head_kind == HeadKind::Ner { "conll" } else { "tsv" };
    format!("{}.{split}.{ext}", task.task_id)
}

fn render(examples: &Examples, task: &TaskSpec) -> String {
    match examples {
        Examples::Ner(v) => data::write_conll(v),
        Examples::Pairs(v) => data::write_pairs(v, &task.label_names),
    }
}

/// Writes `<task>.train.*` and `<task>.test.*` for every task into
/// `out_dir`. Nothing is written unless every task loads.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<String> {
    let loaded = cfg.tasks.iter().map(data::load_task).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out_dir)?;
    let mut report = String::new();
    for (task, (train, test)) in cfg.tasks.iter().zip(&loaded) {
        for (split, ds) in [("train", train), ("test", test)] {
            let path = out_dir.join(dataset_file_name(task, split));
            write_file(&path, &render(&ds.examples, task))?;
        }
        writeln!(report, "{}\ttrain\t{}\ttest\t{}", task.task_id, train.len(), test.len()).unwrap();
    }
    Ok(report)
}

fn prepare(cfg: &RunConfig) -> Result<(Vocab, Vec<TaskData>)> {
    data::prepare(&cfg.tasks, cfg.encoder.vocab_size, cfg.encoder.max_seq_len)
}

pub struct TrainOutcome {
    pub log: TrainLog,
    pub trainer: Trainer,
    /// Fine-tuning table (single_task schedule only).
    pub finetune: Option<(Vec<FinetuneCell>, FinetuneCell)>,
}

impl TrainOutcome {
    pub fn report(&self) -> String {
        let mut out = String::new();
        if let Some((table, best)) = &self.finetune {
            out.push_str("seed\tepoch\tvalue\n");
            for c in table {
                writeln!(out, "{}\t{}\t{:.6}", c.seed, c.epoch, c.value).unwrap();
            }
            writeln!(out, "best\tseed {}\tepoch {}\t{:.6}", best.seed, best.epoch, best.value).unwrap();
        }
        out.push_str(&metrics_table(&self.log.metrics));
        out
    }
}

/// Trains under the configured schedule, then saves the checkpoint to
/// `out`, the vocabulary next to it and, if given, the TrainLog TSV to
/// `log`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, log: Option<&Path>) -> Result<TrainOutcome> {
    let outcome = train(cfg)?;
    let (trainer, vocab) = (&outcome.0.trainer, &outcome.1);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    checkpoint::save(&Checkpoint::from_trainer(trainer), out)?;
    vocab.save(&vocab_path(out))?;
    if let Some(p) = log {
        write_file(p, &outcome.0.log.to_tsv())?;
    }
    Ok(outcome.0)
}

/// Training without writing anything.
pub fn train(cfg: &RunConfig) -> Result<(TrainOutcome, Vocab)> {
    let (vocab, data) = prepare(cfg)?;
    let tasks = cfg.tasks.clone();
    let t = &cfg.trainer;
    let outcome = match t.schedule {
        Schedule::RoundRobin => {
            let (trainer, log) = trainer::round_robin_train(&cfg.encoder, tasks, &data, t)?;
            TrainOutcome {
                log,
                trainer,
                finetune: None,
            }
        }
        Schedule::Proportional => {
            let (trainer, log) = trainer::proportional_train(&cfg.encoder, tasks, &data, t)?;
            TrainOutcome {
                log,
                trainer,
                finetune: None,
            }
        }
        Schedule::SingleTask => {
            if tasks.len() != 1 {
                return Err(Error::Config(format!(
                    "single_task needs exactly one task, got {} (use --tasks)",
                    tasks.len()
                )));
            }
            let r = trainer::sequential_finetune(&tasks[0], &data[0], &cfg.encoder, t, &cfg.finetune_seeds(), t.outer_loops)?;
            let mut log = TrainLog::default();
            for l in r.logs {
                log.records.extend(l.records);
            }
            log.metrics = r.model.evaluate_all(&data)?;
            TrainOutcome {
                log,
                trainer: r.model,
                finetune: Some((r.table, r.best)),
            }
        }
    };
    Ok((outcome, vocab))
}

pub fn metrics_table(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from("task\tmetric\tvalue\tsupport\n");
    for (id, r) in rows {
        let support = match r.support {
            Support::Spans { tp, fp, fn_, .. } => format!("tp={tp} fp={fp} fn={fn_}"),
            Support::Count { n } => format!("n={n}"),
        };
        writeln!(out, "{id}\t{}\t{:.6}\t{support}", r.metric.name(), r.value).unwrap();
    }
    out
}

/// Loads a checkpoint and the vocabulary saved next to it.
pub fn load_model(path: &Path) -> Result<(Checkpoint, Vocab)> {
    let ckpt = checkpoint::load(path)?;
    let vocab = Vocab::load(&vocab_path(path))?;
    Ok((ckpt, vocab))
}

/// Tasks to evaluate: those of `cfg` (which must match the checkpoint's
/// heads) or, without a config, every task in the checkpoint.
fn eval_tasks(ckpt: &Checkpoint, cfg: Option<&RunConfig>) -> Result<Vec<(TaskSpec, HeadParams)>> {
    let Some(cfg) = cfg else {
        return Ok(ckpt.tasks.iter().cloned().zip(ckpt.heads.iter().cloned()).collect());
    };
    cfg.tasks
        .iter()
        .map(|t| {
            let i = ckpt
                .tasks
                .iter()
                .position(|c| c.task_id == t.task_id)
                .ok_or_else(|| Error::Config(format!("checkpoint has no head for task {:?}", t.task_id)))?;
            let c = &ckpt.tasks[i];
            if c.head_kind != t.head_kind || c.label_names != t.label_names {
                return Err(Error::Config(format!("task {:?} differs from the checkpoint's head", t.task_id)));
            }
            Ok((t.clone(), ckpt.heads[i].clone()))
        })
        .collect()
}

pub struct EvalRow {
    pub task_id: String,
    pub report: MetricReport,
    pub predictions: Predictions,
    pub features: TaskFeatures,
}

/// Test-set metrics of every task; with `dump`, also writes one prediction
/// file per task there (see [`render_predictions`]).
pub fn cmd_eval(ckpt_path: &Path, cfg: Option<&RunConfig>, dump: Option<&Path>) -> Result<Vec<EvalRow>> {
    let (ckpt, vocab) = load_model(ckpt_path)?;
    let tasks = eval_tasks(&ckpt, cfg)?;
    let rows = evaluate_tasks(&ckpt.encoder, &tasks, &vocab)?;
    if let Some(dir) = dump {
        fs::create_dir_all(dir)?;
        for (row, (task, _)) in rows.iter().zip(&tasks) {
            write_file(&dir.join(format!("{}.pred.tsv", row.task_id)), &render_predictions(task, row)?)?;
        }
    }
    Ok(rows)
}

pub fn evaluate_tasks(encoder: &EncoderParams, tasks: &[(TaskSpec, HeadParams)], vocab: &Vocab) -> Result<Vec<EvalRow>> {
    tasks
        .iter()
        .map(|(task, head)| {
            let (_, test) = data::load_task(task)?;
            let features = TaskFeatures::build(task, &test, vocab, encoder.config.max_seq_len)?;
            let predictions = trainer::predict(encoder, task, head, &features)?;
            let report = trainer::score(&predictions, &features)?;
            Ok(EvalRow {
                task_id: task.task_id.clone(),
                report,
                predictions,
                features,
            })
        })
        .collect()
}

pub fn eval_report(rows: &[EvalRow]) -> String {
    let pairs: Vec<(String, MetricReport)> = rows.iter().map(|r| (r.task_id.clone(), r.report.clone())).collect();
    metrics_table(&pairs)
}

/// Prediction dump. NER: `doc  source  start  end  label` with source
/// `pred` or `gold`; STS: `idx  pred  gold`; NLI: `idx  pred_label
/// gold_label`.
pub fn render_predictions(task: &TaskSpec, row: &EvalRow) -> Result<String> {
    let mut out = String::new();
    match (&row.predictions, &row.features.targets) {
        (Predictions::Spans(pred), Targets::Tags(_)) => {
            for (doc, (p, g)) in pred.iter().zip(&row.features.gold_spans).enumerate() {
                for (src, set) in [("pred", p), ("gold", g)] {
                    for s in set {
                        writeln!(out, "{doc}\t{src}\t{}\t{}\t{}", s.start, s.end, s.label).unwrap();
                    }
                }
            }
        }
        (Predictions::Scores(p), Targets::Scores(g)) => {
            for (i, (a, b)) in p.iter().zip(g).enumerate() {
                writeln!(out, "{i}\t{a:.17e}\t{b:.17e}").unwrap();
            }
        }
        (Predictions::Classes(p), Targets::Classes(g)) => {
            for (i, (a, b)) in p.iter().zip(g).enumerate() {
                writeln!(out, "{i}\t{}\t{}", task.label_names[*a], task.label_names[*b]).unwrap();
            }
        }
        _ => return Err(Error::Eval(format!("predictions of {:?} do not match its targets", task.task_id))),
    }
    Ok(out)
}

/// Benchmarks a checkpoint, or a freshly initialized model of `cfg` when no
/// checkpoint is given (timings do not depend on the weights).
pub fn cmd_bench(ckpt_path: Option<&Path>, cfg: Option<&RunConfig>, bench_cfg: &bench::BenchConfig) -> Result<BenchReport> {
    bench_cfg.validate()?;
    let (encoder, tasks, heads) = match (ckpt_path, cfg) {
        (Some(p), _) => {
            let c = checkpoint::load(p)?;
            (c.encoder, c.tasks, c.heads)
        }
        (None, Some(cfg)) => {
            let seed = cfg.trainer.seed;
            let enc = EncoderParams::init(&cfg.encoder, seed)?;
            let heads = cfg
                .tasks
                .iter()
                .map(|t| HeadParams::init(t, cfg.encoder.hidden_dim, cfg.encoder.init_std, seed))
                .collect();
            (enc, cfg.tasks.clone(), heads)
        }
        (None, None) => return Err(Error::Config("bench needs a checkpoint or a config".into())),
    };
    bench::bench(&encoder, &tasks, &heads, bench_cfg)
}

/// Runs the named gradient checks (all of them when `ops` is `None`).
/// `fault` corrupts one op's backward rule to exercise failure reporting.
pub fn cmd_gradcheck(ops: Option<&[String]>, fault: Option<&str>, seed: u64) -> Result<Vec<CheckOutcome>> {
    let names = match ops {
        Some(o) => o.to_vec(),
        None => gradsuite::all_checks(),
    };
    let fault = fault
        .map(|f| OpKind::from_name(f).ok_or_else(|| Error::Config(format!("unknown op {f:?} for fault injection"))))
        .transpose()?;
    gradsuite::run_checks(&names, fault, seed)
}

pub fn gradcheck_report(outcomes: &[CheckOutcome]) -> String {
    let mut out = String::from("check\tmax_rel_error\tstatus\n");
    for o in outcomes {
        let status = if o.passed { "pass" } else { "FAIL" };
        writeln!(out, "{}\t{:.3e}\t{status}", o.name, o.max_rel_error).unwrap();
    }
    out
}
