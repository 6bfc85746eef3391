//! Task heads: single linear maps from encoder output to task predictions.
//!
//! * NER: a per-token classifier over BIO tags on every sub-word position.
//! * STS: a linear regressor on the `[CLS]` state, trained with MSE on the
//!   raw output and clamped to `[0, 5]` at prediction time.
//! * NLI: a linear classifier on the `[CLS]` state.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Parameters, Tape, Tensor, Var};
use crate::data::DataSource;
use crate::encoder::{linear, truncated_normal};
use crate::error::{Error, Result};
use crate::metrics::{MetricKind, Span};
use crate::tokenizer::Encoding;

pub const STS_MIN: f64 = 0.0;
pub const STS_MAX: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Ner,
    Sts,
    Nli,
}

impl HeadKind {
    pub fn metric(self) -> MetricKind {
        match self {
            HeadKind::Ner => MetricKind::MicroF1,
            HeadKind::Sts => MetricKind::Pearson,
            HeadKind::Nli => MetricKind::Accuracy,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Ner => "ner",
            HeadKind::Sts => "sts",
            HeadKind::Nli => "nli",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            HeadKind::Ner => 0,
            HeadKind::Sts => 1,
            HeadKind::Nli => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        [HeadKind::Ner, HeadKind::Sts, HeadKind::Nli].into_iter().find(|k| k.code() == code)
    }
}

/// Identity and configuration of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub head_kind: HeadKind,
    pub label_names: Vec<String>,
    pub batch_size: usize,
    pub metric: MetricKind,
    pub source: DataSource,
}

impl TaskSpec {
    pub fn new(
        task_id: impl Into<String>,
        head_kind: HeadKind,
        label_names: Vec<String>,
        batch_size: usize,
        source: DataSource,
    ) -> Result<Self> {
        let spec = TaskSpec {
            task_id: task_id.into(),
            head_kind,
            label_names,
            batch_size,
            metric: head_kind.metric(),
            source,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("task {:?}: {m}", self.task_id)));
        if self.task_id.is_empty() || self.task_id.chars().any(|c| c.is_whitespace() || c == '/') {
            return fail("task_id must be non-empty without whitespace or '/'".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.metric != self.head_kind.metric() {
            return fail(format!("{} head is scored by {}, not {}", self.head_kind.name(), self.head_kind.metric(), self.metric));
        }
        match self.head_kind {
            HeadKind::Ner => {
                TagSet::new(&self.label_names)?;
            }
            HeadKind::Sts if !self.label_names.is_empty() => {
                return fail("sts tasks take no label names".into());
            }
            HeadKind::Nli if self.label_names.len() < 2 => {
                return fail("nli tasks need at least two label names".into());
            }
            _ => {}
        }
        let mut sorted = self.label_names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.label_names.len() {
            return fail("duplicate label names".into());
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        match self.head_kind {
            HeadKind::Sts => 1,
            _ => self.label_names.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tag {
    Outside,
    Begin(String),
    Inside(String),
}

/// Parsed BIO tag inventory of an NER task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagSet {
    tags: Vec<Tag>,
    names: Vec<String>,
}

impl TagSet {
    pub fn new(names: &[String]) -> Result<Self> {
        let mut tags = Vec::with_capacity(names.len());
        for n in names {
            tags.push(parse_tag(n).ok_or_else(|| Error::Config(format!("malformed BIO tag {n:?}")))?);
        }
        if !tags.contains(&Tag::Outside) {
            return Err(Error::Config("BIO tag set must contain \"O\"".into()));
        }
        for t in &tags {
            if let Tag::Inside(x) = t {
                if !tags.contains(&Tag::Begin(x.clone())) {
                    return Err(Error::Config(format!("I-{x} has no matching B-{x}")));
                }
            }
        }
        Ok(TagSet {
            tags,
            names: names.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tag(&self, id: usize) -> &Tag {
        &self.tags[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    /// Id of the inside tag continuing `id` (itself unless `id` is a B-).
    pub fn continuation(&self, id: usize) -> usize {
        match &self.tags[id] {
            Tag::Begin(x) => self
                .tags
                .iter()
                .position(|t| matches!(t, Tag::Inside(y) if y == x))
                .unwrap_or(id),
            _ => id,
        }
    }

    /// Spans from a tag sequence with per-item char offsets. An I-X that
    /// does not continue a B-X/I-X opens a new span.
    pub fn spans(&self, tags: &[usize], offsets: &[(usize, usize)]) -> Vec<Span> {
        let mut spans = Vec::new();
        let mut open: Option<(usize, usize, &str)> = None;
        for (&t, &(s, e)) in tags.iter().zip(offsets) {
            match &self.tags[t] {
                Tag::Outside => {
                    if let Some((os, oe, ol)) = open.take() {
                        spans.push(Span::new(os, oe, ol));
                    }
                }
                Tag::Begin(x) => {
                    if let Some((os, oe, ol)) = open.take() {
                        spans.push(Span::new(os, oe, ol));
                    }
                    open = Some((s, e, x));
                }
                Tag::Inside(x) => match open {
                    Some((os, _, ol)) if ol == x => open = Some((os, e, ol)),
                    _ => {
                        if let Some((os, oe, ol)) = open.take() {
                            spans.push(Span::new(os, oe, ol));
                        }
                        open = Some((s, e, x));
                    }
                },
            }
        }
        if let Some((os, oe, ol)) = open {
            spans.push(Span::new(os, oe, ol));
        }
        spans
    }
}

fn parse_tag(name: &str) -> Option<Tag> {
    if name == "O" {
        return Some(Tag::Outside);
    }
    let (prefix, ty) = name.split_once('-')?;
    if ty.is_empty() {
        return None;
    }
    match prefix {
        "B" => Some(Tag::Begin(ty.to_string())),
        "I" => Some(Tag::Inside(ty.to_string())),
        _ => None,
    }
}

/// Whether a tag string has a recognized BIO form.
pub fn is_bio_tag(name: &str) -> bool {
    parse_tag(name).is_some()
}

/// Per-piece training targets from per-word tag ids: every piece of a word
/// carries the word's tag, with B-X turned into I-X after the first piece.
/// Special and padding positions are `None` (ignored by the loss).
pub fn align_word_tags(encoding: &Encoding, word_tags: &[usize], tags: &TagSet) -> Result<Vec<Option<usize>>> {
    let mut out = Vec::with_capacity(encoding.len());
    let mut prev_word = None;
    for wi in &encoding.word_index {
        match wi {
            None => {
                out.push(None);
                prev_word = None;
            }
            Some(w) => {
                let t = *word_tags
                    .get(*w)
                    .ok_or_else(|| Error::Data(format!("no tag for word {w}")))?;
                out.push(Some(if prev_word == Some(*w) { tags.continuation(t) } else { t }));
                prev_word = Some(*w);
            }
        }
    }
    Ok(out)
}

/// `argmax` with ties going to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn clamp_score(raw: f64) -> f64 {
    raw.clamp(STS_MIN, STS_MAX)
}

/// Decodes per-position tag logits `[T, C]` of one encoding into char spans.
/// Special and padding positions are skipped.
pub fn ner_decode(logits: &[f64], num_tags: usize, encoding: &Encoding, tags: &TagSet) -> Result<Vec<Span>> {
    if num_tags != tags.len() || logits.len() % num_tags.max(1) != 0 {
        return Err(Error::Config(format!(
            "{num_tags} logit columns for a tag set of {}",
            tags.len()
        )));
    }
    let rows = logits.len() / num_tags;
    let mut ids = Vec::new();
    let mut offsets = Vec::new();
    for (pos, off) in encoding.offsets.iter().enumerate().take(rows) {
        if let Some(o) = off {
            ids.push(argmax(&logits[pos * num_tags..(pos + 1) * num_tags]));
            offsets.push(*o);
        }
    }
    Ok(tags.spans(&ids, &offsets))
}

/// Weights `[H, out]` and bias `[out]` of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub weight: Param,
    pub bias: Param,
}

impl HeadParams {
    pub fn weight_name(task_id: &str) -> String {
        format!("heads.{task_id}.weight")
    }

    pub fn bias_name(task_id: &str) -> String {
        format!("heads.{task_id}.bias")
    }

    /// Truncated-normal weights keyed by the task id, zero bias.
    pub fn init(task: &TaskSpec, hidden_dim: usize, init_std: f64, seed: u64) -> Self {
        let wn = Self::weight_name(&task.task_id);
        HeadParams {
            weight: Param::new(wn.clone(), truncated_normal(&[hidden_dim, task.out_dim()], init_std, seed, &wn)),
            bias: Param::new(Self::bias_name(&task.task_id), Tensor::zeros(&[task.out_dim()])),
        }
    }

    pub fn zeros(task_id: &str, hidden_dim: usize, out_dim: usize) -> Self {
        HeadParams {
            weight: Param::new(Self::weight_name(task_id), Tensor::zeros(&[hidden_dim, out_dim])),
            bias: Param::new(Self::bias_name(task_id), Tensor::zeros(&[out_dim])),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.bias.value.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl Parameters for HeadParams {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

fn hidden_dims(tape: &Tape, hidden: Var, head: &HeadParams) -> Result<(usize, usize, usize)> {
    let s = tape.shape(hidden);
    if s.len() != 3 || s[2] != head.hidden_dim() {
        return Err(Error::shape(format!(
            "head expects [B, T, {}] hidden states, got {s:?}",
            head.hidden_dim()
        )));
    }
    Ok((s[0], s[1], s[2]))
}

/// `[CLS]` rows `[B, H]` of hidden states `[B, T, H]`.
pub fn cls_states(tape: &mut Tape, hidden: Var) -> Result<Var> {
    let s = tape.shape(hidden).to_vec();
    let (b, t, h) = (s[0], s[1], s[2]);
    let flat = tape.reshape(hidden, &[b * t, h])?;
    let rows: Vec<usize> = (0..b).map(|i| i * t).collect();
    tape.gather(flat, &rows)
}

/// Tag logits `[B*T, C]` for every position.
pub fn ner_logits(tape: &mut Tape, hidden: Var, head: &HeadParams) -> Result<Var> {
    let (b, t, h) = hidden_dims(tape, hidden, head)?;
    let flat = tape.reshape(hidden, &[b * t, h])?;
    linear(tape, flat, &head.weight, &head.bias)
}

/// Token-classification loss; `tags` has one entry per position (`B*T`).
pub fn ner_loss(tape: &mut Tape, hidden: Var, head: &HeadParams, tags: &[Option<usize>]) -> Result<(Var, Var)> {
    let logits = ner_logits(tape, hidden, head)?;
    let loss = tape.cross_entropy(logits, tags)?;
    Ok((loss, logits))
}

/// Raw (unclamped) similarity scores `[B]`.
pub fn sts_predict(tape: &mut Tape, hidden: Var, head: &HeadParams) -> Result<Var> {
    let (b, _, _) = hidden_dims(tape, hidden, head)?;
    let cls = cls_states(tape, hidden)?;
    let out = linear(tape, cls, &head.weight, &head.bias)?;
    tape.reshape(out, &[b])
}

pub fn sts_loss(tape: &mut Tape, hidden: Var, head: &HeadParams, targets: &[f64]) -> Result<(Var, Var)> {
    if let Some(bad) = targets.iter().find(|t| !(STS_MIN..=STS_MAX).contains(*t)) {
        return Err(Error::Data(format!("STS target {bad} outside [0, 5]")));
    }
    let raw = sts_predict(tape, hidden, head)?;
    let target = tape.constant(Tensor::from_vec(targets.to_vec()));
    let loss = tape.mse(raw, target)?;
    Ok((loss, raw))
}

/// Class logits `[B, C]` on the `[CLS]` state.
pub fn nli_logits(tape: &mut Tape, hidden: Var, head: &HeadParams) -> Result<Var> {
    hidden_dims(tape, hidden, head)?;
    let cls = cls_states(tape, hidden)?;
    linear(tape, cls, &head.weight, &head.bias)
}

pub fn nli_loss(tape: &mut Tape, hidden: Var, head: &HeadParams, labels: &[usize]) -> Result<(Var, Var)> {
    let logits = nli_logits(tape, hidden, head)?;
    let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok((loss, logits))
}
