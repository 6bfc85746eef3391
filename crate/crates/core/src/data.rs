//! Datasets: open-format parsers, synthetic task generators, batching.
//!
//! File formats (UTF-8, newline-delimited, no header):
//!
//! * NER: `token<TAB>tag` per line, sentences separated by blank lines.
//! * Pairs: `text_a<TAB>text_b<TAB>target`, target a decimal score in
//!   `[0, 5]` (STS) or a class name (NLI).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::InputBatch;
use crate::error::{Error, Result};
use crate::heads::{align_word_tags, is_bio_tag, HeadKind, TagSet, TaskSpec, STS_MAX, STS_MIN};
use crate::metrics::SpanSet;
use crate::rng;
use crate::tokenizer::{encode_pair, encode_single, Encoding, Vocab};

/// Where a task's examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Files {
        train: PathBuf,
        test: PathBuf,
    },
    Synthetic {
        n_train: usize,
        n_test: usize,
        seed: u64,
        vocab_size: usize,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            n_train: 100,
            n_test: 50,
            seed: 0,
            vocab_size: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NerExample {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    /// Char offsets of each token in the single-space join of `tokens`.
    pub offsets: Vec<(usize, usize)>,
}

impl NerExample {
    pub fn new(tokens: Vec<String>, tags: Vec<String>) -> Result<Self> {
        if tokens.len() != tags.len() {
            return Err(Error::Data(format!("{} tokens but {} tags", tokens.len(), tags.len())));
        }
        let mut offsets = Vec::with_capacity(tokens.len());
        let mut pos = 0;
        for t in &tokens {
            let n = t.chars().count();
            offsets.push((pos, pos + n));
            pos += n + 1;
        }
        Ok(NerExample { tokens, tags, offsets })
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PairTarget {
    Score(f64),
    Class(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub text_a: String,
    pub text_b: String,
    pub target: PairTarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Examples {
    Ner(Vec<NerExample>),
    Pairs(Vec<PairExample>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: String,
    pub split: Split,
    pub examples: Examples,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        match &self.examples {
            Examples::Ner(v) => v.len(),
            Examples::Pairs(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn parse_conll(text: &str) -> Result<Vec<NerExample>> {
    let mut out = Vec::new();
    let (mut tokens, mut tags) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            if !tokens.is_empty() {
                out.push(NerExample::new(std::mem::take(&mut tokens), std::mem::take(&mut tags))?);
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::parse(i + 1, format!("expected 2 tab-separated fields, got {}", fields.len())));
        }
        if fields[0].is_empty() || fields[0].chars().any(char::is_whitespace) {
            return Err(Error::parse(i + 1, format!("bad token {:?}", fields[0])));
        }
        if !is_bio_tag(fields[1]) {
            return Err(Error::parse(i + 1, format!("unknown tag {:?}", fields[1])));
        }
        tokens.push(fields[0].to_string());
        tags.push(fields[1].to_string());
    }
    if !tokens.is_empty() {
        out.push(NerExample::new(tokens, tags)?);
    }
    Ok(out)
}

pub fn write_conll(examples: &[NerExample]) -> String {
    let mut s = String::new();
    for ex in examples {
        for (t, g) in ex.tokens.iter().zip(&ex.tags) {
            let _ = writeln!(s, "{t}\t{g}");
        }
        s.push('\n');
    }
    s
}

/// Parses pair lines. `labels` are the class names for NLI and ignored for
/// STS.
pub fn parse_pairs(text: &str, kind: HeadKind, labels: &[String]) -> Result<Vec<PairExample>> {
    if kind == HeadKind::Ner {
        return Err(Error::Config("pair files hold STS or NLI data".into()));
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(i + 1, format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let target = match kind {
            HeadKind::Sts => {
                let v: f64 = fields[2]
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(i + 1, format!("bad score {:?}", fields[2])))?;
                if !(STS_MIN..=STS_MAX).contains(&v) {
                    return Err(Error::parse(i + 1, format!("score {v} outside [0, 5]")));
                }
                PairTarget::Score(v)
            }
            _ => PairTarget::Class(
                labels
                    .iter()
                    .position(|l| l == fields[2])
                    .ok_or_else(|| Error::parse(i + 1, format!("unknown label {:?}", fields[2])))?,
            ),
        };
        out.push(PairExample {
            text_a: fields[0].to_string(),
            text_b: fields[1].to_string(),
            target,
        });
    }
    Ok(out)
}

pub fn write_pairs(examples: &[PairExample], labels: &[String]) -> String {
    let mut s = String::new();
    for ex in examples {
        let target = match ex.target {
            PairTarget::Score(v) => format!("{v}"),
            PairTarget::Class(c) => labels[c].clone(),
        };
        let _ = writeln!(s, "{}\t{}\t{}", ex.text_a, ex.text_b, target);
    }
    s
}

// ---------------------------------------------------------------------------
// Synthetic tasks

pub const NEGATION: &str = "not";
pub const NLI_LABELS: [&str; 3] = ["entailment", "neutral", "contradiction"];
pub const NLI_BINARY_LABELS: [&str; 2] = ["entailment", "not_entailment"];
pub const SYNTH_NER_TAGS: [&str; 7] = ["O", "B-PROB", "I-PROB", "B-TEST", "I-TEST", "B-TREAT", "I-TREAT"];

/// Trigger word, entity type, and entity length in words.
pub const TRIGGERS: [(&str, &str, usize); 6] = [
    ("xan", "PROB", 1),
    ("xel", "PROB", 2),
    ("xir", "TEST", 1),
    ("xom", "TEST", 2),
    ("xup", "TREAT", 1),
    ("xyl", "TREAT", 2),
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const MIN_LEXICON: usize = 16;

/// Filler lexicon of `max(vocab_size, 16)` distinct consonant-vowel words.
/// Depends only on the size, so every task built with the same size shares
/// its words.
pub fn lexicon(vocab_size: usize) -> Vec<String> {
    let n = vocab_size.max(MIN_LEXICON);
    let mut r = rng::stream(n as u64, "lexicon", &[]);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = r.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[r.random_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[r.random_range(0..VOWELS.len())] as char);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn pick<'a>(r: &mut ChaCha8Rng, lex: &'a [String]) -> &'a str {
    &lex[r.random_range(0..lex.len())]
}

fn counts<'a>(words: impl Iterator<Item = &'a str>) -> BTreeMap<&'a str, usize> {
    let mut m = BTreeMap::new();
    for w in words {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// `5 * J` rounded to one decimal, with `J` the multiset Jaccard overlap of
/// the two texts' words.
pub fn sts_score(a: &str, b: &str) -> f64 {
    let ca = counts(a.split_whitespace());
    let cb = counts(b.split_whitespace());
    let keys: BTreeSet<&str> = ca.keys().chain(cb.keys()).copied().collect();
    let (mut inter, mut union) = (0usize, 0usize);
    for k in keys {
        let (x, y) = (ca.get(k).copied().unwrap_or(0), cb.get(k).copied().unwrap_or(0));
        inter += x.min(y);
        union += x.max(y);
    }
    if union == 0 {
        return 0.0;
    }
    (50.0 * inter as f64 / union as f64).round() / 10.0
}

/// Index into [`NLI_LABELS`]. Entailment is checked first.
pub fn nli_label(premise: &str, hypothesis: &str) -> usize {
    let p: BTreeSet<&str> = premise.split_whitespace().collect();
    let h: BTreeSet<&str> = hypothesis.split_whitespace().collect();
    if h.is_subset(&p) {
        0
    } else if p.contains(NEGATION) != h.contains(NEGATION) {
        2
    } else {
        1
    }
}

fn synth_ner_example(r: &mut ChaCha8Rng, lex: &[String]) -> NerExample {
    let n_words = r.random_range(6..=12);
    let n_units = r.random_range(1..=2);
    let mut groups: Vec<Vec<(String, String)>> = Vec::new();
    let mut used = 0;
    for _ in 0..n_units {
        let (trigger, ty, k) = TRIGGERS[r.random_range(0..TRIGGERS.len())];
        let mut g = vec![(trigger.to_string(), "O".to_string())];
        for j in 0..k {
            let prefix = if j == 0 { "B" } else { "I" };
            g.push((pick(r, lex).to_string(), format!("{prefix}-{ty}")));
        }
        used += g.len();
        groups.push(g);
    }
    for _ in used..n_words {
        groups.push(vec![(pick(r, lex).to_string(), "O".to_string())]);
    }
    groups.shuffle(r);
    let (tokens, tags) = groups.into_iter().flatten().unzip();
    NerExample::new(tokens, tags).expect("equal lengths")
}

/// `n` distinct lexicon words not in `exclude`.
fn fresh<'a>(r: &mut ChaCha8Rng, lex: &'a [String], exclude: &[&str], n: usize) -> Vec<&'a str> {
    let pool: Vec<&str> = lex.iter().map(String::as_str).filter(|w| !exclude.contains(w)).collect();
    pool.choose_multiple(r, n).copied().collect()
}

fn synth_sts_example(r: &mut ChaCha8Rng, lex: &[String]) -> PairExample {
    let la = r.random_range(4..=6);
    let lb = r.random_range(4..=6);
    let a = fresh(r, lex, &[], la);
    let shared = r.random_range(0..=la.min(lb));
    let mut b: Vec<&str> = a.choose_multiple(r, shared).copied().collect();
    b.extend(fresh(r, lex, &a, lb - shared));
    b.shuffle(r);
    let (text_a, text_b) = (a.join(" "), b.join(" "));
    let score = sts_score(&text_a, &text_b);
    PairExample {
        text_a,
        text_b,
        target: PairTarget::Score(score),
    }
}

fn synth_nli_example(r: &mut ChaCha8Rng, lex: &[String], intent: usize) -> PairExample {
    let lp = r.random_range(4..=7);
    let mut p = fresh(r, lex, &[], lp);
    let lh = r.random_range(2..=4);
    let mut h: Vec<&str> = p.choose_multiple(r, lh).copied().collect();
    match intent {
        // entailment: subset, negation on both sides or neither
        0 => {
            if r.random_bool(0.3) {
                p.push(NEGATION);
                h.push(NEGATION);
            }
        }
        // neutral: one or two words absent from the premise
        1 => {
            let k = r.random_range(1..=2);
            let novel = fresh(r, lex, &p, k);
            h[..novel.len()].copy_from_slice(&novel);
            if r.random_bool(0.3) {
                p.push(NEGATION);
                h.push(NEGATION);
            }
        }
        // contradiction: negation only in the hypothesis
        _ => h.push(NEGATION),
    }
    p.shuffle(r);
    h.shuffle(r);
    let (text_a, text_b) = (p.join(" "), h.join(" "));
    let label = nli_label(&text_a, &text_b);
    PairExample {
        text_a,
        text_b,
        target: PairTarget::Class(label),
    }
}

fn synth_split(kind: HeadKind, seed: u64, n: usize, split: Split, lex: &[String]) -> TaskDataset {
    let mut r = rng::stream(seed, "synth", &[kind.code() as u64, split as u64]);
    let examples = match kind {
        HeadKind::Ner => Examples::Ner((0..n).map(|_| synth_ner_example(&mut r, lex)).collect()),
        HeadKind::Sts => Examples::Pairs((0..n).map(|_| synth_sts_example(&mut r, lex)).collect()),
        HeadKind::Nli => Examples::Pairs((0..n).map(|i| synth_nli_example(&mut r, lex, i % 3)).collect()),
    };
    TaskDataset {
        task_id: kind.name().to_string(),
        split,
        examples,
    }
}

/// Train and test splits of a synthetic task; a pure function of its
/// arguments. NLI targets index [`NLI_LABELS`], NER tags use
/// [`SYNTH_NER_TAGS`].
pub fn synth_task(kind: HeadKind, seed: u64, n_train: usize, n_test: usize, vocab_size: usize) -> (TaskDataset, TaskDataset) {
    let lex = lexicon(vocab_size);
    (
        synth_split(kind, seed, n_train, Split::Train, &lex),
        synth_split(kind, seed, n_test, Split::Test, &lex),
    )
}

/// Maps 3-way NLI targets onto [`NLI_BINARY_LABELS`].
pub fn binarize_nli(ds: &mut TaskDataset) {
    if let Examples::Pairs(v) = &mut ds.examples {
        for ex in v {
            if let PairTarget::Class(c) = &mut ex.target {
                *c = usize::from(*c != 0);
            }
        }
    }
}

pub fn synth_labels(kind: HeadKind, classes: usize) -> Vec<String> {
    let names: &[&str] = match (kind, classes) {
        (HeadKind::Ner, _) => &SYNTH_NER_TAGS,
        (HeadKind::Sts, _) => &[],
        (HeadKind::Nli, 2) => &NLI_BINARY_LABELS,
        (HeadKind::Nli, _) => &NLI_LABELS,
    };
    names.iter().map(|s| s.to_string()).collect()
}

/// Loads (train, test) for a task from its source.
pub fn load_task(spec: &TaskSpec) -> Result<(TaskDataset, TaskDataset)> {
    let (mut train, mut test) = match &spec.source {
        DataSource::Synthetic {
            n_train,
            n_test,
            seed,
            vocab_size,
        } => {
            let expected = synth_labels(spec.head_kind, spec.label_names.len());
            if spec.label_names != expected {
                return Err(Error::Config(format!(
                    "synthetic {} task {:?} must use labels {expected:?}",
                    spec.head_kind.name(),
                    spec.task_id
                )));
            }
            let (mut tr, mut te) = synth_task(spec.head_kind, *seed, *n_train, *n_test, *vocab_size);
            if spec.head_kind == HeadKind::Nli && spec.label_names.len() == 2 {
                binarize_nli(&mut tr);
                binarize_nli(&mut te);
            }
            (tr, te)
        }
        DataSource::Files { train, test } => {
            let read = |p: &PathBuf, split| -> Result<TaskDataset> {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                let examples = match spec.head_kind {
                    HeadKind::Ner => Examples::Ner(parse_conll(&text)?),
                    kind => Examples::Pairs(parse_pairs(&text, kind, &spec.label_names)?),
                };
                Ok(TaskDataset {
                    task_id: spec.task_id.clone(),
                    split,
                    examples,
                })
            };
            (read(train, Split::Train)?, read(test, Split::Test)?)
        }
    };
    train.task_id = spec.task_id.clone();
    test.task_id = spec.task_id.clone();
    Ok((train, test))
}

/// Every text of a dataset (for vocabulary building).
pub fn texts(ds: &TaskDataset) -> Vec<String> {
    match &ds.examples {
        Examples::Ner(v) => v.iter().map(NerExample::text).collect(),
        Examples::Pairs(v) => v.iter().flat_map(|e| [e.text_a.clone(), e.text_b.clone()]).collect(),
    }
}

/// One row of the paper-shape profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProfileTask {
    pub task_id: &'static str,
    pub kind: HeadKind,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub batch_size: usize,
}

const fn row(task_id: &'static str, kind: HeadKind, classes: usize, n_train: usize, n_test: usize, batch_size: usize) -> ProfileTask {
    ProfileTask {
        task_id,
        kind,
        classes,
        n_train,
        n_test,
        batch_size,
    }
}

/// Eight tasks with the published clinical benchmark sizes: NER tasks use
/// batch size 25, sentence-pair tasks 40.
pub const PAPER_SHAPE: [ProfileTask; 8] = [
    row("sts_n2c2_2019", HeadKind::Sts, 0, 1641, 410, 40),
    row("mednli", HeadKind::Nli, 3, 12627, 1422, 40),
    row("medrqe", HeadKind::Nli, 2, 8588, 302, 40),
    row("n2c2_2018", HeadKind::Ner, 0, 36384, 23462, 25),
    row("i2b2_2014", HeadKind::Ner, 0, 17310, 11462, 25),
    row("i2b2_2012", HeadKind::Ner, 0, 16468, 13594, 25),
    row("i2b2_2010", HeadKind::Ner, 0, 27837, 45009, 25),
    row("quaero_2014", HeadKind::Ner, 0, 2695, 2260, 25),
];

/// Task specs for the paper-shape profile, each a synthetic source with the
/// row's sizes and a seed derived from `seed` and the row index.
pub fn paper_shape_specs(seed: u64, vocab_size: usize) -> Vec<TaskSpec> {
    PAPER_SHAPE
        .iter()
        .enumerate()
        .map(|(i, r)| {
            TaskSpec::new(
                r.task_id,
                r.kind,
                synth_labels(r.kind, r.classes),
                r.batch_size,
                DataSource::Synthetic {
                    n_train: r.n_train,
                    n_test: r.n_test,
                    seed: rng::derive_seed(seed, "paper_shape", &[i as u64]),
                    vocab_size,
                },
            )
            .expect("profile rows are valid")
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Batching

/// Position of a [`BatchIter`]; the permutation is recomputed from the
/// seed and epoch, so these three counters are the whole state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterState {
    pub epoch: u64,
    pub pos: usize,
    pub wraps: u64,
}

/// Shuffled mini-batches of indices into a dataset of `len` examples.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchIter {
    len: usize,
    batch_size: usize,
    seed: u64,
    cycling: bool,
    state: IterState,
    perm: Vec<usize>,
}

impl BatchIter {
    pub fn new(len: usize, batch_size: usize, seed: u64, cycling: bool) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data("cannot iterate over an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let mut it = BatchIter {
            len,
            batch_size,
            seed,
            cycling,
            state: IterState::default(),
            perm: Vec::new(),
        };
        it.shuffle();
        Ok(it)
    }

    fn shuffle(&mut self) {
        self.perm = (0..self.len).collect();
        self.perm.shuffle(&mut rng::stream(self.seed, "shuffle", &[self.state.epoch]));
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn state(&self) -> IterState {
        self.state
    }

    pub fn wraps(&self) -> u64 {
        self.state.wraps
    }

    pub fn set_state(&mut self, state: IterState) -> Result<()> {
        if state.pos > self.len {
            return Err(Error::State(format!("iterator position {} beyond {} examples", state.pos, self.len)));
        }
        let reshuffle = state.epoch != self.state.epoch;
        self.state = state;
        if reshuffle {
            self.shuffle();
        }
        Ok(())
    }

    /// Starts an outer loop: wrap counter back to zero, and an exhausted
    /// epoch is replaced by a fresh one without counting a wrap.
    pub fn begin_outer_loop(&mut self) {
        if self.state.pos >= self.len {
            self.next_epoch();
        }
        self.state.wraps = 0;
    }

    fn next_epoch(&mut self) {
        self.state.epoch += 1;
        self.state.pos = 0;
        self.shuffle();
    }

    /// Next batch of example indices. Without cycling, `None` once the
    /// epoch is exhausted; with cycling the data is reshuffled and the wrap
    /// counter incremented instead.
    pub fn next_batch(&mut self) -> Option<Vec<usize>> {
        if self.state.pos >= self.len {
            if !self.cycling {
                return None;
            }
            self.next_epoch();
            self.state.wraps += 1;
        }
        let end = (self.state.pos + self.batch_size).min(self.len);
        let out = self.perm[self.state.pos..end].to_vec();
        self.state.pos = end;
        Some(out)
    }
}

/// Per-example model targets of a task.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Per-piece tag ids, `None` at special and padding positions.
    Tags(Vec<Vec<Option<usize>>>),
    Scores(Vec<f64>),
    Classes(Vec<usize>),
}

/// Tokenized examples of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskFeatures {
    pub encodings: Vec<Encoding>,
    pub targets: Targets,
    /// Gold char spans per example (NER only).
    pub gold_spans: Vec<SpanSet>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchTargets {
    /// Flattened `[B * T]` tag targets.
    Tags(Vec<Option<usize>>),
    Scores(Vec<f64>),
    Classes(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub input: InputBatch,
    pub targets: BatchTargets,
}

impl TaskFeatures {
    pub fn build(spec: &TaskSpec, ds: &TaskDataset, vocab: &Vocab, max_len: usize) -> Result<Self> {
        match (&ds.examples, spec.head_kind) {
            (Examples::Ner(v), HeadKind::Ner) => {
                let tags = TagSet::new(&spec.label_names)?;
                let mut encodings = Vec::with_capacity(v.len());
                let mut targets = Vec::with_capacity(v.len());
                let mut gold_spans = Vec::with_capacity(v.len());
                for ex in v {
                    let ids = ex
                        .tags
                        .iter()
                        .map(|t| {
                            tags.id(t)
                                .ok_or_else(|| Error::Label(format!("tag {t:?} not in task {:?}", spec.task_id)))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let enc = encode_single(&ex.text(), vocab, max_len)?;
                    targets.push(align_word_tags(&enc, &ids, &tags)?);
                    gold_spans.push(tags.spans(&ids, &ex.offsets).into_iter().collect());
                    encodings.push(enc);
                }
                Ok(TaskFeatures {
                    encodings,
                    targets: Targets::Tags(targets),
                    gold_spans,
                })
            }
            (Examples::Pairs(v), kind @ (HeadKind::Sts | HeadKind::Nli)) => {
                let encodings = v
                    .iter()
                    .map(|e| encode_pair(&e.text_a, &e.text_b, vocab, max_len))
                    .collect::<Result<Vec<_>>>()?;
                let targets = if kind == HeadKind::Sts {
                    Targets::Scores(
                        v.iter()
                            .map(|e| match e.target {
                                PairTarget::Score(s) if (STS_MIN..=STS_MAX).contains(&s) => Ok(s),
                                _ => Err(Error::Data("STS example without a score in [0, 5]".into())),
                            })
                            .collect::<Result<_>>()?,
                    )
                } else {
                    Targets::Classes(
                        v.iter()
                            .map(|e| match e.target {
                                PairTarget::Class(c) if c < spec.label_names.len() => Ok(c),
                                _ => Err(Error::Label("NLI example without a valid class".into())),
                            })
                            .collect::<Result<_>>()?,
                    )
                };
                Ok(TaskFeatures {
                    encodings,
                    targets,
                    gold_spans: Vec::new(),
                })
            }
            _ => Err(Error::Data(format!(
                "dataset of task {:?} does not match its {} head",
                spec.task_id,
                spec.head_kind.name()
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.encodings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encodings.is_empty()
    }

    pub fn collate(&self, indices: &[usize]) -> Result<Batch> {
        let encs: Vec<&Encoding> = indices
            .iter()
            .map(|&i| self.encodings.get(i).ok_or_else(|| Error::Data(format!("example {i} out of range"))))
            .collect::<Result<_>>()?;
        let input = InputBatch::from_encodings(&encs)?;
        let targets = match &self.targets {
            Targets::Tags(t) => {
                BatchTargets::Tags(indices.iter().flat_map(|&i| t[i][..input.seq_len].iter().copied()).collect())
            }
            Targets::Scores(s) => BatchTargets::Scores(indices.iter().map(|&i| s[i]).collect()),
            Targets::Classes(c) => BatchTargets::Classes(indices.iter().map(|&i| c[i]).collect()),
        };
        Ok(Batch {
            indices: indices.to_vec(),
            input,
            targets,
        })
    }
}

/// Train and test features of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: TaskFeatures,
    pub test: TaskFeatures,
}

/// Shared sub-word vocabulary over the training texts of every task, in
/// task order.
pub fn build_vocab(train: &[&TaskDataset], size: usize) -> Result<Vocab> {
    let corpus: Vec<String> = train.iter().flat_map(|d| texts(d)).collect();
    Vocab::build(corpus.iter().map(String::as_str), size)
}

/// Loads every task, builds one vocabulary of at most `vocab_size` pieces
/// and tokenizes both splits.
pub fn prepare(specs: &[TaskSpec], vocab_size: usize, max_len: usize) -> Result<(Vocab, Vec<TaskData>)> {
    let loaded = specs.iter().map(load_task).collect::<Result<Vec<_>>>()?;
    let vocab = build_vocab(&loaded.iter().map(|(tr, _)| tr).collect::<Vec<_>>(), vocab_size)?;
    let data = prepare_with(specs, &loaded, &vocab, max_len)?;
    Ok((vocab, data))
}

pub fn prepare_with(
    specs: &[TaskSpec],
    loaded: &[(TaskDataset, TaskDataset)],
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<TaskData>> {
    specs
        .iter()
        .zip(loaded)
        .map(|(s, (tr, te))| {
            Ok(TaskData {
                train: TaskFeatures::build(s, tr, vocab, max_len)?,
                test: TaskFeatures::build(s, te, vocab, max_len)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn labels(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn conll_examples() {
        let v = parse_conll("Aspirin\tB-DRUG\n\n").unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].tokens, ["Aspirin"]);
        assert_eq!(v[0].tags, ["B-DRUG"]);
        assert!(parse_conll("").unwrap().is_empty());
        let v = parse_conll("a\tB-X\nb\tI-Y\n").unwrap();
        assert_eq!(v[0].tags, ["B-X", "I-Y"]);
        assert_eq!(v[0].offsets, [(0, 1), (2, 3)]);
    }

    #[test]
    fn conll_errors_carry_line_numbers() {
        assert!(matches!(parse_conll("a\tO\nb\tO\textra\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_conll("a\tO\n\nb\tQ-X\n"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_conll("lonely\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn conll_round_trip() {
        let text = "Pt\tO\nhas\tO\nchest\tB-PROB\npain\tI-PROB\n\nCT\tB-TEST\n\n";
        let v = parse_conll(text).unwrap();
        assert_eq!(write_conll(&v), text);
    }

    #[test]
    fn pair_examples() {
        let v = parse_pairs("a b\ta b\t5.0\n", HeadKind::Sts, &[]).unwrap();
        assert_eq!(v[0].target, PairTarget::Score(5.0));
        assert!(matches!(parse_pairs("x\ty\t6.1\n", HeadKind::Sts, &[]), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_pairs("x\ty\tfive\n", HeadKind::Sts, &[]), Err(Error::Parse { .. })));
        let l = labels(&NLI_LABELS);
        let v = parse_pairs("p\th\tentailment\n", HeadKind::Nli, &l).unwrap();
        assert_eq!(v[0].target, PairTarget::Class(0));
        assert!(matches!(parse_pairs("p\th\tmaybe\n", HeadKind::Nli, &l), Err(Error::Parse { .. })));
        assert!(matches!(parse_pairs("p\th\n", HeadKind::Nli, &l), Err(Error::Parse { .. })));
    }

    #[test]
    fn synthetic_rule_examples() {
        assert_eq!(sts_score("ba de fi", "ba de fi"), 5.0);
        assert_eq!(sts_score("ba de", "fi go"), 0.0);
        assert_eq!(nli_label("ba de fi", "ba de fi"), 0);
        assert_eq!(nli_label("ba de", "ba not"), 2);
        assert_eq!(nli_label("ba not de", "ba not"), 0);
        assert_eq!(nli_label("ba de", "ba fi"), 1);
    }

    #[test]
    fn synthetic_is_pure() {
        for kind in [HeadKind::Ner, HeadKind::Sts, HeadKind::Nli] {
            assert_eq!(synth_task(kind, 7, 30, 10, 50), synth_task(kind, 7, 30, 10, 50));
            assert_ne!(synth_task(kind, 7, 30, 10, 50).0, synth_task(kind, 8, 30, 10, 50).0);
        }
    }

    // Independent recomputation of the synthetic targets from text alone.
    fn oracle_sts(a: &str, b: &str) -> f64 {
        let mut xa: Vec<&str> = a.split(' ').collect();
        let mut xb: Vec<&str> = b.split(' ').collect();
        let total = xa.len() + xb.len();
        let mut inter = 0;
        xa.sort();
        for w in xa.drain(..) {
            if let Some(i) = xb.iter().position(|&y| y == w) {
                xb.remove(i);
                inter += 1;
            }
        }
        let union = total - inter;
        (inter as f64 * 50.0 / union as f64).round() / 10.0
    }

    fn oracle_nli(p: &str, h: &str) -> &'static str {
        let pw: Vec<&str> = p.split(' ').collect();
        let hw: Vec<&str> = h.split(' ').collect();
        if hw.iter().all(|w| pw.contains(w)) {
            "entailment"
        } else if pw.contains(&"not") ^ hw.contains(&"not") {
            "contradiction"
        } else {
            "neutral"
        }
    }

    #[test]
    fn synthetic_targets_match_oracle() {
        let (tr, _) = synth_task(HeadKind::Sts, 3, 500, 1, 40);
        let Examples::Pairs(v) = tr.examples else { panic!() };
        let mut distinct = BTreeSet::new();
        for e in &v {
            let PairTarget::Score(s) = e.target else { panic!() };
            assert_eq!(s, oracle_sts(&e.text_a, &e.text_b), "{e:?}");
            distinct.insert((s * 10.0) as i64);
        }
        assert!(distinct.len() >= 10, "{distinct:?}");

        let (tr, _) = synth_task(HeadKind::Nli, 3, 600, 1, 40);
        let Examples::Pairs(v) = tr.examples else { panic!() };
        let mut per_class = [0; 3];
        for e in &v {
            let PairTarget::Class(c) = e.target else { panic!() };
            assert_eq!(NLI_LABELS[c], oracle_nli(&e.text_a, &e.text_b), "{e:?}");
            per_class[c] += 1;
        }
        assert!(per_class.iter().all(|&n| n > 150), "{per_class:?}");
    }

    #[test]
    fn synthetic_ner_entities_follow_triggers() {
        let (tr, _) = synth_task(HeadKind::Ner, 5, 200, 1, 60);
        let Examples::Ner(v) = tr.examples else { panic!() };
        for ex in &v {
            assert!((6..=12).contains(&ex.tokens.len()));
            for (i, tok) in ex.tokens.iter().enumerate() {
                if let Some(&(_, ty, k)) = TRIGGERS.iter().find(|t| t.0 == tok) {
                    assert_eq!(ex.tags[i], "O");
                    assert_eq!(ex.tags[i + 1], format!("B-{ty}"));
                    if k == 2 {
                        assert_eq!(ex.tags[i + 2], format!("I-{ty}"));
                    }
                }
            }
            let entity_starts = ex.tags.iter().filter(|t| t.starts_with("B-")).count();
            let triggers = ex.tokens.iter().filter(|t| TRIGGERS.iter().any(|x| x.0 == t.as_str())).count();
            assert_eq!(entity_starts, triggers);
        }
    }

    #[test]
    fn batch_sizes_per_epoch() {
        let mut it = BatchIter::new(10, 3, 1, false).unwrap();
        let sizes: Vec<usize> = std::iter::from_fn(|| it.next_batch()).map(|b| b.len()).collect();
        assert_eq!(sizes, [3, 3, 3, 1]);
        assert!(matches!(BatchIter::new(0, 3, 1, false), Err(Error::Data(_))));
    }

    #[test]
    fn cycling_wrap_counter() {
        let mut it = BatchIter::new(2, 1, 9, true).unwrap();
        let mut seen = [0; 2];
        for _ in 0..10 {
            for i in it.next_batch().unwrap() {
                seen[i] += 1;
            }
        }
        assert_eq!(it.wraps(), 4);
        assert_eq!(seen, [5, 5]);
    }

    #[test]
    fn iterator_state_restores() {
        let mut a = BatchIter::new(17, 4, 3, true).unwrap();
        for _ in 0..7 {
            a.next_batch();
        }
        let mut b = BatchIter::new(17, 4, 3, true).unwrap();
        b.set_state(a.state()).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn paper_shape_sizes() {
        let specs = paper_shape_specs(1, 100);
        assert_eq!(specs.len(), 8);
        let sts = &specs[0];
        assert_eq!(sts.batch_size, 40);
        assert!(matches!(sts.source, DataSource::Synthetic { n_train: 1641, n_test: 410, .. }));
        assert!(specs.iter().filter(|s| s.head_kind == HeadKind::Ner).all(|s| s.batch_size == 25));
    }

    #[test]
    fn features_and_collate() {
        let spec = TaskSpec::new("ner", HeadKind::Ner, synth_labels(HeadKind::Ner, 0), 4, DataSource::default()).unwrap();
        let (tr, _) = load_task(&spec).unwrap();
        let corpus = texts(&tr);
        let vocab = Vocab::build(corpus.iter().map(String::as_str), 400).unwrap();
        let f = TaskFeatures::build(&spec, &tr, &vocab, 64).unwrap();
        let b = f.collate(&[0, 3]).unwrap();
        let BatchTargets::Tags(t) = &b.targets else { panic!() };
        assert_eq!(t.len(), 2 * b.input.seq_len);
        assert_eq!(t[0], None);
        assert_eq!(f.gold_spans.len(), tr.len());

        let bad = TaskSpec::new("nli", HeadKind::Nli, labels(&["yes", "no"]), 4, DataSource::default()).unwrap();
        assert!(matches!(load_task(&bad), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn every_epoch_visits_each_example_once(len in 1usize..60, bs in 1usize..9, seed in 0u64..50) {
            let mut it = BatchIter::new(len, bs, seed, true).unwrap();
            for _ in 0..3 {
                let mut seen = Vec::new();
                for _ in 0..it.batches_per_epoch() {
                    seen.extend(it.next_batch().unwrap());
                }
                seen.sort();
                prop_assert_eq!(seen, (0..len).collect::<Vec<_>>());
            }
        }

        #[test]
        fn same_seed_same_order(len in 1usize..40, bs in 1usize..6, seed in 0u64..1000) {
            let mut a = BatchIter::new(len, bs, seed, true).unwrap();
            let mut b = BatchIter::new(len, bs, seed, true).unwrap();
            for _ in 0..20 {
                prop_assert_eq!(a.next_batch(), b.next_batch());
            }
        }
    }
}
