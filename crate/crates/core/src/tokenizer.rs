//! Corpus-derived greedy sub-word tokenizer.
//!
//! The vocabulary starts from every character seen in the corpus (both as a
//! word-initial piece and as a `##` continuation piece) and grows by merging
//! the most frequent adjacent piece pair. Encoding splits on whitespace and
//! segments each word by greedy longest match; a word that cannot be
//! segmented becomes a single `[UNK]`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;

pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
pub const CONTINUATION: &str = "##";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from an explicit id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Data(format!(
                "vocabulary must start with {RESERVED:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary token {tok:?} at id {id}")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Greedy frequency-ordered merge vocabulary of at most `target_size`
    /// tokens. Ties between equally frequent pairs go to the
    /// lexicographically smallest pair.
    pub fn build<'a, I>(corpus: I, target_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
        for text in corpus {
            for w in text.split_whitespace() {
                *word_counts.entry(w).or_default() += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }

        let mut chars: Vec<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        let base = RESERVED.len() + 2 * chars.len();
        if target_size < base {
            return Err(Error::Data(format!(
                "target vocabulary size {target_size} is below the {base} reserved and single-character tokens"
            )));
        }

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(chars.iter().map(|c| c.to_string()));
        tokens.extend(chars.iter().map(|c| format!("{CONTINUATION}{c}")));
        let mut present: HashMap<String, ()> = tokens.iter().map(|t| (t.clone(), ())).collect();

        let mut words: Vec<(Vec<String>, u64)> = word_counts
            .iter()
            .map(|(w, &n)| {
                let pieces = w
                    .chars()
                    .enumerate()
                    .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
                    .collect();
                (pieces, n)
            })
            .collect();

        while tokens.len() < target_size {
            let mut pairs: BTreeMap<(&str, &str), u64> = BTreeMap::new();
            for (pieces, n) in &words {
                for w in pieces.windows(2) {
                    *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
                }
            }
            // max count, smallest pair on ties (BTreeMap iterates ascending)
            let Some(((left, right), _)) = pairs
                .iter()
                .fold(None::<(&(&str, &str), u64)>, |best, (pair, &n)| match best {
                    Some((_, bn)) if bn >= n => best,
                    _ => Some((pair, n)),
                })
                .map(|(p, n)| ((p.0.to_string(), p.1.to_string()), n))
            else {
                break;
            };
            let merged = format!("{left}{}", right.strip_prefix(CONTINUATION).unwrap_or(&right));
            for (pieces, _) in words.iter_mut() {
                let mut i = 0;
                while i + 1 < pieces.len() {
                    if pieces[i] == left && pieces[i + 1] == right {
                        pieces[i] = merged.clone();
                        pieces.remove(i + 1);
                    }
                    i += 1;
                }
            }
            if present.insert(merged.clone(), ()).is_none() {
                tokens.push(merged);
            }
        }
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocab::from_text(&std::fs::read_to_string(path)?)
    }

    /// Greedy longest-match pieces of one word, as `(id, char_start,
    /// char_end)` relative to the word. `None` if some position has no match.
    fn segment(&self, word: &[char]) -> Option<Vec<(usize, usize, usize)>> {
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut buf = String::new();
        while start < word.len() {
            let mut end = word.len();
            let mut found = None;
            while end > start {
                buf.clear();
                if start > 0 {
                    buf.push_str(CONTINUATION);
                }
                buf.extend(&word[start..end]);
                if let Some(id) = self.id(&buf) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            pieces.push((found?, start, end));
            start = end;
        }
        Some(pieces)
    }

    /// Reassembles text from ids, skipping special tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id < RESERVED.len() && id != UNK {
                continue;
            }
            let tok = self.token(id).unwrap_or("[UNK]");
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}

/// Encoded model input. All vectors have the same length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoding {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    /// Char offsets into the source text of the piece's segment; `None` for
    /// special tokens.
    pub offsets: Vec<Option<(usize, usize)>>,
    /// Index of the source word within its segment; `None` for special tokens.
    pub word_index: Vec<Option<usize>>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    fn with_capacity(n: usize) -> Self {
        Encoding {
            token_ids: Vec::with_capacity(n),
            segment_ids: Vec::with_capacity(n),
            attention_mask: Vec::with_capacity(n),
            offsets: Vec::with_capacity(n),
            word_index: Vec::with_capacity(n),
        }
    }

    fn push_special(&mut self, id: usize, segment: usize) {
        self.token_ids.push(id);
        self.segment_ids.push(segment);
        self.attention_mask.push(1);
        self.offsets.push(None);
        self.word_index.push(None);
    }

    fn push_piece(&mut self, p: &Piece, segment: usize) {
        self.token_ids.push(p.id);
        self.segment_ids.push(segment);
        self.attention_mask.push(1);
        self.offsets.push(Some((p.start, p.end)));
        self.word_index.push(Some(p.word));
    }

    fn pad_to(&mut self, max_len: usize) {
        while self.token_ids.len() < max_len {
            self.token_ids.push(PAD);
            self.segment_ids.push(0);
            self.attention_mask.push(0);
            self.offsets.push(None);
            self.word_index.push(None);
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Piece {
    id: usize,
    start: usize,
    end: usize,
    word: usize,
}

/// Whitespace-delimited words of `text` with their char offsets.
pub fn words_with_offsets(text: &str) -> Vec<(String, usize, usize)> {
    let mut words = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut pos = 0;
    for c in text.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                words.push((std::mem::take(&mut current), start, pos));
            }
        } else {
            if current.is_empty() {
                start = pos;
            }
            current.push(c);
        }
        pos += 1;
    }
    if !current.is_empty() {
        words.push((current, start, pos));
    }
    words
}

fn pieces(text: &str, vocab: &Vocab) -> Vec<Piece> {
    let mut out = Vec::new();
    for (w, (word, start, end)) in words_with_offsets(text).into_iter().enumerate() {
        let chars: Vec<char> = word.chars().collect();
        match vocab.segment(&chars) {
            Some(segs) => out.extend(segs.into_iter().map(|(id, s, e)| Piece {
                id,
                start: start + s,
                end: start + e,
                word: w,
            })),
            None => out.push(Piece {
                id: UNK,
                start,
                end,
                word: w,
            }),
        }
    }
    out
}

/// `[CLS] pieces [SEP]` padded to `max_len`; trailing pieces are dropped
/// when the text does not fit.
pub fn encode_single(text: &str, vocab: &Vocab, max_len: usize) -> Result<Encoding> {
    if max_len < 3 {
        return Err(Error::InvalidArgument(format!("max_len {max_len} < 3")));
    }
    let mut ps = pieces(text, vocab);
    ps.truncate(max_len - 2);
    let mut enc = Encoding::with_capacity(max_len);
    enc.push_special(CLS, 0);
    ps.iter().for_each(|p| enc.push_piece(p, 0));
    enc.push_special(SEP, 0);
    enc.pad_to(max_len);
    Ok(enc)
}

/// `[CLS] A [SEP] B [SEP]` padded to `max_len`. On overflow one piece at a
/// time is removed from the end of the longer segment, from A on ties.
pub fn encode_pair(a: &str, b: &str, vocab: &Vocab, max_len: usize) -> Result<Encoding> {
    if max_len < 5 {
        return Err(Error::InvalidArgument(format!("max_len {max_len} < 5")));
    }
    let mut pa = pieces(a, vocab);
    let mut pb = pieces(b, vocab);
    let (la, lb) = truncated_pair_lengths(pa.len(), pb.len(), max_len - 3);
    pa.truncate(la);
    pb.truncate(lb);
    let mut enc = Encoding::with_capacity(max_len);
    enc.push_special(CLS, 0);
    pa.iter().for_each(|p| enc.push_piece(p, 0));
    enc.push_special(SEP, 0);
    pb.iter().for_each(|p| enc.push_piece(p, 1));
    enc.push_special(SEP, 1);
    enc.pad_to(max_len);
    Ok(enc)
}

fn truncated_pair_lengths(mut la: usize, mut lb: usize, budget: usize) -> (usize, usize) {
    while la + lb > budget {
        if la >= lb {
            la -= 1;
        } else {
            lb -= 1;
        }
    }
    (la, lb)
}
