//! Documents, CoNLL-style tagged sentences, sentence splitting and
//! deterministic train/validation/test partitions.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Entity type assigned to spans from the numeric `0/1/2` tag scheme.
pub const NUMERIC_ENTITY_TYPE: &str = "Disease";

/// Boundaries after these tokens are suppressed.
pub const ABBREVIATIONS: &[&str] = &["Dr.", "U.S.", "e.g.", "i.e.", "etc."];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("document {id:?}: {message}")]
    InvalidDocument { id: String, message: String },
    #[error("unknown tag symbol {0:?}")]
    UnknownTag(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Half-open span `[start, end)` in Unicode scalar values of the owning text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub etype: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, etype: impl Into<String>) -> Self {
        EntitySpan { start, end, etype: etype.into() }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    /// Characters of `text` covered by this span.
    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        char_slice(text, self.start, self.end)
    }
}

/// Substring by character (not byte) offsets, clamped to the text.
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let byte_at = |n: usize| text.char_indices().nth(n).map(|(b, _)| b).unwrap_or(text.len());
    let (b0, b1) = (byte_at(start), byte_at(end));
    &text[b0..b1.max(b0)]
}

/// Checks the span invariants against a text of `text_len` characters.
pub fn validate_spans(spans: &[EntitySpan], text_len: usize) -> Result<(), String> {
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort();
    for s in &sorted {
        if s.start >= s.end || s.end > text_len {
            return Err(format!("span [{}, {}) outside text of length {}", s.start, s.end, text_len));
        }
    }
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(format!("spans [{}, {}) and [{}, {}) overlap", w[0].start, w[0].end, w[1].start, w[1].end));
        }
    }
    Ok(())
}

/// Unit of triage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DocumentRecord", into = "DocumentRecord")]
pub struct Document {
    pub id: String,
    pub text: String,
    pub gold_label: Option<String>,
    pub gold_entities: Option<Vec<EntitySpan>>,
}

#[derive(Serialize, Deserialize)]
struct DocumentRecord {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entities: Option<Vec<EntitySpan>>,
}

impl TryFrom<DocumentRecord> for Document {
    type Error = CorpusError;

    fn try_from(r: DocumentRecord) -> Result<Self, Self::Error> {
        let doc = Document { id: r.id, text: r.text, gold_label: r.label, gold_entities: r.entities };
        doc.validate()?;
        Ok(doc)
    }
}

impl From<Document> for DocumentRecord {
    fn from(d: Document) -> Self {
        DocumentRecord { id: d.id, text: d.text, label: d.gold_label, entities: d.gold_entities }
    }
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document { id: id.into(), text: text.into(), gold_label: None, gold_entities: None }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.gold_label = Some(label.into());
        self
    }

    pub fn with_entities(mut self, spans: Vec<EntitySpan>) -> Self {
        self.gold_entities = Some(spans);
        self
    }

    /// Length of the text in characters.
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |message: &str| CorpusError::InvalidDocument { id: self.id.clone(), message: message.into() };
        if self.id.is_empty() {
            return Err(invalid("empty id"));
        }
        if self.text.is_empty() {
            return Err(invalid("empty text"));
        }
        if self.gold_label.is_some() && self.gold_entities.is_some() {
            return Err(invalid("both label and entities present"));
        }
        if let Some(spans) = &self.gold_entities {
            validate_spans(spans, self.char_len()).map_err(|m| invalid(&m))?;
        }
        Ok(())
    }
}

/// Parses newline-delimited JSON records `{"id", "text", "label"?}`.
///
/// Records may alternatively carry `"entities": [{"start","end","type"}]`
/// for entity-recognition corpora.
pub fn parse_jsonl(bytes: &[u8]) -> Result<Vec<Document>, CorpusError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| CorpusError::Malformed { line: line_of_byte(bytes, e.valid_up_to()), message: e.to_string() })?;
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(line)
            .map_err(|e| CorpusError::Malformed { line: i + 1, message: e.to_string() })?;
        if !seen.insert(doc.id.clone()) {
            return Err(CorpusError::DuplicateId(doc.id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

fn line_of_byte(bytes: &[u8], pos: usize) -> usize {
    bytes[..pos].iter().filter(|&&b| b == b'\n').count() + 1
}

pub fn to_jsonl(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d).expect("document serializes"));
        out.push('\n');
    }
    out
}

/// Tokens with their tags, joined by single spaces into `text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub text: String,
    /// Per-token `(start, end)` character offsets into `text`.
    pub char_spans: Vec<(usize, usize)>,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, tags: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.len() != tags.len() {
            return Err(CorpusError::Malformed {
                line: 0,
                message: format!("{} tokens but {} tags", tokens.len(), tags.len()),
            });
        }
        let mut text = String::new();
        let mut char_spans = Vec::with_capacity(tokens.len());
        let mut pos = 0;
        for (i, tok) in tokens.iter().enumerate() {
            if i > 0 {
                text.push(' ');
                pos += 1;
            }
            let n = tok.chars().count();
            text.push_str(tok);
            char_spans.push((pos, pos + n));
            pos += n;
        }
        Ok(TaggedSentence { tokens, tags, text, char_spans })
    }

    pub fn char_len(&self) -> usize {
        self.char_spans.last().map_or(0, |s| s.1)
    }
}

/// Parses CoNLL column text: whitespace-separated columns, tag last,
/// blank lines between sentences, `-DOCSTART-` lines skipped.
pub fn parse_conll(bytes: &[u8]) -> Result<Vec<TaggedSentence>, CorpusError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| CorpusError::Malformed { line: line_of_byte(bytes, e.valid_up_to()), message: e.to_string() })?;
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>| -> Result<(), CorpusError> {
        if !tokens.is_empty() {
            out.push(TaggedSentence::new(std::mem::take(tokens), std::mem::take(tags))?);
        }
        Ok(())
    };
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            flush(&mut tokens, &mut tags)?;
            continue;
        }
        if cols[0] == "-DOCSTART-" {
            flush(&mut tokens, &mut tags)?;
            continue;
        }
        if cols.len() < 2 {
            return Err(CorpusError::Malformed { line: i + 1, message: "expected at least 2 columns".into() });
        }
        tokens.push(cols[0].to_string());
        tags.push(cols[cols.len() - 1].to_string());
    }
    flush(&mut tokens, &mut tags)?;
    Ok(out)
}

/// Two-column `token tag` rendering readable by [`parse_conll`].
pub fn to_conll(sentences: &[TaggedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(tok);
            out.push(' ');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tag {
    Outside,
    Begin(String),
    Inside(String),
}

impl Tag {
    /// Accepts IOB1/IOB2 (`O`, `B-X`, `I-X`) and the numeric scheme
    /// (`0` outside, `1` first token, `2` continuation).
    pub fn parse(symbol: &str) -> Result<Tag, CorpusError> {
        match symbol {
            "O" | "0" => Ok(Tag::Outside),
            "1" => Ok(Tag::Begin(NUMERIC_ENTITY_TYPE.into())),
            "2" => Ok(Tag::Inside(NUMERIC_ENTITY_TYPE.into())),
            _ => match symbol.split_once('-') {
                Some(("B", t)) if !t.is_empty() => Ok(Tag::Begin(t.into())),
                Some(("I", t)) if !t.is_empty() => Ok(Tag::Inside(t.into())),
                _ => Err(CorpusError::UnknownTag(symbol.into())),
            },
        }
    }
}

/// Rewrites IOB1 tags as IOB2: an inside tag that does not continue an
/// entity of the same type becomes a begin tag.
pub fn normalize_iob2(tags: &[Tag]) -> Vec<Tag> {
    let mut out: Vec<Tag> = Vec::with_capacity(tags.len());
    for tag in tags {
        let next = match tag {
            Tag::Inside(t) => match out.last() {
                Some(Tag::Begin(p)) | Some(Tag::Inside(p)) if p == t => Tag::Inside(t.clone()),
                _ => Tag::Begin(t.clone()),
            },
            other => other.clone(),
        };
        out.push(next);
    }
    out
}

/// Maximal entity runs as character spans over `sentence.text`.
pub fn tags_to_spans(sentence: &TaggedSentence) -> Result<Vec<EntitySpan>, CorpusError> {
    let parsed = sentence.tags.iter().map(|t| Tag::parse(t)).collect::<Result<Vec<_>, _>>()?;
    let mut spans = Vec::new();
    let mut open: Option<EntitySpan> = None;
    for (tag, &(start, end)) in normalize_iob2(&parsed).into_iter().zip(&sentence.char_spans) {
        match tag {
            Tag::Outside => spans.extend(open.take()),
            Tag::Begin(t) => {
                spans.extend(open.take());
                open = Some(EntitySpan::new(start, end, t));
            }
            Tag::Inside(_) => {
                if let Some(span) = open.as_mut() {
                    span.end = end;
                }
            }
        }
    }
    spans.extend(open);
    Ok(spans)
}

/// Sentence character ranges `(start, end)` under the rule-based splitter.
///
/// A boundary falls after a run of `.`, `!`, `?` that ends the text, or
/// that is followed by whitespace and then an uppercase letter or the end
/// of the text, unless the token ending there is a listed abbreviation.
/// Sentences are trimmed of surrounding whitespace; empty ones are dropped.
pub fn sentence_ranges(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let is_term = |c: char| matches!(c, '.' | '!' | '?');
    let mut cuts = Vec::new();
    let mut i = 0;
    while i < n {
        if !is_term(chars[i]) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < n && is_term(chars[j + 1]) {
            j += 1;
        }
        let boundary = if j + 1 == n {
            true
        } else if chars[j + 1].is_whitespace() {
            let mut k = j + 1;
            while k < n && chars[k].is_whitespace() {
                k += 1;
            }
            k == n || chars[k].is_uppercase()
        } else {
            false
        };
        if boundary {
            let mut tok_start = j;
            while tok_start > 0 && !chars[tok_start - 1].is_whitespace() {
                tok_start -= 1;
            }
            let token: String = chars[tok_start..=j].iter().collect();
            if !ABBREVIATIONS.contains(&token.as_str()) {
                cuts.push(j + 1);
            }
        }
        i = j + 1;
    }
    if cuts.last() != Some(&n) {
        cuts.push(n);
    }

    let mut out = Vec::new();
    let mut prev = 0;
    for cut in cuts {
        let (mut s, mut e) = (prev, cut);
        while s < e && chars[s].is_whitespace() {
            s += 1;
        }
        while e > s && chars[e - 1].is_whitespace() {
            e -= 1;
        }
        if s < e {
            out.push((s, e));
        }
        prev = cut;
    }
    out
}

/// Sentences with their character offsets into `text`.
pub fn split_sentences(text: &str) -> Vec<(String, usize)> {
    let chars: Vec<char> = text.chars().collect();
    sentence_ranges(text)
        .into_iter()
        .map(|(s, e)| (chars[s..e].iter().collect(), s))
        .collect()
}

/// Joins tagged sentences with single spaces into one document whose gold
/// entities are the sentences' spans shifted into document coordinates.
pub fn assemble_document(id: impl Into<String>, sentences: &[TaggedSentence]) -> Result<Document, CorpusError> {
    let mut text = String::new();
    let mut spans = Vec::new();
    let mut offset = 0;
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            text.push(' ');
            offset += 1;
        }
        text.push_str(&s.text);
        for span in tags_to_spans(s)? {
            spans.push(EntitySpan::new(span.start + offset, span.end + offset, span.etype));
        }
        offset += s.char_len();
    }
    let doc = Document::new(id, text).with_entities(spans);
    doc.validate()?;
    Ok(doc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Self {
        SplitRatios { train, validation, test }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let all = [self.train, self.validation, self.test];
        if all.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(CorpusError::InvalidSplit(format!("ratios must be positive, got {all:?}")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidSplit(format!("ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Document>,
    pub validation: Vec<Document>,
    pub test: Vec<Document>,
    pub seed: u64,
}

/// Seeded shuffle, then contiguous cuts of `round(ratio * N)` documents
/// for train and validation; test takes the remainder.
pub fn make_split(corpus: &[Document], ratios: SplitRatios, seed: u64) -> Result<CorpusSplit, CorpusError> {
    ratios.validate()?;
    let n = corpus.len();
    if n < 3 {
        return Err(CorpusError::InvalidSplit(format!("corpus of {n} documents, need at least 3")));
    }
    let mut seen = HashSet::new();
    for d in corpus {
        if !seen.insert(d.id.as_str()) {
            return Err(CorpusError::DuplicateId(d.id.clone()));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    // largest remainder: every part lands within one document of its share
    let ideal = [ratios.train, ratios.validation, ratios.test].map(|r| r * n as f64);
    let mut sizes = ideal.map(|x| x.floor() as usize);
    let mut by_remainder = [0, 1, 2];
    by_remainder.sort_by(|&a, &b| (ideal[b] - ideal[b].floor()).total_cmp(&(ideal[a] - ideal[a].floor())));
    for &i in by_remainder.iter().take(n.saturating_sub(sizes.iter().sum())) {
        sizes[i] += 1;
    }
    let [n_train, n_val, _] = sizes;
    let take = |range: &[usize]| range.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    Ok(CorpusSplit {
        train: take(&order[..n_train]),
        validation: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Writes `train.jsonl`, `validation.jsonl`, `test.jsonl` and `manifest.json`.
pub fn write_split(dir: &Path, split: &CorpusSplit, ratios: SplitRatios) -> Result<(), CorpusError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("train.jsonl"), to_jsonl(&split.train))?;
    fs::write(dir.join("validation.jsonl"), to_jsonl(&split.validation))?;
    fs::write(dir.join("test.jsonl"), to_jsonl(&split.test))?;
    let manifest = SplitManifest {
        seed: split.seed,
        ratios,
        train: split.train.len(),
        validation: split.validation.len(),
        test: split.test.len(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_split(dir: &Path) -> Result<(CorpusSplit, SplitManifest), CorpusError> {
    let manifest: SplitManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let load = |name: &str| -> Result<Vec<Document>, CorpusError> { parse_jsonl(&fs::read(dir.join(name))?) };
    let split = CorpusSplit {
        train: load("train.jsonl")?,
        validation: load("validation.jsonl")?,
        test: load("test.jsonl")?,
        seed: manifest.seed,
    };
    if (split.train.len(), split.validation.len(), split.test.len()) != (manifest.train, manifest.validation, manifest.test) {
        return Err(CorpusError::InvalidSplit("partition sizes disagree with manifest".into()));
    }
    Ok((split, manifest))
}
