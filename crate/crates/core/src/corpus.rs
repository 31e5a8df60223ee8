//! Dataset ingestion, vocabulary, token encoding, batching and oversampling.
//!
//! Labels are deliberately hard to reach: `PostRecord` keeps its label
//! private and every read goes through [`Corpus::label`], which bumps a
//! per-corpus counter. The adaptation stage only ever sees an
//! [`UnlabeledView`], which has no label accessor at all, so zero-shot
//! integrity is both type-enforced and auditable after the fact.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{shuffled_indices, stage_rng, Stage};

/// One social-media post. The label is private; see module docs.
#[derive(Debug, Clone)]
pub struct PostRecord {
    pub text: String,
    label: Option<u8>,
    pub platform: String,
}

impl PostRecord {
    pub fn new(text: impl Into<String>, label: Option<u8>, platform: impl Into<String>) -> Self {
        PostRecord { text: text.into(), label, platform: platform.into() }
    }

    /// Whether a label is attached (does not read its value).
    pub fn has_label(&self) -> bool {
        self.label.is_some()
    }
}

/// Ordered collection of posts from one platform.
#[derive(Debug)]
pub struct Corpus {
    records: Vec<PostRecord>,
    pub platform: String,
    label_reads: AtomicU64,
}

impl Clone for Corpus {
    fn clone(&self) -> Self {
        Corpus {
            records: self.records.clone(),
            platform: self.platform.clone(),
            label_reads: AtomicU64::new(0),
        }
    }
}

impl Corpus {
    pub fn new(records: Vec<PostRecord>, platform: impl Into<String>) -> Self {
        Corpus { records, platform: platform.into(), label_reads: AtomicU64::new(0) }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn text(&self, i: usize) -> &str {
        &self.records[i].text
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.text.as_str())
    }

    pub fn record(&self, i: usize) -> &PostRecord {
        &self.records[i]
    }

    /// True when every record carries a label (presence check only).
    pub fn is_labeled(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.label.is_some())
    }

    /// Read one label value. Every call is counted for the zero-shot audit.
    pub fn label(&self, i: usize) -> Option<u8> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.records[i].label
    }

    /// Read all label values; errors on the first unlabelled record.
    pub fn labels(&self) -> Result<Vec<u8>> {
        self.label_reads.fetch_add(self.records.len() as u64, Ordering::Relaxed);
        self.records
            .iter()
            .map(|r| r.label.ok_or_else(|| Error::MissingLabel(r.text.clone())))
            .collect()
    }

    /// How many label values have been read from this corpus instance.
    pub fn label_read_count(&self) -> u64 {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// Label-free view for the adaptation stage.
    pub fn unlabeled_view(&self) -> UnlabeledView<'_> {
        UnlabeledView { corpus: self }
    }

    /// Seeded shuffle split into (train, valid) with `valid_frac` held out.
    pub fn split_train_valid(&self, valid_frac: f64, seed: u64) -> (Corpus, Corpus) {
        let mut rng = stage_rng(seed, Stage::Split);
        let idx = shuffled_indices(self.len(), &mut rng);
        let n_valid = ((self.len() as f64) * valid_frac).round() as usize;
        let n_valid = n_valid.min(self.len().saturating_sub(1));
        let valid: Vec<PostRecord> = idx[..n_valid].iter().map(|&i| self.records[i].clone()).collect();
        let train: Vec<PostRecord> = idx[n_valid..].iter().map(|&i| self.records[i].clone()).collect();
        (
            Corpus::new(train, self.platform.clone()),
            Corpus::new(valid, self.platform.clone()),
        )
    }

    /// Seeded shuffled copy.
    pub fn shuffled(&self, seed: u64) -> Corpus {
        let mut rng = stage_rng(seed, Stage::Batch);
        let idx = shuffled_indices(self.len(), &mut rng);
        let records = idx.into_iter().map(|i| self.records[i].clone()).collect();
        Corpus::new(records, self.platform.clone())
    }
}

/// Borrowed view of a corpus that exposes text but no labels.
#[derive(Clone, Copy)]
pub struct UnlabeledView<'a> {
    corpus: &'a Corpus,
}

impl<'a> UnlabeledView<'a> {
    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    pub fn text(&self, i: usize) -> &'a str {
        self.corpus.text(i)
    }

    pub fn texts(&self) -> impl Iterator<Item = &'a str> {
        self.corpus.texts()
    }

    pub fn platform(&self) -> &'a str {
        &self.corpus.platform
    }
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

/// Load a JSONL or CSV dataset.
///
/// JSONL: one object per line with a required `"text"` string and an
/// optional `"label"` that is either the integer 0/1 or a string collapsed
/// through `label_map`. CSV: header row with a `text` column and an optional
/// `label` column (empty cell = absent label).
pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    platform: &str,
    label_map: &BTreeMap<String, u8>,
) -> Result<Corpus> {
    if !path.exists() {
        return Err(Error::DatasetNotFound(path.to_path_buf()));
    }
    let records = match format {
        DatasetFormat::Jsonl => load_jsonl(path, platform, label_map)?,
        DatasetFormat::Csv => load_csv(path, platform, label_map)?,
    };
    Ok(Corpus::new(records, platform))
}

fn collapse_label(
    raw: &serde_json::Value,
    line: usize,
    label_map: &BTreeMap<String, u8>,
) -> Result<Option<u8>> {
    match raw {
        serde_json::Value::Null => Ok(None),
        serde_json::Value::Number(n) => match n.as_i64() {
            Some(0) => Ok(Some(0)),
            Some(1) => Ok(Some(1)),
            _ => Err(Error::InvalidLabel { line, msg: format!("label {n} outside {{0,1}}") }),
        },
        serde_json::Value::String(s) => match label_map.get(s) {
            Some(&v) if v <= 1 => Ok(Some(v)),
            Some(&v) => {
                Err(Error::InvalidLabel { line, msg: format!("label map sends {s:?} to {v}, outside {{0,1}}") })
            }
            None => Err(Error::InvalidLabel {
                line,
                msg: format!("fine-grained label {s:?} has no collapse rule"),
            }),
        },
        other => Err(Error::InvalidLabel { line, msg: format!("unsupported label value {other}") }),
    }
}

fn load_jsonl(path: &Path, platform: &str, label_map: &BTreeMap<String, u8>) -> Result<Vec<PostRecord>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedRecord { line: line_no, msg: e.to_string() })?;
        let text = value
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| Error::MalformedRecord {
                line: line_no,
                msg: "missing \"text\" string field".into(),
            })?
            .to_string();
        let label = match value.get("label") {
            None => None,
            Some(raw) => collapse_label(raw, line_no, label_map)?,
        };
        records.push(PostRecord::new(text, label, platform));
    }
    Ok(records)
}

fn load_csv(path: &Path, platform: &str, label_map: &BTreeMap<String, u8>) -> Result<Vec<PostRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::MalformedRecord { line: 1, msg: e.to_string() })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedRecord { line: 1, msg: e.to_string() })?
        .clone();
    let text_col = headers
        .iter()
        .position(|h| h == "text")
        .ok_or_else(|| Error::MalformedRecord { line: 1, msg: "missing \"text\" column".into() })?;
    let label_col = headers.iter().position(|h| h == "label");

    let mut records = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::MalformedRecord { line, msg: e.to_string() }
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let text = record
            .get(text_col)
            .ok_or_else(|| Error::MalformedRecord { line, msg: "row shorter than header".into() })?
            .to_string();
        let label = match label_col.and_then(|c| record.get(c)) {
            None => None,
            Some("") => None,
            Some(raw) => match raw.parse::<i64>() {
                Ok(0) => Some(0),
                Ok(1) => Some(1),
                Ok(n) => {
                    return Err(Error::InvalidLabel { line, msg: format!("label {n} outside {{0,1}}") })
                }
                Err(_) => collapse_label(&serde_json::Value::String(raw.to_string()), line, label_map)?,
            },
        };
        records.push(PostRecord::new(text, label, platform));
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<bos>"];

/// Token table with fixed reserved ids PAD=0, UNK=1, BOS=2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabSerde", into = "VocabSerde")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize, Clone)]
struct VocabSerde {
    tokens: Vec<String>,
}

impl From<VocabSerde> for Vocabulary {
    fn from(v: VocabSerde) -> Self {
        Vocabulary::from_tokens(v.tokens)
    }
}

impl From<Vocabulary> for VocabSerde {
    fn from(v: Vocabulary) -> Self {
        VocabSerde { tokens: v.id_to_token }
    }
}

impl Vocabulary {
    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { id_to_token, token_to_id }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Token id, or UNK for out-of-vocabulary tokens.
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    /// Tokens of a row of ids, stopping at the first PAD; BOS is skipped.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != PAD)
            .filter(|&&id| id != BOS)
            .map(|&id| self.id_to_token[id].clone())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("vocab serialises");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        serde_json::from_str(&json).map_err(|e| Error::Config(format!("vocabulary file: {e}")))
    }
}

/// Lowercase and split on whitespace and punctuation boundaries.
///
/// A token is either a maximal alphanumeric run or a single non-alphanumeric,
/// non-whitespace character.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(|c| c.to_lowercase()) {
        if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Build a vocabulary from a labelled corpus.
pub fn build_vocab(corpus: &Corpus, min_freq: usize, cap: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    build_vocab_from_texts(corpus.texts(), min_freq, cap)
}

/// Build a vocabulary from any text stream (e.g. source train + unlabelled
/// target). Tokens with frequency >= `min_freq` are ranked by frequency then
/// lexicographically and truncated so the total size (reserved ids included)
/// does not exceed `cap`.
pub fn build_vocab_from_texts<'a>(
    texts: impl Iterator<Item = &'a str>,
    min_freq: usize,
    cap: usize,
) -> Result<Vocabulary> {
    if cap < RESERVED.len() {
        return Err(Error::InvalidArgument(format!(
            "vocabulary cap {cap} below the {} reserved ids",
            RESERVED.len()
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut saw_text = false;
    for text in texts {
        saw_text = true;
        for token in tokenize(text) {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    if !saw_text {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> =
        counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(cap - RESERVED.len());

    let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    id_to_token.extend(ranked.into_iter().map(|(t, _)| t));
    Ok(Vocabulary::from_tokens(id_to_token))
}

// ---------------------------------------------------------------------------
// Token encoding
// ---------------------------------------------------------------------------

/// Encode one text: BOS prepended, unknown tokens mapped to UNK, truncated to
/// `max_len` and right-padded with PAD. The mask marks real tokens.
pub fn encode_text(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if max_len < 2 {
        return Err(Error::InvalidArgument(format!("max_len {max_len} < 2")));
    }
    let mut ids = Vec::with_capacity(max_len);
    let mut mask = Vec::with_capacity(max_len);
    ids.push(BOS);
    mask.push(1.0);
    for token in tokenize(text) {
        if ids.len() == max_len {
            break;
        }
        ids.push(vocab.id(&token));
        mask.push(1.0);
    }
    while ids.len() < max_len {
        ids.push(PAD);
        mask.push(0.0);
    }
    Ok((ids, mask))
}

/// Token matrix for a whole corpus (or view), without labels.
#[derive(Debug, Clone)]
pub struct EncodedText {
    pub ids: Array2<usize>,
    pub mask: Array2<f64>,
    pub max_len: usize,
}

impl EncodedText {
    pub fn len(&self) -> usize {
        self.ids.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.nrows() == 0
    }

    fn from_texts<'a>(
        texts: impl Iterator<Item = &'a str>,
        n: usize,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<EncodedText> {
        let mut ids = Array2::<usize>::zeros((n, max_len));
        let mut mask = Array2::<f64>::zeros((n, max_len));
        for (i, text) in texts.enumerate() {
            let (row_ids, row_mask) = encode_text(text, vocab, max_len)?;
            for (j, (id, m)) in row_ids.into_iter().zip(row_mask).enumerate() {
                ids[[i, j]] = id;
                mask[[i, j]] = m;
            }
        }
        Ok(EncodedText { ids, mask, max_len })
    }
}

/// Encoded corpus with (optional) labels alongside.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    pub text: EncodedText,
    pub labels: Option<Vec<u8>>,
}

/// Encode a corpus. Labels are carried over when every record has one
/// (counted as label reads), otherwise the encoded corpus is unlabelled.
pub fn encode_corpus(corpus: &Corpus, vocab: &Vocabulary, max_len: usize) -> Result<EncodedCorpus> {
    let text = EncodedText::from_texts(corpus.texts(), corpus.len(), vocab, max_len)?;
    let labels = if corpus.is_labeled() { Some(corpus.labels()?) } else { None };
    Ok(EncodedCorpus { text, labels })
}

/// Encode a label-free view.
pub fn encode_view(view: UnlabeledView<'_>, vocab: &Vocabulary, max_len: usize) -> Result<EncodedText> {
    EncodedText::from_texts(view.texts(), view.len(), vocab, max_len)
}

// ---------------------------------------------------------------------------
// Oversampling
// ---------------------------------------------------------------------------

/// Repeat each positive record so it appears exactly `factor` times in total;
/// negatives are untouched. Copies are appended after the original records in
/// original order.
pub fn oversample_positive(corpus: &Corpus, factor: usize) -> Result<Corpus> {
    if factor < 1 {
        return Err(Error::InvalidArgument("oversample factor must be >= 1".into()));
    }
    let mut records: Vec<PostRecord> = Vec::with_capacity(corpus.len());
    let mut copies: Vec<PostRecord> = Vec::new();
    for i in 0..corpus.len() {
        let label = corpus
            .label(i)
            .ok_or_else(|| Error::MissingLabel(corpus.text(i).to_string()))?;
        let record = corpus.record(i).clone();
        if label == 1 {
            for _ in 1..factor {
                copies.push(record.clone());
            }
        }
        records.push(record);
    }
    records.extend(copies);
    Ok(Corpus::new(records, corpus.platform.clone()))
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// One mini-batch of token ids with its mask and optional labels.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub ids: Array2<usize>,
    pub mask: Array2<f64>,
    pub labels: Option<Vec<u8>>,
}

impl TokenBatch {
    pub fn batch_size(&self) -> usize {
        self.ids.nrows()
    }

    pub fn max_len(&self) -> usize {
        self.ids.ncols()
    }
}

fn gather_batches(
    text: &EncodedText,
    labels: Option<&[u8]>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<TokenBatch> {
    let idx = shuffled_indices(text.len(), rng);
    idx.chunks(batch_size)
        .map(|chunk| {
            let mut ids = Array2::<usize>::zeros((chunk.len(), text.max_len));
            let mut mask = Array2::<f64>::zeros((chunk.len(), text.max_len));
            for (row, &i) in chunk.iter().enumerate() {
                ids.row_mut(row).assign(&text.ids.row(i));
                mask.row_mut(row).assign(&text.mask.row(i));
            }
            let labels = labels.map(|l| chunk.iter().map(|&i| l[i]).collect());
            TokenBatch { ids, mask, labels }
        })
        .collect()
}

/// Deterministic shuffled batches; the same seed yields the same sequence.
pub fn make_batches(enc: &EncodedCorpus, batch_size: usize, seed: u64) -> Result<Vec<TokenBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut rng = stage_rng(seed, Stage::Batch);
    Ok(gather_batches(&enc.text, enc.labels.as_deref(), batch_size, &mut rng))
}

/// Batches over label-free encoded text.
pub fn make_batches_unlabeled(text: &EncodedText, batch_size: usize, seed: u64) -> Result<Vec<TokenBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut rng = stage_rng(seed, Stage::Batch);
    Ok(gather_batches(text, None, batch_size, &mut rng))
}

/// Token counts per record (used for the length-candidate grid).
pub fn token_counts(texts: impl Iterator<Item = impl AsRef<str>>) -> Vec<usize> {
    texts.map(|t| tokenize(t.as_ref()).len()).collect()
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(sample: &[usize], pct: f64) -> usize {
    assert!(!sample.is_empty());
    let mut sorted = sample.to_vec();
    sorted.sort_unstable();
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn no_map() -> BTreeMap<String, u8> {
        BTreeMap::new()
    }

    #[test]
    fn jsonl_line_maps_to_record() {
        let f = write_temp("{\"text\":\"hi\",\"label\":1}\n", ".jsonl");
        let corpus = load_dataset(f.path(), DatasetFormat::Jsonl, "fs", &no_map()).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.text(0), "hi");
        assert_eq!(corpus.label(0), Some(1));
        assert_eq!(corpus.record(0).platform, "fs");
    }

    #[test]
    fn jsonl_label_absent_is_valid_target_record() {
        let f = write_temp("{\"text\":\"hi\"}\n", ".jsonl");
        let corpus = load_dataset(f.path(), DatasetFormat::Jsonl, "tw", &no_map()).unwrap();
        assert_eq!(corpus.len(), 1);
        assert!(!corpus.record(0).has_label());
        assert!(!corpus.is_labeled());
    }

    #[test]
    fn formspring_shaped_file_loads_every_row() {
        let content: String = (0..12_773)
            .map(|i| format!("{{\"text\":\"post {i}\",\"label\":{}}}\n", usize::from(i % 13 == 0)))
            .collect();
        let f = write_temp(&content, ".jsonl");
        let corpus = load_dataset(f.path(), DatasetFormat::Jsonl, "fs", &no_map()).unwrap();
        assert_eq!(corpus.len(), 12_773);
    }

    #[test]
    fn malformed_line_error_names_line_number() {
        let f = write_temp("{\"text\":\"ok\"}\n{not json}\n", ".jsonl");
        let err = load_dataset(f.path(), DatasetFormat::Jsonl, "fs", &no_map()).unwrap_err();
        match err {
            Error::MalformedRecord { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unmapped_fine_grained_label_is_an_error() {
        let f = write_temp("{\"text\":\"x\",\"label\":\"threat\"}\n", ".jsonl");
        let err = load_dataset(f.path(), DatasetFormat::Jsonl, "wp", &no_map()).unwrap_err();
        assert!(matches!(err, Error::InvalidLabel { line: 1, .. }));

        let mut map = BTreeMap::new();
        map.insert("threat".to_string(), 1u8);
        let corpus = load_dataset(f.path(), DatasetFormat::Jsonl, "wp", &map).unwrap();
        assert_eq!(corpus.label(0), Some(1));
    }

    #[test]
    fn label_outside_binary_is_an_error() {
        let f = write_temp("{\"text\":\"x\",\"label\":2}\n", ".jsonl");
        let err = load_dataset(f.path(), DatasetFormat::Jsonl, "wp", &no_map()).unwrap_err();
        assert!(matches!(err, Error::InvalidLabel { line: 1, .. }));
    }

    #[test]
    fn csv_with_header_and_empty_label_cell() {
        let f = write_temp("text,label\n\"hello, there\",1\nplain,\n", ".csv");
        let corpus = load_dataset(f.path(), DatasetFormat::Csv, "fs", &no_map()).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.text(0), "hello, there");
        assert_eq!(corpus.label(0), Some(1));
        assert!(!corpus.record(1).has_label());
    }

    #[test]
    fn missing_file_is_dataset_not_found() {
        let err = load_dataset(
            Path::new("/definitely/not/here.jsonl"),
            DatasetFormat::Jsonl,
            "fs",
            &no_map(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DatasetNotFound(_)));
    }

    // -- vocabulary --

    fn corpus_of(texts: &[&str]) -> Corpus {
        Corpus::new(
            texts.iter().map(|t| PostRecord::new(*t, Some(0), "p")).collect(),
            "p",
        )
    }

    #[test]
    fn vocab_min_freq_one() {
        let vocab = build_vocab(&corpus_of(&["a b a"]), 1, 100).unwrap();
        assert_eq!(vocab.size(), 5);
        assert_eq!(vocab.id("a"), 3);
        assert_eq!(vocab.id("b"), 4);
        assert_eq!(vocab.token(PAD), "<pad>");
        assert_eq!(vocab.token(UNK), "<unk>");
        assert_eq!(vocab.token(BOS), "<bos>");
    }

    #[test]
    fn vocab_min_freq_filters() {
        let vocab = build_vocab(&corpus_of(&["a b a"]), 2, 100).unwrap();
        assert_eq!(vocab.size(), 4);
        assert!(vocab.contains("a"));
        assert!(!vocab.contains("b"));
    }

    #[test]
    fn vocab_cap_counts_reserved_ids() {
        let vocab = build_vocab(
            &corpus_of(&["a a a a a b b b c"]),
            1,
            4,
        )
        .unwrap();
        assert_eq!(vocab.size(), 4);
        assert!(vocab.contains("a"));
        assert!(!vocab.contains("b"));
        assert!(!vocab.contains("c"));
    }

    #[test]
    fn vocab_empty_corpus_errors() {
        let corpus = Corpus::new(vec![], "p");
        assert!(matches!(build_vocab(&corpus, 1, 10), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn vocab_rank_breaks_frequency_ties_lexicographically() {
        let vocab = build_vocab(&corpus_of(&["z y z y x"]), 1, 100).unwrap();
        // y and z both occur twice: y before z; x (once) last.
        assert_eq!(vocab.id("y"), 3);
        assert_eq!(vocab.id("z"), 4);
        assert_eq!(vocab.id("x"), 5);
    }

    // -- encoding --

    #[test]
    fn encode_pads_and_masks() {
        let vocab = build_vocab(&corpus_of(&["a b a"]), 1, 100).unwrap();
        let (ids, mask) = encode_text("a b", &vocab, 4).unwrap();
        assert_eq!(ids, vec![BOS, vocab.id("a"), vocab.id("b"), PAD]);
        assert_eq!(mask, vec![1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn encode_maps_unknown_to_unk() {
        let vocab = build_vocab(&corpus_of(&["a b a"]), 1, 100).unwrap();
        let (ids, _) = encode_text("a z", &vocab, 4).unwrap();
        assert_eq!(ids, vec![BOS, vocab.id("a"), UNK, PAD]);
    }

    #[test]
    fn encode_truncates_to_max_len() {
        let vocab = build_vocab(&corpus_of(&["a b c d"]), 1, 100).unwrap();
        let (ids, mask) = encode_text("a b c d", &vocab, 3).unwrap();
        assert_eq!(ids, vec![BOS, vocab.id("a"), vocab.id("b")]);
        assert_eq!(mask, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn encode_empty_text_is_bos_plus_padding() {
        let vocab = build_vocab(&corpus_of(&["a"]), 1, 100).unwrap();
        let (ids, mask) = encode_text("", &vocab, 3).unwrap();
        assert_eq!(ids, vec![BOS, PAD, PAD]);
        assert_eq!(mask, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_round_trips_in_vocabulary_tokens() {
        let vocab = build_vocab(&corpus_of(&["alpha beta gamma delta"]), 1, 100).unwrap();
        let max_len = 4;
        let text = "alpha beta gamma delta";
        let (ids, _) = encode_text(text, &vocab, max_len).unwrap();
        let decoded = vocab.decode(&ids);
        let original: Vec<String> = tokenize(text).into_iter().take(max_len - 1).collect();
        assert_eq!(decoded, original);
    }

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(tokenize("Don't stop!"), vec!["don", "'", "t", "stop", "!"]);
        assert_eq!(tokenize("  a  b "), vec!["a", "b"]);
    }

    // -- oversampling --

    fn labeled_corpus(labels: &[u8]) -> Corpus {
        Corpus::new(
            labels
                .iter()
                .enumerate()
                .map(|(i, &l)| PostRecord::new(format!("t{i}"), Some(l), "p"))
                .collect(),
            "p",
        )
    }

    #[test]
    fn oversample_triples_positives() {
        let corpus = labeled_corpus(&[0, 1, 0, 0, 0, 1, 0, 0, 0, 0]);
        let out = oversample_positive(&corpus, 3).unwrap();
        assert_eq!(out.len(), 14);
        let positives = (0..out.len()).filter(|&i| out.label(i) == Some(1)).count();
        assert_eq!(positives, 6);
        // originals preserved in order, copies appended at the end
        for i in 0..corpus.len() {
            assert_eq!(out.text(i), corpus.text(i));
        }
    }

    #[test]
    fn oversample_factor_one_is_identity() {
        let corpus = labeled_corpus(&[0, 1, 1, 0]);
        let out = oversample_positive(&corpus, 1).unwrap();
        assert_eq!(out.len(), corpus.len());
        for i in 0..corpus.len() {
            assert_eq!(out.text(i), corpus.text(i));
        }
    }

    #[test]
    fn oversample_formspring_scale_arithmetic() {
        // 12,773 records at bullying ratio 0.08 -> floor = 1021 positives;
        // factor 3 appends two copies of each: 12773 + 2*1021 = 14,815.
        let n = 12_773usize;
        let p = (0.08f64 * n as f64).floor() as usize;
        assert_eq!(p, 1021);
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i < p)).collect();
        let corpus = labeled_corpus(&labels);
        let out = oversample_positive(&corpus, 3).unwrap();
        assert_eq!(out.len(), 14_815);
    }

    #[test]
    fn oversample_rejects_unlabeled_records() {
        let corpus = Corpus::new(
            vec![PostRecord::new("a", Some(1), "p"), PostRecord::new("b", None, "p")],
            "p",
        );
        assert!(matches!(oversample_positive(&corpus, 3), Err(Error::MissingLabel(_))));
    }

    #[test]
    fn oversample_preserves_negative_count_exactly() {
        let corpus = labeled_corpus(&[0, 1, 0, 1, 1, 0, 0]);
        let out = oversample_positive(&corpus, 4).unwrap();
        let negatives = (0..out.len()).filter(|&i| out.label(i) == Some(0)).count();
        let positives = (0..out.len()).filter(|&i| out.label(i) == Some(1)).count();
        assert_eq!(negatives, 4);
        assert_eq!(positives, 3 * 4);
    }

    // -- batching --

    fn encoded_corpus(n: usize) -> EncodedCorpus {
        let texts: Vec<String> = (0..n).map(|i| format!("tok{i} tok{} x", i % 5)).collect();
        let corpus = Corpus::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| PostRecord::new(t.clone(), Some(u8::from(i % 3 == 0)), "p"))
                .collect(),
            "p",
        );
        let vocab = build_vocab(&corpus, 1, 1000).unwrap();
        encode_corpus(&corpus, &vocab, 6).unwrap()
    }

    #[test]
    fn batches_partition_with_remainder() {
        let enc = encoded_corpus(33);
        let batches = make_batches(&enc, 16, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.batch_size()).collect();
        assert_eq!(sizes, vec![16, 16, 1]);
    }

    #[test]
    fn batches_same_seed_identical() {
        let enc = encoded_corpus(40);
        let a = make_batches(&enc, 16, 9).unwrap();
        let b = make_batches(&enc, 16, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.ids, y.ids);
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn batches_cover_corpus_exactly_once() {
        let enc = encoded_corpus(29);
        let batches = make_batches(&enc, 8, 4).unwrap();
        let mut seen: Vec<Vec<usize>> = Vec::new();
        for b in &batches {
            for row in b.ids.rows() {
                seen.push(row.to_vec());
            }
        }
        assert_eq!(seen.len(), 29);
        let mut expected: Vec<Vec<usize>> = enc
            .text
            .ids
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect();
        seen.sort();
        expected.sort();
        assert_eq!(seen, expected);
    }

    #[test]
    fn zero_batch_size_errors() {
        let enc = encoded_corpus(5);
        assert!(make_batches(&enc, 0, 0).is_err());
    }

    #[test]
    fn unlabeled_view_has_no_labels_in_batches() {
        let corpus = labeled_corpus(&[0, 1, 0]);
        let vocab = build_vocab(&corpus, 1, 100).unwrap();
        let view = corpus.unlabeled_view();
        let reads_before = corpus.label_read_count();
        let enc = encode_view(view, &vocab, 4).unwrap();
        let batches = make_batches_unlabeled(&enc, 2, 0).unwrap();
        assert!(batches.iter().all(|b| b.labels.is_none()));
        assert_eq!(corpus.label_read_count(), reads_before);
    }

    #[test]
    fn label_reads_are_counted() {
        let corpus = labeled_corpus(&[0, 1]);
        assert_eq!(corpus.label_read_count(), 0);
        let _ = corpus.label(0);
        let _ = corpus.labels().unwrap();
        assert_eq!(corpus.label_read_count(), 3);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let corpus = labeled_corpus(&[0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let (t1, v1) = corpus.split_train_valid(0.3, 5);
        let (t2, v2) = corpus.split_train_valid(0.3, 5);
        assert_eq!(t1.len(), 7);
        assert_eq!(v1.len(), 3);
        let texts = |c: &Corpus| c.texts().map(String::from).collect::<Vec<_>>();
        assert_eq!(texts(&t1), texts(&t2));
        assert_eq!(texts(&v1), texts(&v2));
        let mut all = texts(&t1);
        all.extend(texts(&v1));
        all.sort();
        let mut orig = texts(&corpus);
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn percentile_nearest_rank() {
        let sample = vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
        assert_eq!(percentile(&sample, 90.0), 9);
        assert_eq!(percentile(&sample, 95.0), 10);
        assert_eq!(percentile(&sample, 50.0), 5);
    }
}
