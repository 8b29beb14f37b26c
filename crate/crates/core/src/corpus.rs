//! Review ingestion, vocabulary and query construction, successive-sequence
//! segmentation and the chronological train/validation/test split.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// One review event as it appears in the raw input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewRecord {
    pub user_id: String,
    pub product_id: String,
    pub timestamp: u64,
    pub review_text: String,
    pub category_path: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Tsv,
    JsonLines,
}

impl InputFormat {
    /// Guess from the file extension (`.jsonl`/`.json` vs everything else).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => InputFormat::JsonLines,
            _ => InputFormat::Tsv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BadLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub records: Vec<ReviewRecord>,
    pub bad_lines: Vec<BadLine>,
}

pub const CATEGORY_SEPARATOR: char = '>';

fn split_category_path(s: &str) -> Vec<String> {
    s.split(CATEGORY_SEPARATOR)
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(str::to_string)
        .collect()
}

fn validated(
    user_id: &str,
    product_id: &str,
    timestamp: u64,
    review_text: String,
    category_path: Vec<String>,
) -> std::result::Result<ReviewRecord, String> {
    if user_id.trim().is_empty() {
        return Err("empty user_id".into());
    }
    if product_id.trim().is_empty() {
        return Err("empty product_id".into());
    }
    Ok(ReviewRecord {
        user_id: user_id.trim().to_string(),
        product_id: product_id.trim().to_string(),
        timestamp,
        review_text,
        category_path,
    })
}

/// `user_id \t product_id \t timestamp \t category_path \t review_text`
pub fn parse_tsv_line(line: &str) -> std::result::Result<ReviewRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 tab-separated fields, found {}", fields.len()));
    }
    let ts = fields[2].trim();
    if ts.is_empty() {
        return Err("missing timestamp".into());
    }
    let timestamp: u64 = ts
        .parse()
        .map_err(|e| format!("bad timestamp {ts:?}: {e}"))?;
    validated(
        fields[0],
        fields[1],
        timestamp,
        fields[4].to_string(),
        split_category_path(fields[3]),
    )
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonCategory {
    List(Vec<String>),
    Joined(String),
}

#[derive(Deserialize)]
struct JsonRecord {
    user_id: String,
    product_id: String,
    timestamp: u64,
    #[serde(default)]
    review_text: String,
    #[serde(default)]
    category_path: Option<JsonCategory>,
}

pub fn parse_json_line(line: &str) -> std::result::Result<ReviewRecord, String> {
    let rec: JsonRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let category_path = match rec.category_path {
        Some(JsonCategory::List(v)) => v
            .into_iter()
            .map(|c| c.trim().to_string())
            .filter(|c| !c.is_empty())
            .collect(),
        Some(JsonCategory::Joined(s)) => split_category_path(&s),
        None => Vec::new(),
    };
    validated(
        &rec.user_id,
        &rec.product_id,
        rec.timestamp,
        rec.review_text,
        category_path,
    )
}

/// Inverse of `parse_tsv_line`; tabs and line breaks inside fields become spaces.
pub fn format_tsv_line(r: &ReviewRecord) -> String {
    let clean = |s: &str| s.replace(['\t', '\n', '\r'], " ");
    let path: Vec<String> = r.category_path.iter().map(|c| clean(c)).collect();
    format!(
        "{}\t{}\t{}\t{}\t{}",
        clean(&r.user_id),
        clean(&r.product_id),
        r.timestamp,
        path.join(&CATEGORY_SEPARATOR.to_string()),
        clean(&r.review_text)
    )
}

pub fn format_json_line(r: &ReviewRecord) -> String {
    serde_json::json!({
        "user_id": r.user_id,
        "product_id": r.product_id,
        "timestamp": r.timestamp,
        "review_text": r.review_text,
        "category_path": r.category_path,
    })
    .to_string()
}

pub fn write_records(path: &Path, format: InputFormat, records: &[ReviewRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&match format {
            InputFormat::Tsv => format_tsv_line(r),
            InputFormat::JsonLines => format_json_line(r),
        });
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read records in file order. Blank lines are skipped; malformed lines are
/// collected in the report and abort ingestion once they exceed `max_bad_lines`.
pub fn ingest(path: &Path, format: InputFormat, max_bad_lines: usize) -> Result<IngestReport> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut bad_lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match format {
            InputFormat::Tsv => parse_tsv_line(line),
            InputFormat::JsonLines => parse_json_line(line),
        };
        match parsed {
            Ok(r) => records.push(r),
            Err(reason) => bad_lines.push(BadLine { line: i + 1, reason }),
        }
    }
    if bad_lines.len() > max_bad_lines {
        return Err(Error::MalformedInput {
            count: bad_lines.len(),
            max: max_bad_lines,
            lines: bad_lines.iter().take(20).map(|b| b.line).collect(),
        });
    }
    Ok(IngestReport { records, bad_lines })
}

/// Iteratively drop records whose user or product has fewer than `k` records
/// until every remaining user and product has at least `k`. `k <= 1` is a no-op.
pub fn k_core_filter(records: &[ReviewRecord], k: usize) -> Vec<ReviewRecord> {
    let mut kept: Vec<ReviewRecord> = records.to_vec();
    if k <= 1 {
        return kept;
    }
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut products: HashMap<&str, usize> = HashMap::new();
        for r in &kept {
            *users.entry(&r.user_id).or_default() += 1;
            *products.entry(&r.product_id).or_default() += 1;
        }
        let keep: Vec<bool> = kept
            .iter()
            .map(|r| users[r.user_id.as_str()] >= k && products[r.product_id.as_str()] >= k)
            .collect();
        if keep.iter().all(|&b| b) {
            return kept;
        }
        let mut flags = keep.into_iter();
        kept.retain(|_| flags.next().unwrap_or(false));
    }
}

/// Lowercase, split on every non-alphanumeric character, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, u32>,
    tokens: Vec<String>,
    freqs: Vec<u64>,
}

impl Vocabulary {
    /// Build from `(token, frequency)` pairs in index order.
    pub fn from_entries(entries: Vec<(String, u64)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut tokens = Vec::with_capacity(entries.len());
        let mut freqs = Vec::with_capacity(entries.len());
        for (i, (tok, f)) in entries.into_iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary token {tok:?}")));
            }
            tokens.push(tok);
            freqs.push(f);
        }
        Ok(Self {
            index,
            tokens,
            freqs,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, idx: u32) -> &str {
        &self.tokens[idx as usize]
    }

    pub fn frequency(&self, idx: u32) -> u64 {
        self.freqs[idx as usize]
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.freqs
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// All tokens a record contributes to the corpus: review text followed by the
/// category terms.
fn record_tokens(r: &ReviewRecord) -> impl Iterator<Item = String> + '_ {
    tokenize(&r.review_text)
        .into_iter()
        .chain(r.category_path.iter().flat_map(|c| tokenize(c)))
}

/// Count tokens over review text and category terms; keep those with
/// frequency >= `min_count`. Index order is descending frequency, ties by token.
pub fn build_vocabulary(records: &[ReviewRecord], min_count: usize) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::InvalidArgument("min_count must be >= 1".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for r in records {
        for t in record_tokens(r) {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count as u64)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyVocabulary(min_count));
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_entries(kept)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub query_id: u32,
    pub token_indices: Vec<u32>,
    pub source_category: String,
}

/// Sorted, deduplicated id table mapping opaque string ids to dense indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdIndex {
    ids: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl IdIndex {
    pub fn from_ids<'a, I: IntoIterator<Item = &'a str>>(ids: I) -> Self {
        let mut v: Vec<String> = ids.into_iter().map(str::to_string).collect();
        v.sort();
        v.dedup();
        Self::from_sorted(v)
    }

    fn from_sorted(ids: Vec<String>) -> Self {
        let lookup = ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Self { ids, lookup }
    }

    /// Keep the given order (used when loading a prepared corpus).
    pub fn from_ordered(ids: Vec<String>) -> Result<Self> {
        let idx = Self::from_sorted(ids);
        if idx.lookup.len() != idx.ids.len() {
            return Err(Error::Parse("duplicate ids in index".into()));
        }
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<u32> {
        self.lookup.get(id).copied()
    }

    pub fn id(&self, idx: u32) -> &str {
        &self.ids[idx as usize]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Result of query extraction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySet {
    pub queries: Vec<Query>,
    /// product index -> sorted query ids
    pub product_queries: Vec<Vec<u32>>,
    path_to_query: HashMap<Vec<String>, u32>,
}

impl QuerySet {
    /// Query id for a raw category path, if the path produced one.
    pub fn query_for_path(&self, path: &[String]) -> Option<u32> {
        self.path_to_query.get(path).copied()
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Query tokens for one category path: concatenated terms root to leaf,
/// tokenized, duplicates removed keeping first occurrence, restricted to `vocab`.
pub fn query_tokens(path: &[String], vocab: &Vocabulary) -> Vec<u32> {
    let mut seen = HashSet::new();
    path.iter()
        .flat_map(|c| tokenize(c))
        .filter(|t| seen.insert(t.clone()))
        .filter_map(|t| vocab.get(&t))
        .collect()
}

/// Every distinct category path becomes one query; paths yielding the same
/// token sequence share a query id. Query ids follow the lexicographic order
/// of the ">"-joined path.
pub fn extract_queries(
    records: &[ReviewRecord],
    vocab: &Vocabulary,
    products: &IdIndex,
) -> QuerySet {
    let mut paths: Vec<&Vec<String>> = records
        .iter()
        .map(|r| &r.category_path)
        .filter(|p| !p.is_empty())
        .collect();
    paths.sort_by_key(|p| p.join(">"));
    paths.dedup();

    let mut by_tokens: HashMap<Vec<u32>, u32> = HashMap::new();
    let mut queries = Vec::new();
    let mut path_to_query = HashMap::new();
    for path in paths {
        let tokens = query_tokens(path, vocab);
        if tokens.is_empty() {
            continue;
        }
        let qid = *by_tokens.entry(tokens.clone()).or_insert_with(|| {
            let id = queries.len() as u32;
            queries.push(Query {
                query_id: id,
                token_indices: tokens,
                source_category: path.join(">"),
            });
            id
        });
        path_to_query.insert(path.clone(), qid);
    }

    let mut product_queries = vec![Vec::new(); products.len()];
    for r in records {
        if let (Some(p), Some(q)) = (
            products.get(&r.product_id),
            path_to_query.get(&r.category_path),
        ) {
            product_queries[p as usize].push(*q);
        }
    }
    for qs in &mut product_queries {
        qs.sort_unstable();
        qs.dedup();
    }
    QuerySet {
        queries,
        product_queries,
        path_to_query,
    }
}

/// A record mapped onto dense indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub user: u32,
    pub product: u32,
    pub timestamp: u64,
    pub query: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub product: u32,
    pub timestamp: u64,
    pub query: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuccessiveSequence {
    pub seq_id: u32,
    pub user: u32,
    pub interactions: Vec<Interaction>,
    pub start_time: u64,
    pub end_time: u64,
}

impl SuccessiveSequence {
    fn new(seq_id: u32, user: u32, interactions: Vec<Interaction>) -> Self {
        let start_time = interactions.first().map_or(0, |i| i.timestamp);
        let end_time = interactions.last().map_or(0, |i| i.timestamp);
        Self {
            seq_id,
            user,
            interactions,
            start_time,
            end_time,
        }
    }

    /// Distinct products in this sequence, in first-occurrence order.
    pub fn products(&self) -> Vec<u32> {
        let mut seen = HashSet::new();
        self.interactions
            .iter()
            .map(|i| i.product)
            .filter(|p| seen.insert(*p))
            .collect()
    }
}

/// Per user (ascending index), sort events by (timestamp, product) and start a
/// new sequence whenever the gap to the previous event exceeds `interval`.
/// Sequence ids are assigned consecutively in that order.
pub fn segment_sequences(events: &[Event], interval: u64) -> Result<Vec<SuccessiveSequence>> {
    if interval == 0 {
        return Err(Error::InvalidArgument("interval R must be > 0".into()));
    }
    let mut by_user: BTreeMap<u32, Vec<Interaction>> = BTreeMap::new();
    for e in events {
        by_user.entry(e.user).or_default().push(Interaction {
            product: e.product,
            timestamp: e.timestamp,
            query: e.query,
        });
    }
    let mut out = Vec::new();
    for (user, mut items) in by_user {
        items.sort_by_key(|i| (i.timestamp, i.product));
        let mut current: Vec<Interaction> = Vec::new();
        for it in items {
            if let Some(last) = current.last() {
                if it.timestamp - last.timestamp > interval {
                    let seq_id = out.len() as u32;
                    out.push(SuccessiveSequence::new(
                        seq_id,
                        user,
                        std::mem::take(&mut current),
                    ));
                }
            }
            current.push(it);
        }
        if !current.is_empty() {
            let seq_id = out.len() as u32;
            out.push(SuccessiveSequence::new(seq_id, user, current));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

impl SplitPart {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Validation => "validation",
            SplitPart::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitPart::Train),
            "validation" => Some(SplitPart::Validation),
            "test" => Some(SplitPart::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<SuccessiveSequence>,
    /// Validation sequences with untrained products already removed.
    pub validation: Vec<SuccessiveSequence>,
    pub test: Vec<SuccessiveSequence>,
    /// user -> positions in `train`, chronological.
    pub user_history: BTreeMap<u32, Vec<usize>>,
    /// Sorted products occurring in at least one training sequence.
    pub train_products: Vec<u32>,
    /// Interactions removed from validation/test because their product never
    /// occurs in training.
    pub dropped_targets: usize,
}

impl DatasetSplit {
    pub fn assignments(&self) -> Vec<(u32, SplitPart)> {
        let mut v: Vec<(u32, SplitPart)> = self
            .train
            .iter()
            .map(|s| (s.seq_id, SplitPart::Train))
            .chain(self.validation.iter().map(|s| (s.seq_id, SplitPart::Validation)))
            .chain(self.test.iter().map(|s| (s.seq_id, SplitPart::Test)))
            .collect();
        v.sort_unstable();
        v
    }

    /// Most-recent-first distinct training products of `user`, starting with
    /// the latest training sequence and backfilling from earlier ones.
    pub fn recent_history(&self, user: u32, cap: usize) -> Vec<u32> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        if let Some(positions) = self.user_history.get(&user) {
            'outer: for &pos in positions.iter().rev() {
                for it in self.train[pos].interactions.iter().rev() {
                    if out.len() >= cap {
                        break 'outer;
                    }
                    if seen.insert(it.product) {
                        out.push(it.product);
                    }
                }
            }
        }
        out
    }
}

/// Chronological split per user: last sequence to test, second-last to
/// validation (only with >= 3 sequences), the rest to train.
pub fn split(sequences: &[SuccessiveSequence]) -> Result<DatasetSplit> {
    let mut by_user: BTreeMap<u32, Vec<&SuccessiveSequence>> = BTreeMap::new();
    for s in sequences {
        by_user.entry(s.user).or_default().push(s);
    }
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for (_, mut seqs) in by_user {
        seqs.sort_by_key(|s| (s.start_time, s.seq_id));
        let n = seqs.len();
        for (i, s) in seqs.into_iter().enumerate() {
            let part = match n {
                1 => SplitPart::Train,
                2 if i == 1 => SplitPart::Test,
                2 => SplitPart::Train,
                _ if i == n - 1 => SplitPart::Test,
                _ if i == n - 2 => SplitPart::Validation,
                _ => SplitPart::Train,
            };
            match part {
                SplitPart::Train => train.push(s.clone()),
                SplitPart::Validation => validation.push(s.clone()),
                SplitPart::Test => test.push(s.clone()),
            }
        }
    }
    if test.is_empty() {
        return Err(Error::NoTestSequences);
    }
    train.sort_by_key(|s| s.seq_id);
    validation.sort_by_key(|s| s.seq_id);
    test.sort_by_key(|s| s.seq_id);

    let mut trained: Vec<u32> = train
        .iter()
        .flat_map(|s| s.interactions.iter().map(|i| i.product))
        .collect();
    trained.sort_unstable();
    trained.dedup();
    let known: HashSet<u32> = trained.iter().copied().collect();

    let mut dropped_targets = 0;
    for s in validation.iter_mut().chain(test.iter_mut()) {
        let before = s.interactions.len();
        s.interactions.retain(|i| known.contains(&i.product));
        dropped_targets += before - s.interactions.len();
    }

    let mut user_history: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by_key(|&i| (train[i].user, train[i].start_time, train[i].seq_id));
    for i in order {
        user_history.entry(train[i].user).or_default().push(i);
    }

    Ok(DatasetSplit {
        train,
        validation,
        test,
        user_history,
        train_products: trained,
        dropped_targets,
    })
}
