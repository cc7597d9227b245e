//! Fragmenting multi-token words and translating words into a cheaper language.
//!
//! Both operations only propose edits. They pass through the same similarity
//! gate and strict-descent check as deletions and rewrites.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Bound;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::Vocabulary;
use crate::engine::{apply_edit, render, EditKind, EditOp, Item};
use crate::lexicon::Lexicon;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("recoverability oracle unavailable: {0}")]
    OracleUnavailable(String),
    #[error("malformed oracle response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Error)]
pub enum ExperimentalError {
    #[error("{kind:?} oracle requires {field}")]
    MissingField { kind: OracleKind, field: &'static str },
    #[error("top_k must be at least 1")]
    TopK,
    #[error("max_words_per_sentence must be at least 1")]
    MaxWords,
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line_no}: expected <source>\\t<target>")]
    MalformedLine { file: String, line_no: usize },
}

/// A word with its context, asking whether `target` can be recovered from
/// `masked_word_prefix`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryQuery {
    pub left: String,
    pub masked_word_prefix: String,
    pub right: String,
    pub target: String,
}

pub trait RecoverabilityOracle: Send + Sync {
    fn recoverable(&self, query: &RecoveryQuery) -> Result<bool, OracleError>;
}

/// Accepts every truncation.
#[derive(Debug, Clone, Copy, Default)]
pub struct AcceptAll;

impl RecoverabilityOracle for AcceptAll {
    fn recoverable(&self, _: &RecoveryQuery) -> Result<bool, OracleError> {
        Ok(true)
    }
}

/// A prefix is recoverable iff exactly one dictionary word starts with it,
/// and that word is the target. Matching ignores case.
#[derive(Debug, Clone, Default)]
pub struct PrefixDictionary {
    words: BTreeSet<String>,
}

impl PrefixDictionary {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        PrefixDictionary {
            words: words
                .into_iter()
                .map(|w| w.as_ref().trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }

    /// One word per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentalError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::new(text.lines()))
    }

    /// Single-word lemmas of a lexicon.
    pub fn from_lexicon(lexicon: &Lexicon) -> Self {
        Self::new(lexicon.lemmas().filter(|l| !l.contains(' ')))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    /// The dictionary word `prefix` identifies, if exactly one starts with it.
    pub fn unique_completion(&self, prefix: &str) -> Option<&str> {
        let prefix = prefix.to_lowercase();
        let mut hits = self
            .words
            .range::<str, _>((Bound::Included(prefix.as_str()), Bound::Unbounded))
            .take_while(|w| w.starts_with(&prefix));
        let first = hits.next()?;
        match hits.next() {
            None => Some(first.as_str()),
            Some(_) => None,
        }
    }
}

impl RecoverabilityOracle for PrefixDictionary {
    fn recoverable(&self, query: &RecoveryQuery) -> Result<bool, OracleError> {
        Ok(self
            .unique_completion(&query.masked_word_prefix)
            .is_some_and(|w| w == query.target.to_lowercase()))
    }
}

#[derive(Serialize)]
struct RecoverRequest<'a> {
    #[serde(flatten)]
    query: &'a RecoveryQuery,
    top_k: usize,
}

#[derive(Deserialize)]
struct RecoverResponse {
    recoverable: bool,
}

/// Client for a masked-language-model service: `POST {endpoint}/recover`.
pub struct RemoteMaskedLm {
    url: String,
    top_k: usize,
    agent: ureq::Agent,
}

impl std::fmt::Debug for RemoteMaskedLm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteMaskedLm")
            .field("url", &self.url)
            .field("top_k", &self.top_k)
            .finish()
    }
}

impl RemoteMaskedLm {
    pub fn new(endpoint: &str, top_k: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteMaskedLm {
            url: format!("{}/recover", endpoint.trim_end_matches('/')),
            top_k,
            agent,
        }
    }
}

impl RecoverabilityOracle for RemoteMaskedLm {
    fn recoverable(&self, query: &RecoveryQuery) -> Result<bool, OracleError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(RecoverRequest {
                query,
                top_k: self.top_k,
            })
            .map_err(|e| OracleError::OracleUnavailable(e.to_string()))?;
        if resp.status().as_u16() != 200 {
            return Err(OracleError::OracleUnavailable(format!(
                "{} answered {}",
                self.url,
                resp.status()
            )));
        }
        let body: RecoverResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| OracleError::MalformedResponse(e.to_string()))?;
        Ok(body.recoverable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    RemoteMaskedLm,
    PrefixDictionary,
    AcceptAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub kind: OracleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Word list, one per line, or `"wordnet"` for the loaded lexicon's lemmas.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dictionary_ref: Option<String>,
    #[serde(default = "default_oracle_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_top_k() -> usize {
    503
}

fn default_oracle_timeout_ms() -> u64 {
    10_000
}

impl OracleSpec {
    pub fn of_kind(kind: OracleKind) -> Self {
        OracleSpec {
            kind,
            endpoint: None,
            top_k: default_top_k(),
            dictionary_ref: None,
            timeout_ms: default_oracle_timeout_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentalError> {
        if self.top_k == 0 {
            return Err(ExperimentalError::TopK);
        }
        match self.kind {
            OracleKind::RemoteMaskedLm if self.endpoint.is_none() => Err(ExperimentalError::MissingField {
                kind: self.kind,
                field: "endpoint",
            }),
            OracleKind::PrefixDictionary if self.dictionary_ref.is_none() => {
                Err(ExperimentalError::MissingField {
                    kind: self.kind,
                    field: "dictionary_ref",
                })
            }
            _ => Ok(()),
        }
    }

    /// Relative dictionary paths resolve against `base`.
    pub fn build(
        &self,
        lexicon: &Lexicon,
        base: &Path,
    ) -> Result<Arc<dyn RecoverabilityOracle>, ExperimentalError> {
        self.validate()?;
        Ok(match self.kind {
            OracleKind::AcceptAll => Arc::new(AcceptAll),
            OracleKind::RemoteMaskedLm => Arc::new(RemoteMaskedLm::new(
                self.endpoint.as_deref().unwrap_or_default(),
                self.top_k,
                Duration::from_millis(self.timeout_ms),
            )),
            OracleKind::PrefixDictionary => match self.dictionary_ref.as_deref() {
                Some("wordnet") => Arc::new(PrefixDictionary::from_lexicon(lexicon)),
                Some(path) => Arc::new(PrefixDictionary::load(base.join(path))?),
                None => unreachable!("validated"),
            },
        })
    }
}

/// Truncations of multi-token words the oracle considers recoverable.
///
/// For a word of `n ≥ 2` tokens, the kept prefix covers its first `k` tokens
/// for each `1 ≤ k < n`, skipping prefixes that would split a character.
pub fn fragment_ops(
    items: &[Item],
    vocab: &Vocabulary,
    oracle: &dyn RecoverabilityOracle,
) -> Result<Vec<EditOp>, OracleError> {
    let mut ops = Vec::new();
    for (i, item) in items.iter().enumerate() {
        if item.is_punctuation() {
            continue;
        }
        let encoded = vocab.encode(&item.text);
        if encoded.len() < 2 {
            continue;
        }
        let mut query = None;
        for span in &encoded.spans[..encoded.len() - 1] {
            let Some(prefix) = item.text.get(..span.end) else {
                continue;
            };
            let q = query.get_or_insert_with(|| RecoveryQuery {
                left: render(&items[..i]),
                masked_word_prefix: String::new(),
                right: render(&items[i + 1..]),
                target: item.text.clone(),
            });
            q.masked_word_prefix = prefix.to_string();
            if oracle.recoverable(q)? {
                ops.push(EditOp::replace(EditKind::Fragment, i, 1, prefix));
            }
        }
    }
    Ok(ops)
}

pub trait LanguageDetector: Send + Sync {
    fn detect(&self, text: &str) -> String;
}

/// Script vote: CJK ideographs and kana count twice, Latin letters once.
/// Ties go to `"en"`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptMajority;

pub(crate) fn is_cjk(c: char) -> bool {
    matches!(c,
        '\u{3040}'..='\u{30FF}'
        | '\u{3400}'..='\u{4DBF}'
        | '\u{4E00}'..='\u{9FFF}'
        | '\u{F900}'..='\u{FAFF}'
        | '\u{20000}'..='\u{2FA1F}')
}

fn is_latin(c: char) -> bool {
    c.is_ascii_alphabetic()
        || matches!(c, '\u{00C0}'..='\u{024F}' if c.is_alphabetic())
}

impl LanguageDetector for ScriptMajority {
    fn detect(&self, text: &str) -> String {
        let (mut cjk, mut latin) = (0usize, 0usize);
        for c in text.chars() {
            if is_cjk(c) {
                cjk += 2;
            } else if is_latin(c) {
                latin += 1;
            }
        }
        if cjk > latin { "zh" } else { "en" }.to_string()
    }
}

pub fn detect_language(text: &str) -> String {
    ScriptMajority.detect(text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TranslationEntry {
    pub target: String,
    /// Token count of `target` minus that of the source word.
    pub token_delta: i64,
}

/// Source word → cheaper target-language word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TranslationTable {
    entries: BTreeMap<String, TranslationEntry>,
    pub source_lang: String,
    pub target_lang: String,
    pub max_words_per_sentence: usize,
}

impl TranslationTable {
    /// Build from `(source, target)` pairs, pricing each under `vocab`.
    pub fn new<I, S, T>(
        pairs: I,
        vocab: &Vocabulary,
        source_lang: &str,
        target_lang: &str,
        max_words_per_sentence: usize,
    ) -> Result<Self, ExperimentalError>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        if max_words_per_sentence == 0 {
            return Err(ExperimentalError::MaxWords);
        }
        let entries = pairs
            .into_iter()
            .map(|(s, t)| {
                let (s, t) = (s.into(), t.into());
                let token_delta = vocab.count_tokens(&t) as i64 - vocab.count_tokens(&s) as i64;
                (s, TranslationEntry { target: t, token_delta })
            })
            .collect();
        Ok(TranslationTable {
            entries,
            source_lang: source_lang.to_string(),
            target_lang: target_lang.to_string(),
            max_words_per_sentence,
        })
    }

    /// UTF-8 TSV, `<source>\t<target>` per line; blank lines and `#` comments are skipped.
    pub fn parse(
        text: &str,
        file: &str,
        vocab: &Vocabulary,
        source_lang: &str,
        target_lang: &str,
        max_words_per_sentence: usize,
    ) -> Result<Self, ExperimentalError> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (s, t) = line
                .split_once('\t')
                .map(|(s, t)| (s.trim(), t.trim()))
                .filter(|(s, t)| !s.is_empty() && !t.is_empty())
                .ok_or_else(|| ExperimentalError::MalformedLine {
                    file: file.to_string(),
                    line_no: n + 1,
                })?;
            pairs.push((s.to_string(), t.to_string()));
        }
        Self::new(pairs, vocab, source_lang, target_lang, max_words_per_sentence)
    }

    pub fn load(
        path: impl AsRef<Path>,
        vocab: &Vocabulary,
        source_lang: &str,
        target_lang: &str,
        max_words_per_sentence: usize,
    ) -> Result<Self, ExperimentalError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(
            &text,
            &path.display().to_string(),
            vocab,
            source_lang,
            target_lang,
            max_words_per_sentence,
        )
    }

    pub fn get(&self, source: &str) -> Option<&TranslationEntry> {
        self.entries.get(source)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &TranslationEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Single-word translations of a sentence that already had `translated`
/// words translated.
///
/// Latin-script words must match an entry exactly. CJK text is not
/// space-delimited, so entries are matched as substrings of CJK items.
pub fn translate_ops(
    items: &[Item],
    table: &TranslationTable,
    detector: &dyn LanguageDetector,
    translated: usize,
) -> Vec<EditOp> {
    if translated >= table.max_words_per_sentence
        || detector.detect(&render(items)) != table.source_lang
    {
        return Vec::new();
    }
    let mut ops = Vec::new();
    for (i, item) in items.iter().enumerate() {
        if item.is_punctuation() {
            continue;
        }
        let cjk = item.text.chars().any(is_cjk);
        for (source, entry) in table.entries() {
            if entry.token_delta >= 0 {
                continue;
            }
            let replaced = if item.text == source {
                entry.target.clone()
            } else if cjk && item.text.contains(source) {
                item.text.replacen(source, &entry.target, 1)
            } else {
                continue;
            };
            let op = EditOp::replace(EditKind::Translate, i, 1, replaced);
            if detector.detect(&render(&apply_edit(items, &op))) == table.source_lang {
                ops.push(op);
            }
        }
    }
    ops
}
