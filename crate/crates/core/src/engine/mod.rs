//! Greedy, similarity-gated abstraction of queries.
//!
//! Each sentence is shortened independently. Every iteration proposes edits
//! of the current sentence (deletions, synonym/abbreviation/case rewrites,
//! and optionally token fragments and translations), discards those that do
//! not strictly lower the objective or whose similarity to the *original*
//! sentence falls below `alpha`, and accepts the cheapest survivor. Ties are
//! broken by edit kind (delete, transform, fragment, translate), then word
//! position, then replacement text, so runs are deterministic.
//!
//! Since every accepted edit lowers an integer objective, a sentence is
//! rewritten at most `objective(original)` times; with deletions only, at most
//! once per word.

pub mod text;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::bpe::{count_chars, Vocabulary};
use crate::experimental::{
    fragment_ops, is_cjk, translate_ops, LanguageDetector, RecoverabilityOracle, ScriptMajority,
    TranslationTable,
};
use crate::lexicon::Lexicon;
use crate::similarity::{ProviderKind, SimilarityError, SimilarityProvider, SimilarityProviderSpec, SpecError};
pub use text::{render, split_sentences, tokenize_items, word_tokenize, Attach, Item};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Token count under the configured vocabulary.
    #[default]
    #[serde(alias = "token_length", alias = "tokens")]
    Token,
    /// Unicode scalar value count.
    #[serde(alias = "char_length", alias = "character", alias = "chars")]
    Char,
}

impl FromStr for Objective {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "token" | "tokens" | "token_length" => Ok(Objective::Token),
            "char" | "chars" | "character" | "char_length" => Ok(Objective::Char),
            other => Err(ConfigError::UnknownObjective(other.to_string())),
        }
    }
}

/// Edit operation kinds, in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Delete,
    Transform,
    #[serde(alias = "fragmentize")]
    Fragment,
    Translate,
}

impl FromStr for EditKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "delete" => Ok(EditKind::Delete),
            "transform" => Ok(EditKind::Transform),
            "fragment" | "fragmentize" => Ok(EditKind::Fragment),
            "translate" => Ok(EditKind::Translate),
            other => Err(ConfigError::UnknownOperation(other.to_string())),
        }
    }
}

impl fmt::Display for EditKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EditKind::Delete => "delete",
            EditKind::Transform => "transform",
            EditKind::Fragment => "fragment",
            EditKind::Translate => "translate",
        })
    }
}

/// Parse a comma-separated operation list such as `delete,transform`.
pub fn parse_ops(list: &str) -> Result<Vec<EditKind>, ConfigError> {
    let mut ops = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(EditKind::from_str)
        .collect::<Result<Vec<_>, _>>()?;
    ops.sort();
    ops.dedup();
    Ok(ops)
}

/// One proposed rewrite of the current sentence.
///
/// `word_index` and `span` address the item list of the sentence the edit was
/// proposed against. `replacement` is absent exactly for deletions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOp {
    pub kind: EditKind,
    pub word_index: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub span: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement: Option<String>,
}

fn one() -> usize {
    1
}

fn is_one(n: &usize) -> bool {
    *n == 1
}

impl EditOp {
    pub fn delete(word_index: usize) -> Self {
        EditOp {
            kind: EditKind::Delete,
            word_index,
            span: 1,
            replacement: None,
        }
    }

    pub fn replace(kind: EditKind, word_index: usize, span: usize, replacement: impl Into<String>) -> Self {
        debug_assert!(kind != EditKind::Delete);
        EditOp {
            kind,
            word_index,
            span,
            replacement: Some(replacement.into()),
        }
    }

    fn tie_break(&self, other: &Self) -> Ordering {
        self.kind
            .cmp(&other.kind)
            .then(self.word_index.cmp(&other.word_index))
            .then_with(|| {
                self.replacement
                    .as_deref()
                    .unwrap_or("")
                    .cmp(other.replacement.as_deref().unwrap_or(""))
            })
            .then(self.span.cmp(&other.span))
    }
}

/// Apply `op` to an item list.
pub fn apply_edit(items: &[Item], op: &EditOp) -> Vec<Item> {
    let mut out = Vec::with_capacity(items.len() + 2);
    out.extend_from_slice(&items[..op.word_index]);
    if let Some(replacement) = &op.replacement {
        let attach = items[op.word_index].attach;
        for (i, word) in replacement.split_whitespace().enumerate() {
            out.push(Item {
                text: word.to_string(),
                attach: if i == 0 { attach } else { Attach::Free },
            });
        }
    }
    out.extend_from_slice(&items[(op.word_index + op.span).min(items.len())..]);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub op: EditOp,
    pub objective_value: usize,
    /// Filled in once the candidate has been scored against the original.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity_to_original: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Index of the sentence within the query.
    pub sentence: usize,
    /// 1-based iteration within that sentence.
    pub iteration: usize,
    pub op: EditOp,
    pub objective_value: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceResult {
    pub original: String,
    pub abstracted: String,
    pub original_tokens: usize,
    pub abstracted_tokens: usize,
    pub original_chars: usize,
    pub abstracted_chars: usize,
    pub trace: Vec<TraceEntry>,
    pub passed_through: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractionResult {
    pub original: String,
    pub abstracted: String,
    pub original_tokens: usize,
    pub abstracted_tokens: usize,
    pub original_chars: usize,
    pub abstracted_chars: usize,
    pub reduction_pct_tokens: f64,
    pub reduction_pct_chars: f64,
    pub trace: Vec<TraceEntry>,
    pub per_sentence: Vec<SentenceResult>,
    /// The query went out unmodified: the provider failed, or no sentence
    /// had an admissible edit.
    pub passed_through: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

pub fn reduction_pct(before: usize, after: usize) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (before as f64 - after as f64) / before as f64
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("at least one operation must be enabled")]
    NoOperations,
    #[error("max_iterations_per_sentence must be at least 1")]
    MaxIterations,
    #[error("unknown operation {0:?}")]
    UnknownOperation(String),
    #[error("unknown objective {0:?}")]
    UnknownObjective(String),
    #[error("{0} is enabled but no {1} is configured")]
    MissingResource(EditKind, &'static str),
    #[error(transparent)]
    Provider(#[from] SpecError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbstractionConfig {
    pub alpha: f64,
    pub objective: Objective,
    #[serde(alias = "ops")]
    pub enabled_ops: Vec<EditKind>,
    pub max_iterations_per_sentence: usize,
    pub split_sentences: bool,
    pub provider: SimilarityProviderSpec,
}

impl Default for AbstractionConfig {
    fn default() -> Self {
        AbstractionConfig {
            alpha: 0.99,
            objective: Objective::Token,
            enabled_ops: vec![EditKind::Delete, EditKind::Transform],
            max_iterations_per_sentence: 128,
            split_sentences: true,
            provider: SimilarityProviderSpec::of_kind(ProviderKind::LocalBagOfTokens),
        }
    }
}

impl AbstractionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ConfigError::Alpha(self.alpha));
        }
        if self.enabled_ops.is_empty() {
            return Err(ConfigError::NoOperations);
        }
        if self.max_iterations_per_sentence == 0 {
            return Err(ConfigError::MaxIterations);
        }
        self.provider.validate()?;
        Ok(())
    }

    pub fn enables(&self, kind: EditKind) -> bool {
        self.enabled_ops.contains(&kind)
    }
}

/// Score `text` under `objective`.
/// Words in a sentence. CJK text is not space-delimited, so each CJK
/// character counts as a word of its own.
fn word_count(items: &[Item]) -> usize {
    items
        .iter()
        .filter(|i| !i.is_punctuation())
        .map(|i| i.text.chars().filter(|c| is_cjk(*c)).count().max(1))
        .sum()
}

pub fn objective_score(text: &str, objective: Objective, vocab: &Vocabulary) -> usize {
    match objective {
        Objective::Token => vocab.count_tokens(text),
        Objective::Char => count_chars(text),
    }
}

/// A configured abstraction engine. Immutable and shareable across threads.
#[derive(Clone)]
pub struct Abstractor {
    config: AbstractionConfig,
    vocab: Arc<Vocabulary>,
    lexicon: Arc<Lexicon>,
    provider: Arc<dyn SimilarityProvider>,
    oracle: Option<Arc<dyn RecoverabilityOracle>>,
    translation: Option<Arc<TranslationTable>>,
    detector: Arc<dyn LanguageDetector>,
}

impl fmt::Debug for Abstractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Abstractor")
            .field("config", &self.config)
            .field("vocab", &self.vocab.name())
            .field("provider", &self.provider.name())
            .finish_non_exhaustive()
    }
}

struct Proposal {
    op: EditOp,
    items: Vec<Item>,
    text: String,
    objective: usize,
}

impl Abstractor {
    /// Build an engine; the similarity provider is instantiated from `config.provider`.
    pub fn new(
        config: AbstractionConfig,
        vocab: Arc<Vocabulary>,
        lexicon: Arc<Lexicon>,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let provider = config.provider.build(Some(vocab.clone()))?;
        Ok(Abstractor {
            config,
            vocab,
            lexicon,
            provider,
            oracle: None,
            translation: None,
            detector: Arc::new(ScriptMajority),
        })
    }

    pub fn with_provider(mut self, provider: Arc<dyn SimilarityProvider>) -> Self {
        self.provider = provider;
        self
    }

    pub fn with_oracle(mut self, oracle: Arc<dyn RecoverabilityOracle>) -> Self {
        self.oracle = Some(oracle);
        self
    }

    pub fn with_translation(mut self, table: Arc<TranslationTable>) -> Self {
        self.translation = Some(table);
        self
    }

    pub fn with_detector(mut self, detector: Arc<dyn LanguageDetector>) -> Self {
        self.detector = detector;
        self
    }

    /// Check that every enabled operation has what it needs.
    pub fn check_resources(&self) -> Result<(), ConfigError> {
        if self.config.enables(EditKind::Fragment) && self.oracle.is_none() {
            return Err(ConfigError::MissingResource(EditKind::Fragment, "recoverability oracle"));
        }
        if self.config.enables(EditKind::Translate) && self.translation.is_none() {
            return Err(ConfigError::MissingResource(EditKind::Translate, "translation table"));
        }
        Ok(())
    }

    /// Same resources under a different configuration. The provider is kept
    /// unless the provider spec changed.
    pub fn reconfigure(&self, config: AbstractionConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let provider = if config.provider == self.config.provider {
            self.provider.clone()
        } else {
            config.provider.build(Some(self.vocab.clone()))?
        };
        Ok(Abstractor {
            config,
            provider,
            ..self.clone()
        })
    }

    pub fn config(&self) -> &AbstractionConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn lexicon(&self) -> &Arc<Lexicon> {
        &self.lexicon
    }

    pub fn provider(&self) -> &Arc<dyn SimilarityProvider> {
        &self.provider
    }

    pub fn objective_score(&self, text: &str) -> usize {
        objective_score(text, self.config.objective, &self.vocab)
    }

    /// Candidates for one iteration starting from `sentence`, without similarity scores.
    pub fn generate_candidates(&self, sentence: &str) -> Vec<Candidate> {
        let items = tokenize_items(sentence);
        let current = self.objective_score(sentence);
        self.proposals(&items, current, 0)
            .into_iter()
            .map(|p| Candidate {
                text: p.text,
                op: p.op,
                objective_value: p.objective,
                similarity_to_original: None,
            })
            .collect()
    }

    fn proposal(&self, items: &[Item], op: EditOp) -> Proposal {
        let items = apply_edit(items, &op);
        let text = render(&items);
        let objective = self.objective_score(&text);
        Proposal {
            op,
            items,
            text,
            objective,
        }
    }

    fn proposals(&self, items: &[Item], current: usize, translated: usize) -> Vec<Proposal> {
        let mut out = Vec::new();
        if self.config.enables(EditKind::Delete) {
            let words = items.iter().filter(|i| !i.is_punctuation()).count();
            for (i, item) in items.iter().enumerate() {
                // Keep at least one word.
                if words == 1 && !item.is_punctuation() {
                    continue;
                }
                out.push(self.proposal(items, EditOp::delete(i)));
            }
        }
        if self.config.enables(EditKind::Transform) {
            for op in self.transform_ops(items) {
                let p = self.proposal(items, op);
                if p.objective < current {
                    out.push(p);
                }
            }
        }
        if self.config.enables(EditKind::Fragment) {
            if let Some(oracle) = &self.oracle {
                match fragment_ops(items, &self.vocab, oracle.as_ref()) {
                    Ok(ops) => {
                        for op in ops {
                            let p = self.proposal(items, op);
                            if p.objective <= current {
                                out.push(p);
                            }
                        }
                    }
                    Err(e) => warn!(error = %e, "recoverability oracle unavailable; skipping fragments"),
                }
            }
        }
        if self.config.enables(EditKind::Translate) {
            if let Some(table) = &self.translation {
                for op in translate_ops(items, table, self.detector.as_ref(), translated) {
                    out.push(self.proposal(items, op));
                }
            }
        }
        out
    }

    fn transform_ops(&self, items: &[Item]) -> Vec<EditOp> {
        let mut ops = Vec::new();
        let abbreviations = self.lexicon.abbreviations();
        for (i, item) in items.iter().enumerate() {
            if item.is_punctuation() {
                continue;
            }
            for syn in self.lexicon.synonyms(&item.text) {
                ops.push(EditOp::replace(EditKind::Transform, i, 1, syn));
            }
            let mut phrase = String::new();
            for span in 1..=abbreviations.max_words() {
                let Some(next) = items.get(i + span - 1) else { break };
                if next.is_punctuation() {
                    break;
                }
                if span > 1 {
                    phrase.push(' ');
                }
                phrase.push_str(&next.text);
                if let Some(short) = abbreviations.get(&phrase) {
                    if short != phrase {
                        ops.push(EditOp::replace(EditKind::Transform, i, span, short));
                    }
                }
            }
            let mut chars = item.text.chars();
            if let Some(first) = chars.next() {
                let rest = chars.as_str();
                if first.is_uppercase() && !rest.chars().any(char::is_uppercase) {
                    let lowered: String = first.to_lowercase().chain(rest.chars()).collect();
                    ops.push(EditOp::replace(EditKind::Transform, i, 1, lowered));
                }
            }
        }
        ops.sort_by(EditOp::tie_break);
        ops.dedup();
        ops
    }

    /// First proposal, in (objective, tie-break) order, admitted by the gate.
    fn first_admitted(
        &self,
        original: &str,
        proposals: &[Proposal],
    ) -> Result<Option<(usize, f64)>, SimilarityError> {
        const CHUNK: usize = 32;
        let alpha = self.config.alpha;
        for (c, chunk) in proposals.chunks(CHUNK).enumerate() {
            let texts: Vec<&str> = chunk.iter().map(|p| p.text.as_str()).collect();
            let scores = self.provider.similarity_batch(original, &texts)?;
            if let Some((i, s)) = scores
                .into_iter()
                .enumerate()
                .find(|(_, s)| *s >= alpha)
            {
                return Ok(Some((c * CHUNK + i, s)));
            }
        }
        Ok(None)
    }

    /// Shorten one sentence.
    pub fn abstract_sentence(&self, sentence: &str) -> Result<SentenceResult, SimilarityError> {
        self.run_sentence(sentence, 0)
    }

    fn run_sentence(&self, original: &str, index: usize) -> Result<SentenceResult, SimilarityError> {
        let original_tokens = self.vocab.count_tokens(original);
        let original_chars = count_chars(original);
        let mut result = SentenceResult {
            original: original.to_string(),
            abstracted: original.to_string(),
            original_tokens,
            abstracted_tokens: original_tokens,
            original_chars,
            abstracted_chars: original_chars,
            trace: Vec::new(),
            passed_through: true,
        };
        let mut items = tokenize_items(original);
        if word_count(&items) < 2 {
            return Ok(result);
        }
        let mut current = self.objective_score(original);
        let mut translated = 0;
        for iteration in 1..=self.config.max_iterations_per_sentence {
            let mut proposals: Vec<Proposal> = self
                .proposals(&items, current, translated)
                .into_iter()
                .filter(|p| p.objective < current)
                .collect();
            proposals.sort_by(|a, b| a.objective.cmp(&b.objective).then_with(|| a.op.tie_break(&b.op)));
            let Some((chosen, similarity)) = self.first_admitted(original, &proposals)? else {
                break;
            };
            let chosen = proposals.swap_remove(chosen);
            if chosen.op.kind == EditKind::Translate {
                translated += 1;
            }
            result.trace.push(TraceEntry {
                sentence: index,
                iteration,
                op: chosen.op,
                objective_value: chosen.objective,
                similarity,
            });
            current = chosen.objective;
            items = chosen.items;
            result.abstracted = chosen.text;
        }
        if !result.trace.is_empty() {
            result.passed_through = false;
            result.abstracted_tokens = self.vocab.count_tokens(&result.abstracted);
            result.abstracted_chars = count_chars(&result.abstracted);
        }
        Ok(result)
    }

    /// Shorten a whole query, sentence by sentence.
    ///
    /// Provider failures return the query untouched with `passed_through` set.
    pub fn abstract_query(&self, query: &str) -> AbstractionResult {
        match self.try_abstract_query(query) {
            Ok(result) => result,
            Err(e) => {
                warn!(error = %e, "similarity provider failed; passing the query through");
                let mut result = self.unchanged(query, Vec::new());
                result.warning = Some(e.to_string());
                result
            }
        }
    }

    /// Like [`Abstractor::abstract_query`] but surfaces provider failures.
    pub fn try_abstract_query(&self, query: &str) -> Result<AbstractionResult, SimilarityError> {
        let sentences: Vec<&str> = if self.config.split_sentences {
            split_sentences(query).into_iter().map(|(s, _)| s).collect()
        } else if query.trim().is_empty() {
            Vec::new()
        } else {
            vec![query.trim()]
        };
        let per_sentence = sentences
            .iter()
            .enumerate()
            .map(|(i, s)| self.run_sentence(s, i))
            .collect::<Result<Vec<_>, _>>()?;
        if per_sentence.iter().all(|s| s.passed_through) {
            return Ok(self.unchanged(query, per_sentence));
        }
        let abstracted = per_sentence
            .iter()
            .map(|s| s.abstracted.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        // Re-joining can in principle shift token boundaries between
        // sentences; never hand back something costlier than the input.
        if self.objective_score(&abstracted) > self.objective_score(query) {
            return Ok(self.unchanged(query, per_sentence));
        }
        let original_tokens = self.vocab.count_tokens(query);
        let original_chars = count_chars(query);
        let abstracted_tokens = self.vocab.count_tokens(&abstracted);
        let abstracted_chars = count_chars(&abstracted);
        Ok(AbstractionResult {
            original: query.to_string(),
            abstracted,
            original_tokens,
            abstracted_tokens,
            original_chars,
            abstracted_chars,
            reduction_pct_tokens: reduction_pct(original_tokens, abstracted_tokens),
            reduction_pct_chars: reduction_pct(original_chars, abstracted_chars),
            trace: per_sentence.iter().flat_map(|s| s.trace.clone()).collect(),
            per_sentence,
            passed_through: false,
            warning: None,
        })
    }

    fn unchanged(&self, query: &str, per_sentence: Vec<SentenceResult>) -> AbstractionResult {
        let tokens = self.vocab.count_tokens(query);
        let chars = count_chars(query);
        AbstractionResult {
            original: query.to_string(),
            abstracted: query.to_string(),
            original_tokens: tokens,
            abstracted_tokens: tokens,
            original_chars: chars,
            abstracted_chars: chars,
            reduction_pct_tokens: 0.0,
            reduction_pct_chars: 0.0,
            trace: Vec::new(),
            per_sentence,
            passed_through: true,
            warning: None,
        }
    }
}
