//! Prompt abstraction driven by subword-token cost.
//!
//! The crate is organised around the pipeline a query goes through:
//!
//! - [`bpe`] counts what a query costs, byte-exact with tiktoken-style rank files.
//! - [`lexicon`] supplies synonyms (WordNet) and abbreviations for rewrites.
//! - [`similarity`] scores how far a rewrite drifts from the original.
//! - [`engine`] runs the greedy, similarity-gated shortening loop.
//! - [`experimental`] adds token-dropping and word-translation rewrites.
//! - [`pricing`] turns unit counts into money and keeps the margin ledger.
//! - [`eval`] measures agreement between upstream answers and runs ablations.
//!
//! A guide with worked examples lives in the `book/` directory of the
//! repository; its code listings are compiled as doc-tests of this crate.

pub mod bpe;
pub mod engine;
pub mod eval;
pub mod experimental;
pub mod lexicon;
pub mod pricing;
pub mod similarity;

pub use bpe::{count_chars, Pretokenizer, Rank, TokenSequence, Vocabulary};
pub use engine::{
    AbstractionConfig, AbstractionResult, Abstractor, Candidate, EditKind, EditOp, Objective,
};
pub use lexicon::Lexicon;
pub use similarity::{SimilarityProvider, SimilarityProviderSpec};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tokenization.md")]
    mod tokenization {}
    #[doc = include_str!("../../../book/src/lexicon.md")]
    mod lexicon {}
    #[doc = include_str!("../../../book/src/similarity.md")]
    mod similarity {}
    #[doc = include_str!("../../../book/src/abstraction.md")]
    mod abstraction {}
    #[doc = include_str!("../../../book/src/experimental.md")]
    mod experimental {}
    #[doc = include_str!("../../../book/src/pricing.md")]
    mod pricing {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
