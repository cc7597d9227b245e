#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use mondrian_core::eval::{load_corpus, EvalSample};
use mondrian_core::lexicon::Abbreviations;
use mondrian_core::{Lexicon, Vocabulary};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn cl100k() -> Arc<Vocabulary> {
    static V: OnceLock<Arc<Vocabulary>> = OnceLock::new();
    V.get_or_init(|| Arc::new(Vocabulary::load(data_dir().join("cl100k_base.tiktoken")).unwrap()))
        .clone()
}

pub fn mini() -> Arc<Vocabulary> {
    static V: OnceLock<Arc<Vocabulary>> = OnceLock::new();
    V.get_or_init(|| Arc::new(Vocabulary::load(data_dir().join("mini.ranks")).unwrap()))
        .clone()
}

pub fn wordnet() -> Arc<Lexicon> {
    static L: OnceLock<Arc<Lexicon>> = OnceLock::new();
    L.get_or_init(|| {
        Arc::new(
            Lexicon::load_wordnet(data_dir().join("wordnet"))
                .unwrap()
                .with_abbreviations(Abbreviations::bundled()),
        )
    })
    .clone()
}

pub fn instructions() -> Vec<EvalSample> {
    load_corpus(data_dir().join("corpus/instructions.jsonl")).unwrap()
}
