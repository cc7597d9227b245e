mod common;

use common::{cl100k, mini};
use mondrian_core::bpe::{Pretokenizer, Vocabulary};
use proptest::prelude::*;

#[test]
fn known_cl100k_encodings() {
    let v = cl100k();
    assert_eq!(v.len(), 100_256);
    assert_eq!(v.encode("hello world").ids, [15339, 1917]);
    assert_eq!(v.encode("tiktoken is great!").ids, [83, 1609, 5963, 374, 2294, 0]);
    assert_eq!(v.count_tokens("similar"), 1);
    assert_eq!(v.count_tokens("相似"), 3);
}

#[test]
fn pretokenizer_is_inferred_from_file_name() {
    assert_eq!(cl100k().pretokenizer(), &Pretokenizer::Cl100k);
    assert_eq!(mini().pretokenizer(), &Pretokenizer::None);
}

#[test]
fn spans_cover_the_input() {
    let v = cl100k();
    let text = "Don't split   “quoted” 123456 words\n\nokay?";
    let seq = v.encode(text);
    let mut end = 0;
    for span in &seq.spans {
        assert_eq!(span.start, end);
        end = span.end;
    }
    assert_eq!(end, text.len());
}

#[test]
fn missing_file_is_an_error() {
    assert!(Vocabulary::load("/nonexistent/ranks.tiktoken").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cl100k_round_trips(text in any::<String>()) {
        let v = cl100k();
        let seq = v.encode(&text);
        prop_assert_eq!(v.decode(&seq.ids).unwrap(), text.clone());
        prop_assert_eq!(v.count_tokens(&text), seq.len());
        prop_assert!(seq.len() <= text.len());
    }

    #[test]
    fn mini_round_trips(text in "[abc ]{0,24}") {
        let v = mini();
        prop_assert_eq!(v.decode(&v.encode(&text).ids).unwrap(), text);
    }
}
