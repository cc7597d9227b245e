mod common;

use common::wordnet;

#[test]
fn wordnet_loads_in_full() {
    let lex = wordnet();
    assert!(lex.lemma_count() > 100_000, "{}", lex.lemma_count());
    assert!(lex.synset_count() > 100_000, "{}", lex.synset_count());
}

#[test]
fn synonyms_from_wordnet() {
    let lex = wordnet();
    assert!(lex.synonyms("big").contains("large"));
    assert!(lex.synonyms("similar").contains("alike"));
    assert!(lex.synonyms("Big").contains("large"));
    assert!(!lex.synonyms("big").contains("big"));
    assert!(lex.synonyms("qwzx").is_empty());
}

#[test]
fn abbreviations_are_case_insensitive() {
    let lex = wordnet();
    assert_eq!(lex.abbreviation_of("United States"), Some("US"));
    assert_eq!(lex.abbreviation_of("european union"), Some("EU"));
    assert_eq!(lex.abbreviation_of("purple elephant"), None);
}

#[test]
fn empty_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(mondrian_core::Lexicon::load_wordnet(dir.path()).is_err());
}
