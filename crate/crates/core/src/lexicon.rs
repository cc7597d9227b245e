//! Synonyms from the WordNet 3.0 database files, plus an abbreviation table.
//!
//! Senses and parts of speech are pooled: a lemma's synonyms are the members
//! of every synset it belongs to. Lemmas are keyed in lowercase with spaces
//! in place of WordNet's underscores.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("missing WordNet file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line_no}: {reason}")]
    ParseError {
        file: String,
        line_no: usize,
        reason: String,
    },
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pos {
    Noun,
    Verb,
    Adj,
    Adv,
}

impl Pos {
    pub const ALL: [Pos; 4] = [Pos::Noun, Pos::Verb, Pos::Adj, Pos::Adv];

    fn file_suffix(self) -> &'static str {
        match self {
            Pos::Noun => "noun",
            Pos::Verb => "verb",
            Pos::Adj => "adj",
            Pos::Adv => "adv",
        }
    }
}

/// A synset is identified by its part of speech and byte offset in `data.<pos>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SynsetId {
    pub pos: Pos,
    pub offset: u32,
}

/// Phrase → short form, keyed by lowercase phrase with single spaces.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Abbreviations {
    entries: HashMap<String, String>,
    max_words: usize,
}

const BUNDLED_ABBREVIATIONS: &str = include_str!("../../../data/abbreviations.tsv");

impl Abbreviations {
    /// The table shipped in `data/abbreviations.tsv`.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_ABBREVIATIONS, "abbreviations.tsv")
            .expect("bundled abbreviation table is well-formed")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let path = path.as_ref();
        let text = read(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parse `<phrase>\t<short form>` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, file: &str) -> Result<Self, LexiconError> {
        let mut table = Abbreviations::default();
        for (idx, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((phrase, short)) = line.split_once('\t') else {
                return Err(LexiconError::ParseError {
                    file: file.to_string(),
                    line_no: idx + 1,
                    reason: "expected `<phrase>\\t<short form>`".into(),
                });
            };
            let (phrase, short) = (normalize_phrase(phrase), short.trim().to_string());
            if phrase.is_empty() || short.is_empty() {
                return Err(LexiconError::ParseError {
                    file: file.to_string(),
                    line_no: idx + 1,
                    reason: "empty phrase or short form".into(),
                });
            }
            table.insert(phrase, short);
        }
        Ok(table)
    }

    fn insert(&mut self, phrase: String, short: String) {
        self.max_words = self.max_words.max(phrase.split(' ').count());
        self.entries.insert(phrase, short);
    }

    pub fn get(&self, phrase: &str) -> Option<&str> {
        self.entries.get(&normalize_phrase(phrase)).map(String::as_str)
    }

    /// Longest phrase length in words; bounds the engine's phrase scan.
    pub fn max_words(&self) -> usize {
        self.max_words
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<S: Into<String>, T: Into<String>> FromIterator<(S, T)> for Abbreviations {
    fn from_iter<I: IntoIterator<Item = (S, T)>>(iter: I) -> Self {
        let mut table = Abbreviations::default();
        for (phrase, short) in iter {
            table.insert(normalize_phrase(&phrase.into()), short.into());
        }
        table
    }
}

fn normalize_phrase(phrase: &str) -> String {
    phrase
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    lemma_index: HashMap<String, Vec<SynsetId>>,
    synsets: HashMap<SynsetId, Vec<String>>,
    abbreviations: Abbreviations,
}

impl Lexicon {
    /// A lexicon with no synonyms and no abbreviations.
    pub fn empty() -> Self {
        Self::default()
    }

    /// Build a lexicon from explicit synonym groups, one synthetic synset per group.
    pub fn from_groups<G, W>(groups: G) -> Self
    where
        G: IntoIterator<Item = W>,
        W: IntoIterator,
        W::Item: AsRef<str>,
    {
        let mut lex = Lexicon::default();
        for (i, group) in groups.into_iter().enumerate() {
            let id = SynsetId {
                pos: Pos::Noun,
                offset: i as u32,
            };
            let members: Vec<String> = group
                .into_iter()
                .map(|w| w.as_ref().to_string())
                .collect();
            for m in &members {
                lex.lemma_index
                    .entry(m.to_lowercase())
                    .or_default()
                    .push(id);
            }
            lex.synsets.insert(id, members);
        }
        lex
    }

    /// Load `index.<pos>` and `data.<pos>` for all four parts of speech from `dir`.
    pub fn load_wordnet(dir: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let dir = dir.as_ref();
        for pos in Pos::ALL {
            for kind in ["index", "data"] {
                let path = dir.join(format!("{kind}.{}", pos.file_suffix()));
                if !path.is_file() {
                    return Err(LexiconError::MissingFile(path));
                }
            }
        }
        let mut lex = Lexicon::default();
        for pos in Pos::ALL {
            let name = format!("data.{}", pos.file_suffix());
            let text = read(&dir.join(&name))?;
            parse_data(&text, pos, &name, &mut lex.synsets)?;
        }
        for pos in Pos::ALL {
            let name = format!("index.{}", pos.file_suffix());
            let text = read(&dir.join(&name))?;
            parse_index(&text, pos, &name, &lex.synsets, &mut lex.lemma_index)?;
        }
        for ids in lex.lemma_index.values_mut() {
            ids.sort_unstable();
            ids.dedup();
        }
        Ok(lex)
    }

    pub fn with_abbreviations(mut self, abbreviations: Abbreviations) -> Self {
        self.abbreviations = abbreviations;
        self
    }

    pub fn abbreviations(&self) -> &Abbreviations {
        &self.abbreviations
    }

    /// Number of distinct lemmas.
    pub fn lemma_count(&self) -> usize {
        self.lemma_index.len()
    }

    pub fn synset_count(&self) -> usize {
        self.synsets.len()
    }

    pub fn lemmas(&self) -> impl Iterator<Item = &str> {
        self.lemma_index.keys().map(String::as_str)
    }

    /// Lowercase members of every synset containing `word`, minus `word` itself.
    pub fn synonyms(&self, word: &str) -> BTreeSet<String> {
        let key = normalize_phrase(word);
        let Some(ids) = self.lemma_index.get(&key) else {
            return BTreeSet::new();
        };
        ids.iter()
            .filter_map(|id| self.synsets.get(id))
            .flatten()
            .map(|m| m.to_lowercase())
            .filter(|m| *m != key)
            .collect()
    }

    pub fn abbreviation_of(&self, phrase: &str) -> Option<&str> {
        self.abbreviations.get(phrase)
    }
}

fn read(path: &Path) -> Result<String, LexiconError> {
    fs::read_to_string(path).map_err(|source| LexiconError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn is_license_line(line: &str) -> bool {
    line.starts_with(' ')
}

/// `offset lex_filenum ss_type w_cnt word lex_id [word lex_id…] p_cnt … | gloss`
fn parse_data(
    text: &str,
    pos: Pos,
    file: &str,
    synsets: &mut HashMap<SynsetId, Vec<String>>,
) -> Result<(), LexiconError> {
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() || is_license_line(line) {
            continue;
        }
        let err = |reason: &str| LexiconError::ParseError {
            file: file.to_string(),
            line_no: idx + 1,
            reason: reason.to_string(),
        };
        let head = line.split(" | ").next().unwrap_or(line);
        let fields: Vec<&str> = head.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(err("too few fields"));
        }
        let offset: u32 = fields[0].parse().map_err(|_| err("bad synset offset"))?;
        let w_cnt = usize::from_str_radix(fields[3], 16).map_err(|_| err("bad word count"))?;
        let words_end = 4 + 2 * w_cnt;
        // The pointer count must follow the word list.
        if w_cnt == 0 || fields.len() <= words_end {
            return Err(err("truncated word list"));
        }
        let p_cnt: usize = fields[words_end]
            .parse()
            .map_err(|_| err("bad pointer count"))?;
        if fields.len() < words_end + 1 + 4 * p_cnt {
            return Err(err("truncated pointer list"));
        }
        let members = fields[4..words_end]
            .chunks(2)
            .map(|pair| strip_marker(pair[0]).replace('_', " "))
            .collect();
        synsets.insert(SynsetId { pos, offset }, members);
    }
    Ok(())
}

/// `lemma pos synset_cnt p_cnt [ptr…] sense_cnt tagsense_cnt offset…`
fn parse_index(
    text: &str,
    pos: Pos,
    file: &str,
    synsets: &HashMap<SynsetId, Vec<String>>,
    lemma_index: &mut HashMap<String, Vec<SynsetId>>,
) -> Result<(), LexiconError> {
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() || is_license_line(line) {
            continue;
        }
        let err = |reason: String| LexiconError::ParseError {
            file: file.to_string(),
            line_no: idx + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 6 {
            return Err(err("too few fields".into()));
        }
        let synset_cnt: usize = fields[2]
            .parse()
            .map_err(|_| err("bad synset count".into()))?;
        let p_cnt: usize = fields[3]
            .parse()
            .map_err(|_| err("bad pointer count".into()))?;
        let offsets_start = 4 + p_cnt + 2;
        if fields.len() != offsets_start + synset_cnt {
            return Err(err("field count disagrees with declared counts".into()));
        }
        let lemma = fields[0].replace('_', " ").to_lowercase();
        let entry = lemma_index.entry(lemma).or_default();
        for raw in &fields[offsets_start..] {
            let offset: u32 = raw.parse().map_err(|_| err(format!("bad offset {raw}")))?;
            let id = SynsetId { pos, offset };
            if !synsets.contains_key(&id) {
                return Err(err(format!("synset {raw} not found in data file")));
            }
            entry.push(id);
        }
    }
    Ok(())
}

/// Drop adjective position markers: `galore(ip)` → `galore`.
fn strip_marker(word: &str) -> &str {
    match word.strip_suffix(')').and_then(|w| w.rfind('(').map(|i| &w[..i])) {
        Some(stem) if !stem.is_empty() => stem,
        _ => word,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DATA_ADJ: &str = "  1 license header line\n\
00001740 00 a 02 big 0 large 0 001 ! 00002098 a 0101 | above average in size\n\
00002098 00 a 01 little 0 000 | small\n\
00014358 00 s 02 abounding 0 galore(ip) 0 000 | in abundance\n";
    const INDEX_ADJ: &str = "  1 license header line\n\
big a 1 1 ! 1 0 00001740  \n\
large a 1 0 1 0 00001740  \n\
little a 1 0 1 0 00002098  \n\
galore a 1 0 1 0 00014358  \n";

    fn write_db(dir: &Path, data_adj: &str) {
        for pos in ["noun", "verb", "adv"] {
            fs::write(dir.join(format!("index.{pos}")), "").unwrap();
            fs::write(dir.join(format!("data.{pos}")), "").unwrap();
        }
        fs::write(dir.join("index.adj"), INDEX_ADJ).unwrap();
        fs::write(dir.join("data.adj"), data_adj).unwrap();
    }

    #[test]
    fn loads_small_database() {
        let dir = tempfile::tempdir().unwrap();
        write_db(dir.path(), DATA_ADJ);
        let lex = Lexicon::load_wordnet(dir.path()).unwrap();
        assert_eq!(lex.lemma_count(), 4);
        assert_eq!(
            lex.synonyms("Big"),
            BTreeSet::from(["large".to_string()])
        );
        assert_eq!(
            lex.synonyms("galore"),
            BTreeSet::from(["abounding".to_string()])
        );
        assert!(lex.synonyms("little").is_empty());
        assert!(lex.synonyms("qwzx").is_empty());
    }

    #[test]
    fn empty_directory_is_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Lexicon::load_wordnet(dir.path()),
            Err(LexiconError::MissingFile(_))
        ));
    }

    #[test]
    fn truncated_data_line_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let cut = &DATA_ADJ[..DATA_ADJ.find("large").unwrap()];
        write_db(dir.path(), cut);
        match Lexicon::load_wordnet(dir.path()) {
            Err(LexiconError::ParseError { file, line_no, .. }) => {
                assert_eq!(file, "data.adj");
                assert_eq!(line_no, 2);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_index_offset_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let cut: String = DATA_ADJ.lines().take(3).map(|l| format!("{l}\n")).collect();
        write_db(dir.path(), &cut);
        assert!(matches!(
            Lexicon::load_wordnet(dir.path()),
            Err(LexiconError::ParseError { ref file, .. }) if file == "index.adj"
        ));
    }

    #[test]
    fn abbreviations_are_case_insensitive() {
        let table = Abbreviations::bundled();
        assert_eq!(table.get("United States"), Some("US"));
        assert_eq!(table.get("european   union"), Some("EU"));
        assert_eq!(table.get("purple elephant"), None);
        assert!(table.len() >= 50);
        assert!(table.max_words() >= 3);
    }

    #[test]
    fn abbreviation_table_errors() {
        assert!(Abbreviations::parse("no tab here", "t.tsv").is_err());
        let t = Abbreviations::parse("# c\n\nfoo bar\tFB\n", "t.tsv").unwrap();
        assert_eq!(t.get("FOO BAR"), Some("FB"));
    }

    #[test]
    fn from_groups_excludes_self() {
        let lex = Lexicon::from_groups([vec!["Car", "auto", "automobile"]]);
        let syn = lex.synonyms("automobile");
        assert!(syn.contains("car") && syn.contains("auto"));
        assert!(!syn.contains("automobile"));
    }

    #[test]
    fn strips_adjective_markers() {
        assert_eq!(strip_marker("galore(ip)"), "galore");
        assert_eq!(strip_marker("outback(a)"), "outback");
        assert_eq!(strip_marker("plain"), "plain");
    }
}
