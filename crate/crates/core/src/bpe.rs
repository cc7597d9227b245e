//! Byte-level BPE over tiktoken-style rank files.
//!
//! A [`Vocabulary`] maps byte sequences to integer ranks. Encoding works on
//! the UTF-8 bytes of the input: each pre-tokenized piece starts as single
//! bytes, and adjacent parts are merged lowest-rank-first until no adjacent
//! pair concatenates to a ranked sequence. Every id of the output is the rank
//! of the byte sequence it covers, so decoding is plain concatenation.
//!
//! The token count of this encoding is the cost unit used throughout the
//! crate: it drives the abstraction objective and the per-1k-token pricing.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use fancy_regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Integer identifier and merge priority of a byte sequence.
pub type Rank = u32;

/// Split pattern used by the `cl100k_base` encoding.
pub const CL100K_PATTERN: &str = r"(?i:'s|'t|'re|'ve|'m|'ll|'d)|[^\r\n\p{L}\p{N}]?\p{L}+|\p{N}{1,3}| ?[^\s\p{L}\p{N}]+[\r\n]*|\s*[\r\n]+|\s+(?!\S)|\s+";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line_no}: expected `<base64> <rank>`")]
    MalformedLine { line_no: usize },
    #[error("line {line_no}: duplicate {what}")]
    DuplicateEntry { line_no: usize, what: String },
    #[error("byte 0x{0:02x} has no rank; not every input would be encodable")]
    MissingByteCoverage(u8),
    #[error("special token {token:?} reuses rank {rank}")]
    SpecialTokenCollision { token: String, rank: Rank },
    #[error("invalid pre-tokenization pattern: {0}")]
    Pattern(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unknown token id {0}")]
    UnknownId(Rank),
    #[error("decoded bytes are not valid UTF-8")]
    InvalidUtf8,
}

/// How text is split into pieces before the merge loop runs.
///
/// Merges never cross piece boundaries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pretokenizer {
    /// The whole input is one piece.
    #[default]
    None,
    /// The `cl100k_base` split pattern.
    Cl100k,
    /// Any pattern accepted by `fancy-regex`; unmatched gaps become their own pieces.
    Regex(String),
}

impl Pretokenizer {
    fn pattern(&self) -> Option<&str> {
        match self {
            Pretokenizer::None => None,
            Pretokenizer::Cl100k => Some(CL100K_PATTERN),
            Pretokenizer::Regex(p) => Some(p),
        }
    }

    /// Guess the split pattern from a rank file name (`cl100k_base.tiktoken` → [`Pretokenizer::Cl100k`]).
    pub fn infer_from_path(path: &Path) -> Self {
        let stem = path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        if stem.starts_with("cl100k_base") {
            Pretokenizer::Cl100k
        } else {
            Pretokenizer::None
        }
    }
}

/// An immutable BPE rank table.
///
/// Cheap to share behind an `Arc`; encoding and decoding take `&self`.
#[derive(Clone)]
pub struct Vocabulary {
    name: String,
    encoder: HashMap<Vec<u8>, Rank>,
    decoder: HashMap<Rank, Vec<u8>>,
    special_tokens: HashMap<String, Rank>,
    special_decoder: HashMap<Rank, String>,
    pretokenizer: Pretokenizer,
    split: Option<Regex>,
}

impl fmt::Debug for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocabulary")
            .field("name", &self.name)
            .field("ranks", &self.encoder.len())
            .field("special_tokens", &self.special_tokens.len())
            .field("pretokenizer", &self.pretokenizer)
            .finish()
    }
}

/// Token ids together with the byte range of the source text each one covers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TokenSequence {
    pub ids: Vec<Rank>,
    pub spans: Vec<Range<usize>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Vocabulary {
    /// Load a rank file (`<base64> <rank>` per line).
    ///
    /// The vocabulary is named after the file stem, and the split pattern is
    /// inferred from the file name (see [`Pretokenizer::infer_from_path`]).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("vocabulary")
            .to_string();
        Self::parse(&name, &text, Pretokenizer::infer_from_path(path))
    }

    /// Parse rank-file contents.
    pub fn parse(name: &str, text: &str, pretokenizer: Pretokenizer) -> Result<Self, VocabError> {
        let mut encoder = HashMap::new();
        let mut decoder = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let (token, rank) = line
                .split_once(' ')
                .ok_or(VocabError::MalformedLine { line_no })?;
            let bytes = BASE64
                .decode(token)
                .map_err(|_| VocabError::MalformedLine { line_no })?;
            if rank.is_empty() || !rank.bytes().all(|b| b.is_ascii_digit()) {
                return Err(VocabError::MalformedLine { line_no });
            }
            let rank: Rank = rank
                .parse()
                .map_err(|_| VocabError::MalformedLine { line_no })?;
            if bytes.is_empty() {
                return Err(VocabError::MalformedLine { line_no });
            }
            if decoder.contains_key(&rank) {
                return Err(VocabError::DuplicateEntry {
                    line_no,
                    what: format!("rank {rank}"),
                });
            }
            if encoder.contains_key(&bytes) {
                return Err(VocabError::DuplicateEntry {
                    line_no,
                    what: format!("byte sequence {token}"),
                });
            }
            encoder.insert(bytes.clone(), rank);
            decoder.insert(rank, bytes);
        }
        for byte in 0..=u8::MAX {
            if !encoder.contains_key([byte].as_slice()) {
                return Err(VocabError::MissingByteCoverage(byte));
            }
        }
        let mut vocab = Vocabulary {
            name: name.to_string(),
            encoder,
            decoder,
            special_tokens: HashMap::new(),
            special_decoder: HashMap::new(),
            pretokenizer: Pretokenizer::None,
            split: None,
        };
        vocab.set_pretokenizer(pretokenizer)?;
        Ok(vocab)
    }

    /// Replace the split pattern.
    pub fn with_pretokenizer(mut self, pretokenizer: Pretokenizer) -> Result<Self, VocabError> {
        self.set_pretokenizer(pretokenizer)?;
        Ok(self)
    }

    fn set_pretokenizer(&mut self, pretokenizer: Pretokenizer) -> Result<(), VocabError> {
        self.split = match pretokenizer.pattern() {
            Some(p) => Some(Regex::new(p).map_err(|e| VocabError::Pattern(e.to_string()))?),
            None => None,
        };
        self.pretokenizer = pretokenizer;
        Ok(())
    }

    /// Register reserved tokens. They are never produced by [`Vocabulary::encode`];
    /// callers that want them in a sequence insert their ids explicitly.
    pub fn with_special_tokens(
        mut self,
        specials: impl IntoIterator<Item = (String, Rank)>,
    ) -> Result<Self, VocabError> {
        for (token, rank) in specials {
            if self.decoder.contains_key(&rank) || self.special_decoder.contains_key(&rank) {
                return Err(VocabError::SpecialTokenCollision { token, rank });
            }
            self.special_decoder.insert(rank, token.clone());
            self.special_tokens.insert(token, rank);
        }
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pretokenizer(&self) -> &Pretokenizer {
        &self.pretokenizer
    }

    /// Number of ranked byte sequences (special tokens excluded).
    pub fn len(&self) -> usize {
        self.encoder.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoder.is_empty()
    }

    pub fn rank_of(&self, bytes: &[u8]) -> Option<Rank> {
        self.encoder.get(bytes).copied()
    }

    pub fn special_token(&self, token: &str) -> Option<Rank> {
        self.special_tokens.get(token).copied()
    }

    pub fn contains_id(&self, id: Rank) -> bool {
        self.decoder.contains_key(&id) || self.special_decoder.contains_key(&id)
    }

    /// Encode `text` into ranks with byte spans into `text`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut out = TokenSequence::default();
        for piece in self.pieces(text) {
            self.encode_piece(text.as_bytes(), piece, &mut out);
        }
        out
    }

    /// Number of tokens `text` encodes to.
    pub fn count_tokens(&self, text: &str) -> usize {
        self.pieces(text)
            .map(|piece| {
                let bytes = &text.as_bytes()[piece];
                if bytes.len() <= 1 || self.encoder.contains_key(bytes) {
                    bytes.len().min(1)
                } else {
                    merge_boundaries(&self.encoder, bytes).len() - 1
                }
            })
            .sum()
    }

    /// Concatenate the byte sequences of `ids`.
    pub fn decode_bytes(&self, ids: &[Rank]) -> Result<Vec<u8>, DecodeError> {
        let mut out = Vec::new();
        for &id in ids {
            if let Some(bytes) = self.decoder.get(&id) {
                out.extend_from_slice(bytes);
            } else if let Some(special) = self.special_decoder.get(&id) {
                out.extend_from_slice(special.as_bytes());
            } else {
                return Err(DecodeError::UnknownId(id));
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[Rank]) -> Result<String, DecodeError> {
        String::from_utf8(self.decode_bytes(ids)?).map_err(|_| DecodeError::InvalidUtf8)
    }

    /// Byte ranges of the pre-tokenized pieces; they partition `0..text.len()`.
    fn pieces<'a>(&'a self, text: &'a str) -> impl Iterator<Item = Range<usize>> + 'a {
        let mut ranges = Vec::new();
        match &self.split {
            None => {
                if !text.is_empty() {
                    ranges.push(0..text.len());
                }
            }
            Some(re) => {
                let mut cursor = 0;
                for m in re.find_iter(text) {
                    // Backtracking limits are the only failure mode; fall back
                    // to treating the remainder as one piece.
                    let Ok(m) = m else { break };
                    if m.start() > cursor {
                        ranges.push(cursor..m.start());
                    }
                    if m.end() > m.start() {
                        ranges.push(m.start()..m.end());
                    }
                    cursor = m.end();
                }
                if cursor < text.len() {
                    ranges.push(cursor..text.len());
                }
            }
        }
        ranges.into_iter()
    }

    fn encode_piece(&self, source: &[u8], piece: Range<usize>, out: &mut TokenSequence) {
        let bytes = &source[piece.clone()];
        if let Some(&rank) = self.encoder.get(bytes) {
            out.ids.push(rank);
            out.spans.push(piece);
            return;
        }
        let bounds = merge_boundaries(&self.encoder, bytes);
        for pair in bounds.windows(2) {
            let part = &bytes[pair[0]..pair[1]];
            // Every part is a single byte or the result of a ranked merge.
            out.ids.push(self.encoder[part]);
            out.spans.push(piece.start + pair[0]..piece.start + pair[1]);
        }
    }
}

/// Run the merge loop over `piece` and return the part boundaries
/// (`0 = b[0] < b[1] < … < b[k] = piece.len()`).
///
/// `pair_rank[i]` caches the rank of `piece[bounds[i]..bounds[i + 2]]`, the
/// sequence produced by merging parts `i` and `i + 1`.
fn merge_boundaries(encoder: &HashMap<Vec<u8>, Rank>, piece: &[u8]) -> Vec<usize> {
    let mut bounds: Vec<usize> = (0..=piece.len()).collect();
    let rank_at = |bounds: &[usize], i: usize| -> Rank {
        if i + 2 < bounds.len() {
            encoder
                .get(&piece[bounds[i]..bounds[i + 2]])
                .copied()
                .unwrap_or(Rank::MAX)
        } else {
            Rank::MAX
        }
    };
    let mut pair_rank: Vec<Rank> = (0..bounds.len()).map(|i| rank_at(&bounds, i)).collect();

    loop {
        let mut best: Option<(Rank, usize)> = None;
        for (i, &r) in pair_rank.iter().enumerate() {
            if r != Rank::MAX && best.is_none_or(|(b, _)| r < b) {
                best = Some((r, i));
            }
        }
        let Some((_, i)) = best else { break };
        bounds.remove(i + 1);
        pair_rank.remove(i + 1);
        pair_rank[i] = rank_at(&bounds, i);
        if i > 0 {
            pair_rank[i - 1] = rank_at(&bounds, i - 1);
        }
    }
    bounds
}

/// Number of Unicode scalar values in `text`.
pub fn count_chars(text: &str) -> usize {
    text.chars().count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini() -> Vocabulary {
        let mut lines: Vec<String> = (0..=255u8)
            .map(|b| format!("{} {}", BASE64.encode([b]), b))
            .collect();
        for (i, s) in ["ab", "bc", "abc"].iter().enumerate() {
            lines.push(format!("{} {}", BASE64.encode(s), 256 + i));
        }
        Vocabulary::parse("mini", &lines.join("\n"), Pretokenizer::None).unwrap()
    }

    #[test]
    fn mini_fixture_size() {
        assert_eq!(mini().len(), 259);
    }

    #[test]
    fn empty_input() {
        let v = mini();
        assert!(v.encode("").is_empty());
        assert_eq!(v.count_tokens(""), 0);
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn abab_is_two_ab_tokens() {
        let v = mini();
        let seq = v.encode("abab");
        assert_eq!(seq.ids, vec![256, 256]);
        assert_eq!(seq.spans, vec![0..2, 2..4]);
        assert_eq!(v.decode(&seq.ids).unwrap(), "abab");
        assert_eq!(v.count_tokens("abab"), 2);
    }

    #[test]
    fn abc_merges_through_ab() {
        let v = mini();
        assert_eq!(v.encode("abc").ids, vec![258]);
        assert_eq!(v.encode("abcbc").ids, vec![258, 257]);
    }

    #[test]
    fn duplicate_rank_rejected() {
        let mut lines: Vec<String> = (0..=255u8)
            .map(|b| format!("{} {}", BASE64.encode([b]), b))
            .collect();
        lines.push(format!("{} 7", BASE64.encode("ab")));
        let err = Vocabulary::parse("dup", &lines.join("\n"), Pretokenizer::None).unwrap_err();
        assert!(matches!(err, VocabError::DuplicateEntry { line_no: 257, .. }));
    }

    #[test]
    fn duplicate_bytes_rejected() {
        let mut lines: Vec<String> = (0..=255u8)
            .map(|b| format!("{} {}", BASE64.encode([b]), b))
            .collect();
        lines.push(format!("{} 300", BASE64.encode("a")));
        assert!(matches!(
            Vocabulary::parse("dup", &lines.join("\n"), Pretokenizer::None),
            Err(VocabError::DuplicateEntry { .. })
        ));
    }

    #[test]
    fn malformed_lines() {
        for bad in ["YQ==", "YQ== x", "!!! 3", "YQ==  3", "YQ== -1"] {
            let err = Vocabulary::parse("bad", bad, Pretokenizer::None).unwrap_err();
            assert!(
                matches!(err, VocabError::MalformedLine { line_no: 1 }),
                "{bad:?} → {err:?}"
            );
        }
    }

    #[test]
    fn missing_byte_coverage() {
        let lines: Vec<String> = (0..=254u8)
            .map(|b| format!("{} {}", BASE64.encode([b]), b))
            .collect();
        assert!(matches!(
            Vocabulary::parse("short", &lines.join("\n"), Pretokenizer::None),
            Err(VocabError::MissingByteCoverage(255))
        ));
    }

    #[test]
    fn special_tokens_do_not_collide() {
        let v = mini();
        assert!(matches!(
            v.clone().with_special_tokens([("<|end|>".to_string(), 3)]),
            Err(VocabError::SpecialTokenCollision { rank: 3, .. })
        ));
        let v = v
            .with_special_tokens([("<|end|>".to_string(), 1000)])
            .unwrap();
        assert_eq!(v.special_token("<|end|>"), Some(1000));
        // Literal special-token text is encoded as ordinary bytes.
        assert_eq!(v.count_tokens("<|end|>"), 7);
        assert_eq!(v.decode(&[256, 1000]).unwrap(), "ab<|end|>");
    }

    #[test]
    fn unknown_id() {
        assert_eq!(mini().decode(&[9999]), Err(DecodeError::UnknownId(9999)));
    }

    #[test]
    fn split_pattern_keeps_merges_inside_pieces() {
        let v = mini()
            .with_pretokenizer(Pretokenizer::Regex(r"\S+|\s+".into()))
            .unwrap();
        // "a b" pieces: "a", " ", "b"; "ab" cannot form across the space.
        assert_eq!(v.encode("ab ab").ids, vec![256, 32, 256]);
        // Pieces split "ab"+"c" only where the pattern says so.
        let v = mini()
            .with_pretokenizer(Pretokenizer::Regex("a".into()))
            .unwrap();
        let seq = v.encode("abc");
        assert_eq!(seq.ids, vec![97, 257]);
        assert_eq!(seq.spans, vec![0..1, 1..3]);
    }

    #[test]
    fn char_count_is_scalar_values() {
        assert_eq!(count_chars(""), 0);
        assert_eq!(count_chars("abc"), 3);
        assert_eq!(count_chars("相似"), 2);
    }

    #[test]
    fn infers_cl100k_from_file_name() {
        assert_eq!(
            Pretokenizer::infer_from_path(Path::new("/x/cl100k_base.tiktoken")),
            Pretokenizer::Cl100k
        );
        assert_eq!(
            Pretokenizer::infer_from_path(Path::new("mini.ranks")),
            Pretokenizer::None
        );
    }
}
