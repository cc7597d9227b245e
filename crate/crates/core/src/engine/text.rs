//! Sentence splitting and the word items the edit operations act on.

use std::ops::Range;

/// How an item joins its neighbours when a sentence is re-rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attach {
    /// Separated by a single space on both sides.
    Free,
    /// Glued to the item before it (trailing punctuation).
    ToPrev,
    /// Glued to the item after it (leading punctuation).
    ToNext,
}

/// A word or punctuation mark of a sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub text: String,
    pub attach: Attach,
}

impl Item {
    pub fn free(text: impl Into<String>) -> Self {
        Item {
            text: text.into(),
            attach: Attach::Free,
        }
    }

    pub fn is_punctuation(&self) -> bool {
        self.text.chars().all(is_punct)
    }
}

pub(crate) fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c,
            '\u{00A1}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}'
            | '\u{2010}'..='\u{2027}'
            | '\u{2030}'..='\u{205E}'
            | '\u{3001}'..='\u{3003}'
            | '\u{3008}'..='\u{3011}'
            | '\u{FF01}'..='\u{FF0F}'
            | '\u{FF1A}'..='\u{FF20}'
            | '\u{FF3B}'..='\u{FF40}'
            | '\u{FF5B}'..='\u{FF65}')
}

/// Split after `.`, `?` or `!` when followed by whitespace or the end of text.
///
/// Returns each sentence with its byte range in `text`; whitespace between
/// sentences belongs to no range. Abbreviations such as `Dr.` end a sentence.
pub fn split_sentences(text: &str) -> Vec<(&str, Range<usize>)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if start.is_none() {
            if c.is_whitespace() {
                continue;
            }
            start = Some(i);
        }
        let next_is_break = chars.peek().is_none_or(|&(_, n)| n.is_whitespace());
        if matches!(c, '.' | '?' | '!') && next_is_break {
            let s = start.take().unwrap();
            let end = i + c.len_utf8();
            out.push((&text[s..end], s..end));
        }
    }
    if let Some(s) = start {
        let end = text.trim_end().len();
        out.push((&text[s..end], s..end));
    }
    out
}

/// Whitespace-split words with leading and trailing punctuation marks peeled
/// off as separate items, one per mark.
pub fn word_tokenize(sentence: &str) -> Vec<String> {
    tokenize_items(sentence)
        .into_iter()
        .map(|item| item.text)
        .collect()
}

pub fn tokenize_items(sentence: &str) -> Vec<Item> {
    let mut items = Vec::new();
    for chunk in sentence.split_whitespace() {
        let lead = chunk.chars().take_while(|&c| is_punct(c)).count();
        if lead == chunk.chars().count() {
            items.push(Item::free(chunk));
            continue;
        }
        let trail = chunk.chars().rev().take_while(|&c| is_punct(c)).count();
        let chars: Vec<char> = chunk.chars().collect();
        for &c in &chars[..lead] {
            items.push(Item {
                text: c.to_string(),
                attach: Attach::ToNext,
            });
        }
        items.push(Item::free(chars[lead..chars.len() - trail].iter().collect::<String>()));
        for &c in &chars[chars.len() - trail..] {
            items.push(Item {
                text: c.to_string(),
                attach: Attach::ToPrev,
            });
        }
    }
    items
}

/// Join items with single spaces, except where punctuation is glued to a neighbour.
pub fn render(items: &[Item]) -> String {
    let mut out = String::new();
    for (i, item) in items.iter().enumerate() {
        if i > 0 && item.attach != Attach::ToPrev && items[i - 1].attach != Attach::ToNext {
            out.push(' ');
        }
        out.push_str(&item.text);
    }
    out
}
