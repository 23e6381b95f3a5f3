//! Word-level tokenizer, the toy model's vocabulary, and answer normalization.
//!
//! Tokens are lowercase. A run of digits with embedded `.`/`,` separators
//! (`3274`, `3,274`, `2.0`) is one token, a run of letters is one token, and
//! every other non-space character is a token of its own.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const UNK_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;

pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().flat_map(char::to_lowercase).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            i += 1;
            loop {
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                // separator only counts when a digit follows
                if i + 1 < chars.len() && (chars[i] == '.' || chars[i] == ',') && chars[i + 1].is_ascii_digit() {
                    i += 1;
                } else {
                    break;
                }
            }
            out.push(chars[start..i].iter().collect());
        } else if c.is_alphabetic() {
            let start = i;
            while i < chars.len() && chars[i].is_alphabetic() {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

pub fn is_numeric(token: &str) -> bool {
    token.starts_with(|c: char| c.is_ascii_digit())
}

pub fn is_punctuation(token: &str) -> bool {
    token.chars().all(|c| !c.is_alphanumeric())
}

/// Digit-group separators removed: `3,274` → `3274`.
pub fn plain_numeral(token: &str) -> String {
    token.replace(',', "")
}

/// `3274` → `3,274`; `None` when grouping would not change the numeral.
pub fn grouped_numeral(token: &str) -> Option<String> {
    let plain = plain_numeral(token);
    let (int, frac) = match plain.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (plain.as_str(), None),
    };
    if int.len() < 4 || !int.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let mut grouped = String::new();
    for (i, c) in int.chars().enumerate() {
        if i > 0 && (int.len() - i) % 3 == 0 {
            grouped.push(',');
        }
        grouped.push(c);
    }
    if let Some(f) = frac {
        grouped.push('.');
        grouped.push_str(f);
    }
    (grouped != token).then_some(grouped)
}

const QUESTION_WORDS: &[&str] = &[
    "what", "which", "who", "whom", "whose", "when", "where", "why", "how", "does", "do", "did", "is",
    "are", "was", "were", "can", "could", "will", "would", "should", "has", "have",
];

/// Question mark anywhere, or a leading wh-word / auxiliary.
pub fn is_interrogative(tokens: &[String]) -> bool {
    tokens.iter().any(|t| t == "?") || tokens.first().is_some_and(|t| QUESTION_WORDS.contains(&t.as_str()))
}

/// Lowercase tokens without punctuation, numerals without grouping.
pub fn normalize_answer(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !is_punctuation(t))
        .map(|t| if is_numeric(&t) { plain_numeral(&t) } else { t })
        .collect()
}

/// The part of an answer that must appear for it to count: the leading
/// numeral when the answer starts with one (units dropped), otherwise the
/// whole normalized answer.
pub fn answer_core(text: &str) -> Vec<String> {
    let norm = normalize_answer(text);
    match norm.first() {
        Some(first) if is_numeric(first) => vec![first.clone()],
        _ => norm,
    }
}

fn tokens_equal(a: &str, b: &str) -> bool {
    if a == b {
        return true;
    }
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

/// True when the normalized core of `gold` occurs contiguously in `output`.
pub fn contains_answer(output: &str, gold: &str) -> bool {
    let core = answer_core(gold);
    if core.is_empty() {
        return false;
    }
    let out = normalize_answer(output);
    out.windows(core.len())
        .any(|w| w.iter().zip(&core).all(|(a, b)| tokens_equal(a, b)))
}

/// True when two answers agree after normalization (numeric compare on
/// leading numerals).
pub fn answers_match(a: &str, b: &str) -> bool {
    let (ca, cb) = (answer_core(a), answer_core(b));
    !ca.is_empty() && ca.len() == cb.len() && ca.iter().zip(&cb).all(|(x, y)| tokens_equal(x, y))
}

/// Token ↔ id table with a fixed capacity (the model's `vocab_size`).
/// New tokens can be interned after construction until capacity runs out.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    capacity: usize,
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 3, "vocabulary needs room for special tokens");
        let mut v = Self {
            capacity,
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for special in [PAD, UNK, EOS] {
            v.push(special.to_string());
        }
        v
    }

    /// Specials first, then the sorted unique tokens of `texts`.
    pub fn from_texts<'a>(capacity: usize, texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut v = Self::new(capacity);
        let mut all: Vec<String> = texts.into_iter().flat_map(tokenize).collect();
        all.sort();
        all.dedup();
        for t in all {
            v.intern(&t)?;
        }
        Ok(v)
    }

    fn push(&mut self, token: String) -> TokenId {
        let id = self.tokens.len() as TokenId;
        self.ids.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn intern(&mut self, token: &str) -> Result<TokenId> {
        if let Some(&id) = self.ids.get(token) {
            return Ok(id);
        }
        if self.tokens.len() >= self.capacity {
            return Err(Error::Input(format!(
                "vocabulary full ({} tokens), cannot add {token:?}",
                self.capacity
            )));
        }
        Ok(self.push(token.to_string()))
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or(UNK, String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t).unwrap_or(UNK_ID)).collect()
    }

    /// Number of ids in use; logits beyond this are never decoded.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 3
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Joins tokens with spaces, gluing hyphens/slashes and closing punctuation.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut glue_next = true;
        for &id in ids {
            if id == EOS_ID {
                break;
            }
            let tok = self.token(id);
            let glue_prev = matches!(tok, "-" | "/" | "," | "." | "?" | "!" | ":" | ";" | ")" | "'" | "%");
            if !glue_next && !glue_prev {
                out.push(' ');
            }
            out.push_str(tok);
            glue_next = matches!(tok, "-" | "/" | "(" | "$" | "'");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_words_numbers_and_punctuation() {
        assert_eq!(
            tokenize("What's the 0-60 time? 3,274 mAh, USB-C 2.0."),
            vec!["what", "'", "s", "the", "0", "-", "60", "time", "?", "3,274", "mah", ",", "usb", "-", "c", "2.0", "."]
        );
        assert_eq!(tokenize("iPhone_15_Pro"), vec!["iphone", "_", "15", "_", "pro"]);
        assert_eq!(tokenize("xDrive50 R1T"), vec!["xdrive", "50", "r", "1", "t"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn numeral_grouping() {
        assert_eq!(grouped_numeral("3274").as_deref(), Some("3,274"));
        assert_eq!(grouped_numeral("1234567").as_deref(), Some("1,234,567"));
        assert_eq!(grouped_numeral("999"), None);
        assert_eq!(grouped_numeral("2.0"), None);
        assert_eq!(plain_numeral("3,274"), "3274");
    }

    #[test]
    fn answer_judgment() {
        assert!(contains_answer("the battery is 3274 mah", "3274 mAh"));
        assert!(contains_answer("3,274", "3274 mAh"));
        assert!(contains_answer("usb-c 2.0", "USB-C 2.0"));
        assert!(!contains_answer("usb-c 3.0", "USB-C 2.0"));
        assert!(!contains_answer("32740", "3274 mAh"));
        assert!(!contains_answer("anything", ""));
        assert!(answers_match("14 cores", "14"));
        assert!(!answers_match("7 seats", "5"));
    }

    #[test]
    fn interrogative_detection() {
        assert!(is_interrogative(&tokenize("battery of the iphone?")));
        assert!(is_interrogative(&tokenize("How many seats")));
        assert!(!is_interrogative(&tokenize("Write a poem about the sea.")));
    }

    #[test]
    fn vocabulary_interns_until_full() {
        let mut v = Vocabulary::from_texts(6, ["b a", "a"]).unwrap();
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("b"), Some(4));
        assert_eq!(v.encode(&tokenize("a zzz")), vec![3, UNK_ID]);
        assert_eq!(v.intern("c").unwrap(), 5);
        assert!(v.intern("d").is_err());
        assert_eq!(v.intern("a").unwrap(), 3);
    }

    #[test]
    fn decode_glues_punctuation() {
        let v = Vocabulary::from_texts(64, ["usb - c 2.0 $ 999 , ok"]).unwrap();
        let ids = v.encode(&tokenize("usb-c 2.0, $999 ok"));
        assert_eq!(v.decode(&ids), "usb-c 2.0, $999 ok");
    }
}
