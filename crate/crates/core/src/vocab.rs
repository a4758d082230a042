//! Text normalization, word-level tokenization and the token vocabulary.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<sos>", "<eos>", "<sep>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Vi,
    Ja,
    Synthetic,
}

impl Language {
    pub const ALL: [Language; 4] = [
        Language::En,
        Language::Vi,
        Language::Ja,
        Language::Synthetic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Vi => "vi",
            Language::Ja => "ja",
            Language::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Language::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown language tag `{s}`")))
    }
}

/// Word-level tokens of one text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub tokens: Vec<String>,
    pub language: Language,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn join(&self) -> String {
        self.tokens.join(" ")
    }
}

fn is_kept(c: char) -> bool {
    // '_' joins pre-segmented multi-syllable words; U+0300..U+036F are
    // combining diacritics used by decomposed Vietnamese text.
    c.is_alphanumeric() || c == '_' || ('\u{0300}'..='\u{036f}').contains(&c)
}

/// Lowercases, replaces every character that is not a letter, digit or
/// word joiner with a space, collapses whitespace and trims.
pub fn normalize(text: &str) -> String {
    let mut cleaned = String::with_capacity(text.len());
    for c in text.chars() {
        if is_kept(c) {
            cleaned.extend(c.to_lowercase());
        } else {
            cleaned.push(' ');
        }
    }
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits normalized text on whitespace. Vietnamese and Japanese input is
/// expected to arrive already segmented (segments joined by `_`).
pub fn tokenize(text: &str, language: Language) -> TokenizedText {
    TokenizedText {
        tokens: text.split_whitespace().map(str::to_owned).collect(),
        language,
    }
}

/// [`normalize`] followed by [`tokenize`].
pub fn preprocess(text: &str, language: Language) -> TokenizedText {
    tokenize(&normalize(text), language)
}

/// Bijection between tokens and ids with the five reserved entries first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::new())
    }
}

impl Vocabulary {
    fn from_tokens(extra: Vec<String>) -> Self {
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(extra)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Keeps tokens seen at least `min_freq` times; ids follow descending
    /// frequency, ties broken lexicographically.
    pub fn build<'a, I>(corpus: I, min_freq: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for tok in sentence {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(t))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t.to_owned()).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::Index {
            index: id,
            bound: self.tokens.len(),
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens, skipping `<pad>` and `<sos>`. With
    /// `stop_at_eos` decoding ends at the first `<eos>`.
    pub fn decode(&self, ids: &[usize], stop_at_eos: bool) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.token(id)?;
            match id {
                PAD | SOS => continue,
                EOS if stop_at_eos => break,
                _ => out.push(tok.to_owned()),
            }
        }
        Ok(out)
    }

    /// Serializes as `token<TAB>id` lines, reserved rows first.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(t);
            s.push('\t');
            s.push_str(&i.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(n + 1, "expected `token<TAB>id`".into()))?;
            let id: usize = id
                .parse()
                .map_err(|e| parse_err(n + 1, format!("bad id: {e}")))?;
            if id != n || tok.is_empty() {
                return Err(parse_err(n + 1, format!("expected id {n}, got {id}")));
            }
            if n < RESERVED.len() && tok != RESERVED[n] {
                return Err(parse_err(
                    n + 1,
                    format!("reserved id {n} must be {}", RESERVED[n]),
                ));
            }
            tokens.push(tok.to_owned());
        }
        if tokens.len() < RESERVED.len() {
            return Err(parse_err(tokens.len() + 1, "missing reserved rows".into()));
        }
        let vocab = Self::from_tokens(tokens.split_off(RESERVED.len()));
        if vocab.index.len() != vocab.tokens.len() {
            return Err(parse_err(0, "duplicate token".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize("What are put on the table?"),
            "what are put on the table"
        );
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("  A,,B  "), "a b");
        assert_eq!(normalize("Người ĐÀN_ÔNG!"), "người đàn_ông");
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("what are put", Language::En).tokens,
            toks("what are put")
        );
        assert_eq!(
            tokenize("người đàn_ông", Language::Vi).tokens,
            vec!["người", "đàn_ông"]
        );
        assert!(tokenize("", Language::Ja).is_empty());
    }

    #[test]
    fn build_orders_by_frequency_then_lexically() {
        let corpus = [toks("a a b")];
        let v = Vocabulary::build(corpus.iter().map(|s| s.as_slice()), 1);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
        let v = Vocabulary::build(corpus.iter().map(|s| s.as_slice()), 2);
        assert_eq!(v.len(), 6);
        assert!(!v.contains("b"));

        let ties = [toks("z y x")];
        let v = Vocabulary::build(ties.iter().map(|s| s.as_slice()), 1);
        assert_eq!(&v.tokens()[5..], &toks("x y z")[..]);
    }

    #[test]
    fn empty_corpus_has_reserved_only() {
        let v = Vocabulary::build(std::iter::empty(), 1);
        assert_eq!(v.len(), 5);
        assert_eq!(v.token(SEP).unwrap(), "<sep>");
    }

    #[test]
    fn oov_maps_to_unk() {
        let corpus = [toks("red apple")];
        let v = Vocabulary::build(corpus.iter().map(|s| s.as_slice()), 1);
        assert_eq!(v.encode(&["red", "pear"]), vec![v.id("red"), UNK]);
        assert_eq!(
            v.decode(&v.encode(&["pear"]), false).unwrap(),
            vec!["<unk>"]
        );
    }

    #[test]
    fn decode_stops_at_eos() {
        let corpus = [toks("x y")];
        let v = Vocabulary::build(corpus.iter().map(|s| s.as_slice()), 1);
        let (x, y) = (v.id("x"), v.id("y"));
        assert_eq!(v.decode(&[SOS, x, EOS, y], true).unwrap(), vec!["x"]);
        assert_eq!(
            v.decode(&[SOS, x, PAD, EOS, y], false).unwrap(),
            vec!["x", "<eos>", "y"]
        );
        assert!(v.decode(&[99], true).is_err());
    }

    #[test]
    fn tsv_rejects_wrong_reserved_rows() {
        let bad = "<pad>\t0\n<sos>\t1\n<sep>\t2\n";
        assert!(Vocabulary::from_tsv(bad, Path::new("v.tsv")).is_err());
        assert!(Vocabulary::from_tsv("", Path::new("v.tsv")).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(words in proptest::collection::vec("[a-z]{1,4}", 1..20)) {
            let v = Vocabulary::build(std::iter::once(words.as_slice()), 1);
            let ids = v.encode(&words);
            prop_assert!(ids.iter().all(|&i| i < v.len()));
            prop_assert_eq!(v.decode(&ids, true).unwrap(), words.clone());
            let back = Vocabulary::from_tsv(&v.to_tsv(), Path::new("v")).unwrap();
            prop_assert_eq!(&back, &v);
            prop_assert_eq!(back.to_tsv(), v.to_tsv());
        }

        #[test]
        fn normalized_text_is_fixed_point(s in "\\PC{0,40}") {
            let n = normalize(&s);
            prop_assert_eq!(normalize(&n), n.clone());
            prop_assert!(tokenize(&n, Language::En).tokens.iter().all(|t| !t.is_empty() && !t.contains(char::is_whitespace)));
        }
    }
}
