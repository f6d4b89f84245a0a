//! Normalization of methods, summaries, and class names into subtoken
//! sequences plus integer-id encoding against capped vocabularies.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM: usize = 4;
pub const STRING: usize = 5;

pub const NUM_TOKEN: &str = "<NUM>";
pub const STRING_TOKEN: &str = "<STRING>";

/// Special tokens in fixed id order 0..6.
pub const SPECIALS: [&str; 6] = ["<PAD>", "<UNK>", "<BOS>", "<EOS>", NUM_TOKEN, STRING_TOKEN];

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("vocabulary cap {cap} is smaller than the {} special tokens", SPECIALS.len())]
    CapTooSmall { cap: usize },
    #[error("vocabulary built from an empty corpus")]
    EmptyCorpus,
    #[error("decode: id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("malformed vocabulary file: {0}")]
    BadVocabFile(String),
}

/// Token vocabulary. Specials occupy the fixed ids 0..6; content tokens
/// follow in frequency order (ties broken lexicographically).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Build from a stream of token lists, keeping at most `cap`
    /// most-frequent content tokens on top of the specials.
    pub fn build<'a, I, T>(corpus: I, cap: usize) -> Result<Vocab, PreprocessError>
    where
        I: IntoIterator<Item = T>,
        T: IntoIterator<Item = &'a str>,
    {
        if cap < SPECIALS.len() {
            return Err(PreprocessError::CapTooSmall { cap });
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut any = false;
        for tokens in corpus {
            for tok in tokens {
                any = true;
                if SPECIALS.contains(&tok) {
                    continue;
                }
                *counts.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(PreprocessError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);

        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.into_iter().map(|(t, _)| t));
        Ok(Vocab::from_tokens(id_to_token))
    }

    fn from_tokens(id_to_token: Vec<String>) -> Vocab {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str, PreprocessError> {
        self.id_to_token
            .get(id)
            .map(|s| s.as_str())
            .ok_or(PreprocessError::IdOutOfRange {
                id,
                size: self.id_to_token.len(),
            })
    }

    /// Map tokens to ids, truncating to `max_len`; unknown tokens map to UNK.
    pub fn encode(&self, tokens: &[String], max_len: usize) -> Vec<usize> {
        tokens
            .iter()
            .take(max_len)
            .map(|t| self.id(t))
            .collect()
    }

    /// Inverse of `encode` for in-vocabulary ids.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>, PreprocessError> {
        ids.iter()
            .map(|&id| self.token(id).map(|t| t.to_string()))
            .collect()
    }

    /// One token per line in id order, specials first.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for tok in &self.id_to_token {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Vocab, PreprocessError> {
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < SPECIALS.len() {
            return Err(PreprocessError::BadVocabFile(format!(
                "{} lines, expected at least {}",
                tokens.len(),
                SPECIALS.len()
            )));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(PreprocessError::BadVocabFile(format!(
                    "line {} is {:?}, expected special {:?}",
                    i, tokens[i], s
                )));
            }
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

/// The three independent vocabularies of the pipeline.
#[derive(Debug, Clone)]
pub struct Vocabularies {
    pub code: Vocab,
    pub sbt: Vocab,
    pub summary: Vocab,
}

/// One method ready for the model: token sequences plus its place in a
/// class graph.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SummarizationInstance {
    pub id: String,
    pub code_tokens: Vec<String>,
    pub sbt_tokens: Vec<String>,
    pub class_name_tokens: Vec<String>,
    pub summary_tokens: Vec<String>,
    pub uml_graph_id: String,
    pub enclosing_class_node_id: u32,
}

/// Raw dataset record (one JSON object per line).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    #[serde(default)]
    pub repo: String,
    pub class_name: String,
    pub code: String,
    pub summary: String,
    pub uml_graph_id: String,
    /// Optional serialized AST in the nested-list exchange format.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ast: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Lower,
    Upper,
    Digit,
}

fn class_of(c: char) -> Option<CharClass> {
    if c.is_ascii_digit() {
        Some(CharClass::Digit)
    } else if c.is_uppercase() {
        Some(CharClass::Upper)
    } else if c.is_alphabetic() {
        Some(CharClass::Lower)
    } else {
        None
    }
}

/// Split an identifier into lowercase subtokens on camel-case boundaries,
/// underscores (and any other separator characters), and digit/letter
/// boundaries. `"getPropertyDescriptor"` becomes `["get", "property",
/// "descriptor"]`; `"parse_URL2"` becomes `["parse", "url", "2"]`.
pub fn split_subtokens(identifier: &str) -> Vec<String> {
    let chars: Vec<char> = identifier.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let Some(cls) = class_of(c) else {
            flush(&mut cur, &mut out);
            continue;
        };
        if !cur.is_empty() {
            let prev = class_of(chars[i - 1]).expect("cur nonempty implies alnum prev");
            let boundary = match (prev, cls) {
                (CharClass::Lower, CharClass::Upper) => true,
                (CharClass::Digit, CharClass::Lower | CharClass::Upper) => true,
                (CharClass::Lower | CharClass::Upper, CharClass::Digit) => true,
                // Acronym followed by a word: "URLParser" -> url | parser.
                (CharClass::Upper, CharClass::Upper) => false,
                _ => false,
            };
            let acronym_end = prev == CharClass::Upper
                && cls == CharClass::Lower
                && cur.chars().count() > 1;
            if boundary {
                flush(&mut cur, &mut out);
            } else if acronym_end {
                // Last uppercase starts the new word: "ABc" -> "A" | "Bc".
                let last = cur.pop().expect("nonempty");
                flush(&mut cur, &mut out);
                cur.push(last);
            }
        }
        cur.push(c);
    }
    flush(&mut cur, &mut out);
    out
}

fn flush(cur: &mut String, out: &mut Vec<String>) {
    if !cur.is_empty() {
        out.push(cur.to_lowercase());
        cur.clear();
    }
}

/// Normalize a class name: strip `<T>`-like generic parameter text, drop
/// any qualifier prefix up to the last dot, then split into subtokens.
/// `"Parent.Child"` becomes `["child"]`, `"Map<K,V>"` becomes `["map"]`.
pub fn normalize_class_name(raw: &str) -> Vec<String> {
    let mut stripped = String::with_capacity(raw.len());
    let mut depth = 0usize;
    for c in raw.chars() {
        match c {
            '<' => depth += 1,
            '>' => depth = depth.saturating_sub(1),
            _ if depth == 0 => stripped.push(c),
            _ => {}
        }
    }
    let simple = match stripped.rfind('.') {
        Some(i) => &stripped[i + 1..],
        None => &stripped[..],
    };
    split_subtokens(simple)
}

fn is_numeral(tok: &str) -> bool {
    tok.chars().next().is_some_and(|c| c.is_ascii_digit())
}

fn is_string_literal(tok: &str) -> bool {
    tok.starts_with('"') || tok.starts_with('\'')
}

/// Apply the code normalization rules to a lexed token list: numerals
/// become `<NUM>`, string literals become `<STRING>`, identifiers are
/// subtoken-split, and everything is lowercased.
pub fn preprocess_code(tokens: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len());
    for tok in tokens {
        if is_numeral(tok) {
            out.push(NUM_TOKEN.to_string());
        } else if is_string_literal(tok) {
            out.push(STRING_TOKEN.to_string());
        } else if tok.chars().any(|c| c.is_alphanumeric()) {
            out.extend(split_subtokens(tok));
        } else {
            out.push(tok.to_lowercase());
        }
    }
    out
}

/// Normalize a summary sentence: punctuation removed, subtoken-split,
/// lowercased. Returns an empty list when fewer than three words remain,
/// which callers treat as "drop this record".
pub fn preprocess_summary(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    let tokens: Vec<String> = cleaned
        .split_whitespace()
        .flat_map(split_subtokens)
        .collect();
    if tokens.len() < 3 {
        Vec::new()
    } else {
        tokens
    }
}

/// Tokenize Java-like source text into a flat token list: identifiers,
/// numerals, string/char literals, and single-character punctuation.
/// Comments are skipped.
pub fn lex_code(source: &str) -> Vec<String> {
    let chars: Vec<char> = source.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '/' && i + 1 < chars.len() && chars[i + 1] == '/' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c == '/' && i + 1 < chars.len() && chars[i + 1] == '*' {
            i += 2;
            while i + 1 < chars.len() && !(chars[i] == '*' && chars[i + 1] == '/') {
                i += 1;
            }
            i = (i + 2).min(chars.len());
        } else if c == '"' || c == '\'' {
            let quote = c;
            let start = i;
            i += 1;
            while i < chars.len() && chars[i] != quote {
                if chars[i] == '\\' {
                    i += 1;
                }
                i += 1;
            }
            i = (i + 1).min(chars.len());
            out.push(chars[start..i.min(chars.len())].iter().collect());
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '.' || chars[i] == '_')
            {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else if c.is_alphanumeric() || c == '_' || c == '$' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '$')
            {
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

impl fmt::Display for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vocab({} tokens)", self.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_camel_case() {
        assert_eq!(
            split_subtokens("getPropertyDescriptor"),
            vec!["get", "property", "descriptor"]
        );
    }

    #[test]
    fn single_letter_identifier() {
        assert_eq!(split_subtokens("x"), vec!["x"]);
    }

    #[test]
    fn splits_underscore_acronym_digit() {
        assert_eq!(split_subtokens("parse_URL2"), vec!["parse", "url", "2"]);
    }

    #[test]
    fn splits_acronym_then_word() {
        assert_eq!(split_subtokens("URLParser"), vec!["url", "parser"]);
        assert_eq!(split_subtokens("HTMLToXML"), vec!["html", "to", "xml"]);
    }

    #[test]
    fn normalizes_qualified_name() {
        assert_eq!(normalize_class_name("Parent.Child"), vec!["child"]);
    }

    #[test]
    fn normalizes_generics() {
        assert_eq!(normalize_class_name("Map<K,V>"), vec!["map"]);
    }

    #[test]
    fn normalizes_compound_class_name() {
        assert_eq!(
            normalize_class_name("AbstractResourceHandle"),
            vec!["abstract", "resource", "handle"]
        );
    }

    #[test]
    fn code_numerals_become_sentinel() {
        let toks: Vec<String> = ["return", "42", ";"].iter().map(|s| s.to_string()).collect();
        assert_eq!(preprocess_code(&toks), vec!["return", "<NUM>", ";"]);
    }

    #[test]
    fn code_strings_become_sentinel() {
        let toks: Vec<String> = ["s", "=", "\"hi\""].iter().map(|s| s.to_string()).collect();
        assert_eq!(preprocess_code(&toks), vec!["s", "=", "<STRING>"]);
    }

    #[test]
    fn code_empty_is_empty() {
        assert_eq!(preprocess_code(&[]), Vec::<String>::new());
    }

    #[test]
    fn summary_strips_punctuation() {
        assert_eq!(
            preprocess_summary("Visits a field of the class."),
            vec!["visits", "a", "field", "of", "the", "class"]
        );
    }

    #[test]
    fn short_summary_filtered() {
        assert_eq!(preprocess_summary("OK."), Vec::<String>::new());
        assert_eq!(preprocess_summary(""), Vec::<String>::new());
    }

    #[test]
    fn vocab_keeps_frequent_tokens() {
        let corpus = vec![vec!["a", "a", "a", "b"]];
        let v = Vocab::build(corpus, 7).unwrap();
        assert_ne!(v.id("a"), UNK);
        assert_ne!(v.id("b"), UNK);
    }

    #[test]
    fn vocab_tie_break_is_lexicographic() {
        let corpus = vec![vec!["b", "a", "b", "a", "a", "b"]];
        let v = Vocab::build(corpus, 7).unwrap();
        assert!(v.id("a") < v.id("b"));
    }

    #[test]
    fn vocab_unseen_token_is_unk() {
        let corpus = vec![vec!["a"]];
        let v = Vocab::build(corpus, 7).unwrap();
        assert_eq!(v.id("never-seen"), UNK);
    }

    #[test]
    fn vocab_cap_below_specials_errors() {
        let corpus = vec![vec!["a"]];
        assert!(matches!(
            Vocab::build(corpus, 3),
            Err(PreprocessError::CapTooSmall { cap: 3 })
        ));
    }

    #[test]
    fn vocab_cap_drops_rare_tokens() {
        let corpus = vec![vec!["a", "a", "b", "b", "c", "d", "e", "f", "g"]];
        let v = Vocab::build(corpus, 6).unwrap();
        assert_ne!(v.id("a"), UNK);
        assert_ne!(v.id("b"), UNK);
        // Ties broken lexicographically, so "g" falls off the cap.
        assert_eq!(v.id("g"), UNK);
        assert_eq!(v.len(), SPECIALS.len() + 6);
    }

    #[test]
    fn encode_truncates_and_decode_inverts() {
        let corpus = vec![vec!["a", "b", "c"]];
        let v = Vocab::build(corpus, 10).unwrap();
        let toks: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let ids = v.encode(&toks, 30);
        assert_eq!(v.decode(&ids).unwrap(), toks);
        assert!(v.encode(&vec!["a".to_string(); 50], 30).len() <= 30);
    }

    #[test]
    fn decode_out_of_range_errors() {
        let corpus = vec![vec!["a"]];
        let v = Vocab::build(corpus, 7).unwrap();
        assert!(matches!(
            v.decode(&[999]),
            Err(PreprocessError::IdOutOfRange { id: 999, .. })
        ));
    }

    #[test]
    fn vocab_file_round_trip() {
        let corpus = vec![vec!["beta", "alpha", "beta"]];
        let v = Vocab::build(corpus, 10).unwrap();
        let text = v.to_file_string();
        assert!(text.starts_with("<PAD>\n<UNK>\n<BOS>\n<EOS>\n<NUM>\n<STRING>\n"));
        let back = Vocab::from_file_string(&text).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn vocab_determinism() {
        let corpus = || vec![vec!["m", "q", "m", "z", "q", "m", "k"]];
        let a = Vocab::build(corpus(), 8).unwrap();
        let b = Vocab::build(corpus(), 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lexer_handles_literals_and_comments() {
        let toks = lex_code("int x = 42; // done\ns = \"hi there\"; /* c */ y++;");
        assert_eq!(
            toks,
            vec!["int", "x", "=", "42", ";", "s", "=", "\"hi there\"", ";", "y", "+", "+", ";"]
        );
    }

    proptest! {
        /// Concatenated subtokens contain exactly the letters/digits of
        /// the input, in order, modulo case.
        #[test]
        fn subtokens_lossless_modulo_case(ident in "[a-zA-Z0-9_]{1,24}") {
            let joined: String = split_subtokens(&ident).concat();
            let expected: String = ident
                .chars()
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
                .to_lowercase();
            prop_assert_eq!(joined, expected);
        }

        /// No preprocessing output contains an uppercase character.
        #[test]
        fn outputs_never_uppercase(ident in "[a-zA-Z0-9_<>.]{1,24}", summary in "[ a-zA-Z0-9.,!]{0,60}") {
            for t in split_subtokens(&ident) {
                prop_assert!(!t.chars().any(|c| c.is_uppercase()));
            }
            for t in normalize_class_name(&ident) {
                prop_assert!(!t.chars().any(|c| c.is_uppercase()));
            }
            for t in preprocess_summary(&summary) {
                prop_assert!(!t.chars().any(|c| c.is_uppercase()));
            }
        }
    }
}
