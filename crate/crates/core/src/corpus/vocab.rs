//! Letter and word-piece vocabularies.
//!
//! Word pieces are trained by frequency-greedy pair merging (ties broken
//! lexicographically) and applied by greedy longest-match segmentation, so
//! decode(encode(x)) is the identity whenever x is spellable from the base
//! alphabet.
//!
//! File format: one token per line with `\s` escaping the word-separator
//! token and `\\` a literal backslash, then a `#merges` line, then one
//! `left right` pair per line in merge order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const SEPARATOR: &str = " ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocabKind {
    Letter,
    WordPiece,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    kind: VocabKind,
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
    merges: Vec<(String, String)>,
    max_token_len: usize,
}

impl Vocabulary {
    fn build(kind: VocabKind, tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(CoreError::invalid("empty token"));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(CoreError::invalid(format!("duplicate token `{}`", t)));
            }
        }
        let max_token_len = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(0);
        Ok(Self {
            kind,
            tokens,
            index,
            merges,
            max_token_len,
        })
    }

    /// Letter vocabulary over the distinct characters of the given texts
    /// (the word separator becomes its own token).
    pub fn letters(texts: &[&str]) -> Result<Self> {
        if texts.is_empty() {
            return Err(CoreError::invalid("empty corpus"));
        }
        let mut chars: Vec<char> = texts
            .iter()
            .flat_map(|t| t.chars())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        chars.sort_unstable();
        let tokens = chars.into_iter().map(String::from).collect();
        Self::build(VocabKind::Letter, tokens, Vec::new())
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn separator_id(&self) -> Option<u32> {
        self.id(SEPARATOR)
    }

    /// Greedy longest-match segmentation; letters degenerate to one char
    /// per token. Unknown characters are errors naming the character.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::with_capacity(chars.len());
        let mut pos = 0;
        while pos < chars.len() {
            if chars[pos] == ' ' {
                let id = self
                    .id(SEPARATOR)
                    .ok_or(CoreError::OutOfDomainChar(' '))?;
                out.push(id);
                pos += 1;
                continue;
            }
            // find the longest token matching at pos (never across a space)
            let mut best: Option<(usize, u32)> = None;
            let mut end = pos;
            let mut candidate = String::new();
            while end < chars.len() && chars[end] != ' ' && end - pos < self.max_token_len {
                candidate.push(chars[end]);
                end += 1;
                if let Some(id) = self.id(&candidate) {
                    best = Some((end - pos, id));
                }
            }
            match best {
                Some((len, id)) => {
                    out.push(id);
                    pos += len;
                }
                None => return Err(CoreError::OutOfDomainChar(chars[pos])),
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .tokens
                .get(id as usize)
                .ok_or_else(|| CoreError::invalid(format!("token id {} out of range", id)))?;
            out.push_str(tok);
        }
        Ok(out)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(&escape(t));
            out.push('\n');
        }
        out.push_str("#merges\n");
        for (a, b) in &self.merges {
            out.push_str(&escape(a));
            out.push(' ');
            out.push_str(&escape(b));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn from_file_string(content: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut merges = Vec::new();
        let mut in_merges = false;
        for line in content.lines() {
            if line == "#merges" {
                if in_merges {
                    return Err(CoreError::parse("vocabulary", "repeated #merges line"));
                }
                in_merges = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if in_merges {
                let (a, b) = line
                    .split_once(' ')
                    .ok_or_else(|| CoreError::parse("vocabulary", "merge line needs two parts"))?;
                merges.push((unescape(a)?, unescape(b)?));
            } else {
                tokens.push(unescape(line)?);
            }
        }
        if !in_merges {
            return Err(CoreError::parse("vocabulary", "missing #merges line"));
        }
        if tokens.is_empty() {
            return Err(CoreError::parse("vocabulary", "no tokens"));
        }
        let kind = if merges.is_empty() {
            VocabKind::Letter
        } else {
            VocabKind::WordPiece
        };
        Self::build(kind, tokens, merges)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }
}

fn escape(token: &str) -> String {
    token.replace('\\', "\\\\").replace(' ', "\\s")
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('s') => out.push(' '),
                Some('\\') => out.push('\\'),
                other => {
                    return Err(CoreError::parse(
                        "vocabulary",
                        format!("bad escape \\{:?}", other),
                    ))
                }
            }
        } else {
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(CoreError::parse("vocabulary", "empty token"));
    }
    Ok(out)
}

/// Train a word-piece vocabulary by frequency-greedy pair merging over the
/// words of the training texts. Pairs never span the word separator. Merging
/// stops at `target_size` tokens or when no pair occurs twice.
pub fn bpe_train(texts: &[&str], target_size: usize) -> Result<Vocabulary> {
    bpe_train_with_alphabet(texts, &[], target_size)
}

/// Like [`bpe_train`], guaranteeing single-character tokens for
/// `base_alphabet` even when the training texts miss some of them (so any
/// in-domain text stays encodable). Extra alphabet characters contribute no
/// pair counts.
pub fn bpe_train_with_alphabet(
    texts: &[&str],
    base_alphabet: &[char],
    target_size: usize,
) -> Result<Vocabulary> {
    if texts.is_empty() || texts.iter().all(|t| t.is_empty()) {
        return Err(CoreError::invalid("empty corpus"));
    }
    let mut alphabet: std::collections::BTreeSet<char> =
        texts.iter().flat_map(|t| t.chars()).collect();
    alphabet.extend(base_alphabet.iter().copied());
    alphabet.insert(' ');
    if target_size < alphabet.len() {
        return Err(CoreError::invalid(format!(
            "target size {} below base alphabet size {}",
            target_size,
            alphabet.len()
        )));
    }

    // word -> frequency, represented as symbol sequences
    let mut words: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    for text in texts {
        for word in text.split(' ').filter(|w| !w.is_empty()) {
            let symbols: Vec<String> = word.chars().map(String::from).collect();
            *words.entry(symbols).or_insert(0) += 1;
        }
    }

    let mut tokens: Vec<String> = alphabet.iter().map(|&c| String::from(c)).collect();
    let mut merges: Vec<(String, String)> = Vec::new();

    while tokens.len() < target_size {
        let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (symbols, &freq) in &words {
            for w in symbols.windows(2) {
                *pair_counts
                    .entry((w[0].clone(), w[1].clone()))
                    .or_insert(0) += freq;
            }
        }
        // highest count, ties broken by lexicographically smallest pair
        let best = pair_counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(p, &c)| (p.clone(), c));
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        let merged = format!("{}{}", pair.0, pair.1);
        let mut next: BTreeMap<Vec<String>, u64> = BTreeMap::new();
        for (symbols, freq) in words {
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(symbols[i].clone());
                    i += 1;
                }
            }
            *next.entry(out).or_insert(0) += freq;
        }
        words = next;
        tokens.push(merged);
        merges.push(pair);
    }

    Vocabulary::build(VocabKind::WordPiece, tokens, merges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letters_encode_one_to_one() {
        let v = Vocabulary::letters(&["ab a"]).unwrap();
        let ids = v.encode("ab a").unwrap();
        assert_eq!(ids.len(), 4);
        let toks: Vec<&str> = ids.iter().map(|&i| v.token(i)).collect();
        assert_eq!(toks, vec!["a", "b", " ", "a"]);
        assert_eq!(v.decode(&ids).unwrap(), "ab a");
    }

    #[test]
    fn out_of_domain_char_is_named() {
        let v = Vocabulary::letters(&["ab"]).unwrap();
        match v.encode("axb") {
            Err(CoreError::OutOfDomainChar(c)) => assert_eq!(c, 'x'),
            other => panic!("expected OutOfDomainChar, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn first_merge_of_repeated_pair() {
        // brute-force pair count for "ab ab ab": (a,b) occurs 3 times,
        // which beats every alternative
        let v = bpe_train(&["ab ab ab"], 4).unwrap();
        assert_eq!(v.merges(), &[("a".to_string(), "b".to_string())]);
        assert!(v.id("ab").is_some());
    }

    #[test]
    fn target_equals_alphabet_means_no_merges() {
        let v = bpe_train(&["ab ba"], 3).unwrap(); // alphabet {a, b, ' '}
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn longest_match_wins() {
        let v = bpe_train(&["ab ab ab abc"], 5).unwrap();
        assert!(v.id("ab").is_some());
        let ids = v.encode("ab").unwrap();
        assert_eq!(ids.len(), 1, "`ab` should be a single word piece");
    }

    #[test]
    fn round_trip_on_training_corpus() {
        let texts = ["abc cab bac", "ab abc ca", "ccc ab"];
        let v = bpe_train(&texts, 8).unwrap();
        for t in &texts {
            assert_eq!(v.decode(&v.encode(t).unwrap()).unwrap(), *t);
        }
        let letters = Vocabulary::letters(&texts).unwrap();
        for t in &texts {
            assert_eq!(letters.decode(&letters.encode(t).unwrap()).unwrap(), *t);
        }
    }

    #[test]
    fn file_round_trip() {
        let v = bpe_train(&["ab ab abc"], 6).unwrap();
        let s = v.to_file_string();
        let back = Vocabulary::from_file_string(&s).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.merges(), v.merges());
        assert_eq!(back.kind(), VocabKind::WordPiece);

        let letters = Vocabulary::letters(&["ab a"]).unwrap();
        let s = letters.to_file_string();
        let back = Vocabulary::from_file_string(&s).unwrap();
        assert_eq!(back.kind(), VocabKind::Letter);
        assert_eq!(back.tokens(), letters.tokens());
    }

    #[test]
    fn malformed_vocab_files_error() {
        assert!(Vocabulary::from_file_string("").is_err());
        assert!(Vocabulary::from_file_string("a\nb\n").is_err()); // no #merges
        assert!(Vocabulary::from_file_string("a\na\n#merges\n").is_err()); // dup
        assert!(Vocabulary::from_file_string("a\n#merges\nonlyone\n").is_err());
        assert!(Vocabulary::from_file_string("a\\q\n#merges\n").is_err()); // bad escape
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(bpe_train(&[], 10).is_err());
        assert!(bpe_train(&[""], 10).is_err());
    }
}
