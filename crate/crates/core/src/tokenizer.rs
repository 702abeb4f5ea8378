//! Byte-level BPE vocabulary and the `[CLS] query [SEP] code [SEP]` encoder.
//!
//! Ids `0..5` are the special tokens, `5..261` the 256 byte values, and every
//! learned merge appends one id after that. Text is pre-split into chunks of
//! "leading whitespace + non-whitespace run", so concatenating decoded chunks
//! reproduces the input byte for byte.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::artifact::ArtifactHeader;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<cls>", "<sep>", "<mask>"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();
const BYTE_BASE: u32 = NUM_SPECIAL as u32;
/// Smallest vocabulary: specials plus the byte alphabet.
pub const MIN_VOCAB: usize = NUM_SPECIAL + 256;
pub const DEFAULT_VOCAB_SIZE: usize = 8192;
pub const DEFAULT_MAX_LEN: usize = 256;

const VOCAB_MAGIC: &str = "codesearch-vocab v1";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("vocab size {0} must exceed {MIN_VOCAB} (specials + bytes)")]
    VocabTooSmall(usize),
    #[error("token id {id} out of range for vocabulary of {len}")]
    IdOutOfRange { id: u32, len: usize },
    #[error("vocabulary file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Token ids plus a 0/1 attention mask of the same length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-PAD positions.
    pub fn content_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Ids without padding.
    pub fn content_ids(&self) -> Vec<u32> {
        self.ids
            .iter()
            .zip(&self.attention_mask)
            .filter(|(_, &m)| m == 1)
            .map(|(&id, _)| id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    /// Byte string for every non-special id, indexed by `id - NUM_SPECIAL`.
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), usize>,
}

/// Split text into chunks of leading whitespace followed by a non-whitespace run.
fn pretokenize(text: &str) -> Vec<&str> {
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                chunks.push(&text[start..i]);
                start = i;
                in_word = false;
            }
        } else {
            in_word = true;
        }
    }
    if start < text.len() {
        chunks.push(&text[start..]);
    }
    chunks
}

fn byte_ids(chunk: &str) -> Vec<u32> {
    chunk.bytes().map(|b| BYTE_BASE + u32::from(b)).collect()
}

fn merge_pair(symbols: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

impl Vocabulary {
    fn base() -> Self {
        Self {
            tokens: (0..=255u8).map(|b| vec![b]).collect(),
            merges: Vec::new(),
            merge_rank: HashMap::new(),
        }
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let mut bytes = self.token_bytes(pair.0).to_vec();
        bytes.extend_from_slice(self.token_bytes(pair.1));
        self.tokens.push(bytes);
        self.merge_rank.insert(pair, self.merges.len());
        self.merges.push(pair);
        (NUM_SPECIAL + self.tokens.len() - 1) as u32
    }

    /// Learn merges until the vocabulary reaches `vocab_size` or no adjacent
    /// pair occurs at least twice. The most frequent pair is merged first; ties
    /// go to the lexicographically smallest (left bytes, right bytes).
    pub fn train<S: AsRef<str>>(texts: &[S], vocab_size: usize) -> Result<Self, TokenizerError> {
        if vocab_size <= MIN_VOCAB {
            return Err(TokenizerError::VocabTooSmall(vocab_size));
        }
        let mut word_counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for chunk in pretokenize(t.as_ref()) {
                *word_counts.entry(chunk).or_default() += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut words: Vec<(Vec<u32>, usize)> = word_counts
            .into_iter()
            .map(|(w, c)| (byte_ids(w), c))
            .collect();
        words.sort();

        let mut vocab = Self::base();
        while vocab.len() < vocab_size {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for (symbols, c) in &words {
                for w in symbols.windows(2) {
                    *counts.entry((w[0], w[1])).or_default() += c;
                }
            }
            let best = counts
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .min_by(|(pa, ca), (pb, cb)| {
                    cb.cmp(ca).then_with(|| {
                        (vocab.token_bytes(pa.0), vocab.token_bytes(pa.1))
                            .cmp(&(vocab.token_bytes(pb.0), vocab.token_bytes(pb.1)))
                    })
                });
            let Some((pair, _)) = best else { break };
            let new_id = vocab.push_merge(pair);
            for (symbols, _) in &mut words {
                if symbols.windows(2).any(|w| (w[0], w[1]) == pair) {
                    merge_pair(symbols, pair, new_id);
                }
            }
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        NUM_SPECIAL + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIAL
    }

    fn token_bytes(&self, id: u32) -> &[u8] {
        &self.tokens[id as usize - NUM_SPECIAL]
    }

    /// Printable form of a token (specials by name, others lossily as UTF-8).
    pub fn token_str(&self, id: u32) -> Option<String> {
        let idx = id as usize;
        if idx < NUM_SPECIAL {
            Some(SPECIAL_TOKENS[idx].to_string())
        } else {
            self.tokens
                .get(idx - NUM_SPECIAL)
                .map(|b| String::from_utf8_lossy(b).into_owned())
        }
    }

    fn encode_chunk(&self, chunk: &str) -> Vec<u32> {
        let mut symbols = byte_ids(chunk);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            merge_pair(&mut symbols, pair, (MIN_VOCAB + rank) as u32);
        }
        symbols
    }

    /// Subword ids of `text`, without specials.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        pretokenize(text)
            .into_iter()
            .flat_map(|c| self.encode_chunk(c))
            .collect()
    }

    /// `[CLS] text [SEP]`, truncated and padded to `max_len`.
    pub fn encode_text(&self, text: &str, max_len: usize) -> EncodedSequence {
        let max_len = max_len.max(2);
        let mut ids = vec![CLS];
        ids.extend(self.tokenize(text).into_iter().take(max_len - 2));
        ids.push(SEP);
        pad(ids, max_len)
    }

    /// `[CLS] query [SEP] code [SEP]`, padded to `max_len` (at least 3).
    /// Overlong input loses the code tail first, then the query tail.
    pub fn encode_pair(&self, query: &str, code: &str, max_len: usize) -> EncodedSequence {
        let max_len = max_len.max(3);
        let mut q = self.tokenize(query);
        let mut c = self.tokenize(code);
        let budget = max_len - 3;
        if q.len() + c.len() > budget {
            c.truncate(budget.saturating_sub(q.len()));
            q.truncate(budget - c.len());
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(q);
        ids.push(SEP);
        ids.extend(c);
        ids.push(SEP);
        pad(ids, max_len)
    }

    /// Concatenated text of all non-special ids.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        Ok(self.decode_segments(ids)?.concat())
    }

    /// Text between separators: `[CLS] q [SEP] c [SEP]` yields `[q, c]`.
    pub fn decode_segments(&self, ids: &[u32]) -> Result<Vec<String>, TokenizerError> {
        let mut segments = Vec::new();
        let mut cur: Vec<u8> = Vec::new();
        let mut open = false;
        for &id in ids {
            if id as usize >= self.len() {
                return Err(TokenizerError::IdOutOfRange { id, len: self.len() });
            }
            match id {
                SEP => {
                    segments.push(String::from_utf8_lossy(&cur).into_owned());
                    cur.clear();
                    open = false;
                }
                id if Self::is_special(id) => {}
                id => {
                    cur.extend_from_slice(self.token_bytes(id));
                    open = true;
                }
            }
        }
        if open {
            segments.push(String::from_utf8_lossy(&cur).into_owned());
        }
        Ok(segments)
    }

    /// Plain-text vocabulary: every token as `token <id> <hex bytes>`, then the
    /// ordered merge list as `merge <left id> <right id>`.
    pub fn write<W: Write>(&self, mut w: W, header: Option<&ArtifactHeader>) -> io::Result<()> {
        if let Some(h) = header {
            writeln!(w, "{h}")?;
        }
        writeln!(w, "{VOCAB_MAGIC}")?;
        for (i, name) in SPECIAL_TOKENS.iter().enumerate() {
            writeln!(w, "special {i} {name}")?;
        }
        for (i, bytes) in self.tokens.iter().enumerate() {
            writeln!(w, "token {} {}", i + NUM_SPECIAL, hex::encode(bytes))?;
        }
        for (l, r) in &self.merges {
            writeln!(w, "merge {l} {r}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, header: Option<&ArtifactHeader>) -> Result<(), TokenizerError> {
        let mut buf = Vec::new();
        self.write(&mut buf, header)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Parse a vocabulary file. Tokens are rebuilt from the merge list and
    /// checked against the token table.
    pub fn parse(text: &str) -> Result<Self, TokenizerError> {
        let mut lines = text.lines().enumerate().skip_while(|(_, l)| l.starts_with('#'));
        match lines.next() {
            Some((_, VOCAB_MAGIC)) => {}
            _ => {
                return Err(TokenizerError::Format {
                    line: text.lines().take_while(|l| l.starts_with('#')).count() + 1,
                    message: "missing vocabulary magic line".into(),
                })
            }
        }
        let mut table: Vec<(usize, u32, Vec<u8>)> = Vec::new();
        let mut merges = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let bad = |message: String| TokenizerError::Format { line: line_no, message };
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            let num = |s: &str| s.parse::<u32>().map_err(|e| bad(format!("{s:?}: {e}")));
            match parts.as_slice() {
                ["special", id, name] => {
                    let id = num(id)? as usize;
                    if SPECIAL_TOKENS.get(id) != Some(name) {
                        return Err(bad(format!("special token {id} must be {:?}", SPECIAL_TOKENS.get(id))));
                    }
                }
                ["token", id, hexed] => {
                    let bytes = hex::decode(hexed).map_err(|e| bad(e.to_string()))?;
                    table.push((line_no, num(id)?, bytes));
                }
                ["merge", l, r] => merges.push((line_no, num(l)?, num(r)?)),
                _ => return Err(bad(format!("unrecognized line {line:?}"))),
            }
        }
        let mut vocab = Self::base();
        for (line, l, r) in merges {
            if l as usize >= vocab.len() || r as usize >= vocab.len() || Self::is_special(l) || Self::is_special(r) {
                return Err(TokenizerError::Format {
                    line,
                    message: format!("merge ({l}, {r}) refers to an unknown token"),
                });
            }
            vocab.push_merge((l, r));
        }
        if table.len() != vocab.tokens.len() {
            return Err(TokenizerError::Format {
                line: 0,
                message: format!("{} tokens listed, merges imply {}", table.len(), vocab.tokens.len()),
            });
        }
        for (line, id, bytes) in table {
            let ok = (id as usize)
                .checked_sub(NUM_SPECIAL)
                .and_then(|i| vocab.tokens.get(i))
                .is_some_and(|t| *t == bytes);
            if !ok {
                return Err(TokenizerError::Format {
                    line,
                    message: format!("token {id} does not match the merge list"),
                });
            }
        }
        Ok(vocab)
    }
}

fn pad(mut ids: Vec<u32>, max_len: usize) -> EncodedSequence {
    let content = ids.len();
    ids.resize(max_len, PAD);
    let mut attention_mask = vec![1u8; content];
    attention_mask.resize(max_len, 0);
    EncodedSequence { ids, attention_mask }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> Vocabulary {
        Vocabulary::train(
            &[
                "returns the value of the field",
                "sets the value of the status field",
                "func SetStatus(v string) { s.Status = v }",
            ],
            320,
        )
        .unwrap()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let v = Vocabulary::train(&["aaab aaab"], MIN_VOCAB + 1).unwrap();
        let a = BYTE_BASE + u32::from(b'a');
        assert_eq!(v.merges(), &[(a, a)]);
        assert_eq!(v.len(), MIN_VOCAB + 1);
    }

    #[test]
    fn single_character_corpus_has_no_merges() {
        let v = Vocabulary::train(&["a"], 1000).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), MIN_VOCAB);
    }

    #[test]
    fn training_errors() {
        assert!(matches!(Vocabulary::train::<&str>(&[], 1000), Err(TokenizerError::EmptyCorpus)));
        assert!(matches!(Vocabulary::train(&[""], 1000), Err(TokenizerError::EmptyCorpus)));
        assert!(matches!(Vocabulary::train(&["ab"], MIN_VOCAB), Err(TokenizerError::VocabTooSmall(_))));
    }

    #[test]
    fn retraining_is_deterministic() {
        assert_eq!(small().merges(), small().merges());
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" each occur twice; (a, b) sorts first
        let v = Vocabulary::train(&["cd", "ab", "cd", "ab"], MIN_VOCAB + 1).unwrap();
        let (l, r) = v.merges()[0];
        assert_eq!(v.token_str(l).unwrap() + &v.token_str(r).unwrap(), "ab");
    }

    #[test]
    fn empty_pair_layout() {
        let v = small();
        let e = v.encode_pair("", "", 8);
        assert_eq!(e.ids, vec![CLS, SEP, SEP, PAD, PAD, PAD, PAD, PAD]);
        assert_eq!(e.attention_mask, vec![1, 1, 1, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn pair_round_trips_without_truncation() {
        let v = small();
        let e = v.encode_pair("sets the status", "func SetStatus() {}", DEFAULT_MAX_LEN);
        assert_eq!(e.len(), DEFAULT_MAX_LEN);
        assert_eq!(e.ids[0], CLS);
        assert_eq!(
            v.decode_segments(&e.ids).unwrap(),
            vec!["sets the status".to_string(), "func SetStatus() {}".to_string()]
        );
    }

    #[test]
    fn overlong_code_is_truncated_first() {
        let v = small();
        let query = "returns the value";
        let q_len = v.tokenize(query).len();
        let code = "x = 1; ".repeat(200);
        let e = v.encode_pair(query, &code, 64);
        assert_eq!(e.len(), 64);
        assert_eq!(e.content_len(), 64);
        assert_eq!(&e.ids[1..1 + q_len], v.tokenize(query).as_slice());
        assert_eq!(e.ids[1 + q_len], SEP);
        assert_eq!(*e.ids.last().unwrap(), SEP);
        // once the code is gone the query tail goes
        let e = v.encode_pair(&"the value ".repeat(100), "code", 16);
        assert_eq!(e.content_len(), 16);
        assert_eq!(&e.ids[14..], &[SEP, SEP]);
    }

    #[test]
    fn decode_edge_cases() {
        let v = small();
        assert_eq!(v.decode(&[PAD; 10]).unwrap(), "");
        let mut ids = vec![CLS, MASK];
        ids.extend(v.tokenize("the field"));
        ids.extend([UNK, SEP, PAD]);
        assert_eq!(v.decode(&ids).unwrap(), "the field");
        assert!(matches!(
            v.decode(&[v.len() as u32]),
            Err(TokenizerError::IdOutOfRange { .. })
        ));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = small();
        let mut buf = Vec::new();
        v.write(&mut buf, Some(&ArtifactHeader::new("x", 0))).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(Vocabulary::parse(&text).unwrap(), v);
        let broken = text.replacen("merge ", "merge 9999", 1);
        assert!(Vocabulary::parse(&broken).is_err());
    }

    proptest! {
        #[test]
        fn text_round_trips(s in "\\PC{0,60}") {
            let v = small();
            let e = v.encode_text(&s, 512);
            prop_assert_eq!(e.ids[0], CLS);
            prop_assert_eq!(v.decode(&e.ids).unwrap(), s);
        }

        #[test]
        fn never_exceeds_max_len(q in "\\PC{0,80}", c in "\\PC{0,200}", max_len in 3usize..64) {
            let v = small();
            let e = v.encode_pair(&q, &c, max_len);
            prop_assert_eq!(e.len(), max_len);
            prop_assert_eq!(e.ids[0], CLS);
            prop_assert_eq!(e.ids.iter().filter(|&&i| i == SEP).count(), 2);
        }
    }
}
