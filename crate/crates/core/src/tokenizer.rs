//! WordPiece-style subword vocabulary and BERT-style sequence encoding.
//!
//! Layout of every vocabulary: the five special tokens at ids 0..5, then 256
//! reserved byte pieces `<0x00>`..`<0xFF>`, then learned pieces. Pieces that
//! continue a word carry the `##` prefix; a piece starting with `##` is never
//! word-initial.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();
pub const NUM_BYTE_PIECES: usize = 256;
/// Smallest legal vocabulary: specials plus the byte pieces.
pub const MIN_VOCAB_SIZE: usize = NUM_SPECIAL + NUM_BYTE_PIECES;
pub const CONTINUATION: &str = "##";

/// Identifier of the normalization applied before segmentation.
pub const NORMALIZATION: &str = "nfc+lowercase+collapse-whitespace";

/// NFC, lowercase, and collapse runs of whitespace to single spaces.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    let lower = nfc.to_lowercase();
    let mut out = String::with_capacity(lower.len());
    for word in lower.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

fn byte_piece(b: u8) -> String {
    format!("<0x{b:02X}>")
}

fn parse_byte_piece(p: &str) -> Option<u8> {
    let hex = p.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIAL
}

/// Token-id sequence padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    /// Number of non-PAD ids, CLS and SEP included.
    pub original_length: usize,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The CLS … SEP prefix without padding.
    pub fn active_ids(&self) -> &[u32] {
        &self.ids[..self.original_length]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered piece list (line order = id).
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        if pieces.len() < MIN_VOCAB_SIZE {
            return Err(Error::Input(format!(
                "vocabulary has {} pieces, needs at least {MIN_VOCAB_SIZE}",
                pieces.len()
            )));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if pieces[i] != *s {
                return Err(Error::Input(format!(
                    "vocabulary id {i} must be {s}, found {:?}",
                    pieces[i]
                )));
            }
        }
        for b in 0..NUM_BYTE_PIECES {
            let expected = byte_piece(b as u8);
            if pieces[NUM_SPECIAL + b] != expected {
                return Err(Error::Input(format!(
                    "vocabulary id {} must be {expected}",
                    NUM_SPECIAL + b
                )));
            }
        }
        let mut index = HashMap::with_capacity(pieces.len());
        let mut max_piece_chars = 1;
        for (id, p) in pieces.iter().enumerate() {
            if p.is_empty() || p.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("invalid piece {p:?} at id {id}")));
            }
            if index.insert(p.clone(), id as u32).is_some() {
                return Err(Error::Input(format!("duplicate piece {p:?} at id {id}")));
            }
            if id >= MIN_VOCAB_SIZE {
                let body = p.strip_prefix(CONTINUATION).unwrap_or(p);
                max_piece_chars = max_piece_chars.max(body.chars().count());
            }
        }
        Ok(Vocabulary {
            pieces,
            index,
            max_piece_chars,
        })
    }

    fn base_pieces() -> Vec<String> {
        SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain((0..=255u8).map(byte_piece))
            .collect()
    }

    /// Learns pieces from `documents` by greedy frequency merges.
    ///
    /// Every character seen at least `min_freq` times enters as a piece (in
    /// word-initial and `##` form, as observed). Then the most frequent
    /// adjacent pair is merged repeatedly, ties broken by the smaller pair of
    /// piece strings, until `target_size` is reached, no pair occurs
    /// `min_freq` times, or no pairs remain.
    pub fn build<'a, I>(documents: I, target_size: usize, min_freq: u64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if target_size < MIN_VOCAB_SIZE {
            return Err(Error::Input(format!(
                "target vocabulary size {target_size} below minimum {MIN_VOCAB_SIZE}"
            )));
        }
        let min_freq = min_freq.max(1);
        let mut word_counts: HashMap<String, u64> = HashMap::new();
        for doc in documents {
            for w in normalize(doc).split(' ').filter(|w| !w.is_empty()) {
                *word_counts.entry(w.to_string()).or_default() += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }

        // alphabet
        let mut char_counts: HashMap<String, u64> = HashMap::new();
        for (w, &c) in &word_counts {
            for (i, ch) in w.chars().enumerate() {
                let p = if i == 0 {
                    ch.to_string()
                } else {
                    format!("{CONTINUATION}{ch}")
                };
                *char_counts.entry(p).or_default() += c;
            }
        }
        let mut alphabet: Vec<String> = char_counts
            .into_iter()
            .filter(|(p, c)| *c >= min_freq && !(p.starts_with(CONTINUATION) && p.len() == 2))
            .map(|(p, _)| p)
            .collect();
        alphabet.sort();

        let mut pieces = Self::base_pieces();
        let mut index: HashMap<String, u32> = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        for p in alphabet {
            if pieces.len() >= target_size {
                break;
            }
            if !index.contains_key(&p) {
                index.insert(p.clone(), pieces.len() as u32);
                pieces.push(p);
            }
        }

        // words as piece-id sequences; words with filtered characters are
        // left out of the merge statistics
        let mut words: Vec<(Vec<u32>, u64)> = Vec::new();
        let mut sorted_words: Vec<_> = word_counts.into_iter().collect();
        sorted_words.sort();
        'words: for (w, c) in sorted_words {
            let mut seq = Vec::new();
            for (i, ch) in w.chars().enumerate() {
                let p = if i == 0 {
                    ch.to_string()
                } else {
                    format!("{CONTINUATION}{ch}")
                };
                match index.get(&p) {
                    Some(&id) => seq.push(id),
                    None => continue 'words,
                }
            }
            if seq.len() > 1 {
                words.push((seq, c));
            }
        }

        while pieces.len() < target_size {
            let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (seq, c) in &words {
                for w in seq.windows(2) {
                    *pair_counts.entry((w[0], w[1])).or_default() += c;
                }
            }
            let best = pair_counts
                .into_iter()
                .filter(|&(_, c)| c >= min_freq)
                .max_by(|(pa, ca), (pb, cb)| {
                    ca.cmp(cb).then_with(|| {
                        // smaller strings win ties, so compare reversed
                        let ka = (&pieces[pa.0 as usize], &pieces[pa.1 as usize]);
                        let kb = (&pieces[pb.0 as usize], &pieces[pb.1 as usize]);
                        kb.cmp(&ka)
                    })
                });
            let Some(((a, b), _)) = best else { break };
            let merged = format!(
                "{}{}",
                pieces[a as usize],
                pieces[b as usize].trim_start_matches(CONTINUATION)
            );
            let new_id = match index.get(&merged) {
                Some(&id) => id,
                None => {
                    let id = pieces.len() as u32;
                    index.insert(merged.clone(), id);
                    pieces.push(merged);
                    id
                }
            };
            for (seq, _) in words.iter_mut() {
                let mut out = Vec::with_capacity(seq.len());
                let mut i = 0;
                while i < seq.len() {
                    if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
                        out.push(new_id);
                        i += 2;
                    } else {
                        out.push(seq[i]);
                        i += 1;
                    }
                }
                *seq = out;
            }
            words.retain(|(seq, _)| seq.len() > 1);
        }
        Self::from_pieces(pieces)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Ids of learned (non-special, non-byte) pieces.
    pub fn learned_ids(&self) -> std::ops::Range<u32> {
        MIN_VOCAB_SIZE as u32..self.pieces.len() as u32
    }

    /// Greedy longest-match segmentation of one normalized word. Runs of
    /// characters no piece covers become a single UNK.
    fn segment_word(&self, word: &str, out: &mut Vec<u32>) {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let n_chars = bounds.len() - 1;
        let mut start = 0;
        let mut in_unknown = false;
        let mut key = String::new();
        while start < n_chars {
            let mut found = None;
            let longest = (start + self.max_piece_chars).min(n_chars);
            for end in (start + 1..=longest).rev() {
                let body = &word[bounds[start]..bounds[end]];
                key.clear();
                if start > 0 {
                    key.push_str(CONTINUATION);
                } else if body.starts_with(CONTINUATION) {
                    continue;
                }
                key.push_str(body);
                if let Some(&id) = self.index.get(key.as_str()) {
                    if id as usize >= MIN_VOCAB_SIZE {
                        found = Some((id, end));
                        break;
                    }
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                    in_unknown = false;
                }
                None => {
                    if !in_unknown {
                        out.push(UNK);
                        in_unknown = true;
                    }
                    start += 1;
                }
            }
        }
    }

    /// Pieces of `text` without specials or padding.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in normalize(text).split(' ').filter(|w| !w.is_empty()) {
            self.segment_word(word, &mut out);
        }
        out
    }

    /// `[CLS] pieces… [SEP] [PAD]…` of exactly `max_len` ids. Content past
    /// `max_len - 2` pieces is dropped from the tail.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<EncodedSequence> {
        if max_len < 3 {
            return Err(Error::Input(format!("max_len must be at least 3, got {max_len}")));
        }
        let mut content = self.tokenize(text);
        content.truncate(max_len - 2);
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend_from_slice(&content);
        ids.push(SEP);
        let original_length = ids.len();
        ids.resize(max_len, PAD);
        let attention_mask = ids.iter().map(|&i| u8::from(i != PAD)).collect();
        Ok(EncodedSequence {
            ids,
            attention_mask,
            original_length,
        })
    }

    /// Joins pieces back into text; specials are dropped and `##` pieces
    /// glue onto the preceding word.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, out: &mut String| {
            if !bytes.is_empty() {
                out.push_str(&String::from_utf8_lossy(bytes));
                bytes.clear();
            }
        };
        for &id in ids {
            let piece = self.piece(id).ok_or_else(|| {
                Error::Input(format!("token id {id} out of range for vocabulary of {}", self.len()))
            })?;
            if is_special(id) {
                continue;
            }
            if let Some(b) = parse_byte_piece(piece).filter(|_| (id as usize) < MIN_VOCAB_SIZE) {
                bytes.push(b);
                continue;
            }
            flush(&mut bytes, &mut out);
            match piece.strip_prefix(CONTINUATION) {
                Some(rest) => out.push_str(rest),
                None => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(piece);
                }
            }
        }
        flush(&mut bytes, &mut out);
        Ok(out)
    }

    /// One piece per line, line number = id, LF line endings.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.pieces.len() * 8);
        for p in &self.pieces {
            let _ = writeln!(s, "{p}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let pieces: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        Self::from_pieces(pieces)
    }

    /// SHA-256 of the vocabulary file contents.
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// SHA-256 of raw bytes, as used for vocabulary files.
pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}
