//! Byte-level BPE over GPT-2 style `vocab.json` / `merges.txt` pairs, and the
//! fixed-length token windows fed to the model.

use std::collections::HashMap;

use fancy_regex::Regex;
use thiserror::Error;

/// Vocabulary size of the StarCoder tokenizer.
pub const STARCODER_VOCAB_SIZE: usize = 49_152;
pub const END_OF_TEXT: &str = "<|endoftext|>";

const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("malformed vocab.json: {0}")]
    Vocab(String),
    #[error("malformed merges.txt line {line}: {reason}")]
    Merges { line: usize, reason: String },
    #[error("vocabulary has {found} entries, expected {expected}")]
    SizeMismatch { found: usize, expected: usize },
    #[error("vocabulary lacks the padding token {0:?}")]
    MissingPad(String),
}

#[derive(Debug, Clone)]
pub struct VocabOptions {
    /// Accept a vocabulary whose size differs from [`STARCODER_VOCAB_SIZE`].
    pub allow_size_mismatch: bool,
    /// Token reused as padding.
    pub pad_token: String,
}

impl Default for VocabOptions {
    fn default() -> Self {
        Self {
            allow_size_mismatch: false,
            pad_token: END_OF_TEXT.to_string(),
        }
    }
}

/// The 256-entry byte to printable-character table of byte-level BPE.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        table[b as usize] = if printable {
            char::from(b)
        } else {
            extra += 1;
            char::from_u32(255 + extra).unwrap()
        };
    }
    table
}

#[derive(Debug, Clone)]
pub struct BpeVocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), u32>,
    byte_map: [char; 256],
    pad_id: u32,
    pretokenizer: Regex,
}

impl BpeVocabulary {
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn pad_id(&self) -> u32 {
        self.pad_id
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn byte_map(&self) -> &[char; 256] {
        &self.byte_map
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Token IDs for `text`. Every input encodes; no ID is out of range.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in self.pretokenizer.find_iter(text) {
            // The pattern has no catastrophic constructs; a backtrack-limit
            // error here would be a bug in fancy-regex.
            let piece = piece.expect("pre-tokenizer match").as_str();
            let symbols: Vec<String> = piece
                .bytes()
                .map(|b| self.byte_map[b as usize].to_string())
                .collect();
            for sym in self.bpe(symbols) {
                out.push(self.token_to_id[&sym]);
            }
        }
        out
    }

    /// Repeatedly merges the lowest-ranked adjacent pair (every occurrence,
    /// left to right) until no ranked pair remains.
    fn bpe(&self, mut word: Vec<String>) -> Vec<String> {
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, w)| (w[0].clone(), w[1].clone()));
            let Some((first, second)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut word[i]));
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }
}

/// Loads a `vocab.json` + `merges.txt` pair.
pub fn load_vocabulary(
    vocab_file: &[u8],
    merges_file: &[u8],
    opts: &VocabOptions,
) -> Result<BpeVocabulary, TokenizerError> {
    let token_to_id: HashMap<String, u32> =
        serde_json::from_slice(vocab_file).map_err(|e| TokenizerError::Vocab(e.to_string()))?;
    let size = token_to_id.len();
    if size != STARCODER_VOCAB_SIZE && !opts.allow_size_mismatch {
        return Err(TokenizerError::SizeMismatch {
            found: size,
            expected: STARCODER_VOCAB_SIZE,
        });
    }
    let mut id_to_token = vec![None; size];
    for (tok, &id) in &token_to_id {
        let slot = id_to_token
            .get_mut(id as usize)
            .ok_or_else(|| TokenizerError::Vocab(format!("id {id} of {tok:?} outside 0..{size}")))?;
        if slot.replace(tok.clone()).is_some() {
            return Err(TokenizerError::Vocab(format!("id {id} assigned twice")));
        }
    }
    let id_to_token: Vec<String> = id_to_token.into_iter().map(Option::unwrap).collect();

    let byte_map = bytes_to_unicode();
    if let Some(c) = byte_map.iter().find(|c| !token_to_id.contains_key(&c.to_string())) {
        return Err(TokenizerError::Vocab(format!("byte symbol {c:?} missing")));
    }

    let text = std::str::from_utf8(merges_file).map_err(|e| TokenizerError::Merges {
        line: 0,
        reason: e.to_string(),
    })?;
    let mut merges = Vec::new();
    let mut ranks = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() || (lineno == 0 && line.starts_with("#version")) {
            continue;
        }
        let bad = |reason: String| TokenizerError::Merges { line: lineno + 1, reason };
        let (a, b) = line
            .split_once(' ')
            .filter(|(a, b)| !a.is_empty() && !b.is_empty() && !b.contains(' '))
            .ok_or_else(|| bad("expected two space-separated tokens".into()))?;
        for part in [a, b, &format!("{a}{b}")] {
            if !token_to_id.contains_key(part) {
                return Err(bad(format!("{part:?} not in vocabulary")));
            }
        }
        let pair = (a.to_string(), b.to_string());
        if ranks.insert(pair.clone(), merges.len() as u32).is_some() {
            return Err(bad("duplicate merge rule".into()));
        }
        merges.push(pair);
    }

    let pad_id = *token_to_id
        .get(&opts.pad_token)
        .ok_or_else(|| TokenizerError::MissingPad(opts.pad_token.clone()))?;

    Ok(BpeVocabulary {
        token_to_id,
        id_to_token,
        merges,
        ranks,
        byte_map,
        pad_id,
        pretokenizer: Regex::new(GPT2_PATTERN).expect("valid pattern"),
    })
}

/// Exactly `length` token IDs: the leading tokens, then padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenWindow {
    pub ids: Vec<u32>,
    pub n_real: usize,
}

impl TokenWindow {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn fit_window(ids: &[u32], length: usize, pad_id: u32) -> TokenWindow {
    assert!(length >= 1, "window length must be positive");
    let n_real = ids.len().min(length);
    let mut out = Vec::with_capacity(length);
    out.extend_from_slice(&ids[..n_real]);
    out.resize(length, pad_id);
    TokenWindow { ids: out, n_real }
}
