//! Byte-level BPE tokenizer compatible with the CLIP text vocabulary.
//!
//! Text is lowercased and split into words with the CLIP word regex; every
//! word is mapped to byte symbols, the last one tagged with `</w>`, and the
//! merge table is applied lowest-rank-first. Marker strings are not given
//! special treatment, so ordinary text can never produce the start/end
//! tokens that padding relies on.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use regex::Regex;

use crate::error::{Error, IoContext, Result};

const BUNDLED_VOCAB: &str = include_str!("../../assets/bpe_simple_vocab_16e6.txt");

/// Size of the CLIP vocabulary including both marker tokens.
pub const VOCAB_SIZE: usize = 49408;
const N_MERGES: usize = VOCAB_SIZE - 2 * 256 - 2;

/// Token ids of one text, without start/end markers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

pub struct Tokenizer {
    byte_symbol: [char; 256],
    symbol_byte: HashMap<char, u8>,
    ranks: HashMap<(String, String), usize>,
    encoder: HashMap<String, u32>,
    decoder: Vec<String>,
    word_split: Regex,
    cache: Mutex<HashMap<String, Vec<u32>>>,
}

impl std::fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tokenizer")
            .field("vocab", &self.decoder.len())
            .finish()
    }
}

/// GPT-2 style reversible byte → printable character table.
fn byte_symbols() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut next_extra = 0u32;
    for b in 0..=255u8 {
        let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        table[b as usize] = if printable {
            char::from(b)
        } else {
            let c = char::from_u32(256 + next_extra).expect("valid code point");
            next_extra += 1;
            c
        };
    }
    table
}

/// Bytes in vocabulary order: the printable ranges first, then the rest.
fn byte_order() -> Vec<u8> {
    let printable = |b: &u8| matches!(*b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
    let mut order: Vec<u8> = (0..=255u8).filter(printable).collect();
    order.extend((0..=255u8).filter(|b| !printable(b)));
    order
}

impl Tokenizer {
    /// The tokenizer over the vocabulary bundled with the crate.
    pub fn bundled() -> Arc<Tokenizer> {
        static CELL: OnceLock<Arc<Tokenizer>> = OnceLock::new();
        CELL.get_or_init(|| {
            Arc::new(Tokenizer::from_merges(BUNDLED_VOCAB).expect("bundled vocabulary parses"))
        })
        .clone()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::from_merges(&text)
    }

    /// Builds the tokenizer from the merges file text (one header line, then
    /// one `first second` pair per line).
    pub fn from_merges(text: &str) -> Result<Self> {
        let byte_symbol = byte_symbols();
        let symbol_byte = byte_symbol
            .iter()
            .enumerate()
            .map(|(b, c)| (*c, b as u8))
            .collect();

        let mut decoder: Vec<String> = Vec::with_capacity(VOCAB_SIZE);
        let order = byte_order();
        for b in &order {
            decoder.push(byte_symbol[*b as usize].to_string());
        }
        for b in &order {
            decoder.push(format!("{}</w>", byte_symbol[*b as usize]));
        }

        let mut ranks = HashMap::with_capacity(N_MERGES);
        for (rank, line) in text.lines().skip(1).take(N_MERGES).enumerate() {
            let mut parts = line.split_whitespace();
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Config(format!("malformed merge rule on line {}: {line:?}", rank + 2)));
            };
            decoder.push(format!("{a}{b}"));
            ranks.insert((a.to_owned(), b.to_owned()), rank);
        }
        if ranks.len() != N_MERGES {
            return Err(Error::Config(format!(
                "vocabulary has {} merge rules, expected {N_MERGES}",
                ranks.len()
            )));
        }
        decoder.push("<|startoftext|>".into());
        decoder.push("<|endoftext|>".into());
        let encoder = decoder
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();

        let word_split = Regex::new(r"'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+")
            .expect("static regex");
        Ok(Self {
            byte_symbol,
            symbol_byte,
            ranks,
            encoder,
            decoder,
            word_split,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn start_of_text(&self) -> u32 {
        VOCAB_SIZE as u32 - 2
    }

    pub fn end_of_text(&self) -> u32 {
        VOCAB_SIZE as u32 - 1
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    /// Lowercased words in the order the encoder sees them.
    pub fn words<'a>(&'a self, lowered: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.word_split.find_iter(lowered).map(|m| m.as_str())
    }

    fn bpe(&self, word: &str) -> Vec<u32> {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(word) {
            return hit.clone();
        }
        let mut symbols: Vec<String> = word
            .bytes()
            .map(|b| self.byte_symbol[b as usize].to_string())
            .collect();
        if let Some(last) = symbols.last_mut() {
            last.push_str("</w>");
        }
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|r| (*r, p)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, p)| (p[0].clone(), p[1].clone()));
            let Some((a, b)) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        let ids: Vec<u32> = symbols
            .iter()
            .map(|s| *self.encoder.get(s).expect("merged symbols are in the vocabulary"))
            .collect();
        self.cache
            .lock()
            .expect("cache lock")
            .insert(word.to_owned(), ids.clone());
        ids
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let lowered = text.to_lowercase();
        let mut token_ids = Vec::new();
        for word in self.words(&lowered) {
            token_ids.extend(self.bpe(word));
        }
        TokenSequence { token_ids }
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }

    /// Inverse of [`Tokenizer::tokenize`] up to normalization: lowercase
    /// text, each word followed by a single space.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for id in ids {
            let Some(sym) = self.decoder.get(*id as usize) else {
                continue;
            };
            if *id >= self.start_of_text() {
                bytes.extend(sym.as_bytes());
                continue;
            }
            let (body, end_of_word) = match sym.strip_suffix("</w>") {
                Some(body) => (body, true),
                None => (sym.as_str(), false),
            };
            bytes.extend(body.chars().map(|c| self.symbol_byte[&c]));
            if end_of_word {
                bytes.push(b' ');
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// The normal form that [`Tokenizer::detokenize`] reproduces.
    pub fn normalize(&self, text: &str) -> String {
        let lowered = text.to_lowercase();
        self.words(&lowered).map(|w| format!("{w} ")).collect()
    }
}

/// Token count under the bundled conditioning tokenizer.
pub fn count_tokens(text: &str) -> usize {
    Tokenizer::bundled().count_tokens(text)
}
