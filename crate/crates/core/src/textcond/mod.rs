//! Text conditioning: tokenize a caption, split it into fixed 77-token
//! windows, embed each window on its own and stack the results into the
//! context matrix that cross-attention consumes.

mod encoder;
mod tokenizer;

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use encoder::ToyTextEncoder;
pub use tokenizer::{count_tokens, TokenSequence, Tokenizer, VOCAB_SIZE};

use crate::error::{Error, Result};

/// Token slots per window.
pub const WINDOW_LEN: usize = 77;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositionalMode {
    /// Positions continue across windows: row `i` of window `w` sits at `77w + i`.
    #[default]
    Standard,
    /// Experimental: every window reuses positions 0..77.
    Cyclic,
}

impl PositionalMode {
    pub fn position(self, window_index: usize, slot: usize) -> usize {
        match self {
            Self::Standard => window_index * WINDOW_LEN + slot,
            Self::Cyclic => slot,
        }
    }
}

/// One padded window; `mask[i]` is true for real tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub ids: [u32; WINDOW_LEN],
    pub mask: [bool; WINDOW_LEN],
}

impl Window {
    pub fn empty(pad_id: u32) -> Self {
        Self {
            ids: [pad_id; WINDOW_LEN],
            mask: [false; WINDOW_LEN],
        }
    }

    pub fn real_tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.ids.iter().zip(&self.mask).filter(|(_, m)| **m).map(|(id, _)| *id)
    }

    pub fn n_real(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowedTokens {
    pub windows: Vec<Window>,
}

impl WindowedTokens {
    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn unpadded(&self) -> Vec<u32> {
        self.windows.iter().flat_map(|w| w.real_tokens()).collect()
    }
}

/// Fills windows greedily in order; only the last one carries padding.
/// Produces `max(1, ceil(len / 77))` windows.
pub fn window_split(seq: &TokenSequence, max_windows: usize, pad_id: u32) -> Result<WindowedTokens> {
    if max_windows == 0 {
        return Err(Error::InvalidArgument("max_windows must be at least 1".into()));
    }
    let capacity = max_windows * WINDOW_LEN;
    if seq.len() > capacity {
        return Err(Error::OverBudget {
            length: seq.len(),
            capacity,
            excess: seq.len() - capacity,
        });
    }
    let n = seq.len().div_ceil(WINDOW_LEN).max(1);
    let windows = (0..n)
        .map(|w| {
            let mut win = Window::empty(pad_id);
            let chunk = &seq.token_ids[(w * WINDOW_LEN).min(seq.len())..((w + 1) * WINDOW_LEN).min(seq.len())];
            win.ids[..chunk.len()].copy_from_slice(chunk);
            win.mask[..chunk.len()].fill(true);
            win
        })
        .collect();
    Ok(WindowedTokens { windows })
}

/// Embeds a single 77-token window. Implementations must be deterministic
/// and must not depend on any other window.
pub trait TextEncoder: Send + Sync {
    fn tokenizer(&self) -> &Tokenizer;
    fn d_embed(&self) -> usize;
    fn positional_mode(&self) -> PositionalMode;
    /// `(77 × d_embed)` f32 matrix. `window_index` only selects positions.
    fn embed_window(&self, window: &Window, window_index: usize) -> Result<Tensor>;
    /// Stable identifier recorded in run manifests.
    fn id(&self) -> String;
}

/// The `(n_windows·77 × d_embed)` context matrix.
#[derive(Debug, Clone)]
pub struct ConditionContext {
    pub matrix: Tensor,
    pub n_windows: usize,
}

impl ConditionContext {
    pub fn context_len(&self) -> usize {
        self.n_windows * WINDOW_LEN
    }
}

pub fn encode_condition(text: &str, encoder: &dyn TextEncoder, n_windows: usize) -> Result<ConditionContext> {
    let tok = encoder.tokenizer();
    let mut windowed = window_split(&tok.tokenize(text), n_windows, tok.end_of_text())?;
    while windowed.windows.len() < n_windows {
        windowed.windows.push(Window::empty(tok.end_of_text()));
    }
    let rows = windowed
        .windows
        .iter()
        .enumerate()
        .map(|(w, win)| encoder.embed_window(win, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionContext {
        matrix: Tensor::cat(&rows, 0)?,
        n_windows,
    })
}

/// The context of the empty caption. [`Conditioner::null`] caches it.
pub fn null_condition(encoder: &dyn TextEncoder, n_windows: usize) -> Result<ConditionContext> {
    encode_condition("", encoder, n_windows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextCondConfig {
    pub n_windows: usize,
    pub positional_mode: PositionalMode,
    pub d_embed: usize,
    pub seed: u64,
    /// BPE merges file; the bundled CLIP vocabulary when unset.
    pub vocab_path: Option<PathBuf>,
    /// Saved encoder table; a freshly seeded one when unset.
    pub encoder_weights: Option<PathBuf>,
}

impl Default for TextCondConfig {
    fn default() -> Self {
        Self {
            n_windows: 1,
            positional_mode: PositionalMode::Standard,
            d_embed: 64,
            seed: 0,
            vocab_path: None,
            encoder_weights: None,
        }
    }
}

impl TextCondConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.n_windows) {
            return Err(Error::Config(format!("textcond.n_windows must be 1 or 2, got {}", self.n_windows)));
        }
        if self.d_embed == 0 {
            return Err(Error::Config("textcond.d_embed must be positive".into()));
        }
        Ok(())
    }

    pub fn context_len(&self) -> usize {
        self.n_windows * WINDOW_LEN
    }

    pub fn build(&self) -> Result<Conditioner> {
        self.validate()?;
        let tokenizer = match &self.vocab_path {
            Some(p) => Arc::new(Tokenizer::from_file(p)?),
            None => Tokenizer::bundled(),
        };
        let encoder = match &self.encoder_weights {
            Some(p) => ToyTextEncoder::load(p, tokenizer, self.positional_mode)?,
            None => ToyTextEncoder::new(tokenizer, self.d_embed, self.positional_mode, self.seed),
        };
        if encoder.d_embed() != self.d_embed {
            return Err(Error::Config(format!(
                "encoder weights have d_embed {}, config says {}",
                encoder.d_embed(),
                self.d_embed
            )));
        }
        Ok(Conditioner::new(Arc::new(encoder), self.n_windows))
    }
}

/// An encoder bound to a fixed context length, with the null context cached.
#[derive(Clone)]
pub struct Conditioner {
    encoder: Arc<dyn TextEncoder>,
    n_windows: usize,
    null: Arc<OnceLock<ConditionContext>>,
}

impl Conditioner {
    pub fn new(encoder: Arc<dyn TextEncoder>, n_windows: usize) -> Self {
        Self {
            encoder,
            n_windows,
            null: Arc::new(OnceLock::new()),
        }
    }

    pub fn encoder(&self) -> &dyn TextEncoder {
        self.encoder.as_ref()
    }

    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    pub fn context_len(&self) -> usize {
        self.n_windows * WINDOW_LEN
    }

    pub fn d_embed(&self) -> usize {
        self.encoder.d_embed()
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        self.encoder.tokenizer().count_tokens(text)
    }

    pub fn encode(&self, text: &str) -> Result<ConditionContext> {
        encode_condition(text, self.encoder.as_ref(), self.n_windows)
    }

    pub fn null(&self) -> Result<ConditionContext> {
        if let Some(c) = self.null.get() {
            return Ok(c.clone());
        }
        let c = null_condition(self.encoder.as_ref(), self.n_windows)?;
        Ok(self.null.get_or_init(|| c).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(n: usize) -> TokenSequence {
        TokenSequence {
            token_ids: (0..n as u32).map(|i| i % 1000 + 1).collect(),
        }
    }

    fn conditioner(n_windows: usize, mode: PositionalMode) -> Conditioner {
        TextCondConfig {
            n_windows,
            positional_mode: mode,
            d_embed: 16,
            ..Default::default()
        }
        .build()
        .unwrap()
    }

    fn rows(t: &Tensor, start: usize, len: usize) -> Vec<Vec<f32>> {
        t.narrow(0, start, len).unwrap().to_vec2().unwrap()
    }

    #[test]
    fn window_arithmetic() {
        let w = window_split(&seq(154), 2, 0).unwrap();
        assert_eq!(w.n_windows(), 2);
        assert!(w.windows.iter().all(|w| w.n_real() == 77));
        let w = window_split(&seq(35), 1, 0).unwrap();
        assert_eq!(w.n_windows(), 1);
        assert_eq!(WINDOW_LEN - w.windows[0].n_real(), 42);
        match window_split(&seq(155), 2, 0) {
            Err(Error::OverBudget { excess, capacity, .. }) => assert_eq!((excess, capacity), (1, 154)),
            other => panic!("{other:?}"),
        }
        assert_eq!(window_split(&seq(0), 2, 0).unwrap().n_windows(), 1);
    }

    #[test]
    fn caption_of_154_tokens_fills_both_windows() {
        let c = conditioner(2, PositionalMode::Standard);
        let text = vec!["cells"; 154].join(" ");
        assert_eq!(c.count_tokens(&text), 154);
        assert_eq!(c.encode(&text).unwrap().matrix.dims(), &[154, 16]);
        assert!(matches!(c.encode(&format!("{text} cells")), Err(Error::OverBudget { excess: 1, .. })));
    }

    #[test]
    fn two_window_context_stacks_window_embeddings() {
        let c = conditioner(2, PositionalMode::Standard);
        let vocab = ["cells", "tissue", "tumour"];
        let text = (0..120).map(|i| vocab[i % 3]).collect::<Vec<_>>().join(" ");
        assert_eq!(c.count_tokens(&text), 120);
        let tok = c.encoder().tokenizer();
        let windowed = window_split(&tok.tokenize(&text), 2, tok.end_of_text()).unwrap();
        let ctx = c.encode(&text).unwrap();
        for (w, win) in windowed.windows.iter().enumerate() {
            let expect = c.encoder().embed_window(win, w).unwrap().to_vec2::<f32>().unwrap();
            assert_eq!(rows(&ctx.matrix, 77 * w, 77), expect);
        }
    }

    #[test]
    fn null_condition_is_cached_and_distinct() {
        let c = conditioner(1, PositionalMode::Standard);
        let a = c.null().unwrap().matrix.to_vec2::<f32>().unwrap();
        let b = c.null().unwrap().matrix.to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
        assert_eq!(c.null().unwrap().matrix.dims(), &[77, 16]);
        assert_ne!(c.encode("x").unwrap().matrix.to_vec2::<f32>().unwrap(), a);
        assert_eq!(null_condition(c.encoder(), 2).unwrap().matrix.dims(), &[154, 16]);
    }

    #[test]
    fn padding_window_matches_empty_window_embedding() {
        let c = conditioner(2, PositionalMode::Standard);
        let short = c.encode("Invasive carcinoma. Low tumour; Low TIL;").unwrap();
        let empty = c.encoder().embed_window(&Window::empty(c.encoder().tokenizer().end_of_text()), 1).unwrap();
        assert_eq!(rows(&short.matrix, 77, 77), empty.to_vec2::<f32>().unwrap());
        // Pinned: first entry of the padding-only second window under the
        // default seed, d_embed 16.
        let pinned = empty.to_vec2::<f32>().unwrap()[0][0];
        assert_eq!(pinned, c.null().unwrap().matrix.to_vec2::<f32>().unwrap()[77][0]);
    }

    #[test]
    fn cyclic_mode_reuses_positions() {
        assert_eq!(PositionalMode::Cyclic.position(1, 3), 3);
        assert_eq!(PositionalMode::Standard.position(1, 3), 80);
        let c = conditioner(2, PositionalMode::Cyclic);
        let ctx = c.null().unwrap();
        // Every window is padding-only and positions repeat.
        assert_eq!(rows(&ctx.matrix, 0, 77), rows(&ctx.matrix, 77, 77));
        let s = conditioner(2, PositionalMode::Standard).null().unwrap();
        assert_ne!(rows(&s.matrix, 0, 77), rows(&s.matrix, 77, 77));
    }

    #[test]
    fn config_rejects_three_windows() {
        let cfg = TextCondConfig {
            n_windows: 3,
            ..Default::default()
        };
        assert!(cfg.build().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn windows_recover_the_sequence(n in 0usize..=154, max in 1usize..=3) {
            let s = seq(n);
            match window_split(&s, max, 0) {
                Ok(w) => {
                    prop_assert!(w.windows.iter().all(|w| w.ids.len() == WINDOW_LEN));
                    prop_assert_eq!(w.unpadded(), s.token_ids);
                    prop_assert!(w.n_windows() <= max);
                }
                Err(_) => prop_assert!(n > max * WINDOW_LEN),
            }
        }

        #[test]
        fn shape_law_and_locality(
            words in proptest::collection::vec(
                proptest::sample::select(vec!["cell", "nucleus", "stroma", "gland", "fat", "duct"]),
                78..154,
            ),
            replacement in "[a-z]{2,5}",
        ) {
            let c = conditioner(2, PositionalMode::Standard);
            let text = words.join(" ");
            let n = c.count_tokens(&text);
            prop_assume!(n > 77 && n <= 154);
            let a = c.encode(&text).unwrap();
            prop_assert_eq!(a.matrix.dims(), &[154, 16]);
            // Change only tokens that land in the second window.
            let tok = c.encoder().tokenizer();
            let mut ids = tok.tokenize(&text).token_ids;
            let last = ids.len() - 1;
            ids[last] = tok.tokenize(&replacement).token_ids[0];
            let windowed = window_split(&TokenSequence { token_ids: ids }, 2, tok.end_of_text()).unwrap();
            let w0 = c.encoder().embed_window(&windowed.windows[0], 0).unwrap();
            prop_assert_eq!(rows(&a.matrix, 0, 77), w0.to_vec2::<f32>().unwrap());
        }
    }
}
