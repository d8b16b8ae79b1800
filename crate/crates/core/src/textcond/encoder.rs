use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use candle_core::{Device, Tensor};

use super::{PositionalMode, TextEncoder, Tokenizer, Window, WINDOW_LEN};
use crate::error::{Error, Result};

/// Frozen stand-in for a pretrained text encoder: a seeded random token
/// table plus sinusoidal positions, followed by a causal running mean so
/// each row sees the tokens before it within its own window.
pub struct ToyTextEncoder {
    tokenizer: Arc<Tokenizer>,
    table: Vec<f32>,
    d_embed: usize,
    mode: PositionalMode,
    id: String,
}

impl ToyTextEncoder {
    pub fn new(tokenizer: Arc<Tokenizer>, d_embed: usize, mode: PositionalMode, seed: u64) -> Self {
        let vocab = tokenizer.vocab_size();
        let mut rng = crate::rng::stream(seed, "text-encoder", d_embed as u64);
        let table = crate::rng::normal_vec_f32(&mut rng, vocab * d_embed);
        Self {
            tokenizer,
            table,
            d_embed,
            mode,
            id: format!("toy-text-encoder:seed={seed}:d={d_embed}:{mode:?}"),
        }
    }

    pub fn load(path: &Path, tokenizer: Arc<Tokenizer>, mode: PositionalMode) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        let t = tensors
            .get("token_embedding")
            .ok_or_else(|| Error::Checkpoint(format!("{}: no token_embedding tensor", path.display())))?;
        let (vocab, d_embed) = t.dims2()?;
        if vocab != tokenizer.vocab_size() {
            return Err(Error::Checkpoint(format!(
                "{}: table has {vocab} rows, vocabulary has {}",
                path.display(),
                tokenizer.vocab_size()
            )));
        }
        let table = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
        Ok(Self {
            tokenizer,
            table,
            d_embed,
            mode,
            id: format!("toy-text-encoder:file={}:{mode:?}", path.display()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let vocab = self.table.len() / self.d_embed;
        let t = Tensor::from_vec(self.table.clone(), (vocab, self.d_embed), &Device::Cpu)?;
        let map: HashMap<String, Tensor> = [("token_embedding".to_string(), t)].into();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    fn positional(&self, pos: usize, out: &mut [f32]) {
        let d = self.d_embed;
        for (k, o) in out.iter_mut().enumerate() {
            let freq = 10000f64.powf(-((k / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            *o = if k % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
}

impl TextEncoder for ToyTextEncoder {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn d_embed(&self) -> usize {
        self.d_embed
    }

    fn positional_mode(&self) -> PositionalMode {
        self.mode
    }

    fn embed_window(&self, window: &Window, window_index: usize) -> Result<Tensor> {
        let d = self.d_embed;
        let mut out = vec![0f32; WINDOW_LEN * d];
        let mut pos = vec![0f32; d];
        let mut running = vec![0f64; d];
        for (i, id) in window.ids.iter().enumerate() {
            let id = *id as usize;
            let row = self.table.get(id * d..(id + 1) * d).ok_or_else(|| {
                Error::InvalidArgument(format!("token id {id} outside the vocabulary"))
            })?;
            self.positional(self.mode.position(window_index, i), &mut pos);
            let dst = &mut out[i * d..(i + 1) * d];
            for k in 0..d {
                let h = row[k] + pos[k];
                running[k] += h as f64;
                dst[k] = 0.5 * (h + (running[k] / (i + 1) as f64) as f32);
            }
        }
        Ok(Tensor::from_vec(out, (WINDOW_LEN, d), &Device::Cpu)?)
    }

    fn id(&self) -> String {
        self.id.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saved_table_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.safetensors");
        let a = ToyTextEncoder::new(Tokenizer::bundled(), 8, PositionalMode::Standard, 5);
        a.save(&path).unwrap();
        let b = ToyTextEncoder::load(&path, Tokenizer::bundled(), PositionalMode::Standard).unwrap();
        let w = Window::empty(Tokenizer::bundled().end_of_text());
        assert_eq!(
            a.embed_window(&w, 1).unwrap().to_vec2::<f32>().unwrap(),
            b.embed_window(&w, 1).unwrap().to_vec2::<f32>().unwrap()
        );
    }

    #[test]
    fn later_tokens_do_not_change_earlier_rows() {
        let enc = ToyTextEncoder::new(Tokenizer::bundled(), 8, PositionalMode::Standard, 0);
        let mut a = Window::empty(enc.tokenizer().end_of_text());
        a.ids[0] = 100;
        a.ids[1] = 200;
        let mut b = a.clone();
        b.ids[1] = 300;
        let ea = enc.embed_window(&a, 0).unwrap().to_vec2::<f32>().unwrap();
        let eb = enc.embed_window(&b, 0).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(ea[0], eb[0]);
        assert_ne!(ea[1], eb[1]);
    }
}
