use serde::{Deserialize, Serialize};

use crate::audio::N_MELS;
use crate::error::{Error, Result};

/// Convolutional front end plus self-attention layers of the audio encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioConfig {
    /// Output channels of each residual block.
    pub channels: Vec<usize>,
    /// `(frequency, time)` stride of each residual block.
    pub strides: Vec<(usize, usize)>,
    /// Transformer layers applied to the `[time, channels]` map.
    pub n_layers: usize,
    pub n_heads: usize,
}

impl AudioConfig {
    /// Width of the audio representation: the last channel count.
    pub fn d_m(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    pub fn d_ffn(&self) -> usize {
        4 * self.d_m()
    }

    /// `(frequency, time)` extent after every block, starting from `(bands, frames)`.
    pub fn output_extent(&self, bands: usize, frames: usize) -> (usize, usize) {
        self.strides
            .iter()
            .fold((bands, frames), |(f, t), &(sf, st)| (f.div_ceil(sf), t.div_ceil(st)))
    }
}

/// Cross-modal attention and where it is applied.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Width of the cross-modal query/key/value projections.
    pub d_cross: usize,
    pub n_heads: usize,
    /// Number of final encoder layers whose input receives the audio summary;
    /// 0 gives the text-only model.
    pub fuse_last_k: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Total width of the per-layer attention projections.
    pub d_attn: usize,
    pub d_ffn: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub vocab_size: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub audio: AudioConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    /// BART-base sized text model with the full audio front end.
    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 768,
            n_heads: 12,
            d_attn: 768,
            d_ffn: 3072,
            n_enc: 6,
            n_dec: 6,
            vocab_size,
            max_source_len: 2048,
            max_target_len: 512,
            audio: AudioConfig {
                channels: vec![128, 128, 256, 256, 256, 256, 256],
                strides: vec![(2, 2), (2, 2), (2, 2), (2, 1), (2, 1), (2, 1), (2, 1)],
                n_layers: 2,
                n_heads: 4,
            },
            fusion: FusionConfig {
                d_cross: 768,
                n_heads: 1,
                fuse_last_k: 2,
            },
        }
    }

    /// Small model for tests and desk-scale experiments.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 2,
            d_attn: 64,
            d_ffn: 128,
            n_enc: 2,
            n_dec: 2,
            vocab_size,
            max_source_len: 128,
            max_target_len: 128,
            audio: AudioConfig {
                channels: vec![16, 16, 32, 32, 32, 32, 32],
                strides: vec![(2, 2), (2, 2), (2, 2), (2, 1), (2, 1), (2, 1), (2, 1)],
                n_layers: 1,
                n_heads: 2,
            },
            fusion: FusionConfig {
                d_cross: 64,
                n_heads: 1,
                fuse_last_k: 1,
            },
        }
    }

    pub fn profile(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(vocab_size)),
            "toy" => Ok(Self::toy(vocab_size)),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected toy or paper)"))),
        }
    }

    /// The same model without audio fusion.
    pub fn text_only(mut self) -> Self {
        self.fusion.fuse_last_k = 0;
        self
    }

    pub fn uses_audio(&self) -> bool {
        self.fusion.fuse_last_k > 0
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_attn", self.d_attn),
            ("d_ffn", self.d_ffn),
            ("n_enc", self.n_enc),
            ("n_dec", self.n_dec),
            ("max_source_len", self.max_source_len),
            ("max_target_len", self.max_target_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if self.d_attn % self.n_heads != 0 {
            return fail(format!("d_attn {} not divisible by {} heads", self.d_attn, self.n_heads));
        }
        if self.vocab_size < crate::text::MIN_VOCAB {
            return fail(format!("vocab_size {} below {}", self.vocab_size, crate::text::MIN_VOCAB));
        }
        if self.fusion.fuse_last_k > self.n_enc {
            return fail(format!(
                "fuse_last_k {} exceeds {} encoder layers",
                self.fusion.fuse_last_k, self.n_enc
            ));
        }
        if !self.uses_audio() {
            return Ok(());
        }
        let a = &self.audio;
        if a.channels.is_empty() || a.channels.len() != a.strides.len() {
            return fail("audio channel and stride lists must be non-empty and of equal length".into());
        }
        if a.channels.contains(&0) || a.strides.iter().any(|&(f, t)| f == 0 || t == 0) {
            return fail("audio channels and strides must be positive".into());
        }
        if a.n_heads == 0 || a.d_m() % a.n_heads != 0 {
            return fail(format!("audio width {} not divisible by {} heads", a.d_m(), a.n_heads));
        }
        let f = &self.fusion;
        if f.n_heads == 0 || f.d_cross == 0 || f.d_cross % f.n_heads != 0 {
            return fail(format!("d_cross {} not divisible by {} heads", f.d_cross, f.n_heads));
        }
        let (bands, _) = a.output_extent(N_MELS, 1);
        if bands != 1 {
            return fail(format!("audio strides leave {bands} frequency rows, expected 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        ModelConfig::paper(50_000).validate().unwrap();
        ModelConfig::toy(512).validate().unwrap();
        ModelConfig::toy(512).text_only().validate().unwrap();
    }

    #[test]
    fn paper_stride_chain() {
        let a = ModelConfig::paper(50_000).audio;
        assert_eq!(a.output_extent(128, 1874), (1, 235));
        assert_eq!(a.d_m(), 256);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::toy(512);
        c.fusion.fuse_last_k = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(512);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(512);
        c.audio.strides.pop();
        assert!(c.validate().is_err());
        assert!(ModelConfig::profile("huge", 512).is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = ModelConfig::toy(300);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
