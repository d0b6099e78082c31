//! Transformer encoder-decoder with audio fusion in its last encoder layers.
//!
//! The encoder input is `token embedding + learned position`. Each of the last
//! `fuse_last_k` encoder layers receives `H + CMA(H, Z_m)` instead of `H`,
//! where `CMA` attends from text positions to the audio representation `Z_m`
//! produced by [`audio_encoder`]. The cross-modal output projection starts at
//! zero, so a freshly initialised model computes exactly the text-only
//! function.

mod audio_encoder;
mod config;
pub mod decode;
mod layers;

use std::path::Path;
use std::rc::Rc;

pub use config::{AudioConfig, FusionConfig, ModelConfig};
pub use decode::DecodeMode;
pub use layers::{AttentionRecord, BatchNormUpdate, Trace};

use audio_encoder::{AudioEncoderIds, AudioRepr};
use layers::{AttentionIds, Builder, DecoderLayerIds, EncoderLayerIds, Fwd, LinearIds};

use crate::audio::{MelSpectrogram, N_MELS};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::{load_params, save_params};
use crate::tensor::ops;
use crate::tensor::{BatchNormStats, Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::text::{EncodedRow, TokenBatch, Vocabulary, PAD};

/// File holding the serialized [`ModelConfig`] inside a checkpoint directory.
pub const CONFIG_FILE: &str = "model.json";

/// Log-mel inputs of a batch, right-padded with the silence floor.
#[derive(Clone, Debug)]
pub struct AudioBatch {
    /// `[B, 128, T]`.
    values: Tensor<f32>,
    frames: Vec<usize>,
}

impl AudioBatch {
    pub fn from_mels(mels: &[&MelSpectrogram]) -> Result<AudioBatch> {
        let longest = mels
            .iter()
            .map(|m| m.n_frames())
            .max()
            .ok_or_else(|| Error::pre("audio_batch", "no spectrograms"))?;
        let mut data = Vec::with_capacity(mels.len() * N_MELS * longest);
        for m in mels {
            if m.n_frames() == longest {
                data.extend_from_slice(m.values().data());
            } else {
                data.extend_from_slice(m.fit_frames(longest).values().data());
            }
        }
        Ok(AudioBatch {
            values: Tensor::new(&[mels.len(), N_MELS, longest], data)?,
            frames: mels.iter().map(|m| m.n_frames()).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.frames.len()
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }
}

/// One training or evaluation pair: encoded lyrics, encoded interpretation and
/// optional audio.
#[derive(Clone, Debug)]
pub struct Example {
    pub source: EncodedRow,
    pub target: EncodedRow,
    pub audio: Option<Rc<MelSpectrogram>>,
}

impl Example {
    pub fn encode(
        vocab: &Vocabulary,
        config: &ModelConfig,
        lyrics: &str,
        interpretation: &str,
        audio: Option<Rc<MelSpectrogram>>,
    ) -> Result<Example> {
        Ok(Example {
            source: vocab.encode_unpadded(lyrics, config.max_source_len)?,
            target: vocab.encode_unpadded(interpretation, config.max_target_len)?,
            audio,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Seq2SeqBatch {
    pub source: TokenBatch,
    pub target: TokenBatch,
    pub audio: Option<AudioBatch>,
}

impl Seq2SeqBatch {
    /// Audio must be present on every example or on none.
    pub fn from_examples(examples: &[&Example]) -> Result<Seq2SeqBatch> {
        if examples.is_empty() {
            return Err(Error::pre("batch", "empty batch"));
        }
        let sources: Vec<EncodedRow> = examples.iter().map(|e| e.source.clone()).collect();
        let targets: Vec<EncodedRow> = examples.iter().map(|e| e.target.clone()).collect();
        let with_audio = examples.iter().filter(|e| e.audio.is_some()).count();
        let audio = match with_audio {
            0 => None,
            n if n == examples.len() => {
                let mels: Vec<&MelSpectrogram> = examples.iter().map(|e| e.audio.as_deref().expect("checked")).collect();
                Some(AudioBatch::from_mels(&mels)?)
            }
            _ => return Err(Error::pre("batch", "audio present on some examples only")),
        };
        Ok(Seq2SeqBatch {
            source: TokenBatch::from_rows(&sources)?,
            target: TokenBatch::from_rows(&targets)?,
            audio,
        })
    }
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    encoder: Vec<EncoderLayerIds>,
    decoder: Vec<DecoderLayerIds>,
    audio: Option<AudioEncoderIds>,
    /// Cross-modal attention for each fused layer, first fused layer first.
    cross: Vec<AttentionIds>,
}

impl Layout {
    fn build(config: &ModelConfig, store: &mut ParamStore<f32>, seed: u64) -> Result<Layout> {
        let c = config;
        let mut b = Builder::new(store, seed);
        // text parameters come first so text-only and fused models with the same
        // seed share them exactly
        let tok_emb = b.normal("embed.tokens", &[c.vocab_size, c.d_model])?;
        let enc_pos = b.normal("embed.enc_positions", &[c.max_source_len, c.d_model])?;
        let dec_pos = b.normal("embed.dec_positions", &[c.max_target_len, c.d_model])?;
        let encoder = (0..c.n_enc)
            .map(|i| EncoderLayerIds::build(&mut b, &format!("enc.layer{i}"), c.d_model, c.d_attn, c.n_heads, c.d_ffn))
            .collect::<Result<_>>()?;
        let decoder = (0..c.n_dec)
            .map(|i| DecoderLayerIds::build(&mut b, &format!("dec.layer{i}"), c.d_model, c.d_attn, c.n_heads, c.d_ffn))
            .collect::<Result<_>>()?;
        let (audio, cross) = if c.uses_audio() {
            let audio = AudioEncoderIds::build(&mut b, "audio", &c.audio)?;
            let first = c.n_enc - c.fusion.fuse_last_k;
            let mut cross = Vec::with_capacity(c.fusion.fuse_last_k);
            for i in first..c.n_enc {
                let prefix = format!("fusion.layer{i}");
                let (d_m, d_x) = (c.audio.d_m(), c.fusion.d_cross);
                let ids = AttentionIds {
                    q: LinearIds::build(&mut b, &format!("{prefix}.q"), c.d_model, d_x, false)?,
                    k: LinearIds::build(&mut b, &format!("{prefix}.k"), d_m, d_x, false)?,
                    v: LinearIds::build(&mut b, &format!("{prefix}.v"), d_m, d_x, false)?,
                    o: LinearIds {
                        w: b.zeros(&format!("{prefix}.o.weight"), &[d_x, c.d_model])?,
                        b: None,
                    },
                    heads: c.fusion.n_heads,
                };
                cross.push(ids);
            }
            (Some(audio), cross)
        } else {
            (None, Vec::new())
        };
        Ok(Layout {
            tok_emb,
            enc_pos,
            dec_pos,
            encoder,
            decoder,
            audio,
            cross,
        })
    }
}

/// Converts token ids to embedding-table indices.
fn indices(ids: &[u32]) -> Vec<usize> {
    ids.iter().map(|&i| i as usize).collect()
}

/// Key mask of a token batch, or `None` when nothing is padded.
fn key_mask(batch: &TokenBatch) -> Option<Rc<Vec<bool>>> {
    if batch.mask().iter().all(|&m| m) {
        None
    } else {
        Some(Rc::new(batch.mask().to_vec()))
    }
}

/// Row-wise `log_softmax` of the last row of `logits [L, V]`.
fn last_row_log_probs<T: Real>(logits: &Tensor<T>) -> Vec<f64> {
    let v = logits.last_dim();
    let row = &logits.data()[logits.len() - v..];
    let max = row.iter().map(|x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.to_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.to_f64() - lse).collect()
}

/// Encoder memory: final hidden states `[B, L, d]` and their key mask.
pub(crate) struct Memory<'t, T: Real> {
    pub states: Var<'t, T>,
    pub valid: Option<Rc<Vec<bool>>>,
}

/// Output of a differentiable loss evaluation.
pub struct LossOutput<'t, T: Real> {
    pub loss: Var<'t, T>,
    pub bn_updates: Vec<BatchNormUpdate>,
}

#[derive(Clone, Debug)]
pub struct FusionModel<T: Real = f32> {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore<T>,
}

impl FusionModel<f32> {
    /// Scaled-normal initialisation (std 0.02), unit norm gains, zero biases and
    /// a zero cross-modal output projection.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params, seed)?;
        Ok(FusionModel { config, layout, params })
    }

    /// Writes `model.json` and the tensor container into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)? + "\n")?;
        save_params(&self.params, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        let mut model = FusionModel::new(config, 0)?;
        load_params(&mut model.params, dir)?;
        Ok(model)
    }
}

impl<T: Real> FusionModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> FusionModel<U> {
        FusionModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Ids of the zero-initialised cross-modal output projections.
    pub fn fusion_output_projections(&self) -> Vec<ParamId> {
        self.layout.cross.iter().map(|c| c.o.w).collect()
    }

    /// Folds observed batch statistics into the running-statistics buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BatchNormUpdate], momentum: f64) -> Result<()> {
        for u in updates {
            let read = |id: ParamId| -> Vec<f64> { self.params.get(id).data().iter().map(|v| v.to_f64()).collect() };
            let mut running = BatchNormStats {
                mean: read(u.mean),
                var: read(u.var),
            };
            running.update(&u.batch, momentum);
            let c = running.mean.len();
            self.params.set(u.mean, Tensor::new(&[c], running.mean.iter().map(|&v| T::from_f64(v)).collect())?)?;
            self.params.set(u.var, Tensor::new(&[c], running.var.iter().map(|&v| T::from_f64(v)).collect())?)?;
        }
        Ok(())
    }

    fn embed<'t>(&self, f: &Fwd<'_, 't, T>, batch: &TokenBatch, pos_table: ParamId, max_len: usize) -> Result<Var<'t, T>> {
        let (b, l) = (batch.batch_size(), batch.seq_len());
        if l > max_len {
            return Err(Error::pre("embed", format!("sequence length {l} exceeds {max_len} positions")));
        }
        if let Some(&bad) = batch.ids().iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::UnknownToken(bad));
        }
        let tokens = ops::embedding(f.get(self.layout.tok_emb), &indices(batch.ids()), &[b, l])?;
        let positions: Vec<usize> = (0..l).collect();
        let pos = ops::embedding(f.get(pos_table), &positions, &[l])?;
        tokens.add_broadcast(&pos)
    }

    fn audio_repr<'t>(&self, f: &Fwd<'_, 't, T>, audio: &AudioBatch) -> Result<AudioRepr<'t, T>> {
        let enc = self
            .layout
            .audio
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without an audio encoder".into()))?;
        let mel = f.tape.constant(audio.values.cast());
        enc.forward(f, &mel, &audio.frames)
    }

    /// Encoder stack; the last `fuse_last_k` layers receive the cross-modal
    /// term when audio is given and the model has an audio branch.
    pub(crate) fn encode_with<'t>(
        &self,
        f: &Fwd<'_, 't, T>,
        source: &TokenBatch,
        audio: Option<&AudioBatch>,
    ) -> Result<Memory<'t, T>> {
        let valid = key_mask(source);
        let z = match audio {
            Some(a) if self.config.uses_audio() => {
                if a.batch_size() != source.batch_size() {
                    return Err(Error::shape("fused_encoder", &[source.batch_size()], &[a.batch_size()]));
                }
                Some(self.audio_repr(f, a)?)
            }
            _ => None,
        };
        let mut h = self.embed(f, source, self.layout.enc_pos, self.config.max_source_len)?;
        let first_fused = self.config.n_enc - self.config.fusion.fuse_last_k;
        for (i, layer) in self.layout.encoder.iter().enumerate() {
            if let (Some(z), true) = (&z, i >= first_fused) {
                let cma = self.layout.cross[i - first_fused].forward(
                    f,
                    &format!("fusion.layer{i}"),
                    &h,
                    &z.values,
                    z.valid.as_ref(),
                    false,
                )?;
                f.record(|t| t.fusion_terms.push(cma.value().clone()));
                h = h.add(&cma)?;
            }
            f.record(|t| t.encoder_inputs.push(h.value().clone()));
            h = layer.forward(f, &format!("enc.layer{i}"), &h, valid.as_ref())?;
            f.record(|t| t.encoder_outputs.push(h.value().clone()));
        }
        Ok(Memory { states: h, valid })
    }

    /// Decoder stack with tied output projection: logits `[B * L, V]`.
    pub(crate) fn decode_with<'t>(&self, f: &Fwd<'_, 't, T>, target_in: &TokenBatch, memory: &Memory<'t, T>) -> Result<Var<'t, T>> {
        let valid = key_mask(target_in);
        let mut h = self.embed(f, target_in, self.layout.dec_pos, self.config.max_target_len)?;
        for (i, layer) in self.layout.decoder.iter().enumerate() {
            h = layer.forward(
                f,
                &format!("dec.layer{i}"),
                &h,
                valid.as_ref(),
                &memory.states,
                memory.valid.as_ref(),
            )?;
        }
        let (b, l) = (target_in.batch_size(), target_in.seq_len());
        h.reshape(&[b * l, self.config.d_model])?
            .matmul(f.get(self.layout.tok_emb), true)
    }

    /// Teacher-forced mean cross-entropy over non-pad target positions.
    ///
    /// With `train_bn` the audio batch norms use batch statistics and report
    /// them for [`FusionModel::apply_bn_updates`].
    pub fn loss_with<'t>(
        &self,
        tape: &'t Tape<T>,
        bound: &Bound<'t, T>,
        batch: &Seq2SeqBatch,
        train_bn: bool,
    ) -> Result<LossOutput<'t, T>> {
        let f = Fwd::new(tape, bound, train_bn, false);
        let memory = self.encode_with(&f, &batch.source, batch.audio.as_ref())?;
        let input = batch.target.without_last()?;
        let labels = batch.target.without_first()?;
        let logits = self.decode_with(&f, &input, &memory)?;
        let loss = ops::cross_entropy_loss(&logits, &indices(labels.ids()), PAD as usize)?;
        Ok(LossOutput {
            loss,
            bn_updates: f.bn_updates.into_inner(),
        })
    }

    /// Inference-mode loss value.
    pub fn loss(&self, batch: &Seq2SeqBatch) -> Result<f64> {
        let tape = Tape::inference();
        let bound = self.params.bind(&tape);
        Ok(self.loss_with(&tape, &bound, batch, false)?.loss.value().item().to_f64())
    }

    /// Final encoder states `[B, L, d]` in inference mode.
    pub fn encoder_states(&self, source: &TokenBatch, audio: Option<&AudioBatch>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let bound = self.params.bind(&tape);
        let f = Fwd::new(&tape, &bound, false, false);
        Ok(self.encode_with(&f, source, audio)?.states.value().clone())
    }

    /// Audio representation `Z_m` as `[B, L_m, d_m]` in inference mode.
    pub fn audio_representation(&self, audio: &AudioBatch) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let bound = self.params.bind(&tape);
        let f = Fwd::new(&tape, &bound, false, false);
        Ok(self.audio_repr(&f, audio)?.values.value().clone())
    }

    /// Inference forward pass over `target_in`, returning logits `[B * L, V]`
    /// and everything recorded along the way.
    pub fn forward_traced(
        &self,
        source: &TokenBatch,
        audio: Option<&AudioBatch>,
        target_in: &TokenBatch,
    ) -> Result<(Tensor<T>, Trace<T>)> {
        let tape = Tape::inference();
        let bound = self.params.bind(&tape);
        let f = Fwd::new(&tape, &bound, false, true);
        let memory = self.encode_with(&f, source, audio)?;
        let logits = self.decode_with(&f, target_in, &memory)?.value().clone();
        let trace = f.trace.expect("tracing enabled").into_inner();
        Ok((logits, trace))
    }

    pub fn logits(&self, source: &TokenBatch, audio: Option<&AudioBatch>, target_in: &TokenBatch) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let bound = self.params.bind(&tape);
        let f = Fwd::new(&tape, &bound, false, false);
        let memory = self.encode_with(&f, source, audio)?;
        Ok(self.decode_with(&f, target_in, &memory)?.value().clone())
    }

    /// Decodes from bos for one encoded source row.
    pub fn generate_ids(
        &self,
        source: &EncodedRow,
        audio: Option<&MelSpectrogram>,
        mode: DecodeMode,
        max_new: usize,
    ) -> Result<Vec<u32>> {
        let tape = Tape::inference();
        let bound = self.params.bind(&tape);
        let f = Fwd::new(&tape, &bound, false, false);
        let src = TokenBatch::from_rows(std::slice::from_ref(source))?;
        let audio = audio.map(|m| AudioBatch::from_mels(&[m])).transpose()?;
        let memory = self.encode_with(&f, &src, audio.as_ref())?;
        let max_new = max_new.min(self.config.max_target_len);
        let next = |prefix: &[u32]| -> Result<Vec<f64>> {
            let row = EncodedRow {
                ids: prefix.to_vec(),
                mask: vec![true; prefix.len()],
            };
            let logits = self.decode_with(&f, &TokenBatch::from_rows(&[row])?, &memory)?;
            Ok(last_row_log_probs(logits.value()))
        };
        decode::search(next, mode, max_new)
    }

    /// Encodes `lyrics`, decodes and returns the detokenized text.
    pub fn generate(
        &self,
        vocab: &Vocabulary,
        lyrics: &str,
        audio: Option<&MelSpectrogram>,
        mode: DecodeMode,
        max_new: usize,
    ) -> Result<String> {
        let source = vocab.encode_unpadded(lyrics, self.config.max_source_len)?;
        let ids = self.generate_ids(&source, audio, mode, max_new)?;
        vocab.decode(&ids)
    }
}
