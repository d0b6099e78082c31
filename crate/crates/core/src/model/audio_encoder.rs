//! Residual CNN front end followed by self-attention over time.

use std::rc::Rc;

use super::config::AudioConfig;
use super::layers::{BatchNormUpdate, Builder, EncoderLayerIds, Fwd, NormIds};
use crate::audio::N_MELS;
use crate::error::{Error, Result};
use crate::tensor::ops::{self, Activation, BatchNormMode};
use crate::tensor::{BatchNormStats, ParamId, Real, Tensor, Var};

#[derive(Clone, Debug)]
pub(crate) struct BatchNormIds {
    pub affine: NormIds,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormIds {
    fn build(b: &mut Builder, prefix: &str, c: usize) -> Result<Self> {
        Ok(BatchNormIds {
            affine: NormIds::build(b, prefix, c)?,
            running_mean: b.buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[c]))?,
            running_var: b.buffer(&format!("{prefix}.running_var"), Tensor::ones(&[c]))?,
        })
    }

    pub fn forward<'t, T: Real>(&self, f: &Fwd<'_, 't, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (g, b) = (f.get(self.affine.gamma), f.get(self.affine.beta));
        if f.train_bn {
            let (y, stats) = ops::batch_norm(x, g, b, BatchNormMode::Train)?;
            f.bn_updates.borrow_mut().push(BatchNormUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch: stats.expect("train mode reports statistics"),
            });
            Ok(y)
        } else {
            let to_f64 = |id: ParamId| f.get(id).value().data().iter().map(|v| v.to_f64()).collect();
            let running = BatchNormStats {
                mean: to_f64(self.running_mean),
                var: to_f64(self.running_var),
            };
            Ok(ops::batch_norm(x, g, b, BatchNormMode::Infer(&running))?.0)
        }
    }
}

/// `H̃ = BN(conv2(ReLU(conv1(H))))`, `out = H̃ + BN(conv3(H))`; conv1 and conv3
/// carry the block stride.
#[derive(Clone, Debug)]
pub(crate) struct ConvBlockIds {
    pub conv1: ParamId,
    pub conv2: ParamId,
    pub conv3: ParamId,
    pub bn2: BatchNormIds,
    pub bn3: BatchNormIds,
    pub stride: (usize, usize),
}

impl ConvBlockIds {
    fn build(b: &mut Builder, prefix: &str, c_in: usize, c_out: usize, stride: (usize, usize)) -> Result<Self> {
        Ok(ConvBlockIds {
            conv1: b.normal(&format!("{prefix}.conv1"), &[c_out, c_in, 3, 3])?,
            conv2: b.normal(&format!("{prefix}.conv2"), &[c_out, c_out, 3, 3])?,
            conv3: b.normal(&format!("{prefix}.conv3"), &[c_out, c_in, 3, 3])?,
            bn2: BatchNormIds::build(b, &format!("{prefix}.bn2"), c_out)?,
            bn3: BatchNormIds::build(b, &format!("{prefix}.bn3"), c_out)?,
            stride,
        })
    }

    pub fn forward<'t, T: Real>(&self, f: &Fwd<'_, 't, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let c1 = ops::conv2d(x, f.get(self.conv1), self.stride)?;
        let c2 = ops::conv2d(&ops::activation(&c1, Activation::Relu), f.get(self.conv2), (1, 1))?;
        let main = self.bn2.forward(f, &c2)?;
        let shortcut = self.bn3.forward(f, &ops::conv2d(x, f.get(self.conv3), self.stride)?)?;
        main.add(&shortcut)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct AudioEncoderIds {
    pub config: AudioConfig,
    pub blocks: Vec<ConvBlockIds>,
    pub layers: Vec<EncoderLayerIds>,
}

/// Output of the audio encoder: `Z_m` as `[B, L_m, d_m]` plus the key mask of
/// frames that came from real (unpadded) audio.
pub(crate) struct AudioRepr<'t, T: Real> {
    pub values: Var<'t, T>,
    pub valid: Option<Rc<Vec<bool>>>,
}

impl AudioEncoderIds {
    pub fn build(b: &mut Builder, prefix: &str, config: &AudioConfig) -> Result<Self> {
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut c_in = 1;
        for (i, (&c, &s)) in config.channels.iter().zip(&config.strides).enumerate() {
            blocks.push(ConvBlockIds::build(b, &format!("{prefix}.block{i}"), c_in, c, s)?);
            c_in = c;
        }
        let d_m = config.d_m();
        let layers = (0..config.n_layers)
            .map(|i| EncoderLayerIds::build(b, &format!("{prefix}.layer{i}"), d_m, d_m, config.n_heads, config.d_ffn()))
            .collect::<Result<_>>()?;
        Ok(AudioEncoderIds {
            config: config.clone(),
            blocks,
            layers,
        })
    }

    /// Convolutional stage only: `[B, 128, T] -> [B, C, 1, T']`.
    pub fn conv_forward<'t, T: Real>(&self, f: &Fwd<'_, 't, T>, mel: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = mel.shape();
        if s.len() != 3 || s[1] != N_MELS {
            return Err(Error::pre("audio_encoder", format!("expected [batch, {N_MELS}, frames] input, got {s:?}")));
        }
        let mut h = mel.reshape(&[s[0], 1, s[1], s[2]])?;
        for block in &self.blocks {
            h = block.forward(f, &h)?;
        }
        Ok(h)
    }

    /// `mel`: `[B, 128, T]`; `frames[b]` is the unpadded length of item `b`.
    pub fn forward<'t, T: Real>(&self, f: &Fwd<'_, 't, T>, mel: &Var<'t, T>, frames: &[usize]) -> Result<AudioRepr<'t, T>> {
        let h = self.conv_forward(f, mel)?;
        let (bsz, c, fr, t) = (h.shape()[0], h.shape()[1], h.shape()[2], h.shape()[3]);
        if fr != 1 {
            return Err(Error::Config(format!("audio strides leave {fr} frequency rows, expected 1")));
        }
        let mut z = h.reshape(&[bsz, c, t])?.permute(&[0, 2, 1])?;
        let lens: Vec<usize> = frames
            .iter()
            .map(|&n| self.config.output_extent(N_MELS, n).1)
            .collect();
        let valid = if lens.iter().all(|&l| l == t) {
            None
        } else {
            Some(Rc::new(
                lens.iter().flat_map(|&l| (0..t).map(move |i| i < l)).collect::<Vec<bool>>(),
            ))
        };
        for (i, layer) in self.layers.iter().enumerate() {
            z = layer.forward(f, &format!("audio.layer{i}"), &z, valid.as_ref())?;
        }
        Ok(AudioRepr { values: z, valid })
    }
}
