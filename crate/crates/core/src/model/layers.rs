//! Parameter layouts and forward passes of the transformer building blocks.

use std::cell::RefCell;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::ops::{self, Activation, SoftmaxMask, LAYER_NORM_EPS};
use crate::tensor::{BatchNormStats, Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;

/// Registers freshly initialised parameters in a store.
pub(crate) struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, seed: u64) -> Self {
        Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = Tensor::from_fn(shape, |_| self.normal.sample(&mut self.rng) as f32);
        self.store.add(name, t, true)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape), true)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::ones(shape), true)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<f32>) -> Result<ParamId> {
        self.store.add(name, value, false)
    }
}

/// Attention weights recorded during a traced forward pass.
#[derive(Clone, Debug)]
pub struct AttentionRecord<T: Real = f32> {
    pub label: String,
    /// `[batch * heads, queries, keys]`.
    pub probs: Tensor<T>,
    /// `[batch, keys]` key mask, when one was applied.
    pub key_valid: Option<Vec<bool>>,
    pub causal: bool,
}

/// Intermediate values captured by a traced forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace<T: Real = f32> {
    /// Input to each encoder layer after any fusion, in layer order.
    pub encoder_inputs: Vec<Tensor<T>>,
    /// Output of each encoder layer.
    pub encoder_outputs: Vec<Tensor<T>>,
    /// Cross-modal summary added at each fused layer.
    pub fusion_terms: Vec<Tensor<T>>,
    pub attention: Vec<AttentionRecord<T>>,
}

/// Batch-norm statistics observed in a training forward pass, keyed by the
/// running-statistics buffers they update.
#[derive(Clone, Debug)]
pub struct BatchNormUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch: BatchNormStats,
}

/// Shared state of one forward pass.
pub(crate) struct Fwd<'a, 't, T: Real> {
    pub tape: &'t Tape<T>,
    pub p: &'a Bound<'t, T>,
    /// Batch statistics (true) or running statistics (false) in batch norm.
    pub train_bn: bool,
    pub bn_updates: RefCell<Vec<BatchNormUpdate>>,
    pub trace: Option<RefCell<Trace<T>>>,
}

impl<'a, 't, T: Real> Fwd<'a, 't, T> {
    pub fn new(tape: &'t Tape<T>, p: &'a Bound<'t, T>, train_bn: bool, trace: bool) -> Self {
        Fwd {
            tape,
            p,
            train_bn,
            bn_updates: RefCell::new(Vec::new()),
            trace: trace.then(|| RefCell::new(Trace::default())),
        }
    }

    pub fn get(&self, id: ParamId) -> &Var<'t, T> {
        self.p.get(id)
    }

    pub fn record(&self, f: impl FnOnce(&mut Trace<T>)) {
        if let Some(t) = &self.trace {
            f(&mut t.borrow_mut());
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormIds {
    pub fn build(b: &mut Builder, prefix: &str, d: usize) -> Result<Self> {
        Ok(NormIds {
            gamma: b.ones(&format!("{prefix}.gamma"), &[d])?,
            beta: b.zeros(&format!("{prefix}.beta"), &[d])?,
        })
    }

    pub fn forward<'t, T: Real>(&self, f: &Fwd<'_, 't, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        ops::layer_norm(x, f.get(self.gamma), f.get(self.beta), LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearIds {
    pub fn build(bld: &mut Builder, prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Ok(LinearIds {
            w: bld.normal(&format!("{prefix}.weight"), &[d_in, d_out])?,
            b: if bias { Some(bld.zeros(&format!("{prefix}.bias"), &[d_out])?) } else { None },
        })
    }

    pub fn forward<'t, T: Real>(&self, f: &Fwd<'_, 't, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        ops::linear(x, f.get(self.w), self.b.map(|b| f.get(b)))
    }
}

/// Multi-head attention projections. The key projection has no bias: a bias
/// there shifts every score of a row equally and never changes the output.
#[derive(Clone, Debug)]
pub(crate) struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub heads: usize,
}

impl AttentionIds {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        b: &mut Builder,
        prefix: &str,
        d_query: usize,
        d_kv: usize,
        d_attn: usize,
        d_out: usize,
        heads: usize,
        bias: bool,
    ) -> Result<Self> {
        Ok(AttentionIds {
            q: LinearIds::build(b, &format!("{prefix}.q"), d_query, d_attn, bias)?,
            k: LinearIds::build(b, &format!("{prefix}.k"), d_kv, d_attn, false)?,
            v: LinearIds::build(b, &format!("{prefix}.v"), d_kv, d_attn, bias)?,
            o: LinearIds::build(b, &format!("{prefix}.o"), d_attn, d_out, bias)?,
            heads,
        })
    }

    /// `[B, Lq, d_query] × [B, Lk, d_kv] -> [B, Lq, d_out]`.
    pub fn forward<'t, T: Real>(
        &self,
        f: &Fwd<'_, 't, T>,
        label: &str,
        xq: &Var<'t, T>,
        xkv: &Var<'t, T>,
        key_valid: Option<&Rc<Vec<bool>>>,
        causal: bool,
    ) -> Result<Var<'t, T>> {
        let (bsz, lq, lk) = (xq.shape()[0], xq.shape()[1], xkv.shape()[1]);
        let h = self.heads;
        let split = |x: Var<'t, T>, len: usize| -> Result<Var<'t, T>> {
            let d = x.shape()[2];
            if h == 1 {
                return Ok(x);
            }
            x.reshape(&[bsz, len, h, d / h])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[bsz * h, len, d / h])
        };
        let q = split(self.q.forward(f, xq)?, lq)?;
        let k = split(self.k.forward(f, xkv)?, lk)?;
        let v = split(self.v.forward(f, xkv)?, lk)?;
        let dh = q.shape()[2];
        let scores = q.bmm(&k, true)?.scale(T::from_f64(1.0 / (dh as f64).sqrt()));
        let mask = SoftmaxMask {
            key_valid: key_valid.cloned(),
            causal,
            groups: h,
            queries: lq,
        };
        let probs = ops::softmax(&scores, Some(&mask))?;
        f.record(|t| {
            t.attention.push(AttentionRecord {
                label: label.to_string(),
                probs: probs.value().clone(),
                key_valid: key_valid.map(|v| v.to_vec()),
                causal,
            })
        });
        let ctx = probs.bmm(&v, false)?;
        let ctx = if h == 1 {
            ctx
        } else {
            ctx.reshape(&[bsz, h, lq, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[bsz, lq, h * dh])?
        };
        self.o.forward(f, &ctx)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FfnIds {
    pub up: LinearIds,
    pub down: LinearIds,
}

impl FfnIds {
    pub fn build(b: &mut Builder, prefix: &str, d: usize, d_ffn: usize) -> Result<Self> {
        Ok(FfnIds {
            up: LinearIds::build(b, &format!("{prefix}.up"), d, d_ffn, true)?,
            down: LinearIds::build(b, &format!("{prefix}.down"), d_ffn, d, true)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, f: &Fwd<'_, 't, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let hidden = ops::activation(&self.up.forward(f, x)?, Activation::Gelu);
        self.down.forward(f, &hidden)
    }
}

/// Post-LN self-attention layer: `H̃ = LN(SA(H) + H)`, `out = LN(FFN(H̃) + H̃)`.
#[derive(Clone, Debug)]
pub(crate) struct EncoderLayerIds {
    pub attn: AttentionIds,
    pub ln1: NormIds,
    pub ffn: FfnIds,
    pub ln2: NormIds,
}

impl EncoderLayerIds {
    pub fn build(b: &mut Builder, prefix: &str, d: usize, d_attn: usize, heads: usize, d_ffn: usize) -> Result<Self> {
        Ok(EncoderLayerIds {
            attn: AttentionIds::build(b, &format!("{prefix}.attn"), d, d, d_attn, d, heads, true)?,
            ln1: NormIds::build(b, &format!("{prefix}.ln1"), d)?,
            ffn: FfnIds::build(b, &format!("{prefix}.ffn"), d, d_ffn)?,
            ln2: NormIds::build(b, &format!("{prefix}.ln2"), d)?,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        f: &Fwd<'_, 't, T>,
        label: &str,
        h: &Var<'t, T>,
        key_valid: Option<&Rc<Vec<bool>>>,
    ) -> Result<Var<'t, T>> {
        let a = self.attn.forward(f, label, h, h, key_valid, false)?;
        let h1 = self.ln1.forward(f, &a.add(h)?)?;
        let ff = self.ffn.forward(f, &h1)?;
        self.ln2.forward(f, &ff.add(&h1)?)
    }
}

/// Post-LN decoder layer: causal self-attention, attention over the encoder
/// memory, then the feed-forward block.
#[derive(Clone, Debug)]
pub(crate) struct DecoderLayerIds {
    pub self_attn: AttentionIds,
    pub ln1: NormIds,
    pub cross_attn: AttentionIds,
    pub ln2: NormIds,
    pub ffn: FfnIds,
    pub ln3: NormIds,
}

impl DecoderLayerIds {
    pub fn build(b: &mut Builder, prefix: &str, d: usize, d_attn: usize, heads: usize, d_ffn: usize) -> Result<Self> {
        Ok(DecoderLayerIds {
            self_attn: AttentionIds::build(b, &format!("{prefix}.self_attn"), d, d, d_attn, d, heads, true)?,
            ln1: NormIds::build(b, &format!("{prefix}.ln1"), d)?,
            cross_attn: AttentionIds::build(b, &format!("{prefix}.cross_attn"), d, d, d_attn, d, heads, true)?,
            ln2: NormIds::build(b, &format!("{prefix}.ln2"), d)?,
            ffn: FfnIds::build(b, &format!("{prefix}.ffn"), d, d_ffn)?,
            ln3: NormIds::build(b, &format!("{prefix}.ln3"), d)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t, T: Real>(
        &self,
        f: &Fwd<'_, 't, T>,
        label: &str,
        h: &Var<'t, T>,
        target_valid: Option<&Rc<Vec<bool>>>,
        memory: &Var<'t, T>,
        memory_valid: Option<&Rc<Vec<bool>>>,
    ) -> Result<Var<'t, T>> {
        let a = self
            .self_attn
            .forward(f, &format!("{label}.self"), h, h, target_valid, true)?;
        let h1 = self.ln1.forward(f, &a.add(h)?)?;
        let c = self
            .cross_attn
            .forward(f, &format!("{label}.cross"), &h1, memory, memory_valid, false)?;
        let h2 = self.ln2.forward(f, &c.add(&h1)?)?;
        let ff = self.ffn.forward(f, &h2)?;
        self.ln3.forward(f, &ff.add(&h2)?)
    }
}
