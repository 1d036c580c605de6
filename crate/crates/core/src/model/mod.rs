//! Pre-norm transformer encoder, causal dialogue decoder and the one-layer
//! auxiliary decoder that reads bi-directional context through a target mask.
//!
//! All three stacks share the token embedding table. The dialogue decoder and
//! the auxiliary decoder consume the same [`EncoderMemory`] and the same
//! BOS-prefixed decoder input, so one auxiliary pass scores every target
//! position of a response at once.

mod config;
mod mask;
mod params;

pub use config::ModelConfig;
pub use mask::{build_causal_mask, build_target_mask, key_padding_mask, AttentionMask};
pub use params::{param_counts, ParamGroup, ParamStore, INIT_STD};

use crate::data::PaddedIds;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

struct AttnIds {
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    o: (usize, usize),
}

struct FfnIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

type LnIds = (usize, usize);

struct EncLayerIds {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
}

struct DecLayerIds {
    ln1: LnIds,
    self_attn: AttnIds,
    ln2: LnIds,
    cross: AttnIds,
    ln3: LnIds,
    ffn: FfnIds,
}

struct DecoderIds {
    layers: Vec<DecLayerIds>,
    ln_f: LnIds,
    out: (usize, usize),
}

struct Ids {
    embed: usize,
    enc: Vec<EncLayerIds>,
    enc_ln_f: LnIds,
    dec: DecoderIds,
    aux: DecoderIds,
}

impl Ids {
    fn resolve<T: Scalar>(cfg: &ModelConfig, p: &ParamStore<T>) -> Ids {
        let attn = |pre: &str| AttnIds {
            q: (p.id(&format!("{pre}.q.w")), p.id(&format!("{pre}.q.b"))),
            k: (p.id(&format!("{pre}.k.w")), p.id(&format!("{pre}.k.b"))),
            v: (p.id(&format!("{pre}.v.w")), p.id(&format!("{pre}.v.b"))),
            o: (p.id(&format!("{pre}.o.w")), p.id(&format!("{pre}.o.b"))),
        };
        let ln = |pre: &str| (p.id(&format!("{pre}.g")), p.id(&format!("{pre}.b")));
        let ffn = |pre: &str| FfnIds {
            w1: p.id(&format!("{pre}.w1")),
            b1: p.id(&format!("{pre}.b1")),
            w2: p.id(&format!("{pre}.w2")),
            b2: p.id(&format!("{pre}.b2")),
        };
        let decoder = |stack: &str, n: usize| DecoderIds {
            layers: (0..n)
                .map(|l| DecLayerIds {
                    ln1: ln(&format!("{stack}.{l}.ln1")),
                    self_attn: attn(&format!("{stack}.{l}.self")),
                    ln2: ln(&format!("{stack}.{l}.ln2")),
                    cross: attn(&format!("{stack}.{l}.cross")),
                    ln3: ln(&format!("{stack}.{l}.ln3")),
                    ffn: ffn(&format!("{stack}.{l}.ffn")),
                })
                .collect(),
            ln_f: ln(&format!("{stack}.ln_f")),
            out: (p.id(&format!("{stack}.out.w")), p.id(&format!("{stack}.out.b"))),
        };
        Ids {
            embed: p.id("embed"),
            enc: (0..cfg.enc_layers)
                .map(|l| EncLayerIds {
                    ln1: ln(&format!("enc.{l}.ln1")),
                    attn: attn(&format!("enc.{l}.self")),
                    ln2: ln(&format!("enc.{l}.ln2")),
                    ffn: ffn(&format!("enc.{l}.ffn")),
                })
                .collect(),
            enc_ln_f: ln("enc.ln_f"),
            dec: decoder("dec", cfg.dec_layers),
            aux: decoder("aux", cfg.aux_layers),
        }
    }
}

/// Encoder output for a batch: `[batch, src_len, hidden]` plus the source pad mask.
#[derive(Clone, Debug)]
pub struct EncoderMemory {
    pub states: Var,
    pub pad_mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// Logits of both decoders for one teacher-forced batch.
pub struct ForwardOutput {
    pub memory: EncoderMemory,
    /// `[batch, tgt_len, vocab]`
    pub dialogue: Var,
    /// `[batch, tgt_len, vocab]`
    pub auxiliary: Var,
}

pub struct Seq2Seq<T: Scalar> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    ids: Ids,
    positions: Vec<T>,
}

impl<T: Scalar> Clone for Seq2Seq<T> {
    fn clone(&self) -> Self {
        Seq2Seq::from_params(self.cfg.clone(), self.params.clone()).expect("valid clone")
    }
}

impl<T: Scalar> Seq2Seq<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = ParamStore::init(&cfg, seed);
        Self::from_params(cfg, params)
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        params.check_layout(&cfg)?;
        let ids = Ids::resolve(&cfg, &params);
        let positions = sinusoidal_table(cfg.max_len, cfg.hidden);
        Ok(Seq2Seq {
            cfg,
            params,
            ids,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Seq2Seq<U> {
        Seq2Seq::from_params(self.cfg.clone(), self.params.cast()).expect("same layout")
    }

    fn p(&self, g: &mut Graph<T>, id: usize) -> Var {
        g.param(id, self.params.get(id))
    }

    fn embed(&self, g: &mut Graph<T>, ids: &PaddedIds) -> Result<Var> {
        if ids.len > self.cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: ids.len,
                max: self.cfg.max_len,
            });
        }
        let table = self.p(g, self.ids.embed);
        let e = g.embedding(table, &ids.ids, &[ids.batch, ids.len])?;
        let e = g.scale(e, T::from_usize_lossy(self.cfg.hidden).sqrt());
        let h = self.cfg.hidden;
        let pos_len = ids.len * h;
        let mut pe = Vec::with_capacity(ids.batch * pos_len);
        for _ in 0..ids.batch {
            pe.extend_from_slice(&self.positions[..pos_len]);
        }
        let pe = g.constant(Tensor::from_parts(vec![ids.batch, ids.len, h], pe));
        let x = g.add(e, pe);
        Ok(g.dropout(x, self.cfg.dropout))
    }

    fn layer_norm(&self, g: &mut Graph<T>, x: Var, ids: LnIds) -> Var {
        let (gamma, beta) = (self.p(g, ids.0), self.p(g, ids.1));
        g.layer_norm(x, gamma, beta)
    }

    fn affine(&self, g: &mut Graph<T>, x: Var, ids: (usize, usize)) -> Var {
        let (w, b) = (self.p(g, ids.0), self.p(g, ids.1));
        let y = g.linear(x, w);
        g.add_row(y, b)
    }

    fn attention(&self, g: &mut Graph<T>, ids: &AttnIds, xq: Var, xkv: Var, blocked: &[bool]) -> Var {
        let heads = self.cfg.heads;
        let d = self.cfg.hidden / heads;
        let q = self.affine(g, xq, ids.q);
        let k = self.affine(g, xkv, ids.k);
        let v = self.affine(g, xkv, ids.v);
        let (q, k, v) = (g.split_heads(q, heads), g.split_heads(k, heads), g.split_heads(v, heads));
        let scores = g.bmm(q, k, false, true);
        let scores = g.scale(scores, T::one() / T::from_usize_lossy(d).sqrt());
        let attn = g.masked_softmax(scores, blocked, heads);
        let attn = g.dropout(attn, self.cfg.dropout);
        let ctx = g.bmm(attn, v, false, false);
        let ctx = g.merge_heads(ctx, heads);
        self.affine(g, ctx, ids.o)
    }

    fn ffn(&self, g: &mut Graph<T>, x: Var, ids: &FfnIds) -> Var {
        let h = self.affine(g, x, (ids.w1, ids.b1));
        let h = g.gelu(h);
        let h = g.dropout(h, self.cfg.dropout);
        self.affine(g, h, (ids.w2, ids.b2))
    }

    fn residual(&self, g: &mut Graph<T>, x: Var, delta: Var) -> Var {
        let delta = g.dropout(delta, self.cfg.dropout);
        g.add(x, delta)
    }

    pub fn encode(&self, g: &mut Graph<T>, src: &PaddedIds) -> Result<EncoderMemory> {
        let mut x = self.embed(g, src)?;
        let pad = src.pad_mask();
        let blocked = key_padding_mask(&pad, src.batch, src.len, src.len);
        for layer in &self.ids.enc {
            let h = self.layer_norm(g, x, layer.ln1);
            let a = self.attention(g, &layer.attn, h, h, &blocked);
            x = self.residual(g, x, a);
            let h = self.layer_norm(g, x, layer.ln2);
            let f = self.ffn(g, h, &layer.ffn);
            x = self.residual(g, x, f);
        }
        let states = self.layer_norm(g, x, self.ids.enc_ln_f);
        Ok(EncoderMemory {
            states,
            pad_mask: pad,
            batch: src.batch,
            len: src.len,
        })
    }

    fn decoder_stack(
        &self,
        g: &mut Graph<T>,
        ids: &DecoderIds,
        dec_in: &PaddedIds,
        memory: &EncoderMemory,
        self_mask: &AttentionMask,
    ) -> Result<Var> {
        if dec_in.batch != memory.batch {
            return Err(Error::ShapeMismatch(format!(
                "decoder batch {} vs memory batch {}",
                dec_in.batch, memory.batch
            )));
        }
        let mut x = self.embed(g, dec_in)?;
        let self_blocked = self_mask.with_key_padding(&dec_in.pad_mask(), dec_in.batch);
        let cross_blocked = key_padding_mask(&memory.pad_mask, memory.batch, dec_in.len, memory.len);
        for layer in &ids.layers {
            let h = self.layer_norm(g, x, layer.ln1);
            let a = self.attention(g, &layer.self_attn, h, h, &self_blocked);
            x = self.residual(g, x, a);
            let h = self.layer_norm(g, x, layer.ln2);
            let c = self.attention(g, &layer.cross, h, memory.states, &cross_blocked);
            x = self.residual(g, x, c);
            let h = self.layer_norm(g, x, layer.ln3);
            let f = self.ffn(g, h, &layer.ffn);
            x = self.residual(g, x, f);
        }
        let h = self.layer_norm(g, x, ids.ln_f);
        Ok(self.affine(g, h, ids.out))
    }

    /// Causal decoder logits `[batch, len, vocab]`; row `i` sees inputs `<= i`.
    pub fn dialogue_decoder_forward(
        &self,
        g: &mut Graph<T>,
        dec_in: &PaddedIds,
        memory: &EncoderMemory,
    ) -> Result<Var> {
        let mask = build_causal_mask(dec_in.len)?;
        self.decoder_stack(g, &self.ids.dec, dec_in, memory, &mask)
    }

    /// Auxiliary decoder logits `[batch, len, vocab]`; row `i` predicts the
    /// token at input `i + 1` and never attends to it.
    pub fn auxiliary_forward(
        &self,
        g: &mut Graph<T>,
        dec_in: &PaddedIds,
        memory: &EncoderMemory,
    ) -> Result<Var> {
        if self.cfg.aux_layers != 1 || self.ids.aux.layers.len() != 1 {
            return Err(Error::LeakageRisk(self.cfg.aux_layers));
        }
        let mask = build_target_mask(dec_in.len)?;
        self.decoder_stack(g, &self.ids.aux, dec_in, memory, &mask)
    }

    /// Teacher-forced pass through the encoder and both decoders.
    pub fn forward(&self, g: &mut Graph<T>, src: &PaddedIds, dec_in: &PaddedIds) -> Result<ForwardOutput> {
        let memory = self.encode(g, src)?;
        let dialogue = self.dialogue_decoder_forward(g, dec_in, &memory)?;
        let auxiliary = self.auxiliary_forward(g, dec_in, &memory)?;
        Ok(ForwardOutput {
            memory,
            dialogue,
            auxiliary,
        })
    }
}

fn sinusoidal_table<T: Scalar>(max_len: usize, hidden: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(max_len * hidden);
    for pos in 0..max_len {
        for i in 0..hidden {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / hidden as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            out.push(T::from_f64_lossy(v));
        }
    }
    out
}
