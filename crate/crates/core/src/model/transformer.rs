//! Pre-norm encoder-decoder transformer in two variants: autoregressive
//! (causal decoder, fed the target prefix) and parallel (unmasked decoder
//! fed placeholders, plus a length head over mean-pooled encoder states).

use std::any::Any;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DropRng, ModelError, ParamStore, SeqModel};
use crate::pipeline::{Batch, TokenMatrix, MASK, PAD};
use crate::tensor::{kernels, AttnMask, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d_model: 32,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 64,
            max_positions: 256,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads and d_ff must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.vocab_size < crate::pipeline::NUM_RESERVED {
            return bad("vocab_size must cover the 5 reserved ids");
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Autoregressive,
    /// Parallel decoding; the length head covers offsets `[-delta, delta]`.
    Parallel { length_delta: usize },
}

#[derive(Debug, Clone, Copy)]
struct Ln {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    ln1: Ln,
    attn: Attn,
    ln2: Ln,
    ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    ln1: Ln,
    attn: Attn,
    ln2: Ln,
    cross: Attn,
    ln3: Ln,
    ffn: Ffn,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    bound: f64,
}

impl Init<'_> {
    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<usize, ModelError> {
        let b = self.bound;
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-b..b) as f32 as f64)
            .collect();
        self.store.add(name, Tensor::new(&[rows, cols], data)?)
    }

    fn fill(&mut self, name: &str, n: usize, v: f64) -> Result<usize, ModelError> {
        self.store.add(name, Tensor::full(&[n], v))
    }

    fn ln(&mut self, block: &str, prefix: &str, d: usize) -> Result<Ln, ModelError> {
        Ok(Ln {
            g: self.fill(&format!("{block}.{prefix}_ln_gain"), d, 1.0)?,
            b: self.fill(&format!("{block}.{prefix}_ln_bias"), d, 0.0)?,
        })
    }

    fn attn(&mut self, block: &str, prefix: &str, d: usize) -> Result<Attn, ModelError> {
        let lin = |s: &mut Self, name: &str| -> Result<(usize, usize), ModelError> {
            Ok((
                s.matrix(&format!("{block}.{prefix}_w{name}"), d, d)?,
                s.fill(&format!("{block}.{prefix}_b{name}"), d, 0.0)?,
            ))
        };
        let (wq, bq) = lin(self, "q")?;
        let (wk, bk) = lin(self, "k")?;
        let (wv, bv) = lin(self, "v")?;
        let (wo, bo) = lin(self, "o")?;
        Ok(Attn {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }

    fn ffn(&mut self, block: &str, d: usize, ff: usize) -> Result<Ffn, ModelError> {
        Ok(Ffn {
            w1: self.matrix(&format!("{block}.ffn_w1"), d, ff)?,
            b1: self.fill(&format!("{block}.ffn_b1"), ff, 0.0)?,
            w2: self.matrix(&format!("{block}.ffn_w2"), ff, d)?,
            b2: self.fill(&format!("{block}.ffn_b2"), d, 0.0)?,
        })
    }
}

/// Sinusoidal table `[max_positions, d]`.
fn sinusoids(max_positions: usize, d: usize) -> Vec<f64> {
    let mut table = vec![0.0; max_positions * d];
    for pos in 0..max_positions {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            table[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

#[derive(Debug, Clone)]
pub struct Transformer {
    cfg: TransformerConfig,
    variant: Variant,
    store: ParamStore,
    embed: usize,
    enc: Vec<EncLayer>,
    enc_ln: Ln,
    dec: Vec<DecLayer>,
    dec_ln: Ln,
    out_w: usize,
    out_b: usize,
    length: Option<(usize, usize)>,
    positions: Vec<f64>,
}

/// Encoder output for one source plus per-layer cross-attention keys/values.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    len: usize,
    memory: Vec<f64>,
    cross: Vec<(Vec<f64>, Vec<f64>)>,
}

impl EncodedSource {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Final encoder states `[len, d]`.
    pub fn memory(&self) -> &[f64] {
        &self.memory
    }
}

/// Self-attention key/value cache for the consumed target prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pos: usize,
    cache: Vec<(Vec<f64>, Vec<f64>)>,
}

impl DecodeState {
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Cached positions in `layer`.
    pub fn cache_len(&self, layer: usize, d_model: usize) -> usize {
        self.cache[layer].0.len() / d_model
    }
}

impl Transformer {
    pub fn new(cfg: TransformerConfig, variant: Variant) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            bound: 1.0 / (d as f64).sqrt(),
        };
        let embed = init.matrix("embed.0.tokens", cfg.vocab_size, d)?;
        let mut enc = Vec::with_capacity(cfg.enc_layers);
        for i in 0..cfg.enc_layers {
            let block = format!("encoder.{i}");
            enc.push(EncLayer {
                ln1: init.ln(&block, "attn", d)?,
                attn: init.attn(&block, "attn", d)?,
                ln2: init.ln(&block, "ffn", d)?,
                ffn: init.ffn(&block, d, cfg.d_ff)?,
            });
        }
        let enc_ln = init.ln("encoder_norm.0", "final", d)?;
        let mut dec = Vec::with_capacity(cfg.dec_layers);
        for i in 0..cfg.dec_layers {
            let block = format!("decoder.{i}");
            dec.push(DecLayer {
                ln1: init.ln(&block, "self", d)?,
                attn: init.attn(&block, "self", d)?,
                ln2: init.ln(&block, "cross", d)?,
                cross: init.attn(&block, "cross", d)?,
                ln3: init.ln(&block, "ffn", d)?,
                ffn: init.ffn(&block, d, cfg.d_ff)?,
            });
        }
        let dec_ln = init.ln("decoder_norm.0", "final", d)?;
        let out_w = init.matrix("output.0.weight", d, cfg.vocab_size)?;
        let out_b = init.fill("output.0.bias", cfg.vocab_size, 0.0)?;
        let length = match variant {
            Variant::Autoregressive => None,
            Variant::Parallel { length_delta } => Some((
                init.matrix("length.0.weight", d, 2 * length_delta + 1)?,
                init.fill("length.0.bias", 2 * length_delta + 1, 0.0)?,
            )),
        };
        let positions = sinusoids(cfg.max_positions, d);
        Ok(Self {
            cfg,
            variant,
            store,
            embed,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_w,
            out_b,
            length,
            positions,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn is_parallel(&self) -> bool {
        matches!(self.variant, Variant::Parallel { .. })
    }

    pub fn length_delta(&self) -> usize {
        match self.variant {
            Variant::Parallel { length_delta } => length_delta,
            Variant::Autoregressive => 0,
        }
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len > self.cfg.max_positions {
            return Err(ModelError::PositionOverflow {
                len,
                max: self.cfg.max_positions,
            });
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        match ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            Some(&id) => Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.cfg.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn drop(&self, tape: &mut Tape, x: Var, rng: &mut DropRng<'_>) -> Var {
        match rng.as_deref_mut() {
            Some(r) if self.cfg.dropout > 0.0 => tape.dropout(x, self.cfg.dropout, r),
            _ => x,
        }
    }

    /// Scaled token embeddings plus positions for `[rows, cols]` ids.
    fn embed_tokens(&self, tape: &mut Tape, v: &[Var], ids: &TokenMatrix, rng: &mut DropRng<'_>) -> Result<Var, ModelError> {
        self.check_len(ids.cols)?;
        self.check_ids(&ids.data)?;
        let d = self.cfg.d_model;
        let idx: Vec<usize> = ids.data.iter().map(|&t| t as usize).collect();
        let e = tape.gather(v[self.embed], &idx, &[ids.rows, ids.cols])?;
        let e = tape.scale(e, (d as f64).sqrt());
        let mut pos = Vec::with_capacity(ids.rows * ids.cols * d);
        for _ in 0..ids.rows {
            pos.extend_from_slice(&self.positions[..ids.cols * d]);
        }
        let pos = tape.constant(Tensor::new(&[ids.rows, ids.cols, d], pos)?);
        let x = tape.add(e, pos)?;
        Ok(self.drop(tape, x, rng))
    }

    fn layer_norm(&self, tape: &mut Tape, v: &[Var], ln: Ln, x: Var) -> Result<Var, ModelError> {
        Ok(tape.layer_norm(x, v[ln.g], v[ln.b], LN_EPS)?)
    }

    fn attention(&self, tape: &mut Tape, v: &[Var], a: Attn, q_in: Var, kv_in: Var, mask: &Arc<AttnMask>) -> Result<Var, ModelError> {
        let h = self.cfg.n_heads;
        let dh = self.cfg.d_model / h;
        let q = tape.matmul(q_in, v[a.wq])?;
        let q = tape.add_row(q, v[a.bq])?;
        let k = tape.matmul(kv_in, v[a.wk])?;
        let k = tape.add_row(k, v[a.bk])?;
        let val = tape.matmul(kv_in, v[a.wv])?;
        let val = tape.add_row(val, v[a.bv])?;
        let qh = tape.split_heads(q, h)?;
        let kh = tape.split_heads(k, h)?;
        let vh = tape.split_heads(val, h)?;
        let s = tape.bmm(qh, kh, true)?;
        let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
        let s = tape.mask_fill(s, mask, h)?;
        let p = tape.softmax(s);
        let c = tape.bmm(p, vh, false)?;
        let c = tape.merge_heads(c, h)?;
        let o = tape.matmul(c, v[a.wo])?;
        Ok(tape.add_row(o, v[a.bo])?)
    }

    fn ffn(&self, tape: &mut Tape, v: &[Var], f: Ffn, x: Var) -> Result<Var, ModelError> {
        let h = tape.matmul(x, v[f.w1])?;
        let h = tape.add_row(h, v[f.b1])?;
        let h = tape.relu(h);
        let o = tape.matmul(h, v[f.w2])?;
        Ok(tape.add_row(o, v[f.b2])?)
    }

    /// Encoder states `[B, S, d]`.
    pub fn encode(&self, tape: &mut Tape, v: &[Var], src: &TokenMatrix, rng: &mut DropRng<'_>) -> Result<Var, ModelError> {
        let mut x = self.embed_tokens(tape, v, src, rng)?;
        let mask = Arc::new(AttnMask::padding(&src.lengths, src.cols, src.cols));
        for layer in &self.enc {
            let h = self.layer_norm(tape, v, layer.ln1, x)?;
            let a = self.attention(tape, v, layer.attn, h, h, &mask)?;
            let a = self.drop(tape, a, rng);
            x = tape.add(x, a)?;
            let h = self.layer_norm(tape, v, layer.ln2, x)?;
            let f = self.ffn(tape, v, layer.ffn, h)?;
            let f = self.drop(tape, f, rng);
            x = tape.add(x, f)?;
        }
        self.layer_norm(tape, v, self.enc_ln, x)
    }

    /// Decoder logits `[B, T, V]` over already-encoded sources.
    pub fn decode(
        &self,
        tape: &mut Tape,
        v: &[Var],
        enc: Var,
        src_lengths: &[usize],
        dec_in: &TokenMatrix,
        rng: &mut DropRng<'_>,
    ) -> Result<Var, ModelError> {
        let src_len = tape.shape(enc)[1];
        let t = dec_in.cols;
        let mut x = self.embed_tokens(tape, v, dec_in, rng)?;
        let self_mask = Arc::new(if self.is_parallel() {
            AttnMask::padding(&dec_in.lengths, t, t)
        } else {
            AttnMask::causal(&dec_in.lengths, t)
        });
        let cross_mask = Arc::new(AttnMask::padding(src_lengths, t, src_len));
        for layer in &self.dec {
            let h = self.layer_norm(tape, v, layer.ln1, x)?;
            let a = self.attention(tape, v, layer.attn, h, h, &self_mask)?;
            let a = self.drop(tape, a, rng);
            x = tape.add(x, a)?;
            let h = self.layer_norm(tape, v, layer.ln2, x)?;
            let a = self.attention(tape, v, layer.cross, h, enc, &cross_mask)?;
            let a = self.drop(tape, a, rng);
            x = tape.add(x, a)?;
            let h = self.layer_norm(tape, v, layer.ln3, x)?;
            let f = self.ffn(tape, v, layer.ffn, h)?;
            let f = self.drop(tape, f, rng);
            x = tape.add(x, f)?;
        }
        let x = self.layer_norm(tape, v, self.dec_ln, x)?;
        let logits = tape.matmul(x, v[self.out_w])?;
        Ok(tape.add_row(logits, v[self.out_b])?)
    }

    /// Teacher-forced logits `[B, T, V]`; row `t` has seen `tgt_in[..=t]`.
    pub fn ar_forward(
        &self,
        tape: &mut Tape,
        v: &[Var],
        src: &TokenMatrix,
        tgt_in: &TokenMatrix,
        mut rng: DropRng<'_>,
    ) -> Result<Var, ModelError> {
        let enc = self.encode(tape, v, src, &mut rng)?;
        self.decode(tape, v, enc, &src.lengths, tgt_in, &mut rng)
    }

    /// Parallel logits `[B, L, V]` for decoder inputs made of placeholders
    /// (`<mask>`) and any revealed target tokens. Also returns the encoder
    /// states for the length head.
    pub fn nat_forward(
        &self,
        tape: &mut Tape,
        v: &[Var],
        src: &TokenMatrix,
        dec_in: &TokenMatrix,
        mut rng: DropRng<'_>,
    ) -> Result<(Var, Var), ModelError> {
        if !self.is_parallel() {
            return Err(ModelError::Unsupported("nat_forward needs a parallel model".into()));
        }
        let enc = self.encode(tape, v, src, &mut rng)?;
        let logits = self.decode(tape, v, enc, &src.lengths, dec_in, &mut rng)?;
        Ok((logits, enc))
    }

    /// Length-offset logits `[B, 2Δ+1]` from mean-pooled encoder states.
    pub fn length_logits(&self, tape: &mut Tape, v: &[Var], enc: Var, src_lengths: &[usize]) -> Result<Var, ModelError> {
        let (w, b) = self
            .length
            .ok_or_else(|| ModelError::Unsupported("model has no length head".into()))?;
        let shape = tape.shape(enc).to_vec();
        let (batch, s, d) = (shape[0], shape[1], shape[2]);
        let mut pool = vec![0.0; batch * batch * s];
        for (r, &len) in src_lengths.iter().enumerate() {
            for j in 0..len.min(s) {
                pool[r * batch * s + r * s + j] = 1.0 / len as f64;
            }
        }
        let pool = tape.constant(Tensor::new(&[batch, batch * s], pool)?);
        let flat = tape.reshape(enc, &[batch * s, d])?;
        let pooled = tape.matmul(pool, flat)?;
        let logits = tape.matmul(pooled, v[w])?;
        Ok(tape.add_row(logits, v[b])?)
    }

    /// Length-offset distribution for one source; index `i` is offset `i - Δ`.
    pub fn predict_length(&self, src: &EncodedSource) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::inference();
        let v = self.store.bind(&mut tape);
        let d = self.cfg.d_model;
        let enc = tape.constant(Tensor::new(&[1, src.len, d], src.memory.clone())?);
        let logits = self.length_logits(&mut tape, &v, enc, &[src.len])?;
        let p = tape.softmax(logits);
        Ok(tape.value(p).data().to_vec())
    }

    /// Runs the encoder once for a single source.
    pub fn encode_source(&self, src: &[u32]) -> Result<EncodedSource, ModelError> {
        let mut tape = Tape::inference();
        let v = self.store.bind(&mut tape);
        let m = TokenMatrix::from_seqs(&[src], PAD);
        let enc = self.encode(&mut tape, &v, &m, &mut None)?;
        let memory = tape.value(enc).data().to_vec();
        let d = self.cfg.d_model;
        let cross = self
            .dec
            .iter()
            .map(|l| {
                (
                    self.linear_rows(&memory, src.len(), l.cross.wk, l.cross.bk),
                    self.linear_rows(&memory, src.len(), l.cross.wv, l.cross.bv),
                )
            })
            .collect();
        debug_assert_eq!(memory.len(), src.len() * d);
        Ok(EncodedSource {
            len: src.len(),
            memory,
            cross,
        })
    }

    /// Parallel logits `[L, V]` for one encoded source, reusing its encoder
    /// states across refinement passes.
    pub fn nat_logits(&self, src: &EncodedSource, dec_in: &[u32]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::inference();
        let v = self.store.bind(&mut tape);
        let d = self.cfg.d_model;
        let enc = tape.constant(Tensor::new(&[1, src.len, d], src.memory.clone())?);
        let m = TokenMatrix::from_seqs(&[dec_in], PAD);
        let logits = self.decode(&mut tape, &v, enc, &[src.len], &m, &mut None)?;
        Ok(tape.value(logits).data().to_vec())
    }

    fn p(&self, slot: usize) -> &[f64] {
        self.store.tensor(slot).data()
    }

    /// `x[rows, k] · W + b` on raw slices.
    fn linear_rows(&self, x: &[f64], rows: usize, w: usize, b: usize) -> Vec<f64> {
        let wt = self.store.tensor(w);
        let (k, n) = (wt.shape()[0], wt.shape()[1]);
        let mut out = vec![0.0; rows * n];
        kernels::matmul_seq(x, wt.data(), &mut out, rows, k, n);
        let bias = self.p(b);
        for row in out.chunks_exact_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        out
    }

    fn ln_row(&self, x: &[f64], ln: Ln) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        kernels::layer_norm_row(x, self.p(ln.g), self.p(ln.b), LN_EPS, &mut out);
        out
    }

    /// Multi-head attention of one query row over `n` cached key/value rows.
    fn attend(&self, q: &[f64], keys: &[f64], values: &[f64], n: usize) -> Vec<f64> {
        let d = self.cfg.d_model;
        let h = self.cfg.n_heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; d];
        let mut scores = vec![0.0; n];
        for head in 0..h {
            let qh = &q[head * dh..(head + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = kernels::dot(qh, &keys[j * d + head * dh..j * d + (head + 1) * dh]) * scale;
            }
            kernels::softmax_row(&mut scores);
            let o = &mut out[head * dh..(head + 1) * dh];
            for (j, &p) in scores.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (ov, &vv) in o.iter_mut().zip(&values[j * d + head * dh..j * d + (head + 1) * dh]) {
                    *ov += p * vv;
                }
            }
        }
        out
    }

    pub fn start_decoding(&self) -> DecodeState {
        DecodeState {
            pos: 0,
            cache: vec![(Vec::new(), Vec::new()); self.dec.len()],
        }
    }

    /// Consumes one target token and returns the next-token logits `[V]`,
    /// equal to the matching row of [`Self::ar_forward`].
    pub fn ar_decode_step(&self, src: &EncodedSource, state: &mut DecodeState, token: u32) -> Result<Vec<f64>, ModelError> {
        if self.is_parallel() {
            return Err(ModelError::Unsupported("incremental decoding needs an autoregressive model".into()));
        }
        if state.pos >= self.cfg.max_positions {
            return Err(ModelError::PositionOverflow {
                len: state.pos + 1,
                max: self.cfg.max_positions,
            });
        }
        self.check_ids(&[token])?;
        let d = self.cfg.d_model;
        let scale = (d as f64).sqrt();
        let pos = state.pos;
        let emb = self.store.tensor(self.embed).row(token as usize);
        let mut x: Vec<f64> = emb
            .iter()
            .zip(&self.positions[pos * d..(pos + 1) * d])
            .map(|(e, p)| e * scale + p)
            .collect();
        let add = |x: &mut Vec<f64>, y: &[f64]| x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
        for (l, layer) in self.dec.iter().enumerate() {
            let h = self.ln_row(&x, layer.ln1);
            let q = self.linear_rows(&h, 1, layer.attn.wq, layer.attn.bq);
            let k = self.linear_rows(&h, 1, layer.attn.wk, layer.attn.bk);
            let v = self.linear_rows(&h, 1, layer.attn.wv, layer.attn.bv);
            let (ck, cv) = &mut state.cache[l];
            ck.extend_from_slice(&k);
            cv.extend_from_slice(&v);
            let a = self.attend(&q, ck, cv, pos + 1);
            let o = self.linear_rows(&a, 1, layer.attn.wo, layer.attn.bo);
            add(&mut x, &o);

            let h = self.ln_row(&x, layer.ln2);
            let q = self.linear_rows(&h, 1, layer.cross.wq, layer.cross.bq);
            let (sk, sv) = &src.cross[l];
            let a = self.attend(&q, sk, sv, src.len);
            let o = self.linear_rows(&a, 1, layer.cross.wo, layer.cross.bo);
            add(&mut x, &o);

            let h = self.ln_row(&x, layer.ln3);
            let mut f = self.linear_rows(&h, 1, layer.ffn.w1, layer.ffn.b1);
            f.iter_mut().for_each(|z| *z = z.max(0.0));
            let o = self.linear_rows(&f, 1, layer.ffn.w2, layer.ffn.b2);
            add(&mut x, &o);
        }
        let x = self.ln_row(&x, self.dec_ln);
        state.pos += 1;
        Ok(self.linear_rows(&x, 1, self.out_w, self.out_b))
    }

    /// Placeholder decoder input and content targets for a parallel batch.
    pub fn nat_inputs(tgt: &TokenMatrix) -> (TokenMatrix, Vec<Vec<u32>>) {
        let content: Vec<Vec<u32>> = (0..tgt.rows).map(|r| strip_bos_eos(tgt.seq(r)).to_vec()).collect();
        let placeholders: Vec<Vec<u32>> = content.iter().map(|c| vec![MASK; c.len()]).collect();
        (TokenMatrix::from_seqs(&placeholders, PAD), content)
    }
}

/// Target content without the surrounding bos/eos.
pub fn strip_bos_eos(seq: &[u32]) -> &[u32] {
    let s = match seq.first() {
        Some(&t) if t == crate::pipeline::BOS => &seq[1..],
        _ => seq,
    };
    match s.last() {
        Some(&t) if t == crate::pipeline::EOS => &s[..s.len() - 1],
        _ => s,
    }
}

/// Flattens ragged target rows to `rows × cols` ids, pad-filled.
pub(crate) fn padded_targets(rows: &[Vec<u32>], cols: usize) -> Vec<usize> {
    let mut out = vec![PAD as usize; rows.len() * cols];
    for (r, row) in rows.iter().enumerate() {
        for (c, &t) in row.iter().enumerate() {
            out[r * cols + c] = t as usize;
        }
    }
    out
}

impl SeqModel for Transformer {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn teacher_forced(&self, tape: &mut Tape, v: &[Var], batch: &Batch, rng: DropRng<'_>) -> Result<(Var, Vec<usize>), ModelError> {
        let tgt = batch.tgt.as_ref().ok_or(ModelError::MissingTarget)?;
        if self.is_parallel() {
            let (dec_in, content) = Self::nat_inputs(tgt);
            let (logits, _) = self.nat_forward(tape, v, &batch.src, &dec_in, rng)?;
            return Ok((logits, padded_targets(&content, dec_in.cols)));
        }
        let inputs: Vec<&[u32]> = (0..tgt.rows).map(|r| &tgt.seq(r)[..tgt.lengths[r].saturating_sub(1)]).collect();
        let outputs: Vec<Vec<u32>> = (0..tgt.rows).map(|r| tgt.seq(r).get(1..).unwrap_or(&[]).to_vec()).collect();
        let tgt_in = TokenMatrix::from_seqs(&inputs, PAD);
        let logits = self.ar_forward(tape, v, &batch.src, &tgt_in, rng)?;
        Ok((logits, padded_targets(&outputs, tgt_in.cols)))
    }

    fn as_transformer(&self) -> Option<&Transformer> {
        Some(self)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
