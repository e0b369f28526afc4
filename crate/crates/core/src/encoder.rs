//! Context-limited acoustic encoder: strided downsampling frontend, then
//! blocks of chunk-masked self-attention with rotary positions, a
//! feed-forward layer, and a short causal mixing layer whose reach stays
//! inside the attention look-back so the receptive-field accounting of the
//! masking module is exact.

use crate::attn::{multi_head, MhaParams};
use crate::ctc::RESERVED;
use crate::error::{Error, Result};
use crate::masking::{attendable_range, context_profile_offset, ContextProfile, MaskSpec};
use crate::tensor::{init_linear, ParamId, ParamStore, Tape, TensorId};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Raw acoustic input: a (frames x feat_dim) matrix.
#[derive(Debug, Clone)]
pub struct AcousticStream {
    pub feat_dim: usize,
    pub frames: usize,
    pub features: Vec<f64>,
}

impl AcousticStream {
    pub fn new(features: Vec<f64>, feat_dim: usize) -> Self {
        assert_eq!(features.len() % feat_dim, 0);
        Self {
            feat_dim,
            frames: features.len() / feat_dim,
            features,
        }
    }
}

/// Encoder output with the context metadata needed to classify frames.
#[derive(Debug, Clone)]
pub struct EncodingSequence {
    pub frames: usize,
    pub d: usize,
    /// Row-major (frames x d).
    pub data: Vec<f64>,
    pub profile: ContextProfile,
    pub spec: MaskSpec,
    /// Encoding-frame offset of this stream within its global grid.
    pub offset: usize,
}

impl EncodingSequence {
    /// Rows [t_b, t_e] inclusive.
    pub fn rows(&self, t_b: usize, t_e: usize) -> &[f64] {
        &self.data[t_b * self.d..(t_e + 1) * self.d]
    }
}

/// Architecture of the encoder. `m` is the canonical chunk size used at
/// inference; `m_list` is sampled per batch during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub l: usize,
    pub n: usize,
    pub m: usize,
    pub m_list: Vec<usize>,
    pub r: usize,
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub feat_dim: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            l: 2,
            n: 4,
            m: 2,
            m_list: vec![2, 8],
            r: 2,
            d: 32,
            heads: 4,
            ff: 64,
            feat_dim: 8,
            vocab: 20,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec {
            l: self.l,
            n: self.n,
            m: self.m,
            r: self.r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        MaskSpec::new(self.l, self.n, self.m, self.r)?;
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must divide into {} heads",
                self.d, self.heads
            )));
        }
        if (self.d / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary positions",
                self.d / self.heads
            )));
        }
        if self.vocab <= RESERVED {
            return Err(Error::Config(format!(
                "vocab {} must exceed the {} reserved ids",
                self.vocab, RESERVED
            )));
        }
        if self.m_list.is_empty() || !self.m_list.contains(&self.m) {
            return Err(Error::Config(
                "m_list must be non-empty and contain the canonical chunk size".into(),
            ));
        }
        Ok(())
    }
}

struct EncBlock {
    ln1: (ParamId, ParamId),
    attn: MhaParams,
    ln2: (ParamId, ParamId),
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
    ln3: (ParamId, ParamId),
    mix_k0: ParamId,
    mix_k1: ParamId,
    mix_b: ParamId,
    mix_wp: ParamId,
    mix_bp: ParamId,
}

/// The encoder's parameter handles; weights live in the shared store.
pub struct Encoder {
    pub cfg: EncoderConfig,
    frontend_w: ParamId,
    frontend_b: ParamId,
    blocks: Vec<EncBlock>,
    final_ln: (ParamId, ParamId),
}

const LN_EPS: f64 = 1e-6;

fn add_ln(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    let g = store.add(&format!("{name}.g"), (1, d), vec![1.0; d]);
    let b = store.add(&format!("{name}.b"), (1, d), vec![0.0; d]);
    (g, b)
}

impl Encoder {
    pub fn build(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let fan_in = cfg.r * cfg.feat_dim;
        let frontend_w = store.add(
            "enc.frontend.w",
            (fan_in, d),
            init_linear(rng, fan_in, fan_in * d),
        );
        let frontend_b = store.add("enc.frontend.b", (1, d), vec![0.0; d]);
        let mut blocks = Vec::with_capacity(cfg.l);
        for i in 0..cfg.l {
            let p = format!("enc.block{i}");
            blocks.push(EncBlock {
                ln1: add_ln(store, &format!("{p}.ln1"), d),
                attn: MhaParams::build(store, &format!("{p}.attn"), d, rng),
                ln2: add_ln(store, &format!("{p}.ln2"), d),
                ff_w1: store.add(
                    &format!("{p}.ff.w1"),
                    (d, cfg.ff),
                    init_linear(rng, d, d * cfg.ff),
                ),
                ff_b1: store.add(&format!("{p}.ff.b1"), (1, cfg.ff), vec![0.0; cfg.ff]),
                ff_w2: store.add(
                    &format!("{p}.ff.w2"),
                    (cfg.ff, d),
                    init_linear(rng, cfg.ff, cfg.ff * d),
                ),
                ff_b2: store.add(&format!("{p}.ff.b2"), (1, d), vec![0.0; d]),
                ln3: add_ln(store, &format!("{p}.ln3"), d),
                mix_k0: store.add(&format!("{p}.mix.k0"), (1, d), init_linear(rng, 2, d)),
                mix_k1: store.add(&format!("{p}.mix.k1"), (1, d), init_linear(rng, 2, d)),
                mix_b: store.add(&format!("{p}.mix.b"), (1, d), vec![0.0; d]),
                mix_wp: store.add(&format!("{p}.mix.wp"), (d, d), init_linear(rng, d, d * d)),
                mix_bp: store.add(&format!("{p}.mix.bp"), (1, d), vec![0.0; d]),
            });
        }
        let final_ln = add_ln(store, "enc.final_ln", d);
        Ok(Self {
            cfg: cfg.clone(),
            frontend_w,
            frontend_b,
            blocks,
            final_ln,
        })
    }

    /// Stack each stride window of `r` acoustic frames into one row.
    fn frontend_rows(&self, features: &[f64], frames: usize) -> (Vec<f64>, usize) {
        let r = self.cfg.r;
        let f = self.cfg.feat_dim;
        let t = frames / r;
        let mut rows = vec![0.0; t * r * f];
        rows.copy_from_slice(&features[..t * r * f]);
        (rows, t)
    }

    /// Strided learned projection reducing time by exactly `r`.
    pub fn downsample_frontend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &[f64],
        frames: usize,
    ) -> Result<(TensorId, usize)> {
        if frames < self.cfg.r {
            return Err(Error::InputTooShort {
                len: frames,
                min: self.cfg.r,
            });
        }
        let (rows, t) = self.frontend_rows(features, frames);
        let x = tape.leaf(rows, (t, self.cfg.r * self.cfg.feat_dim));
        let w = tape.param(store, self.frontend_w);
        let b = tape.param(store, self.frontend_b);
        let y = tape.matmul(x, w)?;
        let y = tape.add_row(y, b)?;
        Ok((y, t))
    }

    fn mask_bias(&self, tape: &mut Tape, t: usize, offset: usize, chunk_m: usize) -> TensorId {
        let spec = MaskSpec {
            m: chunk_m,
            ..self.cfg.mask_spec()
        };
        let mut bias = vec![f64::NEG_INFINITY; t * t];
        for q in 0..t {
            let (lo, hi) = attendable_range(&spec, q, t, offset);
            for k in lo..=hi {
                bias[q * t + k] = 0.0;
            }
        }
        tape.leaf(bias, (t, t))
    }

    fn block_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: &EncBlock,
        x: TensorId,
        positions: &[usize],
        mask_bias: TensorId,
    ) -> Result<TensorId> {
        let d = self.cfg.d;
        let t = tape.shape(x).0;

        let g1 = tape.param(store, block.ln1.0);
        let b1 = tape.param(store, block.ln1.1);
        let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let attn = multi_head(
            tape,
            store,
            &block.attn,
            h,
            h,
            self.cfg.heads,
            Some(positions),
            Some(positions),
            Some(mask_bias),
        )?;
        let x = tape.add(x, attn)?;

        let g2 = tape.param(store, block.ln2.0);
        let b2 = tape.param(store, block.ln2.1);
        let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let w1 = tape.param(store, block.ff_w1);
        let fb1 = tape.param(store, block.ff_b1);
        let w2 = tape.param(store, block.ff_w2);
        let fb2 = tape.param(store, block.ff_b2);
        let f = tape.matmul(h, w1)?;
        let f = tape.add_row(f, fb1)?;
        let f = tape.silu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, fb2)?;
        let x = tape.add(x, f)?;

        let g3 = tape.param(store, block.ln3.0);
        let b3 = tape.param(store, block.ln3.1);
        let h = tape.layer_norm(x, g3, b3, LN_EPS)?;
        let prev = self.shift_rows(tape, h, t, d)?;
        let mix = self.mix_forward(tape, store, block, h, prev)?;
        tape.add(x, mix)
    }

    /// Rows shifted down by one, zero at the top: the causal mixing input.
    fn shift_rows(&self, tape: &mut Tape, h: TensorId, t: usize, d: usize) -> Result<TensorId> {
        let zero = tape.leaf(vec![0.0; d], (1, d));
        if t == 1 {
            return Ok(zero);
        }
        let body = tape.slice_rows(h, 0, t - 1)?;
        tape.concat_rows(&[zero, body])
    }

    fn mix_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: &EncBlock,
        h: TensorId,
        prev: TensorId,
    ) -> Result<TensorId> {
        let k0 = tape.param(store, block.mix_k0);
        let mb = tape.param(store, block.mix_b);
        let mut pre = tape.mul_row(h, k0)?;
        // With no look-back budget the mixing layer must stay pointwise.
        if self.cfg.n >= 1 {
            let k1 = tape.param(store, block.mix_k1);
            let shifted = tape.mul_row(prev, k1)?;
            pre = tape.add(pre, shifted)?;
        }
        let pre = tape.add_row(pre, mb)?;
        let act = tape.silu(pre);
        let wp = tape.param(store, block.mix_wp);
        let bp = tape.param(store, block.mix_bp);
        let out = tape.matmul(act, wp)?;
        tape.add_row(out, bp)
    }

    /// Full forward on an existing tape; training runs through this.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &[f64],
        frames: usize,
        offset: usize,
        chunk_m: usize,
    ) -> Result<(TensorId, usize)> {
        let (mut x, t) = self.downsample_frontend(tape, store, features, frames)?;
        let positions: Vec<usize> = (offset..offset + t).collect();
        let mask_bias = self.mask_bias(tape, t, offset, chunk_m);
        for block in &self.blocks {
            x = self.block_forward(tape, store, block, x, &positions, mask_bias)?;
        }
        let g = tape.param(store, self.final_ln.0);
        let b = tape.param(store, self.final_ln.1);
        tape.layer_norm(x, g, b, LN_EPS).map(|y| (y, t))
    }

    /// Encode a stream, attaching its context profile. `offset` anchors the
    /// chunk grid and rotary indices when the stream is a window cut out of
    /// a longer one.
    pub fn encode_offset(
        &self,
        store: &ParamStore,
        stream: &AcousticStream,
        offset: usize,
    ) -> Result<EncodingSequence> {
        let mut tape = Tape::new();
        let (y, t) =
            self.forward_on_tape(&mut tape, store, &stream.features, stream.frames, offset, self.cfg.m)?;
        let spec = self.cfg.mask_spec();
        Ok(EncodingSequence {
            frames: t,
            d: self.cfg.d,
            data: tape.value(y).to_vec(),
            profile: context_profile_offset(&spec, t, offset)?,
            spec,
            offset,
        })
    }

    pub fn encode(&self, store: &ParamStore, stream: &AcousticStream) -> Result<EncodingSequence> {
        self.encode_offset(store, stream, 0)
    }

    /// Incremental evaluation over chunk-aligned pieces of a stream, with a
    /// per-block cache of `n` input rows and one pre-mix row. Matches
    /// `encode` on the concatenated stream to float accumulation order.
    pub fn streaming_encode(
        &self,
        store: &ParamStore,
        chunks: &[Vec<f64>],
    ) -> Result<EncodingSequence> {
        let unit = self.cfg.m * self.cfg.r;
        for c in chunks {
            let rows = c.len() / self.cfg.feat_dim;
            if rows == 0 || rows % unit != 0 {
                return Err(Error::MisalignedChunk { len: rows, unit });
            }
        }
        let d = self.cfg.d;
        let mut caches: Vec<StreamCache> = (0..self.cfg.l).map(|_| StreamCache::new()).collect();
        let mut out = Vec::new();
        let mut done = 0usize; // encoding frames emitted so far

        for chunk in chunks {
            let frames = chunk.len() / self.cfg.feat_dim;
            let mut tape = Tape::new();
            let (mut x, tc) = self.downsample_frontend(&mut tape, store, chunk, frames)?;
            let positions: Vec<usize> = (done..done + tc).collect();
            for (block, cache) in self.blocks.iter().zip(caches.iter_mut()) {
                x = self.streaming_block(&mut tape, store, block, cache, x, &positions, done, tc)?;
            }
            let g = tape.param(store, self.final_ln.0);
            let b = tape.param(store, self.final_ln.1);
            let y = tape.layer_norm(x, g, b, LN_EPS)?;
            out.extend_from_slice(tape.value(y));
            done += tc;
        }

        let spec = self.cfg.mask_spec();
        Ok(EncodingSequence {
            frames: done,
            d,
            data: out,
            profile: context_profile_offset(&spec, done, 0)?,
            spec,
            offset: 0,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn streaming_block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: &EncBlock,
        cache: &mut StreamCache,
        x: TensorId,
        positions: &[usize],
        global_start: usize,
        tc: usize,
    ) -> Result<TensorId> {
        let d = self.cfg.d;
        let n = self.cfg.n;
        let spec = self.cfg.mask_spec();

        // Keys: cached block-input rows followed by this chunk's rows.
        let cached = cache.input_rows.len() / d;
        let kv_in = if cached > 0 {
            let prev = tape.leaf(cache.input_rows.clone(), (cached, d));
            tape.concat_rows(&[prev, x])?
        } else {
            x
        };
        let key_start = global_start - cached;
        let key_pos: Vec<usize> = (key_start..global_start + tc).collect();

        let g1 = tape.param(store, block.ln1.0);
        let b1 = tape.param(store, block.ln1.1);
        let h_all = tape.layer_norm(kv_in, g1, b1, LN_EPS)?;
        let h_q = tape.slice_rows(h_all, cached, tc)?;

        let total_keys = cached + tc;
        let mut bias = vec![f64::NEG_INFINITY; tc * total_keys];
        for (qi, bias_row) in bias.chunks_mut(total_keys).enumerate() {
            let gq = global_start + qi;
            let lo = gq.saturating_sub(n).max(key_start);
            let hi = spec.chunk_end(gq, global_start + tc);
            for k in lo..=hi {
                bias_row[k - key_start] = 0.0;
            }
        }
        let bias = tape.leaf(bias, (tc, total_keys));
        let attn = multi_head(
            tape,
            store,
            &block.attn,
            h_q,
            h_all,
            self.cfg.heads,
            Some(positions),
            Some(&key_pos),
            Some(bias),
        )?;
        let x_mid = tape.add(x, attn)?;

        let g2 = tape.param(store, block.ln2.0);
        let b2 = tape.param(store, block.ln2.1);
        let h = tape.layer_norm(x_mid, g2, b2, LN_EPS)?;
        let w1 = tape.param(store, block.ff_w1);
        let fb1 = tape.param(store, block.ff_b1);
        let w2 = tape.param(store, block.ff_w2);
        let fb2 = tape.param(store, block.ff_b2);
        let f = tape.matmul(h, w1)?;
        let f = tape.add_row(f, fb1)?;
        let f = tape.silu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, fb2)?;
        let x_mid2 = tape.add(x_mid, f)?;

        let g3 = tape.param(store, block.ln3.0);
        let b3 = tape.param(store, block.ln3.1);
        // Normalize the carried row together with the chunk so the shifted
        // input matches the full-stream computation.
        let premix = if let Some(row) = &cache.premix_row {
            let prev = tape.leaf(row.clone(), (1, d));
            tape.concat_rows(&[prev, x_mid2])?
        } else {
            x_mid2
        };
        let h_m = tape.layer_norm(premix, g3, b3, LN_EPS)?;
        let rows = tape.shape(h_m).0;
        let h_cur = tape.slice_rows(h_m, rows - tc, tc)?;
        let prev = if rows > tc {
            tape.slice_rows(h_m, rows - tc - 1, tc)?
        } else {
            self.shift_rows(tape, h_cur, tc, d)?
        };
        let mix = self.mix_forward(tape, store, block, h_cur, prev)?;
        let x_out = tape.add(x_mid2, mix)?;

        // Advance caches: keep the last n block-input rows and the last
        // pre-mix row for the next chunk.
        let kv_vals = tape.value(kv_in);
        let keep = n.min(total_keys);
        cache.input_rows = kv_vals[(total_keys - keep) * d..].to_vec();
        let mid_vals = tape.value(x_mid2);
        cache.premix_row = Some(mid_vals[(tc - 1) * d..].to_vec());

        Ok(x_out)
    }
}

struct StreamCache {
    input_rows: Vec<f64>,
    premix_row: Option<Vec<f64>>,
}

impl StreamCache {
    fn new() -> Self {
        Self {
            input_rows: Vec::new(),
            premix_row: None,
        }
    }
}
