//! Autoregressive attention decoder. Cross-attention keys and values come
//! from the acoustic encodings of the segment being decoded, optionally
//! augmented with absolute positional codes whose indices restart at zero
//! for every segment.

use crate::attn::{attend, multi_head, rotate_heads, MhaParams};
use crate::error::{Error, Result};
use crate::tensor::{init_linear, init_normal, ParamId, ParamStore, Tape, TensorId};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeKind {
    Learned,
    Sinusoidal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub blocks: usize,
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub p_max: usize,
    pub pe_kind: PeKind,
    pub pe_enabled: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            d: 32,
            heads: 4,
            ff: 64,
            p_max: 256,
            pe_kind: PeKind::Learned,
            pe_enabled: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, enc_d: usize) -> Result<()> {
        if self.d != enc_d {
            return Err(Error::Config(format!(
                "decoder width {} must match encoder width {enc_d}",
                self.d
            )));
        }
        if self.blocks == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config("bad decoder block/head geometry".into()));
        }
        if (self.d / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "decoder head dimension {} must be even for rotary positions",
                self.d / self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum PeTable {
    Learned(ParamId),
    Fixed(Vec<f64>),
}

/// Absolute position codes added to a segment's encodings before the
/// cross-attention key/value projections. Indices reset per segment.
#[derive(Debug, Clone)]
pub struct SegmentPe {
    pub p_max: usize,
    pub d: usize,
    pub kind: PeKind,
    table: PeTable,
}

impl SegmentPe {
    fn build(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let table = match cfg.pe_kind {
            PeKind::Learned => PeTable::Learned(store.add(
                "dec.segment_pe",
                (cfg.p_max, cfg.d),
                init_normal(rng, cfg.p_max * cfg.d, 0.02),
            )),
            PeKind::Sinusoidal => PeTable::Fixed(sinusoidal_table(cfg.p_max, cfg.d)),
        };
        Self {
            p_max: cfg.p_max,
            d: cfg.d,
            kind: cfg.pe_kind,
            table,
        }
    }

    /// Raw table values (p_max x d).
    pub fn table_values(&self, store: &ParamStore) -> Vec<f64> {
        match &self.table {
            PeTable::Learned(id) => store.slot(*id).data.clone(),
            PeTable::Fixed(v) => v.clone(),
        }
    }

    fn table_on_tape(&self, tape: &mut Tape, store: &ParamStore) -> TensorId {
        match &self.table {
            PeTable::Learned(id) => tape.param(store, *id),
            PeTable::Fixed(v) => tape.leaf(v.clone(), (self.p_max, self.d)),
        }
    }
}

fn sinusoidal_table(p_max: usize, d: usize) -> Vec<f64> {
    let mut t = vec![0.0; p_max * d];
    for pos in 0..p_max {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            t[pos * d + 2 * i] = angle.sin();
            t[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    t
}

/// Add per-segment position codes to segment encodings. Disabled means
/// identity. Returns the injected tensor and the table index range used,
/// exposed so callers can assert the per-segment reset.
pub fn inject_segment_pe(
    tape: &mut Tape,
    store: &ParamStore,
    h_seg: TensorId,
    pe: &SegmentPe,
    enabled: bool,
) -> Result<(TensorId, Option<(usize, usize)>)> {
    if !enabled {
        return Ok((h_seg, None));
    }
    let (s, _) = tape.shape(h_seg);
    if s > pe.p_max {
        return Err(Error::SegmentTooLong {
            len: s,
            p_max: pe.p_max,
        });
    }
    let table = pe.table_on_tape(tape, store);
    let rows = tape.slice_rows(table, 0, s)?;
    let out = tape.add(h_seg, rows)?;
    Ok((out, Some((0, s))))
}

struct DecBlock {
    ln1: (ParamId, ParamId),
    self_attn: MhaParams,
    ln2: (ParamId, ParamId),
    cross_attn: MhaParams,
    ln3: (ParamId, ParamId),
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
}

/// Decoder parameter handles. Weights live in the shared store.
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub vocab: usize,
    embed: ParamId,
    pub pe: SegmentPe,
    blocks: Vec<DecBlock>,
    final_ln: (ParamId, ParamId),
    out_w: ParamId,
    out_b: ParamId,
}

const LN_EPS: f64 = 1e-6;

fn add_ln(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    let g = store.add(&format!("{name}.g"), (1, d), vec![1.0; d]);
    let b = store.add(&format!("{name}.b"), (1, d), vec![0.0; d]);
    (g, b)
}

impl Decoder {
    pub fn build(
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        vocab: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cfg.d;
        let embed = store.add(
            "dec.embed",
            (vocab, d),
            init_normal(rng, vocab * d, 0.02),
        );
        let pe = SegmentPe::build(store, cfg, rng);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let p = format!("dec.block{i}");
            blocks.push(DecBlock {
                ln1: add_ln(store, &format!("{p}.ln1"), d),
                self_attn: MhaParams::build(store, &format!("{p}.self"), d, rng),
                ln2: add_ln(store, &format!("{p}.ln2"), d),
                cross_attn: MhaParams::build(store, &format!("{p}.cross"), d, rng),
                ln3: add_ln(store, &format!("{p}.ln3"), d),
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
            });
        }
        let final_ln = add_ln(store, "dec.final_ln", d);
        let out_w = store.add("dec.out.w", (d, vocab), init_linear(rng, d, d * vocab));
        let out_b = store.add("dec.out.b", (1, vocab), vec![0.0; vocab]);
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            embed,
            pe,
            blocks,
            final_ln,
            out_w,
            out_b,
        })
    }

    /// Standard multi-head dot-product attention over segment encodings,
    /// using the given block's cross-attention projections. No mask: the
    /// whole segment is visible.
    pub fn cross_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: usize,
        queries: TensorId,
        memory: TensorId,
    ) -> Result<TensorId> {
        if tape.shape(memory).0 == 0 {
            return Err(Error::EmptyMemory);
        }
        multi_head(
            tape,
            store,
            &self.blocks[block].cross_attn,
            queries,
            memory,
            self.cfg.heads,
            None,
            None,
            None,
        )
    }

    fn block_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: &DecBlock,
        x: TensorId,
        positions: &[usize],
        causal_bias: TensorId,
        memory: TensorId,
    ) -> Result<TensorId> {
        let g1 = tape.param(store, block.ln1.0);
        let b1 = tape.param(store, block.ln1.1);
        let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let sa = multi_head(
            tape,
            store,
            &block.self_attn,
            h,
            h,
            self.cfg.heads,
            Some(positions),
            Some(positions),
            Some(causal_bias),
        )?;
        let x = tape.add(x, sa)?;

        let g2 = tape.param(store, block.ln2.0);
        let b2 = tape.param(store, block.ln2.1);
        let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let ca = multi_head(
            tape,
            store,
            &block.cross_attn,
            h,
            memory,
            self.cfg.heads,
            None,
            None,
            None,
        )?;
        let x = tape.add(x, ca)?;

        let g3 = tape.param(store, block.ln3.0);
        let b3 = tape.param(store, block.ln3.1);
        let h = tape.layer_norm(x, g3, b3, LN_EPS)?;
        let w1 = tape.param(store, block.ff_w1);
        let fb1 = tape.param(store, block.ff_b1);
        let w2 = tape.param(store, block.ff_w2);
        let fb2 = tape.param(store, block.ff_b2);
        let f = tape.matmul(h, w1)?;
        let f = tape.add_row(f, fb1)?;
        let f = tape.silu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, fb2)?;
        tape.add(x, f)
    }

    /// Teacher-forced forward over the whole input sequence, returning
    /// logits (U x V). `memory` must already carry its segment codes.
    pub fn teacher_forced_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: TensorId,
        tokens_in: &[usize],
    ) -> Result<TensorId> {
        if tape.shape(memory).0 == 0 {
            return Err(Error::EmptyMemory);
        }
        if tokens_in.is_empty() {
            return Err(Error::EmptyInput {
                what: "decoder input tokens",
            });
        }
        let u = tokens_in.len();
        let embed = tape.param(store, self.embed);
        let mut x = tape.embedding(embed, tokens_in)?;
        let positions: Vec<usize> = (0..u).collect();
        let mut bias = vec![f64::NEG_INFINITY; u * u];
        for q in 0..u {
            for k in 0..=q {
                bias[q * u + k] = 0.0;
            }
        }
        let causal_bias = tape.leaf(bias, (u, u));
        for block in &self.blocks {
            x = self.block_forward(tape, store, block, x, &positions, causal_bias, memory)?;
        }
        let g = tape.param(store, self.final_ln.0);
        let b = tape.param(store, self.final_ln.1);
        let x = tape.layer_norm(x, g, b, LN_EPS)?;
        let w = tape.param(store, self.out_w);
        let ob = tape.param(store, self.out_b);
        let logits = tape.matmul(x, w)?;
        tape.add_row(logits, ob)
    }

    /// Teacher-forced cross-entropy over `targets` (which end with EOS).
    pub fn aed_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: TensorId,
        targets: &[usize],
        bos: usize,
    ) -> Result<TensorId> {
        if targets.is_empty() {
            return Err(Error::EmptyInput {
                what: "decoder targets",
            });
        }
        let mut tokens_in = Vec::with_capacity(targets.len());
        tokens_in.push(bos);
        tokens_in.extend_from_slice(&targets[..targets.len() - 1]);
        let logits = self.teacher_forced_logits(tape, store, memory, &tokens_in)?;
        let t: Vec<i64> = targets.iter().map(|&x| x as i64).collect();
        tape.cross_entropy(logits, &t, -1)
    }
}

/// Per-hypothesis decoder state: one cache row per consumed token.
#[derive(Debug, Clone, Default)]
pub struct DecoderState {
    pub tokens: Vec<usize>,
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
}

impl DecoderState {
    fn new(blocks: usize) -> Self {
        Self {
            tokens: Vec::new(),
            self_k: vec![Vec::new(); blocks],
            self_v: vec![Vec::new(); blocks],
        }
    }
}

/// Incremental decoding session over one segment: cross-attention keys and
/// values are projected once, then each `step` consumes one token.
pub struct SegmentDecoder<'a> {
    dec: &'a Decoder,
    pub s: usize,
    mem_k: Vec<Vec<f64>>,
    mem_v: Vec<Vec<f64>>,
}

impl<'a> SegmentDecoder<'a> {
    /// `memory` is the PE-injected segment slice, row-major (s x d).
    pub fn new(store: &ParamStore, dec: &'a Decoder, memory: &[f64], s: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::EmptyMemory);
        }
        let d = dec.cfg.d;
        debug_assert_eq!(memory.len(), s * d);
        let mut tape = Tape::new();
        let mem = tape.leaf(memory.to_vec(), (s, d));
        let mut mem_k = Vec::with_capacity(dec.blocks.len());
        let mut mem_v = Vec::with_capacity(dec.blocks.len());
        for block in &dec.blocks {
            let wk = tape.param(store, block.cross_attn.wk);
            let bk = tape.param(store, block.cross_attn.bk);
            let wv = tape.param(store, block.cross_attn.wv);
            let bv = tape.param(store, block.cross_attn.bv);
            let k = tape.matmul(mem, wk)?;
            let k = tape.add_row(k, bk)?;
            let v = tape.matmul(mem, wv)?;
            let v = tape.add_row(v, bv)?;
            mem_k.push(tape.value(k).to_vec());
            mem_v.push(tape.value(v).to_vec());
        }
        Ok(Self { dec, s, mem_k, mem_v })
    }

    pub fn start(&self) -> DecoderState {
        DecoderState::new(self.dec.blocks.len())
    }

    /// Feed one token, returning next-token log-probabilities and the
    /// extended state. Stepwise results match the teacher-forced forward.
    pub fn step(
        &self,
        store: &ParamStore,
        state: &DecoderState,
        token: usize,
    ) -> Result<(Vec<f64>, DecoderState)> {
        let dec = self.dec;
        let d = dec.cfg.d;
        let heads = dec.cfg.heads;
        let pos = state.tokens.len();
        let mut next = state.clone();
        next.tokens.push(token);

        let mut tape = Tape::new();
        let embed = tape.param(store, dec.embed);
        let mut x = tape.embedding(embed, &[token])?;

        for (bi, block) in dec.blocks.iter().enumerate() {
            let g1 = tape.param(store, block.ln1.0);
            let b1 = tape.param(store, block.ln1.1);
            let h = tape.layer_norm(x, g1, b1, LN_EPS)?;

            let wq = tape.param(store, block.self_attn.wq);
            let bq = tape.param(store, block.self_attn.bq);
            let wk = tape.param(store, block.self_attn.wk);
            let bk = tape.param(store, block.self_attn.bk);
            let wv = tape.param(store, block.self_attn.wv);
            let bv = tape.param(store, block.self_attn.bv);
            let q = tape.matmul(h, wq)?;
            let q = tape.add_row(q, bq)?;
            let k = tape.matmul(h, wk)?;
            let k = tape.add_row(k, bk)?;
            let v = tape.matmul(h, wv)?;
            let v = tape.add_row(v, bv)?;
            let q_rot = rotate_heads(&mut tape, q, heads, &[pos])?;
            let k_rot = rotate_heads(&mut tape, k, heads, &[pos])?;

            // Extend this block's cache with the new rotated key and value.
            next.self_k[bi].extend_from_slice(tape.value(k_rot));
            next.self_v[bi].extend_from_slice(tape.value(v));
            let rows = pos + 1;
            let k_all = tape.leaf(next.self_k[bi].clone(), (rows, d));
            let v_all = tape.leaf(next.self_v[bi].clone(), (rows, d));
            let sa = attend(
                &mut tape,
                store,
                &block.self_attn,
                q_rot,
                k_all,
                v_all,
                heads,
                None,
                None,
                None,
            )?;
            x = tape.add(x, sa)?;

            let g2 = tape.param(store, block.ln2.0);
            let b2 = tape.param(store, block.ln2.1);
            let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
            let cwq = tape.param(store, block.cross_attn.wq);
            let cbq = tape.param(store, block.cross_attn.bq);
            let cq = tape.matmul(h, cwq)?;
            let cq = tape.add_row(cq, cbq)?;
            let mk = tape.leaf(self.mem_k[bi].clone(), (self.s, d));
            let mv = tape.leaf(self.mem_v[bi].clone(), (self.s, d));
            let ca = attend(
                &mut tape,
                store,
                &block.cross_attn,
                cq,
                mk,
                mv,
                heads,
                None,
                None,
                None,
            )?;
            x = tape.add(x, ca)?;

            let g3 = tape.param(store, block.ln3.0);
            let b3 = tape.param(store, block.ln3.1);
            let h = tape.layer_norm(x, g3, b3, LN_EPS)?;
            let w1 = tape.param(store, block.ff_w1);
            let fb1 = tape.param(store, block.ff_b1);
            let w2 = tape.param(store, block.ff_w2);
            let fb2 = tape.param(store, block.ff_b2);
            let f = tape.matmul(h, w1)?;
            let f = tape.add_row(f, fb1)?;
            let f = tape.silu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row(f, fb2)?;
            x = tape.add(x, f)?;
        }

        let g = tape.param(store, dec.final_ln.0);
        let b = tape.param(store, dec.final_ln.1);
        let x = tape.layer_norm(x, g, b, LN_EPS)?;
        let w = tape.param(store, dec.out_w);
        let ob = tape.param(store, dec.out_b);
        let logits = tape.matmul(x, w)?;
        let logits = tape.add_row(logits, ob)?;
        let lp = tape.log_softmax(logits);
        Ok((tape.value(lp).to_vec(), next))
    }
}

/// PE-injected memory values for inference, plus the table index range used
/// (the instrumentation hook for the per-segment reset).
pub fn build_memory(
    store: &ParamStore,
    dec: &Decoder,
    enc_rows: &[f64],
    s: usize,
) -> Result<(Vec<f64>, Option<(usize, usize)>)> {
    let d = dec.cfg.d;
    debug_assert_eq!(enc_rows.len(), s * d);
    if !dec.cfg.pe_enabled {
        return Ok((enc_rows.to_vec(), None));
    }
    if s > dec.pe.p_max {
        return Err(Error::SegmentTooLong {
            len: s,
            p_max: dec.pe.p_max,
        });
    }
    let table = dec.pe.table_values(store);
    let mut out = enc_rows.to_vec();
    for (o, p) in out.iter_mut().zip(&table[..s * d]) {
        *o += p;
    }
    Ok((out, Some((0, s))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn cfg() -> DecoderConfig {
        DecoderConfig {
            blocks: 2,
            d: 16,
            heads: 2,
            ff: 24,
            p_max: 32,
            pe_kind: PeKind::Learned,
            pe_enabled: true,
        }
    }

    fn build(seed: u64) -> (Decoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dec = Decoder::build(&mut store, &cfg(), 10, &mut rng).unwrap();
        (dec, store)
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<f64> {
        (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn inject_disabled_is_identity() {
        let (dec, store) = build(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = rand_mat(&mut rng, 5, 16);
        let mut tape = Tape::new();
        let ht = tape.leaf(h.clone(), (5, 16));
        let (out, used) = inject_segment_pe(&mut tape, &store, ht, &dec.pe, false).unwrap();
        assert_eq!(tape.value(out), &h[..]);
        assert!(used.is_none());
    }

    #[test]
    fn equal_length_segments_get_identical_codes() {
        let (dec, store) = build(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_mat(&mut rng, 6, 16);
        let b = rand_mat(&mut rng, 6, 16);
        let mut tape = Tape::new();
        let at = tape.leaf(a.clone(), (6, 16));
        let bt = tape.leaf(b.clone(), (6, 16));
        let (ai, ua) = inject_segment_pe(&mut tape, &store, at, &dec.pe, true).unwrap();
        let (bi, ub) = inject_segment_pe(&mut tape, &store, bt, &dec.pe, true).unwrap();
        assert_eq!(ua, Some((0, 6)));
        assert_eq!(ub, Some((0, 6)));
        let delta_a: Vec<f64> = tape.value(ai).iter().zip(&a).map(|(x, y)| x - y).collect();
        let delta_b: Vec<f64> = tape.value(bi).iter().zip(&b).map(|(x, y)| x - y).collect();
        assert_eq!(delta_a, delta_b, "codes must reset per segment");
    }

    #[test]
    fn overlong_segment_is_an_error() {
        let (dec, store) = build(5);
        let mut tape = Tape::new();
        let h = tape.leaf(vec![0.0; 33 * 16], (33, 16));
        let err = inject_segment_pe(&mut tape, &store, h, &dec.pe, true).unwrap_err();
        assert!(matches!(err, Error::SegmentTooLong { len: 33, p_max: 32 }));
    }

    #[test]
    fn single_row_memory_ignores_query_content() {
        let (dec, store) = build(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mem = rand_mat(&mut rng, 1, 16);
        let q1 = rand_mat(&mut rng, 1, 16);
        let q2 = rand_mat(&mut rng, 1, 16);
        let mut tape = Tape::new();
        let m = tape.leaf(mem, (1, 16));
        let a = tape.leaf(q1, (1, 16));
        let b = tape.leaf(q2, (1, 16));
        let ya = dec.cross_attention(&mut tape, &store, 0, a, m).unwrap();
        let yb = dec.cross_attention(&mut tape, &store, 0, b, m).unwrap();
        let delta = tape
            .value(ya)
            .iter()
            .zip(tape.value(yb))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(delta < 1e-12);
    }

    #[test]
    fn cross_attention_is_permutation_invariant_without_pe() {
        let (dec, store) = build(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = 9;
        let mem = rand_mat(&mut rng, s, 16);
        let q = rand_mat(&mut rng, 3, 16);

        let mut perm: Vec<usize> = (0..s).collect();
        for i in (1..s).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut permuted = vec![0.0; s * 16];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 16..(dst + 1) * 16].copy_from_slice(&mem[src * 16..(src + 1) * 16]);
        }

        let mut tape = Tape::new();
        let qt = tape.leaf(q.clone(), (3, 16));
        let m1 = tape.leaf(mem, (s, 16));
        let m2 = tape.leaf(permuted, (s, 16));
        let y1 = dec.cross_attention(&mut tape, &store, 0, qt, m1).unwrap();
        let y2 = dec.cross_attention(&mut tape, &store, 0, qt, m2).unwrap();
        let delta = tape
            .value(y1)
            .iter()
            .zip(tape.value(y2))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(delta <= 1e-12, "permutation changed output by {delta}");
    }

    #[test]
    fn segment_codes_break_permutation_invariance() {
        let (dec, store) = build(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = 8;
        let mem = rand_mat(&mut rng, s, 16);
        let q = rand_mat(&mut rng, 2, 16);

        let mut tape = Tape::new();
        let qt = tape.leaf(q.clone(), (2, 16));

        // inject then transpose rows 2 and 5
        let m = tape.leaf(mem.clone(), (s, 16));
        let (mi, _) = inject_segment_pe(&mut tape, &store, m, &dec.pe, true).unwrap();
        let y_inject_first = {
            let mut swapped = tape.value(mi).to_vec();
            for j in 0..16 {
                swapped.swap(2 * 16 + j, 5 * 16 + j);
            }
            let ms = tape.leaf(swapped, (s, 16));
            dec.cross_attention(&mut tape, &store, 0, qt, ms).unwrap()
        };

        // transpose rows first, then inject
        let mut swapped = mem;
        for j in 0..16 {
            swapped.swap(2 * 16 + j, 5 * 16 + j);
        }
        let ms = tape.leaf(swapped, (s, 16));
        let (msi, _) = inject_segment_pe(&mut tape, &store, ms, &dec.pe, true).unwrap();
        let y_permute_first = dec.cross_attention(&mut tape, &store, 0, qt, msi).unwrap();

        let delta = tape
            .value(y_inject_first)
            .iter()
            .zip(tape.value(y_permute_first))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(delta > 1e-6, "codes must make order matter, delta {delta}");
    }

    #[test]
    fn empty_memory_is_an_error() {
        let (dec, store) = build(12);
        let mut tape = Tape::new();
        let q = tape.leaf(vec![0.0; 16], (1, 16));
        let m = tape.leaf(Vec::new(), (0, 16));
        assert!(matches!(
            dec.cross_attention(&mut tape, &store, 0, q, m),
            Err(Error::EmptyMemory)
        ));
    }

    #[test]
    fn stepwise_decode_matches_teacher_forced() {
        let (dec, store) = build(13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let s = 7;
        let mem = rand_mat(&mut rng, s, 16);
        let tokens_in = vec![1usize, 5, 7, 4, 9];

        let mut tape = Tape::new();
        let m = tape.leaf(mem.clone(), (s, 16));
        let logits = dec
            .teacher_forced_logits(&mut tape, &store, m, &tokens_in)
            .unwrap();
        let lsm = tape.log_softmax(logits);
        let reference = tape.value(lsm).to_vec();

        let session = SegmentDecoder::new(&store, &dec, &mem, s).unwrap();
        let mut state = session.start();
        for (u, &tok) in tokens_in.iter().enumerate() {
            let (lp, next) = session.step(&store, &state, tok).unwrap();
            state = next;
            let row = &reference[u * dec.vocab..(u + 1) * dec.vocab];
            let delta = lp
                .iter()
                .zip(row)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(delta <= 1e-9, "step {u}: delta {delta}");
        }
        assert_eq!(state.tokens, tokens_in);
    }

    #[test]
    fn future_tokens_cannot_affect_earlier_logits() {
        let (dec, store) = build(15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let s = 5;
        let mem = rand_mat(&mut rng, s, 16);

        let run = |tokens: &[usize]| {
            let mut tape = Tape::new();
            let m = tape.leaf(mem.clone(), (s, 16));
            let logits = dec
                .teacher_forced_logits(&mut tape, &store, m, tokens)
                .unwrap();
            tape.value(logits).to_vec()
        };
        let a = run(&[1, 5, 7, 4]);
        let b = run(&[1, 5, 8, 6]);
        // positions 0 and 1 see identical prefixes
        assert_eq!(&a[..2 * dec.vocab], &b[..2 * dec.vocab]);
        assert_ne!(&a[2 * dec.vocab..], &b[2 * dec.vocab..]);
    }

    #[test]
    fn aed_loss_gradients_match_finite_differences() {
        let small = DecoderConfig {
            blocks: 1,
            d: 8,
            heads: 2,
            ff: 8,
            p_max: 16,
            pe_kind: PeKind::Learned,
            pe_enabled: true,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dec = Decoder::build(&mut store, &small, 6, &mut rng).unwrap();
        let mem = rand_mat(&mut rng, 4, 8);
        let targets = vec![4usize, 5, 2];

        let loss = |store: &ParamStore| {
            let mut tape = Tape::new();
            let m = tape.leaf(mem.clone(), (4, 8));
            let (mi, _) = inject_segment_pe(&mut tape, store, m, &dec.pe, true).unwrap();
            let l = dec.aed_loss(&mut tape, store, mi, &targets, 1).unwrap();
            (tape, l)
        };

        store.zero_grad();
        let (mut tape, l) = loss(&store);
        tape.backward(l).unwrap();
        tape.harvest_grads(&mut store);

        let h = 1e-5;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let n = store.slot(id).data.len();
            for j in (0..n).step_by(11.max(n / 4)) {
                let orig = store.slot(id).data[j];
                store.slot_mut(id).data[j] = orig + h;
                let up = {
                    let (t, l) = loss(&store);
                    t.value(l)[0]
                };
                store.slot_mut(id).data[j] = orig - h;
                let down = {
                    let (t, l) = loss(&store);
                    t.value(l)[0]
                };
                store.slot_mut(id).data[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let got = store.slot(id).grad[j];
                let denom = fd.abs().max(1.0);
                assert!(
                    (got - fd).abs() / denom < 1e-4,
                    "{}[{}]: analytic {} vs fd {}",
                    store.slot(id).name,
                    j,
                    got,
                    fd
                );
            }
        }
    }
}
