//! Reverse-mode automatic differentiation over dense 2-D f64 tensors.
//!
//! A `Tape` records every operation of one forward pass (define-by-run) and
//! replays it in reverse for gradients. Model parameters live outside the
//! tape in a `ParamStore`; each pass binds them as leaves and harvests their
//! gradients after `backward`, so repeated backward calls accumulate until
//! `zero_grad`.

use crate::ctc;
use crate::error::{Error, Result};
use rand::Rng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named, trainable buffer with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct ParamSlot {
    pub name: String,
    pub shape: (usize, usize),
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Flat collection of model parameters. Plain data: cheap to clone for
/// read-only snapshots, `Send + Sync`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: Vec<ParamSlot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique within one store.
    pub fn add(&mut self, name: &str, shape: (usize, usize), data: Vec<f64>) -> ParamId {
        assert_eq!(shape.0 * shape.1, data.len(), "param data/shape mismatch");
        assert!(
            self.slots.iter().all(|s| s.name != name),
            "duplicate parameter name {name}"
        );
        let grad = vec![0.0; data.len()];
        self.slots.push(ParamSlot {
            name: name.to_string(),
            shape,
            data,
            grad,
        });
        ParamId(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, id: ParamId) -> &ParamSlot {
        &self.slots[id.0]
    }

    pub fn slot_mut(&mut self, id: ParamId) -> &mut ParamSlot {
        &mut self.slots[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamSlot)> {
        self.slots.iter().enumerate().map(|(i, s)| (ParamId(i), s))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    /// Explicit gradient reset, mirroring the usual training-loop contract.
    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Global L2 norm of all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// (m,k) x (k,n)
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    /// a: (r,c), b: (1,c) added to every row.
    AddRowBroadcast { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    /// a: (r,c), b: (1,c) multiplied into every row.
    MulRowBroadcast { a: TensorId, b: TensorId },
    Scale { a: TensorId, k: f64 },
    Silu { a: TensorId },
    /// axis 1: rows sum to one; axis 0: columns sum to one.
    Softmax { a: TensorId, axis: usize },
    LogSoftmax { a: TensorId },
    LayerNorm {
        a: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Vec<i64>,
        ignore_index: i64,
    },
    CtcLoss {
        log_probs: TensorId,
        target: Vec<usize>,
        blank: usize,
    },
    Embedding { table: TensorId, ids: Vec<usize> },
    /// Rotates column pairs (2i, 2i+1) of each row by its position angle.
    Rotary {
        a: TensorId,
        positions: Vec<usize>,
        base: f64,
    },
    ConcatCols { parts: Vec<TensorId> },
    ConcatRows { parts: Vec<TensorId> },
    SliceCols { a: TensorId, start: usize, len: usize },
    SliceRows { a: TensorId, start: usize, len: usize },
    Sum { a: TensorId },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: (usize, usize),
    op: Op,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(ParamId, TensorId)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: (usize, usize), op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.0 * shape.1);
        self.nodes.push(Node { data, shape, op });
        TensorId(self.nodes.len() - 1)
    }

    /// Record a constant input (no gradient harvested).
    pub fn leaf(&mut self, data: Vec<f64>, shape: (usize, usize)) -> TensorId {
        assert_eq!(data.len(), shape.0 * shape.1, "leaf data/shape mismatch");
        self.push(data, shape, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], (1, 1), Op::Leaf)
    }

    /// Bind a parameter as a leaf; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorId {
        if let Some(&(_, tid)) = self.bindings.iter().find(|(p, _)| *p == id) {
            return tid;
        }
        let slot = store.slot(id);
        let tid = self.push(slot.data.clone(), slot.shape, Op::Leaf);
        self.bindings.push((id, tid));
        tid
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    /// Gradient of the last `backward` root with respect to `id`, if reached.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: (m, k),
                right: (k2, n),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a), self.value(b), m, k, n, &mut out);
        Ok(self.push(out, (m, n), Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(out, (c, r), Op::Transpose { a })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: sa,
                right: sb,
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(out, sa, Op::Add { a, b }))
    }

    /// `a + b` where `b` is a single row broadcast over all rows of `a`.
    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let sb = self.shape(b);
        if sb != (1, c) {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: (r, c),
                right: sb,
            });
        }
        let row = self.value(b).to_vec();
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|ch| ch.iter().zip(&row).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(out, (r, c), Op::AddRowBroadcast { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: sa,
                right: sb,
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(out, sa, Op::Mul { a, b }))
    }

    /// `a * b` element-wise where `b` is a single row broadcast over rows.
    pub fn mul_row(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let sb = self.shape(b);
        if sb != (1, c) {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                left: (r, c),
                right: sb,
            });
        }
        let row = self.value(b).to_vec();
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|ch| ch.iter().zip(&row).map(|(x, y)| x * y))
            .collect();
        Ok(self.push(out, (r, c), Op::MulRowBroadcast { a, b }))
    }

    pub fn scale(&mut self, a: TensorId, k: f64) -> TensorId {
        let s = self.shape(a);
        let out = self.value(a).iter().map(|x| x * k).collect();
        self.push(out, s, Op::Scale { a, k })
    }

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        let s = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        self.push(out, s, Op::Silu { a })
    }

    /// Numerically stabilized softmax along `axis` (1 = across columns).
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if axis > 1 {
            return Err(Error::IndexOutOfRange {
                what: "softmax axis",
                index: axis,
                size: 2,
            });
        }
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        if axis == 1 {
            for i in 0..r {
                softmax_row(&src[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
            }
        } else {
            let mut col = vec![0.0; r];
            let mut buf = vec![0.0; r];
            for j in 0..c {
                for i in 0..r {
                    col[i] = src[i * c + j];
                }
                softmax_row(&col, &mut buf);
                for i in 0..r {
                    out[i * c + j] = buf[i];
                }
            }
        }
        Ok(self.push(out, (r, c), Op::Softmax { a, axis }))
    }

    /// Row-wise log-softmax (used for CTC lattices).
    pub fn log_softmax(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        self.push(out, (r, c), Op::LogSoftmax { a })
    }

    /// Row-wise layer normalization with affine gain/bias of shape (1, c).
    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        for (name, t) in [("gain", gain), ("bias", bias)] {
            let s = self.shape(t);
            if s != (1, c) {
                return Err(Error::ShapeMismatch {
                    op: if name == "gain" {
                        "layer_norm gain"
                    } else {
                        "layer_norm bias"
                    },
                    left: (r, c),
                    right: s,
                });
            }
        }
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let g = self.value(gain).to_vec();
        let b = self.value(bias).to_vec();
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(out, (r, c), Op::LayerNorm { a, gain, bias, eps }))
    }

    /// Mean negative log-likelihood over non-ignored positions.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[i64],
        ignore_index: i64,
    ) -> Result<TensorId> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: (r, c),
                right: (targets.len(), 1),
            });
        }
        for &t in targets {
            if t != ignore_index && (t < 0 || t as usize >= c) {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: t.max(0) as usize,
                    size: c,
                });
            }
        }
        let src = self.value(logits);
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            let row = &src[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[t as usize];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            vec![loss],
            (1, 1),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
            },
        ))
    }

    /// Negative log-probability of `target` under a (T, V) log-prob lattice.
    pub fn ctc_loss(&mut self, log_probs: TensorId, target: &[usize], blank: usize) -> Result<TensorId> {
        let (t_frames, v) = self.shape(log_probs);
        let needed = ctc::min_frames(target);
        if needed > t_frames {
            return Err(Error::InfeasibleAlignment {
                needed,
                frames: t_frames,
            });
        }
        for &t in target {
            if t >= v || t == blank {
                return Err(Error::IndexOutOfRange {
                    what: "ctc target",
                    index: t,
                    size: v,
                });
            }
        }
        let loss = -ctc::log_prob(self.value(log_probs), t_frames, v, target, blank);
        Ok(self.push(
            vec![loss],
            (1, 1),
            Op::CtcLoss {
                log_probs,
                target: target.to_vec(),
                blank,
            },
        ))
    }

    /// Gather rows of `table` at `ids`; backward scatter-adds.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, d) = self.shape(table);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange {
                    what: "embedding id",
                    index: id,
                    size: v,
                });
            }
        }
        let src = self.value(table);
        let mut out = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            out,
            (ids.len(), d),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rotary position transform: row `i` is rotated by `positions[i]`.
    pub fn rotary(&mut self, a: TensorId, positions: &[usize], base: f64) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if c % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary requires an even head dimension, got {c}"
            )));
        }
        if positions.len() != r {
            return Err(Error::ShapeMismatch {
                op: "rotary",
                left: (r, c),
                right: (positions.len(), 1),
            });
        }
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        rotate(src, &mut out, r, c, positions, base, 1.0);
        Ok(self.push(
            out,
            (r, c),
            Op::Rotary {
                a,
                positions: positions.to_vec(),
                base,
            },
        ))
    }

    /// Concatenate along columns; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput {
                what: "concat_cols parts",
            });
        }
        let r = self.shape(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: (r, 0),
                    right: s,
                });
            }
            total += s.1;
        }
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.shape(p);
            // Borrow per part to keep the copy simple.
            let src = self.nodes[p.0].data.clone();
            for i in 0..r {
                out[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        Ok(self.push(
            out,
            (r, total),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Concatenate along rows; all parts must share the column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput {
                what: "concat_rows parts",
            });
        }
        let c = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.1 != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: (0, c),
                    right: s,
                });
            }
            rows += s.0;
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(
            out,
            (rows, c),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::IndexOutOfRange {
                what: "slice_cols",
                index: start + len,
                size: c,
            });
        }
        let src = self.value(a);
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(out, (r, len), Op::SliceCols { a, start, len }))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(Error::IndexOutOfRange {
                what: "slice_rows",
                index: start + len,
                size: r,
            });
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        Ok(self.push(out, (len, c), Op::SliceRows { a, start, len }))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total = self.value(a).iter().sum();
        self.push(vec![total], (1, 1), Op::Sum { a })
    }

    // ── backward ────────────────────────────────────────────────────

    /// Populate gradients of every node reachable from the scalar `root`.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::NonScalarRoot { shape });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let g = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, id: TensorId, contrib: impl FnOnce(&mut [f64])) {
        let n = self.nodes[id.0].data.len();
        let slot = self.grads[id.0].get_or_insert_with(|| vec![0.0; n]);
        contrib(slot);
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Clone the op descriptor so `self` stays borrowable for accumulation.
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.shape(a);
                let (_, n) = self.shape(b);
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                self.accum(a, |da| matmul_nt(g, &bv, m, n, k, da));
                self.accum(b, |db| matmul_tn(&av, g, k, m, n, db));
            }
            Op::Transpose { a } => {
                let (r, c) = self.shape(a);
                self.accum(a, |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accum(a, |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                self.accum(b, |db| db.iter_mut().zip(g).for_each(|(d, x)| *d += x));
            }
            Op::AddRowBroadcast { a, b } => {
                let (r, c) = self.shape(a);
                self.accum(a, |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                self.accum(b, |db| {
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                self.accum(a, |da| {
                    da.iter_mut()
                        .zip(g.iter().zip(&bv))
                        .for_each(|(d, (x, y))| *d += x * y)
                });
                self.accum(b, |db| {
                    db.iter_mut()
                        .zip(g.iter().zip(&av))
                        .for_each(|(d, (x, y))| *d += x * y)
                });
            }
            Op::MulRowBroadcast { a, b } => {
                let (r, c) = self.shape(a);
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                self.accum(a, |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[i * c + j] * bv[j];
                        }
                    }
                });
                self.accum(b, |db| {
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j] * av[i * c + j];
                        }
                    }
                });
            }
            Op::Scale { a, k } => {
                self.accum(a, |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += k * x));
            }
            Op::Silu { a } => {
                let av = self.nodes[a.0].data.clone();
                self.accum(a, |da| {
                    for (d, (&x, gi)) in da.iter_mut().zip(av.iter().zip(g)) {
                        let s = sigmoid(x);
                        *d += gi * (s + x * s * (1.0 - s));
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let (r, c) = self.shape(a);
                let y = self.nodes[idx].data.clone();
                self.accum(a, |da| {
                    if axis == 1 {
                        for i in 0..r {
                            let yr = &y[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                            for j in 0..c {
                                da[i * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    } else {
                        for j in 0..c {
                            let mut dot = 0.0;
                            for i in 0..r {
                                dot += y[i * c + j] * g[i * c + j];
                            }
                            for i in 0..r {
                                da[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let (r, c) = self.shape(a);
                let y = self.nodes[idx].data.clone();
                self.accum(a, |da| {
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..c {
                            da[i * c + j] += gr[j] - y[i * c + j].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm { a, gain, bias, eps } => {
                let (r, c) = self.shape(a);
                let x = self.nodes[a.0].data.clone();
                let gv = self.nodes[gain.0].data.clone();
                let cf = c as f64;
                // Recompute per-row statistics; rows are short at this scale.
                let mut xhat = vec![0.0; r * c];
                let mut inv = vec![0.0; r];
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / cf;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    inv[i] = 1.0 / (var + eps).sqrt();
                    for j in 0..c {
                        xhat[i * c + j] = (row[j] - mean) * inv[i];
                    }
                }
                self.accum(a, |da| {
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let xr = &xhat[i * c..(i + 1) * c];
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for j in 0..c {
                            let gg = gr[j] * gv[j];
                            sum_g += gg;
                            sum_gx += gg * xr[j];
                        }
                        for j in 0..c {
                            let gg = gr[j] * gv[j];
                            da[i * c + j] += inv[i] * (gg - sum_g / cf - xr[j] * sum_gx / cf);
                        }
                    }
                });
                self.accum(gain, |dg| {
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                self.accum(bias, |db| {
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
            } => {
                let (r, c) = self.shape(logits);
                let x = self.nodes[logits.0].data.clone();
                let count = targets.iter().filter(|&&t| t != ignore_index).count();
                if count == 0 {
                    return;
                }
                let scale = g[0] / count as f64;
                self.accum(logits, |da| {
                    for (i, &t) in targets.iter().enumerate() {
                        if t == ignore_index {
                            continue;
                        }
                        let row = &x[i * c..(i + 1) * c];
                        let lse = log_sum_exp(row);
                        for j in 0..c {
                            let p = (row[j] - lse).exp();
                            let y = if j == t as usize { 1.0 } else { 0.0 };
                            da[i * c + j] += scale * (p - y);
                        }
                    }
                });
            }
            Op::CtcLoss {
                log_probs,
                target,
                blank,
            } => {
                let (t_frames, v) = self.shape(log_probs);
                let x = self.nodes[log_probs.0].data.clone();
                let grad = ctc::grad_log_probs(&x, t_frames, v, &target, blank);
                self.accum(log_probs, |da| {
                    da.iter_mut()
                        .zip(&grad)
                        .for_each(|(d, gr)| *d += g[0] * gr)
                });
            }
            Op::Embedding { table, ids } => {
                let (_, d) = self.shape(table);
                self.accum(table, |dt| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::Rotary { a, positions, base } => {
                let (r, c) = self.shape(a);
                self.accum(a, |da| {
                    let mut buf = vec![0.0; r * c];
                    // The rotation is orthogonal; its adjoint rotates by -angle.
                    rotate(g, &mut buf, r, c, &positions, base, -1.0);
                    da.iter_mut().zip(&buf).for_each(|(d, x)| *d += x);
                });
            }
            Op::ConcatCols { parts } => {
                let (r, total) = self.nodes[idx].shape;
                let mut offset = 0;
                for p in parts {
                    let (_, c) = self.shape(p);
                    self.accum(p, |dp| {
                        for i in 0..r {
                            for j in 0..c {
                                dp[i * c + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let (_, c) = self.nodes[idx].shape;
                let mut offset = 0;
                for p in parts {
                    let (r, _) = self.shape(p);
                    self.accum(p, |dp| {
                        dp.iter_mut()
                            .zip(&g[offset * c..(offset + r) * c])
                            .for_each(|(d, x)| *d += x);
                    });
                    offset += r;
                }
            }
            Op::SliceCols { a, start, len } => {
                let (r, c) = self.shape(a);
                self.accum(a, |da| {
                    for i in 0..r {
                        for j in 0..len {
                            da[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::SliceRows { a, start, len } => {
                let (_, c) = self.shape(a);
                self.accum(a, |da| {
                    da[start * c..(start + len) * c]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d += x);
                });
            }
            Op::Sum { a } => {
                self.accum(a, |da| da.iter_mut().for_each(|d| *d += g[0]));
            }
        }
    }

    /// Accumulate this pass's parameter gradients into the store.
    pub fn harvest_grads(&self, store: &mut ParamStore) {
        for &(pid, tid) in &self.bindings {
            if let Some(g) = self.grad(tid) {
                let slot = store.slot_mut(pid);
                slot.grad.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
        }
    }
}

// ── raw kernels ─────────────────────────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `logsumexp` with max-subtraction; tolerates -inf entries.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// C += A(m,k) * B(k,n), row-major.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// C += A(m,n) * B(k,n)^T, result (m,k).
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            c[i * k + p] += s;
        }
    }
}

/// C += A(m,k)^T * B(m,n), result (k,n).
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = arow[p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

fn rotate(
    src: &[f64],
    out: &mut [f64],
    rows: usize,
    cols: usize,
    positions: &[usize],
    base: f64,
    sign: f64,
) {
    let half = cols / 2;
    for i in 0..rows {
        let pos = positions[i] as f64;
        for p in 0..half {
            let theta = pos * base.powf(-2.0 * p as f64 / cols as f64) * sign;
            let (sin, cos) = theta.sin_cos();
            let x0 = src[i * cols + 2 * p];
            let x1 = src[i * cols + 2 * p + 1];
            out[i * cols + 2 * p] = x0 * cos - x1 * sin;
            out[i * cols + 2 * p + 1] = x0 * sin + x1 * cos;
        }
    }
}

// ── initialization ──────────────────────────────────────────────────

/// Linear-layer init: uniform in +-1/sqrt(fan_in).
pub fn init_linear<R: Rng>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Embedding-style init: normal(0, std).
pub fn init_normal<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box-Muller keeps us off rand_distr for one distribution.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
        })
        .collect()
}

// ── Adam ────────────────────────────────────────────────────────────

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment buffers, one pair per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            m: store.iter().map(|(_, s)| vec![0.0; s.data.len()]).collect(),
            v: store.iter().map(|(_, s)| vec![0.0; s.data.len()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update using the store's accumulated gradients.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, hp: &AdamParams) {
    assert_eq!(state.m.len(), store.len(), "Adam state shape mismatch");
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - hp.beta1.powf(t);
    let bc2 = 1.0 - hp.beta2.powf(t);
    for i in 0..store.len() {
        let slot = store.slot_mut(ParamId(i));
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..slot.data.len() {
            let g = slot.grad[j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            slot.data[j] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
}
