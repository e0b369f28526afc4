//! CTC head: forward-backward loss over a log-probability lattice, greedy
//! best-path decoding, and splitting of the frame axis at emitted
//! segmentation tags.

use crate::datapipe::Segment;
use crate::error::{Error, Result};
use crate::tensor::log_sum_exp;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Reserved vocabulary ids. Content tokens start after these.
pub const BLANK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEG_E: usize = 3;
pub const RESERVED: usize = 4;

/// A (frames x vocab) log-probability lattice with its special ids.
#[derive(Debug, Clone)]
pub struct CtcOutput {
    pub log_probs: Vec<f64>,
    pub frames: usize,
    pub vocab: usize,
    pub blank: usize,
    pub seg_e: usize,
}

impl CtcOutput {
    pub fn new(log_probs: Vec<f64>, frames: usize, vocab: usize) -> Self {
        debug_assert_eq!(log_probs.len(), frames * vocab);
        Self {
            log_probs,
            frames,
            vocab,
            blank: BLANK,
            seg_e: SEG_E,
        }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.log_probs[t * self.vocab..(t + 1) * self.vocab]
    }

    /// Rows must be log-normalized: logsumexp of each row ~ 0.
    pub fn validate(&self) -> Result<()> {
        for t in 0..self.frames {
            let lse = log_sum_exp(self.row(t));
            if lse.abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "lattice row {t} is not log-normalized (logsumexp {lse:.3e})"
                )));
            }
        }
        Ok(())
    }

    /// Lattice restricted to frames [t_b, t_e] inclusive.
    pub fn slice(&self, t_b: usize, t_e: usize) -> CtcOutput {
        let rows = self.log_probs[t_b * self.vocab..(t_e + 1) * self.vocab].to_vec();
        CtcOutput {
            log_probs: rows,
            frames: t_e - t_b + 1,
            vocab: self.vocab,
            blank: self.blank,
            seg_e: self.seg_e,
        }
    }
}

/// Minimum frames needed to align `target`: one per label plus a mandatory
/// blank between adjacent repeats.
pub fn min_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

fn extend_target(target: &[usize], blank: usize) -> Vec<usize> {
    let mut l = Vec::with_capacity(2 * target.len() + 1);
    l.push(blank);
    for &y in target {
        l.push(y);
        l.push(blank);
    }
    l
}

/// log P(target | lattice) by the standard forward recursion in log space.
pub fn log_prob(lp: &[f64], frames: usize, vocab: usize, target: &[usize], blank: usize) -> f64 {
    let l = extend_target(target, blank);
    let s = l.len();
    let mut alpha = vec![f64::NEG_INFINITY; s];
    alpha[0] = lp[l[0]];
    if s > 1 {
        alpha[1] = lp[l[1]];
    }
    let mut next = vec![f64::NEG_INFINITY; s];
    for t in 1..frames {
        let row = &lp[t * vocab..(t + 1) * vocab];
        for (j, n) in next.iter_mut().enumerate() {
            let mut acc = alpha[j];
            if j >= 1 {
                acc = log_add(acc, alpha[j - 1]);
            }
            if j >= 2 && l[j] != blank && l[j] != l[j - 2] {
                acc = log_add(acc, alpha[j - 2]);
            }
            *n = acc + row[l[j]];
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    let mut total = alpha[s - 1];
    if s > 1 {
        total = log_add(total, alpha[s - 2]);
    }
    total
}

/// d(-log P)/d lp via alpha/beta occupancy.
pub fn grad_log_probs(
    lp: &[f64],
    frames: usize,
    vocab: usize,
    target: &[usize],
    blank: usize,
) -> Vec<f64> {
    let l = extend_target(target, blank);
    let s = l.len();

    let mut alpha = vec![f64::NEG_INFINITY; frames * s];
    alpha[0] = lp[l[0]];
    if s > 1 {
        alpha[1] = lp[l[1]];
    }
    for t in 1..frames {
        let row = &lp[t * vocab..(t + 1) * vocab];
        for j in 0..s {
            let mut acc = alpha[(t - 1) * s + j];
            if j >= 1 {
                acc = log_add(acc, alpha[(t - 1) * s + j - 1]);
            }
            if j >= 2 && l[j] != blank && l[j] != l[j - 2] {
                acc = log_add(acc, alpha[(t - 1) * s + j - 2]);
            }
            alpha[t * s + j] = acc + row[l[j]];
        }
    }
    let mut log_p = alpha[(frames - 1) * s + s - 1];
    if s > 1 {
        log_p = log_add(log_p, alpha[(frames - 1) * s + s - 2]);
    }

    // beta excludes the emission at t itself, so alpha + beta is the full
    // log-mass of paths through state j at frame t.
    let mut beta = vec![f64::NEG_INFINITY; frames * s];
    beta[(frames - 1) * s + s - 1] = 0.0;
    if s > 1 {
        beta[(frames - 1) * s + s - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        let row = &lp[(t + 1) * vocab..(t + 2) * vocab];
        for j in 0..s {
            let mut acc = beta[(t + 1) * s + j] + row[l[j]];
            if j + 1 < s {
                acc = log_add(acc, beta[(t + 1) * s + j + 1] + row[l[j + 1]]);
            }
            if j + 2 < s && l[j + 2] != blank && l[j + 2] != l[j] {
                acc = log_add(acc, beta[(t + 1) * s + j + 2] + row[l[j + 2]]);
            }
            beta[t * s + j] = acc;
        }
    }

    let mut grad = vec![0.0; frames * vocab];
    for t in 0..frames {
        for j in 0..s {
            let occ = alpha[t * s + j] + beta[t * s + j] - log_p;
            if occ > -745.0 {
                grad[t * vocab + l[j]] -= occ.exp();
            }
        }
    }
    grad
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Best-path decode: per-frame argmax, collapse repeats, drop blanks.
/// Each surviving token keeps the first frame of its run.
pub fn ctc_greedy(lattice: &CtcOutput) -> (Vec<usize>, Vec<usize>) {
    let mut tokens = Vec::new();
    let mut frames = Vec::new();
    let mut prev = lattice.blank;
    for t in 0..lattice.frames {
        let row = lattice.row(t);
        let arg = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(lattice.blank);
        if arg != lattice.blank && arg != prev {
            tokens.push(arg);
            frames.push(t);
        }
        prev = arg;
    }
    (tokens, frames)
}

/// Result of splitting a stream at emitted segmentation tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub segments: Vec<Segment>,
    pub dropped_degenerate: usize,
}

/// Split the frame axis [0, total_frames) at each `seg_e` emission. The tag
/// frame closes its segment; trailing frames form a final open segment.
/// A segment holding nothing but the tag frame is dropped and counted.
pub fn extract_segments(
    tokens: &[usize],
    frames: &[usize],
    seg_e: usize,
    total_frames: usize,
) -> Segmentation {
    debug_assert_eq!(tokens.len(), frames.len());
    debug_assert!(frames.windows(2).all(|w| w[0] < w[1]));
    let mut segments = Vec::new();
    let mut dropped = 0usize;
    let mut t_b = 0usize;
    for (&tok, &f) in tokens.iter().zip(frames) {
        if tok != seg_e {
            continue;
        }
        if f == t_b && !span_has_content(tokens, frames, seg_e, t_b, f) {
            dropped += 1;
        } else {
            segments.push(Segment::closed(t_b, f));
        }
        t_b = f + 1;
    }
    if t_b < total_frames {
        segments.push(Segment::open(t_b, total_frames - 1));
    }
    Segmentation {
        segments,
        dropped_degenerate: dropped,
    }
}

fn span_has_content(
    tokens: &[usize],
    frames: &[usize],
    seg_e: usize,
    t_b: usize,
    t_e: usize,
) -> bool {
    tokens
        .iter()
        .zip(frames)
        .any(|(&tok, &f)| tok != seg_e && f >= t_b && f <= t_e)
}

// ── vocabulary file ─────────────────────────────────────────────────

/// Token inventory. Ids 0..=3 are reserved for blank, BOS, EOS and the
/// segmentation tag; content tokens follow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub tokens: Vec<String>,
}

impl Vocab {
    pub fn synthetic(n_content: usize) -> Self {
        let mut tokens = vec![
            "<blank>".to_string(),
            "<bos>".to_string(),
            "<eos>".to_string(),
            "_segE".to_string(),
        ];
        tokens.extend((0..n_content).map(|i| format!("w{i:02}")));
        Self { tokens }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let tokens: Vec<String> = BufReader::new(f)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|l| !l.is_empty())
            .collect();
        if tokens.len() < RESERVED {
            return Err(Error::CorpusFormat(format!(
                "vocabulary file {path:?} has fewer than {RESERVED} entries"
            )));
        }
        Ok(Self { tokens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lattice(rng: &mut ChaCha8Rng, frames: usize, vocab: usize) -> Vec<f64> {
        let mut lp = vec![0.0; frames * vocab];
        for t in 0..frames {
            let row: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lse = log_sum_exp(&row);
            for v in 0..vocab {
                lp[t * vocab + v] = row[v] - lse;
            }
        }
        lp
    }

    fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = blank;
        for &p in path {
            if p != blank && p != prev {
                out.push(p);
            }
            prev = p;
        }
        out
    }

    /// Brute force: sum the probability of every frame labelling that
    /// collapses to `target`.
    fn enumerate_log_prob(
        lp: &[f64],
        frames: usize,
        vocab: usize,
        target: &[usize],
        blank: usize,
    ) -> f64 {
        let mut total = f64::NEG_INFINITY;
        let count = vocab.pow(frames as u32);
        for code in 0..count {
            let mut c = code;
            let mut path = Vec::with_capacity(frames);
            let mut score = 0.0;
            for t in 0..frames {
                let v = c % vocab;
                c /= vocab;
                path.push(v);
                score += lp[t * vocab + v];
            }
            if collapse(&path, blank) == target {
                total = super::log_add(total, score);
            }
        }
        total
    }

    #[test]
    fn single_frame_forced_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lp = random_lattice(&mut rng, 1, 3);
        let got = log_prob(&lp, 1, 3, &[2], 0);
        assert!((got - lp[2]).abs() < 1e-12);
    }

    #[test]
    fn two_frames_single_label_expands_to_three_alignments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lp = random_lattice(&mut rng, 2, 3);
        let a = 1usize;
        let direct = log_prob(&lp, 2, 3, &[a], 0);
        let expected = (lp[a].exp() * lp[3 + a].exp()
            + lp[a].exp() * lp[3].exp()
            + lp[0].exp() * lp[3 + a].exp())
        .ln();
        assert!((direct - expected).abs() < 1e-10);
    }

    #[test]
    fn repeated_label_requires_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lp = random_lattice(&mut rng, 3, 3);
        let direct = log_prob(&lp, 3, 3, &[1, 1], 0);
        let brute = enumerate_log_prob(&lp, 3, 3, &[1, 1], 0);
        assert!((direct - brute).abs() < 1e-10);
    }

    #[test]
    fn exhaustive_small_instances_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vocab = 4usize; // blank + 3 content labels
        for frames in 1..=6 {
            let lp = random_lattice(&mut rng, frames, vocab);
            for len in 0..=3usize {
                let mut targets = vec![Vec::new()];
                for _ in 0..len {
                    targets = targets
                        .into_iter()
                        .flat_map(|t| {
                            (1..vocab).map(move |v| {
                                let mut t2 = t.clone();
                                t2.push(v);
                                t2
                            })
                        })
                        .collect();
                }
                for target in targets {
                    if min_frames(&target) > frames {
                        continue;
                    }
                    let direct = log_prob(&lp, frames, vocab, &target, 0);
                    let brute = enumerate_log_prob(&lp, frames, vocab, &target, 0);
                    assert!(
                        (direct - brute).abs() < 1e-10,
                        "frames {frames} target {target:?}: {direct} vs {brute}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames = 5;
        let vocab = 4;
        let lp = random_lattice(&mut rng, frames, vocab);
        let target = vec![1, 2, 1];
        let analytic = grad_log_probs(&lp, frames, vocab, &target, 0);

        let h = 1e-6;
        let mut buf = lp.clone();
        for i in 0..lp.len() {
            buf[i] = lp[i] + h;
            let up = -log_prob(&buf, frames, vocab, &target, 0);
            buf[i] = lp[i] - h;
            let down = -log_prob(&buf, frames, vocab, &target, 0);
            buf[i] = lp[i];
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(1.0);
            assert!(
                (analytic[i] - fd).abs() / denom < 1e-5,
                "entry {i}: {} vs {}",
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn infeasible_target_is_an_error() {
        let mut tape = crate::tensor::Tape::new();
        let lp = tape.leaf(vec![0.25f64.ln(); 8], (2, 4));
        let err = tape.ctc_loss(lp, &[1, 1], 0).unwrap_err();
        assert!(matches!(
            err,
            crate::error::Error::InfeasibleAlignment { needed: 3, frames: 2 }
        ));
    }

    #[test]
    fn greedy_all_blank_is_empty() {
        let mut lp = vec![-5.0; 3 * 4];
        for t in 0..3 {
            lp[t * 4] = -0.01;
        }
        let lattice = CtcOutput::new(lp, 3, 4);
        let (tokens, frames) = ctc_greedy(&lattice);
        assert!(tokens.is_empty() && frames.is_empty());
    }

    #[test]
    fn greedy_collapse_keeps_first_frame_of_run() {
        // argmax sequence: a a - a
        let a = 1usize;
        let mut lp = vec![-5.0; 4 * 4];
        lp[a] = -0.01;
        lp[4 + a] = -0.01;
        lp[2 * 4] = -0.01;
        lp[3 * 4 + a] = -0.01;
        let lattice = CtcOutput::new(lp, 4, 4);
        let (tokens, frames) = ctc_greedy(&lattice);
        assert_eq!(tokens, vec![a, a]);
        assert_eq!(frames, vec![0, 3]);
    }

    #[test]
    fn greedy_matches_reference_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let frames = rng.gen_range(1..12);
            let lp = random_lattice(&mut rng, frames, 5);
            let lattice = CtcOutput::new(lp.clone(), frames, 5);
            let (tokens, _) = ctc_greedy(&lattice);
            let argmaxes: Vec<usize> = (0..frames)
                .map(|t| {
                    (0..5)
                        .max_by(|&a, &b| lp[t * 5 + a].partial_cmp(&lp[t * 5 + b]).unwrap())
                        .unwrap()
                })
                .collect();
            assert_eq!(tokens, collapse(&argmaxes, 0));
        }
    }

    #[test]
    fn greedy_frames_strictly_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let frames = rng.gen_range(1..16);
            let lattice = CtcOutput::new(random_lattice(&mut rng, frames, 6), frames, 6);
            let (_, emitted) = ctc_greedy(&lattice);
            assert!(emitted.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn extract_no_tag_gives_one_open_segment() {
        let seg = extract_segments(&[5, 6], &[1, 3], SEG_E, 10);
        assert_eq!(seg.segments.len(), 1);
        assert_eq!(
            (seg.segments[0].t_b, seg.segments[0].t_e, seg.segments[0].open),
            (0, 9, true)
        );
    }

    #[test]
    fn extract_splits_at_tags_with_trailing_open_segment() {
        // _segE at frames 5 and 11 on a 14-frame stream.
        let tokens = vec![4, SEG_E, 5, SEG_E, 6];
        let frames = vec![2, 5, 8, 11, 12];
        let seg = extract_segments(&tokens, &frames, SEG_E, 14);
        let spans: Vec<(usize, usize, bool)> = seg
            .segments
            .iter()
            .map(|s| (s.t_b, s.t_e, s.open))
            .collect();
        assert_eq!(spans, vec![(0, 5, false), (6, 11, false), (12, 13, true)]);
        assert_eq!(seg.dropped_degenerate, 0);
    }

    #[test]
    fn extract_drops_degenerate_leading_tag() {
        let seg = extract_segments(&[SEG_E, 4], &[0, 3], SEG_E, 6);
        assert_eq!(seg.dropped_degenerate, 1);
        assert_eq!(seg.segments.len(), 1);
        assert_eq!((seg.segments[0].t_b, seg.segments[0].t_e), (1, 5));
    }

    #[test]
    fn vocab_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::synthetic(5);
        v.write(&path).unwrap();
        assert_eq!(Vocab::read(&path).unwrap(), v);
        assert_eq!(v.size(), RESERVED + 5);
    }

    proptest::proptest! {
        /// Segments partition [0, T): disjoint, ordered, covering everything
        /// except dropped degenerates' tag frames.
        #[test]
        fn extraction_partitions_frames(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let total = rng.gen_range(1usize..30);
            let n = rng.gen_range(0usize..6).min(total);
            let mut frames: Vec<usize> = (0..total).collect();
            // random strictly increasing emission frames
            for i in (1..frames.len()).rev() {
                let j = rng.gen_range(0..=i);
                frames.swap(i, j);
            }
            frames.truncate(n);
            frames.sort_unstable();
            let tokens: Vec<usize> = frames
                .iter()
                .map(|_| if rng.gen_bool(0.6) { SEG_E } else { 5 })
                .collect();
            let seg = extract_segments(&tokens, &frames, SEG_E, total);
            let mut cursor = 0usize;
            for s in &seg.segments {
                proptest::prop_assert!(s.t_b >= cursor);
                proptest::prop_assert!(s.t_b <= s.t_e && s.t_e < total);
                cursor = s.t_e + 1;
            }
        }
    }
}
