//! Synthetic long-form corpus and the data-level training transforms:
//! segment concatenation, acoustic-context expansion, semantic segmentation
//! tagging, plus a deliberately imperfect simulated VAD.
//!
//! A recording renders each token as a few frames of a token-specific
//! prototype vector plus gaussian noise, with near-silent gaps between
//! sentences. Corpus files are JSON lines; segment extents in the file are
//! acoustic frames (inclusive), independent of any decimation factor.

use crate::ctc::{EOS, RESERVED, SEG_E};
use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::tensor::init_normal;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// A span of encoding frames, inclusive on both ends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub t_b: usize,
    pub t_e: usize,
    pub transcript: Vec<usize>,
    pub open: bool,
}

impl Segment {
    pub fn closed(t_b: usize, t_e: usize) -> Self {
        Self {
            t_b,
            t_e,
            transcript: Vec::new(),
            open: false,
        }
    }

    pub fn open(t_b: usize, t_e: usize) -> Self {
        Self {
            t_b,
            t_e,
            transcript: Vec::new(),
            open: true,
        }
    }

    pub fn with_transcript(t_b: usize, t_e: usize, transcript: Vec<usize>) -> Self {
        Self {
            t_b,
            t_e,
            transcript,
            open: false,
        }
    }

    pub fn len(&self) -> usize {
        self.t_e - self.t_b + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Ground-truth sentence span in acoustic frames, `[a_b, a_e)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpokenSpan {
    pub a_b: usize,
    pub a_e: usize,
    pub tokens: Vec<usize>,
}

/// One synthetic recording: a feature matrix and its ground-truth spans.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub feat_dim: usize,
    pub frames: usize,
    pub features: Vec<f64>,
    pub spans: Vec<SpokenSpan>,
}

impl Recording {
    pub fn feature_rows(&self, a_b: usize, a_e: usize) -> &[f64] {
        &self.features[a_b * self.feat_dim..a_e * self.feat_dim]
    }

    /// Ground-truth segments in encoding frames for decimation factor `r`.
    pub fn encoding_segments(&self, r: usize) -> Vec<Segment> {
        self.spans
            .iter()
            .map(|s| Segment::with_transcript(s.a_b / r, (s.a_e - 1) / r, s.tokens.clone()))
            .collect()
    }

    /// Concatenated transcript of the whole recording.
    pub fn full_transcript(&self) -> Vec<usize> {
        self.spans.iter().flat_map(|s| s.tokens.clone()).collect()
    }
}

/// Parameters of the synthetic corpus generator. All ranges are inclusive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub vocab_content: usize,
    pub feat_dim: usize,
    pub frames_per_token: (usize, usize),
    pub tokens_per_sentence: (usize, usize),
    pub gap_frames: (usize, usize),
    pub sentences_per_recording: (usize, usize),
    pub noise_sigma: f64,
    pub silence_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            vocab_content: 16,
            feat_dim: 8,
            frames_per_token: (3, 5),
            tokens_per_sentence: (3, 8),
            gap_frames: (2, 6),
            sentences_per_recording: (3, 6),
            noise_sigma: 0.25,
            silence_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn vocab_size(&self) -> usize {
        RESERVED + self.vocab_content
    }

    fn validate(&self) -> Result<()> {
        let ranges = [
            ("frames_per_token", self.frames_per_token),
            ("tokens_per_sentence", self.tokens_per_sentence),
            ("gap_frames", self.gap_frames),
            ("sentences_per_recording", self.sentences_per_recording),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi || (name != "gap_frames" && lo == 0) {
                return Err(Error::Config(format!("bad range for {name}: ({lo}, {hi})")));
            }
        }
        if self.noise_sigma < 0.0 || self.vocab_content == 0 {
            return Err(Error::Config("noise_sigma >= 0 and vocab_content >= 1".into()));
        }
        Ok(())
    }
}

fn sample(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    rng.gen_range(range.0..=range.1)
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * sigma
}

/// Generate `n` recordings. Same spec and seed give identical corpora.
pub fn generate_corpus(spec: &SyntheticCorpusSpec, n: usize) -> Result<Vec<Recording>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput {
            what: "recording count",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f64>> = (0..spec.vocab_content)
        .map(|_| init_normal(&mut rng, spec.feat_dim, 1.0))
        .collect();

    let mut out = Vec::with_capacity(n);
    for rec_idx in 0..n {
        let mut features = Vec::new();
        let mut spans = Vec::new();
        let sentences = sample(&mut rng, spec.sentences_per_recording);

        push_silence(&mut features, sample(&mut rng, spec.gap_frames), spec, &mut rng);
        for _ in 0..sentences {
            let a_b = features.len() / spec.feat_dim;
            let n_tokens = sample(&mut rng, spec.tokens_per_sentence);
            let mut tokens = Vec::with_capacity(n_tokens);
            for _ in 0..n_tokens {
                let tok = rng.gen_range(0..spec.vocab_content);
                tokens.push(RESERVED + tok);
                let dur = sample(&mut rng, spec.frames_per_token);
                for _ in 0..dur {
                    for d in 0..spec.feat_dim {
                        features.push(prototypes[tok][d] + gaussian(&mut rng, spec.noise_sigma));
                    }
                }
            }
            let a_e = features.len() / spec.feat_dim;
            spans.push(SpokenSpan { a_b, a_e, tokens });
            push_silence(&mut features, sample(&mut rng, spec.gap_frames), spec, &mut rng);
        }

        let frames = features.len() / spec.feat_dim;
        out.push(Recording {
            id: format!("rec{rec_idx:05}"),
            feat_dim: spec.feat_dim,
            frames,
            features,
            spans,
        });
    }
    Ok(out)
}

fn push_silence(
    features: &mut Vec<f64>,
    frames: usize,
    spec: &SyntheticCorpusSpec,
    rng: &mut ChaCha8Rng,
) {
    for _ in 0..frames {
        for _ in 0..spec.feat_dim {
            features.push(gaussian(rng, spec.silence_sigma));
        }
    }
}

// ── training examples ───────────────────────────────────────────────

/// Features plus targets after the data-level transforms, with the acoustic
/// interval of the original segment (the valid window) marked.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub feat_dim: usize,
    pub frames: usize,
    pub features: Vec<f64>,
    /// Acoustic interval `[start, end)` of the target speech within
    /// `features`; loss and cross-attention use only its encodings.
    pub valid: (usize, usize),
    /// Acoustic interval of `features` within the source recording.
    pub src: (usize, usize),
    /// Per-sentence transcripts of the selected run, in order.
    pub sentences: Vec<Vec<usize>>,
    /// Final decoder targets (filled by the tagging policy).
    pub targets: Vec<usize>,
    pub sc_applied: bool,
    pub sc_clamped: bool,
    pub ac_applied: bool,
    pub ac_clipped: bool,
}

impl TrainingExample {
    /// Valid window in encoding frames (inclusive), for decimation `r`.
    pub fn valid_encoding(&self, r: usize) -> (usize, usize) {
        (self.valid.0 / r, (self.valid.1 - 1) / r)
    }
}

/// Segment concatenation: starting from `anchor`, take a random run of
/// consecutive ground-truth spans whose contiguous audio (including the
/// silence between them) stays within `max_frames` acoustic frames.
pub fn transform_sc(
    recording: &Recording,
    anchor: usize,
    max_frames: usize,
    rng: &mut ChaCha8Rng,
) -> TrainingExample {
    assert!(!recording.spans.is_empty(), "recording has no segments");
    let anchor = anchor.min(recording.spans.len() - 1);
    let a_b = recording.spans[anchor].a_b;

    let mut max_run = 1;
    while anchor + max_run < recording.spans.len()
        && recording.spans[anchor + max_run].a_e - a_b <= max_frames
    {
        max_run += 1;
    }
    let run = rng.gen_range(1..=max_run);
    let last = &recording.spans[anchor + run - 1];
    let a_e = last.a_e;
    let sc_clamped = recording.spans[anchor].a_e - a_b > max_frames;

    let sentences: Vec<Vec<usize>> = recording.spans[anchor..anchor + run]
        .iter()
        .map(|s| s.tokens.clone())
        .collect();
    TrainingExample {
        feat_dim: recording.feat_dim,
        frames: a_e - a_b,
        features: recording.feature_rows(a_b, a_e).to_vec(),
        valid: (0, a_e - a_b),
        src: (a_b, a_e),
        sentences,
        targets: Vec::new(),
        sc_applied: run > 1,
        sc_clamped,
        ac_applied: false,
        ac_clipped: false,
    }
}

/// Single-segment example (the no-SC path).
pub fn single_segment_example(recording: &Recording, anchor: usize) -> TrainingExample {
    let span = &recording.spans[anchor.min(recording.spans.len() - 1)];
    TrainingExample {
        feat_dim: recording.feat_dim,
        frames: span.a_e - span.a_b,
        features: recording.feature_rows(span.a_b, span.a_e).to_vec(),
        valid: (0, span.a_e - span.a_b),
        src: (span.a_b, span.a_e),
        sentences: vec![span.tokens.clone()],
        targets: Vec::new(),
        sc_applied: false,
        sc_clamped: false,
        ac_applied: false,
        ac_clipped: false,
    }
}

/// Acoustic-context expansion: with probability `p_apply`, prepend up to
/// `c_l_max` and append up to `c_r_max` acoustic frames of the true
/// neighbouring audio, clipping at recording edges. The valid window keeps
/// pointing at the original speech.
pub fn transform_ac(
    example: TrainingExample,
    recording: &Recording,
    spec: &MaskSpec,
    p_apply: f64,
    rng: &mut ChaCha8Rng,
) -> TrainingExample {
    if !rng.gen_bool(p_apply.clamp(0.0, 1.0)) {
        return example;
    }
    let (src_b, src_e) = example.src;
    let left = spec.c_l_max().min(src_b);
    let right = spec.c_r_max().min(recording.frames - src_e);
    let clipped = left < spec.c_l_max() || right < spec.c_r_max();
    let new_b = src_b - left;
    let new_e = src_e + right;
    TrainingExample {
        frames: new_e - new_b,
        features: recording.feature_rows(new_b, new_e).to_vec(),
        valid: (left, left + (src_e - src_b)),
        src: (new_b, new_e),
        ac_applied: true,
        ac_clipped: clipped,
        ..example
    }
}

/// Build decoder targets from per-sentence transcripts: with tagging on,
/// a segmentation token closes every sentence and EOS ends the sequence;
/// with tagging off, plain concatenation plus EOS.
pub fn tag_semantic(sentences: &[Vec<usize>], tagging: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for s in sentences {
        out.extend_from_slice(s);
        if tagging {
            out.push(SEG_E);
        }
    }
    out.push(EOS);
    out
}

// ── simulated VAD ───────────────────────────────────────────────────

/// Energy-threshold segmentation with random boundary jitter of up to
/// `jitter` encoding frames in each direction. Returns encoding-frame
/// segments for decimation factor `r`.
pub fn simulated_vad(
    features: &[f64],
    feat_dim: usize,
    r: usize,
    threshold: f64,
    jitter: usize,
    jitter_seed: u64,
) -> Vec<Segment> {
    let frames = features.len() / feat_dim;
    let enc_frames = frames / r;
    if enc_frames == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    let speech: Vec<bool> = (0..frames)
        .map(|t| {
            let row = &features[t * feat_dim..(t + 1) * feat_dim];
            row.iter().map(|x| x * x).sum::<f64>().sqrt() > threshold
        })
        .collect();

    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for (t, &s) in speech.iter().enumerate() {
        match (s, start) {
            (true, None) => start = Some(t),
            (false, Some(b)) => {
                spans.push((b, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(b) = start {
        spans.push((b, frames));
    }

    let mut segments = Vec::new();
    for (a_b, a_e) in spans {
        let mut t_b = (a_b / r) as i64;
        let mut t_e = ((a_e - 1) / r) as i64;
        if jitter > 0 {
            t_b += rng.gen_range(-(jitter as i64)..=jitter as i64);
            t_e += rng.gen_range(-(jitter as i64)..=jitter as i64);
        }
        let t_b = t_b.clamp(0, enc_frames as i64 - 1) as usize;
        let t_e = t_e.clamp(0, enc_frames as i64 - 1) as usize;
        if t_b <= t_e {
            segments.push(Segment::closed(t_b, t_e));
        }
    }
    segments
}

// ── batching ────────────────────────────────────────────────────────

/// A padded batch; items keep their true lengths so padding never leaks
/// into the loss.
#[derive(Debug, Clone)]
pub struct Batch {
    pub feat_dim: usize,
    pub max_frames: usize,
    /// Row-major (batch, max_frames, feat_dim), zero-padded.
    pub features: Vec<f64>,
    pub frames: Vec<usize>,
    /// (batch, max_targets), padded with -1.
    pub padded_targets: Vec<i64>,
    pub max_targets: usize,
    pub items: Vec<TrainingExample>,
    /// Chunk size sampled for this batch.
    pub chunk_m: usize,
}

impl Batch {
    pub fn item_features(&self, i: usize) -> &[f64] {
        let full = &self.features[i * self.max_frames * self.feat_dim..];
        &full[..self.frames[i] * self.feat_dim]
    }

    pub fn item_targets(&self, i: usize) -> Vec<usize> {
        self.padded_targets[i * self.max_targets..(i + 1) * self.max_targets]
            .iter()
            .filter(|&&t| t >= 0)
            .map(|&t| t as usize)
            .collect()
    }
}

/// Pad examples into batches, sampling a chunk size per batch.
pub fn make_batches(
    examples: Vec<TrainingExample>,
    batch_size: usize,
    chunk_sizes: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<Batch> {
    assert!(batch_size >= 1 && !chunk_sizes.is_empty());
    let mut batches = Vec::new();
    let mut iter = examples.into_iter().peekable();
    while iter.peek().is_some() {
        let items: Vec<TrainingExample> = iter.by_ref().take(batch_size).collect();
        let chunk_m = chunk_sizes[rng.gen_range(0..chunk_sizes.len())];
        batches.push(pad_batch(items, chunk_m));
    }
    batches
}

fn pad_batch(items: Vec<TrainingExample>, chunk_m: usize) -> Batch {
    let feat_dim = items[0].feat_dim;
    let max_frames = items.iter().map(|e| e.frames).max().unwrap();
    let max_targets = items.iter().map(|e| e.targets.len()).max().unwrap();
    let mut features = vec![0.0; items.len() * max_frames * feat_dim];
    let mut padded_targets = vec![-1i64; items.len() * max_targets];
    for (i, e) in items.iter().enumerate() {
        features[i * max_frames * feat_dim..i * max_frames * feat_dim + e.features.len()]
            .copy_from_slice(&e.features);
        for (j, &t) in e.targets.iter().enumerate() {
            padded_targets[i * max_targets + j] = t as i64;
        }
    }
    Batch {
        feat_dim,
        max_frames,
        features,
        frames: items.iter().map(|e| e.frames).collect(),
        padded_targets,
        max_targets,
        items,
        chunk_m,
    }
}

// ── corpus files ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct SegmentJson {
    t_b: usize,
    t_e: usize,
    tokens: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RecordingJson {
    id: String,
    features: Vec<Vec<f64>>,
    segments: Vec<SegmentJson>,
}

/// Write recordings as JSON lines. Segment extents are acoustic frames,
/// `t_e` inclusive.
pub fn write_corpus(path: &Path, recordings: &[Recording]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in recordings {
        let json = RecordingJson {
            id: rec.id.clone(),
            features: (0..rec.frames)
                .map(|t| rec.features[t * rec.feat_dim..(t + 1) * rec.feat_dim].to_vec())
                .collect(),
            segments: rec
                .spans
                .iter()
                .map(|s| SegmentJson {
                    t_b: s.a_b,
                    t_e: s.a_e - 1,
                    tokens: s.tokens.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut f, &json)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Recording>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let json: RecordingJson = serde_json::from_str(&line)
            .map_err(|e| Error::CorpusFormat(format!("line {}: {e}", lineno + 1)))?;
        let frames = json.features.len();
        let feat_dim = json.features.first().map(|r| r.len()).unwrap_or(0);
        if feat_dim == 0 {
            return Err(Error::CorpusFormat(format!(
                "line {}: empty feature matrix",
                lineno + 1
            )));
        }
        let mut features = Vec::with_capacity(frames * feat_dim);
        for row in &json.features {
            if row.len() != feat_dim {
                return Err(Error::CorpusFormat(format!(
                    "line {}: ragged feature rows",
                    lineno + 1
                )));
            }
            features.extend_from_slice(row);
        }
        out.push(Recording {
            id: json.id,
            feat_dim,
            frames,
            features,
            spans: json
                .segments
                .iter()
                .map(|s| SpokenSpan {
                    a_b: s.t_b,
                    a_e: s.t_e + 1,
                    tokens: s.tokens.clone(),
                })
                .collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{context_profile, is_long_form_segment};

    fn tiny_spec(seed: u64) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn corpus_is_deterministic_under_seed() {
        let a = generate_corpus(&tiny_spec(42), 5).unwrap();
        let b = generate_corpus(&tiny_spec(42), 5).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&tiny_spec(43), 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_corpus_repeats_prototypes_exactly() {
        let spec = SyntheticCorpusSpec {
            noise_sigma: 0.0,
            silence_sigma: 0.0,
            frames_per_token: (2, 2),
            seed: 7,
            ..Default::default()
        };
        let recs = generate_corpus(&spec, 2).unwrap();
        for rec in &recs {
            for span in &rec.spans {
                let mut t = span.a_b;
                for _tok in &span.tokens {
                    let first = rec.feature_rows(t, t + 1).to_vec();
                    let second = rec.feature_rows(t + 1, t + 2).to_vec();
                    assert_eq!(first, second, "frames within a token must repeat");
                    t += 2;
                }
            }
        }
    }

    #[test]
    fn corpus_statistics_match_spec() {
        let spec = tiny_spec(1);
        let recs = generate_corpus(&spec, 200).unwrap();
        let mean_sentences: f64 =
            recs.iter().map(|r| r.spans.len() as f64).sum::<f64>() / recs.len() as f64;
        let expect = (spec.sentences_per_recording.0 + spec.sentences_per_recording.1) as f64 / 2.0;
        assert!((mean_sentences - expect).abs() < 0.35, "{mean_sentences}");
        let mean_tokens: f64 = recs
            .iter()
            .flat_map(|r| r.spans.iter())
            .map(|s| s.tokens.len() as f64)
            .sum::<f64>()
            / recs.iter().map(|r| r.spans.len()).sum::<usize>() as f64;
        let expect_tok = (spec.tokens_per_sentence.0 + spec.tokens_per_sentence.1) as f64 / 2.0;
        assert!((mean_tokens - expect_tok).abs() < 0.35, "{mean_tokens}");
    }

    #[test]
    fn sc_run_of_one_is_degenerate() {
        let recs = generate_corpus(&tiny_spec(2), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // max_frames below any two-span stretch forces a single segment
        let ex = transform_sc(&recs[0], 0, recs[0].spans[0].a_e - recs[0].spans[0].a_b, &mut rng);
        assert!(!ex.sc_applied);
        assert_eq!(ex.sentences.len(), 1);
        assert_eq!(ex.valid, (0, ex.frames));
    }

    #[test]
    fn sc_two_span_run_includes_gap() {
        let recs = generate_corpus(&tiny_spec(3), 1).unwrap();
        let rec = &recs[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Find a seed draw that takes two spans by allowing a huge budget.
        let mut ex = transform_sc(rec, 0, usize::MAX >> 1, &mut rng);
        for _ in 0..20 {
            if ex.sentences.len() >= 2 {
                break;
            }
            ex = transform_sc(rec, 0, usize::MAX >> 1, &mut rng);
        }
        assert!(ex.sentences.len() >= 2, "never drew a multi-span run");
        let first = &rec.spans[0];
        let last = &rec.spans[ex.sentences.len() - 1];
        assert_eq!(ex.frames, last.a_e - first.a_b);
        assert!(ex.sc_applied);
    }

    #[test]
    fn sc_clamped_when_budget_below_single_segment() {
        let recs = generate_corpus(&tiny_spec(4), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = transform_sc(&recs[0], 0, 1, &mut rng);
        assert!(ex.sc_clamped && !ex.sc_applied);
        assert_eq!(ex.sentences.len(), 1);
    }

    #[test]
    fn sc_features_are_verbatim_recording_slice() {
        let recs = generate_corpus(&tiny_spec(5), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for rec in &recs {
            for anchor in 0..rec.spans.len() {
                let ex = transform_sc(rec, anchor, 400, &mut rng);
                let expected = rec.feature_rows(ex.src.0, ex.src.1);
                assert_eq!(ex.features, expected);
            }
        }
    }

    #[test]
    fn ac_identity_when_disabled() {
        let recs = generate_corpus(&tiny_spec(6), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ex = single_segment_example(&recs[0], 1);
        let before = ex.clone();
        let after = transform_ac(ex, &recs[0], &MaskSpec::new(2, 4, 2, 2).unwrap(), 0.0, &mut rng);
        assert_eq!(before.features, after.features);
        assert!(!after.ac_applied);
    }

    #[test]
    fn ac_interior_example_becomes_long_form() {
        let spec = MaskSpec::new(2, 4, 2, 2).unwrap();
        // Long leading gap guarantees enough left audio for interior spans.
        let cspec = SyntheticCorpusSpec {
            gap_frames: (18, 24),
            sentences_per_recording: (4, 4),
            seed: 8,
            ..Default::default()
        };
        let recs = generate_corpus(&cspec, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for rec in &recs {
            let ex = single_segment_example(rec, 1);
            let ex = transform_ac(ex, rec, &spec, 1.0, &mut rng);
            assert!(ex.ac_applied);
            if ex.ac_clipped {
                continue;
            }
            let enc_frames = ex.frames / spec.r;
            let profile = context_profile(&spec, enc_frames).unwrap();
            let (vb, ve) = ex.valid_encoding(spec.r);
            let seg = Segment::closed(vb, ve);
            assert!(
                is_long_form_segment(&profile, &seg).unwrap(),
                "valid window must be long-form after expansion"
            );
            checked += 1;
        }
        assert!(checked > 0, "no unclipped interior example found");
    }

    #[test]
    fn ac_clips_at_recording_start() {
        let spec = MaskSpec::new(2, 4, 2, 2).unwrap();
        let cspec = SyntheticCorpusSpec {
            gap_frames: (0, 1),
            seed: 9,
            ..Default::default()
        };
        let recs = generate_corpus(&cspec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ex = single_segment_example(&recs[0], 0);
        let ex = transform_ac(ex, &recs[0], &spec, 1.0, &mut rng);
        assert!(ex.ac_applied && ex.ac_clipped);
    }

    #[test]
    fn tagging_policy_examples() {
        let a = RESERVED;
        let b = RESERVED + 1;
        let c = RESERVED + 2;
        let d = RESERVED + 3;
        assert_eq!(tag_semantic(&[vec![a, b]], true), vec![a, b, SEG_E, EOS]);
        assert_eq!(
            tag_semantic(&[vec![a, b], vec![c, d]], true),
            vec![a, b, SEG_E, c, d, SEG_E, EOS]
        );
        assert_eq!(
            tag_semantic(&[vec![a, b], vec![c, d]], false),
            vec![a, b, c, d, EOS]
        );
    }

    #[test]
    fn tagging_round_trips() {
        let recs = generate_corpus(&tiny_spec(10), 1).unwrap();
        let sentences: Vec<Vec<usize>> = recs[0].spans.iter().map(|s| s.tokens.clone()).collect();
        let tagged = tag_semantic(&sentences, true);
        let mut recovered: Vec<Vec<usize>> = Vec::new();
        let mut cur = Vec::new();
        for &t in &tagged {
            match t {
                SEG_E => {
                    recovered.push(std::mem::take(&mut cur));
                }
                EOS => break,
                other => cur.push(other),
            }
        }
        assert_eq!(recovered, sentences);
    }

    #[test]
    fn vad_recovers_clean_boundaries() {
        let spec = SyntheticCorpusSpec {
            noise_sigma: 0.0,
            silence_sigma: 0.0,
            seed: 11,
            ..Default::default()
        };
        let recs = generate_corpus(&spec, 3).unwrap();
        for rec in &recs {
            let got = simulated_vad(&rec.features, rec.feat_dim, 2, 0.5, 0, 0);
            let expect: Vec<(usize, usize)> = rec
                .encoding_segments(2)
                .iter()
                .map(|s| (s.t_b, s.t_e))
                .collect();
            let spans: Vec<(usize, usize)> = got.iter().map(|s| (s.t_b, s.t_e)).collect();
            assert_eq!(spans, expect);
        }
    }

    #[test]
    fn vad_silence_free_stream_is_one_segment() {
        let features = vec![2.0; 40 * 4];
        let got = simulated_vad(&features, 4, 2, 0.5, 0, 0);
        assert_eq!(got.len(), 1);
        assert_eq!((got[0].t_b, got[0].t_e), (0, 19));
    }

    #[test]
    fn vad_jitter_stays_within_bounds() {
        let spec = SyntheticCorpusSpec {
            noise_sigma: 0.0,
            silence_sigma: 0.0,
            seed: 12,
            ..Default::default()
        };
        let recs = generate_corpus(&spec, 5).unwrap();
        let jitter = 2usize;
        let mut seen_offset = false;
        for (i, rec) in recs.iter().enumerate() {
            let clean = simulated_vad(&rec.features, rec.feat_dim, 2, 0.5, 0, 0);
            let jittered = simulated_vad(&rec.features, rec.feat_dim, 2, 0.5, jitter, i as u64);
            for (c, j) in clean.iter().zip(&jittered) {
                assert!((c.t_b as i64 - j.t_b as i64).unsigned_abs() as usize <= jitter);
                assert!((c.t_e as i64 - j.t_e as i64).unsigned_abs() as usize <= jitter);
                if c.t_b != j.t_b || c.t_e != j.t_e {
                    seen_offset = true;
                }
            }
        }
        assert!(seen_offset, "jitter never moved a boundary");
    }

    #[test]
    fn batches_sample_all_chunk_sizes() {
        let recs = generate_corpus(&tiny_spec(13), 40).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let examples: Vec<TrainingExample> = recs
            .iter()
            .map(|r| {
                let mut e = single_segment_example(r, 0);
                e.targets = tag_semantic(&e.sentences, false);
                e
            })
            .collect();
        let batches = make_batches(examples, 4, &[2, 8], &mut rng);
        let mut seen: Vec<usize> = batches.iter().map(|b| b.chunk_m).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, vec![2, 8]);
    }

    #[test]
    fn padding_preserves_item_content() {
        let recs = generate_corpus(&tiny_spec(14), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let examples: Vec<TrainingExample> = recs
            .iter()
            .map(|r| {
                let mut e = single_segment_example(r, 0);
                e.targets = tag_semantic(&e.sentences, false);
                e
            })
            .collect();
        let reference: Vec<(Vec<f64>, Vec<usize>)> = examples
            .iter()
            .map(|e| (e.features.clone(), e.targets.clone()))
            .collect();
        let batches = make_batches(examples, 4, &[2], &mut rng);
        let mut idx = 0;
        for b in &batches {
            for i in 0..b.items.len() {
                assert_eq!(b.item_features(i), &reference[idx].0[..]);
                assert_eq!(b.item_targets(i), reference[idx].1);
                idx += 1;
            }
        }
        assert_eq!(idx, reference.len());
    }

    #[test]
    fn corpus_file_round_trip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let recs = generate_corpus(&tiny_spec(15), 4).unwrap();
        write_corpus(&path, &recs).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(recs, back);
        // byte-identical re-serialization
        let path2 = dir.path().join("corpus2.jsonl");
        write_corpus(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
