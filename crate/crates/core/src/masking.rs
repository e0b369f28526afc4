//! Encoder self-attention geometry: chunked masks with finite look-back,
//! and the per-frame context accounting that decides which encodings are
//! long-form (computed with their full mask-supported context).

use crate::datapipe::Segment;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Context geometry of the encoder: `l` attention layers, `n` look-back
/// frames per layer, chunks of `m` frames, decimation factor `r`.
/// All four are in post-decimation (encoding) units except `r` itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub l: usize,
    pub n: usize,
    pub m: usize,
    pub r: usize,
}

impl MaskSpec {
    pub fn new(l: usize, n: usize, m: usize, r: usize) -> Result<Self> {
        if l < 1 || m < 1 || r < 1 {
            return Err(Error::Config(format!(
                "mask spec needs l >= 1, m >= 1, r >= 1 (got l={l}, m={m}, r={r})"
            )));
        }
        Ok(Self { l, n, m, r })
    }

    /// Maximum left context in acoustic frames.
    pub fn c_l_max(&self) -> usize {
        self.l * self.n * self.r
    }

    /// Maximum right context in acoustic frames.
    pub fn c_r_max(&self) -> usize {
        self.m * self.r
    }

    pub fn chunk_start(&self, t: usize) -> usize {
        (t / self.m) * self.m
    }

    pub fn chunk_end(&self, t: usize, frames: usize) -> usize {
        (self.chunk_start(t) + self.m - 1).min(frames - 1)
    }
}

/// Per-frame available context, in acoustic frames, given stream boundaries.
#[derive(Debug, Clone)]
pub struct ContextProfile {
    pub spec: MaskSpec,
    pub frames: usize,
    c_l: Vec<usize>,
    c_r: Vec<usize>,
}

impl ContextProfile {
    pub fn c_l(&self, t: usize) -> usize {
        self.c_l[t]
    }

    pub fn c_r(&self, t: usize) -> usize {
        self.c_r[t]
    }
}

/// Self-attention mask for one layer: entry (q, k) says whether query frame
/// q may attend key frame k. Queries see their chunk up to its end plus `n`
/// look-back frames behind themselves; identical across layers (the layer
/// argument is kept for future per-layer variation).
pub fn build_layer_mask(spec: &MaskSpec, frames: usize, layer: usize) -> Result<Vec<bool>> {
    build_layer_mask_offset(spec, frames, layer, 0)
}

/// Same mask with the chunk grid anchored `offset` encoding frames before
/// this stream's first frame, so a window cut out of a longer stream keeps
/// the original chunk alignment.
pub fn build_layer_mask_offset(
    spec: &MaskSpec,
    frames: usize,
    layer: usize,
    offset: usize,
) -> Result<Vec<bool>> {
    if frames == 0 {
        return Err(Error::EmptyInput {
            what: "mask frame count",
        });
    }
    if layer >= spec.l {
        return Err(Error::IndexOutOfRange {
            what: "mask layer",
            index: layer,
            size: spec.l,
        });
    }
    let mut mask = vec![false; frames * frames];
    for q in 0..frames {
        let (lo, hi) = attendable_range(spec, q, frames, offset);
        for k in lo..=hi {
            mask[q * frames + k] = true;
        }
    }
    Ok(mask)
}

/// Local-frame attendable key range for query `q` under a global grid
/// shifted by `offset`.
pub(crate) fn attendable_range(
    spec: &MaskSpec,
    q: usize,
    frames: usize,
    offset: usize,
) -> (usize, usize) {
    let gq = q + offset;
    let lo_global = gq.saturating_sub(spec.n).max(offset);
    let hi_global = (spec.chunk_start(gq) + spec.m - 1).min(offset + frames - 1);
    (lo_global - offset, hi_global - offset)
}

/// Exact per-frame context via iterated reachability: propagate the interval
/// of input frames influencing each encoding through all `l` layers of the
/// mask, then convert to acoustic frames. The left context is measured from
/// the frame's own acoustic window, the right context from its chunk start
/// (the whole chunk counts as look-ahead), so interior frames saturate at
/// `l*n*r` and `m*r` exactly.
pub fn context_profile(spec: &MaskSpec, frames: usize) -> Result<ContextProfile> {
    context_profile_offset(spec, frames, 0)
}

pub fn context_profile_offset(
    spec: &MaskSpec,
    frames: usize,
    offset: usize,
) -> Result<ContextProfile> {
    if frames == 0 {
        return Err(Error::EmptyInput {
            what: "profile frame count",
        });
    }
    let mut c_l = Vec::with_capacity(frames);
    let mut c_r = Vec::with_capacity(frames);
    for t in 0..frames {
        let (lo, hi) = reachable_interval(spec, t, frames, offset);
        // chunk start in local frames, clipped at the stream start
        let chunk_start_local = spec.chunk_start(t + offset).max(offset) - offset;
        c_l.push((t - lo) * spec.r);
        c_r.push((hi + 1 - chunk_start_local) * spec.r);
    }
    Ok(ContextProfile {
        spec: *spec,
        frames,
        c_l,
        c_r,
    })
}

/// Interval of encoding frames that influence h_t after all layers,
/// clipped to the stream. Reachable sets are contiguous because every
/// layer's attendable range is contiguous and contains the query.
fn reachable_interval(
    spec: &MaskSpec,
    t: usize,
    frames: usize,
    offset: usize,
) -> (usize, usize) {
    let mut lo = t;
    let mut hi = t;
    for _ in 0..spec.l {
        let (llo, _) = attendable_range(spec, lo, frames, offset);
        let (_, hhi) = attendable_range(spec, hi, frames, offset);
        lo = llo;
        hi = hhi;
    }
    (lo, hi)
}

/// Definition of a long-form encoding: the frame's available context equals
/// the maximum the mask supports.
pub fn is_lfe(profile: &ContextProfile, t: usize) -> Result<bool> {
    if t >= profile.frames {
        return Err(Error::IndexOutOfRange {
            what: "frame",
            index: t,
            size: profile.frames,
        });
    }
    Ok(profile.c_l[t] == profile.spec.c_l_max() && profile.c_r[t] == profile.spec.c_r_max())
}

/// A segment is long-form when every one of its encodings is long-form.
pub fn is_long_form_segment(profile: &ContextProfile, seg: &Segment) -> Result<bool> {
    if seg.t_b > seg.t_e || seg.t_e >= profile.frames {
        return Err(Error::BadSegment {
            t_b: seg.t_b,
            t_e: seg.t_e,
            frames: profile.frames,
        });
    }
    for t in seg.t_b..=seg.t_e {
        if !is_lfe(profile, t)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Acoustic-frame window that makes a segment long-form. `start` may be
/// negative when the demand exceeds the stream start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequiredWindow {
    pub start: i64,
    pub end: i64,
    pub clipped_left: bool,
}

impl RequiredWindow {
    /// Encoding-frame offset of the window within the original stream.
    pub fn encoding_offset(&self, r: usize) -> i64 {
        self.start / r as i64
    }

    /// Resolve against a concrete stream length, reporting right clipping.
    pub fn clamp(&self, stream_len: usize) -> (usize, usize, bool) {
        let start = self.start.max(0) as usize;
        let end = (self.end.min(stream_len as i64)).max(start as i64) as usize;
        let clipped = self.clipped_left || self.end > stream_len as i64;
        (start, end, clipped)
    }
}

/// Audio window `[t_b*r - c_l_max, (t_e+1)*r + c_r_max)` whose encodings
/// cover the segment with full context.
pub fn required_window(spec: &MaskSpec, seg: &Segment) -> RequiredWindow {
    let start = (seg.t_b * spec.r) as i64 - spec.c_l_max() as i64;
    let end = ((seg.t_e + 1) * spec.r + spec.c_r_max()) as i64;
    RequiredWindow {
        start,
        end,
        clipped_left: start < 0,
    }
}
