use rand::Rng;

use crate::error::{Error, Result};

/// How to pick one snippet inside each segment.
pub enum SampleMode<'a, R: Rng + ?Sized> {
    /// Uniform position within the segment (training).
    Random(&'a mut R),
    /// Fixed position `⌊(group + 0.5)·len/groups⌋` (inference group `group` of `groups`).
    Equispaced { group: usize, groups: usize },
}

/// Half-open frame range `[⌊tL/T⌋, ⌊(t+1)L/T⌋)` of segment `t`.
pub fn segment_bounds(length: usize, segments: usize, t: usize) -> (usize, usize) {
    (t * length / segments, (t + 1) * length / segments)
}

/// Splits `length` frames into `segments` equal segments and draws one
/// snippet index per segment.
pub fn segment_sample<R: Rng + ?Sized>(length: usize, segments: usize, mode: SampleMode<'_, R>) -> Result<Vec<usize>> {
    if segments == 0 {
        return Err(Error::Config("segment count must be positive".into()));
    }
    if length < segments {
        return Err(Error::Data(format!("clip of {length} snippets cannot fill {segments} segments")));
    }
    match mode {
        SampleMode::Random(rng) => Ok((0..segments)
            .map(|t| {
                let (lo, hi) = segment_bounds(length, segments, t);
                rng.gen_range(lo..hi)
            })
            .collect()),
        SampleMode::Equispaced { group, groups } => {
            if groups == 0 || group >= groups {
                return Err(Error::Config(format!("group {group} out of 0..{groups}")));
            }
            Ok((0..segments)
                .map(|t| {
                    let (lo, hi) = segment_bounds(length, segments, t);
                    // ⌊(g + 0.5)·len/G⌋ = ⌊(2g + 1)·len / 2G⌋
                    lo + (2 * group + 1) * (hi - lo) / (2 * groups)
                })
                .collect())
        }
    }
}
