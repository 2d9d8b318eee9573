//! Time-aware attention masks: a text token at time t may attend only video
//! frames with timestamp <= t (equality allowed); text-to-text attention is
//! causal. Masks are materialized boolean matrices at toy scale and always
//! rebuilt from timestamps, never serialized.

use crate::numkit::BoolMat;

/// Text-to-frame visibility mask. `allowed[i][j]` iff frame j's timestamp is
/// at or before text token i's timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamMask {
    pub text_count: usize,
    pub visual_count: usize,
    pub allowed: BoolMat,
}

pub fn build_stream_mask(text_times: &[f64], frame_times: &[f64]) -> StreamMask {
    let mut allowed = BoolMat::new(text_times.len(), frame_times.len(), false);
    for (i, &tt) in text_times.iter().enumerate() {
        for (j, &ft) in frame_times.iter().enumerate() {
            allowed.set(i, j, ft <= tt);
        }
    }
    StreamMask {
        text_count: text_times.len(),
        visual_count: frame_times.len(),
        allowed,
    }
}

/// Lower-triangular-inclusive causal mask.
pub fn build_causal_mask(n: usize) -> BoolMat {
    let mut m = BoolMat::new(n, n, false);
    for i in 0..n {
        for j in 0..=i {
            m.set(i, j, true);
        }
    }
    m
}

/// Expand a per-frame stream mask to a per-visual-token mask where every
/// frame contributes `tokens_per_frame` adjacent columns.
pub fn expand_frame_mask(mask: &StreamMask, tokens_per_frame: usize) -> BoolMat {
    let mut out = BoolMat::new(mask.text_count, mask.visual_count * tokens_per_frame, false);
    for i in 0..mask.text_count {
        for j in 0..mask.visual_count {
            if mask.allowed.get(i, j) {
                for k in 0..tokens_per_frame {
                    out.set(i, j * tokens_per_frame + k, true);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub text_index: usize,
    pub frame_index: usize,
    pub text_time: f64,
    pub frame_time: f64,
}

#[derive(Debug, Clone)]
pub struct IntegrityReport {
    pub comparisons: usize,
    pub violations: Vec<Violation>,
}

impl IntegrityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check that no allowed pair lets a text token see a future frame. Reports
/// every violation with indices and times.
pub fn verify_temporal_integrity(
    mask: &StreamMask,
    text_times: &[f64],
    frame_times: &[f64],
) -> IntegrityReport {
    let mut violations = Vec::new();
    let mut comparisons = 0;
    for (i, &tt) in text_times.iter().enumerate() {
        for (j, &ft) in frame_times.iter().enumerate() {
            comparisons += 1;
            if mask.allowed.get(i, j) && ft > tt {
                violations.push(Violation {
                    text_index: i,
                    frame_index: j,
                    text_time: tt,
                    frame_time: ft,
                });
            }
        }
    }
    IntegrityReport {
        comparisons,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn boundary_equality_is_allowed() {
        let m = build_stream_mask(&[5.0], &[5.0]);
        assert!(m.allowed.get(0, 0));
    }

    #[test]
    fn simple_block() {
        let m = build_stream_mask(&[5.0, 6.0], &[0.0, 7.0]);
        assert!(m.allowed.get(0, 0) && !m.allowed.get(0, 1));
        assert!(m.allowed.get(1, 0) && !m.allowed.get(1, 1));
    }

    #[test]
    fn random_instance_matches_double_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(30);
        let text: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..30.0)).collect();
        let frames: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..30.0)).collect();
        let m = build_stream_mask(&text, &frames);
        for i in 0..20 {
            for j in 0..30 {
                assert_eq!(m.allowed.get(i, j), frames[j] <= text[i]);
            }
        }
    }

    #[test]
    fn causal_mask_shapes() {
        let m = build_causal_mask(1);
        assert!(m.get(0, 0));
        let m = build_causal_mask(3);
        let expect = [
            [true, false, false],
            [true, true, false],
            [true, true, true],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), expect[i][j]);
            }
        }
        for n in [0usize, 2, 5, 9] {
            let m = build_causal_mask(n);
            for i in 0..n {
                let count = (0..n).filter(|&j| m.get(i, j)).count();
                assert_eq!(count, i + 1);
            }
        }
    }

    #[test]
    fn integrity_passes_by_construction_and_catches_flips() {
        let mut rng = StdRng::seed_from_u64(31);
        let text: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..20.0)).collect();
        let frames: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..20.0)).collect();
        let mut m = build_stream_mask(&text, &frames);
        assert!(verify_temporal_integrity(&m, &text, &frames).passed());

        // flip one disallowed (future) bit to allowed: exactly one violation
        let mut flipped = None;
        'outer: for i in 0..10 {
            for j in 0..12 {
                if !m.allowed.get(i, j) {
                    m.allowed.set(i, j, true);
                    flipped = Some((i, j));
                    break 'outer;
                }
            }
        }
        let (fi, fj) = flipped.expect("some future pair exists");
        let report = verify_temporal_integrity(&m, &text, &frames);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].text_index, fi);
        assert_eq!(report.violations[0].frame_index, fj);
    }

    #[test]
    fn empty_frame_list_passes_with_zero_comparisons() {
        let m = build_stream_mask(&[1.0, 2.0], &[]);
        let report = verify_temporal_integrity(&m, &[1.0, 2.0], &[]);
        assert!(report.passed());
        assert_eq!(report.comparisons, 0);
    }

    proptest! {
        #[test]
        fn row_monotonicity_for_sorted_text(
            mut text in proptest::collection::vec(0.0f64..100.0, 1..12),
            frames in proptest::collection::vec(0.0f64..100.0, 0..12),
        ) {
            text.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let m = build_stream_mask(&text, &frames);
            for i in 1..text.len() {
                for j in 0..frames.len() {
                    // later rows see a superset
                    prop_assert!(!m.allowed.get(i - 1, j) || m.allowed.get(i, j));
                }
            }
        }

        #[test]
        fn integrity_idempotent(
            text in proptest::collection::vec(0.0f64..50.0, 0..10),
            frames in proptest::collection::vec(0.0f64..50.0, 0..10),
        ) {
            let m = build_stream_mask(&text, &frames);
            prop_assert!(verify_temporal_integrity(&m, &text, &frames).passed());
        }
    }

    #[test]
    fn streaming_consistency_row_blocks() {
        // the mask over frames visible at step k equals the k-th row block of
        // the full-schedule mask restricted to those frames
        let text: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0];
        let frames: Vec<f64> = vec![0.5, 1.5, 2.5, 3.5, 4.5];
        let full = build_stream_mask(&text, &frames);
        for (k, &tk) in text.iter().enumerate() {
            let visible: Vec<f64> = frames.iter().copied().filter(|&f| f <= tk).collect();
            let partial = build_stream_mask(&text[..=k], &visible);
            for i in 0..=k {
                for (jj, &ft) in visible.iter().enumerate() {
                    let j_full = frames.iter().position(|&f| f == ft).unwrap();
                    assert_eq!(partial.allowed.get(i, jj), full.allowed.get(i, j_full));
                }
            }
        }
    }
}
