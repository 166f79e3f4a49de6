//! Gripper-signal keyframing: closure binarization and buffered interaction
//! windows that localize object interaction in time.

use crate::episode::{ActionTrace, Episode, GripperKind, ViewRole, ViewStream};
use crate::error::{Error, Result};

/// Default frame buffer added before the close event and after the open event.
pub const GRIPPER_BUFFER_DEFAULT: usize = 5;

/// Default closure threshold as a fraction of the maximum observed aperture.
pub const CLOSE_THRESHOLD_DEFAULT: f64 = 0.5;

/// A buffered frame interval around one gripper-closure run.
///
/// Invariants: `start <= close_idx <= end`, and when `open_idx` is present,
/// `close_idx <= open_idx <= end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InteractionWindow {
    pub start: usize,
    /// Inclusive end index.
    pub end: usize,
    /// First frame of the closure run.
    pub close_idx: usize,
    /// First open frame after the run; absent when the run reaches the end.
    pub open_idx: Option<usize>,
}

/// Convert the gripper channel to per-frame closure states (true = closed).
///
/// Boolean traces pass through unchanged. Continuous apertures close when the
/// value drops below `close_threshold` times the maximum observed aperture,
/// which makes the rule invariant to the robot's aperture scale. A trace whose
/// maximum aperture is zero is constant-closed.
pub fn binarize_gripper(trace: &ActionTrace, close_threshold: f64) -> Vec<bool> {
    match trace.gripper_kind {
        GripperKind::Boolean => trace.gripper.iter().map(|&g| g >= 0.5).collect(),
        GripperKind::Continuous => {
            let max = trace.gripper.iter().cloned().fold(0.0f64, f64::max);
            if max == 0.0 {
                return vec![true; trace.gripper.len()];
            }
            let cutoff = close_threshold * max;
            trace.gripper.iter().map(|&g| g < cutoff).collect()
        }
    }
}

/// Extract one buffered window per maximal closure run.
///
/// For a run starting at `s` and ending at `e` (inclusive), the release index
/// is the first open frame `e + 1`, or absent when the run reaches the
/// sequence end. Buffers clamp to `[0, T-1]`. Overlapping buffered windows are
/// kept separate so each grasp event gets its own downstream query.
pub fn interaction_windows(
    closed: &[bool],
    pre_buffer: usize,
    post_buffer: usize,
) -> Vec<InteractionWindow> {
    let t = closed.len();
    let mut windows = Vec::new();
    let mut i = 0;
    while i < t {
        if !closed[i] {
            i += 1;
            continue;
        }
        let run_start = i;
        while i < t && closed[i] {
            i += 1;
        }
        let open_idx = if i < t { Some(i) } else { None };
        let release = open_idx.unwrap_or(t - 1);
        windows.push(InteractionWindow {
            start: run_start.saturating_sub(pre_buffer),
            end: (release + post_buffer).min(t - 1),
            close_idx: run_start,
            open_idx,
        });
    }
    windows
}

/// Copy the frames of `window` from the requested view.
pub fn extract_clip(
    episode: &Episode,
    window: &InteractionWindow,
    view_role: ViewRole,
) -> Result<ViewStream> {
    let t = episode.frame_count();
    if window.start > window.end || window.end >= t || window.close_idx > window.end {
        return Err(Error::Parameter(format!(
            "window [{}, {}] invalid for {t} frames",
            window.start, window.end
        )));
    }
    let view = episode
        .view(view_role)
        .ok_or(Error::MissingView(view_role))?;
    Ok(view.slice_frames(window.start, window.end))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn continuous_trace(gripper: Vec<f64>) -> ActionTrace {
        let t = gripper.len();
        ActionTrace {
            delta_pose: Array2::zeros((t, 6)),
            gripper,
            gripper_kind: GripperKind::Continuous,
        }
    }

    fn boolean_trace(gripper: Vec<f64>) -> ActionTrace {
        let t = gripper.len();
        ActionTrace {
            delta_pose: Array2::zeros((t, 6)),
            gripper,
            gripper_kind: GripperKind::Boolean,
        }
    }

    /// Independent run-scan oracle: classify every index, then group runs.
    pub(crate) fn windows_oracle(
        closed: &[bool],
        pre: usize,
        post: usize,
    ) -> Vec<InteractionWindow> {
        let t = closed.len();
        let run_starts: Vec<usize> = (0..t)
            .filter(|&i| closed[i] && (i == 0 || !closed[i - 1]))
            .collect();
        run_starts
            .into_iter()
            .map(|s| {
                let mut e = s;
                while e + 1 < t && closed[e + 1] {
                    e += 1;
                }
                let open = if e + 1 < t { Some(e + 1) } else { None };
                let release = open.unwrap_or(t - 1);
                InteractionWindow {
                    start: if s >= pre { s - pre } else { 0 },
                    end: if release + post <= t - 1 { release + post } else { t - 1 },
                    close_idx: s,
                    open_idx: open,
                }
            })
            .collect()
    }

    #[test]
    fn boolean_trace_passes_through() {
        let closed = binarize_gripper(&boolean_trace(vec![0.0, 0.0, 1.0, 1.0, 0.0]), 0.5);
        assert_eq!(closed, vec![false, false, true, true, false]);
    }

    #[test]
    fn continuous_thresholding_hand_case() {
        let closed = binarize_gripper(&continuous_trace(vec![0.08, 0.07, 0.01, 0.00]), 0.5);
        assert_eq!(closed, vec![false, false, true, true]);
    }

    #[test]
    fn all_zero_aperture_is_constant_closed() {
        let closed = binarize_gripper(&continuous_trace(vec![0.0; 6]), 0.5);
        assert_eq!(closed, vec![true; 6]);
    }

    #[test]
    fn binarize_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let t = rng.gen_range(1..40);
            let base: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..0.1)).collect();
            let scale = rng.gen_range(0.01..100.0);
            let scaled: Vec<f64> = base.iter().map(|v| v * scale).collect();
            assert_eq!(
                binarize_gripper(&continuous_trace(base), 0.5),
                binarize_gripper(&continuous_trace(scaled), 0.5)
            );
        }
    }

    #[test]
    fn single_run_with_buffers() {
        let closed = [false, false, false, true, true, true, false, false, false, false];
        let windows = interaction_windows(&closed, 5, 5);
        assert_eq!(
            windows,
            vec![InteractionWindow { start: 0, end: 9, close_idx: 3, open_idx: Some(6) }]
        );
    }

    #[test]
    fn no_closure_yields_no_windows() {
        assert!(interaction_windows(&[false; 12], 5, 5).is_empty());
    }

    #[test]
    fn run_reaching_end_has_no_open_event() {
        let closed = [true, true, false, false, true, true, true];
        let windows = interaction_windows(&closed, 1, 1);
        assert_eq!(
            windows,
            vec![
                InteractionWindow { start: 0, end: 3, close_idx: 0, open_idx: Some(2) },
                InteractionWindow { start: 3, end: 6, close_idx: 4, open_idx: None },
            ]
        );
    }

    #[test]
    fn matches_run_scan_oracle_on_random_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..2000 {
            let t = rng.gen_range(1..=200);
            let closed: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.35)).collect();
            let pre = rng.gen_range(0..=10);
            let post = rng.gen_range(0..=10);
            let got = interaction_windows(&closed, pre, post);
            let want = windows_oracle(&closed, pre, post);
            assert_eq!(got, want, "closed={closed:?} pre={pre} post={post}");
            for w in &got {
                assert!(w.start <= w.close_idx && w.close_idx <= w.end && w.end < t);
                if let Some(o) = w.open_idx {
                    assert!(w.close_idx <= o && o <= w.end);
                }
            }
        }
    }

    #[test]
    fn extract_clip_lengths() {
        let t = 40;
        let episode = Episode {
            id: "clip".into(),
            views: vec![ViewStream {
                role: ViewRole::Wrist,
                frames: Array4::from_shape_fn((t, 4, 4, 3), |(ti, ..)| ti as u8),
            }],
            actions: boolean_trace(vec![0.0; t]),
            instruction: String::new(),
            fps: 10.0,
            source: String::new(),
        };
        let window = InteractionWindow { start: 10, end: 20, close_idx: 12, open_idx: Some(18) };
        let clip = extract_clip(&episode, &window, ViewRole::Wrist).unwrap();
        assert_eq!(clip.len(), 11);
        assert_eq!(clip.frames[[0, 0, 0, 0]], 10);

        let full = InteractionWindow { start: 0, end: t - 1, close_idx: 0, open_idx: None };
        assert_eq!(extract_clip(&episode, &full, ViewRole::Wrist).unwrap().len(), t);

        let bad = InteractionWindow { start: 0, end: t, close_idx: 0, open_idx: None };
        assert!(extract_clip(&episode, &bad, ViewRole::Wrist).is_err());
        assert!(matches!(
            extract_clip(&episode, &window, ViewRole::ThirdPerson(0)),
            Err(Error::MissingView(_))
        ));
    }
}
