//! Action-guided segmentation orchestration: anchor-frame selection, mask
//! refinement, k-means prompt sampling, per-entity video tracking, mask
//! merging, and white-masked conditioning videos.
//!
//! Two parallel streams run per view: one for the robot arm (fixed query
//! "robot") and one for the interacted object (label inferred once from the
//! wrist view's gripper-closure clip and reused across views).

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clients::{ClientSet, OpenVocabSegmenter, PointPrompt};
use crate::episode::{frame_file, read_json, write_json, Artifact, Episode, ViewRole, ViewStream};
use crate::error::{Error, Result};
use crate::keyframe::{self, InteractionWindow};
use crate::util;

/// Resolution every frame is resized to before segmentation queries.
pub const SEG_HEIGHT: usize = 320;
pub const SEG_WIDTH: usize = 448;

/// Default number of uniformly sampled candidate anchor frames.
pub const ANCHOR_SAMPLES_DEFAULT: usize = 5;

/// Default median-blur kernel for mask refinement.
pub const REFINE_KERNEL_DEFAULT: usize = 5;

/// Default number of k-means prompt points per entity.
pub const PROMPT_POINTS_DEFAULT: usize = 5;

/// Entity being segmented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Entity {
    Robot,
    Object,
}

impl std::fmt::Display for Entity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Entity::Robot => write!(f, "robot"),
            Entity::Object => write!(f, "object"),
        }
    }
}

/// Per-frame boolean masks for one entity on one view.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityMaskVideo {
    pub entity: Entity,
    pub view_role: ViewRole,
    /// (T, H, W).
    pub masks: Array3<bool>,
    /// True when the entity could not be localized; masks are then all-false.
    pub entity_absent: bool,
    /// Anchor frame index the tracker was seeded from (absent entities: 0).
    pub anchor_index: usize,
    /// Query label used for the anchor search.
    pub label: String,
    /// Prompt points sampled from the refined anchor mask.
    pub prompt_points: Vec<(usize, usize)>,
}

/// Source frames with everything outside the keep-mask painted white 255.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningVideo {
    pub view_role: ViewRole,
    /// (T, H, W, 3); pixels outside the keep-mask are exactly (255,255,255).
    pub frames: Array4<u8>,
    /// (T, H, W); true = preserved foreground.
    pub keep_mask: Array3<bool>,
}

/// Uniformly sample `n_samples` frame indices over `[0, t)`, including the
/// first and last frame when `n_samples >= 2`. Duplicates collapse.
pub fn anchor_sample_indices(t: usize, n_samples: usize) -> Vec<usize> {
    assert!(t >= 1);
    if n_samples <= 1 || t == 1 {
        return vec![0];
    }
    let mut indices: Vec<usize> = (0..n_samples)
        .map(|i| i * (t - 1) / (n_samples - 1))
        .collect();
    indices.dedup();
    indices
}

/// Pick the sampled frame whose query mask has the largest area.
///
/// Frames are resized to 320x448 for the segmenter; the winning mask is
/// returned nearest-neighbor upscaled to the native resolution. Ties break
/// toward the smaller frame index.
pub fn select_anchor_frame(
    view: &ViewStream,
    query: &str,
    segmenter: &dyn OpenVocabSegmenter,
    n_samples: usize,
) -> Result<(usize, Array2<bool>)> {
    let mut best: Option<(usize, usize, Array2<bool>)> = None; // (area, index, mask)
    for idx in anchor_sample_indices(view.len(), n_samples) {
        let small = util::resize_rgb_nearest(view.frame(idx), SEG_HEIGHT, SEG_WIDTH);
        let got = segmenter.open_vocab_mask(small.view(), query, idx)?;
        let area = got.mask.iter().filter(|&&b| b).count();
        if area > 0 && best.as_ref().map_or(true, |(a, ..)| area > *a) {
            best = Some((area, idx, got.mask));
        }
    }
    match best {
        Some((_, idx, mask)) => {
            let native = util::resize_mask_nearest(mask.view(), view.height(), view.width());
            Ok((idx, native))
        }
        None => Err(Error::AnchorNotFound {
            view: view.role,
            query: query.to_string(),
        }),
    }
}

/// Median blur on a boolean mask: each output pixel is the majority value of
/// its kernel x kernel neighborhood with edge replication.
pub fn refine_mask(mask: ArrayView2<bool>, kernel: usize) -> Result<Array2<bool>> {
    if kernel % 2 == 0 || kernel < 3 {
        return Err(Error::Parameter(format!(
            "median kernel must be odd and >= 3, got {kernel}"
        )));
    }
    let (h, w) = mask.dim();
    let r = (kernel / 2) as i64;
    let mut out = Array2::from_elem((h, w), false);
    let majority = (kernel * kernel / 2) as u32;
    for y in 0..h {
        for x in 0..w {
            let mut count = 0u32;
            for dy in -r..=r {
                let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                for dx in -r..=r {
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    if mask[[sy, sx]] {
                        count += 1;
                    }
                }
            }
            out[[y, x]] = count > majority;
        }
    }
    Ok(out)
}

/// K-means over true-pixel coordinates; every returned point is snapped to
/// the nearest true pixel so all prompts lie inside the mask.
///
/// Deterministic given the seed: seeded first center, farthest-point
/// initialization for the rest, at most 50 Lloyd iterations, and
/// smallest-index tie-breaking throughout.
pub fn sample_prompt_points(mask: ArrayView2<bool>, k: usize, seed: u64) -> Result<PointPrompt> {
    let coords: Vec<(usize, usize)> = {
        let (h, w) = mask.dim();
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| mask[[y, x]])
            .collect()
    };
    if coords.is_empty() {
        return Err(Error::EmptyMask);
    }
    let k_eff = k.max(1).min(coords.len());
    let dist2 = |a: (usize, usize), b: (f64, f64)| {
        let dx = a.0 as f64 - b.0;
        let dy = a.1 as f64 - b.1;
        dx * dx + dy * dy
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(k_eff);
    let first = coords[rng.gen_range(0..coords.len())];
    centers.push((first.0 as f64, first.1 as f64));
    while centers.len() < k_eff {
        // Farthest point from the current centers; ties to the smallest index.
        let (mut best_i, mut best_d) = (0, -1.0);
        for (i, &c) in coords.iter().enumerate() {
            let d = centers
                .iter()
                .map(|&ctr| dist2(c, ctr))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best_i = i;
            }
        }
        let p = coords[best_i];
        centers.push((p.0 as f64, p.1 as f64));
    }

    let mut assignment = vec![0usize; coords.len()];
    for _ in 0..50 {
        let mut changed = false;
        for (i, &c) in coords.iter().enumerate() {
            let (mut best_j, mut best_d) = (0, f64::INFINITY);
            for (j, &ctr) in centers.iter().enumerate() {
                let d = dist2(c, ctr);
                if d < best_d {
                    best_d = d;
                    best_j = j;
                }
            }
            if assignment[i] != best_j {
                assignment[i] = best_j;
                changed = true;
            }
        }
        for j in 0..k_eff {
            let members: Vec<(usize, usize)> = coords
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == j)
                .map(|(&c, _)| c)
                .collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                centers[j] = (
                    members.iter().map(|p| p.0 as f64).sum::<f64>() / n,
                    members.iter().map(|p| p.1 as f64).sum::<f64>() / n,
                );
            }
        }
        if !changed {
            break;
        }
    }

    // Snap each centroid to the nearest true pixel (ties to scan order).
    let mut points: Vec<(usize, usize)> = centers
        .iter()
        .map(|&ctr| {
            let mut best = coords[0];
            let mut best_d = f64::INFINITY;
            for &c in &coords {
                let d = dist2(c, ctr);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect();
    points.sort();
    points.dedup();
    Ok(PointPrompt { points })
}

/// Per-pixel OR of the robot and object masks; entity-absent streams
/// contribute all-false.
pub fn merge_entities(robot: &EntityMaskVideo, object: &EntityMaskVideo) -> Result<Array3<bool>> {
    if robot.masks.dim() != object.masks.dim() {
        return Err(Error::ShapeMismatch(format!(
            "robot {:?} vs object {:?}",
            robot.masks.dim(),
            object.masks.dim()
        )));
    }
    let mut keep = if robot.entity_absent {
        Array3::from_elem(robot.masks.dim(), false)
    } else {
        robot.masks.clone()
    };
    if !object.entity_absent {
        keep.zip_mut_with(&object.masks, |k, &o| *k = *k || o);
    }
    Ok(keep)
}

/// Copy preserved pixels and paint everything else white 255.
pub fn build_conditioning_video(view: &ViewStream, keep_mask: &Array3<bool>) -> Result<ConditioningVideo> {
    let (t, h, w, _) = view.frames.dim();
    if keep_mask.dim() != (t, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "keep mask {:?} vs frames {:?}",
            keep_mask.dim(),
            view.frames.dim()
        )));
    }
    let mut frames = Array4::from_elem((t, h, w, 3), 255u8);
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                if keep_mask[[ti, y, x]] {
                    for c in 0..3 {
                        frames[[ti, y, x, c]] = view.frames[[ti, y, x, c]];
                    }
                }
            }
        }
    }
    Ok(ConditioningVideo {
        view_role: view.role,
        frames,
        keep_mask: keep_mask.clone(),
    })
}

/// Where the interacted-object label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Wrist,
    ThirdPerson,
}

/// Configuration for [`segment_episode`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub close_threshold: f64,
    pub pre_buffer: usize,
    pub post_buffer: usize,
    pub anchor_samples: usize,
    pub refine_kernel: usize,
    pub prompt_points: usize,
    pub seed: u64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            close_threshold: keyframe::CLOSE_THRESHOLD_DEFAULT,
            pre_buffer: keyframe::GRIPPER_BUFFER_DEFAULT,
            post_buffer: keyframe::GRIPPER_BUFFER_DEFAULT,
            anchor_samples: ANCHOR_SAMPLES_DEFAULT,
            refine_kernel: REFINE_KERNEL_DEFAULT,
            prompt_points: PROMPT_POINTS_DEFAULT,
            seed: 0,
        }
    }
}

/// Masks for both entities on one view.
#[derive(Debug, Clone)]
pub struct ViewMasks {
    pub robot: EntityMaskVideo,
    pub object: EntityMaskVideo,
}

/// Full segmentation output for one episode.
#[derive(Debug, Clone)]
pub struct SegmentationResult {
    pub per_view: Vec<ViewMasks>,
    pub label: String,
    pub label_source: LabelSource,
    /// Interaction windows found on the gripper channel (may be empty).
    pub windows: Vec<InteractionWindow>,
    /// True when no closure was found and the label query used the full video.
    pub full_clip_fallback: bool,
}

const OBJECT_QUESTION: &str =
    "What object is the robot arm interacting with in this clip? Answer with a short noun phrase.";

/// Run the two-stream segmentation workflow over every view of an episode.
///
/// The object label is inferred once from the wrist view's first
/// gripper-closure clip (or view 0 when no wrist view exists, or the full
/// video when the gripper never closes) and reused across views. A robot
/// anchor failure marks the episode unusable; an object anchor failure marks
/// the object absent and continues with robot-only preservation.
pub fn segment_episode(
    episode: &Episode,
    clients: &ClientSet,
    config: &SegmentationConfig,
) -> Result<SegmentationResult> {
    episode.validate()?;
    let closed = keyframe::binarize_gripper(&episode.actions, config.close_threshold);
    let windows = keyframe::interaction_windows(&closed, config.pre_buffer, config.post_buffer);

    let (label_role, label_source) = if episode.has_wrist() {
        (ViewRole::Wrist, LabelSource::Wrist)
    } else {
        (episode.views[0].role, LabelSource::ThirdPerson)
    };
    let full_clip_fallback = windows.is_empty();
    let clip = if let Some(window) = windows.first() {
        keyframe::extract_clip(episode, window, label_role)?
    } else {
        // Non-prehensile episode: let the reasoner see the whole video.
        episode.view(label_role).unwrap().clone()
    };
    let label = clients
        .reasoner
        .reason_object_name(&episode.id, &clip, OBJECT_QUESTION)?;

    let mut per_view = Vec::new();
    for view in &episode.views {
        let robot = segment_entity(episode, view, Entity::Robot, "robot", clients, config)?
            .ok_or(Error::AnchorNotFound {
                view: view.role,
                query: "robot".to_string(),
            })?;
        let object = segment_entity(episode, view, Entity::Object, &label, clients, config)?
            .unwrap_or_else(|| EntityMaskVideo {
                entity: Entity::Object,
                view_role: view.role,
                masks: Array3::from_elem(
                    (view.len(), view.height(), view.width()),
                    false,
                ),
                entity_absent: true,
                anchor_index: 0,
                label: label.clone(),
                prompt_points: Vec::new(),
            });
        per_view.push(ViewMasks { robot, object });
    }
    Ok(SegmentationResult {
        per_view,
        label,
        label_source,
        windows,
        full_clip_fallback,
    })
}

/// Anchor, refine, sample prompts, track. `Ok(None)` means the anchor search
/// found nothing for this entity.
fn segment_entity(
    episode: &Episode,
    view: &ViewStream,
    entity: Entity,
    query: &str,
    clients: &ClientSet,
    config: &SegmentationConfig,
) -> Result<Option<EntityMaskVideo>> {
    let anchor = match select_anchor_frame(view, query, clients.segmenter.as_ref(), config.anchor_samples) {
        Ok(found) => found,
        Err(Error::AnchorNotFound { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let (anchor_index, anchor_mask) = anchor;
    let refined = refine_mask(anchor_mask.view(), config.refine_kernel)?;
    // Refinement can erase a thin mask entirely; fall back to the raw anchor.
    let mask = if refined.iter().any(|&b| b) { refined } else { anchor_mask };
    let seed = util::derive_seed(
        config.seed,
        &[&episode.id, &view.role.to_string(), &entity.to_string()],
    );
    let prompts = sample_prompt_points(mask.view(), config.prompt_points, seed)?;
    let tracked = clients
        .tracker
        .track_video(view, &prompts, anchor_index, &mask)?;
    let (t, h, w) = (view.len(), view.height(), view.width());
    let mut masks = Array3::from_elem((t, h, w), false);
    for (ti, m) in tracked.iter().enumerate() {
        if m.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "tracked mask {:?} vs view {h}x{w}",
                m.dim()
            )));
        }
        masks.index_axis_mut(ndarray::Axis(0), ti).assign(m);
    }
    Ok(Some(EntityMaskVideo {
        entity,
        view_role: view.role,
        masks,
        entity_absent: false,
        anchor_index,
        label: query.to_string(),
        prompt_points: prompts.points,
    }))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MaskVideoManifest {
    entity: Entity,
    view: ViewRole,
    count: usize,
    height: usize,
    width: usize,
    entity_absent: bool,
    anchor_index: usize,
    label: String,
    prompt_points: Vec<(usize, usize)>,
}

pub const MASK_VIDEO_MANIFEST: &str = "mask_video.json";

impl Artifact for EntityMaskVideo {
    fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (t, h, w) = self.masks.dim();
        for ti in 0..t {
            util::save_mask_pbm(
                self.masks.index_axis(ndarray::Axis(0), ti),
                &dir.join(format!("mask_{ti:05}.pbm")),
            )?;
        }
        let path = dir.join(MASK_VIDEO_MANIFEST);
        write_json(
            &MaskVideoManifest {
                entity: self.entity,
                view: self.view_role,
                count: t,
                height: h,
                width: w,
                entity_absent: self.entity_absent,
                anchor_index: self.anchor_index,
                label: self.label.clone(),
                prompt_points: self.prompt_points.clone(),
            },
            &path,
        )?;
        Ok(path)
    }

    fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: MaskVideoManifest = read_json(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut masks = Array3::from_elem((manifest.count, manifest.height, manifest.width), false);
        for ti in 0..manifest.count {
            let m = util::load_mask_pbm(&base.join(format!("mask_{ti:05}.pbm")))?;
            if m.dim() != (manifest.height, manifest.width) {
                return Err(Error::ShapeMismatch(format!(
                    "mask {ti} has {:?}, manifest says {}x{}",
                    m.dim(),
                    manifest.height,
                    manifest.width
                )));
            }
            masks.index_axis_mut(ndarray::Axis(0), ti).assign(&m);
        }
        Ok(EntityMaskVideo {
            entity: manifest.entity,
            view_role: manifest.view,
            masks,
            entity_absent: manifest.entity_absent,
            anchor_index: manifest.anchor_index,
            label: manifest.label,
            prompt_points: manifest.prompt_points,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ConditioningVideoManifest {
    view: ViewRole,
    count: usize,
    height: usize,
    width: usize,
}

pub const CONDITIONING_MANIFEST: &str = "conditioning.json";

impl Artifact for ConditioningVideo {
    fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (t, h, w, _) = self.frames.dim();
        for ti in 0..t {
            util::save_frame_png(
                self.frames.index_axis(ndarray::Axis(0), ti),
                &dir.join(frame_file(ti)),
            )?;
            util::save_mask_pbm(
                self.keep_mask.index_axis(ndarray::Axis(0), ti),
                &dir.join(format!("keep_{ti:05}.pbm")),
            )?;
        }
        let path = dir.join(CONDITIONING_MANIFEST);
        write_json(
            &ConditioningVideoManifest {
                view: self.view_role,
                count: t,
                height: h,
                width: w,
            },
            &path,
        )?;
        Ok(path)
    }

    fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: ConditioningVideoManifest = read_json(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut frames = Array4::zeros((manifest.count, manifest.height, manifest.width, 3));
        let mut keep = Array3::from_elem((manifest.count, manifest.height, manifest.width), false);
        for ti in 0..manifest.count {
            frames
                .index_axis_mut(ndarray::Axis(0), ti)
                .assign(&util::load_frame_png(&base.join(frame_file(ti)))?);
            keep.index_axis_mut(ndarray::Axis(0), ti)
                .assign(&util::load_mask_pbm(&base.join(format!("keep_{ti:05}.pbm")))?);
        }
        Ok(ConditioningVideo {
            view_role: manifest.view,
            frames,
            keep_mask: keep,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::stub::{MaskFixture, Rect, StubFixtures};
    use std::collections::BTreeMap;
    

    fn frame_view(t: usize, h: usize, w: usize) -> ViewStream {
        ViewStream {
            role: ViewRole::Wrist,
            frames: Array4::from_shape_fn((t, h, w, 3), |(ti, y, x, c)| {
                (ti * 7 + y * 3 + x + c) as u8
            }),
        }
    }

    #[test]
    fn anchor_indices_match_uniform_oracle() {
        assert_eq!(anchor_sample_indices(100, 5), vec![0, 24, 49, 74, 99]);
        assert_eq!(anchor_sample_indices(1, 5), vec![0]);
        assert_eq!(anchor_sample_indices(10, 1), vec![0]);
        assert_eq!(anchor_sample_indices(2, 5), vec![0, 1]);
        for t in 2..50 {
            let idx = anchor_sample_indices(t, 5);
            assert_eq!(*idx.first().unwrap(), 0);
            assert_eq!(*idx.last().unwrap(), t - 1);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn anchor_picks_largest_area_smallest_index_tie() {
        // Areas per sampled frame {0:0, 24:120, 49:300, 74:300, 99:10}.
        let masks = vec![
            MaskFixture { query: "robot".into(), frame_index: Some(24), rect: Rect { x: 0, y: 0, w: 12, h: 10 } },
            MaskFixture { query: "robot".into(), frame_index: Some(49), rect: Rect { x: 0, y: 0, w: 20, h: 15 } },
            MaskFixture { query: "robot".into(), frame_index: Some(74), rect: Rect { x: 5, y: 5, w: 20, h: 15 } },
            MaskFixture { query: "robot".into(), frame_index: Some(99), rect: Rect { x: 0, y: 0, w: 5, h: 2 } },
        ];
        let clients = ClientSet::stubs(StubFixtures { masks, ..Default::default() });
        let view = frame_view(100, 320, 448);
        let (idx, mask) = select_anchor_frame(&view, "robot", clients.segmenter.as_ref(), 5).unwrap();
        assert_eq!(idx, 49);
        assert_eq!(mask.iter().filter(|&&b| b).count(), 300);
    }

    #[test]
    fn anchor_not_found_when_all_empty() {
        let clients = ClientSet::stubs(StubFixtures::default());
        let view = frame_view(10, 320, 448);
        assert!(matches!(
            select_anchor_frame(&view, "robot", clients.segmenter.as_ref(), 5),
            Err(Error::AnchorNotFound { .. })
        ));
    }

    #[test]
    fn anchor_mask_upscales_to_native_resolution() {
        let masks = vec![MaskFixture {
            query: "robot".into(),
            frame_index: None,
            rect: Rect { x: 0, y: 0, w: SEG_WIDTH, h: SEG_HEIGHT },
        }];
        let clients = ClientSet::stubs(StubFixtures { masks, ..Default::default() });
        let view = frame_view(3, 64, 96);
        let (_, mask) = select_anchor_frame(&view, "robot", clients.segmenter.as_ref(), 3).unwrap();
        assert_eq!(mask.dim(), (64, 96));
        assert!(mask.iter().all(|&b| b));
    }

    /// Direct neighborhood-majority oracle.
    fn refine_oracle(mask: &Array2<bool>, kernel: usize) -> Array2<bool> {
        let (h, w) = mask.dim();
        let r = (kernel / 2) as i64;
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut trues = 0usize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    trues += mask[[sy, sx]] as usize;
                }
            }
            2 * trues > kernel * kernel
        })
    }

    #[test]
    fn refine_removes_isolated_speckle() {
        let mut mask = Array2::from_elem((9, 9), false);
        mask[[4, 4]] = true;
        let out = refine_mask(mask.view(), 5).unwrap();
        assert!(out.iter().all(|&b| !b));
    }

    #[test]
    fn refine_preserves_solid_block_with_edge_replication() {
        let mask = Array2::from_elem((20, 20), true);
        let out = refine_mask(mask.view(), 5).unwrap();
        assert_eq!(out, mask);
    }

    #[test]
    fn refine_identity_on_empty_and_matches_oracle() {
        let empty = Array2::from_elem((7, 7), false);
        assert_eq!(refine_mask(empty.view(), 3).unwrap(), empty);
        assert!(refine_mask(empty.view(), 4).is_err());

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let mask = Array2::from_shape_fn((16, 12), |_| rng.gen_bool(0.4));
            for kernel in [3, 5] {
                assert_eq!(refine_mask(mask.view(), kernel).unwrap(), refine_oracle(&mask, kernel));
            }
        }
    }

    #[test]
    fn refine_never_creates_majority_false_pixels() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        let mask = Array2::from_shape_fn((24, 24), |_| rng.gen_bool(0.5));
        let out = refine_mask(mask.view(), 5).unwrap();
        let oracle = refine_oracle(&mask, 5);
        for y in 0..24 {
            for x in 0..24 {
                if out[[y, x]] {
                    assert!(oracle[[y, x]], "pixel ({y},{x}) set against majority");
                }
            }
        }
    }

    #[test]
    fn kmeans_two_blocks_one_point_each() {
        let mut mask = Array2::from_elem((20, 20), false);
        for y in 0..5 {
            for x in 0..5 {
                mask[[y, x]] = true;
                mask[[y + 15, x + 15]] = true;
            }
        }
        let prompt = sample_prompt_points(mask.view(), 2, 7).unwrap();
        assert_eq!(prompt.points.len(), 2);
        let in_a = prompt.points.iter().filter(|&&(x, y)| x < 5 && y < 5).count();
        let in_b = prompt.points.iter().filter(|&&(x, y)| x >= 15 && y >= 15).count();
        assert_eq!((in_a, in_b), (1, 1));
    }

    #[test]
    fn kmeans_clamps_k_and_is_deterministic() {
        let mut mask = Array2::from_elem((8, 8), false);
        mask[[3, 5]] = true;
        let p = sample_prompt_points(mask.view(), 5, 1).unwrap();
        assert_eq!(p.points, vec![(5, 3)]);

        let mut multi = Array2::from_elem((16, 16), false);
        for y in 2..9 {
            for x in 4..13 {
                multi[[y, x]] = true;
            }
        }
        let a = sample_prompt_points(multi.view(), 5, 42).unwrap();
        let b = sample_prompt_points(multi.view(), 5, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.points.len() <= 5);
        for &(x, y) in &a.points {
            assert!(multi[[y, x]], "point ({x},{y}) outside mask");
        }
        assert!(matches!(
            sample_prompt_points(Array2::from_elem((4, 4), false).view(), 3, 0),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn merge_is_union_and_respects_absence() {
        let dims = (3, 6, 6);
        let mut robot_masks = Array3::from_elem(dims, false);
        let mut object_masks = Array3::from_elem(dims, false);
        robot_masks[[0, 1, 1]] = true;
        object_masks[[0, 4, 4]] = true;
        let robot = EntityMaskVideo {
            entity: Entity::Robot,
            view_role: ViewRole::Wrist,
            masks: robot_masks.clone(),
            entity_absent: false,
            anchor_index: 0,
            label: "robot".into(),
            prompt_points: vec![],
        };
        let object = EntityMaskVideo {
            entity: Entity::Object,
            view_role: ViewRole::Wrist,
            masks: object_masks,
            entity_absent: false,
            anchor_index: 0,
            label: "cup".into(),
            prompt_points: vec![],
        };
        let merged = merge_entities(&robot, &object).unwrap();
        assert_eq!(merged.iter().filter(|&&b| b).count(), 2);

        let absent = EntityMaskVideo {
            entity_absent: true,
            masks: Array3::from_elem(dims, false),
            ..object.clone()
        };
        assert_eq!(merge_entities(&robot, &absent).unwrap(), robot_masks);

        let same = merge_entities(&robot, &EntityMaskVideo { entity: Entity::Object, ..robot.clone() }).unwrap();
        assert_eq!(same, robot_masks);
    }

    #[test]
    fn conditioning_video_pixel_rule() {
        let view = frame_view(2, 6, 6);
        let all_true = Array3::from_elem((2, 6, 6), true);
        let same = build_conditioning_video(&view, &all_true).unwrap();
        assert_eq!(same.frames, view.frames);

        let all_false = Array3::from_elem((2, 6, 6), false);
        let white = build_conditioning_video(&view, &all_false).unwrap();
        assert!(white.frames.iter().all(|&v| v == 255));

        // Checkerboard: verify per pixel against direct composition.
        let keep = Array3::from_shape_fn((2, 6, 6), |(t, y, x)| (t + y + x) % 2 == 0);
        let out = build_conditioning_video(&view, &keep).unwrap();
        for t in 0..2 {
            for y in 0..6 {
                for x in 0..6 {
                    for c in 0..3 {
                        let want = if keep[[t, y, x]] { view.frames[[t, y, x, c]] } else { 255 };
                        assert_eq!(out.frames[[t, y, x, c]], want);
                    }
                }
            }
        }
    }

    #[test]
    fn mask_video_and_conditioning_video_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let video = EntityMaskVideo {
            entity: Entity::Robot,
            view_role: ViewRole::ThirdPerson(1),
            masks: Array3::from_shape_fn((3, 10, 7), |(t, y, x)| (t + y * x) % 3 == 0),
            entity_absent: false,
            anchor_index: 1,
            label: "robot".into(),
            prompt_points: vec![(2, 3), (4, 5)],
        };
        let manifest = video.save(&dir.path().join("masks")).unwrap();
        assert_eq!(EntityMaskVideo::load(&manifest).unwrap(), video);

        let view = frame_view(3, 10, 7);
        let keep = Array3::from_shape_fn((3, 10, 7), |(t, y, x)| (t * y + x) % 2 == 0);
        let cond = build_conditioning_video(
            &ViewStream { role: ViewRole::ThirdPerson(1), ..view },
            &keep,
        )
        .unwrap();
        let manifest = cond.save(&dir.path().join("cond")).unwrap();
        assert_eq!(ConditioningVideo::load(&manifest).unwrap(), cond);
    }

    fn full_pipeline_fixtures() -> StubFixtures {
        let mut labels = BTreeMap::new();
        labels.insert("seg_ep".to_string(), "carrot".to_string());
        StubFixtures {
            labels,
            masks: vec![
                MaskFixture { query: "robot".into(), frame_index: None, rect: Rect { x: 10, y: 10, w: 60, h: 80 } },
                MaskFixture { query: "carrot".into(), frame_index: None, rect: Rect { x: 200, y: 100, w: 40, h: 30 } },
            ],
            track_offset: (1, 0),
            ..Default::default()
        }
    }

    fn segmentation_episode(id: &str, roles: &[ViewRole], gripper: Vec<f64>) -> Episode {
        let t = gripper.len();
        let views = roles
            .iter()
            .map(|&role| ViewStream {
                role,
                frames: Array4::from_shape_fn((t, 32, 32, 3), |(ti, y, x, c)| {
                    (ti * 5 + y + x * 2 + c * 3) as u8
                }),
            })
            .collect();
        Episode {
            id: id.into(),
            views,
            actions: crate::episode::ActionTrace {
                delta_pose: ndarray::Array2::zeros((t, 6)),
                gripper,
                gripper_kind: crate::episode::GripperKind::Boolean,
            },
            instruction: "put the carrot on the plate".into(),
            fps: 5.0,
            source: "synthetic".into(),
        }
    }

    #[test]
    fn segment_episode_composes_stub_steps_deterministically() {
        let clients = ClientSet::stubs(full_pipeline_fixtures());
        let mut gripper = vec![0.0; 30];
        for g in gripper.iter_mut().take(18).skip(12) {
            *g = 1.0;
        }
        let episode = segmentation_episode("seg_ep", &[ViewRole::Wrist, ViewRole::ThirdPerson(0)], gripper);
        let config = SegmentationConfig::default();
        let a = segment_episode(&episode, &clients, &config).unwrap();
        let b = segment_episode(&episode, &clients, &config).unwrap();
        assert_eq!(a.label, "carrot");
        assert_eq!(a.label_source, LabelSource::Wrist);
        assert!(!a.full_clip_fallback);
        assert_eq!(a.windows.len(), 1);
        assert_eq!(a.per_view.len(), 2);
        for (va, vb) in a.per_view.iter().zip(&b.per_view) {
            assert_eq!(va.robot, vb.robot);
            assert_eq!(va.object, vb.object);
            assert!(!va.robot.entity_absent);
            assert!(!va.object.entity_absent);
            assert!(va.robot.masks.iter().any(|&m| m));
        }
    }

    #[test]
    fn no_wrist_view_takes_label_from_first_third_person() {
        let clients = ClientSet::stubs(full_pipeline_fixtures());
        let mut gripper = vec![0.0; 30];
        gripper[15] = 1.0;
        let mut labels = BTreeMap::new();
        labels.insert("seg_ep_tp".to_string(), "cup".to_string());
        let mut fixtures = full_pipeline_fixtures();
        fixtures.labels = labels;
        fixtures.masks.push(MaskFixture {
            query: "cup".into(),
            frame_index: None,
            rect: Rect { x: 100, y: 50, w: 30, h: 30 },
        });
        let clients2 = ClientSet::stubs(fixtures);
        let episode = segmentation_episode("seg_ep_tp", &[ViewRole::ThirdPerson(0), ViewRole::ThirdPerson(1)], gripper.clone());
        let result = segment_episode(&episode, &clients2, &SegmentationConfig::default()).unwrap();
        assert_eq!(result.label_source, LabelSource::ThirdPerson);
        assert_eq!(result.label, "cup");
        drop(clients);
    }

    #[test]
    fn all_open_gripper_falls_back_to_full_clip() {
        let clients = ClientSet::stubs(full_pipeline_fixtures());
        let episode = segmentation_episode("seg_ep", &[ViewRole::Wrist], vec![0.0; 26]);
        let result = segment_episode(&episode, &clients, &SegmentationConfig::default()).unwrap();
        assert!(result.full_clip_fallback);
        assert!(result.windows.is_empty());
    }

    #[test]
    fn missing_object_fixture_marks_object_absent() {
        let mut fixtures = full_pipeline_fixtures();
        fixtures.masks.retain(|m| m.query == "robot");
        let clients = ClientSet::stubs(fixtures);
        let mut gripper = vec![0.0; 26];
        gripper[12] = 1.0;
        let episode = segmentation_episode("seg_ep", &[ViewRole::Wrist], gripper);
        let result = segment_episode(&episode, &clients, &SegmentationConfig::default()).unwrap();
        assert!(result.per_view[0].object.entity_absent);
        assert!(!result.per_view[0].robot.entity_absent);
    }

    #[test]
    fn missing_robot_fixture_fails_episode() {
        let mut fixtures = full_pipeline_fixtures();
        fixtures.masks.retain(|m| m.query != "robot");
        let clients = ClientSet::stubs(fixtures);
        let mut gripper = vec![0.0; 26];
        gripper[12] = 1.0;
        let episode = segmentation_episode("seg_ep", &[ViewRole::Wrist], gripper);
        assert!(matches!(
            segment_episode(&episode, &clients, &SegmentationConfig::default()),
            Err(Error::AnchorNotFound { .. })
        ));
    }
}
