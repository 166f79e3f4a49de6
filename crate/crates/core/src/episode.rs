//! Episode domain types, validation, persistence, and length curation.
//!
//! An episode is the unit of augmentation: synchronized multi-view RGB
//! streams, a per-frame action trace, and an instruction string. Frames are
//! persisted as lossless PNGs plus one JSON manifest per episode; lossy
//! codecs would corrupt mask and white-255 semantics.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

/// Default curation bounds on episode length, in frames.
pub const MIN_FRAMES_DEFAULT: usize = 25;
pub const MAX_FRAMES_DEFAULT: usize = 550;

/// Camera role. Canonical ordering is wrist first, then third-person by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViewRole {
    Wrist,
    ThirdPerson(u32),
}

impl fmt::Display for ViewRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewRole::Wrist => write!(f, "wrist"),
            ViewRole::ThirdPerson(k) => write!(f, "third_person_{k}"),
        }
    }
}

impl FromStr for ViewRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "wrist" {
            return Ok(ViewRole::Wrist);
        }
        if let Some(idx) = s.strip_prefix("third_person_") {
            if let Ok(k) = idx.parse() {
                return Ok(ViewRole::ThirdPerson(k));
            }
        }
        Err(Error::Validation(format!("unknown view role {s:?}")))
    }
}

impl Serialize for ViewRole {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ViewRole {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One camera stream: (T, H, W, 3) 8-bit frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewStream {
    pub role: ViewRole,
    pub frames: Array4<u8>,
}

impl ViewStream {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, u8> {
        self.frames.index_axis(ndarray::Axis(0), t)
    }

    /// Copy the inclusive frame range [start, end] into a new stream.
    pub fn slice_frames(&self, start: usize, end: usize) -> ViewStream {
        ViewStream {
            role: self.role,
            frames: self
                .frames
                .slice(ndarray::s![start..=end, .., .., ..])
                .to_owned(),
        }
    }
}

/// Whether the gripper channel holds 0/1 states or a continuous aperture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperKind {
    Boolean,
    Continuous,
}

/// Per-frame end-effector deltas plus the 1-D gripper channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTrace {
    /// (T, 6) deltas: dx, dy, dz, droll, dpitch, dyaw.
    pub delta_pose: Array2<f64>,
    pub gripper: Vec<f64>,
    pub gripper_kind: GripperKind,
}

impl ActionTrace {
    pub fn len(&self) -> usize {
        self.gripper.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gripper.is_empty()
    }

    /// Copy the inclusive range [start, end].
    pub fn slice(&self, start: usize, end: usize) -> ActionTrace {
        ActionTrace {
            delta_pose: self
                .delta_pose
                .slice(ndarray::s![start..=end, ..])
                .to_owned(),
            gripper: self.gripper[start..=end].to_vec(),
            gripper_kind: self.gripper_kind,
        }
    }
}

/// A validated multi-view manipulation episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    /// Canonical order: wrist first, then third-person by index.
    pub views: Vec<ViewStream>,
    pub actions: ActionTrace,
    pub instruction: String,
    pub fps: f64,
    pub source: String,
}

impl Episode {
    /// Frame count shared by every view and the action trace.
    pub fn frame_count(&self) -> usize {
        self.views[0].len()
    }

    pub fn view(&self, role: ViewRole) -> Option<&ViewStream> {
        self.views.iter().find(|v| v.role == role)
    }

    pub fn has_wrist(&self) -> bool {
        self.view(ViewRole::Wrist).is_some()
    }

    /// Enforce all type invariants; called on construction paths.
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Validation("episode has no views".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Validation(format!("fps must be positive, got {}", self.fps)));
        }
        let t = self.views[0].len();
        if t == 0 {
            return Err(Error::Validation("episode has zero frames".into()));
        }
        for v in &self.views {
            if v.len() != t {
                return Err(Error::Validation(format!(
                    "view {} has {} frames but view {} has {}",
                    v.role,
                    v.len(),
                    self.views[0].role,
                    t
                )));
            }
        }
        let mut roles: Vec<ViewRole> = self.views.iter().map(|v| v.role).collect();
        roles.sort();
        roles.dedup();
        if roles.len() != self.views.len() {
            return Err(Error::Validation("duplicate view roles".into()));
        }
        if self.actions.len() != t {
            return Err(Error::Validation(format!(
                "action trace has {} rows but views have {t} frames",
                self.actions.len()
            )));
        }
        if self.actions.delta_pose.shape() != [t, 6] {
            return Err(Error::Validation(format!(
                "delta_pose shape {:?}, expected [{t}, 6]",
                self.actions.delta_pose.shape()
            )));
        }
        if self.actions.gripper_kind == GripperKind::Continuous
            && self.actions.gripper.iter().any(|&g| g < 0.0)
        {
            return Err(Error::Validation(
                "continuous gripper aperture must be non-negative".into(),
            ));
        }
        if self
            .actions
            .delta_pose
            .iter()
            .chain(self.actions.gripper.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Validation("action values must be finite".into()));
        }
        Ok(())
    }

    /// Sort views into canonical order (wrist first, then third-person by index).
    pub fn canonicalize_views(&mut self) {
        self.views.sort_by_key(|v| v.role);
    }

    /// Copy the frame range [range.start, range.end) into a new episode.
    pub fn crop(&self, range: Range<usize>) -> Result<Episode> {
        let t = self.frame_count();
        if range.start >= range.end || range.end > t {
            return Err(Error::Parameter(format!(
                "crop range {range:?} invalid for {t} frames"
            )));
        }
        let mut ep = Episode {
            id: self.id.clone(),
            views: self
                .views
                .iter()
                .map(|v| v.slice_frames(range.start, range.end - 1))
                .collect(),
            actions: self.actions.slice(range.start, range.end - 1),
            instruction: self.instruction.clone(),
            fps: self.fps,
            source: self.source.clone(),
        };
        ep.canonicalize_views();
        Ok(ep)
    }
}

/// Dataset-level length curation result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum CurationDecision {
    Keep,
    Discard,
    Crop { crop_range: (usize, usize) },
}

/// Decide whether an episode is kept, discarded, or temporally cropped.
///
/// Episodes shorter than `min_frames` are discarded; episodes longer than
/// `max_frames` are cropped to the prefix `[0, max_frames)` so the initial
/// scene setup stays intact.
pub fn curate_length(episode: &Episode, min_frames: usize, max_frames: usize) -> CurationDecision {
    let t = episode.frame_count();
    if t < min_frames {
        CurationDecision::Discard
    } else if t > max_frames {
        CurationDecision::Crop {
            crop_range: (0, max_frames),
        }
    } else {
        CurationDecision::Keep
    }
}

/// Artifact types that persist to a directory and reload from a manifest path.
///
/// `load(save(x)) == x` bit-exactly for pixels and to stored precision for
/// action values.
pub trait Artifact: Sized {
    /// Write the artifact under `dir` and return the manifest path.
    fn save(&self, dir: &Path) -> Result<PathBuf>;

    /// Reload from a manifest path produced by [`Artifact::save`].
    fn load(manifest_path: &Path) -> Result<Self>;
}

pub const ACTION_COLUMNS: [&str; 7] = ["dx", "dy", "dz", "droll", "dpitch", "dyaw", "gripper"];
pub const EPISODE_MANIFEST: &str = "episode.json";

#[derive(Serialize, Deserialize)]
struct EpisodeManifest {
    id: String,
    fps: f64,
    instruction: String,
    source: String,
    views: Vec<ViewEntry>,
    actions: ActionTable,
}

#[derive(Serialize, Deserialize)]
struct ViewEntry {
    role: ViewRole,
    frame_dir: String,
    count: usize,
    height: usize,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct ActionTable {
    columns: Vec<String>,
    gripper_kind: GripperKind,
    rows: Vec<Vec<f64>>,
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::manifest(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::manifest(path, e.to_string()))
}

pub(crate) fn frame_file(i: usize) -> String {
    format!("frame_{i:05}.png")
}

impl Artifact for Episode {
    fn save(&self, dir: &Path) -> Result<PathBuf> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut views = Vec::new();
        for v in &self.views {
            let sub = format!("view_{}", v.role);
            let view_dir = dir.join(&sub);
            fs::create_dir_all(&view_dir).map_err(|e| Error::io(&view_dir, e))?;
            for t in 0..v.len() {
                util::save_frame_png(v.frame(t), &view_dir.join(frame_file(t)))?;
            }
            views.push(ViewEntry {
                role: v.role,
                frame_dir: sub,
                count: v.len(),
                height: v.height(),
                width: v.width(),
            });
        }
        let t = self.frame_count();
        let rows = (0..t)
            .map(|i| {
                let mut row: Vec<f64> = self.actions.delta_pose.row(i).to_vec();
                row.push(self.actions.gripper[i]);
                row
            })
            .collect();
        let manifest = EpisodeManifest {
            id: self.id.clone(),
            fps: self.fps,
            instruction: self.instruction.clone(),
            source: self.source.clone(),
            views,
            actions: ActionTable {
                columns: ACTION_COLUMNS.iter().map(|s| s.to_string()).collect(),
                gripper_kind: self.actions.gripper_kind,
                rows,
            },
        };
        let path = dir.join(EPISODE_MANIFEST);
        write_json(&manifest, &path)?;
        Ok(path)
    }

    fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: EpisodeManifest = read_json(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        if manifest.actions.columns != ACTION_COLUMNS {
            return Err(Error::manifest(
                manifest_path,
                format!("unexpected action columns {:?}", manifest.actions.columns),
            ));
        }
        let mut views = Vec::new();
        for entry in &manifest.views {
            let view_dir = base.join(&entry.frame_dir);
            let mut frames = Array4::zeros((entry.count, entry.height, entry.width, 3));
            for t in 0..entry.count {
                let frame = util::load_frame_png(&view_dir.join(frame_file(t)))?;
                if frame.dim() != (entry.height, entry.width, 3) {
                    return Err(Error::Validation(format!(
                        "frame {t} of view {} has shape {:?}, manifest says {}x{}",
                        entry.role,
                        frame.dim(),
                        entry.height,
                        entry.width
                    )));
                }
                frames
                    .index_axis_mut(ndarray::Axis(0), t)
                    .assign(&frame);
            }
            views.push(ViewStream {
                role: entry.role,
                frames,
            });
        }
        let t = manifest.actions.rows.len();
        let mut delta_pose = Array2::zeros((t, 6));
        let mut gripper = Vec::with_capacity(t);
        for (i, row) in manifest.actions.rows.iter().enumerate() {
            if row.len() != 7 {
                return Err(Error::manifest(
                    manifest_path,
                    format!("action row {i} has {} values, expected 7", row.len()),
                ));
            }
            for (j, v) in row[..6].iter().enumerate() {
                delta_pose[[i, j]] = *v;
            }
            gripper.push(row[6]);
        }
        let mut episode = Episode {
            id: manifest.id,
            views,
            actions: ActionTrace {
                delta_pose,
                gripper,
                gripper_kind: manifest.actions.gripper_kind,
            },
            instruction: manifest.instruction,
            fps: manifest.fps,
            source: manifest.source,
        };
        episode.canonicalize_views();
        episode.validate()?;
        Ok(episode)
    }
}

/// Load a validated episode from its manifest path.
pub fn load_episode(manifest_path: &Path) -> Result<Episode> {
    Episode::load(manifest_path)
}
