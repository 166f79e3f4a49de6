//! Contracts for the off-the-shelf models the pipeline orchestrates.
//!
//! Each client is an abstract interface with two shipped implementations: a
//! deterministic [`stub`] driven by fixture files, and a [`remote`] adapter
//! that talks to an external backend process over a line-delimited protocol,
//! so model weights never enter this repository.
//!
//! Stubs are pure functions of (inputs, fixture, seed); repeated calls return
//! identical outputs, which keeps every pipeline test reproducible.

pub mod remote;
pub mod stub;

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::episode::ViewStream;
use crate::error::{Error, Result};

/// Backend identity and version, recorded into artifact manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub id: String,
    pub version: String,
}

impl BackendInfo {
    pub fn new(id: impl Into<String>, version: impl Into<String>) -> Self {
        BackendInfo { id: id.into(), version: version.into() }
    }
}

/// Common surface: every client reports which backend produced its outputs.
pub trait Client {
    fn backend(&self) -> BackendInfo;
}

/// Positive point prompts for the video segmentation model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointPrompt {
    /// (x, y) pixel coordinates; all prompts are positive.
    pub points: Vec<(usize, usize)>,
}

impl PointPrompt {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Parameter("point prompt is empty".into()));
        }
        for &(x, y) in &self.points {
            if x >= width || y >= height {
                return Err(Error::Parameter(format!(
                    "prompt point ({x}, {y}) outside {width}x{height} frame"
                )));
            }
        }
        Ok(())
    }
}

/// One labelled region from panoptic segmentation.
#[derive(Debug, Clone)]
pub struct PanopticRegion {
    pub class_label: String,
    pub mask: Array2<bool>,
    pub score: f64,
}

/// Panoptic segmentation output for a single frame.
#[derive(Debug, Clone, Default)]
pub struct PanopticResult {
    pub regions: Vec<PanopticRegion>,
}

/// Mask returned by the open-vocabulary segmenter, with an optional warning
/// (e.g. the stub found no fixture for the query and returned all-false).
#[derive(Debug, Clone)]
pub struct QueryMask {
    pub mask: Array2<bool>,
    pub warning: Option<String>,
}

/// Caption prompt templates sent verbatim to the captioning backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionTemplate {
    Scene,
    Action,
    ActionChunked,
}

impl CaptionTemplate {
    /// The exact prompt text for this template.
    pub fn prompt(&self) -> &'static str {
        match self {
            CaptionTemplate::Scene => {
                "Describe the scene setup in the video (exclude the robot arm) within 15 words. \
                 The input is a vertically stitched multi-view video. \
                 Only provide information with high confidence."
            }
            CaptionTemplate::Action => {
                "Describe the action of the robot arm briefly in the video within 15 words. \
                 The input is a vertically stitched multi-view video. \
                 Only provide information with high confidence."
            }
            CaptionTemplate::ActionChunked => {
                "Describe the action of the robot arm briefly in the video within 10 words. \
                 Do not predict what will happen. Just focus on what has been done. \
                 The input is a vertically stitched multi-view video. \
                 Only provide information with high confidence."
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CaptionTemplate::Scene => "scene",
            CaptionTemplate::Action => "action",
            CaptionTemplate::ActionChunked => "action_chunked",
        }
    }
}

/// The episode text prompt is the scene caption followed by the action caption.
pub fn compose_prompt(scene: &str, action: &str) -> String {
    format!("{scene} {action}")
}

/// Video-reasoning VLM: names the interacted object from a gripper-closure clip.
pub trait VideoReasoner: Client + Send + Sync {
    fn reason_object_name(
        &self,
        episode_id: &str,
        clip: &ViewStream,
        question_template: &str,
    ) -> Result<String>;
}

/// Open-vocabulary segmenter: one mask per (frame, text query).
pub trait OpenVocabSegmenter: Client + Send + Sync {
    fn open_vocab_mask(
        &self,
        frame: ArrayView3<u8>,
        query: &str,
        frame_index: usize,
    ) -> Result<QueryMask>;
}

/// Video segmentation tracker: propagates an anchor mask through the clip
/// given positive point prompts.
pub trait VideoTracker: Client + Send + Sync {
    fn track_video(
        &self,
        frames: &ViewStream,
        prompts: &PointPrompt,
        anchor_index: usize,
        anchor_mask: &Array2<bool>,
    ) -> Result<Vec<Array2<bool>>>;
}

/// Panoptic segmenter over a fixed class vocabulary.
pub trait PanopticSegmenter: Client + Send + Sync {
    fn panoptic_segment(&self, frame: ArrayView3<u8>) -> Result<PanopticResult>;
}

/// Captioning VLM over vertically stitched multi-view videos.
pub trait Captioner: Client + Send + Sync {
    fn caption_episode(
        &self,
        stitched_video: &[Array3<u8>],
        template: CaptionTemplate,
    ) -> Result<String>;
}

/// Feature-correspondence model: counts matched points between two frames.
pub trait FeatureMatcher: Client + Send + Sync {
    fn match_features(
        &self,
        frame_a: ArrayView3<u8>,
        frame_b: ArrayView3<u8>,
        confidence_threshold: f64,
    ) -> Result<usize>;
}

/// Image quality assessment scorer (higher is better).
pub trait IqaScorer: Client + Send + Sync {
    fn iqa_score(&self, image: ArrayView3<u8>) -> Result<f64>;
}

/// Text-image similarity scorer; the text side is the panoptic class label.
pub trait ClipSimilarityScorer: Client + Send + Sync {
    fn clip_similarity(&self, image: ArrayView3<u8>, text: &str) -> Result<f64>;
}

/// All clients the pipeline needs, behind trait objects.
#[derive(Clone)]
pub struct ClientSet {
    pub reasoner: Arc<dyn VideoReasoner>,
    pub segmenter: Arc<dyn OpenVocabSegmenter>,
    pub tracker: Arc<dyn VideoTracker>,
    pub panoptic: Arc<dyn PanopticSegmenter>,
    pub captioner: Arc<dyn Captioner>,
    pub matcher: Arc<dyn FeatureMatcher>,
    pub iqa: Arc<dyn IqaScorer>,
    pub clip: Arc<dyn ClipSimilarityScorer>,
}

impl ClientSet {
    /// Build a full stub client set from one fixture table.
    pub fn stubs(fixtures: stub::StubFixtures) -> ClientSet {
        let fixtures = Arc::new(fixtures);
        ClientSet {
            reasoner: Arc::new(stub::StubReasoner::new(fixtures.clone())),
            segmenter: Arc::new(stub::StubSegmenter::new(fixtures.clone())),
            tracker: Arc::new(stub::StubTracker::new(fixtures.clone())),
            panoptic: Arc::new(stub::StubPanoptic::new(fixtures.clone())),
            captioner: Arc::new(stub::StubCaptioner::new(fixtures.clone())),
            matcher: Arc::new(stub::StubMatcher::new()),
            iqa: Arc::new(stub::StubIqa::new(fixtures.clone())),
            clip: Arc::new(stub::StubClipScorer::new(fixtures)),
        }
    }

    /// Backend info for every client, for provenance records.
    pub fn backends(&self) -> Vec<BackendInfo> {
        vec![
            self.reasoner.backend(),
            self.segmenter.backend(),
            self.tracker.backend(),
            self.panoptic.backend(),
            self.captioner.backend(),
            self.matcher.backend(),
            self.iqa.backend(),
            self.clip.backend(),
        ]
    }
}
