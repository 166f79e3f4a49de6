//! Deterministic stub clients driven by a plain JSON fixture table.
//!
//! Every pipeline test runs against these stubs, with no model weights. Each
//! stub is a pure function of (inputs, fixture): repeated calls return
//! identical outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use super::{
    BackendInfo, CaptionTemplate, Captioner, Client, ClipSimilarityScorer, FeatureMatcher,
    IqaScorer, OpenVocabSegmenter, PanopticRegion, PanopticResult, PanopticSegmenter,
    PointPrompt, QueryMask, VideoReasoner, VideoTracker,
};
use crate::episode::{read_json, write_json, ViewStream};
use crate::error::{Error, Result};
use crate::util::fnv1a64;

/// Axis-aligned rectangle in pixel coordinates: x, y, width, height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    /// Rasterize onto `mask`, clipped at the borders.
    pub fn fill(&self, mask: &mut Array2<bool>) {
        let (mh, mw) = mask.dim();
        for y in self.y..(self.y + self.h).min(mh) {
            for x in self.x..(self.x + self.w).min(mw) {
                mask[[y, x]] = true;
            }
        }
    }
}

/// One open-vocabulary mask fixture; `frame_index: None` applies to all frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskFixture {
    pub query: String,
    #[serde(default)]
    pub frame_index: Option<usize>,
    pub rect: Rect,
}

/// One panoptic region fixture, rasterized as a rectangle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanopticFixture {
    pub class_label: String,
    pub rect: Rect,
    pub score: f64,
}

/// Fixture table for all stub clients; lives in a JSON file in the test tree.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StubFixtures {
    /// Episode id -> interacted-object label returned by the reasoner.
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    /// Open-vocabulary mask fixtures, keyed by (query, optional frame index).
    #[serde(default)]
    pub masks: Vec<MaskFixture>,
    /// Per-frame mask translation applied by the tracker stub, in pixels.
    #[serde(default)]
    pub track_offset: (i64, i64),
    /// Panoptic regions emitted for every frame.
    #[serde(default)]
    pub panoptic: Vec<PanopticFixture>,
    /// Caption template name -> caption text.
    #[serde(default)]
    pub captions: BTreeMap<String, String>,
    /// Optional fixed IQA scores keyed by class label; otherwise hash-based.
    #[serde(default)]
    pub iqa_overrides: BTreeMap<String, f64>,
}

impl StubFixtures {
    pub fn load(path: &Path) -> Result<StubFixtures> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }
}

fn info(id: &str) -> BackendInfo {
    BackendInfo::new(id, "stub-1")
}

pub struct StubReasoner {
    fixtures: Arc<StubFixtures>,
}

impl StubReasoner {
    pub fn new(fixtures: Arc<StubFixtures>) -> Self {
        StubReasoner { fixtures }
    }
}

impl Client for StubReasoner {
    fn backend(&self) -> BackendInfo {
        info("stub-video-reasoner")
    }
}

impl VideoReasoner for StubReasoner {
    fn reason_object_name(
        &self,
        episode_id: &str,
        clip: &ViewStream,
        _question_template: &str,
    ) -> Result<String> {
        if clip.is_empty() {
            return Err(Error::Parameter("empty clip".into()));
        }
        self.fixtures
            .labels
            .get(episode_id)
            .cloned()
            .ok_or_else(|| {
                Error::client(
                    "stub-video-reasoner",
                    format!("no label fixture for episode {episode_id}"),
                )
            })
    }
}

pub struct StubSegmenter {
    fixtures: Arc<StubFixtures>,
}

impl StubSegmenter {
    pub fn new(fixtures: Arc<StubFixtures>) -> Self {
        StubSegmenter { fixtures }
    }
}

impl Client for StubSegmenter {
    fn backend(&self) -> BackendInfo {
        info("stub-open-vocab-segmenter")
    }
}

impl OpenVocabSegmenter for StubSegmenter {
    fn open_vocab_mask(
        &self,
        frame: ArrayView3<u8>,
        query: &str,
        frame_index: usize,
    ) -> Result<QueryMask> {
        if query.is_empty() {
            return Err(Error::Parameter("empty query".into()));
        }
        let (h, w, _) = frame.dim();
        let mut mask = Array2::from_elem((h, w), false);
        let mut hit = false;
        for fx in &self.fixtures.masks {
            if fx.query == query && fx.frame_index.map_or(true, |i| i == frame_index) {
                fx.rect.fill(&mut mask);
                hit = true;
            }
        }
        Ok(QueryMask {
            mask,
            warning: (!hit).then(|| format!("no mask fixture for query {query:?}")),
        })
    }
}

pub struct StubTracker {
    fixtures: Arc<StubFixtures>,
}

impl StubTracker {
    pub fn new(fixtures: Arc<StubFixtures>) -> Self {
        StubTracker { fixtures }
    }
}

impl Client for StubTracker {
    fn backend(&self) -> BackendInfo {
        info("stub-video-tracker")
    }
}

impl VideoTracker for StubTracker {
    fn track_video(
        &self,
        frames: &ViewStream,
        prompts: &PointPrompt,
        anchor_index: usize,
        anchor_mask: &Array2<bool>,
    ) -> Result<Vec<Array2<bool>>> {
        let (h, w) = (frames.height(), frames.width());
        prompts.validate(h, w)?;
        if anchor_index >= frames.len() {
            return Err(Error::Parameter(format!(
                "anchor index {anchor_index} outside {} frames",
                frames.len()
            )));
        }
        if anchor_mask.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "anchor mask {:?} vs frame {h}x{w}",
                anchor_mask.dim()
            )));
        }
        let (dx, dy) = self.fixtures.track_offset;
        let masks = (0..frames.len())
            .map(|t| {
                let steps = t as i64 - anchor_index as i64;
                translate_mask(anchor_mask, dx * steps, dy * steps)
            })
            .collect();
        Ok(masks)
    }
}

/// Translate a mask by (dx, dy) pixels, clipping at the borders.
pub fn translate_mask(mask: &Array2<bool>, dx: i64, dy: i64) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    out[[ny as usize, nx as usize]] = true;
                }
            }
        }
    }
    out
}

pub struct StubPanoptic {
    fixtures: Arc<StubFixtures>,
}

impl StubPanoptic {
    pub fn new(fixtures: Arc<StubFixtures>) -> Self {
        StubPanoptic { fixtures }
    }
}

impl Client for StubPanoptic {
    fn backend(&self) -> BackendInfo {
        info("stub-panoptic-segmenter")
    }
}

impl PanopticSegmenter for StubPanoptic {
    fn panoptic_segment(&self, frame: ArrayView3<u8>) -> Result<PanopticResult> {
        let (h, w, _) = frame.dim();
        let regions = self
            .fixtures
            .panoptic
            .iter()
            .map(|fx| {
                let mut mask = Array2::from_elem((h, w), false);
                fx.rect.fill(&mut mask);
                PanopticRegion {
                    class_label: fx.class_label.clone(),
                    mask,
                    score: fx.score,
                }
            })
            .collect();
        Ok(PanopticResult { regions })
    }
}

pub struct StubCaptioner {
    fixtures: Arc<StubFixtures>,
    received: Mutex<Vec<String>>,
}

impl StubCaptioner {
    pub fn new(fixtures: Arc<StubFixtures>) -> Self {
        StubCaptioner {
            fixtures,
            received: Mutex::new(Vec::new()),
        }
    }

    /// Prompts the backend received so far, in call order.
    pub fn received_prompts(&self) -> Vec<String> {
        self.received.lock().unwrap().clone()
    }
}

impl Client for StubCaptioner {
    fn backend(&self) -> BackendInfo {
        info("stub-captioner")
    }
}

impl Captioner for StubCaptioner {
    fn caption_episode(
        &self,
        stitched_video: &[Array3<u8>],
        template: CaptionTemplate,
    ) -> Result<String> {
        if stitched_video.is_empty() {
            return Err(Error::Parameter("empty stitched video".into()));
        }
        self.received
            .lock()
            .unwrap()
            .push(template.prompt().to_string());
        self.fixtures
            .captions
            .get(template.name())
            .cloned()
            .ok_or_else(|| {
                Error::client(
                    "stub-captioner",
                    format!("no caption fixture for template {}", template.name()),
                )
            })
    }
}

/// Side length of the square blocks hashed by the matcher stub.
pub const MATCH_BLOCK: usize = 8;

/// Feature matcher stub: counts aligned blocks whose exact pixel content is
/// identical in both frames.
pub struct StubMatcher;

impl StubMatcher {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        StubMatcher
    }

    /// Number of full blocks the stub can hash in an (h, w) frame.
    pub fn max_count(h: usize, w: usize) -> usize {
        (h / MATCH_BLOCK) * (w / MATCH_BLOCK)
    }
}

impl Client for StubMatcher {
    fn backend(&self) -> BackendInfo {
        info("stub-feature-matcher")
    }
}

impl FeatureMatcher for StubMatcher {
    fn match_features(
        &self,
        frame_a: ArrayView3<u8>,
        frame_b: ArrayView3<u8>,
        _confidence_threshold: f64,
    ) -> Result<usize> {
        if frame_a.dim() != frame_b.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                frame_a.dim(),
                frame_b.dim()
            )));
        }
        let (h, w, _) = frame_a.dim();
        let mut count = 0;
        for by in 0..h / MATCH_BLOCK {
            for bx in 0..w / MATCH_BLOCK {
                let hash_of = |f: &ArrayView3<u8>| {
                    let mut bytes = Vec::with_capacity(MATCH_BLOCK * MATCH_BLOCK * 3);
                    for y in 0..MATCH_BLOCK {
                        for x in 0..MATCH_BLOCK {
                            for c in 0..3 {
                                bytes.push(f[[by * MATCH_BLOCK + y, bx * MATCH_BLOCK + x, c]]);
                            }
                        }
                    }
                    fnv1a64(&bytes)
                };
                if hash_of(&frame_a) == hash_of(&frame_b) {
                    count += 1;
                }
            }
        }
        Ok(count)
    }
}

fn hash_unit_interval(bytes: &[u8], salt: &str) -> f64 {
    let mut data = salt.as_bytes().to_vec();
    data.extend_from_slice(bytes);
    fnv1a64(&data) as f64 / (u64::MAX as f64 + 1.0)
}

/// IQA stub: a deterministic pseudo-score in [0, 1) derived from the image
/// content hash, optionally overridden per class label via fixtures.
pub struct StubIqa {
    #[allow(dead_code)]
    fixtures: Arc<StubFixtures>,
}

impl StubIqa {
    pub fn new(fixtures: Arc<StubFixtures>) -> Self {
        StubIqa { fixtures }
    }
}

impl Client for StubIqa {
    fn backend(&self) -> BackendInfo {
        info("stub-iqa")
    }
}

impl IqaScorer for StubIqa {
    fn iqa_score(&self, image: ArrayView3<u8>) -> Result<f64> {
        let owned: Vec<u8> = image.iter().copied().collect();
        Ok(hash_unit_interval(&owned, "iqa"))
    }
}

/// CLIP-similarity stub: deterministic pseudo-score from (image, text).
pub struct StubClipScorer {
    #[allow(dead_code)]
    fixtures: Arc<StubFixtures>,
}

impl StubClipScorer {
    pub fn new(fixtures: Arc<StubFixtures>) -> Self {
        StubClipScorer { fixtures }
    }
}

impl Client for StubClipScorer {
    fn backend(&self) -> BackendInfo {
        info("stub-clip-similarity")
    }
}

impl ClipSimilarityScorer for StubClipScorer {
    fn clip_similarity(&self, image: ArrayView3<u8>, text: &str) -> Result<f64> {
        let mut bytes: Vec<u8> = image.iter().copied().collect();
        bytes.extend_from_slice(text.as_bytes());
        Ok(hash_unit_interval(&bytes, "clip"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixtures() -> Arc<StubFixtures> {
        let mut labels = BTreeMap::new();
        labels.insert("ep1".to_string(), "carrot".to_string());
        Arc::new(StubFixtures {
            labels,
            masks: vec![MaskFixture {
                query: "robot".into(),
                frame_index: Some(0),
                rect: Rect { x: 2, y: 3, w: 40, h: 40 },
            }],
            track_offset: (1, 0),
            panoptic: vec![
                PanopticFixture {
                    class_label: "cup".into(),
                    rect: Rect { x: 0, y: 0, w: 4, h: 4 },
                    score: 0.9,
                },
                PanopticFixture {
                    class_label: "bowl".into(),
                    rect: Rect { x: 10, y: 10, w: 6, h: 6 },
                    score: 0.8,
                },
            ],
            captions: BTreeMap::new(),
            iqa_overrides: BTreeMap::new(),
        })
    }

    fn clip_of(t: usize) -> ViewStream {
        ViewStream {
            role: crate::episode::ViewRole::Wrist,
            frames: Array4::zeros((t, 8, 8, 3)),
        }
    }

    #[test]
    fn reasoner_fixture_lookup_and_error() {
        let r = StubReasoner::new(fixtures());
        assert_eq!(r.reason_object_name("ep1", &clip_of(3), "q").unwrap(), "carrot");
        let err = r.reason_object_name("ep_unknown", &clip_of(3), "q").unwrap_err();
        assert!(err.to_string().contains("ep_unknown"));
    }

    #[test]
    fn segmenter_rasterizes_fixture_and_warns_on_miss() {
        let s = StubSegmenter::new(fixtures());
        let frame = Array3::<u8>::zeros((320, 448, 3));
        let got = s.open_vocab_mask(frame.view(), "robot", 0).unwrap();
        assert_eq!(got.mask.iter().filter(|&&b| b).count(), 1600);
        assert!(got.warning.is_none());

        let miss = s.open_vocab_mask(frame.view(), "zebra", 0).unwrap();
        assert!(miss.warning.is_some());
        assert!(miss.mask.iter().all(|&b| !b));
    }

    #[test]
    fn tracker_translates_anchor_mask_per_frame() {
        let t = StubTracker::new(fixtures());
        let frames = clip_of(4);
        let mut anchor = Array2::from_elem((8, 8), false);
        anchor[[4, 4]] = true;
        let prompts = PointPrompt { points: vec![(4, 4)] };
        let masks = t.track_video(&frames, &prompts, 0, &anchor).unwrap();
        // Direct rasterization oracle: (+1, 0) per frame from the anchor.
        for (i, m) in masks.iter().enumerate() {
            let mut want = Array2::from_elem((8, 8), false);
            if 4 + i < 8 {
                want[[4, 4 + i]] = true;
            }
            assert_eq!(m, &want, "frame {i}");
        }
    }

    #[test]
    fn tracker_zero_offset_is_constant() {
        let mut fx = (*fixtures()).clone();
        fx.track_offset = (0, 0);
        let t = StubTracker::new(Arc::new(fx));
        let frames = clip_of(5);
        let mut anchor = Array2::from_elem((8, 8), false);
        anchor[[2, 3]] = true;
        let masks = t
            .track_video(&frames, &PointPrompt { points: vec![(3, 2)] }, 2, &anchor)
            .unwrap();
        assert!(masks.iter().all(|m| m == &anchor));
    }

    #[test]
    fn tracker_rejects_out_of_bounds_prompts() {
        let t = StubTracker::new(fixtures());
        let frames = clip_of(3);
        let anchor = Array2::from_elem((8, 8), false);
        let bad = PointPrompt { points: vec![(9, 0)] };
        assert!(t.track_video(&frames, &bad, 0, &anchor).is_err());
    }

    #[test]
    fn panoptic_emits_fixture_regions() {
        let p = StubPanoptic::new(fixtures());
        let frame = Array3::<u8>::zeros((32, 32, 3));
        let res = p.panoptic_segment(frame.view()).unwrap();
        assert_eq!(res.regions.len(), 2);
        assert_eq!(res.regions[0].class_label, "cup");

        let empty = StubPanoptic::new(Arc::new(StubFixtures::default()));
        assert!(empty.panoptic_segment(frame.view()).unwrap().regions.is_empty());
    }

    #[test]
    fn matcher_self_match_is_maximal() {
        let m = StubMatcher::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frame = Array3::from_shape_fn((64, 64, 3), |_| rng.gen());
        let count = m.match_features(frame.view(), frame.view(), 0.5).unwrap();
        assert_eq!(count, StubMatcher::max_count(64, 64));
    }

    #[test]
    fn matcher_independent_noise_rarely_matches() {
        let m = StubMatcher::new();
        let mut rng_a = ChaCha8Rng::seed_from_u64(1);
        let mut rng_b = ChaCha8Rng::seed_from_u64(2);
        let a = Array3::from_shape_fn((64, 64, 3), |_| rng_a.gen());
        let b = Array3::from_shape_fn((64, 64, 3), |_| rng_b.gen());
        let count = m.match_features(a.view(), b.view(), 0.5).unwrap();
        let max = StubMatcher::max_count(64, 64);
        assert!(count < max / 100 + 1, "count={count} max={max}");
    }

    #[test]
    fn matcher_is_symmetric() {
        let m = StubMatcher::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Array3<u8> = Array3::from_shape_fn((32, 40, 3), |_| rng.gen());
        let mut b = a.clone();
        for _ in 0..40 {
            let y = rng.gen_range(0..32);
            let x = rng.gen_range(0..40);
            b[[y, x, 0]] = b[[y, x, 0]].wrapping_add(1);
        }
        assert_eq!(
            m.match_features(a.view(), b.view(), 0.5).unwrap(),
            m.match_features(b.view(), a.view(), 0.5).unwrap()
        );
    }

    #[test]
    fn scorers_are_deterministic_and_text_sensitive() {
        let iqa = StubIqa::new(fixtures());
        let clip_scorer = StubClipScorer::new(fixtures());
        let img = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| (y * 31 + x * 7 + c) as u8);
        assert_eq!(
            iqa.iqa_score(img.view()).unwrap(),
            iqa.iqa_score(img.view()).unwrap()
        );
        let a = clip_scorer.clip_similarity(img.view(), "cup").unwrap();
        let b = clip_scorer.clip_similarity(img.view(), "bowl").unwrap();
        assert_ne!(a, b);
        assert!((0.0..1.0).contains(&a));
    }

    #[test]
    fn captioner_echoes_fixture_and_records_prompt() {
        let mut fx = (*fixtures()).clone();
        fx.captions.insert("scene".into(), "A small table.".into());
        let c = StubCaptioner::new(Arc::new(fx));
        let frames = vec![Array3::<u8>::zeros((8, 8, 3))];
        let got = c.caption_episode(&frames, CaptionTemplate::Scene).unwrap();
        assert_eq!(got, "A small table.");
        assert_eq!(c.received_prompts(), vec![CaptionTemplate::Scene.prompt().to_string()]);
        assert!(c.caption_episode(&frames, CaptionTemplate::Action).is_err());
    }
}
