//! Remote-process client adapter and the matching protocol server.
//!
//! Adapters talk to a backend subprocess over a line-delimited JSON protocol
//! on standard streams. Binary payloads (frames, masks) are exchanged as
//! files under a shared work directory; requests and responses carry only
//! paths and scalar params. Requests are serialized per subprocess.
//!
//! Request:  `{"op", "payload_paths": {name: path}, "params": {...}, "result_dir"}`
//! Response: `{"status": "ok", "result_path"}` or `{"status": "error", "error"}`
//!
//! [`serve_stub_backend`] implements the server side of the same protocol on
//! top of the stub clients, so both halves can be tested end to end without
//! model weights (`robovip --stub-server`).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use ndarray::{Array2, Array3, Array4, ArrayView3};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    BackendInfo, CaptionTemplate, Captioner, Client, ClientSet, ClipSimilarityScorer,
    FeatureMatcher, IqaScorer, OpenVocabSegmenter, PanopticRegion, PanopticResult,
    PanopticSegmenter, PointPrompt, QueryMask, VideoReasoner, VideoTracker,
};
use crate::episode::{frame_file, read_json, write_json, ViewRole, ViewStream};
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Serialize, Deserialize)]
pub struct Request {
    pub op: String,
    pub payload_paths: BTreeMap<String, PathBuf>,
    pub params: Value,
    pub result_dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Response {
    Ok { result_path: PathBuf },
    Error { error: String },
}

#[derive(Serialize, Deserialize)]
struct FramesMeta {
    role: ViewRole,
    count: usize,
    height: usize,
    width: usize,
}

/// Persist a view stream into `dir` as PNG frames plus a small meta file.
pub fn write_frames_dir(stream: &ViewStream, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..stream.len() {
        util::save_frame_png(stream.frame(t), &dir.join(frame_file(t)))?;
    }
    write_json(
        &FramesMeta {
            role: stream.role,
            count: stream.len(),
            height: stream.height(),
            width: stream.width(),
        },
        &dir.join("meta.json"),
    )
}

/// Load a view stream previously written by [`write_frames_dir`].
pub fn read_frames_dir(dir: &Path) -> Result<ViewStream> {
    let meta: FramesMeta = read_json(&dir.join("meta.json"))?;
    let mut frames = Array4::zeros((meta.count, meta.height, meta.width, 3));
    for t in 0..meta.count {
        frames
            .index_axis_mut(ndarray::Axis(0), t)
            .assign(&util::load_frame_png(&dir.join(frame_file(t)))?);
    }
    Ok(ViewStream { role: meta.role, frames })
}

struct ChildIo {
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    child: Child,
}

/// Handle to one backend subprocess; requests are single-flight.
pub struct RemoteProcess {
    io: Mutex<ChildIo>,
    backend: BackendInfo,
    workdir: PathBuf,
    call_counter: AtomicU64,
}

impl RemoteProcess {
    /// Spawn `command args...` and perform the `backend_info` handshake.
    pub fn spawn(command: &str, args: &[String], workdir: &Path) -> Result<Arc<RemoteProcess>> {
        fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let mut child = Command::new(command)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::client("remote", format!("spawn {command}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut process = RemoteProcess {
            io: Mutex::new(ChildIo { stdin, stdout, child }),
            backend: BackendInfo::new("remote", "unknown"),
            workdir: workdir.to_path_buf(),
            call_counter: AtomicU64::new(0),
        };
        let info_path = process.call("backend_info", BTreeMap::new(), json!({}))?;
        process.backend = read_json(&info_path)?;
        Ok(Arc::new(process))
    }

    pub fn backend(&self) -> BackendInfo {
        self.backend.clone()
    }

    /// Allocate a fresh per-call directory for payloads and results.
    pub fn call_dir(&self) -> Result<PathBuf> {
        let n = self.call_counter.fetch_add(1, Ordering::SeqCst);
        let dir = self.workdir.join(format!("call_{n:06}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    /// Send one request and wait for the response.
    pub fn call(
        &self,
        op: &str,
        payload_paths: BTreeMap<String, PathBuf>,
        params: Value,
    ) -> Result<PathBuf> {
        let result_dir = self.call_dir()?;
        let request = Request {
            op: op.to_string(),
            payload_paths,
            params,
            result_dir,
        };
        let line = serde_json::to_string(&request)
            .map_err(|e| Error::client(&self.backend.id, e.to_string()))?;
        let mut io = self.io.lock().unwrap();
        writeln!(io.stdin, "{line}")
            .and_then(|_| io.stdin.flush())
            .map_err(|e| Error::client(&self.backend.id, format!("write request: {e}")))?;
        let mut reply = String::new();
        io.stdout
            .read_line(&mut reply)
            .map_err(|e| Error::client(&self.backend.id, format!("read response: {e}")))?;
        if reply.is_empty() {
            return Err(Error::client(&self.backend.id, "backend closed the stream"));
        }
        match serde_json::from_str(&reply)
            .map_err(|e| Error::client(&self.backend.id, format!("bad response: {e}")))?
        {
            Response::Ok { result_path } => Ok(result_path),
            Response::Error { error } => Err(Error::client(&self.backend.id, error)),
        }
    }
}

impl Drop for RemoteProcess {
    fn drop(&mut self) {
        if let Ok(mut io) = self.io.lock() {
            let _ = io.child.kill();
            let _ = io.child.wait();
        }
    }
}

/// All eight client roles implemented against one backend process.
#[derive(Clone)]
pub struct RemoteClient {
    process: Arc<RemoteProcess>,
}

impl RemoteClient {
    pub fn new(process: Arc<RemoteProcess>) -> Self {
        RemoteClient { process }
    }

    fn save_frame(&self, frame: ArrayView3<u8>, dir: &Path, name: &str) -> Result<PathBuf> {
        let path = dir.join(name);
        util::save_frame_png(frame, &path)?;
        Ok(path)
    }
}

impl Client for RemoteClient {
    fn backend(&self) -> BackendInfo {
        self.process.backend()
    }
}

impl VideoReasoner for RemoteClient {
    fn reason_object_name(
        &self,
        episode_id: &str,
        clip: &ViewStream,
        question_template: &str,
    ) -> Result<String> {
        let dir = self.process.call_dir()?;
        let clip_dir = dir.join("clip");
        write_frames_dir(clip, &clip_dir)?;
        let mut payloads = BTreeMap::new();
        payloads.insert("clip".to_string(), clip_dir);
        let result = self.process.call(
            "reason_object_name",
            payloads,
            json!({ "episode_id": episode_id, "question_template": question_template }),
        )?;
        let value: Value = read_json(&result)?;
        value["label"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::client(&self.backend().id, "missing label in result"))
    }
}

impl OpenVocabSegmenter for RemoteClient {
    fn open_vocab_mask(
        &self,
        frame: ArrayView3<u8>,
        query: &str,
        frame_index: usize,
    ) -> Result<QueryMask> {
        let dir = self.process.call_dir()?;
        let mut payloads = BTreeMap::new();
        payloads.insert("frame".to_string(), self.save_frame(frame, &dir, "frame.png")?);
        let result = self.process.call(
            "open_vocab_mask",
            payloads,
            json!({ "query": query, "frame_index": frame_index }),
        )?;
        let value: Value = read_json(&result)?;
        let base = result.parent().unwrap_or(Path::new("."));
        let mask_rel = value["mask"]
            .as_str()
            .ok_or_else(|| Error::client(&self.backend().id, "missing mask in result"))?;
        Ok(QueryMask {
            mask: util::load_mask_pbm(&base.join(mask_rel))?,
            warning: value["warning"].as_str().map(str::to_string),
        })
    }
}

impl VideoTracker for RemoteClient {
    fn track_video(
        &self,
        frames: &ViewStream,
        prompts: &PointPrompt,
        anchor_index: usize,
        anchor_mask: &Array2<bool>,
    ) -> Result<Vec<Array2<bool>>> {
        let dir = self.process.call_dir()?;
        let frames_dir = dir.join("frames");
        write_frames_dir(frames, &frames_dir)?;
        let mask_path = dir.join("anchor_mask.pbm");
        util::save_mask_pbm(anchor_mask.view(), &mask_path)?;
        let mut payloads = BTreeMap::new();
        payloads.insert("frames".to_string(), frames_dir);
        payloads.insert("anchor_mask".to_string(), mask_path);
        let result = self.process.call(
            "track_video",
            payloads,
            json!({ "anchor_index": anchor_index, "points": prompts.points }),
        )?;
        let value: Value = read_json(&result)?;
        let base = result.parent().unwrap_or(Path::new("."));
        let list = value["masks"]
            .as_array()
            .ok_or_else(|| Error::client(&self.backend().id, "missing masks in result"))?;
        list.iter()
            .map(|m| {
                let rel = m
                    .as_str()
                    .ok_or_else(|| Error::client(&self.backend().id, "bad mask path"))?;
                util::load_mask_pbm(&base.join(rel))
            })
            .collect()
    }
}

impl PanopticSegmenter for RemoteClient {
    fn panoptic_segment(&self, frame: ArrayView3<u8>) -> Result<PanopticResult> {
        let dir = self.process.call_dir()?;
        let mut payloads = BTreeMap::new();
        payloads.insert("frame".to_string(), self.save_frame(frame, &dir, "frame.png")?);
        let result = self.process.call("panoptic_segment", payloads, json!({}))?;
        let value: Value = read_json(&result)?;
        let base = result.parent().unwrap_or(Path::new("."));
        let regions = value["regions"]
            .as_array()
            .ok_or_else(|| Error::client(&self.backend().id, "missing regions"))?
            .iter()
            .map(|r| {
                let rel = r["mask"]
                    .as_str()
                    .ok_or_else(|| Error::client(&self.backend().id, "bad region mask"))?;
                Ok(PanopticRegion {
                    class_label: r["class_label"].as_str().unwrap_or_default().to_string(),
                    mask: util::load_mask_pbm(&base.join(rel))?,
                    score: r["score"].as_f64().unwrap_or(0.0),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PanopticResult { regions })
    }
}

impl Captioner for RemoteClient {
    fn caption_episode(
        &self,
        stitched_video: &[Array3<u8>],
        template: CaptionTemplate,
    ) -> Result<String> {
        let dir = self.process.call_dir()?;
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        for (t, frame) in stitched_video.iter().enumerate() {
            util::save_frame_png(frame.view(), &frames_dir.join(frame_file(t)))?;
        }
        let mut payloads = BTreeMap::new();
        payloads.insert("frames".to_string(), frames_dir);
        let result = self.process.call(
            "caption_episode",
            payloads,
            json!({
                "template": template.name(),
                "prompt": template.prompt(),
                "count": stitched_video.len(),
            }),
        )?;
        let value: Value = read_json(&result)?;
        value["caption"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::client(&self.backend().id, "missing caption"))
    }
}

impl FeatureMatcher for RemoteClient {
    fn match_features(
        &self,
        frame_a: ArrayView3<u8>,
        frame_b: ArrayView3<u8>,
        confidence_threshold: f64,
    ) -> Result<usize> {
        let dir = self.process.call_dir()?;
        let mut payloads = BTreeMap::new();
        payloads.insert("frame_a".to_string(), self.save_frame(frame_a, &dir, "a.png")?);
        payloads.insert("frame_b".to_string(), self.save_frame(frame_b, &dir, "b.png")?);
        let result = self.process.call(
            "match_features",
            payloads,
            json!({ "confidence_threshold": confidence_threshold }),
        )?;
        let value: Value = read_json(&result)?;
        value["count"]
            .as_u64()
            .map(|c| c as usize)
            .ok_or_else(|| Error::client(&self.backend().id, "missing count"))
    }
}

impl IqaScorer for RemoteClient {
    fn iqa_score(&self, image: ArrayView3<u8>) -> Result<f64> {
        let dir = self.process.call_dir()?;
        let mut payloads = BTreeMap::new();
        payloads.insert("image".to_string(), self.save_frame(image, &dir, "image.png")?);
        let result = self.process.call("iqa_score", payloads, json!({}))?;
        let value: Value = read_json(&result)?;
        value["score"]
            .as_f64()
            .ok_or_else(|| Error::client(&self.backend().id, "missing score"))
    }
}

impl ClipSimilarityScorer for RemoteClient {
    fn clip_similarity(&self, image: ArrayView3<u8>, text: &str) -> Result<f64> {
        let dir = self.process.call_dir()?;
        let mut payloads = BTreeMap::new();
        payloads.insert("image".to_string(), self.save_frame(image, &dir, "image.png")?);
        let result = self
            .process
            .call("clip_similarity", payloads, json!({ "text": text }))?;
        let value: Value = read_json(&result)?;
        value["score"]
            .as_f64()
            .ok_or_else(|| Error::client(&self.backend().id, "missing score"))
    }
}

fn template_by_name(name: &str) -> Result<CaptionTemplate> {
    match name {
        "scene" => Ok(CaptionTemplate::Scene),
        "action" => Ok(CaptionTemplate::Action),
        "action_chunked" => Ok(CaptionTemplate::ActionChunked),
        other => Err(Error::Parameter(format!("unknown caption template {other:?}"))),
    }
}

fn handle_request(clients: &ClientSet, request: &Request) -> Result<PathBuf> {
    let out = &request.result_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let result_path = out.join("result.json");
    let payload = |name: &str| -> Result<&PathBuf> {
        request
            .payload_paths
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("missing payload {name:?}")))
    };
    match request.op.as_str() {
        "backend_info" => {
            write_json(&BackendInfo::new("remote-stub-backend", "1"), &result_path)?;
        }
        "reason_object_name" => {
            let clip = read_frames_dir(payload("clip")?)?;
            let episode_id = request.params["episode_id"].as_str().unwrap_or_default();
            let template = request.params["question_template"].as_str().unwrap_or_default();
            let label = clients.reasoner.reason_object_name(episode_id, &clip, template)?;
            write_json(&json!({ "label": label }), &result_path)?;
        }
        "open_vocab_mask" => {
            let frame = util::load_frame_png(payload("frame")?)?;
            let query = request.params["query"].as_str().unwrap_or_default();
            let index = request.params["frame_index"].as_u64().unwrap_or(0) as usize;
            let got = clients.segmenter.open_vocab_mask(frame.view(), query, index)?;
            util::save_mask_pbm(got.mask.view(), &out.join("mask.pbm"))?;
            write_json(&json!({ "mask": "mask.pbm", "warning": got.warning }), &result_path)?;
        }
        "track_video" => {
            let frames = read_frames_dir(payload("frames")?)?;
            let anchor_mask = util::load_mask_pbm(payload("anchor_mask")?)?;
            let anchor_index = request.params["anchor_index"].as_u64().unwrap_or(0) as usize;
            let points: Vec<(usize, usize)> =
                serde_json::from_value(request.params["points"].clone())
                    .map_err(|e| Error::Parameter(format!("bad points: {e}")))?;
            let masks = clients.tracker.track_video(
                &frames,
                &PointPrompt { points },
                anchor_index,
                &anchor_mask,
            )?;
            let mut names = Vec::new();
            for (i, m) in masks.iter().enumerate() {
                let name = format!("mask_{i:05}.pbm");
                util::save_mask_pbm(m.view(), &out.join(&name))?;
                names.push(name);
            }
            write_json(&json!({ "masks": names }), &result_path)?;
        }
        "panoptic_segment" => {
            let frame = util::load_frame_png(payload("frame")?)?;
            let res = clients.panoptic.panoptic_segment(frame.view())?;
            let mut regions = Vec::new();
            for (i, r) in res.regions.iter().enumerate() {
                let name = format!("region_{i:03}.pbm");
                util::save_mask_pbm(r.mask.view(), &out.join(&name))?;
                regions.push(json!({
                    "class_label": r.class_label,
                    "score": r.score,
                    "mask": name,
                }));
            }
            write_json(&json!({ "regions": regions }), &result_path)?;
        }
        "caption_episode" => {
            let dir = payload("frames")?;
            let count = request.params["count"].as_u64().unwrap_or(0) as usize;
            let mut frames = Vec::with_capacity(count);
            for t in 0..count {
                frames.push(util::load_frame_png(&dir.join(frame_file(t)))?);
            }
            let template = template_by_name(request.params["template"].as_str().unwrap_or(""))?;
            let caption = clients.captioner.caption_episode(&frames, template)?;
            write_json(&json!({ "caption": caption }), &result_path)?;
        }
        "match_features" => {
            let a = util::load_frame_png(payload("frame_a")?)?;
            let b = util::load_frame_png(payload("frame_b")?)?;
            let threshold = request.params["confidence_threshold"].as_f64().unwrap_or(0.5);
            let count = clients.matcher.match_features(a.view(), b.view(), threshold)?;
            write_json(&json!({ "count": count }), &result_path)?;
        }
        "iqa_score" => {
            let image = util::load_frame_png(payload("image")?)?;
            let score = clients.iqa.iqa_score(image.view())?;
            write_json(&json!({ "score": score }), &result_path)?;
        }
        "clip_similarity" => {
            let image = util::load_frame_png(payload("image")?)?;
            let text = request.params["text"].as_str().unwrap_or_default();
            let score = clients.clip.clip_similarity(image.view(), text)?;
            write_json(&json!({ "score": score }), &result_path)?;
        }
        other => return Err(Error::Parameter(format!("unknown op {other:?}"))),
    }
    Ok(result_path)
}

/// Serve the request/response protocol over the given streams, answering with
/// the stub clients. Returns when the input stream closes.
pub fn serve_stub_backend<R: BufRead, W: Write>(
    clients: &ClientSet,
    input: R,
    mut output: W,
) -> Result<()> {
    for line in input.lines() {
        let line = line.map_err(|e| Error::client("stub-server", e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(request) => match handle_request(clients, &request) {
                Ok(result_path) => Response::Ok { result_path },
                Err(e) => Response::Error { error: e.to_string() },
            },
            Err(e) => Response::Error { error: format!("bad request: {e}") },
        };
        let text = serde_json::to_string(&response)
            .map_err(|e| Error::client("stub-server", e.to_string()))?;
        writeln!(output, "{text}").and_then(|_| output.flush())
            .map_err(|e| Error::client("stub-server", e.to_string()))?;
    }
    Ok(())
}
