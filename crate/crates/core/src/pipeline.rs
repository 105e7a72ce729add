//! Staged detection dataflow: source → preprocess → extract → detect → collector.
//!
//! Each stage runs on its own thread and hands snippets to the next through a
//! bounded FIFO. The detect stage needs every
//! snippet of the video before it can score (the temporal network attends over
//! the whole sequence), so records are emitted once extraction has finished.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Instant;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extractor::{FeatureExtractor, SnippetFeatures};
use crate::graph::{ComputeGraph, MemoryPlan};
use crate::preprocess::{
    gather_snippet, preprocess_frames, segment_snippets, ClipBatch, Frame, PreprocessConfig, RawVideo,
};
use crate::rtfm::{video_score, RtfmParams};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("model mismatch: {0}")]
    Model(String),
    #[error("source: {0}")]
    Source(String),
    #[error("{stage} stage failed at snippet {snippet}: {message}")]
    Stage {
        stage: &'static str,
        snippet: usize,
        message: String,
    },
}

/// Strict comparison: a score equal to the threshold does not alert.
pub fn alert_check(score: f32, threshold: f32) -> bool {
    score > threshold
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub preprocess_ms: f64,
    pub extract_ms: f64,
    /// Scoring time of the whole video, shared by all of its records.
    pub detect_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub source: String,
    pub snippet_index: usize,
    pub start_frame: usize,
    /// One past the last source frame of the snippet.
    pub end_frame: usize,
    pub score: f32,
    pub alert: bool,
    pub latency: StageLatency,
    pub timestamp: DateTime<Utc>,
}

impl ScoreRecord {
    /// Equality on everything except latencies and the wall timestamp.
    pub fn same_result(&self, other: &ScoreRecord) -> bool {
        self.source == other.source
            && self.snippet_index == other.snippet_index
            && self.start_frame == other.start_frame
            && self.end_frame == other.end_frame
            && self.score.to_bits() == other.score.to_bits()
            && self.alert == other.alert
    }
}

/// `2026-01-02T03:04:05.678Z snippet=3 start=48 score=0.5000 status=ALERT`.
pub fn log_event(record: &ScoreRecord) -> String {
    format!(
        "{} snippet={} start={} score={:.4} status={}",
        record.timestamp.to_rfc3339_opts(SecondsFormat::Millis, true),
        record.snippet_index,
        record.start_frame,
        record.score,
        if record.alert { "ALERT" } else { "ok" }
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub threshold: f32,
    /// Slots of every inter-stage queue.
    pub capacity: usize,
    /// Parallel preprocess workers.
    pub workers: usize,
    pub preprocess: PreprocessConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            threshold: 0.7,
            capacity: 4,
            workers: 1,
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.capacity == 0 || self.workers == 0 {
            return Err(PipelineError::Config("capacity and workers must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(PipelineError::Config(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        self.preprocess
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}

/// Extractor graph (optionally with its memory plan) plus the trained head.
#[derive(Debug, Clone)]
pub struct Detector {
    pub extractor: ComputeGraph,
    pub plan: Option<MemoryPlan>,
    pub head: RtfmParams,
}

impl Detector {
    /// Checks that the extractor consumes this preprocessing and feeds the head.
    pub fn check(&self, pre: &PreprocessConfig) -> Result<(), PipelineError> {
        let inputs = self.extractor.input_shapes();
        let outputs = self.extractor.output_shapes();
        if inputs.len() != 1 || outputs.len() != 1 {
            return Err(PipelineError::Model(
                "extractor must have one input and one output".into(),
            ));
        }
        if inputs[0] != pre.clip_shape() {
            return Err(PipelineError::Model(format!(
                "extractor input {:?} differs from clip shape {:?}",
                inputs[0],
                pre.clip_shape()
            )));
        }
        let dim = outputs[0].get(1).copied().unwrap_or(0);
        if outputs[0].len() != 2 || dim != self.head.config.feature_dim {
            return Err(PipelineError::Model(format!(
                "extractor output {:?} does not feed a head expecting D = {}",
                outputs[0], self.head.config.feature_dim
            )));
        }
        if !self.extractor.has_values() {
            return Err(PipelineError::Model("extractor has no parameter values".into()));
        }
        Ok(())
    }
}

/// Peak number of snippets between one producer and its consumer.
#[derive(Debug, Default)]
pub struct Gauge {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl Gauge {
    fn enter(&self) {
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn leave(&self) {
        self.live.fetch_sub(1, Ordering::SeqCst);
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

/// Residency gauges of the three queued boundaries. With `w` preprocess
/// workers the first two boundaries are `w` queues each.
#[derive(Debug, Default)]
pub struct Residency {
    pub source_preprocess: Gauge,
    pub preprocess_extract: Gauge,
    pub extract_detect: Gauge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub source: String,
    pub snippets: usize,
    pub frames: usize,
    pub elapsed_s: f64,
    /// Source frames consumed per second of wall time.
    pub fps: f64,
    pub alerts: usize,
    pub peak_resident: [usize; 3],
}

impl PipelineSummary {
    pub fn log_line(&self) -> String {
        format!(
            "{} summary snippets={} frames={} elapsed_s={:.3} fps={:.2} alerts={}",
            Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            self.snippets,
            self.frames,
            self.elapsed_s,
            self.fps,
            self.alerts
        )
    }
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub records: Vec<ScoreRecord>,
    pub summary: PipelineSummary,
    /// First mid-stream failure. Scoring needs the whole video, so a failure
    /// leaves `records` empty.
    pub failure: Option<PipelineError>,
}

struct Gathered {
    index: usize,
    start: usize,
    frames: Vec<Frame>,
    timestamps: Vec<f64>,
    pre_ms: f64,
}

type Msg<T> = Result<T, PipelineError>;

fn stage_err(stage: &'static str, snippet: usize, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage,
        snippet,
        message: e.to_string(),
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

struct QueueState<T> {
    items: VecDeque<T>,
    sender: bool,
    receiver: bool,
}

struct Queue<T> {
    state: Mutex<QueueState<T>>,
    changed: Condvar,
    capacity: usize,
}

impl<T> Queue<T> {
    fn lock(&self) -> MutexGuard<'_, QueueState<T>> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Single-producer end of a bounded FIFO. Residency is updated under the
/// queue lock: an item counts from the moment `send` is called until the
/// consumer pops it, so the gauge never exceeds `capacity + 1` per queue.
struct Tx<'g, T> {
    queue: Arc<Queue<T>>,
    gauge: &'g Gauge,
}

struct Rx<'g, T> {
    queue: Arc<Queue<T>>,
    gauge: &'g Gauge,
}

fn bounded<T>(capacity: usize, gauge: &Gauge) -> (Tx<'_, T>, Rx<'_, T>) {
    let queue = Arc::new(Queue {
        state: Mutex::new(QueueState {
            items: VecDeque::with_capacity(capacity),
            sender: true,
            receiver: true,
        }),
        changed: Condvar::new(),
        capacity,
    });
    (
        Tx {
            queue: queue.clone(),
            gauge,
        },
        Rx { queue, gauge },
    )
}

impl<T> Tx<'_, T> {
    /// Blocks while the queue is full. Returns false once the receiver is gone.
    fn send(&self, item: T) -> bool {
        let mut st = self.queue.lock();
        self.gauge.enter();
        while st.items.len() >= self.queue.capacity && st.receiver {
            st = self.queue.changed.wait(st).unwrap_or_else(|p| p.into_inner());
        }
        if !st.receiver {
            self.gauge.leave();
            return false;
        }
        st.items.push_back(item);
        self.queue.changed.notify_all();
        true
    }
}

impl<T> Rx<'_, T> {
    /// Next item, or `None` once the queue is empty and the sender is gone.
    fn recv(&self) -> Option<T> {
        let mut st = self.queue.lock();
        loop {
            if let Some(item) = st.items.pop_front() {
                self.gauge.leave();
                self.queue.changed.notify_all();
                return Some(item);
            }
            if !st.sender {
                return None;
            }
            st = self.queue.changed.wait(st).unwrap_or_else(|p| p.into_inner());
        }
    }
}

impl<T> Drop for Tx<'_, T> {
    fn drop(&mut self) {
        self.queue.lock().sender = false;
        self.queue.changed.notify_all();
    }
}

impl<T> Drop for Rx<'_, T> {
    fn drop(&mut self) {
        let mut st = self.queue.lock();
        st.receiver = false;
        for _ in st.items.drain(..) {
            self.gauge.leave();
        }
        self.queue.changed.notify_all();
    }
}

fn score_records(
    video: &RawVideo,
    starts: &[usize],
    frames_per_snippet: usize,
    scores: &Tensor,
    latency: &[StageLatency],
    threshold: f32,
) -> Vec<ScoreRecord> {
    scores
        .data()
        .iter()
        .enumerate()
        .map(|(i, &score)| ScoreRecord {
            source: video.source_id().to_string(),
            snippet_index: i,
            start_frame: starts[i],
            end_frame: (starts[i] + frames_per_snippet).min(video.len()),
            score,
            alert: alert_check(score, threshold),
            latency: latency[i],
            timestamp: Utc::now(),
        })
        .collect()
}

fn summarize(video: &RawVideo, records: &[ScoreRecord], elapsed_s: f64, residency: &Residency) -> PipelineSummary {
    PipelineSummary {
        source: video.source_id().to_string(),
        snippets: records.len(),
        frames: video.len(),
        elapsed_s,
        fps: if elapsed_s > 0.0 {
            video.len() as f64 / elapsed_s
        } else {
            0.0
        },
        alerts: records.iter().filter(|r| r.alert).count(),
        peak_resident: [
            residency.source_preprocess.peak(),
            residency.preprocess_extract.peak(),
            residency.extract_detect.peak(),
        ],
    }
}

/// Runs the staged pipeline over one video.
///
/// Startup problems (bad config, model/preprocessing mismatch, empty video)
/// are returned as `Err`; a stage failing mid-stream drains the remaining
/// stages and is reported in [`PipelineOutcome::failure`].
pub fn run_pipeline(
    video: &RawVideo,
    detector: &Detector,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, PipelineError> {
    run_pipeline_instrumented(video, detector, cfg, &Residency::default())
}

/// [`run_pipeline`] with caller-owned residency gauges.
pub fn run_pipeline_instrumented(
    video: &RawVideo,
    detector: &Detector,
    cfg: &PipelineConfig,
    residency: &Residency,
) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate()?;
    detector.check(&cfg.preprocess)?;
    if video.is_empty() {
        return Err(PipelineError::Source("video has no frames".into()));
    }
    let pre = &cfg.preprocess;
    let plan = segment_snippets(video.len(), pre.snippets, pre.frames_per_snippet);
    let workers = cfg.workers.min(pre.snippets);
    let started = Instant::now();
    let failure = Mutex::new(None::<PipelineError>);
    let report = |e: PipelineError| {
        let mut slot = failure.lock().expect("failure slot");
        if slot.is_none() {
            *slot = Some(e);
        }
    };

    let outcome = std::thread::scope(|s| {
        let mut to_workers = Vec::new();
        let mut from_workers = Vec::new();
        for _ in 0..workers {
            let (gtx, grx) = bounded::<Msg<Gathered>>(cfg.capacity, &residency.source_preprocess);
            let (ptx, prx) = bounded::<Msg<(ClipBatch, f64)>>(cfg.capacity, &residency.preprocess_extract);
            to_workers.push(gtx);
            from_workers.push(prx);
            s.spawn(move || {
                while let Some(msg) = grx.recv() {
                    let out = msg.and_then(|g| {
                        let t = Instant::now();
                        let data =
                            preprocess_frames(&g.frames, pre).map_err(|e| stage_err("preprocess", g.index, e))?;
                        let clip = ClipBatch {
                            data,
                            snippet_index: g.index,
                            start_frame: g.start,
                            timestamps: g.timestamps,
                        };
                        Ok((clip, g.pre_ms + ms_since(t)))
                    });
                    let failed = out.is_err();
                    if !ptx.send(out) || failed {
                        break;
                    }
                }
            });
        }

        // Source: gathers frames and deals snippets round-robin to workers.
        let plan_ref = &plan;
        s.spawn(move || {
            for i in 0..plan_ref.snippet_count {
                let t = Instant::now();
                let msg = gather_snippet(video, plan_ref, i)
                    .map(|(frames, timestamps)| Gathered {
                        index: i,
                        start: plan_ref.start_indices[i],
                        frames,
                        timestamps,
                        pre_ms: ms_since(t),
                    })
                    .map_err(|e| stage_err("source", i, e));
                let failed = msg.is_err();
                if !to_workers[i % workers].send(msg) || failed {
                    break;
                }
            }
        });

        // Extract: pulls from workers in the same round-robin order.
        let (ftx, frx) = bounded::<Msg<(Tensor, f64, f64)>>(cfg.capacity, &residency.extract_detect);
        let snippets = plan.snippet_count;
        s.spawn(move || {
            let mut fx = match FeatureExtractor::new(&detector.extractor, detector.plan.as_ref()) {
                Ok(fx) => fx,
                Err(e) => {
                    ftx.send(Err(stage_err("extract", 0, e)));
                    return;
                }
            };
            for i in 0..snippets {
                let Some(msg) = from_workers[i % workers].recv() else {
                    break;
                };
                let out = msg.and_then(|(clip, pre_ms)| {
                    let t = Instant::now();
                    let row = fx.extract(&clip).map_err(|e| stage_err("extract", i, e))?;
                    Ok((row, pre_ms, ms_since(t)))
                });
                let failed = out.is_err();
                if !ftx.send(out) || failed {
                    break;
                }
            }
        });

        // Detect runs on the calling thread once every row has arrived.
        let mut rows = Vec::with_capacity(snippets);
        let mut latency = Vec::with_capacity(snippets);
        while let Some(msg) = frx.recv() {
            match msg {
                Ok((row, pre_ms, ex_ms)) => {
                    rows.push(row);
                    latency.push(StageLatency {
                        preprocess_ms: pre_ms,
                        extract_ms: ex_ms,
                        detect_ms: 0.0,
                    });
                }
                Err(e) => {
                    report(e);
                    break;
                }
            }
        }
        drop(frx);
        if rows.len() < snippets {
            report(stage_err("extract", rows.len(), "stream ended early"));
            return Vec::new();
        }
        let t = Instant::now();
        let scored = SnippetFeatures::from_rows(&rows)
            .map_err(|e| stage_err("detect", 0, e))
            .and_then(|f| video_score(&f, &detector.head).map_err(|e| stage_err("detect", 0, e)));
        match scored {
            Ok(scores) => {
                let detect_ms = ms_since(t);
                for l in &mut latency {
                    l.detect_ms = detect_ms;
                }
                score_records(
                    video,
                    &plan.start_indices,
                    pre.frames_per_snippet,
                    &scores,
                    &latency,
                    cfg.threshold,
                )
            }
            Err(e) => {
                report(e);
                Vec::new()
            }
        }
    });

    let summary = summarize(video, &outcome, started.elapsed().as_secs_f64(), residency);
    Ok(PipelineOutcome {
        records: outcome,
        summary,
        failure: failure.into_inner().expect("failure slot"),
    })
}

/// Single-threaded composition of the same modules; the reference for
/// [`run_pipeline`].
pub fn run_sequential(
    video: &RawVideo,
    detector: &Detector,
    cfg: &PipelineConfig,
) -> Result<Vec<ScoreRecord>, PipelineError> {
    cfg.validate()?;
    detector.check(&cfg.preprocess)?;
    if video.is_empty() {
        return Err(PipelineError::Source("video has no frames".into()));
    }
    let pre = &cfg.preprocess;
    let plan = segment_snippets(video.len(), pre.snippets, pre.frames_per_snippet);
    let mut fx =
        FeatureExtractor::new(&detector.extractor, detector.plan.as_ref()).map_err(|e| stage_err("extract", 0, e))?;
    let mut rows = Vec::with_capacity(plan.snippet_count);
    for i in 0..plan.snippet_count {
        let (frames, timestamps) = gather_snippet(video, &plan, i).map_err(|e| stage_err("source", i, e))?;
        let clip = ClipBatch {
            data: preprocess_frames(&frames, pre).map_err(|e| stage_err("preprocess", i, e))?,
            snippet_index: i,
            start_frame: plan.start_indices[i],
            timestamps,
        };
        rows.push(fx.extract(&clip).map_err(|e| stage_err("extract", i, e))?);
    }
    let features = SnippetFeatures::from_rows(&rows).map_err(|e| stage_err("detect", 0, e))?;
    let scores = video_score(&features, &detector.head).map_err(|e| stage_err("detect", 0, e))?;
    let latency = vec![StageLatency::default(); plan.snippet_count];
    Ok(score_records(
        video,
        &plan.start_indices,
        pre.frames_per_snippet,
        &scores,
        &latency,
        cfg.threshold,
    ))
}
