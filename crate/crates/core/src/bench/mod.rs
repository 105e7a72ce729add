//! Throughput and memory measurement, parameter/FLOP accounting and the
//! comparison against the published reference ratios.
//!
//! Peak memory is the larger of the sampled resident set (`/proc/self/statm`)
//! and the allocator high-water mark, when [`TrackingAllocator`] is installed.

mod alloc;
mod count;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{channel, RecvTimeoutError};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pipeline::{run_pipeline, Detector, PipelineConfig};
use crate::preprocess::RawVideo;

pub use alloc::{allocated_bytes, allocated_peak, reset_peak, TrackingAllocator};
pub use count::{count_head, count_params_flops, node_macs, Counts};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("another measurement is already running in this process")]
    Busy,
    #[error("workload failed after {frames} frames: {message}")]
    Workload {
        message: String,
        frames: u64,
        partial: Box<Measurement>,
    },
    #[error("reports differ in configuration: {0} vs {1}")]
    Fingerprint(String, String),
}

/// Monotonic time source.
pub trait Clock: Sync {
    fn now(&self) -> Duration;
}

/// Wall time since first use.
#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        static START: OnceLock<Instant> = OnceLock::new();
        START.get_or_init(Instant::now).elapsed()
    }
}

/// Manually advanced clock for deterministic tests.
#[derive(Debug, Default)]
pub struct ManualClock {
    nanos: AtomicU64,
}

impl ManualClock {
    pub fn advance(&self, by: Duration) {
        self.nanos.fetch_add(by.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }
}

/// Collects per-stage latencies from inside a workload.
#[derive(Debug, Default)]
pub struct StageSink {
    samples: Mutex<BTreeMap<String, Vec<f64>>>,
}

impl StageSink {
    pub fn record(&self, stage: &str, ms: f64) {
        self.samples
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .entry(stage.to_string())
            .or_default()
            .push(ms);
    }

    fn summary(&self) -> BTreeMap<String, LatencyStats> {
        let samples = self.samples.lock().unwrap_or_else(|p| p.into_inner());
        samples.iter().map(|(k, v)| (k.clone(), LatencyStats::of(v))).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

/// Nearest-rank percentile: the `ceil(p·n)`-th smallest sample.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = (p * s.len() as f64).ceil() as usize;
    s[rank.clamp(1, s.len()) - 1]
}

impl LatencyStats {
    pub fn of(samples: &[f64]) -> Self {
        LatencyStats {
            count: samples.len(),
            p50_ms: percentile(samples, 0.5),
            p95_ms: percentile(samples, 0.95),
        }
    }
}

/// What [`measure`] observes about one workload run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub frames: u64,
    pub wall_s: f64,
    pub fps: f64,
    pub peak_rss_bytes: u64,
    pub peak_alloc_bytes: Option<u64>,
    pub peak_memory_bytes: u64,
    pub stages: BTreeMap<String, LatencyStats>,
}

/// Resident set size from `/proc/self/statm`, when available.
pub fn resident_bytes() -> Option<u64> {
    let text = std::fs::read_to_string("/proc/self/statm").ok()?;
    let pages: u64 = text.split_whitespace().nth(1)?.parse().ok()?;
    Some(pages * 4096)
}

static MEASURING: AtomicBool = AtomicBool::new(false);

struct Exclusive;

impl Exclusive {
    fn acquire() -> Result<Self, BenchError> {
        MEASURING
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .map(|_| Exclusive)
            .map_err(|_| BenchError::Busy)
    }
}

impl Drop for Exclusive {
    fn drop(&mut self) {
        MEASURING.store(false, Ordering::SeqCst);
    }
}

/// Times `workload`, which returns the number of source frames it consumed.
///
/// A sampler thread reads the resident set every `period`; the allocator
/// high-water mark is reset at the start. Only one measurement may run per
/// process at a time; a second concurrent call fails with [`BenchError::Busy`].
pub fn measure<E: std::fmt::Display>(
    workload: impl FnOnce(&StageSink) -> Result<u64, (u64, E)>,
    period: Duration,
    clock: &dyn Clock,
) -> Result<Measurement, BenchError> {
    let _guard = Exclusive::acquire()?;
    let sink = StageSink::default();
    reset_peak();
    let (stop_tx, stop_rx) = channel::<()>();
    let (result, elapsed, rss) = std::thread::scope(|s| {
        let sampler = s.spawn(move || {
            let mut peak = resident_bytes().unwrap_or(0);
            loop {
                match stop_rx.recv_timeout(period) {
                    Err(RecvTimeoutError::Timeout) => peak = peak.max(resident_bytes().unwrap_or(0)),
                    _ => return peak.max(resident_bytes().unwrap_or(0)),
                }
            }
        });
        let start = clock.now();
        let result = workload(&sink);
        let elapsed = clock.now().saturating_sub(start);
        let _ = stop_tx.send(());
        (result, elapsed, sampler.join().unwrap_or(0))
    });
    let alloc = allocated_peak().map(|b| b as u64);
    let frames = match &result {
        Ok(f) => *f,
        Err((f, _)) => *f,
    };
    let wall_s = elapsed.as_secs_f64();
    let m = Measurement {
        frames,
        wall_s,
        fps: if wall_s > 0.0 { frames as f64 / wall_s } else { 0.0 },
        peak_rss_bytes: rss,
        peak_alloc_bytes: alloc,
        peak_memory_bytes: rss.max(alloc.unwrap_or(0)),
        stages: sink.summary(),
    };
    match result {
        Ok(_) => Ok(m),
        Err((frames, e)) => Err(BenchError::Workload {
            message: e.to_string(),
            frames,
            partial: Box::new(m),
        }),
    }
}

/// [`measure`] around one [`run_pipeline`] call, with per-snippet stage
/// latencies and source frames as the frame count. A mid-stream failure is
/// reported as a workload error with zero frames.
pub fn measure_pipeline(
    video: &RawVideo,
    detector: &Detector,
    cfg: &PipelineConfig,
    period: Duration,
) -> Result<Measurement, BenchError> {
    measure(
        |sink| {
            let out = run_pipeline(video, detector, cfg).map_err(|e| (0, e))?;
            if let Some(e) = out.failure {
                return Err((0, e));
            }
            for r in &out.records {
                sink.record("preprocess", r.latency.preprocess_ms);
                sink.record("extract", r.latency.extract_ms);
                sink.record("detect", r.latency.detect_ms);
            }
            Ok(out.summary.frames as u64)
        },
        period,
        &SystemClock,
    )
}

/// Hex SHA-256 of the canonical (key-sorted) JSON form of `config`.
pub fn fingerprint(config: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(config).expect("values always serialize");
    Sha256::digest(canonical.as_bytes())
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub label: String,
    /// Optimization passes applied, e.g. `fuse+fp16+memplan` or `none`.
    pub optimization: String,
    /// Fingerprint of the configuration with the optimization flags removed.
    pub fingerprint: String,
    pub params: u64,
    pub flops: u64,
    pub fps: f64,
    pub frames: u64,
    pub wall_s: f64,
    pub peak_memory_bytes: u64,
    pub peak_rss_bytes: u64,
    pub peak_alloc_bytes: Option<u64>,
    pub stages: BTreeMap<String, LatencyStats>,
    /// Effective configuration the run used.
    pub config: serde_json::Value,
}

impl BenchReport {
    pub fn assemble(
        label: &str,
        optimization: &str,
        config: serde_json::Value,
        counts: Counts,
        m: Measurement,
    ) -> Self {
        BenchReport {
            label: label.to_string(),
            optimization: optimization.to_string(),
            fingerprint: fingerprint(&config),
            params: counts.params,
            flops: counts.flops,
            fps: m.fps,
            frames: m.frames,
            wall_s: m.wall_s,
            peak_memory_bytes: m.peak_memory_bytes,
            peak_rss_bytes: m.peak_rss_bytes,
            peak_alloc_bytes: m.peak_alloc_bytes,
            stages: m.stages,
            config,
        }
    }
}

/// Published reference values (Jetson hardware, informational only).
pub mod reference {
    pub const ORIN_NANO_FPS: (f64, f64) = (36.02, 47.56);
    pub const XAVIER_FPS: (f64, f64) = (29.57, 41.65);
    pub const ORIN_NANO_RAM_GB: (f64, f64) = (4.94, 3.11);
    pub const XAVIER_RAM_GB: (f64, f64) = (5.72, 3.74);
    pub const EXTRACTOR: (f64, f64) = (34.582e6, 38.272e9);
    pub const HEAD: (f64, f64) = (24.719e6, 3.461e9);
    pub const TOTAL: (f64, f64) = (59.301e6, 41.733e9);
}

pub const REFERENCE_NOTE: &str = "paper reference (different hardware), informational";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub measured: f64,
    pub reference: Option<f64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub optimized: String,
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

fn row(metric: &str, measured: f64, reference: Option<f64>, note: &str) -> ComparisonRow {
    ComparisonRow {
        metric: metric.into(),
        measured,
        reference,
        note: note.into(),
    }
}

/// Measured optimized-vs-baseline ratios next to the published ones.
pub fn compare_with_paper(report: &BenchReport, baseline: &BenchReport) -> Result<Comparison, BenchError> {
    if report.fingerprint != baseline.fingerprint {
        return Err(BenchError::Fingerprint(
            report.fingerprint.clone(),
            baseline.fingerprint.clone(),
        ));
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let (on, xa) = (reference::ORIN_NANO_FPS, reference::XAVIER_FPS);
    let (om, xm) = (reference::ORIN_NANO_RAM_GB, reference::XAVIER_RAM_GB);
    let speedup = ratio(report.fps, baseline.fps);
    let mem = ratio(report.peak_memory_bytes as f64, baseline.peak_memory_bytes as f64);
    Ok(Comparison {
        optimized: report.optimization.clone(),
        baseline: baseline.optimization.clone(),
        rows: vec![
            row(
                "speedup (fps ratio)",
                speedup,
                Some(on.1 / on.0),
                &format!("Orin Nano; {REFERENCE_NOTE}"),
            ),
            row(
                "speedup (fps ratio)",
                speedup,
                Some(xa.1 / xa.0),
                &format!("AGX Xavier; {REFERENCE_NOTE}"),
            ),
            row(
                "memory ratio",
                mem,
                Some(om.1 / om.0),
                &format!("Orin Nano; {REFERENCE_NOTE}"),
            ),
            row(
                "memory ratio",
                mem,
                Some(xm.1 / xm.0),
                &format!("AGX Xavier; {REFERENCE_NOTE}"),
            ),
            row("fps", report.fps, None, "measured, optimized"),
            row("fps", baseline.fps, None, "measured, baseline"),
            row(
                "peak memory (GB)",
                report.peak_memory_bytes as f64 / 1e9,
                None,
                "measured, optimized",
            ),
            row(
                "peak memory (GB)",
                baseline.peak_memory_bytes as f64 / 1e9,
                None,
                "measured, baseline",
            ),
            row(
                "params (M)",
                report.params as f64 / 1e6,
                Some(reference::TOTAL.0 / 1e6),
                &format!("full system; {REFERENCE_NOTE}"),
            ),
            row(
                "GFLOPs",
                report.flops as f64 / 1e9,
                Some(reference::TOTAL.1 / 1e9),
                &format!("full system; {REFERENCE_NOTE}"),
            ),
        ],
    })
}

impl Comparison {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.metric.clone(),
                    format!("{:.3}", r.measured),
                    r.reference.map_or("-".into(), |v| format!("{v:.3}")),
                    r.note.clone(),
                ]
            })
            .collect();
        let header = [
            "metric".to_string(),
            "measured".into(),
            "reference".into(),
            "note".into(),
        ];
        let mut width = [0usize; 4];
        for c in std::iter::once(&header).chain(&cells) {
            for (w, s) in width.iter_mut().zip(c) {
                *w = (*w).max(s.chars().count());
            }
        }
        let mut out = format!("{} vs {}\n", self.optimized, self.baseline);
        for c in std::iter::once(&header).chain(&cells) {
            let line = format!(
                "{:<w0$}  {:>w1$}  {:>w2$}  {}",
                c[0],
                c[1],
                c[2],
                c[3],
                w0 = width[0],
                w1 = width[1],
                w2 = width[2]
            );
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,measured,reference,note\n");
        for r in &self.rows {
            let reference = r.reference.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(
                out,
                "{},{},{},\"{}\"",
                r.metric,
                r.measured,
                reference,
                r.note.replace('"', "\"\"")
            );
        }
        out
    }
}
