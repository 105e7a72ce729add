//! Codec-free video sources: numbered binary PPM frames, raw RGB24 with a JSON
//! sidecar, and a seeded synthetic generator with an optional planted anomaly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{Frame, RawVideo};

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: byte {offset}: {msg}")]
    Malformed { path: PathBuf, offset: usize, msg: String },
    #[error("{path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: frame is {got_w}x{got_h}, earlier frames are {want_w}x{want_h}")]
    Dimension {
        path: PathBuf,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("{path}: sidecar: {msg}")]
    Sidecar { path: PathBuf, msg: String },
    #[error("{0}: no frames")]
    Empty(PathBuf),
    #[error("invalid source spec: {0}")]
    Spec(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SourceError + '_ {
    move |source| SourceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    /// Diagonal colour ramp drifting one level per frame.
    #[default]
    Gradient,
    /// Uniform integer noise, fresh per frame.
    Noise,
    /// Every pixel at 114.75, the normalization mean.
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticVideo {
    pub pattern: Pattern,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub seed: u64,
    /// Frames `[start, end)` that carry a moving saturated square.
    pub anomaly: Option<[usize; 2]>,
}

impl Default for SyntheticVideo {
    fn default() -> Self {
        SyntheticVideo {
            pattern: Pattern::Gradient,
            frames: 512,
            width: 64,
            height: 48,
            fps: 30.0,
            seed: 0,
            anomaly: None,
        }
    }
}

impl SyntheticVideo {
    pub fn validate(&self) -> Result<(), SourceError> {
        if self.frames == 0 || self.width == 0 || self.height == 0 {
            return Err(SourceError::Spec(
                "synthetic frames, width and height must be positive".into(),
            ));
        }
        if !(self.fps > 0.0) {
            return Err(SourceError::Spec("synthetic fps must be positive".into()));
        }
        if let Some([s, e]) = self.anomaly {
            if s >= e || e > self.frames {
                return Err(SourceError::Spec(format!(
                    "anomaly window [{s}, {e}) must be non-empty and within {} frames",
                    self.frames
                )));
            }
        }
        Ok(())
    }

    /// Side of the planted square: a quarter of the shorter frame side, at least 1.
    pub fn square_side(&self) -> usize {
        (self.width.min(self.height) / 4).max(1)
    }

    /// Background frame `t`, without any planted content.
    pub fn background(&self, t: usize) -> Frame {
        let (w, h) = (self.width, self.height);
        let data = match self.pattern {
            Pattern::Gradient => (0..h * w * 3)
                .map(|i| {
                    let (p, ch) = (i / 3, i % 3);
                    let (y, x) = (p / w, p % w);
                    ((x * 3 + y * 2 + t + ch * 85) % 256) as f32
                })
                .collect(),
            Pattern::Noise => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                (0..h * w * 3).map(|_| rng.random_range(0..256u32) as f32).collect()
            }
            Pattern::Flat => vec![114.75; h * w * 3],
        };
        Frame::new(h, w, data).expect("sizes are consistent")
    }

    /// Frame `t` including the planted square when `t` lies in the window.
    pub fn frame(&self, t: usize) -> Frame {
        let bg = self.background(t);
        let Some([s, e]) = self.anomaly else {
            return bg;
        };
        if t < s || t >= e {
            return bg;
        }
        let side = self.square_side();
        let (w, h) = (self.width, self.height);
        // The square sweeps left to right across the window, vertically centred.
        let span = w - side;
        let x0 = if e - s > 1 {
            (t - s) * span / (e - s - 1)
        } else {
            span / 2
        };
        let y0 = (h - side) / 2;
        let mut data = bg.data().to_vec();
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                let p = (y * w + x) * 3;
                data[p..p + 3].copy_from_slice(&[255.0, 0.0, 0.0]);
            }
        }
        Frame::new(h, w, data).expect("sizes are consistent")
    }

    pub fn generate(&self, source_id: &str) -> Result<RawVideo, SourceError> {
        self.validate()?;
        let frames = (0..self.frames).map(|t| self.frame(t)).collect();
        RawVideo::new(frames, self.fps, source_id).map_err(|e| SourceError::Spec(e.to_string()))
    }
}

/// Where a video comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum VideoSource {
    /// Directory of binary PPM (P6) frames, read in file-name order.
    Ppm {
        dir: PathBuf,
        fps: Option<f64>,
    },
    /// Packed RGB24 frames; the sidecar defaults to `<path>.json`.
    Raw {
        path: PathBuf,
        sidecar: Option<PathBuf>,
    },
    Synthetic(SyntheticVideo),
}

impl Default for VideoSource {
    fn default() -> Self {
        VideoSource::Synthetic(SyntheticVideo::default())
    }
}

impl VideoSource {
    /// Identifier used in score records: the path, or `synthetic`.
    pub fn id(&self) -> String {
        match self {
            VideoSource::Ppm { dir, .. } => dir.display().to_string(),
            VideoSource::Raw { path, .. } => path.display().to_string(),
            VideoSource::Synthetic(_) => "synthetic".into(),
        }
    }
}

/// Loads every frame of a source into memory, validating uniform dimensions.
pub fn load_video_source(spec: &VideoSource) -> Result<RawVideo, SourceError> {
    match spec {
        VideoSource::Ppm { dir, fps } => load_ppm_dir(dir, fps.unwrap_or(30.0)),
        VideoSource::Raw { path, sidecar } => {
            let side = sidecar.clone().unwrap_or_else(|| sidecar_path(path));
            load_raw(path, &side)
        }
        VideoSource::Synthetic(s) => s.generate(&spec.id()),
    }
}

/// Shape and rate of a raw RGB24 file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSidecar {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub frame_count: usize,
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    let mut s = raw.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn frame_from_bytes(h: usize, w: usize, bytes: &[u8]) -> Frame {
    Frame::new(h, w, bytes.iter().map(|&b| b as f32).collect()).expect("byte count checked")
}

pub fn load_raw(path: &Path, sidecar: &Path) -> Result<RawVideo, SourceError> {
    let text = fs::read_to_string(sidecar).map_err(io_err(sidecar))?;
    let meta: RawSidecar = serde_json::from_str(&text).map_err(|e| SourceError::Sidecar {
        path: sidecar.to_path_buf(),
        msg: e.to_string(),
    })?;
    if meta.width == 0 || meta.height == 0 || meta.frame_count == 0 || !(meta.fps > 0.0) {
        return Err(SourceError::Sidecar {
            path: sidecar.to_path_buf(),
            msg: "width, height, frame_count and fps must be positive".into(),
        });
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    let frame_bytes = meta.width * meta.height * 3;
    let expected = frame_bytes * meta.frame_count;
    if bytes.len() != expected {
        return Err(SourceError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let frames = bytes
        .chunks_exact(frame_bytes)
        .map(|c| frame_from_bytes(meta.height, meta.width, c))
        .collect();
    RawVideo::new(frames, meta.fps, path.display().to_string()).map_err(|e| SourceError::Spec(e.to_string()))
}

/// Writes packed RGB24 plus its sidecar; values are rounded and clamped to bytes.
pub fn write_raw(video: &RawVideo, path: &Path) -> Result<(), SourceError> {
    let (h, w) = video.frame_size();
    let bytes: Vec<u8> = video.frames().iter().flat_map(frame_bytes).collect();
    fs::write(path, bytes).map_err(io_err(path))?;
    let meta = RawSidecar {
        width: w,
        height: h,
        fps: video.fps(),
        frame_count: video.len(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&meta).expect("plain struct")).map_err(io_err(&side))
}

fn frame_bytes(f: &Frame) -> Vec<u8> {
    f.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
}

pub fn encode_ppm(f: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", f.width(), f.height()).into_bytes();
    out.extend(frame_bytes(f));
    out
}

/// Parses one binary PPM with maxval ≤ 255.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Frame, SourceError> {
    let bad = |offset: usize, msg: &str| SourceError::Malformed {
        path: path.to_path_buf(),
        offset,
        msg: msg.to_string(),
    };
    if !bytes.starts_with(b"P6") {
        return Err(bad(0, "missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // Whitespace and `#` comments may precede each header number.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad(start, ["expected width", "expected height", "expected maxval"][k]));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(start, "header number out of range"))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(bad(2, "zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad(pos, "only maxval 1..=255 is supported"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad(pos, "expected one whitespace byte before pixel data"));
    }
    pos += 1;
    let need = w * h * 3;
    let have = bytes.len() - pos;
    if have < need {
        return Err(SourceError::Truncated {
            path: path.to_path_buf(),
            expected: pos + need,
            actual: bytes.len(),
        });
    }
    let scale = 255.0 / maxval as f32;
    let data = bytes[pos..pos + need].iter().map(|&b| b as f32 * scale).collect();
    Frame::new(h, w, data).map_err(|e| bad(pos, &e.to_string()))
}

pub fn load_ppm_dir(dir: &Path, fps: f64) -> Result<RawVideo, SourceError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(SourceError::Empty(dir.to_path_buf()));
    }
    let mut frames: Vec<Frame> = Vec::with_capacity(paths.len());
    for p in &paths {
        let f = decode_ppm(&fs::read(p).map_err(io_err(p))?, p)?;
        if let Some(first) = frames.first() {
            if (f.width(), f.height()) != (first.width(), first.height()) {
                return Err(SourceError::Dimension {
                    path: p.clone(),
                    got_w: f.width(),
                    got_h: f.height(),
                    want_w: first.width(),
                    want_h: first.height(),
                });
            }
        }
        frames.push(f);
    }
    RawVideo::new(frames, fps, dir.display().to_string()).map_err(|e| SourceError::Spec(e.to_string()))
}

/// Writes `frame_00000.ppm`, `frame_00001.ppm`, … into `dir`.
pub fn write_ppm_dir(video: &RawVideo, dir: &Path) -> Result<(), SourceError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, f) in video.frames().iter().enumerate() {
        let p = dir.join(format!("frame_{i:05}.ppm"));
        fs::write(&p, encode_ppm(f)).map_err(io_err(&p))?;
    }
    Ok(())
}
