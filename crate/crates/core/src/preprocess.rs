//! Clip preprocessing: snippet segmentation, shorter-side resize, ten-crop and
//! per-channel normalization.
//!
//! A snippet goes through the stages in a fixed order:
//! gather frames → resize each frame → ten-crop → stack → normalize.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("video has no frames")]
    Empty,
    #[error("frame {index} is {got_h}x{got_w}, expected {want_h}x{want_w}")]
    FrameSize {
        index: usize,
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("frame buffer holds {actual} values, expected {expected} for {height}x{width}x3")]
    FrameBuffer {
        height: usize,
        width: usize,
        expected: usize,
        actual: usize,
    },
    #[error("clip is {height}x{width}; ten-crop of {size} needs both sides >= {size} (resize first)")]
    Undersized { height: usize, width: usize, size: usize },
    #[error("snippet {index} out of range for a plan of {count} snippets")]
    SnippetIndex { index: usize, count: usize },
    #[error("invalid preprocessing config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One RGB frame, stored height × width × 3 on the 0–255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, PreprocessError> {
        let expected = height * width * 3;
        if height == 0 || width == 0 || data.len() != expected {
            return Err(PreprocessError::FrameBuffer {
                height,
                width,
                expected,
                actual: data.len(),
            });
        }
        Ok(Frame { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Frame {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + ch]
    }
}

#[derive(Debug, Clone)]
pub struct RawVideo {
    frames: Vec<Frame>,
    fps: f64,
    source_id: String,
}

impl RawVideo {
    /// Validates that there is at least one frame and that all frames share a size.
    pub fn new(frames: Vec<Frame>, fps: f64, source_id: impl Into<String>) -> Result<Self, PreprocessError> {
        let first = frames.first().ok_or(PreprocessError::Empty)?;
        let (h, w) = (first.height, first.width);
        for (index, f) in frames.iter().enumerate() {
            if f.height != h || f.width != w {
                return Err(PreprocessError::FrameSize {
                    index,
                    got_h: f.height,
                    got_w: f.width,
                    want_h: h,
                    want_w: w,
                });
            }
        }
        Ok(RawVideo {
            frames,
            fps,
            source_id: source_id.into(),
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.frames[0].height, self.frames[0].width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormConstants {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for NormConstants {
    fn default() -> Self {
        NormConstants {
            mean: [114.75; 3],
            std: [57.375; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub snippets: usize,
    pub frames_per_snippet: usize,
    pub resize: usize,
    pub crop: usize,
    pub norm: NormConstants,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            snippets: 32,
            frames_per_snippet: 16,
            resize: 256,
            crop: 224,
            norm: NormConstants::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.snippets == 0 || self.frames_per_snippet == 0 {
            return Err(PreprocessError::Config(
                "snippet count and length must be positive".into(),
            ));
        }
        if self.crop == 0 || self.resize < self.crop {
            return Err(PreprocessError::Config(format!(
                "resize target {} must be at least the crop size {}",
                self.resize, self.crop
            )));
        }
        if self.norm.std.iter().any(|&s| !(s > 0.0)) {
            return Err(PreprocessError::Config("normalization std must be positive".into()));
        }
        Ok(())
    }

    /// Shape of one clip batch: `[10, 3, L, crop, crop]`.
    pub fn clip_shape(&self) -> [usize; 5] {
        [10, 3, self.frames_per_snippet, self.crop, self.crop]
    }
}

/// Output sizes for a shorter-side resize: the short side becomes `target` and
/// the long side keeps the aspect ratio, rounded to the nearest integer.
pub fn resized_dims(height: usize, width: usize, target: usize) -> (usize, usize) {
    let scale = |long: usize, short: usize| ((long as f64) * target as f64 / short as f64).round() as usize;
    if height <= width {
        (target, scale(width, height).max(1))
    } else {
        (scale(height, width).max(1), target)
    }
}

/// Source coordinate and weight table for one axis of a half-pixel bilinear resize.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (s - lo as f64) as f32)
        })
        .collect()
}

/// Bilinear resize (half-pixel centers) so that the shorter side equals `target`.
pub fn resize_shorter_side(frame: &Frame, target: usize) -> Frame {
    let (nh, nw) = resized_dims(frame.height, frame.width, target);
    if (nh, nw) == (frame.height, frame.width) {
        return frame.clone();
    }
    let ys = bilinear_taps(frame.height, nh);
    let xs = bilinear_taps(frame.width, nw);
    let mut out = Vec::with_capacity(nh * nw * 3);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            for ch in 0..3 {
                let p00 = frame.pixel(y0, x0, ch);
                let p01 = frame.pixel(y0, x1, ch);
                let p10 = frame.pixel(y1, x0, ch);
                let p11 = frame.pixel(y1, x1, ch);
                // a + (b - a)·w keeps constant regions exact.
                let top = p00 + (p01 - p00) * wx;
                let bottom = p10 + (p11 - p10) * wx;
                out.push(top + (bottom - top) * wy);
            }
        }
    }
    Frame {
        height: nh,
        width: nw,
        data: out,
    }
}

/// Stacks frames into a channel-major clip `[3, L, H, W]`.
pub fn stack_frames(frames: &[Frame]) -> Result<Tensor, PreprocessError> {
    let first = frames.first().ok_or(PreprocessError::Empty)?;
    let (h, w, l) = (first.height, first.width, frames.len());
    let mut data = vec![0.0; 3 * l * h * w];
    for (t, f) in frames.iter().enumerate() {
        if f.height != h || f.width != w {
            return Err(PreprocessError::FrameSize {
                index: t,
                got_h: f.height,
                got_w: f.width,
                want_h: h,
                want_w: w,
            });
        }
        for (p, px) in f.data.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                data[((ch * l + t) * h * w) + p] = px[ch];
            }
        }
    }
    Ok(Tensor::new(vec![3, l, h, w], data)?)
}

/// Crop origins (top, left) in output order: TL, TR, BL, BR, center.
/// The center origin uses floor((H - size) / 2), floor((W - size) / 2).
pub fn crop_origins(height: usize, width: usize, size: usize) -> [(usize, usize); 5] {
    let (dy, dx) = (height - size, width - size);
    [(0, 0), (0, dx), (dy, 0), (dy, dx), (dy / 2, dx / 2)]
}

/// Index permutation relating the crops of a horizontally mirrored clip to the
/// crops of the original: `ten_crop(mirror(x))[i] == ten_crop(x)[MIRROR_PERMUTATION[i]]`.
///
/// Exact whenever `W - size` is even (the center crop is then symmetric).
pub const MIRROR_PERMUTATION: [usize; 10] = [6, 5, 8, 7, 9, 1, 0, 3, 2, 4];

/// Four corner crops, the center crop, then the horizontal mirror of each in the
/// same order: `[3, L, H, W]` → `[10, 3, L, size, size]`.
pub fn ten_crop(clip: &Tensor, size: usize) -> Result<Tensor, PreprocessError> {
    if clip.rank() != 4 || clip.shape()[0] != 3 {
        return Err(TensorError::Rank {
            op: "ten_crop",
            expected: 4,
            shape: clip.shape().to_vec(),
        }
        .into());
    }
    let (l, h, w) = (clip.shape()[1], clip.shape()[2], clip.shape()[3]);
    if h < size || w < size || size == 0 {
        return Err(PreprocessError::Undersized {
            height: h,
            width: w,
            size,
        });
    }
    let src = clip.data();
    let per_crop = 3 * l * size * size;
    let mut data = vec![0.0; 10 * per_crop];
    for (ci, &(top, left)) in crop_origins(h, w, size).iter().enumerate() {
        let (plain, mirrored) = data[ci * per_crop..].split_at_mut(5 * per_crop);
        let plain = &mut plain[..per_crop];
        let mirrored = &mut mirrored[..per_crop];
        for plane in 0..3 * l {
            for y in 0..size {
                let row = &src[(plane * h + top + y) * w + left..][..size];
                let dst = (plane * size + y) * size;
                plain[dst..dst + size].copy_from_slice(row);
                for (x, &v) in row.iter().rev().enumerate() {
                    mirrored[dst + x] = v;
                }
            }
        }
    }
    Ok(Tensor::new(vec![10, 3, l, size, size], data)?)
}

/// `(x - mean) / std` per channel. Accepts `[3, L, H, W]` or `[N, 3, L, H, W]` clips.
pub fn normalize(clip: Tensor, consts: &NormConstants) -> Result<Tensor, PreprocessError> {
    let axis = match clip.rank() {
        4 => 0,
        5 => 1,
        _ => {
            return Err(TensorError::Rank {
                op: "normalize",
                expected: 5,
                shape: clip.shape().to_vec(),
            }
            .into())
        }
    };
    let shape = clip.shape().to_vec();
    if shape[axis] != 3 {
        return Err(TensorError::AxisMismatch {
            op: "normalize",
            axis: format!("channel (axis {axis})"),
            expected: 3,
            actual: shape[axis],
        }
        .into());
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let precision = clip.precision();
    let mut data = clip.into_data();
    for (i, v) in data.iter_mut().enumerate() {
        let ch = (i / inner) % 3;
        *v = (*v - consts.mean[ch]) / consts.std[ch];
    }
    Ok(Tensor::with_precision(shape, data, precision)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetPlan {
    pub snippet_count: usize,
    pub frames_per_snippet: usize,
    pub start_indices: Vec<usize>,
}

impl SnippetPlan {
    /// Frame indices of snippet `i`; positions past the last frame repeat it.
    pub fn frame_indices(&self, i: usize, n_frames: usize) -> Vec<usize> {
        let start = self.start_indices[i];
        (start..start + self.frames_per_snippet)
            .map(|f| f.min(n_frames - 1))
            .collect()
    }
}

/// Uniformly spaced snippet starts: `round(i·(N−L)/(T−1))`, clamped to `[0, max(0, N−L)]`.
pub fn segment_snippets(n_frames: usize, snippets: usize, frames_per_snippet: usize) -> SnippetPlan {
    let span = n_frames.saturating_sub(frames_per_snippet);
    let start_indices = (0..snippets)
        .map(|i| {
            if snippets == 1 || span == 0 {
                0
            } else {
                // Integer round-half-up of i·span/(T−1).
                let den = 2 * (snippets - 1);
                ((2 * i * span + (snippets - 1)) / den).min(span)
            }
        })
        .collect();
    SnippetPlan {
        snippet_count: snippets,
        frames_per_snippet,
        start_indices,
    }
}

#[derive(Debug, Clone)]
pub struct ClipBatch {
    /// `[10, 3, L, crop, crop]`, normalized.
    pub data: Tensor,
    pub snippet_index: usize,
    pub start_frame: usize,
    /// Source timestamps in seconds of the gathered frames.
    pub timestamps: Vec<f64>,
}

/// Frames of snippet `i` plus their timestamps.
pub fn gather_snippet(
    video: &RawVideo,
    plan: &SnippetPlan,
    i: usize,
) -> Result<(Vec<Frame>, Vec<f64>), PreprocessError> {
    if i >= plan.snippet_count {
        return Err(PreprocessError::SnippetIndex {
            index: i,
            count: plan.snippet_count,
        });
    }
    let idx = plan.frame_indices(i, video.len());
    let fps = if video.fps > 0.0 { video.fps } else { 1.0 };
    let frames = idx.iter().map(|&f| video.frames[f].clone()).collect();
    let stamps = idx.iter().map(|&f| f as f64 / fps).collect();
    Ok((frames, stamps))
}

/// Resize → ten-crop → stack → normalize on already gathered frames.
pub fn preprocess_frames(frames: &[Frame], cfg: &PreprocessConfig) -> Result<Tensor, PreprocessError> {
    let resized: Vec<Frame> = frames.iter().map(|f| resize_shorter_side(f, cfg.resize)).collect();
    let clip = stack_frames(&resized)?;
    let crops = ten_crop(&clip, cfg.crop)?;
    normalize(crops, &cfg.norm)
}

pub fn preprocess_snippet(
    video: &RawVideo,
    plan: &SnippetPlan,
    i: usize,
    cfg: &PreprocessConfig,
) -> Result<ClipBatch, PreprocessError> {
    let (frames, timestamps) = gather_snippet(video, plan, i)?;
    Ok(ClipBatch {
        data: preprocess_frames(&frames, cfg)?,
        snippet_index: i,
        start_frame: plan.start_indices[i],
        timestamps,
    })
}
