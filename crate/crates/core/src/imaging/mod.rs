//! Frame-stack data model and preprocessing.
//!
//! A [`FrameStack`] is an ordered set of single-slice diffusion-weighted
//! frames of equal size. Intensities are held as `f64` in memory and stored
//! as little-endian `f32` on disk (see [`bundle`]).

pub mod bundle;
mod pgm;
mod field;
mod sample;

pub use field::DisplacementField;
pub use pgm::{encode_pgm16, write_pgm16, GrayImage};
pub(crate) use sample::bilinear_weights;
pub use sample::{bilinear_gradient, bilinear_sample, bilinear_sample_clamped};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diffusion-encoding metadata for one acquired frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionMeta {
    /// Diffusion weighting in s/mm².
    pub b_value: f64,
    /// Unit encoding direction, or zero for `b_value == 0`.
    pub direction: [f64; 3],
    pub average_index: u32,
}

impl DiffusionMeta {
    pub fn reference() -> Self {
        DiffusionMeta {
            b_value: 0.0,
            direction: [0.0; 3],
            average_index: 0,
        }
    }

    /// Builds metadata for a weighted frame, normalizing `direction`.
    pub fn weighted(b_value: f64, direction: [f64; 3], average_index: u32) -> Result<Self> {
        let norm = direction.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Input("encoding direction must be non-zero".into()));
        }
        let meta = DiffusionMeta {
            b_value,
            direction: direction.map(|c| c / norm),
            average_index,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b_value >= 0.0) || !self.b_value.is_finite() {
            return Err(Error::Input(format!("b-value {} must be >= 0", self.b_value)));
        }
        let norm = self.direction.iter().map(|c| c * c).sum::<f64>().sqrt();
        if self.b_value > 0.0 && (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!(
                "encoding direction norm {norm} is not 1 for b = {}",
                self.b_value
            )));
        }
        if self.b_value == 0.0 && norm != 0.0 {
            return Err(Error::Input("b = 0 frame must have a zero direction".into()));
        }
        Ok(())
    }
}

/// One 2D frame, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub meta: DiffusionMeta,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f64>, meta: DiffusionMeta) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} intensities for a {width}x{height} frame",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input(format!(
                "intensity {} at index {i} is not a finite non-negative value",
                data[i]
            )));
        }
        Ok(Frame {
            width,
            height,
            data,
            meta,
        })
    }

    pub fn zeros(width: usize, height: usize, meta: DiffusionMeta) -> Self {
        Frame {
            width,
            height,
            data: vec![0.0; width * height],
            meta,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub fn same_size(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    frames: Vec<Frame>,
    normalized: bool,
}

impl FrameStack {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        Self::with_flag(frames, false)
    }

    pub(crate) fn with_flag(frames: Vec<Frame>, normalized: bool) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Input(format!(
                "a stack needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        let (w, h) = (frames[0].width, frames[0].height);
        if let Some(i) = frames.iter().position(|f| f.width != w || f.height != h) {
            return Err(Error::Dimension(format!(
                "frame {i} is {}x{}, expected {w}x{h}",
                frames[i].width, frames[i].height
            )));
        }
        for f in &frames {
            f.meta.validate()?;
        }
        Ok(FrameStack { frames, normalized })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn max(&self) -> f64 {
        self.frames.iter().map(Frame::max).fold(0.0, f64::max)
    }

    /// Replaces the frames, keeping the normalized flag; sizes must match.
    pub fn map_frames<F>(&self, f: F) -> Result<FrameStack>
    where
        F: FnMut(&Frame) -> Frame,
    {
        FrameStack::with_flag(self.frames.iter().map(f).collect(), self.normalized)
    }
}

/// Binary region annotation, e.g. the myocardium.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub inside: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, inside: Vec<bool>) -> Result<Self> {
        if inside.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} mask entries for a {width}x{height} mask",
                inside.len()
            )));
        }
        Ok(Mask {
            width,
            height,
            inside,
        })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            inside: vec![true; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.inside[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.inside.iter().filter(|v| **v).count()
    }

    pub fn check_matches(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::Dimension(format!(
                "mask is {}x{}, data is {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn center_crop(&self, size: usize) -> Result<Mask> {
        let (x0, y0) = crop_origin(self.width, self.height, size)?;
        let mut inside = Vec::with_capacity(size * size);
        for y in y0..y0 + size {
            inside.extend_from_slice(&self.inside[y * self.width + x0..y * self.width + x0 + size]);
        }
        Mask::new(size, size, inside)
    }
}

fn crop_origin(width: usize, height: usize, size: usize) -> Result<(usize, usize)> {
    if size == 0 {
        return Err(Error::Dimension("crop size must be positive".into()));
    }
    if size > width || size > height {
        return Err(Error::Dimension(format!(
            "crop size {size} exceeds frame size {width}x{height}"
        )));
    }
    // floor of half the margin: an odd leftover row/column is dropped at the bottom/right
    Ok(((width - size) / 2, (height - size) / 2))
}

fn crop_frame(frame: &Frame, x0: usize, y0: usize, size: usize) -> Frame {
    let mut data = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        let row = y * frame.width;
        data.extend_from_slice(&frame.data[row + x0..row + x0 + size]);
    }
    Frame {
        width: size,
        height: size,
        data,
        meta: frame.meta,
    }
}

/// Keeps the centered `size`×`size` window of every frame.
pub fn center_crop(stack: &FrameStack, size: usize) -> Result<FrameStack> {
    let (x0, y0) = crop_origin(stack.width(), stack.height(), size)?;
    stack.map_frames(|f| crop_frame(f, x0, y0, size))
}

/// Divides every intensity by the stack's global maximum.
pub fn normalize_stack(stack: &FrameStack) -> Result<FrameStack> {
    let max = stack.max();
    if !(max > 0.0) {
        return Err(Error::DegenerateInput(
            "cannot normalize a stack whose maximum intensity is zero".into(),
        ));
    }
    let frames = stack
        .frames()
        .iter()
        .map(|f| Frame {
            data: f.data.iter().map(|v| v / max).collect(),
            ..f.clone()
        })
        .collect();
    FrameStack::with_flag(frames, true)
}

/// Index of the frame with the highest mean intensity; ties go to the lowest index.
pub fn select_fixed_frame(stack: &FrameStack) -> usize {
    let mut best = 0;
    let mut best_mean = f64::NEG_INFINITY;
    for (i, f) in stack.frames().iter().enumerate() {
        let m = f.mean();
        if m > best_mean {
            best = i;
            best_mean = m;
        }
    }
    best
}
