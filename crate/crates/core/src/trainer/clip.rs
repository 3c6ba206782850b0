use crate::error::{Error, Result};
use crate::image::{Image, PixelGrid};

use super::ClipMeta;

/// Input frames with timestamps in both original and normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Image>,
    pub normalized_times: Vec<f64>,
    pub meta: ClipMeta,
}

impl VideoClip {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn grid(&self) -> PixelGrid {
        self.meta.grid()
    }

    pub fn num_pixels(&self) -> usize {
        self.meta.width * self.meta.height
    }

    /// Total number of (pixel, frame) pairs.
    pub fn num_samples(&self) -> usize {
        self.num_pixels() * self.num_frames()
    }
}

/// Validates a frame sequence and maps its timestamps onto `[-1, 1]`.
pub fn normalize_clip(frames: Vec<Image>, timestamps: &[f64]) -> Result<VideoClip> {
    if frames.len() < 2 {
        return Err(Error::invalid(format!("a clip needs at least 2 frames, got {}", frames.len())));
    }
    if frames.len() != timestamps.len() {
        return Err(Error::invalid(format!("{} frames but {} timestamps", frames.len(), timestamps.len())));
    }
    if let Some(i) = timestamps.iter().position(|t| !t.is_finite()) {
        return Err(Error::invalid(format!("timestamp {} is not finite", i)));
    }
    for (i, w) in timestamps.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(Error::invalid(format!(
                "timestamps must be strictly increasing: entry {} ({}) follows {}",
                i + 1,
                w[1],
                w[0]
            )));
        }
    }
    let (width, height) = (frames[0].width, frames[0].height);
    if width == 0 || height == 0 {
        return Err(Error::invalid("frames must not be empty"));
    }
    for (i, f) in frames.iter().enumerate() {
        if f.width != width || f.height != height {
            return Err(Error::invalid(format!(
                "frame {} is {}x{}, expected {}x{}",
                i, f.width, f.height, width, height
            )));
        }
        if f.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("frame {} has values outside [0, 1]", i)));
        }
    }
    let meta = ClipMeta {
        width,
        height,
        time_min: timestamps[0],
        time_max: timestamps[timestamps.len() - 1],
        frame_times: timestamps.to_vec(),
    };
    let mut normalized_times: Vec<f64> = timestamps.iter().map(|&t| meta.normalize_time(t)).collect();
    // Pin the endpoints against rounding.
    normalized_times[0] = -1.0;
    *normalized_times.last_mut().unwrap() = 1.0;
    Ok(VideoClip { frames, normalized_times, meta })
}
