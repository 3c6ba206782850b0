//! PNG frame sequences, the JSON manifest that indexes them, synthetic test
//! scenes, and the occlusion-graph layer bound.

mod dag;
mod scenes;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use dag::{min_layers_for_dag, min_layers_for_labeled};
pub use scenes::{generate_scene, held_out_times, GeneratedScene, SceneKind, SceneParams, SyntheticScene};

pub const COLOR_SPACE: &str = "srgb8";
pub const DEFAULT_PATTERN: &str = "frame_%05d.png";
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file: String,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub frames: Vec<FrameEntry>,
    pub width: usize,
    pub height: usize,
    pub color_space: String,
}

impl Manifest {
    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.time).collect()
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        let bad = |message: String| Error::Decode { path: path.to_path_buf(), message };
        if self.color_space != COLOR_SPACE {
            return Err(bad(format!("color_space must be \"{}\", got \"{}\"", COLOR_SPACE, self.color_space)));
        }
        if self.frames.is_empty() {
            return Err(bad("manifest lists no frames".into()));
        }
        if let Some(f) = self.frames.iter().find(|f| !f.time.is_finite()) {
            return Err(bad(format!("frame `{}` has a non-finite time", f.file)));
        }
        for w in self.frames.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(bad(format!(
                    "times must be strictly increasing: `{}` at {} follows `{}` at {}",
                    w[1].file, w[1].time, w[0].file, w[0].time
                )));
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })?;
    m.validate(path)?;
    Ok(m)
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// `[0, 1]` → byte: clamp, scale by 255, round half to even.
pub fn quantize(v: f64) -> u8 {
    let x = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (x * 255.0).round_ties_even() as u8
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Decode { path: path.to_path_buf(), message };
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Rgb, png::BitDepth::Eight) => {}
        (png::ColorType::Rgba | png::ColorType::GrayscaleAlpha, _) => {
            return Err(bad("alpha channels are not supported; frames must be 8-bit RGB".into()))
        }
        (c, d) => return Err(bad(format!("expected 8-bit RGB, found {:?} at {:?}", c, d))),
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..w * h * 3].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(w, h, data)
}

fn write_png_raw(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Decode { path: path.to_path_buf(), message: other.to_string() },
    };
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

pub fn write_png(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let bytes: Vec<u8> = image.data.iter().map(|&v| quantize(v)).collect();
    write_png_raw(path.as_ref(), image.width, image.height, png::ColorType::Rgb, &bytes)
}

/// Grayscale PNG whose byte values are object ids (0 = background).
pub fn write_mask(path: impl AsRef<Path>, width: usize, height: usize, ids: &[u8]) -> Result<()> {
    if ids.len() != width * height {
        return Err(Error::invalid(format!("mask needs {} values, got {}", width * height, ids.len())));
    }
    write_png_raw(path.as_ref(), width, height, png::ColorType::Grayscale, ids)
}

/// Grayscale PNG of `[0, 1]` values, quantized like colour frames.
pub fn write_gray(path: impl AsRef<Path>, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::invalid(format!("gray image needs {} values, got {}", width * height, values.len())));
    }
    let bytes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    write_png_raw(path.as_ref(), width, height, png::ColorType::Grayscale, &bytes)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Decode { path: path.to_path_buf(), message };
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(bad("masks must be 8-bit grayscale".into()));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(w * h);
    Ok((w, h, buf))
}

/// Expands a printf-style `%0Nd` (or `%d`) pattern with a frame index.
pub fn format_pattern(pattern: &str, index: usize) -> Result<String> {
    let start = pattern.find('%').ok_or_else(|| Error::invalid(format!("pattern `{}` has no %d placeholder", pattern)))?;
    let rest = &pattern[start + 1..];
    let end = rest.find('d').ok_or_else(|| Error::invalid(format!("pattern `{}` has no %d placeholder", pattern)))?;
    let spec = &rest[..end];
    let width = if spec.is_empty() {
        0
    } else if spec.starts_with('0') && spec[1..].chars().all(|c| c.is_ascii_digit()) && spec.len() > 1 {
        spec[1..].parse::<usize>().unwrap()
    } else {
        return Err(Error::invalid(format!("unsupported placeholder `%{}d` in `{}`", spec, pattern)));
    };
    Ok(format!("{}{:0w$}{}", &pattern[..start], index, &rest[end + 1..], w = width))
}

/// Loaded frames (values in `[0, 1]`, `(y, x, channel)` order) and their times.
pub fn load_sequence(manifest_path: impl AsRef<Path>) -> Result<(Vec<Image>, Vec<f64>)> {
    let manifest_path = manifest_path.as_ref();
    let m = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut frames = Vec::with_capacity(m.frames.len());
    for entry in &m.frames {
        let p = dir.join(&entry.file);
        if !p.exists() {
            return Err(Error::Decode {
                path: manifest_path.to_path_buf(),
                message: format!("frame `{}` does not exist ({})", entry.file, p.display()),
            });
        }
        let img = read_png(&p)?;
        if img.width != m.width || img.height != m.height {
            return Err(Error::Decode {
                path: p,
                message: format!("frame is {}x{}, manifest says {}x{}", img.width, img.height, m.width, m.height),
            });
        }
        frames.push(img);
    }
    Ok((frames, m.times()))
}

/// Writes each frame as an 8-bit PNG named by `pattern` plus a manifest;
/// returns the manifest path.
pub fn write_sequence(frames: &[Image], times: &[f64], out_dir: impl AsRef<Path>, pattern: &str) -> Result<PathBuf> {
    write_sequence_named(frames, times, out_dir, pattern, MANIFEST_NAME)
}

pub fn write_sequence_named(
    frames: &[Image],
    times: &[f64],
    out_dir: impl AsRef<Path>,
    pattern: &str,
    manifest_name: &str,
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    if frames.is_empty() {
        return Err(Error::invalid("no frames to write"));
    }
    if frames.len() != times.len() {
        return Err(Error::invalid(format!("{} frames but {} times", frames.len(), times.len())));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(Error::invalid("frames differ in size"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(frames.len());
    for (i, (frame, &time)) in frames.iter().zip(times).enumerate() {
        let file = format_pattern(pattern, i)?;
        write_png(out_dir.join(&file), frame)?;
        entries.push(FrameEntry { file, time });
    }
    let manifest = Manifest { frames: entries, width: w, height: h, color_space: COLOR_SPACE.into() };
    let path = out_dir.join(manifest_name);
    manifest.validate(&path)?;
    write_manifest(&path, &manifest)?;
    Ok(path)
}
