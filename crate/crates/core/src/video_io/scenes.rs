use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

use super::{format_pattern, write_mask, write_sequence, DEFAULT_PATTERN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// A textured square sliding right over a textured background.
    LinearSquare,
    /// Two squares in separate horizontal bands sliding in opposite directions.
    TwoMovers,
    /// A disk carrying the patch of background it covers in the first frame,
    /// so it is visible only through its motion.
    Camouflage,
}

impl SceneKind {
    pub const ALL: [SceneKind; 3] = [SceneKind::LinearSquare, SceneKind::TwoMovers, SceneKind::Camouflage];

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::LinearSquare => "linear_square",
            SceneKind::TwoMovers => "two_movers",
            SceneKind::Camouflage => "camouflage",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scene `{}` (valid: {})", s, Self::valid_names())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// Square side or disk diameter, in pixels.
    pub object_size: f64,
    /// Horizontal displacement per frame interval, in pixels.
    pub speed: f64,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub kind: SceneKind,
    pub params: SceneParams,
}

impl SyntheticScene {
    /// Object a quarter of the shorter side, 2 px per frame.
    pub fn new(kind: SceneKind, resolution: (usize, usize), texture_seed: u64) -> Self {
        let size = (resolution.0.min(resolution.1) / 4).max(1) as f64;
        Self { kind, params: SceneParams { object_size: size, speed: 2.0, texture_seed } }
    }
}

/// Training frames at times `0, 1, …, n−1`, held-out frames between them,
/// and per-pixel object ids for both (0 is background).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub scene: SyntheticScene,
    pub frames: Vec<Image>,
    pub times: Vec<f64>,
    pub masks: Vec<Vec<u8>>,
    pub held_out: Vec<Image>,
    pub held_out_times: Vec<f64>,
    pub held_out_masks: Vec<Vec<u8>>,
}

/// Held-out times: the midpoint of every other gap starting with the second
/// (`1.5, 3.5, …`), or the single midpoint when there are only two frames.
pub fn held_out_times(num_frames: usize) -> Vec<f64> {
    if num_frames == 2 {
        return vec![0.5];
    }
    (1..num_frames.saturating_sub(1)).step_by(2).map(|k| k as f64 + 0.5).collect()
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Smooth value noise: random colours on a square lattice, blended with a
/// smoothstep-weighted bilinear interpolation.
#[derive(Debug, Clone, Copy)]
struct Texture {
    seed: u64,
    cell: f64,
    lo: f64,
    hi: f64,
}

impl Texture {
    fn lattice(&self, ix: i64, iy: i64, c: usize) -> f64 {
        let h = splitmix(self.seed ^ splitmix((ix as u64).wrapping_mul(0x1000_0193) ^ splitmix(iy as u64 ^ ((c as u64) << 40))));
        self.lo + (self.hi - self.lo) * ((h >> 11) as f64 / (1u64 << 53) as f64)
    }

    fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (gx.floor(), gy.floor());
        let s = |f: f64| f * f * (3.0 - 2.0 * f);
        let (fx, fy) = (s(gx - ix), s(gy - iy));
        let (ix, iy) = (ix as i64, iy as i64);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = self.lattice(ix, iy, c) * (1.0 - fx) + self.lattice(ix + 1, iy, c) * fx;
            let bottom = self.lattice(ix, iy + 1, c) * (1.0 - fx) + self.lattice(ix + 1, iy + 1, c) * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Square,
    Disk,
}

#[derive(Debug, Clone, Copy)]
struct Mover {
    id: u8,
    shape: Shape,
    size: f64,
    /// Top-left corner at time 0.
    origin: (f64, f64),
    velocity: f64,
    texture: Texture,
    /// Texture-space offset of the object's top-left corner.
    texture_offset: (f64, f64),
}

impl Mover {
    fn corner(&self, t: f64) -> (f64, f64) {
        (self.origin.0 + self.velocity * t, self.origin.1)
    }

    fn covers(&self, t: f64, x: f64, y: f64) -> Option<(f64, f64)> {
        let (px, py) = self.corner(t);
        let (lx, ly) = (x - px, y - py);
        let inside = match self.shape {
            Shape::Square => (0.0..self.size).contains(&lx) && (0.0..self.size).contains(&ly),
            Shape::Disk => {
                let r = self.size / 2.0;
                (lx - r).powi(2) + (ly - r).powi(2) < r * r
            }
        };
        inside.then_some((lx, ly))
    }
}

struct Layout {
    background: Texture,
    movers: Vec<Mover>,
}

fn layout(scene: &SyntheticScene, num_frames: usize, w: usize, h: usize) -> Layout {
    let SceneParams { object_size: s, speed, texture_seed } = scene.params;
    let (w, h) = (w as f64, h as f64);
    let seed = splitmix(texture_seed);
    let background = Texture { seed, cell: 8.0, lo: 0.1, hi: 0.9 };
    let object_texture = |k: u64| Texture { seed: splitmix(seed ^ (k + 1)), cell: 6.0, lo: 0.05, hi: 0.95 };
    let travel = speed * (num_frames - 1) as f64;
    let x0 = ((w - s - travel) / 2.0).round();
    let centered = ((h - s) / 2.0).round();
    let movers = match scene.kind {
        SceneKind::LinearSquare => vec![Mover {
            id: 1,
            shape: Shape::Square,
            size: s,
            origin: (x0, centered),
            velocity: speed,
            texture: object_texture(0),
            texture_offset: (0.0, 0.0),
        }],
        SceneKind::TwoMovers => vec![
            Mover {
                id: 1,
                shape: Shape::Square,
                size: s,
                origin: (x0, (h / 4.0 - s / 2.0).round()),
                velocity: speed,
                texture: object_texture(0),
                texture_offset: (0.0, 0.0),
            },
            Mover {
                id: 2,
                shape: Shape::Square,
                size: s,
                origin: (w - s - x0, (3.0 * h / 4.0 - s / 2.0).round()),
                velocity: -speed,
                texture: object_texture(1),
                texture_offset: (0.0, 0.0),
            },
        ],
        SceneKind::Camouflage => vec![Mover {
            id: 1,
            shape: Shape::Disk,
            size: s,
            origin: (x0, centered),
            velocity: speed,
            texture: background,
            // The patch it covers in the first frame, where it is invisible.
            texture_offset: (x0, centered),
        }],
    };
    Layout { background, movers }
}

fn render(layout: &Layout, t: f64, w: usize, h: usize) -> (Image, Vec<u8>) {
    let mut img = Image::filled(w, h, 0.0);
    let mut mask = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut rgb = layout.background.sample(cx, cy);
            for m in &layout.movers {
                if let Some((lx, ly)) = m.covers(t, cx, cy) {
                    rgb = m.texture.sample(lx + m.texture_offset.0, ly + m.texture_offset.1);
                    mask[y * w + x] = m.id;
                }
            }
            img.set_pixel(x, y, rgb);
        }
    }
    (img, mask)
}

pub fn generate_scene(scene: &SyntheticScene, num_frames: usize, resolution: (usize, usize)) -> Result<GeneratedScene> {
    let (w, h) = resolution;
    if num_frames < 2 {
        return Err(Error::invalid(format!("a scene needs at least 2 frames, got {}", num_frames)));
    }
    if w == 0 || h == 0 {
        return Err(Error::invalid("resolution must be positive"));
    }
    let p = scene.params;
    if !(p.object_size > 0.0 && p.object_size.is_finite() && p.speed.is_finite()) {
        return Err(Error::invalid("object size must be positive and speed finite"));
    }
    let lay = layout(scene, num_frames, w, h);
    let times: Vec<f64> = (0..num_frames).map(|k| k as f64).collect();
    let held_out_times = held_out_times(num_frames);
    let (frames, masks) = times.iter().map(|&t| render(&lay, t, w, h)).unzip();
    let (held_out, held_out_masks) = held_out_times.iter().map(|&t| render(&lay, t, w, h)).unzip();
    Ok(GeneratedScene { scene: *scene, frames, times, masks, held_out, held_out_times, held_out_masks })
}

impl GeneratedScene {
    /// Writes `train/` and `held_out/` under `out_dir`, each with frames,
    /// `manifest.json` and `mask_%05d.png`, plus `scene.json`. Returns the two
    /// manifest paths.
    pub fn write(&self, out_dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let out_dir = out_dir.as_ref();
        let mut paths = Vec::new();
        for (sub, frames, times, masks) in [
            ("train", &self.frames, &self.times, &self.masks),
            ("held_out", &self.held_out, &self.held_out_times, &self.held_out_masks),
        ] {
            let dir = out_dir.join(sub);
            paths.push(write_sequence(frames, times, &dir, DEFAULT_PATTERN)?);
            for (i, m) in masks.iter().enumerate() {
                write_mask(dir.join(format_pattern("mask_%05d.png", i)?), frames[0].width, frames[0].height, m)?;
            }
        }
        let info = serde_json::json!({
            "scene": self.scene.kind,
            "params": self.scene.params,
            "num_frames": self.frames.len(),
            "width": self.frames[0].width,
            "height": self.frames[0].height,
        });
        let path = out_dir.join("scene.json");
        std::fs::write(&path, serde_json::to_string_pretty(&info)? + "\n").map_err(|e| Error::io(&path, e))?;
        let held = paths.pop().unwrap();
        Ok((paths.pop().unwrap(), held))
    }
}
