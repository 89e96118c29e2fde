//! Synthetic video corpus: single geometric objects moving over procedural
//! backgrounds, with analytic per-frame depth, exact masks, integer-pixel
//! correspondence, deterministic restyle transforms, and the triplet
//! sampler used for propagation training.
//!
//! Rendering is hard-edged and pixel-locked: a pixel belongs to the object
//! iff its center satisfies the silhouette predicate for the object's
//! integer position, so warping by the stored displacement reproduces the
//! next frame's object region exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::Frame;
use crate::error::{Error, Result};
use crate::rng::{indexed_stream, StreamRng};
use crate::tensor::Tensor;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

// ── masks ────────────────────────────────────────────────────────────

/// Binary object mask.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.h, self.w, self.count())
    }
}

impl Mask {
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.bits.iter().zip(other.bits.iter()) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

// ── scene specification ─────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Disk,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Trajectory {
    Linear { vx: i32, vy: i32 },
    Circular { radius: f64, step_deg: f64, phase_deg: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundStyle {
    GradientH,
    GradientV,
    Plaid,
    Rings,
}

pub const BACKGROUND_STYLE_COUNT: usize = 4;

impl BackgroundStyle {
    pub fn index(self) -> usize {
        match self {
            BackgroundStyle::GradientH => 0,
            BackgroundStyle::GradientV => 1,
            BackgroundStyle::Plaid => 2,
            BackgroundStyle::Rings => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub style: BackgroundStyle,
    pub color_a: [f32; 3],
    pub color_b: [f32; 3],
    pub freq: f32,
    pub phase: f32,
    pub depth: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: ObjectShape,
    pub color: [f32; 3],
    /// Disk radius / half-extent in pixels.
    pub size: i32,
    /// Object center at frame 0.
    pub start: (i32, i32),
    pub trajectory: Trajectory,
    pub object_depth: f32,
    pub background: BackgroundSpec,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl SceneSpec {
    /// Integer object-center positions for every frame.
    pub fn positions(&self) -> Vec<(i32, i32)> {
        match self.trajectory {
            Trajectory::Linear { vx, vy } => (0..self.frames)
                .map(|k| (self.start.0 + vx * k as i32, self.start.1 + vy * k as i32))
                .collect(),
            Trajectory::Circular {
                radius,
                step_deg,
                phase_deg,
            } => {
                let point = |k: usize| {
                    let a = (phase_deg + step_deg * k as f64).to_radians();
                    (
                        (radius * a.cos()).round() as i32,
                        (radius * a.sin()).round() as i32,
                    )
                };
                let anchor = point(0);
                (0..self.frames)
                    .map(|k| {
                        let p = point(k);
                        (self.start.0 + p.0 - anchor.0, self.start.1 + p.1 - anchor.1)
                    })
                    .collect()
            }
        }
    }

    fn in_silhouette(&self, x: i32, y: i32, cx: i32, cy: i32) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        let s = self.size;
        match self.shape {
            ObjectShape::Disk => dx * dx + dy * dy <= s * s,
            ObjectShape::Square => dx.abs() <= s && dy.abs() <= s,
            // Apex up: row span widens linearly from the apex to the base.
            ObjectShape::Triangle => dy >= -s && dy <= s && 2 * dx.abs() <= dy + s,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::contract("scene needs at least one frame"));
        }
        if self.size < 2 {
            return Err(Error::contract("object size must be at least 2 px"));
        }
        for (k, (cx, cy)) in self.positions().iter().enumerate() {
            if cx - self.size < 0
                || cy - self.size < 0
                || cx + self.size >= self.width as i32
                || cy + self.size >= self.height as i32
            {
                return Err(Error::contract(format!(
                    "trajectory leaves frame at index {k} (center {cx},{cy}, size {})",
                    self.size
                )));
            }
        }
        Ok(())
    }

    pub fn background_pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let bg = &self.background;
        let (h, w) = (self.height as f32, self.width as f32);
        let t = match bg.style {
            BackgroundStyle::GradientH => x as f32 / (w - 1.0),
            BackgroundStyle::GradientV => y as f32 / (h - 1.0),
            BackgroundStyle::Plaid => {
                let fx = (std::f32::consts::TAU * bg.freq * x as f32 / w + bg.phase).sin();
                let fy = (std::f32::consts::TAU * bg.freq * y as f32 / h + bg.phase).sin();
                0.5 + 0.5 * fx * fy
            }
            BackgroundStyle::Rings => {
                let dx = x as f32 - w / 2.0;
                let dy = y as f32 - h / 2.0;
                let r = (dx * dx + dy * dy).sqrt();
                0.5 + 0.5 * (std::f32::consts::TAU * bg.freq * r / w + bg.phase).sin()
            }
        };
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            out[c] = (bg.color_a[c] + t * (bg.color_b[c] - bg.color_a[c])).clamp(-1.0, 1.0);
        }
        out
    }
}

// ── clips ────────────────────────────────────────────────────────────

#[derive(Clone)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    /// Depth maps [1, h, w] in [0, 1], near = 1.
    pub depths: Vec<Tensor>,
    pub masks: Vec<Mask>,
    /// Object displacement from frame k to k+1 (length K-1).
    pub correspondence: Vec<(i32, i32)>,
    pub spec: SceneSpec,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn render_clip(spec: &SceneSpec) -> Result<VideoClip> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let positions = spec.positions();
    let mut frames = Vec::with_capacity(spec.frames);
    let mut depths = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for &(cx, cy) in &positions {
        let mut fdata = vec![0.0f32; 3 * h * w];
        let mut ddata = vec![0.0f32; h * w];
        let mut bits = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let inside = spec.in_silhouette(x as i32, y as i32, cx, cy);
                let px = if inside {
                    spec.color
                } else {
                    spec.background_pixel(y, x)
                };
                for c in 0..3 {
                    fdata[c * h * w + y * w + x] = px[c];
                }
                ddata[y * w + x] = if inside {
                    spec.object_depth
                } else {
                    spec.background.depth
                };
                bits[y * w + x] = inside;
            }
        }
        frames.push(Frame::new(Tensor::new(&[3, h, w], fdata)?)?);
        depths.push(Tensor::new(&[1, h, w], ddata)?);
        masks.push(Mask { h, w, bits });
    }
    let correspondence = positions
        .windows(2)
        .map(|p| (p[1].0 - p[0].0, p[1].1 - p[0].1))
        .collect();
    Ok(VideoClip {
        frames,
        depths,
        masks,
        correspondence,
        spec: spec.clone(),
    })
}

/// Re-derive silhouettes/depths from the spec and check every stored frame
/// against them; also checks the exact-warp property on the object region.
pub fn verify_clip(clip: &VideoClip) -> Result<()> {
    let spec = &clip.spec;
    let (h, w) = (spec.height, spec.width);
    let positions = spec.positions();
    if clip.frames.len() != spec.frames || clip.correspondence.len() + 1 != spec.frames.max(1) {
        return Err(Error::contract("clip length disagrees with its spec"));
    }
    for (k, &(cx, cy)) in positions.iter().enumerate() {
        let mask = &clip.masks[k];
        let depth = clip.depths[k].data();
        for y in 0..h {
            for x in 0..w {
                let inside = spec.in_silhouette(x as i32, y as i32, cx, cy);
                if mask.get(y, x) != inside {
                    return Err(Error::contract(format!(
                        "mask mismatch at frame {k}, pixel ({y},{x})"
                    )));
                }
                let expect = if inside {
                    spec.object_depth
                } else {
                    spec.background.depth
                };
                if (depth[y * w + x] - expect).abs() > 1e-6 {
                    return Err(Error::contract(format!(
                        "depth mismatch at frame {k}, pixel ({y},{x})"
                    )));
                }
            }
        }
    }
    // Exact warp: the object region of frame k, displaced by the stored
    // correspondence, reproduces frame k+1's object region.
    for k in 0..clip.len().saturating_sub(1) {
        let (dx, dy) = clip.correspondence[k];
        let (fa, fb) = (&clip.frames[k], &clip.frames[k + 1]);
        for y in 0..h {
            for x in 0..w {
                if clip.masks[k].get(y, x) {
                    let (nx, ny) = (x as i32 + dx, y as i32 + dy);
                    if !clip.masks[k + 1].get(ny as usize, nx as usize) {
                        return Err(Error::contract(format!(
                            "warped object pixel leaves mask at frame {k}"
                        )));
                    }
                    let a = fa.pixel(y, x);
                    let b = fb.pixel(ny as usize, nx as usize);
                    if a != b {
                        return Err(Error::contract(format!(
                            "warped pixel mismatch at frame {k}, ({y},{x})"
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

// ── restyle transforms ──────────────────────────────────────────────

/// Deterministic appearance transforms shared by the reference editor and
/// the ground-truth restyler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleId {
    Identity,
    Hue90,
    Hue180,
    SwapRb,
    Invert,
    Stripes,
}

impl StyleId {
    pub const ALL: [StyleId; 6] = [
        StyleId::Identity,
        StyleId::Hue90,
        StyleId::Hue180,
        StyleId::SwapRb,
        StyleId::Invert,
        StyleId::Stripes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StyleId::Identity => "identity",
            StyleId::Hue90 => "hue90",
            StyleId::Hue180 => "hue180",
            StyleId::SwapRb => "swap_rb",
            StyleId::Invert => "invert",
            StyleId::Stripes => "stripes",
        }
    }

    pub fn parse(s: &str) -> Result<StyleId> {
        StyleId::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown style id: {s}")))
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / d).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r1 + m, g1 + m, b1 + m)
}

fn rotate_hue(px: [f32; 3], degrees: f32) -> [f32; 3] {
    // Work in [0, 1]; hue rotation preserves value and saturation so the
    // result never leaves the gamut.
    let r = (px[0] + 1.0) / 2.0;
    let g = (px[1] + 1.0) / 2.0;
    let b = (px[2] + 1.0) / 2.0;
    let (h, s, v) = rgb_to_hsv(r, g, b);
    let (r2, g2, b2) = hsv_to_rgb((h + degrees).rem_euclid(360.0), s, v);
    [r2 * 2.0 - 1.0, g2 * 2.0 - 1.0, b2 * 2.0 - 1.0]
}

/// Apply a style to one pixel at a given position.
pub fn restyle_pixel(style: StyleId, px: [f32; 3], y: usize, x: usize) -> [f32; 3] {
    match style {
        StyleId::Identity => px,
        StyleId::Hue90 => rotate_hue(px, 90.0),
        StyleId::Hue180 => rotate_hue(px, 180.0),
        StyleId::SwapRb => [px[2], px[1], px[0]],
        StyleId::Invert => [-px[0], -px[1], -px[2]],
        StyleId::Stripes => {
            let band = ((x + y) / 6) % 2 == 0;
            let overlay = if band {
                [0.9, 0.9, -0.9]
            } else {
                [-0.9, -0.9, 0.9]
            };
            [
                0.75 * px[0] + 0.25 * overlay[0],
                0.75 * px[1] + 0.25 * overlay[1],
                0.75 * px[2] + 0.25 * overlay[2],
            ]
        }
    }
}

pub fn restyle_frame(frame: &Frame, style: StyleId) -> Result<Frame> {
    if style == StyleId::Identity {
        return Ok(frame.clone());
    }
    let (h, w) = (frame.height(), frame.width());
    Frame::from_fn(h, w, |y, x| restyle_pixel(style, frame.pixel(y, x), y, x))
}

/// Same geometry, depths, masks and correspondence; appearance transformed
/// consistently across all frames. This is the ground-truth edited video.
pub fn restyle_clip(clip: &VideoClip, style: StyleId) -> Result<VideoClip> {
    if style == StyleId::Identity {
        return Ok(clip.clone());
    }
    let frames = clip
        .frames
        .iter()
        .map(|f| restyle_frame(f, style))
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoClip {
        frames,
        depths: clip.depths.clone(),
        masks: clip.masks.clone(),
        correspondence: clip.correspondence.clone(),
        spec: clip.spec.clone(),
    })
}

// ── triplet sampling ────────────────────────────────────────────────

/// One supervised propagation example: reference (with latent), previous
/// frame (with latent and depth), and target frame (with depth), all drawn
/// from the restyled variant of one clip.
pub struct TrainingTriplet {
    pub reference: Frame,
    pub reference_latent: Tensor,
    pub previous: Frame,
    pub previous_latent: Tensor,
    pub previous_depth: Tensor,
    pub target: Frame,
    pub target_depth: Tensor,
    pub reference_index: usize,
    pub target_index: usize,
    /// Whether the reference came from the restyled variant.
    pub style_paired: bool,
}

/// Index triple drawn by [`sample_triplet`]; exposed so trainers can apply
/// the same distribution without materializing whole restyled clips.
#[derive(Clone, Copy, Debug)]
pub struct TripletIndices {
    pub reference: usize,
    pub previous: usize,
    pub target: usize,
}

/// Target uniform over 1..K, previous = target-1 (the inference recurrence
/// is strictly adjacent), reference uniform over all frames.
pub fn sample_triplet_indices(k: usize, rng: &mut StreamRng) -> Result<TripletIndices> {
    if k < 2 {
        return Err(Error::contract(format!(
            "triplet sampling needs at least 2 frames, got {k}"
        )));
    }
    let target = 1 + rng.uniform_usize(k - 1);
    Ok(TripletIndices {
        reference: rng.uniform_usize(k),
        previous: target - 1,
        target,
    })
}

/// Draw a triplet from the restyled variant of a clip. `encode` maps
/// (frame, frame index) to its latent so callers can cache.
pub fn sample_triplet(
    original: &VideoClip,
    restyled: &VideoClip,
    rng: &mut StreamRng,
    mut encode: impl FnMut(&Frame, usize) -> Result<Tensor>,
) -> Result<TrainingTriplet> {
    let k = original.len();
    if restyled.len() != k {
        return Err(Error::ShapeMismatch {
            op: "sample_triplet",
            lhs: vec![k],
            rhs: vec![restyled.len()],
        });
    }
    let idx = sample_triplet_indices(k, rng)?;
    let (target, previous, reference) = (idx.target, idx.previous, idx.reference);
    Ok(TrainingTriplet {
        reference: restyled.frames[reference].clone(),
        reference_latent: encode(&restyled.frames[reference], reference)?,
        previous: restyled.frames[previous].clone(),
        previous_latent: encode(&restyled.frames[previous], previous)?,
        previous_depth: restyled.depths[previous].clone(),
        target: restyled.frames[target].clone(),
        target_depth: restyled.depths[target].clone(),
        reference_index: reference,
        target_index: target,
        style_paired: true,
    })
}

// ── random scene generation ─────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_clips: usize,
    pub frames_per_clip: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_clips: 500,
            frames_per_clip: 16,
            height: 64,
            width: 64,
        }
    }
}

/// Object color families used by the reference-encoder classification task.
pub const COLOR_FAMILIES: [( &str, [f32; 3]); 6] = [
    ("red", [0.85, -0.55, -0.55]),
    ("green", [-0.55, 0.8, -0.45]),
    ("blue", [-0.55, -0.45, 0.85]),
    ("yellow", [0.8, 0.75, -0.6]),
    ("magenta", [0.8, -0.55, 0.8]),
    ("cyan", [-0.55, 0.75, 0.8]),
];

/// Nearest color family of a pixel; used both to label scenes and to label
/// restyled variants (a hue rotation changes the family).
pub fn color_family_of(px: [f32; 3]) -> usize {
    let mut best = 0usize;
    let mut best_d = f32::INFINITY;
    for (i, (_, c)) in COLOR_FAMILIES.iter().enumerate() {
        let d: f32 = (0..3).map(|j| (px[j] - c[j]) * (px[j] - c[j])).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    (0..3).map(|j| (a[j] - b[j]) * (a[j] - b[j])).sum::<f32>().sqrt()
}

/// Draw a valid scene: object fully in frame for all K frames, object color
/// well separated from the background palette.
pub fn random_spec(cfg: &CorpusConfig, seed: u64, clip_index: u64) -> Result<SceneSpec> {
    let mut rng = StreamRng::new(seed, indexed_stream("scene", clip_index));
    let k = cfg.frames_per_clip;
    for _attempt in 0..200 {
        let shape = match rng.uniform_usize(3) {
            0 => ObjectShape::Disk,
            1 => ObjectShape::Square,
            _ => ObjectShape::Triangle,
        };
        let family = rng.uniform_usize(COLOR_FAMILIES.len());
        let base = COLOR_FAMILIES[family].1;
        let mut color = [0.0f32; 3];
        for c in 0..3 {
            color[c] = (base[c] + rng.uniform(-0.08, 0.08)).clamp(-0.95, 0.95);
        }
        let bg_style = match rng.uniform_usize(BACKGROUND_STYLE_COUNT) {
            0 => BackgroundStyle::GradientH,
            1 => BackgroundStyle::GradientV,
            2 => BackgroundStyle::Plaid,
            _ => BackgroundStyle::Rings,
        };
        let mut color_a = [0.0f32; 3];
        let mut color_b = [0.0f32; 3];
        for c in 0..3 {
            color_a[c] = rng.uniform(-0.6, 0.2);
            color_b[c] = rng.uniform(-0.2, 0.6);
        }
        if color_distance(color, color_a) < 0.8 || color_distance(color, color_b) < 0.8 {
            continue;
        }
        let background = BackgroundSpec {
            style: bg_style,
            color_a,
            color_b,
            freq: rng.uniform(1.0, 3.0),
            phase: rng.uniform(0.0, std::f32::consts::TAU),
            depth: rng.uniform(0.05, 0.3),
        };
        let size = rng.uniform_i32(7, 11);
        let trajectory = if k > 20 || rng.uniform(0.0, 1.0) < 0.3 {
            Trajectory::Circular {
                radius: rng.uniform(6.0, 12.0) as f64,
                step_deg: rng.uniform_i32(10, 24) as f64 * if rng.uniform(0.0, 1.0) < 0.5 { 1.0 } else { -1.0 },
                phase_deg: rng.uniform_i32(0, 359) as f64,
            }
        } else {
            let mut vx = rng.uniform_i32(-3, 3);
            let mut vy = rng.uniform_i32(-3, 3);
            if vx == 0 && vy == 0 {
                vx = 2;
                vy = 1;
            }
            Trajectory::Linear { vx, vy }
        };
        // Start position leaving room for the whole trajectory.
        let margin = size + 2;
        let start = (
            rng.uniform_i32(margin, cfg.width as i32 - 1 - margin),
            rng.uniform_i32(margin, cfg.height as i32 - 1 - margin),
        );
        let spec = SceneSpec {
            shape,
            color,
            size,
            start,
            trajectory,
            object_depth: rng.uniform(0.6, 0.95),
            background,
            frames: k,
            height: cfg.height,
            width: cfg.width,
            seed: indexed_stream("scene", clip_index) ^ seed,
        };
        if spec.validate().is_ok() {
            return Ok(spec);
        }
    }
    Err(Error::contract(
        "could not draw an in-frame trajectory after 200 attempts",
    ))
}

// ── corpus on disk ──────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipMeta {
    pub format_version: u32,
    pub spec: SceneSpec,
    pub correspondence: Vec<(i32, i32)>,
}

pub fn frame_to_rgb8(frame: &Frame) -> Vec<u8> {
    let (h, w) = (frame.height(), frame.width());
    let d = frame.tensor().data();
    let mut out = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[c * h * w + y * w + x];
                out[(y * w + x) * 3 + c] = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

pub fn rgb8_to_frame(h: usize, w: usize, rgb: &[u8]) -> Result<Frame> {
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let p = rgb[(y * w + x) * 3 + c] as f32;
                data[c * h * w + y * w + x] = (p / 127.5 - 1.0).clamp(-1.0, 1.0);
            }
        }
    }
    Frame::new(Tensor::new(&[3, h, w], data)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn save_frame_png(path: &Path, frame: &Frame) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let img = image::RgbImage::from_raw(w as u32, h as u32, frame_to_rgb8(frame))
        .expect("buffer sized from frame");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_frame_png(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    rgb8_to_frame(img.height() as usize, img.width() as usize, img.as_raw())
}

/// 16-bit binary PGM (P5, maxval 65535, big-endian samples per the netpbm
/// convention).
fn save_depth_pgm(path: &Path, depth: &Tensor) -> Result<()> {
    let (h, w) = match *depth.shape() {
        [1, h, w] => (h, w),
        _ => return Err(Error::contract("depth must be [1, h, w]")),
    };
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in depth.data() {
        let q = (v as f64 * 65535.0).round().clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    write_file(path, &bytes)
}

fn load_depth_pgm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let header_err = || Error::contract(format!("bad PGM header in {}", path.display()));
    // P5\n<w> <h>\n65535\n then raw big-endian u16s.
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err())?);
    }
    pos += 1; // single whitespace after maxval
    if fields.len() != 4 || fields[0] != "P5" || fields[3] != "65535" {
        return Err(header_err());
    }
    let w: usize = fields[1].parse().map_err(|_| header_err())?;
    let h: usize = fields[2].parse().map_err(|_| header_err())?;
    if bytes.len() < pos + 2 * h * w {
        return Err(Error::contract(format!("truncated PGM {}", path.display())));
    }
    let data: Vec<f32> = bytes[pos..pos + 2 * h * w]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
        .collect();
    Tensor::new(&[1, h, w], data)
}

fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let pixels: Vec<u8> = mask.bits.iter().map(|&b| if b { 255u8 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.w as u32, mask.h as u32, pixels)
        .expect("buffer sized from mask");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    Ok(Mask {
        h: img.height() as usize,
        w: img.width() as usize,
        bits: img.as_raw().iter().map(|&p| p >= 128).collect(),
    })
}

pub fn clip_dir_name(index: usize) -> String {
    format!("clip_{index:04}")
}

/// Write one clip in the corpus layout.
pub fn save_clip(dir: &Path, clip: &VideoClip) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, frame) in clip.frames.iter().enumerate() {
        save_frame_png(&dir.join(format!("frame_{k:04}.png")), frame)?;
        save_depth_pgm(&dir.join(format!("depth_{k:04}.pgm")), &clip.depths[k])?;
        save_mask_png(&dir.join(format!("mask_{k:04}.png")), &clip.masks[k])?;
    }
    let meta = ClipMeta {
        format_version: CORPUS_FORMAT_VERSION,
        spec: clip.spec.clone(),
        correspondence: clip.correspondence.clone(),
    };
    write_file(&dir.join("meta.json"), &serde_json::to_vec_pretty(&meta)?)
}

pub fn load_clip(dir: &Path) -> Result<VideoClip> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: ClipMeta = serde_json::from_slice(&meta_bytes)?;
    if meta.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::contract(format!(
            "unsupported corpus format version {}",
            meta.format_version
        )));
    }
    let k = meta.spec.frames;
    let mut frames = Vec::with_capacity(k);
    let mut depths = Vec::with_capacity(k);
    let mut masks = Vec::with_capacity(k);
    for i in 0..k {
        frames.push(load_frame_png(&dir.join(format!("frame_{i:04}.png")))?);
        depths.push(load_depth_pgm(&dir.join(format!("depth_{i:04}.pgm")))?);
        masks.push(load_mask_png(&dir.join(format!("mask_{i:04}.png")))?);
    }
    Ok(VideoClip {
        frames,
        depths,
        masks,
        correspondence: meta.correspondence,
        spec: meta.spec,
    })
}

#[derive(Debug, Clone)]
pub struct CorpusSummary {
    pub num_clips: usize,
    pub files_written: usize,
}

/// Generate and write the whole corpus, deterministic from the seed.
pub fn build_corpus(root: &Path, cfg: &CorpusConfig, seed: u64) -> Result<CorpusSummary> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut files = 0usize;
    for i in 0..cfg.num_clips {
        let spec = random_spec(cfg, seed, i as u64)?;
        let clip = render_clip(&spec)?;
        verify_clip(&clip)?;
        save_clip(&root.join(clip_dir_name(i)), &clip)?;
        files += 3 * clip.len() + 1;
    }
    Ok(CorpusSummary {
        num_clips: cfg.num_clips,
        files_written: files,
    })
}

/// Clip directories under a corpus root, in index order.
pub fn list_clips(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("clip_")))
        .collect();
    dirs.sort();
    Ok(dirs)
}
