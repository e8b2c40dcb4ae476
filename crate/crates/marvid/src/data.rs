//! Procedural video scenes and the deterministic pixel/latent codec.
//!
//! Scenes are grayscale shapes bouncing elastically inside the frame.
//! Positions are evaluated in closed form (a folded linear trajectory), so a
//! frame's pixels are a pure function of the scene spec and the frame index;
//! no integration drift, no hidden state.
//!
//! The codec replaces a learned autoencoder with two fixed maps:
//! * high-res path: lossless space-to-depth patchification, exactly
//!   invertible bit for bit;
//! * low-res path: area-average downsampling followed by the same
//!   patchification, used by the planner.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Spatial and temporal dimensions of one model configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub frames: usize,
    pub high_px: usize,
    pub low_px: usize,
    pub patch: usize,
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        let g = *self;
        if g.frames == 0 {
            return Err(Error::Geometry("frame count must be positive".into()));
        }
        if g.patch == 0 || g.high_px == 0 || g.low_px == 0 {
            return Err(Error::Geometry(format!("degenerate geometry {g:?}")));
        }
        if g.high_px % g.patch != 0 || g.low_px % g.patch != 0 {
            return Err(Error::Geometry(format!(
                "patch {} must divide both resolutions {}/{}",
                g.patch, g.high_px, g.low_px
            )));
        }
        if g.high_px % g.low_px != 0 {
            return Err(Error::Geometry(format!(
                "low resolution {} must divide high resolution {}",
                g.low_px, g.high_px
            )));
        }
        if g.high_px == g.low_px {
            return Err(Error::Geometry(
                "high and low resolutions must differ; the planner path is the coarse one".into(),
            ));
        }
        Ok(())
    }

    pub fn factor(&self) -> usize {
        self.high_px / self.low_px
    }

    pub fn high_rows(&self) -> usize {
        self.high_px / self.patch
    }

    pub fn low_rows(&self) -> usize {
        self.low_px / self.patch
    }

    pub fn high_tokens(&self) -> usize {
        self.high_rows() * self.high_rows()
    }

    pub fn low_tokens(&self) -> usize {
        self.low_rows() * self.low_rows()
    }

    /// Channels of a patch token (grayscale pixels per patch).
    pub fn channels(&self) -> usize {
        self.patch * self.patch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ShapeKind {
    Disc,
    Square,
}

/// One moving shape; all quantities are fractions of the frame side, so a
/// spec renders consistently at any resolution.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MovingShape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub vx: f64,
    pub vy: f64,
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub shapes: Vec<MovingShape>,
}

/// Sampling ranges for random scenes, in frame-side fractions.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDistribution {
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        SceneDistribution {
            shapes_min: 1,
            shapes_max: 2,
            radius_min: 0.12,
            radius_max: 0.22,
            speed_min: 0.08,
            speed_max: 0.18,
            intensity_min: 0.55,
            intensity_max: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn sample(rng: &mut Rng, dist: &SceneDistribution) -> SceneSpec {
        let n = dist.shapes_min as u64
            + if dist.shapes_max > dist.shapes_min {
                rng.below((dist.shapes_max - dist.shapes_min + 1) as u64)
            } else {
                0
            };
        let shapes = (0..n)
            .map(|_| {
                let kind = if rng.coin(0.5) { ShapeKind::Disc } else { ShapeKind::Square };
                let radius = rng.uniform_in(dist.radius_min, dist.radius_max);
                let speed = rng.uniform_in(dist.speed_min, dist.speed_max);
                let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
                MovingShape {
                    kind,
                    cx: rng.uniform_in(radius, 1.0 - radius),
                    cy: rng.uniform_in(radius, 1.0 - radius),
                    vx: speed * angle.cos(),
                    vy: speed * angle.sin(),
                    radius,
                    intensity: rng.uniform_in(dist.intensity_min, dist.intensity_max),
                }
            })
            .collect();
        SceneSpec { shapes }
    }
}

/// Position after time `t` of a point moving at velocity `v` from `x0`,
/// reflecting elastically off walls at `lo` and `hi`. Closed form via a
/// triangle wave over the doubled span.
fn reflect(x0: f64, v: f64, t: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return (lo + hi) * 0.5;
    }
    let u = (x0 - lo + v * t).rem_euclid(2.0 * span);
    lo + if u < span { u } else { 2.0 * span - u }
}

/// Grayscale video, frames stored contiguously row-major in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub data: Vec<f32>,
}

impl Video {
    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[i * n..(i + 1) * n]
    }
}

/// Renders `frames` frames of `size` x `size` pixels, one time unit apart.
pub fn render_video(spec: &SceneSpec, size: usize, frames: usize) -> Video {
    let mut data = vec![0f32; frames * size * size];
    let px = 1.0 / size as f64;
    for f in 0..frames {
        let t = f as f64;
        let frame = &mut data[f * size * size..(f + 1) * size * size];
        for shape in &spec.shapes {
            let cx = reflect(shape.cx, shape.vx, t, shape.radius, 1.0 - shape.radius);
            let cy = reflect(shape.cy, shape.vy, t, shape.radius, 1.0 - shape.radius);
            // Bounding box in pixels, padded one pixel for the soft edge.
            let r = shape.radius;
            let x_lo = (((cx - r) / px).floor() as isize - 1).max(0) as usize;
            let x_hi = ((((cx + r) / px).ceil() as isize) + 1).min(size as isize) as usize;
            let y_lo = (((cy - r) / px).floor() as isize - 1).max(0) as usize;
            let y_hi = ((((cy + r) / px).ceil() as isize) + 1).min(size as isize) as usize;
            for y in y_lo..y_hi {
                let pyc = (y as f64 + 0.5) * px;
                for x in x_lo..x_hi {
                    let pxc = (x as f64 + 0.5) * px;
                    let d = match shape.kind {
                        ShapeKind::Disc => {
                            let dx = pxc - cx;
                            let dy = pyc - cy;
                            (dx * dx + dy * dy).sqrt()
                        }
                        ShapeKind::Square => (pxc - cx).abs().max((pyc - cy).abs()),
                    };
                    // Coverage ramps over one pixel around the boundary.
                    let cov = ((r - d) / px + 0.5).clamp(0.0, 1.0);
                    if cov > 0.0 {
                        let v = (shape.intensity * cov) as f32;
                        let cell = &mut frame[y * size + x];
                        if v > *cell {
                            *cell = v;
                        }
                    }
                }
            }
        }
    }
    Video {
        width: size,
        height: size,
        frames,
        data,
    }
}

/// Patch-token video: frames x (rows*cols) tokens x (patch*patch) channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl LatentVideo {
    pub fn tokens_per_frame(&self) -> usize {
        self.rows * self.cols
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Lossless space-to-depth: each patch of `patch` x `patch` pixels becomes
/// one token whose channels are the patch pixels in row-major order. Pure
/// data movement, hence exactly invertible.
pub fn encode_high(video: &Video, patch: usize) -> Result<LatentVideo> {
    if video.width % patch != 0 || video.height % patch != 0 {
        return Err(Error::Geometry(format!(
            "patch {} does not divide {}x{}",
            patch, video.width, video.height
        )));
    }
    let rows = video.height / patch;
    let cols = video.width / patch;
    let c = patch * patch;
    let mut data = Vec::with_capacity(video.frames * rows * cols * c);
    for f in 0..video.frames {
        let frame = video.frame(f);
        for r in 0..rows {
            for col in 0..cols {
                for py in 0..patch {
                    for px in 0..patch {
                        data.push(frame[(r * patch + py) * video.width + col * patch + px]);
                    }
                }
            }
        }
    }
    Ok(LatentVideo {
        frames: video.frames,
        rows,
        cols,
        channels: c,
        data,
    })
}

/// Exact inverse of `encode_high`.
pub fn decode_high(latents: &LatentVideo) -> Result<Video> {
    let patch = (latents.channels as f64).sqrt() as usize;
    if patch * patch != latents.channels {
        return Err(Error::Geometry(format!(
            "channel count {} is not a square patch",
            latents.channels
        )));
    }
    let width = latents.cols * patch;
    let height = latents.rows * patch;
    let mut data = vec![0f32; latents.frames * width * height];
    let per_frame = latents.rows * latents.cols * latents.channels;
    for f in 0..latents.frames {
        let toks = &latents.data[f * per_frame..(f + 1) * per_frame];
        let frame = &mut data[f * width * height..(f + 1) * width * height];
        for r in 0..latents.rows {
            for col in 0..latents.cols {
                let tok = &toks[(r * latents.cols + col) * latents.channels..][..latents.channels];
                for py in 0..patch {
                    for px in 0..patch {
                        frame[(r * patch + py) * width + col * patch + px] = tok[py * patch + px];
                    }
                }
            }
        }
    }
    Ok(Video {
        width,
        height,
        frames: latents.frames,
        data,
    })
}

/// Area-average downsampling by an integer factor.
pub fn downsample(video: &Video, factor: usize) -> Result<Video> {
    if factor == 0 || video.width % factor != 0 || video.height % factor != 0 {
        return Err(Error::Geometry(format!(
            "factor {} does not divide {}x{}",
            factor, video.width, video.height
        )));
    }
    let w = video.width / factor;
    let h = video.height / factor;
    let inv = 1.0 / (factor * factor) as f32;
    let mut data = vec![0f32; video.frames * w * h];
    for f in 0..video.frames {
        let src = video.frame(f);
        let dst = &mut data[f * w * h..(f + 1) * w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[(y * factor + dy) * video.width + x * factor + dx];
                    }
                }
                dst[y * w + x] = acc * inv;
            }
        }
    }
    Ok(Video {
        width: w,
        height: h,
        frames: video.frames,
        data,
    })
}

/// Planner-path encoding: downsample to the low resolution, then patchify.
pub fn encode_low(video: &Video, geometry: &Geometry) -> Result<LatentVideo> {
    if video.width != geometry.high_px || video.height != geometry.high_px {
        return Err(Error::Geometry(format!(
            "video {}x{} does not match geometry high_px {}",
            video.width, video.height, geometry.high_px
        )));
    }
    let small = downsample(video, geometry.factor())?;
    encode_high(&small, geometry.patch)
}

/// Affine map between pixel space [0,1] and the latent value range the
/// diffusion model operates in. Applied outside the lossless codec so the
/// codec itself stays exactly invertible.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatentScale {
    pub scale: f32,
    pub shift: f32,
}

impl Default for LatentScale {
    fn default() -> Self {
        // Pixels in [0,1] map to [-1,1].
        LatentScale {
            scale: 2.0,
            shift: -1.0,
        }
    }
}

impl LatentScale {
    pub fn apply(&self, x: &mut [f32]) {
        for v in x {
            *v = *v * self.scale + self.shift;
        }
    }

    pub fn invert(&self, x: &mut [f32]) {
        for v in x {
            *v = (*v - self.shift) / self.scale;
        }
    }
}

// P5 (binary) PGM frame I/O, 8-bit.

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!(
            "pgm buffer {} does not match {}x{}",
            pixels.len(),
            width,
            height
        )));
    }
    let mut out = Vec::with_capacity(width * height + 32);
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    out.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    // Magic, dimensions, maxval; comments are not supported by our writer
    // and are rejected on read.
    let mut fields = Vec::new();
    while fields.len() < 4 {
        header.clear();
        reader.read_line(&mut header)?;
        if header.is_empty() {
            return Err(Error::Parse(format!("{}: truncated pgm header", path.display())));
        }
        if header.starts_with('#') {
            return Err(Error::Parse(format!(
                "{}: pgm comments unsupported",
                path.display()
            )));
        }
        fields.extend(header.split_whitespace().map(str::to_owned));
    }
    if fields[0] != "P5" {
        return Err(Error::Parse(format!(
            "{}: expected binary pgm magic P5, got {}",
            path.display(),
            fields[0]
        )));
    }
    let width: usize = fields[1]
        .parse()
        .map_err(|_| Error::Parse(format!("{}: bad width", path.display())))?;
    let height: usize = fields[2]
        .parse()
        .map_err(|_| Error::Parse(format!("{}: bad height", path.display())))?;
    let maxval: usize = fields[3]
        .parse()
        .map_err(|_| Error::Parse(format!("{}: bad maxval", path.display())))?;
    if maxval != 255 {
        return Err(Error::Parse(format!(
            "{}: only maxval 255 supported, got {maxval}",
            path.display()
        )));
    }
    let mut buf = vec![0u8; width * height];
    reader.read_exact(&mut buf)?;
    Ok((
        width,
        height,
        buf.iter().map(|&b| b as f32 / 255.0).collect(),
    ))
}

/// Writes a video as numbered PGM frames under `dir`.
pub fn write_video_frames(dir: &Path, video: &Video) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(video.frames);
    for f in 0..video.frames {
        let path = dir.join(format!("frame_{f:04}.pgm"));
        write_pgm(&path, video.width, video.height, video.frame(f))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamId;

    fn demo_spec() -> SceneSpec {
        SceneSpec {
            shapes: vec![
                MovingShape {
                    kind: ShapeKind::Disc,
                    cx: 0.3,
                    cy: 0.4,
                    vx: 0.11,
                    vy: -0.07,
                    radius: 0.18,
                    intensity: 0.9,
                },
                MovingShape {
                    kind: ShapeKind::Square,
                    cx: 0.7,
                    cy: 0.6,
                    vx: -0.09,
                    vy: 0.13,
                    radius: 0.14,
                    intensity: 0.6,
                },
            ],
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = demo_spec();
        let a = render_video(&spec, 32, 5);
        let b = render_video(&spec, 32, 5);
        assert_eq!(a.data, b.data);
        assert!(a.data.iter().any(|&v| v > 0.5), "shapes must be visible");
        assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn reflection_stays_in_bounds_and_is_elastic() {
        // Walk a long trajectory; the folded position never leaves the box.
        for t in 0..200 {
            let x = reflect(0.5, 0.173, t as f64, 0.1, 0.9);
            assert!((0.1..=0.9).contains(&x), "t={t} escaped: {x}");
        }
        // Mirror symmetry at the wall: approaching and leaving match.
        let before = reflect(0.85, 0.1, 0.4, 0.1, 0.9); // 0.89
        let after = reflect(0.85, 0.1, 0.6, 0.1, 0.9); // reflected to 0.89
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn moving_shape_changes_frames() {
        let spec = demo_spec();
        let v = render_video(&spec, 32, 3);
        assert_ne!(v.frame(0), v.frame(1));
        assert_ne!(v.frame(1), v.frame(2));
    }

    #[test]
    fn encode_decode_high_roundtrip_is_bit_exact() {
        let mut rng = Rng::new(11, StreamId::Custom(7));
        let mut video = Video {
            width: 16,
            height: 16,
            frames: 3,
            data: vec![0.0; 3 * 256],
        };
        for v in video.data.iter_mut() {
            *v = rng.uniform() as f32;
        }
        let lat = encode_high(&video, 4).unwrap();
        assert_eq!(lat.rows, 4);
        assert_eq!(lat.channels, 16);
        let back = decode_high(&lat).unwrap();
        assert_eq!(video.data.len(), back.data.len());
        for (a, b) in video.data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn encode_high_rejects_nondividing_patch() {
        let video = Video {
            width: 10,
            height: 10,
            frames: 1,
            data: vec![0.0; 100],
        };
        assert!(encode_high(&video, 4).is_err());
    }

    #[test]
    fn downsample_averages_blocks() {
        let video = Video {
            width: 4,
            height: 4,
            frames: 1,
            data: (0..16).map(|i| i as f32).collect(),
        };
        let small = downsample(&video, 2).unwrap();
        // Top-left block: (0 + 1 + 4 + 5) / 4
        assert_eq!(small.data[0], 2.5);
        assert_eq!(small.width, 2);
        let flat = downsample(&video, 4).unwrap();
        assert_eq!(flat.data, vec![7.5]);
    }

    #[test]
    fn downsample_constant_region_is_exact() {
        let video = Video {
            width: 8,
            height: 8,
            frames: 1,
            data: vec![0.625; 64],
        };
        let small = downsample(&video, 4).unwrap();
        for &v in &small.data {
            assert_eq!(v, 0.625);
        }
    }

    #[test]
    fn geometry_validation_catches_mismatches() {
        let ok = Geometry { frames: 5, high_px: 32, low_px: 8, patch: 4 };
        ok.validate().unwrap();
        assert_eq!(ok.factor(), 4);
        assert_eq!(ok.high_tokens(), 64);
        assert_eq!(ok.low_tokens(), 4);
        let bad = Geometry { frames: 5, high_px: 30, low_px: 8, patch: 4 };
        assert!(bad.validate().is_err());
        let equal = Geometry { frames: 5, high_px: 8, low_px: 8, patch: 4 };
        assert!(equal.validate().is_err());
        let nondiv = Geometry { frames: 5, high_px: 36, low_px: 8, patch: 4 };
        assert!(nondiv.validate().is_err());
    }

    #[test]
    fn latent_scale_roundtrip_within_eps() {
        let s = LatentScale::default();
        let mut x: Vec<f32> = (0..100).map(|i| i as f32 / 99.0).collect();
        let orig = x.clone();
        s.apply(&mut x);
        assert!(x.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        s.invert(&mut x);
        for (a, b) in orig.iter().zip(&x) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pgm_roundtrip_quantizes_once() {
        let dir = std::env::temp_dir().join("marvid_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        let px: Vec<f32> = (0..64).map(|i| i as f32 / 63.0).collect();
        write_pgm(&path, 8, 8, &px).unwrap();
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (8, 8));
        for (a, b) in px.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6, "{a} vs {b}");
        }
        // A second write/read cycle is exact: u8 values survive unchanged.
        write_pgm(&path, 8, 8, &back).unwrap();
        let (_, _, back2) = read_pgm(&path).unwrap();
        assert_eq!(back, back2);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn scene_sampling_respects_ranges() {
        let dist = SceneDistribution::default();
        let mut rng = Rng::new(3, StreamId::Data(0));
        for _ in 0..100 {
            let spec = SceneSpec::sample(&mut rng, &dist);
            assert!((dist.shapes_min..=dist.shapes_max).contains(&spec.shapes.len()));
            for s in &spec.shapes {
                assert!((dist.radius_min..=dist.radius_max).contains(&s.radius));
                let speed = (s.vx * s.vx + s.vy * s.vy).sqrt();
                assert!(speed <= dist.speed_max + 1e-12);
                assert!(speed >= dist.speed_min - 1e-12);
                assert!((s.cx - s.radius) > -1e-12 && (s.cx + s.radius) < 1.0 + 1e-12);
            }
        }
    }
}
