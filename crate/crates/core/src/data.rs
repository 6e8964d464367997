//! Synthetic-blur data pipeline.
//!
//! Blurry images are produced the way the classic high-FPS recipe does it:
//! render a short sequence of sharp frames of a moving scene and average an
//! odd, centered window of them; the sharp target is the center frame. The
//! toy scene is a textured background plus a few textured shapes translating
//! and rotating at constant per-shape velocities, so the resulting blur is
//! spatially non-uniform.
//!
//! Everything is a deterministic function of `(inputs, seed)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// Sharp frames of one rendered scene, values in `[0, 1]`, shape `[1,3,H,W]`.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    pub frames: Vec<Tensor<f32>>,
    pub meta: SceneMeta,
}

#[derive(Clone, Debug)]
pub struct SceneMeta {
    pub seed: u64,
    pub description: String,
}

/// One training example: the averaged blurry frame and its sharp center.
#[derive(Clone, Debug)]
pub struct BlurPair {
    pub blurry: Tensor<f32>,
    pub sharp: Tensor<f32>,
    /// Number of frames averaged (odd).
    pub blur_level: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum ShapeKind {
    Disk { radius: f64 },
    Rect { half_w: f64, half_h: f64 },
}

/// A textured shape moving with constant velocity and spin.
#[derive(Clone, Debug)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub velocity: (f64, f64),
    pub angle: f64,
    pub spin: f64,
    pub color: [f64; 3],
    pub tex_amp: [f64; 3],
    pub tex_freq: (f64, f64),
    pub tex_phase: f64,
    /// Soft-edge half width in pixels (antialiasing).
    pub edge: f64,
}

#[derive(Clone, Debug)]
pub struct Background {
    pub base: [f64; 3],
    pub amp: [f64; 3],
    pub freq_a: (f64, f64),
    pub freq_b: (f64, f64),
    pub phase_a: f64,
    pub phase_b: f64,
}

/// Full description of a toy scene; `render(t)` is a pure function of time,
/// so frame sequences of any length and window can be drawn from it.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: Background,
    pub shapes: Vec<Shape>,
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl Shape {
    /// Coverage in [0, 1] at pixel center (x, y) and time t.
    fn alpha(&self, x: f64, y: f64, t: f64) -> f64 {
        let cx = self.center.0 + self.velocity.0 * t;
        let cy = self.center.1 + self.velocity.1 * t;
        let ang = self.angle + self.spin * t;
        let (sin_a, cos_a) = ang.sin_cos();
        let dx = x - cx;
        let dy = y - cy;
        // rotate into the shape's local frame
        let lx = cos_a * dx + sin_a * dy;
        let ly = -sin_a * dx + cos_a * dy;
        let sd = match self.kind {
            ShapeKind::Disk { radius } => (lx * lx + ly * ly).sqrt() - radius,
            ShapeKind::Rect { half_w, half_h } => (lx.abs() - half_w).max(ly.abs() - half_h),
        };
        smoothstep(self.edge, -self.edge, sd)
    }

    fn color_at(&self, x: f64, y: f64, t: f64) -> [f64; 3] {
        let cx = self.center.0 + self.velocity.0 * t;
        let cy = self.center.1 + self.velocity.1 * t;
        let ang = self.angle + self.spin * t;
        let (sin_a, cos_a) = ang.sin_cos();
        let dx = x - cx;
        let dy = y - cy;
        let lx = cos_a * dx + sin_a * dy;
        let ly = -sin_a * dx + cos_a * dy;
        let stripes = (self.tex_freq.0 * lx + self.tex_freq.1 * ly + self.tex_phase).sin();
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = self.color[c] + self.tex_amp[c] * stripes;
        }
        out
    }
}

impl SceneSpec {
    /// Deterministic scene with 2-4 moving textured shapes on a textured
    /// background.
    pub fn random(seed: u64, height: usize, width: usize) -> SceneSpec {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let background = Background {
            base: [
                rng.random_range(0.35..0.65),
                rng.random_range(0.35..0.65),
                rng.random_range(0.35..0.65),
            ],
            amp: [
                rng.random_range(0.10..0.22),
                rng.random_range(0.10..0.22),
                rng.random_range(0.10..0.22),
            ],
            freq_a: (rng.random_range(0.05..0.20), rng.random_range(0.05..0.20)),
            freq_b: (rng.random_range(0.05..0.20), rng.random_range(0.05..0.20)),
            phase_a: rng.random_range(0.0..std::f64::consts::TAU),
            phase_b: rng.random_range(0.0..std::f64::consts::TAU),
        };
        let n_shapes = rng.random_range(2..=4usize);
        let mut shapes = Vec::with_capacity(n_shapes);
        for _ in 0..n_shapes {
            let kind = if rng.random::<bool>() {
                ShapeKind::Disk {
                    radius: rng.random_range(0.10..0.22) * height.min(width) as f64,
                }
            } else {
                ShapeKind::Rect {
                    half_w: rng.random_range(0.08..0.20) * width as f64,
                    half_h: rng.random_range(0.08..0.20) * height as f64,
                }
            };
            let speed = rng.random_range(0.8..2.2);
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            shapes.push(Shape {
                kind,
                center: (
                    rng.random_range(0.2..0.8) * width as f64,
                    rng.random_range(0.2..0.8) * height as f64,
                ),
                velocity: (speed * dir.cos(), speed * dir.sin()),
                angle: rng.random_range(0.0..std::f64::consts::TAU),
                spin: rng.random_range(-0.05..0.05),
                color: [
                    rng.random_range(0.15..0.85),
                    rng.random_range(0.15..0.85),
                    rng.random_range(0.15..0.85),
                ],
                tex_amp: [
                    rng.random_range(0.08..0.25),
                    rng.random_range(0.08..0.25),
                    rng.random_range(0.08..0.25),
                ],
                tex_freq: (rng.random_range(0.25..0.9), rng.random_range(0.25..0.9)),
                tex_phase: rng.random_range(0.0..std::f64::consts::TAU),
                edge: 1.2,
            });
        }
        SceneSpec {
            height,
            width,
            background,
            shapes,
        }
    }

    /// Render the scene at continuous time `t` (frames use integer offsets
    /// around 0, so the center frame of a sequence is always `t = 0`).
    pub fn render(&self, t: f64) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        let bg = &self.background;
        let mut data = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let xf = x as f64 + 0.5;
                let yf = y as f64 + 0.5;
                let field = (bg.freq_a.0 * xf + bg.freq_a.1 * yf + bg.phase_a).sin()
                    * (bg.freq_b.0 * xf + bg.freq_b.1 * yf + bg.phase_b).cos();
                let mut px = [
                    bg.base[0] + bg.amp[0] * field,
                    bg.base[1] + bg.amp[1] * field,
                    bg.base[2] + bg.amp[2] * field,
                ];
                for shape in &self.shapes {
                    let a = shape.alpha(xf, yf, t);
                    if a > 0.0 {
                        let col = shape.color_at(xf, yf, t);
                        for c in 0..3 {
                            px[c] = px[c] * (1.0 - a) + col[c] * a;
                        }
                    }
                }
                for c in 0..3 {
                    data[(c * h + y) * w + x] = px[c].clamp(0.0, 1.0) as f32;
                }
            }
        }
        Tensor::new([1, 3, h, w], data)
    }
}

/// Render `length` frames of a random scene at integer times centered on 0.
pub fn generate_toy_sequence(seed: u64, length: usize, size: (usize, usize)) -> Result<FrameSequence> {
    let (h, w) = size;
    if length < 1 {
        return Err(Error::Config("sequence length must be >= 1".into()));
    }
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "frame size {h}x{w} must be nonzero and divisible by 4"
        )));
    }
    let scene = SceneSpec::random(seed, h, w);
    let mid = (length as f64 - 1.0) / 2.0;
    let frames = (0..length)
        .map(|i| scene.render(i as f64 - mid))
        .collect();
    let max_speed = scene
        .shapes
        .iter()
        .map(|s| (s.velocity.0.powi(2) + s.velocity.1.powi(2)).sqrt())
        .fold(0.0f64, f64::max);
    Ok(FrameSequence {
        frames,
        meta: SceneMeta {
            seed,
            description: format!(
                "{} shapes, max speed {:.2} px/frame, {h}x{w}",
                scene.shapes.len(),
                max_speed
            ),
        },
    })
}

/// Average the centered window of `n` frames; the sharp target is the
/// center frame. `n` must be odd and the window must fit.
pub fn synthesize_blur(seq: &FrameSequence, n: usize) -> Result<BlurPair> {
    let len = seq.frames.len();
    if n % 2 == 0 || n < 1 {
        return Err(Error::Config(format!("blur level must be odd, got {n}")));
    }
    let center = len / 2;
    let half = n / 2;
    if half > center || center + half >= len {
        return Err(Error::Config(format!(
            "blur window {n} does not fit in a {len}-frame sequence"
        )));
    }
    let sharp = seq.frames[center].clone();
    let shape = sharp.shape();
    let mut acc = vec![0f64; sharp.len()];
    for frame in &seq.frames[center - half..=center + half] {
        for (a, &v) in acc.iter_mut().zip(frame.data()) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / n as f64;
    let blurry = Tensor::new(shape, acc.into_iter().map(|v| (v * inv) as f32).collect());
    Ok(BlurPair {
        blurry,
        sharp,
        blur_level: n,
    })
}

/// Shift `[0,1]` pixel values to the network's `[-0.5, 0.5]` input range.
pub fn normalize(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| v - 0.5)
}

/// Inverse of [`normalize`] (no clipping).
pub fn denormalize(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| v + 0.5)
}

/// Denormalize and clip to `[0,1]`; used only at the evaluation boundary
/// before metrics or image export.
pub fn denormalize_clipped(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| (v + 0.5).clamp(0.0, 1.0))
}

/// Random square crop plus a dihedral transform and saturation jitter, all
/// applied identically to the blurry and sharp image.
pub fn crop_and_augment(
    pair: &BlurPair,
    patch: usize,
    seed: u64,
    sat_range: (f32, f32),
) -> Result<BlurPair> {
    let [_, _, h, w] = pair.blurry.shape();
    if patch > h.min(w) {
        return Err(Error::Config(format!(
            "patch {patch} larger than image {h}x{w}"
        )));
    }
    if patch % 4 != 0 || patch == 0 {
        return Err(Error::Config(format!("patch {patch} must be divisible by 4")));
    }
    if pair.blurry.shape() != pair.sharp.shape() {
        return Err(Error::shape(
            "crop_and_augment",
            "blurry and sharp shapes differ",
        ));
    }
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let y0 = rng.random_range(0..=h - patch);
    let x0 = rng.random_range(0..=w - patch);
    let rot = rng.random_range(0..4u8);
    let flip = rng.random::<bool>();
    let sat = rng.random_range(sat_range.0.min(sat_range.1)..=sat_range.0.max(sat_range.1));

    let transform = |img: &Tensor<f32>| -> Tensor<f32> {
        let cropped = Tensor::from_fn([1, 3, patch, patch], |_, c, y, x| {
            img.at(0, c, y0 + y, x0 + x)
        });
        let turned = Tensor::from_fn([1, 3, patch, patch], |_, c, y, x| {
            let (sy, sx) = match rot {
                0 => (y, x),
                1 => (x, patch - 1 - y),             // 90 degrees
                2 => (patch - 1 - y, patch - 1 - x), // 180 degrees
                _ => (patch - 1 - x, y),             // 270 degrees
            };
            let sx = if flip { patch - 1 - sx } else { sx };
            cropped.at(0, c, sy, sx)
        });
        // saturation: scale each pixel's distance from its channel mean
        Tensor::from_fn([1, 3, patch, patch], |_, c, y, x| {
            let g = (turned.at(0, 0, y, x) + turned.at(0, 1, y, x) + turned.at(0, 2, y, x)) / 3.0;
            (g + sat * (turned.at(0, c, y, x) - g)).clamp(0.0, 1.0)
        })
    };

    Ok(BlurPair {
        blurry: transform(&pair.blurry),
        sharp: transform(&pair.sharp),
        blur_level: pair.blur_level,
    })
}

/// Add zero-mean Gaussian noise with standard deviation `sigma` given on the
/// `[0,255]` scale, then clip back to `[0,1]`.
pub fn add_gaussian_noise(img: &Tensor<f32>, sigma: f64, seed: u64) -> Result<Tensor<f32>> {
    if sigma < 0.0 {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sigma / 255.0).map_err(|e| Error::Config(e.to_string()))?;
    let data = img
        .data()
        .iter()
        .map(|&v| (v as f64 + dist.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(Tensor::new(img.shape(), data))
}

// ---------------------------------------------------------------------------
// PNG and manifest IO
// ---------------------------------------------------------------------------

/// Save a `[1,3,H,W]` image in `[0,1]` as an 8-bit RGB PNG.
pub fn save_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let [b, c, h, w] = img.shape();
    if b != 1 || c != 3 {
        return Err(Error::shape(
            "save_png",
            format!("expected [1,3,H,W], got {:?}", img.shape()),
        ));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img.at(0, 0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.at(0, 1, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.at(0, 2, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::io(path, e))
}

/// Load an RGB PNG as a `[1,3,H,W]` tensor with values `k/255`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::io(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                *out.at_mut(0, c, y, x) = px.0[c] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

/// One dataset record: paths are relative to the manifest file.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub blurry: PathBuf,
    pub sharp: PathBuf,
    pub blur_level: usize,
    pub seed: u64,
}

const MANIFEST_HEADER: &str = "blurry,sharp,blur_level,seed";

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{MANIFEST_HEADER}").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{}",
            r.blurry.display(),
            r.sharp.display(),
            r.blur_level,
            r.seed
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(f);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            if line.trim() != MANIFEST_HEADER {
                return Err(Error::Config(format!(
                    "manifest {} has unexpected header {line:?}",
                    path.display()
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!(
                "manifest {} line {}: expected 4 fields",
                path.display(),
                i + 1
            )));
        }
        rows.push(ManifestRow {
            blurry: PathBuf::from(parts[0]),
            sharp: PathBuf::from(parts[1]),
            blur_level: parts[2]
                .parse()
                .map_err(|_| Error::Config(format!("bad blur_level {:?}", parts[2])))?,
            seed: parts[3]
                .parse()
                .map_err(|_| Error::Config(format!("bad seed {:?}", parts[3])))?,
        });
    }
    Ok(rows)
}

/// Load every pair referenced by a manifest (paths resolved relative to it).
pub fn load_pairs(manifest: &Path) -> Result<Vec<BlurPair>> {
    let rows = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut pairs = Vec::with_capacity(rows.len());
    for row in rows {
        pairs.push(BlurPair {
            blurry: load_png(&base.join(&row.blurry))?,
            sharp: load_png(&base.join(&row.sharp))?,
            blur_level: row.blur_level,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequences_are_deterministic() {
        let a = generate_toy_sequence(5, 7, (16, 16)).unwrap();
        let b = generate_toy_sequence(5, 7, (16, 16)).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa, fb);
        }
        let c = generate_toy_sequence(6, 7, (16, 16)).unwrap();
        assert_ne!(a.frames[0], c.frames[0], "different seeds differ");
    }

    #[test]
    fn static_scene_renders_identical_frames() {
        let mut scene = SceneSpec::random(3, 16, 16);
        for s in &mut scene.shapes {
            s.velocity = (0.0, 0.0);
            s.spin = 0.0;
        }
        let f0 = scene.render(-2.0);
        let f1 = scene.render(0.0);
        let f2 = scene.render(2.0);
        assert_eq!(f0, f1);
        assert_eq!(f1, f2);
    }

    #[test]
    fn blur_level_one_is_sharp() {
        let seq = generate_toy_sequence(1, 5, (16, 16)).unwrap();
        let pair = synthesize_blur(&seq, 1).unwrap();
        assert_eq!(pair.blurry, pair.sharp);
        assert_eq!(pair.blur_level, 1);
    }

    #[test]
    fn identical_frames_average_to_sharp() {
        let frame = SceneSpec::random(9, 16, 16).render(0.0);
        let seq = FrameSequence {
            frames: vec![frame.clone(); 5],
            meta: SceneMeta {
                seed: 9,
                description: "constant".into(),
            },
        };
        let pair = synthesize_blur(&seq, 5).unwrap();
        let max_diff = pair
            .blurry
            .data()
            .iter()
            .zip(pair.sharp.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff <= 1e-7, "constant sequence must average to itself");
    }

    #[test]
    fn blur_rejects_bad_windows() {
        let seq = generate_toy_sequence(1, 5, (16, 16)).unwrap();
        assert!(synthesize_blur(&seq, 2).is_err(), "even n");
        assert!(synthesize_blur(&seq, 7).is_err(), "window larger than sequence");
    }

    #[test]
    fn averaging_is_convex() {
        let seq = generate_toy_sequence(11, 9, (16, 16)).unwrap();
        let pair = synthesize_blur(&seq, 9).unwrap();
        for i in 0..pair.blurry.len() {
            let lo = seq
                .frames
                .iter()
                .map(|f| f.data()[i])
                .fold(f32::INFINITY, f32::min);
            let hi = seq
                .frames
                .iter()
                .map(|f| f.data()[i])
                .fold(f32::NEG_INFINITY, f32::max);
            let v = pair.blurry.data()[i];
            assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
        }
    }

    #[test]
    fn normalize_shifts_and_roundtrips() {
        use rand::{Rng, SeedableRng};
        assert_eq!(normalize(&Tensor::full([1, 1, 1, 1], 0.0)).item(), -0.5);
        assert_eq!(normalize(&Tensor::full([1, 1, 1, 1], 1.0)).item(), 0.5);
        // random f32 in [0,1) from the generator lies on the 2^-24 lattice,
        // where the +-0.5 shift is exact
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::from_fn([1, 3, 8, 8], |_, _, _, _| rng.random::<f32>());
        assert_eq!(denormalize(&normalize(&img)), img);
    }

    #[test]
    fn augment_is_deterministic_and_in_window() {
        let seq = generate_toy_sequence(2, 7, (32, 32)).unwrap();
        let pair = synthesize_blur(&seq, 5).unwrap();
        let a = crop_and_augment(&pair, 16, 42, (0.8, 1.2)).unwrap();
        let b = crop_and_augment(&pair, 16, 42, (0.8, 1.2)).unwrap();
        assert_eq!(a.blurry, b.blurry);
        assert_eq!(a.sharp, b.sharp);
        assert_eq!(a.blurry.shape(), [1, 3, 16, 16]);
        assert!(crop_and_augment(&pair, 48, 0, (1.0, 1.0)).is_err(), "patch too large");
        assert!(crop_and_augment(&pair, 10, 0, (1.0, 1.0)).is_err(), "patch not /4");
    }

    #[test]
    fn augment_isometry_preserves_difference_stats() {
        // with saturation pinned to 1, the dihedral transform applied to both
        // images permutes pixels, so the blurry-sharp difference statistics
        // are unchanged
        let seq = generate_toy_sequence(13, 9, (32, 32)).unwrap();
        let pair = synthesize_blur(&seq, 7).unwrap();
        for seed in 0..6u64 {
            let aug = crop_and_augment(&pair, 32, seed, (1.0, 1.0)).unwrap();
            let before = pair.blurry.mean_abs_diff(&pair.sharp);
            let after = aug.blurry.mean_abs_diff(&aug.sharp);
            assert!(
                (before - after).abs() <= 1e-7,
                "seed {seed}: {before} vs {after}"
            );
        }
    }

    #[test]
    fn noise_sigma_zero_is_identity() {
        let img = SceneSpec::random(4, 16, 16).render(0.0);
        assert_eq!(add_gaussian_noise(&img, 0.0, 7).unwrap(), img);
        assert!(add_gaussian_noise(&img, -1.0, 7).is_err());
    }

    #[test]
    fn noise_matches_requested_std() {
        let img = Tensor::full([1, 3, 256, 256], 0.5);
        let noisy = add_gaussian_noise(&img, 20.0, 3).unwrap();
        let n = img.len() as f64;
        let mean: f64 = noisy
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b) as f64)
            .sum::<f64>()
            / n;
        let var: f64 = noisy
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| ((a - b) as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let want = 20.0 / 255.0;
        assert!(
            (var.sqrt() - want).abs() / want < 0.05,
            "std {} vs {}",
            var.sqrt(),
            want
        );
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ManifestRow {
                blurry: "b0.png".into(),
                sharp: "s0.png".into(),
                blur_level: 7,
                seed: 1,
            },
            ManifestRow {
                blurry: "b1.png".into(),
                sharp: "s1.png".into(),
                blur_level: 9,
                seed: 2,
            },
        ];
        let path = dir.path().join("manifest.csv");
        write_manifest(&path, &rows).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), rows);
    }

    #[test]
    fn png_roundtrip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = SceneSpec::random(21, 16, 16).render(0.0);
        let path = dir.path().join("img.png");
        save_png(&path, &img).unwrap();
        let loaded = load_png(&path).unwrap();
        // quantized to 8 bits on save; saving the loaded image again must be lossless
        save_png(&path, &loaded).unwrap();
        let again = load_png(&path).unwrap();
        assert_eq!(loaded, again);
    }
}
