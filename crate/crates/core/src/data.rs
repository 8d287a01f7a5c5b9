//! Dataset ingestion (Kaggle DSB-2018 directory layout), augmentation, the
//! synthetic blob generator and train/validation manifests.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

/// One grayscale image in `[0, 1]` with its binary mask, both `(1, 1, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        let (is, ms) = (image.shape(), mask.shape());
        if is != ms || is.n != 1 || is.c != 1 {
            return Err(Error::Shape(format!(
                "sample `{id}`: image {is} and mask {ms} must both be (1,1,H,W)"
            )));
        }
        if !mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::Argument(format!(
                "sample `{id}`: mask is not binary"
            )));
        }
        if !image.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::Argument(format!(
                "sample `{id}`: image values outside [0, 1]"
            )));
        }
        Ok(SamplePair { id, image, mask })
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data().iter().filter(|&&v| v == 1.0).count() as f64 / self.mask.len() as f64
    }
}

// ---- PNG I/O --------------------------------------------------------------------

fn ingest(id: &str, reason: impl std::fmt::Display) -> Error {
    Error::Ingest {
        id: id.to_owned(),
        reason: reason.to_string(),
    }
}

/// Reads an 8- or 16-bit PNG (gray, gray+alpha, RGB or RGBA) as luminance in
/// `[0, 1]` with weights 0.299/0.587/0.114. Alpha is ignored.
pub fn read_gray(path: &Path) -> std::result::Result<(u32, u32, Vec<f32>), String> {
    let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .pixels()
        .map(|p| {
            (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok((w, h, data))
}

/// Bilinear resize of a single-channel plane.
pub fn resize_plane(w: u32, h: u32, data: Vec<f32>, out_w: u32, out_h: u32) -> Vec<f32> {
    if (w, h) == (out_w, out_h) {
        return data;
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w, h, data).expect("plane size");
    image::imageops::resize(&buf, out_w, out_h, FilterType::Triangle).into_raw()
}

fn binarize_half(v: &mut [f32]) {
    for x in v {
        *x = if *x >= 0.5 { 1.0 } else { 0.0 };
    }
}

/// Reads a PNG as a `(1, 1, size, size)` image tensor.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (w, h, data) = read_gray(path).map_err(|e| ingest(&id, e))?;
    let data = resize_plane(w, h, data, size as u32, size as u32);
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::from_vec(Shape::new(1, 1, size, size), data)
}

fn to_gray8(t: &Tensor<f32>) -> Result<GrayImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::Shape(format!(
            "expected a single (1,1,H,W) plane, got {s}"
        )));
    }
    let px = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(GrayImage::from_raw(s.w as u32, s.h as u32, px).expect("plane size"))
}

fn png_bytes(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Argument(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

/// Writes a `[0, 1]` plane as an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &png_bytes(&to_gray8(t)?)?)
}

/// Writes a binary mask as an 8-bit PNG with foreground 255.
pub fn write_mask_png(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    if !mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        return Err(Error::Argument("mask is not binary".into()));
    }
    write_gray_png(path, mask)
}

// ---- DSB-2018 layout --------------------------------------------------------------

/// Elementwise logical OR of equally shaped binary masks.
pub fn merge_masks(masks: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Argument("no masks to merge".into()))?;
    let mut out = Tensor::zeros(first.shape());
    for m in masks {
        if m.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "mask {} differs from {}",
                m.shape(),
                first.shape()
            )));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
            if v != 0.0 {
                *o = 1.0;
            }
        }
    }
    Ok(out)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Loads one `<root>/<id>/{images/<id>.png, masks/*.png}` sample.
pub fn load_sample(dir: &Path, size: usize) -> Result<SamplePair> {
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let img_path = dir.join("images").join(format!("{id}.png"));
    let (w, h, img) = read_gray(&img_path).map_err(|e| ingest(&id, e))?;
    let mask_dir = dir.join("masks");
    if !mask_dir.is_dir() {
        return Err(ingest(&id, "missing masks directory"));
    }
    let mut merged = vec![0.0f32; (w * h) as usize];
    let mut found = false;
    for p in sorted_entries(&mask_dir)?.into_iter().filter(|p| is_png(p)) {
        let (mw, mh, m) = read_gray(&p).map_err(|e| ingest(&id, e))?;
        if (mw, mh) != (w, h) {
            return Err(ingest(
                &id,
                format!("mask {} is {mw}x{mh}, image is {w}x{h}", p.display()),
            ));
        }
        for (o, v) in merged.iter_mut().zip(m) {
            if v >= 0.5 {
                *o = 1.0;
            }
        }
        found = true;
    }
    if !found {
        return Err(ingest(&id, "masks directory holds no PNG files"));
    }
    let s = size as u32;
    let image = resize_plane(w, h, img, s, s)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    let mut mask = resize_plane(w, h, merged, s, s);
    binarize_half(&mut mask);
    let shape = Shape::new(1, 1, size, size);
    SamplePair::new(
        id,
        Tensor::from_vec(shape, image)?,
        Tensor::from_vec(shape, mask)?,
    )
}

/// Loads every sample directory under `root`, sorted by id.
pub fn load_dsb2018(root: &Path, size: usize) -> Result<Vec<SamplePair>> {
    if size == 0 {
        return Err(Error::Argument("image size must be positive".into()));
    }
    sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .map(|p| load_sample(&p, size))
        .collect()
}

// ---- augmentation -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElasticConfig {
    /// Displacement magnitude in pixels.
    pub alpha: f64,
    /// Gaussian smoothing of the displacement field, in pixels.
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_h: f64,
    pub flip_v: f64,
    /// Maximum absolute rotation in degrees.
    pub rotate: f64,
    /// Maximum absolute translation as a fraction of the side length.
    pub shift: f64,
    /// Isotropic scale range.
    pub zoom: (f64, f64),
    /// Maximum absolute shear angle in degrees.
    pub shear: f64,
    pub elastic: Option<ElasticConfig>,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_h: 0.5,
            flip_v: 0.5,
            rotate: 30.0,
            shift: 0.1,
            zoom: (0.9, 1.1),
            shear: 10.0,
            elastic: None,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No-op configuration.
    pub fn identity() -> Self {
        AugmentConfig {
            flip_h: 0.0,
            flip_v: 0.0,
            rotate: 0.0,
            shift: 0.0,
            zoom: (1.0, 1.0),
            shear: 0.0,
            elastic: None,
            seed: 0,
        }
    }

    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        for (name, p) in [("flip_h", self.flip_h), ("flip_v", self.flip_v)] {
            if !(0.0..=1.0).contains(&p) {
                return Err((name, format!("probability must lie in [0, 1], got {p}")));
            }
        }
        for (name, v) in [
            ("rotate", self.rotate),
            ("shift", self.shift),
            ("shear", self.shear),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err((name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.shear >= 90.0 {
            return Err((
                "shear",
                format!("must be below 90 degrees, got {}", self.shear),
            ));
        }
        let (lo, hi) = self.zoom;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(("zoom", format!("need 0 < lo <= hi, got ({lo}, {hi})")));
        }
        if let Some(e) = &self.elastic {
            if !(e.alpha >= 0.0 && e.sigma > 0.0) {
                return Err(("elastic", "alpha must be >= 0 and sigma > 0".into()));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(f, m)| Error::Argument(format!("augment.{f}: {m}")))
    }
}

/// 64-bit FNV-1a over a byte sequence.
pub fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // separator so ("ab","c") and ("a","bc") differ
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-sample RNG seed derived from `(seed, id, epoch)`.
pub fn sample_seed(seed: u64, id: &str, epoch: u64) -> u64 {
    fnv1a(&[&seed.to_le_bytes(), id.as_bytes(), &epoch.to_le_bytes()])
}

/// A geometric warp mapping output pixel centers to input coordinates:
/// `src = A (dst - c) + c + t`, with `c` the image center.
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    pub matrix: [[f64; 2]; 2],
    pub translate: (f64, f64),
    /// Optional per-pixel displacement `(dy, dx)` added to the source position.
    pub displacement: Option<(Vec<f64>, Vec<f64>)>,
}

impl Transform {
    pub fn identity() -> Self {
        Transform {
            matrix: [[1.0, 0.0], [0.0, 1.0]],
            translate: (0.0, 0.0),
            displacement: None,
        }
    }

    pub fn flip_h() -> Self {
        Transform {
            matrix: [[1.0, 0.0], [0.0, -1.0]],
            ..Self::identity()
        }
    }

    pub fn flip_v() -> Self {
        Transform {
            matrix: [[-1.0, 0.0], [0.0, 1.0]],
            ..Self::identity()
        }
    }

    /// Counter-clockwise rotation by `quarter` multiples of 90 degrees.
    pub fn rot90(quarter: i32) -> Self {
        let (s, c) = match quarter.rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        };
        Transform {
            matrix: [[c, -s], [s, c]],
            ..Self::identity()
        }
    }

    /// Forward affine `rotate(deg) * shear(deg) * zoom`, shifted by
    /// `(ty, tx)` pixels, expressed as its inverse sampling map.
    pub fn affine(rotate_deg: f64, shear_deg: f64, zoom: f64, shift: (f64, f64)) -> Self {
        let (s, c) = rotate_deg.to_radians().sin_cos();
        let k = shear_deg.to_radians().tan();
        // forward in (y, x) coordinates: R * [[1, 0], [k, 1]] * zoom
        let f = [
            [zoom * (c - s * k), -s * zoom],
            [zoom * (s + c * k), c * zoom],
        ];
        let det = f[0][0] * f[1][1] - f[0][1] * f[1][0];
        let inv = [
            [f[1][1] / det, -f[0][1] / det],
            [-f[1][0] / det, f[0][0] / det],
        ];
        let t = (
            -(inv[0][0] * shift.0 + inv[0][1] * shift.1),
            -(inv[1][0] * shift.0 + inv[1][1] * shift.1),
        );
        Transform {
            matrix: inv,
            translate: t,
            displacement: None,
        }
    }

    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let m = &self.matrix;
        let mut sy = m[0][0] * dy + m[0][1] * dx + cy + self.translate.0;
        let mut sx = m[1][0] * dy + m[1][1] * dx + cx + self.translate.1;
        if let Some((fy, fx)) = &self.displacement {
            sy += fy[y * w + x];
            sx += fx[y * w + x];
        }
        // exact grid hits (flips, quarter turns) must not pick up rounding noise
        let snap = |v: f64| {
            if (v - v.round()).abs() < 1e-9 {
                v.round()
            } else {
                v
            }
        };
        (snap(sy), snap(sx))
    }

    /// Bilinear resampling of one `h x w` plane with edge replication.
    pub fn apply_plane(&self, src: &[f32], h: usize, w: usize) -> Vec<f32> {
        let at = |y: isize, x: isize| {
            let yy = y.clamp(0, h as isize - 1) as usize;
            let xx = x.clamp(0, w as isize - 1) as usize;
            src[yy * w + xx] as f64
        };
        let mut out = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(y, x, h, w);
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                let v = if fy == 0.0 && fx == 0.0 {
                    at(y0, x0)
                } else {
                    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                        + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
                };
                out[y * w + x] = v as f32;
            }
        }
        out
    }

    /// Warps image and mask identically; the mask is re-binarized at 0.5.
    pub fn apply(&self, s: &SamplePair) -> SamplePair {
        let sh = s.image.shape();
        let image = self.apply_plane(s.image.data(), sh.h, sh.w);
        let mut mask = self.apply_plane(s.mask.data(), sh.h, sh.w);
        binarize_half(&mut mask);
        SamplePair {
            id: s.id.clone(),
            image: Tensor::from_vec(sh, image.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
                .unwrap(),
            mask: Tensor::from_vec(sh, mask).unwrap(),
        }
    }

    /// `self` followed by `next` (both as output-to-input sampling maps).
    pub fn then(&self, next: &Transform) -> Transform {
        // sampling composition: src = A1 (A2 d + t2) + t1
        let (a, b) = (&self.matrix, &next.matrix);
        let m = [
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ];
        let t = (
            a[0][0] * next.translate.0 + a[0][1] * next.translate.1 + self.translate.0,
            a[1][0] * next.translate.0 + a[1][1] * next.translate.1 + self.translate.1,
        );
        Transform {
            matrix: m,
            translate: t,
            displacement: next.displacement.clone().or(self.displacement.clone()),
        }
    }
}

fn gaussian_blur(field: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let o = k as isize - radius;
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + o).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + o).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += kv * src[yy as usize * w + xx as usize];
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    let tmp = pass(field, true);
    field.copy_from_slice(&pass(&tmp, false));
}

/// Draws the random transform for one sample.
pub fn draw_transform(cfg: &AugmentConfig, rng: &mut impl Rng, h: usize, w: usize) -> Transform {
    let uniform = |rng: &mut dyn rand::RngCore, m: f64| {
        if m > 0.0 {
            rng.random_range(-m..=m)
        } else {
            0.0
        }
    };
    let mut t = Transform::identity();
    if rng.random_bool(cfg.flip_h) {
        t = t.then(&Transform::flip_h());
    }
    if rng.random_bool(cfg.flip_v) {
        t = t.then(&Transform::flip_v());
    }
    let rot = uniform(rng, cfg.rotate);
    let shear = uniform(rng, cfg.shear);
    let zoom = if cfg.zoom.0 < cfg.zoom.1 {
        rng.random_range(cfg.zoom.0..=cfg.zoom.1)
    } else {
        cfg.zoom.0
    };
    let shift = (
        uniform(rng, cfg.shift) * h as f64,
        uniform(rng, cfg.shift) * w as f64,
    );
    if rot != 0.0 || shear != 0.0 || zoom != 1.0 || shift != (0.0, 0.0) {
        t = t.then(&Transform::affine(rot, shear, zoom, shift));
    }
    if let Some(e) = &cfg.elastic {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let field = |rng: &mut dyn rand::RngCore| {
            let mut f: Vec<f64> = (0..h * w).map(|_| normal.sample(rng)).collect();
            gaussian_blur(&mut f, h, w, e.sigma);
            let rms = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64)
                .sqrt()
                .max(1e-12);
            f.iter_mut().for_each(|v| *v *= e.alpha / rms);
            f
        };
        let fy = field(rng);
        let fx = field(rng);
        t.displacement = Some((fy, fx));
    }
    t
}

/// Augments one sample for a given epoch; deterministic in
/// `(cfg.seed, sample id, epoch)`.
pub fn augment(s: &SamplePair, cfg: &AugmentConfig, epoch: u64) -> SamplePair {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, &s.id, epoch));
    let sh = s.image.shape();
    draw_transform(cfg, &mut rng, sh.h, sh.w).apply(s)
}

// ---- synthetic blobs ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub blob_count: (usize, usize),
    pub blob_radius: (f64, f64),
    pub noise_level: f64,
    /// Target mean foreground fraction, in (0, 0.5).
    pub imbalance_target: f64,
    /// Width of the linear intensity ramp at blob edges, in pixels.
    pub edge_width: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 200,
            image_size: 64,
            blob_count: (1, 12),
            blob_radius: (2.5, 7.0),
            noise_level: 0.05,
            imbalance_target: 0.08,
            edge_width: 2.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
    pub brightness: f64,
}

impl Blob {
    fn distance(&self, y: usize, x: usize) -> f64 {
        ((y as f64 - self.cy).powi(2) + (x as f64 - self.cx).powi(2)).sqrt()
    }

    /// Soft edge profile `clamp(0.5 + (r - d) / width, 0, 1)`.
    pub fn profile(&self, y: usize, x: usize, width: f64) -> f64 {
        (0.5 + (self.radius - self.distance(y, x)) / width).clamp(0.0, 1.0)
    }

    pub fn covers(&self, y: usize, x: usize) -> bool {
        self.distance(y, x) <= self.radius
    }

    pub fn mask(&self, size: usize) -> Tensor<f32> {
        Tensor::from_fn(Shape::new(1, 1, size, size), |i| {
            if self.covers(i / size, i % size) {
                1.0
            } else {
                0.0
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub pair: SamplePair,
    pub blobs: Vec<Blob>,
    pub background: f64,
}

impl SynthConfig {
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.n_samples == 0 {
            return Err(("n_samples", "must be positive".into()));
        }
        if self.image_size < 4 {
            return Err((
                "image_size",
                format!("must be at least 4, got {}", self.image_size),
            ));
        }
        let (c0, c1) = self.blob_count;
        if c0 == 0 || c0 > c1 {
            return Err((
                "blob_count",
                format!("need 1 <= min <= max, got ({c0}, {c1})"),
            ));
        }
        let (r0, r1) = self.blob_radius;
        if !(r0 >= 0.5 && r0 <= r1 && r1.is_finite()) {
            return Err((
                "blob_radius",
                format!("need 0.5 <= min <= max, got ({r0}, {r1})"),
            ));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(("noise_level", "must be finite and >= 0".into()));
        }
        if !(self.imbalance_target > 0.0 && self.imbalance_target < 0.5) {
            return Err((
                "imbalance_target",
                format!("must lie in (0, 0.5), got {}", self.imbalance_target),
            ));
        }
        if !(self.edge_width > 0.0) {
            return Err(("edge_width", "must be positive".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(f, m)| Error::Argument(format!("synth.{f}: {m}")))
    }

    fn feasibility(&self) -> Result<()> {
        let area = (self.image_size * self.image_size) as f64;
        let target = self.imbalance_target * area;
        let disc = |r: f64| std::f64::consts::PI * r * r;
        let most = self.blob_count.1 as f64 * disc(self.blob_radius.1);
        let least = self.blob_count.0 as f64 * disc(self.blob_radius.0);
        if most < target {
            return Err(Error::Generation(format!(
                "at most {most:.0} foreground pixels fit ({} blobs of radius {}), target is {target:.0}",
                self.blob_count.1, self.blob_radius.1
            )));
        }
        if least > 1.3 * target {
            return Err(Error::Generation(format!(
                "{} blobs of radius {} already cover {least:.0} pixels, target is {target:.0}",
                self.blob_count.0, self.blob_radius.0
            )));
        }
        // blobs must fit inside the frame
        if 2.0 * self.blob_radius.0 + 2.0 > self.image_size as f64 {
            return Err(Error::Generation(
                "smallest blob does not fit in the image".into(),
            ));
        }
        Ok(())
    }
}

fn sample_one(cfg: &SynthConfig, index: usize) -> Result<SynthSample> {
    let size = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[
        &cfg.seed.to_le_bytes(),
        &(index as u64).to_le_bytes(),
    ]));
    let target = cfg.imbalance_target * (size * size) as f64;
    let (r0, r1) = cfg.blob_radius;
    let mut blobs: Vec<Blob> = Vec::new();
    let mut covered = vec![false; size * size];
    let mut fg = 0usize;
    let mut failures = 0;
    while blobs.len() < cfg.blob_count.1 && failures < 200 {
        let remaining = target - fg as f64;
        let needed_min = blobs.len() < cfg.blob_count.0;
        if !needed_min && remaining < 0.5 * std::f64::consts::PI * r0 * r0 {
            break;
        }
        // largest radius that does not overshoot the remaining area
        let cap = (remaining.max(0.0) / std::f64::consts::PI)
            .sqrt()
            .clamp(r0, r1);
        let radius = if cap > r0 {
            rng.random_range(r0..=cap)
        } else {
            r0
        };
        let lo = radius + 1.0;
        let hi = size as f64 - 2.0 - radius;
        if hi <= lo {
            failures += 1;
            continue;
        }
        let blob = Blob {
            cy: rng.random_range(lo..hi),
            cx: rng.random_range(lo..hi),
            radius,
            brightness: rng.random_range(0.55..0.9),
        };
        let clear = blobs.iter().all(|b| {
            ((b.cy - blob.cy).powi(2) + (b.cx - blob.cx).powi(2)).sqrt()
                > b.radius + blob.radius + cfg.edge_width
        });
        if !clear {
            failures += 1;
            continue;
        }
        for y in 0..size {
            for x in 0..size {
                if blob.covers(y, x) && !covered[y * size + x] {
                    covered[y * size + x] = true;
                    fg += 1;
                }
            }
        }
        blobs.push(blob);
    }
    if blobs.len() < cfg.blob_count.0 {
        return Err(Error::Generation(format!(
            "sample {index}: could only place {} of {} blobs without overlap",
            blobs.len(),
            cfg.blob_count.0
        )));
    }
    let background = rng.random_range(0.05..0.2);
    let noise = Normal::new(0.0, cfg.noise_level.max(f64::MIN_POSITIVE)).unwrap();
    let mut image = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let peak = blobs
                .iter()
                .map(|b| b.brightness * b.profile(y, x, cfg.edge_width))
                .fold(0.0, f64::max);
            let n = if cfg.noise_level > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            image.push((background + peak + n).clamp(0.0, 1.0) as f32);
        }
    }
    let shape = Shape::new(1, 1, size, size);
    let mask = covered.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let pair = SamplePair::new(
        format!("synth_{index:05}"),
        Tensor::from_vec(shape, image)?,
        Tensor::from_vec(shape, mask)?,
    )?;
    Ok(SynthSample {
        pair,
        blobs,
        background,
    })
}

/// Noisy images of soft-edged bright discs with exact masks.
pub fn synth_blobs_detailed(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    cfg.feasibility()?;
    (0..cfg.n_samples).map(|i| sample_one(cfg, i)).collect()
}

pub fn synth_blobs(cfg: &SynthConfig) -> Result<Vec<SamplePair>> {
    Ok(synth_blobs_detailed(cfg)?
        .into_iter()
        .map(|s| s.pair)
        .collect())
}

/// Writes samples in the DSB-2018 layout, one mask PNG per blob.
pub fn write_dsb(root: &Path, samples: &[SynthSample]) -> Result<()> {
    for s in samples {
        let id = &s.pair.id;
        let dir = root.join(id);
        let images = dir.join("images");
        let masks = dir.join("masks");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
        write_gray_png(&images.join(format!("{id}.png")), &s.pair.image)?;
        let size = s.pair.image.shape().h;
        for (k, b) in s.blobs.iter().enumerate() {
            write_mask_png(&masks.join(format!("{id}_{k:03}.png")), &b.mask(size))?;
        }
    }
    Ok(())
}

// ---- manifests --------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

/// Seeded single holdout: `val_count` ids go to validation.
pub fn holdout_split(ids: &[String], val_count: usize, seed: u64) -> Result<Vec<ManifestEntry>> {
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Argument("sample ids are not unique".into()));
    }
    if val_count == 0 || val_count >= ids.len() {
        return Err(Error::Argument(format!(
            "validation size {val_count} must lie in [1, {})",
            ids.len()
        )));
    }
    let mut sorted: Vec<&String> = unique.into_iter().collect();
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val: BTreeSet<&String> = sorted[..val_count].iter().copied().collect();
    Ok(ids
        .iter()
        .map(|id| ManifestEntry {
            id: id.clone(),
            split: if val.contains(id) {
                Split::Val
            } else {
                Split::Train
            },
        })
        .collect())
}

/// Partitions `samples` by manifest; every sample must be listed.
pub fn apply_split(
    samples: Vec<SamplePair>,
    manifest: &[ManifestEntry],
) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
    let lookup: std::collections::HashMap<&str, Split> =
        manifest.iter().map(|e| (e.id.as_str(), e.split)).collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in samples {
        match lookup.get(s.id.as_str()) {
            Some(Split::Train) => train.push(s),
            Some(Split::Val) => val.push(s),
            None => {
                return Err(Error::Argument(format!(
                    "sample `{}` is not in the manifest",
                    s.id
                )))
            }
        }
    }
    Ok((train, val))
}

pub fn write_manifest(path: &Path, manifest: &[ManifestEntry]) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
