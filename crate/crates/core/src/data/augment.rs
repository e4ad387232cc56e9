//! Seeded augmentation pipelines.
//!
//! Each pipeline first samples a plan from the random stream and then
//! applies it, so probabilities can be measured on plans alone. Geometric
//! steps act on image and mask together; photometric steps touch the image
//! only.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{crop, Image, Mask, Permute};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Binary,
    Multiclass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub pipeline: Pipeline,
    /// Master gate of the binary pipeline, and each gate of the multi-class one.
    pub p_apply: f64,
    pub p_transform: f64,
    pub p_crop: f64,
    /// Crop side as a fraction of the input side.
    pub crop_window: f64,
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub blur_sigma: (f64, f64),
    pub shear_deg: f64,
    pub zoom: f64,
    pub shift: f64,
    pub rotation_deg: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            pipeline: Pipeline::Binary,
            p_apply: 0.5,
            p_transform: 0.5,
            p_crop: 0.2,
            crop_window: 224.0 / 384.0,
            hue: 0.02,
            saturation: 0.1,
            value: 0.1,
            brightness: 0.1,
            contrast: 0.1,
            blur_sigma: (0.1, 1.5),
            shear_deg: 0.1,
            zoom: 0.2,
            shift: 0.25,
            rotation_deg: 180.0,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn multiclass() -> Self {
        AugmentationConfig {
            pipeline: Pipeline::Multiclass,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_apply", self.p_apply),
            ("p_transform", self.p_transform),
            ("p_crop", self.p_crop),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.crop_window > 0.0 && self.crop_window <= 1.0) {
            return Err(Error::Config(format!("crop window {} outside (0, 1]", self.crop_window)));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(Error::Config("blur sigma range invalid".into()));
        }
        if !(self.zoom >= 0.0 && self.zoom < 1.0) {
            return Err(Error::Config(format!("zoom range {} outside [0, 1)", self.zoom)));
        }
        Ok(())
    }

    /// Stream for augmenting sample `index` in `epoch`.
    pub fn rng(&self, epoch: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(index);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CropKind {
    Random { y0: usize, x0: usize },
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlipKind {
    Horizontal,
    Vertical,
    Both,
}

/// Sampled decisions of the binary pipeline. Every decision is drawn even
/// when the master gate is closed, so the stream layout is fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryPlan {
    pub apply: bool,
    pub rotate90: Option<u8>,
    pub flip: Option<FlipKind>,
    pub hsv: Option<(f64, f64, f64)>,
    pub brightness_contrast: Option<(f64, f64)>,
    pub blur: Option<f64>,
    pub transpose: bool,
    pub crop: Option<CropKind>,
}

fn sym(rng: &mut ChaCha8Rng, r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        rng.gen_range(-r..=r)
    }
}

impl BinaryPlan {
    pub fn sample(rng: &mut ChaCha8Rng, cfg: &AugmentationConfig, size: usize) -> Self {
        let apply = rng.gen_bool(cfg.p_apply);
        let rotate90 = rng.gen_bool(cfg.p_transform);
        let k = rng.gen_range(1u8..=3);
        let flip = rng.gen_bool(cfg.p_transform);
        let flip_kind = match rng.gen_range(0..3) {
            0 => FlipKind::Horizontal,
            1 => FlipKind::Vertical,
            _ => FlipKind::Both,
        };
        let hsv = rng.gen_bool(cfg.p_transform);
        let hsv_v = (sym(rng, cfg.hue), sym(rng, cfg.saturation), sym(rng, cfg.value));
        let bc = rng.gen_bool(cfg.p_transform);
        let bc_v = (sym(rng, cfg.brightness), sym(rng, cfg.contrast));
        let blur = rng.gen_bool(cfg.p_transform);
        let sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        let transpose = rng.gen_bool(cfg.p_transform);
        let crop = rng.gen_bool(cfg.p_crop);
        let window = crop_side(size, cfg.crop_window);
        let random = rng.gen_bool(0.5);
        let y0 = rng.gen_range(0..=size - window);
        let x0 = rng.gen_range(0..=size - window);
        BinaryPlan {
            apply,
            rotate90: rotate90.then_some(k),
            flip: flip.then_some(flip_kind),
            hsv: hsv.then_some(hsv_v),
            brightness_contrast: bc.then_some(bc_v),
            blur: blur.then_some(sigma),
            transpose,
            crop: crop.then_some(if random { CropKind::Random { y0, x0 } } else { CropKind::Center }),
        }
    }

    pub fn apply(&self, image: &Image, mask: &Mask, size: usize, crop_window: f64) -> (Image, Mask) {
        let (mut img, mut m) = (image.clone(), mask.clone());
        if self.apply {
            if let Some(k) = self.rotate90 {
                (img, m) = Permute::Rot90(k).apply(&img, &m);
            }
            if let Some(f) = self.flip {
                if matches!(f, FlipKind::Horizontal | FlipKind::Both) {
                    (img, m) = Permute::HFlip.apply(&img, &m);
                }
                if matches!(f, FlipKind::Vertical | FlipKind::Both) {
                    (img, m) = Permute::VFlip.apply(&img, &m);
                }
            }
            if let Some((dh, ds, dv)) = self.hsv {
                hsv_shift(&mut img, dh, ds, dv);
            }
            if let Some((b, c)) = self.brightness_contrast {
                brightness_contrast(&mut img, b, c);
            }
            if let Some(sigma) = self.blur {
                img = gaussian_blur(&img, sigma);
            }
            if self.transpose {
                (img, m) = Permute::Transpose.apply(&img, &m);
            }
            if let Some(kind) = self.crop {
                let side = crop_side(img.h.min(img.w), crop_window);
                let (y0, x0) = match kind {
                    CropKind::Random { y0, x0 } => (y0.min(img.h - side), x0.min(img.w - side)),
                    CropKind::Center => ((img.h - side) / 2, (img.w - side) / 2),
                };
                (img, m) = crop(&img, &m, y0, x0, side, side);
            }
        }
        (img.resize(size, size), m.resize(size, size))
    }
}

pub fn crop_side(size: usize, fraction: f64) -> usize {
    ((size as f64 * fraction).round() as usize).clamp(1, size)
}

/// Binary pipeline: master gate, then each transform at its own probability.
pub fn augment_binary(
    image: &Image,
    mask: &Mask,
    rng: &mut ChaCha8Rng,
    cfg: &AugmentationConfig,
    size: usize,
) -> (Image, Mask) {
    let plan = BinaryPlan::sample(rng, cfg, image.h.min(image.w));
    plan.apply(image, mask, size, cfg.crop_window)
}

/// Inverse-mapped affine warp about the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    /// Magnification along x and y (greater than 1 enlarges content).
    pub zoom: (f64, f64),
    /// Translation in pixels.
    pub shift: (f64, f64),
    pub hflip: bool,
    pub vflip: bool,
}

impl Affine {
    pub fn identity() -> Self {
        Affine {
            rotation_deg: 0.0,
            shear_deg: 0.0,
            zoom: (1.0, 1.0),
            shift: (0.0, 0.0),
            hflip: false,
            vflip: false,
        }
    }

    /// Output-to-source map of pixel centers: `[a, b, c; d, e, f]` acting on
    /// `(x, y)` relative to the center.
    fn inverse(&self) -> [f64; 4] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let sh = self.shear_deg.to_radians().tan();
        // Forward: flip, then zoom, shear, rotate. Invert step by step.
        let fx = if self.hflip { -1.0 } else { 1.0 };
        let fy = if self.vflip { -1.0 } else { 1.0 };
        // rotate^-1
        let r = [c, s, -s, c];
        // shear^-1: x' = x - sh*y
        let shr = [r[0] - sh * r[2], r[1] - sh * r[3], r[2], r[3]];
        // zoom^-1 then flip^-1
        [
            fx * shr[0] / self.zoom.0,
            fx * shr[1] / self.zoom.0,
            fy * shr[2] / self.zoom.1,
            fy * shr[3] / self.zoom.1,
        ]
    }

    /// Source coordinates for every output pixel center.
    fn sources(&self, h: usize, w: usize) -> Vec<(f64, f64)> {
        let m = self.inverse();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx - self.shift.0;
                let dy = y as f64 - cy - self.shift.1;
                out.push((m[2] * dx + m[3] * dy + cy, m[0] * dx + m[1] * dy + cx));
            }
        }
        out
    }

    /// Bilinear image warp and nearest-neighbour mask warp with zero fill.
    pub fn apply(&self, image: &Image, mask: &Mask) -> (Image, Mask) {
        let (h, w) = (image.h, image.w);
        let src = self.sources(h, w);
        let inside = |y: f64, x: f64| y > -0.5 && x > -0.5 && y < h as f64 - 0.5 && x < w as f64 - 0.5;
        let nearest: Vec<Option<usize>> = src
            .iter()
            .map(|&(y, x)| inside(y, x).then(|| (y.round() as usize).min(h - 1) * w + (x.round() as usize).min(w - 1)))
            .collect();
        let mut out = Image::new(h, w);
        for c in 0..3 {
            let plane = image.plane(c);
            let at = |y: isize, x: isize| {
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    0.0
                } else {
                    plane[y as usize * w + x as usize]
                }
            };
            for (o, (&(y, x), near)) in out.plane_mut(c).iter_mut().zip(src.iter().zip(&nearest)) {
                if near.is_none() {
                    continue;
                }
                let (y0, x0) = (y.floor(), x.floor());
                let (ty, tx) = ((y - y0) as f32, (x - x0) as f32);
                let (y0, x0) = (y0 as isize, x0 as isize);
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                *o = top * (1.0 - ty) + bot * ty;
            }
        }
        (out, mask.remap(h, w, &nearest))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Photometric {
    GaussianBlur(f64),
    AverageBlur(usize),
    MedianBlur,
    Sharpen(f32),
    GaussianNoise { sigma: f32, seed: u64 },
    ChannelAdd([f32; 3]),
    ChannelMultiply([f32; 3]),
    Contrast(f32),
}

impl Photometric {
    pub fn apply(&self, image: &Image) -> Image {
        let mut img = image.clone();
        match *self {
            Photometric::GaussianBlur(s) => img = gaussian_blur(&img, s),
            Photometric::AverageBlur(k) => img = box_blur(&img, k),
            Photometric::MedianBlur => img = median3(&img),
            Photometric::Sharpen(a) => {
                let blurred = box_blur(&img, 3);
                for (v, b) in img.data.iter_mut().zip(&blurred.data) {
                    *v += a * (*v - b);
                }
            }
            Photometric::GaussianNoise { sigma, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = rand_distr_normal(sigma);
                for v in img.data.iter_mut() {
                    *v += normal(&mut rng);
                }
            }
            Photometric::ChannelAdd(d) => {
                for (c, &dc) in d.iter().enumerate() {
                    img.plane_mut(c).iter_mut().for_each(|v| *v += dc);
                }
            }
            Photometric::ChannelMultiply(m) => {
                for (c, &mc) in m.iter().enumerate() {
                    img.plane_mut(c).iter_mut().for_each(|v| *v *= mc);
                }
            }
            Photometric::Contrast(f) => {
                let mean = img.data.iter().sum::<f32>() / img.data.len() as f32;
                img.data.iter_mut().for_each(|v| *v = mean + f * (*v - mean));
            }
        }
        img.clamp01();
        img
    }
}

/// Box-Muller sampler with standard deviation `sigma`.
fn rand_distr_normal(sigma: f32) -> impl Fn(&mut ChaCha8Rng) -> f32 {
    move |rng| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32 * sigma
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MulticlassPlan {
    pub affine: Option<Affine>,
    pub photometric: Vec<Photometric>,
}

impl MulticlassPlan {
    pub fn sample(rng: &mut ChaCha8Rng, cfg: &AugmentationConfig, size: usize) -> Self {
        let geo = rng.gen_bool(cfg.p_apply);
        let affine = Affine {
            rotation_deg: sym(rng, cfg.rotation_deg),
            shear_deg: sym(rng, cfg.shear_deg),
            zoom: (
                rng.gen_range(1.0 - cfg.zoom..=1.0 + cfg.zoom),
                rng.gen_range(1.0 - cfg.zoom..=1.0 + cfg.zoom),
            ),
            shift: (sym(rng, cfg.shift) * size as f64, sym(rng, cfg.shift) * size as f64),
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
        };
        let photo = rng.gen_bool(cfg.p_apply);
        let count = rng.gen_range(0..=3usize);
        let mut kinds: Vec<usize> = (0..8).collect();
        kinds.shuffle(rng);
        let mut photometric = Vec::new();
        for &k in &kinds[..count] {
            photometric.push(match k {
                0 => Photometric::GaussianBlur(rng.gen_range(0.0..=1.0f64).max(1e-3)),
                1 => Photometric::AverageBlur(*[3usize, 5].choose(rng).expect("non-empty")),
                2 => Photometric::MedianBlur,
                3 => Photometric::Sharpen(rng.gen_range(0.0..=1.0)),
                4 => Photometric::GaussianNoise {
                    sigma: rng.gen_range(0.0..=0.05),
                    seed: rng.gen(),
                },
                5 => Photometric::ChannelAdd([0; 3].map(|_: u8| rng.gen_range(-0.04..=0.04))),
                6 => Photometric::ChannelMultiply([0; 3].map(|_: u8| rng.gen_range(0.9..=1.1))),
                _ => Photometric::Contrast(rng.gen_range(0.75..=1.5)),
            });
        }
        MulticlassPlan {
            affine: geo.then_some(affine),
            photometric: if photo { photometric } else { Vec::new() },
        }
    }

    pub fn apply(&self, image: &Image, mask: &Mask) -> (Image, Mask) {
        let (mut img, m) = match &self.affine {
            Some(a) => a.apply(image, mask),
            None => (image.clone(), mask.clone()),
        };
        for p in &self.photometric {
            img = p.apply(&img);
        }
        img.clamp01();
        (img, m)
    }
}

/// Multi-class pipeline: independent affine and photometric gates.
pub fn augment_multiclass(
    image: &Image,
    mask: &Mask,
    rng: &mut ChaCha8Rng,
    cfg: &AugmentationConfig,
) -> (Image, Mask) {
    MulticlassPlan::sample(rng, cfg, image.h.min(image.w)).apply(image, mask)
}

/// Dispatches on `cfg.pipeline`; output is `size x size`.
pub fn augment(image: &Image, mask: &Mask, rng: &mut ChaCha8Rng, cfg: &AugmentationConfig, size: usize) -> (Image, Mask) {
    match cfg.pipeline {
        Pipeline::Binary => augment_binary(image, mask, rng, cfg, size),
        Pipeline::Multiclass => {
            let (i, m) = augment_multiclass(image, mask, rng, cfg);
            (i.resize(size, size), m.resize(size, size))
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Hue rotation (fraction of a turn) plus additive saturation and value shifts.
pub fn hsv_shift(img: &mut Image, dh: f64, ds: f64, dv: f64) {
    let n = img.h * img.w;
    for i in 0..n {
        let (r, g, b) = (img.data[i], img.data[n + i], img.data[2 * n + i]);
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb(
            h + dh as f32,
            (s + ds as f32).clamp(0.0, 1.0),
            (v + dv as f32).clamp(0.0, 1.0),
        );
        img.data[i] = r;
        img.data[n + i] = g;
        img.data[2 * n + i] = b;
    }
}

/// `x' = (1 + c) x + b`, clamped.
pub fn brightness_contrast(img: &mut Image, b: f64, c: f64) {
    let (b, a) = (b as f32, 1.0 + c as f32);
    img.data.iter_mut().for_each(|v| *v = (a * *v + b).clamp(0.0, 1.0));
}

fn convolve_separable(img: &Image, taps: &[f32]) -> Image {
    let r = (taps.len() / 2) as isize;
    let (h, w) = (img.h as isize, img.w as isize);
    let mut out = Image::new(img.h, img.w);
    let mut tmp = vec![0.0f32; img.h * img.w];
    for c in 0..3 {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let xx = (x + k as isize - r).clamp(0, w - 1);
                    acc += t * src[(y * w + xx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let yy = (y + k as isize - r).clamp(0, h - 1);
                    acc += t * tmp[(yy * w + x) as usize];
                }
                dst[(y * w + x) as usize] = acc;
            }
        }
    }
    out
}

pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut taps: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let s: f32 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    convolve_separable(img, &taps)
}

pub fn box_blur(img: &Image, k: usize) -> Image {
    convolve_separable(img, &vec![1.0 / k as f32; k])
}

fn median3(img: &Image) -> Image {
    let (h, w) = (img.h as isize, img.w as isize);
    let mut out = Image::new(img.h, img.w);
    for c in 0..3 {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut win = [0.0f32; 9];
                let mut k = 0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let yy = (y + dy).clamp(0, h - 1);
                        let xx = (x + dx).clamp(0, w - 1);
                        win[k] = src[(yy * w + xx) as usize];
                        k += 1;
                    }
                }
                win.sort_by(f32::total_cmp);
                dst[(y * w + x) as usize] = win[4];
            }
        }
    }
    out
}
