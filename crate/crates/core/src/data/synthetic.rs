//! Procedural polyp phantoms: textured background with elliptical blobs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::image::{Image, Mask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub size: usize,
    /// Inclusive range of blob counts per image.
    pub n_blobs: (usize, usize),
    /// Class probabilities for blobs. Empty means a binary dataset.
    pub blob_class_probs: Vec<f64>,
    pub texture_octaves: u32,
    /// Semi-axis range as a fraction of `size`.
    pub radius: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            size: 96,
            n_blobs: (1, 3),
            blob_class_probs: Vec::new(),
            texture_octaves: 4,
            radius: (0.08, 0.2),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn multiclass(size: usize, seed: u64) -> Self {
        SyntheticSpec {
            size,
            blob_class_probs: vec![0.5, 0.5],
            seed,
            ..Self::default()
        }
    }

    /// Number of foreground classes (1 for binary data).
    pub fn classes(&self) -> usize {
        self.blob_class_probs.len().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return Err(Error::Config(format!("size {} must be a positive multiple of 32", self.size)));
        }
        if self.n_blobs.0 > self.n_blobs.1 {
            return Err(Error::Config("n_blobs range is inverted".into()));
        }
        let (lo, hi) = self.radius;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::Config(format!("radius range ({lo}, {hi}) invalid")));
        }
        // Smallest ellipse must cover at least nine pixels.
        let r = lo * self.size as f64;
        if std::f64::consts::PI * r * r < 9.0 {
            return Err(Error::Config(format!("blobs of radius {r:.2} px are below 9 pixels")));
        }
        if self.blob_class_probs.iter().any(|&p| !(p >= 0.0)) || self.blob_class_probs.len() > 254 {
            return Err(Error::Config("class probabilities must be non-negative".into()));
        }
        if !self.blob_class_probs.is_empty() && self.blob_class_probs.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("class probabilities sum to zero".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("spec serializes")))
    }
}

/// Tissue base color and per-class blob tints.
const BASE: [f32; 3] = [0.72, 0.42, 0.38];
const TINTS: [[f32; 3]; 2] = [[0.22, 0.12, 0.02], [-0.18, 0.1, 0.3]];

fn value_noise(rng: &mut ChaCha8Rng, size: usize, octaves: u32) -> Vec<f32> {
    let mut out = vec![0.0f32; size * size];
    let mut amp = 0.5f32;
    for o in 0..octaves {
        let cells = 2usize << o;
        let grid: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scale = cells as f32 / size as f32;
        for y in 0..size {
            let fy = (y as f32 + 0.5) * scale;
            let (gy, ty) = (fy as usize, smooth(fy.fract()));
            for x in 0..size {
                let fx = (x as f32 + 0.5) * scale;
                let (gx, tx) = (fx as usize, smooth(fx.fract()));
                let at = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
                let top = at(gy, gx) * (1.0 - tx) + at(gy, gx + 1) * tx;
                let bot = at(gy + 1, gx) * (1.0 - tx) + at(gy + 1, gx + 1) * tx;
                out[y * size + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        amp *= 0.5;
    }
    out
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

fn pick_class(rng: &mut ChaCha8Rng, probs: &[f64]) -> u8 {
    if probs.len() <= 1 {
        return 1;
    }
    let total: f64 = probs.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (k, &p) in probs.iter().enumerate() {
        if u < p {
            return k as u8 + 1;
        }
        u -= p;
    }
    probs.len() as u8
}

/// Generates sample `index`; the output depends only on `(spec, index)`.
pub fn generate_sample(spec: &SyntheticSpec, index: u64) -> (Image, Mask) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let n = spec.size;
    let mut image = Image::new(n, n);
    let mut mask = Mask::new(n, n);
    let tone = rng.gen_range(-0.06f32..0.06);
    let noise = value_noise(&mut rng, n, spec.texture_octaves);
    for c in 0..3 {
        let base = BASE[c] + tone;
        for (v, &z) in image.plane_mut(c).iter_mut().zip(&noise) {
            *v = base + 0.18 * z;
        }
    }
    let blobs = rng.gen_range(spec.n_blobs.0..=spec.n_blobs.1);
    let (rlo, rhi) = spec.radius;
    for _ in 0..blobs {
        let class = pick_class(&mut rng, &spec.blob_class_probs);
        let a = rng.gen_range(rlo..=rhi) * n as f64;
        let b = rng.gen_range(rlo..=rhi) * n as f64;
        let margin = a.max(b) * 0.5;
        let cy = rng.gen_range(margin..n as f64 - margin);
        let cx = rng.gen_range(margin..n as f64 - margin);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let shift = rng.gen_range(0.8f32..1.2);
        let tint = TINTS[(class as usize - 1) % TINTS.len()];
        let (s, co) = theta.sin_cos();
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let u = (dx * co + dy * s) / a;
                let v = (-dx * s + dy * co) / b;
                let d = u * u + v * v;
                if d <= 1.0 {
                    mask.labels[y * n + x] = class;
                }
                // Soft rim: full tint inside, fading over the boundary.
                let alpha = ((1.15 - d) / 0.3).clamp(0.0, 1.0) as f32;
                if alpha > 0.0 {
                    for (c, t) in tint.iter().enumerate() {
                        image.plane_mut(c)[y * n + x] += alpha * shift * t;
                    }
                }
            }
        }
    }
    image.clamp01();
    (image, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_index() {
        let spec = SyntheticSpec { size: 32, ..SyntheticSpec::default() };
        assert_eq!(generate_sample(&spec, 3), generate_sample(&spec, 3));
        assert_ne!(generate_sample(&spec, 3).1, generate_sample(&spec, 4).1);
    }

    #[test]
    fn zero_blobs_is_background() {
        let spec = SyntheticSpec { size: 32, n_blobs: (0, 0), ..SyntheticSpec::default() };
        assert_eq!(generate_sample(&spec, 0).1.foreground(), 0);
    }

    #[test]
    fn multiclass_labels_are_valid() {
        let spec = SyntheticSpec::multiclass(64, 1);
        for i in 0..20 {
            let (img, m) = generate_sample(&spec, i);
            assert!(m.labels.iter().all(|&l| l <= 2));
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn spec_checks() {
        assert!(SyntheticSpec::default().validate().is_ok());
        assert!(SyntheticSpec { size: 48, ..SyntheticSpec::default() }.validate().is_err());
        assert!(SyntheticSpec { radius: (0.01, 0.2), ..SyntheticSpec::default() }.validate().is_err());
    }
}
