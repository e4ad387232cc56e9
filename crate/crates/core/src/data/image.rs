//! Planar RGB images, label masks and the geometric primitives shared by
//! both augmentation pipelines.

use crate::tensor::{kernels, Shape, Tensor};

/// Channel-major RGB image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

/// Single-channel label map; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image { h, w, data: vec![0.0; 3 * h * w] }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, 3, self.h, self.w), self.data.clone()).expect("image layout")
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, h: usize, w: usize) -> Image {
        if (h, w) == (self.h, self.w) {
            return self.clone();
        }
        let t = kernels::bilinear_resize(&self.to_tensor(), h, w).expect("positive size");
        Image { h, w, data: t.into_data() }
    }

    /// Applies a per-pixel index map (`None` fills with zero) to every channel.
    pub fn remap(&self, h: usize, w: usize, src: &[Option<usize>]) -> Image {
        let mut out = Image::new(h, w);
        for c in 0..3 {
            let plane = self.plane(c);
            for (o, s) in out.plane_mut(c).iter_mut().zip(src) {
                *o = s.map_or(0.0, |i| plane[i]);
            }
        }
        out
    }
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Mask { h, w, labels: vec![0; h * w] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    pub fn foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn remap(&self, h: usize, w: usize, src: &[Option<usize>]) -> Mask {
        Mask {
            h,
            w,
            labels: src.iter().map(|s| s.map_or(0, |i| self.labels[i])).collect(),
        }
    }

    /// Nearest-neighbour resize with half-pixel centers.
    pub fn resize(&self, h: usize, w: usize) -> Mask {
        if (h, w) == (self.h, self.w) {
            return self.clone();
        }
        let ys: Vec<usize> = (0..h).map(|y| nearest(y, h, self.h)).collect();
        let xs: Vec<usize> = (0..w).map(|x| nearest(x, w, self.w)).collect();
        let mut labels = Vec::with_capacity(h * w);
        for &y in &ys {
            for &x in &xs {
                labels.push(self.get(y, x));
            }
        }
        Mask { h, w, labels }
    }
}

fn nearest(dst: usize, out: usize, inp: usize) -> usize {
    let s = ((dst as f64 + 0.5) * inp as f64 / out as f64).floor() as usize;
    s.min(inp - 1)
}

/// Exact pixel permutations applied identically to image and mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Permute {
    /// Counter-clockwise quarter turns (1..=3).
    Rot90(u8),
    HFlip,
    VFlip,
    Transpose,
}

impl Permute {
    /// Output size and source index per output pixel.
    pub fn index_map(self, h: usize, w: usize) -> (usize, usize, Vec<Option<usize>>) {
        let (oh, ow) = match self {
            Permute::Rot90(k) if k % 2 == 1 => (w, h),
            Permute::Transpose => (w, h),
            _ => (h, w),
        };
        let mut src = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = match self {
                    Permute::Rot90(k) => match k % 4 {
                        1 => (x, w - 1 - y),
                        2 => (h - 1 - y, w - 1 - x),
                        3 => (h - 1 - x, y),
                        _ => (y, x),
                    },
                    Permute::HFlip => (y, w - 1 - x),
                    Permute::VFlip => (h - 1 - y, x),
                    Permute::Transpose => (x, y),
                };
                src.push(Some(sy * w + sx));
            }
        }
        (oh, ow, src)
    }

    pub fn apply(self, image: &Image, mask: &Mask) -> (Image, Mask) {
        let (oh, ow, src) = self.index_map(image.h, image.w);
        (image.remap(oh, ow, &src), mask.remap(oh, ow, &src))
    }
}

/// Crops the window with top-left `(y0, x0)` and side `(ch, cw)`.
pub fn crop(image: &Image, mask: &Mask, y0: usize, x0: usize, ch: usize, cw: usize) -> (Image, Mask) {
    let mut src = Vec::with_capacity(ch * cw);
    for y in y0..y0 + ch {
        for x in x0..x0 + cw {
            src.push(Some(y * image.w + x));
        }
    }
    (image.remap(ch, cw, &src), mask.remap(ch, cw, &src))
}
