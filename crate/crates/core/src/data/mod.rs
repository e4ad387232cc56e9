//! Synthetic datasets, augmentation, splits and batching.

pub mod augment;
pub mod cache;
pub mod image;
pub mod splits;
pub mod synthetic;

pub use augment::{augment, augment_binary, augment_multiclass, AugmentationConfig, Pipeline};
pub use image::{Image, Mask};
pub use splits::{make_splits, Split, SplitMode};
pub use synthetic::{generate_sample, SyntheticSpec};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, Target};
use crate::tensor::{Element, Shape, Tensor};

/// Per-channel normalization constants applied to model inputs.
pub const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Foreground classes; 1 for binary data.
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Generates `count` samples in memory.
    pub fn synthetic(spec: &SyntheticSpec, count: usize) -> Result<Self> {
        spec.validate()?;
        let samples = (0..count)
            .map(|i| {
                let (image, mask) = generate_sample(spec, i as u64);
                Sample {
                    id: format!("{i:05}"),
                    image,
                    mask,
                }
            })
            .collect();
        Ok(Dataset {
            classes: spec.classes(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.classes == 1
    }
}

/// Normalized `(N,3,size,size)` tensor from images (resized bilinearly).
pub fn image_batch<T: Element>(images: &[&Image], size: usize) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let plane = size * size;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        let r = img.resize(size, size);
        for c in 0..3 {
            data.extend(r.plane(c).iter().map(|&v| T::from_f64c(((v - MEAN[c]) / STD[c]) as f64)));
        }
    }
    Tensor::from_vec(Shape::new(images.len(), 3, size, size), data)
}

/// Loss target from masks (resized nearest-neighbour). Binary datasets get
/// a hard-pixel weighted mask, multi-class datasets a label map.
pub fn target_batch<T: Element>(masks: &[&Mask], size: usize, classes: usize, cfg: &LossConfig) -> Result<Target<T>> {
    let resized: Vec<Mask> = masks.iter().map(|m| m.resize(size, size)).collect();
    if classes == 1 {
        let data = resized
            .iter()
            .flat_map(|m| m.labels.iter().map(|&l| if l != 0 { T::one() } else { T::zero() }))
            .collect();
        let mask = Tensor::from_vec(Shape::new(masks.len(), 1, size, size), data)?;
        Target::binary(mask, cfg)
    } else {
        Ok(Target::Classes {
            labels: resized.iter().flat_map(|m| m.labels.iter().copied()).collect(),
            n: masks.len(),
            h: size,
            w: size,
        })
    }
}
