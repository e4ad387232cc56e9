//! Encoder + decoder assembly and complexity accounting.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{Decoder, DecoderConfig, DecoderOutputs, RaVariant};
use crate::encoder::{Encoder, EncoderConfig, EncoderStages, PyramidFeatures};
use crate::error::{Error, Result};
use crate::nn::{LayoutBuilder, ParamSpec, ParamStore, Session};
use crate::tensor::{Element, OpKind, Shape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// CPU-sized configuration: `C = 32`, two decoder blocks.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig::tiny(),
            decoder: DecoderConfig {
                width: 32,
                repeats: 2,
                ..DecoderConfig::default()
            },
        }
    }

    /// Multi-class variant of [`ModelConfig::tiny`] with softmax reverse attention.
    pub fn tiny_multiclass(n_classes: usize) -> Self {
        let mut cfg = Self::tiny();
        cfg.decoder.n_classes = n_classes;
        cfg.decoder.ra_variant = RaVariant::Softmax;
        cfg
    }

    /// `C = 224`, four decoder blocks.
    pub fn full_size() -> Self {
        ModelConfig {
            encoder: EncoderConfig::full_size(),
            decoder: DecoderConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.decoder_width != self.decoder.width {
            return Err(Error::Config(format!(
                "encoder compresses to {} channels but decoder width is {}",
                self.encoder.decoder_width, self.decoder.width
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub pyramid: PyramidFeatures,
    pub stages: EncoderStages,
    pub decoder: DecoderOutputs,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    specs: Vec<ParamSpec>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = LayoutBuilder::new();
        let encoder = Encoder::declare(&mut b, &config.encoder)?;
        let decoder = Decoder::declare(&mut b, &config.decoder)?;
        Ok(Model {
            config,
            encoder,
            decoder,
            specs: b.into_specs(),
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn init_params<T: Element>(&self, seed: u64) -> ParamStore<T> {
        ParamStore::initialize(&self.specs, seed)
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, image: Var) -> Result<ModelOutput> {
        let shape = s.graph.shape(image);
        let (pyramid, stages) = self.encoder.forward(s, image)?;
        let decoder = self.decoder.forward(s, &pyramid, (shape.h, shape.w))?;
        Ok(ModelOutput {
            pyramid,
            stages,
            decoder,
        })
    }

    /// Eval-mode final logits for a batch of images.
    pub fn predict<T: Element>(&self, store: &mut ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::new(store, false, false);
        let x = s.input(images.clone(), false);
        let out = self.forward(&mut s, x)?;
        Ok(s.graph.value(out.decoder.final_logits).clone())
    }
}

/// Trainable parameter counts and forward cost at one input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    pub params: usize,
    pub encoder_params: usize,
    pub decoder_params: usize,
    /// `2 * MACs` over convolutions, linear layers and attention products.
    pub flops: u64,
    pub conv_flops: u64,
    pub linear_flops: u64,
    pub attention_flops: u64,
}

/// Counts trainable scalars and forward FLOPs for one `input_size` square image.
/// Normalization, activations and pooling are not included in `flops`.
pub fn count_params_flops(cfg: &ModelConfig, input_size: usize) -> Result<Complexity> {
    let model = Model::new(cfg.clone())?;
    let mut store = model.init_params::<f32>(0);
    let params = store.count_trainable("");
    let encoder_params = store.count_trainable("encoder.");
    let decoder_params = store.count_trainable("decoder.");
    let mut s = Session::new(&mut store, false, false);
    let x = s.input(Tensor::zeros(Shape::new(1, 3, input_size, input_size)), false);
    model.forward(&mut s, x)?;
    let by_kind = |k: OpKind| -> u64 { 2 * s.graph.macs_of(k) };
    let conv_flops = by_kind(OpKind::Conv2d);
    let linear_flops = by_kind(OpKind::Linear);
    let attention_flops = by_kind(OpKind::Matmul);
    Ok(Complexity {
        params,
        encoder_params,
        decoder_params,
        flops: 2 * s.graph.macs(),
        conv_flops,
        linear_flops,
        attention_flops,
    })
}
