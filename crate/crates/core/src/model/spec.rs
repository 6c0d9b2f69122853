use jscc_autodiff::{conv_output_size, conv_transpose_output_size};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ae,
    Vae,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ae => "ae",
            ModelKind::Vae => "vae",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    None,
    /// Two parallel dense layers over the flattened latent.
    FullyConnected,
    /// Two parallel 3x3 convolutions preserving the latent shape.
    Convolutional,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Prelu,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    Sigmoid,
    None,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    /// `[height, width]`.
    pub kernel: [usize; 2],
    pub stride: usize,
    pub padding: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "yes")]
    pub batch_norm: bool,
}

impl ConvLayerSpec {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            out_channels,
            kernel: [kernel, kernel],
            stride,
            padding,
            activation: Activation::Prelu,
            batch_norm: true,
        }
    }
}

/// Five-layer encoder: two stride-2 5x5 layers followed by three 3x3 layers,
/// ending in 16 channels at 1/4 the input resolution. On a 3-channel input
/// this yields `k/n = 16·(H/4)·(W/4) / 2 / (3·H·W) = 1/6`.
pub fn default_encoder() -> Vec<ConvLayerSpec> {
    vec![
        ConvLayerSpec::new(16, 5, 2, 2),
        ConvLayerSpec::new(32, 5, 2, 2),
        ConvLayerSpec::new(32, 3, 1, 1),
        ConvLayerSpec::new(32, 3, 1, 1),
        ConvLayerSpec::new(16, 3, 1, 1),
    ]
}

/// Channel/height/width triple.
pub type Shape3 = [usize; 3];

/// One decoder stage mirroring an encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub activation: Activation,
    pub batch_norm: bool,
    /// Last stage: applies the output activation instead of batch norm/PReLU.
    pub is_output: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// `[channels, height, width]`.
    pub input_shape: Shape3,
    #[serde(default = "default_encoder")]
    pub encoder_layers: Vec<ConvLayerSpec>,
    pub sampler: SamplerKind,
    /// Complex channel uses per image.
    pub k: usize,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

impl ModelSpec {
    /// Default plan on `[3, size, size]` images with `k` fixed by the encoder.
    pub fn with_default_plan(kind: ModelKind, size: usize) -> Self {
        let mut spec = Self {
            kind,
            input_shape: [3, size, size],
            encoder_layers: default_encoder(),
            sampler: match kind {
                ModelKind::Ae => SamplerKind::None,
                ModelKind::Vae => SamplerKind::Convolutional,
            },
            k: 0,
            output_activation: OutputActivation::Sigmoid,
        };
        let latent = spec.encoder_shapes().expect("default plan fits")[5];
        spec.k = latent.iter().product::<usize>() / 2;
        spec
    }

    /// CIFAR-10 sized model (32x32): k = 512.
    pub fn cifar(kind: ModelKind) -> Self {
        Self::with_default_plan(kind, 32)
    }

    /// STL-10 sized model (96x96): k = 4608.
    pub fn stl10(kind: ModelKind) -> Self {
        Self::with_default_plan(kind, 96)
    }

    pub fn with_sampler(mut self, sampler: SamplerKind) -> Self {
        self.sampler = sampler;
        self
    }

    /// Source dimension `n`.
    pub fn n(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn compression_rate(&self) -> f64 {
        self.k as f64 / self.n() as f64
    }

    /// Input shape followed by the shape after each encoder layer.
    pub fn encoder_shapes(&self) -> Result<Vec<Shape3>> {
        let mut shapes = vec![self.input_shape];
        for (i, l) in self.encoder_layers.iter().enumerate() {
            let [_, h, w] = *shapes.last().unwrap();
            let oh = conv_output_size(h, l.kernel[0], l.stride, l.padding);
            let ow = conv_output_size(w, l.kernel[1], l.stride, l.padding);
            match (oh, ow) {
                (Some(oh), Some(ow)) => shapes.push([l.out_channels, oh, ow]),
                _ => {
                    return Err(Error::Config(format!(
                        "encoder layer {i} ({l:?}) does not fit its {h}x{w} input"
                    )))
                }
            }
        }
        Ok(shapes)
    }

    /// Shape of the latent `z_s` (encoder output; the sampler preserves it).
    pub fn latent_shape(&self) -> Result<Shape3> {
        Ok(*self.encoder_shapes()?.last().unwrap())
    }

    pub fn latent_len(&self) -> Result<usize> {
        Ok(self.latent_shape()?.iter().product())
    }

    /// Decoder stages, mirroring the encoder in reverse order.
    pub fn decoder_layers(&self) -> Result<Vec<DecoderLayer>> {
        let shapes = self.encoder_shapes()?;
        let count = self.encoder_layers.len();
        let mut layers = Vec::with_capacity(count);
        for (step, i) in (0..count).rev().enumerate() {
            let l = &self.encoder_layers[i];
            let (target, source) = (shapes[i], shapes[i + 1]);
            let mut output_padding = [0usize; 2];
            for axis in 0..2 {
                let base = conv_transpose_output_size(source[axis + 1], l.kernel[axis], l.stride, l.padding, 0)
                    .unwrap_or(0);
                let extra = target[axis + 1].checked_sub(base);
                match extra {
                    Some(e) if e < l.stride.max(1) || e == 0 => output_padding[axis] = e,
                    _ => {
                        return Err(Error::Config(format!(
                            "encoder layer {i} cannot be mirrored: transposed output {base} vs target {}",
                            target[axis + 1]
                        )))
                    }
                }
            }
            if output_padding[0] != output_padding[1] {
                return Err(Error::Config(format!(
                    "encoder layer {i} needs different output padding per axis ({output_padding:?})"
                )));
            }
            layers.push(DecoderLayer {
                in_channels: source[0],
                out_channels: target[0],
                kernel: l.kernel,
                stride: l.stride,
                padding: l.padding,
                output_padding: output_padding[0],
                activation: l.activation,
                batch_norm: l.batch_norm,
                is_output: step + 1 == count,
            });
        }
        Ok(layers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("input shape {:?} has an empty axis", self.input_shape)));
        }
        if self.encoder_layers.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        for (i, l) in self.encoder_layers.iter().enumerate() {
            if l.out_channels == 0 || l.kernel.contains(&0) || l.stride == 0 {
                return Err(Error::Config(format!("encoder layer {i} has a zero dimension: {l:?}")));
            }
        }
        match (self.kind, self.sampler) {
            (ModelKind::Ae, SamplerKind::None) => {}
            (ModelKind::Ae, s) => return Err(Error::Config(format!("an AE takes no sampler, got {s:?}"))),
            (ModelKind::Vae, SamplerKind::None) => {
                return Err(Error::Config("a VAE needs a fully_connected or convolutional sampler".into()))
            }
            _ => {}
        }
        let shapes = self.encoder_shapes()?;
        let latent: usize = shapes.last().unwrap().iter().product();
        if latent != 2 * self.k {
            let achievable: Vec<String> = shapes[1..]
                .iter()
                .enumerate()
                .map(|(i, s)| format!("after layer {i}: {}x{}x{} = {}", s[0], s[1], s[2], s.iter().product::<usize>()))
                .collect();
            return Err(Error::Config(format!(
                "encoder output has {latent} elements but 2k = {}; achievable sizes: {}",
                2 * self.k,
                achievable.join(", ")
            )));
        }
        self.decoder_layers()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plans_hit_one_sixth() {
        let cifar = ModelSpec::cifar(ModelKind::Ae);
        assert_eq!(cifar.latent_shape().unwrap(), [16, 8, 8]);
        assert_eq!((cifar.k, cifar.n()), (512, 3072));
        assert_eq!(cifar.k * 6, cifar.n());
        let stl = ModelSpec::stl10(ModelKind::Vae);
        assert_eq!(stl.latent_shape().unwrap(), [16, 24, 24]);
        assert_eq!((stl.k, stl.n()), (4608, 27648));
        assert_eq!(stl.k * 6, stl.n());
        cifar.validate().unwrap();
        stl.validate().unwrap();
    }

    #[test]
    fn decoder_mirrors_encoder_shapes() {
        let spec = ModelSpec::cifar(ModelKind::Ae);
        let enc = spec.encoder_shapes().unwrap();
        let dec = spec.decoder_layers().unwrap();
        assert_eq!(dec.len(), 5);
        let mut shape = *enc.last().unwrap();
        for (layer, want) in dec.iter().zip(enc.iter().rev().skip(1)) {
            assert_eq!(layer.in_channels, shape[0]);
            let h = conv_transpose_output_size(shape[1], layer.kernel[0], layer.stride, layer.padding, layer.output_padding).unwrap();
            let w = conv_transpose_output_size(shape[2], layer.kernel[1], layer.stride, layer.padding, layer.output_padding).unwrap();
            shape = [layer.out_channels, h, w];
            assert_eq!(&shape, want);
        }
        assert_eq!(shape, spec.input_shape);
        assert!(dec.last().unwrap().is_output);
    }

    #[test]
    fn wrong_k_lists_achievable_sizes() {
        let mut spec = ModelSpec::cifar(ModelKind::Ae);
        spec.k = 500;
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("achievable sizes"), "{err}");
        assert!(err.contains("16x8x8 = 1024"), "{err}");
    }

    #[test]
    fn sampler_kind_must_match_model_kind() {
        let ae = ModelSpec::cifar(ModelKind::Ae).with_sampler(SamplerKind::Convolutional);
        assert!(ae.validate().is_err());
        let vae = ModelSpec::cifar(ModelKind::Vae).with_sampler(SamplerKind::None);
        assert!(vae.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let spec = ModelSpec::cifar(ModelKind::Vae);
        let text = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        let short: ModelSpec =
            serde_json::from_str(r#"{"kind":"ae","input_shape":[3,32,32],"sampler":"none","k":512}"#).unwrap();
        assert_eq!(short, ModelSpec::cifar(ModelKind::Ae));
    }
}
