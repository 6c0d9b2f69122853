//! AE and VAE transmission systems: encoder, optional sampler, power
//! normalization, AWGN channel and mirrored decoder.

mod spec;

pub use spec::{
    default_encoder, Activation, ConvLayerSpec, DecoderLayer, ModelKind, ModelSpec, OutputActivation, SamplerKind,
    Shape3,
};

use indexmap::IndexMap;
use jscc_autodiff::{BatchNormMode, ConvOptions, Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{normalize_power, Awgn, ChannelConfig, ChannelSymbols};
use crate::error::{Error, Result};
use crate::seed;

pub const BN_EPS: f32 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f32 = 0.9;
pub const PRELU_INIT: f32 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

impl ParamShape {
    fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        Self { name, shape, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Layer prefix, e.g. `enc.0` for `enc.0.bn.gamma`.
    pub fn layer(&self) -> &str {
        let mut dots = self.name.match_indices('.');
        match (dots.next(), dots.next()) {
            (Some(_), Some((i, _))) => &self.name[..i],
            _ => &self.name,
        }
    }
}

fn conv_block(prefix: &str, cin: usize, cout: usize, kernel: [usize; 2], fan_in: usize, act: Activation, bn: bool) -> Vec<ParamShape> {
    let mut out = vec![
        ParamShape::new(format!("{prefix}.weight"), vec![cout, cin, kernel[0], kernel[1]], Init::HeUniform { fan_in }),
        ParamShape::new(format!("{prefix}.bias"), vec![cout], Init::Zeros),
    ];
    if bn {
        out.push(ParamShape::new(format!("{prefix}.bn.gamma"), vec![cout], Init::Ones));
        out.push(ParamShape::new(format!("{prefix}.bn.beta"), vec![cout], Init::Zeros));
    }
    if act == Activation::Prelu {
        out.push(ParamShape::new(format!("{prefix}.prelu"), vec![cout], Init::Constant));
    }
    out
}

/// Every learnable tensor of the model described by `spec`, in storage order.
pub fn param_shapes(spec: &ModelSpec) -> Result<Vec<ParamShape>> {
    let shapes = spec.encoder_shapes()?;
    let mut out = Vec::new();
    for (i, l) in spec.encoder_layers.iter().enumerate() {
        let cin = shapes[i][0];
        out.extend(conv_block(
            &format!("enc.{i}"),
            cin,
            l.out_channels,
            l.kernel,
            cin * l.kernel[0] * l.kernel[1],
            l.activation,
            l.batch_norm,
        ));
    }
    let latent = *shapes.last().unwrap();
    let d: usize = latent.iter().product();
    for head in ["mu", "log_var"] {
        match spec.sampler {
            SamplerKind::None => {}
            SamplerKind::Convolutional => {
                let c = latent[0];
                out.push(ParamShape::new(
                    format!("sampler.{head}.weight"),
                    vec![c, c, 3, 3],
                    Init::HeUniform { fan_in: c * 9 },
                ));
                out.push(ParamShape::new(format!("sampler.{head}.bias"), vec![c], Init::Zeros));
            }
            SamplerKind::FullyConnected => {
                out.push(ParamShape::new(format!("sampler.{head}.weight"), vec![d, d], Init::HeUniform { fan_in: d }));
                out.push(ParamShape::new(format!("sampler.{head}.bias"), vec![d], Init::Zeros));
            }
        }
    }
    for (i, l) in spec.decoder_layers()?.iter().enumerate() {
        let prefix = format!("dec.{i}");
        // each output pixel of a strided transposed convolution sees
        // roughly kernel/stride² taps per input channel
        let taps = (l.kernel[0] * l.kernel[1]) / (l.stride * l.stride);
        let fan_in = (l.in_channels * taps).max(1);
        let (act, bn) = if l.is_output { (Activation::None, false) } else { (l.activation, l.batch_norm) };
        let mut block = conv_block(&prefix, l.in_channels, l.out_channels, l.kernel, fan_in, act, bn);
        // transposed kernels are stored [in, out, kh, kw]
        block[0].shape = vec![l.in_channels, l.out_channels, l.kernel[0], l.kernel[1]];
        out.extend(block);
    }
    Ok(out)
}

/// Running batch-norm statistics, as `(name, channels)`.
fn buffer_shapes(spec: &ModelSpec) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for (i, l) in spec.encoder_layers.iter().enumerate() {
        if l.batch_norm {
            out.push((format!("enc.{i}.bn.running_mean"), l.out_channels));
            out.push((format!("enc.{i}.bn.running_var"), l.out_channels));
        }
    }
    for (i, l) in spec.decoder_layers()?.iter().enumerate() {
        if l.batch_norm && !l.is_output {
            out.push((format!("dec.{i}.bn.running_mean"), l.out_channels));
            out.push((format!("dec.{i}.bn.running_var"), l.out_channels));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCount {
    pub total: usize,
    /// `(layer, count)` in model order.
    pub per_layer: Vec<(String, usize)>,
}

impl ParamCount {
    pub fn layer(&self, name: &str) -> usize {
        self.per_layer.iter().filter(|(l, _)| l == name).map(|(_, c)| c).sum()
    }

    /// Parameters of all layers whose name starts with `prefix`.
    pub fn group(&self, prefix: &str) -> usize {
        self.per_layer.iter().filter(|(l, _)| l.starts_with(prefix)).map(|(_, c)| c).sum()
    }
}

/// Learnable parameter count: weights, biases, batch-norm affine terms and
/// PReLU slopes. Running statistics are not counted.
pub fn count_params(spec: &ModelSpec) -> Result<ParamCount> {
    spec.validate()?;
    let mut per_layer: Vec<(String, usize)> = Vec::new();
    for p in param_shapes(spec)? {
        match per_layer.last_mut() {
            Some((layer, c)) if layer == p.layer() => *c += p.numel(),
            _ => per_layer.push((p.layer().to_string(), p.numel())),
        }
    }
    Ok(ParamCount {
        total: per_layer.iter().map(|(_, c)| c).sum(),
        per_layer,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, latent sampled.
    Train,
    /// Running statistics in batch norm. With `sample_latent == false` the
    /// sampler returns `mu`.
    Eval { sample_latent: bool },
}

/// Node ids of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub params: IndexMap<String, NodeId>,
    /// Encoder output.
    pub latent: NodeId,
    /// `(mu, log_var, z_s)` for VAE models.
    pub sampler: Option<(NodeId, NodeId, NodeId)>,
    /// Power-normalized symbols `[B, 2k]`.
    pub symbols: NodeId,
    pub received: NodeId,
    pub x_hat: NodeId,
    /// Training-mode batch norm nodes, keyed by layer prefix.
    pub batch_norms: Vec<(String, NodeId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerOutput {
    pub mu: Tensor<f32>,
    pub log_var: Tensor<f32>,
    pub z_s: Tensor<f32>,
    pub epsilon: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transmission {
    pub x_hat: Tensor<f32>,
    pub sampler: Option<SamplerOutput>,
    pub symbols: ChannelSymbols<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: IndexMap<String, Tensor<f32>>,
    buffers: IndexMap<String, Tensor<f32>>,
}

impl Model {
    /// Builds a model with freshly initialized weights; deterministic in `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0x1417]));
        let mut params = IndexMap::new();
        for p in param_shapes(&spec)? {
            let n = p.numel();
            let data: Vec<f32> = match p.init {
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Constant => vec![PRELU_INIT; n],
            };
            params.insert(p.name, Tensor::new(p.shape, data)?);
        }
        let mut buffers = IndexMap::new();
        for (name, c) in buffer_shapes(&spec)? {
            let fill = if name.ends_with("running_var") { 1.0 } else { 0.0 };
            buffers.insert(name, Tensor::full(&[c], fill));
        }
        Ok(Self { spec, params, buffers })
    }

    /// Assembles a model from stored tensors, checking names and shapes
    /// against `spec`.
    pub fn from_tensors(spec: ModelSpec, mut tensors: IndexMap<String, Tensor<f32>>) -> Result<Self> {
        spec.validate()?;
        let mut params = IndexMap::new();
        for p in param_shapes(&spec)? {
            let t = tensors
                .shift_remove(&p.name)
                .ok_or_else(|| Error::Config(format!("missing tensor `{}`", p.name)))?;
            if t.shape() != p.shape.as_slice() {
                return Err(Error::Config(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.shape
                )));
            }
            params.insert(p.name, t);
        }
        let mut buffers = IndexMap::new();
        for (name, c) in buffer_shapes(&spec)? {
            let t = tensors
                .shift_remove(&name)
                .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))?;
            if t.shape() != [c] {
                return Err(Error::Config(format!("tensor `{name}` has shape {:?}, expected [{c}]", t.shape())));
            }
            buffers.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Config(format!("unexpected tensor `{extra}` for this model")));
        }
        Ok(Self { spec, params, buffers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor<f32>> {
        &mut self.params
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor<f32>> {
        &self.buffers
    }

    /// Parameters followed by buffers.
    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.params.iter().chain(self.buffers.iter())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.spec.input_shape {
            return Err(Error::Config(format!(
                "input batch {shape:?} does not match model input {:?}",
                self.spec.input_shape
            )));
        }
        Ok(())
    }

    fn bind_params(&self, g: &mut Graph<f32>, trainable: bool) -> Result<IndexMap<String, NodeId>> {
        let mut ids = IndexMap::new();
        for (name, t) in &self.params {
            let id = if trainable { g.param(name, t.clone())? } else { g.input(name, t.clone())? };
            ids.insert(name.clone(), id);
        }
        Ok(ids)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph<f32>,
        p: &IndexMap<String, NodeId>,
        prefix: &str,
        x: NodeId,
        transposed: bool,
        opts: ConvOptions,
        mode: Mode,
        bns: &mut Vec<(String, NodeId)>,
    ) -> Result<NodeId> {
        let get = |suffix: &str| p.get(&format!("{prefix}.{suffix}")).copied();
        let w = get("weight").expect("weight bound");
        let mut h = if transposed { g.conv_transpose2d(x, w, opts)? } else { g.conv2d(x, w, opts)? };
        h = g.channel_bias(h, get("bias").expect("bias bound"))?;
        if let (Some(gamma), Some(beta)) = (get("bn.gamma"), get("bn.beta")) {
            h = match mode {
                Mode::Train => {
                    let id = g.batch_norm(h, gamma, beta, BatchNormMode::Train, BN_EPS)?;
                    bns.push((prefix.to_string(), id));
                    id
                }
                Mode::Eval { .. } => {
                    let rm = &self.buffers[&format!("{prefix}.bn.running_mean")];
                    let rv = &self.buffers[&format!("{prefix}.bn.running_var")];
                    g.batch_norm(
                        h,
                        gamma,
                        beta,
                        BatchNormMode::Eval {
                            running_mean: rm.data(),
                            running_var: rv.data(),
                        },
                        BN_EPS,
                    )?
                }
            };
        }
        if let Some(slope) = get("prelu") {
            h = g.prelu(h, slope)?;
        }
        Ok(h)
    }

    /// Runs the encoder on `x` and returns the latent node.
    fn encoder(
        &self,
        g: &mut Graph<f32>,
        p: &IndexMap<String, NodeId>,
        x: NodeId,
        mode: Mode,
        bns: &mut Vec<(String, NodeId)>,
    ) -> Result<NodeId> {
        let mut h = x;
        for (i, l) in self.spec.encoder_layers.iter().enumerate() {
            h = self.block(g, p, &format!("enc.{i}"), h, false, ConvOptions::new(l.stride, l.padding), mode, bns)?;
        }
        Ok(h)
    }

    /// `(mu, log_var)` heads over the latent.
    fn sampler_heads(&self, g: &mut Graph<f32>, p: &IndexMap<String, NodeId>, latent: NodeId) -> Result<(NodeId, NodeId)> {
        let shape = g.shape(latent).to_vec();
        let mut heads = [latent; 2];
        for (slot, head) in ["mu", "log_var"].iter().enumerate() {
            let w = p[&format!("sampler.{head}.weight")];
            let b = p[&format!("sampler.{head}.bias")];
            heads[slot] = match self.spec.sampler {
                SamplerKind::Convolutional => {
                    let h = g.conv2d(latent, w, ConvOptions::new(1, 1))?;
                    g.channel_bias(h, b)?
                }
                SamplerKind::FullyConnected => {
                    let flat = g.reshape(latent, &[shape[0], shape[1..].iter().product()])?;
                    let h = g.matmul(flat, w)?;
                    let h = g.channel_bias(h, b)?;
                    g.reshape(h, &shape)?
                }
                SamplerKind::None => unreachable!("validated spec"),
            };
        }
        Ok((heads[0], heads[1]))
    }

    /// Builds the full transmission graph for the batch node `x`.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        x: NodeId,
        channel: &ChannelConfig,
        mode: Mode,
        awgn: &mut Awgn,
    ) -> Result<ForwardNodes> {
        self.check_input(g.shape(x))?;
        if channel.k != self.spec.k {
            return Err(Error::Config(format!(
                "channel k = {} but the model transmits k = {}",
                channel.k, self.spec.k
            )));
        }
        let params = self.bind_params(g, mode == Mode::Train)?;
        let mut batch_norms = Vec::new();
        let latent = self.encoder(g, &params, x, mode, &mut batch_norms)?;
        let (z_s, sampler) = match self.spec.kind {
            ModelKind::Ae => (latent, None),
            ModelKind::Vae => {
                let (mu, log_var) = self.sampler_heads(g, &params, latent)?;
                let z = match mode {
                    Mode::Eval { sample_latent: false } => {
                        let n = g.value(mu).numel();
                        g.gaussian_sample_with(mu, log_var, vec![0.0; n])?
                    }
                    _ => g.gaussian_sample(mu, log_var)?,
                };
                (z, Some((mu, log_var, z)))
            }
        };
        let symbols = normalize_power(g, z_s, channel)?;
        let received = awgn.apply(g, symbols, channel)?;
        let latent_shape = g.shape(latent).to_vec();
        let mut h = g.reshape(received, &latent_shape)?;
        let decoder = self.spec.decoder_layers()?;
        for (i, l) in decoder.iter().enumerate() {
            let opts = ConvOptions::new(l.stride, l.padding).with_output_padding(l.output_padding);
            h = self.block(g, &params, &format!("dec.{i}"), h, true, opts, mode, &mut batch_norms)?;
        }
        let x_hat = match self.spec.output_activation {
            OutputActivation::Sigmoid => g.sigmoid(h)?,
            OutputActivation::None => h,
        };
        Ok(ForwardNodes {
            params,
            latent,
            sampler,
            symbols,
            received,
            x_hat,
            batch_norms,
        })
    }

    /// Folds the batch statistics of a training pass into the running
    /// estimates: `r ← 0.9·r + 0.1·s`, using the unbiased batch variance.
    pub fn update_running_stats(&mut self, g: &Graph<f32>, nodes: &ForwardNodes) {
        for (prefix, id) in &nodes.batch_norms {
            let Some(stats) = g.batch_statistics(*id) else { continue };
            let unbias = if stats.count > 1 { stats.count as f32 / (stats.count - 1) as f32 } else { 1.0 };
            let rm = self.buffers.get_mut(&format!("{prefix}.bn.running_mean")).expect("buffer");
            for (r, &m) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            let rv = self.buffers.get_mut(&format!("{prefix}.bn.running_var")).expect("buffer");
            for (r, &v) in rv.data_mut().iter_mut().zip(&stats.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbias;
            }
        }
    }

    /// Sends `x` through the system. Stochastic parts (sampler noise and
    /// channel noise) are seeded from `seed`.
    pub fn transmit(&self, x: &Tensor<f32>, channel: &ChannelConfig, mode: Mode, seed: u64) -> Result<Transmission> {
        self.check_input(x.shape())?;
        let mut g = Graph::new(seed::derive(seed, &[1]));
        let mut awgn = Awgn::new(seed::derive(seed, &[2]));
        let xi = g.input("x", x.clone())?;
        let f = self.forward(&mut g, xi, channel, mode, &mut awgn)?;
        let sampler = f.sampler.map(|(mu, lv, z)| SamplerOutput {
            mu: g.value(mu).clone(),
            log_var: g.value(lv).clone(),
            z_s: g.value(z).clone(),
            epsilon: Tensor::new(g.shape(z).to_vec(), g.sample_noise(z).expect("sample node").to_vec())
                .expect("noise matches latent"),
        });
        Ok(Transmission {
            x_hat: g.value(f.x_hat).clone(),
            sampler,
            symbols: ChannelSymbols::new(g.value(f.symbols).clone())?,
        })
    }

    /// Pre-channel latents in eval mode, one flat vector per image: the
    /// encoder output for an AE, the sampler mean for a VAE.
    pub fn encode(&self, x: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        self.check_input(x.shape())?;
        let mut g = Graph::new(0);
        let xi = g.input("x", x.clone())?;
        let params = self.bind_params(&mut g, false)?;
        let mut bns = Vec::new();
        let latent = self.encoder(&mut g, &params, xi, Mode::Eval { sample_latent: false }, &mut bns)?;
        let out = match self.spec.kind {
            ModelKind::Ae => latent,
            ModelKind::Vae => self.sampler_heads(&mut g, &params, latent)?.0,
        };
        let v = g.value(out);
        let per = v.numel() / x.shape()[0];
        Ok(v.data().chunks(per).map(|c| c.iter().map(|&f| f as f64).collect()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(b: usize, shape: Shape3, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * shape.iter().product::<usize>();
        Tensor::new(vec![b, shape[0], shape[1], shape[2]], (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn single_conv_count() {
        let spec = ModelSpec {
            kind: ModelKind::Ae,
            input_shape: [3, 8, 8],
            encoder_layers: vec![ConvLayerSpec {
                batch_norm: false,
                activation: Activation::None,
                ..ConvLayerSpec::new(16, 5, 1, 2)
            }],
            sampler: SamplerKind::None,
            k: 512,
            output_activation: OutputActivation::Sigmoid,
        };
        let count = count_params(&spec).unwrap();
        assert_eq!(count.layer("enc.0"), 5 * 5 * 3 * 16 + 16);
        assert_eq!(count.per_layer[0].1, 1216);
    }

    #[test]
    fn fc_sampler_count() {
        let spec = ModelSpec::cifar(ModelKind::Vae).with_sampler(SamplerKind::FullyConnected);
        let count = count_params(&spec).unwrap();
        assert_eq!(count.group("sampler"), 2_099_200);
        let ae = count_params(&ModelSpec::cifar(ModelKind::Ae)).unwrap();
        assert_eq!(count.total - ae.total, 2_099_200);
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = ModelSpec::cifar(ModelKind::Vae);
        assert_eq!(Model::build(spec.clone(), 4).unwrap(), Model::build(spec.clone(), 4).unwrap());
        assert_ne!(Model::build(spec.clone(), 4).unwrap(), Model::build(spec, 5).unwrap());
    }

    #[test]
    fn untrained_transmission_is_well_formed() {
        for spec in [
            ModelSpec::cifar(ModelKind::Ae),
            ModelSpec::cifar(ModelKind::Vae),
            ModelSpec::cifar(ModelKind::Vae).with_sampler(SamplerKind::FullyConnected),
        ] {
            let model = Model::build(spec.clone(), 1).unwrap();
            let x = batch(3, spec.input_shape, 2);
            let ch = ChannelConfig::new(1.0, 10.0, spec.k).unwrap();
            for mode in [Mode::Train, Mode::Eval { sample_latent: true }] {
                let t = model.transmit(&x, &ch, mode, 3).unwrap();
                assert_eq!(t.x_hat.shape(), x.shape());
                assert!(t.x_hat.is_finite());
                assert!(t.x_hat.data().iter().all(|v| (0.0..=1.0).contains(v)));
                for p in t.symbols.average_power() {
                    assert!((p - 1.0).abs() < 1e-5, "{p}");
                }
                assert_eq!(t.sampler.is_some(), spec.kind == ModelKind::Vae);
            }
        }
    }

    #[test]
    fn sampler_output_satisfies_reparameterization() {
        let spec = ModelSpec::cifar(ModelKind::Vae);
        let model = Model::build(spec.clone(), 1).unwrap();
        let x = batch(2, spec.input_shape, 9);
        let ch = ChannelConfig::new(1.0, 10.0, spec.k).unwrap();
        let s = model.transmit(&x, &ch, Mode::Train, 0).unwrap().sampler.unwrap();
        for i in 0..s.mu.numel() {
            let want = s.mu.data()[i] + (0.5 * s.log_var.data()[i]).exp() * s.epsilon.data()[i];
            assert!((s.z_s.data()[i] - want).abs() < 1e-5);
        }
        let det = model.transmit(&x, &ch, Mode::Eval { sample_latent: false }, 0).unwrap().sampler.unwrap();
        assert_eq!(det.z_s, det.mu);
    }

    #[test]
    fn sampler_kinds_share_output_shape() {
        let x = batch(2, [3, 32, 32], 1);
        let ch = ChannelConfig::new(1.0, 5.0, 512).unwrap();
        let conv = Model::build(ModelSpec::cifar(ModelKind::Vae), 0).unwrap();
        let fc = Model::build(ModelSpec::cifar(ModelKind::Vae).with_sampler(SamplerKind::FullyConnected), 0).unwrap();
        let a = conv.transmit(&x, &ch, Mode::Train, 0).unwrap();
        let b = fc.transmit(&x, &ch, Mode::Train, 0).unwrap();
        assert_eq!(a.x_hat.shape(), b.x_hat.shape());
        assert_eq!(a.sampler.unwrap().z_s.shape(), b.sampler.unwrap().z_s.shape());
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let model = Model::build(ModelSpec::cifar(ModelKind::Ae), 0).unwrap();
        let ch = ChannelConfig::new(1.0, 5.0, 512).unwrap();
        assert!(model.transmit(&batch(1, [3, 16, 16], 0), &ch, Mode::Train, 0).is_err());
    }

    #[test]
    fn from_tensors_checks_manifest() {
        let model = Model::build(ModelSpec::cifar(ModelKind::Ae), 0).unwrap();
        let all: IndexMap<String, Tensor<f32>> = model.tensors().map(|(k, v)| (k.clone(), v.clone())).collect();
        assert_eq!(Model::from_tensors(model.spec().clone(), all.clone()).unwrap(), model);
        let mut missing = all.clone();
        missing.shift_remove("enc.0.weight");
        assert!(Model::from_tensors(model.spec().clone(), missing).is_err());
        let mut extra = all;
        extra.insert("bogus".into(), Tensor::zeros(&[1]));
        assert!(Model::from_tensors(model.spec().clone(), extra).is_err());
    }
}
