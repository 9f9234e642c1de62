//! Reference embedder (RFNet), adapted embedder (VDNet) and the domain
//! discriminator.
//!
//! Embedders follow a conv / conv / channel-pair-max motif ending in global
//! average pooling. The full plan takes 100×100 inputs to a
//! 320-dimensional feature; the toy plan takes 32×32 inputs to 32 dimensions
//! using strided convolutions so it trains in seconds on one core.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Padding, Var};
use crate::image::Image;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        name: String,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    },
    /// 2×2 spatial max (stride 2) combined with channel-pair max.
    Vmax,
    /// Channel-pair max only.
    Maxout,
    /// Average over the whole remaining spatial extent.
    GlobalAvgPool,
}

impl LayerSpec {
    fn conv(name: &str, out_channels: usize, stride: usize, relu: bool) -> Self {
        LayerSpec::Conv {
            name: name.to_string(),
            out_channels,
            kernel: 3,
            stride,
            relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub scale: Scale,
    /// Square input side in pixels (single channel).
    pub input_size: usize,
    pub feature_dim: usize,
    pub layers: Vec<LayerSpec>,
    /// Layers kept fixed when a VDNet is derived from an RFNet.
    pub frozen_layers: Vec<String>,
}

impl NetworkConfig {
    /// Ten 3×3 convolutions with Vmax pooling, 100×100 → 320.
    pub fn full() -> Self {
        let c = LayerSpec::conv;
        NetworkConfig {
            scale: Scale::Full,
            input_size: 100,
            feature_dim: 320,
            layers: vec![
                c("conv1_1", 32, 1, true),
                c("conv1_2", 128, 1, false),
                LayerSpec::Vmax,
                c("conv2_1", 64, 1, true),
                c("conv2_2", 256, 1, false),
                LayerSpec::Vmax,
                c("conv3_1", 96, 1, true),
                c("conv3_2", 384, 1, false),
                LayerSpec::Vmax,
                c("conv4_1", 128, 1, true),
                c("conv4_2", 512, 1, false),
                LayerSpec::Vmax,
                c("conv5_1", 160, 1, true),
                c("conv5_2", 320, 1, false),
                LayerSpec::GlobalAvgPool,
            ],
            frozen_layers: vec!["conv5_1".into(), "conv5_2".into()],
        }
    }

    /// Four convolutions, two strided conv + maxout pairs, 32×32 → 32.
    pub fn toy() -> Self {
        let c = LayerSpec::conv;
        NetworkConfig {
            scale: Scale::Toy,
            input_size: 32,
            feature_dim: 32,
            layers: vec![
                c("conv1_1", 8, 1, true),
                c("conv1_2", 16, 2, false),
                LayerSpec::Maxout,
                c("conv2_1", 16, 1, true),
                c("conv2_2", 64, 2, false),
                LayerSpec::Maxout,
                LayerSpec::GlobalAvgPool,
            ],
            frozen_layers: vec!["conv2_1".into(), "conv2_2".into()],
        }
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Full => Self::full(),
            Scale::Toy => Self::toy(),
        }
    }

    pub fn conv_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { name, .. } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Output shape `[C, H, W]` after every layer, checking the plan.
    pub fn layer_shapes(&self) -> Result<Vec<(String, [usize; 3])>> {
        let mut shape = [1, self.input_size, self.input_size];
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let label;
            match layer {
                LayerSpec::Conv {
                    name,
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    if kernel % 2 == 0 || *stride == 0 {
                        return Err(Error::Config(format!(
                            "{name}: odd kernel and positive stride required"
                        )));
                    }
                    shape = [
                        *out_channels,
                        shape[1].div_ceil(*stride),
                        shape[2].div_ceil(*stride),
                    ];
                    label = name.clone();
                }
                LayerSpec::Vmax | LayerSpec::Maxout => {
                    if !shape[0].is_multiple_of(2) {
                        return Err(Error::Config(format!(
                            "channel-pair max over an odd channel count {}",
                            shape[0]
                        )));
                    }
                    shape[0] /= 2;
                    if matches!(layer, LayerSpec::Vmax) {
                        shape[1] = shape[1].div_ceil(2);
                        shape[2] = shape[2].div_ceil(2);
                        label = "vmax".into();
                    } else {
                        label = "maxout".into();
                    }
                }
                LayerSpec::GlobalAvgPool => {
                    shape = [shape[0], 1, 1];
                    label = "avg_pool".into();
                }
            }
            out.push((label, shape));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.layer_shapes()?;
        let last = shapes
            .last()
            .ok_or_else(|| Error::Config("network has no layers".into()))?
            .1;
        if last[1] != 1 || last[2] != 1 || last[0] != self.feature_dim {
            return Err(Error::Config(format!(
                "final layer yields {last:?}, expected [{}, 1, 1]",
                self.feature_dim
            )));
        }
        let names = self.conv_names();
        if let Some(bad) = self
            .frozen_layers
            .iter()
            .find(|f| !names.contains(&f.as_str()))
        {
            return Err(Error::Config(format!(
                "frozen layer {bad} is not in the plan"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub ways: usize,
    pub hidden: usize,
    pub input_dim: usize,
}

impl DiscriminatorConfig {
    pub fn full(ways: usize) -> Self {
        DiscriminatorConfig {
            ways,
            hidden: 160,
            input_dim: 320,
        }
    }

    pub fn toy(ways: usize) -> Self {
        DiscriminatorConfig {
            ways,
            hidden: 16,
            input_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ways == 2 || self.ways == 3) {
            return Err(Error::Config(format!(
                "discriminator must be 2- or 3-way, got {}",
                self.ways
            )));
        }
        if self.hidden == 0 || self.input_dim == 0 {
            return Err(Error::Config("discriminator sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    RfNet,
    VdNet,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq)]
enum Arch {
    Embedder(NetworkConfig),
    Discriminator(DiscriminatorConfig),
}

/// How a network's parameters enter a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    /// Honour each parameter's trainable flag.
    AsConfigured,
    /// Treat everything as constant (the network is held fixed this pass).
    Frozen,
}

/// A layered parameterized function with per-layer trainable flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    role: Role,
    arch: Arch,
    params: ParamStore,
}

fn layer_of(param: &str) -> &str {
    param.rsplit_once('.').map_or(param, |(l, _)| l)
}

fn he_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Expected parameter shapes of an embedder plan, in declaration order.
fn embedder_param_shapes(cfg: &NetworkConfig) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let mut channels = 1;
    let mut out = Vec::new();
    for layer in &cfg.layers {
        match layer {
            LayerSpec::Conv {
                name,
                out_channels,
                kernel,
                ..
            } => {
                out.push((
                    format!("{name}.weight"),
                    vec![*out_channels, channels, *kernel, *kernel],
                ));
                out.push((format!("{name}.bias"), vec![*out_channels]));
                channels = *out_channels;
            }
            LayerSpec::Vmax | LayerSpec::Maxout => channels /= 2,
            LayerSpec::GlobalAvgPool => {}
        }
    }
    Ok(out)
}

impl Network {
    /// Fresh embedder: He-uniform convolution weights, zero biases, all
    /// layers trainable.
    pub fn init_embedder<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        for (name, shape) in embedder_param_shapes(cfg)? {
            let value = if name.ends_with(".weight") {
                let fan_in = shape[1..].iter().product();
                he_uniform(rng, &shape, fan_in)
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, value, true);
        }
        Ok(Network {
            role: Role::RfNet,
            arch: Arch::Embedder(cfg.clone()),
            params,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embedder_config(&self) -> Option<&NetworkConfig> {
        match &self.arch {
            Arch::Embedder(c) => Some(c),
            Arch::Discriminator(_) => None,
        }
    }

    pub fn discriminator_config(&self) -> Option<&DiscriminatorConfig> {
        match &self.arch {
            Arch::Discriminator(c) => Some(c),
            Arch::Embedder(_) => None,
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.arch {
            Arch::Embedder(c) => c.feature_dim,
            Arch::Discriminator(c) => c.ways,
        }
    }

    /// Marks every parameter of the named layers (and only those) frozen.
    pub fn set_frozen_layers(&mut self, layers: &[String]) {
        for p in self.params.iter_mut() {
            p.trainable = !layers.iter().any(|l| l == layer_of(&p.name));
        }
    }

    pub fn frozen_layers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in self.params.iter().filter(|p| !p.trainable) {
            let l = layer_of(&p.name);
            if !out.iter().any(|o| o == l) {
                out.push(l.to_string());
            }
        }
        out
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Checksum of the frozen parameters' exact bits.
    pub fn frozen_checksum(&self) -> u64 {
        self.params.checksum(|p| !p.trainable)
    }

    /// Replaces the parameter values, checking names and shapes. Trainable
    /// flags are kept.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        for p in self.params.iter_mut() {
            let src = store.get(&p.name).ok_or_else(|| {
                Error::Checkpoint(format!("layer {} missing {}", layer_of(&p.name), p.name))
            })?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "layer {}: {} has shape {:?}, network expects {:?}",
                    layer_of(&p.name),
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        if let Some(extra) = store.iter().find(|s| self.params.get(&s.name).is_none()) {
            return Err(Error::Checkpoint(format!(
                "unexpected entry {}",
                extra.name
            )));
        }
        Ok(())
    }

    /// Records the network on `g`. Embedders take `[B, 1, H, W]` and return
    /// `[B, K]`; discriminators take `[B, K]` and return softmax
    /// probabilities `[B, ways]`.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: ParamMode) -> Result<Var> {
        let param = |g: &mut Graph, name: &str| -> Var {
            let p = self
                .params
                .get(name)
                .expect("parameter exists for every layer");
            let trainable = p.trainable && mode == ParamMode::AsConfigured;
            g.param(name, &p.value, trainable)
        };
        match &self.arch {
            Arch::Embedder(cfg) => {
                let mut h = x;
                for layer in &cfg.layers {
                    h = match layer {
                        LayerSpec::Conv {
                            name, stride, relu, ..
                        } => {
                            let w = param(g, &format!("{name}.weight"));
                            let b = param(g, &format!("{name}.bias"));
                            let y = g.conv2d(h, w, Some(b), *stride, Padding::Same)?;
                            g.label(y, name.as_str());
                            if *relu {
                                g.relu(y)
                            } else {
                                y
                            }
                        }
                        LayerSpec::Vmax => g.vmax_pool(h)?,
                        LayerSpec::Maxout => g.maxout(h)?,
                        LayerSpec::GlobalAvgPool => {
                            let s = g.shape(h).to_vec();
                            if s[2] != s[3] {
                                return Err(Error::shape(
                                    "avg_pool",
                                    format!("non-square map {s:?}"),
                                ));
                            }
                            let p = g.avg_pool(h, s[2])?;
                            g.reshape(p, vec![s[0], s[1]])?
                        }
                    };
                }
                Ok(h)
            }
            Arch::Discriminator(_) => {
                let w1 = param(g, "fc1.weight");
                let b1 = param(g, "fc1.bias");
                let w2 = param(g, "fc2.weight");
                let b2 = param(g, "fc2.bias");
                let h = g.matmul(x, w1)?;
                let h = g.add_bias(h, b1)?;
                let h = g.relu(h);
                let logits = g.matmul(h, w2)?;
                let logits = g.add_bias(logits, b2)?;
                g.softmax(logits)
            }
        }
    }

    /// Stacks equally sized images into a `[B, 1, H, W]` tensor.
    pub fn images_to_tensor(&self, imgs: &[Image]) -> Result<Tensor> {
        let cfg = self
            .embedder_config()
            .ok_or_else(|| Error::InvalidArgument("discriminator does not take images".into()))?;
        images_tensor(imgs, cfg.input_size)
    }

    /// Embeds a batch of images with all parameters held fixed.
    pub fn embed_batch(&self, imgs: &[Image]) -> Result<Tensor> {
        let x = self.images_to_tensor(imgs)?;
        let mut g = Graph::new();
        let xv = g.input(x);
        let y = self.forward(&mut g, xv, ParamMode::Frozen)?;
        Ok(g.value(y).clone())
    }

    /// Discriminator probabilities for `[B, K]` features.
    pub fn classify(&self, features: &Tensor) -> Result<Tensor> {
        if self.discriminator_config().is_none() {
            return Err(Error::InvalidArgument("not a discriminator".into()));
        }
        let mut g = Graph::new();
        let x = g.input(features.clone());
        let y = self.forward(&mut g, x, ParamMode::Frozen)?;
        Ok(g.value(y).clone())
    }
}

pub(crate) fn images_tensor(imgs: &[Image], size: usize) -> Result<Tensor> {
    if imgs.is_empty() {
        return Err(Error::Empty("no images to embed".into()));
    }
    let mut data = Vec::with_capacity(imgs.len() * size * size);
    for (i, img) in imgs.iter().enumerate() {
        if img.height() != size || img.width() != size {
            return Err(Error::shape(
                "input",
                format!(
                    "image {i} is {}x{}, network expects {size}x{size}",
                    img.height(),
                    img.width()
                ),
            ));
        }
        data.extend_from_slice(img.pixels());
    }
    Tensor::new(vec![imgs.len(), 1, size, size], data)
}

/// Reference network from a checkpoint; every layer is frozen.
pub fn build_rfnet(cfg: &NetworkConfig, checkpoint: &ParamStore) -> Result<Network> {
    let mut params = ParamStore::new();
    for (name, shape) in embedder_param_shapes(cfg)? {
        params.insert(name, Tensor::zeros(&shape), false);
    }
    let mut net = Network {
        role: Role::RfNet,
        arch: Arch::Embedder(cfg.clone()),
        params,
    };
    net.load_params(checkpoint)?;
    for p in net.params.iter_mut() {
        p.trainable = false;
    }
    Ok(net)
}

/// Adapted network initialized as a copy of `rfnet`, trainable except for
/// the configured frozen layers (the last two convolutions).
pub fn build_vdnet(rfnet: &Network) -> Result<Network> {
    let cfg = rfnet
        .embedder_config()
        .ok_or_else(|| Error::InvalidArgument("VDNet must be derived from an embedder".into()))?
        .clone();
    let mut net = Network {
        role: Role::VdNet,
        arch: Arch::Embedder(cfg.clone()),
        params: rfnet.params.clone(),
    };
    net.set_frozen_layers(&cfg.frozen_layers);
    Ok(net)
}

fn discriminator_param_shapes(cfg: &DiscriminatorConfig) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("fc1.weight", vec![cfg.input_dim, cfg.hidden]),
        ("fc1.bias", vec![cfg.hidden]),
        ("fc2.weight", vec![cfg.hidden, cfg.ways]),
        ("fc2.bias", vec![cfg.ways]),
    ]
}

/// `K → hidden → ReLU → ways → softmax`, He-uniform weights, zero biases.
pub fn build_discriminator<R: Rng + ?Sized>(
    cfg: &DiscriminatorConfig,
    rng: &mut R,
) -> Result<Network> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    for (name, shape) in discriminator_param_shapes(cfg) {
        let value = if name.ends_with(".weight") {
            he_uniform(rng, &shape, shape[0])
        } else {
            Tensor::zeros(&shape)
        };
        params.insert(name, value, true);
    }
    Ok(Network {
        role: Role::Discriminator,
        arch: Arch::Discriminator(*cfg),
        params,
    })
}

/// Discriminator rebuilt from a checkpoint.
pub fn load_discriminator(cfg: &DiscriminatorConfig, checkpoint: &ParamStore) -> Result<Network> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    for (name, shape) in discriminator_param_shapes(cfg) {
        params.insert(name, Tensor::zeros(&shape), true);
    }
    let mut net = Network {
        role: Role::Discriminator,
        arch: Arch::Discriminator(*cfg),
        params,
    };
    net.load_params(checkpoint)?;
    Ok(net)
}

/// Discriminator sizes read off the parameter shapes of a checkpoint.
pub fn infer_discriminator_config(checkpoint: &ParamStore) -> Result<DiscriminatorConfig> {
    let shape = |name: &str| {
        checkpoint
            .get(name)
            .map(|p| p.value.shape().to_vec())
            .ok_or_else(|| {
                Error::InvalidArgument(format!("checkpoint has no {name}; not a discriminator"))
            })
    };
    let (w1, w2) = (shape("fc1.weight")?, shape("fc2.weight")?);
    if w1.len() != 2 || w2.len() != 2 || w1[1] != w2[0] {
        return Err(Error::shape(
            "discriminator",
            format!("weights {w1:?} and {w2:?} do not chain"),
        ));
    }
    let cfg = DiscriminatorConfig {
        ways: w2[1],
        hidden: w1[1],
        input_dim: w1[0],
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Embedder rebuilt from a checkpoint with the VDNet freezing plan.
pub fn load_vdnet(cfg: &NetworkConfig, checkpoint: &ParamStore) -> Result<Network> {
    build_vdnet(&build_rfnet(cfg, checkpoint)?)
}

/// Single-image embedding; `K` values.
pub fn embed(net: &Network, img: &Image) -> Result<Vec<f64>> {
    Ok(net.embed_batch(std::slice::from_ref(img))?.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discriminator_config_is_recovered_from_shapes() {
        let cfg = DiscriminatorConfig::toy(3);
        let d = build_discriminator(&cfg, &mut rand::rngs::mock::StepRng::new(1, 1)).unwrap();
        assert_eq!(infer_discriminator_config(d.params()).unwrap(), cfg);
        assert!(infer_discriminator_config(&ParamStore::new()).is_err());
    }
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_rfnet(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = Network::init_embedder(&NetworkConfig::toy(), &mut rng).unwrap();
        build_rfnet(&NetworkConfig::toy(), init.params()).unwrap()
    }

    #[test]
    fn configs_are_consistent() {
        NetworkConfig::toy().validate().unwrap();
        NetworkConfig::full().validate().unwrap();
        let mut bad = NetworkConfig::toy();
        bad.feature_dim = 31;
        assert!(bad.validate().is_err());
        let mut bad = NetworkConfig::toy();
        bad.frozen_layers.push("conv9".into());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn full_plan_layer_shapes() {
        let shapes = NetworkConfig::full().layer_shapes().unwrap();
        let expected: [(&str, [usize; 3]); 15] = [
            ("conv1_1", [32, 100, 100]),
            ("conv1_2", [128, 100, 100]),
            ("vmax", [64, 50, 50]),
            ("conv2_1", [64, 50, 50]),
            ("conv2_2", [256, 50, 50]),
            ("vmax", [128, 25, 25]),
            ("conv3_1", [96, 25, 25]),
            ("conv3_2", [384, 25, 25]),
            ("vmax", [192, 13, 13]),
            ("conv4_1", [128, 13, 13]),
            ("conv4_2", [512, 13, 13]),
            ("vmax", [256, 7, 7]),
            ("conv5_1", [160, 7, 7]),
            ("conv5_2", [320, 7, 7]),
            ("avg_pool", [320, 1, 1]),
        ];
        for ((name, shape), (ename, eshape)) in shapes.iter().zip(expected.iter()) {
            assert_eq!((name.as_str(), *shape), (*ename, *eshape));
        }
    }

    #[test]
    fn rfnet_is_fully_frozen() {
        let net = toy_rfnet(0);
        assert_eq!(net.trainable_param_count(), 0);
    }

    #[test]
    fn vdnet_freezes_last_two_convolutions() {
        let rf = toy_rfnet(0);
        let vd = build_vdnet(&rf).unwrap();
        assert_eq!(
            vd.frozen_layers(),
            vec!["conv2_1".to_string(), "conv2_2".to_string()]
        );
        assert!(vd.trainable_param_count() > 0);
        let img = Image::from_fn(32, 32, |y, x| ((y * 7 + x * 3) % 11) as f64 / 10.0);
        assert_eq!(embed(&rf, &img).unwrap(), embed(&vd, &img).unwrap());
    }

    #[test]
    fn checkpoint_shape_mismatch_names_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = NetworkConfig::toy();
        let init = Network::init_embedder(&cfg, &mut rng).unwrap();
        if let LayerSpec::Conv { out_channels, .. } = &mut cfg.layers[0] {
            *out_channels = 10;
        }
        let err = build_rfnet(&cfg, init.params()).unwrap_err().to_string();
        assert!(err.contains("conv1_1"), "{err}");
    }

    #[test]
    fn discriminator_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = build_discriminator(&DiscriminatorConfig::full(3), &mut rng).unwrap();
        assert_eq!(d.params().count(), 51_843);
        assert!(build_discriminator(&DiscriminatorConfig::full(4), &mut rng).is_err());
    }

    #[test]
    fn discriminator_outputs_a_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = build_discriminator(&DiscriminatorConfig::toy(2), &mut rng).unwrap();
        let feats = Tensor::new(
            vec![4, 32],
            (0..128).map(|i| (i as f64 * 0.37).sin() * 3.0).collect(),
        )
        .unwrap();
        let p = d.classify(&feats).unwrap();
        assert_eq!(p.shape(), &[4, 2]);
        for row in p.rows() {
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_image_with_zero_bias_embeds_to_zero() {
        let net = toy_rfnet(3);
        let f = embed(&net, &Image::filled(32, 32, 0.0)).unwrap();
        assert_eq!(f.len(), 32);
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let net = toy_rfnet(3);
        assert!(embed(&net, &Image::filled(16, 16, 0.5)).is_err());
    }
}
