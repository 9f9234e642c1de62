//! Reference-network pretraining and the adaptation loop.
//!
//! Each adaptation iteration embeds one batch with the adapted network,
//! takes one discriminator step on the detached features, then one step of
//! the adapted network against the updated (now fixed) discriminator.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{LabeledImage, UnlabeledVideo};
use crate::degrade::{self, Sampler, TransformSet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::losses::{self, DiscriminatorMode, DomainCounts, LossParts, LossWeights};
use crate::models::{
    build_discriminator, build_rfnet, build_vdnet, images_tensor, DiscriminatorConfig, Network,
    NetworkConfig, ParamMode,
};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Discriminator setup; `None` trains without one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    None,
    Plain2,
    Merged2,
    #[serde(rename = "threeway")]
    ThreeWay,
}

impl AdaptMode {
    pub fn discriminator(self) -> Option<DiscriminatorMode> {
        match self {
            AdaptMode::None => None,
            AdaptMode::Plain2 => Some(DiscriminatorMode::Plain2),
            AdaptMode::Merged2 => Some(DiscriminatorMode::Merged2),
            AdaptMode::ThreeWay => Some(DiscriminatorMode::ThreeWay),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub ic: bool,
    pub fm: bool,
    pub fr: bool,
    pub adv: bool,
}

/// Rows of the model ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Model {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Model {
    pub const ALL: [Model; 6] = [Model::A, Model::B, Model::C, Model::D, Model::E, Model::F];

    pub fn name(self) -> &'static str {
        match self {
            Model::A => "A",
            Model::B => "B",
            Model::C => "C",
            Model::D => "D",
            Model::E => "E",
            Model::F => "F",
        }
    }

    pub fn parse(s: &str) -> Option<Model> {
        Model::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: AdaptMode,
    pub losses: LossToggles,
    /// Transforms available to the synthetic degradation.
    pub augment: TransformSet,
    /// Draw blur angles from the full half circle.
    #[serde(default)]
    pub wide_angles: bool,
    #[serde(default)]
    pub weights: LossWeights,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub iterations: usize,
    pub batch_total: usize,
    /// Still images per batch, arranged as `image_half / 2` pairs.
    pub image_half: usize,
    pub video_half: usize,
    pub seed: u64,
    /// Use only this many of the unlabeled videos (a seeded random subset).
    #[serde(default)]
    pub n_unlabeled_videos: Option<usize>,
    /// Hidden width of the discriminator; defaults to half the feature
    /// dimension.
    #[serde(default)]
    pub disc_hidden: Option<usize>,
    /// Learning rate of the discriminator; falls back to `lr` when unset.
    /// Presets with a discriminator set it to 1e-3.
    #[serde(default)]
    pub disc_lr: Option<f64>,
    /// Check the frozen-layer checksum after every step instead of only at
    /// the end of the run.
    #[serde(default = "default_true")]
    pub check_frozen_each_step: bool,
}

impl TrainConfig {
    /// Desk-scale defaults for one ablation row.
    pub fn preset(model: Model) -> Self {
        let (losses, augment, mode) = match model {
            Model::A => (
                LossToggles {
                    ic: true,
                    fm: false,
                    fr: true,
                    adv: false,
                },
                TransformSet::BLUR_SCALE,
                AdaptMode::None,
            ),
            Model::B => (
                LossToggles {
                    ic: true,
                    fm: true,
                    fr: true,
                    adv: false,
                },
                TransformSet::BLUR_SCALE,
                AdaptMode::None,
            ),
            Model::C => (
                LossToggles {
                    ic: true,
                    fm: true,
                    fr: true,
                    adv: false,
                },
                TransformSet::ALL,
                AdaptMode::None,
            ),
            Model::D => (
                LossToggles {
                    ic: true,
                    fm: true,
                    fr: false,
                    adv: true,
                },
                TransformSet::NONE,
                AdaptMode::Plain2,
            ),
            Model::E | Model::F => (
                LossToggles {
                    ic: true,
                    fm: true,
                    fr: true,
                    adv: true,
                },
                TransformSet::ALL,
                if model == Model::E {
                    AdaptMode::Merged2
                } else {
                    AdaptMode::ThreeWay
                },
            ),
        };
        TrainConfig {
            mode,
            losses,
            augment,
            wide_angles: false,
            weights: LossWeights::default(),
            lr: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            iterations: 500,
            batch_total: 32,
            image_half: 16,
            video_half: 16,
            seed: 0,
            n_unlabeled_videos: None,
            disc_hidden: None,
            // the small discriminator lags the embedder at the shared rate
            disc_lr: mode.discriminator().map(|_| 1e-3),
            check_frozen_each_step: true,
        }
    }

    pub fn pairs(&self) -> usize {
        self.image_half / 2
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let l = &self.losses;
        if !(l.ic || l.fm || l.fr || l.adv) {
            return bad("no loss term enabled".into());
        }
        if l.adv != (self.mode != AdaptMode::None) {
            return bad(format!(
                "adversarial loss {} but discriminator mode is {:?}",
                if l.adv { "enabled" } else { "disabled" },
                self.mode
            ));
        }
        if l.fr && self.augment.is_empty() {
            return bad("feature restoration needs at least one degradation transform".into());
        }
        if self.mode.discriminator().is_some_and(|m| m.uses_synth()) && self.augment.is_empty() {
            return bad(format!(
                "{:?} discriminator needs synthesized images",
                self.mode
            ));
        }
        if self.image_half + self.video_half != self.batch_total {
            return bad(format!(
                "batch halves {} + {} do not sum to batch_total {}",
                self.image_half, self.video_half, self.batch_total
            ));
        }
        if self.image_half < 2 || !self.image_half.is_multiple_of(2) {
            return bad(format!(
                "image_half must be an even number >= 2, got {}",
                self.image_half
            ));
        }
        if self.mode == AdaptMode::Plain2 && self.video_half == 0 {
            return bad("two-domain discriminator needs video frames in every batch".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("disc_lr", self.disc_lr.unwrap_or(self.lr)),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1)"));
            }
        }
        if self.n_unlabeled_videos == Some(0) && self.mode == AdaptMode::Plain2 {
            return bad("two-domain discriminator needs at least one video".into());
        }
        self.weights.validate()
    }
}

/// One iteration's measurements. Disabled terms are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub fm: Option<f64>,
    pub fr: Option<f64>,
    pub ic: Option<f64>,
    pub adv: Option<f64>,
    pub total: f64,
    pub d_loss: Option<f64>,
    pub d_accuracy: Option<f64>,
    /// Step wall time. Kept out of serialized history so reruns are byte-identical.
    #[serde(skip)]
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn parts(&self) -> LossParts<f64> {
        LossParts {
            fm: self.fm,
            fr: self.fr,
            ic: self.ic,
            adv: self.adv,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Random streams. Per-iteration streams make sample order a function of
// (seed, iteration) only, and keep still sampling independent of videos.
const STREAM_INIT: u64 = 1 << 40;
const STREAM_VIDEO_SUBSET: u64 = (1 << 40) + 1;
fn stream_of(iteration: usize, part: u64) -> u64 {
    iteration as u64 * 4 + part
}

/// Still images grouped by identity, keeping identities with two or more.
struct PairSampler {
    groups: Vec<Vec<usize>>,
}

impl PairSampler {
    fn new(images: &[LabeledImage], pairs: usize) -> Result<Self> {
        let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, li) in images.iter().enumerate() {
            by_id.entry(li.identity).or_default().push(i);
        }
        if by_id.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "metric learning needs at least 2 identities, got {}",
                by_id.len()
            )));
        }
        let groups: Vec<Vec<usize>> = by_id.into_values().filter(|g| g.len() >= 2).collect();
        if groups.len() < pairs {
            return Err(Error::InvalidArgument(format!(
                "{pairs} pairs per batch need {pairs} identities with two or more images, found {}",
                groups.len()
            )));
        }
        Ok(PairSampler { groups })
    }

    /// Image indices laid out as `[x_1, x_1⁺, x_2, x_2⁺, ...]`, one pair
    /// per distinct identity.
    fn sample<R: Rng>(&self, rng: &mut R, pairs: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(2 * pairs);
        for gi in index::sample(rng, self.groups.len(), pairs).into_iter() {
            let g = &self.groups[gi];
            let two = index::sample(rng, g.len(), 2);
            out.push(g[two.index(0)]);
            out.push(g[two.index(1)]);
        }
        out
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mutable state of an adaptation run.
pub struct TrainState {
    pub config: TrainConfig,
    pub vdnet: Network,
    pub discriminator: Option<Network>,
    adam_g: Adam,
    adam_d: Option<Adam>,
    iteration: usize,
    psi: Tensor,
    pairs: PairSampler,
    frames: Vec<(usize, usize)>,
    frozen_checksum: u64,
}

impl TrainState {
    /// Prepares a run: copies the reference network into the adapted one,
    /// caches reference embeddings of every still (they never change) and
    /// builds the discriminator when the mode needs one.
    pub fn new(
        cfg: &TrainConfig,
        rfnet: &Network,
        images: &[LabeledImage],
        videos: &[UnlabeledVideo],
    ) -> Result<Self> {
        cfg.validate()?;
        let net_cfg = rfnet.embedder_config().ok_or_else(|| {
            Error::InvalidArgument("reference network must be an embedder".into())
        })?;
        let pairs = PairSampler::new(images, cfg.pairs())?;
        let stills: Vec<Image> = images.iter().map(|li| li.image.clone()).collect();
        let psi = embed_in_chunks(rfnet, &stills)?;

        let mut video_idx: Vec<usize> = (0..videos.len()).collect();
        if let Some(n) = cfg.n_unlabeled_videos {
            if n < videos.len() {
                let mut rng = rng_for(cfg.seed, STREAM_VIDEO_SUBSET);
                let mut chosen = index::sample(&mut rng, videos.len(), n).into_vec();
                chosen.sort_unstable();
                video_idx = chosen;
            }
        }
        let frames: Vec<(usize, usize)> = if cfg.mode == AdaptMode::None {
            Vec::new()
        } else {
            video_idx
                .iter()
                .flat_map(|&v| (0..videos[v].frames.len()).map(move |f| (v, f)))
                .collect()
        };
        if cfg.mode == AdaptMode::Plain2 && frames.is_empty() {
            return Err(Error::Empty(
                "two-domain discriminator needs video frames".into(),
            ));
        }

        let vdnet = build_vdnet(rfnet)?;
        let discriminator = match cfg.mode.discriminator() {
            Some(m) => {
                let dcfg = DiscriminatorConfig {
                    ways: m.ways(),
                    hidden: cfg.disc_hidden.unwrap_or((net_cfg.feature_dim / 2).max(1)),
                    input_dim: net_cfg.feature_dim,
                };
                let mut rng = rng_for(cfg.seed, STREAM_INIT);
                Some(build_discriminator(&dcfg, &mut rng)?)
            }
            None => None,
        };
        Ok(TrainState {
            config: cfg.clone(),
            frozen_checksum: vdnet.frozen_checksum(),
            adam_g: Adam::new(cfg.adam(cfg.lr)),
            adam_d: discriminator
                .as_ref()
                .map(|_| Adam::new(cfg.adam(cfg.disc_lr.unwrap_or(cfg.lr)))),
            vdnet,
            discriminator,
            iteration: 0,
            psi,
            pairs,
            frames,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// One discriminator step then one adapted-network step.
    pub fn step(
        &mut self,
        images: &[LabeledImage],
        videos: &[UnlabeledVideo],
    ) -> Result<StepRecord> {
        let started = Instant::now();
        let cfg = &self.config;
        let it = self.iteration;
        let n = cfg.pairs();
        let d_mode = cfg.mode.discriminator();
        let uses_synth = d_mode.is_some_and(|m| m.uses_synth());
        let adv_in_g = cfg.losses.adv && cfg.weights.gamma != 0.0;

        let chosen = self
            .pairs
            .sample(&mut rng_for(cfg.seed, stream_of(it, 0)), n);
        let sampler = Sampler {
            transforms: cfg.augment,
            wide_angles: cfg.wide_angles,
        };
        let mut deg_rng = rng_for(cfg.seed, stream_of(it, 1));
        let clean: Vec<Image> = chosen.iter().map(|&i| images[i].image.clone()).collect();
        let degraded: Vec<Image> = clean
            .iter()
            .map(|img| degrade::apply(&sampler.sample(&mut deg_rng), img))
            .collect::<Result<_>>()?;
        let video_frames: Vec<Image> =
            if d_mode.is_some() && !self.frames.is_empty() && cfg.video_half > 0 {
                let mut rng = rng_for(cfg.seed, stream_of(it, 2));
                (0..cfg.video_half)
                    .map(|_| {
                        let (v, f) = self.frames[rng.gen_range(0..self.frames.len())];
                        videos[v].frames[f].clone()
                    })
                    .collect()
            } else {
                Vec::new()
            };

        let need_clean = cfg.losses.fm || d_mode.is_some();
        let need_deg = cfg.losses.fr || cfg.losses.ic || uses_synth;
        let mut batch: Vec<Image> = Vec::new();
        let mut offset = 0;
        let mut group = |imgs: &[Image], on: bool| -> Option<(usize, usize)> {
            if !on || imgs.is_empty() {
                return None;
            }
            batch.extend_from_slice(imgs);
            let r = (offset, imgs.len());
            offset += imgs.len();
            Some(r)
        };
        let clean_rows = group(&clean, need_clean);
        let deg_rows = group(&degraded, need_deg);
        let vid_rows = group(&video_frames, adv_in_g);

        let size = self.vdnet.embedder_config().expect("embedder").input_size;
        let mut g = Graph::new();
        let x = g.input(images_tensor(&batch, size)?);
        let phi = self.vdnet.forward(&mut g, x, ParamMode::AsConfigured)?;
        let rows = |g: &mut Graph, r: Option<(usize, usize)>| -> Result<Option<Var>> {
            r.map(|(s, len)| g.select_rows(phi, (s..s + len).collect()))
                .transpose()
        };
        let phi_clean = rows(&mut g, clean_rows)?;
        let phi_deg = rows(&mut g, deg_rows)?;
        let phi_vid = rows(&mut g, vid_rows)?;

        let psi_rows = |idx: &mut dyn Iterator<Item = usize>| -> Result<Tensor> {
            let rows: Vec<Vec<f64>> = idx.map(|i| self.psi.row(chosen[i]).to_vec()).collect();
            Tensor::from_rows(&rows)
        };
        let psi_clean = g.input(psi_rows(&mut (0..2 * n))?);

        // discriminator step on detached features
        let mut d_loss = None;
        let mut d_accuracy = None;
        let mut counts = DomainCounts::default();
        if let (Some(mode), Some(disc), Some(adam_d)) =
            (d_mode, self.discriminator.as_mut(), self.adam_d.as_mut())
        {
            let vid_feats = match phi_vid {
                Some(v) => Some(g.value(v).clone()),
                None if !video_frames.is_empty() => Some(self.vdnet.embed_batch(&video_frames)?),
                None => None,
            };
            counts = DomainCounts {
                images: 2 * n,
                synth: if uses_synth { 2 * n } else { 0 },
                video: video_frames.len(),
            };
            let mut feats: Vec<Vec<f64>> = g
                .value(phi_clean.expect("clean rows"))
                .rows()
                .map(<[f64]>::to_vec)
                .collect();
            if uses_synth {
                feats.extend(
                    g.value(phi_deg.expect("synth rows"))
                        .rows()
                        .map(<[f64]>::to_vec),
                );
            }
            if let Some(v) = &vid_feats {
                feats.extend(v.rows().map(<[f64]>::to_vec));
            }
            let mut dg = Graph::new();
            let fx = dg.input(Tensor::from_rows(&feats)?);
            let out = disc.forward(&mut dg, fx, ParamMode::AsConfigured)?;
            let loss = losses::discriminator_loss(&mut dg, mode, out, &counts)?;
            let targets = counts.targets(mode)?;
            let correct = dg
                .value(out)
                .rows()
                .zip(&targets)
                .filter(|(r, &t)| argmax(r) == t)
                .count();
            d_accuracy = Some(correct as f64 / targets.len() as f64);
            d_loss = Some(dg.value(loss).item());
            let grads = dg.backward(loss)?;
            adam_d.step(disc.params_mut(), &grads);
        }

        // adapted-network step against the updated discriminator
        let mut parts: LossParts<Var> = LossParts::default();
        if cfg.losses.fm {
            parts.fm = Some(losses::fm_loss(
                &mut g,
                phi_clean.expect("clean rows"),
                psi_clean,
            )?);
        }
        if cfg.losses.fr {
            parts.fr = Some(losses::fr_loss(
                &mut g,
                phi_deg.expect("degraded rows"),
                psi_clean,
            )?);
        }
        if cfg.losses.ic {
            let anchors = g.select_rows(
                phi_deg.expect("degraded rows"),
                (0..n).map(|i| 2 * i + 1).collect(),
            )?;
            let refs = g.input(psi_rows(&mut (0..n).map(|i| 2 * i))?);
            parts.ic = Some(losses::npair_loss(&mut g, anchors, refs)?);
        }
        if adv_in_g {
            let mode = d_mode.expect("adversarial loss has a discriminator");
            let disc = self.discriminator.as_ref().expect("discriminator built");
            let mut all = vec![phi_clean.expect("clean rows")];
            if uses_synth {
                all.push(phi_deg.expect("synth rows"));
            }
            if let Some(v) = phi_vid {
                all.push(v);
            }
            let feats = g.concat_rows(&all)?;
            let out = disc.forward(&mut g, feats, ParamMode::Frozen)?;
            parts.adv = Some(losses::adversarial_loss(&mut g, mode, out, &counts)?);
        }
        let total = losses::total_loss_var(&mut g, &parts, &cfg.weights)?;
        let values = parts.values(&g);
        let grads = g.backward(total)?;
        self.adam_g.step(self.vdnet.params_mut(), &grads);

        if cfg.check_frozen_each_step {
            self.check_frozen()?;
        }
        let record = StepRecord {
            iteration: it,
            fm: values.fm,
            fr: values.fr,
            ic: values.ic,
            adv: values.adv,
            total: losses::total_loss(&values, &cfg.weights),
            d_loss,
            d_accuracy,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if !record.total.is_finite() || d_loss.is_some_and(|d| !d.is_finite()) {
            return Err(Error::Numerical(format!(
                "loss is not finite at iteration {it}"
            )));
        }
        self.iteration += 1;
        Ok(record)
    }

    fn check_frozen(&self) -> Result<()> {
        if self.vdnet.frozen_checksum() != self.frozen_checksum {
            return Err(Error::Numerical(format!(
                "frozen layers changed at iteration {}",
                self.iteration
            )));
        }
        Ok(())
    }
}

/// Embeds many images in fixed-size batches.
pub fn embed_in_chunks(net: &Network, imgs: &[Image]) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(imgs.len());
    for c in imgs.chunks(CHUNK) {
        rows.extend(net.embed_batch(c)?.rows().map(<[f64]>::to_vec));
    }
    Tensor::from_rows(&rows)
}

pub struct TrainOutcome {
    pub vdnet: Network,
    pub discriminator: Option<Network>,
    pub history: TrainHistory,
}

/// Runs `cfg.iterations` steps from the reference network.
pub fn train(
    cfg: &TrainConfig,
    rfnet: &Network,
    images: &[LabeledImage],
    videos: &[UnlabeledVideo],
) -> Result<TrainOutcome> {
    let mut state = TrainState::new(cfg, rfnet, images, videos)?;
    let mut history = TrainHistory::default();
    for _ in 0..cfg.iterations {
        history.records.push(state.step(images, videos)?);
    }
    state.check_frozen()?;
    Ok(TrainOutcome {
        vdnet: state.vdnet,
        discriminator: state.discriminator,
        history,
    })
}

// ------------------------------------------------------------ pretraining

fn default_embed_l2() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub network: NetworkConfig,
    pub iterations: usize,
    /// Identities per batch; each contributes one anchor/positive pair.
    pub pairs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight of the mean squared embedding norm, which keeps the logits
    /// of the pair loss bounded.
    #[serde(default = "default_embed_l2")]
    pub embed_l2: f64,
    /// Mirror each sampled image with probability 1/2.
    #[serde(default = "default_true")]
    pub flips: bool,
}

impl PretrainConfig {
    pub fn toy() -> Self {
        PretrainConfig {
            network: NetworkConfig::toy(),
            iterations: 200,
            pairs: 16,
            lr: 1e-3,
            seed: 0,
            embed_l2: default_embed_l2(),
            flips: true,
        }
    }
}

/// Trains the reference embedder with the N-pair loss on labeled stills and
/// returns it with every layer frozen.
pub fn pretrain_rfnet(images: &[LabeledImage], cfg: &PretrainConfig) -> Result<Network> {
    let sampler = PairSampler::new(images, cfg.pairs)?;
    if cfg.pairs == 0 {
        return Err(Error::Config(
            "pretraining needs at least one pair per batch".into(),
        ));
    }
    let mut net = Network::init_embedder(&cfg.network, &mut rng_for(cfg.seed, STREAM_INIT))?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let size = cfg.network.input_size;
    for it in 0..cfg.iterations {
        let mut rng = rng_for(cfg.seed, stream_of(it, 0));
        let chosen = sampler.sample(&mut rng, cfg.pairs);
        let batch: Vec<Image> = chosen
            .iter()
            .map(|&i| {
                let img = &images[i].image;
                if cfg.flips && rng.gen_bool(0.5) {
                    img.flip_horizontal()
                } else {
                    img.clone()
                }
            })
            .collect();
        let mut g = Graph::new();
        let x = g.input(images_tensor(&batch, size)?);
        let f = net.forward(&mut g, x, ParamMode::AsConfigured)?;
        let anchors = g.select_rows(f, (0..cfg.pairs).map(|i| 2 * i + 1).collect())?;
        let refs = g.select_rows(f, (0..cfg.pairs).map(|i| 2 * i).collect())?;
        let mut loss = losses::npair_loss(&mut g, anchors, refs)?;
        if cfg.embed_l2 > 0.0 {
            let sq = g.square(f);
            let per_row = g.sum_rows(sq)?;
            let m = g.mean(per_row);
            let reg = g.scale(m, cfg.embed_l2);
            loss = g.add(loss, reg)?;
        }
        if !g.value(loss).item().is_finite() {
            return Err(Error::Numerical(format!(
                "pretraining loss is not finite at iteration {it}"
            )));
        }
        let grads = g.backward(loss)?;
        adam.step(net.params_mut(), &grads);
    }
    build_rfnet(&cfg.network, net.params())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_toy, ToyCorpus, ToyGenConfig};
    use crate::models::Network;

    fn corpus() -> ToyCorpus {
        generate_toy(&ToyGenConfig {
            n_identities: 8,
            images_per_identity: 3,
            n_videos: 4,
            frames_per_video: 5,
            n_eval_identities: Some(2),
            eval_videos_per_identity: 1,
            n_folds: 1,
            ..Default::default()
        })
        .unwrap()
    }

    fn random_rfnet(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = Network::init_embedder(&NetworkConfig::toy(), &mut rng).unwrap();
        build_rfnet(&NetworkConfig::toy(), init.params()).unwrap()
    }

    fn small(model: Model, iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_total: 16,
            image_half: 8,
            video_half: 8,
            ..TrainConfig::preset(model)
        }
    }

    #[test]
    fn presets_validate_and_match_the_ablation() {
        for m in Model::ALL {
            TrainConfig::preset(m).validate().unwrap();
        }
        assert_eq!(
            TrainConfig::preset(Model::F)
                .mode
                .discriminator()
                .unwrap()
                .ways(),
            3
        );
        assert_eq!(TrainConfig::preset(Model::C).augment.label(), "M/S/C");
        assert_eq!(TrainConfig::preset(Model::A).augment.label(), "M/S");
        assert_eq!(TrainConfig::preset(Model::D).augment.label(), "--");
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let mut c = TrainConfig::preset(Model::C);
        c.losses.adv = true;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::preset(Model::F);
        c.mode = AdaptMode::None;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::preset(Model::C);
        c.video_half = 3;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::preset(Model::E);
        c.augment = TransformSet::NONE;
        c.losses.fr = false;
        assert!(c.validate().is_err());
    }

    #[test]
    fn model_b_never_builds_a_discriminator() {
        let c = corpus();
        let out = train(&small(Model::B, 2), &random_rfnet(0), &c.images, &c.videos).unwrap();
        assert!(out.discriminator.is_none());
        assert!(out.history.records.iter().all(|r| r.d_loss.is_none()));
    }

    #[test]
    fn model_f_has_three_way_discriminator() {
        let c = corpus();
        let out = train(&small(Model::F, 2), &random_rfnet(0), &c.images, &c.videos).unwrap();
        assert_eq!(out.discriminator.unwrap().output_dim(), 3);
        assert_eq!(out.history.records.len(), 2);
    }

    #[test]
    fn fm_only_stays_at_its_fixed_point() {
        let c = corpus();
        let mut cfg = small(Model::C, 3);
        cfg.losses = LossToggles {
            ic: false,
            fm: true,
            fr: false,
            adv: false,
        };
        let out = train(&cfg, &random_rfnet(1), &c.images, &c.videos).unwrap();
        for r in &out.history.records {
            assert_eq!(r.fm, Some(0.0));
        }
    }

    #[test]
    fn recorded_losses_are_finite_and_nonnegative() {
        let c = corpus();
        let out = train(&small(Model::F, 3), &random_rfnet(2), &c.images, &c.videos).unwrap();
        for r in &out.history.records {
            let p = r.parts();
            for v in [p.fm, p.fr, p.ic, p.adv, r.d_loss].into_iter().flatten() {
                assert!(v.is_finite() && v >= 0.0, "{r:?}");
            }
        }
    }

    #[test]
    fn zero_gamma_ignores_video_content() {
        let c = corpus();
        let mut cfg = small(Model::F, 3);
        cfg.weights.gamma = 0.0;
        let rf = random_rfnet(3);
        let a = train(&cfg, &rf, &c.images, &c.videos).unwrap();
        let mut other = c.videos.clone();
        for v in &mut other {
            for f in &mut v.frames {
                *f = f.flip_horizontal();
            }
        }
        let b = train(&cfg, &rf, &c.images, &other).unwrap();
        assert_eq!(a.vdnet.params(), b.vdnet.params());
    }

    #[test]
    fn frozen_layers_survive_training() {
        let c = corpus();
        let rf = random_rfnet(4);
        let out = train(&small(Model::E, 3), &rf, &c.images, &c.videos).unwrap();
        let vd = build_vdnet(&rf).unwrap();
        assert_eq!(out.vdnet.frozen_checksum(), vd.frozen_checksum());
        assert_ne!(out.vdnet.params(), vd.params());
    }

    #[test]
    fn pretraining_rejects_single_identity() {
        let c = corpus();
        let one: Vec<_> = c
            .images
            .iter()
            .filter(|i| i.identity == 0)
            .cloned()
            .collect();
        assert!(pretrain_rfnet(&one, &PretrainConfig::toy()).is_err());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let c = corpus();
        let cfg = PretrainConfig {
            iterations: 3,
            pairs: 4,
            ..PretrainConfig::toy()
        };
        let a = pretrain_rfnet(&c.images, &cfg).unwrap();
        let b = pretrain_rfnet(&c.images, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.trainable_param_count(), 0);
    }
}
