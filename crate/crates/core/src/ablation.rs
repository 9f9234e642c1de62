//! Model-by-frames-by-fusion comparison table on a toy corpus.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data_io::ToyCorpus;
use crate::error::Result;
use crate::evaluation::{describe_videos, fuse_videos, verification_report, FrameCount};
use crate::fusion::{FusionMode, VideoFeatureSet};
use crate::models::Network;
use crate::trainer::{train, Model, TrainConfig, TrainHistory};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub ic: bool,
    pub fm: bool,
    /// Degradations used for restoration, e.g. `M/S/C`, or `--`.
    pub fr: String,
    /// Discriminator type, or `--`.
    pub adv: String,
    pub fusion: FusionMode,
    /// Keyed by frames per video. Weighted rows have no single-frame
    /// column since weighting one frame changes nothing.
    pub accuracy: BTreeMap<FrameCount, Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub frames: Vec<FrameCount>,
    pub rows: Vec<AblationRow>,
}

/// Accuracy of every frame setting for one set of descriptors.
pub fn accuracy_by_frames(
    sets: &BTreeMap<String, VideoFeatureSet>,
    corpus: &ToyCorpus,
    frames: &[FrameCount],
    fusion: FusionMode,
    seed: u64,
) -> Result<BTreeMap<FrameCount, Cell>> {
    let mut out = BTreeMap::new();
    for &f in frames {
        if fusion == FusionMode::Weighted && f == FrameCount::N(1) {
            continue;
        }
        let (fused, _) = fuse_videos(sets, f, fusion, seed)?;
        let v = verification_report(&fused, &corpus.pairs)?;
        out.insert(
            f,
            Cell {
                mean: v.mean,
                stderr: v.stderr,
            },
        );
    }
    Ok(out)
}

fn adv_label(cfg: &TrainConfig) -> String {
    match cfg.mode {
        crate::trainer::AdaptMode::None => "--".into(),
        crate::trainer::AdaptMode::Plain2 => "two-way".into(),
        crate::trainer::AdaptMode::Merged2 => "two-way merged".into(),
        crate::trainer::AdaptMode::ThreeWay => "three-way".into(),
    }
}

/// A trained ablation row.
pub struct TrainedModel {
    pub model: Model,
    pub config: TrainConfig,
    pub vdnet: Network,
    pub discriminator: Option<Network>,
    pub history: TrainHistory,
}

/// Trains each configuration from the same reference network.
pub fn train_models(
    configs: &[(Model, TrainConfig)],
    rfnet: &Network,
    corpus: &ToyCorpus,
) -> Result<Vec<TrainedModel>> {
    configs
        .iter()
        .map(|(m, cfg)| {
            let out = train(cfg, rfnet, &corpus.images, &corpus.videos)?;
            Ok(TrainedModel {
                model: *m,
                config: cfg.clone(),
                vdnet: out.vdnet,
                discriminator: out.discriminator,
                history: out.history,
            })
        })
        .collect()
}

/// Builds the table: a baseline row for the reference network, then one
/// row per model, plus weighted-fusion sub-rows wherever a discriminator
/// exists. The baseline's weighted sub-row borrows the discriminator of the
/// last model that has a three-way one (or any discriminator otherwise).
pub fn run_ablation(
    rfnet: &Network,
    models: &[TrainedModel],
    corpus: &ToyCorpus,
    frames: &[FrameCount],
    seed: u64,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    let weighting_disc = models
        .iter()
        .rev()
        .find(|m| {
            m.discriminator
                .as_ref()
                .is_some_and(|d| d.output_dim() == 3)
        })
        .or_else(|| models.iter().rev().find(|m| m.discriminator.is_some()))
        .and_then(|m| m.discriminator.as_ref());

    let base_sets = describe_videos(rfnet, weighting_disc, &corpus.eval_videos)?;
    let base_row = |fusion, accuracy| AblationRow {
        model: "baseline".into(),
        ic: false,
        fm: false,
        fr: "--".into(),
        adv: "--".into(),
        fusion,
        accuracy,
    };
    rows.push(base_row(
        FusionMode::Uniform,
        accuracy_by_frames(&base_sets, corpus, frames, FusionMode::Uniform, seed)?,
    ));
    if weighting_disc.is_some() {
        rows.push(base_row(
            FusionMode::Weighted,
            accuracy_by_frames(&base_sets, corpus, frames, FusionMode::Weighted, seed)?,
        ));
    }

    for m in models {
        let sets = describe_videos(&m.vdnet, m.discriminator.as_ref(), &corpus.eval_videos)?;
        let mut fusions = vec![FusionMode::Uniform];
        if m.discriminator.is_some() {
            fusions.push(FusionMode::Weighted);
        }
        for fusion in fusions {
            rows.push(AblationRow {
                model: m.model.name().into(),
                ic: m.config.losses.ic,
                fm: m.config.losses.fm,
                fr: if m.config.losses.fr {
                    m.config.augment.label()
                } else {
                    "--".into()
                },
                adv: adv_label(&m.config),
                fusion,
                accuracy: accuracy_by_frames(&sets, corpus, frames, fusion, seed)?,
            });
        }
    }
    Ok(AblationTable {
        seed,
        frames: frames.to_vec(),
        rows,
    })
}
