//! Verification and identification metrics, frame subsampling and the
//! video-level evaluation report.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{EvalPair, LabeledImage, UnlabeledVideo, VideoTruth};
use crate::error::{Error, Result};
use crate::fusion::{fuse, normalize, similarity, FusionMode, VideoFeatureSet};
use crate::image::Image;
use crate::models::Network;
use crate::trainer::embed_in_chunks;

/// Frames per video used to build a descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FrameCount {
    N(usize),
    All,
}

impl FrameCount {
    /// The columns of the ablation table.
    pub const TABLE: [FrameCount; 5] = [
        FrameCount::N(1),
        FrameCount::N(5),
        FrameCount::N(20),
        FrameCount::N(50),
        FrameCount::All,
    ];
}

impl fmt::Display for FrameCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameCount::N(n) => write!(f, "{n}"),
            FrameCount::All => f.write_str("all"),
        }
    }
}

impl FromStr for FrameCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(FrameCount::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(FrameCount::N(n)),
            _ => Err(Error::InvalidArgument(format!(
                "frame count must be a positive integer or 'all', got {s:?}"
            ))),
        }
    }
}

impl Serialize for FrameCount {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FrameCount {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Frame indices of a video, a uniform subset without replacement that is
/// fixed by `(seed, video_id)`. The flag is set when more frames were asked
/// for than the video has (all frames are used then).
pub fn subsample_frames(
    n_frames: usize,
    count: FrameCount,
    seed: u64,
    video_id: &str,
) -> (Vec<usize>, bool) {
    match count {
        FrameCount::All => ((0..n_frames).collect(), false),
        FrameCount::N(n) if n >= n_frames => ((0..n_frames).collect(), n > n_frames),
        FrameCount::N(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(fnv1a(video_id));
            let mut idx = index::sample(&mut rng, n_frames, n).into_vec();
            idx.sort_unstable();
            (idx, false)
        }
    }
}

/// Fraction of pairs classified correctly with rule `score >= threshold`.
pub fn fold_accuracy(labels: &[bool], scores: &[f64], threshold: f64) -> f64 {
    let correct = labels
        .iter()
        .zip(scores)
        .filter(|(&same, &s)| (s >= threshold) == same)
        .count();
    correct as f64 / labels.len() as f64
}

/// Threshold maximizing accuracy on a labeled set. Candidates are the
/// observed scores and `+inf` (reject everything); the smallest maximizer
/// wins. Depending only on score order keeps the choice invariant under
/// increasing transforms of the scores.
pub fn best_threshold(labels: &[bool], scores: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let total_genuine = labels.iter().filter(|&&l| l).count();
    // threshold at the i-th smallest score accepts order[i..]
    let mut genuine_below = 0;
    let mut impostor_below = 0;
    let mut best = (total_genuine, f64::NEG_INFINITY);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let correct = (total_genuine - genuine_below) + impostor_below;
        if correct > best.0 || best.1 == f64::NEG_INFINITY {
            best = (correct, t);
        }
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                genuine_below += 1;
            } else {
                impostor_below += 1;
            }
            i += 1;
        }
    }
    if impostor_below > best.0 {
        best = (impostor_below, f64::INFINITY);
    }
    best.1
}

/// Verification summary over folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub fold_accuracy: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation of the fold accuracies over √folds.
    pub stderr: f64,
}

/// Mean and standard error (`n − 1` denominator) of fold values.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / n.sqrt())
}

/// Cross-fold verification: each fold is scored with the threshold that
/// maximizes accuracy on all other folds.
pub fn verification_accuracy(
    folds: &[usize],
    labels: &[bool],
    scores: &[f64],
) -> Result<VerificationResult> {
    if folds.len() != labels.len() || labels.len() != scores.len() {
        return Err(Error::InvalidArgument(
            "folds, labels and scores differ in length".into(),
        ));
    }
    let ids: std::collections::BTreeSet<usize> = folds.iter().copied().collect();
    if ids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 folds, got {}",
            ids.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let mut accs = Vec::with_capacity(ids.len());
    let mut thresholds = Vec::with_capacity(ids.len());
    for &f in &ids {
        let (mut tl, mut ts, mut el, mut es) = (vec![], vec![], vec![], vec![]);
        for i in 0..folds.len() {
            if folds[i] == f {
                el.push(labels[i]);
                es.push(scores[i]);
            } else {
                tl.push(labels[i]);
                ts.push(scores[i]);
            }
        }
        let t = best_threshold(&tl, &ts);
        thresholds.push(t);
        accs.push(fold_accuracy(&el, &es, t));
    }
    let (mean, stderr) = mean_stderr(&accs);
    Ok(VerificationResult {
        fold_accuracy: accs,
        thresholds,
        mean,
        stderr,
    })
}

/// True-accept rate at the smallest threshold (among observed scores and
/// `+inf`) whose impostor acceptance `score >= threshold` is at most `far`.
pub fn tar_at_far(genuine: &[f64], impostor: &[f64], far: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&far) {
        return Err(Error::InvalidArgument(format!(
            "far must be in [0, 1], got {far}"
        )));
    }
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Empty(
            "tar_at_far needs genuine and impostor scores".into(),
        ));
    }
    let mut imp = impostor.to_vec();
    imp.sort_by(f64::total_cmp);
    let mut cands: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    cands.push(f64::INFINITY);
    let n_imp = imp.len() as f64;
    let threshold = cands
        .into_iter()
        .find(|&t| {
            let accepted = imp.len() - imp.partition_point(|&s| s < t);
            accepted as f64 / n_imp <= far
        })
        .expect("+inf accepts nothing");
    let hits = genuine.iter().filter(|&&s| s >= threshold).count();
    Ok(hits as f64 / genuine.len() as f64)
}

/// A labeled descriptor for identification.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub identity: usize,
    pub feature: Vec<f64>,
}

/// Fraction of probes whose identity appears among the `k` most similar
/// gallery entries (ties broken by gallery order).
pub fn cmc_rank_k(probes: &[Labeled], gallery: &[Labeled], k: usize) -> Result<f64> {
    if gallery.is_empty() {
        return Err(Error::Empty("gallery is empty".into()));
    }
    if probes.is_empty() {
        return Err(Error::Empty("no probes".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("rank k must be >= 1".into()));
    }
    let mut hits = 0;
    for (pi, p) in probes.iter().enumerate() {
        if !gallery.iter().any(|g| g.identity == p.identity) {
            return Err(Error::InvalidArgument(format!(
                "probe {pi} identity {} is not in the gallery",
                p.identity
            )));
        }
        let sims = gallery
            .iter()
            .map(|g| similarity(&p.feature, &g.feature))
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..gallery.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        if order
            .iter()
            .take(k)
            .any(|&i| gallery[i].identity == p.identity)
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

pub const FAR_LEVELS: [f64; 3] = [0.001, 0.01, 0.1];
pub const RANKS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Pairwise same/different decisions over folds.
    Verification,
    /// Set-to-set matching: TAR at fixed FAR and rank-k identification.
    Set,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub frames: FrameCount,
    pub fusion: FusionMode,
    pub seed: u64,
    pub threshold_rule: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationResult>,
    /// Keyed by the FAR level as printed, e.g. `"0.01"`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tar_at_far: BTreeMap<String, f64>,
    /// Keyed by `"rank1"`, `"rank5"`, ...
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub rank_accuracy: BTreeMap<String, f64>,
    /// Videos that had fewer frames than requested.
    pub clamped_videos: usize,
}

pub const THRESHOLD_RULE: &str = "per test fold, the accuracy-maximizing threshold over the other folds; accept iff score >= threshold";

/// Per-frame descriptors of every evaluation video, computed once and then
/// fused under any frame count and fusion mode.
pub fn describe_videos(
    net: &Network,
    disc: Option<&Network>,
    videos: &[UnlabeledVideo],
) -> Result<BTreeMap<String, VideoFeatureSet>> {
    let sets = crate::parallel::map(videos, crate::parallel::worker_count()?, |v| {
        VideoFeatureSet::extract(v.video_id.clone(), net, disc, &v.frames)
    })?;
    Ok(sets.into_iter().map(|s| (s.video_id.clone(), s)).collect())
}

/// Fused descriptor of every video. Returns the descriptors and the number
/// of clamped videos.
pub fn fuse_videos(
    sets: &BTreeMap<String, VideoFeatureSet>,
    frames: FrameCount,
    fusion: FusionMode,
    seed: u64,
) -> Result<(BTreeMap<String, Vec<f64>>, usize)> {
    let mut clamped = 0;
    let mut out = BTreeMap::new();
    for (id, set) in sets {
        let (idx, c) = subsample_frames(set.features.len(), frames, seed, id);
        clamped += c as usize;
        out.insert(id.clone(), fuse(set, &idx, fusion)?);
    }
    Ok((out, clamped))
}

/// Similarity of each pair, in pair order.
pub fn score_pairs(fused: &BTreeMap<String, Vec<f64>>, pairs: &[EvalPair]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| {
            let get = |id: &str| {
                fused.get(id).ok_or_else(|| {
                    Error::InvalidArgument(format!("pair references unknown video {id}"))
                })
            };
            similarity(get(&p.video_a)?, get(&p.video_b)?)
        })
        .collect()
}

/// Verification report over the pair folds.
pub fn verification_report(
    fused: &BTreeMap<String, Vec<f64>>,
    pairs: &[EvalPair],
) -> Result<VerificationResult> {
    let scores = score_pairs(fused, pairs)?;
    let folds: Vec<usize> = pairs.iter().map(|p| p.fold).collect();
    let labels: Vec<bool> = pairs.iter().map(|p| p.same).collect();
    verification_accuracy(&folds, &labels, &scores)
}

/// TAR at the standard FAR levels from the pair scores, and rank-k
/// identification with each identity's first video as its gallery entry
/// and the remaining videos as probes.
pub fn set_report(
    fused: &BTreeMap<String, Vec<f64>>,
    pairs: &[EvalPair],
    truth: &[VideoTruth],
) -> Result<(BTreeMap<String, f64>, BTreeMap<String, f64>)> {
    let scores = score_pairs(fused, pairs)?;
    let (mut genuine, mut impostor) = (vec![], vec![]);
    for (p, s) in pairs.iter().zip(scores) {
        if p.same {
            genuine.push(s)
        } else {
            impostor.push(s)
        }
    }
    let mut tar = BTreeMap::new();
    for far in FAR_LEVELS {
        tar.insert(far.to_string(), tar_at_far(&genuine, &impostor, far)?);
    }
    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for t in truth {
        let feature = fused
            .get(&t.video_id)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no descriptor for video {}", t.video_id))
            })?
            .clone();
        let item = Labeled {
            identity: t.identity_id,
            feature,
        };
        if seen.insert(t.identity_id) {
            gallery.push(item);
        } else {
            probes.push(item);
        }
    }
    let mut ranks = BTreeMap::new();
    for k in RANKS {
        ranks.insert(format!("rank{k}"), cmc_rank_k(&probes, &gallery, k)?);
    }
    Ok((tar, ranks))
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    sets: &BTreeMap<String, VideoFeatureSet>,
    pairs: &[EvalPair],
    truth: Option<&[VideoTruth]>,
    protocol: Protocol,
    frames: FrameCount,
    fusion: FusionMode,
    seed: u64,
) -> Result<EvalReport> {
    let (fused, clamped) = fuse_videos(sets, frames, fusion, seed)?;
    let mut report = EvalReport {
        protocol,
        frames,
        fusion,
        seed,
        threshold_rule: THRESHOLD_RULE.into(),
        verification: None,
        tar_at_far: BTreeMap::new(),
        rank_accuracy: BTreeMap::new(),
        clamped_videos: clamped,
    };
    match protocol {
        Protocol::Verification => report.verification = Some(verification_report(&fused, pairs)?),
        Protocol::Set => {
            let truth = truth.ok_or_else(|| {
                Error::InvalidArgument("set protocol needs identity ground truth".into())
            })?;
            let (tar, ranks) = set_report(&fused, pairs, truth)?;
            report.tar_at_far = tar;
            report.rank_accuracy = ranks;
        }
    }
    Ok(report)
}

/// Verification accuracy of an embedder on labeled stills: every
/// same-identity pair against as many seeded random different-identity
/// pairs, scored by cosine similarity and dealt into `folds` folds.
pub fn still_verification(
    net: &Network,
    images: &[LabeledImage],
    folds: usize,
    seed: u64,
) -> Result<VerificationResult> {
    let imgs: Vec<Image> = images.iter().map(|li| li.image.clone()).collect();
    let feats = embed_in_chunks(net, &imgs)?;
    let unit: Vec<Vec<f64>> = feats
        .rows()
        .map(|r| normalize(r).unwrap_or_else(|_| vec![0.0; r.len()]))
        .collect();
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            if images[i].identity == images[j].identity {
                genuine.push((i, j));
            } else {
                impostor.push((i, j));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, impostor.len(), genuine.len().min(impostor.len()));
    let impostor: Vec<(usize, usize)> = picked.into_iter().map(|k| impostor[k]).collect();
    let (mut f, mut l, mut s) = (vec![], vec![], vec![]);
    for (set, same) in [(&genuine, true), (&impostor, false)] {
        for (k, &(i, j)) in set.iter().enumerate() {
            f.push(k % folds);
            l.push(same);
            s.push(similarity(&unit[i], &unit[j])?);
        }
    }
    verification_accuracy(&f, &l, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_parses() {
        assert_eq!("all".parse::<FrameCount>().unwrap(), FrameCount::All);
        assert_eq!("20".parse::<FrameCount>().unwrap(), FrameCount::N(20));
        assert!("0".parse::<FrameCount>().is_err());
        assert_eq!(serde_json::to_string(&FrameCount::N(5)).unwrap(), "\"5\"");
    }

    #[test]
    fn subsampling() {
        assert_eq!(
            subsample_frames(4, FrameCount::All, 0, "v").0,
            vec![0, 1, 2, 3]
        );
        assert_eq!(
            subsample_frames(1, FrameCount::N(1), 0, "v"),
            (vec![0], false)
        );
        assert_eq!(
            subsample_frames(3, FrameCount::N(5), 0, "v"),
            (vec![0, 1, 2], true)
        );
        let a = subsample_frames(100, FrameCount::N(5), 0, "v").0;
        assert_eq!(a, subsample_frames(100, FrameCount::N(5), 0, "v").0);
        assert_ne!(a, subsample_frames(100, FrameCount::N(5), 1, "v").0);
        assert_ne!(a, subsample_frames(100, FrameCount::N(5), 0, "w").0);
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn fold_examples() {
        let labels = [true, true, false, false];
        let scores = [0.9, 0.8, 0.7, 0.1];
        // a threshold between the classes separates them
        assert_eq!(fold_accuracy(&labels, &scores, 0.75), 1.0);
        // the closed rule accepts an impostor sitting on the threshold
        assert_eq!(fold_accuracy(&labels, &scores, 0.7), 0.75);
        assert_eq!(fold_accuracy(&labels, &scores, 0.85), 0.75);
    }

    #[test]
    fn separated_scores_are_perfect() {
        let mut folds = vec![];
        let mut labels = vec![];
        let mut scores = vec![];
        for f in 0..10 {
            for i in 0..10 {
                folds.push(f);
                labels.push(i % 2 == 0);
                scores.push(if i % 2 == 0 {
                    1.0 + i as f64
                } else {
                    -(i as f64)
                });
            }
        }
        let r = verification_accuracy(&folds, &labels, &scores).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.stderr, 0.0);
        assert!(verification_accuracy(&[0, 0], &[true, false], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn tar_examples() {
        assert_eq!(tar_at_far(&[0.9, 0.8], &[0.7, 0.1], 0.5).unwrap(), 1.0);
        assert_eq!(tar_at_far(&[0.9, 0.8], &[0.7, 0.1], 0.0).unwrap(), 1.0);
        assert_eq!(tar_at_far(&[0.5, 0.8], &[0.7, 0.1], 0.0).unwrap(), 0.5);
        assert!(tar_at_far(&[0.9], &[0.1], 1.5).is_err());
        assert!(tar_at_far(&[], &[0.1], 0.1).is_err());
    }

    #[test]
    fn cmc_examples() {
        let items: Vec<Labeled> = (0..4)
            .map(|i| {
                let mut f = vec![0.0; 4];
                f[i] = 1.0;
                Labeled {
                    identity: i,
                    feature: f,
                }
            })
            .collect();
        assert_eq!(cmc_rank_k(&items, &items, 1).unwrap(), 1.0);
        assert_eq!(cmc_rank_k(&items, &items, 4).unwrap(), 1.0);
        assert!(cmc_rank_k(&items, &[], 1).is_err());
        let stranger = Labeled {
            identity: 9,
            feature: vec![1.0; 4],
        };
        assert!(cmc_rank_k(&[stranger], &items, 1).is_err());
    }

    #[test]
    fn stderr_definition() {
        let (m, s) = mean_stderr(&[0.9, 1.0]);
        assert!((m - 0.95).abs() < 1e-15);
        let sd = (((0.05f64).powi(2) * 2.0) / 1.0).sqrt();
        assert!((s - sd / 2f64.sqrt()).abs() < 1e-15);
    }
}
