//! Frame descriptors, pooling of frames into a video descriptor, and
//! discriminator-based frame quality.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::models::Network;
use crate::tensor::Tensor;
use crate::trainer::embed_in_chunks;

/// Unit-norm copy of `v`.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Numerical(format!(
            "cannot normalize a vector of norm {n}"
        )));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn flip_average(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let (a, b) = (normalize(a)?, normalize(b)?);
    normalize(
        &a.iter()
            .zip(&b)
            .map(|(x, y)| 0.5 * (x + y))
            .collect::<Vec<_>>(),
    )
}

/// Unit descriptor of one frame: the normalized embeddings of the frame and
/// of its mirror image, averaged and renormalized.
pub fn frame_feature(net: &Network, frame: &Image) -> Result<Vec<f64>> {
    let e = net.embed_batch(&[frame.clone(), frame.flip_horizontal()])?;
    flip_average(e.row(0), e.row(1))
}

/// [`frame_feature`] for many frames, batched.
pub fn frame_features(net: &Network, frames: &[Image]) -> Result<Vec<Vec<f64>>> {
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    let mut both = frames.to_vec();
    both.extend(frames.iter().map(Image::flip_horizontal));
    let e = embed_in_chunks(net, &both)?;
    let n = frames.len();
    (0..n)
        .map(|i| flip_average(e.row(i), e.row(n + i)))
        .collect()
}

/// Discriminator confidence that each feature comes from still images.
pub fn image_confidence(disc: &Network, features: &[Vec<f64>]) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Ok(Vec::new());
    }
    let p = disc.classify(&Tensor::from_rows(features)?)?;
    Ok(p.rows().map(|r| r[0]).collect())
}

/// Frame descriptors of one video with their fusion weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoFeatureSet {
    pub video_id: String,
    pub features: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl VideoFeatureSet {
    pub fn new(
        video_id: impl Into<String>,
        features: Vec<Vec<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Empty("video has no frames".into()));
        }
        if weights.len() != features.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} frames",
                weights.len(),
                features.len()
            )));
        }
        for (i, f) in features.iter().enumerate() {
            let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidArgument(format!(
                    "frame {i} feature has norm {n}"
                )));
            }
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "frame weight {w} is not finite and positive"
            )));
        }
        Ok(VideoFeatureSet {
            video_id: video_id.into(),
            features,
            weights,
        })
    }

    /// Descriptors of every frame, weighted by `disc` or uniformly.
    pub fn extract(
        video_id: impl Into<String>,
        net: &Network,
        disc: Option<&Network>,
        frames: &[Image],
    ) -> Result<Self> {
        let features = frame_features(net, frames)?;
        let weights = match disc {
            Some(d) => image_confidence(d, &features)?,
            None => vec![1.0; features.len()],
        };
        Self::new(video_id, features, weights)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Uniform,
    Weighted,
}

fn check_dims(features: &[Vec<f64>]) -> Result<usize> {
    let first = features
        .first()
        .ok_or_else(|| Error::Empty("no frame features to fuse".into()))?;
    if let Some(f) = features.iter().find(|f| f.len() != first.len()) {
        return Err(Error::InvalidArgument(format!(
            "feature dimensions differ: {} and {}",
            first.len(),
            f.len()
        )));
    }
    Ok(first.len())
}

/// Mean of the frame features, not renormalized.
pub fn fuse_uniform(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = check_dims(features)?;
    let mut out = vec![0.0; k];
    for f in features {
        for (o, x) in out.iter_mut().zip(f) {
            *o += x;
        }
    }
    let n = features.len() as f64;
    Ok(out.into_iter().map(|x| x / n).collect())
}

/// `Σ w_v f_v / Σ w_v`.
pub fn fuse_weighted(features: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let k = check_dims(features)?;
    if weights.len() != features.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} frames",
            weights.len(),
            features.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument(
            "weights must be finite and >= 0".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("weights sum to zero".into()));
    }
    let mut out = vec![0.0; k];
    for (f, w) in features.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(f) {
            *o += w * x;
        }
    }
    Ok(out.into_iter().map(|x| x / total).collect())
}

/// Whether [`fuse`] rescales the fused vector to unit length before it is
/// compared by inner product.
pub const RENORMALIZE_FUSED: bool = false;

/// Fuses the selected frames of a set.
pub fn fuse(set: &VideoFeatureSet, frames: &[usize], mode: FusionMode) -> Result<Vec<f64>> {
    let feats: Vec<Vec<f64>> = frames.iter().map(|&i| set.features[i].clone()).collect();
    let fused = match mode {
        FusionMode::Uniform => fuse_uniform(&feats)?,
        FusionMode::Weighted => {
            let w: Vec<f64> = frames.iter().map(|&i| set.weights[i]).collect();
            fuse_weighted(&feats, &w)?
        }
    };
    if RENORMALIZE_FUSED {
        normalize(&fused)
    } else {
        Ok(fused)
    }
}

/// Inner product.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot compare {}- and {}-dimensional features",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedFrame {
    /// 1-based frame index.
    pub frame: usize,
    pub weight: f64,
}

/// Frames by descending weight; equal weights keep frame order.
pub fn rank_frames(weights: &[f64]) -> Vec<RankedFrame> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .map(|i| RankedFrame {
            frame: i + 1,
            weight: weights[i],
        })
        .collect()
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "rank correlation needs two equal-length series of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (va * vb).sqrt()))
}

/// Agreement between a frame ranking and per-frame severity: Spearman
/// correlation between each frame's rank position (1 = highest weight) and
/// its severity. Positive when low-weight frames are the severe ones.
pub fn rank_severity_correlation(weights: &[f64], severity: &[f64]) -> Result<Option<f64>> {
    let mut position = vec![0.0; weights.len()];
    for (pos, r) in rank_frames(weights).iter().enumerate() {
        position[r.frame - 1] = (pos + 1) as f64;
    }
    spearman(&position, severity)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_examples() {
        let a = vec![0.6, 0.8];
        assert_eq!(fuse_uniform(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(
            fuse_uniform(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap(),
            vec![0.0, 0.0]
        );
        let m = fuse_uniform(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert!(m.iter().zip(&a).all(|(x, y)| (x - y).abs() < 1e-15));
        assert!(matches!(fuse_uniform(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn weighted_examples() {
        let f = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(fuse_weighted(&f, &[0.75, 0.25]).unwrap(), vec![0.75, 0.25]);
        assert_eq!(fuse_weighted(&f, &[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(
            fuse_weighted(&f, &[0.3, 0.3]).unwrap(),
            fuse_uniform(&f).unwrap()
        );
        assert!(fuse_weighted(&f, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&[0.6, 0.8], &[0.6, 0.8]).unwrap(), 1.0);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((similarity(&[0.6, 0.8], &[0.8, 0.6]).unwrap() - 0.96).abs() < 1e-15);
        assert!(similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ranking_examples() {
        let order: Vec<usize> = rank_frames(&[0.2, 0.9, 0.5])
            .iter()
            .map(|r| r.frame)
            .collect();
        assert_eq!(order, vec![2, 3, 1]);
        let order: Vec<usize> = rank_frames(&[0.4; 4]).iter().map(|r| r.frame).collect();
        assert_eq!(order, vec![1, 2, 3, 4]);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(
            spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            Some(1.0)
        );
        assert_eq!(
            spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
            Some(-1.0)
        );
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), None);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        // highest weight on the mildest frame → positive agreement
        let c = rank_severity_correlation(&[0.9, 0.5, 0.1], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(c, Some(1.0));
    }

    #[test]
    fn feature_set_checks_norms_and_weights() {
        assert!(VideoFeatureSet::new("v", vec![vec![1.0, 0.0]], vec![0.5]).is_ok());
        assert!(VideoFeatureSet::new("v", vec![vec![2.0, 0.0]], vec![0.5]).is_err());
        assert!(VideoFeatureSet::new("v", vec![vec![1.0, 0.0]], vec![0.0]).is_err());
        assert!(VideoFeatureSet::new("v", vec![], vec![]).is_err());
    }
}
