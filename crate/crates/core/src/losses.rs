//! Objective terms. Each loss records itself on a [`Graph`] so it can be
//! differentiated through the networks that produced its inputs; the
//! `*_value` helpers evaluate the same code on plain tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Weights of the restoration, metric and adversarial terms relative to
/// feature matching.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// How domains map onto discriminator classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorMode {
    /// Images vs. video frames.
    Plain2,
    /// Images vs. synthesized images and video frames together.
    Merged2,
    /// Images, synthesized images and video frames as three classes.
    ThreeWay,
}

impl DiscriminatorMode {
    pub fn ways(self) -> usize {
        match self {
            DiscriminatorMode::Plain2 | DiscriminatorMode::Merged2 => 2,
            DiscriminatorMode::ThreeWay => 3,
        }
    }

    pub fn uses_synth(self) -> bool {
        !matches!(self, DiscriminatorMode::Plain2)
    }

    /// Zero-based class of each domain: (image, synth, video).
    fn classes(self) -> (usize, usize, usize) {
        match self {
            DiscriminatorMode::Plain2 => (0, 1, 1),
            DiscriminatorMode::Merged2 => (0, 1, 1),
            DiscriminatorMode::ThreeWay => (0, 1, 2),
        }
    }
}

/// Row layout of a discriminator batch: `images` rows first, then `synth`
/// (degraded images), then `video` frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCounts {
    pub images: usize,
    pub synth: usize,
    pub video: usize,
}

impl DomainCounts {
    pub fn total(&self) -> usize {
        self.images + self.synth + self.video
    }

    /// Target class of every row under `mode`.
    pub fn targets(&self, mode: DiscriminatorMode) -> Result<Vec<usize>> {
        if mode == DiscriminatorMode::Plain2 && self.synth > 0 {
            return Err(Error::InvalidArgument(
                "plain two-way discriminator has no class for synthesized images".into(),
            ));
        }
        let (ci, cs, cv) = mode.classes();
        let mut t = vec![ci; self.images];
        t.extend(std::iter::repeat_n(cs, self.synth));
        t.extend(std::iter::repeat_n(cv, self.video));
        Ok(t)
    }

    /// Rows that the adversarial term pushes towards the image class.
    pub fn adversarial_rows(&self, mode: DiscriminatorMode) -> Vec<usize> {
        let video = self.images + self.synth..self.total();
        if mode.uses_synth() {
            (self.images..self.total()).collect()
        } else {
            video.collect()
        }
    }
}

fn check_same(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) || g.shape(a).len() != 2 {
        return Err(Error::shape(
            what,
            format!(
                "arguments are {:?} and {:?}, expected equal [B, K]",
                g.shape(a),
                g.shape(b)
            ),
        ));
    }
    Ok(())
}

/// Mean over rows of the squared Euclidean distance.
fn mean_sq_distance(g: &mut Graph, a: Var, b: Var, what: &str) -> Result<Var> {
    check_same(g, a, b, what)?;
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    let per_row = g.sum_rows(sq)?;
    Ok(g.mean(per_row))
}

/// Feature matching between the adapted and reference embeddings of the
/// same clean images.
pub fn fm_loss(g: &mut Graph, phi: Var, psi: Var) -> Result<Var> {
    mean_sq_distance(g, phi, psi, "fm_loss")
}

/// Feature restoration: row `i` of `phi_degraded` embeds a degraded copy of
/// the image whose clean reference embedding is row `i` of `psi_clean`.
/// One degradation draw per sample stands in for the expectation.
pub fn fr_loss(g: &mut Graph, phi_degraded: Var, psi_clean: Var) -> Result<Var> {
    mean_sq_distance(g, phi_degraded, psi_clean, "fr_loss")
}

/// N-pair loss: softmax cross-entropy over logits `anchor_i · ref_n` with
/// target `n = i`, averaged over anchors.
pub fn npair_loss(g: &mut Graph, anchors: Var, refs: Var) -> Result<Var> {
    check_same(g, anchors, refs, "npair_loss")?;
    let n = g.shape(anchors)[0];
    let rt = g.transpose(refs)?;
    let logits = g.matmul(anchors, rt)?;
    let logp = g.log_softmax(logits)?;
    let diag = g.gather(logp, (0..n).collect())?;
    let m = g.mean(diag);
    Ok(g.scale(m, -1.0))
}

fn check_probs(
    g: &Graph,
    d_out: Var,
    mode: DiscriminatorMode,
    counts: &DomainCounts,
    what: &str,
) -> Result<()> {
    let s = g.shape(d_out);
    if s.len() != 2 || s[1] != mode.ways() || s[0] != counts.total() {
        return Err(Error::shape(
            what,
            format!(
                "discriminator output {s:?} does not match {} rows x {} classes",
                counts.total(),
                mode.ways()
            ),
        ));
    }
    Ok(())
}

/// Mean negative log-likelihood of each row's domain class.
pub fn discriminator_loss(
    g: &mut Graph,
    mode: DiscriminatorMode,
    d_out: Var,
    counts: &DomainCounts,
) -> Result<Var> {
    let targets = counts.targets(mode)?;
    check_probs(g, d_out, mode, counts, "discriminator_loss")?;
    let p = g.gather(d_out, targets)?;
    let lp = g.log(p)?;
    let m = g.mean(lp);
    Ok(g.scale(m, -1.0))
}

/// Mean of `-log D(image | x)` over the video rows (two-domain mode) or the
/// synthesized and video rows (other modes).
pub fn adversarial_loss(
    g: &mut Graph,
    mode: DiscriminatorMode,
    d_out: Var,
    counts: &DomainCounts,
) -> Result<Var> {
    counts.targets(mode)?;
    check_probs(g, d_out, mode, counts, "adversarial_loss")?;
    let rows = counts.adversarial_rows(mode);
    if rows.is_empty() {
        return Err(Error::Empty(
            "adversarial loss has no applicable samples".into(),
        ));
    }
    let sel = g.select_rows(d_out, rows)?;
    let n = g.shape(sel)[0];
    let p1 = g.gather(sel, vec![0; n])?;
    let lp = g.log(p1)?;
    let m = g.mean(lp);
    Ok(g.scale(m, -1.0))
}

/// Per-term values of one objective evaluation; disabled terms are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub fm: Option<T>,
    pub fr: Option<T>,
    pub ic: Option<T>,
    pub adv: Option<T>,
}

impl<T> Default for LossParts<T> {
    fn default() -> Self {
        LossParts {
            fm: None,
            fr: None,
            ic: None,
            adv: None,
        }
    }
}

/// `fm + alpha·fr + beta·ic + gamma·adv`, skipping absent terms.
pub fn total_loss(parts: &LossParts<f64>, w: &LossWeights) -> f64 {
    parts.fm.unwrap_or(0.0)
        + w.alpha * parts.fr.unwrap_or(0.0)
        + w.beta * parts.ic.unwrap_or(0.0)
        + w.gamma * parts.adv.unwrap_or(0.0)
}

/// Graph form of [`total_loss`]. Terms with zero weight are left out of the
/// graph entirely.
pub fn total_loss_var(g: &mut Graph, parts: &LossParts<Var>, w: &LossWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    let terms = [
        (parts.fm, 1.0),
        (parts.fr, w.alpha),
        (parts.ic, w.beta),
        (parts.adv, w.gamma),
    ];
    for (term, weight) in terms {
        let Some(t) = term else { continue };
        if weight == 0.0 {
            continue;
        }
        let scaled = if weight == 1.0 { t } else { g.scale(t, weight) };
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    acc.ok_or_else(|| Error::Config("objective has no active terms".into()))
}

impl LossParts<Var> {
    pub fn values(&self, g: &Graph) -> LossParts<f64> {
        let v = |x: Option<Var>| x.map(|x| g.value(x).item());
        LossParts {
            fm: v(self.fm),
            fr: v(self.fr),
            ic: v(self.ic),
            adv: v(self.adv),
        }
    }
}

fn eval2(a: &Tensor, b: &Tensor, f: impl Fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
    let out = f(&mut g, va, vb)?;
    Ok(g.value(out).item())
}

pub fn fm_loss_value(phi: &Tensor, psi: &Tensor) -> Result<f64> {
    eval2(phi, psi, fm_loss)
}

pub fn fr_loss_value(phi_degraded: &Tensor, psi_clean: &Tensor) -> Result<f64> {
    eval2(phi_degraded, psi_clean, fr_loss)
}

pub fn npair_loss_value(anchors: &Tensor, refs: &Tensor) -> Result<f64> {
    eval2(anchors, refs, npair_loss)
}

pub fn discriminator_loss_value(
    mode: DiscriminatorMode,
    d_out: &Tensor,
    counts: &DomainCounts,
) -> Result<f64> {
    let mut g = Graph::new();
    let d = g.input(d_out.clone());
    let out = discriminator_loss(&mut g, mode, d, counts)?;
    Ok(g.value(out).item())
}

pub fn adversarial_loss_value(
    mode: DiscriminatorMode,
    d_out: &Tensor,
    counts: &DomainCounts,
) -> Result<f64> {
    let mut g = Graph::new();
    let d = g.input(d_out.clone());
    let out = adversarial_loss(&mut g, mode, d, counts)?;
    Ok(g.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn fm_examples() {
        let a = t(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let z = t(&[&[0.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(fm_loss_value(&a, &a).unwrap(), 0.0);
        assert_eq!(fm_loss_value(&a, &z).unwrap(), 0.5);
        assert_eq!(
            fr_loss_value(&a, &z).unwrap(),
            fm_loss_value(&a, &z).unwrap()
        );
        assert!(fm_loss_value(&a, &t(&[&[0.0, 0.0]])).is_err());
    }

    #[test]
    fn npair_examples() {
        let one = t(&[&[0.3, -1.2]]);
        assert_eq!(npair_loss_value(&one, &t(&[&[2.0, 5.0]])).unwrap(), 0.0);
        let eye = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = npair_loss_value(&eye, &eye).unwrap();
        assert!((v - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((v - 0.313262).abs() < 1e-6);
        let zeros = Tensor::zeros(&[5, 3]);
        assert!((npair_loss_value(&zeros, &zeros).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn discriminator_examples() {
        let counts = DomainCounts {
            images: 2,
            synth: 1,
            video: 1,
        };
        let onehot = t(&[
            &[1.0, 0.0, 0.0],
            &[1.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0],
            &[0.0, 0.0, 1.0],
        ]);
        assert_eq!(
            discriminator_loss_value(DiscriminatorMode::ThreeWay, &onehot, &counts).unwrap(),
            0.0
        );
        let uniform = Tensor::full(&[4, 3], 1.0 / 3.0);
        let v = discriminator_loss_value(DiscriminatorMode::ThreeWay, &uniform, &counts).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);
        assert!((v - 1.098612).abs() < 1e-6);
    }

    #[test]
    fn plain_mode_rejects_synth_rows() {
        let counts = DomainCounts {
            images: 1,
            synth: 1,
            video: 1,
        };
        let p = Tensor::full(&[3, 2], 0.5);
        assert!(discriminator_loss_value(DiscriminatorMode::Plain2, &p, &counts).is_err());
        assert!(adversarial_loss_value(DiscriminatorMode::Plain2, &p, &counts).is_err());
        // wrong number of classes
        assert!(discriminator_loss_value(DiscriminatorMode::ThreeWay, &p, &counts).is_err());
    }

    #[test]
    fn adversarial_examples() {
        let counts = DomainCounts {
            images: 1,
            synth: 1,
            video: 2,
        };
        let sure = t(&[&[0.2, 0.8], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(
            adversarial_loss_value(DiscriminatorMode::Merged2, &sure, &counts).unwrap(),
            0.0
        );
        let half = Tensor::full(&[4, 2], 0.5);
        let v = adversarial_loss_value(DiscriminatorMode::Merged2, &half, &counts).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let only_images = DomainCounts {
            images: 2,
            synth: 0,
            video: 0,
        };
        let p = Tensor::full(&[2, 2], 0.5);
        assert!(matches!(
            adversarial_loss_value(DiscriminatorMode::Plain2, &p, &only_images),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn total_loss_examples() {
        let parts = LossParts {
            fm: Some(1.0),
            fr: Some(2.0),
            ic: Some(3.0),
            adv: Some(4.0),
        };
        assert_eq!(total_loss(&parts, &LossWeights::default()), 10.0);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        assert_eq!(total_loss(&parts, &zero), 1.0);
        assert!(LossWeights {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
