//! Datasets on disk and the procedural toy corpus.
//!
//! Images are 8-bit binary PGM files. Manifests are JSON Lines with paths
//! relative to the manifest's directory. Ground truth for videos (identity
//! and per-frame severity) lives in a separate sidecar that the trainer-facing
//! loader never reads.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::degrade::{self, Compression, DegradationSpec, MotionBlur, ScaleVariation};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{read_exact, read_u32};

pub const FEATURE_MAGIC: &[u8; 8] = b"VDNFEAT1";

// ---------------------------------------------------------------- PGM

pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_u8());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let err = |d: &str| Error::format("PGM", d.to_string());
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(err("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(err("not a binary PGM (P5)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|_| err(&format!("bad {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 {
        return Err(err("zero image dimension"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(err("only 8-bit PGM is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = bytes.get(pos + 1..).ok_or_else(|| err("missing raster"))?;
    let n = width * height;
    if data.len() < n {
        return Err(err(&format!("raster has {} of {n} bytes", data.len())));
    }
    Image::new(
        height,
        width,
        data[..n]
            .iter()
            .map(|&b| b as f64 / maxval as f64)
            .collect(),
    )
}

pub fn save_pgm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn load_pgm(path: &Path) -> Result<Image> {
    decode_pgm(&std::fs::read(path)?).map_err(|e| match e {
        Error::Format { format, detail } => Error::Format {
            format,
            detail: format!("{}: {detail}", path.display()),
        },
        e => e,
    })
}

// ------------------------------------------------------- feature files

/// `count` rows of `dim` values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::InvalidArgument(format!(
                "feature row of length {} in a {dim}-dimensional matrix",
                r.len()
            )));
        }
        Ok(FeatureMatrix { dim, rows })
    }
}

/// `VDNFEAT1`, `u32` count, `u32` dim, then `f32` values row-major; all
/// little-endian.
pub fn write_features<W: Write>(mut w: W, f: &FeatureMatrix) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(f.rows.len() as u32).to_le_bytes())?;
    w.write_all(&(f.dim as u32).to_le_bytes())?;
    for r in &f.rows {
        for &v in r {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_features<R: Read>(mut r: R) -> Result<FeatureMatrix> {
    let fmt = "feature file";
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, fmt, "magic")?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::format(fmt, format!("bad magic {magic:?}")));
    }
    let count = read_u32(&mut r, fmt, "count")? as usize;
    let dim = read_u32(&mut r, fmt, "dim")? as usize;
    let mut rows = Vec::with_capacity(count);
    let mut raw = vec![0u8; dim * 4];
    for i in 0..count {
        read_exact(&mut r, &mut raw, fmt, &format!("row {i}"))?;
        rows.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
        );
    }
    Ok(FeatureMatrix { dim, rows })
}

pub fn save_features(path: &Path, f: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::new();
    write_features(&mut buf, f)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    read_features(std::fs::read(path)?.as_slice())
}

// ----------------------------------------------------------- manifests

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRow {
    pub path: String,
    pub identity_id: usize,
}

/// Trainer-facing video row. Unknown fields are rejected so a manifest that
/// carries ground truth cannot be fed to training by accident.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRow {
    pub video_id: String,
    pub frames: Vec<String>,
}

/// Ground truth for one video; stored in the sidecar only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoTruth {
    pub video_id: String,
    pub identity_id: usize,
    pub severity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub fold: usize,
    pub video_a: String,
    pub video_b: String,
    pub same: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub identity: usize,
    pub image: Image,
}

/// A video as the trainer sees it: frames and an opaque id, nothing else.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledVideo {
    pub video_id: String,
    pub frames: Vec<Image>,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::format(
                    "JSON Lines",
                    format!("{} line {}: {e}", path.display(), i + 1),
                )
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Labeled stills; identity ids must be dense `0..n`.
pub fn load_images(manifest: &Path) -> Result<Vec<LabeledImage>> {
    let rows: Vec<ImageRow> = read_jsonl(manifest)?;
    let ids: BTreeSet<usize> = rows.iter().map(|r| r.identity_id).collect();
    if ids.last().is_some_and(|&m| m + 1 != ids.len()) {
        return Err(Error::format(
            "image manifest",
            format!("identity ids are not dense 0..{}", ids.len()),
        ));
    }
    let dir = base_dir(manifest);
    rows.iter()
        .map(|r| {
            Ok(LabeledImage {
                identity: r.identity_id,
                image: load_pgm(&dir.join(&r.path))?,
            })
        })
        .collect()
}

/// Unlabeled videos for training and evaluation.
pub fn load_videos(manifest: &Path) -> Result<Vec<UnlabeledVideo>> {
    let rows: Vec<VideoRow> = read_jsonl(manifest)?;
    let dir = base_dir(manifest);
    rows.iter()
        .map(|r| {
            if r.frames.is_empty() {
                return Err(Error::format(
                    "video manifest",
                    format!("video {} has no frames", r.video_id),
                ));
            }
            Ok(UnlabeledVideo {
                video_id: r.video_id.clone(),
                frames: r
                    .frames
                    .iter()
                    .map(|f| load_pgm(&dir.join(f)))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

pub fn load_video_truth(sidecar: &Path) -> Result<Vec<VideoTruth>> {
    read_jsonl(sidecar)
}

pub fn load_pairs(path: &Path) -> Result<Vec<EvalPair>> {
    read_jsonl(path)
}

// ------------------------------------------------------- toy generator

fn default_holdout() -> usize {
    2
}
fn default_eval_videos() -> usize {
    4
}
fn default_folds() -> usize {
    10
}
fn default_severe_fraction() -> f64 {
    0.35
}
fn default_image_size() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyGenConfig {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub n_videos: usize,
    pub frames_per_video: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub gap_strength: f64,
    pub seed: u64,
    /// Extra stills per identity kept out of training.
    #[serde(default = "default_holdout")]
    pub holdout_per_identity: usize,
    /// Identities of the evaluation videos, disjoint from the training
    /// identities; defaults to `n_identities`.
    #[serde(default)]
    pub n_eval_identities: Option<usize>,
    #[serde(default = "default_eval_videos")]
    pub eval_videos_per_identity: usize,
    #[serde(default)]
    pub eval_frames_per_video: Option<usize>,
    #[serde(default = "default_folds")]
    pub n_folds: usize,
    /// Fraction of each video's frames drawn from the top of the severity
    /// range.
    #[serde(default = "default_severe_fraction")]
    pub severe_fraction: f64,
}

impl Default for ToyGenConfig {
    fn default() -> Self {
        ToyGenConfig {
            n_identities: 40,
            images_per_identity: 8,
            n_videos: 60,
            frames_per_video: 20,
            image_size: 32,
            gap_strength: 1.0,
            seed: 0,
            holdout_per_identity: default_holdout(),
            n_eval_identities: None,
            eval_videos_per_identity: default_eval_videos(),
            eval_frames_per_video: None,
            n_folds: default_folds(),
            severe_fraction: default_severe_fraction(),
        }
    }
}

impl ToyGenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_identities", self.n_identities),
            ("images_per_identity", self.images_per_identity),
            ("n_videos", self.n_videos),
            ("frames_per_video", self.frames_per_video),
            ("n_folds", self.n_folds),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be >= 8".into()));
        }
        if !(0.0..=1.0).contains(&self.gap_strength) {
            return Err(Error::Config(format!(
                "gap_strength must be in [0, 1], got {}",
                self.gap_strength
            )));
        }
        if !(0.0..=1.0).contains(&self.severe_fraction) {
            return Err(Error::Config("severe_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }

    fn eval_identities(&self) -> usize {
        self.n_eval_identities.unwrap_or(self.n_identities)
    }

    fn eval_frames(&self) -> usize {
        self.eval_frames_per_video.unwrap_or(self.frames_per_video)
    }
}

/// Smooth random pattern standing in for a face identity.
#[derive(Clone, Debug)]
struct Template {
    size: f64,
    waves: Vec<[f64; 4]>,
    blobs: Vec<[f64; 4]>,
    gain: f64,
    offset: f64,
}

impl Template {
    fn random<R: Rng>(rng: &mut R, size: usize) -> Self {
        let s = size as f64;
        let waves = (0..5)
            .map(|_| {
                let cycles = rng.gen_range(0.5..2.5);
                let dir = rng.gen_range(0.0..std::f64::consts::PI);
                [
                    cycles * dir.sin(),
                    cycles * dir.cos(),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.3..1.0),
                ]
            })
            .collect();
        let n_blobs = rng.gen_range(4..=6);
        let blobs = (0..n_blobs)
            .map(|_| {
                [
                    rng.gen_range(0.15..0.85) * s,
                    rng.gen_range(0.15..0.85) * s,
                    rng.gen_range(0.08..0.18) * s,
                    rng.gen_range(-1.5..1.5),
                ]
            })
            .collect();
        let mut t = Template {
            size: s,
            waves,
            blobs,
            gain: 1.0,
            offset: 0.0,
        };
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in 0..size {
            for x in 0..size {
                let v = t.raw(y as f64, x as f64);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        t.gain = 0.7 / (hi - lo).max(1e-9);
        t.offset = 0.15 - lo * t.gain;
        t
    }

    fn raw(&self, y: f64, x: f64) -> f64 {
        let tau = std::f64::consts::TAU;
        let mut v = 0.0;
        for [fy, fx, phase, amp] in &self.waves {
            v += amp * (tau * (fy * y + fx * x) / self.size + phase).cos();
        }
        for [cy, cx, sigma, amp] in &self.blobs {
            let r2 = (y - cy).powi(2) + (x - cx).powi(2);
            v += amp * (-r2 / (2.0 * sigma * sigma)).exp();
        }
        v
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        self.raw(y, x) * self.gain + self.offset
    }
}

/// A still: the template under a sub-pixel shift, a small photometric
/// jitter and pixel noise.
fn render_still<R: Rng>(t: &Template, size: usize, rng: &mut R) -> Image {
    let dy = rng.gen_range(-1.0..1.0);
    let dx = rng.gen_range(-1.0..1.0);
    let contrast = rng.gen_range(0.93..1.07);
    let brightness = rng.gen_range(-0.03..0.03);
    let noise = Normal::new(0.0, 0.01).expect("valid deviation");
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let v = t.at(y as f64 + dy, x as f64 + dx);
            pixels.push(0.5 + contrast * (v - 0.5) + brightness + noise.sample(rng));
        }
    }
    let mut img = Image::new(size, size, pixels).expect("size matches");
    img.clamp01();
    img
}

/// Degradation realizing a severity in `[0, 1]`: longer blur, stronger
/// downscaling and lower quality as severity grows.
pub fn severity_spec<R: Rng>(severity: f64, rng: &mut R) -> DegradationSpec {
    let angle = rng.gen_range(0.0..180.0);
    if severity < 0.05 {
        return DegradationSpec::identity();
    }
    let length = (1.0 + 14.0 * severity).round() as u32;
    DegradationSpec {
        blur: (length >= 2).then_some(MotionBlur { length, angle }),
        scale: Some(ScaleVariation {
            factor: 1.0 - 5.0 / 6.0 * severity,
        }),
        compression: Some(Compression {
            quality: (95.0 - 65.0 * severity).round() as u8,
        }),
    }
}

/// A video frame: a still rendering, a domain-wide photometric shift that
/// the synthetic degradation model does not cover, then a degradation of
/// the given severity.
fn render_frame<R: Rng>(t: &Template, size: usize, gap: f64, severity: f64, rng: &mut R) -> Image {
    let mut img = render_still(t, size, rng);
    if gap > 0.0 {
        let c = 1.0 - 0.25 * gap;
        for p in img.pixels_mut() {
            *p = 0.5 + c * (*p - 0.5) + 0.06 * gap;
        }
        img.clamp01();
    }
    let spec = severity_spec(severity, rng);
    degrade::apply(&spec, &img).expect("severity specs are valid")
}

fn severities<R: Rng>(n: usize, gap: f64, severe_fraction: f64, rng: &mut R) -> Vec<f64> {
    let n_severe = (severe_fraction * n as f64).round() as usize;
    let mut u: Vec<f64> = (0..n)
        .map(|i| {
            if i < n_severe {
                rng.gen_range(0.8..=1.0)
            } else {
                rng.gen_range(0.0..0.8)
            }
        })
        .collect();
    u.shuffle(rng);
    u.into_iter().map(|u| gap * u).collect()
}

/// In-memory toy corpus with its ground truth.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub config: ToyGenConfig,
    pub images: Vec<LabeledImage>,
    pub holdout: Vec<LabeledImage>,
    pub videos: Vec<UnlabeledVideo>,
    pub video_truth: Vec<VideoTruth>,
    pub eval_videos: Vec<UnlabeledVideo>,
    pub eval_truth: Vec<VideoTruth>,
    pub pairs: Vec<EvalPair>,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[allow(clippy::too_many_arguments)]
fn make_videos(
    templates: &[Template],
    n: usize,
    frames: usize,
    cfg: &ToyGenConfig,
    prefix: &str,
    identity_of: impl Fn(usize, &mut ChaCha8Rng) -> usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<UnlabeledVideo>, Vec<VideoTruth>) {
    let mut videos = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for k in 0..n {
        let id = identity_of(k, rng);
        let sev = severities(frames, cfg.gap_strength, cfg.severe_fraction, rng);
        let video_id = format!("{prefix}{k:04}");
        let imgs = sev
            .iter()
            .map(|&s| render_frame(&templates[id], cfg.image_size, cfg.gap_strength, s, rng))
            .collect();
        videos.push(UnlabeledVideo {
            video_id: video_id.clone(),
            frames: imgs,
        });
        truth.push(VideoTruth {
            video_id,
            identity_id: id,
            severity: sev,
        });
    }
    (videos, truth)
}

/// Balanced same/different pairs over the evaluation videos, dealt into
/// folds round-robin.
fn make_pairs(truth: &[VideoTruth], n_folds: usize, rng: &mut ChaCha8Rng) -> Vec<EvalPair> {
    let mut genuine = Vec::new();
    let mut all_impostors = Vec::new();
    for i in 0..truth.len() {
        for j in i + 1..truth.len() {
            if truth[i].identity_id == truth[j].identity_id {
                genuine.push((i, j));
            } else {
                all_impostors.push((i, j));
            }
        }
    }
    genuine.shuffle(rng);
    all_impostors.shuffle(rng);
    let n = genuine.len().min(all_impostors.len());
    genuine.truncate(n);
    all_impostors.truncate(n);
    let mut pairs = Vec::with_capacity(2 * n);
    for fold in 0..n_folds {
        for (set, same) in [(&genuine, true), (&all_impostors, false)] {
            for &(i, j) in set.iter().skip(fold).step_by(n_folds) {
                pairs.push(EvalPair {
                    fold,
                    video_a: truth[i].video_id.clone(),
                    video_b: truth[j].video_id.clone(),
                    same,
                });
            }
        }
    }
    pairs
}

/// Generates the toy two-domain corpus. Each part draws from its own random
/// stream, so e.g. the number of videos does not change the stills.
pub fn generate_toy(cfg: &ToyGenConfig) -> Result<ToyCorpus> {
    cfg.validate()?;
    let size = cfg.image_size;
    let mut rng = stream(cfg.seed, 0);
    let templates: Vec<Template> = (0..cfg.n_identities)
        .map(|_| Template::random(&mut rng, size))
        .collect();
    let mut rng = stream(cfg.seed, 1);
    let eval_templates: Vec<Template> = (0..cfg.eval_identities())
        .map(|_| Template::random(&mut rng, size))
        .collect();

    let mut rng = stream(cfg.seed, 2);
    let mut images = Vec::new();
    let mut holdout = Vec::new();
    for (id, t) in templates.iter().enumerate() {
        for _ in 0..cfg.images_per_identity {
            images.push(LabeledImage {
                identity: id,
                image: render_still(t, size, &mut rng),
            });
        }
        for _ in 0..cfg.holdout_per_identity {
            holdout.push(LabeledImage {
                identity: id,
                image: render_still(t, size, &mut rng),
            });
        }
    }

    let mut rng = stream(cfg.seed, 3);
    let n_ids = cfg.n_identities;
    let (videos, video_truth) = make_videos(
        &templates,
        cfg.n_videos,
        cfg.frames_per_video,
        cfg,
        "vid_",
        |_, rng| rng.gen_range(0..n_ids),
        &mut rng,
    );

    let mut rng = stream(cfg.seed, 4);
    let per = cfg.eval_videos_per_identity;
    let (eval_videos, eval_truth) = make_videos(
        &eval_templates,
        cfg.eval_identities() * per,
        cfg.eval_frames(),
        cfg,
        "eval_",
        |k, _| k / per.max(1),
        &mut rng,
    );

    let mut rng = stream(cfg.seed, 5);
    let pairs = make_pairs(&eval_truth, cfg.n_folds, &mut rng);
    Ok(ToyCorpus {
        config: cfg.clone(),
        images,
        holdout,
        videos,
        video_truth,
        eval_videos,
        eval_truth,
        pairs,
    })
}

pub const IMAGES_MANIFEST: &str = "images.jsonl";
pub const HOLDOUT_MANIFEST: &str = "holdout.jsonl";
pub const VIDEOS_MANIFEST: &str = "videos.jsonl";
pub const VIDEOS_HIDDEN: &str = "videos_hidden.jsonl";
pub const EVAL_VIDEOS_MANIFEST: &str = "eval_videos.jsonl";
pub const EVAL_VIDEOS_HIDDEN: &str = "eval_videos_hidden.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const TOY_CONFIG_FILE: &str = "toy_config.json";

fn write_stills(dir: &Path, sub: &str, imgs: &[LabeledImage]) -> Result<Vec<ImageRow>> {
    std::fs::create_dir_all(dir.join(sub))?;
    let mut per_id = std::collections::BTreeMap::<usize, usize>::new();
    let mut rows = Vec::with_capacity(imgs.len());
    for li in imgs {
        let k = per_id.entry(li.identity).or_default();
        let rel = format!("{sub}/id{:03}_{:03}.pgm", li.identity, k);
        *k += 1;
        save_pgm(&dir.join(&rel), &li.image)?;
        rows.push(ImageRow {
            path: rel,
            identity_id: li.identity,
        });
    }
    Ok(rows)
}

fn write_videos(dir: &Path, sub: &str, videos: &[UnlabeledVideo]) -> Result<Vec<VideoRow>> {
    let mut rows = Vec::with_capacity(videos.len());
    for v in videos {
        let vdir = format!("{sub}/{}", v.video_id);
        std::fs::create_dir_all(dir.join(&vdir))?;
        let mut frames = Vec::with_capacity(v.frames.len());
        for (i, f) in v.frames.iter().enumerate() {
            let rel = format!("{vdir}/{i:04}.pgm");
            save_pgm(&dir.join(&rel), f)?;
            frames.push(rel);
        }
        rows.push(VideoRow {
            video_id: v.video_id.clone(),
            frames,
        });
    }
    Ok(rows)
}

impl ToyCorpus {
    /// Writes images, manifests, sidecars and pairs under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join(TOY_CONFIG_FILE),
            serde_json::to_string_pretty(&self.config)? + "\n",
        )?;
        write_jsonl(
            &dir.join(IMAGES_MANIFEST),
            &write_stills(dir, "images", &self.images)?,
        )?;
        write_jsonl(
            &dir.join(HOLDOUT_MANIFEST),
            &write_stills(dir, "holdout", &self.holdout)?,
        )?;
        write_jsonl(
            &dir.join(VIDEOS_MANIFEST),
            &write_videos(dir, "videos", &self.videos)?,
        )?;
        write_jsonl(&dir.join(VIDEOS_HIDDEN), &self.video_truth)?;
        write_jsonl(
            &dir.join(EVAL_VIDEOS_MANIFEST),
            &write_videos(dir, "eval_videos", &self.eval_videos)?,
        )?;
        write_jsonl(&dir.join(EVAL_VIDEOS_HIDDEN), &self.eval_truth)?;
        write_jsonl(&dir.join(PAIRS_FILE), &self.pairs)?;
        Ok(())
    }

    /// Reads a corpus written by [`ToyCorpus::write`].
    pub fn load(dir: &Path) -> Result<Self> {
        let config: ToyGenConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.join(TOY_CONFIG_FILE))?)?;
        Ok(ToyCorpus {
            config,
            images: load_images(&dir.join(IMAGES_MANIFEST))?,
            holdout: load_images(&dir.join(HOLDOUT_MANIFEST))?,
            videos: load_videos(&dir.join(VIDEOS_MANIFEST))?,
            video_truth: load_video_truth(&dir.join(VIDEOS_HIDDEN))?,
            eval_videos: load_videos(&dir.join(EVAL_VIDEOS_MANIFEST))?,
            eval_truth: load_video_truth(&dir.join(EVAL_VIDEOS_HIDDEN))?,
            pairs: load_pairs(&dir.join(PAIRS_FILE))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(gap: f64) -> ToyGenConfig {
        ToyGenConfig {
            n_identities: 6,
            images_per_identity: 3,
            n_videos: 5,
            frames_per_video: 6,
            gap_strength: gap,
            n_eval_identities: Some(4),
            eval_videos_per_identity: 2,
            n_folds: 2,
            ..Default::default()
        }
    }

    #[test]
    fn pgm_round_trip() {
        let img = Image::from_fn(3, 5, |y, x| ((y * 5 + x) * 17 % 256) as f64 / 255.0);
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        assert_eq!(back.to_u8(), img.to_u8());
        assert_eq!((back.height(), back.width()), (3, 5));
        let commented = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        assert_eq!(decode_pgm(commented).unwrap().pixels(), &[0.0, 1.0]);
        assert!(matches!(
            decode_pgm(b"P2\n1 1\n255\n0"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            decode_pgm(b"P5\n2 2\n255\n\x00"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn feature_file_layout() {
        let f =
            FeatureMatrix::new(2, vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let mut buf = Vec::new();
        write_features(&mut buf, &f).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 4 + 24);
        assert_eq!(read_features(buf.as_slice()).unwrap(), f);
        let empty = FeatureMatrix::new(7, vec![]).unwrap();
        let mut buf = Vec::new();
        write_features(&mut buf, &empty).unwrap();
        assert_eq!(read_features(buf.as_slice()).unwrap(), empty);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_features(bad.as_slice()),
            Err(Error::Format { .. })
        ));
        let mut buf = Vec::new();
        write_features(&mut buf, &f).unwrap();
        buf.truncate(30);
        assert!(matches!(
            read_features(buf.as_slice()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn trainer_loader_rejects_hidden_fields() {
        let row = r#"{"video_id":"v","frames":["a.pgm"],"identity_id":3}"#;
        assert!(serde_json::from_str::<VideoRow>(row).is_err());
        let row = r#"{"video_id":"v","frames":["a.pgm"]}"#;
        assert!(serde_json::from_str::<VideoRow>(row).is_ok());
    }

    #[test]
    fn toy_shapes_and_truth() {
        let c = generate_toy(&small(1.0)).unwrap();
        assert_eq!(c.images.len(), 18);
        assert_eq!(c.holdout.len(), 12);
        assert_eq!(c.videos.len(), 5);
        assert!(c.videos.iter().all(|v| v.frames.len() == 6));
        assert_eq!(c.eval_videos.len(), 8);
        for t in &c.video_truth {
            let severe = t.severity.iter().filter(|&&s| s >= 0.8).count();
            assert_eq!(severe, 2);
        }
        let genuine = c.pairs.iter().filter(|p| p.same).count();
        assert_eq!(genuine, 4);
        assert_eq!(c.pairs.len(), 8);
    }

    #[test]
    fn toy_is_deterministic_and_parts_are_independent() {
        let a = generate_toy(&small(1.0)).unwrap();
        let b = generate_toy(&small(1.0)).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.videos, b.videos);
        let mut more = small(1.0);
        more.n_videos = 9;
        let c = generate_toy(&more).unwrap();
        assert_eq!(a.images, c.images);
        assert_eq!(a.videos[..], c.videos[..5]);
    }

    #[test]
    fn zero_gap_leaves_frames_undegraded() {
        let c = generate_toy(&small(0.0)).unwrap();
        assert!(c
            .video_truth
            .iter()
            .all(|t| t.severity.iter().all(|&s| s == 0.0)));
    }

    #[test]
    fn severity_spec_grows_with_severity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(severity_spec(0.0, &mut rng).is_identity());
        let s = severity_spec(1.0, &mut rng);
        assert_eq!(s.blur.unwrap().length, 15);
        assert!((s.scale.unwrap().factor - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(s.compression.unwrap().quality, 30);
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_toy(&small(1.0)).unwrap();
        c.write(dir.path()).unwrap();
        let back = ToyCorpus::load(dir.path()).unwrap();
        assert_eq!(back.pairs, c.pairs);
        assert_eq!(back.video_truth, c.video_truth);
        for (a, b) in back.videos.iter().zip(&c.videos) {
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                assert_eq!(fa.to_u8(), fb.to_u8());
            }
        }
        assert_eq!(back.images.len(), c.images.len());
    }
}
