//! Synthetic video-style degradation: linear motion blur, a down/up scale
//! round trip and block-DCT compression, applied in that order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const BLUR_LENGTH_RANGE: (u32, u32) = (5, 15);
pub const BLUR_ANGLE_RANGE: (f64, f64) = (10.0, 30.0);
pub const SCALE_FACTOR_RANGE: (f64, f64) = (1.0 / 6.0, 1.0);
pub const QUALITY_RANGE: (u8, u8) = (30, 75);
pub const PRESENCE_PROBABILITY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionBlur {
    /// Line length in pixels.
    pub length: u32,
    /// Orientation in degrees, counter-clockwise from the +x axis.
    pub angle: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleVariation {
    pub factor: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Compression {
    pub quality: u8,
}

/// One realization of the degradation operator. All-`None` is the identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    #[serde(default)]
    pub blur: Option<MotionBlur>,
    #[serde(default)]
    pub scale: Option<ScaleVariation>,
    #[serde(default)]
    pub compression: Option<Compression>,
}

impl DegradationSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.blur.is_none() && self.scale.is_none() && self.compression.is_none()
    }
}

/// Which transforms the sampler may draw (the M/S/C columns of an ablation).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformSet {
    pub blur: bool,
    pub scale: bool,
    pub compression: bool,
}

impl TransformSet {
    pub const ALL: TransformSet = TransformSet {
        blur: true,
        scale: true,
        compression: true,
    };
    pub const BLUR_SCALE: TransformSet = TransformSet {
        blur: true,
        scale: true,
        compression: false,
    };
    pub const NONE: TransformSet = TransformSet {
        blur: false,
        scale: false,
        compression: false,
    };

    pub fn is_empty(&self) -> bool {
        !(self.blur || self.scale || self.compression)
    }

    /// Short label such as `M/S/C`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.blur, "M"), (self.scale, "S"), (self.compression, "C")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, l)| *l)
            .collect();
        if parts.is_empty() {
            "--".into()
        } else {
            parts.join("/")
        }
    }
}

impl Default for TransformSet {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    pub transforms: TransformSet,
    /// Draw blur angles from `[0, 180)` instead of the printed `[10, 30)`.
    #[serde(default)]
    pub wide_angles: bool,
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler {
            transforms: TransformSet::ALL,
            wide_angles: false,
        }
    }
}

impl Sampler {
    pub fn new(transforms: TransformSet) -> Self {
        Sampler {
            transforms,
            wide_angles: false,
        }
    }

    /// Each enabled transform is present independently with probability 1/2.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DegradationSpec {
        let blur = rng.gen_bool(PRESENCE_PROBABILITY);
        let scale = rng.gen_bool(PRESENCE_PROBABILITY);
        let compression = rng.gen_bool(PRESENCE_PROBABILITY);
        let present = TransformSet {
            blur: blur && self.transforms.blur,
            scale: scale && self.transforms.scale,
            compression: compression && self.transforms.compression,
        };
        self.sample_present(rng, present)
    }

    /// Draws parameters for exactly the transforms in `present`.
    pub fn sample_present<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        present: TransformSet,
    ) -> DegradationSpec {
        let blur = present.blur.then(|| {
            let (lo, hi) = if self.wide_angles {
                (0.0, 180.0)
            } else {
                BLUR_ANGLE_RANGE
            };
            MotionBlur {
                length: rng.gen_range(BLUR_LENGTH_RANGE.0..=BLUR_LENGTH_RANGE.1),
                angle: rng.gen_range(lo..hi),
            }
        });
        let scale = present.scale.then(|| ScaleVariation {
            factor: rng.gen_range(SCALE_FACTOR_RANGE.0..SCALE_FACTOR_RANGE.1),
        });
        let compression = present.compression.then(|| Compression {
            quality: rng.gen_range(QUALITY_RANGE.0..=QUALITY_RANGE.1),
        });
        DegradationSpec {
            blur,
            scale,
            compression,
        }
    }
}

/// Samples with every transform enabled and the printed parameter ranges.
pub fn sample_spec<R: Rng + ?Sized>(rng: &mut R) -> DegradationSpec {
    Sampler::default().sample(rng)
}

/// Square, odd-sized, nonnegative, unit-sum filter.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2D {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel2D {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at `(row, col)`, with the center at `(size/2, size/2)`.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }
}

/// Anti-aliased line of `length` pixels through the kernel center. Each
/// cell's weight falls off linearly with its distance to the segment.
pub fn motion_blur_kernel(length: u32, angle_deg: f64) -> Result<Kernel2D> {
    if length < 1 {
        return Err(Error::InvalidArgument(
            "motion blur length must be >= 1".into(),
        ));
    }
    if !angle_deg.is_finite() {
        return Err(Error::InvalidArgument(
            "motion blur angle must be finite".into(),
        ));
    }
    let half = (length as f64 - 1.0) / 2.0;
    let radius = half.ceil() as usize;
    let size = 2 * radius + 1;
    let theta = angle_deg.to_radians();
    // Image rows grow downwards, so a counter-clockwise angle has -sin in y.
    let (ux, uy) = (theta.cos(), -theta.sin());
    let mut weights = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let dx = col as f64 - radius as f64;
            let dy = row as f64 - radius as f64;
            let t = (dx * ux + dy * uy).clamp(-half, half);
            let (ex, ey) = (dx - t * ux, dy - t * uy);
            weights.push((1.0 - (ex * ex + ey * ey).sqrt()).max(0.0));
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(Kernel2D { size, weights })
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Convolution with reflective ("mirror without edge repeat") borders.
pub fn convolve_reflect(img: &Image, kernel: &Kernel2D) -> Image {
    let r = (kernel.size / 2) as isize;
    let (h, w) = (img.height(), img.width());
    Image::from_fn(h, w, |y, x| {
        let mut acc = 0.0;
        for ky in 0..kernel.size {
            let sy = reflect(y as isize + ky as isize - r, h);
            for kx in 0..kernel.size {
                let k = kernel.at(ky, kx);
                if k != 0.0 {
                    let sx = reflect(x as isize + kx as isize - r, w);
                    acc += k * img.get(sy, sx);
                }
            }
        }
        acc
    })
}

/// Bilinear resampling with half-pixel centers.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let coord = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src =
            ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    Image::from_fn(out_h, out_w, |y, x| {
        let (y0, y1, fy) = coord(y, h, out_h);
        let (x0, x1, fx) = coord(x, w, out_w);
        let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
        let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Downscales by `factor` and back to the original size.
pub fn scale_round_trip(img: &Image, factor: f64) -> Image {
    let (h, w) = (img.height(), img.width());
    let sh = ((h as f64 * factor).round() as usize).clamp(1, h);
    let sw = ((w as f64 * factor).round() as usize).clamp(1, w);
    if sh == h && sw == w {
        return img.clone();
    }
    resize_bilinear(&resize_bilinear(img, sh, sw), h, w)
}

const LUMINANCE_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance quantization table for a JFIF quality setting.
pub fn quantization_table(quality: u8) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!(
            "compression quality must be in [1, 100], got {quality}"
        )));
    }
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut table = [0.0; 64];
    for (t, &base) in table.iter_mut().zip(LUMINANCE_TABLE.iter()) {
        *t = ((base as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(table)
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let alpha = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// Block-DCT quantization round trip on 8×8 tiles (edges replicated to a
/// whole number of tiles). The DC term is kept exact so flat regions survive
/// unchanged; every AC term is snapped to its quantizer step.
pub fn compress(img: &Image, quality: u8) -> Result<Image> {
    let table = quantization_table(quality)?;
    let basis = dct_basis();
    let (h, w) = (img.height(), img.width());
    let (bh, bw) = (h.div_ceil(8), w.div_ceil(8));
    let mut out = img.clone();
    let mut block = [[0.0; 8]; 8];
    let mut tmp = [[0.0; 8]; 8];
    let mut coef = [[0.0; 8]; 8];
    for by in 0..bh {
        for bx in 0..bw {
            for (i, row) in block.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    let y = (by * 8 + i).min(h - 1);
                    let x = (bx * 8 + j).min(w - 1);
                    *v = img.get(y, x) * 255.0 - 128.0;
                }
            }
            // coef = C · block · Cᵀ
            for u in 0..8 {
                for j in 0..8 {
                    tmp[u][j] = (0..8).map(|i| basis[u][i] * block[i][j]).sum();
                }
            }
            for u in 0..8 {
                for v in 0..8 {
                    coef[u][v] = (0..8).map(|j| tmp[u][j] * basis[v][j]).sum();
                }
            }
            for u in 0..8 {
                for v in 0..8 {
                    if u == 0 && v == 0 {
                        continue;
                    }
                    let q = table[u * 8 + v];
                    coef[u][v] = (coef[u][v] / q).round() * q;
                }
            }
            // block = Cᵀ · coef · C
            for i in 0..8 {
                for v in 0..8 {
                    tmp[i][v] = (0..8).map(|u| basis[u][i] * coef[u][v]).sum();
                }
            }
            for i in 0..8 {
                for j in 0..8 {
                    let y = by * 8 + i;
                    let x = bx * 8 + j;
                    if y < h && x < w {
                        let p: f64 = (0..8).map(|v| tmp[i][v] * basis[v][j]).sum();
                        out.set(y, x, ((p + 128.0) / 255.0).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Applies blur, then scale variation, then compression; clamps to `[0, 1]`.
pub fn apply(spec: &DegradationSpec, img: &Image) -> Result<Image> {
    if spec.is_identity() {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    if let Some(b) = spec.blur {
        let k = motion_blur_kernel(b.length, b.angle)?;
        out = convolve_reflect(&out, &k);
    }
    if let Some(s) = spec.scale {
        if !(s.factor > 0.0 && s.factor <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "scale factor must be in (0, 1], got {}",
                s.factor
            )));
        }
        out = scale_round_trip(&out, s.factor);
    }
    if let Some(c) = spec.compression {
        out = compress(&out, c.quality)?;
    }
    out.clamp01();
    Ok(out)
}
