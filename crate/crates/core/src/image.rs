use crate::error::{Error, Result};

/// Single-channel image, row-major, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0);
        Image {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0);
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Image {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn clamp01(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x| {
            self.get(y, self.width - 1 - x)
        })
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Mean absolute response of the 4-neighbour Laplacian over interior
    /// pixels; a proxy for high-frequency energy.
    pub fn laplacian_energy(&self) -> f64 {
        if self.height < 3 || self.width < 3 {
            return 0.0;
        }
        let mut total = 0.0;
        for y in 1..self.height - 1 {
            for x in 1..self.width - 1 {
                let l = self.get(y - 1, x)
                    + self.get(y + 1, x)
                    + self.get(y, x - 1)
                    + self.get(y, x + 1)
                    - 4.0 * self.get(y, x);
                total += l.abs();
            }
        }
        total / ((self.height - 2) * (self.width - 2)) as f64
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Quantizes to 8 bits, as stored in PGM files.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(
            height,
            width,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_reverses_columns() {
        let img = Image::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(img.flip_horizontal().pixels(), &[0.3, 0.2, 0.1]);
    }

    #[test]
    fn constant_image_has_no_laplacian_energy() {
        assert_eq!(Image::filled(8, 8, 0.4).laplacian_energy(), 0.0);
        let checker = Image::from_fn(8, 8, |y, x| ((y + x) % 2) as f64);
        assert_eq!(checker.laplacian_energy(), 4.0);
    }
}
