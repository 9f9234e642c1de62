//! Feature-space adaptation baselines: correlation alignment and PCA.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{read_exact, read_u32};

pub const TRANSFORM_MAGIC: &[u8; 8] = b"VDNXFRM1";

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.at(i, i)).sum()
    }

    pub fn matmul(&self, other: &SquareMatrix) -> SquareMatrix {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.at(k, j);
                }
            }
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Eigenvalues are sorted descending; column `j` of the returned matrix is
/// the eigenvector of eigenvalue `j`.
pub fn symmetric_eigen(m: &SquareMatrix) -> Result<(Vec<f64>, SquareMatrix)> {
    let n = m.n;
    let mut a = m.clone();
    for i in 0..n {
        for j in i + 1..n {
            let d = (a.at(i, j) - a.at(j, i)).abs();
            if d > 1e-9 * (1.0 + a.at(i, j).abs()) {
                return Err(Error::InvalidArgument(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut v = SquareMatrix::identity(n);
    let scale = a.frobenius().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.at(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.at(k, p);
                    let akq = a.at(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.at(p, k);
                    let aqk = a.at(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.at(j, j).total_cmp(&a.at(i, i)));
    let values = order.iter().map(|&i| a.at(i, i)).collect();
    let mut vecs = SquareMatrix::zeros(n);
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vecs.set(r, col, v.at(r, src));
        }
    }
    Ok((values, vecs))
}

/// `V · diag(f(λ)) · Vᵀ` for a symmetric matrix.
fn spectral_map(m: &SquareMatrix, f: impl Fn(f64) -> Result<f64>) -> Result<SquareMatrix> {
    let (vals, vecs) = symmetric_eigen(m)?;
    let n = m.n;
    let fv = vals.into_iter().map(f).collect::<Result<Vec<_>>>()?;
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            out.data[i * n + j] = (0..n).map(|k| vecs.at(i, k) * fv[k] * vecs.at(j, k)).sum();
        }
    }
    Ok(out)
}

/// First and second moments of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStats {
    pub mean: Vec<f64>,
    /// Sample covariance (`n − 1` denominator).
    pub cov: SquareMatrix,
    pub count: usize,
}

/// Mean and sample covariance, accumulated in one streaming pass.
pub fn fit_stats(rows: &[Vec<f64>]) -> Result<DomainStats> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "statistics need at least 2 samples, got {}",
            rows.len()
        )));
    }
    let k = rows[0].len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidArgument(
            "feature rows differ in length".into(),
        ));
    }
    let mut mean = vec![0.0; k];
    let mut m2 = SquareMatrix::zeros(k);
    let mut delta = vec![0.0; k];
    for (i, r) in rows.iter().enumerate() {
        let n = (i + 1) as f64;
        for j in 0..k {
            delta[j] = r[j] - mean[j];
            mean[j] += delta[j] / n;
        }
        for a in 0..k {
            let da = delta[a];
            for b in 0..k {
                m2.data[a * k + b] += da * (r[b] - mean[b]);
            }
        }
    }
    let denom = (rows.len() - 1) as f64;
    for v in &mut m2.data {
        *v /= denom;
    }
    // symmetrize away rounding asymmetry
    for a in 0..k {
        for b in a + 1..k {
            let s = 0.5 * (m2.at(a, b) + m2.at(b, a));
            m2.set(a, b, s);
            m2.set(b, a, s);
        }
    }
    Ok(DomainStats {
        mean,
        cov: m2,
        count: rows.len(),
    })
}

/// Affine map on row vectors: `y = x · matrix + offset` with `matrix`
/// stored row-major as `k_in × k_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTransform {
    pub k_in: usize,
    pub k_out: usize,
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
}

impl LinearTransform {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.k_in {
            return Err(Error::InvalidArgument(format!(
                "transform takes {}-dimensional input, got {}",
                self.k_in,
                x.len()
            )));
        }
        let mut y = self.offset.clone();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.matrix[i * self.k_out..(i + 1) * self.k_out];
            for (yj, m) in y.iter_mut().zip(row) {
                *yj += xi * m;
            }
        }
        Ok(y)
    }

    pub fn apply_all(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter().map(|r| self.apply(r)).collect()
    }

    /// `VDNXFRM1`, `u32` K_in, `u32` K_out, the matrix then the offset as
    /// little-endian `f32`.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TRANSFORM_MAGIC)?;
        w.write_all(&(self.k_in as u32).to_le_bytes())?;
        w.write_all(&(self.k_out as u32).to_le_bytes())?;
        for v in self.matrix.iter().chain(&self.offset) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let fmt = "transform file";
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, fmt, "magic")?;
        if &magic != TRANSFORM_MAGIC {
            return Err(Error::format(fmt, format!("bad magic {magic:?}")));
        }
        let k_in = read_u32(&mut r, fmt, "K_in")? as usize;
        let k_out = read_u32(&mut r, fmt, "K_out")? as usize;
        let mut raw = vec![0u8; (k_in * k_out + k_out) * 4];
        read_exact(&mut r, &mut raw, fmt, "values")?;
        let vals: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(LinearTransform {
            k_in,
            k_out,
            matrix: vals[..k_in * k_out].to_vec(),
            offset: vals[k_in * k_out..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::fs::read(path)?.as_slice())
    }
}

/// Default ridge: `1e-6 · trace / K`, averaged over the two domains.
pub fn default_lambda(video: &DomainStats, image: &DomainStats) -> f64 {
    let k = video.cov.n as f64;
    1e-6 * 0.5 * (video.cov.trace() + image.cov.trace()) / k
}

/// Correlation alignment from the video domain onto the image domain:
/// `x ↦ (x − μ_V)(C_V + λI)^{-1/2}(C_I + λI)^{1/2} + μ_I`.
pub fn coral_transform(
    video: &DomainStats,
    image: &DomainStats,
    lambda: Option<f64>,
) -> Result<LinearTransform> {
    let k = video.mean.len();
    if image.mean.len() != k {
        return Err(Error::InvalidArgument(format!(
            "domains have {k}- and {}-dimensional features",
            image.mean.len()
        )));
    }
    let lambda = lambda.unwrap_or_else(|| default_lambda(video, image));
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let ridge = |c: &SquareMatrix| {
        let mut c = c.clone();
        for i in 0..k {
            c.data[i * k + i] += lambda;
        }
        c
    };
    let check = |v: f64| {
        if v > 0.0 {
            Ok(v)
        } else {
            Err(Error::Numerical(format!(
                "covariance is not positive definite after ridge (eigenvalue {v})"
            )))
        }
    };
    let whiten = spectral_map(&ridge(&video.cov), |v| check(v).map(|v| 1.0 / v.sqrt()))?;
    let color = spectral_map(&ridge(&image.cov), |v| check(v).map(f64::sqrt))?;
    let a = whiten.matmul(&color);
    let mut offset = image.mean.clone();
    for (j, o) in offset.iter_mut().enumerate() {
        *o -= (0..k).map(|i| video.mean[i] * a.at(i, j)).sum::<f64>();
    }
    Ok(LinearTransform {
        k_in: k,
        k_out: k,
        matrix: a.data,
        offset,
    })
}

/// Projection onto leading principal components.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub transform: LinearTransform,
    /// Fraction of total variance carried by each component, descending.
    pub explained: Vec<f64>,
}

/// Centers on the sample mean and keeps the fewest components whose
/// cumulative explained variance reaches `retain`.
pub fn pca_transform(rows: &[Vec<f64>], retain: f64) -> Result<PcaModel> {
    if !(retain > 0.0 && retain <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "retain must be in (0, 1], got {retain}"
        )));
    }
    let stats = fit_stats(rows)?;
    let k = stats.mean.len();
    let (vals, vecs) = symmetric_eigen(&stats.cov)?;
    let vals: Vec<f64> = vals.into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    let explained: Vec<f64> = if total > 0.0 {
        vals.iter().map(|v| v / total).collect()
    } else {
        vec![0.0; k]
    };
    let mut m = k;
    let mut acc = 0.0;
    for (i, e) in explained.iter().enumerate() {
        acc += e;
        if acc >= retain - 1e-12 {
            m = i + 1;
            break;
        }
    }
    let mut matrix = vec![0.0; k * m];
    for i in 0..k {
        for j in 0..m {
            matrix[i * m + j] = vecs.at(i, j);
        }
    }
    let offset = (0..m)
        .map(|j| -(0..k).map(|i| stats.mean[i] * vecs.at(i, j)).sum::<f64>())
        .collect();
    Ok(PcaModel {
        transform: LinearTransform {
            k_in: k,
            k_out: m,
            matrix,
            offset,
        },
        explained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: Vec<f64>, diag: &[f64]) -> DomainStats {
        let k = diag.len();
        let mut cov = SquareMatrix::zeros(k);
        for (i, d) in diag.iter().enumerate() {
            cov.data[i * k + i] = *d;
        }
        DomainStats {
            mean,
            cov,
            count: 10,
        }
    }

    #[test]
    fn covariance_examples() {
        let s = fit_stats(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(s.mean, vec![0.0, 0.0]);
        assert_eq!(s.cov.data, vec![2.0, 0.0, 0.0, 0.0]);
        let c = fit_stats(&vec![vec![3.0, 4.0]; 5]).unwrap();
        assert!(c.cov.data.iter().all(|&v| v == 0.0));
        assert!(fit_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn coral_hand_example() {
        let v = stats(vec![1.0, 1.0], &[4.0, 4.0]);
        let i = stats(vec![0.0, 0.0], &[1.0, 1.0]);
        let t = coral_transform(&v, &i, Some(1e-12)).unwrap();
        let y = t.apply(&[3.0, 1.0]).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-9 && y[1].abs() < 1e-9, "{y:?}");
    }

    #[test]
    fn coral_with_equal_stats_is_identity() {
        let mut s = stats(vec![0.3, -0.2, 1.0], &[2.0, 0.5, 1.5]);
        s.cov.data[1] = 0.3;
        s.cov.data[3] = 0.3;
        let t = coral_transform(&s, &s, None).unwrap();
        let y = t.apply(&[0.7, 2.0, -1.0]).unwrap();
        for (a, b) in y.iter().zip([0.7, 2.0, -1.0]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn eigen_of_known_matrix() {
        let m = SquareMatrix {
            n: 2,
            data: vec![2.0, 1.0, 1.0, 2.0],
        };
        let (vals, vecs) = symmetric_eigen(&m).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
        assert!((vecs.at(0, 0).abs() - 0.5f64.sqrt()).abs() < 1e-12);
        let bad = SquareMatrix {
            n: 2,
            data: vec![1.0, 2.0, 0.0, 1.0],
        };
        assert!(symmetric_eigen(&bad).is_err());
    }

    #[test]
    fn pca_on_a_line_keeps_one_component() {
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![i as f64, 2.0 * i as f64, 0.0])
            .collect();
        let p = pca_transform(&rows, 0.9).unwrap();
        assert_eq!(p.transform.k_out, 1);
        assert!((p.explained[0] - 1.0).abs() < 1e-12);
        assert!(pca_transform(&rows, 0.0).is_err());
        assert!(pca_transform(&rows, 1.5).is_err());
    }

    #[test]
    fn transform_file_round_trip() {
        let t = LinearTransform {
            k_in: 2,
            k_out: 1,
            matrix: vec![0.5, -0.25],
            offset: vec![1.0],
        };
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 4 + 4 * 3);
        assert_eq!(LinearTransform::read(buf.as_slice()).unwrap(), t);
        buf.truncate(buf.len() - 1);
        assert!(matches!(
            LinearTransform::read(buf.as_slice()),
            Err(Error::Format { .. })
        ));
    }
}
