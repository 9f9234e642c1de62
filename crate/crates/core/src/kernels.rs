//! Raw numeric kernels behind the graph ops. Everything here works on flat
//! slices in NCHW order; shape checking happens in `graph`.

/// `c = a · b (+ c when accumulate)`, with `a` logically `[m, k]` and `b`
/// logically `[k, n]`. `a_t`/`b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image `[C, H, W]` into `[C*kh*kw, out_h*out_w]`, zero padded.
pub(crate) fn im2col(g: &ConvGeom, img: &[f64], col: &mut [f64]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oi in 0..g.out_h {
                    let y = (oi * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (oj, v) in out_row.iter_mut().enumerate() {
                        let x = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if x < 0 || x >= g.width as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im_add(g: &ConvGeom, col: &[f64], img: &mut [f64]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &col[row * cols..(row + 1) * cols];
                for oi in 0..g.out_h {
                    let y = (oi * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for oj in 0..g.out_w {
                        let x = (oj * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution over a batch. `out` is `[B, O, out_h, out_w]`.
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    out_channels: usize,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_channels * g.col_cols();
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..batch {
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut col);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        gemm(
            out_channels,
            g.col_rows(),
            g.col_cols(),
            w,
            false,
            &col,
            false,
            dst,
            false,
        );
        if let Some(bias) = bias {
            for (o, plane) in dst.chunks_mut(g.col_cols()).enumerate() {
                for v in plane {
                    *v += bias[o];
                }
            }
        }
    }
}

/// Backward convolution. Any of the gradient outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    out_channels: usize,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_channels * g.col_cols();
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..batch {
        let d = &dout[b * out_len..(b + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (o, plane) in d.chunks(g.col_cols()).enumerate() {
                db[o] += plane.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, &x[b * in_len..(b + 1) * in_len], &mut col);
            gemm(
                out_channels,
                g.col_cols(),
                g.col_rows(),
                d,
                false,
                &col,
                true,
                dw,
                true,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(
                g.col_rows(),
                out_channels,
                g.col_cols(),
                w,
                true,
                d,
                false,
                &mut col,
                false,
            );
            col2im_add(g, &col, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Number of adjacent input channels folded into one output channel.
    pub channel_group: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    /// Ceil-mode output size; trailing partial windows are clipped.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        channel_group: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let out = |n: usize| (n.saturating_sub(kernel)).div_ceil(stride) + 1;
        PoolGeom {
            channels,
            height,
            width,
            channel_group,
            kernel,
            stride,
            out_h: out(height),
            out_w: out(width),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.channels / self.channel_group
    }
}

/// Max over a channel group and a spatial window. Returns the flat input index
/// of every selected maximum (first occurrence wins ties).
pub(crate) fn max_pool_forward(
    g: &PoolGeom,
    batch: usize,
    x: &[f64],
    out: &mut [f64],
) -> Vec<usize> {
    let plane = g.height * g.width;
    let in_len = g.channels * plane;
    let oc = g.out_channels();
    let mut arg = Vec::with_capacity(batch * oc * g.out_h * g.out_w);
    let mut o = 0;
    for b in 0..batch {
        for c in 0..oc {
            for oi in 0..g.out_h {
                for oj in 0..g.out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for cc in c * g.channel_group..(c + 1) * g.channel_group {
                        let y0 = oi * g.stride;
                        let x0 = oj * g.stride;
                        for y in y0..(y0 + g.kernel).min(g.height) {
                            for xx in x0..(x0 + g.kernel).min(g.width) {
                                let idx = b * in_len + cc * plane + y * g.width + xx;
                                if x[idx] > best || best_idx == usize::MAX {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out[o] = best;
                    arg.push(best_idx);
                    o += 1;
                }
            }
        }
    }
    arg
}

/// Non-overlapping average pooling with a `kernel`×`kernel` window (floor mode).
pub(crate) fn avg_pool_forward(
    channels_total: usize,
    height: usize,
    width: usize,
    kernel: usize,
    x: &[f64],
    out: &mut [f64],
) {
    let (oh, ow) = (height / kernel, width / kernel);
    let scale = 1.0 / (kernel * kernel) as f64;
    for c in 0..channels_total {
        let plane = &x[c * height * width..(c + 1) * height * width];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut s = 0.0;
                for y in oi * kernel..(oi + 1) * kernel {
                    for xx in oj * kernel..(oj + 1) * kernel {
                        s += plane[y * width + xx];
                    }
                }
                out[c * oh * ow + oi * ow + oj] = s * scale;
            }
        }
    }
}

pub(crate) fn avg_pool_backward(
    channels_total: usize,
    height: usize,
    width: usize,
    kernel: usize,
    dout: &[f64],
    dx: &mut [f64],
) {
    let (oh, ow) = (height / kernel, width / kernel);
    let scale = 1.0 / (kernel * kernel) as f64;
    for c in 0..channels_total {
        let plane = &mut dx[c * height * width..(c + 1) * height * width];
        for oi in 0..oh {
            for oj in 0..ow {
                let g = dout[c * oh * ow + oi * ow + oj] * scale;
                for y in oi * kernel..(oi + 1) * kernel {
                    for xx in oj * kernel..(oj + 1) * kernel {
                        plane[y * width + xx] += g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aᵀ·b with aᵀ = [[1,3],[2,4]]
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        // a·bᵀ, accumulated on top of the previous result
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }

    #[test]
    fn pool_geometry_uses_ceil_mode() {
        // 25x25 -> 13x13 as in the reference architecture.
        let g = PoolGeom::new(384, 25, 25, 2, 2, 2);
        assert_eq!((g.out_channels(), g.out_h, g.out_w), (192, 13, 13));
        let g = PoolGeom::new(128, 100, 100, 2, 2, 2);
        assert_eq!((g.out_channels(), g.out_h, g.out_w), (64, 50, 50));
        let g = PoolGeom::new(8, 5, 5, 2, 1, 1);
        assert_eq!((g.out_channels(), g.out_h, g.out_w), (4, 5, 5));
    }
}
