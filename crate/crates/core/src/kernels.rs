//! Convolution and normalization kernels with their adjoints.
//!
//! All buffers are contiguous row-major `C×H×W` planes; batch loops live in
//! the graph layer.

use crate::real::{matmul, Layout, Real};

/// Geometry of a 2-D convolution seen from its (larger) input side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(height + 2 * pad >= kernel && width + 2 * pad >= kernel, "kernel larger than padded input");
        Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_height: (height + 2 * pad - kernel) / stride + 1,
            out_width: (width + 2 * pad - kernel) / stride + 1,
        }
    }

    /// Rows of the column matrix: `channels * kernel * kernel`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Columns of the column matrix: output spatial size.
    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s) = (g.kernel, g.stride);
    let (ho, wo) = (g.out_height, g.out_width);
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_range(kj, g.pad, s, g.width, wo);
                for oh in 0..ho {
                    let line = &mut dst[oh * wo..(oh + 1) * wo];
                    let Some(ih) = source_index(oh, ki, g.pad, s, g.height) else {
                        line.fill(T::zero());
                        continue;
                    };
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let start = ih * g.width + lo * s + kj - g.pad;
                        let src = &plane[start..];
                        if s == 1 {
                            line[lo..hi].copy_from_slice(&src[..hi - lo]);
                        } else {
                            for (out, v) in line[lo..hi].iter_mut().zip(src.iter().step_by(s)) {
                                *out = *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `[lo, hi)` whose tap `kj` lands inside `0..len`.
fn valid_range(kj: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    // position o reads o·s + kj − pad
    let lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(stride) };
    let hi = if len + pad <= kj { 0 } else { (len + pad - kj).div_ceil(stride) };
    let hi = hi.min(out);
    (lo.min(hi), hi)
}

fn source_index(o: usize, kk: usize, pad: usize, stride: usize, len: usize) -> Option<usize> {
    let i = (o * stride + kk).checked_sub(pad)?;
    (i < len).then_some(i)
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `x`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (k, s) = (g.kernel, g.stride);
    let (ho, wo) = (g.out_height, g.out_width);
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_range(kj, g.pad, s, g.width, wo);
                if lo >= hi {
                    continue;
                }
                for oh in 0..ho {
                    let Some(ih) = source_index(oh, ki, g.pad, s, g.height) else { continue };
                    let line = &src[oh * wo + lo..oh * wo + hi];
                    let start = ih * g.width + lo * s + kj - g.pad;
                    let dst = &mut plane[start..];
                    if s == 1 {
                        for (d, &v) in dst[..hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst.iter_mut().step_by(s).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out (cout×P) = weight (cout×K) · cols (K×P) + bias`.
pub fn conv_forward_cols<T: Real>(weight: &[T], bias: Option<&[T]>, cols: &[T], cout: usize, g: &ConvGeom, out: &mut [T]) {
    let kk = g.col_rows();
    let pp = g.col_cols();
    matmul(cout, kk, pp, weight, Layout::N, cols, Layout::N, T::one(), T::zero(), out);
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            for v in &mut out[o * pp..(o + 1) * pp] {
                *v += bv;
            }
        }
    }
}

/// Per-group normalization statistics: returns `(xhat, rstd)` for one sample.
pub fn group_norm_forward<T: Real>(
    x: &[T],
    channels: usize,
    spatial: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    let cg = channels / groups;
    let m = cg * spatial;
    let inv_m = T::one() / T::lit(m as f64);
    for g in 0..groups {
        let r = g * m..(g + 1) * m;
        let xs = &x[r.clone()];
        let mean = xs.iter().copied().sum::<T>() * inv_m;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
        let rs = T::one() / (var + eps).sqrt();
        rstd[g] = rs;
        for (i, (&v, xh)) in xs.iter().zip(&mut xhat[r.clone()]).enumerate() {
            *xh = (v - mean) * rs;
            let c = g * cg + i / spatial;
            out[g * m + i] = *xh * gamma[c] + beta[c];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    channels: usize,
    spatial: usize,
    groups: usize,
    gamma: &[T],
    dx: Option<&mut [T]>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let cg = channels / groups;
    let m = cg * spatial;
    for c in 0..channels {
        let r = c * spatial..(c + 1) * spatial;
        for (&d, &xh) in dy[r.clone()].iter().zip(&xhat[r]) {
            dgamma[c] += d * xh;
            dbeta[c] += d;
        }
    }
    let Some(dx) = dx else { return };
    let inv_m = T::one() / T::lit(m as f64);
    for g in 0..groups {
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for i in 0..m {
            let idx = g * m + i;
            let c = g * cg + i / spatial;
            let dxh = dy[idx] * gamma[c];
            sum_d += dxh;
            sum_dx += dxh * xhat[idx];
        }
        let md = sum_d * inv_m;
        let mdx = sum_dx * inv_m;
        for i in 0..m {
            let idx = g * m + i;
            let c = g * cg + i / spatial;
            let dxh = dy[idx] * gamma[c];
            dx[idx] += rstd[g] * (dxh - md - xhat[idx] * mdx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn naive_im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = Vec::new();
        for c in 0..g.channels {
            for ki in 0..g.kernel {
                for kj in 0..g.kernel {
                    for oh in 0..g.out_height {
                        for ow in 0..g.out_width {
                            let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            let inside = ih >= 0 && iw >= 0 && (ih as usize) < g.height && (iw as usize) < g.width;
                            out.push(if inside { x[(c * g.height + ih as usize) * g.width + iw as usize] } else { 0.0 });
                        }
                    }
                }
            }
        }
        out
    }

    proptest::proptest! {
        #[test]
        fn im2col_matches_direct_indexing(c in 1usize..3, h in 1usize..9, w in 1usize..9, k in 1usize..6, s in 1usize..4, p in 0usize..4) {
            proptest::prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
            let g = ConvGeom::new(c, h, w, k, s, p);
            let x: Vec<f64> = (0..c * h * w).map(|i| i as f64 + 1.0).collect();
            let mut cols = vec![f64::NAN; g.col_rows() * g.col_cols()];
            im2col(&x, &g, &mut cols);
            proptest::prop_assert_eq!(&cols, &naive_im2col(&x, &g));
            let mut back = vec![0.0; x.len()];
            col2im(&cols, &g, &mut back);
            let mut want = vec![0.0; x.len()];
            // col2im of im2col(x) multiplies each pixel by its tap count
            let ones = vec![1.0; x.len()];
            let mut oc = vec![0.0; cols.len()];
            im2col(&ones, &g, &mut oc);
            col2im(&oc, &g, &mut want);
            for i in 0..x.len() {
                proptest::prop_assert_eq!(back[i], x[i] * want[i]);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 7, 6, 3, 2, 1);
        let mut s = 3u64;
        let x: Vec<f64> = (0..g.in_len()).map(|_| lcg(&mut s)).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|_| lcg(&mut s)).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn stride_two_halves_spatial_size() {
        let g = ConvGeom::new(3, 64, 64, 4, 2, 1);
        assert_eq!((g.out_height, g.out_width), (32, 32));
        let g = ConvGeom::new(8, 2, 2, 4, 2, 1);
        assert_eq!((g.out_height, g.out_width), (1, 1));
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let (c, sp, groups) = (4, 5, 2);
        let mut s = 11u64;
        let x: Vec<f64> = (0..c * sp).map(|_| lcg(&mut s) * 3.0 + 1.0).collect();
        let gamma = vec![1.0; c];
        let beta = vec![0.0; c];
        let mut out = vec![0.0; c * sp];
        let mut xhat = vec![0.0; c * sp];
        let mut rstd = vec![0.0; groups];
        group_norm_forward(&x, c, sp, groups, &gamma, &beta, 1e-12, &mut out, &mut xhat, &mut rstd);
        for g in 0..groups {
            let seg = &out[g * 10..(g + 1) * 10];
            let mean: f64 = seg.iter().sum::<f64>() / 10.0;
            let var: f64 = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }
}
