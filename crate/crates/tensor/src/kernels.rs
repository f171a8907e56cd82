//! Low-level kernels: strided GEMM and the im2col convolution path.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// `C (m×n) = A · B (+ C if accumulate)`, all row-major.
///
/// `a` is stored `m×k` (or `k×m` when `a_t`), `b` is stored `k×n`
/// (or `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: extents asserted above, strides derived from them.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

/// 2-D convolution geometry: kernel, stride and symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeom {
    pub fn square(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            pad: (pad, pad),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.pad;
        if sh == 0 || sw == 0 || h + 2 * ph < kh || w + 2 * pw < kw {
            return None;
        }
        Some(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

/// Unfolds one `C×H×W` image into `(C·kh·kw) × (Ho·Wo)` columns.
pub(crate) fn im2col<T: Real>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.pad.0 as isize, g.pad.1 as isize);
    let p = ho * wo;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..ho {
                    let iy = (oy * sh) as isize + ki as isize - ph;
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if sw == 1 {
                        // valid ox satisfy 0 <= ox + kj - pw < w
                        let off = kj as isize - pw;
                        let lo = (-off).clamp(0, wo as isize) as usize;
                        let hi = (w as isize - off).clamp(0, wo as isize) as usize;
                        out[..lo].fill(T::zero());
                        if hi > lo {
                            let s0 = (lo as isize + off) as usize;
                            out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                        out[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * sw) as isize + kj as isize - pw;
                            *o = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image (accumulating).
pub(crate) fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    ho: usize,
    wo: usize,
    img: &mut [T],
) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.pad.0 as isize, g.pad.1 as isize);
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * p;
                let src = &cols[row..row + p];
                for oy in 0..ho {
                    let iy = (oy * sh) as isize + ki as isize - ph;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * sw) as isize + kj as isize - pw;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Reference convolution by direct summation. Used as the oracle for the
/// im2col path; far too slow for training.
pub fn conv2d_direct<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Result<Tensor<T>> {
    let &[n, c, h, wd] = x.dims() else {
        return shape_err("conv2d_direct", format!("input {:?}", x.dims()));
    };
    let &[co, ci, kh, kw] = w.dims() else {
        return shape_err("conv2d_direct", format!("weight {:?}", w.dims()));
    };
    if ci != c || (kh, kw) != g.kernel {
        return shape_err("conv2d_direct", "weight/input channel or kernel mismatch");
    }
    let Some((ho, wo)) = g.output_hw(h, wd) else {
        return shape_err("conv2d_direct", "kernel larger than padded input");
    };
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let xd = x.data();
    let wdat = w.data();
    let od = out.data_mut();
    for ni in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(T::zero(), |b| b.data()[o]);
                    for cc in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * g.stride.0 + ki) as isize - g.pad.0 as isize;
                                let ix = (ox * g.stride.1 + kj) as isize - g.pad.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((ni * c + cc) * h + iy as usize) * wd + ix as usize];
                                let wv = wdat[((o * c + cc) * kh + ki) * kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    od[((ni * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom {
            kernel: (3, 2),
            stride: (2, 1),
            pad: (1, 1),
        };
        let (c, h, w) = (2, 5, 4);
        let (ho, wo) = g.output_hw(h, w).unwrap();
        let k = c * 3 * 2 * ho * wo;
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..k).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; k];
        im2col(&x, c, h, w, &g, ho, wo, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, &g, ho, wo, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
