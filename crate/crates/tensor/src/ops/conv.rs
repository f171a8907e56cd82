use crate::error::{shape_err, Result};
use crate::graph::{GradBuf, Graph, Op, Var};
use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Graph<T> {
    /// 2-D convolution: `x[N, C, H, W]`, `w[Co, C, kh, kw]`, `b[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (dx, dw) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        let (&[n, c, h, wd], &[co, ci, kh, kw]) = (dx.as_slice(), dw.as_slice()) else {
            return shape_err("conv2d", format!("x {dx:?}, w {dw:?}"));
        };
        if ci != c || (kh, kw) != geom.kernel {
            return shape_err("conv2d", format!("x {dx:?}, w {dw:?}, geom {geom:?}"));
        }
        if let Some(b) = b {
            if self.dims(b) != [co] {
                return shape_err("conv2d", format!("bias {:?}, expected [{co}]", self.dims(b)));
            }
        }
        let Some((ho, wo)) = geom.output_hw(h, wd) else {
            return shape_err("conv2d", format!("kernel {geom:?} does not fit {dx:?}"));
        };
        let (k, p) = (c * kh * kw, ho * wo);
        let mut cols = vec![T::zero(); k * p];
        let mut out = vec![T::zero(); n * co * p];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        for i in 0..n {
            let img = &xs[i * c * h * wd..(i + 1) * c * h * wd];
            let dst = &mut out[i * co * p..(i + 1) * co * p];
            if kh == 1 && kw == 1 && geom.stride == (1, 1) && geom.pad == (0, 0) {
                gemm(co, k, p, ws, false, img, false, dst, false);
            } else {
                im2col(img, c, h, wd, &geom, ho, wo, &mut cols);
                gemm(co, k, p, ws, false, &cols, false, dst, false);
            }
            if let Some(b) = b {
                for (row, &bv) in dst.chunks_mut(p).zip(self.value(b).data()) {
                    for v in row {
                        *v += bv;
                    }
                }
            }
        }
        let t = Tensor::new(&[n, co, ho, wo], out)?;
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom })
    }

    pub(crate) fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &[T],
        buf: &mut GradBuf<'_, T>,
    ) {
        let &[n, c, h, wd] = self.dims(x) else { return };
        let &[co, _, kh, kw] = self.dims(w) else { return };
        let (ho, wo) = geom.output_hw(h, wd).expect("validated in forward");
        let (k, p) = (c * kh * kw, ho * wo);
        let pointwise = kh == 1 && kw == 1 && geom.stride == (1, 1) && geom.pad == (0, 0);
        let xs = self.value(x).data();
        let ws = self.value(w).data();

        if let Some(b) = b {
            if let Some(s) = buf.slot(b) {
                for i in 0..n {
                    for (o, row) in g[i * co * p..(i + 1) * co * p].chunks(p).enumerate() {
                        s[o] += row.iter().copied().sum::<T>();
                    }
                }
            }
        }
        let mut cols = vec![T::zero(); k * p];
        if let Some(s) = buf.slot(w) {
            for i in 0..n {
                let img = &xs[i * c * h * wd..(i + 1) * c * h * wd];
                let gi = &g[i * co * p..(i + 1) * co * p];
                if pointwise {
                    gemm(co, p, k, gi, false, img, true, s, true);
                } else {
                    im2col(img, c, h, wd, geom, ho, wo, &mut cols);
                    gemm(co, p, k, gi, false, &cols, true, s, true);
                }
            }
        }
        if let Some(s) = buf.slot(x) {
            for i in 0..n {
                let gi = &g[i * co * p..(i + 1) * co * p];
                let dimg = &mut s[i * c * h * wd..(i + 1) * c * h * wd];
                if pointwise {
                    gemm(k, co, p, ws, true, gi, false, dimg, true);
                } else {
                    gemm(k, co, p, ws, true, gi, false, &mut cols, false);
                    col2im(&cols, c, h, wd, geom, ho, wo, dimg);
                }
            }
        }
    }

    /// 1-D convolution: `x[N, C, L]`, `w[Co, C, k]`, `b[Co]`.
    ///
    /// Lowered onto [`Graph::conv2d`] with a `1×k` kernel.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (dx, dw) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        let (&[n, c, l], &[co, ci, k]) = (dx.as_slice(), dw.as_slice()) else {
            return shape_err("conv1d", format!("x {dx:?}, w {dw:?}"));
        };
        let x4 = self.reshape(x, &[n, c, 1, l])?;
        let w4 = self.reshape(w, &[co, ci, 1, k])?;
        let geom = ConvGeom {
            kernel: (1, k),
            stride: (1, stride),
            pad: (0, pad),
        };
        let y = self.conv2d(x4, w4, b, geom)?;
        let lo = self.dims(y)[3];
        self.reshape(y, &[n, co, lo])
    }
}
