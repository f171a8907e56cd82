use crate::error::{shape_err, Result};
use crate::graph::{GradBuf, Graph, Op, Var};
use crate::real::Real;
use crate::tensor::Tensor;

fn bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

impl<T: Real> Graph<T> {
    /// Non-overlapping max pooling of `[N, C, H, W]` with stride = kernel.
    pub fn max_pool2d(&mut self, x: Var, kernel: (usize, usize)) -> Result<Var> {
        let &[n, c, h, w] = self.dims(x) else {
            return shape_err("max_pool2d", format!("{:?}", self.dims(x)));
        };
        let (kh, kw) = kernel;
        if kh == 0 || kw == 0 || h < kh || w < kw {
            return shape_err("max_pool2d", format!("kernel {kernel:?} on {h}x{w}"));
        }
        let (ho, wo) = (h / kh, w / kw);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * kh * w + ox * kw;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let idx = base + (oy * kh + dy) * w + ox * kw + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(&[n, c, ho, wo], out)?;
        self.push("max_pool2d", t, Op::MaxPool { x, argmax })
    }

    /// Max pooling of `[N, C, L]` with stride = kernel.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let &[n, c, l] = self.dims(x) else {
            return shape_err("max_pool1d", format!("{:?}", self.dims(x)));
        };
        let x4 = self.reshape(x, &[n, c, 1, l])?;
        let y = self.max_pool2d(x4, (1, kernel))?;
        let lo = self.dims(y)[3];
        self.reshape(y, &[n, c, lo])
    }

    /// Adaptive average pooling of `[N, C, H, W]` to a fixed `(oh, ow)`.
    ///
    /// Bin `i` covers `[⌊i·H/oh⌋, ⌈(i+1)·H/oh⌉)`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_hw: (usize, usize)) -> Result<Var> {
        let &[n, c, h, w] = self.dims(x) else {
            return shape_err("adaptive_avg_pool2d", format!("{:?}", self.dims(x)));
        };
        let (oh, ow) = out_hw;
        if oh == 0 || ow == 0 {
            return shape_err("adaptive_avg_pool2d", "zero output size");
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                let (y0, y1) = bin(i, h, oh);
                for j in 0..ow {
                    let (x0, x1) = bin(j, w, ow);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += plane[y * w + xx];
                        }
                    }
                    out.push(acc / T::of(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        let t = Tensor::new(&[n, c, oh, ow], out)?;
        self.push("adaptive_avg_pool2d", t, Op::AdaptiveAvgPool { x, out_hw })
    }

    pub fn adaptive_avg_pool1d(&mut self, x: Var, out: usize) -> Result<Var> {
        let &[n, c, l] = self.dims(x) else {
            return shape_err("adaptive_avg_pool1d", format!("{:?}", self.dims(x)));
        };
        let x4 = self.reshape(x, &[n, c, 1, l])?;
        let y = self.adaptive_avg_pool2d(x4, (1, out))?;
        self.reshape(y, &[n, c, out])
    }

    pub(crate) fn adaptive_pool_backward(
        &self,
        x: Var,
        out_hw: (usize, usize),
        g: &[T],
        buf: &mut GradBuf<'_, T>,
    ) {
        let &[n, c, h, w] = self.dims(x) else { return };
        let (oh, ow) = out_hw;
        if let Some(s) = buf.slot(x) {
            for p in 0..n * c {
                let plane = &mut s[p * h * w..(p + 1) * h * w];
                let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                for i in 0..oh {
                    let (y0, y1) = bin(i, h, oh);
                    for j in 0..ow {
                        let (x0, x1) = bin(j, w, ow);
                        let share = gp[i * ow + j] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                plane[y * w + xx] += share;
                            }
                        }
                    }
                }
            }
        }
    }
}
