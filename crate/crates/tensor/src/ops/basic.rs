use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{GradBuf, Graph, Mode, Op, Var};
use crate::kernels::gemm;
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Graph<T> {
    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(dims)?;
        self.push("reshape", t, Op::Reshape(x))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.dims(), data).expect("dims checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push("add", t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", t, Op::Mul(a, b))
    }

    pub(crate) fn mul_backward(&self, a: Var, b: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if let Some(s) = buf.slot(a) {
            for i in 0..s.len() {
                s[i] += g[i] * vb[i];
            }
        }
        if let Some(s) = buf.slot(b) {
            for i in 0..s.len() {
                s[i] += g[i] * va[i];
            }
        }
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push("scale", t, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", t, Op::Relu(x))
    }

    pub(crate) fn relu_backward(&self, x: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
        let vx = self.value(x).data();
        if let Some(s) = buf.slot(x) {
            for i in 0..s.len() {
                if vx[i] > T::zero() {
                    s[i] += g[i];
                }
            }
        }
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.push("silu", t, Op::Silu(x))
    }

    pub(crate) fn silu_backward(&self, x: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
        let vx = self.value(x).data();
        if let Some(s) = buf.slot(x) {
            for i in 0..s.len() {
                let sig = T::one() / (T::one() + (-vx[i]).exp());
                s[i] += g[i] * sig * (T::one() + vx[i] * (T::one() - sig));
            }
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::of(t.numel() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x))
    }

    /// Concatenates `[N, Ca, ...]` and `[N, Cb, ...]` along axis 1.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da.len() < 2 || da.len() != db.len() || da[0] != db[0] || da[2..] != db[2..] {
            return shape_err("concat_channels", format!("{da:?} vs {db:?}"));
        }
        let n = da[0];
        let (sa, sb) = (self.value(a).numel() / n, self.value(b).numel() / n);
        let mut data = Vec::with_capacity((sa + sb) * n);
        for i in 0..n {
            data.extend_from_slice(self.value(a).outer(i));
            data.extend_from_slice(self.value(b).outer(i));
        }
        let mut dims = da.clone();
        dims[1] += db[1];
        let t = Tensor::new(&dims, data)?;
        self.push("concat_channels", t, Op::Concat(a, b))
    }

    pub(crate) fn concat_backward(&self, a: Var, b: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
        let n = self.dims(a)[0];
        let sa = self.value(a).numel() / n;
        let sb = self.value(b).numel() / n;
        if let Some(s) = buf.slot(a) {
            for i in 0..n {
                let src = &g[i * (sa + sb)..i * (sa + sb) + sa];
                for (d, &v) in s[i * sa..(i + 1) * sa].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        if let Some(s) = buf.slot(b) {
            for i in 0..n {
                let src = &g[i * (sa + sb) + sa..(i + 1) * (sa + sb)];
                for (d, &v) in s[i * sb..(i + 1) * sb].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
    }

    /// `x[N, C, ...] + b[N, C]` broadcast over trailing axes.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (dx, db) = (self.dims(x).to_vec(), self.dims(b).to_vec());
        if dx.len() < 2 || db != dx[..2] {
            return shape_err("add_channel_bias", format!("x {dx:?}, bias {db:?}"));
        }
        let spatial: usize = dx[2..].iter().product();
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for (chunk, &bv) in t.data_mut().chunks_mut(spatial).zip(&bias) {
            for v in chunk {
                *v += bv;
            }
        }
        self.push("add_channel_bias", t, Op::AddChannelBias { x, b })
    }

    pub(crate) fn channel_bias_backward(&self, x: Var, b: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
        buf.add(x, g);
        let spatial: usize = self.dims(x)[2..].iter().product();
        if let Some(s) = buf.slot(b) {
            for (d, chunk) in s.iter_mut().zip(g.chunks(spatial)) {
                *d += chunk.iter().copied().sum::<T>();
            }
        }
    }

    /// `x[N, in] · w[out, in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (dx, dw) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        if dx.len() != 2 || dw.len() != 2 || dx[1] != dw[1] {
            return shape_err("linear", format!("x {dx:?}, w {dw:?}"));
        }
        let (n, fin, fout) = (dx[0], dx[1], dw[0]);
        if let Some(b) = b {
            if self.dims(b) != [fout] {
                return shape_err("linear", format!("bias {:?}, expected [{fout}]", self.dims(b)));
            }
        }
        let mut out = vec![T::zero(); n * fout];
        gemm(n, fin, fout, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let t = Tensor::new(&[n, fout], out)?;
        self.push("linear", t, Op::Linear { x, w, b })
    }

    pub(crate) fn linear_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: &[T],
        buf: &mut GradBuf<'_, T>,
    ) {
        let (n, fin) = (self.dims(x)[0], self.dims(x)[1]);
        let fout = self.dims(w)[0];
        if let Some(s) = buf.slot(w) {
            gemm(fout, n, fin, g, true, self.value(x).data(), false, s, true);
        }
        if let Some(s) = buf.slot(x) {
            gemm(n, fout, fin, g, false, self.value(w).data(), false, s, true);
        }
        if let Some(b) = b {
            if let Some(s) = buf.slot(b) {
                for row in g.chunks(fout) {
                    for (d, &v) in s.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
        }
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let &[n, c, h, w] = self.dims(x) else {
            return shape_err("upsample_nearest2x", format!("{:?}", self.dims(x)));
        };
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&[n, c, h2, w2], out)?;
        self.push("upsample_nearest2x", t, Op::Upsample2x(x))
    }

    pub(crate) fn upsample_backward(&self, x: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
        let &[n, c, h, w] = self.dims(x) else { return };
        let (h2, w2) = (2 * h, 2 * w);
        if let Some(s) = buf.slot(x) {
            for p in 0..n * c {
                let src = &g[p * h2 * w2..(p + 1) * h2 * w2];
                let dst = &mut s[p * h * w..(p + 1) * h * w];
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                    }
                }
            }
        }
    }

    /// Inverted dropout: train mode zeroes with probability `p` and rescales
    /// survivors by `1/(1-p)`; eval mode is the identity.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(crate::TensorError::Invalid(format!("dropout rate {p}")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let numel = self.value(x).numel();
        let mask: Vec<T> = (0..numel)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(src.dims(), data)?;
        self.push("dropout", t, Op::Dropout { x, mask })
    }

    /// Row lookup `table[V, D]` → `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let &[vocab, dim] = self.dims(table) else {
            return shape_err("embedding", format!("table {:?}", self.dims(table)));
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return shape_err("embedding", format!("id {bad} outside vocabulary of {vocab}"));
        }
        let tab = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&tab[i * dim..(i + 1) * dim]);
        }
        let t = Tensor::new(&[ids.len(), dim], out)?;
        self.push(
            "embedding",
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub(crate) fn embedding_backward(
        &self,
        table: Var,
        ids: &[usize],
        g: &[T],
        buf: &mut GradBuf<'_, T>,
    ) {
        let dim = self.dims(table)[1];
        if let Some(s) = buf.slot(table) {
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..dim {
                    s[i * dim + j] += g[r * dim + j];
                }
            }
        }
    }

    /// Softmax over the last axis of `[N, K]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let &[_, k] = self.dims(x) else {
            return shape_err("softmax", format!("{:?}", self.dims(x)));
        };
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(k) {
            softmax_row(row);
        }
        self.push("softmax", t, Op::Softmax(x))
    }

    pub(crate) fn softmax_backward(&self, out: Var, x: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
        let k = self.dims(x)[1];
        let y = self.value(out).data();
        if let Some(s) = buf.slot(x) {
            for ((srow, yrow), grow) in s.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                for j in 0..k {
                    srow[j] += yrow[j] * (grow[j] - dot);
                }
            }
        }
    }
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
