//! Preconditioned denoiser `D(x; σ, label) = c_skip·x + c_out·F(c_in·x, c_noise, label)`
//! around a small UNet backbone `F`.

use std::collections::BTreeSet;

use idgen_tensor::{ConvGeom, Graph, Mode, ParamId, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Scalar coefficients of the EDM parameterization at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreconditioningCoeffs {
    pub sigma: f64,
    pub sigma_data: f64,
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precondition_coeffs(sigma: f64, sigma_data: f64) -> Result<PreconditioningCoeffs> {
    if !(sigma > 0.0 && sigma.is_finite() && sigma_data > 0.0 && sigma_data.is_finite()) {
        return Err(Error::Invalid(format!(
            "preconditioning needs finite σ > 0 and σ_data > 0, got σ={sigma}, σ_data={sigma_data}"
        )));
    }
    let total = sigma * sigma + sigma_data * sigma_data;
    Ok(PreconditioningCoeffs {
        sigma,
        sigma_data,
        c_skip: sigma_data * sigma_data / total,
        c_out: sigma * sigma_data / total.sqrt(),
        c_in: 1.0 / total.sqrt(),
        c_noise: sigma.ln() / 4.0,
    })
}

/// Posterior mean of `x₀ ~ N(0, s²I)` given `y = x₀ + N(0, σ²I)`.
pub fn analytic_gaussian_denoiser(y: &Tensor<f64>, sigma: f64, s: f64) -> Result<Tensor<f64>> {
    if !(sigma > 0.0 && s > 0.0) {
        return Err(Error::Invalid(format!("analytic denoiser needs σ, s > 0 (σ={sigma}, s={s})")));
    }
    let k = s * s / (s * s + sigma * sigma);
    Ok(y.map(|v| k * v))
}

/// Anything that maps a noisy batch at level σ to a clean estimate.
pub trait Denoiser {
    /// `x` is `[N, ...]`; one label per row.
    fn denoise(&self, x: &Tensor<f64>, sigma: f64, labels: &[usize]) -> Result<Tensor<f64>>;
}

/// Closed-form denoiser for zero-mean Gaussian data of std `s`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianOracle {
    pub s: f64,
}

impl Denoiser for GaussianOracle {
    fn denoise(&self, x: &Tensor<f64>, sigma: f64, _labels: &[usize]) -> Result<Tensor<f64>> {
        analytic_gaussian_denoiser(x, sigma, self.s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub model_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Spatial sizes (height) at which self-attention follows each block.
    pub attention_resolutions: BTreeSet<usize>,
    pub num_classes: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("backbone: {m}")));
        if self.in_channels == 0 || self.model_channels == 0 || self.num_classes == 0 {
            return bad(format!("channel and class counts must be positive: {self:?}"));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad(format!("invalid multipliers {:?}", self.channel_multipliers));
        }
        let f = 1 << (self.channel_multipliers.len() - 1);
        if self.height % f != 0 || self.width % f != 0 {
            return bad(format!(
                "{}×{} is not divisible by 2^{}",
                self.height,
                self.width,
                self.channel_multipliers.len() - 1
            ));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        4 * self.model_channels
    }

    fn level_channels(&self, level: usize) -> usize {
        self.model_channels * self.channel_multipliers[level]
    }
}

/// Largest group count ≤ 32 dividing `c` with at least 4 channels per group.
pub fn group_count(c: usize) -> usize {
    (1..=32.min(c)).rev().find(|&g| c % g == 0 && c / g >= 4).unwrap_or(1)
}

/// `[N, dim]` sinusoidal features of `c_noise`: cosines then sines over
/// geometrically spaced frequencies `10000^(-i/(dim/2))`.
pub fn noise_features(c_noise: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(c_noise.len() * dim);
    for &c in c_noise {
        let freq = |i: usize| (-(i as f64) / half as f64 * 10000f64.ln()).exp();
        out.extend((0..half).map(|i| (c * freq(i)).cos()));
        out.extend((0..half).map(|i| (c * freq(i)).sin()));
        out.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    out
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Real>(&mut self, dims: &[usize], std: f64) -> Tensor<T> {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::of(z * std)
            })
            .collect();
        Tensor::new(dims, data).expect("init dims")
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    proj: Conv,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    norm0: Norm,
    conv0: Conv,
    affine: Dense,
    norm1: Norm,
    conv1: Conv,
    skip: Option<Conv>,
    attn: Option<Attn>,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    init: Init,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Result<Conv> {
        let std = if zero { 0.0 } else { (1.0 / (cin * k * k) as f64).sqrt() };
        let w = self.init.normal(&[cout, cin, k, k], std);
        Ok(Conv {
            w: self.store.add(&format!("backbone/{name}/weight"), w)?,
            b: self.store.add(&format!("backbone/{name}/bias"), Tensor::zeros(&[cout]))?,
            k,
        })
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Result<Dense> {
        let w = self.init.normal(&[fout, fin], (1.0 / fin as f64).sqrt());
        Ok(Dense {
            w: self.store.add(&format!("backbone/{name}/weight"), w)?,
            b: self.store.add(&format!("backbone/{name}/bias"), Tensor::zeros(&[fout]))?,
        })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.store.add(&format!("backbone/{name}/gamma"), Tensor::full(&[c], T::one()))?,
            beta: self.store.add(&format!("backbone/{name}/beta"), Tensor::zeros(&[c]))?,
            groups: group_count(c),
        })
    }

    fn attn(&mut self, name: &str, c: usize) -> Result<Attn> {
        Ok(Attn {
            norm: self.norm(&format!("{name}/norm"), c)?,
            q: self.conv(&format!("{name}/q"), c, c, 1, false)?,
            k: self.conv(&format!("{name}/k"), c, c, 1, false)?,
            v: self.conv(&format!("{name}/v"), c, c, 1, false)?,
            proj: self.conv(&format!("{name}/proj"), c, c, 1, true)?,
        })
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, emb: usize, attn: bool) -> Result<ResBlock> {
        Ok(ResBlock {
            norm0: self.norm(&format!("{name}/norm0"), cin)?,
            conv0: self.conv(&format!("{name}/conv0"), cin, cout, 3, false)?,
            affine: self.dense(&format!("{name}/affine"), emb, cout)?,
            norm1: self.norm(&format!("{name}/norm1"), cout)?,
            conv1: self.conv(&format!("{name}/conv1"), cout, cout, 3, false)?,
            skip: if cin != cout {
                Some(self.conv(&format!("{name}/skip"), cin, cout, 1, false)?)
            } else {
                None
            },
            attn: if attn { Some(self.attn(&format!("{name}/attn"), cout)?) } else { None },
        })
    }
}

/// Encoder/decoder UNet with one residual block per resolution, noise and
/// class conditioning through a shared embedding vector.
#[derive(Debug, Clone)]
pub struct UNet {
    config: BackboneConfig,
    map0: Dense,
    map1: Dense,
    label_table: ParamId,
    conv_in: Conv,
    enc: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<Conv>,
    dec: Vec<ResBlock>,
    out_norm: Norm,
    conv_out: Conv,
}

const GN_EPS: f64 = 1e-5;

impl UNet {
    /// Registers freshly initialized parameters in `store`.
    pub fn build<T: Real>(config: &BackboneConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store,
            init: Init {
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
        };
        let c = config.model_channels;
        let e = config.embedding_dim();
        let levels = config.channel_multipliers.len();
        let attn_at = |level: usize| config.attention_resolutions.contains(&(config.height >> level));
        let map0 = b.dense("map/0", c, e)?;
        let map1 = b.dense("map/1", e, e)?;
        let label_table = b.store.add("backbone/map/label", b.init.normal(&[config.num_classes, e], 1.0))?;
        let conv_in = b.conv("in", config.in_channels, c, 3, false)?;
        let mut enc = Vec::new();
        let mut ch = c;
        for level in 0..levels {
            let out = config.level_channels(level);
            enc.push(b.block(&format!("enc{level}"), ch, out, e, attn_at(level))?);
            ch = out;
        }
        let mid = b.block("mid", ch, ch, e, attn_at(levels - 1))?;
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for level in (0..levels).rev() {
            if level != levels - 1 {
                up.push(b.conv(&format!("up{level}"), ch, ch, 3, false)?);
            }
            let out = config.level_channels(level);
            dec.push(b.block(&format!("dec{level}"), ch + out, out, e, attn_at(level))?);
            ch = out;
        }
        let out_norm = b.norm("out/norm", ch)?;
        let conv_out = b.conv("out/conv", ch, config.in_channels, 3, true)?;
        Ok(UNet {
            config: config.clone(),
            map0,
            map1,
            label_table,
            conv_in,
            enc,
            mid,
            up,
            dec,
            out_norm,
            conv_out,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `F(x, c_noise, label)` on `x[N, C, H, W]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        c_noise: &[f64],
        labels: &[usize],
    ) -> Result<Var> {
        let cfg = &self.config;
        let dims = g.dims(x).to_vec();
        if dims.len() != 4 || dims[1..] != [cfg.in_channels, cfg.height, cfg.width] {
            return Err(Error::Invalid(format!(
                "backbone expects [N, {}, {}, {}], got {dims:?}",
                cfg.in_channels, cfg.height, cfg.width
            )));
        }
        let n = dims[0];
        if c_noise.len() != n || labels.len() != n {
            return Err(Error::Invalid(format!(
                "batch of {n} with {} noise levels and {} labels",
                c_noise.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= cfg.num_classes) {
            return Err(Error::Invalid(format!("label {l} outside {} classes", cfg.num_classes)));
        }

        let feats = noise_features(c_noise, cfg.model_channels);
        let feats = g.input(Tensor::new(&[n, cfg.model_channels], feats.into_iter().map(T::of).collect())?);
        let emb = dense(g, store, self.map0, feats)?;
        let table = g.param(store, self.label_table);
        let lab = g.embedding(table, labels)?;
        let emb = g.add(emb, lab)?;
        let emb = g.silu(emb)?;
        let emb = dense(g, store, self.map1, emb)?;
        let emb = g.silu(emb)?;

        let levels = cfg.channel_multipliers.len();
        let mut h = conv(g, store, self.conv_in, x)?;
        let mut skips = Vec::with_capacity(levels);
        for (level, block) in self.enc.iter().enumerate() {
            h = res_block(g, store, block, h, emb)?;
            skips.push(h);
            if level != levels - 1 {
                let d = g.dims(h).to_vec();
                h = g.adaptive_avg_pool2d(h, (d[2] / 2, d[3] / 2))?;
            }
        }
        h = res_block(g, store, &self.mid, h, emb)?;
        let mut ups = self.up.iter();
        for (i, block) in self.dec.iter().enumerate() {
            if i != 0 {
                h = g.upsample_nearest2x(h)?;
                h = conv(g, store, *ups.next().expect("one upsample per level"), h)?;
            }
            let skip = skips.pop().expect("one skip per level");
            h = g.concat_channels(h, skip)?;
            h = res_block(g, store, block, h, emb)?;
        }
        h = norm(g, store, self.out_norm, h)?;
        h = g.silu(h)?;
        conv(g, store, self.conv_out, h)
    }
}

fn conv<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, c: Conv, x: Var) -> Result<Var> {
    let (w, b) = (g.param(store, c.w), g.param(store, c.b));
    Ok(g.conv2d(x, w, Some(b), ConvGeom::square(c.k, 1, c.k / 2))?)
}

fn dense<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, d: Dense, x: Var) -> Result<Var> {
    let (w, b) = (g.param(store, d.w), g.param(store, d.b));
    Ok(g.linear(x, w, Some(b))?)
}

fn norm<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, n: Norm, x: Var) -> Result<Var> {
    let (gamma, beta) = (g.param(store, n.gamma), g.param(store, n.beta));
    Ok(g.group_norm(x, gamma, beta, n.groups, GN_EPS)?)
}

fn res_block<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, blk: &ResBlock, x: Var, emb: Var) -> Result<Var> {
    let mut h = norm(g, store, blk.norm0, x)?;
    h = g.silu(h)?;
    h = conv(g, store, blk.conv0, h)?;
    let bias = dense(g, store, blk.affine, emb)?;
    h = g.add_channel_bias(h, bias)?;
    h = norm(g, store, blk.norm1, h)?;
    h = g.silu(h)?;
    h = conv(g, store, blk.conv1, h)?;
    let skip = match blk.skip {
        Some(c) => conv(g, store, c, x)?,
        None => x,
    };
    h = g.add(h, skip)?;
    h = g.scale(h, T::of(std::f64::consts::FRAC_1_SQRT_2))?;
    if let Some(a) = blk.attn {
        let d = g.dims(h).to_vec();
        let flat = [d[0], d[1], d[2] * d[3]];
        let n = norm(g, store, a.norm, h)?;
        let q = conv(g, store, a.q, n)?;
        let k = conv(g, store, a.k, n)?;
        let v = conv(g, store, a.v, n)?;
        let (q, k, v) = (g.reshape(q, &flat)?, g.reshape(k, &flat)?, g.reshape(v, &flat)?);
        let o = g.attention(q, k, v)?;
        let o = g.reshape(o, &d)?;
        let o = conv(g, store, a.proj, o)?;
        h = g.add(h, o)?;
        h = g.scale(h, T::of(std::f64::consts::FRAC_1_SQRT_2))?;
    }
    Ok(h)
}

/// Backbone parameters plus the preconditioning wrapper.
#[derive(Debug, Clone)]
pub struct DenoiserModel<T> {
    pub net: UNet,
    pub params: ParamStore<T>,
    pub sigma_data: f64,
    pub labels: Vec<String>,
}

impl<T: Real> DenoiserModel<T> {
    pub fn new(config: &BackboneConfig, sigma_data: f64, labels: Vec<String>, seed: u64) -> Result<Self> {
        if labels.len() != config.num_classes {
            return Err(Error::Invalid(format!(
                "{} label names for {} classes",
                labels.len(),
                config.num_classes
            )));
        }
        let mut params = ParamStore::new();
        let net = UNet::build(config, &mut params, seed)?;
        Ok(DenoiserModel {
            net,
            params,
            sigma_data,
            labels,
        })
    }

    /// Raw backbone output `F(c_in·x, c_noise, label)` recorded on `g`.
    /// `x` holds the noisy (unscaled) input.
    pub fn backbone_on_graph(&self, g: &mut Graph<T>, x: &Tensor<T>, sigmas: &[f64], labels: &[usize]) -> Result<Var> {
        let n = x.dims()[0];
        if sigmas.len() != n {
            return Err(Error::Invalid(format!("{} noise levels for batch of {n}", sigmas.len())));
        }
        let coeffs: Vec<PreconditioningCoeffs> = sigmas
            .iter()
            .map(|&s| precondition_coeffs(s, self.sigma_data))
            .collect::<Result<_>>()?;
        let per = x.numel() / n;
        let mut scaled = x.clone();
        for (row, c) in scaled.data_mut().chunks_mut(per).zip(&coeffs) {
            let k = T::of(c.c_in);
            row.iter_mut().for_each(|v| *v = *v * k);
        }
        let xin = g.input(scaled);
        let c_noise: Vec<f64> = coeffs.iter().map(|c| c.c_noise).collect();
        self.net.forward(g, &self.params, xin, &c_noise, labels)
    }

    /// Eval-mode `D(x; σ_i, label_i)` for a batch with per-row noise levels.
    pub fn denoise_batch(&self, x: &Tensor<T>, sigmas: &[f64], labels: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new(Mode::Eval, 0);
        let f = self.backbone_on_graph(&mut g, x, sigmas, labels)?;
        let f = g.value(f);
        let per = x.numel() / x.dims()[0];
        let mut out = x.clone();
        for (i, (o, fr)) in out.data_mut().chunks_mut(per).zip(f.data().chunks(per)).enumerate() {
            let c = precondition_coeffs(sigmas[i], self.sigma_data)?;
            let (cs, co) = (T::of(c.c_skip), T::of(c.c_out));
            for (ov, &fv) in o.iter_mut().zip(fr) {
                *ov = cs * *ov + co * fv;
            }
        }
        Ok(out)
    }
}

impl<T: Real> Denoiser for DenoiserModel<T> {
    fn denoise(&self, x: &Tensor<f64>, sigma: f64, labels: &[usize]) -> Result<Tensor<f64>> {
        let n = x.dims()[0];
        let out = self.denoise_batch(&x.cast(), &vec![sigma; n], labels)?;
        Ok(out.cast())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(h: usize, attn: bool) -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            height: h,
            width: h,
            model_channels: 8,
            channel_multipliers: vec![1, 2],
            attention_resolutions: if attn { [h / 2].into() } else { BTreeSet::new() },
            num_classes: 4,
        }
    }

    #[test]
    fn coefficient_examples() {
        let c = precondition_coeffs(0.5, 0.5).unwrap();
        assert!((c.c_skip - 0.5).abs() < 1e-15);
        assert!((c.c_out - 0.353553).abs() < 1e-6);
        assert!((c.c_in - 1.414214).abs() < 1e-6);
        assert!((c.c_noise + 0.173287).abs() < 1e-6);
        let c = precondition_coeffs(80.0, 0.5).unwrap();
        assert!((c.c_skip - 3.9060e-5).abs() < 1e-9);
        assert!((c.c_out - 0.499990).abs() < 1e-6);
        assert!((c.c_in - 0.0124998).abs() < 1e-7);
        assert!((c.c_noise - 1.095_506_658_668_470_3).abs() < 1e-12);
        let c = precondition_coeffs(1e-9, 0.5).unwrap();
        assert!((c.c_skip - 1.0).abs() < 1e-12 && c.c_out < 1e-8 && (c.c_in - 2.0).abs() < 1e-12);
        assert!(precondition_coeffs(0.0, 0.5).is_err());
        assert!(precondition_coeffs(1.0, f64::NAN).is_err());
    }

    #[test]
    fn analytic_denoiser_values() {
        let y = Tensor::new(&[2], vec![1.0, -3.0]).unwrap();
        assert_eq!(analytic_gaussian_denoiser(&y, 0.5, 0.5).unwrap().data(), &[0.5, -1.5]);
        let d = analytic_gaussian_denoiser(&y, 1.0, 0.5).unwrap();
        assert!((d.data()[0] - 0.2).abs() < 1e-15);
        assert!(analytic_gaussian_denoiser(&y, 1e-12, 0.5).unwrap().max_abs_diff(&y) < 1e-20);
    }

    #[test]
    fn group_counts() {
        assert_eq!(group_count(32), 8);
        assert_eq!(group_count(64), 16);
        assert_eq!(group_count(128), 32);
        assert_eq!(group_count(96), 24);
        assert_eq!(group_count(8), 2);
        assert_eq!(group_count(3), 1);
    }

    #[test]
    fn output_shape_and_initial_skip_behaviour() {
        for (h, attn) in [(8, false), (16, true)] {
            let m = DenoiserModel::<f64>::new(&tiny(h, attn), 0.5, vec!["a".into(), "b".into(), "c".into(), "d".into()], 3).unwrap();
            let x = Tensor::new(&[2, 3, h, h], (0..6 * h * h).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
            let d = m.denoise_batch(&x, &[0.5, 0.5], &[0, 3]).unwrap();
            assert_eq!(d.dims(), x.dims());
            // zero-initialized output conv: F ≡ 0, so D = c_skip·x = x/2 at σ = σ_data
            assert!(d.max_abs_diff(&x.map(|v| v / 2.0)) < 1e-15);
            let z = m.denoise_batch(&Tensor::zeros(&[1, 3, h, h]), &[80.0], &[1]).unwrap();
            assert!(z.is_finite());
        }
    }

    #[test]
    fn shape_and_label_violations() {
        let m = DenoiserModel::<f64>::new(&tiny(8, false), 0.5, (0..4).map(|i| i.to_string()).collect(), 0).unwrap();
        assert!(m.denoise_batch(&Tensor::zeros(&[1, 3, 8, 4]), &[1.0], &[0]).is_err());
        assert!(m.denoise_batch(&Tensor::zeros(&[1, 3, 8, 8]), &[1.0], &[4]).is_err());
        let mut odd = tiny(6, false);
        odd.channel_multipliers = vec![1, 2, 2];
        assert!(odd.validate().is_err());
    }

    #[test]
    fn labels_reach_the_output_once_weights_are_nonzero() {
        let mut m = DenoiserModel::<f64>::new(&tiny(8, false), 0.5, (0..4).map(|i| i.to_string()).collect(), 5).unwrap();
        let id = m.params.id("backbone/out/conv/weight").unwrap();
        let w = m.params.get(id).map(|_| 0.01);
        *m.params.get_mut(id) = w;
        let x = Tensor::full(&[2, 3, 8, 8], 0.3);
        let d = m.denoise_batch(&x, &[1.0, 1.0], &[0, 2]).unwrap();
        assert!(Tensor::new(&[3, 8, 8], d.outer(0).to_vec()).unwrap().max_abs_diff(&Tensor::new(&[3, 8, 8], d.outer(1).to_vec()).unwrap()) > 0.0);
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        use idgen_tensor::gradcheck::{check, GradCheckConfig};
        let cfg = tiny(4, true);
        let mut store = ParamStore::<f64>::new();
        let net = UNet::build(&cfg, &mut store, 1).unwrap();
        // perturb the zero-initialized layers so every path carries gradient
        for name in ["backbone/out/conv/weight", "backbone/enc1/attn/proj/weight"] {
            let id = store.id(name).unwrap();
            let t = store.get(id).clone();
            let n = t.numel();
            *store.get_mut(id) = Tensor::new(t.dims(), (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.05).collect()).unwrap();
        }
        let x = Tensor::new(&[2, 3, 4, 4], (0..96).map(|i| (i as f64 * 0.71).cos()).collect()).unwrap();
        let conf = GradCheckConfig {
            probes: 40,
            ..GradCheckConfig::default()
        };
        let report = check(&[x], &conf, |g, vars| net.forward(g, &store, vars[0], &[0.1, -0.4], &[1, 3]).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => panic!("{other}"),
        }))
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
