//! Invertible delay embedding between signals and images.
//!
//! A length-`L` channel is cut into `q = ⌈(L − n)/m⌉` columns of height `n`.
//! Column `j < q − 1` starts at sample `j·m`; the final column is pinned to
//! start at `L − n` so the tail of the signal is always covered and the
//! rearrangement is exactly invertible. Inversion reads every sample from the
//! first column that covers it, which makes it total on arbitrary images.

use idgen_tensor::{Real, Tensor};

use crate::data::SignalWindow;
use crate::error::{Error, Result};

pub const CHANNEL_NAMES: [&str; 3] = ["x", "y", "z"];

/// Delay-embedding configuration: skip `m`, column height `n`, length `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingParams {
    skip: usize,
    height: usize,
    length: usize,
}

impl EmbeddingParams {
    pub fn new(skip: usize, height: usize, length: usize) -> Result<Self> {
        if skip == 0 || height == 0 {
            return Err(Error::Embedding(format!(
                "skip ({skip}) and height ({height}) must be positive"
            )));
        }
        if height > length {
            return Err(Error::Embedding(format!(
                "height {height} exceeds signal length {length}"
            )));
        }
        let params = EmbeddingParams {
            skip,
            height,
            length,
        };
        params.check_coverage()?;
        Ok(params)
    }

    /// Skip 15, height 64, length 1024: a 64 × 64 image per channel.
    pub fn reference() -> Self {
        EmbeddingParams::new(15, 64, 1024).expect("valid reference parameters")
    }

    pub fn skip(&self) -> usize {
        self.skip
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn columns(&self) -> usize {
        (self.length - self.height).div_ceil(self.skip).max(1)
    }

    pub fn column_starts(&self) -> Vec<usize> {
        let q = self.columns();
        let mut starts: Vec<usize> = (0..q - 1).map(|j| j * self.skip).collect();
        starts.push(self.length - self.height);
        starts
    }

    fn check_coverage(&self) -> Result<()> {
        let starts = self.column_starts();
        if starts[0] != 0 {
            return Err(Error::Embedding(format!(
                "samples 0..{} are not covered by any column",
                starts[0]
            )));
        }
        for (j, w) in starts.windows(2).enumerate() {
            if w[1] - w[0] > self.height {
                return Err(Error::Coverage {
                    prev: j,
                    column: j + 1,
                    gap: w[1] - w[0],
                    height: self.height,
                });
            }
        }
        Ok(())
    }
}

/// How [`invert_with`] resolves samples covered by several columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InversionRule {
    /// Read from the lowest-index covering column (exact on true embeddings).
    #[default]
    FirstCovering,
    /// Average all covering entries.
    Mean,
}

/// Embeds one channel into an `n × q` matrix.
pub fn embed<T: Real>(signal: &[T], params: &EmbeddingParams) -> Result<Tensor<T>> {
    if signal.len() != params.length {
        return Err(Error::Embedding(format!(
            "signal length {} does not match configured length {}",
            signal.len(),
            params.length
        )));
    }
    let (n, q) = (params.height, params.columns());
    let mut out = vec![T::zero(); n * q];
    for (j, s) in params.column_starts().into_iter().enumerate() {
        for r in 0..n {
            out[r * q + j] = signal[s + r];
        }
    }
    Ok(Tensor::new(&[n, q], out)?)
}

fn check_matrix<T: Real>(matrix: &Tensor<T>, params: &EmbeddingParams) -> Result<()> {
    let expect = [params.height, params.columns()];
    if matrix.dims() != expect {
        return Err(Error::Embedding(format!(
            "matrix dims {:?} do not match parameters ({}×{})",
            matrix.dims(),
            expect[0],
            expect[1]
        )));
    }
    Ok(())
}

/// Recovers the signal with the first-covering-column rule.
pub fn invert<T: Real>(matrix: &Tensor<T>, params: &EmbeddingParams) -> Result<Vec<T>> {
    invert_with(matrix, params, InversionRule::FirstCovering)
}

pub fn invert_with<T: Real>(
    matrix: &Tensor<T>,
    params: &EmbeddingParams,
    rule: InversionRule,
) -> Result<Vec<T>> {
    check_matrix(matrix, params)?;
    let (n, q, len) = (params.height, params.columns(), params.length);
    let m = matrix.data();
    let starts = params.column_starts();
    match rule {
        InversionRule::FirstCovering => {
            let mut out = vec![T::zero(); len];
            let mut covered = 0;
            for (j, &s) in starts.iter().enumerate() {
                for k in covered.max(s)..s + n {
                    out[k] = m[(k - s) * q + j];
                }
                covered = s + n;
            }
            Ok(out)
        }
        InversionRule::Mean => {
            let mut sum = vec![0.0f64; len];
            let mut count = vec![0u32; len];
            for (j, &s) in starts.iter().enumerate() {
                for r in 0..n {
                    sum[s + r] += m[r * q + j].as_f64();
                    count[s + r] += 1;
                }
            }
            Ok(sum
                .iter()
                .zip(&count)
                .map(|(&v, &c)| T::of(v / f64::from(c)))
                .collect())
        }
    }
}

/// Largest absolute disagreement between entries that refer to the same
/// sample. Zero for any true embedding.
pub fn max_inconsistency<T: Real>(matrix: &Tensor<T>, params: &EmbeddingParams) -> Result<f64> {
    let reference = invert(matrix, params)?;
    let q = params.columns();
    let m = matrix.data();
    let mut worst = 0.0f64;
    for (j, s) in params.column_starts().into_iter().enumerate() {
        for r in 0..params.height {
            worst = worst.max((m[r * q + j].as_f64() - reference[s + r].as_f64()).abs());
        }
    }
    Ok(worst)
}

/// Zero padding recorded per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

/// Multi-channel delay-embedded image with exact-inversion metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedImage {
    /// `[channels, height, width]`.
    pub pixels: Tensor<f32>,
    pub pad: Padding,
    pub params: EmbeddingParams,
    pub channel_order: Vec<String>,
}

pub fn channel_names(count: usize) -> Vec<String> {
    (0..count)
        .map(|i| CHANNEL_NAMES.get(i).map_or_else(|| format!("c{i}"), |s| s.to_string()))
        .collect()
}

/// Image size after padding to `target` (bottom/right only).
pub fn padding_for(params: &EmbeddingParams, target: Option<(usize, usize)>) -> Result<Padding> {
    let (n, q) = (params.height, params.columns());
    let Some((h, w)) = target else {
        return Ok(Padding::default());
    };
    if h < n || w < q {
        return Err(Error::Embedding(format!(
            "target {h}×{w} is smaller than the embedded {n}×{q}"
        )));
    }
    Ok(Padding {
        bottom: h - n,
        right: w - q,
        ..Padding::default()
    })
}

/// Embeds every channel of `window` independently and stacks the results.
pub fn embed_window(
    window: &SignalWindow,
    params: &EmbeddingParams,
    target: Option<(usize, usize)>,
) -> Result<EmbeddedImage> {
    let pad = padding_for(params, target)?;
    let &[c, _] = window.values.dims() else {
        return Err(Error::Embedding(format!("window dims {:?}", window.values.dims())));
    };
    let (n, q) = (params.height, params.columns());
    let (h, w) = (pad.top + n + pad.bottom, pad.left + q + pad.right);
    let mut pixels = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let mat = embed(window.values.outer(ch), params)?;
        let plane = &mut pixels[ch * h * w..(ch + 1) * h * w];
        for r in 0..n {
            let dst = (r + pad.top) * w + pad.left;
            plane[dst..dst + q].copy_from_slice(&mat.data()[r * q..(r + 1) * q]);
        }
    }
    Ok(EmbeddedImage {
        pixels: Tensor::new(&[c, h, w], pixels)?,
        pad,
        params: *params,
        channel_order: channel_names(c),
    })
}

fn unpadded_channel(image: &EmbeddedImage, ch: usize) -> Result<(Tensor<f32>, f32, Option<Error>)> {
    let &[c, h, w] = image.pixels.dims() else {
        return Err(Error::Embedding(format!("image dims {:?}", image.pixels.dims())));
    };
    let (n, q) = (image.params.height, image.params.columns());
    let p = image.pad;
    if p.top + n + p.bottom != h || p.left + q + p.right != w || ch >= c {
        return Err(Error::Embedding(format!(
            "padding {p:?} inconsistent with {h}×{w} image of {n}×{q} embeddings"
        )));
    }
    let plane = image.pixels.outer(ch);
    let mut worst = 0.0f32;
    let mut first_dirty = None;
    for r in 0..h {
        for col in 0..w {
            let inside = (p.top..p.top + n).contains(&r) && (p.left..p.left + q).contains(&col);
            let v = plane[r * w + col];
            if !inside && v != 0.0 {
                worst = worst.max(v.abs());
                first_dirty.get_or_insert(Error::DirtyPadding {
                    channel: ch,
                    row: r,
                    col,
                    value: v,
                });
            }
        }
    }
    let mut data = Vec::with_capacity(n * q);
    for r in 0..n {
        let start = (r + p.top) * w + p.left;
        data.extend_from_slice(&plane[start..start + q]);
    }
    Ok((Tensor::new(&[n, q], data)?, worst, first_dirty))
}

/// Strips padding and inverts each channel, returning `[channels, L]`.
///
/// Non-zero values in the padding region are an error.
pub fn invert_image(image: &EmbeddedImage) -> Result<Tensor<f32>> {
    let (values, _) = invert_image_inner(image, true)?;
    Ok(values)
}

/// Like [`invert_image`] but ignores padding content, returning the largest
/// absolute padding value encountered alongside the signal.
pub fn invert_image_lenient(image: &EmbeddedImage) -> Result<(Tensor<f32>, f32)> {
    invert_image_inner(image, false)
}

fn invert_image_inner(image: &EmbeddedImage, strict: bool) -> Result<(Tensor<f32>, f32)> {
    let c = image.pixels.dims()[0];
    let len = image.params.length;
    let mut out = Vec::with_capacity(c * len);
    let mut worst = 0.0f32;
    for ch in 0..c {
        let (mat, dirt, err) = unpadded_channel(image, ch)?;
        if strict {
            if let Some(e) = err {
                return Err(e);
            }
        }
        worst = worst.max(dirt);
        out.extend(invert(&mat, &image.params)?);
    }
    Ok((Tensor::new(&[c, len], out)?, worst))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Provenance, Source};
    use proptest::prelude::*;

    fn window(values: Vec<f32>, len: usize) -> SignalWindow {
        SignalWindow {
            values: Tensor::new(&[3, len], values).unwrap(),
            label: 0,
            source: Source::Real,
            provenance: Provenance::Recording {
                id: "r".into(),
                offset: 0,
            },
            normalized: false,
        }
    }

    #[test]
    fn reference_parameters_give_square_image() {
        let p = EmbeddingParams::reference();
        assert_eq!(p.columns(), 64);
        let starts = p.column_starts();
        assert_eq!(starts.len(), 64);
        assert_eq!(starts[62], 930);
        assert_eq!(starts[63], 960);
        assert!(starts[..63].iter().enumerate().all(|(j, &s)| s == 15 * j));
    }

    #[test]
    fn small_example_columns() {
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let p = EmbeddingParams::new(2, 4, 10).unwrap();
        let m = embed(&x, &p).unwrap();
        assert_eq!(m.dims(), &[4, 3]);
        let col = |j: usize| (0..4).map(|r| m.data()[r * 3 + j]).collect::<Vec<_>>();
        assert_eq!(col(0), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(col(1), vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(col(2), vec![7.0, 8.0, 9.0, 10.0]);
        // sample 5 (1-based) comes from column 2, row 3 (1-based)
        let mut probe = m.clone();
        probe.data_mut()[2 * 3 + 1] = -5.0;
        assert_eq!(invert(&probe, &p).unwrap()[4], -5.0);
        assert_eq!(invert(&m, &p).unwrap(), x);
    }

    #[test]
    fn zero_signal_embeds_to_zero() {
        let p = EmbeddingParams::reference();
        let m = embed(&vec![0.0f32; 1024], &p).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        assert_eq!(invert(&m, &p).unwrap(), vec![0.0f32; 1024]);
    }

    #[test]
    fn single_column_edge() {
        let p = EmbeddingParams::new(3, 8, 8).unwrap();
        assert_eq!(p.columns(), 1);
        let x: Vec<f32> = (0..8).map(|i| i as f32).collect();
        assert_eq!(invert(&embed(&x, &p).unwrap(), &p).unwrap(), x);
    }

    #[test]
    fn invalid_parameters() {
        assert!(EmbeddingParams::new(0, 4, 10).is_err());
        assert!(EmbeddingParams::new(1, 11, 10).is_err());
        // one column that cannot reach the head of the signal
        assert!(EmbeddingParams::new(9, 4, 10).is_err());
        match EmbeddingParams::new(5, 4, 16) {
            Err(Error::Coverage { gap: 5, height: 4, .. }) => {}
            other => panic!("{other:?}"),
        }
        let p = EmbeddingParams::new(2, 4, 10).unwrap();
        assert!(embed(&[0.0f32; 9], &p).is_err());
        assert!(invert(&Tensor::<f32>::zeros(&[4, 4]), &p).is_err());
    }

    #[test]
    fn mean_rule_agrees_on_true_embeddings() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let p = EmbeddingParams::new(3, 7, 50).unwrap();
        let m = embed(&x, &p).unwrap();
        let mean = invert_with(&m, &p, InversionRule::Mean).unwrap();
        for (a, b) in mean.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(max_inconsistency(&m, &p).unwrap(), 0.0);
        let mut bent = m.clone();
        bent.data_mut()[3 * p.columns() + 1] += 0.25;
        assert_eq!(max_inconsistency(&bent, &p).unwrap(), 0.25);
    }

    #[test]
    fn window_embedding_and_padding() {
        let p = EmbeddingParams::reference();
        let vals: Vec<f32> = (0..3 * 1024).map(|i| (i as f32 * 0.01).sin()).collect();
        let w = window(vals, 1024);
        let img = embed_window(&w, &p, Some((64, 64))).unwrap();
        assert_eq!(img.pixels.dims(), &[3, 64, 64]);
        assert_eq!(img.pad, Padding::default());
        assert_eq!(img.channel_order, vec!["x", "y", "z"]);

        let padded = embed_window(&w, &p, Some((64, 72))).unwrap();
        assert_eq!(padded.pixels.dims(), &[3, 64, 72]);
        assert_eq!(padded.pad.right, 8);
        let back = invert_image(&padded).unwrap();
        assert_eq!(back, w.values);
        assert_eq!(back.outer(0), w.values.outer(0));

        let mut dirty = padded.clone();
        dirty.pixels.data_mut()[70] = 1.0;
        assert!(matches!(invert_image(&dirty), Err(Error::DirtyPadding { channel: 0, row: 0, col: 70, .. })));
        let (lenient, worst) = invert_image_lenient(&dirty).unwrap();
        assert_eq!(lenient, w.values);
        assert_eq!(worst, 1.0);
        assert!(embed_window(&w, &p, Some((32, 64))).is_err());
    }

    #[test]
    fn arbitrary_image_inverts_totally() {
        let p = EmbeddingParams::reference();
        let img = EmbeddedImage {
            pixels: Tensor::new(&[3, 64, 64], (0..3 * 64 * 64).map(|i| (i % 97) as f32).collect()).unwrap(),
            pad: Padding::default(),
            params: p,
            channel_order: channel_names(3),
        };
        let sig = invert_image(&img).unwrap();
        assert_eq!(sig.dims(), &[3, 1024]);
        assert!(sig.data().iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            (len, height, skip) in (2usize..200).prop_flat_map(|len| (Just(len), 1..=len))
                .prop_flat_map(|(len, h)| (Just(len), Just(h), 1..=h)),
            seed in any::<u64>(),
        ) {
            prop_assume!(EmbeddingParams::new(skip, height, len).is_ok());
            let p = EmbeddingParams::new(skip, height, len).unwrap();
            let x: Vec<f64> = (0..len).map(|i| ((i as u64 ^ seed).wrapping_mul(2654435761) % 1000) as f64 / 7.0).collect();
            let m = embed(&x, &p).unwrap();
            prop_assert_eq!(m.dims(), &[height, (len - height).div_ceil(skip).max(1)]);
            prop_assert_eq!(invert(&m, &p).unwrap(), x);
        }

        #[test]
        fn embedding_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u32>()) {
            let p = EmbeddingParams::new(7, 32, 256).unwrap();
            let x: Vec<f64> = (0..256).map(|i| ((i as f64) * 0.37 + seed as f64).sin()).collect();
            let y: Vec<f64> = (0..256).map(|i| ((i as f64) * 0.11 - seed as f64).cos()).collect();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let (ex, ey, em) = (embed(&x, &p).unwrap(), embed(&y, &p).unwrap(), embed(&mix, &p).unwrap());
            for i in 0..em.numel() {
                prop_assert_eq!(em.data()[i], a * ex.data()[i] + b * ey.data()[i]);
            }
        }
    }
}
