//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release -p idgen-core --test acceptance`.
//! Pass `-- --full-determinism` to repeat the end-to-end toy run at full
//! size in criterion 9 (doubles the runtime), and
//! `-- --extended-report <accuracy.csv>` to check the report of a
//! full-scale run on RIDI data (optional, not gating).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use idgen_core::classifiers::Variant;
use idgen_core::config::RunConfig;
use idgen_core::container::WindowSet;
use idgen_core::data::{toy_dataset, Provenance, SignalWindow, Source};
use idgen_core::denoiser::{precondition_coeffs, analytic_gaussian_denoiser, GaussianOracle};
use idgen_core::diffusion::{
    heun_sample, model_container, sample_from, weighted_denoiser_loss, SamplerConfig,
};
use idgen_core::embedding::{embed_window, invert_image, EmbeddingParams};
use idgen_core::evaluation::{
    classifier_inputs, fid_from_features, extract_features, frechet_distance, pdf_compare, silhouette, tsne,
    wasserstein1, GaussianFit, TsneConfig,
};
use idgen_core::pipeline::{eval_context, fit_classifier, run_toy, toy_data};
use idgen_core::seed::digest_hex;
use idgen_tensor::gradcheck::primitive_cases;
use idgen_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Res<T> = Result<T, Box<dyn std::error::Error>>;

struct Outcome {
    pass: bool,
    detail: String,
    /// Bytes whose digest criterion 9 compares across repeats.
    artifacts: Vec<u8>,
}

fn outcome(pass: bool, detail: String, artifacts: Vec<u8>) -> Res<Outcome> {
    Ok(Outcome { pass, detail, artifacts })
}

fn f64_bytes(v: impl IntoIterator<Item = f64>) -> Vec<u8> {
    v.into_iter().flat_map(f64::to_le_bytes).collect()
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn criterion1() -> Res<Outcome> {
    let params = EmbeddingParams::new(15, 64, 1024)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut exact = 0;
    let mut digest = Vec::new();
    for i in 0..10_000 {
        let values: Vec<f32> = (0..3 * 1024).map(|_| randn(&mut rng) as f32).collect();
        let w = SignalWindow {
            values: Tensor::new(&[3, 1024], values)?,
            label: 0,
            source: Source::Real,
            provenance: Provenance::Recording { id: format!("r{i}"), offset: 0 },
            normalized: true,
        };
        let img = embed_window(&w, &params, None)?;
        let back = invert_image(&img)?;
        let same = back.data().iter().zip(w.values.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        exact += usize::from(same);
        if i % 1000 == 0 {
            digest.extend(img.pixels.data().iter().flat_map(|v| v.to_le_bytes()));
        }
    }
    outcome(exact == 10_000, format!("{exact}/10000 windows bit-exact"), digest)
}

fn criterion2() -> Res<Outcome> {
    let sd = 0.5f64;
    let mut worst = 0.0f64;
    let mut bytes = Vec::new();
    for i in 0..100 {
        let sigma = (0.002f64.ln() + (80f64.ln() - 0.002f64.ln()) * i as f64 / 99.0).exp();
        let c = precondition_coeffs(sigma, sd)?;
        let total = sigma * sigma + sd * sd;
        let errors = [
            // unit-variance network input
            (c.c_in * c.c_in * total - 1.0).abs(),
            // skip and output weights partition the signal
            (c.c_skip + c.c_out * c.c_out / (sd * sd) - 1.0).abs(),
            // unit-variance training target
            (((1.0 - c.c_skip).powi(2) * sd * sd + c.c_skip.powi(2) * sigma * sigma) / (c.c_out * c.c_out) - 1.0).abs(),
            // noise conditioning recovers σ
            ((4.0 * c.c_noise).exp() / sigma - 1.0).abs(),
        ];
        worst = errors.iter().copied().fold(worst, f64::max);
        bytes.extend(f64_bytes([c.c_skip, c.c_out, c.c_in, c.c_noise]));
    }
    outcome(worst < 1e-12, format!("max identity error {worst:.3e} over 100 log-spaced σ"), bytes)
}

fn criterion3() -> Res<Outcome> {
    let (s, d, samples) = (0.5f64, 3 * 64 * 64, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    let mut means = Vec::new();
    for sigma in [0.05, 0.5, 5.0, 50.0] {
        let mut total = 0.0;
        for _ in 0..samples {
            let y: Vec<f64> = (0..d).map(|_| s * randn(&mut rng)).collect();
            let x: Vec<f64> = y.iter().map(|v| v + sigma * randn(&mut rng)).collect();
            let den = analytic_gaussian_denoiser(&Tensor::new(&[d], x)?, sigma, s)?;
            total += weighted_denoiser_loss(den.data(), &y, sigma, s)?;
        }
        let mean = total / samples as f64;
        let rel = (mean / d as f64 - 1.0).abs();
        worst = worst.max(rel);
        parts.push(format!("σ={sigma}: {mean:.1}"));
        means.push(mean);
    }
    outcome(
        worst < 0.02,
        format!("expected loss vs d={d}: {} (max rel err {:.3}%)", parts.join(", "), 100.0 * worst),
        f64_bytes(means),
    )
}

fn criterion4() -> Res<Outcome> {
    let labels = vec![0usize; 10_000];
    let oracle = GaussianOracle { s: 0.5 };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = heun_sample(&oracle, &labels, &[1], &SamplerConfig::default(), &mut rng)?;
    let n = x.numel() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let std = (x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let std_ok = (std / 0.5 - 1.0).abs() <= 0.04;
    let mean_ok = mean.abs() < 0.02;

    // shared starting points for every step count; reference is a large
    // independent sample of the exact target distribution
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let x0: Vec<f64> = (0..10_000).map(|_| 80.0 * randn(&mut rng)).collect();
    let reference: Vec<f64> = (0..1_000_000).map(|_| 0.5 * randn(&mut rng)).collect();
    let mut w1 = Vec::new();
    for steps in [9, 18, 36] {
        let cfg = SamplerConfig { steps, ..SamplerConfig::default() };
        let out = sample_from(&oracle, Tensor::new(&[10_000, 1], x0.clone())?, &labels, &cfg)?;
        w1.push(wasserstein1(out.data(), &reference)?);
    }
    let w1_ok = w1[0] > w1[1] && w1[1] > w1[2];
    let mut bytes = f64_bytes(x.data().iter().copied());
    bytes.extend(f64_bytes(w1.iter().copied()));
    outcome(
        std_ok && mean_ok && w1_ok,
        format!(
            "std {std:.4} ({:+.2}% vs 0.5, band ±4%: {}), mean {mean:+.4} ({}), W1 T=9/18/36 {:.4}/{:.4}/{:.4} ({})",
            100.0 * (std / 0.5 - 1.0),
            ok(std_ok),
            ok(mean_ok),
            w1[0],
            w1[1],
            w1[2],
            ok(w1_ok)
        ),
        bytes,
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

fn criterion5() -> Res<Outcome> {
    let mut worst = (0.0f64, "");
    let mut failed = Vec::new();
    let mut bytes = Vec::new();
    let cases = primitive_cases(5);
    let count = cases.len();
    for case in cases {
        let r = case.run(200, 55)?;
        if r.probes < 200 || r.max_rel_error >= 1e-4 {
            failed.push(case.name);
        }
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, case.name);
        }
        bytes.extend(r.max_rel_error.to_le_bytes());
    }
    outcome(
        failed.is_empty(),
        format!(
            "{count} primitives × 200 probes, worst rel err {:.2e} ({}){}",
            worst.0,
            worst.1,
            if failed.is_empty() { String::new() } else { format!(", failing: {failed:?}") }
        ),
        bytes,
    )
}

/// Runs the end-to-end toy pipeline and returns its serialized artifacts.
fn toy_artifacts(cfg: &RunConfig, synthetic: usize, dir: &Path) -> Res<(idgen_core::pipeline::ToyRun, Vec<u8>)> {
    let run = run_toy(cfg, synthetic, |_| {})?;
    let mut bytes = model_container(&run.diffusion.model)?.to_bytes()?;
    bytes.extend(run.diffusion.to_container()?.to_bytes()?);
    let set = WindowSet {
        windows: run.synthetic.clone(),
        vocab: cfg.vocabulary()?,
        stats: Some(run.data.stats.clone()),
        split: None,
    };
    bytes.extend(set.to_container()?.to_bytes()?);
    bytes.extend(run.image.0.to_container().to_bytes()?);
    bytes.extend(run.signal.0.to_container().to_bytes()?);
    for path in run.report.write_bundle(dir)? {
        bytes.extend(std::fs::read(path)?);
    }
    Ok((run, bytes))
}

fn criterion6(dir: &Path) -> Res<Outcome> {
    let cfg = RunConfig::desk();
    let synthetic = 100 * cfg.vocabulary()?.len();
    let (run, bytes) = toy_artifacts(&cfg, synthetic, dir)?;
    let mut pass = cfg.data.toy_per_class >= 400;
    let mut parts = Vec::new();
    for row in &run.report.rows {
        let (real, syn) = (row.real.accuracy(), row.synthetic.accuracy());
        let good = real >= 95.0 && syn >= 90.0 && row.gap().abs() <= 5.0;
        pass &= good;
        parts.push(format!("{}: real {real:.2}%, synthetic {syn:.2}%, gap {:+.2}", row.variant.name(), row.gap()));
    }
    let secs: f64 = run.timings.iter().map(|t| t.1).sum();
    parts.push(format!("FID {:.3}", run.report.fid.score));
    parts.push(format!("pipeline {secs:.0}s"));
    outcome(pass && secs <= 3600.0, parts.join("; "), bytes)
}

fn criterion7() -> Res<Outcome> {
    let uni = [
        frechet_distance(&GaussianFit::univariate(0.0, 1.0), &GaussianFit::univariate(1.0, 1.0))? - 1.0,
        frechet_distance(&GaussianFit::univariate(0.0, 1.0), &GaussianFit::univariate(0.0, 4.0))? - 1.0,
        frechet_distance(&GaussianFit::univariate(0.3, 2.0), &GaussianFit::univariate(0.3, 2.0))?,
    ];
    let uni_ok = uni.iter().all(|e| e.abs() < 1e-6);

    let cfg = RunConfig::desk();
    let data = toy_data(&cfg)?;
    let (extractor, _) = fit_classifier(&cfg, Variant::Image, &data)?;
    let ctx = eval_context(&cfg, &data.stats)?;
    // A fresh real set, normalized with the training statistics. FID's
    // finite-sample bias falls roughly as 1/N: in 256-d the self-split reads
    // 4.1 / 1.7 / 0.65 / 0.27 at 1k / 2k / 4k / 8k windows per half.
    let fresh: Vec<SignalWindow> = toy_dataset(77, 4000, cfg.embedding.length)
        .iter()
        .map(|w| data.stats.normalize(w))
        .collect();
    let (a, b): (Vec<_>, Vec<_>) = fresh.iter().cloned().enumerate().partition(|(i, _)| i % 2 == 0);
    let strip = |v: Vec<(usize, SignalWindow)>| v.into_iter().map(|(_, w)| w).collect::<Vec<_>>();
    let (a, b) = (strip(a), strip(b));
    let feats = |ws: &[SignalWindow], src| -> Res<_> {
        let (img, _) = classifier_inputs(ws, &ctx)?;
        Ok(extract_features(&extractor, &img.inputs, src)?)
    };
    let fb = feats(&b, Source::Real)?;
    let self_split = fid_from_features(&feats(&a, Source::Real)?, &fb)?.score;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise: Vec<Vec<f64>> = b.iter().map(|w| (0..w.values.numel()).map(|_| randn(&mut rng)).collect()).collect();
    let c = b[0].channels();
    let len = b[0].values.numel() / c;
    let std: Vec<f64> = (0..c)
        .map(|ch| {
            let v: Vec<f64> = b.iter().flat_map(|w| w.values.outer(ch).iter().map(|&x| f64::from(x))).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        })
        .collect();
    let mut scores = Vec::new();
    for level in [0.0, 0.1, 0.5, 1.0] {
        let noisy: Vec<SignalWindow> = b
            .iter()
            .zip(&noise)
            .map(|(w, z)| {
                let mut w = w.clone();
                for (k, v) in w.values.data_mut().iter_mut().enumerate() {
                    *v += (level * std[k / len] * z[k]) as f32;
                }
                w
            })
            .collect();
        scores.push(fid_from_features(&fb, &feats(&noisy, Source::Synthetic)?)?.score);
    }
    let mono = scores.windows(2).all(|p| p[1] > p[0]);
    let self_ok = self_split < 0.5;
    let mut bytes = f64_bytes(scores.iter().copied());
    bytes.extend(self_split.to_le_bytes());
    outcome(
        uni_ok && mono && self_ok,
        format!(
            "self-split {self_split:.4} ({}); noise 0/0.1/0.5/1σ → {:.4}/{:.4}/{:.4}/{:.4} ({}); univariate max err {:.1e} ({})",
            ok(self_ok),
            scores[0],
            scores[1],
            scores[2],
            scores[3],
            ok(mono),
            uni.iter().map(|e| e.abs()).fold(0.0, f64::max),
            ok(uni_ok)
        ),
        bytes,
    )
}

fn criterion8() -> Res<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a: Vec<f64> = (0..1000).map(|_| randn(&mut rng)).collect();
    let same = pdf_compare(&a, &a, 100)?;
    let far: Vec<f64> = a.iter().map(|v| v + 100.0).collect();
    let disjoint = pdf_compare(&a, &far, 100)?;
    let b: Vec<f64> = (0..1000).map(|_| randn(&mut rng) + 0.3).collect();
    let mid = pdf_compare(&a, &b, 100)?;
    let js_ok = same.js == 0.0
        && disjoint.js == std::f64::consts::LN_2
        && (0.0..=std::f64::consts::LN_2).contains(&mid.js);

    let g1: Vec<f64> = (0..100_000).map(|_| randn(&mut rng)).collect();
    let g2: Vec<f64> = (0..100_000).map(|_| randn(&mut rng) + 0.5).collect();
    let w1 = wasserstein1(&g1, &g2)?;
    let w1_ok = (w1 - 0.5).abs() <= 0.02;

    let (n, d) = (200, 10);
    let mut x: Vec<f64> = (0..n * d).map(|_| randn(&mut rng)).collect();
    for v in &mut x[..n / 2 * d] {
        *v += 10.0;
    }
    let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
    let cfg = TsneConfig { seed: 8, ..TsneConfig::default() };
    let first = tsne(&x, n, d, &cfg)?;
    let again = tsne(&x, n, d, &cfg)?;
    let pts: Vec<Vec<f64>> = first.coords.iter().map(|c| c.to_vec()).collect();
    let sil = silhouette(&pts, &labels)?;
    let tsne_ok = sil > 0.5 && first == again;
    let mut bytes = f64_bytes([same.js, disjoint.js, mid.js, w1]);
    bytes.extend(f64_bytes(first.coords.iter().flatten().copied()));
    outcome(
        js_ok && w1_ok && tsne_ok,
        format!(
            "JS identical/disjoint/overlap {}/{:.6}/{:.4} ({}); W1 shift 0.5 → {w1:.4} ({}); t-SNE silhouette {sil:.3}, repeat identical {} ({})",
            same.js,
            disjoint.js,
            mid.js,
            ok(js_ok),
            ok(w1_ok),
            first == again,
            ok(tsne_ok)
        ),
        bytes,
    )
}

fn criterion9(first: &[(usize, Vec<u8>)], full: Option<&[u8]>, dir: &Path) -> Res<Outcome> {
    let mut mismatched = Vec::new();
    for (k, bytes) in first {
        let again = match k {
            1 => criterion1()?,
            2 => criterion2()?,
            3 => criterion3()?,
            4 => criterion4()?,
            5 => criterion5()?,
            7 => criterion7()?,
            8 => criterion8()?,
            _ => continue,
        };
        if digest_hex(&again.artifacts) != digest_hex(bytes) {
            mismatched.push(k.to_string());
        }
    }
    // the toy pipeline repeated at reduced size, or at full size on request
    let (scope, same) = match full {
        Some(bytes) => {
            let (_, again) = toy_artifacts(&RunConfig::desk(), 400, &dir.join("repeat"))?;
            ("full", again == bytes)
        }
        None => {
            let mut cfg = RunConfig::desk();
            cfg.data.toy_per_class = 60;
            cfg.diffusion.epochs = 3;
            cfg.evaluation.tsne_points = 40;
            cfg.evaluation.perplexity = 10.0;
            let (_, a) = toy_artifacts(&cfg, 16, &dir.join("small-a"))?;
            let (_, b) = toy_artifacts(&cfg, 16, &dir.join("small-b"))?;
            ("reduced", a == b)
        }
    };
    if !same {
        mismatched.push(format!("6 ({scope})"));
    }
    outcome(
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("criteria 1-5, 7, 8 and a {scope} toy pipeline repeat bit-identical")
        } else {
            format!("differences in criteria {}", mismatched.join(", "))
        },
        Vec::new(),
    )
}

/// Checks an accuracy table produced by a full-scale run of the
/// command-line tool against the published figures.
fn criterion10(accuracy_csv: Option<&Path>) -> Res<Option<Outcome>> {
    let Some(path) = accuracy_csv else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(path)?;
    let mut pass = true;
    let mut parts = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let [model, real, syn, gap] = f[..] else {
            return Err(format!("malformed row `{line}` in {}", path.display()).into());
        };
        let (real, syn, gap): (f64, f64, f64) = (real.parse()?, syn.parse()?, gap.parse()?);
        let published = match model {
            "image" => 97.90,
            "signal" => 98.13,
            other => return Err(format!("unknown model `{other}`").into()),
        };
        pass &= (real - published).abs() <= 2.0 && gap.abs() <= 2.0;
        parts.push(format!("{model}: real {real:.2}% (published {published:.2}%), synthetic {syn:.2}%, gap {gap:+.2}"));
    }
    outcome(pass, parts.join("; "), Vec::new()).map(Some)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let full = args.iter().any(|a| a == "--full-determinism");
    let extended = args.iter().position(|a| a == "--extended-report").and_then(|i| args.get(i + 1)).map(PathBuf::from);
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&dir);

    let mut all_pass = true;
    let mut artifacts = Vec::new();
    let mut full_bytes = None;
    let mut report = |k: usize, start: Instant, r: Res<Outcome>, limit: Option<f64>| -> Option<Vec<u8>> {
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail, bytes) = match r {
            Ok(o) => (o.pass, o.detail, Some(o.artifacts)),
            Err(e) => (false, format!("error: {e}"), None),
        };
        let in_time = limit.is_none_or(|l| secs < l);
        let pass = pass && in_time;
        all_pass &= pass;
        let limit = limit.map_or(String::new(), |l| format!(", limit {l:.0}s"));
        println!("criterion {k}: {} ({secs:.1}s{limit}) {detail}", if pass { "PASS" } else { "FAIL" });
        bytes
    };

    let steps: [(usize, fn() -> Res<Outcome>, Option<f64>); 6] = [
        (1, criterion1, Some(30.0)),
        (2, criterion2, Some(1.0)),
        (3, criterion3, Some(120.0)),
        (4, criterion4, Some(120.0)),
        (5, criterion5, Some(300.0)),
        (7, criterion7, Some(300.0)),
    ];
    for (k, f, limit) in steps.iter().take(5) {
        let t = Instant::now();
        if let Some(b) = report(*k, t, f(), *limit) {
            artifacts.push((*k, b));
        }
    }
    let t = Instant::now();
    if let Some(b) = report(6, t, criterion6(&dir.join("toy")), Some(3600.0)) {
        if full {
            full_bytes = Some(b);
        }
    }
    let (k, f, limit) = steps[5];
    let t = Instant::now();
    if let Some(b) = report(k, t, f(), limit) {
        artifacts.push((k, b));
    }
    let t = Instant::now();
    if let Some(b) = report(8, t, criterion8(), Some(300.0)) {
        artifacts.push((8, b));
    }
    let t = Instant::now();
    report(9, t, criterion9(&artifacts, full_bytes.as_deref(), &dir), None);

    match criterion10(extended.as_deref()) {
        Ok(None) => println!("criterion 10: SKIP (optional; pass `-- --extended-report <accuracy.csv>` from a full-scale RIDI run)"),
        Ok(Some(o)) => println!("criterion 10: {} (optional) {}", if o.pass { "PASS" } else { "FAIL" }, o.detail),
        Err(e) => println!("criterion 10: FAIL (optional) error: {e}"),
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
