//! Recording ingestion, windowing, normalization, splits and the toy corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use idgen_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const DEFAULT_LABELS: [&str; 4] = ["bag", "body", "handheld", "leg"];

/// Bijective placement-name ↔ id table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    names: Vec<String>,
}

impl Default for LabelVocabulary {
    fn default() -> Self {
        LabelVocabulary {
            names: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LabelVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<&String> = names.iter().collect();
        if names.is_empty() || unique.len() != names.len() {
            return Err(Error::Data(format!("label names must be unique and non-empty: {names:?}")));
        }
        Ok(LabelVocabulary { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownLabel {
                label: name.to_string(),
                valid: self.names.clone(),
            })
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Real,
    Synthetic,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Real => "real",
            Source::Synthetic => "synthetic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Recording { id: String, offset: usize },
    Generated { seed: u64 },
}

impl Provenance {
    pub fn group_key(&self) -> String {
        match self {
            Provenance::Recording { id, .. } => id.clone(),
            Provenance::Generated { seed } => format!("gen:{seed}"),
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Recording { id, offset } => write!(f, "rec:{id}@{offset}"),
            Provenance::Generated { seed } => write!(f, "gen:{seed}"),
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("malformed provenance `{s}`"));
        if let Some(rest) = s.strip_prefix("gen:") {
            return Ok(Provenance::Generated {
                seed: rest.parse().map_err(|_| bad())?,
            });
        }
        let rest = s.strip_prefix("rec:").ok_or_else(bad)?;
        let (id, off) = rest.rsplit_once('@').ok_or_else(bad)?;
        Ok(Provenance::Recording {
            id: id.to_string(),
            offset: off.parse().map_err(|_| bad())?,
        })
    }
}

/// One fixed-length multi-channel segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalWindow {
    /// `[channels, length]`.
    pub values: Tensor<f32>,
    pub label: usize,
    pub source: Source,
    pub provenance: Provenance,
    pub normalized: bool,
}

impl SignalWindow {
    pub fn len(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[0]
    }
}

/// A parsed recording: timestamps plus tri-axial specific force.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub sample_rate: f64,
    pub timestamps: Vec<f64>,
    pub samples: Vec<[f32; 3]>,
    pub label: usize,
    pub subject: String,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Rate estimated from the first and last timestamp.
    pub fn measured_rate(&self) -> Option<f64> {
        let n = self.timestamps.len();
        if n < 2 {
            return None;
        }
        Some((n - 1) as f64 / (self.timestamps[n - 1] - self.timestamps[0]))
    }

    /// Linear-interpolation resampling onto a uniform grid at `rate` Hz.
    pub fn resample(&self, rate: f64) -> Recording {
        let t0 = self.timestamps[0];
        let t1 = *self.timestamps.last().expect("non-empty");
        let count = ((t1 - t0) * rate).floor() as usize + 1;
        let mut timestamps = Vec::with_capacity(count);
        let mut samples = Vec::with_capacity(count);
        let mut k = 0;
        for i in 0..count {
            let t = t0 + i as f64 / rate;
            while k + 2 < self.timestamps.len() && self.timestamps[k + 1] < t {
                k += 1;
            }
            let (ta, tb) = (self.timestamps[k], self.timestamps[(k + 1).min(self.timestamps.len() - 1)]);
            let w = if tb > ta { ((t - ta) / (tb - ta)).clamp(0.0, 1.0) } else { 0.0 };
            let (a, b) = (self.samples[k], self.samples[(k + 1).min(self.samples.len() - 1)]);
            samples.push([0, 1, 2].map(|c| (f64::from(a[c]) * (1.0 - w) + f64::from(b[c]) * w) as f32));
            timestamps.push(t);
        }
        Recording {
            sample_rate: rate,
            timestamps,
            samples,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub sample_rate: f64,
    /// Resample off-rate recordings instead of rejecting them.
    pub resample: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            sample_rate: 200.0,
            resample: false,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// One manifest row: `file,label,subject`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: PathBuf,
    pub label: String,
    pub subject: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "file,label,subject" => {}
        _ => return Err(parse_err(path, 1, "expected header `file,label,subject`")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [file, label, subject] = fields.as_slice() else {
            return Err(parse_err(path, i + 1, format!("expected 3 fields, got {}", fields.len())));
        };
        out.push(ManifestEntry {
            file: PathBuf::from(file),
            label: label.to_string(),
            subject: subject.to_string(),
        });
    }
    Ok(out)
}

/// Parses a `t,ax,ay,az` CSV with header.
pub fn read_recording_csv(path: &Path) -> Result<(Vec<f64>, Vec<[f32; 3]>)> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "t,ax,ay,az" => {}
        _ => return Err(parse_err(path, 1, "expected header `t,ax,ay,az`")),
    }
    let mut ts = Vec::new();
    let mut samples = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let vals: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(path, lineno, format!("malformed row `{line}`: {e}")))?;
        let [t, ax, ay, az] = vals.as_slice() else {
            return Err(parse_err(path, lineno, format!("expected 4 fields, got {}", vals.len())));
        };
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, lineno, "non-finite value"));
        }
        if let Some(&prev) = ts.last() {
            if *t <= prev {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("timestamp {t} does not increase (previous {prev})"),
                ));
            }
        }
        ts.push(*t);
        samples.push([*ax as f32, *ay as f32, *az as f32]);
    }
    Ok((ts, samples))
}

/// Loads every recording named in the manifest (paths relative to `root`).
pub fn load_recordings(
    root: &Path,
    manifest: &Path,
    vocab: &LabelVocabulary,
    opts: LoadOptions,
) -> Result<Vec<Recording>> {
    let entries = read_manifest(manifest)?;
    let mut out = Vec::with_capacity(entries.len());
    for entry in entries {
        let label = vocab.id(&entry.label)?;
        let path = root.join(&entry.file);
        let (timestamps, samples) = read_recording_csv(&path)?;
        let rec = Recording {
            id: entry.file.to_string_lossy().into_owned(),
            sample_rate: opts.sample_rate,
            timestamps,
            samples,
            label,
            subject: entry.subject,
        };
        let rec = match rec.measured_rate() {
            Some(rate) if (rate - opts.sample_rate).abs() > 0.01 * opts.sample_rate => {
                if opts.resample {
                    rec.resample(opts.sample_rate)
                } else {
                    return Err(Error::Data(format!(
                        "{}: measured rate {rate:.2} Hz is not within 1% of {} Hz",
                        path.display(),
                        opts.sample_rate
                    )));
                }
            }
            _ => rec,
        };
        out.push(rec);
    }
    Ok(out)
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Which subset the statistics were computed over (e.g. `train`).
    pub computed_over: String,
    pub count: usize,
}

impl NormalizationStats {
    /// Two-pass mean/std (population) over every sample of every window.
    pub fn compute<'a>(windows: impl IntoIterator<Item = &'a SignalWindow>, tag: &str) -> Result<Self> {
        let windows: Vec<&SignalWindow> = windows.into_iter().collect();
        let Some(first) = windows.first() else {
            return Err(Error::Data("no windows to compute statistics over".into()));
        };
        let c = first.channels();
        let mut sum = vec![0.0f64; c];
        let mut count = 0usize;
        for w in &windows {
            for (ch, s) in sum.iter_mut().enumerate() {
                *s += w.values.outer(ch).iter().map(|&v| f64::from(v)).sum::<f64>();
            }
            count += w.len();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0f64; c];
        for w in &windows {
            for (ch, s) in sq.iter_mut().enumerate() {
                *s += w.values.outer(ch).iter().map(|&v| (f64::from(v) - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        if let Some(ch) = std.iter().position(|&s| !(s > 1e-12)) {
            return Err(Error::Data(format!(
                "channel {ch} has zero variance; refusing to normalize a constant signal"
            )));
        }
        Ok(NormalizationStats {
            mean,
            std,
            computed_over: tag.to_string(),
            count,
        })
    }

    pub fn normalize(&self, w: &SignalWindow) -> SignalWindow {
        self.map(w, true, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, w: &SignalWindow) -> SignalWindow {
        self.map(w, false, |v, m, s| v * s + m)
    }

    fn map(&self, w: &SignalWindow, normalized: bool, f: impl Fn(f64, f64, f64) -> f64) -> SignalWindow {
        let mut out = w.clone();
        let len = w.len();
        for (i, v) in out.values.data_mut().iter_mut().enumerate() {
            let ch = i / len;
            *v = f(f64::from(*v), self.mean[ch], self.std[ch]) as f32;
        }
        out.normalized = normalized;
        out
    }

    /// `channel,mean,std,split,count` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,mean,std,split,count\n");
        for ch in 0..self.mean.len() {
            let name = crate::embedding::channel_names(self.mean.len())[ch].clone();
            s.push_str(&format!(
                "{name},{:?},{:?},{},{}\n",
                self.mean[ch], self.std[ch], self.computed_over, self.count
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut mean = Vec::new();
        let mut std = Vec::new();
        let mut tag = String::new();
        let mut count = 0;
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Data(format!("stats line {}: `{line}`", i + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            mean.push(f[1].parse().map_err(|_| bad())?);
            std.push(f[2].parse().map_err(|_| bad())?);
            tag = f[3].to_string();
            count = f[4].parse().map_err(|_| bad())?;
        }
        if mean.is_empty() {
            return Err(Error::Data("empty stats table".into()));
        }
        Ok(NormalizationStats {
            mean,
            std,
            computed_over: tag,
            count,
        })
    }
}

/// Which windows contribute to the normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsScope {
    TrainSplit,
    AllWindows,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|&f| !(f > 0.0)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("split fractions must be positive and sum to 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub window: usize,
    pub overlap: f64,
    pub drop: usize,
    pub split: SplitFractions,
    pub stats_scope: StatsScope,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            window: 1024,
            overlap: 0.5,
            drop: 1500,
            split: SplitFractions::default(),
            stats_scope: StatsScope::TrainSplit,
            seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn hop(&self) -> usize {
        ((self.window as f64) * (1.0 - self.overlap)).round().max(1.0) as usize
    }
}

/// Index lists into a window collection.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub windows: Vec<SignalWindow>,
    pub split: Split,
    pub stats: NormalizationStats,
    /// Recording ids skipped because they were too short.
    pub skipped: Vec<String>,
}

impl Dataset {
    pub fn subset(&self, idx: &[usize]) -> Vec<SignalWindow> {
        idx.iter().map(|&i| self.windows[i].clone()).collect()
    }
}

/// Number of windows a recording of `len` samples yields.
pub fn window_count(len: usize, cfg: &PreprocessConfig) -> usize {
    if len < cfg.drop + cfg.window {
        return 0;
    }
    (len - cfg.drop - cfg.window) / cfg.hop() + 1
}

/// Drops leading samples and slides a fixed window over each recording.
/// Returns raw windows and the ids of recordings that were too short.
pub fn window_recordings(recordings: &[Recording], cfg: &PreprocessConfig) -> (Vec<SignalWindow>, Vec<String>) {
    let mut windows = Vec::new();
    let mut skipped = Vec::new();
    let mut order: Vec<&Recording> = recordings.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    for rec in order {
        let count = window_count(rec.len(), cfg);
        if count == 0 {
            skipped.push(rec.id.clone());
            continue;
        }
        for k in 0..count {
            let offset = k * cfg.hop();
            let start = cfg.drop + offset;
            let mut values = vec![0.0f32; 3 * cfg.window];
            for (i, s) in rec.samples[start..start + cfg.window].iter().enumerate() {
                for ch in 0..3 {
                    values[ch * cfg.window + i] = s[ch];
                }
            }
            windows.push(SignalWindow {
                values: Tensor::new(&[3, cfg.window], values).expect("window dims"),
                label: rec.label,
                source: Source::Real,
                provenance: Provenance::Recording {
                    id: rec.id.clone(),
                    offset,
                },
                normalized: false,
            });
        }
    }
    (windows, skipped)
}

/// Windowing, split, and per-channel normalization.
pub fn preprocess(recordings: &[Recording], cfg: &PreprocessConfig) -> Result<Dataset> {
    let (raw, skipped) = window_recordings(recordings, cfg);
    if raw.is_empty() {
        return Err(Error::Data(format!(
            "no recording is longer than drop + window = {} samples",
            cfg.drop + cfg.window
        )));
    }
    assemble_dataset(raw, skipped, cfg)
}

/// Splits already-windowed raw data, fits normalization and applies it.
pub fn assemble_dataset(raw: Vec<SignalWindow>, skipped: Vec<String>, cfg: &PreprocessConfig) -> Result<Dataset> {
    let split = split_dataset(&raw, cfg.split, cfg.seed)?;
    let stats = match cfg.stats_scope {
        StatsScope::TrainSplit => NormalizationStats::compute(split.train.iter().map(|&i| &raw[i]), "train")?,
        StatsScope::AllWindows => NormalizationStats::compute(&raw, "all")?,
    };
    let windows = raw.iter().map(|w| stats.normalize(w)).collect();
    Ok(Dataset {
        windows,
        split,
        stats,
        skipped,
    })
}

/// Label-stratified split that never separates windows of one recording.
///
/// Within each label, recordings are shuffled (seeded) and assigned to test,
/// then validation, until each reaches its target window count; the rest go
/// to training.
pub fn split_dataset(windows: &[SignalWindow], fractions: SplitFractions, seed: u64) -> Result<Split> {
    fractions.validate()?;
    // label -> recording -> window indices, all in deterministic order
    let mut by_label: BTreeMap<usize, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        by_label
            .entry(w.label)
            .or_default()
            .entry(w.provenance.group_key())
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split::default();
    for (label, groups) in by_label {
        for (key, idx) in &groups {
            if let Some(&other) = idx.iter().find(|&&i| windows[i].label != label) {
                return Err(Error::Data(format!("recording {key} mixes labels at window {other}")));
            }
        }
        let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
        if groups.len() < 3 {
            return Err(Error::Data(format!(
                "label {label} has {} recording group(s); at least 3 are needed to stratify",
                groups.len()
            )));
        }
        groups.shuffle(&mut rng);
        let total: usize = groups.iter().map(Vec::len).sum();
        let want_test = ((total as f64) * fractions.test).round().max(1.0) as usize;
        let want_val = ((total as f64) * fractions.val).round().max(1.0) as usize;
        let mut it = groups.into_iter();
        let mut left = it.len();
        // keep at least one group for each later subset
        for (dst, want, reserve) in [(&mut split.test, want_test, 2), (&mut split.val, want_val, 1)] {
            let mut got = 0;
            while got < want && left > reserve {
                let g = it.next().expect("groups remain");
                got += g.len();
                dst.extend(g);
                left -= 1;
            }
        }
        for g in it {
            split.train.extend(g);
        }
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Frequency band (inclusive, in cycles per window) of toy class `k`.
pub fn toy_band(class: usize, length: usize) -> (f64, f64) {
    const BANDS: [(f64, f64); 4] = [(2.0, 4.0), (6.0, 9.0), (12.0, 16.0), (20.0, 26.0)];
    let scale = length as f64 / 256.0;
    let (lo, hi) = BANDS[class % 4];
    (lo * scale, hi * scale)
}

/// Deterministic four-class stand-in corpus.
///
/// Class `k` mixes two sinusoids whose frequencies lie in band `k` (disjoint
/// across classes), with per-channel phase offsets and amplitude jitter plus
/// Gaussian noise at 0.1 of the main amplitude. Every window is its own
/// recording.
pub fn toy_dataset(seed: u64, per_class: usize, length: usize) -> Vec<SignalWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(4 * per_class);
    for class in 0..4 {
        let (lo, hi) = toy_band(class, length);
        for i in 0..per_class {
            let f1 = rng.random_range(lo..=hi);
            let f2 = rng.random_range(lo..=hi);
            let a1 = rng.random_range(0.8..1.2);
            let a2 = rng.random_range(0.3..0.6);
            let mut values = Vec::with_capacity(3 * length);
            for _ch in 0..3 {
                let gain: f64 = rng.random_range(0.7..1.3);
                let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
                for t in 0..length {
                    let x = t as f64 / length as f64;
                    let clean = a1 * (2.0 * PI * f1 * x + p1).sin() + a2 * (2.0 * PI * f2 * x + p2).sin();
                    let noise: f64 = rng.sample(StandardNormal);
                    values.push((gain * clean + 0.1 * a1 * noise) as f32);
                }
            }
            out.push(SignalWindow {
                values: Tensor::new(&[3, length], values).expect("toy dims"),
                label: class,
                source: Source::Real,
                provenance: Provenance::Recording {
                    id: format!("toy-{class}-{i:05}"),
                    offset: 0,
                },
                normalized: false,
            });
        }
    }
    out
}
