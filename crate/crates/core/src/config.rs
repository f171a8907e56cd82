//! Sectioned `key = value` run configuration.
//!
//! Every key has a default; a file only lists what it overrides. Unknown
//! sections and keys are errors, so a typo never silently falls back.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::classifiers::{TrainSpec, Variant};
use crate::data::{LabelVocabulary, LoadOptions, PreprocessConfig, SplitFractions, StatsScope};
use crate::denoiser::BackboneConfig;
use crate::diffusion::{NoiseDistribution, SamplerConfig, Solver, TrainConfig};
use crate::embedding::{padding_for, EmbeddingParams};
use crate::error::{Error, Result};
use crate::evaluation::TsneConfig;
use crate::seed::{derive_seed, SeedStreams};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSection {
    pub skip: usize,
    pub height: usize,
    pub length: usize,
    /// Pad images to this `(height, width)`; `None` keeps the natural size.
    pub target: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSection {
    pub noise: NoiseDistribution,
    pub steps: usize,
    pub rho: f64,
    pub solver: Solver,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub checkpoint_every: usize,
    pub max_retries: usize,
    /// Items integrated together during generation.
    pub generate_batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSection {
    pub model_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub attention_resolutions: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub data_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub labels: Vec<String>,
    pub sample_rate: f64,
    pub resample: bool,
    pub window: usize,
    pub overlap: f64,
    pub drop: usize,
    pub split: SplitFractions,
    pub stats_scope: StatsScope,
    /// Windows per class when the toy generator stands in for recordings.
    pub toy_per_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSection {
    pub bins: usize,
    pub tsne: bool,
    pub perplexity: f64,
    pub tsne_iterations: usize,
    pub tsne_learning_rate: f64,
    /// Points per source passed to t-SNE.
    pub tsne_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub embedding: EmbeddingSection,
    pub diffusion: DiffusionSection,
    pub backbone: BackboneSection,
    pub classifier: TrainSpec,
    pub data: DataSection,
    pub evaluation: EvaluationSection,
}

impl Default for RunConfig {
    /// Full-scale settings for 200 Hz recordings.
    fn default() -> Self {
        let noise = NoiseDistribution::default();
        let train = TrainConfig::default();
        let pre = PreprocessConfig::default();
        RunConfig {
            seed: 0,
            embedding: EmbeddingSection {
                skip: 15,
                height: 64,
                length: 1024,
                target: None,
            },
            diffusion: DiffusionSection {
                noise,
                steps: 18,
                rho: 7.0,
                solver: Solver::Heun,
                lr: train.lr,
                batch_size: train.batch_size,
                epochs: train.epochs,
                weight_decay: train.weight_decay,
                checkpoint_every: 50,
                max_retries: train.max_retries,
                generate_batch: 16,
            },
            backbone: BackboneSection {
                model_channels: 64,
                channel_multipliers: vec![1, 2, 2, 2],
                attention_resolutions: BTreeSet::from([16]),
            },
            classifier: TrainSpec::default(),
            data: DataSection {
                data_root: None,
                manifest: None,
                labels: LabelVocabulary::default().names().to_vec(),
                sample_rate: LoadOptions::default().sample_rate,
                resample: false,
                window: pre.window,
                overlap: pre.overlap,
                drop: pre.drop,
                split: pre.split,
                stats_scope: pre.stats_scope,
                toy_per_class: 400,
            },
            evaluation: EvaluationSection {
                bins: 100,
                tsne: true,
                perplexity: 30.0,
                tsne_iterations: 1000,
                tsne_learning_rate: 200.0,
                tsne_points: 500,
            },
        }
    }
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    let v = v.trim();
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| s.trim().parse::<T>().map_err(|_| format!("bad list item `{s}`"))).collect()
}

fn join<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
    let s: Vec<String> = v.into_iter().map(|x| x.to_string()).collect();
    if s.is_empty() {
        "none".into()
    } else {
        s.join(",")
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.trim().parse::<T>().map_err(|_| format!("cannot parse `{v}`"))
}

fn path_opt(v: &str) -> Option<PathBuf> {
    let v = v.trim();
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Scaled-down settings for single-core runs on short toy windows.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.embedding = EmbeddingSection {
            skip: 7,
            height: 32,
            length: 256,
            target: None,
        };
        c.data.window = 256;
        c.data.overlap = 0.5;
        c.diffusion.lr = 2e-3;
        c.diffusion.batch_size = 32;
        c.diffusion.epochs = 60;
        c.diffusion.weight_decay = 0.0;
        c.diffusion.checkpoint_every = 10;
        c.diffusion.generate_batch = 32;
        c.backbone = BackboneSection {
            model_channels: 16,
            channel_multipliers: vec![1, 2, 2],
            attention_resolutions: BTreeSet::new(),
        };
        c.evaluation.tsne_points = 200;
        c
    }

    pub fn from_ini_str(text: &str) -> Result<Self> {
        Self::apply(RunConfig::default(), text)
    }

    /// Overrides `base` with the keys present in `text`.
    pub fn apply(base: RunConfig, text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut c = base;
        let mut seen = BTreeSet::new();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            for (key, value) in props.iter() {
                if !seen.insert((section.to_string(), key.to_string())) {
                    return Err(Error::Config(format!("duplicate key `{key}` in [{section}]")));
                }
                c.set(section, key, value)
                    .map_err(|msg| Error::Config(format!("[{section}] {key}: {msg}")))?;
            }
        }
        c.validate().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let d = &mut self.diffusion;
        match (section, key) {
            ("run", "seed") => self.seed = parse(v)?,
            ("embedding", "skip") => self.embedding.skip = parse(v)?,
            ("embedding", "height") => self.embedding.height = parse(v)?,
            ("embedding", "length") => self.embedding.length = parse(v)?,
            ("embedding", "target") => {
                self.embedding.target = match v.trim() {
                    "none" | "" => None,
                    t => {
                        let (h, w) = t.split_once('x').ok_or("expected HxW or none")?;
                        Some((parse(h)?, parse(w)?))
                    }
                }
            }
            ("diffusion", "sigma_min") => d.noise.sigma_min = parse(v)?,
            ("diffusion", "sigma_max") => d.noise.sigma_max = parse(v)?,
            ("diffusion", "sigma_data") => d.noise.sigma_data = parse(v)?,
            ("diffusion", "p_mean") => d.noise.p_mean = parse(v)?,
            ("diffusion", "p_std") => d.noise.p_std = parse(v)?,
            ("diffusion", "steps") => d.steps = parse(v)?,
            ("diffusion", "rho") => d.rho = parse(v)?,
            ("diffusion", "solver") => {
                d.solver = match v.trim() {
                    "heun" => Solver::Heun,
                    "euler" => Solver::Euler,
                    _ => return Err("expected heun or euler".into()),
                }
            }
            ("diffusion", "lr") => d.lr = parse(v)?,
            ("diffusion", "batch_size") => d.batch_size = parse(v)?,
            ("diffusion", "epochs") => d.epochs = parse(v)?,
            ("diffusion", "weight_decay") => d.weight_decay = parse(v)?,
            ("diffusion", "checkpoint_every") => d.checkpoint_every = parse(v)?,
            ("diffusion", "max_retries") => d.max_retries = parse(v)?,
            ("diffusion", "generate_batch") => d.generate_batch = parse(v)?,
            ("backbone", "model_channels") => self.backbone.model_channels = parse(v)?,
            ("backbone", "channel_multipliers") => self.backbone.channel_multipliers = list(v)?,
            ("backbone", "attention_resolutions") => {
                self.backbone.attention_resolutions = list(v)?.into_iter().collect()
            }
            ("classifier", "lr") => self.classifier.lr = parse(v)?,
            ("classifier", "weight_decay") => self.classifier.weight_decay = parse(v)?,
            ("classifier", "patience") => self.classifier.patience = parse(v)?,
            ("classifier", "max_epochs") => self.classifier.max_epochs = parse(v)?,
            ("classifier", "batch_size") => self.classifier.batch_size = parse(v)?,
            ("data", "data_root") => self.data.data_root = path_opt(v),
            ("data", "manifest") => self.data.manifest = path_opt(v),
            ("data", "labels") => self.data.labels = list(v)?,
            ("data", "sample_rate") => self.data.sample_rate = parse(v)?,
            ("data", "resample") => self.data.resample = parse(v)?,
            ("data", "window") => self.data.window = parse(v)?,
            ("data", "overlap") => self.data.overlap = parse(v)?,
            ("data", "drop") => self.data.drop = parse(v)?,
            ("data", "split") => {
                let f: Vec<f64> = list(v)?;
                let [train, val, test] = f[..] else {
                    return Err("expected three fractions train,val,test".into());
                };
                self.data.split = SplitFractions { train, val, test };
            }
            ("data", "stats_scope") => {
                self.data.stats_scope = match v.trim() {
                    "train" => StatsScope::TrainSplit,
                    "all" => StatsScope::AllWindows,
                    _ => return Err("expected train or all".into()),
                }
            }
            ("data", "toy_per_class") => self.data.toy_per_class = parse(v)?,
            ("evaluation", "bins") => self.evaluation.bins = parse(v)?,
            ("evaluation", "tsne") => self.evaluation.tsne = parse(v)?,
            ("evaluation", "perplexity") => self.evaluation.perplexity = parse(v)?,
            ("evaluation", "tsne_iterations") => self.evaluation.tsne_iterations = parse(v)?,
            ("evaluation", "tsne_learning_rate") => self.evaluation.tsne_learning_rate = parse(v)?,
            ("evaluation", "tsne_points") => self.evaluation.tsne_points = parse(v)?,
            ("" | "run" | "embedding" | "diffusion" | "backbone" | "classifier" | "data" | "evaluation", _) => {
                return Err("unknown key".into())
            }
            _ => return Err("unknown section".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.embedding_params()?;
        padding_for(&p, self.embedding.target)?;
        if self.data.window != self.embedding.length {
            return Err(Error::Config(format!(
                "data.window {} differs from embedding.length {}",
                self.data.window, self.embedding.length
            )));
        }
        self.sampler().validate()?;
        self.data.split.validate()?;
        self.vocabulary()?;
        self.backbone(3, self.data.labels.len())?.validate()?;
        let d = &self.diffusion;
        if d.batch_size == 0 || d.generate_batch == 0 || self.classifier.batch_size < 2 {
            return Err(Error::Config("batch sizes must be positive (classifier ≥ 2)".into()));
        }
        if !(d.lr > 0.0 && self.classifier.lr > 0.0 && d.noise.sigma_data > 0.0) {
            return Err(Error::Config("learning rates and sigma_data must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.overlap) || self.evaluation.bins == 0 {
            return Err(Error::Config("overlap must lie in [0, 1) and bins be positive".into()));
        }
        Ok(())
    }

    /// Effective configuration; parses back to an equal value.
    pub fn to_ini(&self) -> String {
        let (e, d, b, k, da, ev) = (
            &self.embedding,
            &self.diffusion,
            &self.backbone,
            &self.classifier,
            &self.data,
            &self.evaluation,
        );
        let mut s = String::new();
        let _ = writeln!(s, "[run]\nseed = {}\n", self.seed);
        let target = e.target.map_or_else(|| "none".into(), |(h, w)| format!("{h}x{w}"));
        let _ = writeln!(
            s,
            "[embedding]\nskip = {}\nheight = {}\nlength = {}\ntarget = {target}\n",
            e.skip, e.height, e.length
        );
        let solver = match d.solver {
            Solver::Heun => "heun",
            Solver::Euler => "euler",
        };
        let _ = writeln!(
            s,
            "[diffusion]\nsigma_min = {:?}\nsigma_max = {:?}\nsigma_data = {:?}\np_mean = {:?}\np_std = {:?}\n\
             steps = {}\nrho = {:?}\nsolver = {solver}\nlr = {:?}\nbatch_size = {}\nepochs = {}\n\
             weight_decay = {:?}\ncheckpoint_every = {}\nmax_retries = {}\ngenerate_batch = {}\n",
            d.noise.sigma_min,
            d.noise.sigma_max,
            d.noise.sigma_data,
            d.noise.p_mean,
            d.noise.p_std,
            d.steps,
            d.rho,
            d.lr,
            d.batch_size,
            d.epochs,
            d.weight_decay,
            d.checkpoint_every,
            d.max_retries,
            d.generate_batch
        );
        let _ = writeln!(
            s,
            "[backbone]\nmodel_channels = {}\nchannel_multipliers = {}\nattention_resolutions = {}\n",
            b.model_channels,
            join(&b.channel_multipliers),
            join(&b.attention_resolutions)
        );
        let _ = writeln!(
            s,
            "[classifier]\nlr = {:?}\nweight_decay = {:?}\npatience = {}\nmax_epochs = {}\nbatch_size = {}\n",
            k.lr, k.weight_decay, k.patience, k.max_epochs, k.batch_size
        );
        let scope = match da.stats_scope {
            StatsScope::TrainSplit => "train",
            StatsScope::AllWindows => "all",
        };
        let _ = writeln!(
            s,
            "[data]\ndata_root = {}\nmanifest = {}\nlabels = {}\nsample_rate = {:?}\nresample = {}\n\
             window = {}\noverlap = {:?}\ndrop = {}\nsplit = {:?},{:?},{:?}\nstats_scope = {scope}\ntoy_per_class = {}\n",
            show_path(&da.data_root),
            show_path(&da.manifest),
            join(&da.labels),
            da.sample_rate,
            da.resample,
            da.window,
            da.overlap,
            da.drop,
            da.split.train,
            da.split.val,
            da.split.test,
            da.toy_per_class
        );
        let _ = write!(
            s,
            "[evaluation]\nbins = {}\ntsne = {}\nperplexity = {:?}\ntsne_iterations = {}\n\
             tsne_learning_rate = {:?}\ntsne_points = {}\n",
            ev.bins, ev.tsne, ev.perplexity, ev.tsne_iterations, ev.tsne_learning_rate, ev.tsne_points
        );
        s
    }

    pub fn seeds(&self) -> SeedStreams {
        SeedStreams::new(self.seed)
    }

    pub fn embedding_params(&self) -> Result<EmbeddingParams> {
        EmbeddingParams::new(self.embedding.skip, self.embedding.height, self.embedding.length)
    }

    /// Image `(height, width)` fed to the backbone and the image classifier.
    pub fn image_size(&self) -> Result<(usize, usize)> {
        let p = self.embedding_params()?;
        let pad = padding_for(&p, self.embedding.target)?;
        Ok((pad.top + p.height() + pad.bottom, pad.left + p.columns() + pad.right))
    }

    pub fn vocabulary(&self) -> Result<LabelVocabulary> {
        LabelVocabulary::new(self.data.labels.clone())
    }

    pub fn backbone(&self, in_channels: usize, num_classes: usize) -> Result<BackboneConfig> {
        let (height, width) = self.image_size()?;
        Ok(BackboneConfig {
            in_channels,
            height,
            width,
            model_channels: self.backbone.model_channels,
            channel_multipliers: self.backbone.channel_multipliers.clone(),
            attention_resolutions: self.backbone.attention_resolutions.clone(),
            num_classes,
        })
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.diffusion.steps,
            rho: self.diffusion.rho,
            sigma_min: self.diffusion.noise.sigma_min,
            sigma_max: self.diffusion.noise.sigma_max,
            solver: self.diffusion.solver,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = &self.diffusion;
        TrainConfig {
            lr: d.lr,
            batch_size: d.batch_size,
            epochs: d.epochs,
            weight_decay: d.weight_decay,
            seed: self.seeds().noise,
            checkpoint_every: d.checkpoint_every,
            max_retries: d.max_retries,
        }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            sample_rate: self.data.sample_rate,
            resample: self.data.resample,
        }
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            window: self.data.window,
            overlap: self.data.overlap,
            drop: self.data.drop,
            split: self.data.split,
            stats_scope: self.data.stats_scope,
            seed: self.seeds().data_shuffle,
        }
    }

    pub fn classifier_spec(&self, variant: Variant) -> TrainSpec {
        TrainSpec {
            seed: derive_seed(self.seeds().init, variant.name()),
            ..self.classifier
        }
    }

    pub fn tsne(&self) -> Option<TsneConfig> {
        self.evaluation.tsne.then(|| TsneConfig {
            perplexity: self.evaluation.perplexity,
            iterations: self.evaluation.tsne_iterations,
            learning_rate: self.evaluation.tsne_learning_rate,
            seed: derive_seed(self.seed, "tsne"),
            ..TsneConfig::default()
        })
    }
}
