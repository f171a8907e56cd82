//! `idgen`: ingest recordings, train the diffusion model and classifiers,
//! generate synthetic windows and evaluate them.
//!
//! Every command takes the same configuration (`--preset` plus an optional
//! `--config` file of overrides) and writes a run manifest next to its
//! output. Failures print one `error: <kind>: <message>` line and exit 1.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use idgen_core::classifiers::{evaluate_classifier, Classifier, Variant};
use idgen_core::config::RunConfig;
use idgen_core::container::{Container, WindowSet};
use idgen_core::data::{load_recordings, preprocess, NormalizationStats, SignalWindow};
use idgen_core::diffusion::{generate_signals, loss_csv, DiffusionTrainer};
use idgen_core::embedding::{embed, invert, EmbeddingParams};
use idgen_core::evaluation::{classifier_inputs, cross_evaluate};
use idgen_core::pipeline::{
    classifier_config, diffusion_inputs, eval_context, fit_classifier, generation_spec, new_diffusion_trainer,
    round_robin, toy_data,
};
use idgen_core::seed::{derive_seed, file_digest};
use idgen_core::Error;
use idgen_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Parser)]
#[command(name = "idgen", version, about = "Delay-embedding diffusion generator for tri-axial specific force")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 1024-sample windows, 64×64 images, full-size backbone.
    Full,
    /// 256-sample toy windows, 32×32 images, small backbone.
    Desk,
}

#[derive(Args)]
struct ConfigArgs {
    /// Base settings that `--config` overrides.
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// INI file of overrides.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let base = match self.preset {
            Preset::Full => RunConfig::default(),
            Preset::Desk => RunConfig::desk(),
        };
        match &self.config {
            None => Ok(base),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                RunConfig::apply(base, &text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Window, split and normalize recordings into a dataset container.
    Ingest {
        /// Directory the manifest's file paths are relative to.
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// CSV manifest `file,label,subject`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Use the built-in synthetic toy signals instead of recordings.
        #[arg(long, conflicts_with_all = ["data_root", "manifest"])]
        toy: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the conditional diffusion model on the training split.
    TrainDiffusion {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train an image- or signal-based classifier on real data.
    TrainClassifier {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = ["image", "signal"])]
        variant: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sample synthetic windows from a trained diffusion checkpoint.
    Generate {
        #[arg(long)]
        model: PathBuf,
        /// A class name, or `all` to cycle through every class.
        #[arg(long)]
        label: String,
        #[arg(long)]
        count: usize,
        /// Defaults to the sampler stream of the configured run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also export the windows as long-format CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Cross-evaluate real test and synthetic windows; writes a report bundle.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long)]
        image_model: PathBuf,
        #[arg(long)]
        signal_model: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Audit that embedding followed by inversion is bit-exact.
    RoundtripCheck {
        /// Audit the windows of a dataset container instead of random signals.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        length: usize,
        #[arg(long, default_value_t = 15)]
        skip: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Random signals to audit.
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb this flat pixel index of the first image before inversion.
        #[arg(long)]
        corrupt: Option<usize>,
        /// Audit report file.
        #[arg(long)]
        out: PathBuf,
    },
}

struct Manifest {
    command: &'static str,
    inputs: Vec<(&'static str, PathBuf)>,
    outputs: Vec<(&'static str, PathBuf)>,
    seed: Option<u64>,
    config: Option<String>,
    notes: Vec<(String, String)>,
}

impl Manifest {
    fn new(command: &'static str) -> Self {
        Manifest {
            command,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            config: None,
            notes: Vec::new(),
        }
    }

    fn with_config(command: &'static str, cfg: &RunConfig) -> Self {
        Manifest {
            seed: Some(cfg.seed),
            config: Some(cfg.to_ini()),
            ..Manifest::new(command)
        }
    }

    fn write(&self, path: &Path) -> Result<(), Error> {
        let mut s = format!("command = {}\n", self.command);
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed = {seed}");
        }
        for (k, v) in &self.notes {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (tag, list) in [("input", &self.inputs), ("output", &self.outputs)] {
            for (name, p) in list {
                let _ = writeln!(s, "{tag}.{name} = {} sha256:{}", p.display(), file_digest(p)?);
            }
        }
        if let Some(cfg) = &self.config {
            let _ = write!(s, "\n# effective configuration\n{cfg}");
        }
        write_text(path, &s)
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    let io = |p: &Path, source| Error::Io {
        path: p.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io(path, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{name}{suffix}"))
}

fn read_container(path: &Path) -> Result<Container, Error> {
    Container::read(path)
}

fn read_windows(path: &Path) -> Result<WindowSet, Error> {
    WindowSet::from_container(&read_container(path)?)
}

/// Recreates the `Dataset` view of an ingested container.
fn dataset_of(set: &WindowSet, path: &Path) -> Result<idgen_core::data::Dataset, Error> {
    let missing = |what: &str| Error::Data(format!("{}: dataset has no {what}; ingest it first", path.display()));
    Ok(idgen_core::data::Dataset {
        windows: set.windows.clone(),
        split: set.split.clone().ok_or_else(|| missing("split"))?,
        stats: set.stats.clone().ok_or_else(|| missing("normalization statistics"))?,
        skipped: Vec::new(),
    })
}

fn check_dataset(cfg: &RunConfig, set: &WindowSet, path: &Path) -> Result<(), Error> {
    if set.vocab.names() != cfg.data.labels.as_slice() {
        return Err(Error::Config(format!(
            "{} has labels {:?}, configuration lists {:?}",
            path.display(),
            set.vocab.names(),
            cfg.data.labels
        )));
    }
    if let Some(w) = set.windows.first() {
        if w.len() != cfg.embedding.length {
            return Err(Error::Config(format!(
                "{} holds {}-sample windows, configuration expects {}",
                path.display(),
                w.len(),
                cfg.embedding.length
            )));
        }
    }
    Ok(())
}

fn ingest(data_root: Option<PathBuf>, manifest: Option<PathBuf>, toy: bool, out: &Path, cfg: &RunConfig) -> Result<(), Error> {
    let mut m = Manifest::with_config("ingest", cfg);
    let data = if toy {
        m.notes.push(("source".into(), "toy".into()));
        toy_data(cfg)?
    } else {
        let root = data_root
            .or_else(|| cfg.data.data_root.clone())
            .ok_or_else(|| Error::Config("no data root (use --data-root or [data] data_root)".into()))?;
        let manifest = manifest
            .or_else(|| cfg.data.manifest.clone())
            .map(|p| if p.is_relative() && !p.exists() { root.join(p) } else { p })
            .ok_or_else(|| Error::Config("no manifest (use --manifest or [data] manifest)".into()))?;
        let recordings = load_recordings(&root, &manifest, &cfg.vocabulary()?, cfg.load_options())?;
        m.inputs.push(("manifest", manifest.clone()));
        let data = preprocess(&recordings, &cfg.preprocess())?;
        for id in &data.skipped {
            eprintln!("skipped short recording {id}");
        }
        data
    };
    let set = WindowSet {
        windows: data.windows,
        vocab: cfg.vocabulary()?,
        stats: Some(data.stats.clone()),
        split: Some(data.split.clone()),
    };
    set.write(out)?;
    let stats_path = out.with_file_name("stats.csv");
    write_text(&stats_path, &data.stats.to_csv())?;
    eprintln!(
        "{} windows (train {}, val {}, test {})",
        set.windows.len(),
        data.split.train.len(),
        data.split.val.len(),
        data.split.test.len()
    );
    m.outputs.push(("dataset", out.to_path_buf()));
    m.outputs.push(("stats", stats_path));
    m.write(&sibling(out, ".manifest"))
}

fn train_diffusion(dataset: &Path, out: &Path, resume: Option<&Path>, cfg: &RunConfig) -> Result<(), Error> {
    let set = read_windows(dataset)?;
    check_dataset(cfg, &set, dataset)?;
    let data = dataset_of(&set, dataset)?;
    let (images, labels) = diffusion_inputs(cfg, &data.subset(&data.split.train))?;
    let mut m = Manifest::with_config("train-diffusion", cfg);
    m.inputs.push(("dataset", dataset.to_path_buf()));
    let mut trainer = match resume {
        Some(p) => {
            m.inputs.push(("resume", p.to_path_buf()));
            DiffusionTrainer::from_container(&read_container(p)?, Some(cfg.train_config()))?
        }
        None => new_diffusion_trainer(cfg, &set.vocab)?,
    };
    let config_echo = cfg.to_ini();
    let stats_csv = data.stats.to_csv();
    let save = |t: &DiffusionTrainer| -> Result<(), Error> {
        let mut c = t.to_container()?;
        c.set_meta("config", config_echo.as_str());
        c.set_meta("stats", stats_csv.as_str());
        c.set_meta("seed", cfg.seed.to_string());
        c.write(out)?;
        write_text(&sibling(out, ".loss.csv"), &loss_csv(&t.history))
    };
    let total = trainer.config.epochs;
    trainer.train(&images, &labels, |t| {
        eprintln!("epoch {}/{total} loss {:.4}", t.epoch, t.history[t.epoch - 1]);
        if t.checkpoint_due() {
            save(t)?;
        }
        Ok(())
    })?;
    save(&trainer)?;
    m.notes.push(("epochs".into(), trainer.epoch.to_string()));
    m.notes.push(("steps".into(), trainer.optimizer.step_count().to_string()));
    m.outputs.push(("checkpoint", out.to_path_buf()));
    m.outputs.push(("loss", sibling(out, ".loss.csv")));
    m.write(&sibling(out, ".manifest"))
}

fn train_classifier_cmd(dataset: &Path, variant: &str, out: &Path, cfg: &RunConfig) -> Result<(), Error> {
    let variant = Variant::parse(variant)?;
    let set = read_windows(dataset)?;
    check_dataset(cfg, &set, dataset)?;
    let data = dataset_of(&set, dataset)?;
    let (model, summary) = fit_classifier(cfg, variant, &data)?;
    let ctx = eval_context(cfg, &data.stats)?;
    let (img, sig) = classifier_inputs(&data.subset(&data.split.test), &ctx)?;
    let test = evaluate_classifier(
        &model,
        match variant {
            Variant::Image => &img,
            Variant::Signal => &sig,
        },
        "real-test",
    )?;
    let mut c = model.to_container();
    c.set_meta("config", cfg.to_ini());
    c.set_meta("seed", cfg.seed.to_string());
    c.write(out)?;
    let mut hist = String::from("epoch,train_loss,val_loss\n");
    for (i, (t, v)) in summary.train_loss.iter().zip(&summary.val_loss).enumerate() {
        let _ = writeln!(hist, "{},{t:?},{v:?}", i + 1);
    }
    write_text(&sibling(out, ".history.csv"), &hist)?;
    eprintln!(
        "{} classifier: best epoch {} of {} ({:?}), real-test accuracy {:.2}%",
        variant.name(),
        summary.best_epoch,
        summary.epochs_run,
        summary.stop_reason,
        test.accuracy()
    );
    let mut m = Manifest::with_config("train-classifier", cfg);
    m.notes.push(("variant".into(), variant.name().into()));
    m.notes.push(("best_epoch".into(), summary.best_epoch.to_string()));
    m.notes.push(("test_accuracy".into(), format!("{:.4}", test.accuracy())));
    m.inputs.push(("dataset", dataset.to_path_buf()));
    m.outputs.push(("model", out.to_path_buf()));
    m.outputs.push(("history", sibling(out, ".history.csv")));
    m.write(&sibling(out, ".manifest"))
}

#[allow(clippy::too_many_arguments)]
fn generate(
    model: &Path,
    label: &str,
    count: usize,
    seed: Option<u64>,
    out: &Path,
    csv: Option<&Path>,
    cfg: &RunConfig,
) -> Result<(), Error> {
    let c = read_container(model)?;
    let trainer = DiffusionTrainer::from_container(&c, None)?;
    let den = trainer.model;
    let stats = NormalizationStats::from_csv(c.require_meta("stats")?)?;
    let (h, w) = cfg.image_size()?;
    let bc = den.net.config();
    if (bc.height, bc.width) != (h, w) {
        return Err(Error::Config(format!(
            "checkpoint was trained on {}×{} images, configuration gives {h}×{w}",
            bc.height, bc.width
        )));
    }
    let vocab = idgen_core::data::LabelVocabulary::new(den.labels.clone())?;
    let labels = if label == "all" {
        round_robin(vocab.len(), count)
    } else {
        vec![vocab.id(label)?; count]
    };
    let run_seed = seed.unwrap_or(cfg.seeds().sampler);
    let windows = generate_signals(&den, &labels, run_seed, &generation_spec(cfg, &stats)?)?;
    let set = WindowSet {
        windows,
        vocab: vocab.clone(),
        stats: Some(stats),
        split: None,
    };
    set.write(out)?;
    let mut m = Manifest::with_config("generate", cfg);
    m.notes.push(("label".into(), label.into()));
    m.notes.push(("count".into(), count.to_string()));
    m.notes.push(("run_seed".into(), run_seed.to_string()));
    m.inputs.push(("model", model.to_path_buf()));
    m.outputs.push(("windows", out.to_path_buf()));
    if let Some(p) = csv {
        write_text(p, &windows_csv(&set.windows, &vocab))?;
        m.outputs.push(("csv", p.to_path_buf()));
    }
    m.write(&sibling(out, ".manifest"))
}

fn windows_csv(ws: &[SignalWindow], vocab: &idgen_core::data::LabelVocabulary) -> String {
    let mut s = String::from("window,label,provenance,sample,x,y,z\n");
    for (i, w) in ws.iter().enumerate() {
        let (x, y, z) = (w.values.outer(0), w.values.outer(1), w.values.outer(2));
        for t in 0..w.len() {
            let _ = writeln!(s, "{i},{},{},{t},{:?},{:?},{:?}", vocab.name(w.label).unwrap_or("?"), w.provenance, x[t], y[t], z[t]);
        }
    }
    s
}

/// Test split when the container carries one, otherwise every window.
fn evaluation_windows(set: &WindowSet) -> Vec<SignalWindow> {
    match &set.split {
        Some(split) => split.test.iter().map(|&i| set.windows[i].clone()).collect(),
        None => set.windows.clone(),
    }
}

fn read_classifier(path: &Path, want: Variant) -> Result<Classifier, Error> {
    let model = Classifier::from_container(&read_container(path)?)?;
    if model.config.variant != want {
        return Err(Error::Config(format!(
            "{} is a {} classifier, expected {}",
            path.display(),
            model.config.variant.name(),
            want.name()
        )));
    }
    Ok(model)
}

fn evaluate(real: &Path, synthetic: &Path, image: &Path, signal: &Path, out: &Path, cfg: &RunConfig) -> Result<(), Error> {
    let real_set = read_windows(real)?;
    check_dataset(cfg, &real_set, real)?;
    let stats = real_set
        .stats
        .clone()
        .ok_or_else(|| Error::Data(format!("{}: no normalization statistics", real.display())))?;
    let syn_set = read_windows(synthetic)?;
    let image_clf = read_classifier(image, Variant::Image)?;
    let signal_clf = read_classifier(signal, Variant::Signal)?;
    for (clf, variant) in [(&image_clf, Variant::Image), (&signal_clf, Variant::Signal)] {
        let want = classifier_config(cfg, variant, real_set.vocab.len())?;
        if clf.config.input != want.input {
            return Err(Error::Config(format!(
                "{} classifier expects input {:?}, configuration gives {:?}",
                variant.name(),
                clf.config.input,
                want.input
            )));
        }
    }
    let report = cross_evaluate(
        &evaluation_windows(&real_set),
        &evaluation_windows(&syn_set),
        &image_clf,
        &signal_clf,
        &eval_context(cfg, &stats)?,
    )?;
    let files = report.write_bundle(out)?;
    print!("{}", report.summary_text());
    let mut m = Manifest::with_config("evaluate", cfg);
    m.inputs.push(("real", real.to_path_buf()));
    m.inputs.push(("synthetic", synthetic.to_path_buf()));
    m.inputs.push(("image_model", image.to_path_buf()));
    m.inputs.push(("signal_model", signal.to_path_buf()));
    for f in files {
        m.outputs.push(("report", f));
    }
    m.write(&out.join("manifest.txt"))
}

/// First index where a round trip differs, in signal or image coordinates.
#[derive(Debug)]
enum Mismatch {
    Signal { window: usize, channel: usize, index: usize },
    Image { window: usize, channel: usize, index: usize },
}

fn audit_channel(
    signal: &[f32],
    params: &EmbeddingParams,
    corrupt: Option<usize>,
    window: usize,
    channel: usize,
) -> Result<Option<Mismatch>, Error> {
    let mut image = embed(signal, params)?;
    if let Some(k) = corrupt {
        if k >= image.numel() {
            return Err(Error::Config(format!("--corrupt {k} is outside the {}-pixel image", image.numel())));
        }
        image.data_mut()[k] += 1.0;
    }
    let back = invert(&image, params)?;
    if let Some(index) = back.iter().zip(signal).position(|(a, b)| a.to_bits() != b.to_bits()) {
        return Ok(Some(Mismatch::Signal { window, channel, index }));
    }
    let again = embed(&back, params)?;
    Ok(again
        .data()
        .iter()
        .zip(image.data())
        .position(|(a, b)| a.to_bits() != b.to_bits())
        .map(|index| Mismatch::Image { window, channel, index }))
}

#[allow(clippy::too_many_arguments)]
fn roundtrip(
    dataset: Option<&Path>,
    length: usize,
    skip: usize,
    height: usize,
    count: usize,
    seed: u64,
    corrupt: Option<usize>,
    out: &Path,
) -> Result<bool, Error> {
    let mut m = Manifest::new("roundtrip-check");
    let windows: Vec<Tensor<f32>> = match dataset {
        Some(p) => {
            m.inputs.push(("dataset", p.to_path_buf()));
            read_windows(p)?.windows.into_iter().map(|w| w.values).collect()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "roundtrip"));
            (0..count)
                .map(|_| {
                    let v: Vec<f32> = (0..3 * length).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
                    Tensor::new(&[3, length], v)
                })
                .collect::<Result<_, _>>()?
        }
    };
    let length = windows.first().map_or(length, |w| w.dims()[1]);
    let params = EmbeddingParams::new(skip, height, length)?;
    let mut first = None;
    'outer: for (i, w) in windows.iter().enumerate() {
        for ch in 0..w.dims()[0] {
            let k = if i == 0 && ch == 0 { corrupt } else { None };
            if let Some(mm) = audit_channel(w.outer(ch), &params, k, i, ch)? {
                first = Some(mm);
                break 'outer;
            }
        }
    }
    let verdict = match &first {
        None => format!(
            "PASS {} windows bit-exact (length {length}, skip {skip}, height {height}, {} columns)",
            windows.len(),
            params.columns()
        ),
        Some(Mismatch::Signal { window, channel, index }) => {
            format!("FAIL window {window} channel {channel}: signal index {index} differs after inversion")
        }
        Some(Mismatch::Image { window, channel, index }) => {
            format!("FAIL window {window} channel {channel}: image index {index} differs from the re-embedded signal")
        }
    };
    println!("{verdict}");
    write_text(out, &format!("{verdict}\n"))?;
    m.seed = Some(seed);
    m.notes.push(("params".into(), format!("skip={skip} height={height} length={length}")));
    m.notes.push(("verdict".into(), verdict));
    m.outputs.push(("report", out.to_path_buf()));
    m.write(&sibling(out, ".manifest"))?;
    Ok(first.is_none())
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Ingest {
            data_root,
            manifest,
            toy,
            out,
            cfg,
        } => ingest(data_root, manifest, toy, &out, &cfg.load()?)?,
        Command::TrainDiffusion {
            dataset,
            out,
            resume,
            cfg,
        } => train_diffusion(&dataset, &out, resume.as_deref(), &cfg.load()?)?,
        Command::TrainClassifier {
            dataset,
            variant,
            out,
            cfg,
        } => train_classifier_cmd(&dataset, &variant, &out, &cfg.load()?)?,
        Command::Generate {
            model,
            label,
            count,
            seed,
            out,
            csv,
            cfg,
        } => generate(&model, &label, count, seed, &out, csv.as_deref(), &cfg.load()?)?,
        Command::Evaluate {
            real,
            synthetic,
            image_model,
            signal_model,
            out,
            cfg,
        } => evaluate(&real, &synthetic, &image_model, &signal_model, &out, &cfg.load()?)?,
        Command::RoundtripCheck {
            dataset,
            length,
            skip,
            height,
            count,
            seed,
            corrupt,
            out,
        } => return roundtrip(dataset.as_deref(), length, skip, height, count, seed, corrupt, &out),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
