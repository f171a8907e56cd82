//! Stage functions shared by the command-line tool and the end-to-end toy run.

use std::time::Instant;

use crate::classifiers::{
    build_classifier, train_classifier, Classifier, ClassifierConfig, TrainSummary, Variant,
};
use crate::config::RunConfig;
use crate::data::{assemble_dataset, toy_dataset, Dataset, LabelVocabulary, NormalizationStats, SignalWindow};
use crate::denoiser::DenoiserModel;
use crate::diffusion::{embed_windows, generate_signals, DiffusionTrainer, GenerationSpec};
use crate::embedding::padding_for;
use crate::error::{Error, Result};
use crate::evaluation::{classifier_inputs, cross_evaluate, EvalContext, EvaluationReport};

/// Toy windows, split and normalized like ingested recordings.
pub fn toy_data(cfg: &RunConfig) -> Result<Dataset> {
    let vocab = cfg.vocabulary()?;
    if vocab.len() != 4 {
        return Err(Error::Config(format!("the toy generator has 4 classes, config lists {}", vocab.len())));
    }
    let raw = toy_dataset(cfg.seeds().data_shuffle, cfg.data.toy_per_class, cfg.embedding.length);
    assemble_dataset(raw, Vec::new(), &cfg.preprocess())
}

/// `count` labels cycling through all classes.
pub fn round_robin(classes: usize, count: usize) -> Vec<usize> {
    (0..count).map(|i| i % classes).collect()
}

pub fn new_diffusion_trainer(cfg: &RunConfig, vocab: &LabelVocabulary) -> Result<DiffusionTrainer> {
    let backbone = cfg.backbone(3, vocab.len())?;
    let model = DenoiserModel::new(
        &backbone,
        cfg.diffusion.noise.sigma_data,
        vocab.names().to_vec(),
        cfg.seeds().init,
    )?;
    DiffusionTrainer::new(model, cfg.train_config(), cfg.diffusion.noise)
}

/// Embedded training images and their labels.
pub fn diffusion_inputs(cfg: &RunConfig, windows: &[SignalWindow]) -> Result<(idgen_tensor::Tensor<f32>, Vec<usize>)> {
    let images = embed_windows(windows, &cfg.embedding_params()?, cfg.embedding.target)?;
    Ok((images, windows.iter().map(|w| w.label).collect()))
}

pub fn generation_spec(cfg: &RunConfig, stats: &NormalizationStats) -> Result<GenerationSpec> {
    let embedding = cfg.embedding_params()?;
    Ok(GenerationSpec {
        embedding,
        pad: padding_for(&embedding, cfg.embedding.target)?,
        stats: stats.clone(),
        sampler: cfg.sampler(),
        batch: cfg.diffusion.generate_batch,
    })
}

pub fn classifier_config(cfg: &RunConfig, variant: Variant, classes: usize) -> Result<ClassifierConfig> {
    Ok(match variant {
        Variant::Image => {
            let (h, w) = cfg.image_size()?;
            ClassifierConfig::image(h, w, classes)
        }
        Variant::Signal => ClassifierConfig::signal(cfg.embedding.length, classes),
    })
}

pub fn eval_context(cfg: &RunConfig, stats: &NormalizationStats) -> Result<EvalContext> {
    Ok(EvalContext {
        embedding: cfg.embedding_params()?,
        image_target: cfg.embedding.target,
        stats: stats.clone(),
        vocab: cfg.vocabulary()?,
        bins: cfg.evaluation.bins,
        tsne: cfg.tsne(),
        tsne_points: cfg.evaluation.tsne_points,
    })
}

/// Trains one classifier variant on the train split, early-stopping on val.
pub fn fit_classifier(cfg: &RunConfig, variant: Variant, data: &Dataset) -> Result<(Classifier, TrainSummary)> {
    let ctx = eval_context(cfg, &data.stats)?;
    let pick = |idx: &[usize]| -> Result<_> {
        let (img, sig) = classifier_inputs(&data.subset(idx), &ctx)?;
        Ok(match variant {
            Variant::Image => img,
            Variant::Signal => sig,
        })
    };
    let (train, val) = (pick(&data.split.train)?, pick(&data.split.val)?);
    let spec = cfg.classifier_spec(variant);
    let mut model = build_classifier(&classifier_config(cfg, variant, ctx.vocab.len())?, spec.seed)?;
    let summary = train_classifier(&mut model, &train, &val, &spec)?;
    Ok((model, summary))
}

/// Everything produced by one end-to-end toy run.
pub struct ToyRun {
    pub data: Dataset,
    pub diffusion: DiffusionTrainer,
    pub synthetic: Vec<SignalWindow>,
    pub image: (Classifier, TrainSummary),
    pub signal: (Classifier, TrainSummary),
    pub report: EvaluationReport,
    /// Wall-clock seconds per stage.
    pub timings: Vec<(&'static str, f64)>,
}

/// Toy data → diffusion training → conditional generation → classifiers on
/// real data → cross-evaluation on real test and synthetic windows.
pub fn run_toy(cfg: &RunConfig, synthetic_count: usize, mut log: impl FnMut(&str)) -> Result<ToyRun> {
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &'static str, timings: &mut Vec<(&'static str, f64)>| {
        timings.push((name, clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let data = toy_data(cfg)?;
    let vocab = cfg.vocabulary()?;
    lap("data", &mut timings);

    let (images, labels) = diffusion_inputs(cfg, &data.subset(&data.split.train))?;
    let mut diffusion = new_diffusion_trainer(cfg, &vocab)?;
    diffusion.train(&images, &labels, |t| {
        log(&format!("diffusion epoch {} loss {:.4}", t.epoch, t.history[t.epoch - 1]));
        Ok(())
    })?;
    lap("diffusion", &mut timings);

    let spec = generation_spec(cfg, &data.stats)?;
    let synthetic = generate_signals(
        &diffusion.model,
        &round_robin(vocab.len(), synthetic_count),
        cfg.seeds().sampler,
        &spec,
    )?;
    lap("generate", &mut timings);

    let image = fit_classifier(cfg, Variant::Image, &data)?;
    log(&format!("image classifier: best epoch {} of {}", image.1.best_epoch, image.1.epochs_run));
    let signal = fit_classifier(cfg, Variant::Signal, &data)?;
    log(&format!("signal classifier: best epoch {} of {}", signal.1.best_epoch, signal.1.epochs_run));
    lap("classifiers", &mut timings);

    let report = cross_evaluate(
        &data.subset(&data.split.test),
        &synthetic,
        &image.0,
        &signal.0,
        &eval_context(cfg, &data.stats)?,
    )?;
    lap("evaluate", &mut timings);

    Ok(ToyRun {
        data,
        diffusion,
        synthetic,
        image,
        signal,
        report,
        timings,
    })
}
