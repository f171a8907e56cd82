//! Image-based (2D) and signal-based (1D) placement classifiers.

use idgen_tensor::{Adam, AdamConfig, BatchNormConfig, ConvGeom, Graph, Mode, NonFinitePolicy, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Image,
    Signal,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Image => "image",
            Variant::Signal => "signal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Variant::Image),
            "signal" => Ok(Variant::Signal),
            _ => Err(Error::Invalid(format!("unknown classifier variant `{s}` (expected image or signal)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub variant: Variant,
    pub in_channels: usize,
    /// `[H, W]` for images, `[L]` for signals.
    pub input: Vec<usize>,
    pub num_classes: usize,
    pub filters: [usize; 4],
    pub hidden: usize,
    pub dropout: f64,
    /// Adaptive-average-pool output edge (4 ⇒ 4×4 or 4).
    pub pool_to: usize,
}

impl ClassifierConfig {
    pub fn image(h: usize, w: usize, num_classes: usize) -> Self {
        ClassifierConfig {
            variant: Variant::Image,
            in_channels: 3,
            input: vec![h, w],
            num_classes,
            filters: [16, 32, 64, 128],
            hidden: 256,
            dropout: 0.5,
            pool_to: 4,
        }
    }

    pub fn signal(len: usize, num_classes: usize) -> Self {
        ClassifierConfig {
            variant: Variant::Signal,
            input: vec![len],
            ..Self::image(0, 0, num_classes)
        }
    }

    pub fn kernel(&self) -> usize {
        match self.variant {
            Variant::Image => 3,
            Variant::Signal => 5,
        }
    }

    fn spatial_dims(&self) -> usize {
        match self.variant {
            Variant::Image => 2,
            Variant::Signal => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Invalid(format!("classifier needs ≥ 2 classes, got {}", self.num_classes)));
        }
        if self.input.len() != self.spatial_dims() || self.input.iter().any(|&d| d < 16) {
            return Err(Error::Invalid(format!(
                "{} classifier input {:?} cannot pass four pool-by-2 stages",
                self.variant.name(),
                self.input
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.pool_to == 0 || self.hidden == 0 {
            return Err(Error::Invalid(format!("invalid classifier config {self:?}")));
        }
        Ok(())
    }

    /// Flattened width after adaptive pooling.
    pub fn flat_features(&self) -> usize {
        self.filters[3] * self.pool_to.pow(self.spatial_dims() as u32)
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let kk = self.kernel().pow(self.spatial_dims() as u32);
        let mut cin = self.in_channels;
        let mut total = 0;
        for &co in &self.filters {
            total += cin * kk * co + co; // conv weight + bias
            total += 2 * co; // batch-norm scale + shift
            cin = co;
        }
        total + self.flat_features() * self.hidden + self.hidden + self.hidden * self.num_classes + self.num_classes
    }
}

#[derive(Debug, Clone, Copy)]
struct Stage {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub params: ParamStore<f32>,
    stages: Vec<Stage>,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

const BN: BatchNormConfig = BatchNormConfig { momentum: 0.1, eps: 1e-5 };

pub fn build_classifier(config: &ClassifierConfig, seed: u64) -> Result<Classifier> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |dims: &[usize], fan_in: usize| {
        // He initialization for ReLU stacks
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (std * z) as f32
            })
            .collect();
        Tensor::new(dims, data).expect("init dims")
    };
    let mut p = ParamStore::new();
    let k = config.kernel();
    let mut stages = Vec::new();
    let mut cin = config.in_channels;
    for (i, &co) in config.filters.iter().enumerate() {
        let wdims: Vec<usize> = match config.variant {
            Variant::Image => vec![co, cin, k, k],
            Variant::Signal => vec![co, cin, k],
        };
        let fan_in = cin * k.pow(config.spatial_dims() as u32);
        stages.push(Stage {
            w: p.add(&format!("conv{i}/weight"), normal(&wdims, fan_in))?,
            b: p.add(&format!("conv{i}/bias"), Tensor::zeros(&[co]))?,
            gamma: p.add(&format!("bn{i}/gamma"), Tensor::full(&[co], 1.0))?,
            beta: p.add(&format!("bn{i}/beta"), Tensor::zeros(&[co]))?,
            mean: p.add_buffer(&format!("bn{i}/running_mean"), Tensor::zeros(&[co]))?,
            var: p.add_buffer(&format!("bn{i}/running_var"), Tensor::full(&[co], 1.0))?,
        });
        cin = co;
    }
    let flat = config.flat_features();
    let fc1 = (
        p.add("fc1/weight", normal(&[config.hidden, flat], flat))?,
        p.add("fc1/bias", Tensor::zeros(&[config.hidden]))?,
    );
    let fc2 = (
        p.add("fc2/weight", normal(&[config.num_classes, config.hidden], 2 * config.hidden))?,
        p.add("fc2/bias", Tensor::zeros(&[config.num_classes]))?,
    );
    Ok(Classifier {
        config: config.clone(),
        params: p,
        stages,
        fc1,
        fc2,
    })
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Penultimate activations `[N, hidden]` (after ReLU, before dropout).
    pub features: Var,
    pub logits: Var,
}

impl Classifier {
    fn check_input(&self, dims: &[usize]) -> Result<()> {
        let mut want = vec![self.config.in_channels];
        want.extend_from_slice(&self.config.input);
        if dims.len() != want.len() + 1 || dims[1..] != want[..] {
            return Err(Error::Invalid(format!(
                "{} classifier expects [N, {}], got {dims:?}",
                self.config.variant.name(),
                want.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph<f32>, x: Var) -> Result<Forward> {
        self.check_input(g.dims(x))?;
        let k = self.config.kernel();
        let mut h = x;
        for s in &self.stages {
            let (w, b) = (g.param(&self.params, s.w), g.param(&self.params, s.b));
            h = match self.config.variant {
                Variant::Image => g.conv2d(h, w, Some(b), ConvGeom::square(k, 1, k / 2))?,
                Variant::Signal => g.conv1d(h, w, Some(b), 1, k / 2)?,
            };
            let (gamma, beta) = (g.param(&self.params, s.gamma), g.param(&self.params, s.beta));
            h = g.batch_norm(h, gamma, beta, &self.params, s.mean, s.var, BN)?;
            h = g.relu(h)?;
            h = match self.config.variant {
                Variant::Image => g.max_pool2d(h, (2, 2))?,
                Variant::Signal => g.max_pool1d(h, 2)?,
            };
        }
        let t = self.config.pool_to;
        h = match self.config.variant {
            Variant::Image => g.adaptive_avg_pool2d(h, (t, t))?,
            Variant::Signal => g.adaptive_avg_pool1d(h, t)?,
        };
        let n = g.dims(h)[0];
        h = g.reshape(h, &[n, self.config.flat_features()])?;
        let (w1, b1) = (g.param(&self.params, self.fc1.0), g.param(&self.params, self.fc1.1));
        h = g.linear(h, w1, Some(b1))?;
        let features = g.relu(h)?;
        let d = g.dropout(features, self.config.dropout)?;
        let (w2, b2) = (g.param(&self.params, self.fc2.0), g.param(&self.params, self.fc2.1));
        let logits = g.linear(d, w2, Some(b2))?;
        Ok(Forward { features, logits })
    }

    /// Eval-mode logits and penultimate features, computed in chunks.
    pub fn infer(&self, inputs: &Tensor<f32>, chunk: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.check_input(inputs.dims())?;
        let n = inputs.dims()[0];
        let mut logits = Vec::with_capacity(n * self.config.num_classes);
        let mut feats = Vec::with_capacity(n * self.config.hidden);
        let idx: Vec<usize> = (0..n).collect();
        for part in idx.chunks(chunk.max(1)) {
            let mut g = Graph::new(Mode::Eval, 0);
            let x = g.input(gather(inputs, part)?);
            let f = self.forward(&mut g, x)?;
            logits.extend_from_slice(g.value(f.logits).data());
            feats.extend_from_slice(g.value(f.features).data());
        }
        Ok((
            Tensor::new(&[n, self.config.num_classes], logits)?,
            Tensor::new(&[n, self.config.hidden], feats)?,
        ))
    }

    pub fn predict(&self, inputs: &Tensor<f32>) -> Result<Vec<usize>> {
        let (logits, _) = self.infer(inputs, 128)?;
        Ok((0..logits.dims()[0]).map(|i| argmax(logits.outer(i))).collect())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set_meta("kind", "classifier");
        c.set_meta("variant", self.config.variant.name());
        c.set_meta("in_channels", self.config.in_channels.to_string());
        c.set_meta("input", self.config.input.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
        c.set_meta("num_classes", self.config.num_classes.to_string());
        c.set_meta("filters", self.config.filters.map(|f| f.to_string()).join(","));
        c.set_meta("hidden", self.config.hidden.to_string());
        c.set_meta("dropout", format!("{:?}", self.config.dropout));
        c.set_meta("pool_to", self.config.pool_to.to_string());
        for (name, t, _) in self.params.iter() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind") != Some("classifier") {
            return Err(Error::Container("not a classifier checkpoint".into()));
        }
        let ints = |k: &str| -> Result<Vec<usize>> {
            c.require_meta(k)?
                .split(',')
                .map(|v| v.parse().map_err(|_| Error::Container(format!("bad metadata `{k}`"))))
                .collect()
        };
        let filters = ints("filters")?;
        let config = ClassifierConfig {
            variant: Variant::parse(c.require_meta("variant")?)?,
            in_channels: ints("in_channels")?[0],
            input: ints("input")?,
            num_classes: ints("num_classes")?[0],
            filters: filters
                .try_into()
                .map_err(|_| Error::Container("classifier needs four filter counts".into()))?,
            hidden: ints("hidden")?[0],
            dropout: c
                .require_meta("dropout")?
                .parse()
                .map_err(|_| Error::Container("bad dropout".into()))?,
            pool_to: ints("pool_to")?[0],
        };
        let mut m = build_classifier(&config, 0)?;
        let names: Vec<String> = m.params.iter().map(|(n, _, _)| n.to_string()).collect();
        for name in names {
            m.params.assign(&name, c.f32(&name)?.clone())?;
        }
        Ok(m)
    }
}

fn argmax(row: &[f32]) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn gather(x: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let mut dims = x.dims().to_vec();
    dims[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * x.numel() / x.dims()[0]);
    for &i in idx {
        data.extend_from_slice(x.outer(i));
    }
    Ok(Tensor::new(&dims, data)?)
}

/// Inputs `[N, ...]` with one label per row.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(inputs: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if inputs.dims()[0] != labels.len() {
            return Err(Error::Invalid(format!("{} inputs with {} labels", inputs.dims()[0], labels.len())));
        }
        Ok(LabeledSet { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSpec {
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            lr: 1e-3,
            weight_decay: 1e-5,
            patience: 10,
            max_epochs: 200,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

fn mean_loss(model: &Classifier, set: &LabeledSet) -> Result<f64> {
    let (logits, _) = model.infer(&set.inputs, 128)?;
    let mut total = 0.0;
    for (i, &y) in set.labels.iter().enumerate() {
        let row = logits.outer(i);
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
        total += lse - row[y] as f64;
    }
    Ok(total / set.len() as f64)
}

/// Adam with coupled weight decay, cross-entropy, early stopping on
/// validation loss. The best epoch's parameters (and batch-norm buffers)
/// are restored on return.
pub fn train_classifier(model: &mut Classifier, train: &LabeledSet, val: &LabeledSet, spec: &TrainSpec) -> Result<TrainSummary> {
    for (name, set) in [("training", train), ("validation", val)] {
        if let Some(c) = (0..model.config.num_classes).find(|c| !set.labels.contains(c)) {
            return Err(Error::Data(format!("class {c} is missing from the {name} split")));
        }
    }
    if spec.batch_size == 0 || spec.max_epochs == 0 {
        return Err(Error::Invalid(format!("invalid classifier training spec {spec:?}")));
    }
    let mut opt = Adam::new(
        AdamConfig {
            non_finite: NonFinitePolicy::Trap,
            ..AdamConfig::adam(spec.lr, spec.weight_decay)
        },
        &model.params,
    );
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut summary = TrainSummary {
        best_epoch: 0,
        epochs_run: 0,
        stop_reason: StopReason::MaxEpochs,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
    };
    let mut step = 0u64;
    for epoch in 1..=spec.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("epoch{epoch}"))));
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(spec.batch_size) {
            // a single-sample batch has no batch statistics to normalize with
            if idx.len() < 2 {
                continue;
            }
            let mut g = Graph::new(Mode::Train, derive_seed(spec.seed, &format!("dropout{step}")));
            let x = g.input(gather(&train.inputs, idx)?);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let f = model.forward(&mut g, x)?;
            let loss = g.cross_entropy(f.logits, &labels)?;
            let value = f64::from(g.value(loss).data()[0]);
            if !value.is_finite() {
                return Err(Error::NonFinite { what: "classifier loss", step: step as usize });
            }
            let grads = g.backward(loss)?;
            opt.step(&mut model.params, &grads)?;
            g.commit_buffers(&mut model.params);
            total += value;
            batches += 1;
            step += 1;
        }
        let vl = mean_loss(model, val)?;
        summary.train_loss.push(total / batches.max(1) as f64);
        summary.val_loss.push(vl);
        summary.epochs_run = epoch;
        // strict improvement only, so ties keep the earlier epoch
        if vl < best.0 {
            best = (vl, epoch, model.params.clone());
        } else if epoch - best.1 >= spec.patience {
            summary.stop_reason = StopReason::Patience;
            break;
        }
    }
    summary.best_epoch = best.1;
    model.params = best.2;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub tag: String,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

impl ClassificationReport {
    pub fn from_predictions(tag: &str, labels: &[usize], predictions: Vec<usize>, classes: usize) -> Self {
        let mut confusion = vec![vec![0; classes]; classes];
        for (&y, &p) in labels.iter().zip(&predictions) {
            confusion[y][p] += 1;
        }
        ClassificationReport {
            tag: tag.to_string(),
            confusion,
            predictions,
        }
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Overall accuracy in percent.
    pub fn accuracy(&self) -> f64 {
        let correct: usize = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        100.0 * correct as f64 / self.total() as f64
    }

    /// Per-class accuracy in percent (`NaN` for absent classes).
    pub fn per_class(&self) -> Vec<f64> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(i, row)| 100.0 * row[i] as f64 / row.iter().sum::<usize>() as f64)
            .collect()
    }

    /// Mutual information (bits) between true and predicted labels.
    pub fn mutual_information_bits(&self) -> f64 {
        let n = self.total() as f64;
        let k = self.confusion.len();
        let rows: Vec<f64> = self.confusion.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
        let cols: Vec<f64> = (0..k).map(|j| self.confusion.iter().map(|r| r[j]).sum::<usize>() as f64).collect();
        let mut mi = 0.0;
        for i in 0..k {
            for j in 0..k {
                let c = self.confusion[i][j] as f64;
                if c > 0.0 {
                    mi += c / n * (c * n / (rows[i] * cols[j])).log2();
                }
            }
        }
        mi
    }

    pub fn confusion_csv(&self, names: &[String]) -> String {
        let mut s = String::from("true\\predicted");
        for n in names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(&names[i]);
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn evaluate_classifier(model: &Classifier, set: &LabeledSet, tag: &str) -> Result<ClassificationReport> {
    if set.is_empty() {
        return Err(Error::Data(format!("cannot evaluate on an empty {tag} set")));
    }
    if let Some(&bad) = set.labels.iter().find(|&&l| l >= model.config.num_classes) {
        return Err(Error::Data(format!("label {bad} outside {} classes", model.config.num_classes)));
    }
    let predictions = model.predict(&set.inputs)?;
    Ok(ClassificationReport::from_predictions(tag, &set.labels, predictions, model.config.num_classes))
}
