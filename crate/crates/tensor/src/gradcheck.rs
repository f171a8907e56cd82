//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checked function is reduced to a scalar through a fixed random
//! projection `L = Σ out ⊙ R`, so every output element contributes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub probes: usize,
    /// Finite-difference half step.
    pub step: f64,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero up to round-off do not produce spurious failures.
    pub floor: f64,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            probes: 200,
            step: 1e-6,
            floor: 1e-3,
            seed: 0x5eed,
            mode: Mode::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_error: f64,
    pub worst: Option<Probe>,
}

fn projected_loss<F>(inputs: &[Tensor<f64>], proj: Option<&Tensor<f64>>, cfg: &GradCheckConfig, build: &F) -> Result<(Graph<f64>, Vec<Var>, Var, Tensor<f64>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(cfg.mode, cfg.seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let r = match proj {
        Some(r) => r.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa5a5);
            let dims = g.dims(out).to_vec();
            let n = dims.iter().product();
            Tensor::new(&dims, (0..n).map(|_| rng.sample(StandardNormal)).collect())?
        }
    };
    let rv = g.input(r.clone());
    let prod = g.mul(out, rv)?;
    let loss = g.sum(prod)?;
    Ok((g, vars, loss, r))
}

/// Compares analytic input gradients of `build` against central differences
/// at `cfg.probes` randomly chosen input elements.
pub fn check<F>(inputs: &[Tensor<f64>], cfg: &GradCheckConfig, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, vars, loss, proj) = projected_loss(inputs, None, cfg, &build)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.input(v).cloned().unwrap_or_else(|| Tensor::zeros(t.dims())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        probes: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    for _ in 0..cfg.probes {
        let input = rng.random_range(0..inputs.len());
        let index = rng.random_range(0..inputs[input].numel());
        let orig = inputs[input].data()[index];
        let eval = |delta: f64, work: &mut Vec<Tensor<f64>>| -> Result<f64> {
            work[input].data_mut()[index] = orig + delta;
            let (g, _, loss, _) = projected_loss(work, Some(&proj), cfg, &build)?;
            Ok(g.value(loss).data()[0])
        };
        let plus = eval(cfg.step, &mut work)?;
        let minus = eval(-cfg.step, &mut work)?;
        work[input].data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[input].data()[index];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        report.probes += 1;
        if rel_error >= report.max_rel_error {
            report.max_rel_error = rel_error;
            report.worst = Some(Probe {
                input,
                index,
                analytic: a,
                numeric,
                rel_error,
            });
        }
    }
    Ok(report)
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One primitive under test: its inputs, mode, and forward builder.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub mode: Mode,
    pub build: Build,
}

impl Case {
    pub fn run(&self, probes: usize, seed: u64) -> Result<GradCheckReport> {
        let cfg = GradCheckConfig {
            probes,
            seed,
            mode: self.mode,
            ..GradCheckConfig::default()
        };
        check(&self.inputs, &cfg, &self.build)
    }
}

fn randn(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("dims")
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, build: Build) -> Case {
    Case {
        name,
        inputs,
        mode: Mode::Train,
        build,
    }
}

/// Randomized small configurations covering every primitive of the engine.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    use crate::kernels::ConvGeom;
    use crate::ops::BatchNormConfig;
    use crate::params::ParamStore;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = vec![
        case("add", vec![randn(r, &[2, 3, 4]), randn(r, &[2, 3, 4])], Box::new(|g, v| g.add(v[0], v[1]))),
        case("sub", vec![randn(r, &[2, 5]), randn(r, &[2, 5])], Box::new(|g, v| g.sub(v[0], v[1]))),
        case("mul", vec![randn(r, &[3, 4]), randn(r, &[3, 4])], Box::new(|g, v| g.mul(v[0], v[1]))),
        case("scale", vec![randn(r, &[7])], Box::new(|g, v| g.scale(v[0], -1.7))),
        case("relu", vec![randn(r, &[4, 6])], Box::new(|g, v| g.relu(v[0]))),
        case("silu", vec![randn(r, &[4, 6])], Box::new(|g, v| g.silu(v[0]))),
        case("sum", vec![randn(r, &[3, 3])], Box::new(|g, v| g.sum(v[0]))),
        case("mean", vec![randn(r, &[3, 5])], Box::new(|g, v| g.mean(v[0]))),
        case("reshape", vec![randn(r, &[2, 6])], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        case(
            "concat_channels",
            vec![randn(r, &[2, 3, 4, 4]), randn(r, &[2, 2, 4, 4])],
            Box::new(|g, v| g.concat_channels(v[0], v[1])),
        ),
        case(
            "add_channel_bias",
            vec![randn(r, &[2, 3, 5]), randn(r, &[2, 3])],
            Box::new(|g, v| g.add_channel_bias(v[0], v[1])),
        ),
        case(
            "linear",
            vec![randn(r, &[4, 6]), randn(r, &[5, 6]), randn(r, &[5])],
            Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        ),
        case(
            "conv2d",
            vec![randn(r, &[2, 3, 6, 5]), randn(r, &[4, 3, 3, 3]), randn(r, &[4])],
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::square(3, 1, 1))),
        ),
        case(
            "conv2d_strided",
            vec![randn(r, &[2, 2, 7, 6]), randn(r, &[3, 2, 3, 2])],
            Box::new(|g, v| {
                let geom = ConvGeom {
                    kernel: (3, 2),
                    stride: (2, 2),
                    pad: (1, 0),
                };
                g.conv2d(v[0], v[1], None, geom)
            }),
        ),
        case(
            "conv2d_pointwise",
            vec![randn(r, &[2, 4, 3, 3]), randn(r, &[2, 4, 1, 1]), randn(r, &[2])],
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::square(1, 1, 0))),
        ),
        case(
            "conv1d",
            vec![randn(r, &[2, 3, 12]), randn(r, &[4, 3, 5]), randn(r, &[4])],
            Box::new(|g, v| g.conv1d(v[0], v[1], Some(v[2]), 1, 2)),
        ),
        case("upsample_nearest2x", vec![randn(r, &[2, 2, 3, 4])], Box::new(|g, v| g.upsample_nearest2x(v[0]))),
        case("max_pool2d", vec![randn(r, &[2, 3, 6, 4])], Box::new(|g, v| g.max_pool2d(v[0], (2, 2)))),
        case("max_pool1d", vec![randn(r, &[2, 3, 9])], Box::new(|g, v| g.max_pool1d(v[0], 2))),
        case(
            "adaptive_avg_pool2d",
            vec![randn(r, &[2, 3, 5, 7])],
            Box::new(|g, v| g.adaptive_avg_pool2d(v[0], (3, 2))),
        ),
        case("adaptive_avg_pool1d", vec![randn(r, &[2, 2, 10])], Box::new(|g, v| g.adaptive_avg_pool1d(v[0], 4))),
        case(
            "group_norm",
            vec![randn(r, &[2, 6, 3, 3]), randn(r, &[6]), randn(r, &[6])],
            Box::new(|g, v| g.group_norm(v[0], v[1], v[2], 3, 1e-5)),
        ),
        case("dropout", vec![randn(r, &[3, 8])], Box::new(|g, v| g.dropout(v[0], 0.5))),
        case("softmax", vec![randn(r, &[3, 5])], Box::new(|g, v| g.softmax(v[0]))),
        case(
            "cross_entropy",
            vec![randn(r, &[4, 3])],
            Box::new(|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2])),
        ),
        case("embedding", vec![randn(r, &[4, 3])], Box::new(|g, v| g.embedding(v[0], &[3, 0, 3, 1]))),
        case(
            "attention",
            vec![randn(r, &[2, 4, 5]), randn(r, &[2, 4, 5]), randn(r, &[2, 4, 5])],
            Box::new(|g, v| g.attention(v[0], v[1], v[2])),
        ),
    ];
    let target = randn(r, &[3, 4]);
    cases.push(case(
        "weighted_sse",
        vec![randn(r, &[3, 4])],
        Box::new(move |g, v| g.weighted_sse(v[0], &target, &[0.5, 2.0, 1.0])),
    ));

    for (name, mode, constant) in [
        ("batch_norm_train", Mode::Train, false),
        ("batch_norm_eval", Mode::Eval, false),
        ("batch_norm_identical_inputs", Mode::Train, true),
    ] {
        let mut store = ParamStore::<f64>::new();
        let rm = store.add_buffer("rm", randn(r, &[3])).expect("fresh store");
        let rv = store
            .add_buffer("rv", randn(r, &[3]).map(|v| 0.5 + v.abs()))
            .expect("fresh store");
        let x = if constant {
            Tensor::full(&[4, 3, 2, 2], 0.3)
        } else {
            randn(r, &[4, 3, 2, 2])
        };
        cases.push(Case {
            name,
            inputs: vec![x, randn(r, &[3]), randn(r, &[3])],
            mode,
            build: Box::new(move |g, v| g.batch_norm(v[0], v[1], v[2], &store, rm, rv, BatchNormConfig::default())),
        });
    }

    cases.push(case(
        "conv_net_2layer",
        vec![
            randn(r, &[2, 2, 6, 6]),
            randn(r, &[4, 2, 3, 3]),
            randn(r, &[4]),
            randn(r, &[3, 4, 3, 3]),
            randn(r, &[3]),
        ],
        Box::new(|g, v| {
            let h = g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::square(3, 1, 1))?;
            let h = g.silu(h)?;
            g.conv2d(h, v[3], Some(v[4]), ConvGeom::square(3, 1, 1))
        }),
    ));
    cases
}
