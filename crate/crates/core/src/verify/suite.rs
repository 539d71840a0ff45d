use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::model::{build_model, ModelConfig, ModelGraph, ModelParams};
use crate::rng;
use crate::tensor::{grad_check, relative_error, Graph, GradCheckReport, Mode, Tensor, TimePool, Var};

/// Central-difference step used by every check.
pub const STEP: f64 = 1e-5;

/// Step for the whole-model check. First-layer parameters move on the order of
/// 10^5 leaky-ReLU pre-activations, so a 1e-5 step regularly straddles a kink.
pub const END_TO_END_STEP: f64 = 1e-7;

const STREAM_SUITE: u64 = 8;

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Contract the output against fixed random weights so every element of the
/// upstream gradient differs.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    g.weighted_sum(out, weights)
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn cases(seed: u64) -> Vec<(&'static str, Build, Vec<Tensor>)> {
    let mut r = rng::stream(seed, STREAM_SUITE);
    let mut cases: Vec<(&'static str, Build, Vec<Tensor>)> = Vec::new();

    let w = normal(&mut r, &[2, 3, 5, 4]);
    cases.push((
        "conv2d",
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), (1, 2), (1, 1))?;
            project(g, y, &w)
        }),
        vec![normal(&mut r, &[2, 2, 4, 7]), normal(&mut r, &[3, 2, 2, 3]), normal(&mut r, &[3])],
    ));

    let w = normal(&mut r, &[2, 2, 3, 4]);
    cases.push((
        "conv_leaky_pool/avg",
        Box::new(move |g, v| {
            let y = g.conv_leaky_pool(v[0], v[1], Some(v[2]), (1, 1), 0.01, TimePool::Avg { pool: 4, stride: 4 })?;
            project(g, y, &w)
        }),
        vec![normal(&mut r, &[2, 1, 3, 20]), normal(&mut r, &[2, 1, 1, 5]), normal(&mut r, &[2])],
    ));

    let w = normal(&mut r, &[2, 3, 2, 3]);
    cases.push((
        "conv_leaky_pool/adaptive",
        Box::new(move |g, v| {
            let y = g.conv_leaky_pool(v[0], v[1], Some(v[2]), (2, 1), 0.1, TimePool::Adaptive(3))?;
            project(g, y, &w)
        }),
        vec![normal(&mut r, &[2, 2, 5, 10]), normal(&mut r, &[3, 2, 2, 4]), normal(&mut r, &[3])],
    ));

    let w = normal(&mut r, &[2, 3, 2, 6]);
    cases.push((
        "leaky_relu",
        Box::new(move |g, v| {
            let y = g.leaky_relu(v[0], 0.01)?;
            project(g, y, &w)
        }),
        vec![normal(&mut r, &[2, 3, 2, 6])],
    ));

    let w = normal(&mut r, &[3, 8]);
    cases.push((
        "relu",
        Box::new(move |g, v| {
            let y = g.relu(v[0]);
            project(g, y, &w)
        }),
        vec![normal(&mut r, &[3, 8])],
    ));

    let w = normal(&mut r, &[2, 2, 3, 4]);
    cases.push((
        "avg_pool_time",
        Box::new(move |g, v| {
            let y = g.avg_pool_time(v[0], 3, 2)?;
            project(g, y, &w)
        }),
        vec![normal(&mut r, &[2, 2, 3, 10])],
    ));

    let w = normal(&mut r, &[2, 2, 3, 4]);
    cases.push((
        "adaptive_avg_pool_time",
        Box::new(move |g, v| {
            let y = g.adaptive_avg_pool_time(v[0], 4)?;
            project(g, y, &w)
        }),
        vec![normal(&mut r, &[2, 2, 3, 10])],
    ));

    let w = normal(&mut r, &[3, 4]);
    cases.push((
        "global_avg_pool",
        Box::new(move |g, v| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y, &w)
        }),
        vec![normal(&mut r, &[3, 4, 2, 5])],
    ));

    let w = normal(&mut r, &[3, 2, 2, 5]);
    cases.push((
        "batch_norm/train",
        Box::new(move |g, v| {
            let (y, _) = g.batch_norm_with(v[0], v[1], v[2], &[0.0, 0.0], &[1.0, 1.0], Mode::Train, 1e-5)?;
            project(g, y, &w)
        }),
        vec![normal(&mut r, &[3, 2, 2, 5]), normal(&mut r, &[2]), normal(&mut r, &[2])],
    ));

    let w = normal(&mut r, &[3, 2, 2, 5]);
    let mean: Vec<f64> = (0..2).map(|_| r.sample(StandardNormal)).collect();
    let var: Vec<f64> = (0..2).map(|_| r.gen_range(0.5..2.0)).collect();
    cases.push((
        "batch_norm/eval",
        Box::new(move |g, v| {
            let (y, _) = g.batch_norm_with(v[0], v[1], v[2], &mean, &var, Mode::Eval, 1e-5)?;
            project(g, y, &w)
        }),
        vec![normal(&mut r, &[3, 2, 2, 5]), normal(&mut r, &[2]), normal(&mut r, &[2])],
    ));

    let w = normal(&mut r, &[3, 4]);
    cases.push((
        "linear",
        Box::new(move |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, &w)
        }),
        vec![normal(&mut r, &[3, 5]), normal(&mut r, &[4, 5]), normal(&mut r, &[4])],
    ));

    let w = normal(&mut r, &[4, 6]);
    let mask_seed: u64 = r.gen();
    cases.push((
        "dropout",
        Box::new(move |g, v| {
            let mut m = rng::stream(mask_seed, rng::STREAM_DROPOUT);
            let y = g.dropout(v[0], 0.5, Mode::Train, &mut m)?;
            project(g, y, &w)
        }),
        vec![normal(&mut r, &[4, 6])],
    ));

    let targets: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
    cases.push((
        "softmax_cross_entropy_ls",
        Box::new(move |g, v| g.softmax_cross_entropy_ls(v[0], &targets, 0.1)),
        vec![normal(&mut r, &[4, 3])],
    ));

    let w = normal(&mut r, &[2, 2, 3, 7]);
    cases.push((
        "concat",
        Box::new(move |g, v| {
            let y = g.concat(&[v[0], v[1]], 3)?;
            project(g, y, &w)
        }),
        vec![normal(&mut r, &[2, 2, 3, 3]), normal(&mut r, &[2, 2, 3, 4])],
    ));

    cases.push((
        "sum",
        Box::new(|g, v| {
            let sq = g.relu(v[0]);
            Ok(g.sum(sq))
        }),
        vec![normal(&mut r, &[3, 5])],
    ));
    cases
}

/// Finite-difference check of every differentiable op on seeded inputs.
pub fn op_suite(seed: u64, tol: f64) -> Result<Vec<OpCheck>> {
    cases(seed)
        .into_iter()
        .map(|(op, build, inputs)| {
            Ok(OpCheck {
                op,
                seed,
                report: grad_check(build, &inputs, STEP, tol)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EndToEndCheck {
    pub seed: u64,
    /// `(parameter name, flat index, analytic, numeric, relative error)`.
    pub samples: Vec<(String, usize, f64, f64, f64)>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl EndToEndCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

fn model_loss(
    params: &ModelParams,
    config: &ModelConfig,
    x: &Tensor,
    targets: &[usize],
    mask_seed: u64,
    grads: bool,
) -> Result<(f64, Vec<(String, Vec<f64>)>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut masks = rng::stream(mask_seed, rng::STREAM_DROPOUT);
    let mg = ModelGraph::new(&mut g, params, config, Mode::Train, grads)?;
    let vars = mg.param_vars().clone();
    let out = mg.forward(xv, &mut masks)?;
    let loss = g.softmax_cross_entropy_ls(out.logits, targets, 0.1)?;
    let value = g.value(loss).item();
    if !grads {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let gs = vars
        .iter()
        .map(|(n, &v)| (n.clone(), g.grad_data(v).map_or_else(|| vec![0.0; params.params[n].numel()], <[f64]>::to_vec)))
        .collect();
    Ok((value, gs))
}

/// Train-mode loss gradient of a full model against central differences on
/// `per_tensor` sampled elements of every parameter tensor.
pub fn end_to_end(
    config: &ModelConfig,
    seed: u64,
    batch: usize,
    per_tensor: usize,
    h: f64,
    tol: f64,
) -> Result<EndToEndCheck> {
    let mut r = rng::stream(seed, STREAM_SUITE + 1);
    let tlen = (config.sampling_rate.round() as usize).max(1);
    let x = normal(&mut r, &[batch, 1, config.num_channels, tlen]);
    let targets: Vec<usize> = (0..batch).map(|_| r.gen_range(0..config.num_classes)).collect();
    let mask_seed: u64 = r.gen();
    let params = build_model(config, seed)?;
    let (_, grads) = model_loss(&params, config, &x, &targets, mask_seed, true)?;

    let mut samples = Vec::new();
    let mut work = params.clone();
    for (name, grad) in &grads {
        for _ in 0..per_tensor.min(grad.len()) {
            let e = r.gen_range(0..grad.len());
            let orig = params.params[name].data()[e];
            work.params.get_mut(name).expect("name from layout").data_mut()[e] = orig + h;
            let (plus, _) = model_loss(&work, config, &x, &targets, mask_seed, false)?;
            work.params.get_mut(name).expect("name from layout").data_mut()[e] = orig - h;
            let (minus, _) = model_loss(&work, config, &x, &targets, mask_seed, false)?;
            work.params.get_mut(name).expect("name from layout").data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            samples.push((name.clone(), e, grad[e], numeric, relative_error(grad[e], numeric)));
        }
    }
    let max_rel_error = samples.iter().map(|s| s.4).fold(0.0, f64::max);
    Ok(EndToEndCheck {
        seed,
        samples,
        max_rel_error,
        tol,
    })
}
