//! Replays golden fixtures (see [`crate::formats::Fixture`]) against this
//! implementation.
//!
//! Each fixture names an operation. Inputs use the argument names below;
//! scalar attributes are stored as `attr.<name>` tensors. The expected
//! forward result is `out` and expected gradients are `grad.<input>`,
//! taken of `Σ upstream ⊙ out` (or `Σ out` without an `upstream` tensor).
//!
//! | op                         | inputs                                          | attributes             |
//! |----------------------------|-------------------------------------------------|------------------------|
//! | `conv2d`                   | `x`, `kernel`, optional `bias`                  | `stride`, `padding`    |
//! | `avg_pool_time`            | `x`                                             | `pool`, `stride`       |
//! | `adaptive_avg_pool_time`   | `x`                                             | `out`                  |
//! | `global_avg_pool`          | `x`                                             |                        |
//! | `leaky_relu`               | `x`                                             | `alpha`                |
//! | `linear`                   | `x`, `weight`, optional `bias`                  |                        |
//! | `batch_norm_train`         | `x`, `gamma`, `beta`                            | `eps`                  |
//! | `batch_norm_eval`          | `x`, `gamma`, `beta`, `running_mean`, `running_var` | `eps`              |
//! | `softmax_cross_entropy_ls` | `logits`, `targets`                             | `eps_ls`               |
//! | `model_forward`            | `x`; parameters from `<fixture stem>.tsck`      |                        |

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::formats::{compare, load_checkpoint, Comparison, Fixture, Role};
use crate::model::predict;
use crate::tensor::{Graph, Mode, Tensor, Var};

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub path: PathBuf,
    pub op: String,
    pub name: String,
    pub comparisons: Vec<Comparison>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        !self.comparisons.is_empty() && self.comparisons.iter().all(Comparison::passed)
    }
}

fn input<'a>(fx: &'a Fixture, name: &str) -> Result<&'a Tensor> {
    fx.get(name, Role::Input)
        .ok_or_else(|| Error::Format(format!("fixture `{}`: missing input `{name}`", fx.name)))
}

fn attr<'a>(fx: &'a Fixture, name: &str) -> Result<&'a [f64]> {
    Ok(input(fx, &format!("attr.{name}"))?.data())
}

fn attr_usize(fx: &Fixture, name: &str, i: usize) -> Result<usize> {
    let v = *attr(fx, name)?
        .get(i)
        .ok_or_else(|| Error::Format(format!("fixture `{}`: attr.{name} too short", fx.name)))?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::Format(format!("fixture `{}`: attr.{name} = {v} is not a count", fx.name)));
    }
    Ok(v as usize)
}

/// Record the op on `g` given the differentiable inputs (in fixture order).
fn record(fx: &Fixture, g: &mut Graph, vars: &[(String, Var)]) -> Result<Var> {
    let v = |name: &str| -> Result<Var> {
        vars.iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Format(format!("fixture `{}`: missing input `{name}`", fx.name)))
    };
    let opt = |name: &str| vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v);
    match fx.op.as_str() {
        "conv2d" => g.conv2d(
            v("x")?,
            v("kernel")?,
            opt("bias"),
            (attr_usize(fx, "stride", 0)?, attr_usize(fx, "stride", 1)?),
            (attr_usize(fx, "padding", 0)?, attr_usize(fx, "padding", 1)?),
        ),
        "avg_pool_time" => g.avg_pool_time(v("x")?, attr_usize(fx, "pool", 0)?, attr_usize(fx, "stride", 0)?),
        "adaptive_avg_pool_time" => g.adaptive_avg_pool_time(v("x")?, attr_usize(fx, "out", 0)?),
        "global_avg_pool" => g.global_avg_pool(v("x")?),
        "leaky_relu" => g.leaky_relu(v("x")?, attr(fx, "alpha")?[0]),
        "linear" => g.linear(v("x")?, v("weight")?, opt("bias")),
        "batch_norm_train" | "batch_norm_eval" => {
            let c = g.value(v("gamma")?).numel();
            let (mean, var, mode) = if fx.op == "batch_norm_train" {
                (vec![0.0; c], vec![1.0; c], Mode::Train)
            } else {
                (
                    input(fx, "running_mean")?.data().to_vec(),
                    input(fx, "running_var")?.data().to_vec(),
                    Mode::Eval,
                )
            };
            let eps = attr(fx, "eps")?[0];
            Ok(g.batch_norm_with(v("x")?, v("gamma")?, v("beta")?, &mean, &var, mode, eps)?.0)
        }
        "softmax_cross_entropy_ls" => {
            let targets = input(fx, "targets")?
                .data()
                .iter()
                .map(|&t| if t >= 0.0 && t.fract() == 0.0 { Ok(t as usize) } else { Err(Error::Format(format!("target {t}"))) })
                .collect::<Result<Vec<_>>>()?;
            g.softmax_cross_entropy_ls(v("logits")?, &targets, attr(fx, "eps_ls")?[0])
        }
        op => Err(Error::Format(format!("fixture `{}`: unknown op `{op}`", fx.name))),
    }
}

/// Inputs that carry gradients: everything except attributes and the
/// non-differentiable tensors of each op.
fn differentiable(fx: &Fixture, name: &str) -> bool {
    !(name.starts_with("attr.")
        || name == "upstream"
        || name == "targets"
        || name == "running_mean"
        || name == "running_var")
        && fx.op != "model_forward"
}

fn run_op(fx: &Fixture) -> Result<Vec<Comparison>> {
    let mut g = Graph::new();
    let vars: Vec<(String, Var)> = fx
        .with_role(Role::Input)
        .filter(|t| differentiable(fx, &t.name))
        .map(|t| (t.name.clone(), g.param(t.tensor.clone())))
        .collect();
    let out = record(fx, &mut g, &vars)?;
    let mut comparisons = Vec::new();
    if let Some(expected) = fx.get("out", Role::Expected) {
        comparisons.push(compare("out", g.value(out), expected, fx.tolerances.forward)?);
    }
    let wanted: Vec<_> = fx.with_role(Role::Gradient).collect();
    if !wanted.is_empty() {
        let loss = match fx.get("upstream", Role::Input) {
            Some(u) => g.weighted_sum(out, u)?,
            None => g.sum(out),
        };
        g.backward(loss)?;
        for t in wanted {
            let target = t
                .name
                .strip_prefix("grad.")
                .ok_or_else(|| Error::Format(format!("gradient tensor `{}` lacks the grad. prefix", t.name)))?;
            let var = vars
                .iter()
                .find(|(n, _)| n == target)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Format(format!("gradient for unknown input `{target}`")))?;
            let grad = g.grad(var).unwrap_or_else(|| Tensor::zeros(g.value(var).shape()));
            comparisons.push(compare(&t.name, &grad, &t.tensor, fx.tolerances.gradient)?);
        }
    }
    Ok(comparisons)
}

fn run_model(fx: &Fixture, path: &Path) -> Result<Vec<Comparison>> {
    let ckpt_path = path.with_extension("tsck");
    let ckpt = load_checkpoint(&ckpt_path)?;
    let x = input(fx, "x")?;
    let pred = predict(x, &ckpt.params, &ckpt.config)?;
    let expected = fx
        .get("out", Role::Expected)
        .ok_or_else(|| Error::Format(format!("fixture `{}`: missing expected `out`", fx.name)))?;
    Ok(vec![compare("out", &pred.logits, expected, fx.tolerances.forward)?])
}

/// Load and replay one fixture file.
pub fn check_fixture(path: &Path) -> Result<CaseReport> {
    let fx = Fixture::load(path)?;
    let comparisons = if fx.op == "model_forward" { run_model(&fx, path)? } else { run_op(&fx)? };
    Ok(CaseReport {
        path: path.to_path_buf(),
        op: fx.op,
        name: fx.name,
        comparisons,
    })
}

/// Replay every `*.gfix` file in `dir`, in file-name order.
pub fn check_dir(dir: &Path) -> Result<Vec<CaseReport>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "gfix"))
        .collect();
    if paths.is_empty() {
        return Err(Error::EmptyInput(format!("no .gfix fixtures in {}", dir.display())));
    }
    paths.sort();
    paths.iter().map(|p| check_fixture(p)).collect()
}

