use std::collections::BTreeMap;

use rand::Rng;

use super::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Shape table of a model: `(name, shape, init)` for trainable parameters and buffers.
struct Layout {
    params: Vec<(String, Vec<usize>, Init)>,
    buffers: Vec<(String, Vec<usize>, Init)>,
}

fn layout(cfg: &ModelConfig) -> Result<Layout> {
    let t = cfg.num_temporal_filters;
    let s = cfg.num_spatial_filters;
    let c = cfg.num_channels;
    let h = cfg.hidden_units;
    let mut params = Vec::new();
    let mut buffers = Vec::new();

    let conv = |params: &mut Vec<_>, name: &str, shape: [usize; 4]| {
        let fan_in = shape[1] * shape[2] * shape[3];
        params.push((format!("{name}.weight"), shape.to_vec(), Init::Uniform { fan_in }));
        params.push((format!("{name}.bias"), vec![shape[0]], Init::Zeros));
    };
    let bn = |params: &mut Vec<_>, buffers: &mut Vec<_>, name: &str, ch: usize| {
        params.push((format!("{name}.gamma"), vec![ch], Init::Ones));
        params.push((format!("{name}.beta"), vec![ch], Init::Zeros));
        buffers.push((format!("{name}.running_mean"), vec![ch], Init::Zeros));
        buffers.push((format!("{name}.running_var"), vec![ch], Init::Ones));
    };
    let fc = |params: &mut Vec<_>, name: &str, out: usize, inp: usize| {
        params.push((format!("{name}.weight"), vec![out, inp], Init::Uniform { fan_in: inp }));
        params.push((format!("{name}.bias"), vec![out], Init::Zeros));
    };

    for (i, b) in cfg.temporal_branches()?.iter().enumerate() {
        conv(&mut params, &format!("tception.{}", i + 1), [t, 1, 1, b.kernel]);
    }
    bn(&mut params, &mut buffers, "bn_t", t);
    conv(&mut params, "sception.full", [s, t, c, 1]);
    conv(&mut params, "sception.hemi", [s, t, cfg.hemi_kernel(), 1]);
    bn(&mut params, &mut buffers, "bn_s", s);
    conv(&mut params, "fusion1", [s, s, 3, 1]);
    bn(&mut params, &mut buffers, "bn_f1", s);
    match cfg.variant {
        Variant::Modified => {
            conv(&mut params, "fusion2", [s, s, 1, 1]);
            bn(&mut params, &mut buffers, "bn_f2", s);
            fc(&mut params, "fc1", h, s);
            fc(&mut params, "fc2", h, h);
        }
        Variant::Original => fc(&mut params, "fc1", h, s),
    }
    fc(&mut params, "fc_out", cfg.num_classes, h);
    Ok(Layout { params, buffers })
}

/// Named trainable parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

/// Construct freshly initialized parameters for `config`.
///
/// Every tensor draws from its own stream of `seed`, indexed by its position
/// in the layout, so initialization is reproducible and independent of draw
/// order elsewhere.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let layout = layout(config)?;
    let make = |idx: usize, shape: &[usize], init: Init| match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::Uniform { fan_in } => {
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut r = rng::stream(seed, rng::STREAM_INIT + idx as u64);
            Tensor::from_fn(shape, |_| r.gen_range(-bound..bound))
        }
    };
    let params = layout
        .params
        .iter()
        .enumerate()
        .map(|(i, (name, shape, init))| (name.clone(), make(i, shape, *init)))
        .collect();
    let buffers = layout
        .buffers
        .iter()
        .map(|(name, shape, init)| (name.clone(), make(0, shape, *init)))
        .collect();
    Ok(ModelParams { params, buffers })
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::Shape(format!("missing tensor `{name}`")))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// All tensors, parameters first, each group in name order.
    pub fn entries(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter().chain(self.buffers.iter())
    }

    pub fn is_finite(&self) -> bool {
        self.entries().all(|(_, t)| t.is_finite())
    }

    /// Round every value through `f32`, the precision checkpoints store.
    pub fn quantized_f32(&self) -> Self {
        let q = |m: &BTreeMap<String, Tensor>| {
            m.iter()
                .map(|(k, t)| (k.clone(), t.map(|v| v as f32 as f64)))
                .collect()
        };
        ModelParams {
            params: q(&self.params),
            buffers: q(&self.buffers),
        }
    }

    /// Sort named tensors into parameters and buffers by the layout of `config`,
    /// then check names and shapes against it.
    pub fn from_entries(config: &ModelConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let layout = layout(config)?;
        let mut out = ModelParams {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        };
        for (name, t) in entries {
            let slot = if layout.buffers.iter().any(|(n, _, _)| *n == name) {
                &mut out.buffers
            } else {
                &mut out.params
            };
            if slot.insert(name.clone(), t).is_some() {
                return Err(Error::Shape(format!("duplicate tensor `{name}`")));
            }
        }
        out.check_compatible(config)?;
        Ok(out)
    }

    /// Fail with a shape error unless names and shapes match the layout of `config`.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let layout = layout(config)?;
        let check = |have: &BTreeMap<String, Tensor>, want: &[(String, Vec<usize>, Init)], kind: &str| {
            if have.len() != want.len() {
                return Err(Error::Shape(format!(
                    "{} {kind} present, config requires {}",
                    have.len(),
                    want.len()
                )));
            }
            for (name, shape, _) in want {
                match have.get(name) {
                    None => return Err(Error::Shape(format!("missing {kind} `{name}`"))),
                    Some(t) if t.shape() != shape.as_slice() => {
                        return Err(Error::Shape(format!(
                            "`{name}` has shape {:?}, config requires {shape:?}",
                            t.shape()
                        )))
                    }
                    Some(_) => {}
                }
            }
            Ok(())
        };
        check(&self.params, &layout.params, "parameters")?;
        check(&self.buffers, &layout.buffers, "buffers")
    }
}
