use std::collections::BTreeMap;

use rand::RngCore;

use super::config::{ModelConfig, Pooling, Variant};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{softmax, BatchNormStats, Graph, Mode, Tensor, Var};

/// Outputs of the two fusion stages.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// Stage-1 map after batch norm, `[B, S, 1, adp_fusion_out]`.
    pub stage1: Var,
    /// Stage-2 map after pooling and batch norm (modified variant only).
    pub stage2: Option<Var>,
    pub y_f1: Var,
    pub y_f2: Var,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub y_f1: Var,
    pub y_f2: Var,
    /// Train-mode batch statistics per batch-norm layer, keyed by layer name.
    pub bn_stats: Vec<(String, BatchNormStats)>,
}

/// A model bound onto a graph: parameters recorded as leaves, stages as methods.
pub struct ModelGraph<'a> {
    pub graph: &'a mut Graph,
    params: &'a ModelParams,
    config: &'a ModelConfig,
    vars: BTreeMap<String, Var>,
    mode: Mode,
    bn_stats: Vec<(String, BatchNormStats)>,
}

impl<'a> ModelGraph<'a> {
    /// Record every trainable parameter as a leaf (differentiable when `requires_grad`).
    pub fn new(
        graph: &'a mut Graph,
        params: &'a ModelParams,
        config: &'a ModelConfig,
        mode: Mode,
        requires_grad: bool,
    ) -> Result<Self> {
        params.check_compatible(config)?;
        let vars = params
            .params
            .iter()
            .map(|(name, t)| (name.clone(), graph.leaf(t.clone(), requires_grad)))
            .collect();
        Ok(ModelGraph {
            graph,
            params,
            config,
            vars,
            mode,
            bn_stats: Vec::new(),
        })
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    fn p(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn conv(&mut self, x: Var, name: &str, stride: (usize, usize)) -> Result<Var> {
        let (w, b) = (self.p(&format!("{name}.weight")), self.p(&format!("{name}.bias")));
        self.graph.conv2d(x, w, Some(b), stride, (0, 0))
    }

    fn conv_leaky_pool(&mut self, x: Var, name: &str, stride: (usize, usize), pooling: Pooling) -> Result<Var> {
        let (w, b) = (self.p(&format!("{name}.weight")), self.p(&format!("{name}.bias")));
        self.graph
            .conv_leaky_pool(x, w, Some(b), stride, self.config.leaky_alpha, pooling.to_time_pool())
    }

    fn bn(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        let mean = self.params.get(&format!("{name}.running_mean"))?.data();
        let var = self.params.get(&format!("{name}.running_var"))?.data();
        let (y, stats) = self
            .graph
            .batch_norm_with(x, gamma, beta, mean, var, self.mode, self.config.bn_eps)?;
        if let Some(s) = stats {
            self.bn_stats.push((name.to_string(), s));
        }
        Ok(y)
    }

    /// Multi-scale temporal branches, concatenated along time, then `bn_t`.
    pub fn tception(&mut self, x: Var) -> Result<Var> {
        let shape = self.graph.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::dim("tception", "channel (1)", format!("expected [B,1,C,T], got {shape:?}")));
        }
        if shape[2] != self.config.num_channels {
            return Err(Error::dim(
                "tception",
                "electrode (2)",
                format!("input has {} electrodes, config expects {}", shape[2], self.config.num_channels),
            ));
        }
        let mut outs = Vec::new();
        for (i, branch) in self.config.temporal_branches()?.iter().enumerate() {
            if shape[3] < branch.kernel {
                return Err(Error::config(
                    "input_length",
                    format!("{} samples shorter than temporal kernel {}", shape[3], branch.kernel),
                ));
            }
            let len = shape[3] - branch.kernel + 1;
            if branch.pooling.output_len(len).is_none() {
                return Err(Error::config(
                    "input_length",
                    format!("temporal branch {} output ({len} samples) too short to pool", i + 1),
                ));
            }
            outs.push(self.conv_leaky_pool(x, &format!("tception.{}", i + 1), (1, 1), branch.pooling)?);
        }
        let cat = self.graph.concat(&outs, 3)?;
        self.bn(cat, "bn_t")
    }

    /// Full-montage and hemispheric spatial convolutions stacked on the electrode axis, then `bn_s`.
    pub fn sception(&mut self, y_t: Var) -> Result<Var> {
        let c = self.config.num_channels;
        let rows_in = self.graph.value(y_t).shape()[2];
        if rows_in != c {
            return Err(Error::dim("sception", "electrode (2)", format!("{rows_in} rows, config expects {c}")));
        }
        let pooling = match self.config.variant {
            Variant::Modified => Pooling::Adaptive(self.config.adp_spatial_out),
            Variant::Original => Pooling::Avg(self.config.original_spatial_pool()),
        };
        let hemi = self.config.hemi_kernel();
        let mut outs = Vec::new();
        let len = self.graph.value(y_t).shape()[3];
        if pooling.output_len(len).is_none() {
            return Err(Error::config("adp_spatial_out", format!("cannot pool {len} samples with {pooling:?}")));
        }
        for (name, stride) in [("sception.full", 1), ("sception.hemi", hemi)] {
            outs.push(self.conv_leaky_pool(y_t, name, (stride, 1), pooling)?);
        }
        let cat = self.graph.concat(&outs, 2)?;
        let rows = self.graph.value(cat).shape()[2];
        if rows != 3 {
            return Err(Error::config("num_channels", format!("spatial stage produced {rows} rows, expected 3")));
        }
        self.bn(cat, "bn_s")
    }

    /// Spatial collapse with a (3,1) kernel, then (modified variant) pointwise channel mixing.
    pub fn fusion(&mut self, y_s: Var) -> Result<FusionOutput> {
        let rows = self.graph.value(y_s).shape()[2];
        if rows != 3 {
            return Err(Error::dim("fusion", "electrode (2)", format!("expected 3 rows, got {rows}")));
        }
        let alpha = self.config.leaky_alpha;
        let z = self.conv(y_s, "fusion1", (1, 1))?;
        let z = self.graph.leaky_relu(z, alpha)?;
        match self.config.variant {
            Variant::Modified => {
                if self.config.adp_fusion_out < self.config.fusion2_pool {
                    return Err(Error::config("adp_fusion_out", "smaller than fusion2_pool"));
                }
                let z = self.graph.adaptive_avg_pool_time(z, self.config.adp_fusion_out)?;
                let stage1 = self.bn(z, "bn_f1")?;
                let y_f1 = self.graph.global_avg_pool(stage1)?;
                let z = self.conv(stage1, "fusion2", (1, 1))?;
                let z = self.graph.leaky_relu(z, alpha)?;
                let p = self.config.fusion2_pool;
                let z = self.graph.avg_pool_time(z, p, p)?;
                let stage2 = self.bn(z, "bn_f2")?;
                let y_f2 = self.graph.global_avg_pool(stage2)?;
                Ok(FusionOutput {
                    stage1,
                    stage2: Some(stage2),
                    y_f1,
                    y_f2,
                })
            }
            Variant::Original => {
                let p = self.config.original_fusion_pool();
                let z = self.graph.avg_pool_time(z, p, p)?;
                let stage1 = self.bn(z, "bn_f1")?;
                let y = self.graph.global_avg_pool(stage1)?;
                Ok(FusionOutput {
                    stage1,
                    stage2: None,
                    y_f1: y,
                    y_f2: y,
                })
            }
        }
    }

    /// Fully connected head producing logits.
    pub fn classifier(&mut self, features: Var, rng: &mut dyn RngCore) -> Result<Var> {
        let hidden: &[&str] = match self.config.variant {
            Variant::Modified => &["fc1", "fc2"],
            Variant::Original => &["fc1"],
        };
        let mut h = features;
        for name in hidden {
            let (w, b) = (self.p(&format!("{name}.weight")), self.p(&format!("{name}.bias")));
            h = self.graph.linear(h, w, Some(b))?;
            h = self.graph.relu(h);
            h = self.graph.dropout(h, self.config.dropout_p, self.mode, rng)?;
        }
        let (w, b) = (self.p("fc_out.weight"), self.p("fc_out.bias"));
        self.graph.linear(h, w, Some(b))
    }

    pub fn forward(mut self, x: Var, rng: &mut dyn RngCore) -> Result<ForwardOutput> {
        let y_t = self.tception(x)?;
        let y_s = self.sception(y_t)?;
        let fused = self.fusion(y_s)?;
        let logits = self.classifier(fused.y_f2, rng)?;
        Ok(ForwardOutput {
            logits,
            y_f1: fused.y_f1,
            y_f2: fused.y_f2,
            bn_stats: self.bn_stats,
        })
    }

    pub fn take_bn_stats(&mut self) -> Vec<(String, BatchNormStats)> {
        std::mem::take(&mut self.bn_stats)
    }
}

/// Class probabilities and logits for a batch, plus the fusion diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    pub probs: Tensor,
    pub y_f1: Tensor,
    pub y_f2: Tensor,
}

/// Non-differentiable forward pass of `x: [B, 1, C, T]`.
///
/// `params` is only read, so one frozen parameter set can serve concurrent callers.
pub fn model_forward(
    x: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Prediction> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = ModelGraph::new(&mut g, params, config, mode, false)?.forward(xv, rng)?;
    let logits = g.value(out.logits).clone();
    Ok(Prediction {
        probs: softmax(&logits),
        logits,
        y_f1: g.value(out.y_f1).clone(),
        y_f2: g.value(out.y_f2).clone(),
    })
}

/// Eval-mode forward pass.
pub fn predict(x: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<Prediction> {
    // Eval-mode dropout never draws, so the stream is irrelevant.
    let mut r = rng::stream(0, rng::STREAM_DROPOUT);
    model_forward(x, params, config, Mode::Eval, &mut r)
}
