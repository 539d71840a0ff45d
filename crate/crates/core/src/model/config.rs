use std::fmt;
use std::str::FromStr;

use crate::tensor::TimePool;
use crate::error::{Error, Result};

/// Which architecture to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Three temporal branches, fixed pooling, single fusion stage, one hidden FC layer.
    Original,
    /// Five temporal branches with adaptive pooling, two-stage fusion, two hidden FC layers.
    Modified,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Original => "original",
            Variant::Modified => "modified",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Variant::Original),
            "modified" => Ok(Variant::Modified),
            other => Err(Error::config("variant", format!("unknown variant `{other}`"))),
        }
    }
}

/// Downsampling applied after a temporal branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Fixed average pooling with pool = stride.
    Avg(usize),
    /// Adaptive average pooling to a fixed length.
    Adaptive(usize),
}

impl Pooling {
    /// Output length for an input of `len` samples, if valid.
    pub fn output_len(self, len: usize) -> Option<usize> {
        match self {
            Pooling::Avg(p) => (len >= p).then(|| (len - p) / p + 1),
            Pooling::Adaptive(out) => (out >= 1 && len >= out).then_some(out),
        }
    }

    pub fn to_time_pool(self) -> TimePool {
        match self {
            Pooling::Avg(p) => TimePool::Avg { pool: p, stride: p },
            Pooling::Adaptive(out) => TimePool::Adaptive(out),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalBranch {
    pub window: f64,
    pub rate: f64,
    pub kernel: usize,
    pub pooling: Pooling,
}

/// Architectural hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_channels: usize,
    /// Sampling rate of the model input in Hz.
    pub sampling_rate: f64,
    /// Temporal inception windows in seconds.
    pub inception_windows: Vec<f64>,
    pub num_temporal_filters: usize,
    pub num_spatial_filters: usize,
    pub hidden_units: usize,
    pub dropout_p: f64,
    pub num_classes: usize,
    pub adp_temporal_out: usize,
    pub adp_spatial_out: usize,
    pub adp_fusion_out: usize,
    pub fusion2_pool: usize,
    pub pool_size: usize,
    pub leaky_alpha: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::seedvig()
    }
}

impl ModelConfig {
    /// 17 channels at 200 Hz, two classes.
    pub fn seedvig() -> Self {
        ModelConfig {
            num_channels: 17,
            sampling_rate: 200.0,
            inception_windows: vec![0.5, 0.25, 0.125],
            num_temporal_filters: 15,
            num_spatial_filters: 15,
            hidden_units: 64,
            dropout_p: 0.5,
            num_classes: 2,
            adp_temporal_out: 16,
            adp_spatial_out: 16,
            adp_fusion_out: 8,
            fusion2_pool: 2,
            pool_size: 8,
            leaky_alpha: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            variant: Variant::Modified,
        }
    }

    /// 14 channels at 128 Hz with `num_classes` workload levels.
    pub fn stew(num_classes: usize) -> Self {
        ModelConfig {
            num_channels: 14,
            sampling_rate: 128.0,
            num_classes,
            ..Self::seedvig()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Temporal branches in forward order.
    ///
    /// The modified variant appends two refinement branches that reuse the
    /// two smallest windows at half the sampling rate.
    pub fn temporal_branches(&self) -> Result<Vec<TemporalBranch>> {
        let fs = self.sampling_rate;
        let mut branches = Vec::new();
        for (i, &w) in self.inception_windows.iter().enumerate() {
            let pooling = if self.variant == Variant::Modified && i == 2 {
                Pooling::Adaptive(self.adp_temporal_out)
            } else {
                Pooling::Avg(self.pool_size)
            };
            branches.push(TemporalBranch {
                window: w,
                rate: fs,
                kernel: temporal_kernel_size(w, fs)?,
                pooling,
            });
        }
        if self.variant == Variant::Modified {
            let mut sorted = self.inception_windows.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            for &w in &sorted[sorted.len().saturating_sub(2)..] {
                branches.push(TemporalBranch {
                    window: w,
                    rate: fs / 2.0,
                    kernel: temporal_kernel_size(w, fs / 2.0)?,
                    pooling: Pooling::Avg(self.pool_size),
                });
            }
        }
        Ok(branches)
    }

    /// Kernel height and stride of the hemispheric spatial branch.
    pub fn hemi_kernel(&self) -> usize {
        self.num_channels / 2
    }

    /// Fixed pooling used by the original variant's spatial layer.
    pub fn original_spatial_pool(&self) -> usize {
        (self.pool_size / 4).max(1)
    }

    /// Fixed pooling used by the original variant's fusion layer.
    pub fn original_fusion_pool(&self) -> usize {
        (self.pool_size / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_channels < 4 {
            return Err(Error::config(
                "num_channels",
                format!("need at least 4 electrodes for the hemispheric kernel, got {}", self.num_channels),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("dropout_p", format!("must be in [0, 1), got {}", self.dropout_p)));
        }
        if !(self.sampling_rate > 0.0) {
            return Err(Error::config("sampling_rate", "must be positive"));
        }
        let min_windows = if self.variant == Variant::Modified { 3 } else { 1 };
        if self.inception_windows.len() < min_windows {
            return Err(Error::config(
                "inception_windows",
                format!("{} variant needs at least {min_windows} windows", self.variant),
            ));
        }
        if self.inception_windows.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::config("inception_windows", "windows must be positive"));
        }
        for (name, v) in [
            ("num_temporal_filters", self.num_temporal_filters),
            ("num_spatial_filters", self.num_spatial_filters),
            ("hidden_units", self.hidden_units),
            ("adp_temporal_out", self.adp_temporal_out),
            ("adp_spatial_out", self.adp_spatial_out),
            ("adp_fusion_out", self.adp_fusion_out),
            ("fusion2_pool", self.fusion2_pool),
            ("pool_size", self.pool_size),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if self.adp_fusion_out < self.fusion2_pool {
            return Err(Error::config(
                "adp_fusion_out",
                format!("{} is smaller than fusion2_pool {}", self.adp_fusion_out, self.fusion2_pool),
            ));
        }
        if self.adp_spatial_out < self.adp_fusion_out {
            return Err(Error::config(
                "adp_fusion_out",
                format!("{} exceeds adp_spatial_out {}", self.adp_fusion_out, self.adp_spatial_out),
            ));
        }
        if !(self.leaky_alpha >= 0.0) {
            return Err(Error::config("leaky_alpha", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps >= 0.0) {
            return Err(Error::config("bn_momentum", "momentum must be in [0, 1] and eps >= 0"));
        }
        self.temporal_branches()?;
        Ok(())
    }

    /// Check that `tlen` samples per epoch flow through every stage, returning
    /// the concatenated temporal length.
    pub fn temporal_length(&self, tlen: usize) -> Result<usize> {
        let mut total = 0;
        for (i, b) in self.temporal_branches()?.iter().enumerate() {
            let conv = (tlen + 1).checked_sub(b.kernel).filter(|&l| l >= 1);
            let pooled = conv.and_then(|l| b.pooling.output_len(l));
            match pooled {
                Some(l) => total += l,
                None => {
                    return Err(Error::config(
                        "input_length",
                        format!("temporal branch {} (kernel {}) has no output for {tlen} samples", i + 1, b.kernel),
                    ))
                }
            }
        }
        let spatial_ok = match self.variant {
            Variant::Modified => total >= self.adp_spatial_out,
            Variant::Original => Pooling::Avg(self.original_spatial_pool())
                .output_len(total)
                .and_then(|l| Pooling::Avg(self.original_fusion_pool()).output_len(l))
                .is_some(),
        };
        if !spatial_ok {
            return Err(Error::config(
                "input_length",
                format!("temporal output length {total} too short for the spatial and fusion stages"),
            ));
        }
        Ok(total)
    }

    /// Canonical `key=value` text, one entry per line.
    pub fn to_kv_text(&self) -> String {
        let windows: Vec<String> = self.inception_windows.iter().map(|w| w.to_string()).collect();
        format!(
            "variant={}\nnum_channels={}\nsampling_rate={}\ninception_windows={}\nnum_temporal_filters={}\n\
             num_spatial_filters={}\nhidden_units={}\ndropout_p={}\nnum_classes={}\nadp_temporal_out={}\n\
             adp_spatial_out={}\nadp_fusion_out={}\nfusion2_pool={}\npool_size={}\nleaky_alpha={}\n\
             bn_momentum={}\nbn_eps={}\n",
            self.variant,
            self.num_channels,
            self.sampling_rate,
            windows.join(","),
            self.num_temporal_filters,
            self.num_spatial_filters,
            self.hidden_units,
            self.dropout_p,
            self.num_classes,
            self.adp_temporal_out,
            self.adp_spatial_out,
            self.adp_fusion_out,
            self.fusion2_pool,
            self.pool_size,
            self.leaky_alpha,
            self.bn_momentum,
            self.bn_eps,
        )
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::seedvig();
        let mut seen = 0;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line without `=`: {line}")))?;
            let bad = || Error::Format(format!("bad value for `{key}`: {value}"));
            match key {
                "variant" => cfg.variant = value.parse()?,
                "num_channels" => cfg.num_channels = parse_num(value).ok_or_else(bad)?,
                "sampling_rate" => cfg.sampling_rate = parse_num(value).ok_or_else(bad)?,
                "inception_windows" => {
                    cfg.inception_windows = value
                        .split(',')
                        .map(|w| parse_num::<f64>(w.trim()))
                        .collect::<Option<_>>()
                        .ok_or_else(bad)?
                }
                "num_temporal_filters" => cfg.num_temporal_filters = parse_num(value).ok_or_else(bad)?,
                "num_spatial_filters" => cfg.num_spatial_filters = parse_num(value).ok_or_else(bad)?,
                "hidden_units" => cfg.hidden_units = parse_num(value).ok_or_else(bad)?,
                "dropout_p" => cfg.dropout_p = parse_num(value).ok_or_else(bad)?,
                "num_classes" => cfg.num_classes = parse_num(value).ok_or_else(bad)?,
                "adp_temporal_out" => cfg.adp_temporal_out = parse_num(value).ok_or_else(bad)?,
                "adp_spatial_out" => cfg.adp_spatial_out = parse_num(value).ok_or_else(bad)?,
                "adp_fusion_out" => cfg.adp_fusion_out = parse_num(value).ok_or_else(bad)?,
                "fusion2_pool" => cfg.fusion2_pool = parse_num(value).ok_or_else(bad)?,
                "pool_size" => cfg.pool_size = parse_num(value).ok_or_else(bad)?,
                "leaky_alpha" => cfg.leaky_alpha = parse_num(value).ok_or_else(bad)?,
                "bn_momentum" => cfg.bn_momentum = parse_num(value).ok_or_else(bad)?,
                "bn_eps" => cfg.bn_eps = parse_num(value).ok_or_else(bad)?,
                other => return Err(Error::Format(format!("unknown config key `{other}`"))),
            }
            seen += 1;
        }
        if seen != 17 {
            return Err(Error::Format(format!("config block has {seen} of 17 keys")));
        }
        Ok(cfg)
    }
}

fn parse_num<T: FromStr>(s: &str) -> Option<T> {
    s.parse().ok()
}

/// `floor(window * rate)`, rejecting kernels narrower than 2 samples.
pub fn temporal_kernel_size(window: f64, rate: f64) -> Result<usize> {
    if !(window > 0.0) || !(rate > 0.0) {
        return Err(Error::config("inception_windows", "window and rate must be positive"));
    }
    // Absorb representation error such as 0.29 * 100 = 28.999999999999996.
    let k = (window * rate + 1e-9).floor();
    if k < 2.0 {
        return Err(Error::config(
            "inception_windows",
            format!("window {window} s at {rate} Hz gives kernel {k} < 2"),
        ));
    }
    Ok(k as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_sizes_from_windows() {
        assert_eq!(temporal_kernel_size(0.5, 200.0).unwrap(), 100);
        assert_eq!(temporal_kernel_size(0.125, 200.0).unwrap(), 25);
        assert_eq!(temporal_kernel_size(0.125, 100.0).unwrap(), 12);
        assert!(matches!(temporal_kernel_size(0.005, 200.0), Err(Error::Config { .. })));
    }

    #[test]
    fn modified_branch_widths_at_200hz() {
        let widths: Vec<usize> = ModelConfig::seedvig()
            .temporal_branches()
            .unwrap()
            .iter()
            .map(|b| b.kernel)
            .collect();
        assert_eq!(widths, vec![100, 50, 25, 25, 12]);
    }

    #[test]
    fn original_has_three_fixed_pool_branches() {
        let b = ModelConfig::seedvig().with_variant(Variant::Original).temporal_branches().unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|b| b.pooling == Pooling::Avg(8)));
    }

    #[test]
    fn temporal_lengths_match_branch_oracle() {
        assert_eq!(ModelConfig::seedvig().temporal_length(200).unwrap(), 91);
        let orig = ModelConfig::seedvig().with_variant(Variant::Original);
        assert_eq!(orig.temporal_length(200).unwrap(), 52);
        assert!(ModelConfig::seedvig().temporal_length(99).is_err());
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut c = ModelConfig::seedvig();
        c.num_channels = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::seedvig();
        c.dropout_p = 1.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::seedvig();
        c.adp_fusion_out = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::seedvig();
        c.sampling_rate = 30.0;
        assert!(c.validate().is_err(), "0.125 s at 15 Hz is a 1-sample kernel");
        assert!(ModelConfig::stew(3).validate().is_ok());
    }

    #[test]
    fn kv_text_round_trips() {
        let mut c = ModelConfig::stew(3).with_variant(Variant::Original);
        c.leaky_alpha = 0.05;
        let back = ModelConfig::from_kv_text(&c.to_kv_text()).unwrap();
        assert_eq!(back, c);
        assert!(ModelConfig::from_kv_text("variant=modified\n").is_err());
    }
}
