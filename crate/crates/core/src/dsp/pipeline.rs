use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::epochs::{
    attach_labels, minmax_scale, reject_by_mad, segment_epochs, ContinuousRecording, EpochDataset, LabelMode,
};
use super::filter::{butter_bandpass_design, decimate};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 17 channels, 1–75 Hz, down to 200 Hz, 1 s epochs, PERCLOS labels.
    Seedvig,
    /// 14 channels at 128 Hz, 1 s epochs every 0.5 s, min-max scaled, rating labels.
    Stew,
    /// No filtering or resampling unless requested.
    Custom,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Seedvig => "seedvig",
            Profile::Stew => "stew",
            Profile::Custom => "custom",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seedvig" => Ok(Profile::Seedvig),
            "stew" => Ok(Profile::Stew),
            "custom" => Ok(Profile::Custom),
            _ => Err(Error::config("profile", format!("unknown profile `{s}` (seedvig, stew, custom)"))),
        }
    }
}

/// Resolved settings for [`preprocess_pipeline`].
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    /// Required channel count, if the profile fixes one.
    pub channels: Option<usize>,
    /// Band-pass edges in Hz.
    pub band: Option<(f64, f64)>,
    pub order: usize,
    pub decimate: Option<usize>,
    pub window: f64,
    pub step: f64,
    pub scale: bool,
    pub labels: LabelMode,
    /// Amplitude rejection multiple of the channel MAD.
    pub reject_mad: Option<f64>,
}

const SEEDVIG_RATE: f64 = 200.0;

impl PreprocessConfig {
    /// Profile defaults for a recording sampled at `input_rate`.
    pub fn for_profile(profile: Profile, input_rate: f64) -> Result<Self> {
        Ok(match profile {
            Profile::Seedvig => {
                let ratio = input_rate / SEEDVIG_RATE;
                let factor = ratio.round();
                if factor < 1.0 || (ratio - factor).abs() > 1e-9 {
                    return Err(Error::config(
                        "decimate",
                        format!("input rate {input_rate} Hz is not an integer multiple of {SEEDVIG_RATE} Hz"),
                    ));
                }
                PreprocessConfig {
                    channels: Some(17),
                    band: Some((1.0, 75.0)),
                    order: 4,
                    decimate: (factor >= 2.0).then_some(factor as usize),
                    window: 1.0,
                    step: 1.0,
                    scale: false,
                    labels: LabelMode::Perclos,
                    reject_mad: None,
                }
            }
            Profile::Stew => PreprocessConfig {
                channels: Some(14),
                // 75 Hz is above Nyquist at 128 Hz.
                band: Some((1.0, 45.0)),
                order: 4,
                decimate: None,
                window: 1.0,
                step: 0.5,
                scale: true,
                labels: LabelMode::rating3(),
                reject_mad: None,
            },
            Profile::Custom => PreprocessConfig {
                channels: None,
                band: None,
                order: 4,
                decimate: None,
                window: 1.0,
                step: 1.0,
                scale: false,
                labels: LabelMode::Perclos,
                reject_mad: None,
            },
        })
    }

    /// Stable `key = value` rendering used for manifests and digests.
    pub fn describe(&self) -> Vec<(String, String)> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let labels = match &self.labels {
            LabelMode::Perclos => "perclos".to_string(),
            LabelMode::Rating { thresholds } => format!(
                "rating:{}",
                thresholds.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
            ),
        };
        vec![
            ("channels".into(), opt(self.channels.map(|c| c.to_string()))),
            ("band".into(), opt(self.band.map(|(l, h)| format!("{l}-{h}")))),
            ("order".into(), self.order.to_string()),
            ("decimate".into(), opt(self.decimate.map(|d| d.to_string()))),
            ("window".into(), self.window.to_string()),
            ("step".into(), self.step.to_string()),
            ("scale".into(), self.scale.to_string()),
            ("labels".into(), labels),
            ("reject_mad".into(), opt(self.reject_mad.map(|k| k.to_string()))),
        ]
    }
}

/// Filter, resample, segment, optionally reject and scale, then label.
pub fn preprocess_pipeline(rec: &ContinuousRecording, cfg: &PreprocessConfig) -> Result<EpochDataset> {
    if let Some(c) = cfg.channels {
        if rec.channels != c {
            return Err(Error::config(
                "channels",
                format!("recording has {} channels, profile expects {c}", rec.channels),
            ));
        }
    }
    cfg.labels.validate()?;
    let track = rec
        .label_track
        .as_deref()
        .ok_or_else(|| Error::Data("labeled profile but the recording has no label track".into()))?;

    let mut fs = rec.sampling_rate;
    let mut channels: Vec<Vec<f64>> = (0..rec.channels).map(|c| rec.channel(c).to_vec()).collect();
    if let Some((low, high)) = cfg.band {
        let bp = butter_bandpass_design(low, high, fs, cfg.order)?;
        for ch in channels.iter_mut() {
            *ch = bp.filtfilt(ch)?;
        }
    }
    if let Some(factor) = cfg.decimate {
        for ch in channels.iter_mut() {
            *ch = decimate(ch, fs, factor)?;
        }
        fs /= factor as f64;
    }
    let conditioned = ContinuousRecording::new(rec.channels, fs, channels.concat())?;
    let mut epochs = segment_epochs(&conditioned, cfg.window, cfg.step)?;
    if let Some(k) = cfg.reject_mad {
        reject_by_mad(&mut epochs, k)?;
        if epochs.is_empty() {
            return Err(Error::EmptyInput("every epoch was rejected".into()));
        }
    }
    if cfg.scale {
        let stride = epochs.channels * epochs.epoch_len;
        for ep in epochs.data.chunks_exact_mut(stride) {
            minmax_scale(ep)?;
        }
    }
    attach_labels(epochs, track, &cfg.labels)
}
