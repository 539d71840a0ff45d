//! Class-separable EEG-like data: 1/f background noise mixed across
//! channels, plus a narrowband Hann-windowed burst whose frequency band
//! identifies the class.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::dsp::{ContinuousRecording, EpochDataset};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandProfile {
    pub center: f64,
    pub bandwidth: f64,
    /// Peak burst amplitude, in units of the noise RMS when `noise.level` is 1.
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseConfig {
    /// Power falls as `1 / f^exponent`.
    pub exponent: f64,
    /// Per-channel RMS of the background.
    pub level: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            exponent: 1.0,
            level: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthConfig {
    pub channels: usize,
    pub fs: f64,
    pub epoch_len: usize,
    pub epochs_per_class: usize,
    pub classes: Vec<BandProfile>,
    pub noise: NoiseConfig,
    /// Blend between identity (0) and a random orthonormal mixing (1).
    pub mixing: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Two classes, 10 Hz against 20 Hz bursts at three times the noise
    /// RMS, in the 17-channel, 200 Hz geometry.
    pub fn demo2class(seed: u64) -> Self {
        SynthConfig {
            channels: 17,
            fs: 200.0,
            epoch_len: 200,
            epochs_per_class: 1000,
            classes: vec![
                BandProfile {
                    center: 10.0,
                    bandwidth: 2.0,
                    amplitude: 3.0,
                },
                BandProfile {
                    center: 20.0,
                    bandwidth: 2.0,
                    amplitude: 3.0,
                },
            ],
            noise: NoiseConfig::default(),
            mixing: 0.5,
            seed,
        }
    }

    /// The same geometry with zero-amplitude bursts: labels carry no signal.
    pub fn chance2class(seed: u64) -> Self {
        let mut cfg = Self::demo2class(seed);
        for c in cfg.classes.iter_mut() {
            c.amplitude = 0.0;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("channels", "must be at least 1"));
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::config("fs", format!("{} is not a positive rate", self.fs)));
        }
        if self.epoch_len < 2 {
            return Err(Error::config("epoch_len", "need at least 2 samples"));
        }
        if self.epochs_per_class == 0 {
            return Err(Error::config("epochs_per_class", "must be at least 1"));
        }
        if self.classes.len() < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        let nyquist = self.fs / 2.0;
        for (i, b) in self.classes.iter().enumerate() {
            let field = |f: &str| format!("classes[{i}].{f}");
            if !(b.bandwidth >= 0.0 && b.bandwidth.is_finite()) {
                return Err(Error::config(field("bandwidth"), format!("{} is negative", b.bandwidth)));
            }
            if !(b.center - b.bandwidth / 2.0 > 0.0 && b.center + b.bandwidth / 2.0 < nyquist) {
                return Err(Error::config(
                    field("center"),
                    format!(
                        "band {} ± {} Hz must lie inside (0, {nyquist}) Hz",
                        b.center,
                        b.bandwidth / 2.0
                    ),
                ));
            }
            if !(b.amplitude >= 0.0 && b.amplitude.is_finite()) {
                return Err(Error::config(field("amplitude"), format!("{} is negative", b.amplitude)));
            }
        }
        if !(self.noise.level >= 0.0 && self.noise.level.is_finite()) {
            return Err(Error::config("noise.level", "must be finite and non-negative"));
        }
        if !self.noise.exponent.is_finite() {
            return Err(Error::config("noise.exponent", "must be finite"));
        }
        if !(0.0..=1.0).contains(&self.mixing) {
            return Err(Error::config("mixing", format!("{} outside [0, 1]", self.mixing)));
        }
        Ok(())
    }

    pub fn num_epochs(&self) -> usize {
        self.classes.len() * self.epochs_per_class
    }
}

/// Random orthonormal matrix by Gram-Schmidt on Gaussian rows.
fn orthonormal<R: Rng>(n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    q
}

fn rescale_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

struct Generator {
    mixing: Vec<Vec<f64>>,
    /// Per-class spatial gain of the burst on each channel.
    patterns: Vec<Vec<f64>>,
    shaping: Vec<f64>,
    window: Vec<f64>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    ifft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Generator {
    fn new(cfg: &SynthConfig) -> Self {
        let n = cfg.channels;
        let mut r = rng::stream(cfg.seed, rng::STREAM_SYNTH_LAYOUT);
        let q = orthonormal(n, &mut r);
        let mixing = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| cfg.mixing * q[i][j] + if i == j { 1.0 - cfg.mixing } else { 0.0 })
                    .collect()
            })
            .collect();
        let patterns = cfg
            .classes
            .iter()
            .map(|_| (0..n).map(|_| r.gen_range(0.5..1.0)).collect())
            .collect();
        let l = cfg.epoch_len;
        let shaping = (0..l)
            .map(|k| {
                let bin = k.min(l - k);
                if bin == 0 {
                    0.0
                } else {
                    (bin as f64 * cfg.fs / l as f64).powf(-cfg.noise.exponent / 2.0)
                }
            })
            .collect();
        let window = (0..l).map(|t| 0.5 - 0.5 * (2.0 * PI * t as f64 / (l - 1) as f64).cos()).collect();
        let mut planner = FftPlanner::new();
        Generator {
            mixing,
            patterns,
            shaping,
            window,
            fft: planner.plan_fft_forward(l),
            ifft: planner.plan_fft_inverse(l),
        }
    }

    fn pink<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut buf: Vec<Complex64> = self
            .shaping
            .iter()
            .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf.iter_mut().zip(&self.shaping).for_each(|(z, g)| *z *= g);
        self.ifft.process(&mut buf);
        buf.iter().map(|z| z.re).collect()
    }

    /// Channel-major `C × L` epoch of class `class`.
    fn epoch(&self, cfg: &SynthConfig, index: usize, class: usize) -> Vec<f64> {
        let (c, l) = (cfg.channels, cfg.epoch_len);
        let mut r = rng::stream(cfg.seed, rng::STREAM_SYNTH + index as u64);
        let sources: Vec<Vec<f64>> = (0..c).map(|_| self.pink(&mut r)).collect();
        let band = &cfg.classes[class];
        let freq = band.center + band.bandwidth * (r.gen::<f64>() - 0.5);
        let phase = r.gen_range(0.0..2.0 * PI);
        let mut out = vec![0.0; c * l];
        for (ch, row) in out.chunks_exact_mut(l).enumerate() {
            for (src, m) in sources.iter().zip(&self.mixing[ch]) {
                row.iter_mut().zip(src).for_each(|(o, s)| *o += m * s);
            }
            rescale_rms(row, cfg.noise.level);
            let gain = band.amplitude * self.patterns[class][ch];
            for (t, o) in row.iter_mut().enumerate() {
                let arg = 2.0 * PI * freq * t as f64 / cfg.fs + phase;
                *o += gain * self.window[t] * arg.sin();
            }
        }
        out
    }
}

/// Labels cycle through the classes: epoch `i` belongs to class `i mod K`.
pub fn generate(cfg: &SynthConfig) -> Result<EpochDataset> {
    cfg.validate()?;
    let k = cfg.classes.len();
    let gen = Generator::new(cfg);
    let n = cfg.num_epochs();
    let mut data = Vec::with_capacity(n * cfg.channels * cfg.epoch_len);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    for (i, &y) in labels.iter().enumerate() {
        data.extend(gen.epoch(cfg, i, y));
    }
    EpochDataset::new(cfg.channels, cfg.epoch_len, cfg.fs, k, labels, data)
}

/// Track value that labels back to `class`: PERCLOS levels for two classes,
/// 1–9 ratings for three.
pub fn track_value(class: usize, num_classes: usize) -> Result<f64> {
    match num_classes {
        2 => Ok([0.25, 0.75][class]),
        3 => Ok([2.0, 5.0, 8.0][class]),
        k => Err(Error::config(
            "classes",
            format!("a label track can encode 2 or 3 classes, not {k}"),
        )),
    }
}

/// The epochs of [`generate`] laid end to end as one recording, with a
/// label track holding each epoch's class from its first sample onward.
pub fn generate_continuous(cfg: &SynthConfig) -> Result<ContinuousRecording> {
    let ds = generate(cfg)?;
    let k = cfg.classes.len();
    let (c, l) = (cfg.channels, cfg.epoch_len);
    let n = ds.len();
    let mut samples = vec![0.0; c * n * l];
    for i in 0..n {
        for (ch, src) in ds.epoch(i).chunks_exact(l).enumerate() {
            samples[ch * n * l + i * l..][..l].copy_from_slice(src);
        }
    }
    let mut track = Vec::with_capacity(n + 1);
    for (i, &y) in ds.labels.iter().enumerate() {
        track.push(((i * l) as f64 / cfg.fs, track_value(y, k)?));
    }
    track.push(((n * l) as f64 / cfg.fs, track_value(ds.labels[n - 1], k)?));
    ContinuousRecording::new(c, cfg.fs, samples)?.with_label_track(track)
}
