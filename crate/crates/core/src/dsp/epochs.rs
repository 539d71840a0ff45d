use crate::error::{Error, Result};

/// Multi-channel continuous signal, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousRecording {
    pub channels: usize,
    pub sampling_rate: f64,
    /// `channels × len` values, one channel after another.
    pub samples: Vec<f64>,
    /// `(time in seconds, value)` pairs with non-decreasing times.
    pub label_track: Option<Vec<(f64, f64)>>,
}

impl ContinuousRecording {
    pub fn new(channels: usize, sampling_rate: f64, samples: Vec<f64>) -> Result<Self> {
        if channels == 0 || samples.is_empty() || samples.len() % channels != 0 {
            return Err(Error::Data(format!(
                "{} samples cannot form {channels} non-empty channels",
                samples.len()
            )));
        }
        if !(sampling_rate > 0.0 && sampling_rate.is_finite()) {
            return Err(Error::Data(format!("invalid sampling rate {sampling_rate}")));
        }
        Ok(ContinuousRecording {
            channels,
            sampling_rate,
            samples,
            label_track: None,
        })
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sampling_rate
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.len();
        &self.samples[c * n..(c + 1) * n]
    }

    /// Attach a label track after checking its ordering and time range.
    pub fn with_label_track(mut self, track: Vec<(f64, f64)>) -> Result<Self> {
        let end = self.duration();
        for (i, &(t, v)) in track.iter().enumerate() {
            if !t.is_finite() || !v.is_finite() {
                return Err(Error::Data(format!("label track row {i} is not finite")));
            }
            if t < 0.0 || t > end {
                return Err(Error::Data(format!("label time {t} s outside recording [0, {end}] s")));
            }
            if i > 0 && t < track[i - 1].0 {
                return Err(Error::Data(format!("label times decrease at row {i}")));
            }
        }
        self.label_track = Some(track);
        Ok(self)
    }
}

/// Fixed-length windows cut from a recording, not yet labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct Epochs {
    pub channels: usize,
    pub epoch_len: usize,
    pub sampling_rate: f64,
    /// First sample of each epoch in the source recording.
    pub starts: Vec<usize>,
    /// `E × C × L` values.
    pub data: Vec<f64>,
}

impl Epochs {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    fn stride(&self) -> usize {
        self.channels * self.epoch_len
    }

    pub fn epoch(&self, i: usize) -> &[f64] {
        &self.data[i * self.stride()..(i + 1) * self.stride()]
    }

    /// Centre of epoch `i` in seconds from the start of the recording.
    pub fn midpoint(&self, i: usize) -> f64 {
        (self.starts[i] as f64 + self.epoch_len as f64 / 2.0) / self.sampling_rate
    }

    fn retain(&mut self, keep: &[bool]) {
        let stride = self.stride();
        let mut data = Vec::with_capacity(self.data.len());
        let mut starts = Vec::new();
        for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
            starts.push(self.starts[i]);
        }
        self.data = data;
        self.starts = starts;
    }
}

/// Labeled `E × C × L` examples.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochDataset {
    pub channels: usize,
    pub epoch_len: usize,
    pub sampling_rate: f64,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    pub data: Vec<f64>,
}

impl EpochDataset {
    pub fn new(
        channels: usize,
        epoch_len: usize,
        sampling_rate: f64,
        num_classes: usize,
        labels: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 || epoch_len == 0 {
            return Err(Error::Data("epochs need at least one channel and one sample".into()));
        }
        if data.len() != labels.len() * channels * epoch_len {
            return Err(Error::Data(format!(
                "{} values do not form {} epochs of {channels}x{epoch_len}",
                data.len(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Data(format!("need at least 2 classes, got {num_classes}")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label(format!("label {l} outside 0..{num_classes}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite sample in epoch data".into()));
        }
        Ok(EpochDataset {
            channels,
            epoch_len,
            sampling_rate,
            num_classes,
            labels,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn epoch(&self, i: usize) -> &[f64] {
        let stride = self.channels * self.epoch_len;
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Per-class counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Epochs at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> EpochDataset {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.epoch_len);
        for &i in indices {
            data.extend_from_slice(self.epoch(i));
        }
        EpochDataset {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            data,
            ..*self
        }
    }

    /// Fail unless every class is represented.
    pub fn check_all_classes(&self) -> Result<()> {
        match self.class_counts().iter().position(|&c| c == 0) {
            Some(k) => Err(Error::Stratification(format!("class {k} has no epochs"))),
            None => Ok(()),
        }
    }
}

/// Window and step in samples; errors name the offending field.
fn window_samples(seconds: f64, fs: f64, field: &str) -> Result<usize> {
    let n = (seconds * fs).round();
    if !(seconds > 0.0) || n < 1.0 {
        return Err(Error::config(field, format!("{seconds} s is less than one sample at {fs} Hz")));
    }
    Ok(n as usize)
}

/// Cut `rec` into windows of `window` seconds every `step` seconds.
///
/// Boundaries are computed in samples: `L = round(window·fs)`,
/// `S = round(step·fs)`, and epoch `i` covers samples `[i·S, i·S + L)`.
pub fn segment_epochs(rec: &ContinuousRecording, window: f64, step: f64) -> Result<Epochs> {
    let fs = rec.sampling_rate;
    let l = window_samples(window, fs, "window")?;
    let s = window_samples(step, fs, "step")?;
    let n = rec.len();
    if l > n {
        return Err(Error::EmptyInput(format!(
            "window of {window} s exceeds recording of {} s",
            rec.duration()
        )));
    }
    let count = (n - l) / s + 1;
    let mut data = Vec::with_capacity(count * rec.channels * l);
    let starts: Vec<usize> = (0..count).map(|i| i * s).collect();
    for &start in &starts {
        for c in 0..rec.channels {
            data.extend_from_slice(&rec.channel(c)[start..start + l]);
        }
    }
    Ok(Epochs {
        channels: rec.channels,
        epoch_len: l,
        sampling_rate: fs,
        starts,
        data,
    })
}

/// Map one epoch affinely onto `[0, 1]`; a constant epoch becomes all 0.5.
pub fn minmax_scale(epoch: &mut [f64]) -> Result<()> {
    if epoch.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in epoch".into()));
    }
    let lo = epoch.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = epoch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range == 0.0 {
        epoch.fill(0.5);
        return Ok(());
    }
    for v in epoch.iter_mut() {
        // Clamp guards against the last ulp of rounding at the extremes.
        *v = ((*v - lo) / range).clamp(0.0, 1.0);
    }
    Ok(())
}

/// Drowsy (1) when PERCLOS is at least 0.5, awake (0) otherwise.
pub fn perclos_label(value: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::Label(format!("PERCLOS {value} outside [0, 1]")));
    }
    Ok(usize::from(value >= 0.5))
}

/// How track values become class indices.
#[derive(Clone, Debug, PartialEq)]
pub enum LabelMode {
    /// PERCLOS in `[0, 1]`, two classes.
    Perclos,
    /// A 1–9 rating; the class is the number of thresholds strictly below the rating.
    Rating { thresholds: Vec<f64> },
}

impl LabelMode {
    /// Default workload binning: ratings up to 3, 4 to 6, and 7 or more.
    pub fn rating3() -> Self {
        LabelMode::Rating {
            thresholds: vec![3.0, 6.0],
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            LabelMode::Perclos => 2,
            LabelMode::Rating { thresholds } => thresholds.len() + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LabelMode::Rating { thresholds } = self {
            if thresholds.is_empty() {
                return Err(Error::config("thresholds", "rating mode needs at least one threshold"));
            }
            if thresholds.windows(2).any(|w| !(w[0] < w[1])) || thresholds.iter().any(|t| !t.is_finite()) {
                return Err(Error::config("thresholds", "must be finite and strictly increasing"));
            }
        }
        Ok(())
    }

    pub fn label(&self, value: f64) -> Result<usize> {
        match self {
            LabelMode::Perclos => perclos_label(value),
            LabelMode::Rating { thresholds } => {
                if !(1.0..=9.0).contains(&value) {
                    return Err(Error::Label(format!("rating {value} outside [1, 9]")));
                }
                Ok(thresholds.iter().filter(|&&t| value > t).count())
            }
        }
    }
}

/// Track value in force at time `t`: the last sample at or before `t`.
///
/// Times past the final sample are not covered.
fn track_value(track: &[(f64, f64)], t: f64) -> Option<f64> {
    let last = track.last()?;
    if t > last.0 {
        return None;
    }
    let idx = track.partition_point(|&(ts, _)| ts <= t);
    (idx > 0).then(|| track[idx - 1].1)
}

/// Label every epoch from the track value at its midpoint.
pub fn attach_labels(epochs: Epochs, track: &[(f64, f64)], mode: &LabelMode) -> Result<EpochDataset> {
    mode.validate()?;
    let mut labels = Vec::with_capacity(epochs.len());
    for i in 0..epochs.len() {
        let mid = epochs.midpoint(i);
        let Some(v) = track_value(track, mid) else {
            let span = match (track.first(), track.last()) {
                (Some(a), Some(b)) => format!("[{}, {}] s", a.0, b.0),
                _ => "nothing (empty track)".into(),
            };
            return Err(Error::Alignment(format!(
                "epoch {i} midpoint {mid} s is not covered; the track spans {span}"
            )));
        };
        labels.push(mode.label(v)?);
    }
    EpochDataset::new(
        epochs.channels,
        epochs.epoch_len,
        epochs.sampling_rate,
        mode.num_classes(),
        labels,
        epochs.data,
    )
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Drop epochs in which any `|sample|` exceeds `k` times its channel's median
/// absolute deviation (computed over all epochs). Returns how many were dropped.
pub fn reject_by_mad(epochs: &mut Epochs, k: f64) -> Result<usize> {
    if !(k > 0.0) {
        return Err(Error::config("reject_mad", format!("multiple must be positive, got {k}")));
    }
    let (c, l) = (epochs.channels, epochs.epoch_len);
    let mut limits = Vec::with_capacity(c);
    for ch in 0..c {
        let mut vals: Vec<f64> = (0..epochs.len())
            .flat_map(|e| epochs.epoch(e)[ch * l..(ch + 1) * l].iter().copied())
            .collect();
        let m = median(&mut vals);
        for v in vals.iter_mut() {
            *v = (*v - m).abs();
        }
        limits.push(k * median(&mut vals));
    }
    let keep: Vec<bool> = (0..epochs.len())
        .map(|e| {
            let ep = epochs.epoch(e);
            (0..c).all(|ch| ep[ch * l..(ch + 1) * l].iter().all(|v| v.abs() <= limits[ch]))
        })
        .collect();
    let dropped = keep.iter().filter(|&&k| !k).count();
    epochs.retain(&keep);
    Ok(dropped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn track_value_uses_preceding_sample() {
        let track = [(0.0, 0.1), (1.0, 0.9), (2.0, 0.2)];
        assert_eq!(track_value(&track, 0.5), Some(0.1));
        assert_eq!(track_value(&track, 1.0), Some(0.9));
        assert_eq!(track_value(&track, 2.0), Some(0.2));
        assert_eq!(track_value(&track, 2.1), None);
        assert_eq!(track_value(&[(0.5, 1.0)], 0.2), None);
    }

    #[test]
    fn rating_bins() {
        let m = LabelMode::rating3();
        let got: Vec<usize> = [1.0, 3.0, 3.5, 6.0, 7.0, 9.0].iter().map(|&v| m.label(v).unwrap()).collect();
        assert_eq!(got, vec![0, 0, 1, 1, 2, 2]);
        assert!(m.label(0.5).is_err());
    }
}
