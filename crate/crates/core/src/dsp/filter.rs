use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// One second-order section, `a0` normalized to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    /// `[a1, a2]`.
    pub a: [f64; 2],
}

impl Biquad {
    /// Response at normalized angular frequency `w` (radians per sample).
    pub fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b[0] + self.b[1] * z1 + self.b[2] * z2;
        let den = 1.0 + self.a[0] * z1 + self.a[1] * z2;
        num / den
    }

    /// Roots of `z^2 + a1 z + a2`.
    pub fn poles(&self) -> [Complex64; 2] {
        let [a1, a2] = self.a;
        let disc = Complex64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
        [(-a1 + disc) / 2.0, (-a1 - disc) / 2.0]
    }

    /// Steady-state delay-line contents for a unit step input (transposed direct form II).
    fn step_state(&self) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let (r0, r1) = (b1 - a1 * b0, b2 - a2 * b0);
        let det = 1.0 + a1 + a2;
        [(r0 + r1) / det, ((1.0 + a1) * r1 - a2 * r0) / det]
    }

    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / (1.0 + self.a[0] + self.a[1])
    }
}

/// Cascade of second-order sections applied in order.
#[derive(Clone, Debug, PartialEq)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
}

impl BiquadCascade {
    /// Filter order (two per section).
    pub fn order(&self) -> usize {
        2 * self.sections.len()
    }

    /// Complex response at `freq` Hz for sampling rate `fs`.
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let w = 2.0 * PI * freq / fs;
        self.sections.iter().map(|s| s.response(w)).product()
    }

    /// Magnitude in dB at `freq` Hz.
    pub fn gain_db(&self, freq: f64, fs: f64) -> f64 {
        20.0 * self.response(freq, fs).norm().log10()
    }

    pub fn poles(&self) -> Vec<Complex64> {
        self.sections.iter().flat_map(|s| s.poles()).collect()
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }

    /// Single causal pass. `state` holds two delay values per section.
    fn run(&self, signal: &mut [f64], state: &mut [[f64; 2]]) {
        for (s, z) in self.sections.iter().zip(state.iter_mut()) {
            let [b0, b1, b2] = s.b;
            let [a1, a2] = s.a;
            let [mut z0, mut z1] = *z;
            for v in signal.iter_mut() {
                let x = *v;
                let y = b0 * x + z0;
                z0 = b1 * x - a1 * y + z1;
                z1 = b2 * x - a2 * y;
                *v = y;
            }
            *z = [z0, z1];
        }
    }

    /// Causal filtering from rest.
    pub fn filter(&self, signal: &[f64]) -> Vec<f64> {
        let mut out = signal.to_vec();
        let mut state = vec![[0.0; 2]; self.sections.len()];
        self.run(&mut out, &mut state);
        out
    }

    /// Delay-line state that makes a constant input of 1 pass without transient.
    fn step_states(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let [z0, z1] = s.step_state();
                let st = [z0 * scale, z1 * scale];
                scale *= s.dc_gain();
                st
            })
            .collect()
    }

    /// Number of samples reflected onto each end by [`BiquadCascade::filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * self.order()
    }

    /// Zero-phase forward-backward filtering.
    ///
    /// Both ends are extended by odd reflection of `3 × order` samples, and each
    /// pass starts from the steady state matching its first sample so that edge
    /// transients stay small.
    pub fn filtfilt(&self, signal: &[f64]) -> Result<Vec<f64>> {
        let pad = self.pad_len();
        let n = signal.len();
        if n <= pad {
            return Err(Error::Length { len: n, min: pad });
        }
        let (first, last) = (signal[0], signal[n - 1]);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
        ext.extend_from_slice(signal);
        ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

        let zi = self.step_states();
        let scaled = |x0: f64| zi.iter().map(|z| [z[0] * x0, z[1] * x0]).collect::<Vec<_>>();
        let mut state = scaled(ext[0]);
        self.run(&mut ext, &mut state);
        ext.reverse();
        let mut state = scaled(ext[0]);
        self.run(&mut ext, &mut state);
        ext.reverse();
        Ok(ext[pad..pad + n].to_vec())
    }
}

/// Bilinear map of an s-plane point with sampling rate `fs`.
fn bilinear(s: Complex64, fs: f64) -> Complex64 {
    (2.0 * fs + s) / (2.0 * fs - s)
}

/// Frequency pre-warping: analog angular frequency landing on `freq` Hz after the bilinear map.
fn prewarp(freq: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * freq / fs).tan()
}

/// Left-half-plane poles of the normalized Butterworth low-pass prototype of order `n`.
fn prototype_poles(n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|k| Complex64::from_polar(1.0, PI * (2 * k + n + 1) as f64 / (2 * n) as f64))
        .collect()
}

/// Group digital poles into conjugate pairs (or pairs of real poles), one per section.
fn pair_poles(mut poles: Vec<Complex64>) -> Vec<[f64; 2]> {
    const TOL: f64 = 1e-10;
    poles.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let mut sections = Vec::new();
    let mut reals = Vec::new();
    for p in &poles {
        if p.im > TOL {
            sections.push([-2.0 * p.re, p.norm_sqr()]);
        } else if p.im.abs() <= TOL {
            reals.push(p.re);
        }
    }
    for pair in reals.chunks(2) {
        match *pair {
            [r1, r2] => sections.push([-(r1 + r2), r1 * r2]),
            [r] => sections.push([-r, 0.0]),
            _ => {}
        }
    }
    sections
}

fn check_order(order: usize) -> Result<()> {
    if order < 2 || order % 2 != 0 {
        return Err(Error::param("order", format!("must be even and >= 2, got {order}")));
    }
    Ok(())
}

fn check_rate(fs: f64) -> Result<()> {
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(Error::param("fs", format!("sampling rate must be positive, got {fs}")));
    }
    Ok(())
}

/// Butterworth band-pass of total order `order` (`order / 2` prototype poles).
///
/// Each section carries one zero at DC and one at Nyquist and is scaled to
/// unit gain at the digital centre frequency, so the cascade peaks at 0 dB.
pub fn butter_bandpass_design(low: f64, high: f64, fs: f64, order: usize) -> Result<BiquadCascade> {
    check_rate(fs)?;
    check_order(order)?;
    let nyquist = fs / 2.0;
    if high >= nyquist {
        return Err(Error::Nyquist { freq: high, nyquist });
    }
    if !(low > 0.0 && low < high) {
        return Err(Error::param("low", format!("need 0 < low < high, got low={low}, high={high}")));
    }
    let (wl, wh) = (prewarp(low, fs), prewarp(high, fs));
    let bw = wh - wl;
    let w0 = (wl * wh).sqrt();
    let mut poles = Vec::with_capacity(order);
    for p in prototype_poles(order / 2) {
        let half = p * (bw / 2.0);
        let root = (half * half - w0 * w0).sqrt();
        poles.push(bilinear(half + root, fs));
        poles.push(bilinear(half - root, fs));
    }
    let wc = 2.0 * (w0 / (2.0 * fs)).atan();
    let sections = pair_poles(poles)
        .into_iter()
        .map(|a| {
            let raw = Biquad { b: [1.0, 0.0, -1.0], a };
            let g = 1.0 / raw.response(wc).norm();
            Biquad {
                b: [g, 0.0, -g],
                a,
            }
        })
        .collect();
    Ok(BiquadCascade { sections })
}

/// Butterworth low-pass of total order `order`, every section normalized to unit DC gain.
pub fn butter_lowpass_design(cutoff: f64, fs: f64, order: usize) -> Result<BiquadCascade> {
    check_rate(fs)?;
    check_order(order)?;
    let nyquist = fs / 2.0;
    if cutoff >= nyquist {
        return Err(Error::Nyquist { freq: cutoff, nyquist });
    }
    if cutoff <= 0.0 {
        return Err(Error::param("cutoff", format!("must be positive, got {cutoff}")));
    }
    let wc = prewarp(cutoff, fs);
    let poles = prototype_poles(order).into_iter().map(|p| bilinear(p * wc, fs)).collect();
    let sections = pair_poles(poles)
        .into_iter()
        .map(|a| {
            let g = (1.0 + a[0] + a[1]) / 4.0;
            Biquad {
                b: [g, 2.0 * g, g],
                a,
            }
        })
        .collect();
    Ok(BiquadCascade { sections })
}

/// Anti-aliased downsampling by an integer factor.
///
/// A zero-phase order-8 Butterworth low-pass at `0.8 × fs / (2 × factor)` is
/// applied before keeping every `factor`-th sample, starting with the first.
pub fn decimate(signal: &[f64], fs: f64, factor: usize) -> Result<Vec<f64>> {
    if factor < 2 {
        return Err(Error::param("factor", format!("must be >= 2, got {factor}")));
    }
    let lp = butter_lowpass_design(0.8 * fs / (2.0 * factor as f64), fs, 8)?;
    let filtered = lp.filtfilt(signal)?;
    Ok(filtered.into_iter().step_by(factor).collect())
}
