use std::path::Path;

use super::{put_f32s, put_u32, to_u32, Reader};
use crate::dsp::{ContinuousRecording, EpochDataset};
use crate::error::{Error, Result};

const EEGC_MAGIC: &[u8; 4] = b"EEGC";
const EEGE_MAGIC: &[u8; 4] = b"EEGE";
const VERSION: u32 = 1;

fn integer_rate(fs: f64) -> Result<u32> {
    if fs.fract() != 0.0 || !(1.0..=u32::MAX as f64).contains(&fs) {
        return Err(Error::Format(format!("sampling rate {fs} Hz is not a positive integer")));
    }
    Ok(fs as u32)
}

/// Serialize samples (not the label track) as EEGC.
pub fn write_eegc(rec: &ContinuousRecording) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + rec.samples.len() * 4);
    out.extend_from_slice(EEGC_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(rec.channels, "channels")?);
    put_u32(&mut out, integer_rate(rec.sampling_rate)?);
    out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
    put_f32s(&mut out, &rec.samples);
    Ok(out)
}

pub fn read_eegc(bytes: &[u8]) -> Result<ContinuousRecording> {
    let mut r = Reader::new(bytes, "EEGC");
    r.magic(EEGC_MAGIC)?;
    r.version(VERSION)?;
    let c = r.u32()? as usize;
    let fs = r.u32()?;
    let n = usize::try_from(r.u64()?).map_err(|_| Error::Format("EEGC: sample count too large".into()))?;
    if c == 0 || n == 0 || fs == 0 {
        return Err(Error::Format(format!("EEGC: empty header (C={c}, fs={fs}, N={n})")));
    }
    let total = c
        .checked_mul(n)
        .ok_or_else(|| Error::Format("EEGC: C×N overflows".into()))?;
    let samples = r.f32s(total)?;
    r.finish()?;
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("EEGC: non-finite sample".into()));
    }
    ContinuousRecording::new(c, fs as f64, samples)
}

pub fn write_eege(ds: &EpochDataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(28 + ds.len() + ds.data.len() * 4);
    out.extend_from_slice(EEGE_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(ds.len(), "epochs")?);
    put_u32(&mut out, to_u32(ds.channels, "channels")?);
    put_u32(&mut out, to_u32(ds.epoch_len, "epoch length")?);
    put_u32(&mut out, integer_rate(ds.sampling_rate)?);
    put_u32(&mut out, to_u32(ds.num_classes, "classes")?);
    for &l in &ds.labels {
        out.push(u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit in a byte")))?);
    }
    put_f32s(&mut out, &ds.data);
    Ok(out)
}

pub fn read_eege(bytes: &[u8]) -> Result<EpochDataset> {
    let mut r = Reader::new(bytes, "EEGE");
    r.magic(EEGE_MAGIC)?;
    r.version(VERSION)?;
    let e = r.u32()? as usize;
    let c = r.u32()? as usize;
    let l = r.u32()? as usize;
    let fs = r.u32()?;
    let k = r.u32()? as usize;
    let labels: Vec<usize> = r.take(e)?.iter().map(|&b| b as usize).collect();
    let total = e
        .checked_mul(c)
        .and_then(|v| v.checked_mul(l))
        .ok_or_else(|| Error::Format("EEGE: E×C×L overflows".into()))?;
    let data = r.f32s(total)?;
    r.finish()?;
    EpochDataset::new(c, l, fs as f64, k, labels, data)
}

/// Parse `time_s,value` lines. Blank lines, `#` comments and a
/// `time_s,value` header are skipped.
pub fn read_label_track(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut track = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (track.is_empty() && line == "time_s,value") {
            continue;
        }
        let bad = || Error::Data(format!("label track line {}: expected `time_s,value`, got `{line}`", i + 1));
        let (t, v) = line.split_once(',').ok_or_else(bad)?;
        let t: f64 = t.trim().parse().map_err(|_| bad())?;
        let v: f64 = v.trim().parse().map_err(|_| bad())?;
        track.push((t, v));
    }
    Ok(track)
}

pub fn write_label_track(track: &[(f64, f64)]) -> String {
    let mut s = String::from("time_s,value\n");
    for (t, v) in track {
        s.push_str(&format!("{t},{v}\n"));
    }
    s
}

pub fn load_eegc(path: &Path) -> Result<ContinuousRecording> {
    read_eegc(&std::fs::read(path)?)
}

pub fn save_eegc(rec: &ContinuousRecording, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, write_eegc(rec)?)?)
}

pub fn load_eege(path: &Path) -> Result<EpochDataset> {
    read_eege(&std::fs::read(path)?)
}

pub fn save_eege(ds: &EpochDataset, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, write_eege(ds)?)?)
}
