//! Waveform I/O, band-limited resampling and duration cropping.
//!
//! Only RIFF/WAVE PCM16 mono is accepted. Everything else is rejected rather
//! than guessed at.

use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed;

/// Half-width of the resampling kernel, in samples of the lower rate.
const TAPS_PER_SIDE: usize = 16;
/// Kernel cutoff as a fraction of the lower sample rate.
const CUTOFF_FRACTION: f64 = 0.45;
const KAISER_BETA: f64 = 8.6;

/// Mono audio with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidWaveform("sample rate must be positive".into()));
        }
        if let Some(i) = samples
            .iter()
            .position(|s| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(Error::InvalidWaveform(format!(
                "sample {i} = {} is not a finite value in [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_wav(w)).map_err(|e| Error::io(path, e))
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a PCM16 mono RIFF/WAVE byte buffer. Samples are `i16 / 32768`.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::NotWav);
    }
    let mut pos = 12;
    let mut sample_rate = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(Error::Truncated {
                        expected: 16,
                        actual: bytes.len().saturating_sub(body).min(size),
                    });
                }
                let format_tag = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                if format_tag != 1 {
                    return Err(Error::UnsupportedFormat(format!(
                        "format tag {format_tag:#06x} (only PCM is accepted)"
                    )));
                }
                if channels != 1 {
                    return Err(Error::UnsupportedFormat(format!(
                        "{channels} channels (only mono is accepted)"
                    )));
                }
                if bits != 16 {
                    return Err(Error::UnsupportedFormat(format!(
                        "{bits}-bit samples (only 16-bit is accepted)"
                    )));
                }
                if rate == 0 {
                    return Err(Error::UnsupportedFormat("sample rate 0".into()));
                }
                sample_rate = Some(rate);
            }
            b"data" => {
                let rate = sample_rate.ok_or_else(|| {
                    Error::UnsupportedFormat("data chunk precedes fmt chunk".into())
                })?;
                let available = bytes.len() - body;
                if size > available {
                    return Err(Error::Truncated {
                        expected: size,
                        actual: available,
                    });
                }
                if size % 2 != 0 {
                    return Err(Error::UnsupportedFormat(
                        "odd data chunk size for 16-bit samples".into(),
                    ));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                    .collect();
                return Waveform::new(samples, rate);
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    if sample_rate.is_none() {
        Err(Error::UnsupportedFormat("missing fmt chunk".into()))
    } else {
        Err(Error::UnsupportedFormat("missing data chunk".into()))
    }
}

/// Canonical 44-byte-header PCM16 mono encoding.
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = w.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &w.samples {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

fn quantize(s: f32) -> i16 {
    (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > 1e-14 * sum {
        term *= (half / k) * (half / k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Windowed-sinc resampling (Kaiser window, 16 taps per side of the lower
/// rate, cutoff at 0.45 x the lower rate). Output length is
/// `round(len * target / source)`.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::InvalidWaveform("target rate must be positive".into()));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let in_rate = w.sample_rate as f64;
    let out_rate = target_rate as f64;
    let n_in = w.samples.len();
    let n_out = (n_in as f64 * out_rate / in_rate).round() as usize;
    // cycles per input sample
    let fc = CUTOFF_FRACTION * in_rate.min(out_rate) / in_rate;
    let step = in_rate / out_rate;
    let half_width = TAPS_PER_SIDE as f64 * step.max(1.0);
    let i0_beta = bessel_i0(KAISER_BETA);

    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out {
        let t = n as f64 * step;
        let lo = (t - half_width).ceil().max(0.0) as usize;
        let hi = ((t + half_width).floor() as usize).min(n_in.saturating_sub(1));
        let mut acc = 0.0;
        if n_in > 0 {
            for k in lo..=hi {
                let u = t - k as f64;
                let r = u / half_width;
                let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                acc += w.samples[k] as f64 * 2.0 * fc * sinc(2.0 * fc * u) * window;
            }
        }
        out.push(acc.clamp(-1.0, 1.0) as f32);
    }
    Waveform::new(out, target_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    Center,
    Random { seed: u64 },
}

/// Cuts a contiguous window of `round(seconds * rate)` samples. Inputs that
/// are already no longer than that are returned unchanged.
pub fn crop_duration(w: &Waveform, seconds: f64, mode: CropMode) -> Result<Waveform> {
    if !(seconds > 0.0) || !seconds.is_finite() {
        return Err(Error::InvalidWaveform(format!(
            "crop duration must be positive, got {seconds}"
        )));
    }
    let target = (seconds * w.sample_rate as f64).round() as usize;
    if w.samples.len() <= target {
        return Ok(w.clone());
    }
    let slack = w.samples.len() - target;
    let offset = match mode {
        CropMode::Center => slack / 2,
        CropMode::Random { seed } => seed::rng(seed).random_range(0..=slack),
    };
    Ok(Waveform {
        samples: w.samples[offset..offset + target].to_vec(),
        sample_rate: w.sample_rate,
    })
}
