use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

use super::FeatureSequence;
use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Added inside the log so silent bands stay finite.
pub const LOG_FLOOR: f64 = 1e-6;
pub const DEFAULT_N_MELS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameConfig {
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
        }
    }
}

impl FrameConfig {
    pub fn frame_len(&self, sample_rate: u32) -> usize {
        (self.frame_length_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_shift(&self, sample_rate: u32) -> usize {
        (self.frame_shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }
}

/// `1 + floor((n - len) / shift)`, or 0 when fewer than `len` samples.
pub fn frame_count(num_samples: usize, frame_len: usize, shift: usize) -> usize {
    if num_samples < frame_len {
        0
    } else {
        1 + (num_samples - frame_len) / shift
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centers of the `n_mels` triangular filters spanning 0 Hz to Nyquist.
pub fn mel_center_frequencies(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    mel_edges(n_mels, sample_rate)[1..=n_mels].to_vec()
}

fn mel_edges(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filters with unit peak, `n_mels x (n_fft / 2 + 1)`.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let edges = mel_edges(n_mels, sample_rate);
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= center {
                        (f - lo) / (center - lo)
                    } else {
                        (hi - f) / (hi - center)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn logmel(w: &Waveform, n_mels: usize) -> Result<FeatureSequence> {
    logmel_with(w, n_mels, &FrameConfig::default())
}

/// Hann-windowed magnitude STFT, mel filterbank, `log(x + 1e-6)`.
pub fn logmel_with(w: &Waveform, n_mels: usize, cfg: &FrameConfig) -> Result<FeatureSequence> {
    if n_mels == 0 {
        return Err(Error::DegenerateInput("n_mels must be positive".into()));
    }
    let rate = w.sample_rate();
    let frame_len = cfg.frame_len(rate);
    let shift = cfg.frame_shift(rate).max(1);
    let frames = frame_count(w.len(), frame_len, shift);
    if frames == 0 || frame_len == 0 {
        return Err(Error::TooShort {
            samples: w.len(),
            needed: frame_len.max(1),
        });
    }
    let n_fft = frame_len.next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let window: Vec<f64> = (0..frame_len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / frame_len as f64).cos())
        .collect();
    let bank = mel_filterbank(n_mels, n_fft, rate);
    let samples = w.samples();
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut mag = vec![0.0; n_fft / 2 + 1];
    let mut out = Vec::with_capacity(frames * n_mels);
    for f in 0..frames {
        let start = f * shift;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < frame_len {
                Complex::new(samples[start + i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (m, b) in mag.iter_mut().zip(&buf) {
            *m = b.norm();
        }
        for filt in &bank {
            let e: f64 = filt.iter().zip(&mag).map(|(a, b)| a * b).sum();
            out.push((e + LOG_FLOOR).ln() as f32);
        }
    }
    FeatureSequence::new(
        Tensor::matrix(frames, n_mels, out)?,
        cfg.frame_shift_ms,
        cfg.frame_length_ms,
    )
}

/// Orthonormal DCT-II.
pub fn dct2_ortho(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n).map(|k| dct_row(k, n).iter().zip(x).map(|(c, v)| c * v).sum()).collect()
}

fn dct_row(k: usize, n: usize) -> Vec<f64> {
    let norm = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    (0..n)
        .map(|i| norm * (PI * k as f64 * (i as f64 + 0.5) / n as f64).cos())
        .collect()
}

/// First `n_coeffs` orthonormal DCT-II coefficients of each log-mel frame
/// (40 mel bands).
pub fn mfcc(w: &Waveform, n_coeffs: usize) -> Result<FeatureSequence> {
    mfcc_from_logmel(&logmel(w, DEFAULT_N_MELS)?, n_coeffs)
}

pub fn mfcc_from_logmel(mel: &FeatureSequence, n_coeffs: usize) -> Result<FeatureSequence> {
    let n = mel.dim();
    if n_coeffs == 0 || n_coeffs > n {
        return Err(Error::DegenerateInput(format!(
            "cannot keep {n_coeffs} cepstral coefficients from {n} mel bands"
        )));
    }
    let basis: Vec<Vec<f64>> = (0..n_coeffs).map(|k| dct_row(k, n)).collect();
    let mut out = Vec::with_capacity(mel.frames() * n_coeffs);
    for t in 0..mel.frames() {
        let frame = mel.frame(t);
        for row in &basis {
            let c: f64 = row.iter().zip(frame).map(|(a, &b)| a * b as f64).sum();
            out.push(c as f32);
        }
    }
    FeatureSequence::new(
        Tensor::matrix(mel.frames(), n_coeffs, out)?,
        mel.frame_shift_ms,
        mel.frame_length_ms,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, n: usize) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
                .collect(),
            rate,
        )
        .unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        assert_eq!(logmel(&w, 40).unwrap().frames(), 98);
        assert_eq!(mfcc(&w, 13).unwrap().frames(), 98);
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let w = Waveform::new(vec![0.0; 4000], 16000).unwrap();
        let f = logmel(&w, 40).unwrap();
        let floor = LOG_FLOOR.ln() as f32;
        assert!(f.data().data().iter().all(|&v| v == floor));
        let c = mfcc(&w, 13).unwrap();
        for t in 0..c.frames() {
            let row = c.frame(t);
            assert!((row[0] as f64 - LOG_FLOOR.ln() * 40f64.sqrt()).abs() < 1e-4);
            assert!(row[1..].iter().all(|v| v.abs() < 1e-5));
        }
    }

    #[test]
    fn sine_peaks_in_nearest_mel_band() {
        let w = sine(1000.0, 16000, 16000);
        let mean = logmel(&w, 40).unwrap().mean();
        let argmax = (0..40).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        let centers = mel_center_frequencies(40, 16000);
        let nearest = (0..40)
            .min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs()))
            .unwrap();
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn too_short_is_rejected() {
        let w = Waveform::new(vec![0.0; 399], 16000).unwrap();
        assert!(matches!(logmel(&w, 40), Err(Error::TooShort { samples: 399, needed: 400 })));
        let w = Waveform::new(vec![0.0; 400], 16000).unwrap();
        assert_eq!(logmel(&w, 40).unwrap().frames(), 1);
    }

    #[test]
    fn dct_matches_direct_summation() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let n = 4.0;
        for (k, got) in dct2_ortho(&x).into_iter().enumerate() {
            let mut s = 0.0;
            for (i, v) in x.iter().enumerate() {
                s += v * (PI / n * (i as f64 + 0.5) * k as f64).cos();
            }
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            assert!((got - s * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_amplitude_never_lowers_logmel() {
        let quiet = sine(440.0, 16000, 8000);
        let loud = Waveform::new(quiet.samples().iter().map(|s| s * 2.0).collect(), 16000).unwrap();
        let (a, b) = (logmel(&quiet, 40).unwrap(), logmel(&loud, 40).unwrap());
        for (x, y) in a.data().data().iter().zip(b.data().data()) {
            assert!(y >= x);
        }
    }
}
