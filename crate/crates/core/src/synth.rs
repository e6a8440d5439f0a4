//! Deterministic synthetic classification corpora.
//!
//! A class is a fixed spectral recipe: three formant resonances shaping a
//! harmonic source, plus a class-specific amplitude-modulation rate. A
//! speaker shifts pitch, tilts the spectrum and sets a noise floor. Each
//! utterance adds small pitch and formant jitter. Speaker variation is
//! deliberately larger than utterance jitter so that speaker-disjoint
//! splitting is a real generalization test.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, UtteranceRecord};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub num_speakers: usize,
    pub utterances_per_speaker_per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            num_speakers: 10,
            utterances_per_speaker_per_class: 5,
            duration_s: 1.0,
            sample_rate: 16000,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Range {
                field: format!("synth.{field}"),
                message: message.into(),
            })
        };
        if self.num_classes < 2 {
            return bad("num_classes", "need at least 2 classes");
        }
        if self.num_speakers == 0 {
            return bad("num_speakers", "must be positive");
        }
        if self.utterances_per_speaker_per_class == 0 {
            return bad("utterances_per_speaker_per_class", "must be positive");
        }
        if !(self.duration_s > 0.0 && self.duration_s <= 600.0) {
            return bad("duration_s", "must be in (0, 600]");
        }
        if self.sample_rate < 8000 {
            return bad("sample_rate", "must be at least 8000 Hz");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.num_speakers * self.utterances_per_speaker_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn class_label(class: usize) -> String {
    format!("c{class}")
}

pub fn speaker_id(speaker: usize) -> String {
    format!("spk{speaker:03}")
}

/// Class recipe: formant centers (Hz) and modulation rate (Hz). Depends only
/// on the class index, so every seed produces the same class structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassRecipe {
    pub formants: [f64; 3],
    pub am_rate: f64,
}

pub fn class_recipe(class: usize) -> ClassRecipe {
    let frac = |x: f64| x - x.floor();
    let c = class as f64;
    ClassRecipe {
        formants: [
            300.0 + 600.0 * frac(c * 0.618_034),
            1000.0 + 1200.0 * frac(c * 0.381_966 + 0.25),
            2400.0 + 900.0 * frac(c * 0.723_607 + 0.5),
        ],
        am_rate: 2.0 + 2.0 * c,
    }
}

#[derive(Debug, Clone, Copy)]
struct Speaker {
    pitch: f64,
    tilt: f64,
    snr_db: f64,
}

fn speaker(master: u64, s: usize) -> Speaker {
    let mut rng = seed::stream_rng(master, &format!("synth/speaker/{s}"));
    Speaker {
        pitch: rng.random_range(0.8f64.ln()..1.25f64.ln()).exp(),
        tilt: rng.random_range(-0.4..0.4),
        snr_db: rng.random_range(10.0..30.0),
    }
}

const BASE_F0: f64 = 140.0;
const FORMANT_BANDWIDTH: f64 = 150.0;
const AM_DEPTH: f64 = 0.4;
const TARGET_RMS: f64 = 0.1;

/// One utterance, quantized to the 16-bit grid so that the in-memory and
/// on-disk corpora are sample-identical.
pub fn synthesize(spec: &SynthSpec, speaker_idx: usize, class: usize, utt: usize) -> Result<Waveform> {
    let spk = speaker(spec.seed, speaker_idx);
    let recipe = class_recipe(class);
    let mut rng = seed::stream_rng(spec.seed, &format!("synth/utt/{speaker_idx}/{class}/{utt}"));
    let rate = spec.sample_rate as f64;
    let n = (spec.duration_s * rate).round() as usize;

    let f0 = BASE_F0 * spk.pitch * (1.0 + rng.random_range(-0.02..0.02));
    let formants = recipe.formants.map(|f| f * (1.0 + rng.random_range(-0.03..0.03)));
    let am_phase = rng.random_range(0.0..TAU);
    let top = 4000f64.min(0.45 * rate);

    // (amplitude, rotation cos, rotation sin, state cos, state sin)
    let mut partials: Vec<[f64; 5]> = Vec::new();
    let mut h = 1.0;
    while h * f0 < top {
        let f = h * f0;
        let envelope: f64 = formants
            .iter()
            .map(|&fc| 1.0 / (1.0 + ((f - fc) / FORMANT_BANDWIDTH).powi(2)))
            .sum();
        let amp = envelope * (f / 1000.0).powf(spk.tilt);
        let step = TAU * f / rate;
        let phase = rng.random_range(0.0..TAU);
        partials.push([amp, step.cos(), step.sin(), phase.cos(), phase.sin()]);
        h += 1.0;
    }

    let mut x = vec![0.0f64; n];
    for (i, out) in x.iter_mut().enumerate() {
        let mut s = 0.0;
        for p in partials.iter_mut() {
            s += p[0] * p[4];
            let (c, si) = (p[3] * p[1] - p[4] * p[2], p[3] * p[2] + p[4] * p[1]);
            p[3] = c;
            p[4] = si;
        }
        let am = 1.0 + AM_DEPTH * (TAU * recipe.am_rate * i as f64 / rate + am_phase).sin();
        *out = s * am;
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    let gain = if rms > 0.0 { TARGET_RMS / rms } else { 0.0 };
    // uniform noise scaled to unit variance
    let noise_std = TARGET_RMS * 10f64.powf(-spk.snr_db / 20.0) * 3f64.sqrt();
    for v in x.iter_mut() {
        *v = *v * gain + noise_std * rng.random_range(-1.0..1.0);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let norm = if peak > 0.95 { 0.95 / peak } else { 1.0 };
    let samples = x
        .iter()
        .map(|v| ((v * norm * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0) as f32)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Builds the corpus in memory, speaker-major order.
pub fn generate_in_memory(spec: &SynthSpec) -> Result<Vec<(UtteranceRecord, Waveform)>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.len());
    for s in 0..spec.num_speakers {
        for c in 0..spec.num_classes {
            for u in 0..spec.utterances_per_speaker_per_class {
                let w = synthesize(spec, s, c, u)?;
                let utt_id = format!("s{s:03}_c{c:02}_u{u:03}");
                out.push((
                    UtteranceRecord {
                        path: format!("wav/{utt_id}.wav"),
                        utt_id,
                        label: class_label(c),
                        group_id: speaker_id(s),
                        duration_s: w.duration_s(),
                    },
                    w,
                ));
            }
        }
    }
    Ok(out)
}

/// Writes `wav/<utt_id>.wav` files and `manifest.jsonl` under `out_dir`.
pub fn generate_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    let corpus = generate_in_memory(spec)?;
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut records = Vec::with_capacity(corpus.len());
    for (r, w) in corpus {
        write_wav(out_dir.join(&r.path), &w)?;
        records.push(r);
    }
    let m = Manifest::new(out_dir, records)?;
    m.save(&out_dir.join("manifest.jsonl"))?;
    Ok(m)
}

/// Replaces each label, with probability `fraction`, by a different label
/// drawn uniformly from `label_set`.
pub fn corrupt_labels(
    records: &[UtteranceRecord],
    label_set: &[String],
    fraction: f64,
    seed: u64,
) -> Vec<UtteranceRecord> {
    let mut rng = seed::rng(seed);
    records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if label_set.len() > 1 && rng.random_bool(fraction.clamp(0.0, 1.0)) {
                let others: Vec<&String> = label_set.iter().filter(|l| **l != r.label).collect();
                r.label = others[rng.random_range(0..others.len())].clone();
            }
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::mfcc;

    fn small() -> SynthSpec {
        SynthSpec {
            duration_s: 0.5,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn counts_and_cells() {
        let spec = small();
        let corpus = generate_in_memory(&spec).unwrap();
        assert_eq!(corpus.len(), 200);
        let cells: std::collections::BTreeSet<_> =
            corpus.iter().map(|(r, _)| (r.group_id.clone(), r.label.clone())).collect();
        assert_eq!(cells.len(), 40);
        assert!(corpus.iter().all(|(_, w)| w.len() == 8000));
    }

    #[test]
    fn files_are_deterministic() {
        let spec = SynthSpec {
            num_speakers: 2,
            utterances_per_speaker_per_class: 1,
            duration_s: 0.2,
            ..SynthSpec::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_corpus(&spec, a.path()).unwrap();
        generate_corpus(&spec, b.path()).unwrap();
        for name in ["manifest.jsonl", "wav/s001_c03_u000.wav"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        let w = crate::audio::read_wav(ma.resolve(&ma.records()[0])).unwrap();
        assert_eq!(&w, &synthesize(&spec, 0, 0, 0).unwrap());
    }

    #[test]
    fn classes_separate_in_mean_mfcc_space() {
        let corpus = generate_in_memory(&small()).unwrap();
        let mut by_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 4];
        for (r, w) in &corpus {
            let c: usize = r.label[1..].parse().unwrap();
            by_class[c].push(mfcc(w, 13).unwrap().mean());
        }
        let centroid = |v: &Vec<Vec<f64>>| -> Vec<f64> {
            (0..13).map(|d| v.iter().map(|x| x[d]).sum::<f64>() / v.len() as f64).collect()
        };
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let cents: Vec<Vec<f64>> = by_class.iter().map(centroid).collect();
        // RMS distance of utterance means to their class centroid
        let max_spread = by_class
            .iter()
            .zip(&cents)
            .map(|(v, c)| (v.iter().map(|x| dist(x, c).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
            .fold(0.0, f64::max);
        let mut min_sep = f64::MAX;
        for a in 0..4 {
            for b in a + 1..4 {
                min_sep = min_sep.min(dist(&cents[a], &cents[b]));
            }
        }
        assert!(min_sep >= 2.0 * max_spread, "separation {min_sep} vs spread {max_spread}");
    }

    #[test]
    fn label_noise_only_when_requested() {
        let corpus = generate_in_memory(&small()).unwrap();
        let recs: Vec<_> = corpus.into_iter().map(|(r, _)| r).collect();
        let labels: Vec<String> = (0..4).map(class_label).collect();
        assert_eq!(corrupt_labels(&recs, &labels, 0.0, 1), recs);
        let noisy = corrupt_labels(&recs, &labels, 0.3, 1);
        let flipped = noisy.iter().zip(&recs).filter(|(a, b)| a.label != b.label).count();
        assert!((30..=90).contains(&flipped), "{flipped}");
    }
}
