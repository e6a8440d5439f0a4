//! Golden fixtures and the brute-force oracles that produce them.
//!
//! `fixtures/goldens.json` lists cases of five kinds. Each case names its
//! oracle in `provenance`; `expected: null` asks [`regenerate_goldens`] to
//! fill it in. The oracles share no code with the implementations they
//! check.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::audio::decode_wav;
use crate::error::{Error, Result};
use crate::eval::{eer, TrialSet};
use crate::features::dct2_ortho;
use crate::nn::{adam_step, softmax, AdamState, Parameter, Tensor};

pub const GOLDENS_FILE: &str = "goldens.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenCase {
    pub name: String,
    /// `eer`, `dct`, `adam`, `softmax` or `wav`.
    pub kind: String,
    /// Inline inputs; `wav` cases give a `path` relative to the fixture
    /// directory.
    pub input: Value,
    pub expected: Option<Value>,
    /// Absolute tolerance per value.
    pub tolerance: f64,
    /// `[TRIVIAL]` or `[DERIVED]` plus the oracle used.
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenFile {
    pub cases: Vec<GoldenCase>,
}

impl GoldenFile {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(GOLDENS_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let p = dir.join(GOLDENS_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

/// Exhaustive threshold sweep. Every distinct score and +inf is tried as a
/// threshold; error rates are recounted from scratch at each one. The EER
/// is read where FAR - FRR first becomes non-positive, interpolating
/// linearly from the previous threshold.
pub fn oracle_eer(targets: &[f64], nontargets: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let rates = |th: f64| {
        let fa = nontargets.iter().filter(|&&s| s >= th).count() as f64 / nontargets.len() as f64;
        let fr = targets.iter().filter(|&&s| s < th).count() as f64 / targets.len() as f64;
        (fa, fr)
    };
    let mut prev = rates(f64::NEG_INFINITY);
    for th in thresholds {
        let (fa, fr) = rates(th);
        if fa - fr <= 0.0 {
            if fa == fr {
                return fa;
            }
            let (pfa, pfr) = prev;
            let a = (pfa - pfr) / ((pfa - pfr) - (fa - fr));
            return pfa + a * (fa - pfa);
        }
        prev = (fa, fr);
    }
    unreachable!("every sweep ends with FAR = 0 and FRR = 1")
}

/// DCT-II through a naive DFT of the even-symmetric extension, scaled to
/// the orthonormal convention.
pub fn oracle_dct(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let y: Vec<f64> = x.iter().chain(x.iter().rev()).copied().collect();
    let two_n = 2 * n;
    (0..n)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, v) in y.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * j % two_n) as f64 / two_n as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            let ph = -std::f64::consts::PI * k as f64 / two_n as f64;
            let xk = 0.5 * (re * ph.cos() - im * ph.sin());
            xk * if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() }
        })
        .collect()
}

/// Adam with the moments written as explicit weighted sums over the whole
/// gradient history instead of running averages.
pub fn oracle_adam(w0: &[f64], grads: &[Vec<f64>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Vec<f64> {
    let mut w = w0.to_vec();
    for t in 1..=grads.len() {
        for i in 0..w.len() {
            let (mut m, mut v) = (0.0, 0.0);
            for (k, g) in grads[..t].iter().enumerate() {
                let age = (t - 1 - k) as i32;
                m += (1.0 - beta1) * beta1.powi(age) * g[i];
                v += (1.0 - beta2) * beta2.powi(age) * g[i] * g[i];
            }
            let m_hat = m / (1.0 - beta1.powi(t as i32));
            let v_hat = v / (1.0 - beta2.powi(t as i32));
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    w
}

/// `p_i = 1 / sum_j exp(x_j - x_i)`.
pub fn oracle_softmax(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|xi| 1.0 / x.iter().map(|xj| (xj - xi).exp()).sum::<f64>())
        .collect()
}

/// Reads a canonical 44-byte-header PCM16 mono file by fixed offsets.
pub fn oracle_wav(bytes: &[u8]) -> Option<(u32, Vec<i16>)> {
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..16] != b"WAVEfmt " || &bytes[36..40] != b"data" {
        return None;
    }
    let rate = u32::from_le_bytes(bytes[24..28].try_into().ok()?);
    let len = u32::from_le_bytes(bytes[40..44].try_into().ok()?) as usize;
    let data = bytes.get(44..44 + len)?;
    Some((rate, data.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect()))
}

fn bad_input(case: &GoldenCase, what: &str) -> Error {
    Error::OracleMismatch {
        case: case.name.clone(),
        detail: format!("malformed input: {what}"),
    }
}

fn floats(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(Value::as_f64).collect()
}

fn field(case: &GoldenCase, key: &str) -> Result<Vec<f64>> {
    floats(&case.input[key]).ok_or_else(|| bad_input(case, key))
}

fn scalar(case: &GoldenCase, key: &str) -> Result<f64> {
    case.input[key].as_f64().ok_or_else(|| bad_input(case, key))
}

fn adam_input(case: &GoldenCase) -> Result<(Vec<f64>, Vec<Vec<f64>>, [f64; 4])> {
    let grads = case.input["grads"]
        .as_array()
        .and_then(|a| a.iter().map(floats).collect::<Option<Vec<_>>>())
        .ok_or_else(|| bad_input(case, "grads"))?;
    let hp = [
        scalar(case, "lr")?,
        scalar(case, "beta1")?,
        scalar(case, "beta2")?,
        scalar(case, "eps")?,
    ];
    Ok((field(case, "w0")?, grads, hp))
}

fn wav_bytes(case: &GoldenCase, dir: &Path) -> Result<Vec<u8>> {
    let rel = case.input["path"].as_str().ok_or_else(|| bad_input(case, "path"))?;
    let p = dir.join(rel);
    std::fs::read(&p).map_err(|e| Error::io(p, e))
}

/// What the oracle says a case's expected value is.
pub fn oracle_value(case: &GoldenCase, dir: &Path) -> Result<Value> {
    Ok(match case.kind.as_str() {
        "eer" => json!(oracle_eer(&field(case, "targets")?, &field(case, "nontargets")?)),
        "dct" => json!(oracle_dct(&field(case, "x")?)),
        "softmax" => json!(oracle_softmax(&field(case, "logits")?)),
        "adam" => {
            let (w0, grads, [lr, b1, b2, eps]) = adam_input(case)?;
            json!(oracle_adam(&w0, &grads, lr, b1, b2, eps))
        }
        "wav" => {
            let (rate, samples) = oracle_wav(&wav_bytes(case, dir)?).ok_or_else(|| bad_input(case, "not canonical PCM16"))?;
            json!({ "sample_rate": rate, "samples": samples })
        }
        other => return Err(bad_input(case, &format!("unknown kind {other}"))),
    })
}

/// What the library computes for a case, in the same shape.
pub fn implementation_value(case: &GoldenCase, dir: &Path) -> Result<Value> {
    Ok(match case.kind.as_str() {
        "eer" => json!(eer(&TrialSet::from_split(&field(case, "targets")?, &field(case, "nontargets")?)?)),
        "dct" => json!(dct2_ortho(&field(case, "x")?)),
        "softmax" => json!(softmax(&field(case, "logits")?)?),
        "adam" => {
            let (w0, grads, [lr, b1, b2, eps]) = adam_input(case)?;
            let mut p = Parameter::new("w", Tensor::<f64>::from_vec(&[w0.len()], w0)?);
            let mut state = AdamState::with_betas(lr, b1, b2, eps);
            for g in grads {
                p.grad = Tensor::from_vec(&[g.len()], g)?;
                adam_step(&mut [&mut p], &mut state);
            }
            json!(p.value.data())
        }
        "wav" => {
            let w = decode_wav(&wav_bytes(case, dir)?)?;
            let samples: Vec<i64> = w.samples().iter().map(|&s| (s as f64 * 32768.0) as i64).collect();
            json!({ "sample_rate": w.sample_rate(), "samples": samples })
        }
        other => return Err(bad_input(case, &format!("unknown kind {other}"))),
    })
}

/// Largest absolute difference between two values of the same shape, or
/// `None` when the shapes differ.
fn max_diff(a: &Value, b: &Value) -> Option<f64> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => Some((x.as_f64()? - y.as_f64()?).abs()),
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            x.iter().zip(y).try_fold(0.0f64, |m, (p, q)| Some(m.max(max_diff(p, q)?)))
        }
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => x
            .iter()
            .try_fold(0.0f64, |m, (k, p)| Some(m.max(max_diff(p, y.get(k)?)?))),
        _ => None,
    }
}

fn compare(case: &GoldenCase, expected: &Value, got: &Value, who: &str) -> Result<()> {
    match max_diff(expected, got) {
        Some(d) if d <= case.tolerance => Ok(()),
        Some(d) => Err(Error::OracleMismatch {
            case: case.name.clone(),
            detail: format!("{who} differs from the fixture by {d:e} (tolerance {:e})", case.tolerance),
        }),
        None => Err(Error::OracleMismatch {
            case: case.name.clone(),
            detail: format!("{who} output has a different shape than the fixture"),
        }),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegenOutcome {
    /// Cases whose missing expected value was computed and written.
    pub filled: Vec<String>,
    /// Cases whose stored value agreed with the oracle.
    pub verified: Vec<String>,
}

/// Recomputes every case with its oracle. Missing expected values are
/// filled in and the file rewritten; a stored value that drifted beyond
/// tolerance fails with `OracleMismatch` naming the case. A clean tree is
/// left byte-for-byte unchanged.
pub fn regenerate_goldens(dir: &Path) -> Result<RegenOutcome> {
    let mut file = GoldenFile::load(dir)?;
    let mut out = RegenOutcome::default();
    for case in &mut file.cases {
        let value = oracle_value(case, dir)?;
        match &case.expected {
            Some(e) => {
                compare(case, e, &value, "oracle")?;
                out.verified.push(case.name.clone());
            }
            None => {
                case.expected = Some(value);
                out.filled.push(case.name.clone());
            }
        }
    }
    if !out.filled.is_empty() {
        file.save(dir)?;
    }
    Ok(out)
}

/// Checks the library against every stored expected value. Returns the
/// number of cases checked.
pub fn verify_implementation(dir: &Path) -> Result<usize> {
    let file = GoldenFile::load(dir)?;
    for case in &file.cases {
        let expected = case.expected.as_ref().ok_or_else(|| Error::OracleMismatch {
            case: case.name.clone(),
            detail: "no expected value; run the goldens regeneration first".into(),
        })?;
        compare(case, expected, &implementation_value(case, dir)?, "implementation")?;
    }
    Ok(file.cases.len())
}

/// The fixture directory shipped with this crate.
pub fn default_fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}
