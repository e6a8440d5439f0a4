//! Shared inputs for the criterion benches.

use speech_engine::nn::Tensor;
use speech_engine::seed;
use speech_engine::synth::{synthesize, SynthSpec};
use speech_engine::{TrialSet, Waveform};

use rand::Rng;

/// `n` trials, a quarter of them targets, target scores shifted up by one.
pub fn trials(n: usize, seed_value: u64) -> TrialSet {
    let mut rng = seed::rng(seed_value);
    let flags: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
    let scores = flags
        .iter()
        .map(|&t| rng.random_range(-1.0..1.0) + if t { 1.0 } else { 0.0 })
        .collect();
    TrialSet::new(scores, flags).expect("both kinds present")
}

/// One synthetic utterance of `seconds` at 16 kHz.
pub fn utterance(seconds: f64) -> Waveform {
    let spec = SynthSpec {
        duration_s: seconds,
        ..SynthSpec::default()
    };
    synthesize(&spec, 0, 0, 0).expect("valid spec")
}

/// `rows x cols` uniform matrix in [-1, 1).
pub fn matrix(rows: usize, cols: usize, seed_value: u64) -> Tensor<f32> {
    let mut rng = seed::rng(seed_value);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape matches data")
}
