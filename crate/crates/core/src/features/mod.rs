//! Frame-level acoustic features and the cluster targets used for
//! masked-prediction pretraining.

mod frontend;
mod kmeans;

pub use frontend::{
    dct2_ortho, frame_count, logmel, logmel_with, mel_center_frequencies, mfcc, mfcc_from_logmel,
    FrameConfig, DEFAULT_N_MELS, LOG_FLOOR,
};
pub use kmeans::{inertia, kmeans_assign, kmeans_fit, kmeans_fit_traced, Codebook, KMeansFit};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// `T x D` frame matrix plus framing metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    data: Tensor<f32>,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
}

impl FeatureSequence {
    pub fn new(data: Tensor<f32>, frame_shift_ms: f64, frame_length_ms: f64) -> Result<Self> {
        if data.shape().len() != 2 || data.rows() == 0 || data.cols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature matrix must be T x D with T, D >= 1, got {:?}",
                data.shape()
            )));
        }
        data.ensure_finite("feature sequence")?;
        Ok(Self {
            data,
            frame_shift_ms,
            frame_length_ms,
        })
    }

    /// Number of frames.
    pub fn frames(&self) -> usize {
        self.data.rows()
    }

    /// Coefficients per frame.
    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.data.row(t)
    }

    /// Per-coefficient mean over frames.
    pub fn mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim()];
        for t in 0..self.frames() {
            for (a, &v) in acc.iter_mut().zip(self.frame(t)) {
                *a += v as f64;
            }
        }
        let n = self.frames() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}
