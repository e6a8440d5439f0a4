use super::{Parameter, Scalar};

/// Adam moments for an ordered parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S: Scalar = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    names: Vec<String>,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            epsilon,
            t: 0,
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update. Moments are allocated on first use and
/// bound to the parameter names seen then.
pub fn adam_step<S: Scalar>(params: &mut [&mut Parameter<S>], state: &mut AdamState<S>) {
    if state.names.is_empty() {
        state.names = params.iter().map(|p| p.name.clone()).collect();
        state.m = params.iter().map(|p| vec![S::zero(); p.value.len()]).collect();
        state.v = state.m.clone();
    }
    assert_eq!(state.names.len(), params.len(), "adam: parameter list changed");
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (S::of(state.beta1), S::of(state.beta2));
    let (one_b1, one_b2) = (S::of(1.0 - state.beta1), S::of(1.0 - state.beta2));
    let step = S::of(state.lr / bc1);
    let inv_bc2 = S::of(1.0 / bc2);
    let eps = S::of(state.epsilon);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        debug_assert_eq!(m.len(), p.value.len());
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + one_b1 * g;
            v[i] = b2 * v[i] + one_b2 * g * g;
            value[i] -= step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(params: &mut [&mut Parameter<S>], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = S::of(max_norm / norm);
        params.iter_mut().for_each(|p| p.grad.scale(f));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn param(w: f32, g: f32) -> Parameter<f32> {
        let mut p = Parameter::new("w", Tensor::from_vec(&[1], vec![w]).unwrap());
        p.grad.data_mut()[0] = g;
        p
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = param(0.25, 0.0);
        let mut st = AdamState::new(1e-3);
        adam_step(&mut [&mut p], &mut st);
        assert_eq!(p.value.data(), &[0.25]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = param(0.0, 1.0);
        let mut st = AdamState::with_betas(1e-3, 0.9, 0.999, 1e-8);
        adam_step(&mut [&mut p], &mut st);
        // m_hat = 1, v_hat = 1: w = -lr / (1 + eps)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.value.data()[0] as f64 - expected).abs() < 1e-8);
    }

    #[test]
    fn runs_are_bit_identical() {
        let run = || {
            let mut p = Parameter::new("w", Tensor::from_vec(&[3], vec![0.1f32, -0.2, 0.3]).unwrap());
            let mut st = AdamState::new(1e-2);
            for i in 0..100 {
                for (j, g) in p.grad.data_mut().iter_mut().enumerate() {
                    *g = ((i * 7 + j * 3) % 11) as f32 / 11.0 - 0.5;
                }
                adam_step(&mut [&mut p], &mut st);
            }
            p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut a = param(0.0, 3.0);
        let mut b = param(0.0, 4.0);
        let before = clip_grad_norm(&mut [&mut a, &mut b], 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((a.grad.data()[0] - 0.6).abs() < 1e-6);
        assert!((b.grad.data()[0] - 0.8).abs() < 1e-6);
    }
}
