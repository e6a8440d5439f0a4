//! Dense layers with exact hand-written backward passes.

use rand::Rng as _;

use super::{Parameter, Scalar, Tensor, gemm};
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Xavier-uniform `rows x cols` matrix.
pub fn xavier_uniform<S: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<S> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::of(rng.random_range(-limit..=limit)))
        .collect();
    Tensor::from_vec(&[rows, cols], data).expect("shape matches")
}

/// `y = x W^T + b` for `x: B x D_in`, `W: D_out x D_in`, `b: D_out`.
pub fn linear_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (batch, d_in) = (x.rows(), x.cols());
    let (d_out, w_in) = (w.rows(), w.cols());
    if w.shape().len() != 2 || w_in != d_in || b.len() != d_out {
        return Err(Error::ShapeMismatch(format!(
            "linear: x {:?}, W {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut y = Tensor::zeros(&[batch, d_out]);
    for r in 0..batch {
        y.row_mut(r).copy_from_slice(b.data());
    }
    gemm(false, true, batch, d_out, d_in, x.data(), w.data(), S::one(), y.data_mut());
    Ok(y)
}

pub struct LinearGrads<S> {
    pub dx: Tensor<S>,
    pub dw: Tensor<S>,
    pub db: Tensor<S>,
}

/// Gradients of `linear_forward` given upstream gradient `dy: B x D_out`.
pub fn linear_backward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, dy: &Tensor<S>) -> LinearGrads<S> {
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[w.rows()]);
    let dx = linear_backward_into(x, w, dy, &mut dw, &mut db);
    LinearGrads { dx, dw, db }
}

fn linear_backward_into<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
    dw: &mut Tensor<S>,
    db: &mut Tensor<S>,
) -> Tensor<S> {
    let (batch, d_in) = (x.rows(), x.cols());
    let d_out = w.rows();
    assert_eq!(dy.rows(), batch);
    assert_eq!(dy.cols(), d_out);
    // dW += dy^T x
    gemm(true, false, d_out, d_in, batch, dy.data(), x.data(), S::one(), dw.data_mut());
    let db = db.data_mut();
    for r in 0..batch {
        for (g, &d) in db.iter_mut().zip(dy.row(r)) {
            *g += d;
        }
    }
    let mut dx = Tensor::zeros(&[batch, d_in]);
    gemm(false, false, batch, d_in, d_out, dy.data(), w.data(), S::zero(), dx.data_mut());
    dx
}

#[derive(Debug, Clone)]
pub struct Linear<S: Scalar = f32> {
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(prefix: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Parameter::new(format!("{prefix}.weight"), xavier_uniform(d_out, d_in, rng)),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        linear_forward(x, &self.weight.value, &self.bias.value)
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&mut self, x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
        linear_backward_into(
            x,
            &self.weight.value,
            dy,
            &mut self.weight.grad,
            &mut self.bias.grad,
        )
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm<S: Scalar = f32> {
    pub gamma: Parameter<S>,
    pub beta: Parameter<S>,
}

pub struct LayerNormCache<S> {
    xhat: Tensor<S>,
    inv_std: Vec<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{prefix}.gamma"), Tensor::filled(&[dim], S::one())),
            beta: Parameter::new(format!("{prefix}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> (Tensor<S>, LayerNormCache<S>) {
        let (rows, dim) = (x.rows(), x.cols());
        assert_eq!(dim, self.gamma.value.len(), "layer norm width");
        let n = S::of(dim as f64);
        let eps = S::of(LAYER_NORM_EPS);
        let mut xhat = Tensor::zeros(&[rows, dim]);
        let mut y = Tensor::zeros(&[rows, dim]);
        let mut inv_std = Vec::with_capacity(rows);
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for r in 0..rows {
            let xr = x.row(r);
            let mean = xr.iter().copied().sum::<S>() / n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(xr) {
                *o = (v - mean) * inv;
            }
            let yr = y.row_mut(r);
            for j in 0..dim {
                yr[j] = xhat.row(r)[j] * g[j] + b[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<S>, dy: &Tensor<S>) -> Tensor<S> {
        let (rows, dim) = (dy.rows(), dy.cols());
        let n = S::of(dim as f64);
        let mut dx = Tensor::zeros(&[rows, dim]);
        let g = self.gamma.value.data();
        let mut dxhat = vec![S::zero(); dim];
        for r in 0..rows {
            let (dyr, xh) = (dy.row(r), cache.xhat.row(r));
            let dg = self.gamma.grad.data_mut();
            for j in 0..dim {
                dg[j] += dyr[j] * xh[j];
            }
            let dbeta = self.beta.grad.data_mut();
            for j in 0..dim {
                dbeta[j] += dyr[j];
                dxhat[j] = dyr[j] * g[j];
            }
            let sum_d = dxhat.iter().copied().sum::<S>();
            let sum_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<S>();
            let scale = cache.inv_std[r] / n;
            let dxr = dx.row_mut(r);
            for j in 0..dim {
                dxr[j] = scale * (n * dxhat[j] - sum_d - xh[j] * sum_dx);
            }
        }
        dx
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<S: Scalar>(x: S) -> S {
    let (c, a, half) = (S::of(GELU_C), S::of(GELU_A), S::of(0.5));
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let (c, a, half) = (S::of(GELU_C), S::of(GELU_A), S::of(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x)
}

/// Numerically stable softmax. Fails on non-finite logits.
pub fn softmax<S: Scalar>(logits: &[S]) -> Result<Vec<S>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    Ok(p)
}

pub(crate) fn softmax_in_place<S: Scalar>(v: &mut [S]) {
    let max = v.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

pub fn log_softmax<S: Scalar>(logits: &[S]) -> Result<Vec<S>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log_softmax logits".into()));
    }
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<S>().ln() + max;
    Ok(logits.iter().map(|&l| l - lse).collect())
}

/// `-log softmax(logits)[target]` and its gradient `p - onehot(target)`.
pub fn cross_entropy<S: Scalar>(logits: &[S], target: usize) -> Result<(S, Vec<S>)> {
    if target >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    let logp = log_softmax(logits)?;
    let mut grad: Vec<S> = logp.iter().map(|l| l.exp()).collect();
    grad[target] -= S::one();
    Ok((-logp[target], grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;
    use crate::seed;
    use proptest::prelude::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_small_case() {
        let x = t(1, 2, &[1.0, 2.0]);
        let eye = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let zero = Tensor::zeros(&[2]);
        assert_eq!(linear_forward(&x, &eye, &zero).unwrap().data(), x.data());
        let w = t(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[3.0, 3.0]);
        assert!(matches!(
            linear_forward(&x, &t(2, 3, &[0.0; 6]), &b),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn linear_sum_loss_gives_broadcast_dw() {
        let mut rng = seed::rng(1);
        let x: Tensor<f64> = xavier_uniform(3, 4, &mut rng);
        let w: Tensor<f64> = xavier_uniform(2, 4, &mut rng);
        let dy = Tensor::filled(&[3, 2], 1.0);
        let g = linear_backward(&x, &w, &dy);
        // d sum(y) / dW[o][i] = sum_b x[b][i] for every output row o
        for o in 0..2 {
            for i in 0..4 {
                let col: f64 = (0..3).map(|b| x.row(b)[i]).sum();
                assert!((g.dw.row(o)[i] - col).abs() < 1e-12);
            }
        }
        assert_eq!(g.db.data(), &[3.0, 3.0]);
    }

    #[test]
    fn linear_passes_grad_check() {
        let mut rng = seed::rng(2);
        let x: Tensor<f64> = xavier_uniform(3, 5, &mut rng);
        let w: Tensor<f64> = xavier_uniform(4, 5, &mut rng);
        let b: Tensor<f64> = xavier_uniform(1, 4, &mut rng);
        let r: Tensor<f64> = xavier_uniform(3, 4, &mut rng);
        let pack = [x.data(), w.data(), b.data()].concat();
        let loss = |v: &[f64]| {
            let x = Tensor::matrix(3, 5, v[..15].to_vec()).unwrap();
            let w = Tensor::matrix(4, 5, v[15..35].to_vec()).unwrap();
            let b = Tensor::from_vec(&[4], v[35..].to_vec()).unwrap();
            let y = linear_forward(&x, &w, &b).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = linear_backward(&x, &w, &r);
        let analytic = [g.dx.data(), g.dw.data(), g.db.data()].concat();
        let report = grad_check(loss, &analytic, &pack, 1e-4);
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0f64, 0.0, 0.0]).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&[7.5f64, 7.5, 7.5]).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&[0.0f64, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert!(matches!(softmax(&[0.0f64, f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, _) = cross_entropy(&[0.0f64; 4], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let (l, _) = cross_entropy(&[100.0f64, 0.0, 0.0], 0).unwrap();
        assert!(l < 1e-40);
        assert!(matches!(
            cross_entropy(&[0.0f64; 3], 3),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = seed::rng(3);
        let logits: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (_, grad) = cross_entropy(&logits, 5).unwrap();
        let report = grad_check(|v: &[f64]| cross_entropy(v, 5).unwrap().0, &grad, &logits, 1e-4);
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn layer_norm_grad_check_near_zero_variance() {
        let mut rng = seed::rng(4);
        let x: Vec<f64> = (0..12).map(|_| 0.7 + 1e-2 * rng.random_range(-1.0..1.0)).collect();
        let gam: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();
        let bet: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();
        let r: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let build = |v: &[f64]| {
            let mut ln = LayerNorm::<f64>::new("ln", 6);
            ln.gamma.value = Tensor::from_vec(&[6], v[12..18].to_vec()).unwrap();
            ln.beta.value = Tensor::from_vec(&[6], v[18..].to_vec()).unwrap();
            (Tensor::matrix(2, 6, v[..12].to_vec()).unwrap(), ln)
        };
        let point = [x.clone(), gam, bet].concat();
        let loss = |v: &[f64]| {
            let (x, ln) = build(v);
            let (y, _) = ln.forward(&x);
            y.data().iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
        };
        let (xt, mut ln) = build(&point);
        let (_, cache) = ln.forward(&xt);
        let dx = ln.backward(&cache, &Tensor::matrix(2, 6, r.clone()).unwrap());
        let analytic = [dx.data(), ln.gamma.grad.data(), ln.beta.grad.data()].concat();
        let report = grad_check(loss, &analytic, &point, 1e-6);
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.3, 2.0] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in proptest::collection::vec(-15.0f64..15.0, 2..20)) {
            let p = softmax(&logits).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn cross_entropy_nonnegative(logits in proptest::collection::vec(-20.0f64..20.0, 2..10), t in 0usize..10) {
            let t = t % logits.len();
            let (l, _) = cross_entropy(&logits, t).unwrap();
            prop_assert!(l >= 0.0);
        }
    }
}
