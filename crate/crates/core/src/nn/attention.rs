//! Unmasked multi-head self-attention and the pre-norm transformer block.

use super::layers::{gelu, gelu_grad, softmax_in_place, LayerNorm, LayerNormCache, Linear};
use super::{gemm, Parameter, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention<S: Scalar = f32> {
    pub n_heads: usize,
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
}

pub struct AttentionCache<S> {
    x: Tensor<S>,
    q: Vec<Vec<S>>,
    k: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    /// Per-head `T x T` attention weights.
    pub probs: Vec<Tensor<S>>,
    ctx: Tensor<S>,
}

fn split_heads<S: Scalar>(x: &Tensor<S>, n_heads: usize) -> Vec<Vec<S>> {
    let (t, d) = (x.rows(), x.cols());
    let dh = d / n_heads;
    (0..n_heads)
        .map(|h| {
            let mut out = Vec::with_capacity(t * dh);
            for r in 0..t {
                out.extend_from_slice(&x.row(r)[h * dh..(h + 1) * dh]);
            }
            out
        })
        .collect()
}

fn merge_head<S: Scalar>(dst: &mut Tensor<S>, head: &[S], h: usize, dh: usize) {
    for r in 0..dst.rows() {
        dst.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(&head[r * dh..(r + 1) * dh]);
    }
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new(prefix: &str, dim: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "model width {dim} is not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            n_heads,
            wq: Linear::new(&format!("{prefix}.wq"), dim, dim, rng),
            wk: Linear::new(&format!("{prefix}.wk"), dim, dim, rng),
            wv: Linear::new(&format!("{prefix}.wv"), dim, dim, rng),
            wo: Linear::new(&format!("{prefix}.wo"), dim, dim, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, AttentionCache<S>)> {
        let (t, d) = (x.rows(), x.cols());
        let dh = d / self.n_heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let q = split_heads(&self.wq.forward(x)?, self.n_heads);
        let k = split_heads(&self.wk.forward(x)?, self.n_heads);
        let v = split_heads(&self.wv.forward(x)?, self.n_heads);
        let mut ctx = Tensor::zeros(&[t, d]);
        let mut probs = Vec::with_capacity(self.n_heads);
        let mut head_out = vec![S::zero(); t * dh];
        for h in 0..self.n_heads {
            let mut scores = Tensor::zeros(&[t, t]);
            gemm(false, true, t, t, dh, &q[h], &k[h], S::zero(), scores.data_mut());
            for r in 0..t {
                let row = scores.row_mut(r);
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            gemm(false, false, t, dh, t, scores.data(), &v[h], S::zero(), &mut head_out);
            merge_head(&mut ctx, &head_out, h, dh);
            probs.push(scores);
        }
        let y = self.wo.forward(&ctx)?;
        Ok((
            y,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        ))
    }

    pub fn backward(&mut self, cache: &AttentionCache<S>, dy: &Tensor<S>) -> Tensor<S> {
        let (t, d) = (cache.x.rows(), cache.x.cols());
        let dh = d / self.n_heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let dctx = self.wo.backward(&cache.ctx, dy);
        let dctx_heads = split_heads(&dctx, self.n_heads);
        let mut dq = Tensor::zeros(&[t, d]);
        let mut dk = Tensor::zeros(&[t, d]);
        let mut dv = Tensor::zeros(&[t, d]);
        let mut dp = vec![S::zero(); t * t];
        let mut buf = vec![S::zero(); t * dh];
        for h in 0..self.n_heads {
            let p = cache.probs[h].data();
            // dV = P^T dctx
            gemm(true, false, t, dh, t, p, &dctx_heads[h], S::zero(), &mut buf);
            merge_head(&mut dv, &buf, h, dh);
            // dP = dctx V^T, then through the row softmax
            gemm(false, true, t, t, dh, &dctx_heads[h], &cache.v[h], S::zero(), &mut dp);
            for r in 0..t {
                let (pr, dr) = (&p[r * t..(r + 1) * t], &mut dp[r * t..(r + 1) * t]);
                let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<S>();
                for (g, &pv) in dr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            gemm(false, false, t, dh, t, &dp, &cache.k[h], S::zero(), &mut buf);
            merge_head(&mut dq, &buf, h, dh);
            gemm(true, false, t, dh, t, &dp, &cache.q[h], S::zero(), &mut buf);
            merge_head(&mut dk, &buf, h, dh);
        }
        let mut dx = self.wq.backward(&cache.x, &dq);
        dx.add_assign(&self.wk.backward(&cache.x, &dk));
        dx.add_assign(&self.wv.backward(&cache.x, &dv));
        dx
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .into_iter()
            .flat_map(|l| l.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut out = self.wq.params_mut();
        out.extend(self.wk.params_mut());
        out.extend(self.wv.params_mut());
        out.extend(self.wo.params_mut());
        out
    }
}

/// `h = x + MHSA(LN(x)); y = h + FFN(LN(h))`, FFN = linear, GELU, linear.
#[derive(Debug, Clone)]
pub struct TransformerBlock<S: Scalar = f32> {
    pub ln1: LayerNorm<S>,
    pub attn: MultiHeadAttention<S>,
    pub ln2: LayerNorm<S>,
    pub ff1: Linear<S>,
    pub ff2: Linear<S>,
}

pub struct BlockCache<S> {
    ln1: LayerNormCache<S>,
    pub attn: AttentionCache<S>,
    ln2: LayerNormCache<S>,
    ff_in: Tensor<S>,
    pre_act: Tensor<S>,
    act: Tensor<S>,
}

impl<S: Scalar> TransformerBlock<S> {
    pub fn new(prefix: &str, dim: usize, n_heads: usize, ffn_dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), dim),
            attn: MultiHeadAttention::new(&format!("{prefix}.attn"), dim, n_heads, rng)?,
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), dim),
            ff1: Linear::new(&format!("{prefix}.ff1"), dim, ffn_dim, rng),
            ff2: Linear::new(&format!("{prefix}.ff2"), ffn_dim, dim, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, BlockCache<S>)> {
        if x.cols() != self.ln1.gamma.value.len() || x.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "block expects T x {}, got {:?}",
                self.ln1.gamma.value.len(),
                x.shape()
            )));
        }
        let (attn_in, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&attn_in)?;
        let mut h = x.clone();
        h.add_assign(&a);
        let (ff_in, ln2) = self.ln2.forward(&h);
        let pre_act = self.ff1.forward(&ff_in)?;
        let mut act = pre_act.clone();
        act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let mut y = self.ff2.forward(&act)?;
        y.add_assign(&h);
        Ok((
            y,
            BlockCache {
                ln1,
                attn,
                ln2,
                ff_in,
                pre_act,
                act,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BlockCache<S>, dy: &Tensor<S>) -> Tensor<S> {
        let mut dact = self.ff2.backward(&cache.act, dy);
        for (g, &x) in dact.data_mut().iter_mut().zip(cache.pre_act.data()) {
            *g *= gelu_grad(x);
        }
        let dff_in = self.ff1.backward(&cache.ff_in, &dact);
        let mut dh = dy.clone();
        dh.add_assign(&self.ln2.backward(&cache.ln2, &dff_in));
        let dattn_in = self.attn.backward(&cache.attn, &dh);
        let mut dx = dh;
        dx.add_assign(&self.ln1.backward(&cache.ln1, &dattn_in));
        dx
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut out = self.ln1.params();
        out.extend(self.attn.params());
        out.extend(self.ln2.params());
        out.extend(self.ff1.params());
        out.extend(self.ff2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut out = self.ln1.params_mut();
        out.extend(self.attn.params_mut());
        out.extend(self.ln2.params_mut());
        out.extend(self.ff1.params_mut());
        out.extend(self.ff2.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;
    use crate::nn::{assign_flat, flatten_grads, flatten_values, zero_grads};
    use crate::seed;
    use rand::Rng as _;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<f64> {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn single_frame_attends_to_itself() {
        let mut rng = seed::rng(5);
        let attn = MultiHeadAttention::<f64>::new("a", 8, 4, &mut rng).unwrap();
        let (_, cache) = attn.forward(&random(1, 8, &mut rng)).unwrap();
        assert_eq!(cache.probs.len(), 4);
        for p in &cache.probs {
            assert_eq!(p.data(), &[1.0]);
        }
    }

    #[test]
    fn rejects_indivisible_width() {
        let mut rng = seed::rng(5);
        assert!(MultiHeadAttention::<f32>::new("a", 10, 4, &mut rng).is_err());
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let mut rng = seed::rng(6);
        let block = TransformerBlock::<f64>::new("b", 8, 2, 16, &mut rng).unwrap();
        let x = random(5, 8, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let (y, _) = block.forward(&x).unwrap();
        let (yp, _) = block.forward(&x.gather_rows(&perm)).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in yp.row(i).iter().zip(y.row(p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = seed::rng(7);
        let mut block = TransformerBlock::<f64>::new("b", 8, 2, 16, &mut rng).unwrap();
        // non-trivial norms so their gradients are exercised
        for p in block.params_mut() {
            if p.name.ends_with("gamma") || p.name.ends_with("beta") || p.name.ends_with("bias") {
                for v in p.value.data_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
        }
        let x = random(3, 8, &mut rng);
        let r = random(3, 8, &mut rng);
        let n_x = x.len();
        let point = [x.data().to_vec(), flatten_values(&block.params())].concat();

        let loss = |v: &[f64]| {
            let mut b = block.clone();
            assign_flat(&mut b.params_mut(), &v[n_x..]);
            let x = Tensor::matrix(3, 8, v[..n_x].to_vec()).unwrap();
            let (y, _) = b.forward(&x).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };

        let mut b = block.clone();
        zero_grads(&mut b.params_mut());
        let (_, cache) = b.forward(&x).unwrap();
        let dx = b.backward(&cache, &r);
        let analytic = [dx.data().to_vec(), flatten_grads(&b.params())].concat();

        // The key bias shifts every score in a row equally, so its true
        // gradient is zero and central differences only see rounding noise.
        let mut skip = vec![false; n_x];
        for p in b.params() {
            skip.extend(std::iter::repeat_n(p.name == "b.attn.wk.bias", p.value.len()));
        }
        let bk: Vec<f64> = (0..point.len()).filter(|&i| skip[i]).map(|i| analytic[i]).collect();
        assert_eq!(bk.len(), 8);
        assert!(bk.iter().all(|g| g.abs() < 1e-12), "{bk:?}");
        let keep: Vec<usize> = (0..point.len()).filter(|&i| !skip[i]).collect();
        let reduced = |v: &[f64]| {
            let mut full = point.clone();
            for (&i, &x) in keep.iter().zip(v) {
                full[i] = x;
            }
            loss(&full)
        };
        let sub = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let report = grad_check(reduced, &sub(&analytic), &sub(&point), 1e-5);
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
