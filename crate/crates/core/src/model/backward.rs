//! Reverse-mode gradients of residual-stream losses with respect to the
//! toy model's parameters. Only the embeddings and blocks up to the loss
//! layer receive gradient; everything downstream is untouched by
//! construction.

use ndarray::{s, Array2, ArrayView1};

use super::toy::{col_sum, gelu_grad, Block, BlockCache, LayerNorm, LnCache};
use super::{TokenId, ToyModel};
use crate::error::{Error, Result};

/// Squared-distance losses on the residual stream after one block, averaged
/// over positions.
#[derive(Debug, Clone, Copy)]
pub enum ResidualLoss<'a> {
    /// `weight · mean_p ‖h_p − target‖²`.
    ToVector { target: ArrayView1<'a, f32>, weight: f32 },
    /// `weight · mean_p ‖h_p − reference_p‖²`.
    ToReference {
        reference: &'a Array2<f32>,
        weight: f32,
    },
}

impl ResidualLoss<'_> {
    /// Loss value and its gradient with respect to `h`.
    fn eval(&self, h: &Array2<f32>) -> Result<(f64, Array2<f32>)> {
        let n = h.nrows();
        if n == 0 {
            return Ok((0.0, h.clone()));
        }
        let (diff, weight) = match *self {
            ResidualLoss::ToVector { target, weight } => {
                if target.len() != h.ncols() {
                    return Err(Error::shape("loss target", &[h.ncols()], &[target.len()]));
                }
                (h - &target, weight)
            }
            ResidualLoss::ToReference { reference, weight } => {
                if reference.shape() != h.shape() {
                    return Err(Error::shape("loss reference", h.shape(), reference.shape()));
                }
                (h - reference, weight)
            }
        };
        let sq: f64 = diff.iter().map(|&v| (v as f64) * (v as f64)).sum();
        let loss = weight as f64 * sq / n as f64;
        let grad = diff * (2.0 * weight / n as f32);
        Ok((loss, grad))
    }
}

/// Parameter gradients, shaped exactly like the model they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub ToyModel);

impl Gradients {
    pub fn zeros_like(model: &ToyModel) -> Self {
        let mut g = model.clone();
        g.for_each_tensor_mut(|_, t| t.fill(0.0));
        Self(g)
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        let rhs = other.0.tensors();
        let mut i = 0;
        self.0.for_each_tensor_mut(|_, t| {
            for (a, b) in t.iter_mut().zip(rhs[i].1) {
                *a += *b;
            }
            i += 1;
        });
    }

    pub fn norm(&self) -> f64 {
        self.0
            .tensors()
            .iter()
            .flat_map(|(_, t, _)| t.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

impl ToyModel {
    /// Loss on the residual after block `layer` and its parameter gradient.
    pub fn residual_loss_grad(
        &self,
        tokens: &[TokenId],
        layer: usize,
        loss: ResidualLoss<'_>,
    ) -> Result<(f64, Gradients)> {
        let (h, caches) = self.forward_cached(tokens, layer)?;
        let (value, mut dh) = loss.eval(&h)?;
        let mut grads = Gradients::zeros_like(self);
        for (i, cache) in caches.iter().enumerate().rev() {
            dh = block_backward(&self.blocks[i], &mut grads.0.blocks[i], cache, &dh, self.config.n_heads);
        }
        for (p, &t) in tokens.iter().enumerate() {
            let row = dh.row(p);
            let mut te = grads.0.tok_emb.row_mut(t as usize);
            te += &row;
            let mut pe = grads.0.pos_emb.row_mut(p);
            pe += &row;
        }
        Ok((value, grads))
    }

    pub(crate) fn sgd_step(&mut self, grads: &Gradients, learning_rate: f32) {
        let g = grads.0.tensors();
        let mut i = 0;
        self.for_each_tensor_mut(|_, t| {
            for (p, d) in t.iter_mut().zip(g[i].1) {
                *p -= learning_rate * *d;
            }
            i += 1;
        });
    }
}

fn ln_backward(ln: &LayerNorm, grad: &mut LayerNorm, cache: &LnCache, dy: &Array2<f32>) -> Array2<f32> {
    grad.gain += &col_sum(&(dy * &cache.normed));
    grad.bias += &col_sum(dy);
    let d = dy.ncols() as f32;
    let dxhat = dy * &ln.gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let xh = cache.normed.row(i);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let r = cache.inv_std[i];
        for ((o, &gv), &xv) in dx.row_mut(i).iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = r * (gv - mean_g - xv * mean_gx);
        }
    }
    dx
}

fn block_backward(
    block: &Block,
    grad: &mut Block,
    cache: &BlockCache,
    dout: &Array2<f32>,
    n_heads: usize,
) -> Array2<f32> {
    // MLP branch: out = mid + act·W_out + b_out
    grad.w_out += &cache.act.t().dot(dout);
    grad.b_out += &col_sum(dout);
    let dact = dout.dot(&block.w_out.t());
    let dpre = &dact * &cache.pre.mapv(gelu_grad);
    grad.w_in += &cache.mlp_in.t().dot(&dpre);
    grad.b_in += &col_sum(&dpre);
    let dmlp_in = dpre.dot(&block.w_in.t());
    let dmid = dout + &ln_backward(&block.ln2, &mut grad.ln2, &cache.ln2, &dmlp_in);

    // Attention branch: mid = input + z·W_o
    grad.w_o += &cache.z.t().dot(&dmid);
    let dz = dmid.dot(&block.w_o.t());
    let d = dz.ncols();
    let d_head = d / n_heads;
    let scale = 1.0 / (d_head as f32).sqrt();
    let mut dq = Array2::zeros(dz.raw_dim());
    let mut dk = Array2::zeros(dz.raw_dim());
    let mut dv = Array2::zeros(dz.raw_dim());
    for (head, probs) in cache.probs.iter().enumerate() {
        let cols = s![.., head * d_head..(head + 1) * d_head];
        let dz_h = dz.slice(cols);
        let dprobs = dz_h.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&dz_h));
        let mut dscores = Array2::zeros(probs.raw_dim());
        for i in 0..probs.nrows() {
            let p = probs.row(i);
            let dp = dprobs.row(i);
            let inner = p.dot(&dp);
            for (o, (&pv, &dpv)) in dscores.row_mut(i).iter_mut().zip(p.iter().zip(dp.iter())) {
                *o = pv * (dpv - inner) * scale;
            }
        }
        dq.slice_mut(cols).assign(&dscores.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&dscores.t().dot(&cache.q.slice(cols)));
    }
    grad.w_q += &cache.attn_in.t().dot(&dq);
    grad.w_k += &cache.attn_in.t().dot(&dk);
    grad.w_v += &cache.attn_in.t().dot(&dv);
    let dattn_in = dq.dot(&block.w_q.t()) + dk.dot(&block.w_k.t()) + dv.dot(&block.w_v.t());
    dmid + ln_backward(&block.ln1, &mut grad.ln1, &cache.ln1, &dattn_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use crate::model::ModelConfig;
    use crate::rng;

    fn small_model() -> ToyModel {
        let mut cfg = ModelConfig::new(8, 2, 2, 11, 99);
        cfg.max_seq_len = 8;
        cfg.d_mlp = Some(12);
        ToyModel::new(cfg).unwrap()
    }

    /// Central finite differences over every parameter, compared to the
    /// analytic gradient by cosine similarity and relative norm.
    #[test]
    fn gradient_matches_finite_differences() {
        let model = small_model();
        let tokens = [1u32, 4, 7, 2, 9];
        let mut r = rng::seeded(5);
        let target = Array1::from_shape_simple_fn(8, || rng::symmetric_f32(&mut r, 2.0));
        let loss = ResidualLoss::ToVector {
            target: target.view(),
            weight: 0.7,
        };
        let (_, analytic) = model.residual_loss_grad(&tokens, 1, loss).unwrap();

        let eps = 1e-2f32;
        let mut numeric = Gradients::zeros_like(&model);
        let names: Vec<String> = model.tensors().iter().map(|(n, _, _)| n.clone()).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = model.tensors()[ti].1.len();
            for j in 0..len {
                let mut plus = model.clone();
                plus.tensor_mut(name).unwrap()[j] += eps;
                let mut minus = model.clone();
                minus.tensor_mut(name).unwrap()[j] -= eps;
                let lp = plus.residual_loss_grad(&tokens, 1, loss).unwrap().0;
                let lm = minus.residual_loss_grad(&tokens, 1, loss).unwrap().0;
                numeric.0.tensor_mut(name).unwrap()[j] = ((lp - lm) / (2.0 * eps as f64)) as f32;
            }
        }
        let a: Vec<f64> = analytic.0.tensors().iter().flat_map(|t| t.1.iter().map(|&v| v as f64)).collect();
        let n: Vec<f64> = numeric.0.tensors().iter().flat_map(|t| t.1.iter().map(|&v| v as f64)).collect();
        let dot: f64 = a.iter().zip(&n).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cosine = dot / (na * nn);
        assert!(cosine > 0.999, "cosine {cosine}");
        assert!((na / nn - 1.0).abs() < 0.01, "norm ratio {}", na / nn);
    }

    #[test]
    fn reference_loss_zero_at_reference() {
        let model = small_model();
        let tokens = [3u32, 3, 5];
        let h = model.residual(&tokens, 0).unwrap();
        let (value, grads) = model
            .residual_loss_grad(&tokens, 0, ResidualLoss::ToReference { reference: &h, weight: 3.0 })
            .unwrap();
        assert_eq!(value, 0.0);
        assert_eq!(grads.norm(), 0.0);
    }

    #[test]
    fn downstream_blocks_get_no_gradient() {
        let model = small_model();
        let target = Array1::<f32>::ones(8);
        let (_, g) = model
            .residual_loss_grad(&[1, 2], 0, ResidualLoss::ToVector { target: target.view(), weight: 1.0 })
            .unwrap();
        assert!(g.0.blocks[1].w_in.iter().all(|&v| v == 0.0));
        assert!(g.0.unembed.iter().all(|&v| v == 0.0));
        assert!(g.0.blocks[0].w_in.iter().any(|&v| v != 0.0));
    }
}
