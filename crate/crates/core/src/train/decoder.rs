//! Single-block causal decoder with hand-written backward passes.
//!
//! ```text
//! Q,K,V = X·Wq, X·Wk, X·Wv
//! P     = softmax(mask(Q·Kᵀ / √D))        rows, j ≤ i only
//! H     = X + (P·V)·Wo
//! Y     = H + GELU(H·W1 + b1)·W2 + b2
//! logits = Y·Wh + bh
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::grad::{expect_inputs, Differentiable};
use crate::tensor::{Activation, Tensor};

/// Parameters of the attention + MLP block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl BlockParams {
    pub fn random<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let s = (3.0 / dim as f32).sqrt();
        let sh = (3.0 / hidden as f32).sqrt();
        Self {
            wq: Tensor::uniform(&[dim, dim], s, rng),
            wk: Tensor::uniform(&[dim, dim], s, rng),
            wv: Tensor::uniform(&[dim, dim], s, rng),
            wo: Tensor::uniform(&[dim, dim], s * 0.5, rng),
            w1: Tensor::uniform(&[dim, hidden], s, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::uniform(&[hidden, dim], sh * 0.5, rng),
            b2: Tensor::zeros(&[dim]),
        }
    }

    pub fn as_slice(&self) -> [&Tensor; 8] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn from_inputs(t: &[Tensor]) -> Self {
        Self {
            wq: t[0].clone(),
            wk: t[1].clone(),
            wv: t[2].clone(),
            wo: t[3].clone(),
            w1: t[4].clone(),
            b1: t[5].clone(),
            w2: t[6].clone(),
            b2: t[7].clone(),
        }
    }
}

struct BlockCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Tensor,
    attn: Tensor,
    h: Tensor,
    pre: Tensor,
    act: Tensor,
}

const ACT: Activation = Activation::Gelu;

fn block_forward(x: &Tensor, p: &BlockParams) -> Result<(Tensor, BlockCache)> {
    let (len, dim) = x.dims2()?;
    if p.wq.shape() != [dim, dim] {
        return Err(Error::Dimension { op: "decoder_block", left: x.shape().to_vec(), right: p.wq.shape().to_vec() });
    }
    let q = x.matmul(&p.wq)?;
    let k = x.matmul(&p.wk)?;
    let v = x.matmul(&p.wv)?;
    let scale = 1.0 / (dim as f32).sqrt();
    let scores = q.matmul(&k.transpose()?)?;
    let mut probs = vec![0.0f32; len * len];
    for i in 0..len {
        let row = &scores.data()[i * len..(i + 1) * len];
        let max = row[..=i].iter().map(|v| v * scale).fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f32;
        for j in 0..=i {
            let e = (row[j] * scale - max).exp();
            probs[i * len + j] = e;
            total += e;
        }
        for j in 0..=i {
            probs[i * len + j] /= total;
        }
    }
    let probs = Tensor::from_parts(vec![len, len], probs);
    let attn = probs.matmul(&v)?;
    let h = x.add(&attn.matmul(&p.wo)?)?;
    let pre = h.matmul(&p.w1)?.add_row_bias(&p.b1)?;
    let act = pre.map(|v| ACT.apply(v));
    let y = h.add(&act.matmul(&p.w2)?.add_row_bias(&p.b2)?)?;
    Ok((y, BlockCache { q, k, v, probs, attn, h, pre, act }))
}

/// Gradients for `[x, wq, wk, wv, wo, w1, b1, w2, b2]`.
fn block_backward(x: &Tensor, p: &BlockParams, cache: &BlockCache, dy: &Tensor) -> Result<Vec<Tensor>> {
    let (len, dim) = x.dims2()?;
    let scale = 1.0 / (dim as f32).sqrt();

    // MLP branch, residual: dH starts as dY.
    let dw2 = cache.act.transpose()?.matmul(dy)?;
    let db2 = dy.sum_rows()?;
    let dact = dy.matmul(&p.w2.transpose()?)?;
    let dpre = dact.zip_map(&cache.pre, |g, a| g * ACT.derivative(a))?;
    let dw1 = cache.h.transpose()?.matmul(&dpre)?;
    let db1 = dpre.sum_rows()?;
    let mut dh = dy.clone();
    dh.add_assign(&dpre.matmul(&p.w1.transpose()?)?)?;

    // Attention branch, residual: dX starts as dH.
    let dwo = cache.attn.transpose()?.matmul(&dh)?;
    let dattn = dh.matmul(&p.wo.transpose()?)?;
    let dprobs = dattn.matmul(&cache.v.transpose()?)?;
    let dv = cache.probs.transpose()?.matmul(&dattn)?;
    let probs = cache.probs.data();
    let mut dscores = vec![0.0f32; len * len];
    for i in 0..len {
        let dot: f32 = (0..=i).map(|j| probs[i * len + j] * dprobs.data()[i * len + j]).sum();
        for j in 0..=i {
            dscores[i * len + j] = probs[i * len + j] * (dprobs.data()[i * len + j] - dot) * scale;
        }
    }
    let dscores = Tensor::from_parts(vec![len, len], dscores);
    let dq = dscores.matmul(&cache.k)?;
    let dk = dscores.transpose()?.matmul(&cache.q)?;
    let xt = x.transpose()?;
    let dwq = xt.matmul(&dq)?;
    let dwk = xt.matmul(&dk)?;
    let dwv = xt.matmul(&dv)?;
    let mut dx = dh;
    dx.add_assign(&dq.matmul(&p.wq.transpose()?)?)?;
    dx.add_assign(&dk.matmul(&p.wk.transpose()?)?)?;
    dx.add_assign(&dv.matmul(&p.wv.transpose()?)?)?;
    Ok(vec![dx, dwq, dwk, dwv, dwo, dw1, db1, dw2, db2])
}

/// The decoder block as a checkable op over `[x, wq, wk, wv, wo, w1, b1, w2, b2]`.
pub struct DecoderBlockOp;

impl Differentiable for DecoderBlockOp {
    fn name(&self) -> &str {
        "decoder_block"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        expect_inputs::<9>(self.name(), inputs)?;
        Ok(block_forward(&inputs[0], &BlockParams::from_inputs(&inputs[1..]))?.0)
    }

    fn backward(&self, inputs: &[Tensor], _output: &Tensor, grad_output: &Tensor) -> Result<Vec<Tensor>> {
        expect_inputs::<9>(self.name(), inputs)?;
        let p = BlockParams::from_inputs(&inputs[1..]);
        let (_, cache) = block_forward(&inputs[0], &p)?;
        block_backward(&inputs[0], &p, &cache, grad_output)
    }
}

/// Mean cross-entropy of `logits` rows at `targets` (`(row, class)` pairs).
/// Returns the loss and `dL/dlogits`.
pub fn cross_entropy(logits: &Tensor, targets: &[(usize, usize)]) -> Result<(f64, Tensor)> {
    let (rows, classes) = logits.dims2()?;
    if targets.is_empty() {
        return Err(Error::precondition("cross-entropy needs at least one target"));
    }
    let mut grad = vec![0.0f32; rows * classes];
    let mut loss = 0.0f64;
    let inv = 1.0 / targets.len() as f64;
    for &(r, t) in targets {
        if r >= rows || t >= classes {
            return Err(Error::precondition(format!("target ({r}, {t}) outside {rows}×{classes} logits")));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let total: f64 = row.iter().map(|&v| f64::from(v - max).exp()).sum();
        loss += (total.ln() - f64::from(row[t] - max)) * inv;
        for (c, &v) in row.iter().enumerate() {
            let p = f64::from(v - max).exp() / total;
            let onehot = if c == t { 1.0 } else { 0.0 };
            grad[r * classes + c] += ((p - onehot) * inv) as f32;
        }
    }
    Ok((loss, Tensor::from_parts(vec![rows, classes], grad)))
}

/// Embedding-level decoder: the caller supplies the input rows, so text,
/// marker, visual and audio tokens all enter the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDecoder {
    pub block: BlockParams,
    pub head: Tensor,
    pub head_bias: Tensor,
}

pub struct DecoderGrads {
    pub input: Tensor,
    /// Same order as [`BlockParams::as_slice`].
    pub block: Vec<Tensor>,
    pub head: Tensor,
    pub head_bias: Tensor,
}

impl ToyDecoder {
    pub fn random<R: Rng + ?Sized>(dim: usize, hidden: usize, vocab: usize, rng: &mut R) -> Self {
        Self {
            block: BlockParams::random(dim, hidden, rng),
            head: Tensor::uniform(&[dim, vocab], (3.0 / dim as f32).sqrt(), rng),
            head_bias: Tensor::zeros(&[vocab]),
        }
    }

    /// Logits for every position, `[len × vocab]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (y, _) = block_forward(x, &self.block)?;
        y.matmul(&self.head)?.add_row_bias(&self.head_bias)
    }

    /// Forward and backward for a next-token loss at `targets`.
    pub fn loss_and_grads(&self, x: &Tensor, targets: &[(usize, usize)]) -> Result<(f64, DecoderGrads)> {
        let (y, cache) = block_forward(x, &self.block)?;
        let logits = y.matmul(&self.head)?.add_row_bias(&self.head_bias)?;
        let (loss, dlogits) = cross_entropy(&logits, targets)?;
        let head = y.transpose()?.matmul(&dlogits)?;
        let head_bias = dlogits.sum_rows()?;
        let dy = dlogits.matmul(&self.head.transpose()?)?;
        let mut grads = block_backward(x, &self.block, &cache, &dy)?;
        let input = grads.remove(0);
        Ok((loss, DecoderGrads { input, block: grads, head, head_bias }))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::grad::grad_check;

    #[test]
    fn block_gradients_check() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::uniform(&[5, 4], 1.0, &mut rng);
            let p = BlockParams::random(4, 6, &mut rng);
            let mut inputs = vec![x];
            inputs.extend(p.as_slice().into_iter().cloned());
            // non-zero biases so their gradients are exercised off the origin
            inputs[6] = Tensor::uniform(&[6], 0.3, &mut rng);
            inputs[8] = Tensor::uniform(&[4], 0.3, &mut rng);
            let err = grad_check(&DecoderBlockOp, &inputs, 1e-3).unwrap();
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn causal_mask_hides_the_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = ToyDecoder::random(8, 16, 10, &mut rng);
        let x = Tensor::uniform(&[6, 8], 1.0, &mut rng);
        let base = dec.logits(&x).unwrap();
        for changed in 1..6 {
            let mut y = x.clone();
            for v in &mut y.data_mut()[changed * 8..] {
                *v += 0.75;
            }
            let out = dec.logits(&y).unwrap();
            assert_eq!(&out.data()[..changed * 10], &base.data()[..changed * 10]);
            assert_ne!(&out.data()[changed * 10..], &base.data()[changed * 10..]);
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = Tensor::new(vec![2, 3], vec![0.2, -1.0, 0.5, 1.5, 0.0, -0.3]).unwrap();
        let targets = [(0, 2), (1, 0)];
        let (_, g) = cross_entropy(&logits, &targets).unwrap();
        let h = 1e-3f32;
        for i in 0..6 {
            let mut up = logits.clone();
            up.data_mut()[i] += h;
            let mut down = logits.clone();
            down.data_mut()[i] -= h;
            let fd = (cross_entropy(&up, &targets).unwrap().0 - cross_entropy(&down, &targets).unwrap().0)
                / (2.0 * f64::from(h));
            assert!((fd - f64::from(g.data()[i])).abs() < 1e-4);
        }
        assert!(cross_entropy(&logits, &[]).is_err());
    }

    #[test]
    fn full_decoder_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = ToyDecoder::random(4, 8, 6, &mut rng);
        let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let targets = [(1, 2), (2, 5)];
        let (_, g) = dec.loss_and_grads(&x, &targets).unwrap();
        for i in 0..x.numel() {
            let mut up = x.clone();
            up.data_mut()[i] += 1e-3;
            let mut down = x.clone();
            down.data_mut()[i] -= 1e-3;
            let fd =
                (dec.loss_and_grads(&up, &targets).unwrap().0 - dec.loss_and_grads(&down, &targets).unwrap().0) / 2e-3;
            assert!((fd - f64::from(g.input.data()[i])).abs() < 1e-3, "coord {i}");
        }
    }
}
