//! The registered differentiable ops with seeded input generators, so every
//! backward pass can be checked by name.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{Connector, ConnectorOp};
use crate::grad::{grad_check, Differentiable, Downsample2x, MatMul, Softmax, DEFAULT_STEP};
use crate::tensor::{Activation, Tensor};
use crate::train::decoder::{BlockParams, DecoderBlockOp};
use crate::vision::{LocalGlobalPoolOp, PatchEmbedOp};

/// Largest relative error accepted by the suite.
pub const TOLERANCE: f64 = 1e-3;

type Generator = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

pub struct RegisteredOp {
    pub name: &'static str,
    pub op: Box<dyn Differentiable>,
    generate: Generator,
}

fn u(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, scale, rng)
}

fn pool_inputs(rng: &mut ChaCha8Rng, two_layer: bool) -> Vec<Tensor> {
    let mut v = vec![u(&[4, 4, 3], 1.0, rng), u(&[6, 3], 0.8, rng), u(&[3], 0.2, rng)];
    if two_layer {
        v.push(u(&[3, 3], 0.8, rng));
        v.push(u(&[3], 0.2, rng));
    }
    v
}

/// Every op, in a fixed order.
pub fn registry() -> Vec<RegisteredOp> {
    fn reg(name: &'static str, op: impl Differentiable + 'static, generate: Generator) -> RegisteredOp {
        RegisteredOp { name, op: Box::new(op), generate }
    }
    vec![
        reg("matmul", MatMul, |r| vec![u(&[3, 4], 1.0, r), u(&[4, 2], 1.0, r)]),
        reg("softmax", Softmax { axis: 1 }, |r| vec![u(&[2, 5, 3], 2.0, r)]),
        reg("bilinear_downsample2x", Downsample2x, |r| vec![u(&[4, 6, 2], 1.0, r)]),
        reg("patch_embed", PatchEmbedOp, |r| vec![u(&[4, 12], 1.0, r), u(&[12, 5], 0.5, r), u(&[5], 0.2, r)]),
        reg("local_global_pool", LocalGlobalPoolOp { activation: Activation::Gelu, two_layer: false }, |r| {
            pool_inputs(r, false)
        }),
        reg("local_global_pool_2layer", LocalGlobalPoolOp { activation: Activation::Gelu, two_layer: true }, |r| {
            pool_inputs(r, true)
        }),
        reg("connector", ConnectorOp, |r| {
            let c = Connector::seeded(4, 5, 3, rand::Rng::random(r));
            vec![u(&[3, 4], 1.0, r), c.weight1, u(&[5], 0.2, r), c.weight2, u(&[3], 0.2, r)]
        }),
        reg("decoder_block", DecoderBlockOp, |r| {
            let mut v = vec![u(&[5, 4], 1.0, r)];
            v.extend(BlockParams::random(4, 6, r).as_slice().into_iter().cloned());
            v[6] = u(&[6], 0.3, r);
            v[8] = u(&[4], 0.3, r);
            v
        }),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpReport {
    pub op: String,
    pub seeds: u64,
    pub max_error: f64,
    pub passed: bool,
}

/// Checks the named op (or all of them with `None` / `"all"`) over seeds
/// `0..seeds`.
pub fn run_suite(filter: Option<&str>, seeds: u64) -> Result<Vec<OpReport>> {
    let ops: Vec<RegisteredOp> =
        registry().into_iter().filter(|r| matches!(filter, None | Some("all")) || filter == Some(r.name)).collect();
    if ops.is_empty() {
        let names: Vec<&str> = registry().iter().map(|r| r.name).collect();
        return Err(Error::Input(format!(
            "unknown op '{}' (known: all, {})",
            filter.unwrap_or_default(),
            names.join(", ")
        )));
    }
    ops.iter()
        .map(|r| {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                worst = worst.max(grad_check(r.op.as_ref(), &(r.generate)(&mut rng), DEFAULT_STEP)?);
            }
            Ok(OpReport { op: r.name.to_string(), seeds, max_error: worst, passed: worst < TOLERANCE })
        })
        .collect()
}
