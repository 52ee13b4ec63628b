//! Hand-written reverse-mode gradients and a central-difference checker.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, axis_split, Tensor, WINDOW};

/// An op with a forward pass and a matching hand-written backward pass.
pub trait Differentiable: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;

    /// Maps the gradient of the output to one gradient per input.
    fn backward(&self, inputs: &[Tensor], output: &Tensor, grad_output: &Tensor) -> Result<Vec<Tensor>>;
}

/// One evaluated application of an op, kept so its backward can run later.
pub struct GradRecord<'a> {
    op: &'a dyn Differentiable,
    pub inputs: Vec<Tensor>,
    pub output: Tensor,
}

impl<'a> GradRecord<'a> {
    pub fn record(op: &'a dyn Differentiable, inputs: Vec<Tensor>) -> Result<Self> {
        let output = op.forward(&inputs)?;
        Ok(Self { op, inputs, output })
    }

    pub fn op_name(&self) -> &str {
        self.op.name()
    }

    pub fn backward(&self, grad_output: &Tensor) -> Result<Vec<Tensor>> {
        if grad_output.shape() != self.output.shape() {
            return Err(Error::Dimension {
                op: "backward",
                left: self.output.shape().to_vec(),
                right: grad_output.shape().to_vec(),
            });
        }
        let grads = self.op.backward(&self.inputs, &self.output, grad_output)?;
        if grads.len() != self.inputs.len() {
            return Err(Error::Numeric(format!(
                "{} produced {} gradients for {} inputs",
                self.op.name(),
                grads.len(),
                self.inputs.len()
            )));
        }
        for (g, x) in grads.iter().zip(&self.inputs) {
            if g.shape() != x.shape() {
                return Err(Error::Dimension { op: "backward", left: x.shape().to_vec(), right: g.shape().to_vec() });
            }
        }
        Ok(grads)
    }
}

pub const DEFAULT_STEP: f64 = 1e-3;

/// Compares `op`'s analytic gradient against central differences.
///
/// The scalar probed is `L = Σ wᵢ·yᵢ` for fixed pseudo-random weights `w`,
/// accumulated in `f64`. Returns the maximum over every input coordinate of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check(op: &dyn Differentiable, inputs: &[Tensor], step: f64) -> Result<f64> {
    if !(step > 1e-5 && step < 1e-2) {
        return Err(Error::precondition(format!("grad_check step {step} outside (1e-5, 1e-2)")));
    }
    let output = op.forward(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let probe = Tensor::uniform(output.shape(), 1.0, &mut rng);
    let record = GradRecord { op, inputs: inputs.to_vec(), output };
    let analytic = record.backward(&probe)?;

    let objective = |xs: &[Tensor]| -> Result<f64> {
        let y = op.forward(xs)?;
        let total: f64 = y.data().iter().zip(probe.data()).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
        if !total.is_finite() {
            return Err(Error::Numeric(format!("{} produced a non-finite objective", op.name())));
        }
        Ok(total)
    };

    let mut worst = 0.0f64;
    let mut perturbed = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[k].numel() {
            let original = inputs[k].data()[j];
            let plus = (f64::from(original) + step) as f32;
            let minus = (f64::from(original) - step) as f32;
            perturbed[k].data_mut()[j] = plus;
            let up = objective(&perturbed)?;
            perturbed[k].data_mut()[j] = minus;
            let down = objective(&perturbed)?;
            perturbed[k].data_mut()[j] = original;

            let numeric = (up - down) / (f64::from(plus) - f64::from(minus));
            let a = f64::from(grad.data()[j]);
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in {} input {k}", op.name())));
            }
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// `[m×k]·[k×n]`.
pub struct MatMul;

impl Differentiable for MatMul {
    fn name(&self) -> &str {
        "matmul"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let [a, b] = expect_inputs::<2>(self.name(), inputs)?;
        a.matmul(b)
    }

    fn backward(&self, inputs: &[Tensor], _output: &Tensor, grad_output: &Tensor) -> Result<Vec<Tensor>> {
        let [a, b] = expect_inputs::<2>(self.name(), inputs)?;
        let da = grad_output.matmul(&b.transpose()?)?;
        let db = a.transpose()?.matmul(grad_output)?;
        Ok(vec![da, db])
    }
}

pub struct Softmax {
    pub axis: usize,
}

impl Differentiable for Softmax {
    fn name(&self) -> &str {
        "softmax"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let [x] = expect_inputs::<1>(self.name(), inputs)?;
        tensor::softmax(x, self.axis)
    }

    fn backward(&self, _inputs: &[Tensor], output: &Tensor, grad_output: &Tensor) -> Result<Vec<Tensor>> {
        let (outer, len, inner) = axis_split(output.shape(), self.axis)?;
        let y = output.data();
        let dy = grad_output.data();
        let mut dx = vec![0.0f32; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let dot: f32 = (0..len).map(|k| y[idx(k)] * dy[idx(k)]).sum();
                for k in 0..len {
                    dx[idx(k)] = y[idx(k)] * (dy[idx(k)] - dot);
                }
            }
        }
        Ok(vec![Tensor::from_parts(output.shape().to_vec(), dx)])
    }
}

pub struct Downsample2x;

impl Differentiable for Downsample2x {
    fn name(&self) -> &str {
        "bilinear_downsample2x"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let [x] = expect_inputs::<1>(self.name(), inputs)?;
        tensor::bilinear_downsample2x(x)
    }

    fn backward(&self, inputs: &[Tensor], _output: &Tensor, grad_output: &Tensor) -> Result<Vec<Tensor>> {
        let [x] = expect_inputs::<1>(self.name(), inputs)?;
        Ok(vec![downsample2x_backward(x.shape(), grad_output)?])
    }
}

/// Each input cell receives a quarter of its window's output gradient.
pub(crate) fn downsample2x_backward(input_shape: &[usize], grad_output: &Tensor) -> Result<Tensor> {
    let &[h, w, c] = input_shape else {
        return Err(Error::precondition("downsample backward needs an H×W×C shape"));
    };
    let ow = w / 2;
    let g = grad_output.data();
    let mut dx = vec![0.0f32; h * w * c];
    for i in 0..h / 2 {
        for j in 0..ow {
            let src = &g[(i * ow + j) * c..(i * ow + j + 1) * c];
            for (di, dj) in WINDOW {
                let base = ((2 * i + di) * w + 2 * j + dj) * c;
                for (d, &v) in dx[base..base + c].iter_mut().zip(src) {
                    *d = 0.25 * v;
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

pub(crate) fn expect_inputs<'a, const N: usize>(op: &str, inputs: &'a [Tensor]) -> Result<[&'a Tensor; N]> {
    if inputs.len() != N {
        return Err(Error::precondition(format!("{op} takes {N} inputs, got {}", inputs.len())));
    }
    Ok(std::array::from_fn(|i| &inputs[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_backward_matches_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::uniform(&[3, 4], 1.0, &mut rng);
            let b = Tensor::uniform(&[4, 2], 1.0, &mut rng);
            let err = grad_check(&MatMul, &[a, b], 1e-3).unwrap();
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn softmax_and_downsample_backward() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::uniform(&[1, 4], 2.0, &mut rng);
            assert!(grad_check(&Softmax { axis: 1 }, &[x], 1e-3).unwrap() < 1e-3);
            let f = Tensor::uniform(&[4, 4, 3], 1.0, &mut rng);
            assert!(grad_check(&Downsample2x, &[f], 1e-3).unwrap() < 1e-3);
        }
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let x = Tensor::zeros(&[1, 2]);
        assert!(grad_check(&Softmax { axis: 1 }, std::slice::from_ref(&x), 1e-6).is_err());
        assert!(grad_check(&Softmax { axis: 1 }, &[x], 0.05).is_err());
    }

    struct WrongBackward;

    impl Differentiable for WrongBackward {
        fn name(&self) -> &str {
            "square-with-bad-backward"
        }
        fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
            Ok(inputs[0].map(|v| v * v))
        }
        fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
            Ok(vec![inputs[0].zip_map(g, |x, g| x * g)?])
        }
    }

    #[test]
    fn checker_catches_a_wrong_backward() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        assert!(grad_check(&WrongBackward, &[x], 1e-3).unwrap() > 0.1);
    }

    #[test]
    fn record_checks_gradient_shape() {
        let a = Tensor::zeros(&[2, 2]);
        let rec = GradRecord::record(&MatMul, vec![a.clone(), a]).unwrap();
        assert_eq!(rec.op_name(), "matmul");
        assert!(rec.backward(&Tensor::zeros(&[2, 3])).is_err());
        let grads = rec.backward(&Tensor::full(&[2, 2], 1.0)).unwrap();
        assert_eq!(grads.len(), 2);
    }
}
