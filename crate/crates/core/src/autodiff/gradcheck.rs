//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes in a no-grad graph, so it
//! shares nothing with the backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f32,
    /// Upper bound on perturbed coordinates per input; the rest are skipped.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_coords: 64,
            seed: 0,
        }
    }
}

/// Outcome for one input tensor.
#[derive(Clone, Debug)]
pub struct InputCheck {
    pub coords: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over the
    /// checked coordinates.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheck {
    /// Compare backward gradients of `Σ r ⊙ f(inputs)` (with a fixed random
    /// projection `r`) against central differences, for every input whose
    /// flag in `differentiable` is set.
    pub fn run<F>(&self, inputs: &[Tensor], differentiable: &[bool], f: F) -> Result<Vec<InputCheck>>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);

        let mut graph = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(differentiable)
            .map(|(t, &d)| {
                if d {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        let out = f(&mut graph, &vars)?;
        let out_shape = graph.value(out).shape().to_vec();
        let proj = Tensor::from_fn(out_shape, |_| rng.gen_range(-1.0f32..1.0));
        let pv = graph.constant(proj.clone());
        let prod = graph.mul(out, pv)?;
        let loss = graph.sum(prod);
        graph.backward(loss)?;

        let objective = |xs: &[Tensor]| -> Result<f64> {
            let mut g = Graph::no_grad();
            let vs: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let y = f(&mut g, &vs)?;
            Ok(g.value(y)
                .data()
                .iter()
                .zip(proj.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum())
        };

        let mut reports = Vec::new();
        for (idx, (&var, &d)) in vars.iter().zip(differentiable).enumerate() {
            if !d {
                continue;
            }
            let analytic = graph
                .grad(var)
                .unwrap_or_else(|| Tensor::zeros(inputs[idx].shape().to_vec()));
            let numel = inputs[idx].numel();
            let coords: Vec<usize> = if numel <= self.max_coords {
                (0..numel).collect()
            } else {
                (0..self.max_coords).map(|_| rng.gen_range(0..numel)).collect()
            };
            let mut work = inputs.to_vec();
            let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for &c in &coords {
                let orig = work[idx].data()[c];
                work[idx].data_mut()[c] = orig + self.eps;
                let up = objective(&work)?;
                work[idx].data_mut()[c] = orig - self.eps;
                let down = objective(&work)?;
                work[idx].data_mut()[c] = orig;
                // Use the realised step: orig ± eps is rounded in f32.
                let step = (orig + self.eps) as f64 - (orig - self.eps) as f64;
                let numeric = (up - down) / step;
                let a = analytic.data()[c] as f64;
                diff2 += (a - numeric).powi(2);
                a2 += a * a;
                n2 += numeric * numeric;
                max_abs = max_abs.max((a - numeric).abs());
            }
            let denom = a2.sqrt().max(n2.sqrt());
            let rel_error = if denom < 1e-9 { 0.0 } else { diff2.sqrt() / denom };
            reports.push(InputCheck {
                coords: coords.len(),
                rel_error,
                max_abs_error: max_abs,
            });
        }
        Ok(reports)
    }
}

/// Uniform `[-1, 1)` tensor from a seeded stream.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0f32..1.0))
}
