use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

const STEP: f64 = 1e-5;
/// Denominator floor so that near-zero gradients are compared absolutely.
const FLOOR: f64 = 1e-6;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Checks `f` at `point`. Non-scalar outputs are reduced with a fixed random
/// projection so every output element contributes.
pub fn grad_check<F>(f: F, point: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut projection: Option<Tensor> = None;
    let mut eval = |inputs: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let weights = projection.get_or_insert_with(|| {
            let shape = g.value(out).shape().to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::new(shape, data).expect("projection shape")
        });
        let root = g.project(out, weights)?;
        let value = g.value(root).data()[0];
        let grads = if want_grad {
            let gr = g.backward(root)?;
            vars.iter()
                .zip(inputs)
                .map(|(&v, t)| gr.get_or_zeros(v, t))
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(point, true)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        tolerance,
    };
    let mut probe = point.to_vec();
    for (i, input) in point.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let (up, _) = eval(&probe, false)?;
            probe[i].data_mut()[j] = orig - STEP;
            let (down, _) = eval(&probe, false)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
