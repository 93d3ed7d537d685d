//! Central-difference verification of analytic gradients.
//!
//! Piecewise-linear activations are not differentiable at their kinks, so a
//! coordinate whose one-sided difference quotients disagree is skipped and
//! counted rather than compared.

use rand::seq::SliceRandom;

use crate::diffcore::tensor::Tensor;
use crate::error::Result;
use crate::rng::stream_rng;

pub struct GradCheck {
    /// Base step; the actual step for a coordinate is scaled by
    /// `max(1, |x|)`.
    pub step: f64,
    /// Relative disagreement between forward and backward quotients above
    /// which a coordinate is treated as sitting on a kink.
    pub kink_tol: f64,
    /// Cap on checked coordinates; 0 means check everything. Sampling is
    /// seeded and spans all inputs uniformly.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            kink_tol: 1e-3,
            max_coords: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    /// `(input index, coordinate, analytic, numeric)` at the worst relative
    /// difference.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    /// Compares analytic gradients against central differences of the loss.
    /// `eval_loss` and `eval_grad` must describe the same function; the
    /// gradient closure returns one tensor per input, shape-matched.
    pub fn run(
        &self,
        inputs: &[Tensor<f64>],
        eval_loss: impl Fn(&[Tensor<f64>]) -> Result<f64>,
        eval_grad: impl Fn(&[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>,
    ) -> Result<GradCheckReport> {
        let grads = eval_grad(inputs)?;
        assert_eq!(grads.len(), inputs.len(), "one gradient per input");
        for (g, x) in grads.iter().zip(inputs) {
            assert_eq!(g.shape(), x.shape(), "gradient shape mismatch");
        }
        let f0 = eval_loss(inputs)?;

        let mut coords: Vec<(usize, usize)> = Vec::new();
        for (i, x) in inputs.iter().enumerate() {
            for j in 0..x.numel() {
                coords.push((i, j));
            }
        }
        if self.max_coords > 0 && coords.len() > self.max_coords {
            let mut rng = stream_rng(self.seed, "gradcheck-coords");
            coords.shuffle(&mut rng);
            coords.truncate(self.max_coords);
            coords.sort_unstable();
        }

        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let mut report = GradCheckReport {
            checked: 0,
            skipped_kinks: 0,
            max_abs_diff: 0.0,
            max_rel_diff: 0.0,
            worst: None,
        };

        for &(i, j) in &coords {
            let x0 = inputs[i].data()[j];
            let h = self.step * x0.abs().max(1.0);

            work[i].data_mut()[j] = x0 + h;
            let f_plus = eval_loss(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let f_minus = eval_loss(&work)?;
            work[i].data_mut()[j] = x0;

            let fwd = (f_plus - f0) / h;
            let bwd = (f0 - f_minus) / h;
            let scale = fwd.abs().max(bwd.abs()).max(1.0);
            if (fwd - bwd).abs() > self.kink_tol * scale {
                report.skipped_kinks += 1;
                continue;
            }

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let analytic = grads[i].data()[j];
            let abs = (numeric - analytic).abs();
            let rel = abs / numeric.abs().max(analytic.abs()).max(1.0);
            report.checked += 1;
            if abs > report.max_abs_diff {
                report.max_abs_diff = abs;
            }
            if rel > report.max_rel_diff {
                report.max_rel_diff = rel;
                report.worst = Some((i, j, analytic, numeric));
            }
        }
        Ok(report)
    }
}
