//! Central finite-difference verification of analytic gradients.
//!
//! The caller supplies a deterministic loss closure (all noise pre-drawn and
//! captured), the parameter tensors, and the analytic gradients; the checker
//! perturbs every coordinate in place and compares. Restoring the exact
//! original bits after each probe keeps later probes unaffected.

use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Worst-case comparison for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    /// Position in the parameter list handed to [`GradCheck::run`].
    pub index: usize,
    /// Largest relative error over the tensor's coordinates.
    pub max_rel_err: f64,
    /// Coordinate where the largest error occurred.
    pub cell: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    /// Largest relative error across all parameters.
    pub fn worst(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Finite-difference configuration.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Relative-error denominator floor; errors on coordinates whose
    /// gradient magnitude sits below this are measured absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            floor: 1e-3,
        }
    }
}

impl GradCheck {
    /// Compare analytic gradients against central differences of `loss_at`.
    ///
    /// `analytic[k] == None` asserts that the loss does not depend on
    /// parameter `k` (the numeric gradient is checked against zero).
    /// Parameters are restored bit-exactly before returning.
    pub fn run<F>(
        &self,
        params: &mut [Tensor],
        analytic: &[Option<&Tensor>],
        mut loss_at: F,
    ) -> GradCheckReport
    where
        F: FnMut(&[Tensor]) -> f64,
    {
        assert_eq!(params.len(), analytic.len());
        let mut report = GradCheckReport { params: Vec::new() };
        for k in 0..params.len() {
            let (rows, cols) = params[k].shape();
            let mut worst = ParamCheck {
                index: k,
                max_rel_err: 0.0,
                cell: (0, 0),
                analytic: 0.0,
                numeric: 0.0,
            };
            for i in 0..rows {
                for j in 0..cols {
                    let orig = params[k].get(i, j);
                    params[k].set(i, j, orig + self.step);
                    let up = loss_at(params);
                    params[k].set(i, j, orig - self.step);
                    let down = loss_at(params);
                    params[k].set(i, j, orig);

                    let numeric = (up - down) / (2.0 * self.step);
                    let a = analytic[k].map_or(0.0, |t| t.get(i, j));
                    let denom = a.abs().max(numeric.abs()).max(self.floor);
                    let rel = (a - numeric).abs() / denom;
                    if rel > worst.max_rel_err {
                        worst.max_rel_err = rel;
                        worst.cell = (i, j);
                        worst.analytic = a;
                        worst.numeric = numeric;
                    }
                }
            }
            report.params.push(worst);
        }
        report
    }
}
