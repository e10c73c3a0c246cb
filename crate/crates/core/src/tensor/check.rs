//! Central finite-difference verification of analytic gradients.

use super::{Graph, Result, Tensor, TensorError, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of comparing analytic and numeric gradients.
///
/// Per coordinate the error is `|analytic - numeric| / max(1, |analytic|)`;
/// the report keeps the worst one.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub eps: f64,
    pub max_error: f64,
    /// (input, flat index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl GradCheck {
    pub fn passes(&self, rtol: f64) -> bool {
        self.max_error <= rtol
    }
}

/// Builds a scalar from `inputs` on the given graph.
pub trait ScalarFn: Fn(&mut Graph, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph, &[Var]) -> Result<Var>> ScalarFn for F {}

/// Settings for a gradient check.
#[derive(Clone, Debug)]
pub struct Checker {
    pub eps: f64,
    /// Name of an op whose backward rule is corrupted during the analytic
    /// pass. Only useful for testing the checker itself.
    pub fault: Option<String>,
}

impl Default for Checker {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            fault: None,
        }
    }
}

impl Checker {
    pub fn with_eps(eps: f64) -> Self {
        Self { eps, fault: None }
    }

    pub fn with_fault(mut self, op: impl Into<String>) -> Self {
        self.fault = Some(op.into());
        self
    }

    /// Checks every coordinate of every input.
    pub fn check(&self, f: impl ScalarFn, inputs: &[Tensor]) -> Result<GradCheck> {
        let coords: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect();
        self.check_coords(f, inputs, &coords)
    }

    /// Checks only the listed `(input, flat index)` coordinates.
    pub fn check_coords(
        &self,
        f: impl ScalarFn,
        inputs: &[Tensor],
        coords: &[(usize, usize)],
    ) -> Result<GradCheck> {
        if !(self.eps > 0.0) {
            return Err(TensorError::Invalid {
                op: "gradcheck",
                reason: format!("eps must be positive, got {}", self.eps),
            });
        }
        let mut g = match &self.fault {
            Some(op) => Graph::with_fault(op.clone()),
            None => Graph::new(),
        };
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.backward(out)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                g.grad(v)
                    .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
            })
            .collect();

        let eval = |probe: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            g.value(out)
                .item()
                .ok_or_else(|| TensorError::NonScalarLoss(g.shape(out).to_vec()))
        };

        let mut probe = inputs.to_vec();
        let mut report = GradCheck {
            eps: self.eps,
            max_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: 0,
        };
        for &(i, j) in coords {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + self.eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - self.eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * self.eps);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err.is_nan() || err > report.max_error || report.coords_checked == 0 {
                report.max_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
            report.coords_checked += 1;
        }
        Ok(report)
    }
}

/// Checks all coordinates with the default step.
pub fn finite_diff_check(f: impl ScalarFn, inputs: &[Tensor]) -> Result<GradCheck> {
    Checker::default().check(f, inputs)
}
