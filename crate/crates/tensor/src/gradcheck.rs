//! Central finite-difference verification of analytic gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, OpKind, Var};
use crate::tensor::Tensor;

/// Configuration for a gradient check run at 64-bit.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    /// Check at most this many coordinates per tensor (evenly spaced); `None` checks all.
    pub max_coords_per_tensor: Option<usize>,
    /// Corrupt one op family's adjoint in the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { h: 1e-5, max_coords_per_tensor: None, fault: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheck {
    /// `build` must construct a scalar from the supplied leaves on a fresh graph;
    /// it is called once for the analytic pass and twice per checked coordinate.
    pub fn run<F>(&self, build: F, params: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        if !(1e-6..=1e-3).contains(&self.h) {
            return Err(TensorError::Precondition { op: "finite_diff_check", msg: format!("step {} outside [1e-6, 1e-3]", self.h) });
        }
        let mut g = Graph::new();
        if let Some(kind) = self.fault {
            g.inject_fault(kind);
        }
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let root = build(&mut g, &vars)?;
        check_finite(g.value(root).data()[0], "analytic pass")?;
        g.backward(root)?;
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();

        let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
            let root = build(&mut g, &vars)?;
            let v = g.value(root).data()[0];
            check_finite(v, "perturbed pass")?;
            Ok(v)
        };

        let mut work: Vec<Tensor<f64>> = params.to_vec();
        let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
        for ti in 0..params.len() {
            let n = params[ti].len();
            let coords: Vec<usize> = match self.max_coords_per_tensor {
                Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
                _ => (0..n).collect(),
            };
            for c in coords {
                let orig = work[ti].data()[c];
                work[ti].data_mut()[c] = orig + self.h;
                let plus = eval(&work)?;
                work[ti].data_mut()[c] = orig - self.h;
                let minus = eval(&work)?;
                work[ti].data_mut()[c] = orig;
                let numeric = (plus - minus) / (2.0 * self.h);
                let err = (analytic[ti].data()[c] - numeric).abs() / numeric.abs().max(1.0);
                report.checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    if err >= report.max_rel_error {
                        report.worst = Some((ti, c));
                    }
                }
            }
        }
        Ok(report)
    }
}

fn check_finite(v: f64, stage: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite(format!("loss is {v} in {stage}")))
    }
}

/// Max relative error between analytic and central-difference gradients over
/// every coordinate of `params`.
pub fn finite_diff_check<F>(build: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    GradCheck { h, ..GradCheck::default() }.run(build, params).map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::from_f64(vec![1], &[3.0]).unwrap();
        let err = finite_diff_check(|g, v| g.mul(v[0], v[0]), &[x], 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let x = Tensor::from_f64(vec![1], &[3.0]).unwrap();
        assert!(finite_diff_check(|g, v| Ok(g.sum(v[0])), &[x], 1e-2).is_err());
    }

    #[test]
    fn non_finite_loss_is_a_diagnostic_error() {
        let x = Tensor::from_f64(vec![1], &[f64::NAN]).unwrap();
        let err = finite_diff_check(|g, v| Ok(g.sum(v[0])), &[x], 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite(_)));
    }
}
