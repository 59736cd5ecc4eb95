use super::dense::Tensor;
use super::error::Result;
use super::graph::{Graph, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error per input.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst element.
    pub worst: (usize, usize),
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Relative error with a tiny floor so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks `d f / d inputs` for a scalar-valued `f` in 64-bit arithmetic.
///
/// `f` receives a fresh graph and one variable per input (all trainable) and
/// must return a scalar. Every input element is perturbed by `±step`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let evaluate = |inputs: &[Tensor<f64>], backward: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .map(|t| g.leaf(t.detached().with_grad()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        let value = g.value(out).data()[0];
        if !backward {
            return Ok((value, Vec::new()));
        }
        g.backward(out)?;
        let grads = vars
            .iter()
            .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = evaluate(inputs, true)?;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for which in 0..inputs.len() {
        let mut local = 0.0f64;
        for idx in 0..inputs[which].numel() {
            let orig = work[which].data()[idx];
            work[which].data_mut()[idx] = orig + step;
            let (plus, _) = evaluate(&work, false)?;
            work[which].data_mut()[idx] = orig - step;
            let (minus, _) = evaluate(&work, false)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[which][idx], numeric);
            local = local.max(err);
            if err > max_rel_error {
                max_rel_error = err;
                worst = (which, idx);
            }
        }
        per_input.push(local);
    }
    Ok(GradCheckReport {
        per_input,
        max_rel_error,
        worst,
        tolerance,
    })
}
