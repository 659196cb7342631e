use super::{Graph, NodeId, Value};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Denominator floor: errors are `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many elements per input (evenly strided).
    pub max_elements: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, tolerance: 1e-4, floor: 1e-6, max_elements: None }
    }
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradCheckOptions { tolerance, ..Default::default() }
    }
}

#[derive(Debug, Clone)]
pub struct InputCheck {
    pub node: NodeId,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Element indices skipped because a perturbation crossed a kink.
    pub excluded: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|i| i.max_rel_error <= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|i| i.max_rel_error).fold(0.0, f64::max)
    }
}

fn scalar_out(vals: &[Value], out: NodeId) -> Result<f64> {
    match &vals[out.index()] {
        Value::Real(t) if t.numel() == 1 => Ok(t.item()),
        _ => Err(Error::InvalidArgument("gradient check needs a scalar output".into())),
    }
}

/// Compares [`Graph::backward`] against central differences for every
/// element of each `wrt` leaf.
pub fn check_gradients(g: &Graph, output: NodeId, wrt: &[NodeId], opts: GradCheckOptions) -> Result<GradCheckReport> {
    let grads = g.backward(output, wrt)?;
    let base_sig = g.kink_signature(&g.replay(&[], output)?);
    let mut inputs = Vec::with_capacity(wrt.len());
    for &id in wrt {
        let base = g.value(id).clone();
        let analytic = grads.get(id).expect("requested gradient");
        let n = base.numel();
        let stride = match opts.max_elements {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut report = InputCheck { node: id, max_rel_error: 0.0, checked: 0, excluded: Vec::new() };
        for k in (0..n).step_by(stride) {
            let perturbed = |delta: f64| -> Tensor {
                let mut t = base.clone();
                t.data_mut()[k] += delta;
                t
            };
            let plus_t = perturbed(opts.step);
            let minus_t = perturbed(-opts.step);
            let plus = g.replay(&[(id, &plus_t)], output)?;
            let minus = g.replay(&[(id, &minus_t)], output)?;
            if g.kink_signature(&plus) != base_sig || g.kink_signature(&minus) != base_sig {
                report.excluded.push(k);
                continue;
            }
            let numeric = (scalar_out(&plus, output)? - scalar_out(&minus, output)?) / (2.0 * opts.step);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
        inputs.push(report);
    }
    Ok(GradCheckReport { inputs, tolerance: opts.tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph_is_exact() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[4], |i| i as f64));
        let w = g.constant(Tensor::from_fn(&[4], |i| 0.5 - i as f64));
        let y = g.mul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        let r = check_gradients(&g, s, &[x], GradCheckOptions::default()).unwrap();
        assert!(r.passed());
        assert!(r.max_rel_error() < 1e-9);
    }

    #[test]
    fn kinks_are_excluded() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![0.0, 1.0, -2.0]).unwrap());
        let a = g.abs(x).unwrap();
        let s = g.sum(a).unwrap();
        let r = check_gradients(&g, s, &[x], GradCheckOptions::default()).unwrap();
        assert_eq!(r.inputs[0].excluded, vec![0]);
        assert_eq!(r.inputs[0].checked, 2);
        assert!(r.passed());
    }
}
