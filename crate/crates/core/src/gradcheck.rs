//! Finite-difference gradient checking.
//!
//! The checker is the independent oracle for every hand-written VJP in
//! [`crate::tape`]: it rebuilds the forward pass around perturbed inputs and
//! compares central differences against the analytic gradients.

use crate::error::{CoreError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Max over coordinates of
/// |analytic − central| / (|analytic| + |central| + 1e−12)
/// for a scalar-valued function of one tensor.
///
/// `f` must build the function on the given tape starting from the input
/// node and return the scalar output node.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let build = |tape: &mut Tape, inputs: &[NodeId]| f(tape, inputs[0]);
    let errs = finite_diff_check_multi(&build, &[x.clone()], h)?;
    Ok(errs[0])
}

/// Multi-input variant: returns the max relative error per input tensor.
/// Every input is treated as differentiable.
pub fn finite_diff_check_multi<F>(build: &F, inputs: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    finite_diff_impl(build, inputs, h, false)
}

/// Like [`finite_diff_check_multi`] but with a fourth-order (5-point)
/// stencil: truncation error O(h⁴), for deep compositions whose third
/// derivatives are large (soft-argmax at low temperature).
pub fn finite_diff_check_multi4<F>(build: &F, inputs: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    finite_diff_impl(build, inputs, h, true)
}

fn finite_diff_impl<F>(build: &F, inputs: &[Tensor], h: f64, fourth: bool) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(CoreError::contract("finite_diff_check: h must be > 0"));
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let ids: Vec<NodeId> = tensors.iter().map(|t| {
            let mut t = t.clone();
            t.requires_grad = false;
            tape.leaf(t)
        }).collect();
        let out = build(&mut tape, &ids)?;
        let v = tape.value(out).scalar_value()?;
        if !v.is_finite() {
            return Err(CoreError::Evaluation(
                "finite_diff_check: non-finite function value".into(),
            ));
        }
        Ok(v)
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = build(&mut tape, &ids)?;
    if !tape.value(out).scalar_value()?.is_finite() {
        return Err(CoreError::Evaluation(
            "finite_diff_check: non-finite function value at x".into(),
        ));
    }
    let grads = tape.backward(out)?;

    let mut errs = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (pi, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[pi], input.shape());
        let mut worst: f64 = 0.0;
        for ci in 0..input.numel() {
            let orig = input.data()[ci];
            let at = |x: f64, work: &mut Vec<Tensor>| -> Result<f64> {
                work[pi].data_mut()[ci] = x;
                eval(work)
            };
            let central = if fourth {
                let f2p = at(orig + 2.0 * h, &mut work)?;
                let fp = at(orig + h, &mut work)?;
                let fm = at(orig - h, &mut work)?;
                let f2m = at(orig - 2.0 * h, &mut work)?;
                (f2m - 8.0 * fm + 8.0 * fp - f2p) / (12.0 * h)
            } else {
                let fp = at(orig + h, &mut work)?;
                let fm = at(orig - h, &mut work)?;
                (fp - fm) / (2.0 * h)
            };
            work[pi].data_mut()[ci] = orig;
            let a = analytic.data()[ci];
            let err = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
            worst = worst.max(err);
        }
        errs.push(worst);
    }
    Ok(errs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::row(vec![0.3, -1.2, 2.0]);
        let err = finite_diff_check(|t, x| Ok(t.sum(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn sum_exp_at_zero_is_tight() {
        // d/dx sum(exp(x)) at 0 is exp(0) = 1 per coordinate.
        let x = Tensor::zeros(vec![1, 4]);
        let err = finite_diff_check(
            |t, x| {
                let e = t.exp(x);
                Ok(t.sum(e))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn discontinuity_is_flagged_large() {
        // relu has a kink at 0: analytic subgradient and central difference
        // disagree there, so the reported error is large by design.
        let x = Tensor::zeros(vec![1, 1]);
        let err = finite_diff_check(
            |t, x| {
                let r = t.relu(x);
                Ok(t.sum(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1, "kink should be flagged, err = {err}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_check(|t, x| Ok(t.sum(x)), &x, 0.0).is_err());
    }
}
