//! Independent reference implementations used as test oracles.
//!
//! Everything here is written as plain step-by-step loops with no shared
//! code paths into [`crate::tape`] or [`crate::ssm`], so tests can compare
//! the optimized implementations against a second, independent route.

use crate::ssm::SsmParams;
use crate::tensor::Tensor;

/// Naive unrolled selective-scan recurrence: projections, softplus, the
/// per-step discretization, and the hidden-state update, one scalar at a
/// time in the same operation order as the production scan.
pub fn naive_scan_reference(
    xprime: &Tensor,
    residual: &Tensor,
    params: &SsmParams,
    h0: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let t_len = xprime.rows();
    let (n, d) = (params.n, params.d);
    let mut h = h0.to_vec();
    let mut y = vec![0.0; t_len * d];
    for t in 0..t_len {
        // Projections for this step.
        let mut delta = vec![0.0; n];
        let mut bp = vec![0.0; n];
        let mut cp = vec![0.0; n];
        for j in 0..n {
            let mut sd = 0.0;
            let mut sb = 0.0;
            let mut sc = 0.0;
            for c in 0..d {
                let x = xprime.at(t, c);
                sd += x * params.w_delta.at(c, j);
                sb += x * params.w_b.at(c, j);
                sc += x * params.w_c.at(c, j);
            }
            let raw = sd + params.b_delta.at(0, j);
            let clamped = raw.clamp(-40.0, 40.0);
            delta[j] = clamped.max(0.0) + (-clamped.abs()).exp().ln_1p();
            bp[j] = sb + params.b_b.at(0, j);
            cp[j] = sc + params.b_c.at(0, j);
        }
        for c in 0..d {
            let x = xprime.at(t, c);
            let mut acc = 0.0;
            for j in 0..n {
                let abar = (delta[j] * params.a_diag.at(0, j)).exp();
                let bbar = delta[j] * bp[j];
                h[c * n + j] = abar * h[c * n + j] + bbar * x;
                acc += cp[j] * h[c * n + j];
            }
            y[t * d + c] = acc + params.d_skip.at(0, c) * x + residual.at(t, c);
        }
    }
    (y, h)
}

/// Type-7 (linear interpolation) percentile, the oracle for threshold
/// initialization. `p` in [0, 100].
pub fn percentile_linear(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = rank - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Parabolic-vertex sub-frame offset for probabilities (pl, pc, pr) spaced
/// `interval` apart: the oracle for boundary refinement's fallback path.
pub fn parabolic_vertex_offset(pl: f64, pc: f64, pr: f64, interval: f64) -> f64 {
    let denom = pl - 2.0 * pc + pr;
    if denom.abs() < 1e-12 {
        return 0.0;
    }
    ((pl - pr) / (2.0 * denom)) * interval
}
