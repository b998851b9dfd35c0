//! Log-domain scalar helpers.
//!
//! Convention used throughout the crate: `f64::NEG_INFINITY` is the exact
//! log-domain zero. `logsumexp` skips such terms and only returns
//! `NEG_INFINITY` when every term is one.

/// Numerically stable `ln(sum(exp(x)))` over a slice.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    // exp(-inf - max) is exactly 0, so log-zero terms drop out on their own
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Max-shifted softmax of `scores` into `out` (same length).
pub fn softmax_into(scores: &[f64], out: &mut [f64]) {
    debug_assert_eq!(scores.len(), out.len());
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, s) in out.iter_mut().zip(scores) {
        let e = (s - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    softmax_into(scores, &mut out);
    out
}
