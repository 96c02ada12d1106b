//! The trimmed l1 function `T_K` and a member of its proximal mapping.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Soft-thresholding `sign(a) max(|a| - lambda, 0)`.
#[inline]
pub fn soft_threshold(a: f64, lambda: f64) -> f64 {
    if a < -lambda {
        a + lambda
    } else if a > lambda {
        a - lambda
    } else {
        0.0
    }
}

/// Indices of the `k` entries largest in absolute value. Ties at the cut are
/// resolved in favour of the lower index, so the result is deterministic.
pub fn top_k_indices(z: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k >= z.len() {
        return idx;
    }
    let by_magnitude = |&i: &usize, &j: &usize| -> Ordering {
        z[j].abs()
            .partial_cmp(&z[i].abs())
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    };
    idx.select_nth_unstable_by(k - 1, by_magnitude);
    idx.truncate(k);
    idx
}

fn check_k(d: usize, k: usize) -> Result<()> {
    if k > d {
        Err(Error::Parameter(format!(
            "cardinality K = {k} exceeds dimension {d}"
        )))
    } else {
        Ok(())
    }
}

/// `T_K(z)`: the sum of the `d - K` smallest absolute entries of `z`.
pub fn trimmed_l1(z: &[f64], k: usize) -> Result<f64> {
    check_k(z.len(), k)?;
    let l1: f64 = z.iter().map(|v| v.abs()).sum();
    let kept: f64 = top_k_indices(z, k).iter().map(|&i| z[i].abs()).sum();
    // the difference can only go negative through rounding
    Ok((l1 - kept).max(0.0))
}

/// One element of `prox_{lambda T_K}(a)`: the `K` largest entries of `a` in
/// magnitude are kept unchanged and the rest are soft-thresholded by `lambda`.
pub fn prox_trimmed_l1(a: &[f64], lambda: f64, k: usize) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::Parameter(format!(
            "prox scale lambda must be positive, got {lambda}"
        )));
    }
    check_k(a.len(), k)?;
    let mut out: Vec<f64> = a.iter().map(|&v| soft_threshold(v, lambda)).collect();
    for i in top_k_indices(a, k) {
        out[i] = a[i];
    }
    Ok(out)
}
