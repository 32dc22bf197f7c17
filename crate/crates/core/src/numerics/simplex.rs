use crate::error::{Error, Result};

/// Euclidean projection of `c` onto the probability simplex
/// `{w : w >= 0, sum(w) = 1}`.
///
/// Sort-and-threshold: with `u` the entries of `c` in decreasing order, the
/// support size is the largest `rho` with `u[rho-1] > (sum(u[..rho]) - 1) / rho`,
/// and the result is `max(c - tau, 0)` for that threshold `tau`.
///
/// The input is first shifted so its maximum is zero. The projection is
/// shift invariant, and the shift makes constant inputs map to exactly `1/N`.
pub fn simplex_project(c: &[f64]) -> Result<Vec<f64>> {
    if c.is_empty() {
        return Err(Error::invalid("simplex projection of an empty vector"));
    }
    if let Some(i) = c.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "simplex projection input entry {i} is not finite"
        )));
    }

    let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = c.iter().map(|v| v - max).collect();

    // decreasing by value, ties by original index
    let mut order: Vec<usize> = (0..shifted.len()).collect();
    order.sort_by(|&i, &j| shifted[j].total_cmp(&shifted[i]).then(i.cmp(&j)));

    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &i) in order.iter().enumerate() {
        cumsum += shifted[i];
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if shifted[i] - candidate > 0.0 {
            tau = candidate;
        } else {
            break;
        }
    }

    Ok(shifted.iter().map(|v| (v - tau).max(0.0)).collect())
}
