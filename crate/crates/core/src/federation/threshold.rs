//! Two-cluster split of one-dimensional vote sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    /// Midpoint of the two cluster centers.
    pub value: f64,
    /// Lower and upper cluster centers.
    pub centers: (f64, f64),
    /// Set when every value is equal and there is nothing to split.
    pub degenerate: bool,
    pub iterations: usize,
}

const MAX_ITERATIONS: usize = 10_000;

/// 2-means on the real line. Centers start at the minimum and maximum and
/// Lloyd iterations run until the assignment stops changing. A value
/// equidistant from both centers joins the lower cluster.
pub fn kmeans_threshold_f64(values: &[f64]) -> Result<Threshold> {
    if values.len() < 2 {
        return Err(Error::invalid("thresholding needs at least two values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("thresholding needs finite values"));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(Threshold { value: min, centers: (min, max), degenerate: true, iterations: 0 });
    }

    let (mut low, mut high) = (min, max);
    let mut upper = vec![false; values.len()];
    let mut iterations = 0;
    loop {
        let mut changed = false;
        for (v, up) in values.iter().zip(upper.iter_mut()) {
            let assign = (v - high).abs() < (v - low).abs();
            changed |= assign != *up;
            *up = assign;
        }
        if !changed && iterations > 0 {
            break;
        }
        iterations += 1;
        let (mut sum_lo, mut n_lo, mut sum_hi, mut n_hi) = (0.0, 0usize, 0.0, 0usize);
        for (v, &up) in values.iter().zip(&upper) {
            if up {
                sum_hi += v;
                n_hi += 1;
            } else {
                sum_lo += v;
                n_lo += 1;
            }
        }
        if n_lo > 0 {
            low = sum_lo / n_lo as f64;
        }
        if n_hi > 0 {
            high = sum_hi / n_hi as f64;
        }
        if iterations >= MAX_ITERATIONS {
            break;
        }
    }
    Ok(Threshold { value: (low + high) / 2.0, centers: (low, high), degenerate: false, iterations })
}

/// [`kmeans_threshold_f64`] over integer vote sums.
pub fn kmeans_threshold(sums: &[i64]) -> Result<Threshold> {
    let values: Vec<f64> = sums.iter().map(|&s| s as f64).collect();
    kmeans_threshold_f64(&values)
}
