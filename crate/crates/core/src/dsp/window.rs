use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Periodic Hann window, `w[n] = 0.5·(1 − cos(2πn/size))`.
///
/// The periodic form overlap-adds to a constant at hops of `size/2` and
/// `size/4`, which the symmetric form does not.
pub fn hann_window(size: usize) -> Result<Vec<f64>> {
    if size < 2 {
        return Err(Error::invalid(format!("window size must be at least 2, got {size}")));
    }
    let n = size as f64;
    Ok((0..size)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n).cos()))
        .collect())
}
