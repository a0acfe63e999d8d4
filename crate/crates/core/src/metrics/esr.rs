use crate::error::{Error, Result};

/// Pre-emphasis coefficient used for ESR unless configured otherwise.
pub const DEFAULT_PREEMPHASIS: f64 = 0.95;

/// First-order pre-emphasis `y[n] = x[n] - coeff * x[n - 1]` with `x[-1] = 0`.
pub fn preemphasis(x: &[f64], coeff: f64) -> Vec<f64> {
    let mut prev = 0.0;
    x.iter()
        .map(|&v| {
            let y = v - coeff * prev;
            prev = v;
            y
        })
        .collect()
}

/// Error-to-signal ratio `sum |y - y_hat|^2 / sum |y|^2`, with both signals
/// pre-emphasized first when `preemph` is set.
pub fn esr(y: &[f64], y_hat: &[f64], preemph: Option<f64>) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::Metric(format!(
            "esr needs equal lengths, got {} and {}",
            y.len(),
            y_hat.len()
        )));
    }
    let (yp, hp) = match preemph {
        Some(c) => (preemphasis(y, c), preemphasis(y_hat, c)),
        None => (y.to_vec(), y_hat.to_vec()),
    };
    let den: f64 = yp.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::UndefinedEsr);
    }
    let num: f64 = yp.iter().zip(&hp).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(num / den)
}
