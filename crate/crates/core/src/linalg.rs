//! Dense row-major helpers shared by the layers.

/// `out = m · x` where `m` is `rows × x.len()`.
pub fn matvec(m: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    debug_assert_eq!(m.len(), rows * cols);
    m.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

/// `out = mᵀ · y` where `m` is `y.len() × cols`.
pub fn matvec_t(m: &[f64], cols: usize, y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), y.len() * cols);
    let mut out = vec![0.0; cols];
    for (row, &yi) in m.chunks_exact(cols).zip(y) {
        if yi == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(row) {
            *o += w * yi;
        }
    }
    out
}

/// `acc += y ⊗ x`, with `acc` laid out `y.len() × x.len()`.
pub fn add_outer(acc: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(acc.len(), y.len() * cols);
    for (row, &yi) in acc.chunks_exact_mut(cols).zip(y) {
        if yi == 0.0 {
            continue;
        }
        for (a, &xj) in row.iter_mut().zip(x) {
            *a += yi * xj;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln Σ exp(s)`.
pub fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// Gradient of `u = v / ‖v‖` pulled back to `v`.
pub fn normalize_backward(unit: &[f64], raw_norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let along = dot(grad_unit, unit);
    grad_unit
        .iter()
        .zip(unit)
        .map(|(g, u)| (g - along * u) / raw_norm)
        .collect()
}
