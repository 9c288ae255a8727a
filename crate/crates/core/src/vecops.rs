//! Small dense-vector helpers. Every matrix in this crate is diagonal, so the
//! weighted inner products below take the diagonal as a slice.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `<a, b>_W = a^T diag(w) b`
pub fn wdot(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), w)| x * w * y).sum()
}

/// `||a||^2_W`
pub fn wnorm_sq(a: &[f64], w: &[f64]) -> f64 {
    wdot(a, a, w)
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn recip(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| 1.0 / x).collect()
}

/// Relative distance `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_dist(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a).max(norm(b));
    if denom == 0.0 {
        0.0
    } else {
        norm(&sub(a, b)) / denom
    }
}
