//! Central finite-difference gradient oracle.
//!
//! Uses only forward evaluations, so it stays independent of the backward
//! rules it is used to check.

/// Central-difference gradient of a scalar function at `x` with step `h`.
pub fn finite_diff<F>(mut f: F, x: &[f32], h: f32) -> Vec<f32>
where
    F: FnMut(&[f32]) -> f32,
{
    let mut grad = vec![0.0f32; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Norm-wise relative error `||a - b|| / max(||a||, ||b||, 1e-12)`.
pub fn rel_err(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "rel_err: length mismatch");
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        diff += ((x - y) as f64).powi(2);
        na += (*x as f64).powi(2);
        nb += (*y as f64).powi(2);
    }
    (diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)) as f32
}

/// Largest elementwise relative error with an absolute floor in the
/// denominator (floors keep near-zero entries from dominating).
pub fn max_elementwise_rel_err(a: &[f32], b: &[f32], floor: f32) -> f32 {
    assert_eq!(a.len(), b.len(), "rel_err: length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f32::max)
}
