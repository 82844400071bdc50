//! Rotary position encoding.
//!
//! A vector of even length `d` is split into `d/2` pairs; pair `t` is
//! rotated by `position * theta_t` with `theta_t = base^(-2t/d)`. Rotations
//! are orthogonal, so norms are preserved, and the score between a rotated
//! query and key depends only on their relative offset.

use crate::{Error, Result};

/// Rotates `x` to carry `position`. Fails on odd-length input.
pub fn apply_rope(x: &[f64], position: usize, base: f64) -> Result<Vec<f64>> {
    if x.len() % 2 != 0 {
        return Err(Error::Shape(format!(
            "rotary encoding needs an even length, got {}",
            x.len()
        )));
    }
    Ok(rotate_pairs(x, position as f64, base))
}

/// Pairwise rotation at a possibly negative position. A negative position
/// applies the inverse rotation, which is what the backward pass needs.
pub(crate) fn rotate_pairs(x: &[f64], position: f64, base: f64) -> Vec<f64> {
    debug_assert!(x.len() % 2 == 0);
    debug_assert!(base > 0.0);
    let d = x.len();
    let mut out = vec![0.0; d];
    for t in 0..d / 2 {
        let theta = base.powf(-2.0 * t as f64 / d as f64);
        let angle = position * theta;
        let (sin, cos) = angle.sin_cos();
        let a = x[2 * t];
        let b = x[2 * t + 1];
        out[2 * t] = a * cos - b * sin;
        out[2 * t + 1] = a * sin + b * cos;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, Rng};

    fn random_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.normal()).collect()
    }

    #[test]
    fn position_zero_is_identity() {
        let x = vec![0.3, -1.2, 0.7, 2.0];
        let y = apply_rope(&x, 0, 10_000.0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let x = random_vec(&mut rng, 16);
            let y = apply_rope(&x, rng.range(512), 10_000.0).unwrap();
            let nx = dot(&x, &x).sqrt();
            let ny = dot(&y, &y).sqrt();
            assert!((nx - ny).abs() < 1e-9);
        }
    }

    #[test]
    fn scores_depend_only_on_relative_offset() {
        let mut rng = Rng::new(9);
        for _ in 0..100 {
            let q = random_vec(&mut rng, 8);
            let k = random_vec(&mut rng, 8);
            let m = rng.range(256);
            let n = rng.range(256);
            let c = rng.range(128);
            let s1 = dot(
                &apply_rope(&q, m, 10_000.0).unwrap(),
                &apply_rope(&k, n, 10_000.0).unwrap(),
            );
            let s2 = dot(
                &apply_rope(&q, m + c, 10_000.0).unwrap(),
                &apply_rope(&k, n + c, 10_000.0).unwrap(),
            );
            assert!((s1 - s2).abs() < 1e-9, "{s1} vs {s2}");
        }
    }

    #[test]
    fn negative_position_inverts() {
        let x = vec![1.0, 2.0, -0.5, 0.25];
        let fwd = rotate_pairs(&x, 37.0, 10_000.0);
        let back = rotate_pairs(&fwd, -37.0, 10_000.0);
        for (a, b) in x.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_length_is_rejected() {
        assert!(apply_rope(&[1.0, 2.0, 3.0], 1, 10_000.0).is_err());
    }
}
