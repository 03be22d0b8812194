//! Small dense-vector helpers shared by the workload, store and environment.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Euclidean distance. Callers are responsible for matching lengths.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Scales `v` to unit length in place. A zero vector is left untouched.
pub fn normalize_in_place(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    normalize_in_place(&mut v);
    v
}

pub fn add_scaled(a: &[f64], b: &[f64], scale: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + scale * y).collect()
}

/// Uniform draw on the unit sphere of dimension `dim`.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if norm(&v) > 1e-12 {
            return normalized(v);
        }
    }
}

/// Isotropic Gaussian noise whose expected squared norm is `scale²`
/// (per-component standard deviation `scale / sqrt(dim)`).
pub fn isotropic_noise<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    let sd = scale / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

/// `normalize(base + noise)` with isotropic noise of the given scale.
pub fn perturb_unit<R: Rng + ?Sized>(rng: &mut R, base: &[f64], scale: f64) -> Vec<f64> {
    if scale == 0.0 {
        return normalized(base.to_vec());
    }
    let noise = isotropic_noise(rng, base.len(), scale);
    normalized(add_scaled(base, &noise, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_units_are_sqrt2_apart() {
        let a = [1.0, 0.0, 0.0];
        let b = [0.0, 1.0, 0.0];
        assert!((l2_distance(&a, &b) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(l2_distance(&a, &a), 0.0);
    }

    #[test]
    fn random_unit_has_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dim in [1, 8, 64, 768] {
            let v = random_unit(&mut rng, dim);
            assert!((norm(&v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_vector_normalization_is_noop() {
        let mut v = vec![0.0; 4];
        normalize_in_place(&mut v);
        assert_eq!(v, vec![0.0; 4]);
    }
}
