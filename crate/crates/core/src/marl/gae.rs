use crate::{Error, Result};

/// Generalized advantage estimates by backward recursion
/// `A(t) = δ(t) + γλ A(t+1)`, where `δ(t) = r(t) + γ V(t+1) − V(t)` and the
/// value after the last step is `bootstrap`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    if rewards.is_empty() || rewards.len() != values.len() {
        return Err(Error::InvalidArgument(format!(
            "gae needs equal non-empty rewards and values, got {} and {}",
            rewards.len(),
            values.len()
        )));
    }
    let t_len = rewards.len();
    let mut adv = vec![0.0; t_len];
    let mut running = 0.0;
    for t in (0..t_len).rev() {
        let next = if t + 1 < t_len {
            values[t + 1]
        } else {
            bootstrap
        };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    Ok(adv)
}

/// One-step TD advantage `r + γ V(s') − V(s)`.
pub fn td_advantage(reward: f64, value: f64, next_value: f64, gamma: f64) -> f64 {
    reward + gamma * next_value - value
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn double_sum(r: &[f64], v: &[f64], boot: f64, gamma: f64, lambda: f64) -> Vec<f64> {
        let n = r.len();
        let delta: Vec<f64> = (0..n)
            .map(|t| r[t] + gamma * if t + 1 < n { v[t + 1] } else { boot } - v[t])
            .collect();
        (0..n)
            .map(|t| {
                (t..n)
                    .map(|k| (gamma * lambda).powi((k - t) as i32) * delta[k])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn single_step_is_td_error() {
        let a = compute_gae(&[2.0], &[0.5], 1.5, 0.9, 0.95).unwrap();
        assert!((a[0] - (2.0 + 0.9 * 1.5 - 0.5)).abs() < 1e-15);
        assert_eq!(a[0], td_advantage(2.0, 0.5, 1.5, 0.9));
    }

    #[test]
    fn zero_lambda_gives_td_errors() {
        let r = [1.0, -2.0, 0.5];
        let v = [0.1, 0.2, 0.3];
        let a = compute_gae(&r, &v, 0.4, 0.99, 0.0).unwrap();
        let want = [
            1.0 + 0.99 * 0.2 - 0.1,
            -2.0 + 0.99 * 0.3 - 0.2,
            0.5 + 0.99 * 0.4 - 0.3,
        ];
        for (x, y) in a.iter().zip(want) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn recursion_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let r: Vec<f64> = (0..100).map(|_| rng.random_range(-10.0..1.0)).collect();
            let v: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
            let boot = rng.random_range(-5.0..5.0);
            let fast = compute_gae(&r, &v, boot, 0.99, 0.95).unwrap();
            let slow = double_sum(&r, &v, boot, 0.99, 0.95);
            let err = fast
                .iter()
                .zip(&slow)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "max abs error {err}");
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(compute_gae(&[1.0, 2.0], &[0.0], 0.0, 0.99, 0.95).is_err());
        assert!(compute_gae(&[], &[], 0.0, 0.99, 0.95).is_err());
    }
}
