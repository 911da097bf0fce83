//! Finite-difference gradients and direction agreement.

/// Central differences of `loss` around `theta`, one coordinate at a time
/// with every other coordinate held fixed.
pub fn finite_diff_gradient(
    mut loss: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut work = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        work[i] = theta[i] + eps;
        let up = loss(&work);
        work[i] = theta[i] - eps;
        let down = loss(&work);
        work[i] = theta[i];
        out.push((up - down) / (2.0 * eps));
    }
    out
}

/// Cosine similarity of two gradient vectors. `None` when either vector is
/// zero (or the lengths differ), which callers report as a missing point.
pub fn cosine_agreement(g: &[f64], g_fd: &[f64]) -> Option<f64> {
    if g.len() != g_fd.len() {
        return None;
    }
    let dot: f64 = g.iter().zip(g_fd).map(|(a, b)| a * b).sum();
    let na = g.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = g_fd.iter().map(|a| a * a).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_fd_is_exact() {
        for &eps in &[1e-3, 0.5, 2.0] {
            let g = finite_diff_gradient(|t| t.iter().map(|v| v * v).sum(), &[1.0, -2.0], eps);
            assert!(
                (g[0] - 2.0).abs() < 1e-9 && (g[1] + 4.0).abs() < 1e-9,
                "{g:?}"
            );
        }
    }

    #[test]
    fn cosine_cases() {
        let g = [0.3, -1.2, 4.0];
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert!((cosine_agreement(&g, &g).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_agreement(&g, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_agreement(&[1.0, 0.0], &[0.0, 1.0]), Some(0.0));
        assert_eq!(cosine_agreement(&[0.0, 0.0], &[0.0, 1.0]), None);
    }
}
