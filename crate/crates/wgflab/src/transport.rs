use crate::error::{Result, WgfError};

/// 2-Wasserstein distance between `N(0, s0^2 I_d)` and `N(0, s1^2 I_d)`.
pub fn gaussian_w2(sigma0: f64, sigma1: f64, d: usize) -> Result<f64> {
    if !(sigma0 > 0.0) || !(sigma1 > 0.0) {
        return Err(WgfError::Argument(format!("standard deviations must be positive, got {sigma0} and {sigma1}")));
    }
    Ok((d as f64).sqrt() * (sigma1 - sigma0).abs())
}

/// Kinetic cost `sum_steps h * mean_particles |v|^2 / 2` from per-step mean
/// squared speeds.
pub fn transport_cost(mean_sq_speed: &[f64], h: f64) -> f64 {
    mean_sq_speed.iter().map(|v| 0.5 * v * h).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        assert_eq!(gaussian_w2(1.3, 1.3, 5).unwrap(), 0.0);
        assert_eq!(gaussian_w2(1.0, 2.0, 4).unwrap(), 2.0);
        assert!(gaussian_w2(0.0, 1.0, 2).is_err());
        assert!(gaussian_w2(1.0, -1.0, 2).is_err());
        assert_eq!(transport_cost(&[2.0, 4.0], 0.5), 1.5);
    }
}
