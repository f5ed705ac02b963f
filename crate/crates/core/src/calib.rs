//! Calibration evaluation of posterior predictions: block-diagonal
//! Mahalanobis distances compared against chi-square coverage levels.

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::gp::{Posterior, PosteriorCov};

/// Squared Mahalanobis distance of one residual block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockDistance {
    /// Block dimension; trailing remainder blocks carry their own (smaller)
    /// dimension so callers can filter them out.
    pub dim: usize,
    pub d_sq: f64,
}

/// Per-block d² = r_bᵀ Σ_b^{-1} r_b over a block-diagonal posterior, solved
/// through the block Cholesky factors. The residual is split into consecutive
/// blocks matching the posterior's; a smaller trailing block is kept and
/// tagged with its dimension.
pub fn block_mahalanobis(residuals: &[f64], posterior: &Posterior) -> Result<Vec<BlockDistance>> {
    let PosteriorCov::Block { blocks, .. } = &posterior.cov else {
        return Err(Error::InvalidParameter {
            parameter: "posterior",
            reason: "block Mahalanobis distances need a block-diagonal covariance".into(),
        });
    };
    if residuals.len() != posterior.mean.len() {
        return Err(Error::InvalidParameter {
            parameter: "residuals",
            reason: format!(
                "{} residuals against a posterior over {} points",
                residuals.len(),
                posterior.mean.len()
            ),
        });
    }
    let mut out = Vec::with_capacity(blocks.len());
    let mut start = 0;
    for block in blocks {
        let d = block.nrows();
        let chol = nalgebra::Cholesky::new(block.clone()).ok_or_else(|| {
            Error::Numerical(format!("singular {d}x{d} covariance block at offset {start}"))
        })?;
        let r = nalgebra::DVector::from_column_slice(&residuals[start..start + d]);
        let z = chol
            .l()
            .solve_lower_triangular(&r)
            .ok_or_else(|| Error::Numerical("triangular solve failed on a block".into()))?;
        out.push(BlockDistance { dim: d, d_sq: z.norm_squared() });
        start += d;
    }
    Ok(out)
}

/// Chi-square quantile: the threshold t with P(X ≤ t) = p for X ~ χ²_dof.
pub fn chi2_quantile(dof: usize, p: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::InvalidParameter {
            parameter: "dof",
            reason: "chi-square needs at least one degree of freedom".into(),
        });
    }
    if !(p.is_finite() && 0.0 < p && p < 1.0) {
        return Err(Error::Domain(format!("confidence level {p} outside (0,1)")));
    }
    let dist = ChiSquared::new(dof as f64)
        .map_err(|e| Error::Numerical(format!("chi-square setup failed: {e}")))?;
    Ok(dist.inverse_cdf(p))
}

/// Expected-versus-observed coverage at a set of confidence levels.
#[derive(Clone, Debug)]
pub struct CalibrationCurve {
    pub block_dim: usize,
    /// (expected confidence, observed frequency), expected strictly increasing.
    pub points: Vec<(f64, f64)>,
}

impl CalibrationCurve {
    /// Mean absolute gap between observed and expected coverage.
    pub fn mean_abs_deviation(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.points.iter().map(|&(e, o)| (o - e).abs()).sum::<f64>() / self.points.len() as f64
    }

    /// Largest absolute gap between observed and expected coverage.
    pub fn max_abs_deviation(&self) -> f64 {
        self.points.iter().map(|&(e, o)| (o - e).abs()).fold(0.0, f64::max)
    }
}

/// Observed frequency of d² at or below the chi-square threshold for each
/// confidence level. All distances must share the block dimension `dof`;
/// filter remainder blocks out first.
pub fn calibration_curve(d_sq: &[f64], dof: usize, levels: &[f64]) -> Result<CalibrationCurve> {
    if d_sq.is_empty() {
        return Err(Error::InvalidParameter {
            parameter: "d_sq",
            reason: "calibration curve needs at least one block distance".into(),
        });
    }
    for pair in levels.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::InvalidParameter {
                parameter: "levels",
                reason: format!("levels must be strictly increasing, got {} then {}", pair[0], pair[1]),
            });
        }
    }
    let n = d_sq.len() as f64;
    let mut points = Vec::with_capacity(levels.len());
    for &p in levels {
        let threshold = chi2_quantile(dof, p)?;
        let observed = d_sq.iter().filter(|&&d| d <= threshold).count() as f64 / n;
        points.push((p, observed));
    }
    Ok(CalibrationCurve { block_dim: dof, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::PosteriorCov;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn block_posterior(blocks: Vec<DMatrix<f64>>) -> Posterior {
        let n: usize = blocks.iter().map(|b| b.nrows()).sum();
        let dim = blocks.first().map_or(0, |b| b.nrows());
        Posterior {
            mean: DVector::zeros(n),
            cov: PosteriorCov::Block { dim, blocks },
        }
    }

    #[test]
    fn one_sigma_scalar_block_gives_unit_distance() {
        let sigma_sq = 0.49;
        let post = block_posterior(vec![DMatrix::from_element(1, 1, sigma_sq)]);
        let d = block_mahalanobis(&[sigma_sq.sqrt()], &post).unwrap();
        assert_eq!(d.len(), 1);
        assert_abs_diff_eq!(d[0].d_sq, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_block_distance_is_squared_norm() {
        let post = block_posterior(vec![DMatrix::identity(2, 2)]);
        let d = block_mahalanobis(&[1.0, 1.0], &post).unwrap();
        assert_abs_diff_eq!(d[0].d_sq, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn random_block_matches_dense_inverse_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let d = rng.random_range(1..6usize);
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let block = &a * a.transpose() + DMatrix::identity(d, d) * 0.5;
            let r: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let oracle = {
                let inv = block.clone().try_inverse().unwrap();
                let rv = DVector::from_column_slice(&r);
                (rv.transpose() * inv * &rv)[(0, 0)]
            };
            let post = block_posterior(vec![block]);
            let got = block_mahalanobis(&r, &post).unwrap()[0].d_sq;
            assert_abs_diff_eq!(got, oracle, epsilon = 1e-10);
        }
    }

    #[test]
    fn remainder_block_is_tagged_with_its_dimension() {
        let post = block_posterior(vec![DMatrix::identity(3, 3), DMatrix::identity(2, 2)]);
        let d = block_mahalanobis(&[0.0, 0.0, 0.0, 1.0, 1.0], &post).unwrap();
        assert_eq!(d[0].dim, 3);
        assert_eq!(d[1].dim, 2);
        assert_abs_diff_eq!(d[1].d_sq, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn chi2_quantile_one_dof_one_sigma() {
        let t = chi2_quantile(1, 0.6827).unwrap();
        assert_abs_diff_eq!(t, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn chi2_quantile_two_dof_closed_form() {
        // For two dof the CDF is 1 - e^{-x/2}, so p = 1 - e^{-1/2} maps to 1.
        let p = 1.0 - (-0.5_f64).exp();
        let t = chi2_quantile(2, p).unwrap();
        assert_abs_diff_eq!(t, 1.0, epsilon = 1e-9);
    }

    /// Quadrature oracle: invert the chi-square CDF by bisection over a
    /// Simpson-rule integral of the density.
    fn chi2_quantile_quadrature(dof: usize, p: f64) -> f64 {
        let k = dof as f64;
        let norm = (-(k / 2.0) * 2.0_f64.ln() - ln_gamma(k / 2.0)).exp();
        // Substituting x = u^2 removes the one-dof singularity at zero:
        // the integrand becomes 2 * norm * u^{k-1} * e^{-u^2/2}.
        let cdf = |t: f64| {
            let steps = 20_000;
            let top = t.sqrt();
            let h = top / steps as f64;
            let g = |u: f64| 2.0 * norm * u.powi(dof as i32 - 1) * (-u * u / 2.0).exp();
            let mut s = g(0.0) + g(top);
            for i in 1..steps {
                s += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let (mut lo, mut hi) = (0.0, 200.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Lanczos approximation of ln Γ, sufficient for the oracle tolerance.
    fn ln_gamma(x: f64) -> f64 {
        let g = 7.0;
        let c = [
            0.999_999_999_999_809_9,
            676.5203681218851,
            -1259.1392167224028,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507343278686905,
            -0.13857109526572012,
            9.984_369_578_019_572e-6,
            1.5056327351493116e-7,
        ];
        let x = x - 1.0;
        let mut a = c[0];
        let t = x + g + 0.5;
        for (i, &ci) in c.iter().enumerate().skip(1) {
            a += ci / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }

    #[test]
    fn chi2_quantile_matches_quadrature_oracle() {
        for &(dof, p) in &[(4usize, 0.95), (1, 0.5), (2, 0.9), (16, 0.6827)] {
            let got = chi2_quantile(dof, p).unwrap();
            let oracle = chi2_quantile_quadrature(dof, p);
            assert_abs_diff_eq!(got, oracle, epsilon = 1e-6);
        }
    }

    #[test]
    fn chi2_quantile_is_monotone_in_p_and_dof() {
        let mut prev = 0.0;
        for p in [0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
            let t = chi2_quantile(3, p).unwrap();
            assert!(t > prev);
            prev = t;
        }
        let mut prev = 0.0;
        for dof in [1usize, 2, 4, 8, 16] {
            let t = chi2_quantile(dof, 0.9).unwrap();
            assert!(t > prev);
            prev = t;
        }
    }

    #[test]
    fn chi2_quantile_rejects_bad_inputs() {
        assert!(chi2_quantile(0, 0.5).is_err());
        assert!(chi2_quantile(2, 0.0).is_err());
        assert!(chi2_quantile(2, 1.0).is_err());
        assert!(chi2_quantile(2, f64::NAN).is_err());
    }

    #[test]
    fn zero_residuals_are_fully_covered() {
        let curve = calibration_curve(&[0.0; 50], 2, &[0.1, 0.5, 0.9]).unwrap();
        for &(_, obs) in &curve.points {
            assert_eq!(obs, 1.0);
        }
    }

    #[test]
    fn tail_residual_is_uncovered_at_small_levels() {
        let curve = calibration_curve(&[1e6], 1, &[0.05, 0.5, 0.999]).unwrap();
        assert_eq!(curve.points[0].1, 0.0);
        assert_eq!(curve.points[1].1, 0.0);
    }

    #[test]
    fn observed_frequency_is_monotone_in_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let d_sq: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..10.0)).collect();
        let levels: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
        let curve = calibration_curve(&d_sq, 3, &levels).unwrap();
        for pair in curve.points.windows(2) {
            assert!(pair[1].1 >= pair[0].1);
        }
    }

    #[test]
    fn exact_gaussian_samples_are_calibrated() {
        // Monte Carlo oracle: 10,000 standard-normal 3-blocks have empirical
        // coverage near the chi-square CDF at every level.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let normal = rand_distr::StandardNormal;
        let d_sq: Vec<f64> = (0..10_000)
            .map(|_| (0..3).map(|_| { let z: f64 = rng.sample(normal); z * z }).sum())
            .collect();
        let levels = [0.1, 0.25, 0.5, 0.75, 0.9, 0.99];
        let curve = calibration_curve(&d_sq, 3, &levels).unwrap();
        assert!(curve.max_abs_deviation() < 0.03, "deviation {}", curve.max_abs_deviation());
    }

    #[test]
    fn scalar_blocks_match_variance_only_calibration() {
        // D = 1 blocks must reproduce the calibration computed directly from
        // per-point variances (z² against one-dof thresholds).
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let vars: Vec<f64> = (0..400).map(|_| rng.random_range(0.2..2.0)).collect();
        let residuals: Vec<f64> = vars.iter().map(|&v| rng.random_range(-2.0..2.0) * v.sqrt()).collect();
        let blocks: Vec<DMatrix<f64>> =
            vars.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect();
        let post = block_posterior(blocks);
        let d = block_mahalanobis(&residuals, &post).unwrap();
        let d_sq: Vec<f64> = d.iter().map(|b| b.d_sq).collect();
        let direct: Vec<f64> =
            residuals.iter().zip(&vars).map(|(&r, &v)| r * r / v).collect();
        let levels = [0.2, 0.5, 0.8];
        let a = calibration_curve(&d_sq, 1, &levels).unwrap();
        let b = calibration_curve(&direct, 1, &levels).unwrap();
        for (pa, pb) in a.points.iter().zip(b.points.iter()) {
            assert_abs_diff_eq!(pa.1, pb.1, epsilon = 1e-12);
        }
    }
}
