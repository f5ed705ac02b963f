//! Greedy active selection of observation pixels by maximum conditional
//! variance.
//!
//! The conditioning set grows one point per step. Instead of refactorizing,
//! the state keeps the lower Cholesky factor L of K_nn + sigma_n^2 I over the
//! chosen points and the rows of L^{-1} K_nf over all candidates; an append
//! adds one row to each via forward substitution, and every candidate
//! variance drops by the square of its new cross-row entry. Each step costs
//! O(n) per candidate.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{
    self, nonstationary_cov, GpHyperparams, KernelField, KernelMatrix2, NormalizedCoord,
};

/// Termination rule for greedy selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StopRule {
    /// Select exactly this many points.
    Count(usize),
    /// Select while the best remaining conditional variance exceeds the
    /// threshold; a threshold at or above the prior variance selects nothing.
    MaxVariance(f64),
}

/// Incrementally maintained conditioning state over a fixed candidate set.
pub struct SelectionState {
    coords: Vec<NormalizedCoord>,
    mats: Vec<KernelMatrix2>,
    hyper: GpHyperparams,
    chosen: Vec<usize>,
    is_chosen: Vec<bool>,
    /// Row i holds the first i+1 entries of row i of L.
    l_rows: Vec<Vec<f64>>,
    /// Row per chosen point: the matching row of L^{-1} K_nf over candidates.
    cross: Vec<Vec<f64>>,
    var: Vec<f64>,
}

impl SelectionState {
    /// Decodes all candidates once and starts from the prior variance.
    pub fn new(
        candidates: &[NormalizedCoord],
        field: &KernelField,
        hyper: &GpHyperparams,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidParameter {
                parameter: "candidates",
                reason: "selection needs at least one candidate".into(),
            });
        }
        let pts = kernel::decode_points(candidates, field);
        Ok(Self {
            coords: pts.coords,
            mats: pts.mats,
            hyper: *hyper,
            chosen: Vec::new(),
            is_chosen: vec![false; candidates.len()],
            l_rows: Vec::new(),
            cross: Vec::new(),
            var: vec![hyper.prior_var(); candidates.len()],
        })
    }

    pub fn chosen(&self) -> &[usize] {
        &self.chosen
    }

    /// Current conditional variance per candidate (clamped at zero).
    pub fn variances(&self) -> &[f64] {
        &self.var
    }

    pub fn coords(&self) -> &[NormalizedCoord] {
        &self.coords
    }

    fn cov(&self, i: usize, j: usize) -> f64 {
        nonstationary_cov(self.coords[i], &self.mats[i], self.coords[j], &self.mats[j], &self.hyper)
    }

    /// Conditions on one more candidate: one forward substitution for the new
    /// row of L, one O(n * candidates) pass for the new cross row, and a
    /// variance subtraction per candidate.
    pub fn append(&mut self, target: usize) -> Result<()> {
        if target >= self.coords.len() {
            return Err(Error::InvalidParameter {
                parameter: "target",
                reason: format!("candidate index {target} out of range"),
            });
        }
        if self.is_chosen[target] {
            return Err(Error::InvalidParameter {
                parameter: "target",
                reason: format!("candidate {target} already chosen"),
            });
        }
        let n = self.chosen.len();

        // New row of L: solve L z = k(chosen, target), then the pivot.
        let k_ct: Vec<f64> = self.chosen.iter().map(|&p| self.cov(p, target)).collect();
        let mut z = vec![0.0; n];
        for i in 0..n {
            let s = k_ct[i]
                - self.l_rows[i][..i].iter().zip(&z[..i]).map(|(l, zr)| l * zr).sum::<f64>();
            z[i] = s / self.l_rows[i][i];
        }
        let d = self.cov(target, target) + self.hyper.sigma_n_sq()
            - z.iter().map(|x| x * x).sum::<f64>();
        let pivot_sq = [d, d + 1e-10, d + 1e-8]
            .into_iter()
            .find(|&x| x > 0.0)
            .ok_or_else(|| {
                Error::Numerical(format!(
                    "non-positive Cholesky pivot {d:.3e} while appending candidate {target}"
                ))
            })?;
        let pivot = pivot_sq.sqrt();

        // New cross row over all candidates, then the variance update.
        let row: Vec<f64> = (0..self.coords.len())
            .into_par_iter()
            .map(|j| {
                let s = self.cov(target, j)
                    - z.iter().zip(&self.cross).map(|(zr, row)| zr * row[j]).sum::<f64>();
                s / pivot
            })
            .collect();
        self.var
            .par_iter_mut()
            .zip(row.par_iter())
            .for_each(|(v, r)| *v = (*v - r * r).max(0.0));

        let mut l_row = z;
        l_row.push(pivot);
        self.l_rows.push(l_row);
        self.cross.push(row);
        self.chosen.push(target);
        self.is_chosen[target] = true;
        Ok(())
    }

    /// Index of the highest-variance unchosen candidate; ties break to the
    /// lowest index. None once every candidate is chosen.
    fn argmax_unchosen(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.var.iter().enumerate() {
            if self.is_chosen[i] {
                continue;
            }
            match best {
                Some((_, bv)) if v <= bv => {}
                _ => best = Some((i, v)),
            }
        }
        best
    }
}

/// Result of a greedy selection run.
pub struct Selection {
    /// Chosen candidate indices in selection order.
    pub order: Vec<usize>,
    /// Conditional variance of each chosen point just before it was added.
    pub variance_before: Vec<f64>,
    /// Final state, exposing the per-candidate variances.
    pub state: SelectionState,
}

/// Repeatedly appends the argmax-variance candidate until the stop rule
/// fires. The first pick is the argmax of the prior variance, which is
/// constant, so it lands on index 0.
pub fn greedy_select(
    field: &KernelField,
    hyper: &GpHyperparams,
    candidates: &[NormalizedCoord],
    stop: StopRule,
) -> Result<Selection> {
    if let StopRule::Count(k) = stop {
        if k > candidates.len() {
            return Err(Error::InvalidParameter {
                parameter: "stop",
                reason: format!("cannot select {k} of {} candidates", candidates.len()),
            });
        }
    }
    let mut state = SelectionState::new(candidates, field, hyper)?;
    let mut order = Vec::new();
    let mut variance_before = Vec::new();
    loop {
        if let StopRule::Count(k) = stop {
            if order.len() == k {
                break;
            }
        }
        let Some((best, best_var)) = state.argmax_unchosen() else {
            break;
        };
        if let StopRule::MaxVariance(threshold) = stop {
            if best_var <= threshold {
                break;
            }
        }
        state.append(best)?;
        order.push(best);
        variance_before.push(best_var);
    }
    Ok(Selection { order, variance_before, state })
}

/// Pixel-center coordinates of a raster subsampled by a stride, row-major.
pub fn grid_candidates(width: usize, height: usize, stride: usize) -> Result<Vec<NormalizedCoord>> {
    if width == 0 || height == 0 || stride == 0 {
        return Err(Error::InvalidParameter {
            parameter: "grid",
            reason: format!("degenerate grid {width}x{height} with stride {stride}"),
        });
    }
    let mut out = Vec::new();
    for py in (0..height).step_by(stride) {
        for px in (0..width).step_by(stride) {
            out.push(NormalizedCoord::from_pixel(px as f64, py as f64, width, height)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::chol_with_jitter;
    use crate::kernel::build_cov_matrix;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn coord(u: f64, v: f64) -> NormalizedCoord {
        NormalizedCoord::new(u, v).unwrap()
    }

    fn random_instance(
        seed: u64,
        n_cands: usize,
    ) -> (KernelField, GpHyperparams, Vec<NormalizedCoord>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raws: Vec<[f64; 3]> = (0..16)
            .map(|_| {
                [
                    rng.random_range(-1.5..0.0),
                    rng.random_range(-1.5..0.0),
                    rng.random_range(-0.8..0.8),
                ]
            })
            .collect();
        let field = KernelField::new(4, 4, raws).unwrap();
        let hyper = GpHyperparams::new(1.3, 2e-2, crate::kernel::MaternNu::FiveHalves).unwrap();
        let cands: Vec<_> = (0..n_cands)
            .map(|_| coord(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        (field, hyper, cands)
    }

    /// Dense oracle: conditional variances from a fresh factorization of the
    /// chosen subset.
    fn dense_variances(
        chosen: &[usize],
        cands: &[NormalizedCoord],
        field: &KernelField,
        hyper: &GpHyperparams,
    ) -> Vec<f64> {
        if chosen.is_empty() {
            return vec![hyper.prior_var(); cands.len()];
        }
        let chosen_coords: Vec<_> = chosen.iter().map(|&i| cands[i]).collect();
        let mut k_ss = build_cov_matrix(&chosen_coords, field, hyper).unwrap();
        for i in 0..chosen.len() {
            k_ss[(i, i)] += hyper.sigma_n_sq();
        }
        let (chol, _) = chol_with_jitter(&k_ss).unwrap();
        cands
            .iter()
            .map(|&x| {
                let s = field.decode_at(x);
                let k_sx = DVector::from_iterator(
                    chosen.len(),
                    chosen_coords.iter().map(|&c| {
                        nonstationary_cov(c, &field.decode_at(c), x, &s, hyper)
                    }),
                );
                let sol = chol.solve(&k_sx);
                hyper.prior_var() - k_sx.dot(&sol)
            })
            .collect()
    }

    #[test]
    fn first_pick_is_lowest_index_on_constant_prior() {
        let field = KernelField::constant(4, 4, [-0.5, -0.5, 0.0]).unwrap();
        let hyper = GpHyperparams::default();
        let cands = grid_candidates(8, 8, 2).unwrap();
        let sel = greedy_select(&field, &hyper, &cands, StopRule::Count(1)).unwrap();
        assert_eq!(sel.order, vec![0]);
        assert_abs_diff_eq!(sel.variance_before[0], hyper.prior_var(), epsilon = 1e-14);
    }

    #[test]
    fn incremental_variances_match_dense_recompute_each_step() {
        let (field, hyper, cands) = random_instance(41, 30);
        let mut state = SelectionState::new(&cands, &field, &hyper).unwrap();
        let mut chosen = Vec::new();
        for step in 0..10 {
            let (best, _) = state.argmax_unchosen().unwrap();
            state.append(best).unwrap();
            chosen.push(best);
            let oracle = dense_variances(&chosen, &cands, &field, &hyper);
            for (j, (&inc, &dense)) in state.variances().iter().zip(oracle.iter()).enumerate() {
                assert_abs_diff_eq!(
                    inc,
                    dense.max(0.0),
                    epsilon = 1e-8,
                );
                assert!(inc >= 0.0, "variance {inc} negative at candidate {j}, step {step}");
            }
        }
    }

    #[test]
    fn threshold_at_prior_variance_selects_nothing() {
        let (field, hyper, cands) = random_instance(5, 12);
        let sel =
            greedy_select(&field, &hyper, &cands, StopRule::MaxVariance(hyper.prior_var()))
                .unwrap();
        assert!(sel.order.is_empty());
    }

    #[test]
    fn threshold_below_noise_floor_selects_everything() {
        let (field, hyper, cands) = random_instance(6, 9);
        let sel = greedy_select(&field, &hyper, &cands, StopRule::MaxVariance(0.0)).unwrap();
        // Zero threshold never fires (variances stay positive here), so the
        // loop ends only when every candidate is chosen.
        assert_eq!(sel.order.len(), cands.len());
    }

    #[test]
    fn append_to_empty_state_is_scalar_factor() {
        let (field, hyper, cands) = random_instance(9, 4);
        let mut state = SelectionState::new(&cands, &field, &hyper).unwrap();
        state.append(2).unwrap();
        assert_eq!(state.l_rows.len(), 1);
        assert_abs_diff_eq!(
            state.l_rows[0][0],
            (hyper.prior_var() + hyper.sigma_n_sq()).sqrt(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn append_order_changes_factor_only_by_permutation() {
        let (field, hyper, cands) = random_instance(14, 6);
        let run = |first: usize, second: usize| {
            let mut st = SelectionState::new(&cands, &field, &hyper).unwrap();
            st.append(first).unwrap();
            st.append(second).unwrap();
            let mut l = DMatrix::zeros(2, 2);
            l[(0, 0)] = st.l_rows[0][0];
            l[(1, 0)] = st.l_rows[1][0];
            l[(1, 1)] = st.l_rows[1][1];
            &l * l.transpose()
        };
        let a = run(1, 4);
        let b = run(4, 1);
        // A = L L^T over (1,4) must be the row/column swap of the (4,1) run.
        assert_abs_diff_eq!(a[(0, 0)], b[(1, 1)], epsilon = 1e-12);
        assert_abs_diff_eq!(a[(1, 1)], b[(0, 0)], epsilon = 1e-12);
        assert_abs_diff_eq!(a[(0, 1)], b[(1, 0)], epsilon = 1e-12);
    }

    #[test]
    fn appended_point_variance_drops_to_noise_level() {
        let (field, hyper, cands) = random_instance(3, 15);
        let mut state = SelectionState::new(&cands, &field, &hyper).unwrap();
        for &t in &[0usize, 7, 12] {
            state.append(t).unwrap();
            assert!(state.variances()[t] <= hyper.sigma_n_sq() + 1e-8);
        }
    }

    #[test]
    fn variances_never_increase_across_steps() {
        let (field, hyper, cands) = random_instance(27, 40);
        let mut state = SelectionState::new(&cands, &field, &hyper).unwrap();
        let mut prev = state.variances().to_vec();
        for _ in 0..15 {
            let (best, _) = state.argmax_unchosen().unwrap();
            state.append(best).unwrap();
            for (j, (&now, &before)) in state.variances().iter().zip(prev.iter()).enumerate() {
                assert!(now <= before + 1e-10, "variance grew at candidate {j}");
            }
            prev = state.variances().to_vec();
        }
    }

    #[test]
    fn selection_order_is_deterministic() {
        let (field, hyper, cands) = random_instance(33, 50);
        let a = greedy_select(&field, &hyper, &cands, StopRule::Count(20)).unwrap();
        let b = greedy_select(&field, &hyper, &cands, StopRule::Count(20)).unwrap();
        assert_eq!(a.order, b.order);
        assert_eq!(a.variance_before, b.variance_before);
    }

    #[test]
    fn rejects_repeat_append_and_overlong_count() {
        let (field, hyper, cands) = random_instance(8, 5);
        let mut state = SelectionState::new(&cands, &field, &hyper).unwrap();
        state.append(3).unwrap();
        assert!(state.append(3).is_err());
        assert!(greedy_select(&field, &hyper, &cands, StopRule::Count(6)).is_err());
    }

    #[test]
    fn grid_candidates_cover_strided_centers() {
        let g = grid_candidates(4, 2, 2).unwrap();
        assert_eq!(g.len(), 2);
        let (px, py) = g[0].to_pixel(4, 2);
        assert_abs_diff_eq!(px, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(py, 0.0, epsilon = 1e-12);
        let (px, py) = g[1].to_pixel(4, 2);
        assert_abs_diff_eq!(px, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(py, 0.0, epsilon = 1e-12);
    }
}
