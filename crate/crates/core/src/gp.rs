//! Log-depth Gaussian process: exact conditioning, marginal likelihood, the
//! Nystrom low-rank approximation, and the variational free energy objective
//! with analytic gradients.
//!
//! All solves go through Cholesky factorizations; no matrix is ever inverted
//! explicitly. Factorizations first attempt the matrix as given, then retry
//! with diagonal jitter 1e-10 and 1e-8 before reporting a numerical error.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{
    self, build_cov_matrix, cross_cov_matrix, GpHyperparams, KernelField, NormalizedCoord,
};

/// Jitter ladder applied to diagonals when a factorization fails.
const JITTERS: [f64; 3] = [0.0, 1e-10, 1e-8];

/// Cholesky factorization with jitter retries. Returns the factorization and
/// the jitter that succeeded.
pub(crate) fn chol_with_jitter(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    for &jitter in &JITTERS {
        let mut m = a.clone();
        if jitter > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok((chol, jitter));
        }
    }
    Err(Error::Numerical(format!(
        "Cholesky factorization failed for a {}x{} matrix even with jitter {:.0e}",
        a.nrows(),
        a.ncols(),
        JITTERS[JITTERS.len() - 1]
    )))
}

/// Observed log-depths at normalized coordinates.
#[derive(Clone, Debug)]
pub struct LogDepthObservations {
    coords: Vec<NormalizedCoord>,
    y: DVector<f64>,
}

impl LogDepthObservations {
    pub fn new(coords: Vec<NormalizedCoord>, y: DVector<f64>) -> Result<Self> {
        if coords.len() != y.len() {
            return Err(Error::InvalidParameter {
                parameter: "observations",
                reason: format!("{} coordinates but {} values", coords.len(), y.len()),
            });
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                parameter: "observations",
                reason: format!("non-finite log-depth {} at index {i}", y[i]),
            });
        }
        Ok(Self { coords, y })
    }

    pub fn empty() -> Self {
        Self { coords: Vec::new(), y: DVector::zeros(0) }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[NormalizedCoord] {
        &self.coords
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn mean_y(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.y.sum() / self.y.len() as f64
        }
    }
}

/// Covariance detail requested from conditioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovRequest {
    /// Dense covariance over all query points.
    Full,
    /// Block-diagonal covariance over consecutive query points; a trailing
    /// smaller block is allowed.
    Block(usize),
    /// Marginal variances only.
    Diag,
}

/// Posterior covariance in the requested shape.
#[derive(Clone, Debug)]
pub enum PosteriorCov {
    Full(DMatrix<f64>),
    Block { dim: usize, blocks: Vec<DMatrix<f64>> },
    Diag(DVector<f64>),
}

/// Posterior over query points: mean log-depths and covariance.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub mean: DVector<f64>,
    pub cov: PosteriorCov,
}

/// Conditions the GP prior on observations and evaluates the posterior at
/// query coordinates. With no observations this returns the prior. Full and
/// block covariances are symmetrized exactly; marginal variances are clamped
/// at zero.
pub fn condition(
    obs: &LogDepthObservations,
    m: f64,
    query: &[NormalizedCoord],
    field: &KernelField,
    hyper: &GpHyperparams,
    request: CovRequest,
) -> Result<Posterior> {
    if let CovRequest::Block(0) = request {
        return Err(Error::InvalidParameter {
            parameter: "request",
            reason: "block dimension must be positive".into(),
        });
    }
    let nq = query.len();
    if obs.is_empty() {
        let mean = DVector::repeat(nq, m);
        let cov = prior_cov(query, field, hyper, request)?;
        return Ok(Posterior { mean, cov });
    }

    let mut a = build_cov_matrix(obs.coords(), field, hyper)?;
    for i in 0..obs.len() {
        a[(i, i)] += hyper.sigma_n_sq();
    }
    let (chol, _) = chol_with_jitter(&a)?;
    let r = obs.y() - DVector::repeat(obs.len(), m);
    let alpha = chol.solve(&r);

    let k_qn = cross_cov_matrix(query, obs.coords(), field, hyper);
    let mean = DVector::repeat(nq, m) + &k_qn * &alpha;

    // V = L^{-1} K_nq; posterior covariance is K_qq - V^T V.
    let l = chol.l();
    let v = l.solve_lower_triangular(&k_qn.transpose()).ok_or_else(|| {
        Error::Numerical("triangular solve failed during conditioning".into())
    })?;

    let cov = match request {
        CovRequest::Full => {
            let mut k_qq = build_cov_matrix(query, field, hyper)?;
            k_qq -= v.transpose() * &v;
            symmetrize(&mut k_qq);
            PosteriorCov::Full(k_qq)
        }
        CovRequest::Block(dim) => {
            let mut blocks = Vec::new();
            let mut start = 0;
            while start < nq {
                let d = dim.min(nq - start);
                let idx = &query[start..start + d];
                let mut k_bb = build_cov_matrix(idx, field, hyper)?;
                let v_b = v.columns(start, d);
                k_bb -= v_b.transpose() * v_b;
                symmetrize(&mut k_bb);
                blocks.push(k_bb);
                start += d;
            }
            PosteriorCov::Block { dim, blocks }
        }
        CovRequest::Diag => {
            let prior = hyper.prior_var();
            let vars = DVector::from_iterator(
                nq,
                (0..nq).map(|j| (prior - v.column(j).norm_squared()).max(0.0)),
            );
            PosteriorCov::Diag(vars)
        }
    };
    Ok(Posterior { mean, cov })
}

fn prior_cov(
    query: &[NormalizedCoord],
    field: &KernelField,
    hyper: &GpHyperparams,
    request: CovRequest,
) -> Result<PosteriorCov> {
    Ok(match request {
        CovRequest::Full => PosteriorCov::Full(build_cov_matrix(query, field, hyper)?),
        CovRequest::Block(dim) => {
            let mut blocks = Vec::new();
            let mut start = 0;
            while start < query.len() {
                let d = dim.min(query.len() - start);
                blocks.push(build_cov_matrix(&query[start..start + d], field, hyper)?);
                start += d;
            }
            PosteriorCov::Block { dim, blocks }
        }
        CovRequest::Diag => PosteriorCov::Diag(DVector::repeat(query.len(), hyper.prior_var())),
    })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
}

/// Closed-form optimum of the scale variable given the factorized noisy
/// covariance: m* = (1^T A^{-1} y) / (1^T A^{-1} 1).
pub fn optimal_scale(y: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let ones = DVector::repeat(y.len(), 1.0);
    let ainv_y = chol.solve(y);
    let ainv_1 = chol.solve(&ones);
    ones.dot(&ainv_y) / ones.dot(&ainv_1)
}

/// Convenience wrapper: builds the noisy covariance over the observation
/// coordinates, factorizes, and returns the optimal scale.
pub fn optimal_scale_exact(
    obs: &LogDepthObservations,
    field: &KernelField,
    hyper: &GpHyperparams,
) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::InvalidParameter {
            parameter: "observations",
            reason: "optimal scale needs at least one observation".into(),
        });
    }
    let mut a = build_cov_matrix(obs.coords(), field, hyper)?;
    for i in 0..obs.len() {
        a[(i, i)] += hyper.sigma_n_sq();
    }
    let (chol, _) = chol_with_jitter(&a)?;
    Ok(optimal_scale(obs.y(), &chol))
}

/// Exact negative log marginal likelihood:
/// 1/2 (y-m)^T A^{-1} (y-m) + 1/2 log|A| + n/2 log 2 pi with A = K + sigma_n^2 I.
pub fn nlml(
    obs: &LogDepthObservations,
    m: f64,
    field: &KernelField,
    hyper: &GpHyperparams,
) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::InvalidParameter {
            parameter: "observations",
            reason: "marginal likelihood needs at least one observation".into(),
        });
    }
    let n = obs.len();
    let mut a = build_cov_matrix(obs.coords(), field, hyper)?;
    for i in 0..n {
        a[(i, i)] += hyper.sigma_n_sq();
    }
    let (chol, _) = chol_with_jitter(&a)?;
    let r = obs.y() - DVector::repeat(n, m);
    let alpha = chol.solve(&r);
    let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(0.5 * r.dot(&alpha) + 0.5 * logdet + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Nystrom approximation K ~ K_fu K_uu^{-1} K_uf held as V^T V with
/// V = L_uu^{-1} K_uf.
pub struct Nystrom {
    v: DMatrix<f64>,
}

impl Nystrom {
    /// Builds the factor from the inducing covariance and the cross
    /// covariance (inducing rows, prediction columns).
    pub fn new(k_uu: &DMatrix<f64>, k_uf: &DMatrix<f64>) -> Result<Self> {
        if k_uu.nrows() != k_uu.ncols() || k_uu.nrows() != k_uf.nrows() {
            return Err(Error::InvalidParameter {
                parameter: "k_uu",
                reason: format!(
                    "inducing covariance {}x{} incompatible with cross covariance {}x{}",
                    k_uu.nrows(),
                    k_uu.ncols(),
                    k_uf.nrows(),
                    k_uf.ncols()
                ),
            });
        }
        let (chol, _) = chol_with_jitter(k_uu)?;
        let v = chol.l().solve_lower_triangular(k_uf).ok_or_else(|| {
            Error::Numerical("triangular solve failed building the Nystrom factor".into())
        })?;
        Ok(Self { v })
    }

    pub fn rank(&self) -> usize {
        self.v.nrows()
    }

    pub fn len(&self) -> usize {
        self.v.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.v.ncols() == 0
    }

    /// The factor V with K-tilde = V^T V.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Diagonal of the approximate covariance.
    pub fn diag(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), (0..self.len()).map(|j| self.v.column(j).norm_squared()))
    }

    /// Matrix-vector product K-tilde * w without forming the n x n matrix.
    pub fn apply(&self, w: &DVector<f64>) -> DVector<f64> {
        self.v.transpose() * (&self.v * w)
    }
}

/// Gradients of the variational free energy with respect to the raw field
/// raster (same layout as the field), the hyperparameters, and the scale.
#[derive(Clone, Debug)]
pub struct VfeGradients {
    pub field: Vec<[f64; 3]>,
    pub sigma_f_sq: f64,
    pub sigma_n_sq: f64,
    pub m: f64,
}

/// Variational free energy value and optional gradients.
pub struct VfeEval {
    pub loss: f64,
    pub grad: Option<VfeGradients>,
}

/// Shared factorization state for the variational objective, built once per
/// evaluation: V = L_uu^{-1} K_uf and B = sigma_n^2 I + V V^T.
pub(crate) struct VfeCore {
    inducing_coords: Vec<NormalizedCoord>,
    k_uu: DMatrix<f64>,
    k_uf: DMatrix<f64>,
    l_uu: Cholesky<f64, Dyn>,
    v: DMatrix<f64>,
    b_chol: Cholesky<f64, Dyn>,
    /// Trace deficit sum_i (k_ii - ||v_i||^2), nonnegative in exact arithmetic.
    trace_deficit: f64,
}

impl VfeCore {
    pub(crate) fn build(
        obs: &LogDepthObservations,
        inducing: &[usize],
        field: &KernelField,
        hyper: &GpHyperparams,
    ) -> Result<Self> {
        let n = obs.len();
        if inducing.is_empty() || n == 0 {
            return Err(Error::InvalidParameter {
                parameter: "inducing",
                reason: "variational objective needs observations and at least one inducing point"
                    .into(),
            });
        }
        let mut seen = vec![false; n];
        for &i in inducing {
            if i >= n {
                return Err(Error::InvalidParameter {
                    parameter: "inducing",
                    reason: format!("inducing index {i} out of range for {n} observations"),
                });
            }
            if seen[i] {
                return Err(Error::InvalidParameter {
                    parameter: "inducing",
                    reason: format!("inducing index {i} repeated"),
                });
            }
            seen[i] = true;
        }
        let inducing_coords: Vec<_> = inducing.iter().map(|&i| obs.coords()[i]).collect();
        let k_uu = build_cov_matrix(&inducing_coords, field, hyper)?;
        let k_uf = cross_cov_matrix(&inducing_coords, obs.coords(), field, hyper);
        let (l_uu, _) = chol_with_jitter(&k_uu)?;
        let v = l_uu.l().solve_lower_triangular(&k_uf).ok_or_else(|| {
            Error::Numerical("triangular solve failed building the variational factor".into())
        })?;
        let mut b = &v * v.transpose();
        for i in 0..b.nrows() {
            b[(i, i)] += hyper.sigma_n_sq();
        }
        let b_chol = Cholesky::new(b).ok_or_else(|| {
            Error::Numerical("Cholesky of the variational inner matrix failed".into())
        })?;
        let trace_deficit = (0..n)
            .map(|j| hyper.prior_var() - v.column(j).norm_squared())
            .sum::<f64>();
        Ok(Self { inducing_coords, k_uu, k_uf, l_uu, v, b_chol, trace_deficit })
    }

    /// G^{-1} rhs with G = K-tilde + sigma_n^2 I, via the Woodbury identity:
    /// G^{-1} = sigma_n^{-2} (I - V^T B^{-1} V).
    fn solve_g(&self, rhs: &DVector<f64>, sigma_n_sq: f64) -> DVector<f64> {
        let vr = &self.v * rhs;
        let binv_vr = self.b_chol.solve(&vr);
        (rhs - self.v.transpose() * binv_vr) / sigma_n_sq
    }

    /// log|G| = (n - u) log sigma_n^2 + 2 sum log diag chol(B).
    fn logdet_g(&self, n: usize, sigma_n_sq: f64) -> f64 {
        let u = self.v.nrows();
        (n - u) as f64 * sigma_n_sq.ln()
            + 2.0 * self.b_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Objective value at a given scale, reusing the factorization.
    pub(crate) fn loss(&self, obs: &LogDepthObservations, m: f64, hyper: &GpHyperparams) -> f64 {
        loss_from_core(self, obs, m, hyper)
    }

    /// Closed-form optimal scale under this factorization.
    pub(crate) fn optimal_scale(&self, obs: &LogDepthObservations, hyper: &GpHyperparams) -> f64 {
        let ones = DVector::repeat(obs.len(), 1.0);
        let gy = self.solve_g(obs.y(), hyper.sigma_n_sq());
        let g1 = self.solve_g(&ones, hyper.sigma_n_sq());
        ones.dot(&gy) / ones.dot(&g1)
    }
}

/// Variational free energy (negative evidence lower bound):
/// 1/2 r^T G^{-1} r + 1/2 log|G| + n/2 log 2 pi + t / (2 sigma_n^2)
/// with G = K-tilde + sigma_n^2 I and t the trace deficit.
pub fn vfe_loss(
    obs: &LogDepthObservations,
    inducing: &[usize],
    m: f64,
    field: &KernelField,
    hyper: &GpHyperparams,
) -> Result<f64> {
    let core = VfeCore::build(obs, inducing, field, hyper)?;
    Ok(loss_from_core(&core, obs, m, hyper))
}

fn loss_from_core(
    core: &VfeCore,
    obs: &LogDepthObservations,
    m: f64,
    hyper: &GpHyperparams,
) -> f64 {
    let n = obs.len();
    let r = obs.y() - DVector::repeat(n, m);
    let alpha = core.solve_g(&r, hyper.sigma_n_sq());
    0.5 * r.dot(&alpha)
        + 0.5 * core.logdet_g(n, hyper.sigma_n_sq())
        + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
        + core.trace_deficit / (2.0 * hyper.sigma_n_sq())
}

/// Optimal scale under the variational model: m* = (1^T G^{-1} y)/(1^T G^{-1} 1).
pub fn vfe_optimal_scale(
    obs: &LogDepthObservations,
    inducing: &[usize],
    field: &KernelField,
    hyper: &GpHyperparams,
) -> Result<f64> {
    let core = VfeCore::build(obs, inducing, field, hyper)?;
    Ok(core.optimal_scale(obs, hyper))
}

/// Variational free energy with analytic gradients. The field gradient is
/// accumulated onto the raster of the supplied field through the bilinear
/// interpolation weights of every observation coordinate.
pub fn vfe(
    obs: &LogDepthObservations,
    inducing: &[usize],
    m: f64,
    field: &KernelField,
    hyper: &GpHyperparams,
) -> Result<VfeEval> {
    let core = VfeCore::build(obs, inducing, field, hyper)?;
    let n = obs.len();
    let u = inducing.len();
    let sigma_n_sq = hyper.sigma_n_sq();
    let loss = loss_from_core(&core, obs, m, hyper);

    let r = obs.y() - DVector::repeat(n, m);
    let alpha = core.solve_g(&r, sigma_n_sq);

    // P = C W with W = dF/dG restricted to the low-rank structure:
    // W = 1/2 G^{-1} - 1/2 alpha alpha^T - 1/(2 sigma_n^2) I. The G^{-1}
    // term cancels against the trace-identity term, leaving
    // P = -1/2 [ sigma_n^{-2} (C V^T) B^{-1} V + (C alpha) alpha^T ].
    let c = &core.k_uf;
    let cvt = c * core.v.transpose();
    let binv = core.b_chol.solve(&cvt.transpose());
    let p = -0.5 * ((binv.transpose() * &core.v) / sigma_n_sq + (c * &alpha) * alpha.transpose());

    // dF/dC = 2 A^{-1} P and dF/dA = -(A^{-1} P)(A^{-1} C)^T.
    let ainv_p = core.l_uu.solve(&p);
    let ainv_c = core.l_uu.solve(c);
    let grad_c = 2.0 * &ainv_p;
    let grad_a = -(&ainv_p * ainv_c.transpose());

    // Scatter pairwise kernel derivatives through the interpolation weights.
    let obs_pts = kernel::decode_points(obs.coords(), field);
    let ind_pts = kernel::decode_points(&core.inducing_coords, field);
    let mut grad_field = vec![[0.0; 3]; field.width() * field.height()];
    let mut scatter = |nodes: &[(usize, f64); 4], d_raw: [f64; 3], weight: f64| {
        for &(idx, w) in nodes {
            for ch in 0..3 {
                grad_field[idx][ch] += weight * w * d_raw[ch];
            }
        }
    };

    // A is symmetric: off-diagonal pairs carry both (p,q) and (q,p) weights.
    for p_i in 0..u {
        for q_i in p_i..u {
            let weight =
                if p_i == q_i { grad_a[(p_i, q_i)] } else { grad_a[(p_i, q_i)] + grad_a[(q_i, p_i)] };
            let g = kernel::nonstationary_cov_grad(
                ind_pts.coords[p_i],
                ind_pts.raws[p_i],
                ind_pts.coords[q_i],
                ind_pts.raws[q_i],
                hyper,
            );
            scatter(&ind_pts.nodes[p_i], g.d_raw_i, weight);
            scatter(&ind_pts.nodes[q_i], g.d_raw_j, weight);
        }
    }
    for p_i in 0..u {
        for j in 0..n {
            let weight = grad_c[(p_i, j)];
            if weight == 0.0 {
                continue;
            }
            let g = kernel::nonstationary_cov_grad(
                ind_pts.coords[p_i],
                ind_pts.raws[p_i],
                obs_pts.coords[j],
                obs_pts.raws[j],
                hyper,
            );
            scatter(&ind_pts.nodes[p_i], g.d_raw_i, weight);
            scatter(&obs_pts.nodes[j], g.d_raw_j, weight);
        }
    }

    // Hyper gradients. A and C scale linearly with sigma_f^2 and the direct
    // diagonal dependence of the trace term contributes n/(4 sigma_n^2).
    let tr_grad_a_a = grad_a.component_mul(&core.k_uu).sum();
    let tr_grad_c_c = grad_c.component_mul(c).sum();
    let grad_sigma_f_sq =
        (tr_grad_a_a + tr_grad_c_c) / hyper.sigma_f_sq() + n as f64 / (4.0 * sigma_n_sq);

    // tr(B^{-1} V V^T) = u - sigma_n^2 tr(B^{-1}).
    let binv_l = core
        .b_chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(u, u))
        .expect("unit lower triangular solve");
    let tr_binv = binv_l.iter().map(|x| x * x).sum::<f64>();
    let tr_binv_vvt = u as f64 - sigma_n_sq * tr_binv;
    let grad_sigma_n_sq = -0.5 * alpha.norm_squared()
        + 0.5 * (n as f64 - tr_binv_vvt) / sigma_n_sq
        - core.trace_deficit / (2.0 * sigma_n_sq * sigma_n_sq);

    let grad_m = -alpha.sum();

    Ok(VfeEval {
        loss,
        grad: Some(VfeGradients {
            field: grad_field,
            sigma_f_sq: grad_sigma_f_sq,
            sigma_n_sq: grad_sigma_n_sq,
            m: grad_m,
        }),
    })
}
