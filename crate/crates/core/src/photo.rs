//! Photometric alignment over GP-conditioned dense depth: intensity images
//! with bilinear sampling, whitened photometric residuals with affine
//! brightness correction, closed-form keyframe depth initialization, and a
//! coarse-to-fine two-frame pose + depth solver.
//!
//! The depth entering the warp is never a free per-pixel variable: it is the
//! GP conditional mean at the pixel, a fixed linear map of the inducing
//! log-depths. Pose updates are left-multiplicative twists.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix3x6, Vector2};
use serde::{Deserialize, Serialize};

use crate::ba::{huber_cost, huber_weight};
use crate::error::{Error, Result};
use crate::geometry::{self, skew, Intrinsics, Pose, MIN_PROJECT_DEPTH};
use crate::gp::chol_with_jitter;
use crate::kernel::{
    build_cov_matrix, cross_cov_matrix, GpHyperparams, KernelField, NormalizedCoord,
};
use crate::select::{greedy_select, grid_candidates, StopRule};

/// Damping growth on a rejected step and shrink on an accepted one.
const LAMBDA_GROW: f64 = 4.0;
const LAMBDA_SHRINK: f64 = 0.5;
/// Damping beyond this value marks the solve as non-converged.
const LAMBDA_MAX: f64 = 1e12;

/// Grayscale raster in [0, 1] with bilinear sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl IntensityImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width < 2 || height < 2 || data.len() != width * height {
            return Err(Error::InvalidParameter {
                parameter: "image",
                reason: format!("{} values do not fill {width}x{height} (min 2x2)", data.len()),
            });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter {
                parameter: "image",
                reason: "intensities must lie in [0, 1]".into(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, px: usize, py: usize) -> f64 {
        self.data[py * self.width + px]
    }

    /// Containing cell and fractional offsets for bilinear sampling, or None
    /// outside [0, width-1] x [0, height-1]. The far edges fold into the
    /// last interior cell so the closed boundary is sampleable.
    fn cell(&self, p: &Vector2<f64>) -> Option<(usize, usize, f64, f64)> {
        let (w, h) = (self.width as f64 - 1.0, self.height as f64 - 1.0);
        if !(p.x >= 0.0 && p.x <= w && p.y >= 0.0 && p.y <= h) {
            return None;
        }
        let ix = (p.x.floor() as usize).min(self.width - 2);
        let iy = (p.y.floor() as usize).min(self.height - 2);
        Some((ix, iy, p.x - ix as f64, p.y - iy as f64))
    }

    /// Bilinear intensity, or None outside the sampling domain.
    pub fn sample(&self, p: &Vector2<f64>) -> Option<f64> {
        let (ix, iy, fx, fy) = self.cell(p)?;
        let [p00, p10, p01, p11] = self.corners(ix, iy);
        Some(
            (1.0 - fx) * (1.0 - fy) * p00
                + fx * (1.0 - fy) * p10
                + (1.0 - fx) * fy * p01
                + fx * fy * p11,
        )
    }

    /// Bilinear intensity and its exact spatial derivative, which is the
    /// derivative of the interpolant: constant per axis within a cell.
    pub fn sample_grad(&self, p: &Vector2<f64>) -> Option<(f64, Vector2<f64>)> {
        let (ix, iy, fx, fy) = self.cell(p)?;
        let [p00, p10, p01, p11] = self.corners(ix, iy);
        let value = (1.0 - fx) * (1.0 - fy) * p00
            + fx * (1.0 - fy) * p10
            + (1.0 - fx) * fy * p01
            + fx * fy * p11;
        let gx = (1.0 - fy) * (p10 - p00) + fy * (p11 - p01);
        let gy = (1.0 - fx) * (p01 - p00) + fx * (p11 - p10);
        Some((value, Vector2::new(gx, gy)))
    }

    fn corners(&self, ix: usize, iy: usize) -> [f64; 4] {
        [
            self.pixel(ix, iy),
            self.pixel(ix + 1, iy),
            self.pixel(ix, iy + 1),
            self.pixel(ix + 1, iy + 1),
        ]
    }

    /// Next-coarser pyramid level: 2x2 box filter, dimensions halved
    /// (odd trailing rows and columns are dropped).
    pub fn downsample2(&self) -> Result<IntensityImage> {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(w * h);
        for py in 0..h {
            for px in 0..w {
                let s = self.pixel(2 * px, 2 * py)
                    + self.pixel(2 * px + 1, 2 * py)
                    + self.pixel(2 * px, 2 * py + 1)
                    + self.pixel(2 * px + 1, 2 * py + 1);
                data.push(s / 4.0);
            }
        }
        IntensityImage::new(w, h, data)
    }

    /// Mean central-difference gradient magnitude over interior pixels; the
    /// texture-sufficiency check for alignment.
    pub fn mean_gradient(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for py in 1..self.height - 1 {
            for px in 1..self.width - 1 {
                let gx = (self.pixel(px + 1, py) - self.pixel(px - 1, py)) / 2.0;
                let gy = (self.pixel(px, py + 1) - self.pixel(px, py - 1)) / 2.0;
                total += gx.hypot(gy);
                count += 1;
            }
        }
        if count == 0 { 0.0 } else { total / count as f64 }
    }
}

/// Per-frame exposure model: intensities are compared as
/// `I + b` after scaling frame j by the gain ratio `e^{-a_i} / e^{-a_j}`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AffineBrightness {
    pub a: f64,
    pub b: f64,
}

impl AffineBrightness {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if a.is_finite() && b.is_finite() {
            Ok(Self { a, b })
        } else {
            Err(Error::InvalidParameter {
                parameter: "affine",
                reason: format!("non-finite brightness parameters ({a}, {b})"),
            })
        }
    }
}

/// Predictive-mean operator `W = K_qn (K_nn + sigma_n^2 I)^{-1}`: the matrix
/// through which query means depend linearly on observed values.
pub fn predictive_weights(
    train: &[NormalizedCoord],
    query: &[NormalizedCoord],
    field: &KernelField,
    hyper: &GpHyperparams,
) -> Result<DMatrix<f64>> {
    let mut k_nn = build_cov_matrix(train, field, hyper)?;
    for i in 0..train.len() {
        k_nn[(i, i)] += hyper.sigma_n_sq();
    }
    let (chol, _) = chol_with_jitter(&k_nn)?;
    let k_nq = cross_cov_matrix(train, query, field, hyper);
    Ok(chol.solve(&k_nq).transpose())
}

/// Whitened photometric residuals with a per-pixel validity mask; masked
/// entries are exactly zero.
#[derive(Clone, Debug)]
pub struct PhotoResidual {
    pub residuals: DVector<f64>,
    pub valid: Vec<bool>,
}

/// Photometric residual of frame-i pixels against frame j over the GP
/// conditional mean of log-depth: each pixel is warped with the depth
/// predicted from the inducing log-depths `y_i`, then compared as
/// `Ii(x) + b_i - (gain * Ij(x') + b_j)` with `gain = e^{a_j - a_i}`,
/// whitened by `sigma_r`. Out-of-image and behind-camera warps are masked.
#[allow(clippy::too_many_arguments)]
pub fn photometric_residual(
    image_i: &IntensityImage,
    image_j: &IntensityImage,
    pixels: &[Vector2<f64>],
    pose_i: &Pose,
    pose_j: &Pose,
    inducing: &[NormalizedCoord],
    y_i: &DVector<f64>,
    m_i: f64,
    field_i: &KernelField,
    hyper: &GpHyperparams,
    affine_i: &AffineBrightness,
    affine_j: &AffineBrightness,
    sigma_r: f64,
    k: &Intrinsics,
) -> Result<PhotoResidual> {
    if sigma_r <= 0.0 || !sigma_r.is_finite() {
        return Err(Error::InvalidParameter {
            parameter: "sigma_r",
            reason: format!("{sigma_r} must be positive"),
        });
    }
    if y_i.len() != inducing.len() {
        return Err(Error::InvalidParameter {
            parameter: "y_i",
            reason: format!("{} values for {} inducing points", y_i.len(), inducing.len()),
        });
    }
    let queries = pixels
        .iter()
        .map(|p| k.normalized(p))
        .collect::<Result<Vec<_>>>()?;
    let w = predictive_weights(inducing, &queries, field_i, hyper)?;
    let log_depth = DVector::repeat(pixels.len(), m_i)
        + &w * (y_i - DVector::repeat(y_i.len(), m_i));

    let rel = Pose::relative(pose_i, pose_j);
    let gain = (affine_j.a - affine_i.a).exp();
    let mut residuals = DVector::zeros(pixels.len());
    let mut valid = vec![false; pixels.len()];
    for (p, pixel) in pixels.iter().enumerate() {
        let Some(v_i) = image_i.sample(pixel) else {
            continue;
        };
        let Ok(warped) = geometry::warp_relative(pixel, &rel, log_depth[p], k) else {
            continue;
        };
        let Some(v_j) = image_j.sample(&warped.pixel) else {
            continue;
        };
        residuals[p] = (v_i + affine_i.b - (gain * v_j + affine_j.b)) / sigma_r;
        valid[p] = true;
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::Degenerate(
            "no pixel survived warping; frames do not overlap".into(),
        ));
    }
    Ok(PhotoResidual { residuals, valid })
}

/// Closed-form keyframe depth initialization: minimizes the prior-weighted
/// deviation from the scale `m` plus the predictive misfit to reprojected
/// log-depths,
/// `(y - m1)' K^{-1} (y - m1) + (log d - f*)' diag(var)^{-1} (log d - f*)`
/// with `f* = m + W (y - m1)`. The minimizer solves the normal equations
/// `(K^{-1} + W' D^{-1} W)(y - m1) = W' D^{-1} (log d - m1)`.
pub fn init_keyframe_depths(
    k_prior: &DMatrix<f64>,
    m: f64,
    log_d: &DVector<f64>,
    w: &DMatrix<f64>,
    var: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = k_prior.nrows();
    let p = log_d.len();
    if k_prior.ncols() != n {
        return Err(Error::InvalidParameter {
            parameter: "k_prior",
            reason: format!("{}x{} is not square", k_prior.nrows(), k_prior.ncols()),
        });
    }
    if p == 0 {
        return Ok(DVector::repeat(n, m));
    }
    if w.nrows() != p || w.ncols() != n || var.len() != p {
        return Err(Error::InvalidParameter {
            parameter: "w",
            reason: format!(
                "operator {}x{} does not map {n} inducing values to {p} depths",
                w.nrows(),
                w.ncols()
            ),
        });
    }
    if var.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::InvalidParameter {
            parameter: "var",
            reason: "predictive variances must be positive".into(),
        });
    }

    let (chol_k, _) = chol_with_jitter(k_prior)?;
    let k_inv = chol_k.inverse();
    let d_inv_w = DMatrix::from_fn(p, n, |i, j| w[(i, j)] / var[i]);
    let a = k_inv + w.transpose() * &d_inv_w;
    let rhs = d_inv_w.transpose() * (log_d - DVector::repeat(p, m));
    let (chol_a, _) = chol_with_jitter(&a)?;
    Ok(DVector::repeat(n, m) + chol_a.solve(&rhs))
}

/// Settings for the two-frame solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhotoConfig {
    /// Pyramid levels (level 0 is full resolution).
    pub levels: usize,
    /// Levenberg-Marquardt iterations per level.
    pub max_iters: usize,
    /// Robust-cost transition point in whitened units.
    pub huber_delta: f64,
    /// Photometric noise scale in intensity units.
    pub sigma_r: f64,
    pub lambda_init: f64,
    /// Stop once an accepted step's relative cost decrease falls below this.
    pub rel_tol: f64,
    /// Stop once the step norm falls below this.
    pub step_tol: f64,
    /// Inducing log-depth variables, placed by greedy variance selection.
    pub inducing_count: usize,
    /// Pixel stride of the photometric term.
    pub stride: usize,
    /// Keep pixels whose gradient magnitude reaches this quantile among the
    /// strided candidates, in [0, 1).
    pub grad_percentile: f64,
    /// Minimum mean image gradient for the solve to be attempted.
    pub min_mean_grad: f64,
}

impl Default for PhotoConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            max_iters: 50,
            huber_delta: 1.345,
            sigma_r: 0.05,
            lambda_init: 1e-4,
            rel_tol: 1e-8,
            step_tol: 1e-10,
            inducing_count: 64,
            stride: 2,
            grad_percentile: 0.5,
            min_mean_grad: 1e-3,
        }
    }
}

impl PhotoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.levels >= 1
            && self.max_iters >= 1
            && self.huber_delta > 0.0
            && self.sigma_r > 0.0
            && self.lambda_init > 0.0
            && self.rel_tol > 0.0
            && self.step_tol > 0.0
            && self.inducing_count >= 1
            && self.stride >= 1
            && (0.0..1.0).contains(&self.grad_percentile)
            && self.min_mean_grad >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("photometric settings out of range: {self:?}")))
        }
    }
}

/// Output of the two-frame solve. The pose maps frame-0 camera coordinates
/// to frame-1 camera coordinates; scale is anchored by fixing the log-depth
/// mean of frame 0 to zero.
#[derive(Clone, Debug)]
pub struct TwoFrameResult {
    pub pose: Pose,
    pub inducing: Vec<NormalizedCoord>,
    pub inducing_pixels: Vec<Vector2<f64>>,
    pub y: DVector<f64>,
    pub m: f64,
    /// Brightness parameters of frame 1 (frame 0 is the zero reference).
    pub affine: AffineBrightness,
    /// Accepted-step robust cost per pyramid level, coarsest first. Each
    /// trace is non-increasing; the first entry is the cost before any step.
    pub cost_traces: Vec<Vec<f64>>,
    pub converged: bool,
}

/// One pyramid level of the two-frame problem: fixed pixel set, fixed
/// predictive operator, fixed prior whitener. Parameter layout:
/// [twist(6) | y(n) | a1 | b1].
struct PhotoSystem<'a> {
    i0_values: Vec<f64>,
    i1: &'a IntensityImage,
    k: Intrinsics,
    pixels: Vec<Vector2<f64>>,
    /// p x n predictive operator from inducing y to pixel log-depths.
    w: DMatrix<f64>,
    /// Inverse lower Cholesky factor of the inducing prior covariance.
    l_inv: DMatrix<f64>,
    sigma_r: f64,
    huber_delta: f64,
}

struct SystemEval {
    photo_r: DVector<f64>,
    valid: Vec<bool>,
    prior_r: DVector<f64>,
    cost: f64,
    /// (photometric rows, prior rows), present when requested.
    jac: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl PhotoSystem<'_> {
    fn params(&self) -> usize {
        6 + self.w.ncols() + 2
    }

    fn eval(
        &self,
        pose: &Pose,
        y: &DVector<f64>,
        affine: &AffineBrightness,
        with_jac: bool,
    ) -> SystemEval {
        let p = self.pixels.len();
        let n = self.w.ncols();
        let cols = self.params();
        let log_depth = &self.w * y;
        let gain = affine.a.exp();
        let rot = pose.rotation_matrix();
        let identity_rel = pose.is_identity();

        let mut photo_r = DVector::zeros(p);
        let mut valid = vec![false; p];
        let mut jac = with_jac.then(|| DMatrix::zeros(p, cols));
        let mut cost = 0.0;
        for i in 0..p {
            let pixel = self.pixels[i];
            let z = log_depth[i].exp();
            let Ok(p_cam0) = geometry::backproject(&pixel, z, &self.k) else {
                continue;
            };
            let q = pose.transform_point(&p_cam0);
            if q.z <= MIN_PROJECT_DEPTH {
                continue;
            }
            // Identical poses warp each pixel to itself exactly, keeping the
            // fixed-point property of aligned frames.
            let target = if identity_rel {
                pixel
            } else {
                Vector2::new(
                    self.k.fx * q.x / q.z + self.k.cx,
                    self.k.fy * q.y / q.z + self.k.cy,
                )
            };
            let Some((v1, g1)) = self.i1.sample_grad(&target) else {
                continue;
            };
            let r = (self.i0_values[i] - (gain * v1 + affine.b)) / self.sigma_r;
            photo_r[i] = r;
            valid[i] = true;
            cost += huber_cost(r, self.huber_delta);

            if let Some(jac) = jac.as_mut() {
                // dr/dtarget, then target through the projection chain.
                let dr_dt = -(gain / self.sigma_r) * g1;
                let dproj = Matrix2x3::new(
                    self.k.fx / q.z,
                    0.0,
                    -self.k.fx * q.x / (q.z * q.z),
                    0.0,
                    self.k.fy / q.z,
                    -self.k.fy * q.y / (q.z * q.z),
                );
                let dr_dq = (dr_dt.transpose() * dproj).transpose();
                // Left-multiplicative twist [w; v]: dq/dw = -[q]x, dq/dv = I.
                let mut dq_dtwist = Matrix3x6::zeros();
                dq_dtwist.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&q)));
                dq_dtwist.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
                let j_twist = dr_dq.transpose() * dq_dtwist;
                for c in 0..6 {
                    jac[(i, c)] = j_twist[c];
                }
                // Depth: q = R (z * dir) + t, so dq/dlog z = R p_cam0.
                let dr_dlogz = dr_dq.dot(&(rot * p_cam0));
                for c in 0..n {
                    jac[(i, 6 + c)] = dr_dlogz * self.w[(i, c)];
                }
                jac[(i, 6 + n)] = -(gain * v1) / self.sigma_r;
                jac[(i, 6 + n + 1)] = -1.0 / self.sigma_r;
            }
        }

        let prior_r = &self.l_inv * y;
        cost += 0.5 * prior_r.norm_squared();
        let jac = jac.map(|photo_jac| {
            let mut prior_jac = DMatrix::zeros(n, cols);
            prior_jac.view_mut((0, 6), (n, n)).copy_from(&self.l_inv);
            (photo_jac, prior_jac)
        });
        SystemEval { photo_r, valid, prior_r, cost, jac }
    }
}

/// Strided pixels of the image whose gradient magnitude reaches the given
/// quantile among the strided set.
fn select_pixels(image: &IntensityImage, stride: usize, percentile: f64) -> Vec<Vector2<f64>> {
    let mut candidates = Vec::new();
    for py in (0..image.height()).step_by(stride) {
        for px in (0..image.width()).step_by(stride) {
            let p = Vector2::new(px as f64, py as f64);
            if let Some((_, g)) = image.sample_grad(&p) {
                candidates.push((p, g.norm()));
            }
        }
    }
    let mut mags: Vec<f64> = candidates.iter().map(|&(_, m)| m).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).expect("finite gradient"));
    let threshold = mags[(percentile * (mags.len() - 1) as f64).floor() as usize];
    candidates
        .into_iter()
        .filter(|&(_, m)| m >= threshold)
        .map(|(p, _)| p)
        .collect()
}

/// Estimates the relative pose of frame 1 from frame 0, the inducing
/// log-depths of frame 0, and frame-1 brightness, by coarse-to-fine
/// Levenberg-Marquardt over the photometric cost plus the GP depth prior.
pub fn two_frame_solve(
    i0: &IntensityImage,
    i1: &IntensityImage,
    field: &KernelField,
    hyper: &GpHyperparams,
    k: &Intrinsics,
    cfg: &PhotoConfig,
) -> Result<TwoFrameResult> {
    cfg.validate()?;
    if i0.width() != i1.width() || i0.height() != i1.height() {
        return Err(Error::InvalidParameter {
            parameter: "images",
            reason: format!(
                "frame dims {}x{} vs {}x{} differ",
                i0.width(),
                i0.height(),
                i1.width(),
                i1.height()
            ),
        });
    }
    if i0.width() != k.width || i0.height() != k.height {
        return Err(Error::InvalidParameter {
            parameter: "images",
            reason: "image dims do not match intrinsics".into(),
        });
    }
    let mean_grad = i0.mean_gradient();
    if mean_grad < cfg.min_mean_grad {
        return Err(Error::Degenerate(format!(
            "mean image gradient {mean_grad:.2e} below threshold {:.2e}",
            cfg.min_mean_grad
        )));
    }

    // Inducing locations by greedy variance selection on a candidate grid
    // dense enough to cover the requested count.
    let mut stride = 4usize;
    let mut candidates = grid_candidates(k.width, k.height, stride)?;
    while candidates.len() < cfg.inducing_count && stride > 1 {
        stride /= 2;
        candidates = grid_candidates(k.width, k.height, stride)?;
    }
    let selection = greedy_select(field, hyper, &candidates, StopRule::Count(cfg.inducing_count))?;
    let inducing: Vec<NormalizedCoord> =
        selection.order.iter().map(|&i| candidates[i]).collect();
    let inducing_pixels: Vec<Vector2<f64>> = inducing
        .iter()
        .map(|c| {
            let (u, v) = c.to_pixel(k.width, k.height);
            Vector2::new(u, v)
        })
        .collect();
    let n = inducing.len();

    // Prior whitener over the inducing set, shared across levels.
    let mut k_nn = build_cov_matrix(&inducing, field, hyper)?;
    for i in 0..n {
        k_nn[(i, i)] += hyper.sigma_n_sq();
    }
    let (chol_nn, _) = chol_with_jitter(&k_nn)?;
    let l_inv = chol_nn
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Numerical("prior factor is singular".into()))?;

    // Pyramid, finest first in construction, solved coarsest first.
    let mut levels = vec![(i0.clone(), i1.clone(), *k)];
    for _ in 1..cfg.levels {
        let (prev0, prev1, prev_k) = levels.last().expect("nonempty pyramid");
        if prev_k.width / 2 < 4 || prev_k.height / 2 < 4 {
            break;
        }
        levels.push((prev0.downsample2()?, prev1.downsample2()?, prev_k.halved()?));
    }

    let mut pose = Pose::identity();
    let mut y = DVector::zeros(n);
    let mut affine = AffineBrightness::default();
    let mut cost_traces = Vec::new();
    let mut converged = true;

    for (l0, l1, lk) in levels.iter().rev() {
        let pixels = select_pixels(l0, cfg.stride, cfg.grad_percentile);
        let queries = pixels
            .iter()
            .map(|p| lk.normalized(p))
            .collect::<Result<Vec<_>>>()?;
        let system = PhotoSystem {
            i0_values: pixels
                .iter()
                .map(|p| l0.sample(p).expect("pixel centers are sampleable"))
                .collect(),
            i1: l1,
            k: *lk,
            pixels,
            w: predictive_weights(&inducing, &queries, field, hyper)?,
            l_inv: l_inv.clone(),
            sigma_r: cfg.sigma_r,
            huber_delta: cfg.huber_delta,
        };

        let mut lambda = cfg.lambda_init;
        let mut eval = system.eval(&pose, &y, &affine, true);
        if !eval.valid.iter().any(|&v| v) {
            return Err(Error::Degenerate("frames do not overlap at some pyramid level".into()));
        }
        let mut trace = vec![eval.cost];
        let mut done = false;
        for _ in 0..cfg.max_iters {
            if done {
                break;
            }
            let (photo_jac, prior_jac) = eval.jac.as_ref().expect("jacobian requested");
            let cols = system.params();
            // Normal equations with Huber weights folded into the rows as
            // square roots; invalid rows are all-zero and contribute nothing.
            let mut jw = photo_jac.clone();
            let mut rw = eval.photo_r.clone();
            for i in 0..jw.nrows() {
                let s = huber_weight(eval.photo_r[i], cfg.huber_delta).sqrt();
                if s != 1.0 {
                    rw[i] *= s;
                    jw.row_mut(i).scale_mut(s);
                }
            }
            let h = jw.transpose() * &jw + prior_jac.transpose() * prior_jac;
            let g = jw.transpose() * &rw + prior_jac.transpose() * &eval.prior_r;

            let mut accepted = false;
            while lambda <= LAMBDA_MAX {
                let mut damped = h.clone();
                for d in 0..cols {
                    damped[(d, d)] += lambda;
                }
                let Some(chol) = nalgebra::Cholesky::new(damped) else {
                    lambda *= LAMBDA_GROW;
                    continue;
                };
                let step = chol.solve(&(-&g));
                let new_pose =
                    geometry::se3_exp(&nalgebra::Vector6::from_row_slice(&step.as_slice()[0..6]))
                        .compose(&pose);
                let new_y = &y + step.rows(6, n).clone_owned();
                let new_affine = AffineBrightness {
                    a: affine.a + step[6 + n],
                    b: affine.b + step[6 + n + 1],
                };
                let new_eval = system.eval(&new_pose, &new_y, &new_affine, true);
                if new_eval.cost < eval.cost {
                    let rel = (eval.cost - new_eval.cost) / eval.cost.abs().max(1e-300);
                    pose = new_pose;
                    y = new_y;
                    affine = new_affine;
                    eval = new_eval;
                    trace.push(eval.cost);
                    lambda = (lambda * LAMBDA_SHRINK).max(1e-12);
                    accepted = true;
                    done = rel < cfg.rel_tol || step.norm() < cfg.step_tol;
                    break;
                }
                lambda *= LAMBDA_GROW;
            }
            if !accepted {
                // Damping hit its cap without lowering the cost.
                converged = false;
                break;
            }
        }
        cost_traces.push(trace);
    }

    Ok(TwoFrameResult {
        pose,
        inducing,
        inducing_pixels,
        y,
        m: 0.0,
        affine,
        cost_traces,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_scene, Primitive, SceneSpec, TextureSpec, TrackSpec};
    use nalgebra::Vector3;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn coord(u: f64, v: f64) -> NormalizedCoord {
        NormalizedCoord::new(u, v).unwrap()
    }

    fn plane_scene(
        width: usize,
        height: usize,
        focal: f64,
        poses: Vec<[f64; 7]>,
        seed: u64,
    ) -> (Vec<IntensityImage>, Intrinsics) {
        let spec = SceneSpec {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            poses,
            primitives: vec![Primitive::Plane {
                point: [0.0, 0.0, 1.0],
                normal: [0.0, 0.0, -1.0],
            }],
            texture: TextureSpec { components: 6, freq_min: 2.0, freq_max: 12.0, contrast: 0.4 },
            tracks: TrackSpec::default(),
            seed,
        };
        let data = render_scene(&spec).unwrap();
        let images = data
            .images
            .iter()
            .map(|img| IntensityImage::new(width, height, img.clone()).unwrap())
            .collect();
        (images, data.intrinsics)
    }

    #[test]
    fn images_validate_shape_and_range() {
        assert!(IntensityImage::new(2, 2, vec![0.0, 0.5, 1.0]).is_err());
        assert!(IntensityImage::new(2, 2, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(IntensityImage::new(2, 2, vec![0.0, 0.5, 1.0, 1.0]).is_ok());
    }

    #[test]
    fn bilinear_gradient_matches_finite_differences() {
        let (images, _) = plane_scene(48, 36, 40.0, vec![[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]], 31);
        let image = &images[0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-7;
        for _ in 0..50 {
            // Interior non-lattice points; FD must stay within one cell.
            let x: f64 = rng.random_range(1.1..46.7);
            let y: f64 = rng.random_range(1.1..34.7);
            let p = Vector2::new(x, y);
            if (x - x.round()).abs() < 2.0 * h || (y - y.round()).abs() < 2.0 * h {
                continue;
            }
            let (_, g) = image.sample_grad(&p).unwrap();
            let fx = (image.sample(&Vector2::new(x + h, y)).unwrap()
                - image.sample(&Vector2::new(x - h, y)).unwrap())
                / (2.0 * h);
            let fy = (image.sample(&Vector2::new(x, y + h)).unwrap()
                - image.sample(&Vector2::new(x, y - h)).unwrap())
                / (2.0 * h);
            assert_abs_diff_eq!(g.x, fx, epsilon = 1e-6);
            assert_abs_diff_eq!(g.y, fy, epsilon = 1e-6);
        }
    }

    #[test]
    fn downsampling_box_averages_quads() {
        let data = vec![
            0.0, 0.4, 0.8, 1.0, //
            0.2, 0.6, 0.0, 0.2, //
            0.1, 0.3, 0.5, 0.7, //
            0.9, 0.5, 0.3, 0.1,
        ];
        let image = IntensityImage::new(4, 4, data).unwrap();
        let down = image.downsample2().unwrap();
        assert_eq!(down.width(), 2);
        assert_eq!(down.height(), 2);
        assert_abs_diff_eq!(down.pixel(0, 0), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(down.pixel(1, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(down.pixel(0, 1), 0.45, epsilon = 1e-15);
        assert_abs_diff_eq!(down.pixel(1, 1), 0.4, epsilon = 1e-15);
    }

    fn residual_fixture() -> (Vec<IntensityImage>, Intrinsics, KernelField, GpHyperparams) {
        let (images, k) = plane_scene(
            48,
            36,
            40.0,
            vec![
                [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
                [0.015, -0.01, 0.005, 0.0, 0.0, 0.0, 1.0],
            ],
            77,
        );
        let field = KernelField::constant(4, 4, [-2.0, -2.0, 0.0]).unwrap();
        let hyper = GpHyperparams::default();
        (images, k, field, hyper)
    }

    #[test]
    fn identical_frames_give_zero_residuals() {
        let (images, k, field, hyper) = residual_fixture();
        let pixels: Vec<Vector2<f64>> =
            (0..20).map(|i| Vector2::new(2.0 + 2.0 * i as f64, 9.0)).collect();
        let inducing = vec![coord(-0.5, -0.5), coord(0.5, -0.5), coord(0.0, 0.5)];
        let y = DVector::from_vec(vec![0.1, -0.2, 0.05]);
        let out = photometric_residual(
            &images[0],
            &images[0],
            &pixels,
            &Pose::identity(),
            &Pose::identity(),
            &inducing,
            &y,
            0.0,
            &field,
            &hyper,
            &AffineBrightness::default(),
            &AffineBrightness::default(),
            0.05,
            &k,
        )
        .unwrap();
        for (i, &v) in out.valid.iter().enumerate() {
            assert!(v);
            assert_eq!(out.residuals[i], 0.0);
        }
    }

    #[test]
    fn equal_affine_parameters_reduce_to_plain_difference() {
        let (images, k, field, hyper) = residual_fixture();
        let pixels: Vec<Vector2<f64>> =
            (0..15).map(|i| Vector2::new(4.0 + 2.5 * i as f64, 14.0)).collect();
        let inducing = vec![coord(-0.5, 0.0), coord(0.5, 0.0)];
        let y = DVector::zeros(2);
        let pose1 = Pose::from_parts(Vector3::new(0.015, -0.01, 0.005), 0.0, 0.0, 0.0, 1.0)
            .unwrap();
        let args = |ai: AffineBrightness, aj: AffineBrightness| {
            photometric_residual(
                &images[0], &images[1], &pixels, &Pose::identity(), &pose1, &inducing, &y,
                0.0, &field, &hyper, &ai, &aj, 0.05, &k,
            )
            .unwrap()
        };
        let zero = args(AffineBrightness::default(), AffineBrightness::default());
        let same = args(
            AffineBrightness::new(0.3, -0.1).unwrap(),
            AffineBrightness::new(0.3, -0.1).unwrap(),
        );
        assert!(zero.valid.iter().any(|&v| v));
        for i in 0..pixels.len() {
            assert_eq!(zero.valid[i], same.valid[i]);
            assert_abs_diff_eq!(zero.residuals[i], same.residuals[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn masked_pixels_are_exactly_zero() {
        let (images, k, field, hyper) = residual_fixture();
        // A large sideways shift pushes right-edge pixels out of frame 1.
        let pose1 =
            Pose::from_parts(Vector3::new(0.6, 0.0, 0.0), 0.0, 0.0, 0.0, 1.0).unwrap();
        let pixels: Vec<Vector2<f64>> =
            (0..24).map(|i| Vector2::new(2.0 * i as f64, 17.0)).collect();
        let inducing = vec![coord(0.0, 0.0)];
        let y = DVector::zeros(1);
        let out = photometric_residual(
            &images[0], &images[1], &pixels, &Pose::identity(), &pose1, &inducing, &y, 0.0,
            &field, &hyper, &AffineBrightness::default(), &AffineBrightness::default(),
            0.05, &k,
        )
        .unwrap();
        let masked = out.valid.iter().filter(|&&v| !v).count();
        assert!(masked > 0, "expected some pixels to leave the frame");
        for i in 0..pixels.len() {
            if !out.valid[i] {
                assert_eq!(out.residuals[i], 0.0);
            }
        }
    }

    #[test]
    fn no_overlap_is_a_degenerate_error() {
        let (images, k, field, hyper) = residual_fixture();
        let pose1 =
            Pose::from_parts(Vector3::new(50.0, 0.0, 0.0), 0.0, 0.0, 0.0, 1.0).unwrap();
        let pixels = vec![Vector2::new(10.0, 10.0), Vector2::new(30.0, 20.0)];
        let inducing = vec![coord(0.0, 0.0)];
        let y = DVector::zeros(1);
        let out = photometric_residual(
            &images[0], &images[1], &pixels, &Pose::identity(), &pose1, &inducing, &y, 0.0,
            &field, &hyper, &AffineBrightness::default(), &AffineBrightness::default(),
            0.05, &k,
        );
        assert!(matches!(out, Err(Error::Degenerate(_))));
    }

    #[test]
    fn equal_bias_shifts_cancel() {
        let (images, k, field, hyper) = residual_fixture();
        let pixels: Vec<Vector2<f64>> =
            (0..15).map(|i| Vector2::new(4.0 + 2.5 * i as f64, 20.0)).collect();
        let inducing = vec![coord(0.0, 0.0)];
        let y = DVector::zeros(1);
        let pose1 = Pose::from_parts(Vector3::new(0.015, -0.01, 0.005), 0.0, 0.0, 0.0, 1.0)
            .unwrap();
        let run = |shift: f64| {
            photometric_residual(
                &images[0], &images[1], &pixels, &Pose::identity(), &pose1, &inducing, &y,
                0.0, &field, &hyper,
                &AffineBrightness::new(0.1, 0.2 + shift).unwrap(),
                &AffineBrightness::new(-0.05, -0.3 + shift).unwrap(),
                0.05, &k,
            )
            .unwrap()
        };
        let a = run(0.0);
        let b = run(0.37);
        for i in 0..pixels.len() {
            assert_abs_diff_eq!(a.residuals[i], b.residuals[i], epsilon = 1e-12);
        }
    }

    /// Builds a small solver level directly for Jacobian tests.
    fn test_system<'a>(images: &'a [IntensityImage], k: &Intrinsics) -> PhotoSystem<'a> {
        let field = KernelField::constant(3, 3, [-2.0, -2.0, 0.0]).unwrap();
        let hyper = GpHyperparams::default();
        let inducing =
            vec![coord(-0.4, -0.4), coord(0.4, -0.4), coord(-0.4, 0.4), coord(0.4, 0.4)];
        let pixels: Vec<Vector2<f64>> = (0..30)
            .map(|i| Vector2::new(6.0 + (i % 6) as f64 * 6.3, 6.0 + (i / 6) as f64 * 5.7))
            .collect();
        let queries: Vec<NormalizedCoord> =
            pixels.iter().map(|p| k.normalized(p).unwrap()).collect();
        let n = inducing.len();
        let mut k_nn = build_cov_matrix(&inducing, &field, &hyper).unwrap();
        for i in 0..n {
            k_nn[(i, i)] += hyper.sigma_n_sq();
        }
        let (chol, _) = chol_with_jitter(&k_nn).unwrap();
        PhotoSystem {
            i0_values: pixels.iter().map(|p| images[0].sample(p).unwrap()).collect(),
            i1: &images[1],
            k: *k,
            pixels,
            w: predictive_weights(&inducing, &queries, &field, &hyper).unwrap(),
            l_inv: chol
                .l()
                .solve_lower_triangular(&DMatrix::identity(n, n))
                .unwrap(),
            sigma_r: 0.05,
            huber_delta: 1.345,
        }
    }

    #[test]
    fn solver_jacobians_match_finite_differences() {
        let (images, k) = plane_scene(
            48,
            36,
            40.0,
            vec![
                [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
                [0.01, 0.004, -0.003, 0.0, 0.0, 0.0, 1.0],
            ],
            101,
        );
        let system = test_system(&images, &k);
        let n = system.w.ncols();
        let pose = geometry::se3_exp(&nalgebra::Vector6::new(0.004, -0.003, 0.002, 0.008, -0.006, 0.002));
        let y = DVector::from_vec(vec![0.03, -0.02, 0.01, -0.04]);
        let affine = AffineBrightness::new(0.05, -0.02).unwrap();

        let eval = system.eval(&pose, &y, &affine, true);
        let (photo_jac, _) = eval.jac.as_ref().unwrap();
        assert!(eval.valid.iter().all(|&v| v), "fixture pixels must stay valid");

        let h = 1e-6;
        let fd_check = |col: usize, plus: &SystemEval, minus: &SystemEval| {
            for i in 0..system.pixels.len() {
                let fd = (plus.photo_r[i] - minus.photo_r[i]) / (2.0 * h);
                let an = photo_jac[(i, col)];
                let tol = 1e-4 * fd.abs().max(1.0);
                assert!(
                    (fd - an).abs() <= tol,
                    "col {col} row {i}: analytic {an} vs fd {fd}"
                );
            }
        };

        for c in 0..6 {
            let mut twist = nalgebra::Vector6::zeros();
            twist[c] = h;
            let plus = system.eval(&geometry::se3_exp(&twist).compose(&pose), &y, &affine, false);
            twist[c] = -h;
            let minus = system.eval(&geometry::se3_exp(&twist).compose(&pose), &y, &affine, false);
            fd_check(c, &plus, &minus);
        }
        for c in 0..n {
            let mut yp = y.clone();
            yp[c] += h;
            let plus = system.eval(&pose, &yp, &affine, false);
            yp[c] -= 2.0 * h;
            let minus = system.eval(&pose, &yp, &affine, false);
            fd_check(6 + c, &plus, &minus);
        }
        let plus = system.eval(&pose, &y, &AffineBrightness::new(affine.a + h, affine.b).unwrap(), false);
        let minus = system.eval(&pose, &y, &AffineBrightness::new(affine.a - h, affine.b).unwrap(), false);
        fd_check(6 + n, &plus, &minus);
        let plus = system.eval(&pose, &y, &AffineBrightness::new(affine.a, affine.b + h).unwrap(), false);
        let minus = system.eval(&pose, &y, &AffineBrightness::new(affine.a, affine.b - h).unwrap(), false);
        fd_check(6 + n + 1, &plus, &minus);
    }

    #[test]
    fn identity_on_identical_frames_is_a_fixed_point() {
        let (images, k) = plane_scene(48, 36, 40.0, vec![[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]], 55);
        let pair = [images[0].clone(), images[0].clone()];
        let system = test_system(&pair, &k);
        let y = DVector::zeros(system.w.ncols());
        let eval = system.eval(&Pose::identity(), &y, &AffineBrightness::default(), true);
        assert!(eval.valid.iter().all(|&v| v));
        assert_eq!(eval.photo_r.norm(), 0.0);
        assert_eq!(eval.prior_r.norm(), 0.0);
        let (photo_jac, prior_jac) = eval.jac.as_ref().unwrap();
        let g = photo_jac.transpose() * &eval.photo_r + prior_jac.transpose() * &eval.prior_r;
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn init_depths_with_no_data_returns_scale() {
        let k_prior = DMatrix::identity(4, 4);
        let y = init_keyframe_depths(
            &k_prior,
            0.7,
            &DVector::zeros(0),
            &DMatrix::zeros(0, 4),
            &DVector::zeros(0),
        )
        .unwrap();
        assert_eq!(y, DVector::repeat(4, 0.7));
    }

    #[test]
    fn init_depths_with_tight_data_matches_depths() {
        // Queries coincide with inducing points (W = I) and the predictive
        // variance is pushed toward zero, so the data term dominates.
        let field = KernelField::constant(2, 2, [-2.0, -2.0, 0.0]).unwrap();
        let hyper = GpHyperparams::default();
        let coords = vec![coord(-0.5, 0.0), coord(0.5, 0.0), coord(0.0, 0.6)];
        let k_prior = build_cov_matrix(&coords, &field, &hyper).unwrap();
        let log_d = DVector::from_vec(vec![0.2, -0.3, 0.5]);
        let w = DMatrix::identity(3, 3);
        let var = DVector::repeat(3, 1e-12);
        let y = init_keyframe_depths(&k_prior, 0.0, &log_d, &w, &var).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(y[i], log_d[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn init_depths_matches_gradient_descent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(250);
        let field = KernelField::constant(2, 2, [-1.5, -1.5, 0.0]).unwrap();
        let hyper = GpHyperparams::default();
        let inducing: Vec<NormalizedCoord> = (0..5)
            .map(|_| coord(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)))
            .collect();
        let queries: Vec<NormalizedCoord> = (0..7)
            .map(|_| coord(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)))
            .collect();
        let k_prior = build_cov_matrix(&inducing, &field, &hyper).unwrap();
        let w = predictive_weights(&inducing, &queries, &field, &hyper).unwrap();
        let log_d = DVector::from_fn(7, |_, _| rng.random_range(-0.5..0.5));
        let var = DVector::from_fn(7, |_, _| rng.random_range(0.05..0.3));
        let m = 0.3;
        let y = init_keyframe_depths(&k_prior, m, &log_d, &w, &var).unwrap();

        // First-order minimization of the same objective.
        let k_inv = nalgebra::Cholesky::new(k_prior.clone()).unwrap().inverse();
        let grad = |y: &DVector<f64>| -> DVector<f64> {
            let dm = y - DVector::repeat(5, m);
            let misfit = &w * &dm - (&log_d - DVector::repeat(7, m));
            let dw = DVector::from_fn(7, |i, _| misfit[i] / var[i]);
            2.0 * (&k_inv * dm) + 2.0 * w.transpose() * dw
        };
        let mut y_gd = DVector::repeat(5, m);
        let mut step = 1e-2;
        let objective = |y: &DVector<f64>| -> f64 {
            let dm = y - DVector::repeat(5, m);
            let misfit = &w * &dm - (&log_d - DVector::repeat(7, m));
            (dm.transpose() * &k_inv * &dm)[(0, 0)]
                + (0..7).map(|i| misfit[i] * misfit[i] / var[i]).sum::<f64>()
        };
        let mut obj = objective(&y_gd);
        for _ in 0..20000 {
            let g = grad(&y_gd);
            let trial = &y_gd - step * &g;
            let t_obj = objective(&trial);
            if t_obj < obj {
                y_gd = trial;
                obj = t_obj;
                step *= 1.1;
            } else {
                step *= 0.5;
                if step < 1e-14 {
                    break;
                }
            }
        }
        assert_abs_diff_eq!((y - y_gd).norm(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn constant_images_are_rejected_for_lack_of_texture() {
        let image = IntensityImage::new(32, 24, vec![0.5; 32 * 24]).unwrap();
        let k = Intrinsics::new(30.0, 30.0, 15.5, 11.5, 32, 24).unwrap();
        let field = KernelField::constant(2, 2, [-2.0, -2.0, 0.0]).unwrap();
        let out = two_frame_solve(
            &image,
            &image,
            &field,
            &GpHyperparams::default(),
            &k,
            &PhotoConfig { inducing_count: 8, ..PhotoConfig::default() },
        );
        assert!(matches!(out, Err(Error::Degenerate(_))));
    }

    #[test]
    fn gain_only_pair_is_explained_by_affine_parameters() {
        let (images, k) = plane_scene(48, 36, 40.0, vec![[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]], 203);
        let gain = 0.8;
        let scaled = IntensityImage::new(
            images[0].width(),
            images[0].height(),
            images[0].data().iter().map(|&v| v * gain).collect(),
        )
        .unwrap();
        let field = KernelField::constant(3, 3, [-2.0, -2.0, 0.0]).unwrap();
        let cfg = PhotoConfig { inducing_count: 16, ..PhotoConfig::default() };
        let out = two_frame_solve(&images[0], &scaled, &field, &GpHyperparams::default(), &k, &cfg)
            .unwrap();
        let final_cost = *out.cost_traces.last().unwrap().last().unwrap();
        assert!(final_cost < 1e-8, "final cost {final_cost}");
        assert_abs_diff_eq!(out.affine.a.exp() * gain, 1.0, epsilon = 1e-3);
        assert!(out.pose.translation().norm() < 1e-4);
    }

    #[test]
    fn two_frame_traces_are_non_increasing() {
        let (images, k) = plane_scene(
            48,
            36,
            40.0,
            vec![
                [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
                [-0.02, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            ],
            307,
        );
        let field = KernelField::constant(3, 3, [-2.0, -2.0, 0.0]).unwrap();
        let cfg = PhotoConfig { inducing_count: 24, ..PhotoConfig::default() };
        let out = two_frame_solve(&images[0], &images[1], &field, &GpHyperparams::default(), &k, &cfg)
            .unwrap();
        assert_eq!(out.cost_traces.len(), 3);
        for trace in &out.cost_traces {
            for pair in trace.windows(2) {
                assert!(pair[1] <= pair[0]);
            }
        }
    }

    #[test]
    fn small_baseline_plane_recovers_motion_and_depth() {
        let (images, k) = plane_scene(
            96,
            72,
            80.0,
            vec![
                [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
                [-0.02, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            ],
            307,
        );
        let field = KernelField::constant(3, 3, [-2.0, -2.0, 0.0]).unwrap();
        let cfg = PhotoConfig { inducing_count: 24, stride: 1, ..PhotoConfig::default() };
        let out = two_frame_solve(&images[0], &images[1], &field, &GpHyperparams::default(), &k, &cfg)
            .unwrap();
        assert!(out.converged);

        let t_est = out.pose.translation();
        let t_true = Vector3::new(-0.02, 0.0, 0.0);
        let cos = t_est.dot(&t_true) / (t_est.norm() * t_true.norm());
        let angle_deg = cos.clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle_deg < 2.0, "translation direction off by {angle_deg} deg");

        // True camera depth of the fronto-parallel plane is exactly 1, so
        // aligned inducing depths must sit within 2% of 1.
        let shift = -out.y.mean();
        for i in 0..out.y.len() {
            let depth = (out.y[i] + shift).exp();
            assert!((depth - 1.0).abs() < 0.02, "inducing depth {depth}");
        }
    }
}
