//! Small-baseline windowed bundle adjustment. Variables are camera-from-world
//! poses, world landmarks, and one log-depth scale per frame. Factors are
//! Huber-robust whitened reprojection errors, a per-frame GP prior on the
//! log-depths of the frame's landmarks, and gauge priors pinning the first
//! pose and first scale at their initial values. A dense log-depth map per
//! frame comes from conditioning the frame's GP on its optimized landmarks.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Matrix2x3, Vector2, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, se3_exp, skew, Intrinsics, Pose, MIN_PROJECT_DEPTH};
use crate::gp::{self, chol_with_jitter, CovRequest, LogDepthObservations, PosteriorCov};
use crate::kernel::{build_cov_matrix, GpHyperparams, KernelField, NormalizedCoord};
use crate::synth::TrackObservation;

const LAMBDA_GROW: f64 = 4.0;
const LAMBDA_SHRINK: f64 = 0.5;
const LAMBDA_MAX: f64 = 1e12;
const LAMBDA_MIN: f64 = 1e-12;
/// Gauge prior deviation per degree of freedom.
const GAUGE_SIGMA: f64 = 1e-6;

/// Huber cost of a whitened residual norm: quadratic up to `delta`, linear
/// beyond.
pub fn huber_cost(norm: f64, delta: f64) -> f64 {
    let a = norm.abs();
    if a <= delta { 0.5 * a * a } else { delta * a - 0.5 * delta * delta }
}

/// Iteratively-reweighted least-squares weight: 1 inside the quadratic
/// region, `delta / norm` beyond.
pub fn huber_weight(norm: f64, delta: f64) -> f64 {
    let a = norm.abs();
    if a <= delta { 1.0 } else { delta / a }
}

/// One pixel observation of a landmark, whitened by its own noise scale.
#[derive(Clone, Copy, Debug)]
pub struct Measurement {
    pub frame: usize,
    pub landmark: usize,
    pub pixel: Vector2<f64>,
    pub sigma: f64,
}

/// Per-frame GP inputs: the kernel field over the image and its
/// hyperparameters.
#[derive(Clone, Debug)]
pub struct FramePrior {
    pub field: KernelField,
    pub hyper: GpHyperparams,
}

/// Track table reindexed to dense landmark slots: observations outside the
/// image and landmarks seen fewer than twice are dropped.
#[derive(Clone, Debug)]
pub struct PreparedTracks {
    /// External landmark id per dense slot, ascending.
    pub landmark_ids: Vec<usize>,
    /// Observations with the landmark field rewritten to its dense slot.
    pub measurements: Vec<Measurement>,
}

/// Filters raw track observations into [`PreparedTracks`].
pub fn prepare_tracks(
    k: &Intrinsics,
    tracks: &[TrackObservation],
    n_frames: usize,
    sigma_r: f64,
) -> Result<PreparedTracks> {
    if !(sigma_r.is_finite() && sigma_r > 0.0) {
        return Err(Error::InvalidParameter {
            parameter: "sigma_r",
            reason: format!("{sigma_r} must be positive"),
        });
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut kept = Vec::new();
    let mut out_of_frame = 0usize;
    for t in tracks {
        if t.frame >= n_frames {
            return Err(Error::Domain(format!(
                "track frame {} outside a window of {n_frames} frames",
                t.frame
            )));
        }
        if !(t.pixel.x.is_finite() && t.pixel.y.is_finite()) {
            return Err(Error::Domain(format!("non-finite pixel for landmark {}", t.landmark)));
        }
        if !k.in_image(&t.pixel) {
            out_of_frame += 1;
            continue;
        }
        *counts.entry(t.landmark).or_insert(0) += 1;
        kept.push(t);
    }
    if out_of_frame > 0 {
        warn!("dropped {out_of_frame} out-of-frame track observations");
    }
    let landmark_ids: Vec<usize> =
        counts.iter().filter(|&(_, &c)| c >= 2).map(|(&id, _)| id).collect();
    let under_observed = counts.len() - landmark_ids.len();
    if under_observed > 0 {
        warn!("dropped {under_observed} landmarks observed fewer than twice");
    }
    if landmark_ids.is_empty() {
        return Err(Error::Degenerate("no landmark is observed at least twice".into()));
    }
    let slot: HashMap<usize, usize> =
        landmark_ids.iter().enumerate().map(|(s, &id)| (id, s)).collect();
    let measurements = kept
        .into_iter()
        .filter_map(|t| {
            slot.get(&t.landmark).map(|&s| Measurement {
                frame: t.frame,
                landmark: s,
                pixel: t.pixel,
                sigma: sigma_r,
            })
        })
        .collect();
    Ok(PreparedTracks { landmark_ids, measurements })
}

/// Midpoint triangulation of each landmark from its first and last
/// observations (the widest available pair under sequential frame order).
/// Ray ranges are clamped positive so initial points sit in front of their
/// cameras; near-parallel ray pairs fall back to unit range.
pub fn triangulate_midpoint(
    k: &Intrinsics,
    poses: &[Pose],
    measurements: &[Measurement],
    n_landmarks: usize,
) -> Result<Vec<Vector3<f64>>> {
    let mut spans: Vec<(Option<&Measurement>, Option<&Measurement>)> =
        vec![(None, None); n_landmarks];
    for m in measurements {
        if m.frame >= poses.len() || m.landmark >= n_landmarks {
            return Err(Error::InvalidParameter {
                parameter: "measurements",
                reason: format!("indices ({}, {}) out of range", m.frame, m.landmark),
            });
        }
        let span = &mut spans[m.landmark];
        if span.0.is_none_or(|first| m.frame < first.frame) {
            span.0 = Some(m);
        }
        if span.1.is_none_or(|last| m.frame > last.frame) {
            span.1 = Some(m);
        }
    }
    spans
        .iter()
        .enumerate()
        .map(|(l, span)| {
            let (Some(a), Some(b)) = span else {
                return Err(Error::Degenerate(format!("landmark {l} lacks two observations")));
            };
            if a.frame == b.frame {
                return Err(Error::Degenerate(format!(
                    "landmark {l} is only observed in frame {}",
                    a.frame
                )));
            }
            let (oa, da) = pixel_ray(k, &poses[a.frame], &a.pixel);
            let (ob, db) = pixel_ray(k, &poses[b.frame], &b.pixel);
            let r = ob - oa;
            let c = da.dot(&db);
            let denom = 1.0 - c * c;
            let (mut s, mut t) = if denom < 1e-12 {
                (1.0, 1.0)
            } else {
                ((da.dot(&r) - c * db.dot(&r)) / denom, (c * da.dot(&r) - db.dot(&r)) / denom)
            };
            s = s.clamp(1e-3, 1e3);
            t = t.clamp(1e-3, 1e3);
            Ok((oa + s * da + ob + t * db) / 2.0)
        })
        .collect()
}

/// World-space ray through a pixel: camera center and unit direction.
fn pixel_ray(k: &Intrinsics, pose: &Pose, pixel: &Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let inv = pose.inverse();
    let d = Vector3::new((pixel.x - k.cx) / k.fx, (pixel.y - k.cy) / k.fy, 1.0);
    (*inv.translation(), (inv.rotation_matrix() * d).normalize())
}

/// Settings for the windowed bundle adjustment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaConfig {
    pub max_iters: usize,
    /// Robust-cost transition point in whitened units.
    pub huber_delta: f64,
    pub lambda_init: f64,
    /// Stop once an accepted step's relative cost decrease falls below this.
    pub rel_tol: f64,
    /// Stop once the proposed step norm falls below this.
    pub step_tol: f64,
    /// Pixel noise scale applied to all track observations.
    pub sigma_r: f64,
    /// Include the per-frame GP log-depth prior factors.
    pub with_depth_prior: bool,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            huber_delta: 1.345,
            lambda_init: 1e-4,
            rel_tol: 1e-8,
            step_tol: 1e-10,
            sigma_r: 0.5,
            with_depth_prior: true,
        }
    }
}

impl BaConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iters >= 1
            && self.huber_delta > 0.0
            && self.lambda_init > 0.0
            && self.rel_tol > 0.0
            && self.step_tol > 0.0
            && self.sigma_r > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("bundle adjustment settings out of range: {self:?}")))
        }
    }
}

/// Levenberg-Marquardt run summary: robust cost after each accepted step
/// (entry 0 is the initial cost), accepted step count, final damping, and
/// whether a convergence test fired before the iteration budget ran out.
#[derive(Clone, Debug)]
pub struct LmState {
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub lambda: f64,
    pub converged: bool,
}

/// One frame's depth prior factor. Membership, projected coordinates, and
/// the whitening Cholesky factor are fixed at construction from the initial
/// geometry; only the depths and the scale vary during optimization.
#[derive(Clone, Debug)]
struct FrameFactor {
    /// Landmark slots with positive initial depth in this frame, ascending.
    members: Vec<usize>,
    /// Lower Cholesky factor of K + sigma_n^2 I at the initial projections.
    l: DMatrix<f64>,
}

/// Windowed structure-from-motion problem over camera-from-world poses,
/// world landmarks, and per-frame log-depth scales. Parameter layout for
/// steps: per-pose twists, then landmarks, then scales.
#[derive(Clone, Debug)]
pub struct BaProblem {
    k: Intrinsics,
    poses: Vec<Pose>,
    landmarks: Vec<Vector3<f64>>,
    scales: Vec<f64>,
    measurements: Vec<Measurement>,
    priors: Vec<FramePrior>,
    frame_factors: Vec<FrameFactor>,
    gauge_pose: Pose,
    gauge_scale: f64,
}

/// Residuals, robust cost, and optionally the Jacobian at one state.
/// Deactivated factor rows are exactly zero; the activity masks record which
/// measurements and frame factors contributed.
struct Evaluation {
    r: DVector<f64>,
    jac: Option<DMatrix<f64>>,
    cost: f64,
    active_meas: Vec<bool>,
    active_factors: Vec<bool>,
}

impl BaProblem {
    /// Builds the problem and anchors its gauge and depth-prior factors at
    /// the given initial geometry. Scales start at the mean initial log-depth
    /// of each frame's landmarks.
    pub fn new(
        k: Intrinsics,
        poses: Vec<Pose>,
        landmarks: Vec<Vector3<f64>>,
        measurements: Vec<Measurement>,
        priors: Vec<FramePrior>,
    ) -> Result<Self> {
        if poses.is_empty() || landmarks.is_empty() {
            return Err(Error::InvalidParameter {
                parameter: "problem",
                reason: "needs at least one pose and one landmark".into(),
            });
        }
        if priors.len() != poses.len() {
            return Err(Error::InvalidParameter {
                parameter: "priors",
                reason: format!("{} priors for {} frames", priors.len(), poses.len()),
            });
        }
        if let Some(p) = landmarks.iter().find(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidParameter {
                parameter: "landmarks",
                reason: format!("non-finite landmark {p:?}"),
            });
        }
        let mut observed = vec![0usize; landmarks.len()];
        for m in &measurements {
            if m.frame >= poses.len() || m.landmark >= landmarks.len() {
                return Err(Error::InvalidParameter {
                    parameter: "measurements",
                    reason: format!("indices ({}, {}) out of range", m.frame, m.landmark),
                });
            }
            if !k.in_image(&m.pixel) {
                return Err(Error::InvalidParameter {
                    parameter: "measurements",
                    reason: format!("pixel ({}, {}) outside the image", m.pixel.x, m.pixel.y),
                });
            }
            if !(m.sigma.is_finite() && m.sigma > 0.0) {
                return Err(Error::InvalidParameter {
                    parameter: "measurements",
                    reason: format!("noise scale {} must be positive", m.sigma),
                });
            }
            observed[m.landmark] += 1;
        }
        if let Some(l) = observed.iter().position(|&c| c < 2) {
            return Err(Error::InvalidParameter {
                parameter: "measurements",
                reason: format!("landmark {l} is observed {} times, need at least 2", observed[l]),
            });
        }

        let mut scales = Vec::with_capacity(poses.len());
        let mut frame_factors = Vec::with_capacity(poses.len());
        for (c, pose) in poses.iter().enumerate() {
            let mut members: Vec<usize> =
                measurements.iter().filter(|m| m.frame == c).map(|m| m.landmark).collect();
            members.sort_unstable();
            members.dedup();
            members.retain(|&l| pose.transform_point(&landmarks[l]).z > MIN_PROJECT_DEPTH);
            if members.is_empty() {
                warn!("frame {c} has no landmark in front of the camera; scale starts at 0");
                scales.push(0.0);
                frame_factors.push(FrameFactor { members, l: DMatrix::zeros(0, 0) });
                continue;
            }
            let mut coords = Vec::with_capacity(members.len());
            let mut mean_log = 0.0;
            for &l in &members {
                let q = pose.transform_point(&landmarks[l]);
                let pixel =
                    Vector2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy);
                coords.push(k.normalized(&pixel)?);
                mean_log += q.z.ln();
            }
            scales.push(mean_log / members.len() as f64);
            let mut cov = build_cov_matrix(&coords, &priors[c].field, &priors[c].hyper)?;
            for i in 0..cov.nrows() {
                cov[(i, i)] += priors[c].hyper.sigma_n_sq();
            }
            let (chol, _) = chol_with_jitter(&cov)?;
            frame_factors.push(FrameFactor { members, l: chol.l() });
        }
        let gauge_pose = poses[0];
        let gauge_scale = scales[0];
        Ok(Self {
            k,
            poses,
            landmarks,
            scales,
            measurements,
            priors,
            frame_factors,
            gauge_pose,
            gauge_scale,
        })
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.k
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn landmarks(&self) -> &[Vector3<f64>] {
        &self.landmarks
    }

    /// Per-frame log-depth scales m_c.
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn measurements(&self) -> &[Measurement] {
        &self.measurements
    }

    /// Mean unwhitened reprojection error in pixels over measurements whose
    /// landmark currently sits in front of the camera; infinite when none do.
    pub fn mean_reprojection_error(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for m in &self.measurements {
            let q = self.poses[m.frame].transform_point(&self.landmarks[m.landmark]);
            if q.z <= MIN_PROJECT_DEPTH {
                continue;
            }
            let pred =
                Vector2::new(self.k.fx * q.x / q.z + self.k.cx, self.k.fy * q.y / q.z + self.k.cy);
            total += (pred - m.pixel).norm();
            count += 1;
        }
        if count == 0 { f64::INFINITY } else { total / count as f64 }
    }

    /// Whitened residual stack at the current state: reprojection rows, then
    /// depth-prior rows, then gauge rows. Deactivated rows are exactly zero.
    pub fn residual_stack(&self) -> Result<DVector<f64>> {
        Ok(self.eval(true, f64::INFINITY, false)?.r)
    }

    /// Residual stack together with its Jacobian in the packed step layout
    /// (per-pose twists, then landmarks, then scales).
    pub fn linearize(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let eval = self.eval(true, f64::INFINITY, true)?;
        Ok((eval.r, eval.jac.expect("jacobian requested")))
    }

    /// Copy of the problem advanced by one packed step. Prior anchoring is
    /// untouched: factors keep the membership and whitening fixed at
    /// construction.
    pub fn stepped(&self, step: &DVector<f64>) -> Result<BaProblem> {
        let want = self.dim();
        if step.len() != want {
            return Err(Error::InvalidParameter {
                parameter: "step",
                reason: format!("step has {} entries, state has {want}", step.len()),
            });
        }
        let mut next = self.clone();
        next.apply(step);
        Ok(next)
    }

    fn dim(&self) -> usize {
        7 * self.poses.len() + 3 * self.landmarks.len()
    }

    fn lm_off(&self, l: usize) -> usize {
        6 * self.poses.len() + 3 * l
    }

    fn scale_off(&self, c: usize) -> usize {
        6 * self.poses.len() + 3 * self.landmarks.len() + c
    }

    fn rows(&self, with_prior: bool) -> usize {
        let depth_rows: usize = if with_prior {
            self.frame_factors.iter().map(|f| f.members.len()).sum()
        } else {
            0
        };
        2 * self.measurements.len() + depth_rows + 7
    }

    /// Applies a packed step: left-multiplicative twists on poses, additive
    /// updates on landmarks and scales.
    fn apply(&mut self, step: &DVector<f64>) {
        for (c, pose) in self.poses.iter_mut().enumerate() {
            let d: Vector6<f64> = step.fixed_rows::<6>(6 * c).into_owned();
            *pose = se3_exp(&d).compose(pose);
        }
        let base = 6 * self.poses.len();
        for (l, p) in self.landmarks.iter_mut().enumerate() {
            *p += step.fixed_rows::<3>(base + 3 * l).into_owned();
        }
        let base = base + 3 * self.landmarks.len();
        for (c, s) in self.scales.iter_mut().enumerate() {
            *s += step[base + c];
        }
    }

    /// Whitened residuals and robust cost; rows of behind-camera measurements
    /// and of frame factors with any nonpositive depth are zeroed for this
    /// evaluation. Reprojection factors are Huber-robust; depth-prior and
    /// gauge factors stay quadratic.
    fn eval(&self, with_prior: bool, delta: f64, with_jac: bool) -> Result<Evaluation> {
        let dim = self.dim();
        let rows = self.rows(with_prior);
        let mut r = DVector::zeros(rows);
        let mut jac = with_jac.then(|| DMatrix::zeros(rows, dim));
        let mut cost = 0.0;
        let mut active_factors = vec![false; if with_prior { self.frame_factors.len() } else { 0 }];

        type MeasOut = Option<(Vector2<f64>, Option<(Matrix2x3<f64>, Matrix2x3<f64>, Matrix2x3<f64>)>)>;
        let per_meas: Vec<MeasOut> = self
            .measurements
            .par_iter()
            .map(|m| {
                let q = self.poses[m.frame].transform_point(&self.landmarks[m.landmark]);
                if q.z <= MIN_PROJECT_DEPTH {
                    return None;
                }
                let pred = Vector2::new(
                    self.k.fx * q.x / q.z + self.k.cx,
                    self.k.fy * q.y / q.z + self.k.cy,
                );
                let res = (pred - m.pixel) / m.sigma;
                let blocks = with_jac.then(|| {
                    let dpi = Matrix2x3::new(
                        self.k.fx / q.z,
                        0.0,
                        -self.k.fx * q.x / (q.z * q.z),
                        0.0,
                        self.k.fy / q.z,
                        -self.k.fy * q.y / (q.z * q.z),
                    ) / m.sigma;
                    (dpi * (-skew(&q)), dpi, dpi * self.poses[m.frame].rotation_matrix())
                });
                Some((res, blocks))
            })
            .collect();
        for (i, out) in per_meas.iter().enumerate() {
            let Some((res, blocks)) = out else {
                continue;
            };
            r[2 * i] = res.x;
            r[2 * i + 1] = res.y;
            cost += huber_cost(res.norm(), delta);
            if let (Some(j), Some((j_rot, j_v, j_lm))) = (jac.as_mut(), blocks) {
                let m = &self.measurements[i];
                let po = 6 * m.frame;
                let lo = self.lm_off(m.landmark);
                for rr in 0..2 {
                    for cc in 0..3 {
                        j[(2 * i + rr, po + cc)] = j_rot[(rr, cc)];
                        j[(2 * i + rr, po + 3 + cc)] = j_v[(rr, cc)];
                        j[(2 * i + rr, lo + cc)] = j_lm[(rr, cc)];
                    }
                }
            }
        }

        if with_prior {
            let mut row0 = 2 * self.measurements.len();
            for (c, factor) in self.frame_factors.iter().enumerate() {
                let n_c = factor.members.len();
                if n_c == 0 {
                    continue;
                }
                let points: Vec<Vector3<f64>> = factor
                    .members
                    .iter()
                    .map(|&l| self.poses[c].transform_point(&self.landmarks[l]))
                    .collect();
                if points.iter().any(|q| q.z <= MIN_PROJECT_DEPTH) {
                    warn!("frame {c} depth prior deactivated: a landmark depth is nonpositive");
                    row0 += n_c;
                    continue;
                }
                active_factors[c] = true;
                let r_raw =
                    DVector::from_iterator(n_c, points.iter().map(|q| q.z.ln() - self.scales[c]));
                let Some(rw) = factor.l.solve_lower_triangular(&r_raw) else {
                    return Err(Error::Numerical(format!("frame {c} prior whitening is singular")));
                };
                cost += 0.5 * rw.norm_squared();
                r.rows_mut(row0, n_c).copy_from(&rw);
                if let Some(j) = jac.as_mut() {
                    let rot = self.poses[c].rotation_matrix();
                    let mut j_raw = DMatrix::zeros(n_c, dim);
                    for (i, (&l, q)) in factor.members.iter().zip(&points).enumerate() {
                        let po = 6 * c;
                        let lo = self.lm_off(l);
                        j_raw[(i, po)] = q.y / q.z;
                        j_raw[(i, po + 1)] = -q.x / q.z;
                        j_raw[(i, po + 5)] = 1.0 / q.z;
                        for cc in 0..3 {
                            j_raw[(i, lo + cc)] = rot[(2, cc)] / q.z;
                        }
                        j_raw[(i, self.scale_off(c))] = -1.0;
                    }
                    let Some(jw) = factor.l.solve_lower_triangular(&j_raw) else {
                        return Err(Error::Numerical(format!(
                            "frame {c} prior whitening is singular"
                        )));
                    };
                    j.rows_mut(row0, n_c).copy_from(&jw);
                }
                row0 += n_c;
            }
        }

        let g0 = rows - 7;
        let rel = self.poses[0].compose(&self.gauge_pose.inverse());
        let xi = geometry::se3_log(&rel);
        let r_pose = xi / GAUGE_SIGMA;
        cost += 0.5 * r_pose.norm_squared();
        for i in 0..6 {
            r[g0 + i] = r_pose[i];
        }
        let r_scale = (self.scales[0] - self.gauge_scale) / GAUGE_SIGMA;
        r[g0 + 6] = r_scale;
        cost += 0.5 * r_scale * r_scale;
        if let Some(j) = jac.as_mut() {
            let jl = geometry::se3_left_jacobian_inv(&xi) / GAUGE_SIGMA;
            for rr in 0..6 {
                for cc in 0..6 {
                    j[(g0 + rr, cc)] = jl[(rr, cc)];
                }
            }
            j[(g0 + 6, self.scale_off(0))] = 1.0 / GAUGE_SIGMA;
        }
        let active_meas = per_meas.iter().map(|out| out.is_some()).collect();
        Ok(Evaluation { r, jac, cost, active_meas, active_factors })
    }

    /// Rows scaled by the square root of their Huber weights, making
    /// J'J and J'r the robust normal equations.
    fn weighted(&self, eval: &Evaluation, delta: f64) -> (DMatrix<f64>, DVector<f64>) {
        let mut jw = eval.jac.clone().expect("weighted() needs a Jacobian");
        let mut rw = eval.r.clone();
        for i in 0..self.measurements.len() {
            let norm = rw[2 * i].hypot(rw[2 * i + 1]);
            let w = huber_weight(norm, delta).sqrt();
            if w < 1.0 {
                rw[2 * i] *= w;
                rw[2 * i + 1] *= w;
                for d in 0..jw.ncols() {
                    jw[(2 * i, d)] *= w;
                    jw[(2 * i + 1, d)] *= w;
                }
            }
        }
        (jw, rw)
    }
}

/// True when the candidate state lost a measurement or frame factor that was
/// active at the reference state. Such steps are rejected outright: zeroed
/// rows remove cost, so comparing the two totals would reward pushing points
/// behind the camera. Factors inactive at the reference may reactivate, which
/// only adds candidate cost and so stays conservative.
fn deactivates(reference: &Evaluation, candidate: &Evaluation) -> bool {
    let lost =
        |a: &[bool], b: &[bool]| a.iter().zip(b).any(|(&was, &is)| was && !is);
    lost(&reference.active_meas, &candidate.active_meas)
        || lost(&reference.active_factors, &candidate.active_factors)
}

/// Levenberg-Marquardt with additive damping. A step is accepted only if the
/// robust cost strictly decreases and no active factor drops out; damping
/// shrinks on accept and grows on reject or factorization failure until it
/// exceeds its cap.
pub fn lm_optimize(problem: &mut BaProblem, cfg: &BaConfig) -> Result<LmState> {
    cfg.validate()?;
    let mut lambda = cfg.lambda_init;
    let mut cost = problem.eval(cfg.with_depth_prior, cfg.huber_delta, false)?.cost;
    let mut trace = vec![cost];
    let mut iterations = 0usize;
    let mut converged = false;

    for _ in 0..cfg.max_iters {
        let eval = problem.eval(cfg.with_depth_prior, cfg.huber_delta, true)?;
        let (jw, rw) = problem.weighted(&eval, cfg.huber_delta);
        let h = jw.transpose() * &jw;
        let g = jw.transpose() * &rw;

        let mut accepted = false;
        while lambda <= LAMBDA_MAX {
            let mut damped = h.clone();
            for d in 0..damped.nrows() {
                damped[(d, d)] += lambda;
            }
            let Some(chol) = Cholesky::new(damped) else {
                lambda *= LAMBDA_GROW;
                continue;
            };
            let step = -chol.solve(&g);
            if step.norm() < cfg.step_tol {
                converged = true;
                break;
            }
            let mut candidate = problem.clone();
            candidate.apply(&step);
            let cand = candidate.eval(cfg.with_depth_prior, cfg.huber_delta, false)?;
            let cand_cost = cand.cost;
            if cand_cost < cost && !deactivates(&eval, &cand) {
                *problem = candidate;
                iterations += 1;
                let rel = (cost - cand_cost) / cost.max(f64::MIN_POSITIVE);
                cost = cand_cost;
                trace.push(cost);
                lambda = (lambda * LAMBDA_SHRINK).max(LAMBDA_MIN);
                accepted = true;
                if rel < cfg.rel_tol {
                    converged = true;
                }
                break;
            }
            lambda *= LAMBDA_GROW;
        }
        if converged || !accepted {
            break;
        }
    }
    Ok(LmState { cost_trace: trace, iterations, lambda, converged })
}

/// Dense per-frame log-depth posterior.
#[derive(Clone, Debug)]
pub struct DenseDepth {
    pub width: usize,
    pub height: usize,
    /// Row-major posterior mean of log-depth.
    pub mean: Vec<f64>,
    /// Row-major posterior variance.
    pub variance: Vec<f64>,
}

/// Conditions the frame's GP on its landmarks' current log-depths at their
/// current projected coordinates and evaluates mean and variance on a
/// `width` x `height` pixel grid.
pub fn densify(problem: &BaProblem, frame: usize, width: usize, height: usize) -> Result<DenseDepth> {
    if frame >= problem.poses.len() {
        return Err(Error::InvalidParameter {
            parameter: "frame",
            reason: format!("frame {frame} outside a window of {}", problem.poses.len()),
        });
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidParameter {
            parameter: "raster",
            reason: format!("bad dimensions {width}x{height}"),
        });
    }
    let pose = &problem.poses[frame];
    let mut seen: Vec<usize> = problem
        .measurements
        .iter()
        .filter(|m| m.frame == frame)
        .map(|m| m.landmark)
        .collect();
    seen.sort_unstable();
    seen.dedup();
    let mut coords = Vec::new();
    let mut y = Vec::new();
    for &l in &seen {
        let q = pose.transform_point(&problem.landmarks[l]);
        if q.z <= MIN_PROJECT_DEPTH {
            continue;
        }
        let pixel = Vector2::new(
            problem.k.fx * q.x / q.z + problem.k.cx,
            problem.k.fy * q.y / q.z + problem.k.cy,
        );
        coords.push(problem.k.normalized(&pixel)?);
        y.push(q.z.ln());
    }
    if coords.is_empty() {
        return Err(Error::Degenerate(format!("frame {frame} has no landmark to condition on")));
    }
    let obs = LogDepthObservations::new(coords, DVector::from_vec(y))?;
    let mut query = Vec::with_capacity(width * height);
    for py in 0..height {
        for px in 0..width {
            query.push(NormalizedCoord::from_pixel(px as f64, py as f64, width, height)?);
        }
    }
    let posterior = gp::condition(
        &obs,
        problem.scales[frame],
        &query,
        &problem.priors[frame].field,
        &problem.priors[frame].hyper,
        CovRequest::Diag,
    )?;
    let PosteriorCov::Diag(variance) = posterior.cov else {
        return Err(Error::Numerical("conditioning returned an unexpected covariance".into()));
    };
    Ok(DenseDepth {
        width,
        height,
        mean: posterior.mean.iter().copied().collect(),
        variance: variance.iter().copied().collect(),
    })
}
