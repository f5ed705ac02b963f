//! Nonstationary Matern covariance between normalized image coordinates.
//!
//! Every pixel carries a 2D kernel matrix decoded from three raw parameters;
//! the covariance between two points blends both endpoint matrices. The
//! prefactor uses |Si + Sj| exactly as stated, so the variance at any single
//! point is sigma_f^2 / 2 in 2D (the constant folds into sigma_f^2). Raw
//! parameters are interpolated before decoding, which keeps the decoded
//! matrix positive definite everywhere on the image plane.
//!
//! Coordinate convention, fixed bit-exactly across the crate: a pixel center
//! (px, py) in a width x height raster maps to normalized coordinates
//! u = 2*(px + 0.5)/width - 1, v = 2*(py + 0.5)/height - 1.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image-plane location with both components in [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedCoord {
    u: f64,
    v: f64,
}

impl NormalizedCoord {
    /// Validates both components as finite and within [-1, 1].
    pub fn new(u: f64, v: f64) -> Result<Self> {
        if !(u.is_finite() && v.is_finite() && (-1.0..=1.0).contains(&u) && (-1.0..=1.0).contains(&v)) {
            return Err(Error::InvalidParameter {
                parameter: "coord",
                reason: format!("({u}, {v}) is not inside [-1,1]^2"),
            });
        }
        Ok(Self { u, v })
    }

    /// Clamps arbitrary finite components into [-1, 1].
    pub fn clamped(u: f64, v: f64) -> Result<Self> {
        if !(u.is_finite() && v.is_finite()) {
            return Err(Error::InvalidParameter {
                parameter: "coord",
                reason: format!("({u}, {v}) is not finite"),
            });
        }
        Ok(Self { u: u.clamp(-1.0, 1.0), v: v.clamp(-1.0, 1.0) })
    }

    /// Normalized coordinates of pixel center (px, py) in a raster of the
    /// given dimensions. Pixel centers sit at integer coordinates.
    pub fn from_pixel(px: f64, py: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(2.0 * (px + 0.5) / width as f64 - 1.0, 2.0 * (py + 0.5) / height as f64 - 1.0)
    }

    /// Inverse of [`NormalizedCoord::from_pixel`].
    pub fn to_pixel(self, width: usize, height: usize) -> (f64, f64) {
        ((self.u + 1.0) * 0.5 * width as f64 - 0.5, (self.v + 1.0) * 0.5 * height as f64 - 0.5)
    }

    pub fn u(self) -> f64 {
        self.u
    }

    pub fn v(self) -> f64 {
        self.v
    }
}

/// Strictly positive definite symmetric 2x2 matrix [[a, c], [c, b]].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelMatrix2 {
    a: f64,
    b: f64,
    c: f64,
}

impl KernelMatrix2 {
    /// Validates strict positive definiteness.
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        let det = a * b - c * c;
        if !(a.is_finite() && b.is_finite() && c.is_finite() && a > 0.0 && b > 0.0 && det > 0.0) {
            return Err(Error::InvalidParameter {
                parameter: "kernel_matrix",
                reason: format!("[[{a}, {c}], [{c}, {b}]] is not strictly positive definite"),
            });
        }
        Ok(Self { a, b, c })
    }

    pub fn a(self) -> f64 {
        self.a
    }

    pub fn b(self) -> f64 {
        self.b
    }

    pub fn c(self) -> f64 {
        self.c
    }

    pub fn det(self) -> f64 {
        self.a * self.b - self.c * self.c
    }

    /// Inverse as (a, b, c) of [[a, c], [c, b]].
    fn inv(self) -> (f64, f64, f64) {
        let d = self.det();
        (self.b / d, self.a / d, -self.c / d)
    }
}

/// Maps three unconstrained raw parameters to a strictly PD kernel matrix:
/// a = e^{c1}, b = e^{c2}, c = tanh(c3) * sqrt(a * b).
pub fn decode_kernel_matrix(raw: [f64; 3]) -> Result<KernelMatrix2> {
    if raw.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidParameter {
            parameter: "raw",
            reason: format!("raw parameters {raw:?} must be finite"),
        });
    }
    let a = raw[0].exp();
    let b = raw[1].exp();
    let c = raw[2].tanh() * (a * b).sqrt();
    KernelMatrix2::new(a, b, c)
}

/// Matern smoothness restricted to the closed-form values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MaternNu {
    #[serde(rename = "0.5")]
    Half,
    #[serde(rename = "1.5")]
    ThreeHalves,
    #[default]
    #[serde(rename = "2.5")]
    FiveHalves,
}

impl MaternNu {
    /// Parses "0.5" / "1.5" / "2.5".
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "0.5" => Ok(MaternNu::Half),
            "1.5" => Ok(MaternNu::ThreeHalves),
            "2.5" => Ok(MaternNu::FiveHalves),
            other => Err(Error::Config(format!(
                "unsupported matern smoothness {other:?}; expected one of 0.5, 1.5, 2.5"
            ))),
        }
    }
}

/// Matern correlation at scaled distance r >= 0; 1 at r = 0, strictly
/// decreasing in r.
pub fn matern(r: f64, nu: MaternNu) -> f64 {
    debug_assert!(r >= 0.0, "matern distance must be nonnegative, got {r}");
    match nu {
        MaternNu::Half => (-r).exp(),
        MaternNu::ThreeHalves => {
            let s = 3.0_f64.sqrt() * r;
            (1.0 + s) * (-s).exp()
        }
        MaternNu::FiveHalves => {
            let s = 5.0_f64.sqrt() * r;
            (1.0 + s + s * s / 3.0) * (-s).exp()
        }
    }
}

/// d R(sqrt(q)) / d q evaluated at r = sqrt(q). The nu = 1/2 form is singular
/// at r = 0; the distance is floored at 1e-12, which is exact for coincident
/// points because the quadratic form is identically zero there.
fn matern_dq(r: f64, nu: MaternNu) -> f64 {
    match nu {
        MaternNu::Half => -(-r).exp() / (2.0 * r.max(1e-12)),
        MaternNu::ThreeHalves => -1.5 * (-(3.0_f64.sqrt()) * r).exp(),
        MaternNu::FiveHalves => {
            let s = 5.0_f64.sqrt() * r;
            -(5.0 / 6.0) * (1.0 + s) * (-s).exp()
        }
    }
}

/// Signal variance, noise variance, and Matern smoothness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpHyperparams {
    sigma_f_sq: f64,
    sigma_n_sq: f64,
    nu: MaternNu,
}

impl GpHyperparams {
    /// Validates strict positivity of both variances.
    pub fn new(sigma_f_sq: f64, sigma_n_sq: f64, nu: MaternNu) -> Result<Self> {
        if !(sigma_f_sq.is_finite() && sigma_f_sq > 0.0) {
            return Err(Error::InvalidParameter {
                parameter: "sigma_f_sq",
                reason: format!("signal variance must be positive and finite, got {sigma_f_sq}"),
            });
        }
        if !(sigma_n_sq.is_finite() && sigma_n_sq > 0.0) {
            return Err(Error::InvalidParameter {
                parameter: "sigma_n_sq",
                reason: format!("noise variance must be positive and finite, got {sigma_n_sq}"),
            });
        }
        Ok(Self { sigma_f_sq, sigma_n_sq, nu })
    }

    pub fn sigma_f_sq(&self) -> f64 {
        self.sigma_f_sq
    }

    pub fn sigma_n_sq(&self) -> f64 {
        self.sigma_n_sq
    }

    pub fn nu(&self) -> MaternNu {
        self.nu
    }

    /// Prior variance of the latent function at any single point.
    pub fn prior_var(&self) -> f64 {
        self.sigma_f_sq / 2.0
    }
}

impl Default for GpHyperparams {
    fn default() -> Self {
        Self { sigma_f_sq: 1.0, sigma_n_sq: 1e-2, nu: MaternNu::FiveHalves }
    }
}

/// Covariance between two points with their decoded kernel matrices:
/// sigma_f^2 * |Si|^{1/4} |Sj|^{1/4} / |Si+Sj|^{1/2} * R(sqrt(q)) with
/// q = d^T (Si+Sj)^{-1} d and d = xi - xj.
pub fn nonstationary_cov(
    xi: NormalizedCoord,
    si: &KernelMatrix2,
    xj: NormalizedCoord,
    sj: &KernelMatrix2,
    hyper: &GpHyperparams,
) -> f64 {
    let sa = si.a + sj.a;
    let sb = si.b + sj.b;
    let sc = si.c + sj.c;
    let det_s = sa * sb - sc * sc;
    let du = xi.u - xj.u;
    let dv = xi.v - xj.v;
    // Quadratic form of a PD matrix; floored at zero against roundoff.
    let q = ((sb * du * du - 2.0 * sc * du * dv + sa * dv * dv) / det_s).max(0.0);
    let pref = si.det().sqrt().sqrt() * sj.det().sqrt().sqrt() / det_s.sqrt();
    hyper.sigma_f_sq * pref * matern(q.sqrt(), hyper.nu)
}

/// Derivatives of the covariance with respect to the raw field parameters at
/// both endpoints (full-matrix derivative convention, chained through the
/// decode map).
pub(crate) struct CovGrad {
    pub d_raw_i: [f64; 3],
    pub d_raw_j: [f64; 3],
}

/// Derivative of the decoded matrix with respect to one raw parameter,
/// returned as the symmetric triple (d a, d b, d c).
fn decode_jacobian(raw: [f64; 3]) -> [(f64, f64, f64); 3] {
    let e1 = raw[0].exp();
    let e2 = raw[1].exp();
    let g = (e1 * e2).sqrt();
    let t = raw[2].tanh();
    [
        (e1, 0.0, 0.5 * t * g),
        (0.0, e2, 0.5 * t * g),
        (0.0, 0.0, (1.0 - t * t) * g),
    ]
}

/// Full-matrix inner product of two symmetric 2x2 matrices given as
/// (a, b, c) triples of [[a, c], [c, b]].
fn sym_dot(m: (f64, f64, f64), n: (f64, f64, f64)) -> f64 {
    m.0 * n.0 + m.1 * n.1 + 2.0 * m.2 * n.2
}

pub(crate) fn nonstationary_cov_grad(
    xi: NormalizedCoord,
    raw_i: [f64; 3],
    xj: NormalizedCoord,
    raw_j: [f64; 3],
    hyper: &GpHyperparams,
) -> CovGrad {
    let si = decode_kernel_matrix(raw_i).expect("finite raws decode to PD");
    let sj = decode_kernel_matrix(raw_j).expect("finite raws decode to PD");
    let sa = si.a + sj.a;
    let sb = si.b + sj.b;
    let sc = si.c + sj.c;
    let det_s = sa * sb - sc * sc;
    let inv_s = (sb / det_s, sa / det_s, -sc / det_s);
    let du = xi.u - xj.u;
    let dv = xi.v - xj.v;
    let q = ((sb * du * du - 2.0 * sc * du * dv + sa * dv * dv) / det_s).max(0.0);
    let r = q.sqrt();
    let pref = si.det().sqrt().sqrt() * sj.det().sqrt().sqrt() / det_s.sqrt();
    let k = hyper.sigma_f_sq * pref * matern(r, hyper.nu);

    // w = (Si+Sj)^{-1} d; the q-derivative contributes -w w^T.
    let wu = inv_s.0 * du + inv_s.2 * dv;
    let wv = inv_s.2 * du + inv_s.1 * dv;
    let wwt = (wu * wu, wv * wv, wu * wv);
    let dq_scale = hyper.sigma_f_sq * pref * matern_dq(r, hyper.nu);

    let grad_sigma = |inv_own: (f64, f64, f64)| {
        (
            k * (0.25 * inv_own.0 - 0.5 * inv_s.0) - dq_scale * wwt.0,
            k * (0.25 * inv_own.1 - 0.5 * inv_s.1) - dq_scale * wwt.1,
            k * (0.25 * inv_own.2 - 0.5 * inv_s.2) - dq_scale * wwt.2,
        )
    };
    let m_i = grad_sigma(si.inv());
    let m_j = grad_sigma(sj.inv());

    let chain = |m: (f64, f64, f64), raw: [f64; 3]| {
        let jac = decode_jacobian(raw);
        [sym_dot(m, jac[0]), sym_dot(m, jac[1]), sym_dot(m, jac[2])]
    };
    CovGrad { d_raw_i: chain(m_i, raw_i), d_raw_j: chain(m_j, raw_j) }
}

/// Raster of raw kernel parameters, row-major with row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelField {
    width: usize,
    height: usize,
    raws: Vec<[f64; 3]>,
}

impl KernelField {
    /// Validates dimensions and finiteness; finite raws always decode to PD.
    pub fn new(width: usize, height: usize, raws: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter {
                parameter: "dimensions",
                reason: format!("{width}x{height} field has no pixels"),
            });
        }
        if raws.len() != width * height {
            return Err(Error::InvalidParameter {
                parameter: "raws",
                reason: format!("expected {} raw triples, got {}", width * height, raws.len()),
            });
        }
        if let Some(bad) = raws.iter().position(|r| r.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidParameter {
                parameter: "raws",
                reason: format!("non-finite raw triple {:?} at raster index {bad}", raws[bad]),
            });
        }
        Ok(Self { width, height, raws })
    }

    /// Field holding the same raw triple at every pixel.
    pub fn constant(width: usize, height: usize, raw: [f64; 3]) -> Result<Self> {
        Self::new(width, height, vec![raw; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raws(&self) -> &[[f64; 3]] {
        &self.raws
    }

    pub fn raw_at(&self, px: usize, py: usize) -> [f64; 3] {
        self.raws[py * self.width + px]
    }

    /// Raster indices and bilinear weights of the four interpolation nodes
    /// for a normalized coordinate. Nodes are clamped at the raster border,
    /// giving constant extrapolation over the outer half-pixel band.
    pub(crate) fn interp_nodes(&self, x: NormalizedCoord) -> [(usize, f64); 4] {
        let (px, py) = x.to_pixel(self.width, self.height);
        let x0 = px.floor();
        let y0 = py.floor();
        let fx = px - x0;
        let fy = py - y0;
        let cx = |ix: f64| (ix.max(0.0) as usize).min(self.width - 1);
        let cy = |iy: f64| (iy.max(0.0) as usize).min(self.height - 1);
        let (x0c, x1c) = (cx(x0), cx(x0 + 1.0));
        let (y0c, y1c) = (cy(y0), cy(y0 + 1.0));
        [
            (y0c * self.width + x0c, (1.0 - fx) * (1.0 - fy)),
            (y0c * self.width + x1c, fx * (1.0 - fy)),
            (y1c * self.width + x0c, (1.0 - fx) * fy),
            (y1c * self.width + x1c, fx * fy),
        ]
    }

    /// Bilinear interpolation of the raw channels at a normalized coordinate.
    /// Range validity is guaranteed by [`NormalizedCoord`], so sampling is
    /// total; out-of-range inputs are rejected when the coordinate is built.
    pub fn sample(&self, x: NormalizedCoord) -> [f64; 3] {
        let nodes = self.interp_nodes(x);
        let mut out = [0.0; 3];
        for (idx, w) in nodes {
            let raw = self.raws[idx];
            for ch in 0..3 {
                out[ch] += w * raw[ch];
            }
        }
        out
    }

    /// Interpolated raw parameters decoded to a kernel matrix.
    pub fn decode_at(&self, x: NormalizedCoord) -> KernelMatrix2 {
        decode_kernel_matrix(self.sample(x)).expect("finite raws decode to PD")
    }
}

/// Interpolated raws and decoded matrices for a batch of coordinates,
/// computed once so pairwise covariance loops avoid repeated sampling.
pub(crate) struct DecodedPoints {
    pub coords: Vec<NormalizedCoord>,
    pub raws: Vec<[f64; 3]>,
    pub mats: Vec<KernelMatrix2>,
    /// Interpolation nodes per point, for scattering gradients to the raster.
    pub nodes: Vec<[(usize, f64); 4]>,
}

pub(crate) fn decode_points(coords: &[NormalizedCoord], field: &KernelField) -> DecodedPoints {
    let nodes: Vec<_> = coords.iter().map(|&x| field.interp_nodes(x)).collect();
    let raws: Vec<_> = coords.iter().map(|&x| field.sample(x)).collect();
    let mats: Vec<_> =
        raws.iter().map(|&r| decode_kernel_matrix(r).expect("finite raws decode to PD")).collect();
    DecodedPoints { coords: coords.to_vec(), raws, mats, nodes }
}

/// Symmetric covariance matrix over one coordinate list. Entries are computed
/// independently (upper triangle, mirrored exactly), so the result does not
/// depend on the degree of parallelism.
pub fn build_cov_matrix(
    coords: &[NormalizedCoord],
    field: &KernelField,
    hyper: &GpHyperparams,
) -> Result<DMatrix<f64>> {
    if coords.is_empty() {
        return Err(Error::InvalidParameter {
            parameter: "coords",
            reason: "covariance matrix needs at least one coordinate".into(),
        });
    }
    let pts = decode_points(coords, field);
    let n = coords.len();
    let mut m = DMatrix::zeros(n, n);
    {
        let rows: Vec<&mut [f64]> = m.as_mut_slice().chunks_mut(n).collect();
        // Column-major storage: chunk j is column j; fill j's entries i <= j.
        rows.into_par_iter().enumerate().for_each(|(j, col)| {
            for (i, slot) in col.iter_mut().enumerate().take(j + 1) {
                *slot =
                    nonstationary_cov(pts.coords[i], &pts.mats[i], pts.coords[j], &pts.mats[j], hyper);
            }
        });
    }
    for j in 0..n {
        for i in (j + 1)..n {
            m[(i, j)] = m[(j, i)];
        }
    }
    Ok(m)
}

/// Rectangular cross-covariance with entry (i, j) = k(rows[i], cols[j]).
pub fn cross_cov_matrix(
    rows: &[NormalizedCoord],
    cols: &[NormalizedCoord],
    field: &KernelField,
    hyper: &GpHyperparams,
) -> DMatrix<f64> {
    let rp = decode_points(rows, field);
    let cp = decode_points(cols, field);
    let mut m = DMatrix::zeros(rows.len(), cols.len());
    {
        let nr = rows.len();
        let chunks: Vec<&mut [f64]> = m.as_mut_slice().chunks_mut(nr.max(1)).collect();
        chunks.into_par_iter().enumerate().for_each(|(j, col)| {
            for (i, slot) in col.iter_mut().enumerate() {
                *slot = nonstationary_cov(rp.coords[i], &rp.mats[i], cp.coords[j], &cp.mats[j], hyper);
            }
        });
    }
    m
}
