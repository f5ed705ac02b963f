//! CSV tables: observations, poses, tracks, landmarks, selection output,
//! calibration curves, and cost traces. All writers emit headers and print
//! floats in shortest round-trip form, so outputs are byte-stable.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::synth::TrackObservation;

/// Sparse depth observation at a pixel coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelObservation {
    pub u: f64,
    pub v: f64,
    pub log_depth: f64,
}

/// One greedy-selection step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SelectionRow {
    pub step: usize,
    pub u: f64,
    pub v: f64,
    pub variance_before: f64,
}

/// One calibration-curve point.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub p_expected: f64,
    pub p_observed: f64,
    pub block_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct PoseRow {
    frame: usize,
    tx: f64,
    ty: f64,
    tz: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    qw: f64,
}

#[derive(Serialize, Deserialize)]
struct TrackRow {
    frame: usize,
    landmark_id: usize,
    u: f64,
    v: f64,
}

#[derive(Serialize, Deserialize)]
struct LandmarkRow {
    landmark_id: usize,
    x: f64,
    y: f64,
    z: f64,
}

#[derive(Serialize, Deserialize)]
struct TraceRow {
    iter: usize,
    cost: f64,
}

#[derive(Serialize, Deserialize)]
struct LevelTraceRow {
    level: usize,
    iter: usize,
    cost: f64,
}

fn csv_err(path: &Path, err: csv::Error) -> Error {
    let offset = err.position().map_or(0, csv::Position::byte);
    Error::format(path, err.to_string(), offset)
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => {
            Error::io(path, std::io::Error::other(e.to_string()))
        }
        _ => csv_err(path, e),
    })?;
    reader
        .deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    for row in rows {
        writer.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))
}

pub fn read_observations(path: &Path) -> Result<Vec<PixelObservation>> {
    let rows: Vec<PixelObservation> = read_rows(path)?;
    for (i, r) in rows.iter().enumerate() {
        if !(r.u.is_finite() && r.v.is_finite() && r.log_depth.is_finite()) {
            return Err(Error::format(path, format!("non-finite observation in row {i}"), 0));
        }
    }
    Ok(rows)
}

pub fn write_observations(path: &Path, rows: &[PixelObservation]) -> Result<()> {
    write_rows(path, rows.iter().copied())
}

pub fn read_poses(path: &Path) -> Result<Vec<(usize, Pose)>> {
    read_rows::<PoseRow>(path)?
        .into_iter()
        .map(|r| {
            let pose = Pose::from_parts(Vector3::new(r.tx, r.ty, r.tz), r.qx, r.qy, r.qz, r.qw)
                .map_err(|e| Error::format(path, format!("frame {}: {e}", r.frame), 0))?;
            Ok((r.frame, pose))
        })
        .collect()
}

pub fn write_poses<'a>(
    path: &Path,
    poses: impl IntoIterator<Item = (usize, &'a Pose)>,
) -> Result<()> {
    write_rows(
        path,
        poses.into_iter().map(|(frame, pose)| {
            let t = pose.translation();
            let [qx, qy, qz, qw] = pose.quaternion_coeffs();
            PoseRow { frame, tx: t.x, ty: t.y, tz: t.z, qx, qy, qz, qw }
        }),
    )
}

pub fn read_tracks(path: &Path) -> Result<Vec<TrackObservation>> {
    read_rows::<TrackRow>(path).map(|rows| {
        rows.into_iter()
            .map(|r| TrackObservation {
                frame: r.frame,
                landmark: r.landmark_id,
                pixel: Vector2::new(r.u, r.v),
            })
            .collect()
    })
}

pub fn write_tracks(path: &Path, tracks: &[TrackObservation]) -> Result<()> {
    write_rows(
        path,
        tracks.iter().map(|t| TrackRow {
            frame: t.frame,
            landmark_id: t.landmark,
            u: t.pixel.x,
            v: t.pixel.y,
        }),
    )
}

pub fn read_landmarks(path: &Path) -> Result<Vec<(usize, Vector3<f64>)>> {
    read_rows::<LandmarkRow>(path).map(|rows| {
        rows.into_iter()
            .map(|r| (r.landmark_id, Vector3::new(r.x, r.y, r.z)))
            .collect()
    })
}

pub fn write_landmarks<'a>(
    path: &Path,
    landmarks: impl IntoIterator<Item = (usize, &'a Vector3<f64>)>,
) -> Result<()> {
    write_rows(
        path,
        landmarks
            .into_iter()
            .map(|(id, p)| LandmarkRow { landmark_id: id, x: p.x, y: p.y, z: p.z }),
    )
}

pub fn write_selection(path: &Path, rows: &[SelectionRow]) -> Result<()> {
    write_rows(path, rows.iter().copied())
}

pub fn write_calibration(path: &Path, rows: &[CalibrationRow]) -> Result<()> {
    write_rows(path, rows.iter().copied())
}

pub fn write_trace(path: &Path, costs: &[f64]) -> Result<()> {
    write_rows(
        path,
        costs.iter().enumerate().map(|(iter, &cost)| TraceRow { iter, cost }),
    )
}

/// Cost trace with one group per coarse-to-fine level, coarsest first.
pub fn write_level_traces(path: &Path, traces: &[Vec<f64>]) -> Result<()> {
    write_rows(
        path,
        traces.iter().enumerate().flat_map(|(level, costs)| {
            costs.iter().enumerate().map(move |(iter, &cost)| LevelTraceRow { level, iter, cost })
        }),
    )
}
