//! Joint distance error against marker ground truth.
//!
//! Each marker is rigidly attached to one segment at a constant local offset.
//! The offset is calibrated as the mean marker position expressed in the
//! segment's local frame over a pose sequence, after which the predicted
//! marker under any pose is that segment transform applied to the offset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{GsogError, Result};
use crate::kinematics::{forward_kinematics, Pose, RigidTransform, Skeleton};

const METERS_TO_CM: f64 = 100.0;

/// Ground-truth positions (meters) of one marker, one per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerTrack {
    pub marker_id: String,
    pub segment: usize,
    pub positions: Vec<Vector3<f64>>,
}

/// Errors in centimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub marker_ids: Vec<String>,
    pub per_marker_mean: Vec<f64>,
    pub per_frame_mean: Vec<f64>,
    pub overall_mean: f64,
}

fn check_inputs(markers: &[MarkerTrack], poses: &[Pose], skeleton: &Skeleton) -> Result<()> {
    if markers.is_empty() {
        return Err(GsogError::InvalidArgument("no markers".into()));
    }
    for m in markers {
        if m.segment >= skeleton.len() {
            return Err(GsogError::InvalidArgument(format!(
                "marker {} assigned to joint {} but skeleton has {} joints",
                m.marker_id,
                m.segment,
                skeleton.len()
            )));
        }
        if m.positions.len() != poses.len() {
            return Err(GsogError::LengthMismatch(format!(
                "marker {} has {} frames, pose sequence has {}",
                m.marker_id,
                m.positions.len(),
                poses.len()
            )));
        }
    }
    if poses.is_empty() {
        return Err(GsogError::InvalidArgument("empty pose sequence".into()));
    }
    Ok(())
}

fn transforms(poses: &[Pose], skeleton: &Skeleton) -> Result<Vec<Vec<RigidTransform>>> {
    poses.iter().map(|p| forward_kinematics(skeleton, p)).collect()
}

/// Mean local-frame position of each marker on its segment.
pub fn calibrate_offsets(markers: &[MarkerTrack], poses: &[Pose], skeleton: &Skeleton) -> Result<Vec<Vector3<f64>>> {
    check_inputs(markers, poses, skeleton)?;
    let tf = transforms(poses, skeleton)?;
    Ok(markers
        .iter()
        .map(|m| {
            let sum: Vector3<f64> = m
                .positions
                .iter()
                .zip(&tf)
                .map(|(x, t)| t[m.segment].inverse_transform_point(x))
                .sum();
            sum / poses.len() as f64
        })
        .collect())
}

/// Predicted marker positions, indexed `[frame][marker]`.
pub fn predict_markers(
    markers: &[MarkerTrack],
    poses: &[Pose],
    skeleton: &Skeleton,
    offsets: &[Vector3<f64>],
) -> Result<Vec<Vec<Vector3<f64>>>> {
    check_inputs(markers, poses, skeleton)?;
    if offsets.len() != markers.len() {
        return Err(GsogError::LengthMismatch(format!(
            "{} offsets for {} markers",
            offsets.len(),
            markers.len()
        )));
    }
    Ok(transforms(poses, skeleton)?
        .iter()
        .map(|t| {
            markers
                .iter()
                .zip(offsets)
                .map(|(m, o)| t[m.segment].transform_point(o))
                .collect()
        })
        .collect())
}

pub fn joint_distance_error(
    markers: &[MarkerTrack],
    poses: &[Pose],
    skeleton: &Skeleton,
    offsets: &[Vector3<f64>],
) -> Result<ErrorReport> {
    let predicted = predict_markers(markers, poses, skeleton, offsets)?;
    let frames = poses.len();
    let mut per_marker = vec![0.0; markers.len()];
    let mut per_frame = vec![0.0; frames];
    for (t, row) in predicted.iter().enumerate() {
        for (k, p) in row.iter().enumerate() {
            let e = (p - markers[k].positions[t]).norm() * METERS_TO_CM;
            per_marker[k] += e;
            per_frame[t] += e;
        }
    }
    per_marker.iter_mut().for_each(|v| *v /= frames as f64);
    per_frame.iter_mut().for_each(|v| *v /= markers.len() as f64);
    let overall_mean = per_marker.iter().sum::<f64>() / markers.len() as f64;
    Ok(ErrorReport {
        marker_ids: markers.iter().map(|m| m.marker_id.clone()).collect(),
        per_marker_mean: per_marker,
        per_frame_mean: per_frame,
        overall_mean,
    })
}

#[derive(Debug, Deserialize, Serialize)]
struct MarkerRow {
    frame: i64,
    marker_id: String,
    x: f64,
    y: f64,
    z: f64,
}

/// Marker observations keyed by marker id, as `(frame, position)` sorted by frame.
pub type MarkerTable = BTreeMap<String, Vec<(i64, Vector3<f64>)>>;

/// Reads a `frame,marker_id,x,y,z` CSV.
pub fn load_marker_csv(path: impl AsRef<Path>) -> Result<MarkerTable> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| GsogError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| GsogError::parse(path, 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["frame", "marker_id", "x", "y", "z"] {
        return Err(GsogError::parse(path, 1, "expected header frame,marker_id,x,y,z"));
    }
    let mut table = MarkerTable::new();
    for (i, row) in reader.deserialize::<MarkerRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| GsogError::parse(path, line, e.to_string()))?;
        let p = Vector3::new(row.x, row.y, row.z);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(GsogError::parse(path, line, "non-finite marker position"));
        }
        table.entry(row.marker_id).or_default().push((row.frame, p));
    }
    for (id, obs) in table.iter_mut() {
        obs.sort_by_key(|(f, _)| *f);
        if obs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(GsogError::parse(path, 0, format!("marker {id} has duplicate frames")));
        }
    }
    Ok(table)
}

pub fn write_marker_csv(path: impl AsRef<Path>, markers: &[MarkerTrack]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| GsogError::io(path, e.into()))?;
    for m in markers {
        for (t, p) in m.positions.iter().enumerate() {
            w.serialize(MarkerRow {
                frame: t as i64,
                marker_id: m.marker_id.clone(),
                x: p.x,
                y: p.y,
                z: p.z,
            })
            .map_err(|e| GsogError::io(path, e.into()))?;
        }
    }
    w.flush().map_err(|e| GsogError::io(path, e))
}

/// Builds tracks from a marker table. Every assigned marker must be observed at
/// the same set of frames; `assignments` maps marker id to joint index.
pub fn tracks_from_table(table: &MarkerTable, assignments: &BTreeMap<String, usize>) -> Result<Vec<MarkerTrack>> {
    let mut tracks = Vec::new();
    let mut frames: Option<Vec<i64>> = None;
    for (id, &segment) in assignments {
        let obs = table
            .get(id)
            .ok_or_else(|| GsogError::InvalidArgument(format!("marker {id} has no observations")))?;
        let these: Vec<i64> = obs.iter().map(|(f, _)| *f).collect();
        match &frames {
            Some(f) if *f != these => {
                return Err(GsogError::LengthMismatch(format!(
                    "marker {id} is observed on a different frame set"
                )))
            }
            _ => frames = Some(these),
        }
        tracks.push(MarkerTrack {
            marker_id: id.clone(),
            segment,
            positions: obs.iter().map(|(_, p)| *p).collect(),
        });
    }
    if tracks.is_empty() {
        return Err(GsogError::InvalidArgument("no marker assignments".into()));
    }
    Ok(tracks)
}

/// Report CSV with `kind,id,mean_error_cm` rows for frames, markers and the overall mean.
pub fn write_report_csv(path: impl AsRef<Path>, report: &ErrorReport) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| GsogError::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["kind", "id", "mean_error_cm"]).map_err(err)?;
    for (t, e) in report.per_frame_mean.iter().enumerate() {
        w.write_record(["frame", &t.to_string(), &e.to_string()]).map_err(err)?;
    }
    for (id, e) in report.marker_ids.iter().zip(&report.per_marker_mean) {
        w.write_record(["marker", id, &e.to_string()]).map_err(err)?;
    }
    w.write_record(["overall", "", &report.overall_mean.to_string()])
        .map_err(err)?;
    w.flush().map_err(|e| GsogError::io(path, e))
}

/// Per-frame mean error as `frame,mean_error_cm`.
pub fn write_plot_data(path: impl AsRef<Path>, report: &ErrorReport) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| GsogError::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["frame", "mean_error_cm"]).map_err(err)?;
    for (t, e) in report.per_frame_mean.iter().enumerate() {
        w.write_record([t.to_string(), e.to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| GsogError::io(path, e))
}

/// Per-joint distance (meters) between the world joint positions of two poses.
pub fn joint_position_errors(skeleton: &Skeleton, estimated: &Pose, truth: &Pose) -> Result<Vec<f64>> {
    let a = crate::kinematics::joint_positions(skeleton, estimated)?;
    let b = crate::kinematics::joint_positions(skeleton, truth)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).norm()).collect())
}
