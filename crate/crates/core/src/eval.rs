//! Segment drift in the style of the KITTI odometry devkit, and relative pose error.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pose::{rotation_angle, Se3, Trajectory};

pub const DEFAULT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
pub const DEFAULT_STRIDE: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Drift {
    /// Mean translational error in percent of segment length.
    pub t_rel: f64,
    /// Mean rotational error in degrees per 100 m.
    pub r_rel: f64,
    /// Number of (start, length) pairs averaged.
    pub segments: usize,
}

fn check_pair(gt: &Trajectory, pred: &Trajectory) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectories differ in length: {} vs {}",
            gt.len(),
            pred.len()
        )));
    }
    Ok(())
}

fn segment_error(gt: &[Se3], pred: &[Se3], i: usize, j: usize) -> Se3 {
    gt[i].between(&gt[j]).inverse().compose(&pred[i].between(&pred[j]))
}

/// Averages over start frames `0, stride, 2*stride, ..` and every length in
/// `lengths` whose segment fits; a segment ends at the first frame whose
/// ground-truth path length from the start reaches the target.
pub fn kitti_drift(gt: &Trajectory, pred: &Trajectory, lengths: &[f64], stride: usize) -> Result<Drift> {
    check_pair(gt, pred)?;
    if gt.len() < 2 {
        return Err(Error::InvalidArgument("drift needs at least 2 poses".into()));
    }
    if stride == 0 || lengths.is_empty() || lengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument("stride and segment lengths must be positive".into()));
    }
    let dist = gt.path_lengths();
    let (g, p) = (gt.poses(), pred.poses());
    let (mut t_sum, mut r_sum, mut count) = (0.0, 0.0, 0usize);
    for i in (0..gt.len()).step_by(stride) {
        for &len in lengths {
            let Some(j) = (i + 1..gt.len()).find(|&j| dist[j] - dist[i] >= len) else {
                continue;
            };
            let e = segment_error(g, p, i, j);
            t_sum += e.translation.norm() / len;
            r_sum += rotation_angle(&e.rotation) / len;
            count += 1;
        }
    }
    if count == 0 {
        let shortest = lengths.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(Error::TrajectoryTooShort {
            requested: shortest,
            available: *dist.last().expect("non-empty"),
        });
    }
    let n = count as f64;
    Ok(Drift {
        t_rel: t_sum / n * 100.0,
        r_rel: (r_sum / n).to_degrees() * 100.0,
        segments: count,
    })
}

/// Root mean square of the translational relative pose error at frame gap `delta`.
pub fn rpe_rmse(gt: &Trajectory, pred: &Trajectory, delta: usize) -> Result<f64> {
    check_pair(gt, pred)?;
    if delta == 0 || gt.len() < delta + 1 {
        return Err(Error::InvalidArgument(format!(
            "rpe needs delta >= 1 and at least delta + 1 poses (delta {delta}, {} poses)",
            gt.len()
        )));
    }
    let (g, p) = (gt.poses(), pred.poses());
    let n = gt.len() - delta;
    let sq: f64 = (0..n)
        .map(|i| segment_error(g, p, i, i + delta).translation.norm_squared())
        .sum();
    Ok((sq / n as f64).sqrt())
}
