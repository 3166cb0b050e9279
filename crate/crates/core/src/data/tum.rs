//! TUM trajectory text: `timestamp tx ty tz qx qy qz qw` per line, `#` comments.

use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::kitti::decode_text;
use crate::error::{Error, Result};
use crate::pose::{Se3, Trajectory};

const UNIT_TOL: f64 = 1e-3;

pub fn parse_tum_trajectory(text: &str, path: &Path) -> Result<Trajectory> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let mut v = [0.0; 8];
        let mut n = 0;
        for tok in body.split_whitespace() {
            if n == 8 {
                return Err(err(i + 1, "more than 8 fields".into()));
            }
            let x: f64 = tok.parse().map_err(|_| err(i + 1, format!("not a number: {tok:?}")))?;
            if !x.is_finite() {
                return Err(err(i + 1, format!("non-finite value {tok:?}")));
            }
            v[n] = x;
            n += 1;
        }
        if n != 8 {
            return Err(err(i + 1, format!("expected 8 fields, found {n}")));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        let norm = q.norm();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(err(i + 1, format!("quaternion norm {norm} is not within {UNIT_TOL} of 1")));
        }
        let r = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        poses.push(Se3::new(r, Vector3::new(v[1], v[2], v[3])));
    }
    if poses.is_empty() {
        return Err(err(1, "empty trajectory".into()));
    }
    Trajectory::new(poses)
}

pub fn load_tum_trajectory(path: &Path) -> Result<Trajectory> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_tum_trajectory(&decode_text(&bytes, path)?, path)
}
