//! KITTI odometry layout: `sequences/NN/image_2/*.png` and `poses/NN.txt`,
//! one row-major `3x4` camera-to-world matrix per line.

use std::fs;
use std::path::{Path, PathBuf};

use super::{fit_image, load_image, save_image, SequenceSample};
use crate::error::{Error, Result};
use crate::pose::Se3;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Decodes raw file bytes, reporting invalid UTF-8 at its line.
pub(crate) fn decode_text(bytes: &[u8], path: &Path) -> Result<String> {
    String::from_utf8(bytes.to_vec()).map_err(|e| {
        let upto = e.utf8_error().valid_up_to();
        let line = bytes[..upto].iter().filter(|&&b| b == b'\n').count() + 1;
        parse_err(path, line, "invalid UTF-8")
    })
}

/// Parses `text`; `path` only labels errors. Lines are 1-based in errors.
pub fn parse_kitti_poses(text: &str, path: &Path) -> Result<Vec<Se3>> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut vals = [0.0; 12];
        let mut n = 0;
        for tok in line.split_whitespace() {
            if n == 12 {
                return Err(parse_err(path, i + 1, "more than 12 values"));
            }
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("not a number: {tok:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, i + 1, format!("non-finite value {tok:?}")));
            }
            vals[n] = v;
            n += 1;
        }
        if n != 12 {
            return Err(parse_err(path, i + 1, format!("expected 12 values, found {n}")));
        }
        poses.push(Se3::from_row_major_3x4(&vals));
    }
    if poses.is_empty() {
        return Err(parse_err(path, 1, "no poses"));
    }
    Ok(poses)
}

pub fn load_kitti_poses(path: &Path) -> Result<Vec<Se3>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_kitti_poses(&decode_text(&bytes, path)?, path)
}

pub fn format_kitti_poses(poses: &[Se3]) -> String {
    let mut out = String::new();
    for p in poses {
        let row: Vec<String> = p.to_row_major_3x4().iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_kitti_poses(poses: &[Se3], path: &Path) -> Result<()> {
    fs::write(path, format_kitti_poses(poses)).map_err(|e| Error::io(path, e))
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads frames in file-name order, resized to `size` (width, height) when given.
pub fn load_kitti_sequence(image_dir: &Path, pose_file: &Path, size: Option<(u32, u32)>) -> Result<SequenceSample> {
    let poses = load_kitti_poses(pose_file)?;
    let files = image_files(image_dir)?;
    if files.len() != poses.len() {
        return Err(Error::InvalidArgument(format!(
            "{} has {} images but {} has {} poses",
            image_dir.display(),
            files.len(),
            pose_file.display(),
            poses.len()
        )));
    }
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        let img = load_image(f)?;
        frames.push(match size {
            Some((w, h)) => fit_image(img, w, h),
            None => img,
        });
    }
    SequenceSample::new(frames, poses)
}

/// Sequence names under `root/sequences`, sorted.
pub fn sequence_dirs(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("sequences");
    let mut names = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        if entry.path().is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!("no sequences under {}", dir.display())));
    }
    Ok(names)
}

fn sequence_paths(root: &Path, name: &str) -> (PathBuf, PathBuf) {
    (
        root.join("sequences").join(name).join("image_2"),
        root.join("poses").join(format!("{name}.txt")),
    )
}

/// Every sequence of a KITTI-layout dataset, with its name.
pub fn load_dataset(root: &Path, size: Option<(u32, u32)>) -> Result<Vec<(String, SequenceSample)>> {
    sequence_dirs(root)?
        .into_iter()
        .map(|name| {
            let (images, poses) = sequence_paths(root, &name);
            let s = load_kitti_sequence(&images, &poses, size)?;
            Ok((name, s))
        })
        .collect()
}

/// Writes `sample` as sequence `name` of a KITTI-layout dataset under `root`.
pub fn write_kitti_sequence(root: &Path, name: &str, sample: &SequenceSample) -> Result<()> {
    let (images, poses) = sequence_paths(root, name);
    for dir in [&images, &root.join("poses")] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.as_path(), e))?;
    }
    for (i, frame) in sample.frames.iter().enumerate() {
        save_image(frame, &images.join(format!("{i:06}.png")))?;
    }
    write_kitti_poses(&sample.poses, &poses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("poses.txt")
    }

    #[test]
    fn identity_line() {
        let poses = parse_kitti_poses("1 0 0 0 0 1 0 0 0 0 1 0\n", p()).unwrap();
        assert_eq!(poses, vec![Se3::identity()]);
    }

    #[test]
    fn eleven_numbers_rejected_at_line() {
        let text = "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n";
        match parse_kitti_poses(text, p()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn junk_rejected() {
        for bad in ["", "1 0 0 0 0 1 0 0 0 0 1 0 7", "1 0 0 0 0 1 0 0 0 0 1 x", "nan 0 0 0 0 1 0 0 0 0 1 0"] {
            assert!(parse_kitti_poses(bad, p()).is_err(), "{bad:?}");
        }
        match decode_text(b"1 0\n\xff", p()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn write_read_round_trip() {
        let poses: Vec<Se3> = (0..20)
            .map(|i| Se3::planar(0.37 * i as f64, 1.0 / (i + 1) as f64, -0.3 * i as f64))
            .collect();
        let back = parse_kitti_poses(&format_kitti_poses(&poses), p()).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            assert!(a.max_abs_diff(b) < 1e-9);
        }
    }
}
