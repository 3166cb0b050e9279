//! Trajectory CSV and top-down SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::kitti::decode_text;
use crate::error::{Error, Result};
use crate::pose::{Pose, Trajectory};

pub const CSV_HEADER: &str = "index,x,y,z,roll,pitch,yaw";

/// `%.9g`-style formatting: 9 significant digits, trailing zeros dropped.
pub fn format_sig(v: f64) -> String {
    const DIGITS: i32 = 9;
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= DIGITS {
        let m = trim_zeros(mantissa);
        return format!("{m}e{exp}");
    }
    let decimals = (DIGITS - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (i, p) in traj.poses().iter().enumerate() {
        let pose = Pose::from_se3(p);
        let vals = [
            pose.translation.x,
            pose.translation.y,
            pose.translation.z,
            pose.euler.x,
            pose.euler.y,
            pose.euler.z,
        ];
        let cells: Vec<String> = vals.iter().map(|&v| format_sig(v)).collect();
        let _ = writeln!(out, "{i},{}", cells.join(","));
    }
    out
}

pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    fs::write(path, trajectory_to_csv(traj)).map_err(|e| Error::io(path, e))
}

/// Parses CSV written by [`trajectory_to_csv`]; the header line is optional.
pub fn parse_trajectory_csv(text: &str, path: &Path) -> Result<Trajectory> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == CSV_HEADER) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(err(i + 1, format!("expected 7 fields, found {}", fields.len())));
        }
        let mut v = [0.0; 6];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(i + 1, format!("not a finite number: {f:?}")))?;
        }
        poses.push(Pose::new([v[3], v[4], v[5]], [v[0], v[1], v[2]]).to_se3());
    }
    if poses.is_empty() {
        return Err(err(1, "no poses".into()));
    }
    Trajectory::new(poses)
}

pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory_csv(&decode_text(&bytes, path)?, path)
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Tick spacing of 1, 2 or 5 times a power of ten giving about `target` ticks.
fn tick_step(span: f64, target: f64) -> f64 {
    let raw = span / target;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f <= 1.0 {
        1.0
    } else if f <= 2.0 {
        2.0
    } else if f <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

/// Overlays labelled trajectories in the x-y plane, equal aspect.
pub fn trajectories_to_svg(trajs: &[(String, Trajectory)]) -> String {
    const SIZE: f64 = 600.0;
    const MARGIN: f64 = 60.0;
    let pts = trajs.iter().flat_map(|(_, t)| t.poses().iter().map(|p| (p.translation.x, p.translation.y)));
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let (x0, y0) = (cx - span / 2.0, cy - span / 2.0);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let px = |x: f64| MARGIN + (x - x0) * scale;
    let py = |y: f64| SIZE - MARGIN - (y - y0) * scale;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let (left, bottom, right, top) = (MARGIN, SIZE - MARGIN, SIZE - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        right - left,
        bottom - top
    );
    let step = tick_step(span, 5.0);
    let mut v = (x0 / step).ceil() * step;
    while v <= x0 + span + 1e-9 * span {
        let x = px(v);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{bottom}" x2="{x:.2}" y2="{}" stroke="black"/>"#, bottom + 5.0);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
            bottom + 18.0,
            format_sig(round_tick(v, step))
        );
        v += step;
    }
    let mut v = (y0 / step).ceil() * step;
    while v <= y0 + span + 1e-9 * span {
        let y = py(v);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/>"#, left - 5.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"#,
            left - 8.0,
            y + 4.0,
            format_sig(round_tick(v, step))
        );
        v += step;
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">x [m]</text>"#, SIZE / 2.0, SIZE - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 15 {})">y [m]</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    for (i, (label, t)) in trajs.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = t
            .poses()
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.translation.x), py(p.translation.y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let ly = top + 15.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            left + 10.0,
            left + 30.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11">{}</text>"#,
            left + 35.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn round_tick(v: f64, step: f64) -> f64 {
    let r = (v / step).round() * step;
    if r.abs() < step * 1e-9 {
        0.0
    } else {
        r
    }
}

pub fn write_svg(trajs: &[(String, Trajectory)], path: &Path) -> Result<()> {
    fs::write(path, trajectories_to_svg(trajs)).map_err(|e| Error::io(path, e))
}
