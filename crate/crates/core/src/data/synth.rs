//! A flat textured floor seen by a downward-looking camera at fixed height.
//!
//! One image pixel covers one texel, so the rendering is an exact rotated crop
//! of the texture. The camera yaws about `z` and translates in `x`/`y`; image
//! columns follow the camera `x` axis and rows its `y` axis.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::SequenceSample;
use crate::encoder::DOWNSAMPLE;
use crate::error::{Error, Result};
use crate::pose::Se3;
use crate::tensor::{seed_for_name, SeededRng};

use image::{Rgb, RgbImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    /// Texture side length in texels.
    pub texture_size: usize,
    /// Texel edge in meters.
    pub texel_size: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub num_sequences: usize,
    /// Frames per sequence.
    pub sequence_length: usize,
    /// Per-step yaw is uniform in `[-max, max]` radians.
    pub max_yaw_step: f64,
    /// Per-step forward (camera `x`) motion is uniform in `[min, max]` meters.
    pub min_forward_step: f64,
    pub max_forward_step: f64,
    /// Per-step sideways (camera `y`) motion is uniform in `[-max, max]` meters. Zero keeps motion vehicle-like.
    pub max_lateral_step: f64,
    /// Initial heading is uniform in `[-max, max]` radians.
    pub max_initial_yaw: f64,
    /// Start positions are uniform in a square of this half-width around the texture center.
    pub start_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            texture_size: 512,
            texel_size: 0.125,
            image_width: 64,
            image_height: 64,
            num_sequences: 8,
            sequence_length: 7,
            max_yaw_step: 0.1,
            min_forward_step: 0.25,
            max_forward_step: 0.75,
            max_lateral_step: 0.0,
            max_initial_yaw: std::f64::consts::FRAC_PI_4,
            start_spread: 8.0,
            seed: 0,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_width == 0
            || self.image_height == 0
            || self.image_width as usize % DOWNSAMPLE != 0
            || self.image_height as usize % DOWNSAMPLE != 0
        {
            return bad(format!(
                "image size {}x{} must be a positive multiple of {DOWNSAMPLE}",
                self.image_width, self.image_height
            ));
        }
        if self.sequence_length < 2 || self.num_sequences == 0 {
            return bad("need at least one sequence of at least 2 frames".into());
        }
        if !(self.texel_size > 0.0 && self.texel_size.is_finite()) || self.texture_size < 2 {
            return bad("texture_size must be >= 2 and texel_size positive".into());
        }
        let ranges = [
            self.max_yaw_step,
            self.min_forward_step,
            self.max_forward_step,
            self.max_lateral_step,
            self.max_initial_yaw,
            self.start_spread,
        ];
        if ranges.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("motion ranges must be finite and non-negative".into());
        }
        if self.min_forward_step > self.max_forward_step {
            return bad("min_forward_step exceeds max_forward_step".into());
        }
        let reach = self.max_reach();
        let half = self.texture_size as f64 / 2.0 * self.texel_size;
        if reach > half {
            return bad(format!(
                "views may reach {reach:.3} m from the texture center but the texture half-width is {half:.3} m"
            ));
        }
        Ok(())
    }

    /// Farthest distance from the texture center any sampled texel can have,
    /// including one texel of interpolation margin.
    fn max_reach(&self) -> f64 {
        let step = self.max_forward_step.hypot(self.max_lateral_step);
        let travel = (self.sequence_length - 1) as f64 * step;
        let half_diag = (self.image_width as f64).hypot(self.image_height as f64) / 2.0 * self.texel_size;
        self.start_spread * std::f64::consts::SQRT_2 + travel + half_diag + 2.0 * self.texel_size
    }
}

/// Per-channel standard deviation of the stretched texture.
const CONTRAST: f64 = 0.25;

struct Texture {
    size: usize,
    rgb: Vec<[f64; 3]>,
}

impl Texture {
    /// Multi-octave value noise in `[0, 1]`, independent per channel.
    fn generate(size: usize, seed: u64) -> Self {
        let mut rgb = vec![[0.0; 3]; size * size];
        let mut rng = SeededRng::seed_from_u64(seed_for_name(seed, "texture"));
        let octaves = [(64usize, 1.0), (32, 1.0), (16, 1.0), (8, 1.0), (4, 1.0), (2, 1.0)];
        let total: f64 = octaves.iter().map(|o| o.1).sum();
        for &(cell, amp) in &octaves {
            let n = size / cell + 2;
            let lattice: Vec<[f64; 3]> = (0..n * n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            for y in 0..size {
                let (gy, fy) = (y / cell, smooth((y % cell) as f64 / cell as f64));
                for x in 0..size {
                    let (gx, fx) = (x / cell, smooth((x % cell) as f64 / cell as f64));
                    let px = &mut rgb[y * size + x];
                    for (c, v) in px.iter_mut().enumerate() {
                        let a = lattice[gy * n + gx][c] * (1.0 - fx) + lattice[gy * n + gx + 1][c] * fx;
                        let b = lattice[(gy + 1) * n + gx][c] * (1.0 - fx) + lattice[(gy + 1) * n + gx + 1][c] * fx;
                        *v += amp / total * (a * (1.0 - fy) + b * fy);
                    }
                }
            }
        }
        // Stretch each channel to a fixed spread so motion stays visible in every frame.
        for c in 0..3 {
            let n = rgb.len() as f64;
            let mean = rgb.iter().map(|p| p[c]).sum::<f64>() / n;
            let std = (rgb.iter().map(|p| (p[c] - mean).powi(2)).sum::<f64>() / n).sqrt();
            for p in &mut rgb {
                p[c] = (0.5 + (p[c] - mean) * CONTRAST / std).clamp(0.0, 1.0);
            }
        }
        Texture { size, rgb }
    }

    fn texel(&self, x: usize, y: usize) -> [f64; 3] {
        self.rgb[y.min(self.size - 1) * self.size + x.min(self.size - 1)]
    }

    /// Bilinear lookup at texel coordinates (texel centers on integers).
    fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let max = (self.size - 1) as f64;
        let (x, y) = (x.clamp(0.0, max), y.clamp(0.0, max));
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as usize, y0 as usize);
        let (a, b, c, d) = (
            self.texel(xi, yi),
            self.texel(xi + 1, yi),
            self.texel(xi, yi + 1),
            self.texel(xi + 1, yi + 1),
        );
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = if fx == 0.0 { a[k] } else { a[k] * (1.0 - fx) + b[k] * fx };
            let bot = if fx == 0.0 { c[k] } else { c[k] * (1.0 - fx) + d[k] * fx };
            out[k] = if fy == 0.0 { top } else { top * (1.0 - fy) + bot * fy };
        }
        out
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn render(tex: &Texture, pose: &Se3, cfg: &SyntheticWorldConfig) -> RgbImage {
    let (w, h) = (cfg.image_width, cfg.image_height);
    let s = cfg.texel_size;
    let center = tex.size as f64 / 2.0 - 0.5;
    RgbImage::from_fn(w, h, |u, v| {
        let cam = Vector3::new(
            (u as f64 + 0.5 - w as f64 / 2.0) * s,
            (v as f64 + 0.5 - h as f64 / 2.0) * s,
            0.0,
        );
        let world = pose.rotation * cam + pose.translation;
        let c = tex.sample(world.x / s + center, world.y / s + center);
        Rgb(c.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Renders `cfg.num_sequences` sequences over one shared texture.
pub fn generate_synthetic(cfg: &SyntheticWorldConfig) -> Result<Vec<SequenceSample>> {
    cfg.validate()?;
    let tex = Texture::generate(cfg.texture_size, cfg.seed);
    (0..cfg.num_sequences)
        .map(|i| {
            let mut rng = SeededRng::seed_from_u64(seed_for_name(cfg.seed, &format!("sequence{i}")));
            let yaw0 = uniform(&mut rng, -cfg.max_initial_yaw, cfg.max_initial_yaw);
            let x0 = uniform(&mut rng, -cfg.start_spread, cfg.start_spread);
            let y0 = uniform(&mut rng, -cfg.start_spread, cfg.start_spread);
            let mut poses = vec![Se3::planar(yaw0, x0, y0)];
            for _ in 1..cfg.sequence_length {
                let rel = Se3::planar(
                    uniform(&mut rng, -cfg.max_yaw_step, cfg.max_yaw_step),
                    uniform(&mut rng, cfg.min_forward_step, cfg.max_forward_step),
                    uniform(&mut rng, -cfg.max_lateral_step, cfg.max_lateral_step),
                );
                let next = poses.last().expect("non-empty").compose(&rel);
                poses.push(next);
            }
            let frames = poses.iter().map(|p| render(&tex, p, cfg)).collect();
            SequenceSample::new(frames, poses)
        })
        .collect()
}
