//! Encoder → guidance → per-branch ConvLSTM → pose heads.
//!
//! The dual-branch variants run a rotation branch and a translation branch
//! over the same encoder features; each branch guides those features with its
//! own previous output. The joint `RNN` baseline has a single branch whose
//! head emits all six values.

mod loss;
mod train;

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub use loss::{pose_chain_loss, record_pose_chain_loss, total_loss, LossProfile};
pub use train::{prepare_samples, train, train_with, Checkpoint, LossRecord, TrainConfig, TrainSample};

use crate::convlstm::{self, StateVars};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::guidance::{self, GuidanceKind};
use crate::pose::{Pose, Se3};
use crate::tensor::{msra_init, seed_for_name, Bindings, Graph, ParamSet, Real, Tensor, Var};

pub const ENCODER_PREFIX: &str = "encoder";

/// Network variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "RNN")]
    Rnn,
    #[serde(rename = "SRNN")]
    Srnn,
    #[serde(rename = "SRNN_se")]
    SrnnSe,
    #[serde(rename = "SRNN_point")]
    SrnnPoint,
    #[serde(rename = "SRNN_channel")]
    SrnnChannel,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Rnn,
        Variant::Srnn,
        Variant::SrnnSe,
        Variant::SrnnPoint,
        Variant::SrnnChannel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rnn => "RNN",
            Variant::Srnn => "SRNN",
            Variant::SrnnSe => "SRNN_se",
            Variant::SrnnPoint => "SRNN_point",
            Variant::SrnnChannel => "SRNN_channel",
        }
    }

    pub fn guidance(self) -> GuidanceKind {
        match self {
            Variant::Rnn | Variant::Srnn => GuidanceKind::None,
            Variant::SrnnSe => GuidanceKind::Senet,
            Variant::SrnnPoint => GuidanceKind::Point,
            Variant::SrnnChannel => GuidanceKind::Channel,
        }
    }

    pub fn is_dual(self) -> bool {
        self != Variant::Rnn
    }

    fn code(self) -> f64 {
        Variant::ALL.iter().position(|&v| v == self).expect("listed") as f64
    }

    fn from_code(code: f64) -> Option<Self> {
        Variant::ALL.get(code as usize).copied().filter(|v| v.code() == code)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

fn default_variant() -> Variant {
    Variant::SrnnChannel
}
fn default_multiplier() -> f64 {
    0.125
}
fn default_k() -> f64 {
    LossProfile::Kitti.k()
}
fn default_seq_len() -> usize {
    7
}
fn default_slope() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_multiplier")]
    pub channel_multiplier: f64,
    /// Rotation weight in the loss.
    #[serde(default = "default_k")]
    pub k: f64,
    /// Frames per training window (one more than the number of motions).
    #[serde(default = "default_seq_len")]
    pub sequence_length: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    /// Forces every guidance scale to one. Only for ablation checks.
    #[serde(skip)]
    pub unit_guidance_scales: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: default_variant(),
            channel_multiplier: default_multiplier(),
            k: default_k(),
            sequence_length: default_seq_len(),
            leaky_slope: default_slope(),
            unit_guidance_scales: false,
        }
    }
}

impl ModelConfig {
    pub fn new(variant: Variant, channel_multiplier: f64) -> Self {
        ModelConfig {
            variant,
            channel_multiplier,
            ..Self::default()
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            channel_multiplier: self.channel_multiplier,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn channels(&self) -> usize {
        self.encoder().out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("loss balance k must be > 0, got {}", self.k)));
        }
        if self.sequence_length < 2 {
            return Err(Error::Config(format!(
                "sequence_length must be >= 2 frames, got {}",
                self.sequence_length
            )));
        }
        Ok(())
    }

    /// Branch name prefixes in output order.
    pub fn branches(&self) -> &'static [&'static str] {
        if self.variant.is_dual() {
            &["rot", "trans"]
        } else {
            &["joint"]
        }
    }

    /// Scalar metadata persisted alongside the weights.
    pub fn to_meta(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("meta.variant", self.variant.code()),
            ("meta.channel_multiplier", self.channel_multiplier),
            ("meta.k", self.k),
            ("meta.sequence_length", self.sequence_length as f64),
            ("meta.leaky_slope", self.leaky_slope),
        ]
    }

    pub fn from_meta(lookup: impl Fn(&str) -> Option<f64>) -> Result<Self> {
        let get = |k: &str| lookup(k).ok_or_else(|| Error::Config(format!("checkpoint lacks {k}")));
        let code = get("meta.variant")?;
        let cfg = ModelConfig {
            variant: Variant::from_code(code)
                .ok_or_else(|| Error::Config(format!("bad variant code {code}")))?,
            channel_multiplier: get("meta.channel_multiplier")?,
            k: get("meta.k")?,
            sequence_length: get("meta.sequence_length")? as usize,
            leaky_slope: get("meta.leaky_slope")?,
            unit_guidance_scales: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn lstm_prefix(branch: &str) -> String {
    format!("{branch}.lstm")
}

pub fn senet_prefix(branch: &str) -> String {
    format!("{branch}.se")
}

pub fn head_prefix(branch: &str) -> String {
    format!("{branch}.head")
}

/// Adds `GAP + FC` head parameters producing `outputs` values.
pub fn init_head<T: Real>(
    params: &mut ParamSet<T>,
    prefix: &str,
    channels: usize,
    outputs: usize,
    seed: u64,
) -> Result<()> {
    let w = format!("{prefix}.weight");
    params.insert(&w, msra_init(&[outputs, channels], channels, seed_for_name(seed, &w)), true)?;
    params.insert(&format!("{prefix}.bias"), Tensor::zeros(&[outputs]), true)?;
    Ok(())
}

/// Every parameter of the model for `cfg`, initialized from `seed`.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    encoder::init_params(&cfg.encoder(), &mut p, ENCODER_PREFIX, seed)?;
    let c = cfg.channels();
    for branch in cfg.branches() {
        convlstm::init_params(&mut p, &lstm_prefix(branch), c, seed)?;
        if cfg.variant.guidance() == GuidanceKind::Senet {
            guidance::init_senet_params(&mut p, &senet_prefix(branch), c, guidance::senet_hidden(c), seed)?;
        }
        let outputs = if cfg.variant.is_dual() { 3 } else { 6 };
        init_head(&mut p, &head_prefix(branch), c, outputs, seed)?;
    }
    Ok(p)
}

/// Records global average pooling plus a fully connected layer.
pub fn regress<T: Real>(g: &mut Graph<T>, params: &Bindings, prefix: &str, o: Var) -> Result<Var> {
    let pooled = g.global_avg_pool(o)?;
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    g.linear(pooled, w, b)
}

/// Graph-free pose head.
pub fn regress_pose<T: Real>(o: &Tensor<T>, params: &ParamSet<T>, prefix: &str) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = g.bind(params);
    let ov = g.input(o.clone());
    let out = regress(&mut g, &b, prefix, ov)?;
    Ok(g.value(out).to_f64_vec())
}

/// Graph handles of a recorded sequence: per-step relative rotations and
/// translations, each flattened to `[steps * 3]`.
#[derive(Clone, Copy, Debug)]
pub struct SequenceVars {
    pub rotations: Var,
    pub translations: Var,
    pub steps: usize,
}

/// Records the network over consecutive `frames` (each `[3,H,W]`).
pub fn record_sequence<T: Real>(
    g: &mut Graph<T>,
    params: &Bindings,
    cfg: &ModelConfig,
    frames: &[Tensor<T>],
) -> Result<SequenceVars> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a sequence needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let enc = cfg.encoder();
    let kind = cfg.variant.guidance();
    let branches = cfg.branches();
    let mut states: Vec<Option<StateVars>> = vec![None; branches.len()];
    let mut prev_out: Vec<Option<Var>> = vec![None; branches.len()];
    let mut rot = Vec::new();
    let mut trans = Vec::new();

    for pair in frames.windows(2) {
        let stacked = encoder::stack_pair(&pair[0], &pair[1])?;
        let input = g.input(stacked);
        let x = encoder::encode(g, params, &enc, ENCODER_PREFIX, input)?;
        let mut heads = Vec::with_capacity(branches.len());
        for (bi, branch) in branches.iter().enumerate() {
            let guided = guidance::guide(
                g,
                kind,
                Some(params),
                &senet_prefix(branch),
                x,
                prev_out[bi],
                cfg.unit_guidance_scales,
            )?;
            let (o, state) = convlstm::step(g, params, &lstm_prefix(branch), guided, states[bi])?;
            states[bi] = Some(state);
            prev_out[bi] = Some(o);
            heads.push(regress(g, params, &head_prefix(branch), o)?);
        }
        if cfg.variant.is_dual() {
            rot.push(heads[0]);
            trans.push(heads[1]);
        } else {
            rot.push(g.narrow(heads[0], 0, 3)?);
            trans.push(g.narrow(heads[0], 3, 3)?);
        }
    }
    Ok(SequenceVars {
        rotations: g.concat(&rot)?,
        translations: g.concat(&trans)?,
        steps: frames.len() - 1,
    })
}

/// Pose predicted for view `frame` (1-based within its window).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseEstimate {
    pub frame: usize,
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseEstimate {
    pub fn to_pose(&self) -> Pose {
        Pose {
            euler: self.rotation,
            translation: self.translation,
        }
    }
}

/// Per-step relative motion estimates for `frames`, one per consecutive pair.
pub fn forward_sequence<T: Real>(
    frames: &[Tensor<T>],
    params: &ParamSet<T>,
    cfg: &ModelConfig,
) -> Result<Vec<PoseEstimate>> {
    let mut g = Graph::new();
    let b = g.bind(params);
    let vars = record_sequence(&mut g, &b, cfg, frames)?;
    let r = g.value(vars.rotations).to_f64_vec();
    let t = g.value(vars.translations).to_f64_vec();
    Ok((0..vars.steps)
        .map(|i| PoseEstimate {
            frame: i + 1,
            rotation: Vector3::new(r[3 * i], r[3 * i + 1], r[3 * i + 2]),
            translation: Vector3::new(t[3 * i], t[3 * i + 1], t[3 * i + 2]),
        })
        .collect())
}

/// Chains relative estimates from `origin` into absolute world poses.
pub fn to_absolute(relatives: &[PoseEstimate], origin: &Se3) -> Vec<PoseEstimate> {
    let mut current = *origin;
    relatives
        .iter()
        .map(|rel| {
            current = current.compose(&rel.to_pose().to_se3());
            let abs = Pose::from_se3(&current);
            PoseEstimate {
                frame: rel.frame,
                rotation: abs.euler,
                translation: abs.translation,
            }
        })
        .collect()
}
