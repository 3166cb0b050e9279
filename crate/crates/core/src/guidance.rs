//! Context-aware feature guidance: the current features `X_t` of a branch
//! are rescaled by factors in `(0, 1)` derived from that branch's previous
//! output `O_{t-1}`.
//!
//! * SENet-like: per-channel scales from pooled `O_{t-1}` through two FC
//!   layers; `X_t` itself does not influence the scales.
//! * Point-wise correlation: one scale per spatial position from the cosine
//!   similarity of the channel columns of `X_t` and `O_{t-1}`.
//! * Channel-wise correlation: one scale per channel from the cosine
//!   similarity of the flattened feature maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{msra_init, seed_for_name, Bindings, Graph, ParamSet, Real, Tensor, Var};

/// Added to the norm product of the correlation variants.
pub const COSINE_EPS: f64 = 1e-8;

/// SENet reduction ratio at full width.
pub const SENET_REDUCTION: usize = 16;

/// Smallest SENet bottleneck width kept at reduced scale.
pub const SENET_MIN_HIDDEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceKind {
    None,
    Senet,
    Point,
    Channel,
}

/// Scale factors produced by a guidance block.
#[derive(Clone, Debug, PartialEq)]
pub enum GuidanceScales {
    PerChannel(Vec<f64>),
    PerPosition { height: usize, width: usize, values: Vec<f64> },
}

impl GuidanceScales {
    pub fn values(&self) -> &[f64] {
        match self {
            GuidanceScales::PerChannel(v) => v,
            GuidanceScales::PerPosition { values, .. } => values,
        }
    }

    pub fn all_within_unit_interval(&self) -> bool {
        self.values().iter().all(|&s| (0.0..=1.0).contains(&s))
    }
}

/// Bottleneck width of the SENet-like block for `channels` inputs.
pub fn senet_hidden(channels: usize) -> usize {
    (channels / SENET_REDUCTION).max(SENET_MIN_HIDDEN).min(channels)
}

pub fn senet_names(prefix: &str) -> [String; 4] {
    [
        format!("{prefix}.fc1.weight"),
        format!("{prefix}.fc1.bias"),
        format!("{prefix}.fc2.weight"),
        format!("{prefix}.fc2.bias"),
    ]
}

/// FC weights are stored `[out, in]`: fc1 `[hidden, C]`, fc2 `[C, hidden]`.
pub fn init_senet_params<T: Real>(
    params: &mut ParamSet<T>,
    prefix: &str,
    channels: usize,
    hidden: usize,
    seed: u64,
) -> Result<()> {
    if hidden == 0 || hidden > channels {
        return Err(Error::InvalidArgument(format!(
            "SENet bottleneck {hidden} invalid for {channels} channels"
        )));
    }
    let [w1, b1, w2, b2] = senet_names(prefix);
    params.insert(&w1, msra_init(&[hidden, channels], channels, seed_for_name(seed, &w1)), true)?;
    params.insert(&b1, Tensor::zeros(&[hidden]), true)?;
    params.insert(&w2, msra_init(&[channels, hidden], hidden, seed_for_name(seed, &w2)), true)?;
    params.insert(&b2, Tensor::zeros(&[channels]), true)?;
    Ok(())
}

fn same_shape<T: Real>(g: &Graph<T>, x: Var, o: Var, op: &'static str) -> Result<()> {
    if g.shape(x) != g.shape(o) || g.shape(x).len() != 3 {
        return Err(Error::shape(op, format!("X {:?} vs O_prev {:?}", g.shape(x), g.shape(o))));
    }
    Ok(())
}

/// Returns `(guided features, raw scales)`.
pub fn senet<T: Real>(
    g: &mut Graph<T>,
    params: &Bindings,
    prefix: &str,
    x: Var,
    o_prev: Var,
) -> Result<(Var, Var)> {
    same_shape(g, x, o_prev, "senet_guidance")?;
    let [w1, b1, w2, b2] = senet_names(prefix);
    let pooled = g.global_avg_pool(o_prev)?;
    let h = g.linear(pooled, params.get(&w1)?, params.get(&b1)?)?;
    let h = g.relu(h);
    let z = g.linear(h, params.get(&w2)?, params.get(&b2)?)?;
    let s = g.sigmoid(z);
    Ok((g.scale_channels(x, s)?, s))
}

pub fn pointwise<T: Real>(g: &mut Graph<T>, x: Var, o_prev: Var) -> Result<(Var, Var)> {
    same_shape(g, x, o_prev, "pointwise_guidance")?;
    let sim = g.column_cosine(x, o_prev, COSINE_EPS)?;
    let s = g.sigmoid(sim);
    Ok((g.scale_positions(x, s)?, s))
}

pub fn channelwise<T: Real>(g: &mut Graph<T>, x: Var, o_prev: Var) -> Result<(Var, Var)> {
    same_shape(g, x, o_prev, "channelwise_guidance")?;
    let sim = g.channel_cosine(x, o_prev, COSINE_EPS)?;
    let s = g.sigmoid(sim);
    Ok((g.scale_channels(x, s)?, s))
}

/// Dispatches to one mechanism. Without a previous output (first step of a
/// sequence) or with `GuidanceKind::None` the features pass through untouched.
/// `unit_scales` replaces computed scales with ones, for ablation checks.
pub fn guide<T: Real>(
    g: &mut Graph<T>,
    kind: GuidanceKind,
    params: Option<&Bindings>,
    prefix: &str,
    x: Var,
    o_prev: Option<Var>,
    unit_scales: bool,
) -> Result<Var> {
    let Some(o) = o_prev else { return Ok(x) };
    let (guided, s) = match kind {
        GuidanceKind::None => return Ok(x),
        GuidanceKind::Senet => {
            let p = params.ok_or_else(|| {
                Error::InvalidArgument("SENet guidance requires its parameters".into())
            })?;
            senet(g, p, prefix, x, o)?
        }
        GuidanceKind::Point => pointwise(g, x, o)?,
        GuidanceKind::Channel => channelwise(g, x, o)?,
    };
    if !unit_scales {
        return Ok(guided);
    }
    let ones = g.input(Tensor::full(g.shape(s), T::one()));
    match kind {
        GuidanceKind::Point => g.scale_positions(x, ones),
        _ => g.scale_channels(x, ones),
    }
}

fn scales_of<T: Real>(g: &Graph<T>, s: Var, per_position: bool) -> GuidanceScales {
    let values = g.value(s).to_f64_vec();
    if per_position {
        let [height, width] = *g.shape(s) else { unreachable!("scale map is 2-D") };
        GuidanceScales::PerPosition { height, width, values }
    } else {
        GuidanceScales::PerChannel(values)
    }
}

/// Graph-free SENet-like guidance.
pub fn senet_guidance<T: Real>(
    x: &Tensor<T>,
    o_prev: &Tensor<T>,
    params: &ParamSet<T>,
    prefix: &str,
) -> Result<(Tensor<T>, GuidanceScales)> {
    let mut g = Graph::new();
    let b = g.bind(params);
    let (xv, ov) = (g.input(x.clone()), g.input(o_prev.clone()));
    let (out, s) = senet(&mut g, &b, prefix, xv, ov)?;
    Ok((g.value(out).clone(), scales_of(&g, s, false)))
}

pub fn pointwise_guidance<T: Real>(x: &Tensor<T>, o_prev: &Tensor<T>) -> Result<(Tensor<T>, GuidanceScales)> {
    let mut g = Graph::new();
    let (xv, ov) = (g.input(x.clone()), g.input(o_prev.clone()));
    let (out, s) = pointwise(&mut g, xv, ov)?;
    Ok((g.value(out).clone(), scales_of(&g, s, true)))
}

pub fn channelwise_guidance<T: Real>(x: &Tensor<T>, o_prev: &Tensor<T>) -> Result<(Tensor<T>, GuidanceScales)> {
    let mut g = Graph::new();
    let (xv, ov) = (g.input(x.clone()), g.input(o_prev.clone()));
    let (out, s) = channelwise(&mut g, xv, ov)?;
    Ok((g.value(out).clone(), scales_of(&g, s, false)))
}
