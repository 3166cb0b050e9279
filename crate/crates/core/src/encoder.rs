//! Flow-network style encoder: nine strided convolutions mapping a stacked
//! image pair `[6,H,W]` to a `[C,H/64,W/64]` feature map.

use crate::error::{Error, Result};
use crate::tensor::{msra_init, seed_for_name, Activation, Bindings, Graph, ParamSet, Real, Tensor, Var};

/// One convolution of the stack: name, square kernel, stride, full-width output channels.
#[derive(Clone, Copy, Debug)]
pub struct LayerSpec {
    pub name: &'static str,
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

const fn layer(name: &'static str, kernel: usize, stride: usize, channels: usize) -> LayerSpec {
    LayerSpec {
        name,
        kernel,
        stride,
        channels,
    }
}

pub const LAYERS: [LayerSpec; 9] = [
    layer("conv1", 7, 2, 64),
    layer("conv2", 5, 2, 128),
    layer("conv3", 5, 2, 256),
    layer("conv3_1", 3, 1, 256),
    layer("conv4", 3, 2, 512),
    layer("conv4_1", 3, 1, 512),
    layer("conv5", 3, 2, 512),
    layer("conv5_1", 3, 1, 512),
    layer("conv6", 3, 2, 1024),
];

/// Product of the layer strides.
pub const DOWNSAMPLE: usize = 64;

pub const INPUT_CHANNELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Scales every layer width; must lie in `(0, 1]`.
    pub channel_multiplier: f64,
    pub leaky_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channel_multiplier: 1.0,
            leaky_slope: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn new(channel_multiplier: f64) -> Self {
        EncoderConfig {
            channel_multiplier,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.channel_multiplier;
        if !(m > 0.0 && m <= 1.0) {
            return Err(Error::Config(format!("channel_multiplier must be in (0, 1], got {m}")));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config(format!("leaky slope must be >= 0, got {}", self.leaky_slope)));
        }
        Ok(())
    }

    /// Scaled width of a layer, floored and clamped to at least one channel.
    pub fn width(&self, full: usize) -> usize {
        ((full as f64 * self.channel_multiplier + 1e-9).floor() as usize).max(1)
    }

    pub fn widths(&self) -> [usize; 9] {
        LAYERS.map(|l| self.width(l.channels))
    }

    pub fn out_channels(&self) -> usize {
        self.width(LAYERS[8].channels)
    }

    /// Output `[C, H', W']` for an input of `height x width`.
    pub fn output_shape(&self, height: usize, width: usize) -> Result<[usize; 3]> {
        check_spatial(height, width)?;
        Ok([self.out_channels(), height / DOWNSAMPLE, width / DOWNSAMPLE])
    }
}

fn check_spatial(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % DOWNSAMPLE != 0 || width % DOWNSAMPLE != 0 {
        return Err(Error::shape(
            "encoder",
            format!("image {width}x{height} is not a positive multiple of {DOWNSAMPLE} in both dimensions"),
        ));
    }
    Ok(())
}

pub fn weight_name(prefix: &str, layer: &LayerSpec) -> String {
    format!("{prefix}.{}.weight", layer.name)
}

pub fn bias_name(prefix: &str, layer: &LayerSpec) -> String {
    format!("{prefix}.{}.bias", layer.name)
}

/// Adds MSRA-initialized weights and zero biases for every layer.
pub fn init_params<T: Real>(
    cfg: &EncoderConfig,
    params: &mut ParamSet<T>,
    prefix: &str,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    let mut c_in = INPUT_CHANNELS;
    for (spec, c_out) in LAYERS.iter().zip(cfg.widths()) {
        let fan_in = c_in * spec.kernel * spec.kernel;
        let wname = weight_name(prefix, spec);
        let w = msra_init(&[c_out, c_in, spec.kernel, spec.kernel], fan_in, seed_for_name(seed, &wname));
        params.insert(&wname, w, true)?;
        params.insert(&bias_name(prefix, spec), Tensor::zeros(&[c_out]), true)?;
        c_in = c_out;
    }
    Ok(())
}

/// Stacks two `[3,H,W]` frames along channels into the `[6,H,W]` encoder input.
pub fn stack_pair<T: Real>(prev: &Tensor<T>, curr: &Tensor<T>) -> Result<Tensor<T>> {
    if prev.shape() != curr.shape() {
        return Err(Error::shape(
            "encode_pair",
            format!("frame sizes differ: {:?} vs {:?}", prev.shape(), curr.shape()),
        ));
    }
    let [c, h, w] = *prev.shape() else {
        return Err(Error::shape("encode_pair", format!("frame must be [3,H,W], got {:?}", prev.shape())));
    };
    if c != 3 {
        return Err(Error::shape("encode_pair", format!("frame must be RGB, got {c} channels")));
    }
    check_spatial(h, w)?;
    let mut data = Vec::with_capacity(2 * prev.len());
    data.extend_from_slice(prev.data());
    data.extend_from_slice(curr.data());
    Tensor::new(vec![INPUT_CHANNELS, h, w], data)
}

/// Records the encoder on `g` for an already stacked pair.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    params: &Bindings,
    cfg: &EncoderConfig,
    prefix: &str,
    pair: Var,
) -> Result<Var> {
    let [c, h, w] = *g.shape(pair) else {
        return Err(Error::shape("encoder", format!("input must be [6,H,W], got {:?}", g.shape(pair))));
    };
    if c != INPUT_CHANNELS {
        return Err(Error::shape("encoder", format!("input must have 6 channels, got {c}")));
    }
    check_spatial(h, w)?;
    let act = Activation::LeakyRelu(cfg.leaky_slope);
    let mut x = pair;
    for spec in &LAYERS {
        let wv = params.get(&weight_name(prefix, spec))?;
        let bv = params.get(&bias_name(prefix, spec))?;
        let z = g.conv2d(x, wv, Some(bv), spec.stride, spec.kernel / 2)?;
        x = g.activation(z, act);
    }
    Ok(x)
}

/// Feature map of one frame pair.
pub fn encode_pair<T: Real>(
    prev: &Tensor<T>,
    curr: &Tensor<T>,
    params: &ParamSet<T>,
    cfg: &EncoderConfig,
    prefix: &str,
) -> Result<Tensor<T>> {
    let pair = stack_pair(prev, curr)?;
    let mut g = Graph::new();
    let b = g.bind(params);
    let x = g.input(pair);
    let out = encode(&mut g, &b, cfg, prefix, x)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(h: usize, w: usize, phase: f64) -> Tensor<f32> {
        let data = (0..3 * h * w)
            .map(|i| (((i as f64) * 0.37 + phase).sin() * 0.5) as f32)
            .collect();
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn widths_scale_and_clamp() {
        assert_eq!(EncoderConfig::new(1.0).out_channels(), 1024);
        assert_eq!(EncoderConfig::new(0.125).widths(), [8, 16, 32, 32, 64, 64, 64, 64, 128]);
        assert_eq!(EncoderConfig::new(1.0 / 64.0).widths(), [1, 2, 4, 4, 8, 8, 8, 8, 16]);
        assert!(EncoderConfig::new(0.0).validate().is_err());
        assert!(EncoderConfig::new(1.5).validate().is_err());
    }

    #[test]
    fn small_input_shape() {
        let cfg = EncoderConfig::new(0.125);
        let mut p = ParamSet::new();
        init_params(&cfg, &mut p, "enc", 1).unwrap();
        let out = encode_pair(&frame(64, 64, 0.0), &frame(64, 64, 1.0), &p, &cfg, "enc").unwrap();
        assert_eq!(out.shape(), &[128, 1, 1]);
        assert!(out.all_finite());
    }

    #[test]
    fn downsampling_is_64_in_each_dimension() {
        let cfg = EncoderConfig::new(1.0 / 32.0);
        let mut p = ParamSet::new();
        init_params(&cfg, &mut p, "enc", 2).unwrap();
        for (h, w) in [(64, 128), (128, 64), (192, 64)] {
            let out = encode_pair(&frame(h, w, 0.2), &frame(h, w, 0.4), &p, &cfg, "enc").unwrap();
            assert_eq!(out.shape(), &[32, h / 64, w / 64]);
        }
        assert_eq!(EncoderConfig::new(1.0).output_shape(384, 1280).unwrap(), [1024, 6, 20]);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let cfg = EncoderConfig::new(0.0625);
        let mut p = ParamSet::new();
        init_params(&cfg, &mut p, "enc", 3).unwrap();
        for e in p.iter_mut() {
            e.value.data_mut().fill(0.0);
        }
        let out = encode_pair(&frame(64, 64, 0.0), &frame(64, 64, 2.0), &p, &cfg, "enc").unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = frame(64, 64, 0.0);
        assert!(stack_pair(&a, &frame(64, 128, 0.0)).is_err());
        assert!(stack_pair(&frame(48, 64, 0.0), &frame(48, 64, 0.0)).is_err());
        let gray = Tensor::<f32>::zeros(&[1, 64, 64]);
        assert!(stack_pair(&gray, &gray).is_err());
    }
}
