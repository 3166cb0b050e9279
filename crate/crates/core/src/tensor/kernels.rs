//! Graph-free numeric kernels shared by the tape's forward and backward passes.

use std::borrow::Cow;
use std::ops::Range;

use super::{chw, Real, Tensor};
use crate::error::{Error, Result};

/// Output spatial extent of a strided, zero-padded convolution.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Static description of one convolution: input extents plus kernel geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (ci, h, w) = chw(input, "conv2d")?;
        let (co, wci, kh, kw) = match *weight {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight must be [C_out,C_in,kH,kW], got {weight:?}"),
                ))
            }
        };
        if wci != ci {
            return Err(Error::shape(
                "conv2d",
                format!("input has {ci} channels but weight expects {wci} (weight {weight:?})"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let out_h = conv_out_extent(h, kh, stride, padding);
        let out_w = conv_out_extent(w, kw, stride, padding);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) => Ok(ConvGeometry {
                in_channels: ci,
                in_h: h,
                in_w: w,
                out_channels: co,
                kernel_h: kh,
                kernel_w: kw,
                stride,
                padding,
                out_h,
                out_w,
            }),
            _ => Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
            )),
        }
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Kernel rows and columns that overlap real input for at least one output
    /// position. Taps outside these ranges only ever multiply zero padding,
    /// which is common once feature maps shrink to a pixel or two.
    fn live_taps(&self) -> Taps {
        let live = |k: usize, out: usize, inp: usize| {
            let hit = |t: usize| {
                (0..out).any(|o| {
                    let i = (o * self.stride + t) as isize - self.padding as isize;
                    i >= 0 && i < inp as isize
                })
            };
            let first = (0..k).find(|&t| hit(t));
            match first {
                Some(a) => a..(a..k).rev().find(|&t| hit(t)).expect("first is live") + 1,
                None => 0..0,
            }
        };
        Taps {
            ky: live(self.kernel_h, self.out_h, self.in_h),
            kx: live(self.kernel_w, self.out_w, self.in_w),
        }
    }

    /// Unfolds the input into a `[C_in*|ky|*|kx|, H'*W']` patch matrix.
    fn im2col<T: Real>(&self, taps: &Taps, input: &[T]) -> Vec<T> {
        let p = self.positions();
        let mut col = vec![T::zero(); self.in_channels * taps.len() * p];
        let pad = self.padding as isize;
        let mut row = 0;
        for ci in 0..self.in_channels {
            let plane = &input[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for ky in taps.ky.clone() {
                for kx in taps.kx.clone() {
                    let dst = &mut col[row * p..(row + 1) * p];
                    row += 1;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        let out_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix >= 0 && ix < self.in_w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Scatter-adds a patch matrix back onto an input-shaped buffer.
    fn col2im<T: Real>(&self, taps: &Taps, col: &[T], out: &mut [T]) {
        let p = self.positions();
        let pad = self.padding as isize;
        let mut row = 0;
        for ci in 0..self.in_channels {
            let plane = &mut out[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for ky in taps.ky.clone() {
                for kx in taps.kx.clone() {
                    let src = &col[row * p..(row + 1) * p];
                    row += 1;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Sub-rectangle of kernel taps.
struct Taps {
    ky: Range<usize>,
    kx: Range<usize>,
}

impl Taps {
    fn len(&self) -> usize {
        self.ky.len() * self.kx.len()
    }

    fn is_full(&self, geo: &ConvGeometry) -> bool {
        self.ky.len() == geo.kernel_h && self.kx.len() == geo.kernel_w
    }

    /// Column offsets into a full `[C_in*kH*kW]` weight row, in patch-matrix order.
    fn weight_columns<'a>(&'a self, geo: &'a ConvGeometry) -> impl Iterator<Item = usize> + 'a {
        (0..geo.in_channels).flat_map(move |ci| {
            self.ky.clone().flat_map(move |ky| {
                self.kx.clone().map(move |kx| (ci * geo.kernel_h + ky) * geo.kernel_w + kx)
            })
        })
    }
}

/// Weight matrix restricted to the live taps, `[C_out, C_in*|ky|*|kx|]`.
fn live_weight<'a, T: Real>(geo: &ConvGeometry, taps: &Taps, weight: &'a [T]) -> Cow<'a, [T]> {
    if taps.is_full(geo) {
        return Cow::Borrowed(weight);
    }
    let full = geo.in_channels * geo.kernel_h * geo.kernel_w;
    let cols: Vec<usize> = taps.weight_columns(geo).collect();
    let mut out = Vec::with_capacity(geo.out_channels * cols.len());
    for co in 0..geo.out_channels {
        let row = &weight[co * full..(co + 1) * full];
        out.extend(cols.iter().map(|&c| row[c]));
    }
    Cow::Owned(out)
}

/// 2-D cross-correlation over a `[C,H,W]` input with zero padding.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [geo.out_channels] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match {} output channels", b.shape(), geo.out_channels),
            ));
        }
    }
    let data = conv_forward(&geo, input.data(), weight.data(), bias.map(|b| b.data()));
    Tensor::new(vec![geo.out_channels, geo.out_h, geo.out_w], data)
}

pub(crate) fn conv_forward<T: Real>(
    geo: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let p = geo.positions();
    let mut out = vec![T::zero(); geo.out_channels * p];
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(p).enumerate() {
            row.fill(b[co]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    if geo.is_pointwise() {
        let k = geo.in_channels;
        T::gemm(geo.out_channels, k, p, weight, k as isize, 1, input, p as isize, 1, beta, &mut out);
        return out;
    }
    let taps = geo.live_taps();
    let k = geo.in_channels * taps.len();
    if k == 0 {
        return out;
    }
    let col = geo.im2col(&taps, input);
    let w = live_weight(geo, &taps, weight);
    T::gemm(geo.out_channels, k, p, &w, k as isize, 1, &col, p as isize, 1, beta, &mut out);
    out
}

/// Gradients of a convolution with respect to input (optional), weight and bias.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv_backward<T: Real>(
    geo: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let p = geo.positions();
    let co = geo.out_channels;
    let full = geo.in_channels * geo.kernel_h * geo.kernel_w;
    let bias: Vec<T> = grad_out.chunks(p).map(|row| row.iter().copied().sum()).collect();
    let taps = if geo.is_pointwise() {
        Taps { ky: 0..1, kx: 0..1 }
    } else {
        geo.live_taps()
    };
    let k = geo.in_channels * taps.len();
    let mut dx = need_input.then(|| vec![T::zero(); geo.in_channels * geo.in_h * geo.in_w]);
    let mut dw = vec![T::zero(); co * full];
    if k == 0 {
        return ConvGrads { input: dx, weight: dw, bias };
    }
    let col = if geo.is_pointwise() {
        Cow::Borrowed(input)
    } else {
        Cow::Owned(geo.im2col(&taps, input))
    };

    // dW[co,k] = dY[co,p] * col^T
    let full_taps = taps.is_full(geo);
    let mut dw_live = if full_taps { Vec::new() } else { vec![T::zero(); co * k] };
    let target = if full_taps { &mut dw } else { &mut dw_live };
    T::gemm(co, p, k, grad_out, p as isize, 1, &col, 1, p as isize, T::zero(), target);
    if !full_taps {
        let cols: Vec<usize> = taps.weight_columns(geo).collect();
        for (o, src) in dw_live.chunks(k).enumerate() {
            let row = &mut dw[o * full..(o + 1) * full];
            for (&c, &v) in cols.iter().zip(src) {
                row[c] = v;
            }
        }
    }

    if let Some(dx) = dx.as_mut() {
        // dcol[k,p] = W^T * dY
        let w = live_weight(geo, &taps, weight);
        if geo.is_pointwise() {
            T::gemm(k, co, p, &w, 1, k as isize, grad_out, p as isize, 1, T::zero(), dx);
        } else {
            let mut dcol = vec![T::zero(); k * p];
            T::gemm(k, co, p, &w, 1, k as isize, grad_out, p as isize, 1, T::zero(), &mut dcol);
            geo.col2im(&taps, &dcol, dx);
        }
    }

    ConvGrads { input: dx, weight: dw, bias }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Cosine similarity with the norm product guarded by `eps`. A zero vector
/// on either side yields exactly zero.
pub fn guarded_cosine<T: Real>(a: &[T], b: &[T], eps: T) -> T {
    let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt() + eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        input: &Tensor<f64>,
        weight: &Tensor<f64>,
        bias: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let [ci, h, w] = input.shape() else { panic!() };
        let [co, _, kh, kw] = weight.shape() else { panic!() };
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[*co, oh, ow]);
        for o in 0..*co {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias.data()[o];
                    for c in 0..*ci {
                        for ky in 0..*kh {
                            for kx in 0..*kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= *h as isize || ix >= *w as isize {
                                    continue;
                                }
                                acc += input.data()[(c * h + iy as usize) * w + ix as usize]
                                    * weight.data()[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.data_mut()[(o * oh + y) * ow + x] = acc;
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| ((i * 7919 % 23) as f64 - 11.0) * scale).collect();
        Tensor::new(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = ramp(&[1, 5, 4], 0.3);
        let w = Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn ones_kernel_sums_patch() {
        let x = Tensor::<f64>::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[1])), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn flow_encoder_first_layer_shape() {
        let geo = ConvGeometry::new(&[6, 64, 64], &[64, 6, 7, 7], 2, 3).unwrap();
        assert_eq!((geo.out_channels, geo.out_h, geo.out_w), (64, 32, 32));
    }

    #[test]
    fn channel_mismatch_is_descriptive() {
        let x = Tensor::<f32>::zeros(&[3, 8, 8]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("3 channels"), "{err}");
        assert!(err.contains("expects 2"), "{err}");
    }

    #[test]
    fn matches_naive_loops_across_geometries() {
        for &(ci, co, h, w, k, s, p) in &[
            (2, 3, 7, 6, 3, 1, 1),
            (3, 2, 9, 9, 5, 2, 2),
            (1, 4, 8, 5, 3, 2, 0),
            (4, 2, 1, 1, 3, 1, 1),
            (2, 2, 6, 6, 1, 1, 0),
            (2, 1, 11, 13, 7, 2, 3),
            (3, 2, 2, 2, 3, 2, 1),
            (2, 2, 2, 3, 5, 1, 2),
            (1, 2, 1, 1, 1, 2, 1),
        ] {
            let x = ramp(&[ci, h, w], 0.1);
            let wt = ramp(&[co, ci, k, k], 0.05);
            let b = ramp(&[co], 0.2);
            let fast = conv2d(&x, &wt, Some(&b), s, p).unwrap();
            let slow = naive_conv(&x, &wt, &b, s, p);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn output_extent_follows_floor_formula() {
        for h in 1..20 {
            for k in 1..6 {
                for s in 1..4 {
                    for p in 0..4 {
                        let got = conv_out_extent(h, k, s, p);
                        if k > h + 2 * p {
                            assert_eq!(got, None);
                        } else {
                            assert_eq!(got, Some((h + 2 * p - k) / s + 1));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(1.0f64) - 0.731_058_578_63).abs() < 1e-11);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        assert_eq!(guarded_cosine(&[0.0f64, 0.0], &[1.0, 2.0], 1e-8), 0.0);
        let c = guarded_cosine(&[1.0f64, 2.0], &[2.0, 4.0], 1e-8);
        assert!((c - 1.0).abs() < 1e-8);
    }
}
