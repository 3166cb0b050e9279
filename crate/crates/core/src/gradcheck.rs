//! Central finite-difference checks of every differentiable operation, in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};

use crate::convlstm;
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::guidance;
use crate::model::{self, record_pose_chain_loss, record_sequence, ModelConfig, Variant};
use crate::pose::{Pose, Se3};
use crate::tensor::{seed_for_name, Activation, Bindings, Graph, ParamSet, SeededRng, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Floor of the relative-error denominator.
pub const ABS_FLOOR: f64 = 1e-6;

pub const SUITES: [&str; 7] = ["tensor", "convlstm", "guidance", "head", "loss", "encoder", "model"];

/// Outcome of one checked case.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub suite: &'static str,
    pub case: String,
    /// Number of parameter entries perturbed.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Entry with the largest error, as `name[index]`.
    pub worst: String,
    /// Entries left out because a probe moved a ReLU input across zero.
    pub kink_skipped: usize,
}

impl CheckReport {
    /// Within tolerance, with at least nine in ten probes usable.
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.kink_skipped * 10 <= self.checked + self.kink_skipped
    }
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &Bindings) -> Result<Var> + 'a;

/// Reduces any output to a scalar with fixed random weights so every output
/// entry contributes a distinct amount.
fn reduce(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    if g.value(out).is_scalar() {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let mut rng = SeededRng::seed_from_u64(seed_for_name(seed, "reduce"));
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let wv = g.input(Tensor::new(shape, w)?);
    let prod = g.mul(out, wv)?;
    Ok(g.sum(prod))
}

fn loss_of(params: &ParamSet<f64>, build: &Build, seed: u64) -> Result<(f64, Vec<bool>)> {
    let mut g = Graph::new();
    let b = g.bind(params);
    let out = build(&mut g, &b)?;
    let l = reduce(&mut g, out, seed)?;
    Ok((g.value(l).item(), g.kink_pattern()))
}

/// Compares analytic gradients of every trainable entry of `params` with
/// central differences, perturbing at most `per_tensor` entries per tensor.
/// A probe whose `±FD_STEP` evaluations put some ReLU input on a different
/// side of zero than the unperturbed point measures the kink rather than the
/// derivative; such entries are counted in `kink_skipped` instead.
pub fn check_case(
    suite: &'static str,
    case: &str,
    params: &ParamSet<f64>,
    per_tensor: usize,
    build: &Build,
) -> Result<CheckReport> {
    let seed = seed_for_name(0, case);
    let mut g = Graph::new();
    let b = g.bind(params);
    let out = build(&mut g, &b)?;
    let l = reduce(&mut g, out, seed)?;
    let grads = g.backward(l)?;
    let base_pattern = g.kink_pattern();

    let mut rng = SeededRng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = CheckReport {
        suite,
        case: case.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        kink_skipped: 0,
    };
    for entry in params.iter().filter(|e| e.trainable) {
        let n = entry.value.len();
        let idx: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let analytic = grads
            .get(&entry.name)
            .ok_or_else(|| Error::Numerical(format!("no gradient for {}", entry.name)))?;
        for i in idx {
            let orig = entry.value.data()[i];
            work.get_mut(&entry.name).expect("cloned").data_mut()[i] = orig + FD_STEP;
            let (up, up_pattern) = loss_of(&work, build, seed)?;
            work.get_mut(&entry.name).expect("cloned").data_mut()[i] = orig - FD_STEP;
            let (down, down_pattern) = loss_of(&work, build, seed)?;
            work.get_mut(&entry.name).expect("cloned").data_mut()[i] = orig;
            if up_pattern != base_pattern || down_pattern != base_pattern {
                report.kink_skipped += 1;
                continue;
            }
            let fd = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(ABS_FLOOR);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = err;
                report.worst = format!("{}[{i}] analytic {a:e} fd {fd:e}", entry.name);
            }
        }
    }
    Ok(report)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("positive extents")
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, 0.1, 1.0, seed).map(|v| if (v * 1e4) as i64 % 2 == 0 { v } else { -v })
}

fn set(entries: &[(&str, Tensor<f64>)]) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (n, t) in entries {
        p.insert(n, t.clone(), true).expect("distinct names");
    }
    p
}

fn tensor_suite() -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for (case, stride, pad) in [("conv2d_s1_p1", 1, 1), ("conv2d_s2_p0", 2, 0), ("conv2d_s2_p2", 2, 2)] {
        let p = set(&[
            ("x", uniform(&[3, 7, 6], -1.0, 1.0, 1)),
            ("w", uniform(&[4, 3, 3, 3], -1.0, 1.0, 2)),
            ("b", uniform(&[4], -1.0, 1.0, 3)),
        ]);
        out.push(check_case("tensor", case, &p, 64, &|g, b| {
            g.conv2d(b.get("x")?, b.get("w")?, Some(b.get("b")?), stride, pad)
        })?);
    }
    let p = set(&[("x", uniform(&[2, 5, 5], -1.0, 1.0, 4)), ("w", uniform(&[3, 2, 1, 1], -1.0, 1.0, 5))]);
    out.push(check_case("tensor", "conv2d_1x1_nobias", &p, 64, &|g, b| {
        g.conv2d(b.get("x")?, b.get("w")?, None, 1, 0)
    })?);

    for (case, kind) in [
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
        ("relu", Activation::Relu),
        ("leaky_relu", Activation::LeakyRelu(0.1)),
    ] {
        let p = set(&[("x", away_from_zero(&[2, 3, 4], 6))]);
        out.push(check_case("tensor", case, &p, 64, &|g, b| Ok(g.activation(b.get("x")?, kind)))?);
    }

    let p = set(&[("a", uniform(&[3, 4], -1.0, 1.0, 7)), ("b", uniform(&[3, 4], -1.0, 1.0, 8))]);
    out.push(check_case("tensor", "add_sub_mul", &p, 64, &|g, b| {
        let (x, y) = (b.get("a")?, b.get("b")?);
        let s = g.add(x, y)?;
        let d = g.sub(x, y)?;
        g.mul(s, d)
    })?);

    let p = set(&[
        ("x", uniform(&[3, 4, 5], -1.0, 1.0, 9)),
        ("sc", uniform(&[3], 0.1, 1.0, 10)),
        ("sp", uniform(&[4, 5], 0.1, 1.0, 11)),
    ]);
    out.push(check_case("tensor", "scale_channels_positions", &p, 64, &|g, b| {
        let y = g.scale_channels(b.get("x")?, b.get("sc")?)?;
        g.scale_positions(y, b.get("sp")?)
    })?);

    let p = set(&[
        ("x", uniform(&[4, 3, 5], -1.0, 1.0, 12)),
        ("w", uniform(&[6, 4], -1.0, 1.0, 13)),
        ("b", uniform(&[6], -1.0, 1.0, 14)),
    ]);
    out.push(check_case("tensor", "gap_linear_narrow_concat", &p, 64, &|g, b| {
        let pooled = g.global_avg_pool(b.get("x")?)?;
        let y = g.linear(pooled, b.get("w")?, b.get("b")?)?;
        let lo = g.narrow(y, 0, 3)?;
        let hi = g.narrow(y, 3, 3)?;
        let prod = g.mul(lo, hi)?;
        g.concat(&[prod, y])
    })?);

    let p = set(&[("x", uniform(&[5, 3, 4], -1.0, 1.0, 15)), ("o", uniform(&[5, 3, 4], -1.0, 1.0, 16))]);
    out.push(check_case("tensor", "column_cosine", &p, 64, &|g, b| {
        g.column_cosine(b.get("x")?, b.get("o")?, guidance::COSINE_EPS)
    })?);
    out.push(check_case("tensor", "channel_cosine", &p, 64, &|g, b| {
        g.channel_cosine(b.get("x")?, b.get("o")?, guidance::COSINE_EPS)
    })?);
    Ok(out)
}

fn convlstm_suite() -> Result<Vec<CheckReport>> {
    let c = 3;
    let mut p = set(&[
        ("x1", uniform(&[c, 4, 5], -1.0, 1.0, 20)),
        ("x2", uniform(&[c, 4, 5], -1.0, 1.0, 21)),
    ]);
    convlstm::init_params(&mut p, "lstm", c, 22)?;
    let bias = p.get_mut(&convlstm::bias_name("lstm")).expect("inserted");
    *bias = uniform(bias.shape(), -0.5, 0.5, 23);
    let mut out = vec![check_case("convlstm", "zero_state_step", &p, 40, &|g, b| {
        let (o, _) = convlstm::step(g, b, "lstm", b.get("x1")?, None)?;
        Ok(o)
    })?];
    out.push(check_case("convlstm", "two_steps_hidden_and_cell", &p, 40, &|g, b| {
        let (_, s) = convlstm::step(g, b, "lstm", b.get("x1")?, None)?;
        let (o, s2) = convlstm::step(g, b, "lstm", b.get("x2")?, Some(s))?;
        let both = g.mul(o, s2.cell)?;
        g.add(both, o)
    })?);
    Ok(out)
}

fn guidance_suite() -> Result<Vec<CheckReport>> {
    let shape = [8, 3, 4];
    let mut p = set(&[("x", uniform(&shape, -1.0, 1.0, 30)), ("o", uniform(&shape, -1.0, 1.0, 31))]);
    guidance::init_senet_params(&mut p, "se", 8, 4, 32)?;
    for name in guidance::senet_names("se") {
        let t = p.get_mut(&name).expect("inserted");
        *t = away_from_zero(t.shape(), seed_for_name(33, &name));
    }
    let mut out = vec![check_case("guidance", "senet", &p, 64, &|g, b| {
        Ok(guidance::senet(g, b, "se", b.get("x")?, b.get("o")?)?.0)
    })?];
    out.push(check_case("guidance", "pointwise", &p, 96, &|g, b| {
        Ok(guidance::pointwise(g, b.get("x")?, b.get("o")?)?.0)
    })?);
    out.push(check_case("guidance", "channelwise", &p, 96, &|g, b| {
        Ok(guidance::channelwise(g, b.get("x")?, b.get("o")?)?.0)
    })?);
    Ok(out)
}

fn head_suite() -> Result<Vec<CheckReport>> {
    let mut p = set(&[("o", uniform(&[5, 3, 4], -1.0, 1.0, 40))]);
    model::init_head(&mut p, "head", 5, 3, 41)?;
    let bias = p.get_mut("head.bias").expect("inserted");
    *bias = uniform(&[3], -1.0, 1.0, 42);
    Ok(vec![check_case("head", "gap_fc", &p, 64, &|g, b| {
        model::regress(g, b, "head", b.get("o")?)
    })?])
}

fn loss_suite() -> Result<Vec<CheckReport>> {
    let n = 5;
    let gt_rel: Vec<Pose> = (0..n)
        .map(|i| Pose::new([0.02 * i as f64, -0.03, 0.1 + 0.05 * i as f64], [0.8, 0.1 * i as f64, -0.05]))
        .collect();
    let origin = Pose::new([0.1, -0.2, 0.7], [1.0, 2.0, 0.5]).to_se3();
    let mut gt = vec![origin];
    for r in &gt_rel {
        let next = gt.last().expect("non-empty").compose(&r.to_se3());
        gt.push(next);
    }
    // Predictions perturbed so no error term sits at its non-differentiable zero.
    let rot = uniform(&[3 * n], -0.2, 0.2, 50);
    let trans = uniform(&[3 * n], -1.0, 1.0, 51);
    let mut out = Vec::new();
    for k in [100.0, 10.0] {
        let p = set(&[("rot", rot.clone()), ("trans", trans.clone())]);
        let gt: Vec<Se3> = gt.clone();
        out.push(check_case("loss", &format!("pose_chain_k{k}"), &p, 64, &move |g, b| {
            record_pose_chain_loss(g, b.get("rot")?, b.get("trans")?, &gt, k)
        })?);
    }
    Ok(out)
}

fn tiny_frames(n: usize, seed: u64) -> Vec<Tensor<f64>> {
    (0..n).map(|i| uniform(&[3, 64, 64], -0.5, 0.5, seed_for_name(seed, &format!("frame{i}")))).collect()
}

fn encoder_suite() -> Result<Vec<CheckReport>> {
    let cfg = EncoderConfig::new(1.0 / 64.0);
    let mut p = ParamSet::new();
    encoder::init_params(&cfg, &mut p, "enc", 60)?;
    for e in p.iter_mut() {
        if e.name.ends_with(".bias") {
            e.value = uniform(e.value.shape(), -0.1, 0.1, seed_for_name(61, &e.name));
        }
    }
    let frames = tiny_frames(2, 62);
    let pair = encoder::stack_pair(&frames[0], &frames[1])?;
    Ok(vec![check_case("encoder", "flownet_tiny", &p, 12, &|g, b| {
        let x = g.input(pair.clone());
        encoder::encode(g, b, &cfg, "enc", x)
    })?])
}

fn model_suite() -> Result<Vec<CheckReport>> {
    let frames = tiny_frames(3, 70);
    let gt: Vec<Se3> = (0..3).map(|i| Se3::planar(0.1 * i as f64, 0.5 * i as f64, 0.1)).collect();
    let mut out = Vec::new();
    for variant in Variant::ALL {
        let mut cfg = ModelConfig::new(variant, 1.0 / 64.0);
        cfg.sequence_length = 3;
        let mut p: ParamSet<f64> = model::init_params(&cfg, 71)?;
        for e in p.iter_mut() {
            if e.name.ends_with("bias") {
                e.value = uniform(e.value.shape(), -0.1, 0.1, seed_for_name(72, &e.name));
            }
        }
        let (frames, gt) = (frames.clone(), gt.clone());
        out.push(check_case("model", variant.name(), &p, 6, &move |g, b| {
            let seq = record_sequence(g, b, &cfg, &frames)?;
            record_pose_chain_loss(g, seq.rotations, seq.translations, &gt, cfg.k)
        })?);
    }
    Ok(out)
}

pub fn run_suite(name: &str) -> Result<Vec<CheckReport>> {
    match name {
        "tensor" => tensor_suite(),
        "convlstm" => convlstm_suite(),
        "guidance" => guidance_suite(),
        "head" => head_suite(),
        "loss" => loss_suite(),
        "encoder" => encoder_suite(),
        "model" => model_suite(),
        other => Err(Error::InvalidArgument(format!(
            "unknown gradcheck suite {other:?}; expected one of {}",
            SUITES.join(", ")
        ))),
    }
}

pub fn run_all() -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for s in SUITES {
        out.extend(run_suite(s)?);
    }
    Ok(out)
}
