use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::{init_params, record_pose_chain_loss, record_sequence, ModelConfig};
use crate::error::{Error, Result};
use crate::pose::Se3;
use crate::tensor::{poly_lr, seed_for_name, AdamConfig, AdamState, Graph, ParamSet, Real, SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub lr_power: f64,
    /// Number of optimizer steps.
    pub iterations: usize,
    /// Windows averaged per step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Drives parameter init and the window order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            lr_power: 0.9,
            iterations: 1000,
            batch_size: 4,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        Ok(())
    }
}

/// One training window: `frames[i]` is a `[3,H,W]` image and `poses[i]` its
/// absolute ground-truth pose.
#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub frames: Vec<Tensor<T>>,
    pub poses: Vec<Se3>,
}

/// Cuts a sequence into windows of `window` views. Consecutive windows
/// share one view, so every frame pair is used exactly once.
pub fn prepare_samples<T: Real>(frames: &[Tensor<T>], poses: &[Se3], window: usize) -> Result<Vec<TrainSample<T>>> {
    if frames.len() != poses.len() {
        return Err(Error::InvalidArgument(format!(
            "{} frames but {} poses",
            frames.len(),
            poses.len()
        )));
    }
    if window < 2 {
        return Err(Error::InvalidArgument(format!("window must be at least 2, got {window}")));
    }
    if frames.len() < window {
        return Err(Error::InvalidArgument(format!(
            "sequence of {} frames is shorter than the window of {window}",
            frames.len()
        )));
    }
    let stride = window - 1;
    Ok((0..=frames.len() - window)
        .step_by(stride)
        .map(|s| TrainSample {
            frames: frames[s..s + window].to_vec(),
            poses: poses[s..s + window].to_vec(),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    /// 0-based optimizer step.
    pub iteration: usize,
    /// Mean loss over the step's batch, before the update.
    pub loss: f64,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub params: ParamSet<T>,
    pub optimizer: AdamState<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn fresh(model: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&model, seed)?;
        let optimizer = AdamState::new(&params);
        Ok(Checkpoint {
            model,
            params,
            optimizer,
        })
    }
}

/// Loss and parameter gradients of one window.
pub fn window_gradients<T: Real>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    sample: &TrainSample<T>,
) -> Result<(f64, Vec<(String, Tensor<T>)>)> {
    let mut g = Graph::new();
    let b = g.bind(params);
    let seq = record_sequence(&mut g, &b, cfg, &sample.frames)?;
    let loss = record_pose_chain_loss(&mut g, seq.rotations, seq.translations, &sample.poses, cfg.k)?;
    let value = g.value(loss).item().f64();
    Ok((value, g.backward(loss)?.into_named()))
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::seed_from_u64(seed_for_name(seed, &format!("epoch{epoch}")));
    order.shuffle(&mut rng);
    order
}

/// Trains a freshly initialized model.
pub fn train<T: Real>(
    model: &ModelConfig,
    tc: &TrainConfig,
    samples: &[TrainSample<T>],
) -> Result<(Checkpoint<T>, Vec<LossRecord>)> {
    let ck = Checkpoint::fresh(model.clone(), tc.seed)?;
    train_with(ck, tc, samples, |_| true)
}

/// Continues training `ck` until its optimizer has taken `tc.iterations`
/// steps. `progress` sees every loss record as it is produced and may stop
/// the run early by returning `false`; the learning-rate schedule always
/// spans `tc.iterations`.
pub fn train_with<T: Real>(
    mut ck: Checkpoint<T>,
    tc: &TrainConfig,
    samples: &[TrainSample<T>],
    mut progress: impl FnMut(&LossRecord) -> bool,
) -> Result<(Checkpoint<T>, Vec<LossRecord>)> {
    tc.validate()?;
    ck.model.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training windows".into()));
    }
    let n = samples.len();
    let start = ck.optimizer.step as usize;
    let mut records = Vec::with_capacity(tc.iterations.saturating_sub(start));
    let mut cached: Option<(usize, Vec<usize>)> = None;

    for iter in start..tc.iterations {
        let mut acc: Option<Vec<(String, Tensor<T>)>> = None;
        let mut total = 0.0;
        for j in 0..tc.batch_size {
            let pos = iter * tc.batch_size + j;
            let epoch = pos / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, epoch_order(tc.seed, epoch, n)));
            }
            let idx = cached.as_ref().expect("set above").1[pos % n];
            let (loss, grads) = window_gradients(&ck.params, &ck.model, &samples[idx])?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss became {loss} at iteration {iter}")));
            }
            total += loss;
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => {
                    for ((_, dst), (_, src)) in a.iter_mut().zip(&grads) {
                        dst.add_assign(src);
                    }
                }
            }
        }
        let scale = T::of(1.0 / tc.batch_size as f64);
        let mut grads = acc.expect("batch_size > 0");
        for (name, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * scale);
            g.check_finite(name).map_err(|e| Error::Numerical(format!("iteration {iter}: {e}")))?;
        }
        let lr = poly_lr(iter, tc.iterations, tc.base_lr, tc.lr_power)?;
        ck.optimizer.step(&mut ck.params, &grads, lr, &tc.adam)?;
        let rec = LossRecord {
            iteration: iter,
            loss: total / tc.batch_size as f64,
        };
        records.push(rec);
        if !progress(&rec) {
            break;
        }
    }
    Ok((ck, records))
}
