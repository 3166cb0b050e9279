//! Decoupled pose loss over the absolute pose of every view of a window:
//! `sum_i 1/i * (|p̂_i - p_i| + k |φ̂_i - φ_i|)`.
//!
//! The network emits per-step relative motions; they are chained from the
//! window's first ground-truth pose before the loss is taken, and the
//! backward rule differentiates through that chaining and through the Euler
//! decomposition of the chained rotations.

use nalgebra::{Matrix3, Vector3};

use super::PoseEstimate;
use crate::error::{Error, Result};
use crate::pose::{
    euler_to_rotation, euler_to_rotation_jacobian, rotation_to_euler, rotation_to_euler_vjp,
    wrap_angle, Pose, Se3,
};
use crate::tensor::{CustomBackward, Graph, Real, Tensor, Var};

/// Dataset-dependent rotation weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossProfile {
    /// Outdoor driving sequences.
    Kitti,
    /// Indoor handheld sequences.
    Icl,
}

impl LossProfile {
    pub fn k(self) -> f64 {
        match self {
            LossProfile::Kitti => 100.0,
            LossProfile::Icl => 10.0,
        }
    }
}

fn euler_error(pred: &Vector3<f64>, truth: &Vector3<f64>) -> Vector3<f64> {
    (pred - truth).map(wrap_angle)
}

/// Loss over absolute estimates of views `1..=t` against absolute ground truth.
/// Angle differences are wrapped into `(-π, π]`.
pub fn total_loss(estimates: &[PoseEstimate], ground_truth: &[Pose], k: f64) -> Result<f64> {
    if estimates.len() != ground_truth.len() {
        return Err(Error::shape(
            "total_loss",
            format!("{} estimates vs {} ground-truth poses", estimates.len(), ground_truth.len()),
        ));
    }
    Ok(estimates
        .iter()
        .zip(ground_truth)
        .enumerate()
        .map(|(i, (est, gt))| {
            let trans = (est.translation - gt.translation).norm();
            let rot = euler_error(&est.rotation, &gt.euler).norm();
            (trans + k * rot) / (i + 1) as f64
        })
        .sum())
}

struct Chain {
    /// Absolute rotations, index 0 is the origin.
    rotations: Vec<Matrix3<f64>>,
    translations: Vec<Vector3<f64>>,
    steps: Vec<Matrix3<f64>>,
}

fn chain(rot: &[f64], trans: &[f64], origin: &Se3) -> Chain {
    let n = rot.len() / 3;
    let mut c = Chain {
        rotations: vec![origin.rotation],
        translations: vec![origin.translation],
        steps: Vec::with_capacity(n),
    };
    for i in 0..n {
        let e = euler_to_rotation(&Vector3::new(rot[3 * i], rot[3 * i + 1], rot[3 * i + 2]));
        let p = Vector3::new(trans[3 * i], trans[3 * i + 1], trans[3 * i + 2]);
        let (r_prev, t_prev) = (c.rotations[i], c.translations[i]);
        c.rotations.push(r_prev * e);
        c.translations.push(r_prev * p + t_prev);
        c.steps.push(e);
    }
    c
}

struct Targets {
    euler: Vec<Vector3<f64>>,
    translation: Vec<Vector3<f64>>,
}

fn targets(ground_truth: &[Se3]) -> Targets {
    Targets {
        euler: ground_truth.iter().map(|p| rotation_to_euler(&p.rotation).euler).collect(),
        translation: ground_truth.iter().map(|p| p.translation).collect(),
    }
}

/// Loss of relative predictions (flattened `[n*3]` Euler and translation)
/// against the `n + 1` ground-truth poses of a window.
pub fn pose_chain_loss(rot: &[f64], trans: &[f64], ground_truth: &[Se3], k: f64) -> Result<f64> {
    check_lengths(rot.len(), trans.len(), ground_truth.len())?;
    let c = chain(rot, trans, &ground_truth[0]);
    let tg = targets(ground_truth);
    let mut loss = 0.0;
    for i in 1..c.rotations.len() {
        let euler = rotation_to_euler(&c.rotations[i]).euler;
        let rot_err = euler_error(&euler, &tg.euler[i]).norm();
        let trans_err = (c.translations[i] - tg.translation[i]).norm();
        loss += (trans_err + k * rot_err) / i as f64;
    }
    Ok(loss)
}

fn check_lengths(rot: usize, trans: usize, gt: usize) -> Result<()> {
    if rot != trans || rot % 3 != 0 || rot == 0 || rot / 3 + 1 != gt {
        return Err(Error::shape(
            "pose_chain_loss",
            format!("{rot} rotation and {trans} translation values for {gt} ground-truth poses"),
        ));
    }
    Ok(())
}

struct PoseChainBackward {
    ground_truth: Vec<Se3>,
    k: f64,
}

impl<T: Real> CustomBackward<T> for PoseChainBackward {
    fn name(&self) -> &'static str {
        "pose_chain_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let rot = inputs[0].to_f64_vec();
        let trans = inputs[1].to_f64_vec();
        let (grot, gtrans) = chain_vjp(&rot, &trans, &self.ground_truth, self.k, grad_out.item().f64());
        Ok(vec![
            Some(Tensor::from_f64(inputs[0].shape(), &grot)?),
            Some(Tensor::from_f64(inputs[1].shape(), &gtrans)?),
        ])
    }
}

fn unit_or_zero(v: &Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        Vector3::zeros()
    }
}

fn chain_vjp(rot: &[f64], trans: &[f64], gt: &[Se3], k: f64, scale: f64) -> (Vec<f64>, Vec<f64>) {
    let c = chain(rot, trans, &gt[0]);
    let tg = targets(gt);
    let n = c.steps.len();
    let mut g_r = vec![Matrix3::<f64>::zeros(); n + 1];
    let mut g_t = vec![Vector3::<f64>::zeros(); n + 1];
    for i in 1..=n {
        let w = scale / i as f64;
        g_t[i] += w * unit_or_zero(&(c.translations[i] - tg.translation[i]));
        let euler = rotation_to_euler(&c.rotations[i]).euler;
        let dir = unit_or_zero(&euler_error(&euler, &tg.euler[i]));
        g_r[i] += rotation_to_euler_vjp(&c.rotations[i], &(w * k * dir));
    }

    let mut grot = vec![0.0; 3 * n];
    let mut gtrans = vec![0.0; 3 * n];
    for i in (1..=n).rev() {
        let r_prev = c.rotations[i - 1];
        let p = Vector3::new(trans[3 * (i - 1)], trans[3 * (i - 1) + 1], trans[3 * (i - 1) + 2]);
        // t_i = R_{i-1} p_i + t_{i-1}
        let gp = r_prev.transpose() * g_t[i];
        let gt_i = g_t[i];
        g_r[i - 1] += gt_i * p.transpose();
        g_t[i - 1] += gt_i;
        // R_i = R_{i-1} E_i
        let e = c.steps[i - 1];
        let gr_i = g_r[i];
        g_r[i - 1] += gr_i * e.transpose();
        let g_e = r_prev.transpose() * gr_i;
        let angles = Vector3::new(rot[3 * (i - 1)], rot[3 * (i - 1) + 1], rot[3 * (i - 1) + 2]);
        let jac = euler_to_rotation_jacobian(&angles);
        for (a, j) in jac.iter().enumerate() {
            grot[3 * (i - 1) + a] = g_e.component_mul(j).sum();
        }
        gtrans[3 * (i - 1)..3 * i].copy_from_slice(gp.as_slice());
    }
    (grot, gtrans)
}

/// Records the loss on `g`. `rotations` and `translations` are the flattened
/// `[n*3]` relative predictions; `ground_truth` holds the `n + 1` absolute
/// poses of the window, the first one being the chaining origin.
pub fn record_pose_chain_loss<T: Real>(
    g: &mut Graph<T>,
    rotations: Var,
    translations: Var,
    ground_truth: &[Se3],
    k: f64,
) -> Result<Var> {
    let rot = g.value(rotations).to_f64_vec();
    let trans = g.value(translations).to_f64_vec();
    let loss = pose_chain_loss(&rot, &trans, ground_truth, k)?;
    let rule = PoseChainBackward {
        ground_truth: ground_truth.to_vec(),
        k,
    };
    Ok(g.custom(&[rotations, translations], Tensor::scalar(T::of(loss)), Box::new(rule)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(frame: usize, r: [f64; 3], t: [f64; 3]) -> PoseEstimate {
        PoseEstimate {
            frame,
            rotation: r.into(),
            translation: t.into(),
        }
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let gt = vec![Pose::new([0.1, 0.0, 0.2], [1.0, 2.0, 3.0]), Pose::new([0.0, 0.3, 0.0], [0.0, 0.0, 1.0])];
        let e: Vec<_> = gt.iter().enumerate().map(|(i, p)| est(i + 1, p.euler.into(), p.translation.into())).collect();
        assert_eq!(total_loss(&e, &gt, 100.0).unwrap(), 0.0);
    }

    #[test]
    fn single_view_hand_value() {
        let gt = vec![Pose::identity()];
        let e = vec![est(1, [0.06, 0.0, 0.08], [0.0, 0.12, 0.16])];
        // |dphi| = 0.1, |dp| = 0.2
        let l = total_loss(&e, &gt, LossProfile::Kitti.k()).unwrap();
        assert!((l - 10.2).abs() < 1e-12, "{l}");
        let e = vec![est(1, [0.1, 0.0, 0.0], [0.2, 0.0, 0.0])];
        assert_eq!(total_loss(&e, &gt, 100.0).unwrap(), 10.2);
    }

    #[test]
    fn profiles() {
        assert_eq!(LossProfile::Kitti.k(), 100.0);
        assert_eq!(LossProfile::Icl.k(), 10.0);
    }

    #[test]
    fn later_views_weighted_by_inverse_index() {
        let gt = vec![Pose::identity(), Pose::identity()];
        let e = vec![est(1, [0.0; 3], [0.0; 3]), est(2, [0.0; 3], [1.0, 0.0, 0.0])];
        assert_eq!(total_loss(&e, &gt, 1.0).unwrap(), 0.5);
        assert!(total_loss(&e[..1], &gt, 1.0).is_err());
    }

    #[test]
    fn chain_loss_zero_on_ground_truth_relatives() {
        let gt: Vec<Se3> = (0..5).map(|i| Se3::planar(0.1 * i as f64, 0.5 * i as f64, 0.2 * i as f64)).collect();
        let mut rot = Vec::new();
        let mut trans = Vec::new();
        for w in gt.windows(2) {
            let rel = Pose::from_se3(&w[0].between(&w[1]));
            rot.extend(rel.euler.iter());
            trans.extend(rel.translation.iter());
        }
        let l = pose_chain_loss(&rot, &trans, &gt, 100.0).unwrap();
        assert!(l < 1e-12, "{l}");
        assert!(pose_chain_loss(&rot[..3], &trans, &gt, 100.0).is_err());
    }
}
