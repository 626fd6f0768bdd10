//! Three-step grasp retargeting: pose initialization, fingertip alignment,
//! and interaction refinement.
//!
//! A source grasp specification carries per-finger fingertip targets, a
//! wrist frame, and target contact parts. Step 1 copies the wrist frame
//! and sets joints mid-range. Step 2 aligns fingertips to targets by
//! gradient descent over the full pose. Step 3 improves physical quality
//! (penetration, self-penetration, joint limits) while a contact-map term
//! keeps the contact area of the step-2 result; the root translation is
//! held constant throughout step 3.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};
use crate::hand::{GraspPose, HandModel};
use crate::losses;
use crate::object::ObjectModel;
use crate::optim::{LrSchedule, OptimState};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug)]
pub struct SourceGraspSpec {
    /// Per-finger fingertip targets, world frame (meters).
    pub fingertip_targets: Vec<Vec3>,
    pub wrist_rotation: Mat3,
    pub wrist_translation: Vec3,
    /// Target contact part per finger.
    pub contact_parts: Vec<String>,
}

impl SourceGraspSpec {
    /// Check the spec against a hand and object: finger count matches and
    /// every target lies within 2 cm of the object surface.
    pub fn validate(&self, hand: &HandModel, obj: &ObjectModel) -> Result<()> {
        if self.fingertip_targets.len() != hand.finger_count()
            || self.contact_parts.len() != hand.finger_count()
        {
            return Err(Error::Contract(format!(
                "spec has {} targets / {} parts for a {}-finger hand",
                self.fingertip_targets.len(),
                self.contact_parts.len(),
                hand.finger_count()
            )));
        }
        for (k, t) in self.fingertip_targets.iter().enumerate() {
            let d = obj.sdf(*t).abs();
            if d > 0.02 {
                return Err(Error::Contract(format!(
                    "fingertip target {k} is {d:.4} m from the object surface (limit 0.02)"
                )));
            }
        }
        for part in &self.contact_parts {
            if obj.part_id(part).is_none() {
                return Err(Error::Contract(format!(
                    "contact part '{part}' does not exist on object '{}'",
                    obj.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetargetConfig {
    pub align_iters: usize,
    pub align_lr: f64,
    pub refine_iters: usize,
    pub refine_lr: f64,
    pub w_pen: f64,
    pub w_spen: f64,
    pub w_joint: f64,
    pub w_cmap: f64,
    /// Object surface points used by the refinement losses.
    pub opt_cloud_points: usize,
    pub opt_cloud_seed: u64,
    /// Adam epsilon for both optimization steps.
    pub adam_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for RetargetConfig {
    fn default() -> Self {
        RetargetConfig {
            align_iters: 20,
            align_lr: 0.01,
            refine_iters: 300,
            refine_lr: 1.0e-4,
            w_pen: 100.0,
            w_spen: 10.0,
            w_joint: 10.0,
            w_cmap: 10.0,
            opt_cloud_points: 256,
            opt_cloud_seed: 0x0b9ec7,
            adam_epsilon: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RetargetReport {
    pub step2_losses: Vec<f64>,
    pub step3_losses: Vec<f64>,
    /// Mean fingertip-to-target distance of the final pose, meters.
    pub fingertip_residual: f64,
    /// Max penetration depth of the final pose, meters.
    pub max_penetration: f64,
    /// Contact distance (summed squared map differences) between the final
    /// and step-2 poses.
    pub cmap_distance_to_step2: f64,
}

/// Mean fingertip-to-target distance, meters.
pub fn fingertip_residual(hand: &HandModel, spec: &SourceGraspSpec, pose: &GraspPose) -> Result<f64> {
    let cloud = hand.forward_kinematics(pose)?;
    let n = spec.fingertip_targets.len() as f64;
    Ok(cloud
        .fingertips
        .iter()
        .zip(&spec.fingertip_targets)
        .map(|(a, b)| geom::dist(*a, *b))
        .sum::<f64>()
        / n)
}

/// Step 1: copy the wrist frame, set joints to mid-range.
pub fn step1_initialize(hand: &HandModel, spec: &SourceGraspSpec) -> GraspPose {
    GraspPose {
        t: spec.wrist_translation,
        r6: geom::mat_to_rot6(&spec.wrist_rotation),
        q: hand.mid_range_q(),
    }
}

/// Step 2: minimize the summed squared fingertip-to-target distances over
/// the full pose `(t, r6, q)`.
pub fn step2_fingertip_align(
    hand: &HandModel,
    spec: &SourceGraspSpec,
    init: &GraspPose,
    config: &RetargetConfig,
) -> Result<(GraspPose, Vec<f64>)> {
    if fingertip_residual(hand, spec, init)? < 1e-6 {
        return Ok((init.clone(), Vec::new()));
    }
    let targets: Vec<[f64; 3]> = spec.fingertip_targets.clone();
    let mut params = vec![
        Tensor::vector(init.t.to_vec()),
        Tensor::vector(init.r6.to_vec()),
        Tensor::vector(init.q.clone()),
    ];
    let mut opt = OptimState::for_params(&params, LrSchedule::Constant(config.align_lr), 0.0);
    opt.epsilon = config.adam_epsilon;
    opt.beta1 = config.adam_beta1;
    opt.beta2 = config.adam_beta2;
    let mut losses_out = Vec::with_capacity(config.align_iters);
    let mut initial = None;
    for _ in 0..config.align_iters {
        let mut tape = Tape::new();
        let t = tape.leaf(params[0].clone(), true);
        let r6 = tape.leaf(params[1].clone(), true);
        let q = tape.leaf(params[2].clone(), true);
        let fk = hand.fk_graph(&mut tape, t, r6, q);
        let tgt = tape.constant(Tensor::from_rows3(&targets));
        let diff = tape.sub(fk.fingertips, tgt);
        let sq = tape.square(diff);
        let loss = tape.sum(sq);
        let value = tape.value(loss).item();
        let init_value = *initial.get_or_insert(value);
        if !value.is_finite() || value > 10.0 * init_value + 1e-3 {
            return Err(Error::Fault(format!(
                "fingertip alignment diverged: loss {value:.3e} from {init_value:.3e}"
            )));
        }
        losses_out.push(value);
        tape.backward(loss)?;
        let grads = [
            tape.grad(t).unwrap().data().to_vec(),
            tape.grad(r6).unwrap().data().to_vec(),
            tape.grad(q).unwrap().data().to_vec(),
        ];
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut params, &grad_refs, 0)?;
    }
    let pose = GraspPose {
        t: [params[0].data()[0], params[0].data()[1], params[0].data()[2]],
        r6: params[1].data().try_into().unwrap(),
        q: params[2].data().to_vec(),
    };
    Ok((pose, losses_out))
}

/// Step 3: penetration / self-penetration / joint-limit refinement with a
/// contact-map tether to the step-2 output. Translation stays fixed.
pub fn step3_interaction_refine(
    hand: &HandModel,
    obj: &ObjectModel,
    pose2: &GraspPose,
    config: &RetargetConfig,
) -> Result<(GraspPose, RetargetReport)> {
    let obj_cloud = obj.sample_surface(config.opt_cloud_points, config.opt_cloud_seed)?;
    let cloud2 = hand.forward_kinematics(pose2)?;
    let cmap_target = losses::compute_contact_map(&obj_cloud.points, &cloud2.points);

    let mut params = vec![Tensor::vector(pose2.r6.to_vec()), Tensor::vector(pose2.q.clone())];
    let mut opt = OptimState::for_params(&params, LrSchedule::Constant(config.refine_lr), 0.0);
    opt.epsilon = config.adam_epsilon;
    opt.beta1 = config.adam_beta1;
    opt.beta2 = config.adam_beta2;
    let mut step_losses = Vec::with_capacity(config.refine_iters);
    let mut initial = None;
    for _ in 0..config.refine_iters {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::vector(pose2.t.to_vec()));
        let r6 = tape.leaf(params[0].clone(), true);
        let q = tape.leaf(params[1].clone(), true);
        let fk = hand.fk_graph(&mut tape, t, r6, q);
        let obj_var = tape.constant(Tensor::from_rows3(&obj_cloud.points));
        let pen = losses::graph_pen(&mut tape, hand, obj_var, &fk);
        let spen = losses::graph_spen(&mut tape, hand, &fk);
        let joint = losses::graph_joint(&mut tape, hand, q);
        let cm = losses::graph_contact_map(&mut tape, obj_var, fk.points);
        let cm_target = tape.constant(Tensor::vector(cmap_target.clone()));
        let cmap = losses::graph_cmap_loss(&mut tape, cm, cm_target);
        let pen_w = tape.mul_const(pen, config.w_pen);
        let spen_w = tape.mul_const(spen, config.w_spen);
        let joint_w = tape.mul_const(joint, config.w_joint);
        let cmap_w = tape.mul_const(cmap, config.w_cmap);
        let s1 = tape.add(pen_w, spen_w);
        let s2 = tape.add(joint_w, cmap_w);
        let loss = tape.add(s1, s2);
        let value = tape.value(loss).item();
        let init_value = *initial.get_or_insert(value);
        if !value.is_finite() || value > 10.0 * init_value + 1e-3 {
            return Err(Error::Fault(format!(
                "interaction refinement diverged: loss {value:.3e} from {init_value:.3e}"
            )));
        }
        step_losses.push(value);
        tape.backward(loss)?;
        let grads = [
            tape.grad(r6).unwrap().data().to_vec(),
            tape.grad(q).unwrap().data().to_vec(),
        ];
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut params, &grad_refs, 0)?;
    }
    let pose = GraspPose {
        t: pose2.t,
        r6: params[0].data().try_into().unwrap(),
        q: params[1].data().to_vec(),
    };
    let cloud3 = hand.forward_kinematics(&pose)?;
    let cmap3 = losses::compute_contact_map(&obj_cloud.points, &cloud3.points);
    let report = RetargetReport {
        step2_losses: Vec::new(),
        step3_losses: step_losses,
        fingertip_residual: 0.0,
        max_penetration: losses::max_penetration_cloud(&obj_cloud.points, hand, &cloud3),
        cmap_distance_to_step2: losses::contact_distance(&cmap3, &cmap_target)?,
    };
    Ok((pose, report))
}

/// Full three-step pipeline.
pub fn retarget(
    hand: &HandModel,
    obj: &ObjectModel,
    spec: &SourceGraspSpec,
    config: &RetargetConfig,
) -> Result<(GraspPose, RetargetReport)> {
    spec.validate(hand, obj)?;
    let init = step1_initialize(hand, spec);
    let (pose2, step2_losses) = step2_fingertip_align(hand, spec, &init, config)?;
    let (pose3, mut report) = step3_interaction_refine(hand, obj, &pose2, config)?;
    report.step2_losses = step2_losses;
    report.fingertip_residual = fingertip_residual(hand, spec, &pose3)?;
    Ok((pose3, report))
}
