//! Hand-object interaction losses, in plain f64 form for metrics and
//! filtering, and as tape graphs for gradient-based optimization.
//!
//! Conventions:
//! - pose regression: mean of squared differences over the pose vector;
//! - chamfer: symmetric sum of squared nearest-neighbor distances;
//! - contact map: per-object-point distance to the nearest hand point;
//!   the map loss is the sum of squared entry differences;
//! - object penetration: sum over object points of their depth inside the
//!   posed hand (union-of-capsules SDF);
//! - self penetration: sum over ordered anchor pairs on non-adjacent links
//!   of `max(r_i + r_j - d, 0)`;
//! - joint limits: sum of out-of-range amounts.
//!
//! Nearest-element ties always break to the lowest index. Graph versions
//! floor squared distances at 1e-12 before square roots so gradients stay
//! bounded; below one micrometer the plain and graph values diverge.

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::hand::{FkVars, GraspPose, HandCloud, HandModel};
use crate::tensor::{Tape, Tensor, Var};

const SQRT_FLOOR: f64 = 1e-12;

pub fn loss_para(pred: &GraspPose, target: &GraspPose) -> Result<f64> {
    if pred.q.len() != target.q.len() {
        return Err(Error::Contract(format!(
            "pose dimension mismatch: {} vs {}",
            pred.dim(),
            target.dim()
        )));
    }
    let (a, b) = (pred.to_vec(), target.to_vec());
    let n = a.len() as f64;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

pub fn loss_chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("chamfer distance of an empty point set".into()));
    }
    let one_way = |from: &[Vec3], to: &[Vec3]| -> f64 {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        let d = geom::sub(*p, *q);
                        geom::dot(d, d)
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
    };
    Ok(one_way(a, b) + one_way(b, a))
}

/// Per-object-point distance to the nearest hand point.
pub fn compute_contact_map(obj_points: &[Vec3], hand_points: &[Vec3]) -> Vec<f64> {
    obj_points
        .iter()
        .map(|p| {
            hand_points
                .iter()
                .map(|q| {
                    let d = geom::sub(*p, *q);
                    geom::dot(d, d)
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

pub fn loss_cmap(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Contract(format!(
            "contact map length mismatch: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Contact distance between two maps (the `Con.` metric): identical to the
/// contact-map loss, i.e. the summed squared entry differences.
pub fn contact_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    loss_cmap(a, b)
}

/// Depth of an object point inside the posed hand, zero outside.
fn penetration_depth(model: &HandModel, cloud: &HandCloud, p: Vec3) -> f64 {
    (-model.hand_sdf(cloud, p)).max(0.0)
}

pub fn loss_pen_cloud(obj_points: &[Vec3], model: &HandModel, cloud: &HandCloud) -> f64 {
    obj_points.iter().map(|&p| penetration_depth(model, cloud, p)).sum()
}

pub fn loss_pen(obj_points: &[Vec3], model: &HandModel, pose: &GraspPose) -> Result<f64> {
    let cloud = model.forward_kinematics(pose)?;
    Ok(loss_pen_cloud(obj_points, model, &cloud))
}

/// Maximum penetration depth in meters.
pub fn max_penetration_cloud(obj_points: &[Vec3], model: &HandModel, cloud: &HandCloud) -> f64 {
    obj_points
        .iter()
        .map(|&p| penetration_depth(model, cloud, p))
        .fold(0.0, f64::max)
}

pub fn max_penetration(obj_points: &[Vec3], model: &HandModel, pose: &GraspPose) -> Result<f64> {
    let cloud = model.forward_kinematics(pose)?;
    Ok(max_penetration_cloud(obj_points, model, &cloud))
}

pub fn loss_spen_cloud(model: &HandModel, anchors: &[Vec3]) -> f64 {
    let radii = model.anchor_radii();
    model
        .spen_pairs()
        .iter()
        .map(|&(i, j)| {
            let delta = radii[i as usize] + radii[j as usize];
            (delta - geom::dist(anchors[i as usize], anchors[j as usize])).max(0.0)
        })
        .sum()
}

pub fn loss_spen(model: &HandModel, pose: &GraspPose) -> Result<f64> {
    let cloud = model.forward_kinematics(pose)?;
    Ok(loss_spen_cloud(model, &cloud.anchors))
}

pub fn loss_joint(model: &HandModel, pose: &GraspPose) -> f64 {
    let (over, under) = model.clamp_report_limits(pose);
    over.iter().sum::<f64>() + under.iter().sum::<f64>()
}

// ── graph versions ──────────────────────────────────────────────────────

/// Mean squared difference between two pose vectors on the tape.
pub fn graph_para(tape: &mut Tape, pred: Var, target: Var) -> Var {
    let diff = tape.sub(pred, target);
    let sq = tape.square(diff);
    tape.mean(sq)
}

/// Symmetric squared chamfer between two [n,3] point sets.
pub fn graph_chamfer(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sq_dist(a, b);
    let ra = tape.min_rows(d);
    let rb = tape.min_cols(d);
    let sa = tape.sum(ra);
    let sb = tape.sum(rb);
    tape.add(sa, sb)
}

/// Contact map of `obj` [n,3] against `hand` [m,3]: distances as a [n] node.
pub fn graph_contact_map(tape: &mut Tape, obj: Var, hand: Var) -> Var {
    let d = tape.sq_dist(obj, hand);
    let m = tape.min_rows(d);
    let m = tape.clamp_min(m, SQRT_FLOOR);
    tape.sqrt(m)
}

pub fn graph_cmap_loss(tape: &mut Tape, pred: Var, target: Var) -> Var {
    let diff = tape.sub(pred, target);
    let sq = tape.square(diff);
    tape.sum(sq)
}

/// Sum of object-point depths inside the hand capsules described by `fk`.
pub fn graph_pen(tape: &mut Tape, model: &HandModel, obj: Var, fk: &FkVars) -> Var {
    let n = tape.value(obj).rows();
    let mut rows = Vec::with_capacity(model.links().len());
    for (li, link) in model.links().iter().enumerate() {
        let a = tape.gather(fk.seg_starts, &[li]);
        let b = tape.gather(fk.seg_ends, &[li]);
        let d = graph_point_segment_distance(tape, obj, a, b);
        let sdf = tape.add_const(d, -link.radius);
        rows.push(tape.reshape(sdf, &[1, n]));
    }
    let stacked = tape.concat(&rows);
    let sdf_union = tape.min_cols(stacked);
    let neg = tape.neg(sdf_union);
    let depth = tape.relu(neg);
    tape.sum(depth)
}

/// Distances from points [n,3] to the segment given by rows `a`,`b` ([1,3]).
fn graph_point_segment_distance(tape: &mut Tape, points: Var, a: Var, b: Var) -> Var {
    let n = tape.value(points).rows();
    let u = tape.sub(b, a);
    let a3 = tape.reshape(a, &[3]);
    let pa = tape.sub(points, a3);
    let s = tape.matmul_nt(pa, u);
    let s = tape.reshape(s, &[n]);
    let usq = tape.square(u);
    let len2 = tape.sum(usq);
    let tpar = tape.div(s, len2);
    let tcl = tape.clamp(tpar, 0.0, 1.0);
    let tcol = tape.reshape(tcl, &[n, 1]);
    let proj = tape.matmul(tcol, u);
    let c = tape.add(proj, a3);
    let diff = tape.sub(points, c);
    let sq = tape.square(diff);
    let d2 = tape.sum_rows(sq);
    let d2 = tape.clamp_min(d2, SQRT_FLOOR);
    tape.sqrt(d2)
}

/// Self-penetration over the model's ordered anchor pairs.
pub fn graph_spen(tape: &mut Tape, model: &HandModel, fk: &FkVars) -> Var {
    let a_count = model.anchor_count();
    let radii = model.anchor_radii();
    let sq = tape.sq_dist(fk.anchors, fk.anchors);
    let flat = tape.reshape(sq, &[a_count * a_count]);
    let idx: Vec<usize> = model
        .spen_pairs()
        .iter()
        .map(|&(i, j)| i as usize * a_count + j as usize)
        .collect();
    let pair_sq = tape.gather(flat, &idx);
    let pair_sq = tape.clamp_min(pair_sq, SQRT_FLOOR);
    let d = tape.sqrt(pair_sq);
    let deltas: Vec<f64> = model
        .spen_pairs()
        .iter()
        .map(|&(i, j)| radii[i as usize] + radii[j as usize])
        .collect();
    let deltas = tape.constant(Tensor::vector(deltas));
    let gap = tape.sub(deltas, d);
    let viol = tape.relu(gap);
    tape.sum(viol)
}

/// Joint limit violations of a [J] joint-angle node.
pub fn graph_joint(tape: &mut Tape, model: &HandModel, q: Var) -> Var {
    let (lo, hi) = model.joint_limits();
    let lo = tape.constant(Tensor::vector(lo));
    let hi = tape.constant(Tensor::vector(hi));
    let over = tape.sub(q, hi);
    let over = tape.relu(over);
    let under = tape.sub(lo, q);
    let under = tape.relu(under);
    let so = tape.sum(over);
    let su = tape.sum(under);
    tape.add(so, su)
}
