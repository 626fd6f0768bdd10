//! Exact equivalence of the implementation against independent
//! brute-force oracles on randomized small instances, plus geometric
//! invariants checked against an independent transform library.

mod common;

use dexgrasp_core::dataset::{GraspRecord, Split};
use dexgrasp_core::geom;
use dexgrasp_core::guidance::GuidanceSpec;
use dexgrasp_core::hand::{GraspPose, HandModel};
use dexgrasp_core::losses;
use dexgrasp_core::metrics;
use dexgrasp_core::object::sample_object;
use dexgrasp_core::rng;
use dexgrasp_core::train;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 50;

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            [
                scale * (rng.gen::<f64>() - 0.5),
                scale * (rng.gen::<f64>() - 0.5),
                scale * (rng.gen::<f64>() - 0.5),
            ]
        })
        .collect()
}

#[test]
fn chamfer_matches_brute_force_exactly() {
    for k in 0..INSTANCES {
        let mut rng = rng::stream(k as u64, "oracle-chamfer");
        let n = 3 + (k % 48);
        let m = 3 + ((k * 7) % 48);
        let a = random_cloud(&mut rng, n, 0.3);
        let b = random_cloud(&mut rng, m, 0.3);

        // oracle: literal double loops, one directed sum per side
        let mut fwd = 0.0;
        for p in &a {
            let mut best = f64::INFINITY;
            for q in &b {
                let (dx, dy, dz) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
                let d2 = dx * dx + dy * dy + dz * dz;
                if d2 < best {
                    best = d2;
                }
            }
            fwd += best;
        }
        let mut bwd = 0.0;
        for q in &b {
            let mut best = f64::INFINITY;
            for p in &a {
                let (dx, dy, dz) = (q[0] - p[0], q[1] - p[1], q[2] - p[2]);
                let d2 = dx * dx + dy * dy + dz * dz;
                if d2 < best {
                    best = d2;
                }
            }
            bwd += best;
        }
        assert_eq!(losses::loss_chamfer(&a, &b).unwrap(), fwd + bwd, "instance {k}");
    }
}

#[test]
fn contact_map_matches_brute_force_exactly() {
    for k in 0..INSTANCES {
        let mut rng = rng::stream(k as u64, "oracle-cmap");
        let obj = random_cloud(&mut rng, 4 + (k % 60), 0.25);
        let hand = random_cloud(&mut rng, 3 + (k % 40), 0.25);
        let got = losses::compute_contact_map(&obj, &hand);
        for (p, g) in obj.iter().zip(&got) {
            let mut best = f64::INFINITY;
            for q in &hand {
                let (dx, dy, dz) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
                let d2 = dx * dx + dy * dy + dz * dz;
                if d2 < best {
                    best = d2;
                }
            }
            assert_eq!(*g, best.sqrt(), "instance {k}");
        }
    }
}

#[test]
fn spen_matches_ordered_pair_loop_exactly() {
    let hand = HandModel::default_toy();
    let radii = hand.anchor_radii();
    for k in 0..INSTANCES {
        let mut rng = rng::stream(k as u64, "oracle-spen");
        let mut pose = GraspPose::identity(hand.joint_count());
        pose.t = [rng.gen::<f64>() * 0.1, rng.gen::<f64>() * 0.1, rng.gen::<f64>() * 0.1];
        for q in pose.q.iter_mut() {
            *q = rng.gen::<f64>() * 1.6;
        }
        let cloud = hand.forward_kinematics(&pose).unwrap();
        let mut expect = 0.0;
        for &(i, j) in hand.spen_pairs() {
            let delta = radii[i as usize] + radii[j as usize];
            let d = geom::dist(cloud.anchors[i as usize], cloud.anchors[j as usize]);
            expect += (delta - d).max(0.0);
        }
        assert_eq!(losses::loss_spen(&hand, &pose).unwrap(), expect, "instance {k}");
    }
}

#[test]
fn spen_coincident_anchor_pair_counts_both_orders() {
    // two coincident anchors with radius sum delta contribute 2 * delta
    let hand = HandModel::default_toy();
    let radii = hand.anchor_radii();
    // pick a non-adjacent pair and a synthetic anchor layout where they
    // coincide; all other anchors are pushed far away
    let (i, j) = hand.spen_pairs()[0];
    let mut anchors = vec![[1000.0, 0.0, 0.0]; hand.anchor_count()];
    for (k, a) in anchors.iter_mut().enumerate() {
        a[1] = 10.0 * k as f64; // spread the parked anchors apart
    }
    anchors[i as usize] = [0.0, 0.0, 0.0];
    anchors[j as usize] = [0.0, 0.0, 0.0];
    let delta = radii[i as usize] + radii[j as usize];
    let total = losses::loss_spen_cloud(&hand, &anchors);
    assert!((total - 2.0 * delta).abs() < 1e-15, "total {total}, delta {delta}");
}

#[test]
fn target_assignment_matches_brute_force_argmin() {
    let hand = HandModel::default_toy();
    let guidance = GuidanceSpec {
        verb: "hold".into(),
        finger_parts: vec![Some("body".into()); 4],
        brief: "To hold a bottle".into(),
        text: "To hold a bottle, hold the body firmly with all fingers.".into(),
    };
    for k in 0..INSTANCES {
        let mut rng = rng::stream(k as u64, "oracle-assign");
        let group_size = 1 + (k % 5);
        let records: Vec<GraspRecord> = (0..group_size)
            .map(|i| {
                let mut pose = GraspPose::identity(hand.joint_count());
                pose.t = [rng.gen::<f64>() * 0.2, rng.gen::<f64>() * 0.2, rng.gen::<f64>() * 0.2];
                for q in pose.q.iter_mut() {
                    *q = rng.gen::<f64>() * 1.6;
                }
                GraspRecord {
                    record_id: i as u32,
                    object_id: "o".into(),
                    guidance: guidance.clone(),
                    pose,
                    cloud_seed: 0,
                    contact_map: Vec::new(),
                    split: Split::Eval,
                }
            })
            .collect();
        let refs: Vec<&GraspRecord> = records.iter().collect();
        let mut pred = GraspPose::identity(hand.joint_count());
        pred.t = [rng.gen::<f64>() * 0.2; 3];
        for q in pred.q.iter_mut() {
            *q = rng.gen::<f64>() * 1.6;
        }
        let pred_cloud = hand.forward_kinematics(&pred).unwrap().points;
        let (idx, _, cd) = metrics::assign_target(&hand, &pred_cloud, &refs).unwrap();

        // brute-force chamfer table
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, r) in records.iter().enumerate() {
            let gt = hand.forward_kinematics(&r.pose).unwrap().points;
            let d = losses::loss_chamfer(&pred_cloud, &gt).unwrap();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        assert_eq!(idx, best, "instance {k}");
        assert_eq!(cd, best_d, "instance {k}");
    }
    // a prediction equal to a member matches itself with zero distance
    let member_cloud = hand.forward_kinematics(&GraspPose::identity(12)).unwrap().points;
    let record = GraspRecord {
        record_id: 0,
        object_id: "o".into(),
        guidance,
        pose: GraspPose::identity(12),
        cloud_seed: 0,
        contact_map: Vec::new(),
        split: Split::Eval,
    };
    let (idx, _, cd) = metrics::assign_target(&hand, &member_cloud, &[&record]).unwrap();
    assert_eq!((idx, cd), (0, 0.0));
    assert!(metrics::assign_target(&hand, &member_cloud, &[]).is_err());
}

#[test]
fn pair_matching_matches_brute_force_argmin() {
    let hand = HandModel::default_toy();
    for k in 0..INSTANCES {
        let mut rng = rng::stream(k as u64, "oracle-pairs");
        let group_size = 1 + (k % 6);
        let gts: Vec<GraspPose> = (0..group_size)
            .map(|_| {
                let mut pose = GraspPose::identity(hand.joint_count());
                pose.t = [rng.gen::<f64>() * 0.3, rng.gen::<f64>() * 0.3, rng.gen::<f64>() * 0.3];
                for q in pose.q.iter_mut() {
                    *q = rng.gen::<f64>() * 1.6;
                }
                pose
            })
            .collect();
        let refs: Vec<&GraspPose> = gts.iter().collect();
        let mut coarse = GraspPose::identity(hand.joint_count());
        coarse.t = [0.05, -0.02, 0.1];
        for (qi, q) in coarse.q.iter_mut().enumerate() {
            *q = 0.1 * qi as f64 + 0.1 * rng.gen::<f64>();
        }
        let got = train::nearest_by_chamfer(&hand, &coarse, &refs).unwrap();
        let c_cloud = hand.forward_kinematics(&coarse).unwrap().points;
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, gt) in gts.iter().enumerate() {
            let cloud = hand.forward_kinematics(gt).unwrap().points;
            let d = losses::loss_chamfer(&c_cloud, &cloud).unwrap();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        assert_eq!(got, best, "instance {k}");
        // a coarse grasp equal to a member matches itself
        let self_match = train::nearest_by_chamfer(&hand, &gts[0], &refs).unwrap();
        let d0 = {
            let c = hand.forward_kinematics(&gts[0]).unwrap().points;
            losses::loss_chamfer(&c, &c).unwrap()
        };
        assert_eq!(d0, 0.0);
        // ties break to the lowest index, and identity is chamfer-zero
        let c0 = hand.forward_kinematics(&gts[self_match]).unwrap().points;
        let cq = hand.forward_kinematics(&gts[0]).unwrap().points;
        assert_eq!(losses::loss_chamfer(&cq, &c0).unwrap(), 0.0);
    }
    // singleton group always matches its only member
    let only = GraspPose::identity(hand.joint_count());
    let got = train::nearest_by_chamfer(&hand, &GraspPose::identity(12), &[&only]).unwrap();
    assert_eq!(got, 0);
}

#[test]
fn fk_matches_independent_transform_stack() {
    // nalgebra isometries as the oracle for the chained link transforms
    use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector3};
    let hand = HandModel::default_toy();
    for k in 0..20u64 {
        let mut rng = rng::stream(k, "oracle-fk");
        let mut pose = GraspPose::identity(hand.joint_count());
        pose.t = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
        for v in pose.r6.iter_mut() {
            *v += 0.6 * (rng.gen::<f64>() - 0.5);
        }
        for q in pose.q.iter_mut() {
            *q = 0.3 + 1.2 * rng.gen::<f64>();
        }
        let cloud = hand.forward_kinematics(&pose).unwrap();

        let rm = pose.rotation_matrix();
        let root = Isometry3::from_parts(
            Translation3::new(pose.t[0], pose.t[1], pose.t[2]),
            UnitQuaternion::from_matrix(&nalgebra::Matrix3::new(
                rm[0], rm[1], rm[2], rm[3], rm[4], rm[5], rm[6], rm[7], rm[8],
            )),
        );
        for (fi, finger) in hand.description.fingers.iter().enumerate() {
            let bm = finger.base_rotation;
            let mut frame = root
                * Isometry3::from_parts(
                    Translation3::new(
                        finger.base_translation[0],
                        finger.base_translation[1],
                        finger.base_translation[2],
                    ),
                    UnitQuaternion::from_matrix(&nalgebra::Matrix3::new(
                        bm[0], bm[1], bm[2], bm[3], bm[4], bm[5], bm[6], bm[7], bm[8],
                    )),
                );
            let q0: usize = hand.description.fingers[..fi].iter().map(|f| f.joints.len()).sum();
            for (ji, joint) in finger.joints.iter().enumerate() {
                if ji > 0 {
                    frame *= Isometry3::translation(finger.joints[ji - 1].length, 0.0, 0.0);
                }
                frame *= Isometry3::rotation(
                    Vector3::new(joint.axis[0], joint.axis[1], joint.axis[2]) * pose.q[q0 + ji],
                );
            }
            let last = finger.joints.last().unwrap();
            let tip = frame * Point3::new(last.length + last.radius, 0.0, 0.0);
            let got = cloud.fingertips[fi];
            let err = ((tip.x - got[0]).powi(2) + (tip.y - got[1]).powi(2)
                + (tip.z - got[2]).powi(2))
            .sqrt();
            assert!(err <= 1e-9, "finger {fi} differs by {err} m");
        }
    }
}

#[test]
fn fk_is_equivariant_under_root_rotations() {
    let hand = HandModel::default_toy();
    for k in 0..20u64 {
        let mut rng = rng::stream(k, "oracle-equi");
        let mut pose = GraspPose::identity(hand.joint_count());
        pose.t = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
        for q in pose.q.iter_mut() {
            *q = 1.6 * rng.gen::<f64>();
        }
        let axis = geom::normalize([
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        ]);
        let r = geom::rot_axis_angle(axis, 2.0 * rng.gen::<f64>());
        let direct = hand.forward_kinematics(&pose.rotated(&r)).unwrap();
        let base = hand.forward_kinematics(&pose).unwrap();
        for (p, q) in base.points.iter().zip(&direct.points) {
            let err = geom::dist(geom::mat_apply(&r, *p), *q);
            assert!(err <= 1e-9, "equivariance violated by {err}");
        }
    }
}

#[test]
fn anchors_stay_inside_link_capsules() {
    let hand = HandModel::default_toy();
    let radii = hand.anchor_radii();
    for k in 0..20u64 {
        let mut rng = rng::stream(k, "oracle-anchors");
        let mut pose = GraspPose::identity(hand.joint_count());
        for q in pose.q.iter_mut() {
            *q = 1.6 * rng.gen::<f64>();
        }
        let cloud = hand.forward_kinematics(&pose).unwrap();
        for (ai, center) in cloud.anchors.iter().enumerate() {
            let li = hand.anchor_link(ai);
            let link = &hand.links()[li];
            let axis_dist =
                geom::point_segment_distance(*center, cloud.seg_starts[li], cloud.seg_ends[li]);
            assert!(
                axis_dist + radii[ai] <= link.radius + 1e-12,
                "anchor {ai} pokes out of link {li}"
            );
        }
    }
}

#[test]
fn object_sdf_gradient_has_unit_norm() {
    // finite differences at points pushed off the surface along normals
    for (ci, cat) in ["bottle", "sprayer", "mug", "pan"].iter().enumerate() {
        let obj = sample_object(cat, "sdfgrad", 50 + ci as u64).unwrap();
        let cloud = obj.sample_surface(60, 4).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for (p, n) in cloud.points.iter().zip(&cloud.normals) {
            let x = geom::add(*p, geom::scale(*n, 0.02));
            // keep clear of medial-axis ties between primitives
            let d0 = obj.sdf(x);
            let others: Vec<f64> = obj.primitives.iter().map(|pr| pr.sdf(x)).collect();
            let mut sorted = others.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.len() > 1 && sorted[1] - sorted[0] < 1e-3 {
                continue;
            }
            if d0 <= 1e-4 {
                continue;
            }
            let mut g = [0.0; 3];
            for axis in 0..3 {
                let mut xp = x;
                xp[axis] += h;
                let mut xm = x;
                xm[axis] -= h;
                g[axis] = (obj.sdf(xp) - obj.sdf(xm)) / (2.0 * h);
            }
            let norm = geom::norm(g);
            assert!(
                (norm - 1.0).abs() <= 1e-3,
                "{cat}: gradient norm {norm} at {x:?}"
            );
            checked += 1;
        }
        assert!(checked >= 30, "{cat}: too few well-posed probes ({checked})");
    }
}
