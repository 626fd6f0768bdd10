//! Finite-difference validation of every differentiable path: the loss
//! family, forward kinematics, and a small perceptron.

mod common;

use common::{max_rel_err, numeric_grad};
use dexgrasp_core::hand::{GraspPose, HandModel};
use dexgrasp_core::losses;
use dexgrasp_core::object::{sample_object, ObjectModel};
use dexgrasp_core::rng;
use dexgrasp_core::tensor::{Tape, Tensor, Var};
use rand::Rng;

const FD_H: f64 = 1e-5;

/// Random pose near an object so losses have active terms.
fn random_pose(hand: &HandModel, obj: &ObjectModel, seed: u64) -> GraspPose {
    let mut rng = rng::stream(seed, "gradcheck-pose");
    let mut pose = GraspPose::identity(hand.joint_count());
    let r = obj.bounding_radius();
    pose.t = [
        (rng.gen::<f64>() - 0.5) * r,
        (rng.gen::<f64>() - 0.5) * r,
        r * (0.5 + 0.6 * rng.gen::<f64>()),
    ];
    for v in pose.r6.iter_mut() {
        *v += 0.4 * (rng.gen::<f64>() - 0.5);
    }
    for q in pose.q.iter_mut() {
        *q = 0.2 + 1.2 * rng.gen::<f64>();
    }
    pose
}

/// Analytic pose gradient of a graph-built loss.
fn analytic_pose_grad(
    hand: &HandModel,
    pose: &GraspPose,
    build: &dyn Fn(&mut Tape, &HandModel, Var, Var, Var) -> Var,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let t = tape.leaf(Tensor::vector(pose.t.to_vec()), true);
    let r6 = tape.leaf(Tensor::vector(pose.r6.to_vec()), true);
    let q = tape.leaf(Tensor::vector(pose.q.clone()), true);
    let loss = build(&mut tape, hand, t, r6, q);
    tape.backward(loss).unwrap();
    let mut g = Vec::new();
    for (v, len) in [(t, 3), (r6, 6), (q, pose.q.len())] {
        match tape.grad(v) {
            Some(gr) => g.extend_from_slice(gr.data()),
            None => g.extend(std::iter::repeat(0.0).take(len)),
        }
    }
    g
}

/// Smallest gap between the best and second-best squared distance over
/// rows of pairwise distances; tiny gaps mean the FD probe can flip the
/// argmin.
fn min_selection_margin(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut worst = f64::INFINITY;
    for p in from {
        let mut best = f64::INFINITY;
        let mut second = f64::INFINITY;
        for q in to {
            let d = dexgrasp_core::geom::sub(*p, *q);
            let d2 = dexgrasp_core::geom::dot(d, d);
            if d2 < best {
                second = best;
                best = d2;
            } else if d2 < second {
                second = d2;
            }
        }
        worst = worst.min(second - best);
    }
    worst
}

fn plain_loss_of_vec(
    hand: &HandModel,
    v: &[f64],
    eval: &dyn Fn(&HandModel, &GraspPose) -> f64,
) -> f64 {
    let pose = GraspPose::from_vec(v).unwrap();
    eval(hand, &pose)
}

/// Run the FD comparison on `configs` random poses, resampling any pose
/// the margin filter flags as sitting on a selection tie or kink.
fn check_loss(
    name: &str,
    tol: f64,
    configs: usize,
    graph: &dyn Fn(&mut Tape, &HandModel, Var, Var, Var) -> Var,
    plain: &dyn Fn(&HandModel, &GraspPose) -> f64,
    tie_free: &dyn Fn(&HandModel, &GraspPose) -> bool,
) {
    check_loss_h(name, tol, configs, FD_H, graph, plain, tie_free)
}

fn check_loss_h(
    name: &str,
    tol: f64,
    configs: usize,
    h: f64,
    graph: &dyn Fn(&mut Tape, &HandModel, Var, Var, Var) -> Var,
    plain: &dyn Fn(&HandModel, &GraspPose) -> f64,
    tie_free: &dyn Fn(&HandModel, &GraspPose) -> bool,
) {
    let hand = HandModel::default_toy();
    let obj = sample_object("bottle", "g", 1234).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut attempt = 0u64;
    while checked < configs {
        attempt += 1;
        assert!(attempt < 40 * configs as u64, "{name}: could not find tie-free poses");
        let pose = random_pose(&hand, &obj, 1000 + attempt);
        if !tie_free(&hand, &pose) {
            continue;
        }
        checked += 1;
        let analytic = analytic_pose_grad(&hand, &pose, graph);
        let mut f = |v: &[f64]| plain_loss_of_vec(&hand, v, plain);
        let numeric = numeric_grad(&mut f, &pose.to_vec(), h);
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    assert!(worst <= tol, "{name}: max relative error {worst} > {tol}");
}

#[test]
fn para_gradient_matches_fd() {
    let hand = HandModel::default_toy();
    let target = {
        let mut p = GraspPose::identity(hand.joint_count());
        p.q = hand.mid_range_q();
        p.t = [0.01, 0.02, 0.05];
        p
    };
    let tv = target.to_vec();
    let graph = move |tape: &mut Tape, _h: &HandModel, t: Var, r6: Var, q: Var| {
        let full = tape.concat(&[t, r6, q]);
        let tgt = tape.constant(Tensor::vector(tv.clone()));
        losses::graph_para(tape, full, tgt)
    };
    let t2 = target.clone();
    let plain = move |_h: &HandModel, p: &GraspPose| losses::loss_para(p, &t2).unwrap();
    check_loss("loss_para", 1e-3, 20, &graph, &plain, &|_, _| true);
}

#[test]
fn chamfer_gradient_matches_fd() {
    let hand = HandModel::default_toy();
    let rest = hand.forward_kinematics(&GraspPose::identity(hand.joint_count())).unwrap();
    // a sparse jittered target keeps nearest-neighbor selection gaps
    // macroscopic; the regular ring pattern would tie constantly
    let mut jrng = rng::stream(8, "chamfer-target");
    let rest_points: Vec<[f64; 3]> = rest
        .points
        .iter()
        .step_by(7)
        .map(|p| {
            [
                p[0] + 0.006 * (jrng.gen::<f64>() - 0.5),
                p[1] + 0.006 * (jrng.gen::<f64>() - 0.5),
                p[2] + 0.006 * (jrng.gen::<f64>() - 0.5),
            ]
        })
        .collect();
    let rp = rest_points.clone();
    let rest3 = rest_points.clone();
    let graph = move |tape: &mut Tape, h: &HandModel, t: Var, r6: Var, q: Var| {
        let fk = h.fk_graph(tape, t, r6, q);
        let gt = tape.constant(Tensor::from_rows3(&rp));
        losses::graph_chamfer(tape, fk.points, gt)
    };
    let plain = move |h: &HandModel, p: &GraspPose| {
        let cloud = h.forward_kinematics(p).unwrap();
        losses::loss_chamfer(&cloud.points, &rest_points).unwrap()
    };
    let tie_free = move |h: &HandModel, p: &GraspPose| {
        let cloud = h.forward_kinematics(p).unwrap();
        min_selection_margin(&cloud.points, &rest3) > 1e-6
            && min_selection_margin(&rest3, &cloud.points) > 1e-6
    };
    check_loss_h("loss_chamfer", 1e-3, 20, 1e-6, &graph, &plain, &tie_free);
}

#[test]
fn cmap_gradient_matches_fd() {
    let obj = sample_object("bottle", "g", 1234).unwrap();
    let cloud = obj.sample_surface(128, 5).unwrap();
    let pts = cloud.points.clone();
    let target: Vec<f64> = (0..pts.len()).map(|i| 0.01 + 0.0001 * i as f64).collect();
    let (p2, t2) = (pts.clone(), target.clone());
    let graph = move |tape: &mut Tape, h: &HandModel, t: Var, r6: Var, q: Var| {
        let fk = h.fk_graph(tape, t, r6, q);
        let obj_var = tape.constant(Tensor::from_rows3(&p2));
        let cm = losses::graph_contact_map(tape, obj_var, fk.points);
        let tgt = tape.constant(Tensor::vector(t2.clone()));
        losses::graph_cmap_loss(tape, cm, tgt)
    };
    let plain = move |h: &HandModel, p: &GraspPose| {
        let c = h.forward_kinematics(p).unwrap();
        let cm = losses::compute_contact_map(&pts, &c.points);
        losses::loss_cmap(&cm, &target).unwrap()
    };
    let pts3 = cloud.points.clone();
    let tie_free = move |h: &HandModel, p: &GraspPose| {
        let c = h.forward_kinematics(p).unwrap();
        min_selection_margin(&pts3, &c.points) > 1e-6
    };
    check_loss("loss_cmap", 1e-3, 20, &graph, &plain, &tie_free);
}

#[test]
fn pen_gradient_matches_fd() {
    let obj = sample_object("bottle", "g", 1234).unwrap();
    let cloud = obj.sample_surface(128, 7).unwrap();
    let pts = cloud.points.clone();
    let p2 = pts.clone();
    let graph = move |tape: &mut Tape, h: &HandModel, t: Var, r6: Var, q: Var| {
        let fk = h.fk_graph(tape, t, r6, q);
        let obj_var = tape.constant(Tensor::from_rows3(&p2));
        losses::graph_pen(tape, h, obj_var, &fk)
    };
    let plain = move |h: &HandModel, p: &GraspPose| losses::loss_pen(&pts, h, p).unwrap();
    let pts3 = cloud.points.clone();
    let tie_free = move |h: &HandModel, p: &GraspPose| {
        // keep every object point away from the hand surface (relu kink)
        // and away from capsule argmin switches
        let c = h.forward_kinematics(p).unwrap();
        pts3.iter().all(|&pt| {
            let mut best = f64::INFINITY;
            let mut second = f64::INFINITY;
            for (li, link) in h.links().iter().enumerate() {
                let d = dexgrasp_core::geom::capsule_sdf(
                    pt,
                    c.seg_starts[li],
                    c.seg_ends[li],
                    link.radius,
                );
                if d < best {
                    second = best;
                    best = d;
                } else if d < second {
                    second = d;
                }
            }
            best.abs() > 1e-4 && (second - best) > 1e-4
        })
    };
    check_loss("loss_pen", 1e-3, 20, &graph, &plain, &tie_free);
}

#[test]
fn spen_gradient_matches_fd() {
    let graph = |tape: &mut Tape, h: &HandModel, t: Var, r6: Var, q: Var| {
        let fk = h.fk_graph(tape, t, r6, q);
        losses::graph_spen(tape, h, &fk)
    };
    let plain = |h: &HandModel, p: &GraspPose| losses::loss_spen(h, p).unwrap();
    // self-penetration needs curled poses to be active; filter poses with
    // anchor pairs sitting on the activation kink
    let hand = HandModel::default_toy();
    let obj = sample_object("bottle", "g", 1234).unwrap();
    let radii = hand.anchor_radii();
    let mut worst: f64 = 0.0;
    let mut active = 0;
    let mut checked = 0;
    let mut attempt = 0u64;
    while checked < 20 {
        attempt += 1;
        assert!(attempt < 600, "could not find kink-free curled poses");
        let mut pose = random_pose(&hand, &obj, 2000 + attempt);
        // hard-curl one finger: deep palm contact, far from the kink
        let f = (attempt % 4) as usize;
        for j in 0..3 {
            pose.q[f * 3 + j] = 1.55 + 0.01 * j as f64;
        }
        let anchors = hand.forward_kinematics(&pose).unwrap().anchors;
        let kink_free = hand.spen_pairs().iter().all(|&(i, j)| {
            let d = dexgrasp_core::geom::dist(anchors[i as usize], anchors[j as usize]);
            let delta = radii[i as usize] + radii[j as usize];
            (delta - d).abs() > 1e-4
        });
        if !kink_free {
            continue;
        }
        checked += 1;
        if losses::loss_spen(&hand, &pose).unwrap() > 0.0 {
            active += 1;
        }
        let analytic = analytic_pose_grad(&hand, &pose, &graph);
        let mut f = |v: &[f64]| plain_loss_of_vec(&hand, v, &plain);
        let numeric = numeric_grad(&mut f, &pose.to_vec(), FD_H);
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    assert!(active >= 3, "too few self-penetrating test poses ({active})");
    assert!(worst <= 1e-3, "loss_spen: max relative error {worst}");
}

#[test]
fn joint_gradient_matches_fd() {
    let graph = |tape: &mut Tape, h: &HandModel, _t: Var, _r6: Var, q: Var| {
        losses::graph_joint(tape, h, q)
    };
    let plain = |h: &HandModel, p: &GraspPose| losses::loss_joint(h, p);
    // push some joints out of range so the loss is active
    let hand = HandModel::default_toy();
    let obj = sample_object("bottle", "g", 1234).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let mut pose = random_pose(&hand, &obj, 3000 + k);
        pose.q[(k % 12) as usize] = 1.75;
        pose.q[((k + 5) % 12) as usize] = -0.2;
        let analytic = analytic_pose_grad(&hand, &pose, &graph);
        let mut f = |v: &[f64]| plain_loss_of_vec(&hand, v, &plain);
        let numeric = numeric_grad(&mut f, &pose.to_vec(), FD_H);
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    assert!(worst <= 1e-3, "loss_joint: max relative error {worst}");
}

#[test]
fn fk_gradient_matches_fd() {
    // project the FK cloud onto fixed random weights to get a scalar
    let hand = HandModel::default_toy();
    let obj = sample_object("mug", "g", 99).unwrap();
    let n = hand.sample_count();
    let mut wrng = rng::stream(42, "fk-weights");
    let weights: Vec<f64> = (0..n * 3).map(|_| wrng.gen::<f64>() - 0.5).collect();
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let pose = random_pose(&hand, &obj, 4000 + k);
        let w2 = weights.clone();
        let graph = move |tape: &mut Tape, h: &HandModel, t: Var, r6: Var, q: Var| {
            let fk = h.fk_graph(tape, t, r6, q);
            let w = tape.constant(Tensor::matrix(n, 3, w2.clone()));
            let prod = tape.mul(fk.points, w);
            tape.sum(prod)
        };
        let analytic = analytic_pose_grad(&hand, &pose, &graph);
        let weights = weights.clone();
        let mut f = |v: &[f64]| {
            let p = GraspPose::from_vec(v).unwrap();
            let cloud = hand.forward_kinematics(&p).unwrap();
            cloud
                .points
                .iter()
                .enumerate()
                .map(|(i, pt)| {
                    pt[0] * weights[i * 3] + pt[1] * weights[i * 3 + 1] + pt[2] * weights[i * 3 + 2]
                })
                .sum()
        };
        let numeric = numeric_grad(&mut f, &pose.to_vec(), FD_H);
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    assert!(worst <= 1e-4, "forward kinematics: max relative error {worst}");
}

#[test]
fn two_layer_perceptron_matches_fd() {
    // weights and inputs as leaves; loss = mean squared output error
    let mut prng = rng::stream(11, "mlp-gradcheck");
    let (din, dh, dout, batch) = (5, 8, 3, 4);
    let w1: Vec<f64> = (0..din * dh).map(|_| prng.gen::<f64>() - 0.5).collect();
    let w2: Vec<f64> = (0..dh * dout).map(|_| prng.gen::<f64>() - 0.5).collect();
    let x: Vec<f64> = (0..batch * din).map(|_| prng.gen::<f64>() - 0.5).collect();
    let y: Vec<f64> = (0..batch * dout).map(|_| prng.gen::<f64>() - 0.5).collect();

    let eval = |w1v: &[f64], w2v: &[f64]| -> f64 {
        // plain forward: silu hidden, linear out, mse
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut loss = 0.0;
        for b in 0..batch {
            let mut h = vec![0.0; dh];
            for j in 0..dh {
                let mut s = 0.0;
                for i in 0..din {
                    s += x[b * din + i] * w1v[i * dh + j];
                }
                h[j] = s * sigmoid(s);
            }
            for o in 0..dout {
                let mut s = 0.0;
                for j in 0..dh {
                    s += h[j] * w2v[j * dout + o];
                }
                let d = s - y[b * dout + o];
                loss += d * d;
            }
        }
        loss / (batch * dout) as f64
    };

    let mut tape = Tape::new();
    let w1v = tape.leaf(Tensor::matrix(din, dh, w1.clone()), true);
    let w2v = tape.leaf(Tensor::matrix(dh, dout, w2.clone()), true);
    let xv = tape.constant(Tensor::matrix(batch, din, x.clone()));
    let yv = tape.constant(Tensor::matrix(batch, dout, y.clone()));
    let h = tape.matmul(xv, w1v);
    let h = tape.silu(h);
    let out = tape.matmul(h, w2v);
    let diff = tape.sub(out, yv);
    let sq = tape.square(diff);
    let loss = tape.mean(sq);
    tape.backward(loss).unwrap();
    let g1 = tape.grad(w1v).unwrap().data().to_vec();
    let g2 = tape.grad(w2v).unwrap().data().to_vec();

    let w2c = w2.clone();
    let mut f1 = |w: &[f64]| eval(w, &w2c);
    let n1 = numeric_grad(&mut f1, &w1, FD_H);
    let w1c = w1.clone();
    let mut f2 = |w: &[f64]| eval(&w1c, w);
    let n2 = numeric_grad(&mut f2, &w2, FD_H);
    let worst = max_rel_err(&g1, &n1).max(max_rel_err(&g2, &n2));
    assert!(worst <= 1e-4, "perceptron: max relative error {worst}");
}

#[test]
fn gradient_is_linear_in_the_objective() {
    // grad of a*f + b*g equals a*grad f + b*grad g on shared leaves
    let hand = HandModel::default_toy();
    let obj = sample_object("bottle", "g", 1234).unwrap();
    let cloud = obj.sample_surface(64, 3).unwrap();
    let pose = random_pose(&hand, &obj, 77);
    let (a, b) = (2.5, -0.75);

    let build = |combined: bool| -> Vec<f64> {
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::vector(pose.t.to_vec()), true);
        let r6 = tape.leaf(Tensor::vector(pose.r6.to_vec()), true);
        let q = tape.leaf(Tensor::vector(pose.q.clone()), true);
        let fk = hand.fk_graph(&mut tape, t, r6, q);
        let obj_var = tape.constant(Tensor::from_rows3(&cloud.points));
        let f = losses::graph_pen(&mut tape, &hand, obj_var, &fk);
        let g = losses::graph_spen(&mut tape, &hand, &fk);
        if combined {
            let fa = tape.mul_const(f, a);
            let gb = tape.mul_const(g, b);
            let sum = tape.add(fa, gb);
            tape.backward(sum).unwrap();
        } else {
            // two separate backward passes accumulate a*f then b*g
            let fa = tape.mul_const(f, a);
            let gb = tape.mul_const(g, b);
            tape.backward(fa).unwrap();
            tape.backward(gb).unwrap();
        }
        let mut out = Vec::new();
        for v in [t, r6, q] {
            out.extend_from_slice(tape.grad(v).unwrap().data());
        }
        out
    };
    let combined = build(true);
    let separate = build(false);
    for (x, y) in combined.iter().zip(&separate) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
    }
}
