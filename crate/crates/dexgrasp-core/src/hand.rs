//! Parametric articulated hand: capsule links on revolute chains with
//! differentiable forward kinematics.
//!
//! Every finger is a serial chain of revolute joints rotating about fixed
//! local axes; links extend along local +x and carry a capsule of the
//! joint's radius. The palm is a set of capsules fixed in the root frame.
//! World frames follow `world = R * local + t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};
use crate::tensor::{Tape, Tensor, Var};

pub const FINGER_NAMES: [&str; 4] = ["thumb", "forefinger", "middle finger", "ring finger"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointSpec {
    /// Unit rotation axis in the joint's local frame.
    pub axis: Vec3,
    /// Link length along local +x, meters.
    pub length: f64,
    /// Capsule radius of the link, meters.
    pub radius: f64,
    pub q_min: f64,
    pub q_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Finger {
    pub name: String,
    /// Row-major rotation of the finger base frame in the root frame.
    pub base_rotation: Mat3,
    pub base_translation: Vec3,
    #[serde(rename = "joint")]
    pub joints: Vec<JointSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PalmCapsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

/// File-facing description; see `HandModel` for the derived runtime form.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HandDescription {
    pub name: String,
    /// Surface sampling pattern: rings along each capsule axis.
    pub sample_rings: usize,
    /// Points per ring.
    pub sample_angles: usize,
    /// Anchor sphere centers as fractions along each link axis.
    pub anchor_fractions: Vec<f64>,
    /// Anchor sphere radius as a fraction of the link capsule radius.
    pub anchor_radius_scale: f64,
    #[serde(rename = "palm")]
    pub palm: Vec<PalmCapsule>,
    #[serde(rename = "finger")]
    pub fingers: Vec<Finger>,
}

/// One capsule link of the posed hand, either a palm capsule or a finger
/// link. `finger`/`joint` index into the chain for finger links.
#[derive(Clone, Debug)]
pub struct LinkInfo {
    pub finger: Option<usize>,
    pub joint: usize,
    pub length: f64,
    pub radius: f64,
}

#[derive(Clone, Debug)]
struct AnchorSpec {
    link: usize,
    /// Center in the link's local frame.
    local: Vec3,
    radius: f64,
}

/// Runtime hand model with precomputed sampling pattern, anchor table and
/// self-penetration pair list. Immutable after construction.
#[derive(Clone, Debug)]
pub struct HandModel {
    pub description: HandDescription,
    links: Vec<LinkInfo>,
    /// Per-link surface sample points, link-local.
    local_samples: Vec<Vec<Vec3>>,
    anchors: Vec<AnchorSpec>,
    /// Ordered anchor index pairs (i, j), i != j, on non-adjacent links.
    spen_pairs: Vec<(u32, u32)>,
}

/// Dexterous pose: root translation, 6D two-column root rotation, and
/// joint angles. The flat vector layout is `[t(3), r6(6), q(J)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraspPose {
    pub t: Vec3,
    pub r6: [f64; 6],
    pub q: Vec<f64>,
}

impl GraspPose {
    pub fn identity(joints: usize) -> Self {
        GraspPose { t: [0.0; 3], r6: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0], q: vec![0.0; joints] }
    }

    pub fn dim(&self) -> usize {
        9 + self.q.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.t);
        v.extend_from_slice(&self.r6);
        v.extend_from_slice(&self.q);
        v
    }

    pub fn from_vec(v: &[f64]) -> Result<Self> {
        if v.len() < 9 {
            return Err(Error::Contract(format!("pose vector too short: {}", v.len())));
        }
        Ok(GraspPose {
            t: [v[0], v[1], v[2]],
            r6: [v[3], v[4], v[5], v[6], v[7], v[8]],
            q: v[9..].to_vec(),
        })
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        geom::rot6_to_mat(&self.r6)
    }

    /// Apply a root rotation R on the left: rotates both the root frame
    /// and the translation.
    pub fn rotated(&self, r: &Mat3) -> GraspPose {
        let rm = geom::mat_mul(r, &self.rotation_matrix());
        GraspPose {
            t: geom::mat_apply(r, self.t),
            r6: geom::mat_to_rot6(&rm),
            q: self.q.clone(),
        }
    }
}

/// World-frame result of forward kinematics.
#[derive(Clone, Debug)]
pub struct HandCloud {
    /// Surface sample points, fingertips included.
    pub points: Vec<Vec3>,
    /// Owning link per point.
    pub link_ids: Vec<usize>,
    /// Fingertip site per finger.
    pub fingertips: Vec<Vec3>,
    /// Anchor sphere centers (order matches the model's anchor table).
    pub anchors: Vec<Vec3>,
    /// Capsule endpoints per link.
    pub seg_starts: Vec<Vec3>,
    pub seg_ends: Vec<Vec3>,
}

/// Tape handles produced by the differentiable FK path.
pub struct FkVars {
    /// [N, 3] surface points (fingertips included).
    pub points: Var,
    /// [F, 3]
    pub fingertips: Var,
    /// [A, 3]
    pub anchors: Var,
    /// [L, 3] capsule start points.
    pub seg_starts: Var,
    /// [L, 3] capsule end points.
    pub seg_ends: Var,
}

impl HandModel {
    pub fn new(description: HandDescription) -> Result<Self> {
        if description.fingers.is_empty() {
            return Err(Error::Parse("hand needs at least one finger".into()));
        }
        if description.sample_rings == 0 || description.sample_angles == 0 {
            return Err(Error::Parse("sampling pattern must be non-empty".into()));
        }
        if !(0.0 < description.anchor_radius_scale && description.anchor_radius_scale <= 1.0) {
            return Err(Error::Parse("anchor_radius_scale must be in (0, 1]".into()));
        }
        let mut links = Vec::new();
        for cap in &description.palm {
            if cap.radius <= 0.0 {
                return Err(Error::Parse("palm capsule radius must be positive".into()));
            }
            links.push(LinkInfo {
                finger: None,
                joint: 0,
                length: geom::dist(cap.a, cap.b),
                radius: cap.radius,
            });
        }
        for (fi, f) in description.fingers.iter().enumerate() {
            for (ji, j) in f.joints.iter().enumerate() {
                if j.radius <= 0.0 || j.length <= 0.0 {
                    return Err(Error::Parse(format!(
                        "finger '{}' joint {} needs positive length and radius",
                        f.name, ji
                    )));
                }
                if j.q_min >= j.q_max {
                    return Err(Error::Parse(format!(
                        "finger '{}' joint {} has q_min >= q_max",
                        f.name, ji
                    )));
                }
                if (geom::norm(j.axis) - 1.0).abs() > 1e-9 {
                    return Err(Error::Parse(format!(
                        "finger '{}' joint {} axis is not unit length",
                        f.name, ji
                    )));
                }
                links.push(LinkInfo { finger: Some(fi), joint: ji, length: j.length, radius: j.radius });
            }
        }
        for &fr in &description.anchor_fractions {
            if !(0.0..=1.0).contains(&fr) {
                return Err(Error::Parse("anchor fractions must lie in [0, 1]".into()));
            }
        }

        let local_samples = Self::build_samples(&description, &links);
        let anchors = Self::build_anchors(&description, &links);
        let spen_pairs = Self::build_spen_pairs(&links, &anchors);
        Ok(HandModel { description, links, local_samples, anchors, spen_pairs })
    }

    fn build_samples(desc: &HandDescription, links: &[LinkInfo]) -> Vec<Vec<Vec3>> {
        let rings = desc.sample_rings;
        let angles = desc.sample_angles;
        links
            .iter()
            .map(|link| {
                let mut pts = Vec::with_capacity(rings * angles);
                for ri in 0..rings {
                    let u = (ri as f64 + 0.5) / rings as f64 * link.length;
                    for ai in 0..angles {
                        let phi = 2.0 * std::f64::consts::PI * ai as f64 / angles as f64;
                        pts.push([u, link.radius * phi.cos(), link.radius * phi.sin()]);
                    }
                }
                pts
            })
            .collect()
    }

    fn build_anchors(desc: &HandDescription, links: &[LinkInfo]) -> Vec<AnchorSpec> {
        let mut anchors = Vec::new();
        for (li, link) in links.iter().enumerate() {
            for &fr in &desc.anchor_fractions {
                anchors.push(AnchorSpec {
                    link: li,
                    local: [fr * link.length, 0.0, 0.0],
                    radius: desc.anchor_radius_scale * link.radius,
                });
            }
        }
        anchors
    }

    fn links_adjacent(links: &[LinkInfo], a: usize, b: usize) -> bool {
        if a == b {
            return true;
        }
        let (la, lb) = (&links[a], &links[b]);
        match (la.finger, lb.finger) {
            // palm capsules count as one rigid body
            (None, None) => true,
            // palm is adjacent to each finger's first link
            (None, Some(_)) => lb.joint == 0,
            (Some(_), None) => la.joint == 0,
            (Some(fa), Some(fb)) => fa == fb && la.joint.abs_diff(lb.joint) <= 1,
        }
    }

    fn build_spen_pairs(links: &[LinkInfo], anchors: &[AnchorSpec]) -> Vec<(u32, u32)> {
        let mut pairs = Vec::new();
        for i in 0..anchors.len() {
            for j in 0..anchors.len() {
                if i != j && !Self::links_adjacent(links, anchors[i].link, anchors[j].link) {
                    pairs.push((i as u32, j as u32));
                }
            }
        }
        pairs
    }

    pub fn joint_count(&self) -> usize {
        self.description.fingers.iter().map(|f| f.joints.len()).sum()
    }

    pub fn finger_count(&self) -> usize {
        self.description.fingers.len()
    }

    pub fn pose_dim(&self) -> usize {
        9 + self.joint_count()
    }

    pub fn links(&self) -> &[LinkInfo] {
        &self.links
    }

    /// Total surface sample count (fingertips included).
    pub fn sample_count(&self) -> usize {
        self.local_samples.iter().map(|s| s.len()).sum::<usize>() + self.finger_count()
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors.len()
    }

    pub fn anchor_radii(&self) -> Vec<f64> {
        self.anchors.iter().map(|a| a.radius).collect()
    }

    pub fn anchor_link(&self, idx: usize) -> usize {
        self.anchors[idx].link
    }

    pub fn spen_pairs(&self) -> &[(u32, u32)] {
        &self.spen_pairs
    }

    pub fn joint_limits(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for f in &self.description.fingers {
            for j in &f.joints {
                lo.push(j.q_min);
                hi.push(j.q_max);
            }
        }
        (lo, hi)
    }

    pub fn mid_range_q(&self) -> Vec<f64> {
        let (lo, hi) = self.joint_limits();
        lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// Flat joint index of the first joint of finger `fi`.
    fn finger_joint_offset(&self, fi: usize) -> usize {
        self.description.fingers[..fi].iter().map(|f| f.joints.len()).sum()
    }

    fn check_pose(&self, pose: &GraspPose) -> Result<()> {
        if pose.q.len() != self.joint_count() {
            return Err(Error::Contract(format!(
                "pose has {} joint angles, hand has {}",
                pose.q.len(),
                self.joint_count()
            )));
        }
        Ok(())
    }

    /// World-frame surface points, fingertip sites, anchors and capsules.
    pub fn forward_kinematics(&self, pose: &GraspPose) -> Result<HandCloud> {
        self.check_pose(pose)?;
        let r_root = pose.rotation_matrix();
        let n_links = self.links.len();
        let mut frames: Vec<(Mat3, Vec3)> = Vec::with_capacity(n_links);
        for _ in &self.description.palm {
            frames.push((r_root, pose.t));
        }
        let mut fingertips = Vec::with_capacity(self.finger_count());
        for (fi, f) in self.description.fingers.iter().enumerate() {
            let mut r = geom::mat_mul(&r_root, &f.base_rotation);
            let mut t = geom::add(pose.t, geom::mat_apply(&r_root, f.base_translation));
            let q0 = self.finger_joint_offset(fi);
            for (ji, joint) in f.joints.iter().enumerate() {
                if ji > 0 {
                    let off = [f.joints[ji - 1].length, 0.0, 0.0];
                    t = geom::add(t, geom::mat_apply(&r, off));
                }
                r = geom::mat_mul(&r, &geom::rot_axis_angle(joint.axis, pose.q[q0 + ji]));
                frames.push((r, t));
            }
            let last = f.joints.last().unwrap();
            let tip_local = [last.length + last.radius, 0.0, 0.0];
            fingertips.push(geom::add(t, geom::mat_apply(&r, tip_local)));
        }

        let mut points = Vec::with_capacity(self.sample_count());
        let mut link_ids = Vec::with_capacity(self.sample_count());
        let mut seg_starts = Vec::with_capacity(n_links);
        let mut seg_ends = Vec::with_capacity(n_links);
        for (li, link) in self.links.iter().enumerate() {
            let (r, t) = &frames[li];
            let (a_local, b_local) = self.seg_local(li, link);
            seg_starts.push(geom::add(*t, geom::mat_apply(r, a_local)));
            seg_ends.push(geom::add(*t, geom::mat_apply(r, b_local)));
            for p in &self.local_samples[li] {
                let local = geom::add(a_local, *p);
                points.push(geom::add(*t, geom::mat_apply(r, local)));
                link_ids.push(li);
            }
        }
        for (fi, tip) in fingertips.iter().enumerate() {
            points.push(*tip);
            link_ids.push(self.last_link_of(fi));
        }
        let anchors = self
            .anchors
            .iter()
            .map(|a| {
                let (r, t) = &frames[a.link];
                let (a_local, _) = self.seg_local(a.link, &self.links[a.link]);
                geom::add(*t, geom::mat_apply(r, geom::add(a_local, a.local)))
            })
            .collect();
        Ok(HandCloud { points, link_ids, fingertips, anchors, seg_starts, seg_ends })
    }

    /// Capsule endpoints in the owning frame's coordinates. Palm capsules
    /// live directly in the root frame; finger links run along local +x.
    fn seg_local(&self, li: usize, link: &LinkInfo) -> (Vec3, Vec3) {
        match link.finger {
            None => {
                let cap = &self.description.palm[li];
                (cap.a, cap.b)
            }
            Some(_) => ([0.0; 3], [link.length, 0.0, 0.0]),
        }
    }

    pub fn last_link_of(&self, fi: usize) -> usize {
        self.description.palm.len() + self.finger_joint_offset(fi)
            + self.description.fingers[fi].joints.len()
            - 1
    }

    /// Per-joint limit violations: `max(q - q_max, 0)` and `max(q_min - q, 0)`.
    pub fn clamp_report_limits(&self, pose: &GraspPose) -> (Vec<f64>, Vec<f64>) {
        let (lo, hi) = self.joint_limits();
        let over = pose.q.iter().zip(&hi).map(|(&q, &h)| (q - h).max(0.0)).collect();
        let under = pose.q.iter().zip(&lo).map(|(&q, &l)| (l - q).max(0.0)).collect();
        (over, under)
    }

    pub fn within_limits(&self, pose: &GraspPose) -> bool {
        let (over, under) = self.clamp_report_limits(pose);
        over.iter().chain(under.iter()).all(|&v| v == 0.0)
    }

    /// Exact SDF of the posed hand (union of link capsules), positive outside.
    pub fn hand_sdf(&self, cloud: &HandCloud, p: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        for (li, link) in self.links.iter().enumerate() {
            let d = geom::capsule_sdf(p, cloud.seg_starts[li], cloud.seg_ends[li], link.radius);
            if d < best {
                best = d;
            }
        }
        best
    }

    /// Differentiable FK over tape variables `t [3]`, `r6 [6]`, `q [J]`.
    pub fn fk_graph(&self, tape: &mut Tape, t: Var, r6: Var, q: Var) -> FkVars {
        let r_root = rot6_graph(tape, r6);
        let n_palm = self.description.palm.len();
        let mut frames: Vec<(Var, Var)> = Vec::with_capacity(self.links.len());
        for _ in 0..n_palm {
            frames.push((r_root, t));
        }
        for (fi, f) in self.description.fingers.iter().enumerate() {
            let base_r = tape.constant(Tensor::matrix(3, 3, f.base_rotation.to_vec()));
            let base_t = tape.constant(Tensor::matrix(1, 3, f.base_translation.to_vec()));
            let mut r = tape.matmul(r_root, base_r);
            let bt_world = tape.matmul_nt(base_t, r_root);
            let bt_world = tape.reshape(bt_world, &[3]);
            let mut tv = tape.add(t, bt_world);
            let q0 = self.finger_joint_offset(fi);
            for (ji, joint) in f.joints.iter().enumerate() {
                if ji > 0 {
                    let off = tape.constant(Tensor::matrix(
                        1,
                        3,
                        vec![f.joints[ji - 1].length, 0.0, 0.0],
                    ));
                    let off_w = tape.matmul_nt(off, r);
                    let off_w = tape.reshape(off_w, &[3]);
                    tv = tape.add(tv, off_w);
                }
                let r_local = rodrigues_graph(tape, q, q0 + ji, joint.axis);
                r = tape.matmul(r, r_local);
                frames.push((r, tv));
            }
        }

        let mut point_parts = Vec::new();
        let mut start_parts = Vec::with_capacity(self.links.len());
        let mut end_parts = Vec::with_capacity(self.links.len());
        for (li, link) in self.links.iter().enumerate() {
            let (r, tv) = frames[li];
            let (a_local, b_local) = self.seg_local(li, link);
            let locals: Vec<[f64; 3]> = self.local_samples[li]
                .iter()
                .map(|p| geom::add(a_local, *p))
                .collect();
            let local_const = tape.constant(Tensor::from_rows3(&locals));
            let rotated = tape.matmul_nt(local_const, r);
            point_parts.push(tape.add(rotated, tv));
            let seg_const = tape.constant(Tensor::from_rows3(&[a_local, b_local]));
            let seg_world = tape.matmul_nt(seg_const, r);
            let seg_world = tape.add(seg_world, tv);
            start_parts.push(tape.gather(seg_world, &[0]));
            end_parts.push(tape.gather(seg_world, &[1]));
        }
        let mut tip_parts = Vec::with_capacity(self.finger_count());
        for (fi, f) in self.description.fingers.iter().enumerate() {
            let (r, tv) = frames[self.last_link_of(fi)];
            let last = f.joints.last().unwrap();
            let tip_local = tape.constant(Tensor::matrix(
                1,
                3,
                vec![last.length + last.radius, 0.0, 0.0],
            ));
            let rotated = tape.matmul_nt(tip_local, r);
            tip_parts.push(tape.add(rotated, tv));
        }
        let mut anchor_parts = Vec::with_capacity(self.anchors.len());
        for a in &self.anchors {
            let (r, tv) = frames[a.link];
            let (a_local, _) = self.seg_local(a.link, &self.links[a.link]);
            let c = tape.constant(Tensor::matrix(1, 3, geom::add(a_local, a.local).to_vec()));
            let rotated = tape.matmul_nt(c, r);
            anchor_parts.push(tape.add(rotated, tv));
        }

        let mut all_points = point_parts;
        all_points.extend_from_slice(&tip_parts);
        FkVars {
            points: tape.concat(&all_points),
            fingertips: tape.concat(&tip_parts),
            anchors: tape.concat(&anchor_parts),
            seg_starts: tape.concat(&start_parts),
            seg_ends: tape.concat(&end_parts),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(&self.description).expect("hand description serializes")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let desc: HandDescription =
            toml::from_str(s).map_err(|e| Error::Parse(format!("hand description: {e}")))?;
        HandModel::new(desc)
    }

    /// The default four-finger, twelve-joint hand. The thumb chain points
    /// opposite the other fingers so flexion opposes them under the palm.
    pub fn default_toy() -> Self {
        let curl_axis = [0.0, 1.0, 0.0];
        let finger = |name: &str, ty: f64| Finger {
            name: name.to_string(),
            base_rotation: geom::IDENTITY,
            base_translation: [0.04, ty, 0.0],
            joints: [0.035, 0.030, 0.025]
                .iter()
                .map(|&len| JointSpec {
                    axis: curl_axis,
                    length: len,
                    radius: 0.008,
                    q_min: 0.0,
                    q_max: 1.6,
                })
                .collect(),
        };
        let thumb = Finger {
            name: "thumb".to_string(),
            base_rotation: geom::rot_axis_angle([0.0, 0.0, 1.0], std::f64::consts::PI),
            base_translation: [-0.04, 0.0, 0.0],
            joints: [0.032, 0.028, 0.024]
                .iter()
                .map(|&len| JointSpec {
                    axis: curl_axis,
                    length: len,
                    radius: 0.009,
                    q_min: 0.0,
                    q_max: 1.6,
                })
                .collect(),
        };
        let desc = HandDescription {
            name: "toyhand-12".to_string(),
            sample_rings: 3,
            sample_angles: 4,
            anchor_fractions: vec![1.0 / 3.0, 2.0 / 3.0],
            anchor_radius_scale: 0.85,
            palm: vec![PalmCapsule {
                a: [-0.03, 0.0, 0.0],
                b: [0.03, 0.0, 0.0],
                radius: 0.014,
            }],
            fingers: vec![
                thumb,
                finger("forefinger", 0.025),
                finger("middle finger", 0.0),
                finger("ring finger", -0.025),
            ],
        };
        HandModel::new(desc).expect("default hand is valid")
    }
}

/// Gram-Schmidt 6D-to-rotation on the tape: returns R as a [3,3] node.
pub fn rot6_graph(tape: &mut Tape, r6: Var) -> Var {
    let a1 = tape.gather(r6, &[0, 1, 2]);
    let a2 = tape.gather(r6, &[3, 4, 5]);
    let b1 = normalize_graph(tape, a1);
    let d0 = tape.mul(b1, a2);
    let d = tape.sum(d0);
    let proj = tape.mul(b1, d);
    let a2p = tape.sub(a2, proj);
    let b2 = normalize_graph(tape, a2p);
    let b3 = cross_graph(tape, b1, b2);
    let cols = tape.concat(&[b1, b2, b3]);
    // columns -> row-major
    let perm = tape.gather(cols, &[0, 3, 6, 1, 4, 7, 2, 5, 8]);
    tape.reshape(perm, &[3, 3])
}

fn normalize_graph(tape: &mut Tape, v: Var) -> Var {
    let sq = tape.square(v);
    let s = tape.sum(sq);
    let n = tape.sqrt(s);
    tape.div(v, n)
}

fn cross_graph(tape: &mut Tape, a: Var, b: Var) -> Var {
    let a1 = tape.gather(a, &[1, 2, 0]);
    let b1 = tape.gather(b, &[2, 0, 1]);
    let p1 = tape.mul(a1, b1);
    let a2 = tape.gather(a, &[2, 0, 1]);
    let b2 = tape.gather(b, &[1, 2, 0]);
    let p2 = tape.mul(a2, b2);
    tape.sub(p1, p2)
}

/// Rodrigues rotation about a fixed axis by `q[idx]`, as a [3,3] node.
fn rodrigues_graph(tape: &mut Tape, q: Var, idx: usize, axis: Vec3) -> Var {
    let theta = tape.gather(q, &[idx]);
    let s = tape.sin(theta);
    let c = tape.cos(theta);
    let [x, y, z] = axis;
    let eye = tape.constant(Tensor::matrix(3, 3, geom::IDENTITY.to_vec()));
    let skew = tape.constant(Tensor::matrix(
        3,
        3,
        vec![0.0, -z, y, z, 0.0, -x, -y, x, 0.0],
    ));
    let outer = tape.constant(Tensor::matrix(
        3,
        3,
        vec![x * x, x * y, x * z, y * x, y * y, y * z, z * x, z * y, z * z],
    ));
    let t1 = tape.mul(c, eye);
    let t2 = tape.mul(s, skew);
    let nc = tape.neg(c);
    let ic = tape.add_const(nc, 1.0);
    let t3 = tape.mul(ic, outer);
    let t12 = tape.add(t1, t2);
    tape.add(t12, t3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hand_counts() {
        let hand = HandModel::default_toy();
        assert_eq!(hand.joint_count(), 12);
        assert_eq!(hand.finger_count(), 4);
        assert_eq!(hand.pose_dim(), 21);
        assert_eq!(hand.links().len(), 13);
        assert_eq!(hand.sample_count(), 13 * 12 + 4);
        assert_eq!(hand.anchor_count(), 26);
    }

    #[test]
    fn translation_shifts_every_point() {
        let hand = HandModel::default_toy();
        let rest = hand.forward_kinematics(&GraspPose::identity(12)).unwrap();
        let mut pose = GraspPose::identity(12);
        pose.t = [0.1, -0.2, 0.3];
        let moved = hand.forward_kinematics(&pose).unwrap();
        for (a, b) in rest.points.iter().zip(&moved.points) {
            let d = geom::sub(*b, *a);
            assert!((d[0] - 0.1).abs() < 1e-15);
            assert!((d[1] + 0.2).abs() < 1e-15);
            assert!((d[2] - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn limit_report_flags_single_violation() {
        let hand = HandModel::default_toy();
        let mut pose = GraspPose::identity(12);
        pose.q = hand.mid_range_q();
        let (over, under) = hand.clamp_report_limits(&pose);
        assert!(over.iter().all(|&v| v == 0.0));
        assert!(under.iter().all(|&v| v == 0.0));
        pose.q[3] = 1.7;
        let (over, _) = hand.clamp_report_limits(&pose);
        assert!((over[3] - 0.1).abs() < 1e-12);
        assert_eq!(over.iter().filter(|&&v| v > 0.0).count(), 1);
    }

    #[test]
    fn fk_graph_matches_plain_fk() {
        let hand = HandModel::default_toy();
        let mut pose = GraspPose::identity(12);
        pose.t = [0.02, -0.01, 0.05];
        pose.r6 = [0.9, 0.1, -0.2, 0.05, 1.1, 0.3];
        for (i, q) in pose.q.iter_mut().enumerate() {
            *q = 0.1 + 0.1 * i as f64;
        }
        let plain = hand.forward_kinematics(&pose).unwrap();

        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::vector(pose.t.to_vec()), true);
        let r6 = tape.leaf(Tensor::vector(pose.r6.to_vec()), true);
        let q = tape.leaf(Tensor::vector(pose.q.clone()), true);
        let fk = hand.fk_graph(&mut tape, t, r6, q);
        let pts = tape.value(fk.points);
        assert_eq!(pts.rows(), plain.points.len());
        for (i, p) in plain.points.iter().enumerate() {
            for k in 0..3 {
                assert!(
                    (pts.data()[i * 3 + k] - p[k]).abs() < 1e-12,
                    "point {i} axis {k} differs"
                );
            }
        }
        let tips = tape.value(fk.fingertips);
        for (i, p) in plain.fingertips.iter().enumerate() {
            for k in 0..3 {
                assert!((tips.data()[i * 3 + k] - p[k]).abs() < 1e-12);
            }
        }
        let anchors = tape.value(fk.anchors);
        for (i, p) in plain.anchors.iter().enumerate() {
            for k in 0..3 {
                assert!((anchors.data()[i * 3 + k] - p[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn toml_roundtrip_preserves_kinematics() {
        let hand = HandModel::default_toy();
        let text = hand.to_toml_string();
        let back = HandModel::from_toml_str(&text).unwrap();
        let mut pose = GraspPose::identity(12);
        pose.q = hand.mid_range_q();
        let a = hand.forward_kinematics(&pose).unwrap();
        let b = back.forward_kinematics(&pose).unwrap();
        for (x, y) in a.points.iter().zip(&b.points) {
            assert!(geom::dist(*x, *y) < 1e-15);
        }
    }

    #[test]
    fn fingertip_is_last_surface_point_per_finger() {
        let hand = HandModel::default_toy();
        let cloud = hand.forward_kinematics(&GraspPose::identity(12)).unwrap();
        let n = cloud.points.len();
        for (fi, tip) in cloud.fingertips.iter().enumerate() {
            let p = cloud.points[n - hand.finger_count() + fi];
            assert!(geom::dist(p, *tip) < 1e-15);
        }
    }
}
