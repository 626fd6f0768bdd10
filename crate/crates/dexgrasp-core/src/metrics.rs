//! Evaluation metrics: intention consistency (chamfer, contact distance,
//! pose-space Fréchet), grasp quality (force-closure Q1, max penetration),
//! and diversity (translation / rotation / joint standard deviations).

use rand::Rng;

use crate::dataset::{Dataset, GraspRecord, Split};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::guidance;
use crate::hand::{GraspPose, HandModel};
use crate::losses;
use crate::object::ObjectModel;
use crate::posespace::PoseSpace;
use crate::rng;
use crate::train::{condition_for, quality_cloud, Condition, IdgcModel, QgcModel, QUALITY_CLOUD_POINTS};

/// Fixed seed of the Q1 direction set so the metric is a deterministic
/// function of its inputs.
const Q1_DIR_SEED: u64 = 0x5131;

#[derive(Clone, Debug)]
pub struct Q1Config {
    pub friction: f64,
    pub cone_edges: usize,
    /// Sampled unit wrench directions (drawn as antithetic pairs).
    pub directions: usize,
    /// Contact shell around the hand surface, meters.
    pub contact_threshold: f64,
    /// Grasps penetrating deeper than this are invalid: Q1 = 0.
    pub penetration_threshold: f64,
}

impl Default for Q1Config {
    fn default() -> Self {
        Q1Config {
            friction: 0.5,
            cone_edges: 8,
            directions: 512,
            contact_threshold: 0.01,
            penetration_threshold: 0.005,
        }
    }
}

/// Sampled unit 6-vectors with antithetic pairs.
fn wrench_directions(n: usize) -> Vec<[f64; 6]> {
    let mut rng = rng::stream(Q1_DIR_SEED, "q1-directions");
    let mut dirs = Vec::with_capacity(n);
    while dirs.len() + 2 <= n {
        let mut d = [0.0; 6];
        let mut norm = 0.0;
        for x in d.iter_mut() {
            *x = rng.sample::<f64, _>(rand_distr::StandardNormal);
            norm += *x * *x;
        }
        let norm = norm.sqrt();
        if norm < 1e-9 {
            continue;
        }
        for x in d.iter_mut() {
            *x /= norm;
        }
        let neg = [-d[0], -d[1], -d[2], -d[3], -d[4], -d[5]];
        dirs.push(d);
        dirs.push(neg);
    }
    dirs
}

/// Force-closure quality from explicit contacts: the radius of the largest
/// origin-centered ball inside the convex hull of the contact wrenches,
/// estimated over sampled support directions. Zero when some direction has
/// non-positive support (no closure).
pub fn q1_from_contacts(
    points: &[Vec3],
    normals: &[Vec3],
    centroid: Vec3,
    torque_scale: f64,
    config: &Q1Config,
    dense_directions: Option<usize>,
) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut wrenches: Vec<[f64; 6]> = Vec::with_capacity(points.len() * config.cone_edges);
    for (p, n) in points.iter().zip(normals) {
        let n = geom::normalize(*n);
        // tangent basis
        let seed_axis = if n[0].abs() <= n[1].abs() && n[0].abs() <= n[2].abs() {
            [1.0, 0.0, 0.0]
        } else if n[1].abs() <= n[2].abs() {
            [0.0, 1.0, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        };
        let u = geom::normalize(geom::cross(n, seed_axis));
        let v = geom::cross(n, u);
        let arm = geom::sub(*p, centroid);
        for j in 0..config.cone_edges {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / config.cone_edges as f64;
            // pressing force: unit inward normal plus friction tangential
            let f = geom::add(
                geom::scale(n, -1.0),
                geom::add(
                    geom::scale(u, config.friction * phi.cos()),
                    geom::scale(v, config.friction * phi.sin()),
                ),
            );
            let tau = geom::scale(geom::cross(arm, f), 1.0 / torque_scale);
            wrenches.push([f[0], f[1], f[2], tau[0], tau[1], tau[2]]);
        }
    }
    let dirs = wrench_directions(dense_directions.unwrap_or(config.directions));
    let mut min_support = f64::INFINITY;
    for d in &dirs {
        let mut support = f64::NEG_INFINITY;
        for w in &wrenches {
            let s = w.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
            if s > support {
                support = s;
            }
        }
        if support <= 0.0 {
            return 0.0;
        }
        if support < min_support {
            min_support = support;
        }
    }
    min_support
}

/// Full Q1 of a posed hand on an object cloud: contact extraction with the
/// 1 cm shell, penetration invalidation at 5 mm, torque scale 1 / object
/// radius.
pub fn q1(
    obj_points: &[Vec3],
    obj_normals: &[Vec3],
    hand: &HandModel,
    pose: &GraspPose,
    config: &Q1Config,
) -> Result<f64> {
    let cloud = hand.forward_kinematics(pose)?;
    if losses::max_penetration_cloud(obj_points, hand, &cloud) > config.penetration_threshold {
        return Ok(0.0);
    }
    let mut cps = Vec::new();
    let mut cns = Vec::new();
    for (p, n) in obj_points.iter().zip(obj_normals) {
        if hand.hand_sdf(&cloud, *p) < config.contact_threshold {
            cps.push(*p);
            cns.push(*n);
        }
    }
    if cps.is_empty() {
        return Ok(0.0);
    }
    let centroid = [0.0; 3]; // object frame is centered
    let radius = obj_points.iter().map(|p| geom::norm(*p)).fold(0.0, f64::max).max(1e-9);
    Ok(q1_from_contacts(&cps, &cns, centroid, radius, config, None))
}

/// Per-dimension population standard deviations of exactly eight samples.
#[derive(Clone, Debug)]
pub struct DiversityStats {
    /// Per-axis translation std, centimeters.
    pub t_std: [f64; 3],
    /// Per-axis rotation std after conversion to intrinsic XYZ Euler
    /// angles, degrees.
    pub r_std: [f64; 3],
    /// Per-joint std, degrees.
    pub q_std: Vec<f64>,
}

impl DiversityStats {
    pub fn delta_t(&self) -> f64 {
        self.t_std.iter().sum::<f64>() / 3.0
    }

    pub fn delta_r(&self) -> f64 {
        self.r_std.iter().sum::<f64>() / 3.0
    }

    pub fn delta_q(&self) -> f64 {
        self.q_std.iter().sum::<f64>() / self.q_std.len() as f64
    }
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

pub fn diversity(samples: &[GraspPose]) -> Result<DiversityStats> {
    if samples.len() != 8 {
        return Err(Error::Contract(format!(
            "diversity is defined over exactly 8 samples, got {}",
            samples.len()
        )));
    }
    let deg = 180.0 / std::f64::consts::PI;
    let mut t_std = [0.0; 3];
    for axis in 0..3 {
        let vals: Vec<f64> = samples.iter().map(|p| p.t[axis] * 100.0).collect();
        t_std[axis] = population_std(&vals);
    }
    let eulers: Vec<Vec3> = samples
        .iter()
        .map(|p| {
            let e = geom::euler_xyz_intrinsic(&p.rotation_matrix());
            [e[0] * deg, e[1] * deg, e[2] * deg]
        })
        .collect();
    let mut r_std = [0.0; 3];
    for axis in 0..3 {
        let vals: Vec<f64> = eulers.iter().map(|e| e[axis]).collect();
        r_std[axis] = population_std(&vals);
    }
    let joints = samples[0].q.len();
    let mut q_std = Vec::with_capacity(joints);
    for j in 0..joints {
        let vals: Vec<f64> = samples.iter().map(|p| p.q[j] * deg).collect();
        q_std.push(population_std(&vals));
    }
    Ok(DiversityStats { t_std, r_std, q_std })
}

// ── pose-space Fréchet distance ─────────────────────────────────────────

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major).
/// Returns (eigenvalues, row-major eigenvector matrix with eigenvectors in
/// columns).
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-18 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals = (0..n).map(|i| m[i * n + i]).collect();
    (eigvals, v)
}

fn mat_mul_n(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Symmetric PSD square root via eigendecomposition.
fn sym_sqrt(a: &[f64], n: usize) -> Vec<f64> {
    let (vals, vecs) = symmetric_eigen(a, n);
    // U diag(sqrt(clamped)) U^T
    let mut scaled = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            scaled[i * n + j] = vecs[i * n + j] * vals[j].max(0.0).sqrt();
        }
    }
    let mut vt = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            vt[i * n + j] = vecs[j * n + i];
        }
    }
    mat_mul_n(&scaled, &vt, n)
}

fn mean_cov(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (r[j] - mean[j]) / n;
            }
        }
    }
    (mean, cov)
}

/// Fréchet distance between Gaussian fits of two vector sets:
/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2})`. Near-singular
/// covariances get a 1e-6 diagonal ridge; the flag reports it.
pub fn pose_frechet(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(f64, bool)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("empty sample set for the Fréchet distance".into()));
    }
    let d = a[0].len();
    if a.len() < d + 1 || b.len() < d + 1 {
        return Err(Error::Contract(format!(
            "need at least dim+1 = {} samples per set, got {} and {}",
            d + 1,
            a.len(),
            b.len()
        )));
    }
    let (mu_a, mut cov_a) = mean_cov(a);
    let (mu_b, mut cov_b) = mean_cov(b);
    let mut ridged = false;
    for cov in [&mut cov_a, &mut cov_b] {
        let (vals, _) = symmetric_eigen(cov, d);
        if vals.iter().any(|&v| v < 1e-10) {
            for i in 0..d {
                cov[i * d + i] += 1e-6;
            }
            ridged = true;
        }
    }
    let sqrt_a = sym_sqrt(&cov_a, d);
    let inner = mat_mul_n(&sqrt_a, &mat_mul_n(&cov_b, &sqrt_a, d), d);
    let cross = sym_sqrt(&inner, d);
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let mut trace = 0.0;
    for i in 0..d {
        trace += cov_a[i * d + i] + cov_b[i * d + i] - 2.0 * cross[i * d + i];
    }
    Ok((mean_term + trace, ridged))
}

/// Spearman rank correlation (mean ranks on ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let mean_rank = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                ranks[k] = mean_rank;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mx) * (b - my);
        dx += (a - mx) * (a - mx);
        dy += (b - my) * (b - my);
    }
    if dx == 0.0 || dy == 0.0 {
        return 0.0;
    }
    num / (dx * dy).sqrt()
}

// ── target assignment and full evaluation ──────────────────────────────

/// Best-matching ground truth inside a candidate group sharing contact
/// parts and brief guidance: argmin hand-cloud chamfer (ties to the lowest
/// index).
pub fn assign_target<'a>(
    hand: &HandModel,
    pred_cloud: &[Vec3],
    group: &[&'a GraspRecord],
) -> Result<(usize, &'a GraspRecord, f64)> {
    if group.is_empty() {
        return Err(Error::Contract("target assignment over an empty group".into()));
    }
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, r) in group.iter().enumerate() {
        let gt = hand.forward_kinematics(&r.pose)?.points;
        let d = losses::loss_chamfer(pred_cloud, &gt)?;
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok((best, group[best], best_d))
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub samples_per_group: usize,
    pub q1: Q1Config,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { samples_per_group: 8, q1: Q1Config::default() }
    }
}

#[derive(Clone, Debug)]
pub struct GroupEval {
    pub object_id: String,
    pub intent_key: String,
    pub cd: f64,
    pub con: f64,
    pub pen_cm: f64,
    pub q1: f64,
    pub delta_t: f64,
    pub delta_r: f64,
    pub delta_q: f64,
    pub intent_match: f64,
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub cd: f64,
    pub con: f64,
    pub q1: f64,
    pub pen_cm: f64,
    pub delta_t: f64,
    pub delta_r: f64,
    pub delta_q: f64,
    pub pose_frechet: Option<f64>,
    pub frechet_ridged: bool,
    pub intent_match: f64,
    pub sample_count: usize,
    pub groups: Vec<GroupEval>,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "variant,cd,con,q1,pen_cm,delta_t_cm,delta_r_deg,delta_q_deg,pose_frechet,intent_match,samples"
    }

    pub fn csv_row(&self, variant: &str) -> String {
        format!(
            "{variant},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.4},{}",
            self.cd,
            self.con,
            self.q1,
            self.pen_cm,
            self.delta_t,
            self.delta_r,
            self.delta_q,
            match self.pose_frechet {
                Some(v) => format!("{v:.6}"),
                None => "nan".to_string(),
            },
            self.intent_match,
            self.sample_count
        )
    }
}

/// Evaluate a sampler over the eval split: for each (object, intent)
/// group, draw `samples_per_group` grasps, assign targets, and aggregate
/// the metric suite.
pub fn evaluate_with<S>(
    ds: &Dataset,
    space: &PoseSpace,
    config: &EvalConfig,
    mut sampler: S,
) -> Result<MetricsReport>
where
    S: FnMut(&Condition, &[&GraspRecord], u64) -> Result<Vec<GraspPose>>,
{
    let hand = &ds.hand;
    let groups = ds.intent_groups(Split::Eval);
    if groups.is_empty() {
        return Err(Error::Contract("eval split has no intent groups".into()));
    }
    let vocab = crate::nets::PartVocab::from_dataset(ds);
    let mut group_reports = Vec::new();
    let mut all_pred_z: Vec<Vec<f64>> = Vec::new();
    let mut all_gt_z: Vec<Vec<f64>> = Vec::new();
    let mut sums = (0.0, 0.0, 0.0, 0.0); // cd, con, pen, q1
    let mut intent_hits = 0usize;
    let mut n_samples = 0usize;
    for (gi, ((object_id, intent_key), members)) in groups.iter().enumerate() {
        let obj = ds
            .object(object_id)
            .ok_or_else(|| Error::Contract(format!("unknown object {object_id}")))?;
        let cond = condition_for(obj, &members[0].guidance, &vocab, 64)?;
        let qcloud_full = obj.sample_surface(QUALITY_CLOUD_POINTS, {
            use rand::Rng as _;
            rng::stream(crate::train::QUALITY_CLOUD_SEED, &format!("quality/{}", obj.id)).gen()
        })?;
        let samples = sampler(&cond, members, gi as u64)?;
        if samples.len() != config.samples_per_group {
            return Err(Error::Contract(format!(
                "sampler returned {} grasps, expected {}",
                samples.len(),
                config.samples_per_group
            )));
        }
        let mut g = GroupEval {
            object_id: object_id.clone(),
            intent_key: intent_key.clone(),
            cd: 0.0,
            con: 0.0,
            pen_cm: 0.0,
            q1: 0.0,
            delta_t: 0.0,
            delta_r: 0.0,
            delta_q: 0.0,
            intent_match: 0.0,
        };
        for pose in &samples {
            let pred_cloud = hand.forward_kinematics(pose)?.points;
            let (_, target, cd) = assign_target(hand, &pred_cloud, members)?;
            let target_cloud = hand.forward_kinematics(&target.pose)?.points;
            let pred_map = losses::compute_contact_map(&qcloud_full.points, &pred_cloud);
            let target_map = losses::compute_contact_map(&qcloud_full.points, &target_cloud);
            let con = losses::contact_distance(&pred_map, &target_map)?;
            let pen = losses::max_penetration(&qcloud_full.points, hand, pose)?;
            let q1v = q1(&qcloud_full.points, &qcloud_full.normals, hand, pose, &config.q1)?;
            g.cd += cd;
            g.con += con;
            g.pen_cm += pen * 100.0;
            g.q1 += q1v;
            let parts = guidance::contact_parts(hand, obj, pose)?;
            let want: Result<Vec<Option<u32>>> = members[0]
                .guidance
                .finger_parts
                .iter()
                .map(|p| Ok(p.as_deref().map(|n| obj.part_id(n).unwrap())))
                .collect();
            if parts == want? {
                g.intent_match += 1.0;
                intent_hits += 1;
            }
            all_pred_z.push(space.standardize(pose, cond.scale));
            n_samples += 1;
        }
        let k = samples.len() as f64;
        g.cd /= k;
        g.con /= k;
        g.pen_cm /= k;
        g.q1 /= k;
        g.intent_match /= k;
        if samples.len() == 8 {
            let div = diversity(&samples)?;
            g.delta_t = div.delta_t();
            g.delta_r = div.delta_r();
            g.delta_q = div.delta_q();
        }
        sums.0 += g.cd;
        sums.1 += g.con;
        sums.2 += g.pen_cm;
        sums.3 += g.q1;
        for m in members {
            all_gt_z.push(space.standardize(&m.pose, cond.scale));
        }
        group_reports.push(g);
    }
    let gn = group_reports.len() as f64;
    let dim = space.dim();
    let (frechet, ridged) = if all_pred_z.len() > dim && all_gt_z.len() > dim {
        let (v, r) = pose_frechet(&all_pred_z, &all_gt_z)?;
        (Some(v), r)
    } else {
        (None, false)
    };
    Ok(MetricsReport {
        cd: sums.0 / gn,
        con: sums.1 / gn,
        q1: sums.3 / gn,
        pen_cm: sums.2 / gn,
        delta_t: group_reports.iter().map(|g| g.delta_t).sum::<f64>() / gn,
        delta_r: group_reports.iter().map(|g| g.delta_r).sum::<f64>() / gn,
        delta_q: group_reports.iter().map(|g| g.delta_q).sum::<f64>() / gn,
        pose_frechet: frechet,
        frechet_ridged: ridged,
        intent_match: intent_hits as f64 / n_samples.max(1) as f64,
        sample_count: n_samples,
        groups: group_reports,
    })
}

/// Evaluate a trained pipeline (refiner optional) on the eval split.
pub fn evaluate(
    idgc: &IdgcModel,
    qgc: Option<&QgcModel>,
    ds: &Dataset,
    config: &EvalConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let hand = &ds.hand;
    evaluate_with(ds, &idgc.space, config, |cond, _members, gi| {
        use rand::Rng as _;
        let s = rng::substream(seed, "eval/group", gi).gen();
        crate::train::generate(idgc, qgc, hand, cond, config.samples_per_group, s)
    })
}

pub use crate::losses::contact_distance;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::object::{ObjectModel, Primitive};

    #[test]
    fn single_contact_has_no_closure() {
        let cfg = Q1Config::default();
        let v = q1_from_contacts(
            &[[1.0, 0.0, 0.0]],
            &[[1.0, 0.0, 0.0]],
            [0.0; 3],
            1.0,
            &cfg,
            None,
        );
        assert_eq!(v, 0.0);
    }

    #[test]
    fn antipodal_sphere_contacts_close_and_match_dense_oracle() {
        let cfg = Q1Config::default();
        let points = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let normals = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let v = q1_from_contacts(&points, &normals, [0.0; 3], 1.0, &cfg, None);
        assert!(v > 0.0, "antipodal grasp should have closure");
        let dense = q1_from_contacts(&points, &normals, [0.0; 3], 1.0, &cfg, Some(10_000));
        assert!(
            (v - dense).abs() <= 0.1 * dense,
            "sampled {v} vs dense {dense}"
        );
    }

    #[test]
    fn q1_monotone_under_contact_removal() {
        let cfg = Q1Config::default();
        // tetrahedral-ish contacts on a unit sphere
        let pts: Vec<[f64; 3]> = vec![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
        ];
        let nrm = pts.clone();
        let full = q1_from_contacts(&pts, &nrm, [0.0; 3], 1.0, &cfg, None);
        for drop in 0..pts.len() {
            let sub_p: Vec<[f64; 3]> =
                pts.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, p)| *p).collect();
            let sub_n: Vec<[f64; 3]> =
                nrm.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, p)| *p).collect();
            let less = q1_from_contacts(&sub_p, &sub_n, [0.0; 3], 1.0, &cfg, None);
            assert!(less <= full + 1e-12, "removal increased Q1: {less} vs {full}");
        }
    }

    #[test]
    fn deep_penetration_zeroes_q1() {
        let hand = HandModel::default_toy();
        let obj = ObjectModel::new("s", "test", vec![Primitive::sphere(0.05, [0.0; 3], "body")])
            .unwrap();
        let cloud = obj.sample_surface(256, 8).unwrap();
        // palm buried in the sphere's top: way past the 5 mm limit
        let mut pose = GraspPose::identity(hand.joint_count());
        pose.t = [0.0, 0.0, 0.045];
        let pen = losses::max_penetration(&cloud.points, &hand, &pose).unwrap();
        assert!(pen > 0.006, "setup should penetrate, got {pen}");
        let v = q1(&cloud.points, &cloud.normals, &hand, &pose, &Q1Config::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn diversity_of_identical_poses_is_zero() {
        let pose = GraspPose::identity(12);
        let poses = vec![pose; 8];
        let d = diversity(&poses).unwrap();
        assert_eq!(d.t_std, [0.0; 3]);
        assert_eq!(d.r_std, [0.0; 3]);
        assert!(d.q_std.iter().all(|&v| v == 0.0));
        assert!(diversity(&poses[..7]).is_err());
    }

    #[test]
    fn diversity_two_point_translation_std() {
        let mut poses = vec![GraspPose::identity(12); 8];
        for (i, p) in poses.iter_mut().enumerate() {
            p.t[0] = if i % 2 == 0 { 0.01 } else { -0.01 };
        }
        let d = diversity(&poses).unwrap();
        assert!((d.t_std[0] - 1.0).abs() < 1e-12, "x std {:?}", d.t_std);
        assert_eq!(d.t_std[1], 0.0);
    }

    #[test]
    fn diversity_matches_loop_oracle() {
        let mut rng = rng::stream(5, "div");
        let mut poses = Vec::new();
        for _ in 0..8 {
            let mut p = GraspPose::identity(12);
            for t in p.t.iter_mut() {
                *t = 0.05 * (rng.gen::<f64>() - 0.5);
            }
            for q in p.q.iter_mut() {
                *q = 1.6 * rng.gen::<f64>();
            }
            poses.push(p);
        }
        let d = diversity(&poses).unwrap();
        // oracle: direct scalar loop over the q matrix
        let deg = 180.0 / std::f64::consts::PI;
        for j in 0..12 {
            let vals: Vec<f64> = poses.iter().map(|p| p.q[j] * deg).collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!((d.q_std[j] - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn frechet_self_distance_and_analytic_1d() {
        let mut rng = rng::stream(6, "frechet");
        let a: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..3).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let (d, ridged) = pose_frechet(&a, &a).unwrap();
        assert!(d.abs() <= 1e-8, "self distance {d}");
        assert!(!ridged);

        // exact unit-variance 1D sets with means one apart
        let a1: Vec<Vec<f64>> = (0..40).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }]).collect();
        let b1: Vec<Vec<f64>> = (0..40).map(|i| vec![if i % 2 == 0 { 2.0 } else { 0.0 }]).collect();
        let (d1, _) = pose_frechet(&a1, &b1).unwrap();
        assert!((d1 - 1.0).abs() < 1e-9, "1d analytic case {d1}");
    }

    #[test]
    fn frechet_is_symmetric() {
        let mut rng = rng::stream(7, "frechet-sym");
        let a: Vec<Vec<f64>> = (0..30).map(|_| (0..2).map(|_| rng.gen::<f64>()).collect()).collect();
        let b: Vec<Vec<f64>> =
            (0..30).map(|_| (0..2).map(|_| 2.0 * rng.gen::<f64>() + 0.5).collect()).collect();
        let (dab, _) = pose_frechet(&a, &b).unwrap();
        let (dba, _) = pose_frechet(&b, &a).unwrap();
        assert!((dab - dba).abs() < 1e-8);
    }

    #[test]
    fn spearman_detects_monotone_trends() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[9.0, 7.0, 5.0, 3.0]) + 1.0).abs() < 1e-12);
    }
}
