//! Synthetic dataset forge: catalog objects, oracle grasps from the
//! retargeting pipeline, template guidance, and on-disk serialization.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.txt            # flat key=value header + object/record tables
//! hand.toml               # hand description
//! objects/<id>.toml       # object descriptions
//! records/<id>.dgys       # binary grasp records
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::guidance::{self, GuidanceSpec, STYLES_PER_VERB};
use crate::hand::{GraspPose, HandModel};
use crate::losses;
use crate::object::{self, ObjectCloud, ObjectModel};
use crate::par::parallel_map_ordered;
use crate::records::{ByteReader, ByteWriter, RecordKind};
use crate::retarget::{self, RetargetConfig, SourceGraspSpec};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraspRecord {
    pub record_id: u32,
    pub object_id: String,
    pub guidance: GuidanceSpec,
    pub pose: GraspPose,
    /// Seed of the object cloud this record's contact map was computed on.
    pub cloud_seed: u64,
    pub contact_map: Vec<f64>,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct ForgeConfig {
    pub categories: Vec<String>,
    pub objects_per_category: usize,
    pub grasps_per_object: usize,
    pub train_fraction: f64,
    /// Points per record object cloud.
    pub cloud_points: usize,
    /// Records with deeper max penetration are discarded.
    pub max_pen_filter: f64,
    /// Oracle failure rate above this fraction aborts the category.
    pub max_failure_rate: f64,
    /// Wrist placement noise of the synthetic source grasps, meters.
    pub wrist_noise: f64,
    /// Fingertip targets sit this far inside the part surface, meters.
    pub target_inward: f64,
    pub retarget: RetargetConfig,
    pub threads: usize,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            categories: object::CATEGORIES.iter().map(|s| s.to_string()).collect(),
            objects_per_category: 10,
            grasps_per_object: 25,
            train_fraction: 0.8,
            cloud_points: 512,
            max_pen_filter: 0.005,
            max_failure_rate: 0.2,
            wrist_noise: 0.008,
            target_inward: 0.0005,
            retarget: RetargetConfig::default(),
            threads: 1,
        }
    }
}

pub struct Dataset {
    pub hand: HandModel,
    pub objects: Vec<ObjectModel>,
    pub records: Vec<GraspRecord>,
    pub seed: u64,
}

impl Dataset {
    pub fn object(&self, id: &str) -> Option<&ObjectModel> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn records_of(&self, split: Split) -> impl Iterator<Item = &GraspRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Train-split records grouped by (object, intent); BTreeMap for a
    /// deterministic group order.
    pub fn intent_groups(&self, split: Split) -> BTreeMap<(String, String), Vec<&GraspRecord>> {
        let mut groups: BTreeMap<(String, String), Vec<&GraspRecord>> = BTreeMap::new();
        for r in self.records_of(split) {
            groups
                .entry((r.object_id.clone(), r.guidance.intent_key()))
                .or_default()
                .push(r);
        }
        groups
    }
}

/// A synthetic source grasp: the spec plus the hidden pose that generated
/// its fingertip targets.
#[derive(Clone, Debug)]
pub struct SpecSample {
    pub spec: SourceGraspSpec,
    pub hidden: GraspPose,
}

fn orthonormal_from_approach(a: Vec3, roll: f64) -> geom::Mat3 {
    // pick the world axis least aligned with `a` to seed the tangent frame
    let seed_axis = {
        let abs = [a[0].abs(), a[1].abs(), a[2].abs()];
        if abs[0] <= abs[1] && abs[0] <= abs[2] {
            [1.0, 0.0, 0.0]
        } else if abs[1] <= abs[2] {
            [0.0, 1.0, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        }
    };
    let u = geom::normalize(geom::cross(a, seed_axis));
    let v = geom::cross(a, u);
    let x = geom::add(geom::scale(u, roll.cos()), geom::scale(v, roll.sin()));
    let z = a;
    let y = geom::cross(z, x);
    [x[0], y[0], z[0], x[1], y[1], z[1], x[2], y[2], z[2]]
}

fn unit_dir(rng: &mut ChaCha8Rng) -> Vec3 {
    let z = rng.gen::<f64>() * 2.0 - 1.0;
    let phi = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// Sample a synthetic source grasp for the given per-finger part intent.
///
/// A hidden grasp pose is drawn first: the wrist approaches the centroid
/// of the intended parts with the palm facing them, joints offset from
/// mid-range with one sign per finger. Fingertip targets are the part
/// surface points nearest the hidden fingertips, pushed `inward` meters
/// below the surface. The reported source wrist carries `wrist_noise`
/// meters of per-axis offset.
pub fn sample_source_spec(
    hand: &HandModel,
    obj: &ObjectModel,
    candidates: &ObjectCloud,
    parts: &[String],
    wrist_noise: f64,
    inward: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SpecSample> {
    let part_ids: Vec<u32> = parts
        .iter()
        .map(|p| {
            obj.part_id(p)
                .ok_or_else(|| Error::Contract(format!("part '{p}' missing on '{}'", obj.id)))
        })
        .collect::<Result<_>>()?;
    // anchor the approach on the intended parts
    let part_points = |pid: u32| -> Vec<usize> {
        candidates
            .part_ids
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == pid)
            .map(|(i, _)| i)
            .collect()
    };
    let mut pooled: Vec<usize> = Vec::new();
    for &pid in &part_ids {
        pooled.extend(part_points(pid));
    }
    pooled.sort_unstable();
    pooled.dedup();
    if pooled.is_empty() {
        return Err(Error::Fault(format!("no candidate surface points on parts of '{}'", obj.id)));
    }
    let anchor = pooled
        .iter()
        .fold([0.0; 3], |acc, &i| geom::add(acc, candidates.points[i]));
    let anchor = geom::scale(anchor, 1.0 / pooled.len() as f64);
    let spread = pooled
        .iter()
        .map(|&i| geom::dist(candidates.points[i], anchor))
        .fold(0.0, f64::max);
    let dist = 0.05 + 0.6 * spread;

    // split intents (forefinger on its own part) constrain the wrist roll:
    // the forefinger side of the palm must face its part
    let split_dir = if part_ids.len() >= 2 && part_ids.iter().any(|&p| p != part_ids[1]) {
        let mean_of = |pred: &dyn Fn(u32) -> bool| -> Option<Vec3> {
            let pts: Vec<Vec3> = pooled
                .iter()
                .filter(|&&i| pred(candidates.part_ids[i]))
                .map(|&i| candidates.points[i])
                .collect();
            if pts.is_empty() {
                return None;
            }
            let n = pts.len() as f64;
            Some(geom::scale(pts.iter().fold([0.0; 3], |a, p| geom::add(a, *p)), 1.0 / n))
        };
        let fore = part_ids[1];
        match (mean_of(&|p| p == fore), mean_of(&|p| p != fore)) {
            (Some(cs), Some(co)) if geom::dist(cs, co) > 1e-6 => {
                Some(geom::normalize(geom::sub(cs, co)))
            }
            _ => None,
        }
    } else {
        None
    };

    let mut best: Option<(f64, SpecSample)> = None;
    for _ in 0..16 {
        let a = unit_dir(rng);
        let roll = match split_dir {
            // maximize (hand +y) . split_dir over the roll angle
            Some(s) => {
                let seed_axis = {
                    let abs = [a[0].abs(), a[1].abs(), a[2].abs()];
                    if abs[0] <= abs[1] && abs[0] <= abs[2] {
                        [1.0, 0.0, 0.0]
                    } else if abs[1] <= abs[2] {
                        [0.0, 1.0, 0.0]
                    } else {
                        [0.0, 0.0, 1.0]
                    }
                };
                let u = geom::normalize(geom::cross(a, seed_axis));
                let v = geom::cross(a, u);
                (-geom::dot(u, s)).atan2(geom::dot(v, s)) + 0.6 * (rng.gen::<f64>() - 0.5)
            }
            None => rng.gen::<f64>() * 2.0 * std::f64::consts::PI,
        };
        let r = orthonormal_from_approach(a, roll);
        let mut q = hand.mid_range_q();
        {
            let mut k = 0;
            for f in 0..hand.finger_count() {
                // bias toward opening: extra curl digs link sides in
                let sign = if rng.gen::<f64>() < 0.7 { -1.0 } else { 1.0 };
                let joints = hand.description.fingers[f].joints.len();
                for _ in 0..joints {
                    q[k] += sign * (0.08 + 0.08 * rng.gen::<f64>());
                    k += 1;
                }
            }
        }
        let noise = [
            wrist_noise * if rng.gen::<f64>() < 0.5 { -1.0 } else { 1.0 }
                * (1.0 + 0.06 * rng.gen::<f64>()),
            wrist_noise * if rng.gen::<f64>() < 0.5 { -1.0 } else { 1.0 }
                * (1.0 + 0.06 * rng.gen::<f64>()),
            wrist_noise * if rng.gen::<f64>() < 0.5 { -1.0 } else { 1.0 }
                * (1.0 + 0.06 * rng.gen::<f64>()),
        ];
        // back the wrist off along the approach until the hidden pose no
        // longer drives link sides into the object
        for extra in 0..10 {
            let wrist = geom::add(anchor, geom::scale(a, dist + 0.004 * extra as f64));
            let hidden = GraspPose { t: wrist, r6: geom::mat_to_rot6(&r), q: q.clone() };
            let hc = hand.forward_kinematics(&hidden)?;
            let hidden_pen = losses::max_penetration_cloud(&candidates.points, hand, &hc);
            let mut probe = hidden.clone();
            for qv in probe.q.iter_mut() {
                *qv += 0.24;
            }
            let pc = hand.forward_kinematics(&probe)?;
            let probe_pen = losses::max_penetration_cloud(&candidates.points, hand, &pc);
            if (hidden_pen > 0.0015 || probe_pen > 0.004) && extra < 9 {
                continue;
            }
            let mut targets = Vec::with_capacity(hc.fingertips.len());
            let mut worst = 0.0f64;
            for (tip, &pid) in hc.fingertips.iter().zip(&part_ids) {
                let mut best_i = None;
                let mut best_d = f64::INFINITY;
                let mut any_i = None;
                let mut any_d = f64::INFINITY;
                for &i in &pooled {
                    if candidates.part_ids[i] != pid {
                        continue;
                    }
                    let d = geom::dist(candidates.points[i], *tip);
                    if d < any_d {
                        any_d = d;
                        any_i = Some(i);
                    }
                    // prefer the side facing the fingertip: targets behind
                    // a thin part would drag the finger through it
                    if geom::dot(
                        candidates.normals[i],
                        geom::sub(*tip, candidates.points[i]),
                    ) <= 0.0
                    {
                        continue;
                    }
                    // stay clear of part junctions, where a finger closing
                    // on one part collides with its neighbor
                    let near_other = (0..obj.part_names().len() as u32)
                        .filter(|&o| o != pid)
                        .any(|o| obj.part_sdf(o, candidates.points[i]).abs() < 0.015);
                    if near_other {
                        continue;
                    }
                    if d < best_d {
                        best_d = d;
                        best_i = Some(i);
                    }
                }
                if best_i.is_none() {
                    best_i = any_i;
                    best_d = any_d;
                }
                let i = best_i.ok_or_else(|| {
                    Error::Fault(format!("no candidates for part id {pid} on '{}'", obj.id))
                })?;
                worst = worst.max(best_d);
                targets.push(geom::sub(
                    candidates.points[i],
                    geom::scale(candidates.normals[i], inward),
                ));
            }
            let sample = SpecSample {
                spec: SourceGraspSpec {
                    fingertip_targets: targets,
                    wrist_rotation: r,
                    wrist_translation: geom::add(wrist, noise),
                    contact_parts: parts.to_vec(),
                },
                hidden,
            };
            let score = worst + probe_pen;
            if worst <= 0.035 && hidden_pen <= 0.0015 && probe_pen <= 0.004 {
                return Ok(sample);
            }
            if best.as_ref().map(|(w, _)| score < *w).unwrap_or(true) {
                best = Some((score, sample));
            }
            break;
        }
    }
    Ok(best.unwrap().1)
}

struct ObjectBatch {
    records: Vec<GraspRecord>,
    attempts: usize,
    failures: usize,
}

fn forge_attempt(
    hand: &HandModel,
    obj: &ObjectModel,
    candidates: &ObjectCloud,
    verb: &str,
    parts: &[String],
    split: Split,
    config: &ForgeConfig,
    stream_label: &str,
    attempt: u64,
    seed: u64,
) -> Result<Option<GraspRecord>> {
    let mut arng = rng::substream(seed, stream_label, attempt);
    let sampled = sample_source_spec(
        hand,
        obj,
        candidates,
        parts,
        config.wrist_noise,
        config.target_inward,
        &mut arng,
    )?;
    let outcome = retarget::retarget(hand, obj, &sampled.spec, &config.retarget);
    let (mut pose, report) = match outcome {
        Ok(v) => v,
        Err(_) => return Ok(None),
    };
    // joint limits: clamp hairline violations, reject real ones
    let (over, under) = hand.clamp_report_limits(&pose);
    let worst = over.iter().chain(under.iter()).fold(0.0f64, |a, &b| a.max(b));
    if worst > 1e-4 {
        return Ok(None);
    }
    if worst > 0.0 {
        let (lo, hi) = hand.joint_limits();
        for ((q, &l), &h) in pose.q.iter_mut().zip(&lo).zip(&hi) {
            *q = q.clamp(l, h);
        }
    }
    if report.fingertip_residual > 0.035 {
        return Ok(None);
    }
    let cloud_seed: u64 = arng.gen();
    let obj_cloud = obj.sample_surface(config.cloud_points, cloud_seed)?;
    let hand_cloud = hand.forward_kinematics(&pose)?;
    let max_pen = losses::max_penetration_cloud(&obj_cloud.points, hand, &hand_cloud);
    if max_pen > config.max_pen_filter {
        return Ok(None);
    }
    let style = arng.gen_range(0..STYLES_PER_VERB);
    let guidance = guidance::annotate_guidance(obj, &pose, hand, verb, style)?;
    let contact_map = losses::compute_contact_map(&obj_cloud.points, &hand_cloud.points);
    Ok(Some(GraspRecord {
        record_id: 0, // assigned at assembly
        object_id: obj.id.clone(),
        guidance,
        pose,
        cloud_seed,
        contact_map,
        split,
    }))
}

fn forge_object(
    hand: &HandModel,
    obj: &ObjectModel,
    split: Split,
    config: &ForgeConfig,
    seed: u64,
) -> Result<ObjectBatch> {
    let table = guidance::intent_table(&obj.category);
    if table.is_empty() {
        return Err(Error::Contract(format!("no intent table for category '{}'", obj.category)));
    }
    let candidates = obj.sample_surface(1024, rng::stream(seed, &format!("cands/{}", obj.id)).gen())?;
    let target = config.grasps_per_object;
    let max_attempts = ((target as f64) / (1.0 - config.max_failure_rate)).ceil() as usize;
    let mut records = Vec::with_capacity(target);
    let mut attempts = 0;
    let mut failures = 0;
    let label = format!("grasp/{}", obj.id);
    for attempt in 0..max_attempts {
        if records.len() >= target {
            break;
        }
        attempts += 1;
        let (verb, parts) = &table[attempt % table.len()];
        let parts: Vec<String> = parts.iter().map(|s| s.to_string()).collect();
        match forge_attempt(
            hand, obj, &candidates, verb, &parts, split, config, &label, attempt as u64, seed,
        )? {
            Some(rec) => records.push(rec),
            None => failures += 1,
        }
    }
    // every intent group needs at least two poses for the diversity
    // protocols; top up each verb until its dominant annotated intent has
    // two members, then drop stray singleton groups
    for (verb, parts) in &table {
        let dominant = |records: &[GraspRecord]| -> usize {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for r in records.iter().filter(|r| r.guidance.verb == *verb) {
                *counts.entry(r.guidance.intent_key()).or_default() += 1;
            }
            counts.values().copied().max().unwrap_or(0)
        };
        let parts: Vec<String> = parts.iter().map(|s| s.to_string()).collect();
        let label = format!("grasp-extra/{}/{verb}", obj.id);
        for attempt in 0..10u64 {
            if dominant(&records) >= 2 {
                break;
            }
            if let Some(rec) = forge_attempt(
                hand, obj, &candidates, verb, &parts, split, config, &label, attempt, seed,
            )? {
                records.push(rec);
            }
        }
        if dominant(&records) < 2 {
            return Err(Error::Fault(format!(
                "could not forge two matching '{verb}' grasps for object '{}'",
                obj.id
            )));
        }
    }
    let mut key_counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in &records {
        *key_counts.entry(r.guidance.intent_key()).or_default() += 1;
    }
    records.retain(|r| key_counts[&r.guidance.intent_key()] >= 2);
    Ok(ObjectBatch { records, attempts, failures })
}

/// Generate the full dataset: catalog objects per category, oracle grasps,
/// guidance annotations, and an object-level train/eval split.
pub fn generate_dataset(config: &ForgeConfig, seed: u64) -> Result<Dataset> {
    let hand = HandModel::default_toy();
    let mut objects = Vec::new();
    let mut splits = Vec::new();
    for cat in &config.categories {
        let n = config.objects_per_category;
        let eval_count = ((1.0 - config.train_fraction) * n as f64).round().max(1.0) as usize;
        // seeded shuffle decides which object instances are held out
        let mut order: Vec<usize> = (0..n).collect();
        let mut srng = rng::stream(seed, &format!("split/{cat}"));
        for i in (1..order.len()).rev() {
            let j = srng.gen_range(0..=i);
            order.swap(i, j);
        }
        let eval_set: Vec<usize> = order[..eval_count.min(n)].to_vec();
        for i in 0..n {
            let id = format!("{cat}_{i:04}");
            let oseed = rng::substream(seed, &format!("object/{cat}"), i as u64).gen();
            objects.push(object::sample_object(cat, &id, oseed)?);
            splits.push(if eval_set.contains(&i) { Split::Eval } else { Split::Train });
        }
    }

    let jobs: Vec<(ObjectModel, Split)> =
        objects.iter().cloned().zip(splits.iter().copied()).collect();
    let hand_ref = &hand;
    let results = parallel_map_ordered(jobs, config.threads, move |(obj, split)| {
        let r = forge_object(hand_ref, &obj, split, config, seed);
        (obj.category.clone(), r)
    });

    let mut records = Vec::new();
    let mut per_category: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (cat, res) in results {
        let batch = res?;
        let entry = per_category.entry(cat).or_insert((0, 0));
        entry.0 += batch.attempts;
        entry.1 += batch.failures;
        records.extend(batch.records);
    }
    for (cat, (attempts, failures)) in &per_category {
        let rate = *failures as f64 / (*attempts).max(1) as f64;
        if rate > config.max_failure_rate {
            return Err(Error::Fault(format!(
                "oracle failure rate {:.0}% exceeds {:.0}% on category '{cat}'",
                rate * 100.0,
                config.max_failure_rate * 100.0
            )));
        }
    }
    for (i, r) in records.iter_mut().enumerate() {
        r.record_id = i as u32;
    }
    Ok(Dataset { hand, objects, records, seed })
}

// ── serialization ───────────────────────────────────────────────────────

pub fn write_grasp_record(r: &GraspRecord) -> Vec<u8> {
    let mut w = ByteWriter::with_header(RecordKind::Grasp);
    w.u32(r.record_id);
    w.str(&r.object_id);
    w.u8(match r.split {
        Split::Train => 0,
        Split::Eval => 1,
    });
    w.str(&r.guidance.verb);
    w.u32(r.guidance.finger_parts.len() as u32);
    for p in &r.guidance.finger_parts {
        match p {
            Some(name) => {
                w.u8(1);
                w.str(name);
            }
            None => w.u8(0),
        }
    }
    w.str(&r.guidance.brief);
    w.str(&r.guidance.text);
    w.f64_slice(&r.pose.to_vec());
    w.u64(r.cloud_seed);
    w.f64_slice(&r.contact_map);
    w.finish()
}

pub fn read_grasp_record(data: &[u8]) -> Result<GraspRecord> {
    let mut r = ByteReader::new(data);
    let kind = r.header()?;
    if kind != RecordKind::Grasp as u32 {
        return Err(Error::Parse(format!("expected grasp record, found kind {kind}")));
    }
    let record_id = r.u32()?;
    let object_id = r.str()?;
    let split = match r.u8()? {
        0 => Split::Train,
        1 => Split::Eval,
        other => return Err(Error::Parse(format!("bad split tag {other}"))),
    };
    let verb = r.str()?;
    let nf = r.u32()? as usize;
    let mut finger_parts = Vec::with_capacity(nf);
    for _ in 0..nf {
        finger_parts.push(if r.u8()? == 1 { Some(r.str()?) } else { None });
    }
    let brief = r.str()?;
    let text = r.str()?;
    let pose = GraspPose::from_vec(&r.f64_vec()?)?;
    let cloud_seed = r.u64()?;
    let contact_map = r.f64_vec()?;
    if !r.done() {
        return Err(Error::Parse("trailing bytes after grasp record".into()));
    }
    Ok(GraspRecord {
        record_id,
        object_id,
        guidance: GuidanceSpec { verb, finger_parts, brief, text },
        pose,
        cloud_seed,
        contact_map,
        split,
    })
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("objects"))?;
    std::fs::create_dir_all(dir.join("records"))?;
    std::fs::write(dir.join("hand.toml"), ds.hand.to_toml_string())?;
    for obj in &ds.objects {
        std::fs::write(dir.join("objects").join(format!("{}.toml", obj.id)), obj.to_toml_string())?;
    }
    for r in &ds.records {
        std::fs::write(
            dir.join("records").join(format!("{:06}.dgys", r.record_id)),
            write_grasp_record(r),
        )?;
    }
    let mut manifest = String::new();
    manifest.push_str("format = dexgrasp-dataset\n");
    manifest.push_str("schema_version = 1\n");
    manifest.push_str(&format!("seed = {}\n", ds.seed));
    manifest.push_str("hand = hand.toml\n");
    manifest.push_str(&format!("objects = {}\n", ds.objects.len()));
    manifest.push_str(&format!("records = {}\n", ds.records.len()));
    manifest.push_str("[objects]\n");
    for (obj, split) in ds.objects.iter().map(|o| {
        let split = if ds.records.iter().any(|r| r.object_id == o.id && r.split == Split::Eval) {
            "eval"
        } else {
            "train"
        };
        (o, split)
    }) {
        manifest.push_str(&format!(
            "{} {} {} objects/{}.toml\n",
            obj.id, obj.category, split, obj.id
        ));
    }
    manifest.push_str("[records]\n");
    for r in &ds.records {
        manifest.push_str(&format!(
            "{:06} {} {} {} records/{:06}.dgys\n",
            r.record_id,
            r.object_id,
            r.guidance.verb,
            r.split.tag(),
            r.record_id
        ));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|_| Error::Parse(format!("no dataset manifest in {}", dir.display())))?;
    let mut seed = 0u64;
    let mut object_files = Vec::new();
    let mut record_files = Vec::new();
    let mut section = "";
    for line in manifest.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            section = line;
            continue;
        }
        match section {
            "" => {
                if let Some(v) = line.strip_prefix("seed = ") {
                    seed = v
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad seed in manifest: {v}")))?;
                }
            }
            "[objects]" => {
                let path = line
                    .split_whitespace()
                    .last()
                    .ok_or_else(|| Error::Parse("bad object row".into()))?;
                object_files.push(path.to_string());
            }
            "[records]" => {
                let path = line
                    .split_whitespace()
                    .last()
                    .ok_or_else(|| Error::Parse("bad record row".into()))?;
                record_files.push(path.to_string());
            }
            _ => return Err(Error::Parse(format!("unknown manifest section {section}"))),
        }
    }
    let hand = HandModel::from_toml_str(&std::fs::read_to_string(dir.join("hand.toml"))?)?;
    let mut objects = Vec::with_capacity(object_files.len());
    for f in &object_files {
        objects.push(ObjectModel::from_toml_str(&std::fs::read_to_string(dir.join(f))?)?);
    }
    let mut records = Vec::with_capacity(record_files.len());
    for f in &record_files {
        records.push(read_grasp_record(&std::fs::read(dir.join(f))?)?);
    }
    Ok(Dataset { hand, objects, records, seed })
}
