//! Synthetic objects as unions of labeled analytic primitives.
//!
//! Every primitive has an exact SDF (positive outside), a closed-form
//! surface area, and a uniform surface sampler, so object clouds carry
//! exact normals and part labels. The union SDF is the pointwise minimum.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub enum PrimitiveKind {
    Sphere { radius: f64 },
    /// Axis-aligned box of the given half extents (local frame).
    Box3 { half_extents: Vec3 },
    /// Finite cylinder along local +z.
    Cylinder { radius: f64, half_height: f64 },
    /// Capsule along local +z.
    Capsule { radius: f64, half_height: f64 },
}

#[derive(Clone, Debug)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub part: String,
}

impl Primitive {
    pub fn sphere(radius: f64, center: Vec3, part: &str) -> Self {
        Primitive {
            kind: PrimitiveKind::Sphere { radius },
            rotation: geom::IDENTITY,
            translation: center,
            part: part.to_string(),
        }
    }

    pub fn box3(half_extents: Vec3, center: Vec3, part: &str) -> Self {
        Primitive {
            kind: PrimitiveKind::Box3 { half_extents },
            rotation: geom::IDENTITY,
            translation: center,
            part: part.to_string(),
        }
    }

    pub fn cylinder(radius: f64, half_height: f64, center: Vec3, part: &str) -> Self {
        Primitive {
            kind: PrimitiveKind::Cylinder { radius, half_height },
            rotation: geom::IDENTITY,
            translation: center,
            part: part.to_string(),
        }
    }

    /// Capsule with end sphere centers `a` and `b`.
    pub fn capsule_between(a: Vec3, b: Vec3, radius: f64, part: &str) -> Self {
        let d = geom::sub(b, a);
        let len = geom::norm(d);
        let dir = geom::scale(d, 1.0 / len);
        Primitive {
            kind: PrimitiveKind::Capsule { radius, half_height: 0.5 * len },
            rotation: rotation_from_z(dir),
            translation: geom::scale(geom::add(a, b), 0.5),
            part: part.to_string(),
        }
    }

    fn to_local(&self, p: Vec3) -> Vec3 {
        geom::mat_apply_transpose(&self.rotation, geom::sub(p, self.translation))
    }

    /// Exact signed distance, positive outside.
    pub fn sdf(&self, p: Vec3) -> f64 {
        let q = self.to_local(p);
        match self.kind {
            PrimitiveKind::Sphere { radius } => geom::norm(q) - radius,
            PrimitiveKind::Box3 { half_extents } => {
                let d = [
                    q[0].abs() - half_extents[0],
                    q[1].abs() - half_extents[1],
                    q[2].abs() - half_extents[2],
                ];
                let outside = [d[0].max(0.0), d[1].max(0.0), d[2].max(0.0)];
                geom::norm(outside) + d[0].max(d[1]).max(d[2]).min(0.0)
            }
            PrimitiveKind::Cylinder { radius, half_height } => {
                let dr = (q[0] * q[0] + q[1] * q[1]).sqrt() - radius;
                let dz = q[2].abs() - half_height;
                let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                outside + dr.max(dz).min(0.0)
            }
            PrimitiveKind::Capsule { radius, half_height } => {
                let z = q[2].clamp(-half_height, half_height);
                (q[0] * q[0] + q[1] * q[1] + (q[2] - z) * (q[2] - z)).sqrt() - radius
            }
        }
    }

    pub fn surface_area(&self) -> f64 {
        use std::f64::consts::PI;
        match self.kind {
            PrimitiveKind::Sphere { radius } => 4.0 * PI * radius * radius,
            PrimitiveKind::Box3 { half_extents: [a, b, c] } => 8.0 * (a * b + b * c + c * a),
            PrimitiveKind::Cylinder { radius, half_height } => {
                2.0 * PI * radius * 2.0 * half_height + 2.0 * PI * radius * radius
            }
            PrimitiveKind::Capsule { radius, half_height } => {
                2.0 * PI * radius * 2.0 * half_height + 4.0 * PI * radius * radius
            }
        }
    }

    pub fn volume(&self) -> f64 {
        use std::f64::consts::PI;
        match self.kind {
            PrimitiveKind::Sphere { radius } => 4.0 / 3.0 * PI * radius.powi(3),
            PrimitiveKind::Box3 { half_extents: [a, b, c] } => 8.0 * a * b * c,
            PrimitiveKind::Cylinder { radius, half_height } => {
                PI * radius * radius * 2.0 * half_height
            }
            PrimitiveKind::Capsule { radius, half_height } => {
                PI * radius * radius * 2.0 * half_height + 4.0 / 3.0 * PI * radius.powi(3)
            }
        }
    }

    /// Coarse bound on the distance from the local origin to any surface point.
    fn local_extent(&self) -> f64 {
        match self.kind {
            PrimitiveKind::Sphere { radius } => radius,
            PrimitiveKind::Box3 { half_extents } => geom::norm(half_extents),
            PrimitiveKind::Cylinder { radius, half_height } => {
                (radius * radius + half_height * half_height).sqrt()
            }
            PrimitiveKind::Capsule { radius, half_height } => half_height + radius,
        }
    }

    /// Uniform point and outward normal on the primitive surface (local frame).
    fn sample_local(&self, rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
        use std::f64::consts::PI;
        match self.kind {
            PrimitiveKind::Sphere { radius } => {
                let n = unit_sphere(rng);
                (geom::scale(n, radius), n)
            }
            PrimitiveKind::Box3 { half_extents: he } => {
                let areas = [he[1] * he[2], he[0] * he[2], he[0] * he[1]];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen::<f64>() * total;
                let mut axis = 2;
                for (i, &a) in areas.iter().enumerate() {
                    if pick < a {
                        axis = i;
                        break;
                    }
                    pick -= a;
                }
                let sign = if rng.gen::<f64>() < 0.5 { 1.0 } else { -1.0 };
                let mut p = [
                    (rng.gen::<f64>() * 2.0 - 1.0) * he[0],
                    (rng.gen::<f64>() * 2.0 - 1.0) * he[1],
                    (rng.gen::<f64>() * 2.0 - 1.0) * he[2],
                ];
                p[axis] = sign * he[axis];
                let mut n = [0.0; 3];
                n[axis] = sign;
                (p, n)
            }
            PrimitiveKind::Cylinder { radius, half_height } => {
                let side = 2.0 * PI * radius * 2.0 * half_height;
                let caps = 2.0 * PI * radius * radius;
                if rng.gen::<f64>() * (side + caps) < side {
                    let phi = rng.gen::<f64>() * 2.0 * PI;
                    let z = (rng.gen::<f64>() * 2.0 - 1.0) * half_height;
                    (
                        [radius * phi.cos(), radius * phi.sin(), z],
                        [phi.cos(), phi.sin(), 0.0],
                    )
                } else {
                    let sign = if rng.gen::<f64>() < 0.5 { 1.0 } else { -1.0 };
                    let r = radius * rng.gen::<f64>().sqrt();
                    let phi = rng.gen::<f64>() * 2.0 * PI;
                    (
                        [r * phi.cos(), r * phi.sin(), sign * half_height],
                        [0.0, 0.0, sign],
                    )
                }
            }
            PrimitiveKind::Capsule { radius, half_height } => {
                let side = 2.0 * PI * radius * 2.0 * half_height;
                let caps = 4.0 * PI * radius * radius;
                if rng.gen::<f64>() * (side + caps) < side {
                    let phi = rng.gen::<f64>() * 2.0 * PI;
                    let z = (rng.gen::<f64>() * 2.0 - 1.0) * half_height;
                    (
                        [radius * phi.cos(), radius * phi.sin(), z],
                        [phi.cos(), phi.sin(), 0.0],
                    )
                } else {
                    let n = unit_sphere(rng);
                    let zc = if n[2] >= 0.0 { half_height } else { -half_height };
                    (geom::add(geom::scale(n, radius), [0.0, 0.0, zc]), n)
                }
            }
        }
    }
}

fn unit_sphere(rng: &mut ChaCha8Rng) -> Vec3 {
    let z = rng.gen::<f64>() * 2.0 - 1.0;
    let phi = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// Rotation taking local +z to `dir`.
fn rotation_from_z(dir: Vec3) -> Mat3 {
    let z = [0.0, 0.0, 1.0];
    let c = geom::dot(z, dir);
    if c > 1.0 - 1e-12 {
        return geom::IDENTITY;
    }
    if c < -1.0 + 1e-12 {
        return geom::rot_axis_angle([1.0, 0.0, 0.0], std::f64::consts::PI);
    }
    let axis = geom::normalize(geom::cross(z, dir));
    geom::rot_axis_angle(axis, c.acos())
}

/// Union of labeled primitives, centered so the volume centroid is at the
/// origin with +z as the canonical up axis.
#[derive(Clone, Debug)]
pub struct ObjectModel {
    pub id: String,
    pub category: String,
    pub primitives: Vec<Primitive>,
    part_names: Vec<String>,
}

/// Surface sample with outward unit normals and per-point part labels.
#[derive(Clone, Debug)]
pub struct ObjectCloud {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    /// Index into the owning object's `part_names`.
    pub part_ids: Vec<u32>,
}

impl ObjectModel {
    pub fn new(id: &str, category: &str, primitives: Vec<Primitive>) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::Parse("object needs at least one primitive".into()));
        }
        let mut part_names: Vec<String> = Vec::new();
        for p in &primitives {
            if p.part.is_empty() {
                return Err(Error::Parse("primitive part label must be non-empty".into()));
            }
            if !part_names.contains(&p.part) {
                part_names.push(p.part.clone());
            }
        }
        Ok(ObjectModel { id: id.to_string(), category: category.to_string(), primitives, part_names })
    }

    /// Shift all primitives so the volume-weighted centroid sits at the origin.
    pub fn centered(mut self) -> Self {
        let total: f64 = self.primitives.iter().map(|p| p.volume()).sum();
        let mut c = [0.0; 3];
        for p in &self.primitives {
            c = geom::add(c, geom::scale(p.translation, p.volume() / total));
        }
        for p in &mut self.primitives {
            p.translation = geom::sub(p.translation, c);
        }
        self
    }

    pub fn part_names(&self) -> &[String] {
        &self.part_names
    }

    pub fn part_id(&self, part: &str) -> Option<u32> {
        self.part_names.iter().position(|p| p == part).map(|i| i as u32)
    }

    /// Exact union SDF, positive outside.
    pub fn sdf(&self, p: Vec3) -> f64 {
        self.primitives.iter().map(|pr| pr.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    /// SDF restricted to primitives of one part.
    pub fn part_sdf(&self, part_id: u32, p: Vec3) -> f64 {
        let name = &self.part_names[part_id as usize];
        self.primitives
            .iter()
            .filter(|pr| &pr.part == name)
            .map(|pr| pr.sdf(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Coarse bounding radius around the origin.
    pub fn bounding_radius(&self) -> f64 {
        self.primitives
            .iter()
            .map(|p| geom::norm(p.translation) + p.local_extent())
            .fold(0.0, f64::max)
    }

    /// Area-weighted uniform surface sample of the union. Points falling
    /// strictly inside another primitive are rejected and redrawn, so every
    /// returned point lies on the union surface.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<ObjectCloud> {
        if n == 0 {
            return Err(Error::Contract("sample_surface needs n >= 1".into()));
        }
        let mut rng = rng::stream(seed, "object-surface");
        let areas: Vec<f64> = self.primitives.iter().map(|p| p.surface_area()).collect();
        let total: f64 = areas.iter().sum();
        let mut points = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        let mut part_ids = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while points.len() < n {
            attempts += 1;
            if attempts > 100 * n {
                return Err(Error::Fault(format!(
                    "surface sampling of '{}' rejected too many points",
                    self.id
                )));
            }
            let mut pick = rng.gen::<f64>() * total;
            let mut pi = self.primitives.len() - 1;
            for (i, &a) in areas.iter().enumerate() {
                if pick < a {
                    pi = i;
                    break;
                }
                pick -= a;
            }
            let prim = &self.primitives[pi];
            let (pl, nl) = prim.sample_local(&mut rng);
            let p = geom::add(geom::mat_apply(&prim.rotation, pl), prim.translation);
            // on the union surface iff not strictly inside any other member
            if self.sdf(p) < -1e-9 {
                continue;
            }
            points.push(p);
            normals.push(geom::mat_apply(&prim.rotation, nl));
            part_ids.push(self.part_id(&prim.part).unwrap());
        }
        Ok(ObjectCloud { points, normals, part_ids })
    }

    pub fn to_toml_string(&self) -> String {
        let raw = RawObject {
            id: self.id.clone(),
            category: self.category.clone(),
            primitive: self
                .primitives
                .iter()
                .map(|p| {
                    let (kind, size) = match p.kind {
                        PrimitiveKind::Sphere { radius } => ("sphere", vec![radius]),
                        PrimitiveKind::Box3 { half_extents } => ("box", half_extents.to_vec()),
                        PrimitiveKind::Cylinder { radius, half_height } => {
                            ("cylinder", vec![radius, half_height])
                        }
                        PrimitiveKind::Capsule { radius, half_height } => {
                            ("capsule", vec![radius, half_height])
                        }
                    };
                    RawPrimitive {
                        kind: kind.to_string(),
                        part: p.part.clone(),
                        rotation: p.rotation,
                        translation: p.translation,
                        size,
                    }
                })
                .collect(),
        };
        toml::to_string_pretty(&raw).expect("object description serializes")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let raw: RawObject =
            toml::from_str(s).map_err(|e| Error::Parse(format!("object description: {e}")))?;
        let mut prims = Vec::with_capacity(raw.primitive.len());
        for rp in &raw.primitive {
            let kind = match (rp.kind.as_str(), rp.size.as_slice()) {
                ("sphere", [r]) => PrimitiveKind::Sphere { radius: *r },
                ("box", [a, b, c]) => PrimitiveKind::Box3 { half_extents: [*a, *b, *c] },
                ("cylinder", [r, h]) => PrimitiveKind::Cylinder { radius: *r, half_height: *h },
                ("capsule", [r, h]) => PrimitiveKind::Capsule { radius: *r, half_height: *h },
                _ => {
                    return Err(Error::Parse(format!(
                        "primitive kind '{}' with {} size values",
                        rp.kind,
                        rp.size.len()
                    )))
                }
            };
            if rp.size.iter().any(|&s| s <= 0.0) {
                return Err(Error::Parse("primitive sizes must be positive".into()));
            }
            prims.push(Primitive {
                kind,
                rotation: rp.rotation,
                translation: rp.translation,
                part: rp.part.clone(),
            });
        }
        ObjectModel::new(&raw.id, &raw.category, prims)
    }
}

#[derive(Serialize, Deserialize)]
struct RawObject {
    id: String,
    category: String,
    primitive: Vec<RawPrimitive>,
}

#[derive(Serialize, Deserialize)]
struct RawPrimitive {
    kind: String,
    part: String,
    rotation: [f64; 9],
    translation: [f64; 3],
    size: Vec<f64>,
}

pub const CATEGORIES: [&str; 4] = ["bottle", "sprayer", "mug", "pan"];

/// Human-facing category names used by guidance text.
pub fn category_display(category: &str) -> &str {
    match category {
        "sprayer" => "trigger sprayer",
        "pan" => "frying pan",
        other => other,
    }
}

/// Deterministic randomized object from one of the catalog families.
pub fn sample_object(category: &str, id: &str, seed: u64) -> Result<ObjectModel> {
    let mut rng = rng::stream(seed, "object-shape");
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.gen::<f64>();
    let prims = match category {
        "bottle" => {
            let r = u(0.024, 0.032);
            let h = u(0.05, 0.065);
            let cap_r = u(0.013, 0.017);
            vec![
                Primitive::cylinder(r, h, [0.0, 0.0, 0.0], "body"),
                Primitive::sphere(cap_r, [0.0, 0.0, h + 0.5 * cap_r], "cap"),
            ]
        }
        "sprayer" => {
            let r = u(0.02, 0.027);
            let h = u(0.045, 0.06);
            let trig = [0.007, u(0.009, 0.012), u(0.012, 0.016)];
            vec![
                Primitive::cylinder(r, h, [0.0, 0.0, 0.0], "body"),
                Primitive::box3(trig, [r + trig[0] + 0.002, 0.0, 0.45 * h], "trigger"),
            ]
        }
        "mug" => {
            let r = u(0.03, 0.038);
            let h = u(0.032, 0.042);
            let hr = 0.006;
            let reach = r + u(0.016, 0.022);
            let hz = 0.55 * h;
            vec![
                Primitive::cylinder(r, h, [0.0, 0.0, 0.0], "body"),
                Primitive::capsule_between([r - 0.004, 0.0, hz], [reach, 0.0, hz], hr, "handle"),
                Primitive::capsule_between([reach, 0.0, hz], [reach, 0.0, -hz], hr, "handle"),
                Primitive::capsule_between([reach, 0.0, -hz], [r - 0.004, 0.0, -hz], hr, "handle"),
            ]
        }
        "pan" => {
            let r = u(0.05, 0.062);
            let hr = u(0.0075, 0.009);
            let len = u(0.075, 0.09);
            vec![
                Primitive::cylinder(r, 0.006, [0.0, 0.0, 0.0], "base"),
                Primitive::capsule_between([r - 0.005, 0.0, 0.004], [r + len, 0.0, 0.012], hr, "handle"),
            ]
        }
        other => return Err(Error::Contract(format!("unknown object category '{other}'"))),
    };
    Ok(ObjectModel::new(id, category, prims)?.centered())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_sphere_obj() -> ObjectModel {
        ObjectModel::new("s", "test", vec![Primitive::sphere(1.0, [0.0; 3], "body")]).unwrap()
    }

    #[test]
    fn sphere_sdf_outside_and_inside() {
        let obj = unit_sphere_obj();
        assert!((obj.sdf([2.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((obj.sdf([0.0, 0.0, 0.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn union_is_min_of_members() {
        let obj = ObjectModel::new(
            "u",
            "test",
            vec![
                Primitive::sphere(1.0, [0.0; 3], "a"),
                Primitive::sphere(0.5, [2.0, 0.0, 0.0], "b"),
            ],
        )
        .unwrap();
        let mut r = rng::stream(3, "t");
        for _ in 0..50 {
            let p = [
                rng_range(&mut r, -3.0, 3.0),
                rng_range(&mut r, -3.0, 3.0),
                rng_range(&mut r, -3.0, 3.0),
            ];
            let expect = obj.primitives[0].sdf(p).min(obj.primitives[1].sdf(p));
            assert_eq!(obj.sdf(p), expect);
            assert!(obj.sdf(p) <= obj.primitives[0].sdf(p));
        }
    }

    fn rng_range(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * r.gen::<f64>()
    }

    #[test]
    fn sampled_points_lie_on_surface_with_radial_normals() {
        let obj = unit_sphere_obj();
        let cloud = obj.sample_surface(1000, 11).unwrap();
        for (p, n) in cloud.points.iter().zip(&cloud.normals) {
            assert!(obj.sdf(*p).abs() <= 1e-6);
            assert!((geom::norm(*n) - 1.0).abs() < 1e-9);
            let radial = geom::normalize(*p);
            assert!(geom::dist(radial, *n) < 1e-9);
        }
    }

    #[test]
    fn area_weighting_follows_surface_ratio() {
        // spheres r=1 and r=2, far apart: area ratio 1:4
        let obj = ObjectModel::new(
            "two",
            "test",
            vec![
                Primitive::sphere(1.0, [0.0; 3], "small"),
                Primitive::sphere(2.0, [10.0, 0.0, 0.0], "large"),
            ],
        )
        .unwrap();
        let cloud = obj.sample_surface(4000, 5).unwrap();
        let small = cloud.part_ids.iter().filter(|&&p| p == 0).count() as f64;
        let large = cloud.part_ids.iter().filter(|&&p| p == 1).count() as f64;
        let ratio = large / small;
        assert!((ratio - 4.0).abs() / 4.0 < 0.1, "ratio {ratio}");
    }

    #[test]
    fn labels_inherit_from_owning_primitive() {
        let obj = sample_object("sprayer", "spr", 2).unwrap();
        let cloud = obj.sample_surface(500, 9).unwrap();
        assert_eq!(obj.part_names(), &["body".to_string(), "trigger".to_string()]);
        assert!(cloud.part_ids.iter().any(|&p| p == 0));
        assert!(cloud.part_ids.iter().any(|&p| p == 1));
        for (p, &pid) in cloud.points.iter().zip(&cloud.part_ids) {
            assert!(obj.part_sdf(pid, *p).abs() <= 1e-9);
        }
    }

    #[test]
    fn catalog_objects_are_centered_and_valid() {
        for (i, cat) in CATEGORIES.iter().enumerate() {
            let obj = sample_object(cat, &format!("{cat}_0"), 40 + i as u64).unwrap();
            let total: f64 = obj.primitives.iter().map(|p| p.volume()).sum();
            let mut c = [0.0; 3];
            for p in &obj.primitives {
                c = geom::add(c, geom::scale(p.translation, p.volume() / total));
            }
            assert!(geom::norm(c) < 1e-12, "{cat} centroid {c:?}");
            assert!(obj.bounding_radius() > 0.03 && obj.bounding_radius() < 0.25);
            let cloud = obj.sample_surface(400, 1).unwrap();
            for p in &cloud.points {
                assert!(obj.sdf(*p).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn toml_roundtrip() {
        let obj = sample_object("mug", "mug_3", 17).unwrap();
        let text = obj.to_toml_string();
        let back = ObjectModel::from_toml_str(&text).unwrap();
        assert_eq!(back.id, obj.id);
        assert_eq!(back.part_names(), obj.part_names());
        let mut r = rng::stream(4, "probe");
        for _ in 0..20 {
            let p = [
                rng_range(&mut r, -0.1, 0.1),
                rng_range(&mut r, -0.1, 0.1),
                rng_range(&mut r, -0.1, 0.1),
            ];
            assert!((back.sdf(p) - obj.sdf(p)).abs() < 1e-15);
        }
    }
}
