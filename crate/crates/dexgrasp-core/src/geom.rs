//! Plain-f64 3D helpers shared by the hand and object models.
//!
//! Rotations are row-major 3x3 matrices acting on column vectors
//! (`world = R * local + t`).

pub type Vec3 = [f64; 3];
/// Row-major 3x3 matrix.
pub type Mat3 = [f64; 9];

pub const IDENTITY: Mat3 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    scale(a, 1.0 / n)
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

pub fn mat_apply(r: &Mat3, p: Vec3) -> Vec3 {
    [
        r[0] * p[0] + r[1] * p[1] + r[2] * p[2],
        r[3] * p[0] + r[4] * p[1] + r[5] * p[2],
        r[6] * p[0] + r[7] * p[1] + r[8] * p[2],
    ]
}

pub fn mat_apply_transpose(r: &Mat3, p: Vec3) -> Vec3 {
    [
        r[0] * p[0] + r[3] * p[1] + r[6] * p[2],
        r[1] * p[0] + r[4] * p[1] + r[7] * p[2],
        r[2] * p[0] + r[5] * p[1] + r[8] * p[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
        }
    }
    out
}

/// Rodrigues rotation about a unit axis: `R = cos I + sin K + (1-cos) k k^T`.
pub fn rot_axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let ic = 1.0 - c;
    [
        c + x * x * ic,
        x * y * ic - z * s,
        x * z * ic + y * s,
        y * x * ic + z * s,
        c + y * y * ic,
        y * z * ic - x * s,
        z * x * ic - y * s,
        z * y * ic + x * s,
        c + z * z * ic,
    ]
}

/// Gram-Schmidt a 6D two-column rotation representation into a proper
/// rotation matrix. The six numbers are the first two columns of R.
pub fn rot6_to_mat(r6: &[f64; 6]) -> Mat3 {
    let a1 = [r6[0], r6[1], r6[2]];
    let a2 = [r6[3], r6[4], r6[5]];
    let b1 = normalize(a1);
    let b2 = normalize(sub(a2, scale(b1, dot(b1, a2))));
    let b3 = cross(b1, b2);
    [
        b1[0], b2[0], b3[0],
        b1[1], b2[1], b3[1],
        b1[2], b2[2], b3[2],
    ]
}

/// First two columns of a rotation matrix.
pub fn mat_to_rot6(r: &Mat3) -> [f64; 6] {
    [r[0], r[3], r[6], r[1], r[4], r[7]]
}

/// Intrinsic X-Y-Z Euler angles in radians: `R = Rx(a) Ry(b) Rz(c)`.
pub fn euler_xyz_intrinsic(r: &Mat3) -> Vec3 {
    let sb = r[2].clamp(-1.0, 1.0);
    let b = sb.asin();
    if sb.abs() > 1.0 - 1e-9 {
        // gimbal lock: fold the remaining rotation into `a`
        let a = r[3].atan2(r[4]);
        [a, b, 0.0]
    } else {
        let a = (-r[5]).atan2(r[8]);
        let c = (-r[1]).atan2(r[0]);
        [a, b, c]
    }
}

/// Distance from point `p` to segment `[a, b]`.
pub fn point_segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let u = sub(b, a);
    let len2 = dot(u, u);
    let t = if len2 > 0.0 { (dot(sub(p, a), u) / len2).clamp(0.0, 1.0) } else { 0.0 };
    dist(p, add(a, scale(u, t)))
}

/// Exact capsule SDF: positive outside the surface.
pub fn capsule_sdf(p: Vec3, a: Vec3, b: Vec3, radius: f64) -> f64 {
    point_segment_distance(p, a, b) - radius
}
