//! Normalized pose coordinates for learning.
//!
//! Two nested maps: a geometric normalization (translation divided by the
//! object scale, 6D rotation kept, joints min-max scaled to [-1, 1]) and a
//! per-dimension standardization with train-split statistics. Diffusion
//! and the refiner operate on the standardized vectors.

use crate::error::{Error, Result};
use crate::hand::{GraspPose, HandModel};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct PoseSpace {
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PoseSpace {
    pub fn dim(&self) -> usize {
        9 + self.q_min.len()
    }

    /// Geometric normalization only.
    pub fn geo_normalize(&self, pose: &GraspPose, scale: f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        for t in pose.t {
            v.push(t / scale);
        }
        v.extend_from_slice(&pose.r6);
        for ((q, lo), hi) in pose.q.iter().zip(&self.q_min).zip(&self.q_max) {
            v.push(2.0 * (q - lo) / (hi - lo) - 1.0);
        }
        v
    }

    pub fn geo_denormalize(&self, v: &[f64], scale: f64) -> GraspPose {
        let q = v[9..]
            .iter()
            .zip(&self.q_min)
            .zip(&self.q_max)
            .map(|((x, lo), hi)| lo + 0.5 * (x + 1.0) * (hi - lo))
            .collect();
        GraspPose {
            t: [v[0] * scale, v[1] * scale, v[2] * scale],
            r6: v[3..9].try_into().unwrap(),
            q,
        }
    }

    /// Full map into standardized coordinates.
    pub fn standardize(&self, pose: &GraspPose, scale: f64) -> Vec<f64> {
        self.geo_normalize(pose, scale)
            .iter()
            .zip(&self.mu)
            .zip(&self.sigma)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn destandardize(&self, z: &[f64], scale: f64) -> GraspPose {
        let geo: Vec<f64> =
            z.iter().zip(&self.mu).zip(&self.sigma).map(|((z, m), s)| z * s + m).collect();
        self.geo_denormalize(&geo, scale)
    }

    /// In-graph destandardization of a `[dim]` node; returns `(t, r6, q)`
    /// nodes ready for forward kinematics.
    pub fn destandardize_graph(&self, tape: &mut Tape, z: Var, scale: f64) -> (Var, Var, Var) {
        let sig = tape.constant(Tensor::vector(self.sigma.clone()));
        let mu = tape.constant(Tensor::vector(self.mu.clone()));
        let scaled = tape.mul(z, sig);
        let geo = tape.add(scaled, mu);
        let t_geo = tape.gather(geo, &[0, 1, 2]);
        let t = tape.mul_const(t_geo, scale);
        let r6 = tape.gather(geo, &[3, 4, 5, 6, 7, 8]);
        let q_idx: Vec<usize> = (9..self.dim()).collect();
        let q_geo = tape.gather(geo, &q_idx);
        // q = lo + (x + 1)/2 (hi - lo)
        let half_span: Vec<f64> =
            self.q_min.iter().zip(&self.q_max).map(|(lo, hi)| 0.5 * (hi - lo)).collect();
        let mid: Vec<f64> =
            self.q_min.iter().zip(&self.q_max).map(|(lo, hi)| 0.5 * (hi + lo)).collect();
        let hs = tape.constant(Tensor::vector(half_span));
        let mid = tape.constant(Tensor::vector(mid));
        let qs = tape.mul(q_geo, hs);
        let q = tape.add(qs, mid);
        (t, r6, q)
    }

    /// Fit standardization statistics on geometric-normalized poses.
    pub fn fit(hand: &HandModel, samples: &[(GraspPose, f64)]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("cannot fit a pose space on zero samples".into()));
        }
        let (q_min, q_max) = hand.joint_limits();
        let mut space = PoseSpace {
            q_min,
            q_max,
            mu: vec![0.0; hand.pose_dim()],
            sigma: vec![1.0; hand.pose_dim()],
        };
        let dim = space.dim();
        let mut mean = vec![0.0; dim];
        let rows: Vec<Vec<f64>> =
            samples.iter().map(|(p, s)| space.geo_normalize(p, *s)).collect();
        for row in &rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows.len() as f64;
        }
        let mut var = vec![0.0; dim];
        for row in &rows {
            for ((v, m), acc) in row.iter().zip(&mean).zip(var.iter_mut()) {
                *acc += (v - m) * (v - m);
            }
        }
        space.mu = mean;
        space.sigma = var
            .iter()
            .map(|v| (v / rows.len() as f64).sqrt().max(1e-6))
            .collect();
        Ok(space)
    }
}
