//! Denoising diffusion over pose vectors: forward noising closed form and
//! ancestral reverse sampling with a clean-sample predictor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Noise schedule: per-step alpha and the cumulative product.
#[derive(Clone, Debug)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear beta schedule; validates the standard invariants.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Contract("schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let s = Self::from_betas(betas)?;
        if s.betas.iter().any(|&b| b <= 0.0 || b >= 1.0) {
            return Err(Error::Contract("betas must lie in (0, 1)".into()));
        }
        for w in s.alpha_bars.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Contract("cumulative alphas must strictly decrease".into()));
            }
        }
        Ok(s)
    }

    /// Build from explicit betas without the strict-decrease check; used by
    /// degenerate diagnostic schedules (all-zero betas keep x unchanged).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Contract("schedule needs at least one step".into()));
        }
        if betas.iter().any(|&b| !(0.0..1.0).contains(&b)) {
            return Err(Error::Contract("betas must lie in [0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(DiffusionSchedule { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Cumulative alpha at step `t` (1-based); `t = 0` is the clean sample.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Closed-form forward noising: `x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps`.
    pub fn forward_diffuse(&self, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if x0.len() != noise.len() {
            return Err(Error::Contract("x0 and noise length mismatch".into()));
        }
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(noise).map(|(x, n)| a * x + b * n).collect())
    }

    /// Posterior standard deviation of the reverse step at `t` (the
    /// "fixed small" choice `sqrt(beta_tilde)`).
    pub fn posterior_sigma(&self, t: usize) -> f64 {
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        if 1.0 - ab_t <= 0.0 {
            return 0.0;
        }
        ((1.0 - ab_prev) / (1.0 - ab_t) * self.betas[t - 1]).max(0.0).sqrt()
    }

    /// One reverse-step mean given the predicted clean sample, via the
    /// noise-prediction closed form.
    pub fn reverse_mean(&self, x_t: &[f64], x0_hat: &[f64], t: usize) -> Vec<f64> {
        let ab = self.alpha_bar(t);
        let alpha = self.alphas[t - 1];
        let beta = self.betas[t - 1];
        let one_m_ab = (1.0 - ab).max(1e-18);
        x_t.iter()
            .zip(x0_hat)
            .map(|(&x, &x0)| {
                let eps_hat = (x - ab.sqrt() * x0) / one_m_ab.sqrt();
                (x - beta / one_m_ab.sqrt() * eps_hat) / alpha.sqrt()
            })
            .collect()
    }
}

pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Ancestral reverse sampling driven by a clean-sample predictor.
/// `denoise(x_rows, t)` receives `count` rows of length `dim` (flattened)
/// and returns predicted clean rows in the same layout.
pub fn ddpm_sample<F>(
    schedule: &DiffusionSchedule,
    mut denoise: F,
    count: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Vec<f64>,
{
    let mut x = standard_normal(rng, count * dim);
    for t in (1..=schedule.steps()).rev() {
        let x0_hat = denoise(&x, t);
        assert_eq!(x0_hat.len(), x.len(), "denoiser changed the sample layout");
        let sigma = schedule.posterior_sigma(t);
        for (row, row0) in x.chunks_mut(dim).zip(x0_hat.chunks(dim)) {
            let mean = schedule.reverse_mean(row, row0, t);
            for (xi, m) in row.iter_mut().zip(mean) {
                *xi = if t > 1 {
                    let z: f64 = rng.sample(StandardNormal);
                    m + sigma * z
                } else {
                    m
                };
            }
        }
    }
    x.chunks(dim).map(|c| c.to_vec()).collect()
}
