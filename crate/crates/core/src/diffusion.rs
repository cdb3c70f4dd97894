//! Forward corruption, partial noising, anchored DDIM steps and
//! importance-sampled step selection.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Side;
use crate::mat::Mat;
use crate::scalar::Real;

const SCHEDULE_OFFSET: f64 = 1e-4;
const BETA_MIN: f64 = 1e-8;
const BETA_MAX: f64 = 0.999;

/// Square-root noise schedule over `steps` diffusion steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    /// `beta[s]` for `s` in `1..=steps`; `beta[0]` is unused and zero.
    pub beta: Vec<f64>,
    /// Cumulative products, `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
    /// Variance of the embedding transition `q(z0 | F)`.
    pub beta0: f64,
}

pub fn sqrt_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::validation("schedule needs at least 2 steps"));
    }
    let target = |s: usize| {
        if s == 0 {
            1.0
        } else {
            1.0 - (s as f64 / steps as f64 + SCHEDULE_OFFSET).sqrt()
        }
    };
    let mut beta = vec![0.0; steps + 1];
    let mut alpha_bar = vec![1.0; steps + 1];
    for s in 1..=steps {
        let b = (1.0 - target(s) / target(s - 1)).clamp(BETA_MIN, BETA_MAX);
        beta[s] = b;
        alpha_bar[s] = alpha_bar[s - 1] * (1.0 - b);
    }
    let beta0 = beta[1];
    Ok(NoiseSchedule {
        steps,
        beta,
        alpha_bar,
        beta0,
    })
}

impl NoiseSchedule {
    pub fn alpha(&self, s: usize) -> f64 {
        1.0 - self.beta[s]
    }

    fn check_step(&self, s: usize) -> Result<()> {
        if s > self.steps {
            return Err(Error::validation(format!("step {s} beyond schedule length {}", self.steps)));
        }
        Ok(())
    }

    /// `n` uniformly spaced inference steps from `S` down to 0, inclusive.
    pub fn ddim_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.steps {
            return Err(Error::config(format!("cannot take {n} DDIM steps over {}", self.steps)));
        }
        Ok((0..=n).rev().map(|i| self.steps * i / n).collect())
    }
}

/// Latent sequence at diffusion step `step`; rows before `n_past` are the
/// anchored past.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState<T> {
    pub z: Mat<T>,
    pub step: usize,
    pub n_past: usize,
    pub side: Side,
}

impl<T: Real> DiffusionState<T> {
    pub fn new(z: Mat<T>, step: usize, n_past: usize, side: Side) -> Result<Self> {
        if n_past > z.rows {
            return Err(Error::validation("n_past exceeds the sequence length"));
        }
        Ok(Self { z, step, n_past, side })
    }

    pub fn past(&self) -> Mat<T> {
        self.z.slice_rows(0, self.n_past)
    }

    pub fn future(&self) -> Mat<T> {
        self.z.slice_rows(self.n_past, self.z.rows - self.n_past)
    }
}

fn check_same_shape<T: Real>(a: &Mat<T>, b: &Mat<T>, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::validation(format!(
            "{what}: shape {:?} differs from {:?}",
            b.shape(),
            a.shape()
        )));
    }
    Ok(())
}

pub fn standard_normal<T: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat<T> {
    Mat::randn(rows, cols, rng)
}

/// Closed-form forward process over the whole matrix.
pub fn q_sample<T: Real>(z0: &Mat<T>, s: usize, noise: &Mat<T>, schedule: &NoiseSchedule) -> Result<Mat<T>> {
    schedule.check_step(s)?;
    check_same_shape(z0, noise, "q_sample noise")?;
    if s == 0 {
        return Ok(z0.clone());
    }
    let ab = schedule.alpha_bar[s];
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    let data = z0.data.iter().zip(&noise.data).map(|(&x, &e)| a * x + b * e).collect();
    Ok(Mat {
        rows: z0.rows,
        cols: z0.cols,
        data,
    })
}

/// Noises the future rows of `state` to step `s`; past rows are copied.
pub fn partial_noise<T: Real>(
    state: &DiffusionState<T>,
    s: usize,
    noise: &Mat<T>,
    schedule: &NoiseSchedule,
) -> Result<DiffusionState<T>> {
    check_same_shape(&state.z, noise, "partial_noise noise")?;
    let noised = q_sample(&state.z, s, noise, schedule)?;
    let mut z = state.z.clone();
    let start = state.n_past * z.cols;
    z.data[start..].copy_from_slice(&noised.data[start..]);
    DiffusionState::new(z, s, state.n_past, state.side)
}

/// `z0 = F + sqrt(beta0) * eps` on the future rows, with `eps` given.
pub fn markov_embed_with<T: Real>(
    f_seq: &Mat<T>,
    n_past: usize,
    eps: &Mat<T>,
    beta0: f64,
) -> Result<Mat<T>> {
    check_same_shape(f_seq, eps, "markov_embed noise")?;
    let k = T::of(beta0.sqrt());
    let mut z = f_seq.clone();
    let start = n_past * z.cols;
    for (x, &e) in z.data[start..].iter_mut().zip(&eps.data[start..]) {
        *x = *x + k * e;
    }
    Ok(z)
}

pub fn markov_embed<T: Real>(
    f_seq: &Mat<T>,
    n_past: usize,
    side: Side,
    rng: &mut impl Rng,
    schedule: &NoiseSchedule,
) -> Result<DiffusionState<T>> {
    let eps = standard_normal(f_seq.rows, f_seq.cols, rng);
    let z = markov_embed_with(f_seq, n_past, &eps, schedule.beta0)?;
    DiffusionState::new(z, 0, n_past, side)
}

/// Noise implied by a clean-sequence estimate at step `s`.
pub fn predicted_noise<T: Real>(z_s: &Mat<T>, z0_hat: &Mat<T>, s: usize, schedule: &NoiseSchedule) -> Result<Mat<T>> {
    schedule.check_step(s)?;
    check_same_shape(z_s, z0_hat, "predicted_noise")?;
    if s == 0 {
        return Err(Error::validation("noise is undefined at step 0"));
    }
    let ab = schedule.alpha_bar[s];
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    let data = z_s.data.iter().zip(&z0_hat.data).map(|(&z, &x)| (z - a * x) / b).collect();
    Ok(Mat {
        rows: z_s.rows,
        cols: z_s.cols,
        data,
    })
}

/// Deterministic DDIM update of the future rows from `s` to `s_prev`; the past
/// rows of `state` are carried over unchanged.
pub fn ddim_step<T: Real>(
    state: &DiffusionState<T>,
    z0_hat: &Mat<T>,
    s_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<DiffusionState<T>> {
    let s = state.step;
    if s_prev >= s {
        return Err(Error::validation(format!("DDIM must move backwards, got {s} -> {s_prev}")));
    }
    let eps = predicted_noise(&state.z, z0_hat, s, schedule)?;
    let ab = schedule.alpha_bar[s_prev];
    let mut z = state.z.clone();
    let start = state.n_past * z.cols;
    if s_prev == 0 {
        z.data[start..].copy_from_slice(&z0_hat.data[start..]);
    } else {
        let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
        for ((o, &x), &e) in z.data[start..]
            .iter_mut()
            .zip(&z0_hat.data[start..])
            .zip(&eps.data[start..])
        {
            *o = a * x + b * e;
        }
    }
    DiffusionState::new(z, s_prev, state.n_past, state.side)
}

const HISTORY: usize = 10;

/// Loss-aware step sampler: uniform until every step holds a full history,
/// then proportional to the root mean square of the recorded losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSampler {
    steps: usize,
    /// Per step `1..=steps` (index `s - 1`), most recent losses, oldest first.
    history: Vec<Vec<f64>>,
}

impl ImportanceSampler {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            history: vec![Vec::with_capacity(HISTORY); steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn warmed_up(&self) -> bool {
        self.history.iter().all(|h| h.len() >= HISTORY)
    }

    pub fn update(&mut self, s: usize, loss: f64) -> Result<()> {
        if s == 0 || s > self.steps {
            return Err(Error::validation(format!("step {s} outside 1..={}", self.steps)));
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} at step {s}")));
        }
        let h = &mut self.history[s - 1];
        if h.len() == HISTORY {
            h.remove(0);
        }
        h.push(loss);
        Ok(())
    }

    /// Probability of each step `1..=steps` (index `s - 1`).
    pub fn probabilities(&self) -> Vec<f64> {
        let uniform = vec![1.0 / self.steps as f64; self.steps];
        if !self.warmed_up() {
            return uniform;
        }
        let w: Vec<f64> = self
            .history
            .iter()
            .map(|h| (h.iter().map(|l| l * l).sum::<f64>() / h.len() as f64).sqrt())
            .collect();
        let total: f64 = w.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return uniform;
        }
        w.iter().map(|x| x / total).collect()
    }

    /// Draws a step and its loss weight `1 / (S * p_s)`.
    pub fn draw(&self, rng: &mut impl Rng) -> (usize, f64) {
        let p = self.probabilities();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = self.steps - 1;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                pick = i;
                break;
            }
        }
        (pick + 1, 1.0 / (self.steps as f64 * p[pick]))
    }
}

/// Draws one standard-normal scalar; shared by tests and samplers.
pub fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}
