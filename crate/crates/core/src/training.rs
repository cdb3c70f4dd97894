//! Training objective, AdamW updates and gradient verification.
//!
//! Per example and visible side the objective combines
//! - the diffusion term `||z0 - f(z_s, s, M)||²` over the future rows,
//!   plus `||F - f(z_1, 1, M)||²` when `s = 1`;
//! - the trajectory term on the head applied to the denoised future rows;
//! - the affordance term (decoder reconstruction plus scaled KL);
//! - the regularizer, the trajectory head applied to the tokenizer's own
//!   future rows.
//!
//! Coordinates inside the objective are centred unit coordinates, so the
//! trajectory terms are squared distances in image-size units.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::diffusion::{standard_normal, ImportanceSampler};
use crate::error::{Error, Result};
use crate::geometry::{ContactPointSet, HandTrajectory, PixelPoint, Side};
use crate::heads::{cvae_decode, cvae_encode, hth, kl_divergence, kl_graph, oah_condition, waypoints_to_unit};
use crate::homography::{HomographyStack, RansacConfig};
use crate::inference::estimate_egomotion;
use crate::madt::{denoise, encode_ego, key_mask, DenoiseInput};
use crate::mat::Mat;
use crate::model::Model;
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::seeding;
use crate::synthgen::ObservationSequence;
use crate::tokenizer::{sequence_inputs, tokenize, TokenInputs};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub vlb: f64,
    pub traj: f64,
    pub aff: f64,
    pub reg: f64,
    /// Scale of the KL term inside the affordance loss.
    pub kl_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vlb: 1.0,
            traj: 1.0,
            aff: 0.1,
            reg: 0.2,
            kl_scale: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.vlb, self.traj, self.aff, self.reg, self.kl_scale];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub ransac: RansacConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 8000,
            learning_rate: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            ransac: RansacConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("learning rate and weight decay must be non-negative"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err(Error::config("invalid Adam moments"));
        }
        Ok(())
    }
}

/// Fixed per-side inputs of one training episode.
#[derive(Debug, Clone, PartialEq)]
pub struct SideExample<T> {
    pub side: Side,
    /// Past rows followed by the ground-truth future rows.
    pub inputs: TokenInputs<T>,
    /// `1 x 2·n_future` centred unit coordinates.
    pub waypoints: Mat<T>,
    /// `1 x 2·n_future`, zero where the ground truth is missing.
    pub waypoint_mask: Mat<T>,
    /// `1 x 2`.
    pub contact: Mat<T>,
    pub keys: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<T> {
    pub seed: u64,
    pub n_past: usize,
    pub sides: Vec<SideExample<T>>,
    pub egomotion: HomographyStack<f64>,
    pub degraded: bool,
}

impl<T: Real> TrainingExample<T> {
    pub fn new(episode: &ObservationSequence, model: &Model<T>, ransac: &RansacConfig) -> Result<Self> {
        episode.validate()?;
        let spec = &episode.spec;
        if spec != model.spec() {
            return Err(Error::validation("episode spec differs from the model's"));
        }
        let mut sides = Vec::new();
        for side in episode.valid_sides() {
            let truth = episode.gt.side(side).expect("valid side has ground truth");
            let inputs = sequence_inputs(episode, side, &model.config.tokenizer, true)?;
            let keys = key_mask(&inputs.valid[..spec.n_past], spec.horizon());
            let mask = truth
                .trajectory
                .valid
                .iter()
                .flat_map(|&v| [if v { T::one() } else { T::zero() }; 2])
                .collect();
            sides.push(SideExample {
                side,
                inputs,
                waypoints: waypoints_to_unit(&truth.trajectory.waypoints, spec),
                waypoint_mask: Mat::from_vec(1, 2 * spec.n_future, mask)?,
                contact: waypoints_to_unit(&[truth.contact_point], spec),
                keys,
            });
        }
        let ego = estimate_egomotion(episode, ransac, episode.seed);
        Ok(Self {
            seed: episode.seed,
            n_past: spec.n_past,
            sides,
            egomotion: ego.stack,
            degraded: ego.degraded,
        })
    }
}

pub fn prepare_examples<T: Real>(
    episodes: &[ObservationSequence],
    model: &Model<T>,
    ransac: &RansacConfig,
) -> Result<Vec<TrainingExample<T>>> {
    episodes
        .par_iter()
        .map(|ep| TrainingExample::new(ep, model, ransac))
        .collect()
}

/// Random draws consumed by one side of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct SideNoise<T> {
    /// Embedding-transition noise (future rows used).
    pub embed: Mat<T>,
    /// Forward-process noise (future rows used).
    pub forward: Mat<T>,
    /// Reparameterization draws, `samples x latent_width`.
    pub latent: Mat<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleNoise<T> {
    pub step: usize,
    pub weight: f64,
    pub sides: Vec<SideNoise<T>>,
}

impl<T: Real> ExampleNoise<T> {
    pub fn draw(model: &Model<T>, example: &TrainingExample<T>, step: usize, weight: f64, rng: &mut impl Rng) -> Self {
        let cfg = &model.config;
        let (rows, a) = (cfg.spec.horizon(), cfg.tokenizer.latent_width);
        let sides = example
            .sides
            .iter()
            .map(|_| SideNoise {
                embed: standard_normal(rows, a, rng),
                forward: standard_normal(rows, a, rng),
                latent: standard_normal(cfg.heads.samples, cfg.heads.latent_width, rng),
            })
            .collect();
        Self { step, weight, sides }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideLoss {
    pub side: Side,
    pub vlb: f64,
    pub traj: f64,
    pub aff: f64,
    pub reg: f64,
    pub kl: f64,
}

/// Loss of one example; `total` applies the importance weight to the
/// diffusion term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleLoss {
    pub step: usize,
    pub weight: f64,
    pub sides: Vec<SideLoss>,
    pub total: f64,
}

impl ExampleLoss {
    fn sum(&self, f: impl Fn(&SideLoss) -> f64) -> f64 {
        self.sides.iter().map(f).sum()
    }

    /// Affordance term averaged over the visible sides.
    pub fn aff(&self) -> f64 {
        if self.sides.is_empty() {
            0.0
        } else {
            self.sum(|s| s.aff) / self.sides.len() as f64
        }
    }

    pub fn recombine(&self, w: &LossWeights, importance: f64) -> f64 {
        w.vlb * importance * self.sum(|s| s.vlb)
            + w.traj * self.sum(|s| s.traj)
            + w.aff * self.aff()
            + w.reg * self.sum(|s| s.reg)
    }
}

struct SideVars {
    vlb: Var,
    traj: Var,
    aff: Var,
    reg: Var,
    kl: Var,
}

fn row_mask<T: Real>(rows: usize, cols: usize, from: usize, inside: T, outside: T) -> Mat<T> {
    let mut m = Mat::filled(rows, cols, outside);
    for r in from..rows {
        m.row_mut(r).iter_mut().for_each(|x| *x = inside);
    }
    m
}

fn record_side<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    ex: &SideExample<T>,
    noise: &SideNoise<T>,
    step: usize,
    ego: Var,
    n_past: usize,
    weights: &LossWeights,
) -> SideVars {
    let layout = &model.layout;
    let sch = &model.schedule;
    let rows = ex.inputs.rows();
    let n_future = rows - n_past;
    let a = model.config.tokenizer.latent_width;

    let f = tokenize(g, &layout.tokenizer, ex.side, &ex.inputs);
    // z0 = F + sqrt(beta0)·eps on future rows
    let embed_noise = noise.embed.clone();
    let k0 = T::of(sch.beta0.sqrt());
    let mut scaled = embed_noise;
    for r in 0..rows {
        let k = if r < n_past { T::zero() } else { k0 };
        scaled.row_mut(r).iter_mut().for_each(|x| *x = *x * k);
    }
    let eps0 = g.input(scaled);
    let z0 = g.add(f, eps0);

    // partial noising of the future rows
    let ab = sch.alpha_bar[step];
    let keep = g.input(row_mask(rows, a, n_past, T::of(ab.sqrt()), T::one()));
    let mut fwd = noise.forward.clone();
    let kn = T::of((1.0 - ab).sqrt());
    for r in 0..rows {
        let k = if r < n_past { T::zero() } else { kn };
        fwd.row_mut(r).iter_mut().for_each(|x| *x = *x * k);
    }
    let fwd = g.input(fwd);
    let zs = g.mul(z0, keep);
    let zs = g.add(zs, fwd);

    let z0_hat = denoise(
        g,
        &layout.madt,
        &model.config.madt,
        &DenoiseInput {
            z: zs,
            step,
            ego,
            keys: &ex.keys,
            side: ex.side,
        },
    );
    let future_hat = g.slice_rows(z0_hat, n_past, n_future);
    let future_z0 = g.slice_rows(z0, n_past, n_future);
    let diff = g.sub(future_z0, future_hat);
    let mut vlb = g.sum_squares(diff);
    let future_f = g.slice_rows(f, n_past, n_future);
    if step == 1 {
        let d = g.sub(future_f, future_hat);
        let d = g.sum_squares(d);
        vlb = g.add(vlb, d);
    }

    // head outputs are unit coordinates; the losses are measured in pixels
    let spec = &model.config.spec;
    let (w, h) = (T::of(spec.image_width), T::of(spec.image_height));
    let gt = g.input(ex.waypoints.clone());
    let mut px_mask = ex.waypoint_mask.clone();
    for (i, m) in px_mask.data.iter_mut().enumerate() {
        *m = *m * if i % 2 == 0 { w } else { h };
    }
    let wmask = g.input(px_mask);

    let past_f = g.slice_rows(f, 0, n_past);
    let denoised = g.concat_rows(&[past_f, future_hat]);
    let wp = hth(g, &layout.hth, future_hat);
    let d = g.sub(wp, gt);
    let d = g.mul(d, wmask);
    let traj = g.sum_squares(d);

    let wp_reg = hth(g, &layout.hth, future_f);
    let d = g.sub(wp_reg, gt);
    let d = g.mul(d, wmask);
    let reg = g.sum_squares(d);

    let cond = oah_condition(g, &layout.oah, denoised, wp);
    let contact = g.input(ex.contact.clone());
    let (mu, logvar) = cvae_encode(g, &layout.oah, cond, contact);
    let k = noise.latent.rows;
    let half = g.scale(logvar, T::of(0.5));
    let std = g.exp(half);
    let stds = g.concat_rows(&vec![std; k]);
    let mus = g.concat_rows(&vec![mu; k]);
    let eps = g.input(noise.latent.clone());
    let spread = g.mul(stds, eps);
    let latents = g.add(mus, spread);
    let points = cvae_decode(g, &layout.oah, cond, latents);
    let targets = g.concat_rows(&vec![contact; k]);
    let d = g.sub(points, targets);
    let px = g.input(Mat::from_rows(&vec![vec![w, h]; k]).expect("equal rows"));
    let d = g.mul(d, px);
    let recon = g.sum_squares(d);
    let recon = g.scale(recon, T::one() / T::of_usize(k));
    let kl = kl_graph(g, mu, logvar);
    let kl_scaled = g.scale(kl, T::of(weights.kl_scale));
    let aff = g.add(recon, kl_scaled);

    SideVars {
        vlb,
        traj,
        aff,
        reg,
        kl,
    }
}

/// Records the objective of one example on `g`; returns the weighted total.
pub fn record_example<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    example: &TrainingExample<T>,
    noise: &ExampleNoise<T>,
    weights: &LossWeights,
) -> (Option<Var>, ExampleLossVars) {
    let ego = encode_ego(g, &model.layout.madt, &example.egomotion);
    let sides: Vec<(Side, SideVars)> = example
        .sides
        .iter()
        .zip(&noise.sides)
        .map(|(ex, n)| {
            (
                ex.side,
                record_side(g, model, ex, n, noise.step, ego, example.n_past, weights),
            )
        })
        .collect();
    if sides.is_empty() {
        return (None, ExampleLossVars { sides: Vec::new() });
    }
    let n_sides = T::of_usize(sides.len());
    let mut total: Option<Var> = None;
    for (_, v) in &sides {
        let vlb = g.scale(v.vlb, T::of(weights.vlb * noise.weight));
        let traj = g.scale(v.traj, T::of(weights.traj));
        let aff = g.scale(v.aff, T::of(weights.aff) / n_sides);
        let reg = g.scale(v.reg, T::of(weights.reg));
        let mut t = g.add(vlb, traj);
        t = g.add(t, aff);
        t = g.add(t, reg);
        total = Some(match total {
            Some(acc) => g.add(acc, t),
            None => t,
        });
    }
    (
        total,
        ExampleLossVars {
            sides: sides
                .into_iter()
                .map(|(side, v)| (side, [v.vlb, v.traj, v.aff, v.reg, v.kl]))
                .collect(),
        },
    )
}

pub struct ExampleLossVars {
    sides: Vec<(Side, [Var; 5])>,
}

impl ExampleLossVars {
    fn read<T: Real>(&self, g: &Graph<'_, T>) -> Vec<SideLoss> {
        self.sides
            .iter()
            .map(|(side, v)| {
                let x = |i: usize| g.scalar(v[i]).to_f64_lossy();
                SideLoss {
                    side: *side,
                    vlb: x(0),
                    traj: x(1),
                    aff: x(2),
                    reg: x(3),
                    kl: x(4),
                }
            })
            .collect()
    }
}

/// Loss and parameter gradients of one example.
pub fn example_objective<T: Real>(
    model: &Model<T>,
    example: &TrainingExample<T>,
    noise: &ExampleNoise<T>,
    weights: &LossWeights,
) -> (ExampleLoss, Vec<Option<Mat<T>>>) {
    let mut g = Graph::new(model.store.mats());
    let (total, vars) = record_example(&mut g, model, example, noise, weights);
    let sides = vars.read(&g);
    let mut loss = ExampleLoss {
        step: noise.step,
        weight: noise.weight,
        sides,
        total: 0.0,
    };
    loss.total = loss.recombine(weights, noise.weight);
    let grads = match total {
        Some(t) => g.backward(t).params,
        None => vec![None; model.store.len()],
    };
    (loss, grads)
}

/// Squared-distance trajectory error over waypoints valid in both inputs.
pub fn traj_loss(pred: &HandTrajectory<f64>, gt: &HandTrajectory<f64>) -> Result<f64> {
    if pred.len() != gt.len() || pred.valid.len() != gt.valid.len() {
        return Err(Error::validation(format!(
            "trajectory lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred
        .waypoints
        .iter()
        .zip(&gt.waypoints)
        .zip(pred.valid.iter().zip(&gt.valid))
        .filter(|(_, (a, b))| **a && **b)
        .map(|((p, q), _)| (p.u - q.u).powi(2) + (p.v - q.v).powi(2))
        .sum())
}

/// Mean squared distance of the samples to the contact plus `c`·KL.
pub fn aff_loss(contacts: &ContactPointSet<f64>, gt: PixelPoint<f64>, mu: &[f64], logvar: &[f64], c: f64) -> f64 {
    let n = contacts.len().max(1) as f64;
    let recon: f64 = contacts
        .points
        .iter()
        .map(|p| (p.u - gt.u).powi(2) + (p.v - gt.v).powi(2))
        .sum::<f64>()
        / n;
    recon + c * kl_divergence(mu, logvar)
}

/// Diffusion term of one side at step `s`, drawing fresh noise from `rng`.
pub fn vlb_loss<T: Real>(
    model: &Model<T>,
    example: &TrainingExample<T>,
    side: Side,
    s: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if s == 0 || s > model.schedule.steps {
        return Err(Error::validation(format!("step {s} outside 1..={}", model.schedule.steps)));
    }
    let idx = example
        .sides
        .iter()
        .position(|e| e.side == side)
        .ok_or_else(|| Error::validation(format!("{side:?} is not visible in this episode")))?;
    let noise = ExampleNoise::draw(model, example, s, 1.0, rng);
    let (loss, _) = example_objective(model, example, &noise, &LossWeights::default());
    Ok(loss.sides[idx].vlb)
}

/// Averaged losses of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    /// Importance-weighted diffusion term, `mean_i w_i · (vlb_R + vlb_L)`.
    pub vlb: f64,
    pub traj: f64,
    pub aff: f64,
    pub reg: f64,
    pub kl: f64,
    pub total: f64,
    /// Diffusion step drawn for each example.
    pub diffusion_steps: Vec<usize>,
    pub weights: Vec<f64>,
}

impl LossBreakdown {
    fn from_examples(step: u64, losses: &[ExampleLoss]) -> Self {
        let n = losses.len() as f64;
        let mean = |f: &dyn Fn(&ExampleLoss) -> f64| losses.iter().map(f).sum::<f64>() / n;
        Self {
            step,
            vlb: mean(&|l| l.weight * l.sum(|s| s.vlb)),
            traj: mean(&|l| l.sum(|s| s.traj)),
            aff: mean(&|l| l.aff()),
            reg: mean(&|l| l.sum(|s| s.reg)),
            kl: mean(&|l| l.sum(|s| s.kl)),
            total: mean(&|l| l.total),
            diffusion_steps: losses.iter().map(|l| l.step).collect(),
            weights: losses.iter().map(|l| l.weight).collect(),
        }
    }

    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.vlb * self.vlb + w.traj * self.traj + w.aff * self.aff + w.reg * self.reg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<Mat<T>>,
    pub v: Vec<Mat<T>>,
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Mat<T>> = store.mats().iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One decoupled-weight-decay Adam update.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Mat<T>>], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = T::of(cfg.learning_rate);
        let wd = T::of(cfg.weight_decay);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (tc1, tc2) = (T::of(c1), T::of(c2));
        let eps = T::of(cfg.adam_eps);
        for (i, p) in store.mats_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].as_ref();
            for j in 0..p.data.len() {
                let gj = g.map_or(T::zero(), |g| g.data[j]);
                m.data[j] = tb1 * m.data[j] + (T::one() - tb1) * gj;
                v.data[j] = tb2 * v.data[j] + (T::one() - tb2) * gj * gj;
                let mhat = m.data[j] / tc1;
                let vhat = v.data[j] / tc2;
                p.data[j] = p.data[j] - lr * (mhat / (vhat.sqrt() + eps) + wd * p.data[j]);
            }
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub sampler: ImportanceSampler,
    pub step: u64,
    pub config: TrainConfig,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(&model.store);
        let sampler = ImportanceSampler::new(model.schedule.steps);
        Ok(Self {
            model,
            optimizer,
            sampler,
            step: 0,
            config,
        })
    }
}

/// Runs one optimizer step on the given batch.
pub fn train_step<T: Real>(state: &mut TrainState<T>, batch: &[&TrainingExample<T>]) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let cfg = state.config;
    let noises: Vec<ExampleNoise<T>> = batch
        .iter()
        .enumerate()
        .map(|(slot, ex)| {
            let mut rng = seeding::rng(cfg.seed, &[state.step, slot as u64]);
            let (s, w) = state.sampler.draw(&mut rng);
            ExampleNoise::draw(&state.model, ex, s, w, &mut rng)
        })
        .collect();

    let model = &state.model;
    let results: Vec<(ExampleLoss, Vec<Option<Mat<T>>>)> = batch
        .par_iter()
        .zip(&noises)
        .map(|(ex, n)| example_objective(model, ex, n, &cfg.weights))
        .collect();

    let losses: Vec<ExampleLoss> = results.iter().map(|(l, _)| l.clone()).collect();
    let breakdown = LossBreakdown::from_examples(state.step, &losses);
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {}: {}",
            state.step,
            serde_json::to_string(&breakdown).unwrap_or_default()
        )));
    }

    let scale = T::one() / T::of_usize(batch.len());
    let mut grads: Vec<Option<Mat<T>>> = vec![None; model.store.len()];
    for (_, g) in results {
        for (acc, gi) in grads.iter_mut().zip(g) {
            let Some(gi) = gi else { continue };
            match acc {
                Some(a) => a.add_assign(&gi),
                None => *acc = Some(gi),
            }
        }
    }
    for g in grads.iter_mut().flatten() {
        g.data.iter_mut().for_each(|x| *x = *x * scale);
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at step {}", state.step)));
    }

    state.optimizer.update(&mut state.model.store, &grads, &cfg);
    for l in &losses {
        if !l.sides.is_empty() {
            state.sampler.update(l.step, l.recombine(&cfg.weights, 1.0))?;
        }
    }
    state.step += 1;
    Ok(breakdown)
}

/// Batch of example indices for the state's current step.
pub fn batch_indices(config: &TrainConfig, step: u64, n_examples: usize) -> Vec<usize> {
    let mut rng = seeding::rng(config.seed, &[step, u64::MAX]);
    (0..config.batch_size).map(|_| rng.gen_range(0..n_examples)).collect()
}

/// Trains until `state.step` reaches `until`, calling `on_step` after every step.
pub fn train<T: Real>(
    state: &mut TrainState<T>,
    examples: &[TrainingExample<T>],
    until: u64,
    mut on_step: impl FnMut(&LossBreakdown),
) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::validation("no training examples"));
    }
    while state.step < until {
        let idx = batch_indices(&state.config, state.step, examples.len());
        let batch: Vec<&TrainingExample<T>> = idx.iter().map(|&i| &examples[i]).collect();
        let b = train_step(state, &batch)?;
        on_step(&b);
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub coordinates: usize,
    pub h: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            coordinates: 200,
            h: 1e-4,
            tolerance: 1e-3,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares `analytic` against central differences of `loss` on randomly
/// chosen coordinates.
pub fn gradient_check(
    loss: impl Fn(&ParamStore<f64>) -> f64,
    store: &ParamStore<f64>,
    analytic: &[Option<Mat<f64>>],
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let mut rng = seeding::rng(cfg.seed, &[]);
    let sizes: Vec<usize> = store.mats().iter().map(|m| m.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    for _ in 0..cfg.coordinates.min(total) {
        let mut k = rng.gen_range(0..total);
        let mut p = 0;
        while k >= sizes[p] {
            k -= sizes[p];
            p += 1;
        }
        let orig = probe.get(p).data[k];
        probe.get_mut(p).data[k] = orig + cfg.h;
        let up = loss(&probe);
        probe.get_mut(p).data[k] = orig - cfg.h;
        let down = loss(&probe);
        probe.get_mut(p).data[k] = orig;
        let numeric = (up - down) / (2.0 * cfg.h);
        let a = analytic[p].as_ref().map_or(0.0, |g| g.data[k]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(rel);
        if !(rel < cfg.tolerance) {
            report.failures.push(GradCheckEntry {
                param: store.names()[p].clone(),
                index: k,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    report
}
