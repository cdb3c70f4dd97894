//! Prediction pipeline: egomotion estimation, anchored DDIM denoising,
//! decoding of candidate futures and temporal enhancement.

use std::sync::atomic::{AtomicUsize, Ordering};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_step, standard_normal, DiffusionState};
use crate::error::{Error, Result};
use crate::geometry::{ContactPointSet, HandTrajectory, PixelPoint, Side};
use crate::heads::{cvae_sample, hth_forward, oah_condition_mat};
use crate::homography::{accumulate, project_point, ransac_homography, HomographyStack, RansacConfig};
use crate::madt::{denoise_mat, key_mask};
use crate::mat::Mat;
use crate::model::Model;
use crate::scalar::Real;
use crate::seeding;
use crate::synthgen::ObservationSequence;
use crate::tokenizer::assemble_sequence;

/// Estimated past-to-canvas maps; `degraded` when estimation failed and the
/// identity stack stands in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Egomotion {
    pub stack: HomographyStack<f64>,
    pub degraded: bool,
}

fn try_estimate(episode: &ObservationSequence, cfg: &RansacConfig, seed: u64) -> Result<HomographyStack<f64>> {
    let adjacent = (0..episode.correspondences.len())
        .map(|i| {
            ransac_homography(&episode.adjacent_pairs(i), cfg, seed.wrapping_add(i as u64))
                .map(|r| r.homography)
        })
        .collect::<Result<Vec<_>>>()?;
    accumulate(&adjacent)
}

pub fn estimate_egomotion(episode: &ObservationSequence, cfg: &RansacConfig, seed: u64) -> Egomotion {
    match try_estimate(episode, cfg, seed) {
        Ok(stack) => Egomotion {
            stack,
            degraded: false,
        },
        Err(e) => {
            warn!("episode {}: egomotion estimation failed ({e}); using identity", episode.seed);
            Egomotion {
                stack: HomographyStack::identity(episode.spec.n_past),
                degraded: true,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub n_candidates: usize,
    pub ddim_steps: usize,
    pub ransac: RansacConfig,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            n_candidates: 10,
            ddim_steps: 50,
            ransac: RansacConfig::default(),
        }
    }
}

impl PredictConfig {
    pub fn validate(&self, schedule_steps: usize) -> Result<()> {
        if self.n_candidates == 0 {
            return Err(Error::config("need at least one candidate"));
        }
        if self.ddim_steps == 0 || self.ddim_steps > schedule_steps {
            return Err(Error::config(format!(
                "ddim_steps must lie in 1..={schedule_steps}, got {}",
                self.ddim_steps
            )));
        }
        Ok(())
    }
}

/// Forecast of one side within a candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidePrediction {
    pub side: Side,
    pub trajectory: HandTrajectory<f64>,
    pub contacts: ContactPointSet<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionCandidate {
    pub index: usize,
    pub seed: u64,
    pub sides: Vec<SidePrediction>,
}

impl PredictionCandidate {
    pub fn side(&self, side: Side) -> Option<&SidePrediction> {
        self.sides.iter().find(|s| s.side == side)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub episode_seed: u64,
    pub candidates: Vec<PredictionCandidate>,
    pub degraded: bool,
    pub denoiser_calls: usize,
}

impl Prediction {
    pub fn sides(&self) -> Vec<Side> {
        self.candidates
            .first()
            .map(|c| c.sides.iter().map(|s| s.side).collect())
            .unwrap_or_default()
    }
}

/// Sides with at least one visible past frame.
pub fn visible_sides(episode: &ObservationSequence) -> Vec<Side> {
    Side::BOTH
        .into_iter()
        .filter(|&s| episode.frames.iter().any(|f| f.valid(s)))
        .collect()
}

/// Tokenized past of one side.
#[derive(Debug, Clone, PartialEq)]
pub struct SideContext<T> {
    pub side: Side,
    pub past: Mat<T>,
    pub keys: Vec<bool>,
}

pub fn side_context<T: Real>(episode: &ObservationSequence, side: Side, model: &Model<T>) -> Result<SideContext<T>> {
    let seq = assemble_sequence(
        episode,
        side,
        &model.layout.tokenizer,
        &model.config.tokenizer,
        &model.store,
        false,
    )?;
    Ok(SideContext {
        side,
        keys: key_mask(&seq.valid, model.spec().horizon()),
        past: seq.rows,
    })
}

/// Anchored DDIM chain from pure noise on the future rows down to step 0.
/// `observe` sees every intermediate state; returns the final state.
pub fn reverse_chain<T: Real>(
    model: &Model<T>,
    ctx: &SideContext<T>,
    ego: &HomographyStack<f64>,
    noise: &Mat<T>,
    ddim_steps: usize,
    calls: &AtomicUsize,
    mut observe: impl FnMut(&DiffusionState<T>),
) -> Result<DiffusionState<T>> {
    let n_past = ctx.past.rows;
    if noise.cols != ctx.past.cols || n_past + noise.rows != ctx.keys.len() {
        return Err(Error::validation("noise does not fit the future rows"));
    }
    let mut data = ctx.past.data.clone();
    data.extend_from_slice(&noise.data);
    let z = Mat::from_vec(ctx.keys.len(), noise.cols, data)?;
    let sch = &model.schedule;
    let mut state = DiffusionState::new(z, sch.steps, n_past, ctx.side)?;
    observe(&state);
    for pair in sch.ddim_timesteps(ddim_steps)?.windows(2) {
        let z0_hat = denoise_mat(
            &model.store,
            &model.layout.madt,
            &model.config.madt,
            &state.z,
            pair[0],
            ego,
            &ctx.keys,
            ctx.side,
        );
        calls.fetch_add(1, Ordering::Relaxed);
        state = ddim_step(&state, &z0_hat, pair[1], sch)?;
        observe(&state);
    }
    Ok(state)
}

/// Sub-seed of candidate `index`.
pub fn candidate_seed(seed: u64, index: usize) -> u64 {
    seeding::derive(seed, &[index as u64])
}

/// One candidate from its own sub-seed; independent of every other candidate.
pub fn predict_candidate<T: Real>(
    model: &Model<T>,
    contexts: &[SideContext<T>],
    ego: &HomographyStack<f64>,
    ddim_steps: usize,
    index: usize,
    seed: u64,
    calls: &AtomicUsize,
) -> Result<PredictionCandidate> {
    let spec = model.spec();
    let cseed = candidate_seed(seed, index);
    let mut sides = Vec::with_capacity(contexts.len());
    for ctx in contexts {
        let mut rng = seeding::rng(cseed, &[ctx.side.index() as u64]);
        let noise = standard_normal(spec.n_future, model.config.tokenizer.latent_width, &mut rng);
        let done = reverse_chain(model, ctx, ego, &noise, ddim_steps, calls, |_| {})?;
        let layout = &model.layout;
        let trajectory = hth_forward(&model.store, &layout.hth, &done.future(), ctx.side, spec)?;
        let cond = oah_condition_mat(&model.store, &layout.oah, &done.z, &trajectory, spec)?;
        let contacts = cvae_sample(&model.store, &layout.oah, &cond, &mut rng, spec.n_contact, spec)?;
        sides.push(SidePrediction {
            side: ctx.side,
            trajectory,
            contacts,
        });
    }
    Ok(PredictionCandidate {
        index,
        seed: cseed,
        sides,
    })
}

pub fn predict<T: Real>(
    episode: &ObservationSequence,
    model: &Model<T>,
    cfg: &PredictConfig,
    seed: u64,
) -> Result<Prediction> {
    cfg.validate(model.schedule.steps)?;
    if episode.spec != *model.spec() {
        return Err(Error::validation("episode spec differs from the model's"));
    }
    let ego = estimate_egomotion(episode, &cfg.ransac, episode.seed);
    let contexts = visible_sides(episode)
        .into_iter()
        .map(|s| side_context(episode, s, model))
        .collect::<Result<Vec<_>>>()?;
    let calls = AtomicUsize::new(0);
    let candidates = (0..cfg.n_candidates)
        .into_par_iter()
        .map(|k| predict_candidate(model, &contexts, &ego.stack, cfg.ddim_steps, k, seed, &calls))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prediction {
        episode_seed: episode.seed,
        candidates,
        degraded: ego.degraded,
        denoiser_calls: calls.into_inner(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalEnhanceConfig {
    /// Decay constant of the window weights `exp(-u·t)`.
    pub u: f64,
    pub window: usize,
}

impl Default for TemporalEnhanceConfig {
    fn default() -> Self {
        Self { u: 0.5, window: 3 }
    }
}

impl TemporalEnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.u > 0.0 && self.u.is_finite()) || self.window == 0 {
            return Err(Error::config("temporal enhancement needs u > 0 and window >= 1"));
        }
        Ok(())
    }
}

fn weighted_mean(points: &[(f64, PixelPoint<f64>)]) -> PixelPoint<f64> {
    let total: f64 = points.iter().map(|(w, _)| w).sum();
    let (u, v) = points
        .iter()
        .fold((0.0, 0.0), |(u, v), (w, p)| (u + w * p.u, v + w * p.v));
    PixelPoint::new(u / total, v / total)
}

/// Combines per-window predictions, oldest first, into the newest window's
/// canvas. Window `t` steps back is moved onto the current canvas by
/// `stack.mats[n_past - 1 - t]` and weighted by `exp(-u·t)`.
pub fn aggregate(
    predictions: &[Prediction],
    stack: &HomographyStack<f64>,
    cfg: &TemporalEnhanceConfig,
) -> Result<Prediction> {
    cfg.validate()?;
    let newest = predictions.last().ok_or_else(|| Error::validation("empty prediction window"))?;
    let used = cfg.window.min(predictions.len());
    if used > stack.len() {
        return Err(Error::validation("window reaches beyond the observed past"));
    }
    // recent[t] is the prediction made t steps ago
    let recent: Vec<&Prediction> = predictions.iter().rev().take(used).collect();
    let transport = |t: usize, p: PixelPoint<f64>| project_point(&stack.mats[stack.len() - 1 - t], p);

    let mut candidates = Vec::with_capacity(newest.candidates.len());
    for cand in &newest.candidates {
        let mut sides = Vec::with_capacity(cand.sides.len());
        for sp in &cand.sides {
            let older: Vec<(usize, f64, &SidePrediction)> = recent
                .iter()
                .enumerate()
                .filter_map(|(t, p)| {
                    let c = p.candidates.iter().find(|c| c.index == cand.index)?;
                    Some((t, (-cfg.u * t as f64).exp(), c.side(sp.side)?))
                })
                .collect();
            let n_future = sp.trajectory.len();
            let mut waypoints = Vec::with_capacity(n_future);
            for i in 0..n_future {
                let mut pts = Vec::new();
                for &(t, w, o) in &older {
                    if i + t < o.trajectory.len() && o.trajectory.valid[i + t] {
                        pts.push((w, transport(t, o.trajectory.waypoints[i + t])?));
                    }
                }
                waypoints.push(weighted_mean(&pts));
            }
            let mut contacts = Vec::with_capacity(sp.contacts.len());
            for m in 0..sp.contacts.len() {
                let mut pts = Vec::new();
                for &(t, w, o) in &older {
                    if let Some(&p) = o.contacts.points.get(m) {
                        pts.push((w, transport(t, p)?));
                    }
                }
                contacts.push(weighted_mean(&pts));
            }
            sides.push(SidePrediction {
                side: sp.side,
                trajectory: HandTrajectory {
                    side: sp.side,
                    waypoints,
                    valid: sp.trajectory.valid.clone(),
                },
                contacts: ContactPointSet { points: contacts },
            });
        }
        candidates.push(PredictionCandidate {
            index: cand.index,
            seed: cand.seed,
            sides,
        });
    }
    Ok(Prediction {
        episode_seed: newest.episode_seed,
        candidates,
        degraded: recent.iter().any(|p| p.degraded),
        denoiser_calls: recent.iter().map(|p| p.denoiser_calls).sum(),
    })
}

/// Predicts on the last `window` episodes of a stream (oldest first) and
/// aggregates them onto the newest canvas.
pub fn temporal_enhance<T: Real>(
    stream: &[ObservationSequence],
    model: &Model<T>,
    predict_cfg: &PredictConfig,
    cfg: &TemporalEnhanceConfig,
    seed: u64,
) -> Result<Prediction> {
    cfg.validate()?;
    let newest = stream.last().ok_or_else(|| Error::validation("empty stream"))?;
    let start = stream.len().saturating_sub(cfg.window);
    let predictions = stream[start..]
        .iter()
        .map(|ep| predict(ep, model, predict_cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    if predictions.len() == 1 {
        return Ok(predictions.into_iter().next().expect("one prediction"));
    }
    let ego = estimate_egomotion(newest, &predict_cfg.ransac, newest.seed);
    let mut out = aggregate(&predictions, &ego.stack, cfg)?;
    out.degraded |= ego.degraded;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SequenceSpec;
    use crate::homography::Homography;
    use crate::madt::MadtConfig;
    use crate::model::ModelConfig;
    use crate::synthgen::{render_episode, render_stream, Difficulty};
    use crate::tokenizer::TokenizerConfig;

    fn tiny(spec: SequenceSpec) -> Model<f64> {
        let cfg = ModelConfig {
            spec,
            tokenizer: TokenizerConfig {
                latent_width: 8,
                ..TokenizerConfig::default()
            },
            madt: MadtConfig {
                n_layers: 1,
                width: 16,
                n_heads: 2,
                ff_width: 32,
                ego_width: 8,
                ..MadtConfig::desk()
            },
            ..ModelConfig::default()
        };
        Model::new(cfg, 17).unwrap()
    }

    fn fast() -> PredictConfig {
        PredictConfig {
            n_candidates: 3,
            ddim_steps: 4,
            ..PredictConfig::default()
        }
    }

    fn both() -> Difficulty {
        Difficulty {
            p_right: 0.0,
            p_left: 0.0,
            ..Difficulty::default()
        }
    }

    #[test]
    fn noise_free_egomotion_matches_generator() {
        let diff = Difficulty {
            corr_noise_px: 0.0,
            ..Difficulty::default()
        };
        for seed in 0..5 {
            let ep = render_episode(seed, &SequenceSpec::default(), &diff).unwrap();
            let est = estimate_egomotion(&ep, &RansacConfig::default(), 1);
            assert!(!est.degraded);
            for (a, b) in est.stack.mats.iter().zip(&ep.gt.homographies.mats) {
                assert!(a.frobenius_distance(b) < 1e-6, "seed {seed}");
            }
        }
    }

    #[test]
    fn static_camera_gives_identity_stack() {
        let ep = render_episode(2, &SequenceSpec::default(), &Difficulty::clean()).unwrap();
        let est = estimate_egomotion(&ep, &RansacConfig::default(), 0);
        for h in &est.stack.mats {
            assert!(h.frobenius_distance(&Homography::identity()) < 1e-9);
        }
    }

    #[test]
    fn failed_estimation_degrades_gracefully() {
        let mut ep = render_episode(3, &SequenceSpec::default(), &Difficulty::default()).unwrap();
        ep.correspondences.iter_mut().for_each(Vec::clear);
        let model = tiny(ep.spec);
        let p = predict(&ep, &model, &fast(), 0).unwrap();
        assert!(p.degraded);
        assert_eq!(p.candidates.len(), 3);
    }

    #[test]
    fn candidate_counts_and_determinism() {
        let ep = render_episode(4, &SequenceSpec::default(), &both()).unwrap();
        let model = tiny(ep.spec);
        let cfg = PredictConfig {
            n_candidates: 10,
            ddim_steps: 3,
            ..PredictConfig::default()
        };
        let a = predict(&ep, &model, &cfg, 9).unwrap();
        assert_eq!(a.candidates.len(), 10);
        let sides = visible_sides(&ep);
        assert_eq!(sides.len(), 2);
        for (k, c) in a.candidates.iter().enumerate() {
            assert_eq!(c.index, k);
            assert_eq!(c.sides.len(), 2);
            for s in &c.sides {
                assert_eq!(s.trajectory.len(), ep.spec.n_future);
                assert_eq!(s.contacts.len(), ep.spec.n_contact);
            }
        }
        assert_eq!(a, predict(&ep, &model, &cfg, 9).unwrap());
        assert_ne!(a.candidates, predict(&ep, &model, &cfg, 10).unwrap().candidates);
    }

    #[test]
    fn call_count_is_independent_of_horizon() {
        for n_future in [2, 4, 8] {
            let spec = SequenceSpec {
                n_future,
                ..SequenceSpec::default()
            };
            let ep = render_episode(5, &spec, &Difficulty::default()).unwrap();
            let model = tiny(spec);
            let p = predict(&ep, &model, &fast(), 0).unwrap();
            let sides = visible_sides(&ep).len();
            assert_eq!(p.denoiser_calls, fast().n_candidates * fast().ddim_steps * sides);
        }
    }

    #[test]
    fn past_rows_stay_anchored_through_the_chain() {
        let ep = render_episode(6, &SequenceSpec::default(), &Difficulty::default()).unwrap();
        let model = tiny(ep.spec);
        let side = visible_sides(&ep)[0];
        let ctx = side_context(&ep, side, &model).unwrap();
        let noise = standard_normal(ep.spec.n_future, 8, &mut seeding::rng(0, &[]));
        let calls = AtomicUsize::new(0);
        let mut states = 0;
        let done = reverse_chain(&model, &ctx, &HomographyStack::identity(10), &noise, 7, &calls, |s| {
            assert_eq!(s.past(), ctx.past);
            states += 1;
        })
        .unwrap();
        assert_eq!(states, 8);
        assert_eq!(done.step, 0);
        assert_eq!(calls.into_inner(), 7);
    }

    #[test]
    fn candidates_are_independent() {
        let ep = render_episode(7, &SequenceSpec::default(), &both()).unwrap();
        let model = tiny(ep.spec);
        let all = predict(&ep, &model, &fast(), 3).unwrap();
        let ego = estimate_egomotion(&ep, &RansacConfig::default(), ep.seed);
        let ctx: Vec<_> = visible_sides(&ep)
            .into_iter()
            .map(|s| side_context(&ep, s, &model).unwrap())
            .collect();
        let alone = predict_candidate(&model, &ctx, &ego.stack, 4, 2, 3, &AtomicUsize::new(0)).unwrap();
        assert_eq!(alone, all.candidates[2]);
    }

    fn point_prediction(points: &[(f64, f64)], contact: (f64, f64)) -> Prediction {
        let wp: Vec<_> = points.iter().map(|&(u, v)| PixelPoint::new(u, v)).collect();
        Prediction {
            episode_seed: 0,
            candidates: vec![PredictionCandidate {
                index: 0,
                seed: 0,
                sides: vec![SidePrediction {
                    side: Side::Right,
                    trajectory: HandTrajectory::new(Side::Right, wp),
                    contacts: ContactPointSet {
                        points: vec![PixelPoint::new(contact.0, contact.1)],
                    },
                }],
            }],
            degraded: false,
            denoiser_calls: 1,
        }
    }

    #[test]
    fn two_window_aggregation_matches_hand_weights() {
        // the older window's canvas sits 4 px left of the current one
        let mut stack = HomographyStack::<f64>::identity(3);
        stack.mats[1] = Homography::translation(4.0, 0.0);
        let older = point_prediction(&[(0.0, 0.0), (10.0, 10.0), (20.0, 20.0)], (30.0, 0.0));
        let newer = point_prediction(&[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)], (0.0, 30.0));
        let cfg = TemporalEnhanceConfig {
            u: std::f64::consts::LN_2,
            window: 2,
        };
        let out = aggregate(&[older, newer], &stack, &cfg).unwrap();
        let s = &out.candidates[0].sides[0];
        let (a, b) = (2.0 / 3.0, 1.0 / 3.0);
        let want = [
            (a * 1.0 + b * 14.0, a * 1.0 + b * 10.0),
            (a * 2.0 + b * 24.0, a * 2.0 + b * 20.0),
            (3.0, 3.0),
        ];
        for (p, w) in s.trajectory.waypoints.iter().zip(want) {
            assert!((p.u - w.0).abs() < 1e-12 && (p.v - w.1).abs() < 1e-12, "{p:?} vs {w:?}");
        }
        let c = s.contacts.points[0];
        assert!((c.u - b * 34.0).abs() < 1e-12 && (c.v - a * 30.0).abs() < 1e-12);
        assert_eq!(out.denoiser_calls, 2);
    }

    #[test]
    fn large_decay_keeps_only_the_newest() {
        let stack = HomographyStack::<f64>::identity(3);
        let older = point_prediction(&[(0.0, 0.0), (10.0, 10.0), (20.0, 20.0)], (30.0, 0.0));
        let newer = point_prediction(&[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)], (0.0, 30.0));
        let cfg = TemporalEnhanceConfig { u: 60.0, window: 2 };
        let out = aggregate(&[older, newer.clone()], &stack, &cfg).unwrap();
        let (o, n) = (&out.candidates[0].sides[0], &newer.candidates[0].sides[0]);
        for (p, q) in o.trajectory.waypoints.iter().zip(&n.trajectory.waypoints) {
            assert!((p.u - q.u).abs() < 1e-12 && (p.v - q.v).abs() < 1e-12);
        }
    }

    #[test]
    fn window_one_equals_plain_prediction() {
        let stream = render_stream(8, &SequenceSpec::default(), &Difficulty::default(), 3).unwrap();
        let model = tiny(stream[0].spec);
        let cfg = TemporalEnhanceConfig { u: 0.5, window: 1 };
        let enhanced = temporal_enhance(&stream, &model, &fast(), &cfg, 4).unwrap();
        assert_eq!(enhanced, predict(&stream[2], &model, &fast(), 4).unwrap());

        let cfg = TemporalEnhanceConfig { u: 0.5, window: 3 };
        let out = temporal_enhance(&stream, &model, &fast(), &cfg, 4).unwrap();
        assert_eq!(out.candidates.len(), 3);
        assert!(out.candidates.iter().flat_map(|c| &c.sides).all(|s| s
            .trajectory
            .waypoints
            .iter()
            .all(|p| p.u.is_finite() && p.v.is_finite())));
    }

    #[test]
    fn rejects_bad_inputs() {
        let stack = HomographyStack::<f64>::identity(3);
        assert!(aggregate(&[], &stack, &TemporalEnhanceConfig::default()).is_err());
        assert!(TemporalEnhanceConfig { u: 0.0, window: 1 }.validate().is_err());
        assert!(TemporalEnhanceConfig { u: 1.0, window: 0 }.validate().is_err());
        assert!(PredictConfig {
            ddim_steps: 0,
            ..PredictConfig::default()
        }
        .validate(1000)
        .is_err());
    }
}
