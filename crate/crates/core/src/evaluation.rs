//! Test-split evaluation of the model and both baselines.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{center_object_hotspot, cvh_episode, last_object_center};
use crate::error::Result;
use crate::geometry::{HandTrajectory, PixelPoint};
use crate::inference::{predict, temporal_enhance, PredictConfig, Prediction, TemporalEnhanceConfig};
use crate::metrics::{
    candidate_hotspot, fde_candidates, joint_protocol, score_map, wde, CandidateError, HotspotTruth, SaliencyScores,
};
use crate::model::Model;
use crate::scalar::Real;
use crate::synthgen::ObservationSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Hotspot width as a fraction of the image width.
    pub sigma_frac: f64,
    pub predict: PredictConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sigma_frac: 0.05,
            predict: PredictConfig::default(),
            seed: 0,
        }
    }
}

/// Scores of one method on one episode; `None` marks an excluded sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub wde: Option<f64>,
    pub wde_min: Option<f64>,
    pub fde: Option<f64>,
    pub fde_min: Option<f64>,
    pub affordance: Option<SaliencyScores>,
    pub joint: Option<SaliencyScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub seed: u64,
    pub degraded: bool,
    pub model: MethodScores,
    pub cvh: MethodScores,
    pub center_object: MethodScores,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub wde: Option<f64>,
    pub wde_min: Option<f64>,
    pub fde: Option<f64>,
    pub fde_min: Option<f64>,
    pub sim: Option<f64>,
    pub auc_j: Option<f64>,
    pub nss: Option<f64>,
    pub sim_star: Option<f64>,
    pub auc_j_star: Option<f64>,
    pub nss_star: Option<f64>,
    pub excluded_trajectory: usize,
    pub excluded_affordance: usize,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut missing) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => missing += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), missing)
}

impl MetricSummary {
    pub fn of(rows: &[MethodScores]) -> Self {
        let col = |f: &dyn Fn(&MethodScores) -> Option<f64>| mean(rows.iter().map(f));
        let (wde, excluded_trajectory) = col(&|r| r.wde);
        let (sim, excluded_affordance) = col(&|r| r.affordance.map(|a| a.sim));
        Self {
            wde,
            wde_min: col(&|r| r.wde_min).0,
            fde: col(&|r| r.fde).0,
            fde_min: col(&|r| r.fde_min).0,
            sim,
            auc_j: col(&|r| r.affordance.map(|a| a.auc_j)).0,
            nss: col(&|r| r.affordance.map(|a| a.nss)).0,
            sim_star: col(&|r| r.joint.map(|a| a.sim)).0,
            auc_j_star: col(&|r| r.joint.map(|a| a.auc_j)).0,
            nss_star: col(&|r| r.joint.map(|a| a.nss)).0,
            excluded_trajectory,
            excluded_affordance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: EvalConfig,
    pub n_episodes: usize,
    pub degraded: usize,
    pub model: MetricSummary,
    pub cvh: MetricSummary,
    pub center_object: MetricSummary,
    pub episodes: Vec<EpisodeReport>,
}

impl MetricsReport {
    /// Fixed-width text table of the aggregate rows.
    pub fn table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| format!("{:>9}", "-"), |x| format!("{x:>9.4}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14}{:>9}{:>9}{:>9}{:>9}{:>9}{:>9}{:>9}{:>9}",
            "method", "WDE", "FDE", "SIM", "AUC-J", "NSS", "SIM*", "AUC-J*", "NSS*"
        );
        for (name, m) in [("model", &self.model), ("cvh", &self.cvh), ("center_object", &self.center_object)] {
            let _ = writeln!(
                out,
                "{name:<14}{}{}{}{}{}{}{}{}",
                cell(m.wde),
                cell(m.fde),
                cell(m.sim),
                cell(m.auc_j),
                cell(m.nss),
                cell(m.sim_star),
                cell(m.auc_j_star),
                cell(m.nss_star)
            );
        }
        let _ = writeln!(out, "episodes: {}, degraded: {}", self.n_episodes, self.degraded);
        out
    }
}

pub fn gt_trajectories(episode: &ObservationSequence) -> Vec<HandTrajectory<f64>> {
    episode
        .valid_sides()
        .into_iter()
        .filter_map(|s| episode.gt.side(s).map(|t| t.trajectory.clone()))
        .collect()
}

pub fn gt_contacts(episode: &ObservationSequence) -> Vec<PixelPoint<f64>> {
    episode
        .valid_sides()
        .into_iter()
        .filter_map(|s| episode.gt.side(s).map(|t| t.contact_point))
        .collect()
}

fn split(e: Option<CandidateError>) -> (Option<f64>, Option<f64>) {
    (e.map(|e| e.mean), e.map(|e| e.min))
}

/// Scores a prediction against the episode's ground truth.
pub fn score_prediction(episode: &ObservationSequence, prediction: &Prediction, sigma: f64) -> MethodScores {
    let gt = gt_trajectories(episode);
    let trajectories: Vec<Vec<HandTrajectory<f64>>> = prediction
        .candidates
        .iter()
        .map(|c| c.sides.iter().map(|s| s.trajectory.clone()).collect())
        .collect();
    let (wde, wde_min) = split(wde(&trajectories, &gt));
    let (fde, fde_min) = split(fde_candidates(&trajectories, &gt));
    let (w, h) = (episode.spec.image_width as usize, episode.spec.image_height as usize);
    let truth = HotspotTruth::new(&gt_contacts(episode), sigma, w, h).ok();
    let affordance = truth.as_ref().and_then(|t| {
        let map = candidate_hotspot(&prediction.candidates, sigma, w, h).ok()?;
        score_map(&map, t).ok()
    });
    let joint = truth
        .as_ref()
        .and_then(|t| joint_protocol(&prediction.candidates, sigma, t).ok());
    MethodScores {
        wde,
        wde_min,
        fde,
        fde_min,
        affordance,
        joint,
    }
}

fn baseline_scores(episode: &ObservationSequence, sigma: f64) -> (MethodScores, MethodScores) {
    let gt = gt_trajectories(episode);
    let cvh = vec![cvh_episode(episode)];
    let (wde, wde_min) = split(wde(&cvh, &gt));
    let (fde, fde_min) = split(fde_candidates(&cvh, &gt));
    let (w, h) = (episode.spec.image_width as usize, episode.spec.image_height as usize);
    let affordance = HotspotTruth::new(&gt_contacts(episode), sigma, w, h).ok().and_then(|t| {
        let map = center_object_hotspot(last_object_center(episode), sigma, w, h).ok()?;
        score_map(&map, &t).ok()
    });
    (
        MethodScores {
            wde,
            wde_min,
            fde,
            fde_min,
            ..MethodScores::default()
        },
        MethodScores {
            affordance,
            ..MethodScores::default()
        },
    )
}

pub fn evaluate<T: Real>(episodes: &[ObservationSequence], model: &Model<T>, cfg: &EvalConfig) -> Result<MetricsReport> {
    let sigma = cfg.sigma_frac * model.spec().image_width;
    let rows = episodes
        .par_iter()
        .map(|ep| {
            let p = predict(ep, model, &cfg.predict, cfg.seed)?;
            let (cvh, center_object) = baseline_scores(ep, sigma);
            Ok(EpisodeReport {
                seed: ep.seed,
                degraded: p.degraded,
                model: score_prediction(ep, &p, sigma),
                cvh,
                center_object,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(*cfg, rows))
}

fn summarize(config: EvalConfig, rows: Vec<EpisodeReport>) -> MetricsReport {
    let pick = |f: fn(&EpisodeReport) -> MethodScores| rows.iter().map(f).collect::<Vec<_>>();
    MetricsReport {
        config,
        n_episodes: rows.len(),
        degraded: rows.iter().filter(|r| r.degraded).count(),
        model: MetricSummary::of(&pick(|r| r.model)),
        cvh: MetricSummary::of(&pick(|r| r.cvh)),
        center_object: MetricSummary::of(&pick(|r| r.center_object)),
        episodes: rows,
    }
}

/// Plain and enhanced WDE on sliding-window streams, scored on each stream's
/// newest window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamComparison {
    pub plain_wde: f64,
    pub enhanced_wde: f64,
    pub n_streams: usize,
}

pub fn compare_temporal<T: Real>(
    streams: &[Vec<ObservationSequence>],
    model: &Model<T>,
    cfg: &EvalConfig,
    enhance: &TemporalEnhanceConfig,
) -> Result<StreamComparison> {
    let pairs = streams
        .par_iter()
        .map(|stream| {
            let newest = stream.last().ok_or_else(|| crate::error::Error::validation("empty stream"))?;
            let plain = predict(newest, model, &cfg.predict, cfg.seed)?;
            let enhanced = temporal_enhance(stream, model, &cfg.predict, enhance, cfg.seed)?;
            let gt = gt_trajectories(newest);
            let score = |p: &Prediction| {
                let c: Vec<Vec<HandTrajectory<f64>>> = p
                    .candidates
                    .iter()
                    .map(|c| c.sides.iter().map(|s| s.trajectory.clone()).collect())
                    .collect();
                wde(&c, &gt).map(|e| e.mean)
            };
            Ok((score(&plain), score(&enhanced)))
        })
        .collect::<Result<Vec<_>>>()?;
    let kept: Vec<(f64, f64)> = pairs
        .into_iter()
        .filter_map(|(a, b)| Some((a?, b?)))
        .collect();
    let n = kept.len().max(1) as f64;
    Ok(StreamComparison {
        plain_wde: kept.iter().map(|p| p.0).sum::<f64>() / n,
        enhanced_wde: kept.iter().map(|p| p.1).sum::<f64>() / n,
        n_streams: kept.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SequenceSpec;
    use crate::inference::{PredictionCandidate, SidePrediction};
    use crate::geometry::ContactPointSet;
    use crate::madt::MadtConfig;
    use crate::model::ModelConfig;
    use crate::synthgen::{render_dataset, render_episode, Difficulty};
    use crate::tokenizer::TokenizerConfig;

    fn tiny() -> Model<f64> {
        let cfg = ModelConfig {
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
        Model::new(cfg, 1).unwrap()
    }

    fn fast() -> EvalConfig {
        EvalConfig {
            predict: PredictConfig {
                n_candidates: 2,
                ddim_steps: 3,
                ..PredictConfig::default()
            },
            ..EvalConfig::default()
        }
    }

    #[test]
    fn oracle_prediction_scores_perfectly() {
        let ep = render_episode(3, &SequenceSpec::default(), &Difficulty::default()).unwrap();
        let cand = PredictionCandidate {
            index: 0,
            seed: 0,
            sides: ep
                .valid_sides()
                .into_iter()
                .map(|s| {
                    let t = ep.gt.side(s).unwrap();
                    SidePrediction {
                        side: s,
                        trajectory: t.trajectory.clone(),
                        contacts: ContactPointSet {
                            points: vec![t.contact_point],
                        },
                    }
                })
                .collect(),
        };
        let p = Prediction {
            episode_seed: ep.seed,
            candidates: vec![cand],
            degraded: false,
            denoiser_calls: 0,
        };
        let s = score_prediction(&ep, &p, 6.4);
        assert_eq!(s.wde, Some(0.0));
        assert_eq!(s.fde, Some(0.0));
        let a = s.affordance.unwrap();
        assert!((a.sim - 1.0).abs() < 1e-12 && a.auc_j > 0.99 && a.nss > 0.0);
    }

    #[test]
    fn report_has_every_column_and_reruns_identically() {
        let eps = render_dataset(50, 3, &SequenceSpec::default(), &Difficulty::default()).unwrap();
        let model = tiny();
        let r = evaluate(&eps, &model, &fast()).unwrap();
        assert_eq!(r.n_episodes, 3);
        let m = r.model;
        for v in [m.wde, m.fde, m.sim, m.auc_j, m.nss, m.sim_star, m.auc_j_star, m.nss_star] {
            assert!(v.is_some_and(f64::is_finite));
        }
        assert!(r.cvh.wde.is_some() && r.center_object.auc_j.is_some());
        assert!(r.cvh.sim.is_none() && r.center_object.wde.is_none());
        assert_eq!(r, evaluate(&eps, &model, &fast()).unwrap());
        let table = r.table();
        assert!(table.contains("AUC-J*") && table.contains("center_object"));
        serde_json::to_string(&r).unwrap();
    }
}
