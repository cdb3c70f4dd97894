//! Reference predictors: constant-velocity hands and a hotspot on the
//! detected object.

use crate::error::Result;
use crate::geometry::{HandTrajectory, PixelPoint, Side, SequenceSpec};
use crate::metrics::{build_hotspot, SaliencyMap};
use crate::synthgen::ObservationSequence;

/// Extrapolates the mean per-frame velocity of the observed past; `None`
/// with fewer than two observed points.
pub fn cvh_predict(side: Side, past: &[Option<PixelPoint<f64>>], n_future: usize) -> Option<HandTrajectory<f64>> {
    let seen: Vec<(usize, PixelPoint<f64>)> = past
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (i, p)))
        .collect();
    if seen.len() < 2 {
        return None;
    }
    let steps: Vec<(f64, f64)> = seen
        .windows(2)
        .map(|w| {
            let dt = (w[1].0 - w[0].0) as f64;
            ((w[1].1.u - w[0].1.u) / dt, (w[1].1.v - w[0].1.v) / dt)
        })
        .collect();
    let k = steps.len() as f64;
    let (vu, vv) = steps.iter().fold((0.0, 0.0), |(a, b), (u, v)| (a + u / k, b + v / k));
    let (last_i, last) = *seen.last().expect("two points");
    let lag = (past.len() - 1 - last_i) as f64;
    let waypoints = (1..=n_future)
        .map(|t| {
            let dt = lag + t as f64;
            PixelPoint::new(last.u + dt * vu, last.v + dt * vv)
        })
        .collect();
    Some(HandTrajectory::new(side, waypoints))
}

/// Constant-velocity forecasts from the ground-truth canvas positions of
/// the observed past, per side with enough observations.
pub fn cvh_episode(episode: &ObservationSequence) -> Vec<HandTrajectory<f64>> {
    Side::BOTH
        .into_iter()
        .filter_map(|side| {
            let truth = episode.gt.side(side)?;
            cvh_predict(side, &truth.past_canvas, episode.spec.n_future)
        })
        .collect()
}

pub fn center_object_hotspot(object_center: PixelPoint<f64>, sigma: f64, width: usize, height: usize) -> Result<SaliencyMap> {
    build_hotspot(&[object_center], sigma, width, height)
}

/// Most recent reported object centre, or the image centre when none was seen.
pub fn last_object_center(episode: &ObservationSequence) -> PixelPoint<f64> {
    let spec: &SequenceSpec = &episode.spec;
    episode
        .frames
        .iter()
        .rev()
        .find_map(|f| f.object_center)
        .unwrap_or(PixelPoint::new(spec.image_width / 2.0, spec.image_height / 2.0))
}
