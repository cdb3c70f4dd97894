//! Trajectory errors and saliency scores for hotspot maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{HandTrajectory, PixelPoint, Side};
use crate::inference::PredictionCandidate;

/// Non-negative map over a `width x height` pixel grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::validation(format!(
                "{} cells for a {width}x{height} map",
                data.len()
            )));
        }
        if data.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::validation("saliency values must be finite and non-negative"));
        }
        Ok(Self { width, height, data })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .data
            .iter()
            .enumerate()
            .fold(0, |best, (i, &x)| if x > self.data[best] { i } else { best });
        (i % self.width, i / self.width)
    }

    fn normalized(&self) -> Result<Vec<f64>> {
        let s = self.sum();
        if !(s > 0.0) {
            return Err(Error::validation("all-zero saliency map"));
        }
        Ok(self.data.iter().map(|x| x / s).collect())
    }
}

/// Integer pixel locations of ground-truth contacts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixationSet {
    pub points: Vec<(usize, usize)>,
}

impl FixationSet {
    pub fn new(points: Vec<(usize, usize)>, width: usize, height: usize) -> Result<Self> {
        if points.iter().any(|&(x, y)| x >= width || y >= height) {
            return Err(Error::validation("fixation outside the image"));
        }
        Ok(Self { points })
    }

    /// Rounds each point to the nearest pixel, clamped into the image.
    pub fn from_points(points: &[PixelPoint<f64>], width: usize, height: usize) -> Self {
        let snap = |x: f64, n: usize| (x.round().max(0.0) as usize).min(n - 1);
        Self {
            points: points.iter().map(|p| (snap(p.u, width), snap(p.v, height))).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn dist(a: PixelPoint<f64>, b: PixelPoint<f64>) -> f64 {
    (a.u - b.u).hypot(a.v - b.v)
}

/// Final-waypoint error; `None` when either final waypoint is invalid.
pub fn fde(traj: &HandTrajectory<f64>, gt: &HandTrajectory<f64>) -> Option<f64> {
    let (i, j) = (traj.len().checked_sub(1)?, gt.len().checked_sub(1)?);
    if !(traj.valid[i] && gt.valid[j]) {
        return None;
    }
    Some(dist(traj.waypoints[i], gt.waypoints[j]))
}

/// Time-weighted displacement error of one candidate over the sides present
/// in both `pred` and `gt`; normalized by the number of such sides.
pub fn wde_single(pred: &[HandTrajectory<f64>], gt: &[HandTrajectory<f64>]) -> Option<f64> {
    let mut total = 0.0;
    let mut sides = 0;
    for g in gt {
        let Some(p) = pred.iter().find(|p| p.side == g.side) else {
            continue;
        };
        let n = g.len().min(p.len());
        if n == 0 {
            continue;
        }
        let nf = g.len() as f64;
        total += (0..n)
            .filter(|&t| g.valid[t] && p.valid[t])
            .map(|t| (t + 1) as f64 / nf * dist(p.waypoints[t], g.waypoints[t]))
            .sum::<f64>()
            / nf;
        sides += 1;
    }
    (sides > 0).then(|| total / sides as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateError {
    pub mean: f64,
    pub min: f64,
}

/// WDE averaged over candidates, with the best candidate alongside.
pub fn wde(candidates: &[Vec<HandTrajectory<f64>>], gt: &[HandTrajectory<f64>]) -> Option<CandidateError> {
    let per: Vec<f64> = candidates.iter().filter_map(|c| wde_single(c, gt)).collect();
    aggregate(&per)
}

/// FDE averaged over sides, then over candidates.
pub fn fde_candidates(candidates: &[Vec<HandTrajectory<f64>>], gt: &[HandTrajectory<f64>]) -> Option<CandidateError> {
    let per: Vec<f64> = candidates
        .iter()
        .filter_map(|c| {
            let errs: Vec<f64> = gt
                .iter()
                .filter_map(|g| fde(c.iter().find(|p| p.side == g.side)?, g))
                .collect();
            (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
        })
        .collect();
    aggregate(&per)
}

fn aggregate(per: &[f64]) -> Option<CandidateError> {
    if per.is_empty() {
        return None;
    }
    Some(CandidateError {
        mean: per.iter().sum::<f64>() / per.len() as f64,
        min: per.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// Normalized sum of isotropic Gaussians centred on `points`.
pub fn build_hotspot(points: &[PixelPoint<f64>], sigma: f64, width: usize, height: usize) -> Result<SaliencyMap> {
    if !(sigma > 0.0) {
        return Err(Error::validation("hotspot sigma must be positive"));
    }
    let k = -0.5 / (sigma * sigma);
    let mut data = vec![0.0; width * height];
    for p in points {
        let gx: Vec<f64> = (0..width).map(|x| (k * (x as f64 - p.u).powi(2)).exp()).collect();
        for y in 0..height {
            let gy = (k * (y as f64 - p.v).powi(2)).exp();
            if gy == 0.0 {
                continue;
            }
            for (cell, g) in data[y * width..(y + 1) * width].iter_mut().zip(&gx) {
                *cell += gy * g;
            }
        }
    }
    let total: f64 = data.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("hotspot has no mass inside the image".into()));
    }
    data.iter_mut().for_each(|x| *x /= total);
    SaliencyMap::new(width, height, data)
}

fn check_grid(p: &SaliencyMap, q: &SaliencyMap) -> Result<()> {
    if (p.width, p.height) != (q.width, q.height) {
        return Err(Error::validation("saliency maps differ in size"));
    }
    Ok(())
}

/// Histogram intersection of the two normalized maps.
pub fn sim(p: &SaliencyMap, q: &SaliencyMap) -> Result<f64> {
    check_grid(p, q)?;
    let (p, q) = (p.normalized()?, q.normalized()?);
    Ok(p.iter().zip(&q).map(|(a, b)| a.min(*b)).sum())
}

/// Judd ROC area with one threshold per distinct fixation value.
pub fn auc_judd(map: &SaliencyMap, fix: &FixationSet) -> Result<f64> {
    if fix.is_empty() {
        return Err(Error::validation("no fixations"));
    }
    let mut is_fix = vec![false; map.data.len()];
    for &(x, y) in &fix.points {
        is_fix[y * map.width + x] = true;
    }
    let n_fix_pixels = is_fix.iter().filter(|&&f| f).count();
    let n_other = map.data.len() - n_fix_pixels;
    let mut other: Vec<f64> = map
        .data
        .iter()
        .zip(&is_fix)
        .filter(|(_, &f)| !f)
        .map(|(&s, _)| s)
        .collect();
    other.sort_by(|a, b| b.total_cmp(a));
    let mut fixed: Vec<f64> = fix.points.iter().map(|&(x, y)| map.at(x, y)).collect();
    fixed.sort_by(|a, b| b.total_cmp(a));
    let mut thresholds = fixed.clone();
    thresholds.dedup();

    let n = fixed.len() as f64;
    let mut curve = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let hits = fixed.partition_point(|&s| s >= t);
        let above = other.partition_point(|&s| s >= t);
        let fp = if n_other == 0 { 0.0 } else { above as f64 / n_other as f64 };
        curve.push((fp, hits as f64 / n));
    }
    curve.push((1.0, 1.0));
    Ok(curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum())
}

/// Mean z-scored saliency at the fixations.
pub fn nss(map: &SaliencyMap, fix: &FixationSet) -> Result<f64> {
    if fix.is_empty() {
        return Err(Error::validation("no fixations"));
    }
    let n = map.data.len() as f64;
    let mean = map.sum() / n;
    let var = map.data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs()) || std == 0.0 {
        return Err(Error::validation("saliency map has zero variance"));
    }
    Ok(fix.points.iter().map(|&(x, y)| (map.at(x, y) - mean) / std).sum::<f64>() / fix.points.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaliencyScores {
    pub sim: f64,
    pub auc_j: f64,
    pub nss: f64,
}

/// Ground truth for hotspot scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct HotspotTruth {
    pub map: SaliencyMap,
    pub fixations: FixationSet,
}

impl HotspotTruth {
    pub fn new(contacts: &[PixelPoint<f64>], sigma: f64, width: usize, height: usize) -> Result<Self> {
        if contacts.is_empty() {
            return Err(Error::validation("no ground-truth contacts"));
        }
        Ok(Self {
            map: build_hotspot(contacts, sigma, width, height)?,
            fixations: FixationSet::from_points(contacts, width, height),
        })
    }
}

/// SIM against the blurred ground-truth map; AUC-J and NSS against fixations.
pub fn score_hotspot(points: &[PixelPoint<f64>], sigma: f64, truth: &HotspotTruth) -> Result<SaliencyScores> {
    let map = build_hotspot(points, sigma, truth.map.width, truth.map.height)?;
    score_map(&map, truth)
}

pub fn score_map(map: &SaliencyMap, truth: &HotspotTruth) -> Result<SaliencyScores> {
    Ok(SaliencyScores {
        sim: sim(map, &truth.map)?,
        auc_j: auc_judd(map, &truth.fixations)?,
        nss: nss(map, &truth.fixations)?,
    })
}

/// Every contact of every candidate and side.
pub fn contact_union(candidates: &[PredictionCandidate]) -> Vec<PixelPoint<f64>> {
    candidates
        .iter()
        .flat_map(|c| c.sides.iter().flat_map(|s| s.contacts.points.iter().copied()))
        .collect()
}

/// Per-side waypoints averaged over candidates.
pub fn averaged_waypoints(candidates: &[PredictionCandidate]) -> Vec<(Side, Vec<PixelPoint<f64>>)> {
    let mut out: Vec<(Side, Vec<PixelPoint<f64>>, usize)> = Vec::new();
    for c in candidates {
        for s in &c.sides {
            let entry = match out.iter_mut().position(|(side, _, _)| *side == s.side) {
                Some(i) => &mut out[i],
                None => {
                    out.push((s.side, vec![PixelPoint::new(0.0, 0.0); s.trajectory.len()], 0));
                    out.last_mut().expect("just pushed")
                }
            };
            for (acc, p) in entry.1.iter_mut().zip(&s.trajectory.waypoints) {
                acc.u += p.u;
                acc.v += p.v;
            }
            entry.2 += 1;
        }
    }
    out.into_iter()
        .map(|(side, pts, n)| {
            let k = n as f64;
            (side, pts.into_iter().map(|p| PixelPoint::new(p.u / k, p.v / k)).collect())
        })
        .collect()
}

/// For each contact, the averaged waypoint of its own side closest to it.
pub fn nearest_waypoints(candidates: &[PredictionCandidate]) -> Vec<PixelPoint<f64>> {
    let means = averaged_waypoints(candidates);
    let mut out = Vec::new();
    for c in candidates {
        for s in &c.sides {
            let Some((_, path)) = means.iter().find(|(side, _)| *side == s.side) else {
                continue;
            };
            for &o in &s.contacts.points {
                let best = path
                    .iter()
                    .copied()
                    .min_by(|a, b| dist(*a, o).total_cmp(&dist(*b, o)));
                out.extend(best);
            }
        }
    }
    out
}

/// Hotspot scores after adding, for each contact, its nearest averaged
/// waypoint as an extra contact point.
pub fn joint_protocol(candidates: &[PredictionCandidate], sigma: f64, truth: &HotspotTruth) -> Result<SaliencyScores> {
    let mut points = contact_union(candidates);
    points.extend(nearest_waypoints(candidates));
    score_hotspot(&points, sigma, truth)
}

/// Plain hotspot built from every predicted contact.
pub fn candidate_hotspot(candidates: &[PredictionCandidate], sigma: f64, width: usize, height: usize) -> Result<SaliencyMap> {
    build_hotspot(&contact_union(candidates), sigma, width, height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ContactPointSet;
    use crate::inference::SidePrediction;
    use proptest::prelude::*;

    fn traj(points: &[(f64, f64)]) -> HandTrajectory<f64> {
        HandTrajectory::new(Side::Right, points.iter().map(|&(u, v)| PixelPoint::new(u, v)).collect())
    }

    #[test]
    fn fde_examples() {
        let gt = traj(&[(0.0, 0.0), (10.0, 10.0)]);
        assert_eq!(fde(&gt, &gt), Some(0.0));
        let p = traj(&[(99.0, -7.0), (13.0, 14.0)]);
        assert_eq!(fde(&p, &gt), Some(5.0));
        let mut hidden = gt.clone();
        hidden.valid[1] = false;
        assert_eq!(fde(&p, &hidden), None);
        let (a, b) = (traj(&[(0.3, 1.7), (2.25, -4.5)]), traj(&[(5.0, 5.0), (-1.5, 3.0)]));
        let want = ((2.25f64 + 1.5).powi(2) + (-4.5f64 - 3.0).powi(2)).sqrt();
        assert!((fde(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn wde_examples() {
        let gt = traj(&[(0.0, 0.0), (0.0, 0.0)]);
        let p = traj(&[(1.0, 0.0), (0.0, 2.0)]);
        assert_eq!(wde_single(&[p.clone()], &[gt.clone()]), Some(1.25));
        assert_eq!(wde_single(&[gt.clone()], &[gt.clone()]), Some(0.0));
        let w = wde(&[vec![p.clone()], vec![p.clone()]], &[gt.clone()]).unwrap();
        assert_eq!((w.mean, w.min), (1.25, 1.25));
        let w = wde(&[vec![p.clone()], vec![gt.clone()]], &[gt.clone()]).unwrap();
        assert_eq!((w.mean, w.min), (0.625, 0.0));

        // two sides: the right error halves
        let mut left = gt.clone();
        left.side = Side::Left;
        assert_eq!(wde_single(&[p, left.clone()], &[gt.clone(), left.clone()]), Some(0.625));
        assert_eq!(wde_single(&[left], &[gt]), None);
    }

    #[test]
    fn hotspot_examples() {
        let m = build_hotspot(&[PixelPoint::new(10.0, 20.0)], 3.0, 32, 40).unwrap();
        assert_eq!(m.argmax(), (10, 20));
        assert!((m.sum() - 1.0).abs() < 1e-9);
        let a = PixelPoint::new(5.0, 6.0);
        let b = PixelPoint::new(25.3, 11.8);
        let both = build_hotspot(&[a, b], 3.0, 32, 40).unwrap();
        let raw = |p: PixelPoint<f64>| {
            let mut v = vec![0.0; 32 * 40];
            for y in 0..40 {
                for x in 0..32 {
                    v[y * 32 + x] = (-((x as f64 - p.u).powi(2) + (y as f64 - p.v).powi(2)) / 18.0).exp();
                }
            }
            v
        };
        let (ra, rb) = (raw(a), raw(b));
        let total: f64 = ra.iter().chain(&rb).sum();
        for i in 0..both.data.len() {
            assert!((both.data[i] - (ra[i] + rb[i]) / total).abs() < 1e-12);
        }
        assert!(build_hotspot(&[a], 0.0, 4, 4).is_err());
        // off-image point keeps its in-frame tail
        let off = build_hotspot(&[PixelPoint::new(-3.0, 2.0)], 3.0, 8, 8).unwrap();
        assert_eq!(off.argmax(), (0, 2));
    }

    #[test]
    fn sim_examples() {
        let m = build_hotspot(&[PixelPoint::new(3.0, 3.0)], 2.0, 8, 8).unwrap();
        assert!((sim(&m, &m).unwrap() - 1.0).abs() < 1e-12);
        let p = SaliencyMap::new(2, 2, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let q = SaliencyMap::new(2, 2, vec![0.25; 4]).unwrap();
        assert!((sim(&p, &q).unwrap() - 0.5).abs() < 1e-15);
        let r = SaliencyMap::new(2, 2, vec![0.0, 0.0, 1.0, 3.0]).unwrap();
        assert_eq!(sim(&p, &r).unwrap(), 0.0);
        let z = SaliencyMap::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(sim(&p, &z).is_err());
    }

    /// Threshold enumeration over every distinct map value.
    fn auc_brute(map: &SaliencyMap, fix: &FixationSet) -> f64 {
        let fixed: Vec<usize> = fix.points.iter().map(|&(x, y)| y * map.width + x).collect();
        let others: Vec<f64> = (0..map.data.len())
            .filter(|i| !fixed.contains(i))
            .map(|i| map.data[i])
            .collect();
        let values: Vec<f64> = fixed.iter().map(|&i| map.data[i]).collect();
        let mut ts = values.clone();
        ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
        ts.dedup();
        let mut pts = vec![(0.0, 0.0)];
        for t in &ts {
            let fp = others.iter().filter(|&&s| s >= *t).count() as f64 / others.len() as f64;
            let tp = values.iter().filter(|&&s| s >= *t).count() as f64 / values.len() as f64;
            pts.push((fp, tp));
        }
        pts.push((1.0, 1.0));
        let mut area = 0.0;
        for w in pts.windows(2) {
            area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5;
        }
        area
    }

    #[test]
    fn auc_examples() {
        let c = SaliencyMap::new(16, 16, vec![0.3; 256]).unwrap();
        let fix = FixationSet::new(vec![(2, 3), (9, 9)], 16, 16).unwrap();
        assert!((auc_judd(&c, &fix).unwrap() - 0.5).abs() <= 1.0 / 256.0);

        let mut peak = vec![0.0; 256];
        peak[3 * 16 + 2] = 1.0;
        peak[9 * 16 + 9] = 1.0;
        let m = SaliencyMap::new(16, 16, peak).unwrap();
        assert!((auc_judd(&m, &fix).unwrap() - 1.0).abs() <= 1.0 / 256.0);

        let m = SaliencyMap::new(3, 3, vec![0.1, 0.7, 0.2, 0.4, 0.05, 0.9, 0.3, 0.6, 0.8]).unwrap();
        let f = FixationSet::new(vec![(0, 1)], 3, 3).unwrap();
        assert!((auc_judd(&m, &f).unwrap() - auc_brute(&m, &f)).abs() < 1e-12);
        assert!(auc_judd(&m, &FixationSet { points: vec![] }).is_err());
    }

    #[test]
    fn nss_examples() {
        // two-level map: one cell at 1, fifteen at 0
        let mut v = vec![0.0; 16];
        v[5] = 1.0;
        let m = SaliencyMap::new(4, 4, v).unwrap();
        let f = FixationSet::new(vec![(1, 1)], 4, 4).unwrap();
        let mean: f64 = 1.0 / 16.0;
        let std = ((1.0 - mean).powi(2) / 16.0 + 15.0 * mean * mean / 16.0).sqrt();
        assert!((nss(&m, &f).unwrap() - (1.0 - mean) / std).abs() < 1e-12);

        let all = FixationSet::new((0..4).flat_map(|y| (0..4).map(move |x| (x, y))).collect(), 4, 4).unwrap();
        assert!(nss(&m, &all).unwrap().abs() < 1e-12);
        assert!(nss(&SaliencyMap::new(2, 2, vec![1.0; 4]).unwrap(), &f.clone()).is_err());
    }

    fn candidate(index: usize, path: &[(f64, f64)], contacts: &[(f64, f64)]) -> PredictionCandidate {
        PredictionCandidate {
            index,
            seed: 0,
            sides: vec![SidePrediction {
                side: Side::Right,
                trajectory: traj(path),
                contacts: ContactPointSet {
                    points: contacts.iter().map(|&(u, v)| PixelPoint::new(u, v)).collect(),
                },
            }],
        }
    }

    #[test]
    fn joint_protocol_examples() {
        let mirror = [
            candidate(0, &[(0.0, 0.0), (2.0, 4.0)], &[]),
            candidate(1, &[(4.0, 0.0), (6.0, -4.0)], &[]),
        ];
        let avg = averaged_waypoints(&mirror);
        assert_eq!(avg[0].1, vec![PixelPoint::new(2.0, 0.0), PixelPoint::new(4.0, 0.0)]);

        let cands = [
            candidate(0, &[(0.0, 0.0), (10.0, 0.0), (20.0, 0.0)], &[(9.0, 8.0)]),
            candidate(1, &[(0.0, 10.0), (10.0, 10.0), (30.0, 10.0)], &[(26.0, 4.0)]),
        ];
        let mean = [(0.0, 5.0), (10.0, 5.0), (25.0, 5.0)];
        let brute: Vec<PixelPoint<f64>> = [(9.0, 8.0), (26.0, 4.0)]
            .iter()
            .map(|&(u, v): &(f64, f64)| {
                let mut best = (f64::INFINITY, PixelPoint::new(0.0, 0.0));
                for &(a, b) in &mean {
                    let d = (a - u).hypot(b - v);
                    if d < best.0 {
                        best = (d, PixelPoint::new(a, b));
                    }
                }
                best.1
            })
            .collect();
        assert_eq!(nearest_waypoints(&cands), brute);

        // identical candidates with contacts at the truth, nothing appended
        let gt = PixelPoint::new(16.0, 12.0);
        let truth = HotspotTruth::new(&[gt], 3.0, 32, 32).unwrap();
        let at_truth = [candidate(0, &[], &[(16.0, 12.0)]), candidate(1, &[], &[(16.0, 12.0)])];
        let s = joint_protocol(&at_truth, 3.0, &truth).unwrap();
        assert!((s.sim - 1.0).abs() < 1e-12);
        assert_eq!(s, score_hotspot(&contact_union(&at_truth), 3.0, &truth).unwrap());
    }

    proptest! {
        #[test]
        fn sim_symmetric_and_bounded(a in proptest::collection::vec(0.0f64..1.0, 16), b in proptest::collection::vec(0.0f64..1.0, 16)) {
            prop_assume!(a.iter().sum::<f64>() > 0.0 && b.iter().sum::<f64>() > 0.0);
            let (p, q) = (SaliencyMap::new(4, 4, a).unwrap(), SaliencyMap::new(4, 4, b).unwrap());
            let s = sim(&p, &q).unwrap();
            prop_assert!((s - sim(&q, &p).unwrap()).abs() < 1e-12);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&s));
        }

        #[test]
        fn auc_bounded_and_monotone_invariant(v in proptest::collection::vec(0.0f64..1.0, 25), fx in 0usize..5, fy in 0usize..5, gx in 0usize..5) {
            let m = SaliencyMap::new(5, 5, v.clone()).unwrap();
            let f = FixationSet::new(vec![(fx, fy), (gx, fy)], 5, 5).unwrap();
            let a = auc_judd(&m, &f).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - auc_brute(&m, &f)).abs() < 1e-12);
            let t = SaliencyMap::new(5, 5, v.iter().map(|x| (3.0 * x).exp() + 2.0).collect()).unwrap();
            prop_assert!((a - auc_judd(&t, &f).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn nss_affine_invariant(v in proptest::collection::vec(0.0f64..1.0, 16), scale in 0.01f64..100.0, shift in -5.0f64..5.0, fx in 0usize..4, fy in 0usize..4) {
            let m = SaliencyMap::new(4, 4, v.clone()).unwrap();
            let f = FixationSet::new(vec![(fx, fy)], 4, 4).unwrap();
            prop_assume!(nss(&m, &f).is_ok());
            let shifted: Vec<f64> = v.iter().map(|x| scale * x + shift + 5.0).collect();
            let t = SaliencyMap::new(4, 4, shifted).unwrap();
            prop_assert!((nss(&m, &f).unwrap() - nss(&t, &f).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn wde_scales_linearly(errs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 4), k in 0.1f64..10.0) {
            let gt = traj(&[(1.0, 2.0), (3.0, 4.0), (5.0, 6.0), (7.0, 8.0)]);
            let shift = |s: f64| HandTrajectory::new(Side::Right, gt.waypoints.iter().zip(&errs).map(|(p, e)| PixelPoint::new(p.u + s * e.0, p.v + s * e.1)).collect());
            let a = wde_single(&[shift(1.0)], &[gt.clone()]).unwrap();
            let b = wde_single(&[shift(k)], &[gt.clone()]).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((b - k * a).abs() <= 1e-9 * (1.0 + b));
        }
    }
}
