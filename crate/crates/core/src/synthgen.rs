//! Synthetic egocentric hand-object episodes with exact ground truth.
//!
//! A pinhole camera hovers over a planar desk and drifts smoothly. Hands
//! slide along the desk (optionally at a fixed height above it) towards
//! plane-anchored objects following a minimum-jerk profile. Because every
//! tracked point is on the plane, the inter-frame homographies transport them
//! exactly, which gives the estimation and forecasting code a clean oracle.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    mat3_det, mat3_inverse, mat3_mul, mat3_transpose, mat3_vec, vec3_add, vec3_dot, vec3_scale,
    vec3_sub, CameraIntrinsics, Mat3, PixelPoint, SequenceSpec, Side, Vec3, HandTrajectory,
};
use crate::homography::{project_point, Homography, HomographyStack};

/// World-to-camera rigid transform: `x_cam = rotation · x_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePose {
    pub rotation: Mat3<f64>,
    pub translation: Vec3<f64>,
}

impl ScenePose {
    pub fn new(rotation: Mat3<f64>, translation: Vec3<f64>) -> Result<Self> {
        let rtr = mat3_mul(&mat3_transpose(&rotation), &rotation);
        for (i, row) in rtr.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                let e = if i == j { 1.0 } else { 0.0 };
                if (x - e).abs() > 1e-9 {
                    return Err(Error::validation("rotation is not orthonormal"));
                }
            }
        }
        if (mat3_det(&rotation) - 1.0).abs() > 1e-9 {
            return Err(Error::validation("rotation has determinant != 1"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn transform(&self, x: Vec3<f64>) -> Vec3<f64> {
        vec3_add(mat3_vec(&self.rotation, &x), self.translation)
    }

    /// Maps plane coordinates `(x, y)` of the world plane `z = 0` to pixels.
    pub fn plane_to_image(&self, k: &CameraIntrinsics) -> Mat3<f64> {
        let r = &self.rotation;
        let t = &self.translation;
        let m = [
            [r[0][0], r[0][1], t[0]],
            [r[1][0], r[1][1], t[1]],
            [r[2][0], r[2][1], t[2]],
        ];
        mat3_mul(&k.matrix(), &m)
    }

    /// Normal and distance of the world plane `z = 0` in this camera's frame,
    /// oriented so that the distance is non-negative.
    pub fn ground_plane(&self) -> (Vec3<f64>, f64) {
        let r = &self.rotation;
        let n = [r[0][2], r[1][2], r[2][2]];
        let d = vec3_dot(n, self.translation);
        // plane points satisfy n·x_cam = d
        if d < 0.0 {
            (vec3_scale(n, -1.0), -d)
        } else {
            (n, d)
        }
    }
}

fn rot_x(a: f64) -> Mat3<f64> {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3<f64> {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3<f64> {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Quintic minimum-jerk interpolation from `start` to `goal`.
pub fn minimum_jerk_path(start: Vec3<f64>, goal: Vec3<f64>, n_steps: usize) -> Result<Vec<Vec3<f64>>> {
    if n_steps < 2 {
        return Err(Error::validation("minimum_jerk_path needs at least 2 steps"));
    }
    Ok((0..n_steps)
        .map(|i| {
            let tau = i as f64 / (n_steps - 1) as f64;
            minimum_jerk_at(start, goal, tau)
        })
        .collect())
}

fn minimum_jerk_at(start: Vec3<f64>, goal: Vec3<f64>, tau: f64) -> Vec3<f64> {
    if tau <= 0.0 {
        return start;
    }
    if tau >= 1.0 {
        return goal;
    }
    let s = tau.powi(3) * (10.0 - 15.0 * tau + 6.0 * tau * tau);
    vec3_add(start, vec3_scale(vec3_sub(goal, start), s))
}

/// Exact homography taking camera-`t` pixels of a plane to camera-`0` pixels.
///
/// `plane_normal` and `plane_depth` describe the plane in camera `t`'s frame:
/// plane points satisfy `n · x = d`.
pub fn planar_homography(
    pose_t: &ScenePose,
    pose_0: &ScenePose,
    plane_normal: Vec3<f64>,
    plane_depth: f64,
    k: &CameraIntrinsics,
) -> Result<Homography<f64>> {
    if !(plane_depth > 0.0) || plane_normal[2] <= 0.0 {
        return Err(Error::Degenerate("plane is behind the camera".into()));
    }
    // relative pose from camera t to camera 0
    let rel_r = mat3_mul(&pose_0.rotation, &mat3_transpose(&pose_t.rotation));
    let rel_t = vec3_sub(pose_0.translation, mat3_vec(&rel_r, &pose_t.translation));
    let mut a = rel_r;
    for (i, row) in a.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x += rel_t[i] * plane_normal[j] / plane_depth;
        }
    }
    let h = mat3_mul(&mat3_mul(&k.matrix(), &a), &k.inverse());
    Homography::new(h)
}

/// Fills gaps with cubic Hermite segments whose tangents are finite
/// differences of the neighbouring known points (Catmull–Rom style, on the
/// frame-index grid). Gaps before the first or after the last known point
/// are extrapolated along the end tangent.
pub fn hermite_fill(waypoints: &[Option<PixelPoint<f64>>]) -> Result<Vec<PixelPoint<f64>>> {
    let known: Vec<usize> = waypoints
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|_| i))
        .collect();
    if known.len() < 2 {
        return Err(Error::validation(format!(
            "hermite_fill needs 2 known waypoints, got {}",
            known.len()
        )));
    }
    let pt = |i: usize| waypoints[i].expect("known index");
    let tangent = |j: usize| -> (f64, f64) {
        let (a, b) = if j == 0 {
            (known[0], known[1])
        } else if j == known.len() - 1 {
            (known[j - 1], known[j])
        } else {
            (known[j - 1], known[j + 1])
        };
        let (pa, pb) = (pt(a), pt(b));
        let h = (b - a) as f64;
        ((pb.u - pa.u) / h, (pb.v - pa.v) / h)
    };
    let mut out = Vec::with_capacity(waypoints.len());
    for (i, p) in waypoints.iter().enumerate() {
        if let Some(p) = p {
            out.push(*p);
            continue;
        }
        let next = known.partition_point(|&k| k < i);
        let filled = if next == 0 {
            let (mu, mv) = tangent(0);
            let p0 = pt(known[0]);
            let dt = i as f64 - known[0] as f64;
            PixelPoint::new(p0.u + mu * dt, p0.v + mv * dt)
        } else if next == known.len() {
            let j = known.len() - 1;
            let (mu, mv) = tangent(j);
            let p1 = pt(known[j]);
            let dt = i as f64 - known[j] as f64;
            PixelPoint::new(p1.u + mu * dt, p1.v + mv * dt)
        } else {
            let (j0, j1) = (next - 1, next);
            let (k0, k1) = (known[j0], known[j1]);
            let h = (k1 - k0) as f64;
            let s = (i - k0) as f64 / h;
            let (h00, h10, h01, h11) = (
                2.0 * s.powi(3) - 3.0 * s * s + 1.0,
                s.powi(3) - 2.0 * s * s + s,
                -2.0 * s.powi(3) + 3.0 * s * s,
                s.powi(3) - s * s,
            );
            let (p0, p1) = (pt(k0), pt(k1));
            let (m0, m1) = (tangent(j0), tangent(j1));
            PixelPoint::new(
                h00 * p0.u + h10 * h * m0.0 + h01 * p1.u + h11 * h * m1.0,
                h00 * p0.v + h10 * h * m0.1 + h01 * p1.v + h11 * h * m1.1,
            )
        };
        out.push(filled);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ActiveSide {
    Right,
    Left,
    Both,
}

impl ActiveSide {
    pub fn sides(self) -> &'static [Side] {
        match self {
            ActiveSide::Right => &[Side::Right],
            ActiveSide::Left => &[Side::Left],
            ActiveSide::Both => &Side::BOTH,
        }
    }

    pub fn contains(self, side: Side) -> bool {
        self.sides().contains(&side)
    }
}

/// Generator knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Difficulty {
    /// Camera drift speed in metres per frame.
    pub camera_speed: f64,
    /// Amplitude of the smooth camera wobble, metres.
    pub camera_wobble: f64,
    /// Angular drift in radians per frame (yaw, pitch, roll).
    pub camera_turn: f64,
    pub camera_height: f64,
    pub focal_px: f64,
    pub corr_noise_px: f64,
    pub outlier_fraction: f64,
    pub n_correspondences: usize,
    /// Hand height above the desk plane, metres. Non-zero breaks the exact
    /// homography transport of hand points.
    pub hand_height: f64,
    /// Per-frame probability that a visible hand is dropped.
    pub dropout: f64,
    pub obs_noise_px: f64,
    pub n_objects: usize,
    /// Half-width of the square the objects are scattered over, as a fraction
    /// of the half view.
    pub object_spread: f64,
    /// Minimum distance between objects, as a fraction of the half view.
    pub object_separation: f64,
    /// Probability that the reported object is the reach target rather than
    /// a distractor.
    pub detect_target_prob: f64,
    /// Maximum shift, in frames, of the reach relative to the horizon.
    pub reach_jitter: usize,
    pub global_dims: usize,
    pub p_right: f64,
    pub p_left: f64,
}

impl Default for Difficulty {
    fn default() -> Self {
        Self {
            camera_speed: 0.012,
            camera_wobble: 0.01,
            camera_turn: 0.008,
            camera_height: 0.6,
            focal_px: 110.0,
            corr_noise_px: 0.5,
            outlier_fraction: 0.3,
            n_correspondences: 40,
            hand_height: 0.0,
            dropout: 0.2,
            obs_noise_px: 0.5,
            n_objects: 4,
            object_spread: 0.9,
            object_separation: 0.8,
            detect_target_prob: 0.25,
            reach_jitter: 2,
            global_dims: 8,
            p_right: 0.45,
            p_left: 0.25,
        }
    }
}

impl Difficulty {
    /// Static camera and noise-free measurements.
    pub fn clean() -> Self {
        Self {
            camera_speed: 0.0,
            camera_wobble: 0.0,
            camera_turn: 0.0,
            corr_noise_px: 0.0,
            outlier_fraction: 0.0,
            dropout: 0.0,
            obs_noise_px: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(unit(self.outlier_fraction) && unit(self.dropout) && unit(self.detect_target_prob)) {
            return Err(Error::validation("probabilities must lie in [0, 1]"));
        }
        if !(unit(self.p_right) && unit(self.p_left) && self.p_right + self.p_left <= 1.0) {
            return Err(Error::validation("side probabilities must sum to at most 1"));
        }
        if self.n_correspondences < 8 {
            return Err(Error::validation("need at least 8 correspondences per frame pair"));
        }
        if !(self.object_spread > 0.0 && self.object_spread <= 1.0 && self.object_separation >= 0.0) {
            return Err(Error::validation("object spread must lie in (0, 1] and separation be non-negative"));
        }
        if self.n_objects < 2 {
            return Err(Error::validation("need at least 2 objects"));
        }
        if !(self.camera_height > self.hand_height && self.focal_px > 0.0) {
            return Err(Error::validation("camera must be above the hands"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub right: Option<PixelPoint<f64>>,
    pub left: Option<PixelPoint<f64>>,
    pub object_center: Option<PixelPoint<f64>>,
    pub global_context: Vec<f64>,
    pub valid_right: bool,
    pub valid_left: bool,
}

impl FrameObservation {
    pub fn hand(&self, side: Side) -> Option<PixelPoint<f64>> {
        match side {
            Side::Right => self.right,
            Side::Left => self.left,
        }
    }

    pub fn valid(&self, side: Side) -> bool {
        match side {
            Side::Right => self.valid_right,
            Side::Left => self.valid_left,
        }
    }

    fn check(&self) -> Result<()> {
        if self.right.is_some() != self.valid_right || self.left.is_some() != self.valid_left {
            return Err(Error::validation("hand presence disagrees with valid flag"));
        }
        Ok(())
    }
}

/// Point match between two adjacent past frames, serialized as `[u0, v0, u1, v1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Correspondence {
    pub src: PixelPoint<f64>,
    pub dst: PixelPoint<f64>,
}

impl From<[f64; 4]> for Correspondence {
    fn from(a: [f64; 4]) -> Self {
        Self {
            src: PixelPoint::new(a[0], a[1]),
            dst: PixelPoint::new(a[2], a[3]),
        }
    }
}

impl From<Correspondence> for [f64; 4] {
    fn from(c: Correspondence) -> Self {
        [c.src.u, c.src.v, c.dst.u, c.dst.v]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideTruth {
    /// Future waypoints on the canvas, gaps already Hermite-filled.
    pub trajectory: HandTrajectory<f64>,
    /// Which future waypoints were filled rather than observed.
    pub filled: Vec<bool>,
    pub contact_point: PixelPoint<f64>,
    /// Observed past hand centres transported onto the canvas.
    pub past_canvas: Vec<Option<PixelPoint<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub active_side: ActiveSide,
    pub right: Option<SideTruth>,
    pub left: Option<SideTruth>,
    /// Exact past-frame-to-canvas maps.
    pub homographies: HomographyStack<f64>,
    /// Per adjacent pair, which correspondences are synthetic outliers.
    pub outliers: Vec<Vec<bool>>,
    pub detected_is_target: bool,
}

impl GroundTruth {
    pub fn side(&self, side: Side) -> Option<&SideTruth> {
        match side {
            Side::Right => self.right.as_ref(),
            Side::Left => self.left.as_ref(),
        }
    }

    pub fn contact_points(&self) -> Vec<PixelPoint<f64>> {
        Side::BOTH
            .iter()
            .filter_map(|&s| self.side(s).map(|t| t.contact_point))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSequence {
    pub seed: u64,
    pub spec: SequenceSpec,
    pub frames: Vec<FrameObservation>,
    pub correspondences: Vec<Vec<Correspondence>>,
    pub gt: GroundTruth,
}

impl ObservationSequence {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.frames.len() != self.spec.n_past {
            return Err(Error::validation(format!(
                "{} frames for n_past = {}",
                self.frames.len(),
                self.spec.n_past
            )));
        }
        if self.correspondences.len() != self.spec.n_past - 1 {
            return Err(Error::validation("need one correspondence list per adjacent pair"));
        }
        if self.gt.homographies.len() != self.spec.n_past {
            return Err(Error::validation("homography stack length differs from n_past"));
        }
        for f in &self.frames {
            f.check()?;
        }
        for side in Side::BOTH {
            if let Some(t) = self.gt.side(side) {
                t.trajectory.check_len(self.spec.n_future)?;
            }
        }
        Ok(())
    }

    /// Sides with ground truth and at least one visible past frame.
    pub fn valid_sides(&self) -> Vec<Side> {
        Side::BOTH
            .into_iter()
            .filter(|&s| self.gt.side(s).is_some() && self.frames.iter().any(|f| f.valid(s)))
            .collect()
    }

    pub fn adjacent_pairs(&self, index: usize) -> Vec<(PixelPoint<f64>, PixelPoint<f64>)> {
        self.correspondences[index]
            .iter()
            .map(|c| (c.src, c.dst))
            .collect()
    }
}

/// World-state of a simulated clip, shared by every window cut from it.
struct Simulation {
    k: CameraIntrinsics,
    poses: Vec<ScenePose>,
    hands: [Option<Vec<Vec3<f64>>>; 2],
    targets: [Option<Vec3<f64>>; 2],
    detected: Vec3<f64>,
    detected_is_target: bool,
    active: ActiveSide,
    hand_drop: [Vec<bool>; 2],
    hand_noise: [Vec<PixelPoint<f64>>; 2],
    object_noise: Vec<PixelPoint<f64>>,
    global: Vec<Vec<f64>>,
    correspondences: Vec<Vec<Correspondence>>,
    outliers: Vec<Vec<bool>>,
}

fn simulate(
    spec: &SequenceSpec,
    diff: &Difficulty,
    n_frames: usize,
    reach_offset: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Simulation> {
    let (w, h) = (spec.image_width, spec.image_height);
    let k = CameraIntrinsics::new(diff.focal_px, diff.focal_px, w / 2.0, h / 2.0)?;
    let half_view = diff.camera_height * (w.min(h) / 2.0) / diff.focal_px;

    // Camera path: constant drift plus a slow wobble, both in the plane, and
    // small smooth rotations about the nadir-looking base orientation.
    let base = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
    let heading = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed = diff.camera_speed * rng.gen_range(0.5..1.0);
    let drift = [speed * heading.cos(), speed * heading.sin(), 0.0];
    let wobble_phase: [f64; 3] = [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)];
    let wobble_freq = rng.gen_range(0.3..0.7);
    let turn: [f64; 3] = [
        diff.camera_turn * rng.gen_range(-1.0..1.0),
        diff.camera_turn * rng.gen_range(-1.0..1.0),
        diff.camera_turn * rng.gen_range(-1.0..1.0),
    ];
    // centre the canvas frame on the origin so objects placed around the
    // origin are in view when the forecast is made
    let canvas_frame = spec.n_past as f64 - 1.0 + (n_frames - spec.horizon()) as f64;
    let mut poses = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let dt = f as f64 - canvas_frame;
        let c = [
            drift[0] * dt + diff.camera_wobble * (wobble_freq * f as f64 + wobble_phase[0]).sin(),
            drift[1] * dt + diff.camera_wobble * (wobble_freq * f as f64 + wobble_phase[1]).sin(),
            diff.camera_height
                + 0.5 * diff.camera_wobble * (wobble_freq * f as f64 + wobble_phase[2]).sin(),
        ];
        let pert = mat3_mul(
            &rot_z(turn[0] * dt),
            &mat3_mul(&rot_x(turn[1] * dt), &rot_y(turn[2] * dt)),
        );
        let r = mat3_mul(&pert, &base);
        let t = vec3_scale(mat3_vec(&r, &c), -1.0);
        poses.push(ScenePose::new(r, t)?);
    }

    // Objects on the desk, reasonably separated.
    let spread = diff.object_spread * half_view;
    let mut objects: Vec<Vec3<f64>> = Vec::with_capacity(diff.n_objects);
    let mut attempts = 0;
    while objects.len() < diff.n_objects {
        attempts += 1;
        let o = [rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), 0.0];
        let far = objects
            .iter()
            .all(|p| (p[0] - o[0]).hypot(p[1] - o[1]) > diff.object_separation * half_view);
        if far || attempts > 200 {
            objects.push(o);
        }
    }

    let roll: f64 = rng.gen();
    let active = if roll < diff.p_right {
        ActiveSide::Right
    } else if roll < diff.p_right + diff.p_left {
        ActiveSide::Left
    } else {
        ActiveSide::Both
    };
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.shuffle(rng);

    let span = spec.horizon();
    let mut hands: [Option<Vec<Vec3<f64>>>; 2] = [None, None];
    let mut targets: [Option<Vec3<f64>>; 2] = [None, None];
    for (slot, &side) in active.sides().iter().enumerate() {
        let target = objects[order[slot]];
        // hands enter from the wearer's side of the desk (image bottom)
        let lateral = match side {
            Side::Right => rng.gen_range(0.1..0.8),
            Side::Left => rng.gen_range(-0.8..-0.1),
        } * half_view;
        let start = [lateral, -rng.gen_range(0.55..0.85) * half_view, diff.hand_height];
        let goal = [target[0], target[1], diff.hand_height];
        let path = (0..n_frames)
            .map(|f| minimum_jerk_at(start, goal, (f as f64 - reach_offset) / (span - 1) as f64))
            .collect();
        hands[side.index()] = Some(path);
        targets[side.index()] = Some(target);
    }

    let primary = active.sides()[0];
    let detected_is_target = rng.gen::<f64>() < diff.detect_target_prob;
    let detected = if detected_is_target {
        targets[primary.index()].expect("primary target")
    } else {
        let distractors: Vec<_> = order
            .iter()
            .skip(active.sides().len())
            .map(|&i| objects[i])
            .collect();
        *distractors.choose(rng).unwrap_or(&objects[order[0]])
    };

    let obs_noise = Normal::new(0.0, diff.obs_noise_px.max(1e-300)).expect("valid sigma");
    let noise_pt = |rng: &mut ChaCha8Rng| {
        if diff.obs_noise_px > 0.0 {
            PixelPoint::new(obs_noise.sample(rng), obs_noise.sample(rng))
        } else {
            PixelPoint::new(0.0, 0.0)
        }
    };
    let mut hand_drop = [vec![false; n_frames], vec![false; n_frames]];
    let mut hand_noise = [Vec::new(), Vec::new()];
    for s in 0..2 {
        for f in 0..n_frames {
            hand_drop[s][f] = rng.gen::<f64>() < diff.dropout;
            hand_noise[s].push(noise_pt(rng));
        }
    }
    let object_noise = (0..n_frames).map(|_| noise_pt(rng)).collect();

    let freqs: Vec<(f64, f64, f64)> = (0..diff.global_dims)
        .map(|_| {
            (
                rng.gen_range(0.1..0.5),
                rng.gen_range(0.0..6.3),
                rng.gen_range(0.5..1.0),
            )
        })
        .collect();
    let global = (0..n_frames)
        .map(|f| {
            freqs
                .iter()
                .map(|(om, ph, amp)| amp * (om * f as f64 + ph).sin())
                .collect()
        })
        .collect();

    // Correspondences between each adjacent pair of frames: random image
    // points of the earlier frame lifted onto the desk and reprojected.
    let corr_noise = Normal::new(0.0, diff.corr_noise_px.max(1e-300)).expect("valid sigma");
    let mut correspondences = Vec::with_capacity(n_frames.saturating_sub(1));
    let mut outliers = Vec::with_capacity(n_frames.saturating_sub(1));
    for f in 0..n_frames.saturating_sub(1) {
        let g0 = poses[f].plane_to_image(&k);
        let g1 = poses[f + 1].plane_to_image(&k);
        let g0_inv =
            mat3_inverse(&g0).ok_or_else(|| Error::Degenerate("camera sees plane edge-on".into()))?;
        let exact = Homography::new(mat3_mul(&g1, &g0_inv))?;
        let mut list = Vec::with_capacity(diff.n_correspondences);
        let mut flags = Vec::with_capacity(diff.n_correspondences);
        let n_out = (diff.outlier_fraction * diff.n_correspondences as f64).round() as usize;
        for i in 0..diff.n_correspondences {
            let src = PixelPoint::new(rng.gen_range(0.0..w), rng.gen_range(0.0..h));
            let is_outlier = i < n_out;
            let mut dst = if is_outlier {
                PixelPoint::new(rng.gen_range(0.0..w), rng.gen_range(0.0..h))
            } else {
                project_point(&exact, src)?
            };
            let mut src = src;
            if diff.corr_noise_px > 0.0 && !is_outlier {
                src.u += corr_noise.sample(rng);
                src.v += corr_noise.sample(rng);
                dst.u += corr_noise.sample(rng);
                dst.v += corr_noise.sample(rng);
            }
            list.push(Correspondence { src, dst });
            flags.push(is_outlier);
        }
        // interleave outliers so their position carries no information
        let mut idx: Vec<usize> = (0..list.len()).collect();
        idx.shuffle(rng);
        correspondences.push(idx.iter().map(|&i| list[i]).collect());
        outliers.push(idx.iter().map(|&i| flags[i]).collect());
    }

    Ok(Simulation {
        k,
        poses,
        hands,
        targets,
        detected,
        detected_is_target,
        active,
        hand_drop,
        hand_noise,
        object_noise,
        global,
        correspondences,
        outliers,
    })
}

fn in_image(p: PixelPoint<f64>, spec: &SequenceSpec) -> bool {
    p.u >= 0.0 && p.v >= 0.0 && p.u < spec.image_width && p.v < spec.image_height
}

/// Homography taking frame `from` onto frame `to` through the desk plane.
fn frame_to_frame(sim: &Simulation, from: usize, to: usize) -> Result<Homography<f64>> {
    if from == to {
        return Ok(Homography::identity());
    }
    let (n, d) = sim.poses[from].ground_plane();
    planar_homography(&sim.poses[from], &sim.poses[to], n, d, &sim.k)
}

/// Cuts the window whose first past frame is `first` out of a simulation.
fn window(sim: &Simulation, seed: u64, spec: &SequenceSpec, first: usize) -> Result<ObservationSequence> {
    let canvas = first + spec.n_past - 1;
    let project = |f: usize, x: Vec3<f64>| sim.k.project(sim.poses[f].transform(x));

    let mut frames = Vec::with_capacity(spec.n_past);
    for f in first..=canvas {
        let mut hands = [None, None];
        for side in Side::BOTH {
            let s = side.index();
            let Some(path) = &sim.hands[s] else { continue };
            if sim.hand_drop[s][f] {
                continue;
            }
            if let Some(p) = project(f, path[f]) {
                let noisy = PixelPoint::new(p.u + sim.hand_noise[s][f].u, p.v + sim.hand_noise[s][f].v);
                if in_image(noisy, spec) {
                    hands[s] = Some(noisy);
                }
            }
        }
        let object_center = project(f, sim.detected)
            .map(|p| PixelPoint::new(p.u + sim.object_noise[f].u, p.v + sim.object_noise[f].v))
            .filter(|p| in_image(*p, spec));
        frames.push(FrameObservation {
            right: hands[0],
            left: hands[1],
            object_center,
            global_context: sim.global[f].clone(),
            valid_right: hands[0].is_some(),
            valid_left: hands[1].is_some(),
        });
    }

    // keep at least two visible past frames per active side
    for side in sim.active.sides() {
        let s = side.index();
        let visible = frames.iter().filter(|fr| fr.valid(*side)).count();
        if visible >= 2 {
            continue;
        }
        let path = sim.hands[s].as_ref().expect("active side has a path");
        for (i, f) in (first..canvas + 1).enumerate().rev().take(2) {
            if let Some(p) = project(f, path[f]) {
                let fr = &mut frames[i];
                match side {
                    Side::Right => {
                        fr.right = Some(p);
                        fr.valid_right = true;
                    }
                    Side::Left => {
                        fr.left = Some(p);
                        fr.valid_left = true;
                    }
                }
            }
        }
    }

    let mats = (first..=canvas)
        .map(|f| frame_to_frame(sim, f, canvas))
        .collect::<Result<Vec<_>>>()?;
    let homographies = HomographyStack { mats };

    let mut truths: [Option<SideTruth>; 2] = [None, None];
    for &side in sim.active.sides() {
        let s = side.index();
        let path = sim.hands[s].as_ref().expect("active path");
        let past_canvas = frames
            .iter()
            .enumerate()
            .map(|(i, fr)| {
                fr.hand(side)
                    .map(|p| project_point(&homographies.mats[i], p))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut future: Vec<Option<PixelPoint<f64>>> = Vec::with_capacity(spec.n_future);
        for f in (canvas + 1)..(canvas + 1 + spec.n_future) {
            if sim.hand_drop[s][f] {
                future.push(None);
                continue;
            }
            let in_frame = project(f, path[f])
                .ok_or_else(|| Error::Degenerate("hand behind camera".into()))?;
            let h = frame_to_frame(sim, f, canvas)?;
            future.push(Some(project_point(&h, in_frame)?));
        }
        let filled: Vec<bool> = future.iter().map(|p| p.is_none()).collect();
        let mut sequence = past_canvas.clone();
        sequence.extend(future.iter().copied());
        let waypoints = hermite_fill(&sequence)?[spec.n_past..].to_vec();
        let target = sim.targets[s].expect("active target");
        let contact_point = project(canvas, target)
            .ok_or_else(|| Error::Degenerate("target behind camera".into()))?;
        truths[s] = Some(SideTruth {
            trajectory: HandTrajectory::new(side, waypoints),
            filled,
            contact_point,
            past_canvas,
        });
    }
    let [right, left] = truths;

    let correspondences = sim.correspondences[first..canvas].to_vec();
    let outliers = sim.outliers[first..canvas].to_vec();
    let episode = ObservationSequence {
        seed,
        spec: *spec,
        frames,
        correspondences,
        gt: GroundTruth {
            active_side: sim.active,
            right,
            left,
            homographies,
            outliers,
            detected_is_target: sim.detected_is_target,
        },
    };
    episode.validate()?;
    Ok(episode)
}

/// Renders one episode; identical inputs give identical output.
pub fn render_episode(seed: u64, spec: &SequenceSpec, difficulty: &Difficulty) -> Result<ObservationSequence> {
    spec.validate()?;
    difficulty.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = difficulty.reach_jitter as i64;
    let offset = rng.gen_range(-j..=j) as f64;
    let sim = simulate(spec, difficulty, spec.horizon(), offset, &mut rng)?;
    window(&sim, seed, spec, 0)
}

/// Renders `window_len` successive overlapping episodes of one clip, oldest
/// first; episode `i` ends its past one frame after episode `i - 1`.
pub fn render_stream(
    seed: u64,
    spec: &SequenceSpec,
    difficulty: &Difficulty,
    window_len: usize,
) -> Result<Vec<ObservationSequence>> {
    spec.validate()?;
    difficulty.validate()?;
    if window_len == 0 {
        return Err(Error::validation("stream needs at least one window"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.gen_range(0..window_len.max(1)) as f64;
    let n_frames = spec.horizon() + window_len - 1;
    let sim = simulate(spec, difficulty, n_frames, offset, &mut rng)?;
    (0..window_len).map(|first| window(&sim, seed, spec, first)).collect()
}

/// Episodes `base_seed .. base_seed + n`, generated in parallel.
pub fn render_dataset(
    base_seed: u64,
    n: usize,
    spec: &SequenceSpec,
    difficulty: &Difficulty,
) -> Result<Vec<ObservationSequence>> {
    use rayon::prelude::*;
    (0..n as u64)
        .into_par_iter()
        .map(|i| render_episode(base_seed.wrapping_add(i), spec, difficulty))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homography::{accumulate, ransac_homography, RansacConfig};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(110.0, 105.0, 64.0, 60.0).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> ScenePose {
        let base = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
        let r = mat3_mul(
            &rot_z(rng.gen_range(-0.3..0.3)),
            &mat3_mul(&rot_x(rng.gen_range(-0.2..0.2)), &rot_y(rng.gen_range(-0.2..0.2))),
        );
        let r = mat3_mul(&r, &base);
        let c = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(0.5..0.7)];
        ScenePose::new(r, vec3_scale(mat3_vec(&r, &c), -1.0)).unwrap()
    }

    #[test]
    fn minimum_jerk_examples() {
        let a = [0.1, 0.2, 0.0];
        let b = [0.5, -0.2, 0.0];
        let p = minimum_jerk_path(a, a, 5).unwrap();
        assert!(p.iter().all(|x| *x == a));
        let p = minimum_jerk_path(a, b, 11).unwrap();
        assert_eq!(p[0], a);
        assert_eq!(p[10], b);
        let mid = p[5];
        for i in 0..3 {
            assert!((mid[i] - 0.5 * (a[i] + b[i])).abs() < 1e-15);
        }
        assert!(minimum_jerk_path(a, b, 1).is_err());
    }

    #[test]
    fn planar_homography_identity_and_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = random_pose(&mut rng);
        let (n, d) = pose.ground_plane();
        let h = planar_homography(&pose, &pose, n, d, &k()).unwrap();
        assert!(h.frobenius_distance(&Homography::identity()) < 1e-12);

        // same centre, different orientation: H = K R K^-1
        let r0 = pose.rotation;
        let r1 = mat3_mul(&rot_z(0.1), &r0);
        let c = mat3_vec(&mat3_transpose(&r0), &vec3_scale(pose.translation, -1.0));
        let p1 = ScenePose::new(r1, vec3_scale(mat3_vec(&r1, &c), -1.0)).unwrap();
        let expected = Homography::new(mat3_mul(
            &mat3_mul(&k().matrix(), &mat3_mul(&r1, &mat3_transpose(&r0))),
            &k().inverse(),
        ))
        .unwrap();
        for depth in [0.3, 1.0, 5.0] {
            let h = planar_homography(&pose, &p1, n, depth, &k()).unwrap();
            assert!(h.frobenius_distance(&expected) < 1e-12);
        }
    }

    #[test]
    fn planar_homography_two_camera_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (pt, p0) = (random_pose(&mut rng), random_pose(&mut rng));
            let (n, d) = pt.ground_plane();
            let h = planar_homography(&pt, &p0, n, d, &k()).unwrap();
            let mut worst: f64 = 0.0;
            for _ in 0..20 {
                let x = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 0.0];
                let a = k().project(pt.transform(x)).unwrap();
                let b = k().project(p0.transform(x)).unwrap();
                let via = project_point(&h, a).unwrap();
                worst = worst.max((via.u - b.u).hypot(via.v - b.v));
            }
            assert!(worst < 1e-8, "{worst}");
        }
    }

    #[test]
    fn planar_homography_rejects_plane_behind() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = random_pose(&mut rng);
        assert!(planar_homography(&pose, &pose, [0.0, 0.0, 1.0], -1.0, &k()).is_err());
        assert!(planar_homography(&pose, &pose, [0.0, 0.0, -1.0], 1.0, &k()).is_err());
    }

    #[test]
    fn hermite_examples() {
        let full: Vec<_> = (0..5).map(|i| Some(PixelPoint::new(i as f64, 2.0))).collect();
        let out = hermite_fill(&full).unwrap();
        assert_eq!(out, full.iter().map(|p| p.unwrap()).collect::<Vec<_>>());

        let mut line: Vec<_> = (0..6)
            .map(|i| Some(PixelPoint::new(1.0 + 2.0 * i as f64, -3.0 + 0.5 * i as f64)))
            .collect();
        line[3] = None;
        let out = hermite_fill(&line).unwrap();
        assert!((out[3].u - 7.0).abs() < 1e-12 && (out[3].v + 1.5).abs() < 1e-12);

        assert!(hermite_fill(&[Some(PixelPoint::new(0.0, 0.0)), None, None]).is_err());
    }

    /// Independent route: solve the cubic's power-basis coefficients from the
    /// two endpoint values and tangents, then evaluate it.
    #[test]
    fn hermite_quadratic_gap_matches_polynomial_oracle() {
        let q = |t: f64| PixelPoint::new(0.5 * t * t - 2.0 * t + 3.0, -0.25 * t * t + t);
        let mut pts: Vec<_> = (0..7).map(|i| Some(q(i as f64))).collect();
        pts[3] = None;
        let out = hermite_fill(&pts).unwrap();

        // known neighbours 2 and 4; tangents from (1, 4) and (2, 5)
        let (k0, k1) = (2.0, 4.0);
        let slope = |a: f64, b: f64, f: fn(PixelPoint) -> f64| (f(q(b)) - f(q(a))) / (b - a);
        for (f, got) in [
            ((|p: PixelPoint| p.u) as fn(PixelPoint) -> f64, out[3].u),
            ((|p: PixelPoint| p.v) as fn(PixelPoint) -> f64, out[3].v),
        ] {
            let (y0, y1) = (f(q(k0)), f(q(k1)));
            let (m0, m1) = (slope(1.0, 4.0, f), slope(2.0, 5.0, f));
            // c(x) = a + b x + c x^2 + d x^3 on x = t - k0, h = 2
            let h: f64 = k1 - k0;
            let a = y0;
            let b = m0;
            let c = (3.0 * (y1 - y0) / h - 2.0 * m0 - m1) / h;
            let d = (m0 + m1 - 2.0 * (y1 - y0) / h) / (h * h);
            let x = 1.0;
            let expected = a + b * x + c * x * x + d * x * x * x;
            assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        }
    }

    #[test]
    fn render_is_deterministic() {
        let spec = SequenceSpec::default();
        let diff = Difficulty::default();
        let a = render_episode(42, &spec, &diff).unwrap();
        let b = render_episode(42, &spec, &diff).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = render_episode(43, &spec, &diff).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn static_camera_gives_identity_homographies() {
        let spec = SequenceSpec::default();
        let ep = render_episode(5, &spec, &Difficulty::clean()).unwrap();
        for h in &ep.gt.homographies.mats {
            assert!(h.frobenius_distance(&Homography::identity()) < 1e-12);
        }
    }

    #[test]
    fn canvas_entry_is_identity_and_transport_is_exact() {
        let spec = SequenceSpec::default();
        let diff = Difficulty::default();
        for seed in 0..20 {
            let ep = render_episode(seed, &spec, &diff).unwrap();
            assert_eq!(*ep.gt.homographies.canvas().unwrap(), Homography::identity());
        }
    }

    #[test]
    fn clean_ground_truth_matches_direct_projection() {
        let spec = SequenceSpec::default();
        let diff = Difficulty {
            obs_noise_px: 0.0,
            dropout: 0.0,
            ..Difficulty::default()
        };
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = diff.reach_jitter as i64;
            let offset = rng.gen_range(-j..=j) as f64;
            let sim = simulate(&spec, &diff, spec.horizon(), offset, &mut rng).unwrap();
            let ep = window(&sim, seed, &spec, 0).unwrap();
            let canvas = spec.n_past - 1;
            for &side in sim.active.sides() {
                let truth = ep.gt.side(side).unwrap();
                let path = sim.hands[side.index()].as_ref().unwrap();
                // future positions projected straight into the canvas camera
                for (i, wp) in truth.trajectory.waypoints.iter().enumerate() {
                    let x = path[canvas + 1 + i];
                    let direct = sim.k.project(sim.poses[canvas].transform(x)).unwrap();
                    assert!((wp.u - direct.u).hypot(wp.v - direct.v) < 1e-6);
                }
                // observed past positions transported by the stack
                for (f, p) in truth.past_canvas.iter().enumerate() {
                    let Some(p) = p else { continue };
                    let direct = sim.k.project(sim.poses[canvas].transform(path[f])).unwrap();
                    assert!((p.u - direct.u).hypot(p.v - direct.v) < 1e-8);
                }
            }
        }
    }

    #[test]
    fn noise_free_ransac_recovers_generator_homographies() {
        let spec = SequenceSpec::default();
        let diff = Difficulty {
            corr_noise_px: 0.0,
            outlier_fraction: 0.0,
            ..Difficulty::default()
        };
        let ep = render_episode(9, &spec, &diff).unwrap();
        let adjacent: Vec<_> = (0..spec.n_past - 1)
            .map(|i| {
                ransac_homography(&ep.adjacent_pairs(i), &RansacConfig::default(), i as u64)
                    .unwrap()
                    .homography
            })
            .collect();
        let stack = accumulate(&adjacent).unwrap();
        for (est, exact) in stack.mats.iter().zip(&ep.gt.homographies.mats) {
            assert!(est.frobenius_distance(exact) < 1e-6, "{}", est.frobenius_distance(exact));
        }
    }

    #[test]
    fn stream_windows_share_the_clip() {
        let spec = SequenceSpec::default();
        let eps = render_stream(11, &spec, &Difficulty::default(), 3).unwrap();
        assert_eq!(eps.len(), 3);
        // frame i+1 of an older window is frame i of the next one
        assert_eq!(eps[0].frames[1], eps[1].frames[0]);
        assert_eq!(eps[1].correspondences[1], eps[2].correspondences[0]);
    }
}
