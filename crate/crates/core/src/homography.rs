//! Egomotion homographies: estimation from point correspondences,
//! accumulation onto the canvas frame, and point transport.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    from_homogeneous, mat3_det, mat3_identity, mat3_inverse, mat3_mul, mat3_vec, to_homogeneous,
    Mat3, PixelPoint,
};
use crate::scalar::Real;

const SINGULAR_DET: f64 = 1e-12;

/// Projective map between two images, stored with `h33 = 1` when possible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography<T = f64> {
    pub m: Mat3<T>,
}

impl<T: Real> Homography<T> {
    /// Normalizes `m` and rejects singular matrices.
    pub fn new(m: Mat3<T>) -> Result<Self> {
        let mut m = m;
        if m.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Estimation("non-finite homography".into()));
        }
        let h33 = m[2][2];
        if h33.abs() > T::of(SINGULAR_DET) {
            for row in m.iter_mut() {
                for x in row.iter_mut() {
                    *x = *x / h33;
                }
            }
        }
        let det = mat3_det(&m);
        if !(det.abs() > T::of(SINGULAR_DET)) {
            return Err(Error::Estimation(format!("singular homography (det {det})")));
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self {
            m: mat3_identity(),
        }
    }

    pub fn translation(tx: T, ty: T) -> Self {
        let mut m = mat3_identity();
        m[0][2] = tx;
        m[1][2] = ty;
        Self { m }
    }

    /// Composition `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Self) -> Result<Self> {
        Self::new(mat3_mul(&self.m, &other.m))
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = mat3_inverse(&self.m)
            .ok_or_else(|| Error::Estimation("homography is not invertible".into()))?;
        Self::new(inv)
    }

    /// Row-major 9 entries.
    pub fn flatten(&self) -> [T; 9] {
        let m = &self.m;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn frobenius_distance(&self, other: &Self) -> T {
        self.flatten()
            .iter()
            .zip(other.flatten().iter())
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum::<T>()
            .sqrt()
    }

    pub fn frobenius_norm(&self) -> T {
        self.flatten().iter().map(|a| *a * *a).sum::<T>().sqrt()
    }

    pub fn cast<U: Real>(&self) -> Homography<U> {
        let mut m = [[U::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = U::of(self.m[i][j].to_f64_lossy());
            }
        }
        Homography { m }
    }
}

/// Maps every past frame onto the canvas (last observed) frame.
///
/// Entry `i` belongs to past frame `i`, oldest first; the final entry is the
/// canvas itself and therefore the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomographyStack<T = f64> {
    pub mats: Vec<Homography<T>>,
}

impl<T: Real> HomographyStack<T> {
    pub fn identity(n_past: usize) -> Self {
        Self {
            mats: vec![Homography::identity(); n_past],
        }
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn canvas(&self) -> Option<&Homography<T>> {
        self.mats.last()
    }

    pub fn cast<U: Real>(&self) -> HomographyStack<U> {
        HomographyStack {
            mats: self.mats.iter().map(|h| h.cast()).collect(),
        }
    }
}

pub fn project_point<T: Real>(h: &Homography<T>, p: PixelPoint<T>) -> Result<PixelPoint<T>> {
    let x = mat3_vec(&h.m, &to_homogeneous(p));
    if !(x[2].abs() > T::of(crate::geometry::HOMOGENEOUS_EPS)) {
        return Err(Error::Degenerate(format!(
            "projection of ({}, {}) has homogeneous scale {}",
            p.u, p.v, x[2]
        )));
    }
    from_homogeneous(x)
}

/// Chains adjacent-frame maps (`adjacent[i]` takes frame `i` to `i + 1`)
/// into per-frame maps onto the last frame.
pub fn accumulate<T: Real>(adjacent: &[Homography<T>]) -> Result<HomographyStack<T>> {
    let n = adjacent.len() + 1;
    let mut mats = vec![Homography::identity(); n];
    for i in (0..adjacent.len()).rev() {
        mats[i] = mats[i + 1].compose(&adjacent[i]).map_err(|e| {
            Error::Estimation(format!("accumulated homography for frame {i}: {e}"))
        })?;
    }
    Ok(HomographyStack { mats })
}

/// Similarity transform that centers the points and scales their mean
/// distance from the centroid to √2.
fn hartley_normalizer<T: Real>(points: impl Iterator<Item = PixelPoint<T>> + Clone) -> Mat3<T> {
    let n = T::of_usize(points.clone().count());
    let (su, sv) = points
        .clone()
        .fold((T::zero(), T::zero()), |(a, b), p| (a + p.u, b + p.v));
    let (cu, cv) = (su / n, sv / n);
    let mean_dist = points
        .map(|p| (p.u - cu).hypot(p.v - cv))
        .sum::<T>()
        / n;
    let s = if mean_dist > T::zero() {
        T::of(std::f64::consts::SQRT_2) / mean_dist
    } else {
        T::one()
    };
    let z = T::zero();
    [[s, z, -s * cu], [z, s, -s * cv], [z, z, T::one()]]
}

/// One-sided Jacobi SVD. Returns singular values and right singular vectors
/// (as columns of `v`, stored row-major `cols x cols`).
fn jacobi_svd<T: Real>(a: &mut [Vec<T>], cols: usize) -> (Vec<T>, Vec<Vec<T>>) {
    let mut v: Vec<Vec<T>> = (0..cols)
        .map(|i| (0..cols).map(|j| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let eps = T::epsilon();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut alpha, mut beta, mut gamma) = (T::zero(), T::zero(), T::zero());
                for row in a.iter() {
                    alpha = alpha + row[p] * row[p];
                    beta = beta + row[q] * row[q];
                    gamma = gamma + row[p] * row[q];
                }
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for row in a.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma = (0..cols)
        .map(|j| a.iter().map(|row| row[j] * row[j]).sum::<T>().sqrt())
        .collect();
    (sigma, v)
}

/// Normalized direct linear transform over `(source, destination)` pairs.
pub fn solve_dlt<T: Real>(pairs: &[(PixelPoint<T>, PixelPoint<T>)]) -> Result<Homography<T>> {
    if pairs.len() < 4 {
        return Err(Error::Estimation(format!(
            "DLT needs at least 4 pairs, got {}",
            pairs.len()
        )));
    }
    let ts = hartley_normalizer(pairs.iter().map(|p| p.0));
    let td = hartley_normalizer(pairs.iter().map(|p| p.1));
    let z = T::zero();
    let mut rows: Vec<Vec<T>> = Vec::with_capacity(2 * pairs.len().max(5));
    for (src, dst) in pairs {
        let s = mat3_vec(&ts, &to_homogeneous(*src));
        let d = mat3_vec(&td, &to_homogeneous(*dst));
        let (x, y, xp, yp) = (s[0], s[1], d[0], d[1]);
        let o = T::one();
        rows.push(vec![-x, -y, -o, z, z, z, xp * x, xp * y, xp]);
        rows.push(vec![z, z, z, -x, -y, -o, yp * x, yp * y, yp]);
    }
    while rows.len() < 9 {
        rows.push(vec![z; 9]);
    }
    let (sigma, v) = jacobi_svd(&mut rows, 9);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| sigma[a].partial_cmp(&sigma[b]).unwrap_or(std::cmp::Ordering::Equal));
    let smax = sigma[order[8]];
    let rank_tol = T::epsilon().sqrt() * T::of(1e-2) * smax;
    if !(smax > T::zero()) || sigma[order[1]] <= rank_tol {
        return Err(Error::Estimation(
            "degenerate correspondence configuration".into(),
        ));
    }
    let k = order[0];
    let mut hn = [[z; 3]; 3];
    for (i, row) in hn.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = v[3 * i + j][k];
        }
    }
    let td_inv = mat3_inverse(&td)
        .ok_or_else(|| Error::Estimation("degenerate destination points".into()))?;
    Homography::new(mat3_mul(&mat3_mul(&td_inv, &hn), &ts))
}

/// Exact homography through four correspondences, fixing the bottom-right
/// entry to one and solving the 8x8 system by Gaussian elimination.
pub fn solve_minimal<T: Real>(pairs: &[(PixelPoint<T>, PixelPoint<T>); 4]) -> Result<Homography<T>> {
    let ts = hartley_normalizer(pairs.iter().map(|p| p.0));
    let td = hartley_normalizer(pairs.iter().map(|p| p.1));
    let z = T::zero();
    let o = T::one();
    let mut a = [[z; 9]; 8];
    for (k, (src, dst)) in pairs.iter().enumerate() {
        let s = mat3_vec(&ts, &to_homogeneous(*src));
        let d = mat3_vec(&td, &to_homogeneous(*dst));
        let (x, y, xp, yp) = (s[0], s[1], d[0], d[1]);
        a[2 * k] = [x, y, o, z, z, z, -xp * x, -xp * y, xp];
        a[2 * k + 1] = [z, z, z, x, y, o, -yp * x, -yp * y, yp];
    }
    let degenerate = || Error::Estimation("degenerate correspondence configuration".into());
    for col in 0..8 {
        let piv = (col..8)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap_or(col);
        if !(a[piv][col].abs() > T::of(1e-10)) {
            return Err(degenerate());
        }
        a.swap(col, piv);
        for r in 0..8 {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != z {
                    for c in col..9 {
                        let v = a[col][c];
                        a[r][c] = a[r][c] - f * v;
                    }
                }
            }
        }
    }
    let h: Vec<T> = (0..8).map(|i| a[i][8] / a[i][i]).collect();
    let hn = [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], o]];
    let td_inv = mat3_inverse(&td).ok_or_else(degenerate)?;
    Homography::new(mat3_mul(&mat3_mul(&td_inv, &hn), &ts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    /// Symmetric transfer error bound in pixels.
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    /// Early-exit confidence for the adaptive iteration bound.
    pub confidence: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold: 2.0,
            max_iterations: 1000,
            confidence: 0.999,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RansacResult<T> {
    pub homography: Homography<T>,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl<T> RansacResult<T> {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// `sqrt(d(Hx, x')² + d(H⁻¹x', x)²)`, infinite when either side degenerates.
pub fn symmetric_transfer_error<T: Real>(
    h: &Homography<T>,
    h_inv: &Homography<T>,
    pair: &(PixelPoint<T>, PixelPoint<T>),
) -> T {
    let fwd = project_point(h, pair.0);
    let bwd = project_point(h_inv, pair.1);
    match (fwd, bwd) {
        (Ok(f), Ok(b)) => {
            let d1 = (f.u - pair.1.u).powi(2) + (f.v - pair.1.v).powi(2);
            let d2 = (b.u - pair.0.u).powi(2) + (b.v - pair.0.v).powi(2);
            (d1 + d2).sqrt()
        }
        _ => T::infinity(),
    }
}

fn score_model<T: Real>(
    h: &Homography<T>,
    pairs: &[(PixelPoint<T>, PixelPoint<T>)],
    threshold: T,
) -> Option<(Vec<bool>, usize, T)> {
    let h_inv = h.inverse().ok()?;
    let mut flags = Vec::with_capacity(pairs.len());
    let mut count = 0;
    let mut err_sum = T::zero();
    for pair in pairs {
        let e = symmetric_transfer_error(h, &h_inv, pair);
        let inlier = e < threshold;
        if inlier {
            count += 1;
            err_sum = err_sum + e;
        }
        flags.push(inlier);
    }
    Some((flags, count, err_sum))
}

/// RANSAC over minimal 4-pair samples with a seeded generator.
pub fn ransac_homography<T: Real>(
    pairs: &[(PixelPoint<T>, PixelPoint<T>)],
    config: &RansacConfig,
    rng_seed: u64,
) -> Result<RansacResult<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    ransac_with_sampler(pairs, config, |n| {
        let idx = sample(&mut rng, n, 4);
        [idx.index(0), idx.index(1), idx.index(2), idx.index(3)]
    })
}

/// RANSAC core with an injectable minimal-sample generator.
pub fn ransac_with_sampler<T: Real>(
    pairs: &[(PixelPoint<T>, PixelPoint<T>)],
    config: &RansacConfig,
    mut draw: impl FnMut(usize) -> [usize; 4],
) -> Result<RansacResult<T>> {
    let n = pairs.len();
    if n < 4 {
        return Err(Error::Estimation(format!(
            "RANSAC needs at least 4 pairs, got {n}"
        )));
    }
    let threshold = T::of(config.inlier_threshold);
    let mut best: Option<(Vec<bool>, usize, T)> = None;
    let mut budget = config.max_iterations;
    let mut iterations = 0;
    while iterations < budget {
        iterations += 1;
        let idx = draw(n);
        let sample = idx.map(|i| pairs[i]);
        let Ok(h) = solve_minimal(&sample) else { continue };
        let Some(scored) = score_model(&h, pairs, threshold) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some((_, c, e)) => scored.1 > *c || (scored.1 == *c && scored.2 < *e),
        };
        if better {
            let ratio = scored.1 as f64 / n as f64;
            best = Some(scored);
            let p_good = ratio.powi(4);
            if p_good >= 1.0 {
                budget = budget.min(iterations);
            } else if p_good > 0.0 {
                let needed = ((1.0 - config.confidence).ln() / (1.0 - p_good).ln()).ceil();
                if needed.is_finite() && needed >= 0.0 {
                    budget = budget.min((needed as usize).max(1));
                }
            }
        }
    }
    let (flags, count, _) = best.ok_or_else(|| {
        Error::Estimation("no non-degenerate minimal sample found".into())
    })?;
    if count < 4 {
        return Err(Error::Estimation(format!(
            "best model has only {count} inliers"
        )));
    }
    let inlier_pairs: Vec<_> = pairs
        .iter()
        .zip(&flags)
        .filter(|(_, &f)| f)
        .map(|(p, _)| *p)
        .collect();
    let refit = solve_dlt(&inlier_pairs)?;
    // Keep the hypothesis' consensus set unless the refit model agrees with
    // at least as many pairs.
    let (homography, inliers) = match score_model(&refit, pairs, threshold) {
        Some((f2, c2, _)) if c2 >= count => (refit, f2),
        _ => (refit, flags),
    };
    Ok(RansacResult {
        homography,
        inliers,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_h(rng: &mut impl Rng) -> Homography<f64> {
        let m = [
            [
                1.0 + rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-10.0..10.0),
            ],
            [
                rng.gen_range(-0.1..0.1),
                1.0 + rng.gen_range(-0.1..0.1),
                rng.gen_range(-10.0..10.0),
            ],
            [rng.gen_range(-1e-3..1e-3), rng.gen_range(-1e-3..1e-3), 1.0],
        ];
        Homography::new(m).unwrap()
    }

    fn pairs_from(h: &Homography<f64>, pts: &[PixelPoint<f64>]) -> Vec<(PixelPoint, PixelPoint)> {
        pts.iter()
            .map(|&p| (p, project_point(h, p).unwrap()))
            .collect()
    }

    fn square() -> Vec<PixelPoint<f64>> {
        vec![
            PixelPoint::new(10.0, 10.0),
            PixelPoint::new(100.0, 12.0),
            PixelPoint::new(95.0, 110.0),
            PixelPoint::new(8.0, 90.0),
        ]
    }

    fn rel_frob(a: &Homography<f64>, b: &Homography<f64>) -> f64 {
        a.frobenius_distance(b) / b.frobenius_norm()
    }

    #[test]
    fn dlt_identity_and_translation() {
        let h = solve_dlt(&pairs_from(&Homography::identity(), &square())).unwrap();
        assert!(h.frobenius_distance(&Homography::identity()) < 1e-10);
        let t = Homography::translation(7.5, -3.25);
        let h = solve_dlt(&pairs_from(&t, &square())).unwrap();
        assert!(h.frobenius_distance(&t) < 1e-9);
    }

    #[test]
    fn dlt_recovers_random_h_from_twelve_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let h = random_h(&mut rng);
            let pts: Vec<_> = (0..12)
                .map(|_| PixelPoint::new(rng.gen_range(0.0..128.0), rng.gen_range(0.0..128.0)))
                .collect();
            let est = solve_dlt(&pairs_from(&h, &pts)).unwrap();
            assert!(rel_frob(&est, &h) < 1e-8, "{}", rel_frob(&est, &h));
        }
    }

    #[test]
    fn minimal_solver_agrees_with_dlt() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let h = random_h(&mut rng);
            let pts: Vec<_> = (0..4)
                .map(|_| PixelPoint::new(rng.gen_range(0.0..128.0), rng.gen_range(0.0..128.0)))
                .collect();
            let pairs = pairs_from(&h, &pts);
            let Ok(dlt) = solve_dlt(&pairs) else { continue };
            let quad: [_; 4] = pairs.try_into().unwrap();
            let fast = solve_minimal(&quad).unwrap();
            assert!(rel_frob(&fast, &dlt) < 1e-6, "{}", rel_frob(&fast, &dlt));
        }
        let line = [0.0, 1.0, 2.0, 3.0].map(|i| {
            let p = PixelPoint::new(i, 2.0 * i);
            (p, p)
        });
        assert!(solve_minimal(&line).is_err());
    }

    #[test]
    fn dlt_rejects_degenerate() {
        let collinear: Vec<_> = (0..6)
            .map(|i| {
                let p = PixelPoint::new(i as f64, 2.0 * i as f64);
                (p, p)
            })
            .collect();
        assert!(solve_dlt(&collinear).is_err());
        assert!(solve_dlt(&pairs_from(&Homography::identity(), &square()[..3])).is_err());
    }

    #[test]
    fn ransac_all_inliers_matches_dlt() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random_h(&mut rng);
        let pts: Vec<_> = (0..30)
            .map(|_| PixelPoint::new(rng.gen_range(0.0..128.0), rng.gen_range(0.0..128.0)))
            .collect();
        let pairs = pairs_from(&h, &pts);
        let res = ransac_homography(&pairs, &RansacConfig::default(), 1).unwrap();
        assert_eq!(res.inlier_count(), 30);
        let dlt = solve_dlt(&pairs).unwrap();
        assert!(rel_frob(&res.homography, &dlt) < 1e-9);
    }

    #[test]
    fn ransac_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = random_h(&mut rng);
        let mut pairs = Vec::new();
        let mut truth = Vec::new();
        for i in 0..100 {
            let p = PixelPoint::new(rng.gen_range(0.0..128.0), rng.gen_range(0.0..128.0));
            if i % 10 < 7 {
                pairs.push((p, project_point(&h, p).unwrap()));
                truth.push(true);
            } else {
                let q = PixelPoint::new(rng.gen_range(0.0..128.0), rng.gen_range(0.0..128.0));
                pairs.push((p, q));
                truth.push(false);
            }
        }
        let res = ransac_homography(&pairs, &RansacConfig::default(), 5).unwrap();
        for (flag, t) in res.inliers.iter().zip(&truth) {
            if *t {
                assert!(*flag);
            }
        }
        assert!(rel_frob(&res.homography, &h) < 1e-3);
    }

    #[test]
    fn ransac_too_few_pairs() {
        let pairs = pairs_from(&Homography::identity(), &square()[..3]);
        assert!(matches!(
            ransac_homography(&pairs, &RansacConfig::default(), 0),
            Err(Error::Estimation(_))
        ));
    }

    #[test]
    fn ransac_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let h = random_h(&mut rng);
        let mut pairs = Vec::new();
        for i in 0..40 {
            let p = PixelPoint::new(rng.gen_range(0.0..128.0), rng.gen_range(0.0..128.0));
            let q = if i % 3 == 0 {
                PixelPoint::new(rng.gen_range(0.0..128.0), rng.gen_range(0.0..128.0))
            } else {
                project_point(&h, p).unwrap()
            };
            pairs.push((p, q));
        }
        let n = pairs.len();
        let perm: Vec<usize> = {
            let mut v: Vec<usize> = (0..n).collect();
            v.reverse();
            v.rotate_left(7);
            v
        };
        // permuted[j] = pairs[perm[j]]; inverse maps original index -> new position
        let permuted: Vec<_> = perm.iter().map(|&i| pairs[i]).collect();
        let mut inv = vec![0; n];
        for (j, &i) in perm.iter().enumerate() {
            inv[i] = j;
        }
        let cfg = RansacConfig::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let base = ransac_with_sampler(&pairs, &cfg, |n| {
            let s = sample(&mut r1, n, 4);
            [s.index(0), s.index(1), s.index(2), s.index(3)]
        })
        .unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let moved = ransac_with_sampler(&permuted, &cfg, |n| {
            let s = sample(&mut r2, n, 4);
            [inv[s.index(0)], inv[s.index(1)], inv[s.index(2)], inv[s.index(3)]]
        })
        .unwrap();
        for i in 0..n {
            assert_eq!(base.inliers[i], moved.inliers[inv[i]]);
        }
    }

    #[test]
    fn accumulate_examples() {
        let stack = accumulate(&vec![Homography::<f64>::identity(); 5]).unwrap();
        assert_eq!(stack.len(), 6);
        assert!(stack.mats.iter().all(|h| *h == Homography::identity()));

        let stack = accumulate(&vec![Homography::translation(1.0, 0.0); 3]).unwrap();
        assert_eq!(stack.mats[0], Homography::translation(3.0, 0.0));
        assert_eq!(*stack.canvas().unwrap(), Homography::identity());
    }

    #[test]
    fn accumulate_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let chain: Vec<_> = (0..9).map(|_| random_h(&mut rng)).collect();
        let stack = accumulate(&chain).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let p = PixelPoint::new(rng.gen_range(0.0..128.0), rng.gen_range(0.0..128.0));
            for t in 0..chain.len() {
                let mut q = p;
                for h in &chain[t..] {
                    q = project_point(h, q).unwrap();
                }
                let direct = project_point(&stack.mats[t], p).unwrap();
                worst = worst.max((direct.u - q.u).hypot(direct.v - q.v));
            }
        }
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn project_examples() {
        let p = project_point(&Homography::identity(), PixelPoint::new(5.0, 7.0)).unwrap();
        assert_eq!(p, PixelPoint::new(5.0, 7.0));
        let p = project_point(
            &Homography::translation(2.0, -1.0),
            PixelPoint::new(0.0, 0.0),
        )
        .unwrap();
        assert_eq!(p, PixelPoint::new(2.0, -1.0));
        let h = Homography::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(
            project_point(&h, PixelPoint::new(-1.0, 0.0)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn project_matches_manual_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let h = random_h(&mut rng);
            let (u, v) = (rng.gen_range(-50.0..200.0), rng.gen_range(-50.0..200.0));
            let m = h.m;
            let x = m[0][0] * u + m[0][1] * v + m[0][2];
            let y = m[1][0] * u + m[1][1] * v + m[1][2];
            let w = m[2][0] * u + m[2][1] * v + m[2][2];
            let p = project_point(&h, PixelPoint::new(u, v)).unwrap();
            assert!((p.u - x / w).abs() < 1e-12 && (p.v - y / w).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_rejected() {
        assert!(Homography::new([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]).is_err());
    }

    proptest! {
        #[test]
        fn scale_invariance(k in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0],
                            u in -100.0f64..100.0, v in -100.0f64..100.0) {
            let base = [[1.1, 0.05, 3.0], [-0.02, 0.95, -4.0], [1e-4, -2e-4, 1.0]];
            let scaled = base.map(|r| r.map(|x| x * k));
            let a = project_point(&Homography::new(base).unwrap(), PixelPoint::new(u, v)).unwrap();
            let b = project_point(&Homography::new(scaled).unwrap(), PixelPoint::new(u, v)).unwrap();
            prop_assert!((a.u - b.u).abs() < 1e-9 && (a.v - b.v).abs() < 1e-9);
        }

        #[test]
        fn dlt_exact_on_noise_free(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_h(&mut rng);
            let pts: Vec<_> = (0..8)
                .map(|_| PixelPoint::new(rng.gen_range(0.0..128.0), rng.gen_range(0.0..128.0)))
                .collect();
            let est = solve_dlt(&pairs_from(&h, &pts)).unwrap();
            prop_assert!(rel_frob(&est, &h) <= 1e-8);
        }
    }
}
