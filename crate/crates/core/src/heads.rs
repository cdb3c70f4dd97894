//! Trajectory head (MLP over denoised future rows) and affordance head
//! (conditional VAE over contact points).
//!
//! Both heads work in centred unit coordinates (`u / W - 0.5`); outputs are
//! bounded to the image by `0.5 * tanh(x / 2)`, i.e. a sigmoid shifted to be
//! centred on the image middle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{ContactPointSet, HandTrajectory, PixelPoint, SequenceSpec, Side};
use crate::mat::Mat;
use crate::params::{Linear, ParamStore};
use crate::scalar::Real;
use crate::tokenizer::{denormalize_point, normalize_point};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadsConfig {
    pub hth_hidden: [usize; 2],
    pub oah_hidden: usize,
    pub condition_width: usize,
    pub latent_width: usize,
    /// Decoder samples averaged in the reconstruction term.
    pub samples: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            hth_hidden: [64, 32],
            oah_hidden: 64,
            condition_width: 32,
            latent_width: 8,
            samples: 5,
        }
    }
}

impl HeadsConfig {
    pub fn paper() -> Self {
        Self {
            hth_hidden: [256, 64],
            oah_hidden: 512,
            condition_width: 512,
            latent_width: 8,
            samples: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.hth_hidden[0],
            self.hth_hidden[1],
            self.oah_hidden,
            self.condition_width,
            self.latent_width,
            self.samples,
        ];
        if sizes.contains(&0) {
            return Err(Error::config("head sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HthParams {
    pub layers: [Linear; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OahParams {
    pub fuse: [Linear; 2],
    pub encoder: [Linear; 2],
    pub decoder: [Linear; 2],
}

impl HthParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &HeadsConfig,
        latent_width: usize,
        n_future: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let [h1, h2] = cfg.hth_hidden;
        Self {
            layers: [
                Linear::init(store, "hth.0", latent_width * n_future, h1, 1.0, rng),
                Linear::init(store, "hth.1", h1, h2, 1.0, rng),
                Linear::init(store, "hth.2", h2, 2 * n_future, 1.0, rng),
            ],
        }
    }
}

impl OahParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &HeadsConfig,
        latent_width: usize,
        n_future: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let (h, c, l) = (cfg.oah_hidden, cfg.condition_width, cfg.latent_width);
        Self {
            fuse: [
                Linear::init(store, "oah.fuse.0", latent_width + 2 * n_future, h, 1.0, rng),
                Linear::init(store, "oah.fuse.1", h, c, 1.0, rng),
            ],
            encoder: [
                Linear::init(store, "oah.enc.0", c + 2, h, 1.0, rng),
                Linear::init(store, "oah.enc.1", h, 2 * l, 1.0, rng),
            ],
            decoder: [
                Linear::init(store, "oah.dec.0", c + l, h, 1.0, rng),
                Linear::init(store, "oah.dec.1", h, 2, 1.0, rng),
            ],
        }
    }
}

fn mlp<T: Real>(g: &mut Graph<'_, T>, layers: &[Linear], x: Var) -> Var {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.apply(g, h);
        if i + 1 < layers.len() {
            h = g.gelu(h);
        }
    }
    h
}

/// `0.5 * tanh(x / 2)`: the centred logistic function.
pub fn bounded<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Var {
    let half = T::of(0.5);
    let t = g.scale(x, half);
    let t = g.tanh(t);
    g.scale(t, half)
}

/// Waypoints in centred unit coordinates, `1 x 2·n_future` as `(u, v)` pairs.
pub fn hth<T: Real>(g: &mut Graph<'_, T>, params: &HthParams, future: Var) -> Var {
    let (rows, cols) = g.shape(future);
    let flat = g.reshape(future, 1, rows * cols);
    let out = mlp(g, &params.layers, flat);
    bounded(g, out)
}

/// Fusion of the time-averaged sequence with the waypoints.
pub fn oah_condition<T: Real>(g: &mut Graph<'_, T>, params: &OahParams, sequence: Var, waypoints: Var) -> Var {
    let mean = g.mean_rows(sequence);
    let x = g.concat_cols(&[mean, waypoints]);
    mlp(g, &params.fuse, x)
}

/// Posterior mean and log-variance given the condition and a contact point.
pub fn cvae_encode<T: Real>(g: &mut Graph<'_, T>, params: &OahParams, condition: Var, contact: Var) -> (Var, Var) {
    let x = g.concat_cols(&[condition, contact]);
    let out = mlp(g, &params.encoder, x);
    let l = g.shape(out).1 / 2;
    (g.slice_cols(out, 0, l), g.slice_cols(out, l, l))
}

/// Decodes each latent row; the condition row is shared.
pub fn cvae_decode<T: Real>(g: &mut Graph<'_, T>, params: &OahParams, condition: Var, latents: Var) -> Var {
    let k = g.shape(latents).0;
    let cond = g.concat_rows(&vec![condition; k]);
    let x = g.concat_cols(&[cond, latents]);
    let out = mlp(g, &params.decoder, x);
    bounded(g, out)
}

/// `½ Σ (−logσ² + μ² + σ² − 1)` on the tape.
pub fn kl_graph<T: Real>(g: &mut Graph<'_, T>, mu: Var, logvar: Var) -> Var {
    let l = g.shape(mu).1;
    let neg = g.sum(logvar);
    let neg = g.scale(neg, -T::one());
    let mu2 = g.sum_squares(mu);
    let var = g.exp(logvar);
    let var = g.sum(var);
    let total = g.add(neg, mu2);
    let total = g.add(total, var);
    let ones = g.input(Mat::filled(1, 1, T::of_usize(l)));
    let total = g.sub(total, ones);
    g.scale(total, T::of(0.5))
}

pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| -lv + m * m + lv.exp() - 1.0)
        .sum::<f64>()
}

/// Centred unit coordinates of pixel waypoints, `1 x 2·n`.
pub fn waypoints_to_unit<T: Real>(waypoints: &[PixelPoint<f64>], spec: &SequenceSpec) -> Mat<T> {
    let data = waypoints.iter().flat_map(|&p| normalize_point::<T>(p, spec)).collect();
    Mat::from_vec(1, 2 * waypoints.len(), data).expect("two values per waypoint")
}

pub fn unit_to_points<T: Real>(values: &[T], spec: &SequenceSpec) -> Vec<PixelPoint<f64>> {
    values
        .chunks(2)
        .map(|c| denormalize_point([c[0], c[1]], spec))
        .collect()
}

/// Stand-alone trajectory head on a `n_future x a` matrix.
pub fn hth_forward<T: Real>(
    store: &ParamStore<T>,
    params: &HthParams,
    future: &Mat<T>,
    side: Side,
    spec: &SequenceSpec,
) -> Result<HandTrajectory<f64>> {
    let expected = store.get(params.layers[0].w).rows;
    if future.data.len() != expected || future.rows != spec.n_future {
        return Err(Error::config(format!(
            "trajectory head expects {} future rows totalling {expected} values, got {:?}",
            spec.n_future,
            future.shape()
        )));
    }
    let mut g = Graph::new(store.mats());
    let x = g.input(future.clone());
    let out = hth(&mut g, params, x);
    Ok(HandTrajectory::new(side, unit_to_points(&g.value(out).data, spec)))
}

pub fn oah_condition_mat<T: Real>(
    store: &ParamStore<T>,
    params: &OahParams,
    sequence: &Mat<T>,
    waypoints: &HandTrajectory<f64>,
    spec: &SequenceSpec,
) -> Result<Mat<T>> {
    let expected = store.get(params.fuse[0].w).rows;
    if sequence.cols + 2 * waypoints.len() != expected {
        return Err(Error::config("condition input width mismatch"));
    }
    let mut g = Graph::new(store.mats());
    let seq = g.input(sequence.clone());
    let wp = g.input(waypoints_to_unit(&waypoints.waypoints, spec));
    let out = oah_condition(&mut g, params, seq, wp);
    Ok(g.value(out).clone())
}

pub fn cvae_encode_mat<T: Real>(
    store: &ParamStore<T>,
    params: &OahParams,
    condition: &Mat<T>,
    contact: PixelPoint<f64>,
    spec: &SequenceSpec,
) -> (Vec<T>, Vec<T>) {
    let mut g = Graph::new(store.mats());
    let cond = g.input(condition.clone());
    let gt = g.input(waypoints_to_unit(&[contact], spec));
    let (mu, lv) = cvae_encode(&mut g, params, cond, gt);
    (g.value(mu).data.clone(), g.value(lv).data.clone())
}

pub fn cvae_decode_mat<T: Real>(
    store: &ParamStore<T>,
    params: &OahParams,
    condition: &Mat<T>,
    latents: &Mat<T>,
    spec: &SequenceSpec,
) -> Vec<PixelPoint<f64>> {
    let mut g = Graph::new(store.mats());
    let cond = g.input(condition.clone());
    let z = g.input(latents.clone());
    let out = cvae_decode(&mut g, params, cond, z);
    unit_to_points(&g.value(out).data, spec)
}

/// Draws `n` latents from the prior and decodes each.
pub fn cvae_sample<T: Real>(
    store: &ParamStore<T>,
    params: &OahParams,
    condition: &Mat<T>,
    rng: &mut impl Rng,
    n: usize,
    spec: &SequenceSpec,
) -> Result<ContactPointSet<f64>> {
    if n == 0 {
        return Err(Error::validation("need at least one contact sample"));
    }
    let l = store.get(params.decoder[0].w).rows - condition.cols;
    let latents = Mat::randn(n, l, rng);
    Ok(ContactPointSet {
        points: cvae_decode_mat(store, params, condition, &latents, spec),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const A: usize = 6;

    fn setup(seed: u64) -> (ParamStore<f64>, HthParams, OahParams, SequenceSpec) {
        let spec = SequenceSpec::default();
        let cfg = HeadsConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hth = HthParams::init(&mut store, &cfg, A, spec.n_future, &mut rng);
        let oah = OahParams::init(&mut store, &cfg, A, spec.n_future, &mut rng);
        for i in 0..store.len() {
            if store.names()[i].ends_with(".b") {
                let b = Mat::randn(1, store.get(i).cols, &mut rng).scale(0.1);
                *store.get_mut(i) = b;
            }
        }
        (store, hth, oah, spec)
    }

    fn gelu_ref(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn dense(store: &ParamStore<f64>, lin: &Linear, x: &[f64]) -> Vec<f64> {
        let (w, b) = (store.get(lin.w), store.get(lin.b));
        (0..w.cols)
            .map(|c| b.data[c] + x.iter().enumerate().map(|(r, v)| v * w.get(r, c)).sum::<f64>())
            .collect()
    }

    fn mlp_ref(store: &ParamStore<f64>, layers: &[Linear], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, l) in layers.iter().enumerate() {
            h = dense(store, l, &h);
            if i + 1 < layers.len() {
                h = h.into_iter().map(gelu_ref).collect();
            }
        }
        h
    }

    fn logistic_px(x: f64, size: f64) -> f64 {
        size / (1.0 + (-x).exp())
    }

    #[test]
    fn hth_zero_weights_give_image_centre() {
        let (mut store, hth, _, spec) = setup(0);
        store.zero_prefix("hth");
        let future = Mat::randn(spec.n_future, A, &mut ChaCha8Rng::seed_from_u64(1));
        let traj = hth_forward(&store, &hth, &future, Side::Right, &spec).unwrap();
        assert_eq!(traj.len(), spec.n_future);
        for p in traj.waypoints {
            assert_eq!((p.u, p.v), (64.0, 64.0));
        }
    }

    #[test]
    fn hth_matches_manual_mlp() {
        let (store, hth, _, spec) = setup(2);
        let future = Mat::randn(spec.n_future, A, &mut ChaCha8Rng::seed_from_u64(3));
        let traj = hth_forward(&store, &hth, &future, Side::Left, &spec).unwrap();
        let out = mlp_ref(&store, &hth.layers, &future.data);
        for (t, p) in traj.waypoints.iter().enumerate() {
            assert!((p.u - logistic_px(out[2 * t], 128.0)).abs() < 1e-10);
            assert!((p.v - logistic_px(out[2 * t + 1], 128.0)).abs() < 1e-10);
        }
        let wrong = Mat::zeros(spec.n_future + 1, A);
        assert!(hth_forward(&store, &hth, &wrong, Side::Left, &spec).is_err());
    }

    #[test]
    fn condition_examples() {
        let (mut store, hth, oah, spec) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = Mat::randn(spec.horizon(), A, &mut rng);
        let traj = hth_forward(&store, &hth, &seq.slice_rows(spec.n_past, spec.n_future), Side::Right, &spec)
            .unwrap();
        let cond = oah_condition_mat(&store, &oah, &seq, &traj, &spec).unwrap();

        let mut x: Vec<f64> = (0..A)
            .map(|c| (0..seq.rows).map(|r| seq.get(r, c)).sum::<f64>() / seq.rows as f64)
            .collect();
        for p in &traj.waypoints {
            x.push(p.u / 128.0 - 0.5);
            x.push(p.v / 128.0 - 0.5);
        }
        let want = mlp_ref(&store, &oah.fuse, &x);
        for (a, b) in cond.data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }

        // constant rows average to themselves
        let row: Vec<f64> = (0..A).map(|i| i as f64 * 0.3).collect();
        let constant = Mat::from_rows(&vec![row.clone(); spec.horizon()]).unwrap();
        let mut g = Graph::new(store.mats());
        let c = g.input(constant);
        let m = g.mean_rows(c);
        for (a, b) in g.value(m).data.iter().zip(&row) {
            assert!((a - b).abs() < 1e-15);
        }

        store.zero_prefix("oah.fuse");
        let cond = oah_condition_mat(&store, &oah, &seq, &traj, &spec).unwrap();
        assert!(cond.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cvae_examples() {
        let (mut store, _, oah, spec) = setup(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cond = Mat::randn(1, HeadsConfig::default().condition_width, &mut rng);
        let gt = PixelPoint::new(30.0, 80.0);
        let (mu, lv) = cvae_encode_mat(&store, &oah, &cond, gt, &spec);
        assert!(mu.iter().chain(&lv).all(|x| x.is_finite()));

        let mut x = cond.data.clone();
        x.extend([30.0 / 128.0 - 0.5, 80.0 / 128.0 - 0.5]);
        let want = mlp_ref(&store, &oah.encoder, &x);
        for (a, b) in mu.iter().chain(&lv).zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }

        let z = Mat::randn(1, 8, &mut rng);
        let p = cvae_decode_mat(&store, &oah, &cond, &z, &spec)[0];
        let mut x = cond.data.clone();
        x.extend(&z.data);
        let out = mlp_ref(&store, &oah.decoder, &x);
        assert!((p.u - logistic_px(out[0], 128.0)).abs() < 1e-10);
        assert!((p.v - logistic_px(out[1], 128.0)).abs() < 1e-10);
        assert_eq!(p, cvae_decode_mat(&store, &oah, &cond, &z, &spec)[0]);

        let a = cvae_sample(&store, &oah, &cond, &mut ChaCha8Rng::seed_from_u64(9), 10, &spec).unwrap();
        let b = cvae_sample(&store, &oah, &cond, &mut ChaCha8Rng::seed_from_u64(9), 10, &spec).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);

        store.zero_prefix("oah.enc");
        let (mu, lv) = cvae_encode_mat(&store, &oah, &cond, gt, &spec);
        assert!(mu.iter().chain(&lv).all(|&x| x == 0.0));
        assert_eq!(kl_divergence(&mu, &lv), 0.0);

        store.zero_prefix("oah.dec");
        let c = cvae_sample(&store, &oah, &cond, &mut rng, 5, &spec).unwrap();
        assert!(c.points.iter().all(|p| (p.u, p.v) == (64.0, 64.0)));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.0], &[0.0]), 0.0);
        assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        let (mu, lv) = ([0.3, -0.7], [0.2f64, -0.1f64]);
        let want = 0.5 * ((-0.2 + 0.09 + 0.2f64.exp() - 1.0) + (0.1 + 0.49 + (-0.1f64).exp() - 1.0));
        assert!((kl_divergence(&mu, &lv) - want).abs() < 1e-12);

        let mut g = Graph::<f64>::new(&[]);
        let m = g.input(Mat::from_vec(1, 2, mu.to_vec()).unwrap());
        let l = g.input(Mat::from_vec(1, 2, lv.to_vec()).unwrap());
        let k = kl_graph(&mut g, m, l);
        assert!((g.scalar(k) - want).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn kl_is_non_negative(mu in proptest::collection::vec(-5.0f64..5.0, 1..8), lv_seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(lv_seed);
            let lv: Vec<f64> = mu.iter().map(|_| rng.gen_range(-4.0..4.0)).collect();
            let k = kl_divergence(&mu, &lv);
            proptest::prop_assert!(k >= 0.0);
            if k == 0.0 {
                proptest::prop_assert!(mu.iter().chain(&lv).all(|&x| x == 0.0));
            }
        }
    }
}
