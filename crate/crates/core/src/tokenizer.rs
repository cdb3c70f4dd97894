//! Side-oriented fusion of per-frame observations into latent rows.
//!
//! Hand, object and global features are embedded separately, concatenated and
//! mapped to the latent width by a side-specific linear layer. Rows of frames
//! where the side is not visible are exactly zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{PixelPoint, SequenceSpec, Side};
use crate::mat::Mat;
use crate::params::{Linear, ParamStore};
use crate::scalar::Real;
use crate::synthgen::{FrameObservation, ObservationSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub hand_width: usize,
    pub object_width: usize,
    pub global_width: usize,
    /// Length of the observed global context vector.
    pub global_in: usize,
    pub latent_width: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            hand_width: 8,
            object_width: 8,
            global_width: 8,
            global_in: 8,
            latent_width: 32,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if [
            self.hand_width,
            self.object_width,
            self.global_width,
            self.global_in,
            self.latent_width,
        ]
        .contains(&0)
        {
            return Err(Error::config("tokenizer widths must be positive"));
        }
        Ok(())
    }

    fn fused_width(&self) -> usize {
        self.hand_width + self.object_width + self.global_width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerParams {
    pub hand: Linear,
    pub object: Linear,
    pub global: Linear,
    /// Indexed by [`Side::index`].
    pub fuse: [Linear; 2],
}

impl TokenizerParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, cfg: &TokenizerConfig, rng: &mut impl Rng) -> Self {
        let hand = Linear::init(store, "tok.hand", 2, cfg.hand_width, 1.0, rng);
        let object = Linear::init(store, "tok.object", 2, cfg.object_width, 1.0, rng);
        let global = Linear::init(store, "tok.global", cfg.global_in, cfg.global_width, 1.0, rng);
        let fuse = [
            Linear::init(store, "tok.fuse.right", cfg.fused_width(), cfg.latent_width, 1.0, rng),
            Linear::init(store, "tok.fuse.left", cfg.fused_width(), cfg.latent_width, 1.0, rng),
        ];
        Self {
            hand,
            object,
            global,
            fuse,
        }
    }
}

/// Rows of raw tokenizer input for one side.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenInputs<T> {
    /// Normalized hand coordinates, `rows x 2`.
    pub hand: Mat<T>,
    pub object: Mat<T>,
    /// 1 where an object centre is present, broadcast to the object width.
    pub object_present: Vec<bool>,
    pub global: Mat<T>,
    pub valid: Vec<bool>,
}

impl<T: Real> TokenInputs<T> {
    pub fn rows(&self) -> usize {
        self.valid.len()
    }
}

/// Pixel to centred unit coordinates: `u / W - 0.5`.
pub fn normalize_point<T: Real>(p: PixelPoint<f64>, spec: &SequenceSpec) -> [T; 2] {
    [
        T::of(p.u / spec.image_width - 0.5),
        T::of(p.v / spec.image_height - 0.5),
    ]
}

pub fn denormalize_point<T: Real>(x: [T; 2], spec: &SequenceSpec) -> PixelPoint<f64> {
    PixelPoint::new(
        (x[0].to_f64_lossy() + 0.5) * spec.image_width,
        (x[1].to_f64_lossy() + 0.5) * spec.image_height,
    )
}

struct RowBuilder<T> {
    hand: Vec<T>,
    object: Vec<T>,
    object_present: Vec<bool>,
    global: Vec<T>,
    valid: Vec<bool>,
    global_in: usize,
}

impl<T: Real> RowBuilder<T> {
    fn new(global_in: usize) -> Self {
        Self {
            hand: Vec::new(),
            object: Vec::new(),
            object_present: Vec::new(),
            global: Vec::new(),
            valid: Vec::new(),
            global_in,
        }
    }

    fn push(
        &mut self,
        hand: Option<PixelPoint<f64>>,
        object: Option<PixelPoint<f64>>,
        global: &[f64],
        spec: &SequenceSpec,
    ) -> Result<()> {
        if global.len() != self.global_in {
            return Err(Error::config(format!(
                "global context has {} values, tokenizer expects {}",
                global.len(),
                self.global_in
            )));
        }
        let h = hand.map_or([T::zero(); 2], |p| normalize_point(p, spec));
        let o = object.map_or([T::zero(); 2], |p| normalize_point(p, spec));
        self.hand.extend(h);
        self.object.extend(o);
        self.object_present.push(object.is_some());
        self.global.extend(global.iter().map(|&x| T::of(x)));
        self.valid.push(hand.is_some());
        Ok(())
    }

    fn finish(self) -> TokenInputs<T> {
        let n = self.valid.len();
        TokenInputs {
            hand: Mat::from_vec(n, 2, self.hand).expect("two columns"),
            object: Mat::from_vec(n, 2, self.object).expect("two columns"),
            object_present: self.object_present,
            global: Mat::from_vec(n, self.global_in, self.global).expect("global width"),
            valid: self.valid,
        }
    }
}

pub fn frame_inputs<T: Real>(
    obs: &FrameObservation,
    side: Side,
    cfg: &TokenizerConfig,
    spec: &SequenceSpec,
) -> Result<TokenInputs<T>> {
    let mut b = RowBuilder::new(cfg.global_in);
    let hand = if obs.valid(side) { obs.hand(side) } else { None };
    b.push(hand, obs.object_center, &obs.global_context, spec)?;
    Ok(b.finish())
}

/// Inputs for the past frames and, optionally, the ground-truth future.
///
/// Future rows carry the ground-truth canvas waypoints together with the last
/// observed object centre and global context.
pub fn sequence_inputs<T: Real>(
    episode: &ObservationSequence,
    side: Side,
    cfg: &TokenizerConfig,
    include_future_gt: bool,
) -> Result<TokenInputs<T>> {
    let spec = &episode.spec;
    let mut b = RowBuilder::new(cfg.global_in);
    for f in &episode.frames {
        let hand = if f.valid(side) { f.hand(side) } else { None };
        b.push(hand, f.object_center, &f.global_context, spec)?;
    }
    if include_future_gt {
        let truth = episode
            .gt
            .side(side)
            .ok_or_else(|| Error::validation(format!("no ground truth for {side:?}")))?;
        let object = episode.frames.iter().rev().find_map(|f| f.object_center);
        let last = episode.frames.last().expect("n_past >= 2");
        for &p in &truth.trajectory.waypoints {
            b.push(Some(p), object, &last.global_context, spec)?;
        }
    }
    Ok(b.finish())
}

fn present_mask<T: Real>(flags: &[bool], width: usize) -> Mat<T> {
    let mut m = Mat::zeros(flags.len(), width);
    for (r, &f) in flags.iter().enumerate() {
        if f {
            m.row_mut(r).iter_mut().for_each(|x| *x = T::one());
        }
    }
    m
}

/// Records the tokenizer on `g`; returns a `rows x latent_width` variable.
pub fn tokenize<T: Real>(
    g: &mut Graph<'_, T>,
    params: &TokenizerParams,
    side: Side,
    inputs: &TokenInputs<T>,
) -> Var {
    let hand_in = g.input(inputs.hand.clone());
    let hand = params.hand.apply(g, hand_in);
    let object_in = g.input(inputs.object.clone());
    let object = params.object.apply(g, object_in);
    let object_width = g.shape(object).1;
    let present = g.input(present_mask(&inputs.object_present, object_width));
    let object = g.mul(object, present);
    let global_in = g.input(inputs.global.clone());
    let global = params.global.apply(g, global_in);
    let fused_in = g.concat_cols(&[hand, object, global]);
    let fused = params.fuse[side.index()].apply(g, fused_in);
    let width = g.shape(fused).1;
    let valid = g.input(present_mask(&inputs.valid, width));
    g.mul(fused, valid)
}

/// Side-specific latent sequence: `n_past + X` rows, invalid rows zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence<T> {
    pub side: Side,
    pub rows: Mat<T>,
    pub valid: Vec<bool>,
}

pub fn embed_frame<T: Real>(
    obs: &FrameObservation,
    side: Side,
    params: &TokenizerParams,
    cfg: &TokenizerConfig,
    spec: &SequenceSpec,
    store: &ParamStore<T>,
) -> Result<Vec<T>> {
    let inputs = frame_inputs(obs, side, cfg, spec)?;
    let mut g = Graph::new(store.mats());
    let out = tokenize(&mut g, params, side, &inputs);
    Ok(g.value(out).data.clone())
}

pub fn assemble_sequence<T: Real>(
    episode: &ObservationSequence,
    side: Side,
    params: &TokenizerParams,
    cfg: &TokenizerConfig,
    store: &ParamStore<T>,
    include_future_gt: bool,
) -> Result<LatentSequence<T>> {
    let inputs = sequence_inputs(episode, side, cfg, include_future_gt)?;
    let mut g = Graph::new(store.mats());
    let out = tokenize(&mut g, params, side, &inputs);
    Ok(LatentSequence {
        side,
        rows: g.value(out).clone(),
        valid: inputs.valid,
    })
}
