//! Motion-aware denoising transformer.
//!
//! Pre-norm blocks of bidirectional self-attention over the latent sequence,
//! attention from the sequence to egomotion features, and a feedforward
//! layer. The network maps `(z_s, s, M_seq)` to an estimate of `z_0`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::Side;
use crate::homography::HomographyStack;
use crate::mat::Mat;
use crate::params::{normal, LayerNorm, Linear, ParamStore};
use crate::scalar::Real;

/// How the egomotion enters each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgoConditioning {
    /// Queries from the sequence, keys and values from egomotion features.
    CrossAttention,
    /// The cross-attention block is replaced by a second self-attention
    /// block; egomotion is ignored.
    SelfAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MadtConfig {
    pub n_layers: usize,
    pub width: usize,
    pub n_heads: usize,
    pub ff_width: usize,
    pub ego_width: usize,
    pub max_len: usize,
    pub conditioning: EgoConditioning,
}

impl Default for MadtConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MadtConfig {
    pub fn desk() -> Self {
        Self {
            n_layers: 4,
            width: 64,
            n_heads: 4,
            ff_width: 256,
            ego_width: 16,
            max_len: 32,
            conditioning: EgoConditioning::CrossAttention,
        }
    }

    pub fn paper() -> Self {
        Self {
            n_layers: 6,
            width: 512,
            n_heads: 4,
            ff_width: 2048,
            ego_width: 512,
            max_len: 32,
            conditioning: EgoConditioning::CrossAttention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.n_layers,
            self.width,
            self.n_heads,
            self.ff_width,
            self.ego_width,
            self.max_len,
        ];
        if sizes.contains(&0) {
            return Err(Error::config("transformer sizes must be positive"));
        }
        if self.width % self.n_heads != 0 {
            return Err(Error::config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.n_heads
            )));
        }
        if self.width % 2 != 0 {
            return Err(Error::config("width must be even for the timestep embedding"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionParams {
    fn init<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        kv_width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            q: Linear::init(store, &format!("{name}.q"), width, width, 1.0, rng),
            k: Linear::init(store, &format!("{name}.k"), kv_width, width, 1.0, rng),
            v: Linear::init(store, &format!("{name}.v"), kv_width, width, 1.0, rng),
            o: Linear::init(store, &format!("{name}.o"), width, width, 0.5, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln_self: LayerNorm,
    pub self_attn: AttentionParams,
    pub ln_ego: LayerNorm,
    pub ego_attn: AttentionParams,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MadtParams {
    pub input: Linear,
    pub time: Linear,
    /// `max_len x width`.
    pub position: usize,
    /// `2 x width`, indexed by [`Side::index`].
    pub side: usize,
    pub motion: Linear,
    /// `max_len x ego_width`.
    pub ego_position: usize,
    pub ln_motion: LayerNorm,
    pub blocks: Vec<BlockParams>,
    pub ln_out: LayerNorm,
    pub output: Linear,
}

impl MadtParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &MadtConfig,
        latent_width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.width;
        let input = Linear::init(store, "madt.input", latent_width, d, 1.0, rng);
        let time = Linear::init(store, "madt.time", d, d, 1.0, rng);
        let position = store.add("madt.position", normal(cfg.max_len, d, 0.1, rng));
        let side = store.add("madt.side", normal(2, d, 0.1, rng));
        let motion = Linear::init(store, "madt.motion", 9, cfg.ego_width, 1.0, rng);
        let ego_position = store.add("madt.ego_position", normal(cfg.max_len, cfg.ego_width, 0.1, rng));
        let ln_motion = LayerNorm::init(store, "madt.ln_motion", cfg.ego_width);
        let kv_width = match cfg.conditioning {
            EgoConditioning::CrossAttention => cfg.ego_width,
            EgoConditioning::SelfAttention => d,
        };
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let n = format!("madt.block{l}");
                BlockParams {
                    ln_self: LayerNorm::init(store, &format!("{n}.ln_self"), d),
                    self_attn: AttentionParams::init(store, &format!("{n}.self"), d, d, rng),
                    ln_ego: LayerNorm::init(store, &format!("{n}.ln_ego"), d),
                    ego_attn: AttentionParams::init(store, &format!("{n}.ego"), d, kv_width, rng),
                    ln_ff: LayerNorm::init(store, &format!("{n}.ln_ff"), d),
                    ff_in: Linear::init(store, &format!("{n}.ff_in"), d, cfg.ff_width, 1.0, rng),
                    ff_out: Linear::init(store, &format!("{n}.ff_out"), cfg.ff_width, d, 0.5, rng),
                }
            })
            .collect();
        let ln_out = LayerNorm::init(store, "madt.ln_out", d);
        let output = Linear::init(store, "madt.output", d, latent_width, 1.0, rng);
        Self {
            input,
            time,
            position,
            side,
            motion,
            ego_position,
            ln_motion,
            blocks,
            ln_out,
            output,
        }
    }
}

/// Fixed sinusoidal embedding: sines then cosines over a geometric frequency
/// ladder with base 10000.
pub fn sinusoidal_embedding(s: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let x = s as f64 * freq;
        out[i] = x.sin();
        out[half + i] = x.cos();
    }
    out
}

/// Learned map of the sinusoidal embedding, `1 x width`.
pub fn timestep_embedding<T: Real>(g: &mut Graph<'_, T>, params: &MadtParams, s: usize, width: usize) -> Var {
    let raw = sinusoidal_embedding(s, width).into_iter().map(T::of).collect();
    let x = g.input(Mat::from_vec(1, width, raw).expect("width entries"));
    params.time.apply(g, x)
}

/// Row-major flattening of each homography, `n x 9`.
pub fn flatten_stack<T: Real>(stack: &HomographyStack<f64>) -> Mat<T> {
    let data = stack
        .mats
        .iter()
        .flat_map(|h| h.flatten())
        .map(T::of)
        .collect();
    Mat::from_vec(stack.mats.len(), 9, data).expect("nine entries per homography")
}

/// Linear motion encoder: flattened homographies mapped to the egomotion width.
pub fn motion_encode<T: Real>(g: &mut Graph<'_, T>, params: &MadtParams, stack: &HomographyStack<f64>) -> Var {
    let x = g.input(flatten_stack(stack));
    params.motion.apply(g, x)
}

fn attention<T: Real>(
    g: &mut Graph<'_, T>,
    p: &AttentionParams,
    n_heads: usize,
    x_q: Var,
    x_kv: Var,
    keep: &[bool],
) -> Var {
    let q = p.q.apply(g, x_q);
    let k = p.k.apply(g, x_kv);
    let v = p.v.apply(g, x_kv);
    let width = g.shape(q).1;
    let dh = width / n_heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let heads: Vec<Var> = (0..n_heads)
        .map(|h| {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = g.masked_softmax(scores, keep);
            g.matmul(weights, vh)
        })
        .collect();
    let cat = g.concat_cols(&heads);
    p.o.apply(g, cat)
}

/// Inputs of one denoiser call beyond the parameters.
pub struct DenoiseInput<'a> {
    pub z: Var,
    pub step: usize,
    /// Egomotion features from [`encode_ego`]; unused for
    /// [`EgoConditioning::SelfAttention`].
    pub ego: Var,
    /// Rows usable as attention keys; masked past rows are `false`.
    pub keys: &'a [bool],
    pub side: Side,
}

/// Motion encoding plus per-slot embeddings and normalization.
pub fn encode_ego<T: Real>(g: &mut Graph<'_, T>, params: &MadtParams, stack: &HomographyStack<f64>) -> Var {
    let e = motion_encode(g, params, stack);
    let n = g.shape(e).0;
    let pos = g.param(params.ego_position);
    let pos = g.slice_rows(pos, 0, n);
    let e = g.add(e, pos);
    params.ln_motion.apply(g, e)
}

pub fn denoise<T: Real>(g: &mut Graph<'_, T>, params: &MadtParams, cfg: &MadtConfig, input: &DenoiseInput<'_>) -> Var {
    let (n, _) = g.shape(input.z);
    assert!(n <= cfg.max_len, "sequence of {n} rows exceeds max_len {}", cfg.max_len);
    assert_eq!(input.keys.len(), n, "key mask length");

    let h = params.input.apply(g, input.z);
    let pos = g.param(params.position);
    let pos = g.slice_rows(pos, 0, n);
    let h = g.add(h, pos);
    let sides = g.param(params.side);
    let side = g.slice_rows(sides, input.side.index(), 1);
    let h = g.add_row(h, side);
    let te = timestep_embedding(g, params, input.step, cfg.width);
    let mut h = g.add_row(h, te);

    let ego_keys = vec![true; g.shape(input.ego).0];
    for block in &params.blocks {
        let x = block.ln_self.apply(g, h);
        let a = attention(g, &block.self_attn, cfg.n_heads, x, x, input.keys);
        h = g.add(h, a);

        let x = block.ln_ego.apply(g, h);
        let a = match cfg.conditioning {
            EgoConditioning::CrossAttention => {
                attention(g, &block.ego_attn, cfg.n_heads, x, input.ego, &ego_keys)
            }
            EgoConditioning::SelfAttention => attention(g, &block.ego_attn, cfg.n_heads, x, x, input.keys),
        };
        h = g.add(h, a);

        let x = block.ln_ff.apply(g, h);
        let f = block.ff_in.apply(g, x);
        let f = g.gelu(f);
        let f = block.ff_out.apply(g, f);
        h = g.add(h, f);
    }
    let h = params.ln_out.apply(g, h);
    params.output.apply(g, h)
}

/// Keys usable by self-attention: valid past rows and every future row.
pub fn key_mask(past_valid: &[bool], n_rows: usize) -> Vec<bool> {
    (0..n_rows).map(|r| past_valid.get(r).copied().unwrap_or(true)).collect()
}

/// One stand-alone denoiser evaluation on plain matrices.
#[allow(clippy::too_many_arguments)]
pub fn denoise_mat<T: Real>(
    store: &ParamStore<T>,
    params: &MadtParams,
    cfg: &MadtConfig,
    z: &Mat<T>,
    step: usize,
    stack: &HomographyStack<f64>,
    keys: &[bool],
    side: Side,
) -> Mat<T> {
    let mut g = Graph::new(store.mats());
    let z = g.input(z.clone());
    let ego = encode_ego(&mut g, params, stack);
    let out = denoise(
        &mut g,
        params,
        cfg,
        &DenoiseInput {
            z,
            step,
            ego,
            keys,
            side,
        },
    );
    g.value(out).clone()
}
