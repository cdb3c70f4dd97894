//! The full forecasting network: tokenizer, denoiser and both heads over one
//! parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sqrt_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::SequenceSpec;
use crate::heads::{HeadsConfig, HthParams, OahParams};
use crate::madt::{MadtConfig, MadtParams};
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::tokenizer::{TokenizerConfig, TokenizerParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub spec: SequenceSpec,
    pub tokenizer: TokenizerConfig,
    pub madt: MadtConfig,
    pub heads: HeadsConfig,
    pub diffusion_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            spec: SequenceSpec::default(),
            tokenizer: TokenizerConfig::default(),
            madt: MadtConfig::desk(),
            heads: HeadsConfig::default(),
            diffusion_steps: 1000,
        }
    }
}

impl ModelConfig {
    /// Widths used in the published model.
    pub fn paper() -> Self {
        Self {
            tokenizer: TokenizerConfig {
                latent_width: 512,
                ..TokenizerConfig::default()
            },
            madt: MadtConfig::paper(),
            heads: HeadsConfig::paper(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.tokenizer.validate()?;
        self.madt.validate()?;
        self.heads.validate()?;
        if self.spec.horizon() > self.madt.max_len {
            return Err(Error::config(format!(
                "horizon {} exceeds max_len {}",
                self.spec.horizon(),
                self.madt.max_len
            )));
        }
        if self.diffusion_steps < 2 {
            return Err(Error::config("need at least 2 diffusion steps"));
        }
        Ok(())
    }
}

/// Where each module's parameters live in the store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub tokenizer: TokenizerParams,
    pub madt: MadtParams,
    pub hth: HthParams,
    pub oah: OahParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layout: ModelLayout,
    pub store: ParamStore<T>,
    pub schedule: NoiseSchedule,
}

impl<T: Real> Model<T> {
    /// Randomly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = config.tokenizer.latent_width;
        let tokenizer = TokenizerParams::init(&mut store, &config.tokenizer, &mut rng);
        let madt = MadtParams::init(&mut store, &config.madt, a, &mut rng);
        let hth = HthParams::init(&mut store, &config.heads, a, config.spec.n_future, &mut rng);
        let oah = OahParams::init(&mut store, &config.heads, a, config.spec.n_future, &mut rng);
        Ok(Self {
            config,
            layout: ModelLayout {
                tokenizer,
                madt,
                hth,
                oah,
            },
            store,
            schedule: sqrt_schedule(config.diffusion_steps)?,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            layout: self.layout.clone(),
            store: self.store.cast(),
            schedule: self.schedule.clone(),
        }
    }

    pub fn spec(&self) -> &SequenceSpec {
        &self.config.spec
    }
}
