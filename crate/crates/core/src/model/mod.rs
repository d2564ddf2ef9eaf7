//! The coarse-to-fine exposure corrector, its discriminator, parameter
//! accounting and checkpoint persistence.

mod checkpoint;
mod corrector;
mod discriminator;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use corrector::{Corrector, CorrectorOutput};
pub use discriminator::Discriminator;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::CHANNELS;
use crate::pyramid::ScaleVector;

/// Negative slope of every LeakyReLU in both networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// One U-Net style subnet. `depth` counts the pooling steps, so the encoder
/// has `depth + 1` scales with `base_channels * 2^i` channels each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubnetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl SubnetConfig {
    pub fn new(depth: usize, base_channels: usize) -> Self {
        Self {
            depth,
            base_channels,
            in_channels: CHANNELS,
            out_channels: CHANNELS,
            kernel: 3,
        }
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("subnet {index}: {m}")));
        if self.depth == 0 || self.depth > 8 {
            return bad(format!("depth {} outside 1..=8", self.depth));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.in_channels != CHANNELS || self.out_channels != CHANNELS {
            return bad("only 3-channel input and output are supported".into());
        }
        if self.kernel != 3 {
            return bad(format!("kernel {} unsupported, expected 3", self.kernel));
        }
        Ok(())
    }
}

/// Corrector architecture. `subnets[0]` processes the coarsest level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n: usize,
    pub subnets: Vec<SubnetConfig>,
    pub scale_defaults: ScaleVector,
}

impl ModelConfig {
    fn from_lists(depths: &[usize], base: &[usize]) -> Self {
        let n = depths.len();
        Self {
            n,
            subnets: depths
                .iter()
                .zip(base)
                .map(|(&d, &b)| SubnetConfig::new(d, b))
                .collect(),
            scale_defaults: ScaleVector::editing_default(n),
        }
    }

    /// Full-size network, about 7M parameters.
    pub fn paper() -> Self {
        Self::from_lists(&[4, 3, 3, 3], &[24, 24, 24, 16])
    }

    /// Same topology at a width that trains on a single CPU core.
    pub fn desk() -> Self {
        Self::from_lists(&[4, 3, 3, 3], &[8, 8, 8, 8])
    }

    /// Two-channel network for gradient checks.
    pub fn tiny() -> Self {
        Self::from_lists(&[2, 1, 1, 1], &[2, 2, 2, 2])
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown model preset {other:?} (expected paper, desk or tiny)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > 8 {
            return Err(Error::Config(format!("n = {} outside 1..=8", self.n)));
        }
        if self.subnets.len() != self.n {
            return Err(Error::Config(format!(
                "{} subnets configured for n = {}",
                self.subnets.len(),
                self.n
            )));
        }
        if self.scale_defaults.len() != self.n {
            return Err(Error::Config(format!(
                "scale_defaults has {} entries for n = {}",
                self.scale_defaults.len(),
                self.n
            )));
        }
        self.subnets
            .iter()
            .enumerate()
            .try_for_each(|(i, s)| s.validate(i + 1))
    }
}

/// Discriminator architecture: stride-2 3x3 convs, global average pooling
/// and a single linear output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub input_size: usize,
    pub channels: Vec<usize>,
}

impl DiscriminatorConfig {
    pub fn paper() -> Self {
        Self {
            input_size: 256,
            channels: vec![16, 32, 64, 128, 256, 256],
        }
    }

    pub fn desk() -> Self {
        Self {
            input_size: 64,
            channels: vec![8, 16, 32, 32, 32],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" | "tiny" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown discriminator preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("discriminator needs non-zero channel widths".into()));
        }
        if self.input_size == 0 {
            return Err(Error::Config("discriminator input_size must be positive".into()));
        }
        Ok(())
    }

    pub fn count_params(&self) -> usize {
        let mut cin = CHANNELS;
        let mut total = 0;
        for &c in &self.channels {
            total += conv_params(cin, c, 3);
            cin = c;
        }
        total + conv_params(cin, 1, 1)
    }
}

/// Parameter counts derived from the architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub per_subnet: Vec<usize>,
    pub upscale: usize,
    pub total: usize,
}

fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

pub fn subnet_params(s: &SubnetConfig) -> usize {
    let k = s.kernel;
    let mut total = 0;
    let mut cin = s.in_channels;
    for i in 0..=s.depth {
        let c = s.channels(i);
        total += conv_params(cin, c, k) + conv_params(c, c, k);
        cin = c;
    }
    for i in (0..s.depth).rev() {
        let c = s.channels(i);
        total += conv_params(s.channels(i + 1), c, 2);
        total += conv_params(2 * c, c, k) + conv_params(c, c, k);
    }
    total + conv_params(s.channels(0), s.out_channels, 1)
}

pub fn count_params(config: &ModelConfig) -> ParamCounts {
    let per_subnet: Vec<usize> = config.subnets.iter().map(subnet_params).collect();
    let upscale = config.n.saturating_sub(1) * conv_params(CHANNELS, CHANNELS, 2);
    let total = per_subnet.iter().sum::<usize>() + upscale;
    ParamCounts {
        per_subnet,
        upscale,
        total,
    }
}
