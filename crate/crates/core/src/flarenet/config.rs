use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Number of convolution blocks in the trunk.
pub const NUM_BLOCKS: usize = 6;
/// Zero-based indices of the blocks whose outputs feed attention estimators 1..3.
pub const ATTENTION_TAPS: [usize; 3] = [2, 3, 4];
pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Baseline: classifier on the global descriptor.
    M1,
    /// Classifier on the concatenated attention summaries.
    M2,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::M1 => "m1",
            ModelKind::M2 => "m2",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m1" => Ok(ModelKind::M1),
            "m2" => Ok(ModelKind::M2),
            other => Err(Error::Config(format!("unknown model kind {other:?} (expected m1 or m2)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Side of the square single-channel input, a power of two >= 32.
    pub input_side: usize,
    pub block_channels: [usize; NUM_BLOCKS],
    /// Width of the global descriptor; equals the last block's channel count.
    pub g_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_side: 256,
            block_channels: [32, 64, 128, 256, 512, 512],
            g_dim: 512,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            input_side: 32,
            block_channels: [4, 8, 8, 8, 16, 16],
            g_dim: 16,
        }
    }

    /// Reduced-width configuration for CPU training on 64x64 inputs.
    pub fn desk() -> Self {
        ModelConfig {
            input_side: 64,
            block_channels: [8, 16, 16, 32, 32, 32],
            g_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side < 32 || !self.input_side.is_power_of_two() {
            return Err(Error::Config(format!(
                "input_side must be a power of two >= 32, got {}",
                self.input_side
            )));
        }
        if let Some(c) = self.block_channels.iter().find(|&&c| c == 0) {
            return Err(Error::Config(format!("block channel counts must be positive, got {c}")));
        }
        if self.g_dim != self.block_channels[NUM_BLOCKS - 1] {
            return Err(Error::Config(format!(
                "g_dim ({}) must equal the last block's channel count ({})",
                self.g_dim,
                self.block_channels[NUM_BLOCKS - 1]
            )));
        }
        Ok(())
    }

    /// Spatial side at which block `b` (zero-based) operates.
    pub fn block_side(&self, b: usize) -> usize {
        (self.input_side >> b).max(1)
    }

    /// Whether block `b` ends with a 2x2 max-pool. The last block skips it
    /// when it already operates on a single pixel (inputs below 64).
    pub fn block_pools(&self, b: usize) -> bool {
        self.block_side(b) >= 2
    }

    /// Kernel side of the final convolution: whatever spatial extent remains
    /// after the six blocks (`input_side / 64`, at least 1).
    pub fn final_kernel(&self) -> usize {
        let last = NUM_BLOCKS - 1;
        if self.block_pools(last) {
            self.block_side(last) / 2
        } else {
            self.block_side(last)
        }
    }

    /// Attention map side for estimator `s` in 1..=3 (`input_side / 4, / 8, / 16`).
    pub fn attention_side(&self, s: usize) -> usize {
        self.block_side(ATTENTION_TAPS[s - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_geometry() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.final_kernel(), 4);
        assert_eq!((c.attention_side(1), c.attention_side(2), c.attention_side(3)), (64, 32, 16));
    }

    #[test]
    fn desk_and_tiny_geometry() {
        let d = ModelConfig::desk();
        d.validate().unwrap();
        assert_eq!(d.final_kernel(), 1);
        assert_eq!((d.attention_side(1), d.attention_side(2), d.attention_side(3)), (16, 8, 4));
        let t = ModelConfig::tiny();
        t.validate().unwrap();
        assert_eq!(t.final_kernel(), 1);
        assert!(!t.block_pools(5));
        assert_eq!(t.attention_side(3), 2);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::default();
        c.input_side = 100;
        assert!(c.validate().is_err());
        c.input_side = 16;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.g_dim = 256;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.block_channels[2] = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kind_parses() {
        assert_eq!("M2".parse::<ModelKind>().unwrap(), ModelKind::M2);
        assert!("m3".parse::<ModelKind>().is_err());
    }
}
