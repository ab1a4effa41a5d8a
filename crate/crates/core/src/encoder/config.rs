use crate::error::{Error, Result};

/// Frontend: one strided 1-D convolution (stride 2, kernel 3, same padding)
/// followed by a linear projection. It subsamples time by 2 and is
/// unmaskable base cost.
pub const FRONTEND_KERNEL: usize = 3;
pub const FRONTEND_STRIDE: usize = 2;
pub const FRONTEND_PAD: usize = 1;

/// FFN hidden width multiplier; with chunk size d_model this yields 4 chunks.
pub const FFN_MULT: usize = 4;

/// Number of frames after the frontend for a `t`-frame input.
pub fn subsampled_len(t: usize) -> usize {
    if t == 0 {
        return 0;
    }
    (t + 2 * FRONTEND_PAD - FRONTEND_KERNEL) / FRONTEND_STRIDE + 1
}

/// Selection granularity: whole modules, or FFN chunks / attention heads /
/// whole conv modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Layer,
    Component,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub d_model: usize,
    pub input_dim: usize,
    /// Number of real output labels V; the head emits V+1 classes (blank).
    pub vocab_size: usize,
    pub conv_kernel: usize,
    pub dropout_base: f64,
    pub granularity: Granularity,
    /// Capacity of the learned absolute positional embedding table.
    pub max_frames: usize,
}

impl EncoderConfig {
    /// d_model/64 rounded to the nearest head count, at least 1.
    pub fn num_heads(&self) -> usize {
        ((self.d_model as f64 / 64.0).round() as usize).max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads()
    }

    pub fn ffn_hidden(&self) -> usize {
        FFN_MULT * self.d_model
    }

    /// Channel chunk size equals d_model, so each FFN has 4 chunks.
    pub fn chunk_size(&self) -> usize {
        self.d_model
    }

    pub fn num_chunks(&self) -> usize {
        FFN_MULT
    }

    pub fn classes(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.input_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "d_model, input_dim and vocab_size must be positive".into(),
            ));
        }
        if self.d_model % self.num_heads() != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model,
                self.num_heads()
            )));
        }
        if self.ffn_hidden() % self.chunk_size() != 0 {
            return Err(Error::Config(format!(
                "ffn hidden {} not divisible by chunk size {}",
                self.ffn_hidden(),
                self.chunk_size()
            )));
        }
        if self.conv_kernel % 2 == 0 || self.conv_kernel == 0 {
            return Err(Error::Config(format!(
                "conv_kernel {} must be odd",
                self.conv_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_base) {
            return Err(Error::Config(format!(
                "dropout_base {} outside [0,1)",
                self.dropout_base
            )));
        }
        if self.max_frames == 0 {
            return Err(Error::Config("max_frames must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_halves_rounding_up() {
        assert_eq!(subsampled_len(0), 0);
        assert_eq!(subsampled_len(1), 1);
        assert_eq!(subsampled_len(2), 1);
        assert_eq!(subsampled_len(3), 2);
        assert_eq!(subsampled_len(10), 5);
        assert_eq!(subsampled_len(11), 6);
    }

    #[test]
    fn head_count_rounds_to_at_least_one() {
        let mut c = EncoderConfig {
            num_blocks: 2,
            d_model: 512,
            input_dim: 16,
            vocab_size: 8,
            conv_kernel: 7,
            dropout_base: 0.1,
            granularity: Granularity::Component,
            max_frames: 64,
        };
        assert_eq!(c.num_heads(), 8);
        c.d_model = 64;
        assert_eq!(c.num_heads(), 1);
        c.d_model = 32;
        assert_eq!(c.num_heads(), 1);
        assert_eq!(c.head_dim(), 32);
        c.validate().unwrap();
    }

    #[test]
    fn indivisible_dimensions_are_config_errors() {
        let c = EncoderConfig {
            num_blocks: 1,
            d_model: 130, // 2 heads, 130 % 2 == 0 is fine; use 129
            input_dim: 4,
            vocab_size: 4,
            conv_kernel: 3,
            dropout_base: 0.0,
            granularity: Granularity::Layer,
            max_frames: 8,
        };
        c.validate().unwrap();
        let c2 = EncoderConfig { d_model: 129, ..c };
        assert!(c2.validate().is_err());
        let c3 = EncoderConfig {
            conv_kernel: 4,
            d_model: 128,
            ..c2
        };
        assert!(c3.validate().is_err());
    }
}
