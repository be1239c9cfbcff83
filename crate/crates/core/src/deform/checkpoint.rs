//! Checkpoint files: the full training state as structured text, written so
//! a resumed run continues bit-for-bit where the original left off.

use super::optim::AdamState;
use super::train::TrainConfig;
use super::{ConvLayer, DeformNet};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Flat parameters of one layer plus its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub in_ch: usize,
    pub out_ch: usize,
    /// Taps along the ring; 1 for the per-vertex linear head.
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerSnapshot {
    fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidParam {
                name: "kernel",
                reason: format!("kernel size must be odd, got {}", self.kernel),
            });
        }
        if self.weight.len() != self.out_ch * self.kernel * self.in_ch {
            return Err(Error::ShapeMismatch {
                expected: format!("{} weights", self.out_ch * self.kernel * self.in_ch),
                got: format!("{}", self.weight.len()),
            });
        }
        if self.bias.len() != self.out_ch {
            return Err(Error::ShapeMismatch {
                expected: format!("{} biases", self.out_ch),
                got: format!("{}", self.bias.len()),
            });
        }
        if self
            .weight
            .iter()
            .chain(&self.bias)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        Ok(())
    }
}

/// A paused training run: config echo, step reached, every parameter, and
/// the optimizer moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Global steps already taken.
    pub step: usize,
    pub layers: Vec<LayerSnapshot>,
    pub head: LayerSnapshot,
    pub adam: AdamState,
}

impl Checkpoint {
    /// Snapshot the current training state.
    pub fn capture(
        net: &DeformNet,
        state: &AdamState,
        step: usize,
        config: &TrainConfig,
    ) -> Checkpoint {
        let layers = net
            .layers
            .iter()
            .map(|l| LayerSnapshot {
                in_ch: l.in_ch,
                out_ch: l.out_ch,
                kernel: l.kernel,
                weight: l.weight.clone(),
                bias: l.bias.clone(),
            })
            .collect();
        let hidden = net.head_weight.len() / 2;
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: config.clone(),
            step,
            layers,
            head: LayerSnapshot {
                in_ch: hidden,
                out_ch: 2,
                kernel: 1,
                weight: net.head_weight.clone(),
                bias: net.head_bias.clone(),
            },
            adam: state.clone(),
        }
    }

    /// Rebuild the net this checkpoint describes.
    pub fn to_net(&self) -> Result<DeformNet> {
        if self.layers.is_empty() {
            return Err(Error::InvalidParam {
                name: "layers",
                reason: "checkpoint holds no convolution layers".into(),
            });
        }
        let mut prev_out = self.layers[0].in_ch;
        for snap in &self.layers {
            snap.validate()?;
            if snap.in_ch != prev_out {
                return Err(Error::ShapeMismatch {
                    expected: format!("{prev_out} input channels"),
                    got: format!("{}", snap.in_ch),
                });
            }
            prev_out = snap.out_ch;
        }
        self.head.validate()?;
        if self.head.in_ch != prev_out || self.head.out_ch != 2 || self.head.kernel != 1 {
            return Err(Error::InvalidParam {
                name: "head",
                reason: "head must map the last hidden width to 2 outputs".into(),
            });
        }
        let layers = self
            .layers
            .iter()
            .map(|s| ConvLayer {
                in_ch: s.in_ch,
                out_ch: s.out_ch,
                kernel: s.kernel,
                weight: s.weight.clone(),
                bias: s.bias.clone(),
            })
            .collect();
        Ok(DeformNet {
            layers,
            head_weight: self.head.weight.clone(),
            head_bias: self.head.bias.clone(),
        })
    }
}

/// Write a checkpoint as structured text.
pub fn save_checkpoint<P: AsRef<Path>>(path: P, ckpt: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string_pretty(ckpt)?;
    fs::write(path, text)?;
    Ok(())
}

/// Read a checkpoint back, rejecting unknown format versions.
pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: ckpt.format_version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    Ok(ckpt)
}
