use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Pre-activation wide residual network.
    Wrn,
    /// CIFAR-style post-activation ResNet with 1×1 projection shortcuts.
    ResnetBasic,
    /// Conv-BN-ReLU stack, no skip connections.
    PlainCnn,
}

/// Where a tap reads the group output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapActivation {
    #[default]
    PostRelu,
    Raw,
}

pub const GROUP_TAPS: [&str; 3] = ["group1", "group2", "group3"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub depth: usize,
    /// Channel multiplier `k`.
    pub width: usize,
    pub num_classes: usize,
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    #[serde(default = "default_taps")]
    pub tap_points: Vec<String>,
    #[serde(default)]
    pub tap_activation: TapActivation,
}

fn default_taps() -> Vec<String> {
    GROUP_TAPS.iter().map(|s| s.to_string()).collect()
}

impl ModelSpec {
    pub fn new(family: Family, depth: usize, width: usize, num_classes: usize, input_shape: [usize; 3]) -> Self {
        ModelSpec {
            family,
            depth,
            width,
            num_classes,
            input_shape,
            tap_points: default_taps(),
            tap_activation: TapActivation::PostRelu,
        }
    }

    /// `WRN{depth}-{width}` on 3×32×32 inputs.
    pub fn wrn(depth: usize, width: usize, num_classes: usize) -> Self {
        Self::new(Family::Wrn, depth, width, num_classes, [3, 32, 32])
    }

    pub fn with_input(mut self, input_shape: [usize; 3]) -> Self {
        self.input_shape = input_shape;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::InvalidSpec("width multiplier must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("need at least two classes".into()));
        }
        let ok = match self.family {
            Family::Wrn => self.depth >= 10 && (self.depth - 4) % 6 == 0,
            Family::ResnetBasic => self.depth >= 8 && (self.depth - 2) % 6 == 0,
            Family::PlainCnn => self.depth >= 5 && (self.depth - 2) % 3 == 0,
        };
        if !ok {
            return Err(Error::InvalidSpec(format!(
                "depth {} is not valid for {:?}",
                self.depth, self.family
            )));
        }
        let [c, h, w] = self.input_shape;
        if c == 0 || h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidSpec(format!(
                "input {c}x{h}x{w}: need positive channels and spatial extents divisible by 4"
            )));
        }
        if self.tap_points.is_empty() {
            return Err(Error::InvalidSpec("no tap points".into()));
        }
        for tap in &self.tap_points {
            if !GROUP_TAPS.contains(&tap.as_str()) {
                return Err(Error::UnknownTap(tap.clone()));
            }
        }
        Ok(())
    }

    /// Residual blocks (or conv layers, for the plain family) per group.
    pub fn units_per_group(&self) -> usize {
        match self.family {
            Family::Wrn => (self.depth - 4) / 6,
            Family::ResnetBasic => (self.depth - 2) / 6,
            Family::PlainCnn => (self.depth - 2) / 3,
        }
    }

    pub fn group_channels(&self) -> [usize; 3] {
        [16 * self.width, 32 * self.width, 64 * self.width]
    }

    /// Spatial extent of each group's output.
    pub fn group_sizes(&self) -> [(usize, usize); 3] {
        let [_, h, w] = self.input_shape;
        [(h, w), (h / 2, w / 2), (h / 4, w / 4)]
    }

    pub fn name(&self) -> String {
        match self.family {
            Family::Wrn => format!("WRN{}-{}", self.depth, self.width),
            Family::ResnetBasic if self.width == 1 => format!("ResNet{}", self.depth),
            Family::ResnetBasic => format!("ResNet{}x{}", self.depth, self.width),
            Family::PlainCnn => format!("Plain{}-{}", self.depth, self.width),
        }
    }
}
