use super::{NetError, Result};
use serde::{Deserialize, Serialize};

/// Dense-connectivity classifier description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenseNetConfig {
    /// 2 for slices, 3 for volumes.
    pub spatial_dims: usize,
    pub block_layers: Vec<usize>,
    pub growth_rate: usize,
    pub init_channels: usize,
    /// Bottleneck width multiplier for the 1×1 convolution.
    pub bn_size: usize,
    /// Transition compression θ in (0, 1].
    pub compression: f64,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Spatial extent of one input sample.
    pub input_shape: Vec<usize>,
    pub dropout_rate: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for DenseNetConfig {
    fn default() -> Self {
        Self::tiny(3, 32)
    }
}

impl DenseNetConfig {
    /// DenseNet-121: blocks `[6, 12, 24, 16]`, k = 32, 64 stem channels, θ = 0.5.
    pub fn densenet121(spatial_dims: usize, side: usize) -> Self {
        Self {
            spatial_dims,
            block_layers: vec![6, 12, 24, 16],
            growth_rate: 32,
            init_channels: 64,
            bn_size: 4,
            compression: 0.5,
            num_classes: 2,
            in_channels: 1,
            input_shape: vec![side; spatial_dims],
            dropout_rate: 0.0,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    /// Desk-scale configuration: two blocks of two layers, k = 4, 8 stem channels.
    pub fn tiny(spatial_dims: usize, side: usize) -> Self {
        Self {
            block_layers: vec![2, 2],
            growth_rate: 4,
            init_channels: 8,
            ..Self::densenet121(spatial_dims, side)
        }
    }

    /// Validates the configuration and derives channel/spatial bookkeeping.
    pub fn plan(&self) -> Result<ChannelPlan> {
        let bad = |m: String| Err(NetError::ConfigInvalid(m));
        if !(2..=3).contains(&self.spatial_dims) {
            return bad(format!("spatial_dims must be 2 or 3, got {}", self.spatial_dims));
        }
        if self.input_shape.len() != self.spatial_dims {
            return bad(format!("input_shape {:?} does not have {} axes", self.input_shape, self.spatial_dims));
        }
        if self.block_layers.is_empty() || self.block_layers.contains(&0) {
            return bad(format!("block_layers must be non-empty and positive: {:?}", self.block_layers));
        }
        if self.growth_rate == 0 || self.init_channels == 0 || self.bn_size == 0 || self.in_channels == 0 {
            return bad("growth_rate, init_channels, bn_size and in_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!("compression must lie in (0, 1], got {}", self.compression));
        }
        if !(self.dropout_rate >= 0.0 && self.dropout_rate < 1.0) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.bn_momentum >= 0.0 && self.bn_momentum < 1.0) || !(self.bn_eps > 0.0) {
            return bad("bn_momentum must lie in [0,1) and bn_eps must be positive".into());
        }
        if self.input_shape.contains(&0) {
            return bad("input_shape must be positive".into());
        }
        // stem: conv 7/2/3 then max pool 3/2/1
        let mut spatial: Vec<usize> = self
            .input_shape
            .iter()
            .map(|&s| {
                let c = (s + 6 - 7) / 2 + 1;
                (c + 2 - 3) / 2 + 1
            })
            .collect();
        let mut channels = self.init_channels;
        let mut stages = vec![Stage::Stem { channels, spatial: spatial.clone() }];
        for (i, &layers) in self.block_layers.iter().enumerate() {
            let out = channels + layers * self.growth_rate;
            stages.push(Stage::Block { index: i + 1, layers, in_channels: channels, out_channels: out });
            channels = out;
            if i + 1 < self.block_layers.len() {
                let next = (self.compression * channels as f64).floor() as usize;
                if next < 1 {
                    return bad(format!("transition {} compresses {channels} channels to zero", i + 1));
                }
                if spatial.iter().any(|&s| s < 2) {
                    return bad(format!(
                        "spatial extent {spatial:?} too small for transition {}; enlarge input_shape",
                        i + 1
                    ));
                }
                spatial = spatial.iter().map(|s| s / 2).collect();
                stages.push(Stage::Transition {
                    index: i + 1,
                    in_channels: channels,
                    out_channels: next,
                    spatial: spatial.clone(),
                });
                channels = next;
            }
        }
        Ok(ChannelPlan { stages, feature_width: channels, final_spatial: spatial })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    Stem { channels: usize, spatial: Vec<usize> },
    Block { index: usize, layers: usize, in_channels: usize, out_channels: usize },
    Transition { index: usize, in_channels: usize, out_channels: usize, spatial: Vec<usize> },
}

/// Channel and spatial bookkeeping derived from a config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPlan {
    pub stages: Vec<Stage>,
    /// Width of the pooled feature vector fed to the head.
    pub feature_width: usize,
    pub final_spatial: Vec<usize>,
}

impl ChannelPlan {
    /// Output channels after the stem and after every block and transition.
    pub fn channel_trace(&self) -> Vec<usize> {
        self.stages
            .iter()
            .map(|s| match s {
                Stage::Stem { channels, .. } => *channels,
                Stage::Block { out_channels, .. } | Stage::Transition { out_channels, .. } => *out_channels,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densenet121_trace() {
        let plan = DenseNetConfig::densenet121(3, 32).plan().unwrap();
        assert_eq!(plan.channel_trace(), vec![64, 256, 128, 512, 256, 1024, 512, 1024]);
        assert_eq!(plan.feature_width, 1024);
    }

    #[test]
    fn tiny_trace() {
        let plan = DenseNetConfig::tiny(3, 32).plan().unwrap();
        assert_eq!(plan.channel_trace(), vec![8, 16, 8, 16]);
        assert_eq!(plan.feature_width, 16);
        assert_eq!(plan.final_spatial, vec![4, 4, 4]);
    }

    #[test]
    fn rejects_invalid() {
        let mut c = DenseNetConfig::tiny(3, 32);
        c.compression = 0.0;
        assert!(c.plan().is_err());
        let mut c = DenseNetConfig::tiny(3, 32);
        c.block_layers = vec![];
        assert!(c.plan().is_err());
        let c = DenseNetConfig::tiny(3, 4);
        assert!(matches!(c.plan(), Err(NetError::ConfigInvalid(_))));
        let mut c = DenseNetConfig::tiny(2, 32);
        c.input_shape = vec![32, 32, 32];
        assert!(c.plan().is_err());
    }

    #[test]
    fn compression_to_zero_rejected() {
        let mut c = DenseNetConfig::tiny(2, 32);
        c.init_channels = 1;
        c.growth_rate = 1;
        c.block_layers = vec![1, 1];
        c.compression = 0.4;
        assert!(c.plan().is_err());
    }
}
