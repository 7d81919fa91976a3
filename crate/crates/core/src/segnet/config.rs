use serde::{Deserialize, Serialize};

use super::SegnetError;

/// One block of the declarative architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    /// `repeat` × (conv → ReLU → batch norm).
    Conv {
        kernel: usize,
        dilation: usize,
        filters: usize,
        #[serde(default = "one")]
        repeat: usize,
    },
    MaxPool { size: usize, stride: usize },
    /// Parallel ASPP branch: conv → ReLU → batch norm.
    AsppBranch { kernel: usize, dilation: usize, filters: usize },
    /// Image-level ASPP branch: global average pool → 1×1 conv → ReLU, then
    /// broadcast back to the feature-map size.
    AsppPooling { filters: usize },
    Concat,
    Dropout { rate: f64 },
    Conv1x1 { filters: usize },
    Upsample { factor: usize },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }
}

/// Front stages (convs and pools) → ASPP branches → concat → dropout →
/// optional 1×1 fusion conv → 1×1 classifier → bilinear upsample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub front_stages: Vec<BlockSpec>,
    pub aspp_branches: Vec<BlockSpec>,
    pub dropout_rate: f64,
    /// Filters of the 1×1 conv between dropout and the classifier; 0 skips it.
    pub fuse_filters: usize,
    pub num_classes: usize,
    pub output_stride: usize,
    #[serde(default)]
    pub batch_norm: BatchNormConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::with_widths(64, 128, 256)
    }
}

impl NetworkConfig {
    /// The default layout with custom filter counts for the two front stages
    /// and the ASPP/fusion width.
    pub fn with_widths(stage1: usize, stage2: usize, aspp: usize) -> Self {
        let conv = |filters| BlockSpec::Conv {
            kernel: 3,
            dilation: 1,
            filters,
            repeat: 2,
        };
        let pool = BlockSpec::MaxPool { size: 2, stride: 2 };
        let branch = |kernel, dilation| BlockSpec::AsppBranch {
            kernel,
            dilation,
            filters: aspp,
        };
        Self {
            in_channels: 6,
            front_stages: vec![conv(stage1), pool.clone(), conv(stage2), pool],
            aspp_branches: vec![
                branch(1, 1),
                branch(3, 6),
                branch(3, 12),
                branch(3, 18),
                BlockSpec::AsppPooling { filters: aspp },
            ],
            dropout_rate: 0.5,
            fuse_filters: aspp,
            num_classes: 24,
            output_stride: 4,
            batch_norm: BatchNormConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SegnetError> {
        let invalid = |msg: String| Err(SegnetError::InvalidConfig(msg));
        if self.in_channels == 0 || self.num_classes == 0 {
            return invalid("channel and class counts must be positive".into());
        }
        let mut pools = 0;
        let mut stride = 1;
        for block in &self.front_stages {
            match *block {
                BlockSpec::Conv {
                    kernel,
                    dilation,
                    filters,
                    repeat,
                } => {
                    if kernel % 2 == 0 || dilation == 0 || filters == 0 || repeat == 0 {
                        return invalid(format!("bad conv block {block:?}"));
                    }
                }
                BlockSpec::MaxPool { size, stride: s } => {
                    if size == 0 || s == 0 {
                        return invalid(format!("bad pool block {block:?}"));
                    }
                    pools += 1;
                    stride *= s;
                }
                _ => return invalid(format!("{block:?} is not allowed before the ASPP module")),
            }
        }
        if pools != 2 {
            return invalid(format!("exactly two pooling steps must precede ASPP, found {pools}"));
        }
        if stride != self.output_stride {
            return invalid(format!(
                "pool strides give output stride {stride}, config says {}",
                self.output_stride
            ));
        }
        if self.aspp_branches.is_empty() {
            return invalid("ASPP needs at least one branch".into());
        }
        for block in &self.aspp_branches {
            match *block {
                BlockSpec::AsppBranch {
                    kernel,
                    dilation,
                    filters,
                } if kernel % 2 == 1 && dilation > 0 && filters > 0 => {}
                BlockSpec::AsppPooling { filters } if filters > 0 => {}
                _ => return invalid(format!("{block:?} is not a valid ASPP branch")),
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Full block sequence, including the fixed tail, for display and
    /// serialisation of the effective architecture.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut out = self.front_stages.clone();
        out.extend(self.aspp_branches.iter().cloned());
        out.push(BlockSpec::Concat);
        out.push(BlockSpec::Dropout { rate: self.dropout_rate });
        if self.fuse_filters > 0 {
            out.push(BlockSpec::Conv1x1 {
                filters: self.fuse_filters,
            });
        }
        out.push(BlockSpec::Conv1x1 {
            filters: self.num_classes,
        });
        out.push(BlockSpec::Upsample {
            factor: self.output_stride,
        });
        out
    }
}
