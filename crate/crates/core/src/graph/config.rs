use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_WIDTH: usize = 1 << 16;
const MAX_RATE: usize = 1024;

/// Every architectural degree of freedom of the network.
///
/// Block indices in `icm_enabled` and `msa_raw_image` are 1-based. ACBs are
/// numbered from the input side (ACB-1 at full resolution); AEBs from the
/// bottleneck side (AEB-1 at the coarsest decoder level).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "NetworkConfigFile")]
pub struct NetworkConfig {
    /// Number of ACB/AEB pairs.
    pub depth: usize,
    /// Channels of ACB-1; doubles per level.
    pub base_width: usize,
    pub num_classes: usize,
    /// Image channels (1 for grayscale, 3 for colour).
    pub in_channels: usize,
    /// Dilation rates of the context pyramid, strictly increasing.
    pub aspp_rates: Vec<usize>,
    /// ACBs carrying the context-modelling branch.
    pub icm_enabled: BTreeSet<usize>,
    /// AEBs whose aggregation receives the resized raw image.
    pub msa_raw_image: BTreeSet<usize>,
    pub dense_connections: bool,
    pub deep_supervision: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfigFile::default().into()
    }
}

/// On-disk form; omitted sets take depth-dependent defaults.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct NetworkConfigFile {
    depth: Option<usize>,
    base_width: Option<usize>,
    num_classes: Option<usize>,
    in_channels: Option<usize>,
    aspp_rates: Option<Vec<usize>>,
    icm_enabled: Option<BTreeSet<usize>>,
    msa_raw_image: Option<BTreeSet<usize>>,
    dense_connections: Option<bool>,
    deep_supervision: Option<bool>,
}

impl From<NetworkConfigFile> for NetworkConfig {
    fn from(f: NetworkConfigFile) -> Self {
        let depth = f.depth.unwrap_or(4);
        NetworkConfig {
            depth,
            base_width: f.base_width.unwrap_or(16),
            num_classes: f.num_classes.unwrap_or(2),
            in_channels: f.in_channels.unwrap_or(1),
            aspp_rates: f.aspp_rates.unwrap_or_else(|| vec![1, 2, 4]),
            icm_enabled: f.icm_enabled.unwrap_or_else(|| (1..=depth).collect()),
            msa_raw_image: f
                .msa_raw_image
                .unwrap_or_else(|| [1, 2].into_iter().filter(|&i| i <= depth).collect()),
            dense_connections: f.dense_connections.unwrap_or(true),
            deep_supervision: f.deep_supervision.unwrap_or(true),
        }
    }
}

impl NetworkConfig {
    /// Default configuration at a different size; block toggles follow the
    /// depth (ICM everywhere, raw image at AEB-1 and AEB-2).
    pub fn with_size(depth: usize, base_width: usize) -> Self {
        NetworkConfigFile {
            depth: Some(depth),
            base_width: Some(base_width),
            ..Default::default()
        }
        .into()
    }

    /// Lists every violated constraint.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.depth == 0 {
            errs.push("depth must be at least 1".to_string());
        }
        if self.depth > 8 {
            errs.push(format!("depth {} exceeds the supported maximum of 8", self.depth));
        }
        if self.base_width == 0 {
            errs.push("base_width must be at least 1".to_string());
        }
        if self.base_width > MAX_WIDTH >> self.depth.min(8) {
            errs.push(format!("bottleneck width base_width * 2^depth exceeds {MAX_WIDTH}"));
        }
        if !(2..=256).contains(&self.num_classes) {
            errs.push(format!("num_classes must be in 2..=256, got {}", self.num_classes));
        }
        if !(1..=64).contains(&self.in_channels) {
            errs.push(format!("in_channels must be in 1..=64, got {}", self.in_channels));
        }
        if self.aspp_rates.is_empty() {
            errs.push("aspp_rates must not be empty".to_string());
        }
        if self.aspp_rates.iter().any(|&r| r == 0 || r > MAX_RATE) {
            errs.push(format!("aspp_rates must lie in 1..={MAX_RATE}"));
        }
        if self.aspp_rates.windows(2).any(|w| w[0] >= w[1]) {
            errs.push(format!("aspp_rates {:?} must be strictly increasing", self.aspp_rates));
        }
        for (field, set) in [("icm_enabled", &self.icm_enabled), ("msa_raw_image", &self.msa_raw_image)] {
            for &i in set {
                if i == 0 || i > self.depth {
                    errs.push(format!("{field} index {i} outside 1..={}", self.depth));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Channels at contracting level `level` (1-based).
    pub fn level_width(&self, level: usize) -> usize {
        self.base_width << (level - 1)
    }

    pub fn bottleneck_width(&self) -> usize {
        self.base_width << self.depth
    }

    /// Contracting level served by AEB-`i`.
    pub fn aeb_level(&self, i: usize) -> usize {
        self.depth + 1 - i
    }

    /// Earlier AEBs densely connected into AEB-`i` (all but its direct
    /// predecessor).
    pub fn dense_sources(&self, i: usize) -> Vec<usize> {
        if self.dense_connections && i >= 3 {
            (1..=i - 2).collect()
        } else {
            Vec::new()
        }
    }

    /// Number of side outputs (zero without deep supervision).
    pub fn side_output_count(&self) -> usize {
        if self.deep_supervision {
            2 * self.depth
        } else {
            0
        }
    }

    /// Required divisor of the input height and width.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}
