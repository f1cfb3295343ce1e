use crate::error::{Error, Result};

/// Architecture hyperparameters for the transformation network and both
/// discriminators.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub low_level_blocks: usize,
    pub local_blocks: usize,
    pub global_fc_width: usize,
    /// Number of noise-level classes seen by the feature discriminator.
    pub num_noise_classes: usize,
    pub pixel_disc_channels: Vec<usize>,
    pub input_channels: usize,
    pub feat_disc_channels: usize,
    /// `seeded` or `file:<checkpoint path>`.
    pub extractor: String,
    pub extractor_channels: Vec<usize>,
    /// Adds the noisy input image onto the output (ablation switch).
    pub input_skip: bool,
}

impl ModelConfig {
    /// Full-size network: 32 features, 16 low-level residual blocks, a
    /// two-block local path, five noise classes.
    pub fn full() -> Self {
        ModelConfig {
            base_channels: 32,
            low_level_blocks: 16,
            local_blocks: 2,
            global_fc_width: 64,
            num_noise_classes: 5,
            pixel_disc_channels: vec![64, 128, 256],
            input_channels: 3,
            feat_disc_channels: 32,
            extractor: "seeded".into(),
            extractor_channels: vec![64, 128, 256],
            input_skip: false,
        }
    }

    /// Reduced network that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            base_channels: 16,
            low_level_blocks: 4,
            local_blocks: 1,
            global_fc_width: 64,
            num_noise_classes: 5,
            pixel_disc_channels: vec![16, 32, 64],
            input_channels: 3,
            feat_disc_channels: 16,
            extractor: "seeded".into(),
            extractor_channels: vec![8, 16, 32],
            input_skip: false,
        }
    }

    /// Tiny network for finite-difference checks.
    pub fn micro() -> Self {
        ModelConfig {
            base_channels: 4,
            low_level_blocks: 1,
            local_blocks: 1,
            global_fc_width: 6,
            num_noise_classes: 2,
            pixel_disc_channels: vec![3, 4, 4],
            input_channels: 3,
            feat_disc_channels: 3,
            extractor: "seeded".into(),
            extractor_channels: vec![2, 3, 3],
            input_skip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("base_channels", self.base_channels),
            ("low_level_blocks", self.low_level_blocks),
            ("local_blocks", self.local_blocks),
            ("global_fc_width", self.global_fc_width),
            ("num_noise_classes", self.num_noise_classes),
            ("feat_disc_channels", self.feat_disc_channels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("pixel_disc_channels", &self.pixel_disc_channels),
            ("extractor_channels", &self.extractor_channels),
        ] {
            if v.len() != 3 || v.contains(&0) {
                return Err(Error::Config(format!("{name} needs exactly 3 positive entries")));
            }
        }
        if self.input_channels != 3 {
            return Err(Error::Config("input_channels must be 3".into()));
        }
        Ok(())
    }

    pub fn transform_descriptor(&self) -> String {
        format!(
            "transform(c={},low={},local={},fc={},skip={})",
            self.base_channels,
            self.low_level_blocks,
            self.local_blocks,
            self.global_fc_width,
            self.input_skip as u8
        )
    }

    pub fn feature_disc_descriptor(&self) -> String {
        format!(
            "feature_disc(c={},ch={},fc={},m={})",
            self.base_channels, self.feat_disc_channels, self.global_fc_width, self.num_noise_classes
        )
    }

    pub fn pixel_disc_descriptor(&self) -> String {
        format!(
            "pixel_disc(ch={:?},ext={:?})",
            self.pixel_disc_channels, self.extractor_channels
        )
    }
}
