//! The two learned priors: a noise-level classifier on fused features and
//! a perceptual patch discriminator on images.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::extractor::{extractor_from_id, FeatureExtractor};
use super::ModelConfig;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Real;

pub const FEATURE_PREFIX: &str = "fdisc";
pub const PIXEL_PREFIX: &str = "pdisc";
pub const LEAKY_SLOPE: f64 = 0.2;

/// Multi-class noise-level discriminator:
/// GRL -> conv3x3/2 -> ReLU -> global pool -> FC -> ReLU -> FC -> m logits.
#[derive(Clone, Debug)]
pub struct FeatureDiscriminator<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
}

impl<T: Real> FeatureDiscriminator<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = config.feat_disc_channels;
        store.add_conv(&format!("{FEATURE_PREFIX}.conv"), config.base_channels, ch, 3, &mut rng);
        store.add_linear(&format!("{FEATURE_PREFIX}.fc1"), ch, config.global_fc_width, &mut rng);
        store.add_linear(
            &format!("{FEATURE_PREFIX}.fc2"),
            config.global_fc_width,
            config.num_noise_classes,
            &mut rng,
        );
        Ok(FeatureDiscriminator {
            config: config.clone(),
            store,
        })
    }

    pub fn descriptor(&self) -> String {
        self.config.feature_disc_descriptor()
    }

    /// Logits `(N, m)`. The gradient reaching `features` is multiplied by
    /// `-lambda_grl`; pass `None` to run the classifier without the
    /// reversal layer.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, features: Var, lambda_grl: Option<T>) -> Result<Var> {
        let x = match lambda_grl {
            Some(l) => ctx.g.grad_reverse(features, l)?,
            None => features,
        };
        let h = ctx.conv(&format!("{FEATURE_PREFIX}.conv"), x, 2, 1)?;
        let h = ctx.g.relu(h)?;
        let h = ctx.g.global_avg_pool(h)?;
        let n = ctx.g.shape(h)[0];
        let h = ctx.g.reshape(h, &[n, self.config.feat_disc_channels])?;
        let h = ctx.linear(&format!("{FEATURE_PREFIX}.fc1"), h)?;
        let h = ctx.g.relu(h)?;
        ctx.linear(&format!("{FEATURE_PREFIX}.fc2"), h)
    }
}

/// Patch discriminator whose three stride-2 blocks each consume the
/// previous output concatenated with one frozen extractor map, followed by
/// a 1x1 head producing one logit per location.
#[derive(Clone)]
pub struct PixelDiscriminator<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    extractor: Arc<dyn FeatureExtractor<T>>,
}

impl<T: Real> std::fmt::Debug for PixelDiscriminator<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PixelDiscriminator")
            .field("config", &self.config)
            .field("extractor", &self.extractor.id())
            .finish()
    }
}

impl<T: Real> PixelDiscriminator<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ch = [
            config.extractor_channels[0],
            config.extractor_channels[1],
            config.extractor_channels[2],
        ];
        let extractor = extractor_from_id(&config.extractor, ch)?;
        Self::with_extractor(config, extractor, seed)
    }

    pub fn with_extractor(config: &ModelConfig, extractor: Arc<dyn FeatureExtractor<T>>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ext = extractor.channels();
        let mut prev = config.input_channels;
        for i in 0..3 {
            let name = format!("{PIXEL_PREFIX}.block{i}");
            let out = config.pixel_disc_channels[i];
            store.add_conv(&format!("{name}.conv"), prev + ext[i], out, 3, &mut rng);
            store.add_bn(&format!("{name}.bn"), out);
            prev = out;
        }
        store.add_conv(&format!("{PIXEL_PREFIX}.head"), prev, 1, 1, &mut rng);
        Ok(PixelDiscriminator {
            config: config.clone(),
            store,
            extractor,
        })
    }

    pub fn extractor(&self) -> &Arc<dyn FeatureExtractor<T>> {
        &self.extractor
    }

    pub fn descriptor(&self) -> String {
        format!("{}[{}]", self.config.pixel_disc_descriptor(), self.extractor.id())
    }

    /// Patch logit map `(N, 1, h, w)` with `h = ceil(H/8)`, `w = ceil(W/8)`.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        let maps = self.extractor.features(ctx.g, image)?;
        let mut h = image;
        for (i, &m) in maps.iter().enumerate() {
            let (hs, ms) = (ctx.g.shape(h), ctx.g.shape(m));
            if hs[0] != ms[0] || hs[2..] != ms[2..] {
                return Err(Error::shape("extractor scale", hs, ms));
            }
            let name = format!("{PIXEL_PREFIX}.block{i}");
            let x = ctx.g.concat(&[h, m])?;
            let x = ctx.conv(&format!("{name}.conv"), x, 2, 1)?;
            let x = ctx.bn(&format!("{name}.bn"), x)?;
            h = ctx.g.leaky_relu(x, T::lit(LEAKY_SLOPE))?;
        }
        ctx.conv(&format!("{PIXEL_PREFIX}.head"), h, 1, 0)
    }
}
