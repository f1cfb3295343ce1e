//! Frozen multi-scale feature extractors for the perceptual discriminator.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{BnMode, Ctx, ParamStore};
use crate::tensor::Real;

/// Seed of the default extractor; fixed so every process sees the same
/// features.
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x0019_0019;

/// Produces three feature maps of an image at relative scales 1, 1/2 and
/// 1/4. Parameters are frozen: gradients flow through to the image but
/// never into the extractor.
pub trait FeatureExtractor<T: Real>: Send + Sync {
    fn id(&self) -> &str;
    fn channels(&self) -> [usize; 3];
    fn features(&self, g: &mut Graph<T>, image: Var) -> Result<[Var; 3]>;
}

/// Three 3x3 conv + ReLU stages with strides 1, 2, 2.
#[derive(Clone, Debug)]
pub struct ConvExtractor<T> {
    id: String,
    channels: [usize; 3],
    store: ParamStore<T>,
}

const STAGES: [&str; 3] = ["stage1", "stage2", "stage3"];
const STRIDES: [usize; 3] = [1, 2, 2];

impl<T: Real> ConvExtractor<T> {
    pub fn seeded(channels: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        for (name, &c) in STAGES.iter().zip(&channels) {
            store.add_conv(name, cin, c, 3, &mut rng);
            // Small positive biases so a blank image still has a response.
            let b = store.get_mut(&format!("{name}.bias")).unwrap();
            for (i, v) in b.data_mut().iter_mut().enumerate() {
                *v = T::lit(0.01 * (i % 5) as f64);
            }
            cin = c;
        }
        ConvExtractor {
            id: format!("seeded:{seed}"),
            channels,
            store,
        }
    }

    /// Validates an externally supplied parameter set: `stageN.weight` of
    /// shape `(c_N, c_{N-1}, 3, 3)` with `c_0 = 3` and matching biases.
    pub fn from_store(id: impl Into<String>, store: ParamStore<T>) -> Result<Self> {
        let mut channels = [0; 3];
        let mut cin = 3;
        for (i, name) in STAGES.iter().enumerate() {
            let malformed = |why: String| Error::CorruptCheckpoint(format!("extractor weights: {why}"));
            let w = store
                .get(&format!("{name}.weight"))
                .map_err(|_| malformed(format!("missing {name}.weight")))?;
            let s = w.shape();
            if s.len() != 4 || s[1] != cin || s[2] != 3 || s[3] != 3 {
                return Err(malformed(format!("{name}.weight has shape {s:?}")));
            }
            let b = store
                .get(&format!("{name}.bias"))
                .map_err(|_| malformed(format!("missing {name}.bias")))?;
            if b.shape() != [s[0]] {
                return Err(malformed(format!("{name}.bias has shape {:?}", b.shape())));
            }
            channels[i] = s[0];
            cin = s[0];
        }
        Ok(ConvExtractor {
            id: id.into(),
            channels,
            store,
        })
    }

    /// Loads `stageN.weight` / `stageN.bias` blobs from a checkpoint file.
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let mut store = ParamStore::new();
        for (k, v) in ckpt.params {
            store.insert(k, v.cast());
        }
        Self::from_store(format!("file:{}", path.display()), store)
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }
}

impl<T: Real> FeatureExtractor<T> for ConvExtractor<T> {
    fn id(&self) -> &str {
        &self.id
    }

    fn channels(&self) -> [usize; 3] {
        self.channels
    }

    fn features(&self, g: &mut Graph<T>, image: Var) -> Result<[Var; 3]> {
        let shape = g.shape(image);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "extractor expects a 3-channel NCHW image".into(),
            });
        }
        let mut ctx = Ctx::new(g, &self.store, false, BnMode::Eval);
        let mut h = image;
        let mut maps = [image; 3];
        for (i, name) in STAGES.iter().enumerate() {
            h = ctx.conv(name, h, STRIDES[i], 1)?;
            h = ctx.g.relu(h)?;
            maps[i] = h;
        }
        ctx.finish();
        Ok(maps)
    }
}

/// Resolves an extractor identifier: `seeded`, `seeded:<u64>`, or
/// `file:<checkpoint path>`.
pub fn extractor_from_id<T: Real>(id: &str, channels: [usize; 3]) -> Result<Arc<dyn FeatureExtractor<T>>> {
    if id == "seeded" {
        return Ok(Arc::new(ConvExtractor::seeded(channels, DEFAULT_EXTRACTOR_SEED)));
    }
    if let Some(seed) = id.strip_prefix("seeded:") {
        let seed = seed
            .parse()
            .map_err(|_| Error::UnknownExtractor(id.to_string()))?;
        return Ok(Arc::new(ConvExtractor::seeded(channels, seed)));
    }
    if let Some(path) = id.strip_prefix("file:") {
        return Ok(Arc::new(ConvExtractor::load(Path::new(path))?));
    }
    Err(Error::UnknownExtractor(id.to_string()))
}

/// Convenience wrapper: the three feature maps of `image`.
pub fn perceptual_features<T: Real>(
    extractor: &dyn FeatureExtractor<T>,
    g: &mut Graph<T>,
    image: Var,
) -> Result<[Var; 3]> {
    extractor.features(g, image)
}
