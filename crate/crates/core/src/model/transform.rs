//! The denoising transformation network: a pre-activation residual stack
//! for low-level features, then a fully convolutional local path and a
//! pooled global path fused by a point-wise affine mix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BnMode, Ctx, ParamStore};
use crate::tensor::{Real, Tensor};

pub const PREFIX: &str = "tnet";

/// Graph nodes produced by [`TransformNet::forward`].
#[derive(Clone, Copy, Debug)]
pub struct DenoiseOutput {
    pub denoised: Var,
    /// Fusion output, the tap for the feature-level prior.
    pub fused: Var,
}

/// `x + conv(relu(bn(conv(relu(bn(x))))))` with 3x3 same-padded convs.
pub fn residual_block_preact<T: Real>(ctx: &mut Ctx<'_, T>, name: &str, x: Var) -> Result<Var> {
    let h = ctx.bn(&format!("{name}.bn1"), x)?;
    let h = ctx.g.relu(h)?;
    let h = ctx.conv(&format!("{name}.conv1"), h, 1, 1)?;
    let h = ctx.bn(&format!("{name}.bn2"), h)?;
    let h = ctx.g.relu(h)?;
    let h = ctx.conv(&format!("{name}.conv2"), h, 1, 1)?;
    if ctx.g.shape(h) != ctx.g.shape(x) {
        return Err(Error::shape("residual block", ctx.g.shape(x), ctx.g.shape(h)));
    }
    ctx.g.add(x, h)
}

pub fn add_residual_block<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut ChaCha8Rng) {
    store.add_bn(&format!("{name}.bn1"), c);
    store.add_conv(&format!("{name}.conv1"), c, c, 3, rng);
    store.add_bn(&format!("{name}.bn2"), c);
    store.add_conv(&format!("{name}.conv2"), c, c, 3, rng);
}

/// `F_c = ReLU(sum_c' w'_cc' G_c' + sum_c' w_cc' L_c' + b_c)` realized as a
/// 1x1 convolution over `concat(L, broadcast(G))`. The fusion weight's
/// first `C` input channels act on the local features, the rest on the
/// global vector.
pub fn fuse_local_global<T: Real>(ctx: &mut Ctx<'_, T>, name: &str, local: Var, global: Var) -> Result<Var> {
    let ls = ctx.g.shape(local).to_vec();
    let gs = ctx.g.shape(global).to_vec();
    if ls.len() != 4 || gs.len() != 4 || ls[0] != gs[0] || ls[1] != gs[1] || gs[2] != 1 || gs[3] != 1 {
        return Err(Error::shape("fuse_local_global", &ls, &gs));
    }
    let gb = ctx.g.broadcast_to(global, &ls)?;
    let cat = ctx.g.concat(&[local, gb])?;
    let mixed = ctx.conv(name, cat, 1, 0)?;
    ctx.g.relu(mixed)
}

#[derive(Clone, Debug)]
pub struct TransformNet<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
}

impl<T: Real> TransformNet<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.base_channels;
        let mut store = ParamStore::new();
        store.add_conv(&format!("{PREFIX}.in_conv"), config.input_channels, c, 3, &mut rng);
        for i in 0..config.low_level_blocks {
            add_residual_block(&mut store, &format!("{PREFIX}.low.{i}"), c, &mut rng);
        }
        for i in 0..config.local_blocks {
            add_residual_block(&mut store, &format!("{PREFIX}.local.{i}"), c, &mut rng);
        }
        store.add_linear(&format!("{PREFIX}.global.fc1"), c, config.global_fc_width, &mut rng);
        store.add_linear(&format!("{PREFIX}.global.fc2"), config.global_fc_width, c, &mut rng);
        store.add_conv(&format!("{PREFIX}.fuse"), 2 * c, c, 1, &mut rng);
        store.add_conv(&format!("{PREFIX}.out_conv"), c, config.input_channels, 3, &mut rng);
        Ok(TransformNet {
            config: config.clone(),
            store,
        })
    }

    pub fn descriptor(&self) -> String {
        self.config.transform_descriptor()
    }

    /// Low-level features: input conv, residual stack, and the skip from
    /// the input-conv features onto the last block's output.
    pub fn low_level(&self, ctx: &mut Ctx<'_, T>, noisy: Var) -> Result<Var> {
        let shape = ctx.g.shape(noisy);
        if shape.len() != 4 || shape[1] != self.config.input_channels {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected (N, {}, H, W)", self.config.input_channels),
            });
        }
        let feat = ctx.conv(&format!("{PREFIX}.in_conv"), noisy, 1, 1)?;
        let h = self.residual_stack(ctx, feat)?;
        ctx.g.add(h, feat)
    }

    /// The low-level residual blocks alone, without the skip connection.
    pub fn residual_stack(&self, ctx: &mut Ctx<'_, T>, feat: Var) -> Result<Var> {
        let mut h = feat;
        for i in 0..self.config.low_level_blocks {
            h = residual_block_preact(ctx, &format!("{PREFIX}.low.{i}"), h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, noisy: Var) -> Result<DenoiseOutput> {
        let low = self.low_level(ctx, noisy)?;

        let mut local = low;
        for i in 0..self.config.local_blocks {
            local = residual_block_preact(ctx, &format!("{PREFIX}.local.{i}"), local)?;
        }

        let n = ctx.g.shape(low)[0];
        let c = self.config.base_channels;
        let pooled = ctx.g.global_avg_pool(low)?;
        let v = ctx.g.reshape(pooled, &[n, c])?;
        let v = ctx.linear(&format!("{PREFIX}.global.fc1"), v)?;
        let v = ctx.g.relu(v)?;
        let v = ctx.linear(&format!("{PREFIX}.global.fc2"), v)?;
        let v = ctx.g.relu(v)?;
        let global = ctx.g.reshape(v, &[n, c, 1, 1])?;

        let fused = fuse_local_global(ctx, &format!("{PREFIX}.fuse"), local, global)?;
        let mut denoised = ctx.conv(&format!("{PREFIX}.out_conv"), fused, 1, 1)?;
        if self.config.input_skip {
            denoised = ctx.g.add(denoised, noisy)?;
        }
        Ok(DenoiseOutput { denoised, fused })
    }

    /// Eval-mode denoising of an NCHW batch.
    pub fn denoise(&self, noisy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(noisy.clone());
        let mut ctx = Ctx::new(&mut g, &self.store, false, BnMode::Eval);
        let out = self.forward(&mut ctx, x)?;
        ctx.finish();
        Ok(g.value(out.denoised).clone())
    }
}
