//! Whole-model parameters and the end-to-end forward pass.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{decode_graph, encode_graph, Dropout, TransformerConfig, TransformerParams};
use crate::dataio::{Image, ImagePair};
use crate::deform::{
    fuse_graph, tokens_to_field_graph, unpatch_index, DeformHeadParams, DisplacementField, MaptConfig,
};
use crate::embed::{embed_graph, patchify, EmbedParams, PatchConfig, PositionalEncoding};
use crate::error::{shape_err, AirError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Matrix, Scalar};
use crate::warp::identity_grid;

use super::loss::{loss_graph, LossKind};

/// Architecture hyperparameters: everything needed to rebuild parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    /// Patch size of each parallel transformer; one entry is the
    /// single-scale model.
    pub scales: Vec<usize>,
    pub transformer: TransformerConfig,
    pub positional: PositionalEncoding,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            height: 28,
            width: 28,
            scales: vec![2, 7, 14],
            transformer: TransformerConfig::default(),
            positional: PositionalEncoding::Learned,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(AirError::InvalidConfig("at least one scale is required".into()));
        }
        self.transformer.validate()?;
        for &p in &self.scales {
            PatchConfig::new(p, self.height, self.width, self.transformer.dim)?;
        }
        Ok(())
    }

    pub fn patch_configs(&self) -> Result<Vec<PatchConfig>> {
        self.scales
            .iter()
            .map(|&p| PatchConfig::new(p, self.height, self.width, self.transformer.dim))
            .collect()
    }
}

/// One parallel transformer and its deformation head.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleParams<T = f32> {
    pub patch: PatchConfig,
    pub fixed_embed: EmbedParams<T>,
    pub moving_embed: EmbedParams<T>,
    pub transformer: TransformerParams<T>,
    pub head: DeformHeadParams<T>,
}

#[derive(Debug, Clone)]
pub struct ModelParams<T = f32> {
    arch: ArchConfig,
    pub scales: Vec<ScaleParams<T>>,
    pub mapt: MaptConfig<T>,
    unpatch: Vec<Arc<Vec<usize>>>,
    grid: Arc<Matrix<T>>,
}

impl<T: Scalar> PartialEq for ModelParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.scales == other.scales && self.mapt == other.mapt
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Random transformer weights with zeroed deformation heads and equal
    /// fusion weights, so the untrained model is the identity warp.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scales = Vec::with_capacity(arch.scales.len());
        for patch in arch.patch_configs()? {
            scales.push(ScaleParams {
                patch,
                fixed_embed: EmbedParams::init(&patch, arch.positional, &mut rng),
                moving_embed: EmbedParams::init(&patch, arch.positional, &mut rng),
                transformer: TransformerParams::init(arch.transformer, &mut rng)?,
                head: DeformHeadParams::zeros(&patch),
            });
        }
        let mapt = MaptConfig::new(arch.scales.clone())?;
        Self::assemble(arch, scales, mapt)
    }

    fn assemble(arch: ArchConfig, scales: Vec<ScaleParams<T>>, mapt: MaptConfig<T>) -> Result<Self> {
        let unpatch = scales.iter().map(|s| Arc::new(unpatch_index(&s.patch))).collect();
        let grid = Arc::new(identity_grid::<T>(arch.height, arch.width)?.coords().clone());
        Ok(Self {
            arch,
            scales,
            mapt,
            unpatch,
            grid,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn is_single_scale(&self) -> bool {
        self.scales.len() == 1
    }

    /// Visits every parameter matrix in manifest order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        for s in &self.scales {
            let p = format!("scale{}", s.patch.patch_size);
            f(format!("{p}.fixed_embed.projection"), &s.fixed_embed.projection);
            f(
                format!("{p}.fixed_embed.projection_bias"),
                &s.fixed_embed.projection_bias,
            );
            f(format!("{p}.fixed_embed.positions"), &s.fixed_embed.positions);
            f(format!("{p}.moving_embed.projection"), &s.moving_embed.projection);
            f(
                format!("{p}.moving_embed.projection_bias"),
                &s.moving_embed.projection_bias,
            );
            f(format!("{p}.moving_embed.positions"), &s.moving_embed.positions);
            s.transformer.visit(&p, f);
            f(format!("{p}.head.projection"), &s.head.projection);
            f(format!("{p}.head.bias"), &s.head.bias);
        }
        f("fusion_logits".into(), &self.mapt.fusion_logits);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        for s in &mut self.scales {
            let p = format!("scale{}", s.patch.patch_size);
            f(format!("{p}.fixed_embed.projection"), &mut s.fixed_embed.projection);
            f(
                format!("{p}.fixed_embed.projection_bias"),
                &mut s.fixed_embed.projection_bias,
            );
            f(format!("{p}.fixed_embed.positions"), &mut s.fixed_embed.positions);
            f(format!("{p}.moving_embed.projection"), &mut s.moving_embed.projection);
            f(
                format!("{p}.moving_embed.projection_bias"),
                &mut s.moving_embed.projection_bias,
            );
            f(format!("{p}.moving_embed.positions"), &mut s.moving_embed.positions);
            s.transformer.visit_mut(&p, f);
            f(format!("{p}.head.projection"), &mut s.head.projection);
            f(format!("{p}.head.bias"), &mut s.head.bias);
        }
        f("fusion_logits".into(), &mut self.mapt.fusion_logits);
    }

    /// `(name, shape)` of every parameter in manifest order.
    pub fn manifest(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        self.visit(&mut |name, m| out.push((name, m.shape())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, m| out.extend_from_slice(m.data()));
        out
    }

    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(AirError::LengthMismatch {
                expected: self.param_count(),
                found: flat.len(),
            });
        }
        let mut offset = 0;
        self.visit_mut(&mut |_, m| {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    /// Same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::init(self.arch.clone(), 0).expect("validated architecture");
        let flat: Vec<U> = self.flatten().into_iter().map(|v| U::from_f64(v.as_f64())).collect();
        out.assign_flat(&flat).expect("same architecture");
        out
    }

    fn check_pair(&self, fixed: &Image, moving: &Image) -> Result<()> {
        for im in [fixed, moving] {
            if (im.height(), im.width()) != (self.arch.height, self.arch.width) {
                return Err(shape_err(format!(
                    "{}x{} image for a {}x{} model",
                    im.height(),
                    im.width(),
                    self.arch.height,
                    self.arch.width
                )));
            }
        }
        Ok(())
    }
}

/// Graph handles produced by [`forward_graph`].
pub(crate) struct ForwardVars {
    pub warped: Var,
    pub field: Var,
    pub fixed: Var,
}

pub(crate) fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    fixed: &Image,
    moving: &Image,
    params: &ModelParams<T>,
    dropout: &mut Dropout<'_>,
) -> Result<ForwardVars> {
    params.check_pair(fixed, moving)?;
    let positional = params.arch.positional;
    let mut fields = Vec::with_capacity(params.scales.len());
    for (scale, unpatch) in params.scales.iter().zip(&params.unpatch) {
        let fixed_patches = g.constant(patchify(fixed, &scale.patch)?);
        let moving_patches = g.constant(patchify(moving, &scale.patch)?);
        let fixed_tokens = embed_graph(g, fixed_patches, &scale.fixed_embed, positional)?;
        let moving_tokens = embed_graph(g, moving_patches, &scale.moving_embed, positional)?;
        let memory = encode_graph(g, fixed_tokens, &scale.transformer, dropout)?;
        let decoded = decode_graph(g, moving_tokens, memory, &scale.transformer, dropout)?;
        fields.push(tokens_to_field_graph(
            g,
            decoded,
            &scale.head,
            &scale.patch,
            unpatch.clone(),
        )?);
    }
    let field = fuse_graph(g, &fields, &params.mapt.fusion_logits)?;
    let grid = g.constant((*params.grid).clone());
    let coords = g.add(grid, field)?;
    let moving_img = g.constant(moving.to_matrix());
    let warped = g.sample(moving_img, coords)?;
    let fixed = g.constant(fixed.to_matrix());
    Ok(ForwardVars { warped, field, fixed })
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T = f32> {
    pub warped: Image,
    pub field: DisplacementField<T>,
}

/// Registers `pair.moving` onto `pair.fixed`. `rng` drives dropout and is
/// only consulted when `training` is set.
pub fn forward<T: Scalar>(
    pair: &ImagePair<'_>,
    params: &ModelParams<T>,
    training: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<ForwardOutput<T>> {
    let mut dropout = match training {
        Some((rate, rng)) => Dropout::training(rate, rng),
        None => Dropout::inference(),
    };
    let mut g = Graph::new();
    let vars = forward_graph(&mut g, pair.fixed, pair.moving, params, &mut dropout)?;
    Ok(ForwardOutput {
        warped: Image::from_matrix(g.value(vars.warped))?,
        field: DisplacementField::new(params.arch.height, params.arch.width, g.value(vars.field).clone())?,
    })
}

/// Loss settings shared by the training loop and gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub loss: LossKind,
    pub smoothness_weight: f64,
    pub dropout: f64,
}

/// Loss of one pair and its gradient, flattened in manifest order.
pub fn pair_loss_and_gradient<T: Scalar>(
    pair: &ImagePair<'_>,
    params: &ModelParams<T>,
    objective: &Objective,
    rng: &mut ChaCha8Rng,
) -> Result<(T, Vec<T>)> {
    let mut g = Graph::new();
    let mut dropout = Dropout::training(objective.dropout, rng);
    let vars = forward_graph(&mut g, pair.fixed, pair.moving, params, &mut dropout)?;
    let total = loss_graph(
        &mut g,
        vars.warped,
        vars.fixed,
        vars.field,
        (params.arch.height, params.arch.width),
        objective.loss,
        objective.smoothness_weight,
    )?;
    let loss = g.scalar(total);
    let grads = g.backward(total);
    let mut flat = Vec::with_capacity(params.param_count());
    params.visit(&mut |_, m| match g.param_var(m).and_then(|v| grads.get(v)) {
        Some(gm) => flat.extend_from_slice(gm.data()),
        None => flat.extend(std::iter::repeat_n(T::zero(), m.len())),
    });
    Ok((loss, flat))
}

/// Loss of one pair without building gradients.
pub fn pair_loss<T: Scalar>(pair: &ImagePair<'_>, params: &ModelParams<T>, objective: &Objective) -> Result<T> {
    let mut g = Graph::new();
    let mut dropout = Dropout::inference();
    let vars = forward_graph(&mut g, pair.fixed, pair.moving, params, &mut dropout)?;
    let total = loss_graph(
        &mut g,
        vars.warped,
        vars.fixed,
        vars.field,
        (params.arch.height, params.arch.width),
        objective.loss,
        objective.smoothness_weight,
    )?;
    Ok(g.scalar(total))
}
