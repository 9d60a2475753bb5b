//! Differentiable building blocks: the visual extractor (2-D residual net
//! with a 3-D convolutional stem), the auditory 1-D residual extractor with
//! total stride 640, and the temporal Transformer with relative position
//! bias, pre-MLP batchnorm, LayerScale, and stochastic depth.

mod extractor;
mod transformer;

pub use transformer::BatchLayout;
pub use extractor::{audio_extract, audio_extractor_receptive_field, video_extract};
pub use transformer::{
    decoder_forward, register_decoder, sinusoidal_pe, temporal_encode, DecoderConfig,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RavenError, Result};
use crate::rng::rng_for;
use crate::tensor::{ParamStore, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Audio,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreMlpNorm {
    Batchnorm,
    Layernorm,
}

/// Size plan for one encoder (extractor + temporal Transformer).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub modality: Modality,
    /// Stem width followed by the four residual-stage widths.
    pub widths: [usize; 5],
    /// Transformer block count (B + 1).
    pub blocks: usize,
    /// Hidden size D.
    pub hidden: usize,
    pub mlp: usize,
    pub heads: usize,
    pub pre_mlp_norm: PreMlpNorm,
    pub drop_path: f64,
    pub layerscale_init: f64,
    pub rel_max_dist: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        // Paper-scale Base numbers.
        EncoderConfig {
            modality: Modality::Audio,
            widths: [64, 64, 128, 256, 512],
            blocks: 12,
            hidden: 512,
            mlp: 2048,
            heads: 8,
            pre_mlp_norm: PreMlpNorm::Batchnorm,
            drop_path: 0.05,
            layerscale_init: 0.1,
            rel_max_dist: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 {
            return Err(RavenError::config("encoder needs at least one block"));
        }
        if self.hidden % self.heads != 0 {
            return Err(RavenError::config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(RavenError::config("drop_path must be in [0, 1)"));
        }
        if self.widths.iter().any(|w| *w == 0) {
            return Err(RavenError::config("zero extractor width"));
        }
        Ok(())
    }

    /// Width of the extractor output (last residual stage).
    pub fn extractor_dim(&self) -> usize {
        self.widths[4]
    }

    pub fn toy(modality: Modality, hidden: usize) -> Self {
        EncoderConfig {
            modality,
            widths: [4, 4, 8, 8, hidden],
            blocks: 2,
            hidden,
            mlp: hidden * 4,
            heads: 2,
            drop_path: 0.0,
            rel_max_dist: 16,
            ..Default::default()
        }
    }
}

/// A T x D feature sequence at 25 Hz with a validity mask for zero-padding.
#[derive(Clone, Debug)]
pub struct FeatureSeq {
    pub features: Tensor,
    pub valid: Vec<bool>,
}

impl FeatureSeq {
    pub fn dense(features: Tensor) -> Self {
        let t = features.rows();
        FeatureSeq { features, valid: vec![true; t] }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Named-parameter store for one network plus its config.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub params: ParamStore,
    pub config: EncoderConfig,
}

impl ModelBundle {
    pub fn new_encoder(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, "encoder-init", &[]);
        register_encoder(&mut params, "", &config, &mut rng);
        let bundle = ModelBundle { params, config };
        debug_assert_eq!(bundle.params.param_count(), encoder_param_count(&bundle.config));
        Ok(bundle)
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }
}

/// Per-pass state: training flag, stochastic-depth RNG, and the batchnorm
/// batch statistics gathered during the forward pass (folded into running
/// buffers after the step).
pub struct ForwardState {
    pub train: bool,
    pub rng: ChaCha8Rng,
    pub bn_updates: Vec<(String, Tensor, Tensor)>,
}

impl ForwardState {
    pub fn eval() -> Self {
        ForwardState { train: false, rng: rng_for(0, "eval", &[]), bn_updates: Vec::new() }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        ForwardState {
            train: true,
            rng: rng_for(seed, "droppath", &[step]),
            bn_updates: Vec::new(),
        }
    }

    pub fn apply_bn_updates(&mut self, params: &mut ParamStore) {
        for (name, mean, var) in self.bn_updates.drain(..) {
            let rm = params.get_mut(&format!("{name}.rm"));
            for (r, m) in rm.data_mut().iter_mut().zip(mean.data()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = params.get_mut(&format!("{name}.rv"));
            for (r, v) in rv.data_mut().iter_mut().zip(var.data()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }
}

pub(crate) fn init_linear(
    params: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) {
    params.insert(&format!("{name}.w"), Tensor::trunc_normal(&[rows, cols], 0.02, rng), true);
    params.insert(&format!("{name}.b"), Tensor::zeros(&[cols]), true);
}

pub(crate) fn init_norm(params: &mut ParamStore, name: &str, c: usize, with_buffers: bool) {
    params.insert(&format!("{name}.g"), Tensor::full(&[c], 1.0), true);
    params.insert(&format!("{name}.b"), Tensor::zeros(&[c]), true);
    if with_buffers {
        params.insert(&format!("{name}.rm"), Tensor::zeros(&[c]), false);
        params.insert(&format!("{name}.rv"), Tensor::full(&[c], 1.0), false);
    }
}

fn init_conv(params: &mut ParamStore, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) {
    // He-style scaling on the fan-in, truncated.
    let fan_in: usize = shape[..shape.len() - 1].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    params.insert(name, Tensor::trunc_normal(shape, std, rng), true);
}

/// Registers extractor + temporal-encoder parameters under `prefix`.
pub fn register_encoder(
    params: &mut ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut ChaCha8Rng,
) {
    let p = |s: &str| format!("{prefix}{s}");
    let w = &cfg.widths;
    match cfg.modality {
        Modality::Video => {
            init_conv(params, &p("extractor.stem.w"), &[5, 7, 7, w[0]], rng);
            init_norm(params, &p("extractor.stem.norm"), w[0], true);
        }
        Modality::Audio => {
            init_conv(params, &p("extractor.stem.w"), &[80, 1, w[0]], rng);
            init_norm(params, &p("extractor.stem.norm"), w[0], true);
        }
    }
    for stage in 0..4 {
        let cin = if stage == 0 { w[0] } else { w[stage] };
        let cout = w[stage + 1];
        let stride = if stage == 0 { 1 } else { 2 };
        for block in 0..2 {
            let bp = p(&format!("extractor.stage{stage}.block{block}"));
            let bin = if block == 0 { cin } else { cout };
            let bstride = if block == 0 { stride } else { 1 };
            let conv_shape = |ci: usize, co: usize| match cfg.modality {
                Modality::Video => vec![3, 3, ci, co],
                Modality::Audio => vec![3, ci, co],
            };
            init_conv(params, &format!("{bp}.conv1.w"), &conv_shape(bin, cout), rng);
            init_norm(params, &format!("{bp}.norm1"), cout, true);
            init_conv(params, &format!("{bp}.conv2.w"), &conv_shape(cout, cout), rng);
            init_norm(params, &format!("{bp}.norm2"), cout, true);
            if bstride != 1 || bin != cout {
                let down_shape = match cfg.modality {
                    Modality::Video => vec![1, 1, bin, cout],
                    Modality::Audio => vec![1, bin, cout],
                };
                init_conv(params, &format!("{bp}.down.w"), &down_shape, rng);
                init_norm(params, &format!("{bp}.down_norm"), cout, true);
            }
        }
    }
    if cfg.extractor_dim() != cfg.hidden {
        init_linear(params, &p("proj"), cfg.extractor_dim(), cfg.hidden, rng);
    }
    let d = cfg.hidden;
    for b in 0..cfg.blocks {
        let bp = p(&format!("enc.block{b}"));
        init_norm(params, &format!("{bp}.ln1"), d, false);
        for name in ["wq", "wk", "wv", "wo"] {
            init_linear(params, &format!("{bp}.attn.{name}"), d, d, rng);
        }
        params.insert(
            &format!("{bp}.attn.rel"),
            Tensor::zeros(&[cfg.heads, 2 * cfg.rel_max_dist + 1]),
            true,
        );
        init_norm(
            params,
            &format!("{bp}.prenorm"),
            d,
            cfg.pre_mlp_norm == PreMlpNorm::Batchnorm,
        );
        init_linear(params, &format!("{bp}.mlp.fc1"), d, cfg.mlp, rng);
        init_linear(params, &format!("{bp}.mlp.fc2"), cfg.mlp, d, rng);
        params.insert(&format!("{bp}.ls1"), Tensor::full(&[d], cfg.layerscale_init), true);
        params.insert(&format!("{bp}.ls2"), Tensor::full(&[d], cfg.layerscale_init), true);
    }
    init_norm(params, &p("enc.final_ln"), d, false);
}

/// Closed-form trainable-parameter count for one encoder. Asserted against
/// constructed bundles.
pub fn encoder_param_count(cfg: &EncoderConfig) -> usize {
    let w = &cfg.widths;
    let kernel = |ci: usize, co: usize| match cfg.modality {
        Modality::Video => 9 * ci * co,
        Modality::Audio => 3 * ci * co,
    };
    let mut n = match cfg.modality {
        Modality::Video => 5 * 7 * 7 * w[0] + 2 * w[0],
        Modality::Audio => 80 * w[0] + 2 * w[0],
    };
    for stage in 0..4 {
        let cin = if stage == 0 { w[0] } else { w[stage] };
        let cout = w[stage + 1];
        let stride = if stage == 0 { 1 } else { 2 };
        // Block 0 (possibly strided, possibly widening).
        n += kernel(cin, cout) + 2 * cout + kernel(cout, cout) + 2 * cout;
        if stride != 1 || cin != cout {
            n += cin * cout + 2 * cout;
        }
        // Block 1.
        n += 2 * (kernel(cout, cout) + 2 * cout);
    }
    if cfg.extractor_dim() != cfg.hidden {
        n += cfg.extractor_dim() * cfg.hidden + cfg.hidden;
    }
    let d = cfg.hidden;
    let per_block = 2 * d                      // ln1
        + 4 * (d * d + d)                      // attention projections
        + cfg.heads * (2 * cfg.rel_max_dist + 1) // relative bias table
        + 2 * d                                // pre-MLP norm
        + d * cfg.mlp + cfg.mlp                // fc1
        + cfg.mlp * d + d                      // fc2
        + 2 * d;                               // layerscale
    n += cfg.blocks * per_block + 2 * d; // final layernorm
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_formula_matches_bundle() {
        for cfg in [
            EncoderConfig::toy(Modality::Video, 16),
            EncoderConfig::toy(Modality::Audio, 16),
            EncoderConfig {
                modality: Modality::Video,
                widths: [8, 8, 16, 32, 48],
                blocks: 3,
                hidden: 32,
                mlp: 64,
                heads: 4,
                ..Default::default()
            },
        ] {
            let bundle = ModelBundle::new_encoder(cfg.clone(), 1).unwrap();
            assert_eq!(
                bundle.param_count(),
                encoder_param_count(&cfg),
                "config {cfg:?}"
            );
        }
    }

    #[test]
    fn invalid_head_split_rejected() {
        let cfg = EncoderConfig { hidden: 30, heads: 4, ..EncoderConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
