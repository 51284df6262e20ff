//! Policy architectures.
//!
//! Three variants share one parameter naming scheme:
//!
//! - `pdit`: interleaved perception/decision transformer layers
//!   P1,D1,...,PL,DL over a 57-token multimodal sequence.
//! - `stacked`: the same modules applied P1..PL then D1..DL (identical
//!   parameter count, interleaving removed).
//! - `baseline`: conv stem + flattened features + pooled mission embedding
//!   through a small MLP; no attention anywhere.
//!
//! Perception layers attend over all tokens; decision layers read the
//! sequence through the CLS token as the only query and refine it with an
//! MLP. Policy logits and the value estimate come from the final CLS state.
//!
//! Parameters are partitioned into a perception set (conv stem, text
//! embedding, contrastive projections, P-layers) and a decision set
//! (D-layers, baseline MLP, output heads); the split is total, disjoint,
//! and stable across save/load.

mod forward;

pub use forward::{
    attention_alignment, baseline_forward, encode_mission_tokens, encode_observation, forward,
    pdit_forward, stacked_forward, AttnRecord, ForwardGraph, LayerKind, PolicyOutput,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{mission, ACTION_COUNT};
use crate::env::{COLOR_CHANNEL_BOUND, KIND_CHANNEL_BOUND, STATE_CHANNEL_BOUND};
use crate::env::{MISSION_LEN, VIEW_SIZE};
use crate::tensor::{Tape, Tensor, ValueId};

pub const VIS_TOKENS: usize = VIEW_SIZE * VIEW_SIZE;
/// 49 visual + 5 mission + prev-action + prev-reward + CLS.
pub const SEQ_LEN: usize = VIS_TOKENS + MISSION_LEN + 3;
pub const CLS_INDEX: usize = SEQ_LEN - 1;
pub const MISSION_TOKEN_START: usize = VIS_TOKENS;
/// Extra action-embedding row used as the "no previous action" sentinel.
pub const ACTION_NONE_ROW: usize = ACTION_COUNT;

const CONV_KERNEL: usize = 3;
const MLP_RATIO: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("observation id out of range: {0}")]
    IdOutOfRange(String),
    #[error("non-finite activation in {0}")]
    NonFinite(String),
    #[error("{0} has no attention records")]
    NoAttention(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Pdit,
    Stacked,
    Baseline,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Arch::Pdit => "pdit",
            Arch::Stacked => "stacked",
            Arch::Baseline => "baseline",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pdit" => Ok(Arch::Pdit),
            "stacked" => Ok(Arch::Stacked),
            "baseline" => Ok(Arch::Baseline),
            other => Err(format!("unknown arch '{other}' (pdit|stacked|baseline)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub hidden_dim: usize,
    pub heads: usize,
    /// Number of (P, D) layer pairs.
    pub interleave_pairs: usize,
    pub mission_embed_dim: usize,
    pub action_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Pdit,
            hidden_dim: 64,
            heads: 2,
            interleave_pairs: 2,
            mission_embed_dim: 128,
            action_count: ACTION_COUNT,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim == 0 || self.hidden_dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.interleave_pairs == 0 {
            return Err(ModelError::InvalidConfig("interleave_pairs must be >= 1".into()));
        }
        if self.mission_embed_dim == 0 {
            return Err(ModelError::InvalidConfig("mission_embed_dim must be positive".into()));
        }
        if self.action_count != ACTION_COUNT {
            return Err(ModelError::InvalidConfig(format!(
                "action_count {} does not match the environment's {}",
                self.action_count, ACTION_COUNT
            )));
        }
        Ok(())
    }

    fn baseline_mlp_dim(&self) -> usize {
        (self.hidden_dim / 2).max(8)
    }
}

/// Which half of the parameter partition a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Theta {
    Perception,
    Decision,
}

/// Perception side: encoders, contrastive projections, context tokens, and
/// P-layers. Decision side: D-layers, the baseline MLP, and output heads.
pub fn partition_of(name: &str) -> Theta {
    let decision = name.starts_with("head.")
        || name.starts_with("mlp.")
        || (name.starts_with('d') && name[1..].starts_with(|c: char| c.is_ascii_digit()));
    if decision {
        Theta::Decision
    } else {
        Theta::Perception
    }
}

/// Named parameter set for one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Parameter leaves bound into a tape, addressable by name.
pub struct Bound {
    ids: BTreeMap<String, ValueId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> ValueId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ValueId)> {
        self.ids.iter()
    }
}

impl ModelParams {
    /// Deterministic initialization: weights uniform in
    /// `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, layer-norm gain 1, biases 0,
    /// embedding-like rows uniform in `(-1/sqrt(dim), 1/sqrt(dim))`.
    pub fn init(config: ModelConfig, seed: u64) -> ModelParams {
        config.validate().expect("valid model config");
        let mut rng = crate::env::rng::SplitMix64::new(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, kind) in param_specs(&config) {
            let numel: usize = shape.iter().product();
            let data = match kind {
                ParamKind::Linear => {
                    let bound = 1.0 / (shape[0] as f32).sqrt();
                    uniform(&mut rng, numel, bound)
                }
                ParamKind::Conv => {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                    uniform(&mut rng, numel, 1.0 / fan_in.sqrt())
                }
                ParamKind::Embedding => {
                    let dim = *shape.last().unwrap() as f32;
                    uniform(&mut rng, numel, 1.0 / dim.sqrt())
                }
                ParamKind::Zero => vec![0.0; numel],
                ParamKind::One => vec![1.0; numel],
            };
            tensors.insert(name, Tensor::new(shape, data).with_grad());
        }
        ModelParams { config, tensors }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Insert every parameter as a tape leaf. `trainable` controls whether
    /// gradients flow at all; `freeze_perception` additionally detaches the
    /// perception partition (used by the gradient-coupling control).
    pub fn bind_with(&self, tape: &mut Tape, trainable: bool, freeze_perception: bool) -> Bound {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.tensors {
            let grad =
                trainable && !(freeze_perception && partition_of(name) == Theta::Perception);
            let id = tape.leaf(t.shape.clone(), t.data.clone(), grad);
            ids.insert(name.clone(), id);
        }
        Bound { ids }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.bind_with(tape, trainable, false)
    }

    /// Pull gradients for every parameter out of a backward pass.
    pub fn absorb_grads(&mut self, bound: &Bound, grads: &crate::tensor::Gradients) {
        for (name, t) in self.tensors.iter_mut() {
            let id = bound.id(name);
            t.grad = Some(grads.for_leaf(id, t.numel()));
        }
    }

    /// L2 norm over the gradients of one partition.
    pub fn grad_norm(&self, theta: Theta) -> f64 {
        let mut acc = 0.0f64;
        for (name, t) in &self.tensors {
            if partition_of(name) != theta {
                continue;
            }
            if let Some(g) = &t.grad {
                for &v in g {
                    acc += f64::from(v) * f64::from(v);
                }
            }
        }
        acc.sqrt()
    }
}

fn uniform(rng: &mut crate::env::rng::SplitMix64, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| (rng.next_f32() * 2.0 - 1.0) * bound).collect()
}

enum ParamKind {
    Linear,
    Conv,
    Embedding,
    Zero,
    One,
}

type ParamSpec = (String, Vec<usize>, ParamKind);

fn linear_specs(prefix: &str, din: usize, dout: usize, out: &mut Vec<ParamSpec>) {
    out.push((format!("{prefix}.w"), vec![din, dout], ParamKind::Linear));
    out.push((format!("{prefix}.b"), vec![dout], ParamKind::Zero));
}

fn layer_norm_specs(prefix: &str, dim: usize, out: &mut Vec<ParamSpec>) {
    out.push((format!("{prefix}.g"), vec![dim], ParamKind::One));
    out.push((format!("{prefix}.b"), vec![dim], ParamKind::Zero));
}

fn transformer_layer_specs(prefix: &str, h: usize, out: &mut Vec<ParamSpec>) {
    layer_norm_specs(&format!("{prefix}.ln1"), h, out);
    for proj in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.attn.{proj}"), vec![h, h], ParamKind::Linear));
    }
    for bias in ["bq", "bk", "bv", "bo"] {
        out.push((format!("{prefix}.attn.{bias}"), vec![h], ParamKind::Zero));
    }
    layer_norm_specs(&format!("{prefix}.ln2"), h, out);
    linear_specs(&format!("{prefix}.mlp.l1"), h, h * MLP_RATIO, out);
    linear_specs(&format!("{prefix}.mlp.l2"), h * MLP_RATIO, h, out);
}

fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let h = config.hidden_dim;
    let m = config.mission_embed_dim;
    let mut specs = Vec::new();

    // shared encoders
    specs.push((
        "vis.embed.kind".into(),
        vec![KIND_CHANNEL_BOUND as usize, h],
        ParamKind::Embedding,
    ));
    specs.push((
        "vis.embed.color".into(),
        vec![COLOR_CHANNEL_BOUND as usize, h],
        ParamKind::Embedding,
    ));
    specs.push((
        "vis.embed.state".into(),
        vec![STATE_CHANNEL_BOUND as usize, h],
        ParamKind::Embedding,
    ));
    specs.push(("vis.conv.w".into(), vec![h, h, CONV_KERNEL, CONV_KERNEL], ParamKind::Conv));
    specs.push(("vis.conv.b".into(), vec![h], ParamKind::Zero));
    specs.push(("txt.embed".into(), vec![mission::vocab_size(), m], ParamKind::Embedding));
    linear_specs("txt.proj", m, h, &mut specs);
    linear_specs("clip.vproj", h, h, &mut specs);
    linear_specs("clip.tproj", h, h, &mut specs);

    match config.arch {
        Arch::Pdit | Arch::Stacked => {
            specs.push(("vis.pos".into(), vec![VIS_TOKENS, h], ParamKind::Embedding));
            specs.push(("txt.pos".into(), vec![MISSION_LEN, m], ParamKind::Embedding));
            specs.push(("ctx.action".into(), vec![ACTION_COUNT + 1, h], ParamKind::Embedding));
            specs.push(("ctx.reward.scale".into(), vec![1, h], ParamKind::Embedding));
            specs.push(("ctx.reward.bias".into(), vec![1, h], ParamKind::Embedding));
            specs.push(("ctx.cls".into(), vec![1, h], ParamKind::Embedding));
            for i in 0..config.interleave_pairs {
                transformer_layer_specs(&format!("p{i}"), h, &mut specs);
                transformer_layer_specs(&format!("d{i}"), h, &mut specs);
            }
            layer_norm_specs("head.ln", h, &mut specs);
            linear_specs("head.policy", h, config.action_count, &mut specs);
            linear_specs("head.value", h, 1, &mut specs);
        }
        Arch::Baseline => {
            let q = config.baseline_mlp_dim();
            linear_specs("mlp.l1", VIS_TOKENS * h + h, q, &mut specs);
            linear_specs("mlp.l2", q, q, &mut specs);
            linear_specs("head.policy", q, config.action_count, &mut specs);
            linear_specs("head.value", q, 1, &mut specs);
        }
    }
    specs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_is_total_and_disjoint() {
        for arch in [Arch::Pdit, Arch::Stacked, Arch::Baseline] {
            let cfg = ModelConfig { arch, ..Default::default() };
            let params = ModelParams::init(cfg, 0);
            let mut p = 0usize;
            let mut d = 0usize;
            for name in params.tensors.keys() {
                match partition_of(name) {
                    Theta::Perception => p += 1,
                    Theta::Decision => d += 1,
                }
            }
            assert_eq!(p + d, params.tensors.len());
            assert!(p > 0, "{arch}: empty perception partition");
            assert!(d > 0, "{arch}: empty decision partition");
        }
    }

    #[test]
    fn pdit_and_stacked_have_identical_parameter_sets() {
        let pdit = ModelParams::init(ModelConfig { arch: Arch::Pdit, ..Default::default() }, 7);
        let stacked =
            ModelParams::init(ModelConfig { arch: Arch::Stacked, ..Default::default() }, 7);
        assert_eq!(pdit.param_count(), stacked.param_count());
        let a: Vec<&String> = pdit.tensors.keys().collect();
        let b: Vec<&String> = stacked.tensors.keys().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_is_smaller_than_pdit() {
        let pdit = ModelParams::init(ModelConfig::default(), 0);
        let baseline =
            ModelParams::init(ModelConfig { arch: Arch::Baseline, ..Default::default() }, 0);
        assert!(
            baseline.param_count() < pdit.param_count(),
            "baseline {} vs pdit {}",
            baseline.param_count(),
            pdit.param_count()
        );
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(ModelConfig::default(), 123);
        let b = ModelParams::init(ModelConfig::default(), 123);
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let bad = ModelConfig { hidden_dim: 65, heads: 2, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { interleave_pairs: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
