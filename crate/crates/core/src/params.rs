//! Named parameter tables and the per-pass binding of parameters to a graph.

use std::collections::{BTreeMap, HashMap};

use lamae_tensor::{Float, Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{BlockConfig, ModelConfig, Task};
use crate::error::{LamaeError, Result};
use crate::rng::{name_key, RngStreams, Stream};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot uniform over `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }
}

pub type ParamStore<T> = BTreeMap<String, Tensor<T>>;

/// Standard deviation of the mask token and slot embeddings at init.
pub const TOKEN_INIT_STD: f64 = 0.02;

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
    out.push(ParamSpec::new(
        format!("{prefix}.weight"),
        vec![fan_in, fan_out],
        Init::Xavier,
    ));
    if bias {
        out.push(ParamSpec::new(format!("{prefix}.bias"), vec![fan_out], Init::Zeros));
    }
}

fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, dim: usize) {
    out.push(ParamSpec::new(format!("{prefix}.gain"), vec![dim], Init::Ones));
    out.push(ParamSpec::new(format!("{prefix}.bias"), vec![dim], Init::Zeros));
}

pub fn stack_specs(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &BlockConfig) {
    let d = cfg.embed_dim;
    for i in 0..cfg.num_layers {
        let b = format!("{prefix}.blocks.{i}");
        norm_specs(out, &format!("{b}.norm1"), d);
        linear_specs(out, &format!("{b}.attn.qkv"), d, 3 * d, cfg.qkv_bias);
        linear_specs(out, &format!("{b}.attn.proj"), d, d, true);
        norm_specs(out, &format!("{b}.norm2"), d);
        linear_specs(out, &format!("{b}.mlp.fc1"), d, cfg.mlp_ratio * d, true);
        linear_specs(out, &format!("{b}.mlp.fc2"), cfg.mlp_ratio * d, d, true);
    }
    if cfg.num_layers > 0 {
        norm_specs(out, &format!("{prefix}.norm"), d);
    }
}

/// Prefix of the token embedding parameters for a model.
pub fn embed_prefix(cfg: &ModelConfig) -> &'static str {
    if cfg.variant.is_video() {
        "tube_embed"
    } else {
        "patch_embed"
    }
}

/// Backbone and reconstruction parameters used during pretraining.
pub fn pretrain_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let d = cfg.encoder.embed_dim;
    let token_pixels = cfg.grid.patch_pixels() * cfg.grid.time_patch;
    linear_specs(&mut out, embed_prefix(cfg), token_pixels, d, true);
    stack_specs(&mut out, "encoder", &cfg.encoder);
    if cfg.identity_embeddings {
        out.push(ParamSpec::new(
            "latent.view_embed",
            vec![cfg.views_per_study, d],
            Init::Normal(cfg.identity_init_std),
        ));
        out.push(ParamSpec::new(
            "latent.frame_embed",
            vec![cfg.time_slots(), d],
            Init::Normal(cfg.identity_init_std),
        ));
    }
    stack_specs(&mut out, "latent", &cfg.latent);
    let dd = cfg.decoder.embed_dim;
    linear_specs(&mut out, "decoder.proj", d, dd, true);
    out.push(ParamSpec::new(
        "decoder.mask_token",
        vec![1, dd],
        Init::Normal(TOKEN_INIT_STD),
    ));
    stack_specs(&mut out, "decoder", &cfg.decoder);
    linear_specs(&mut out, "decoder.head", dd, token_pixels, true);
    out
}

pub fn head_outputs(cfg: &ModelConfig, task: Task) -> usize {
    match task {
        Task::Multilabel => cfg.num_labels,
        Task::Regression => 1,
    }
}

/// The pooled-token MLP head, preceded by a fixed feature standardization.
pub fn head_specs(cfg: &ModelConfig, task: Task) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let d = cfg.encoder.embed_dim;
    out.push(ParamSpec::new(FEATURE_SHIFT, vec![1, d], Init::Zeros));
    out.push(ParamSpec::new(FEATURE_SCALE, vec![1, d], Init::Ones));
    let hidden = cfg.head_hidden_dim();
    linear_specs(&mut out, "head.fc1", cfg.encoder.embed_dim, hidden, true);
    linear_specs(&mut out, "head.fc2", hidden, head_outputs(cfg, task), true);
    out
}

pub const FEATURE_SHIFT: &str = "head.norm.shift";
pub const FEATURE_SCALE: &str = "head.norm.scale";

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

/// Stored with the parameters but never updated by the optimizer.
pub fn is_buffer(name: &str) -> bool {
    name.starts_with("head.norm.")
}

/// Draws one parameter. The stream is keyed by the name alone, so two models
/// built from the same seed agree on every parameter they share.
pub fn init_param<T: Float>(spec: &ParamSpec, streams: &RngStreams) -> Tensor<T> {
    let mut rng: ChaCha8Rng = streams.stream(Stream::Init, &[name_key(&spec.name)]);
    match spec.init {
        Init::Zeros => Tensor::zeros(spec.shape.clone()),
        Init::Ones => Tensor::ones(spec.shape.clone()),
        Init::Xavier => {
            let (fan_in, fan_out) = (spec.shape[0], spec.shape[spec.shape.len() - 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::from_fn(spec.shape.clone(), |_| T::from_f64(rng.random_range(-a..=a)))
        }
        Init::Normal(std) => {
            let normal = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(spec.shape.clone(), |_| T::from_f64(normal.sample(&mut rng)))
        }
    }
}

pub fn init_params<T: Float>(specs: &[ParamSpec], seed: u64) -> ParamStore<T> {
    let streams = RngStreams::new(seed);
    specs
        .iter()
        .map(|s| (s.name.clone(), init_param(s, &streams)))
        .collect()
}

/// Adds any parameter from `specs` missing in `store`; existing tensors are
/// kept but must match the declared shape.
pub fn ensure_params<T: Float>(store: &mut ParamStore<T>, specs: &[ParamSpec], seed: u64) -> Result<()> {
    let streams = RngStreams::new(seed);
    for spec in specs {
        match store.get(&spec.name) {
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(LamaeError::Checkpoint(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )))
            }
            Some(_) => {}
            None => {
                store.insert(spec.name.clone(), init_param(spec, &streams));
            }
        }
    }
    Ok(())
}

pub fn param_count<T: Float>(store: &ParamStore<T>) -> usize {
    store.values().map(Tensor::numel).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    HeadOnly,
    Nothing,
}

impl Trainable {
    pub fn allows(self, name: &str) -> bool {
        match self {
            Trainable::All => !is_buffer(name),
            Trainable::HeadOnly => is_head_param(name) && !is_buffer(name),
            Trainable::Nothing => false,
        }
    }
}

/// One forward/backward pass: a fresh graph plus lazily bound parameters.
pub struct Session<'a, T> {
    pub graph: Graph<T>,
    params: &'a ParamStore<T>,
    bound: HashMap<String, Var>,
    trainable: Trainable,
    pub train: bool,
    pub dropout_rng: Option<ChaCha8Rng>,
}

impl<'a, T: Float> Session<'a, T> {
    pub fn new(params: &'a ParamStore<T>, trainable: Trainable) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: HashMap::new(),
            trainable,
            train: trainable != Trainable::Nothing,
            dropout_rng: None,
        }
    }

    /// The graph node of parameter `name`, inserting it on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| LamaeError::Integrity(format!("missing parameter {name}")))?
            .clone();
        let v = self.graph.leaf(value, self.trainable.allows(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.graph.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let rng = self
            .dropout_rng
            .as_mut()
            .ok_or_else(|| LamaeError::Integrity("dropout enabled without a random stream".into()))?;
        Ok(self.graph.dropout(x, p, true, rng)?)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        Ok(self.graph.backward(loss)?)
    }

    /// Gradients of every bound trainable parameter. Parameters bound but not
    /// reached by the loss report zeros.
    pub fn grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter(|(_, &v)| self.graph.requires_grad(v))
            .map(|(name, &v)| {
                let g = self
                    .graph
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.shape(v).to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;

    fn names(cfg: &ModelConfig) -> Vec<String> {
        pretrain_specs(cfg).into_iter().map(|s| s.name).collect()
    }

    #[test]
    fn variants_differ_only_in_latent_names() {
        for (la, base) in [
            (Variant::Lamae, Variant::ImageMae),
            (Variant::VideoLamae, Variant::VideoMae),
        ] {
            let a = names(&ModelConfig::desk(la));
            let b = names(&ModelConfig::desk(base));
            let extra: Vec<_> = a.iter().filter(|n| !b.contains(n)).collect();
            assert!(!extra.is_empty());
            assert!(extra.iter().all(|n| n.starts_with("latent.")), "{extra:?}");
            assert!(b.iter().all(|n| a.contains(n)));
        }
    }

    #[test]
    fn shared_names_initialize_identically() {
        let a: ParamStore<f64> = init_params(&pretrain_specs(&ModelConfig::desk(Variant::Lamae)), 3);
        let b: ParamStore<f64> = init_params(&pretrain_specs(&ModelConfig::desk(Variant::ImageMae)), 3);
        for (name, t) in &b {
            assert!(a[name].bit_eq(t), "{name}");
        }
        let c: ParamStore<f64> = init_params(&pretrain_specs(&ModelConfig::desk(Variant::ImageMae)), 4);
        assert!(!c["encoder.blocks.0.attn.qkv.weight"].bit_eq(&b["encoder.blocks.0.attn.qkv.weight"]));
    }

    #[test]
    fn xavier_bound_respected() {
        let spec = ParamSpec::new("w", vec![10, 30], Init::Xavier);
        let t: Tensor<f64> = init_param(&spec, &RngStreams::new(0));
        let a = (6.0f64 / 40.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= a));
    }

    #[test]
    fn frozen_session_binds_constants() {
        let store: ParamStore<f64> = init_params(&head_specs(&ModelConfig::desk(Variant::Lamae), Task::Regression), 0);
        let mut full: ParamStore<f64> = init_params(&pretrain_specs(&ModelConfig::desk(Variant::Lamae)), 0);
        full.extend(store);
        let mut s = Session::new(&full, Trainable::HeadOnly);
        let w = s.p("head.fc1.weight").unwrap();
        let e = s.p("encoder.norm.gain").unwrap();
        assert!(s.graph.requires_grad(w));
        assert!(!s.graph.requires_grad(e));
        assert!(matches!(s.p("nope"), Err(LamaeError::Integrity(_))));
    }
}
