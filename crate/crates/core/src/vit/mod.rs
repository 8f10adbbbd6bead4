//! Toy-scale Vision Transformer with selectable pooling head.

mod checkpoint;
mod model;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use model::{forward, forward_with, map_pool, patchify, Forward, ForwardOptions, MapVars};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// How the token sequence is reduced to one representation vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadType {
    /// Extra learned `[class]` token; its final state is the representation.
    Cls,
    /// Global average pooling over tokens.
    Gap,
    /// Multihead attention pooling with a learned query.
    Map,
}

impl HeadType {
    pub const ALL: [HeadType; 3] = [HeadType::Cls, HeadType::Gap, HeadType::Map];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadType::Cls => "cls",
            HeadType::Gap => "gap",
            HeadType::Map => "map",
        }
    }
}

impl std::str::FromStr for HeadType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cls" | "token" => Ok(HeadType::Cls),
            "gap" => Ok(HeadType::Gap),
            "map" => Ok(HeadType::Map),
            other => Err(Error::Config(format!("unknown head type `{other}` (cls|gap|map)"))),
        }
    }
}

impl std::fmt::Display for HeadType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_channels() -> usize {
    3
}

/// Architecture of a ViT.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeConfig {
    pub width: usize,
    pub depth: usize,
    pub mlp_width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_res: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub num_classes: usize,
    pub head_type: HeadType,
    /// Add a pre-LN MLP sub-block after MAP attention.
    #[serde(default)]
    pub map_mlp: bool,
}

impl ShapeConfig {
    /// The 32-wide, 2-deep model used for desk-scale experiments.
    pub fn micro(head_type: HeadType) -> Self {
        ShapeConfig {
            width: 32,
            depth: 2,
            mlp_width: 64,
            heads: 2,
            patch_size: 4,
            image_res: 16,
            channels: 3,
            num_classes: 4,
            head_type,
            map_mlp: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("mlp_width", self.mlp_width),
            ("heads", self.heads),
            ("patch_size", self.patch_size),
            ("image_res", self.image_res),
            ("channels", self.channels),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} is not divisible by heads {}", self.width, self.heads)));
        }
        if !self.image_res.is_multiple_of(self.patch_size) {
            return Err(Error::Shape(format!(
                "resolution {} is not divisible by patch size {}",
                self.image_res, self.patch_size
            )));
        }
        Ok(())
    }

    /// Patch tokens per image (no class token).
    pub fn patch_tokens(&self) -> usize {
        let side = self.image_res / self.patch_size;
        side * side
    }

    /// Sequence length seen by the encoder.
    pub fn seq_len(&self) -> usize {
        self.patch_tokens() + usize::from(self.head_type == HeadType::Cls)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Named model parameters in a fixed, canonical order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: IndexMap<String, Tensor>,
}

/// Whether a parameter belongs to the pooling head or classifier.
pub fn is_head_param(name: &str) -> bool {
    name.starts_with("map/") || name.starts_with("head/")
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameter count outside the pooling head and classifier.
    pub fn body_count(&self) -> usize {
        self.iter().filter(|(n, _)| !is_head_param(n)).map(|(_, t)| t.numel()).sum()
    }

    pub fn head_count(&self) -> usize {
        self.iter().filter(|(n, _)| is_head_param(n)).map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Record every parameter as a tape leaf.
    pub fn attach(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        let vars = self.params.iter().map(|(k, t)| (k.clone(), tape.leaf(t.clone(), requires_grad))).collect();
        ParamVars { vars }
    }
}

/// Tape handles for a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        ParamVars { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("init shape")
    }

    /// Kernel with variance `1/fan_in`.
    fn kernel(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        self.normal(vec![fan_in, fan_out], (1.0 / fan_in as f64).sqrt())
    }
}

const SMALL_INIT: f64 = 0.02;

fn push_dense(p: &mut ParamSet, init: &mut Init, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    p.insert(format!("{prefix}/kernel"), init.kernel(fan_in, fan_out))?;
    p.insert(format!("{prefix}/bias"), Tensor::zeros(vec![fan_out]))
}

fn push_norm(p: &mut ParamSet, prefix: &str, width: usize) -> Result<()> {
    p.insert(format!("{prefix}/scale"), Tensor::full(vec![width], 1.0))?;
    p.insert(format!("{prefix}/bias"), Tensor::zeros(vec![width]))
}

/// Deterministic initialisation. The classifier kernel starts at zero so the
/// initial prediction is uniform.
pub fn init_params(shape: &ShapeConfig, seed: u64) -> Result<ParamSet> {
    shape.validate()?;
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
    let w = shape.width;
    let mut p = ParamSet::new();

    push_dense(&mut p, &mut init, "embed", shape.patch_dim(), w)?;
    if shape.head_type == HeadType::Cls {
        p.insert("cls", init.normal(vec![w], SMALL_INIT))?;
    }
    p.insert("pos_embedding", init.normal(vec![shape.seq_len(), w], SMALL_INIT))?;
    for i in 0..shape.depth {
        let b = format!("block{i}");
        push_norm(&mut p, &format!("{b}/ln1"), w)?;
        push_dense(&mut p, &mut init, &format!("{b}/attn/qkv"), w, 3 * w)?;
        push_dense(&mut p, &mut init, &format!("{b}/attn/out"), w, w)?;
        push_norm(&mut p, &format!("{b}/ln2"), w)?;
        push_dense(&mut p, &mut init, &format!("{b}/mlp/fc1"), w, shape.mlp_width)?;
        push_dense(&mut p, &mut init, &format!("{b}/mlp/fc2"), shape.mlp_width, w)?;
    }
    push_norm(&mut p, "encoder_norm", w)?;

    if shape.head_type == HeadType::Map {
        p.insert("map/query", init.normal(vec![w], SMALL_INIT))?;
        push_dense(&mut p, &mut init, "map/attn/q", w, w)?;
        push_dense(&mut p, &mut init, "map/attn/kv", w, 2 * w)?;
        push_dense(&mut p, &mut init, "map/attn/out", w, w)?;
        if shape.map_mlp {
            push_norm(&mut p, "map/ln", w)?;
            push_dense(&mut p, &mut init, "map/mlp/fc1", w, shape.mlp_width)?;
            push_dense(&mut p, &mut init, "map/mlp/fc2", shape.mlp_width, w)?;
        }
    }
    p.insert("head/kernel", Tensor::zeros(vec![w, shape.num_classes]))?;
    p.insert("head/bias", Tensor::zeros(vec![shape.num_classes]))?;
    Ok(p)
}
