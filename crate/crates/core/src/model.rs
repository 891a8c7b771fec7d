//! Mini-SAM: a scaled-down ViT encoder with optional bottleneck adapters,
//! a light pixel-shuffle decoder and a 1×1-conv multi-class head.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, name_hash};
use crate::tensor::{Element, Tensor};
use crate::wire::{ParamContainer, FLAG_SUBSET, FLAG_UPDATE};

const LN_EPS: f64 = 1e-6;
const MLP_RATIO: usize = 4;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Encoder,
    Adapter,
    Decoder,
    Head,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Encoder, Role::Adapter, Role::Decoder, Role::Head];

    pub fn tag(self) -> u8 {
        match self {
            Role::Encoder => 0,
            Role::Adapter => 1,
            Role::Decoder => 2,
            Role::Head => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "mini-b")]
    MiniB,
    #[serde(rename = "mini-l")]
    MiniL,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::MiniB => "mini-b",
            Variant::MiniL => "mini-l",
        }
    }
}

/// Which parameter subset is trained (and therefore transmitted).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainMode {
    /// Every parameter is trainable (FedSAM).
    #[serde(rename = "full")]
    FullFineTune,
    /// Adapters, decoder and head are trainable; the encoder is frozen (FedMSA).
    #[serde(rename = "adapter")]
    AdapterDecoder,
}

impl TrainMode {
    pub fn is_trainable(self, role: Role) -> bool {
        match self {
            TrainMode::FullFineTune => true,
            TrainMode::AdapterDecoder => role != Role::Encoder,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            TrainMode::FullFineTune => "full",
            TrainMode::AdapterDecoder => "adapter",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub adapter_dim: usize,
    pub decoder_dim: usize,
    pub num_classes: usize,
    pub mask_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_variant(Variant::MiniB, 2)
    }
}

impl ModelConfig {
    pub fn for_variant(variant: Variant, num_classes: usize) -> Self {
        let (embed_dim, depth) = match variant {
            Variant::MiniB => (64, 2),
            Variant::MiniL => (96, 3),
        };
        Self {
            variant,
            input_size: 64,
            patch_size: 8,
            embed_dim,
            depth,
            heads: 4,
            adapter_dim: 16,
            decoder_dim: 32,
            num_classes,
            mask_size: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_size == 0 || self.patch_size == 0 {
            return bad("input_size and patch_size must be positive".into());
        }
        if self.input_size % self.patch_size != 0 {
            return bad(format!(
                "input_size {} not divisible by patch_size {}",
                self.input_size, self.patch_size
            ));
        }
        if self.mask_size * 4 != self.input_size {
            return bad(format!(
                "mask_size {} must be input_size/4 = {}",
                self.mask_size,
                self.input_size as f64 / 4.0
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 || self.adapter_dim == 0 || self.decoder_dim == 0 {
            return bad("depth, adapter_dim and decoder_dim must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        let grid = self.grid();
        if self.mask_size < grid
            || self.mask_size % grid != 0
            || !(self.mask_size / grid).is_power_of_two()
        {
            return bad(format!(
                "mask_size {} must be a power-of-two multiple of the token grid {grid}",
                self.mask_size
            ));
        }
        Ok(())
    }

    /// Tokens per side after patch embedding.
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Number of 2× pixel-shuffle stages taking the token grid to mask size.
    pub fn upsample_stages(&self) -> usize {
        (self.mask_size / self.grid()).trailing_zeros() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor<f32>,
    pub role: Role,
    pub trainable: bool,
}

/// Named parameters in definition order, each tagged with a role.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamRegistry {
    params: IndexMap<String, Param>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>, role: Role) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(
            name,
            Param {
                tensor,
                role,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
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

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn role_count(&self, role: Role) -> usize {
        self.params
            .values()
            .filter(|p| p.role == role)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn entries_with_role(&self, role: Role) -> usize {
        self.params.values().filter(|p| p.role == role).count()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Overwrites a parameter value, keeping role and flag.
    pub fn set_value(&mut self, name: &str, tensor: Tensor<f32>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::dim(format!(
                "parameter {name:?} has shape {:?}, new value {:?}",
                p.tensor.shape(),
                tensor.shape()
            )));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    /// Trainable values keyed by name, in registry order.
    pub fn trainable_values(&self) -> IndexMap<String, Tensor<f32>> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k.clone(), p.tensor.clone()))
            .collect()
    }

    /// Copies every value of `source` whose name exists here. Every
    /// non-adapter parameter of `self` must be present in `source`.
    pub fn load_shared(&mut self, source: &ParamRegistry) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            match source.params.get(name) {
                Some(src) if src.tensor.shape() == p.tensor.shape() => {
                    p.tensor = src.tensor.clone();
                }
                Some(src) => {
                    return Err(Error::dim(format!(
                        "checkpoint shape {:?} for {name:?}, model expects {:?}",
                        src.tensor.shape(),
                        p.tensor.shape()
                    )))
                }
                None if p.role == Role::Adapter => {}
                None => {
                    return Err(Error::Config(format!(
                        "checkpoint is missing parameter {name:?}"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Container holding every parameter (a checkpoint) or only the
    /// trainable subset (a round payload).
    pub fn to_container(&self, trainable_only: bool, is_update: bool) -> ParamContainer {
        let mut flags = 0;
        if trainable_only {
            flags |= FLAG_SUBSET;
        }
        if is_update {
            flags |= FLAG_UPDATE;
        }
        let mut c = ParamContainer::new(flags);
        for (name, p) in &self.params {
            if !trainable_only || p.trainable {
                c.push(name.clone(), p.role, p.tensor.clone());
            }
        }
        c
    }

    /// Rebuilds a registry from a checkpoint; all parameters start trainable.
    pub fn from_container(c: &ParamContainer) -> Result<Self> {
        let mut reg = Self::new();
        for e in &c.entries {
            reg.insert(e.name.clone(), e.tensor.clone(), e.role)?;
        }
        Ok(reg)
    }

    /// Writes values from a container into existing parameters.
    pub fn apply_container(&mut self, c: &ParamContainer) -> Result<()> {
        for e in &c.entries {
            let role = self
                .params
                .get(&e.name)
                .map(|p| p.role)
                .ok_or_else(|| Error::Protocol(format!("unknown parameter {:?}", e.name)))?;
            if role != e.role {
                return Err(Error::Protocol(format!(
                    "role mismatch for {:?}: {:?} vs {:?}",
                    e.name, role, e.role
                )));
            }
            self.set_value(&e.name, e.tensor.clone())?;
        }
        Ok(())
    }

    /// Records every parameter on `tape`, honoring the trainable flags.
    pub fn record<T: Element>(&self, tape: &mut Tape<T>) -> Result<()> {
        for (name, p) in &self.params {
            tape.param(name, p.tensor.cast(), p.trainable)?;
        }
        Ok(())
    }

    /// Records every parameter as a constant.
    pub fn record_frozen<T: Element>(&self, tape: &mut Tape<T>) -> Result<()> {
        for (name, p) in &self.params {
            tape.param(name, p.tensor.cast(), false)?;
        }
        Ok(())
    }
}

/// Sets trainable flags for `mode` and returns the trainable scalar count n.
pub fn set_train_mode(params: &mut ParamRegistry, mode: TrainMode) -> Result<usize> {
    if mode == TrainMode::AdapterDecoder && params.entries_with_role(Role::Adapter) == 0 {
        return Err(Error::Config(
            "adapter/decoder training needs a model built with adapters".into(),
        ));
    }
    for p in params.params.values_mut() {
        p.trainable = mode.is_trainable(p.role);
    }
    Ok(params.trainable_count())
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Layer shapes of a Mini-SAM model, in definition order.
fn layout(cfg: &ModelConfig, with_adapters: bool) -> Vec<(String, Vec<usize>, Role, Init)> {
    let d = cfg.embed_dim;
    let hidden = MLP_RATIO * d;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, role: Role, init: Init| {
        out.push((name, shape, role, init));
    };
    let linear = |push: &mut dyn FnMut(String, Vec<usize>, Role, Init),
                  prefix: &str,
                  fan_in: usize,
                  fan_out: usize,
                  role: Role,
                  weight_init: Init| {
        push(format!("{prefix}.weight"), vec![fan_in, fan_out], role, weight_init);
        push(format!("{prefix}.bias"), vec![fan_out], role, Init::Zeros);
    };
    let norm = |push: &mut dyn FnMut(String, Vec<usize>, Role, Init), prefix: &str, role: Role| {
        push(format!("{prefix}.weight"), vec![d], role, Init::Ones);
        push(format!("{prefix}.bias"), vec![d], role, Init::Zeros);
    };

    linear(&mut push, "encoder.patch_embed", cfg.patch_dim(), d, Role::Encoder, Init::Normal);
    push("encoder.pos_embed".into(), vec![cfg.tokens(), d], Role::Encoder, Init::Normal);
    for b in 0..cfg.depth {
        let p = format!("encoder.blocks.{b}");
        norm(&mut push, &format!("{p}.norm1"), Role::Encoder);
        for proj in ["q", "k", "v", "proj"] {
            linear(&mut push, &format!("{p}.attn.{proj}"), d, d, Role::Encoder, Init::Normal);
        }
        norm(&mut push, &format!("{p}.norm2"), Role::Encoder);
        linear(&mut push, &format!("{p}.mlp.fc1"), d, hidden, Role::Encoder, Init::Normal);
        linear(&mut push, &format!("{p}.mlp.fc2"), hidden, d, Role::Encoder, Init::Normal);
        if with_adapters {
            for site in ["attn", "mlp"] {
                let a = format!("adapters.{b}.{site}");
                linear(&mut push, &format!("{a}.down"), d, cfg.adapter_dim, Role::Adapter, Init::Normal);
                linear(&mut push, &format!("{a}.up"), cfg.adapter_dim, d, Role::Adapter, Init::Zeros);
            }
        }
    }
    norm(&mut push, "encoder.neck", Role::Encoder);

    let c = cfg.decoder_dim;
    let stages = cfg.upsample_stages();
    if stages == 0 {
        linear(&mut push, "decoder.proj", d, c, Role::Decoder, Init::Normal);
    }
    for s in 0..stages {
        let fan_in = if s == 0 { d } else { c };
        linear(&mut push, &format!("decoder.up{s}"), fan_in, 4 * c, Role::Decoder, Init::Normal);
    }
    linear(&mut push, "decoder.refine.fc1", c, c, Role::Decoder, Init::Normal);
    linear(&mut push, "decoder.refine.fc2", c, c, Role::Decoder, Init::Normal);
    linear(&mut push, "head", c, cfg.num_classes, Role::Head, Init::Normal);
    out
}

/// Names and shapes of every parameter, without allocating values.
pub fn parameter_shapes(cfg: &ModelConfig, with_adapters: bool) -> Vec<(String, Vec<usize>, Role)> {
    layout(cfg, with_adapters)
        .into_iter()
        .map(|(n, s, r, _)| (n, s, r))
        .collect()
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f32 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return (z * std) as f32;
        }
    }
}

/// The Mini-SAM forward graph. Holds only the configuration; parameter
/// values live in a [`ParamRegistry`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiniSam {
    cfg: ModelConfig,
    with_adapters: bool,
}

/// Builds the registry (all parameters trainable) and the forward graph.
/// Each parameter is drawn from its own stream keyed by `(seed, name)`, so
/// shared parameters are identical with and without adapters.
pub fn build_model(cfg: &ModelConfig, with_adapters: bool, seed: u64) -> Result<(ParamRegistry, MiniSam)> {
    cfg.validate()?;
    let mut reg = ParamRegistry::new();
    for (name, shape, role, init) in layout(cfg, with_adapters) {
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Normal => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name_hash(&name)));
                Tensor::from_fn(shape, |_| truncated_normal(&mut rng, INIT_STD))
            }
        };
        reg.insert(name, tensor, role)?;
    }
    Ok((
        reg,
        MiniSam {
            cfg: cfg.clone(),
            with_adapters,
        },
    ))
}

impl MiniSam {
    pub fn new(cfg: &ModelConfig, with_adapters: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            with_adapters,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn with_adapters(&self) -> bool {
        self.with_adapters
    }

    /// Inference: per-class logits `[mask × mask × classes]`.
    pub fn forward(&self, params: &ParamRegistry, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        params.record_frozen(&mut tape)?;
        let out = self.forward_on_tape(&mut tape, image)?;
        Ok(tape.value(out).clone())
    }

    /// Splits an `[H×W×3]` image into `[tokens × patch²·3]` rows.
    pub fn patchify<T: Element>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.cfg.input_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::dim(format!(
                "image must be {s}×{s}×3, got {:?}",
                image.shape()
            )));
        }
        if image
            .data()
            .iter()
            .any(|&v| v < T::zero() || v > T::one())
        {
            return Err(Error::Domain("image values must lie in [0, 1]".into()));
        }
        let p = self.cfg.patch_size;
        let g = self.cfg.grid();
        let src = image.data();
        let mut out = Vec::with_capacity(src.len());
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..p {
                    let y = gy * p + py;
                    let start = (y * s + gx * p) * 3;
                    out.extend_from_slice(&src[start..start + p * 3]);
                }
            }
        }
        Tensor::new(vec![g * g, self.cfg.patch_dim()], out)
    }

    fn var<T: Element>(tape: &Tape<T>, name: &str) -> Result<Var> {
        tape.var(name)
            .ok_or_else(|| Error::Config(format!("parameter {name:?} not recorded on tape")))
    }

    fn linear<T: Element>(tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let w = Self::var(tape, &format!("{prefix}.weight"))?;
        let b = Self::var(tape, &format!("{prefix}.bias"))?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn norm<T: Element>(tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let g = Self::var(tape, &format!("{prefix}.weight"))?;
        let b = Self::var(tape, &format!("{prefix}.bias"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    /// down-projection → ReLU → up-projection
    fn adapter<T: Element>(tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let h = Self::linear(tape, x, &format!("{prefix}.down"))?;
        let h = tape.relu(h);
        Self::linear(tape, h, &format!("{prefix}.up"))
    }

    /// Records the forward pass; parameters must already be on the tape.
    pub fn forward_on_tape<T: Element>(&self, tape: &mut Tape<T>, image: &Tensor<T>) -> Result<Var> {
        let cfg = &self.cfg;
        let patches = tape.constant(self.patchify(image)?);
        let mut x = Self::linear(tape, patches, "encoder.patch_embed")?;
        let pos = Self::var(tape, "encoder.pos_embed")?;
        x = tape.add(x, pos)?;

        for b in 0..cfg.depth {
            let p = format!("encoder.blocks.{b}");
            let h = Self::norm(tape, x, &format!("{p}.norm1"))?;
            let q = Self::linear(tape, h, &format!("{p}.attn.q"))?;
            let k = Self::linear(tape, h, &format!("{p}.attn.k"))?;
            let v = Self::linear(tape, h, &format!("{p}.attn.v"))?;
            let a = tape.attention(q, k, v, cfg.heads)?;
            let a = Self::linear(tape, a, &format!("{p}.attn.proj"))?;
            x = tape.add(x, a)?;
            if self.with_adapters {
                let ad = Self::adapter(tape, x, &format!("adapters.{b}.attn"))?;
                x = tape.add(x, ad)?;
            }

            let h = Self::norm(tape, x, &format!("{p}.norm2"))?;
            let m = Self::linear(tape, h, &format!("{p}.mlp.fc1"))?;
            let m = tape.gelu(m);
            let m = Self::linear(tape, m, &format!("{p}.mlp.fc2"))?;
            x = tape.add(x, m)?;
            if self.with_adapters {
                // parallel to the MLP, fed by the same normalized input
                let ad = Self::adapter(tape, h, &format!("adapters.{b}.mlp"))?;
                x = tape.add(x, ad)?;
            }
        }
        x = Self::norm(tape, x, "encoder.neck")?;

        let stages = cfg.upsample_stages();
        if stages == 0 {
            x = Self::linear(tape, x, "decoder.proj")?;
        }
        let mut grid = cfg.grid();
        for s in 0..stages {
            x = Self::linear(tape, x, &format!("decoder.up{s}"))?;
            x = tape.gelu(x);
            x = tape.pixel_shuffle(x, grid)?;
            grid *= 2;
        }
        let r = Self::linear(tape, x, "decoder.refine.fc1")?;
        let r = tape.gelu(r);
        let r = Self::linear(tape, r, "decoder.refine.fc2")?;
        x = tape.add(x, r)?;

        let m = cfg.mask_size;
        let spatial = tape.reshape(x, &[m, m, cfg.decoder_dim])?;
        let w = Self::var(tape, "head.weight")?;
        let b = Self::var(tape, "head.bias")?;
        tape.conv1x1(spatial, w, b)
    }

    /// Mean BCE-with-logits loss of one sample, recorded on `tape`.
    pub fn loss_on_tape<T: Element>(
        &self,
        tape: &mut Tape<T>,
        image: &Tensor<T>,
        mask: &Tensor<T>,
    ) -> Result<Var> {
        let logits = self.forward_on_tape(tape, image)?;
        tape.bce_with_logits(logits, mask)
    }
}
