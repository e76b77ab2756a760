//! Frozen post-LayerNorm transformer encoder with named PET attachment sites.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionLayout, Tape, Tensor, Var};
use crate::data::{Example, PAD};
use crate::error::{Error, Result};
use crate::pet::{PetKind, PetSet};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden_dim: 32,
            heads: 4,
            ffn_dim: 64,
            vocab_size: 64,
            max_seq_len: 16,
            num_classes: 2,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("model.layers", self.layers),
            ("model.hidden_dim", self.hidden_dim),
            ("model.heads", self.heads),
            ("model.ffn_dim", self.ffn_dim),
            ("model.vocab_size", self.vocab_size),
            ("model.max_seq_len", self.max_seq_len),
            ("model.num_classes", self.num_classes),
        ];
        for (field, value) in counts {
            if value == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.hidden_dim",
                format!(
                    "{} is not divisible by heads = {}",
                    self.hidden_dim, self.heads
                ),
            ));
        }
        Ok(())
    }
}

/// Attachment points inside a layer, plus the task head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SiteName {
    Query,
    Key,
    Value,
    AttentionOutput,
    FfnIntermediate,
    FfnOutput,
    LayerNormAttention,
    LayerNormFfn,
    Classifier,
}

impl SiteName {
    /// Sites repeated in every layer, in forward order.
    pub const LAYER_SITES: [SiteName; 8] = [
        SiteName::Query,
        SiteName::Key,
        SiteName::Value,
        SiteName::AttentionOutput,
        SiteName::FfnIntermediate,
        SiteName::FfnOutput,
        SiteName::LayerNormAttention,
        SiteName::LayerNormFfn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SiteName::Query => "attention.query",
            SiteName::Key => "attention.key",
            SiteName::Value => "attention.value",
            SiteName::AttentionOutput => "attention.output",
            SiteName::FfnIntermediate => "ffn.intermediate",
            SiteName::FfnOutput => "ffn.output",
            SiteName::LayerNormAttention => "layernorm.attention",
            SiteName::LayerNormFfn => "layernorm.ffn",
            SiteName::Classifier => "classifier",
        }
    }

    pub fn is_layer_norm(self) -> bool {
        matches!(self, SiteName::LayerNormAttention | SiteName::LayerNormFfn)
    }

    /// Sites whose weight is a matrix that a low-rank update can attach to.
    pub fn accepts_lora(self) -> bool {
        !self.is_layer_norm() && self != SiteName::Classifier
    }

    fn slot(self) -> usize {
        Self::LAYER_SITES
            .iter()
            .position(|&s| s == self)
            .expect("classifier has no layer slot")
    }
}

impl fmt::Display for SiteName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SiteName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::LAYER_SITES
            .iter()
            .chain(std::iter::once(&SiteName::Classifier))
            .find(|site| site.as_str() == s)
            .copied()
            .ok_or_else(|| Error::Input(format!("unknown site `{s}`")))
    }
}

impl TryFrom<String> for SiteName {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SiteName> for String {
    fn from(s: SiteName) -> String {
        s.as_str().to_string()
    }
}

/// A (layer, site) pair. Ordering is layer-major, then forward order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub name: SiteName,
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleSite {
    pub id: SiteId,
    pub weight_shape: Vec<usize>,
    pub bias_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteParams {
    /// `[out, in]` for linear sites, `[hidden]` gain for LayerNorm sites.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenParams {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    /// `layers[l][SiteName::slot()]`.
    pub layers: Vec<Vec<SiteParams>>,
}

impl FrozenParams {
    pub fn site(&self, id: SiteId) -> &SiteParams {
        &self.layers[id.layer][id.name.slot()]
    }

    pub fn site_mut(&mut self, id: SiteId) -> &mut SiteParams {
        &mut self.layers[id.layer][id.name.slot()]
    }

    /// Every base tensor in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &self.token_embedding),
            ("embeddings.position".to_string(), &self.position_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, p) in SiteName::LAYER_SITES.iter().zip(layer) {
                out.push((format!("layers.{l}.{name}.weight"), &p.weight));
                out.push((format!("layers.{l}.{name}.bias"), &p.bias));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            for p in layer {
                out.push(&mut p.weight);
                out.push(&mut p.bias);
            }
        }
        out
    }
}

/// Trainable linear head over the first-token representation.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn init(cfg: &TransformerConfig, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (cfg.hidden_dim as f64).sqrt();
        Self {
            weight: normal_tensor(vec![cfg.num_classes, cfg.hidden_dim], std, rng),
            bias: Tensor::zeros(vec![cfg.num_classes]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TransformerConfig,
    pub params: FrozenParams,
    pub sites: Vec<ModuleSite>,
}

fn normal_tensor(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Enumerates every attachment site with its shapes.
pub fn site_table(cfg: &TransformerConfig) -> Vec<ModuleSite> {
    let (h, f) = (cfg.hidden_dim, cfg.ffn_dim);
    let mut sites = Vec::with_capacity(cfg.layers * 8 + 1);
    #[allow(clippy::needless_range_loop)]
    for layer in 0..cfg.layers {
        for name in SiteName::LAYER_SITES {
            let (weight_shape, bias_len) = match name {
                SiteName::FfnIntermediate => (vec![f, h], f),
                SiteName::FfnOutput => (vec![h, f], h),
                SiteName::LayerNormAttention | SiteName::LayerNormFfn => (vec![h], h),
                _ => (vec![h, h], h),
            };
            sites.push(ModuleSite {
                id: SiteId { layer, name },
                weight_shape,
                bias_len,
            });
        }
    }
    sites.push(ModuleSite {
        id: SiteId {
            layer: cfg.layers,
            name: SiteName::Classifier,
        },
        weight_shape: vec![cfg.num_classes, h],
        bias_len: cfg.num_classes,
    });
    sites
}

impl Model {
    /// Seeded random base model. Linear weights are `N(0, 1/in)`, biases
    /// `N(0, 0.02²)`, embeddings `N(0, 1)`, LayerNorm gain 1 and bias 0.
    pub fn build(cfg: &TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden_dim;
        let token_embedding = normal_tensor(vec![cfg.vocab_size, h], 1.0, &mut rng);
        let position_embedding = normal_tensor(vec![cfg.max_seq_len, h], 1.0, &mut rng);
        let sites = site_table(cfg);
        let mut layers = Vec::with_capacity(cfg.layers);
        for layer in 0..cfg.layers {
            let mut params = Vec::with_capacity(8);
            for site in sites.iter().filter(|s| s.id.layer == layer) {
                let p = if site.id.name.is_layer_norm() {
                    SiteParams {
                        weight: Tensor::new(vec![h], vec![1.0; h])?,
                        bias: Tensor::zeros(vec![h]),
                    }
                } else {
                    let fan_in = site.weight_shape[1];
                    SiteParams {
                        weight: normal_tensor(
                            site.weight_shape.clone(),
                            1.0 / (fan_in as f64).sqrt(),
                            &mut rng,
                        ),
                        bias: normal_tensor(vec![site.bias_len], 0.02, &mut rng),
                    }
                };
                params.push(p);
            }
            layers.push(params);
        }
        Ok(Self {
            config: cfg.clone(),
            params: FrozenParams {
                token_embedding,
                position_embedding,
                layers,
            },
            sites,
        })
    }

    pub fn site(&self, id: SiteId) -> Option<&ModuleSite> {
        self.sites.iter().find(|s| s.id == id)
    }

    /// Copy of this model with every PET update folded into the base weights:
    /// `W + (U⊙M_U)(V⊙M_V)ᵀ` and `b + Δb⊙M`.
    pub fn merged(&self, pets: &PetSet) -> Result<Model> {
        pets.validate(self)?;
        let mut merged = self.clone();
        for pet in pets.modules() {
            let site = &mut merged.params.layers[pet.site.layer][pet.site.name.slot()];
            match &pet.kind {
                PetKind::Bias(b) => {
                    for (dst, (d, keep)) in site
                        .bias
                        .data_mut()
                        .iter_mut()
                        .zip(b.delta.data().iter().zip(&b.mask))
                    {
                        if *keep {
                            *dst += d;
                        }
                    }
                }
                PetKind::Lora(l) => {
                    let dw = l.delta_weight();
                    for (dst, d) in site.weight.data_mut().iter_mut().zip(dw.data()) {
                        *dst += d;
                    }
                }
            }
        }
        Ok(merged)
    }
}

/// Tape handles for everything registered by [`forward`].
pub struct ForwardOutput {
    pub loss: Var,
    pub logits: Var,
    /// One handle per tensor of [`PetSet::tensors`], same order.
    pub pet_vars: Vec<Var>,
    /// Head weight and bias.
    pub head_vars: [Var; 2],
    /// One handle per tensor of [`FrozenParams::tensors_mut`], same order.
    pub base_vars: Vec<Var>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Register base weights as trainable leaves (used only for the optional
    /// warm-up pass that precedes freezing).
    pub base_trainable: bool,
}

/// Records the full model on `tape` for a batch of examples.
///
/// Sequences are right-padded with [`PAD`] to the longest one in the batch;
/// padded keys are masked out of attention. Logits come from the first token.
pub fn forward(
    tape: &mut Tape,
    model: &Model,
    pets: &PetSet,
    head: &ClassifierHead,
    batch: &[&Example],
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    if batch.is_empty() {
        return Err(Error::Usage("forward on an empty batch".into()));
    }
    let seq = batch.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
    if seq == 0 || seq > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {seq} outside 1..={}",
            cfg.max_seq_len
        )));
    }
    for ex in batch {
        if ex.tokens.is_empty() {
            return Err(Error::Input("empty example".into()));
        }
        if let Some(&t) = ex.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
    }

    // Base leaves. Constants unless the base is being warmed up.
    let mut base_vars = Vec::new();
    let mut base_leaf = |tape: &mut Tape, t: &Tensor| {
        let v = tape.leaf(t.clone(), opts.base_trainable);
        base_vars.push(v);
        v
    };
    let p = &model.params;
    let tok_emb = base_leaf(tape, &p.token_embedding);
    let pos_emb = base_leaf(tape, &p.position_embedding);
    let mut site_vars: Vec<Vec<(Var, Var)>> = Vec::with_capacity(cfg.layers);
    for layer in &p.layers {
        let vars = layer
            .iter()
            .map(|sp| (base_leaf(tape, &sp.weight), base_leaf(tape, &sp.bias)))
            .collect();
        site_vars.push(vars);
    }

    // PET leaves, indexed by site.
    pets.validate(model)?;
    let mut pet_vars = Vec::new();
    let mut bias_at: BTreeMap<SiteId, Var> = BTreeMap::new();
    let mut lora_at: BTreeMap<SiteId, (Var, Var)> = BTreeMap::new();
    for pet in pets.modules() {
        match &pet.kind {
            PetKind::Bias(b) => {
                let v = tape.param(b.delta.clone());
                pet_vars.push(v);
                bias_at.insert(pet.site, v);
            }
            PetKind::Lora(l) => {
                let u = tape.param(l.u.clone());
                let v = tape.param(l.v.clone());
                pet_vars.extend([u, v]);
                lora_at.insert(pet.site, (u, v));
            }
        }
    }
    let head_w = tape.param(head.weight.clone());
    let head_b = tape.param(head.bias.clone());

    // Embeddings.
    let mut ids = Vec::with_capacity(batch.len() * seq);
    let mut positions = Vec::with_capacity(batch.len() * seq);
    for ex in batch {
        ids.extend(ex.tokens.iter().copied());
        ids.extend(std::iter::repeat_n(PAD, seq - ex.tokens.len()));
        positions.extend(0..seq);
    }
    let te = tape.select_rows(tok_emb, ids)?;
    let pe = tape.select_rows(pos_emb, positions)?;
    let mut x = tape.add(te, pe)?;

    let key_lens: Vec<usize> = batch.iter().map(|e| e.tokens.len()).collect();
    #[allow(clippy::needless_range_loop)]
    for layer in 0..cfg.layers {
        let site = |name: SiteName| SiteId { layer, name };
        let linear = |tape: &mut Tape, x: Var, name: SiteName| -> Result<Var> {
            let id = site(name);
            let (w, b) = site_vars[layer][name.slot()];
            let b = match bias_at.get(&id) {
                Some(&delta) => tape.add(b, delta)?,
                None => b,
            };
            let y = tape.matmul_t(x, w)?;
            let mut y = tape.add_row(y, b)?;
            if let Some(&(u, v)) = lora_at.get(&id) {
                let h = tape.matmul(x, v)?;
                let d = tape.matmul_t(h, u)?;
                y = tape.add(y, d)?;
            }
            Ok(y)
        };
        let norm = |tape: &mut Tape, x: Var, name: SiteName| -> Result<Var> {
            let (g, b) = site_vars[layer][name.slot()];
            let b = match bias_at.get(&site(name)) {
                Some(&delta) => tape.add(b, delta)?,
                None => b,
            };
            tape.layer_norm(x, g, b)
        };

        let q = linear(tape, x, SiteName::Query)?;
        let k = linear(tape, x, SiteName::Key)?;
        let v = linear(tape, x, SiteName::Value)?;
        let layout = AttentionLayout {
            batch: batch.len(),
            seq,
            heads: cfg.heads,
            key_lens: key_lens.clone(),
        };
        let a = tape.attention(q, k, v, layout)?;
        let o = linear(tape, a, SiteName::AttentionOutput)?;
        let r = tape.add(x, o)?;
        x = norm(tape, r, SiteName::LayerNormAttention)?;

        let hdn = linear(tape, x, SiteName::FfnIntermediate)?;
        let hdn = tape.gelu(hdn);
        let f = linear(tape, hdn, SiteName::FfnOutput)?;
        let r = tape.add(x, f)?;
        x = norm(tape, r, SiteName::LayerNormFfn)?;
    }

    let first: Vec<usize> = (0..batch.len()).map(|b| b * seq).collect();
    let cls = tape.select_rows(x, first)?;
    let logits = tape.matmul_t(cls, head_w)?;
    let logits = tape.add_row(logits, head_b)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let loss = tape.softmax_cross_entropy(logits, &labels)?;
    Ok(ForwardOutput {
        loss,
        logits,
        pet_vars,
        head_vars: [head_w, head_b],
        base_vars,
    })
}

/// Loss and logits without recording gradients.
pub fn predict(
    model: &Model,
    pets: &PetSet,
    head: &ClassifierHead,
    batch: &[&Example],
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::inference();
    let out = forward(
        &mut tape,
        model,
        pets,
        head,
        batch,
        ForwardOptions::default(),
    )?;
    Ok((
        tape.value(out.loss).data()[0],
        tape.value(out.logits).clone(),
    ))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PETNASCK";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TransformerConfig,
    tensors: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
}

impl Model {
    /// Writes the base parameters as: 8-byte magic, little-endian `u64` header
    /// length, JSON header (config plus tensor names and shapes in storage
    /// order), then every tensor's data as little-endian `f64`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let named = self.params.named_tensors();
        let header = CheckpointHeader {
            config: self.config.clone(),
            tensors: named
                .iter()
                .map(|(name, t)| CheckpointEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for (_, t) in &named {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Input(format!("{}: {msg}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let mut model = Model::build(&header.config, 0)?;
        let mut offset = 16 + hlen;
        let expected: Vec<(String, Vec<usize>)> = model
            .params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != header.tensors.len() {
            return Err(bad("tensor count does not match the config"));
        }
        for ((entry, (name, shape)), dst) in header
            .tensors
            .iter()
            .zip(&expected)
            .zip(model.params.tensors_mut())
        {
            if &entry.name != name || &entry.shape != shape {
                return Err(bad(&format!(
                    "unexpected tensor {} {:?}",
                    entry.name, entry.shape
                )));
            }
            let n = dst.len();
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| bad("truncated tensor data"))?;
            for (d, chunk) in dst.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            offset += 8 * n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn site_table_counts() {
        let cfg = TransformerConfig::default();
        let sites = site_table(&cfg);
        assert_eq!(sites.len(), 2 * 8 + 1);
        let unique: std::collections::BTreeSet<_> = sites.iter().map(|s| s.id).collect();
        assert_eq!(unique.len(), sites.len());
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = TransformerConfig::default();
        assert_eq!(
            Model::build(&cfg, 5).unwrap(),
            Model::build(&cfg, 5).unwrap()
        );
        assert_ne!(
            Model::build(&cfg, 5).unwrap().params,
            Model::build(&cfg, 6).unwrap().params
        );
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let cfg = TransformerConfig {
            hidden_dim: 30,
            heads: 4,
            ..Default::default()
        };
        match Model::build(&cfg, 0) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.hidden_dim"),
            other => panic!("expected config error, got {other:?}"),
        }
        let cfg = TransformerConfig {
            layers: 0,
            ..Default::default()
        };
        assert!(matches!(Model::build(&cfg, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn site_names_roundtrip_and_reject_unknown() {
        for s in SiteName::LAYER_SITES {
            assert_eq!(s.as_str().parse::<SiteName>().unwrap(), s);
        }
        let err = "attention.qurey".parse::<SiteName>().unwrap_err();
        assert!(err.to_string().contains("unknown site"));
        let json: std::result::Result<SiteName, _> = serde_json::from_str("\"ffn.middle\"");
        assert!(json.unwrap_err().to_string().contains("unknown site"));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = TransformerConfig::default();
        let model = Model::build(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        model.save_checkpoint(&path).unwrap();
        let back = Model::load_checkpoint(&path).unwrap();
        assert_eq!(back, model);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(Model::load_checkpoint(&path).is_err());
    }
}
