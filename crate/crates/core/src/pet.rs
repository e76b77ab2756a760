//! PET parameterization: bias deltas `Δb` and low-rank updates `ΔW = UVᵀ`,
//! each with explicit boolean masks.
//!
//! For a site weight `W` of shape `out × in`, a low-rank update stores
//! `U: out × r` and `V: in × r`, and the forward pass computes
//! `Wx + U(Vᵀx)`. Masked entries are held at exactly zero and their gradients
//! are zeroed after every backward pass.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, SiteId, SiteName};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Whole bias vectors, or rank-one column pairs of a low-rank update.
    Structured,
    /// Individual scalars.
    Unstructured,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraInit {
    /// `U ~ N(0, 1/out)`, `V ~ N(0, 1/in)` (standard deviations `1/√out`, `1/√in`).
    #[default]
    Balanced,
    /// `U = 0`, `V ~ N(0, 1/in)`.
    Original,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasDelta {
    pub delta: Tensor,
    pub mask: Vec<bool>,
    pub granularity: Granularity,
}

impl BiasDelta {
    pub fn new(len: usize, granularity: Granularity) -> Self {
        Self {
            delta: Tensor::zeros(vec![len]),
            mask: vec![true; len],
            granularity,
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Bias updates always start at zero.
    pub fn init(&mut self) {
        self.delta.data_mut().iter_mut().for_each(|d| *d = 0.0);
    }

    pub fn param_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraUpdate {
    /// `out × rank`.
    pub u: Tensor,
    /// `in × rank`.
    pub v: Tensor,
    pub mask_u: Vec<bool>,
    pub mask_v: Vec<bool>,
    pub granularity: Granularity,
}

impl LoraUpdate {
    pub fn new(out_dim: usize, in_dim: usize, rank: usize, granularity: Granularity) -> Self {
        Self {
            u: Tensor::zeros(vec![out_dim, rank]),
            v: Tensor::zeros(vec![in_dim, rank]),
            mask_u: vec![true; out_dim * rank],
            mask_v: vec![true; in_dim * rank],
            granularity,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.u.shape()[1]
    }

    /// Draws `U` then `V`, each row-major, from `rng`.
    pub fn init(&mut self, scheme: LoraInit, rng: &mut ChaCha8Rng) {
        let u_std = 1.0 / (self.out_dim() as f64).sqrt();
        let v_std = 1.0 / (self.in_dim() as f64).sqrt();
        match scheme {
            LoraInit::Balanced => fill_normal(&mut self.u, u_std, rng),
            LoraInit::Original => self.u.data_mut().iter_mut().for_each(|x| *x = 0.0),
        }
        fill_normal(&mut self.v, v_std, rng);
    }

    /// `(U ⊙ M_U)(V ⊙ M_V)ᵀ`, shape `out × in`.
    pub fn delta_weight(&self) -> Tensor {
        let (m, n, r) = (self.out_dim(), self.in_dim(), self.rank());
        let u = self.u.data();
        let v = self.v.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..r {
                    if self.mask_u[i * r + k] && self.mask_v[j * r + k] {
                        s += u[i * r + k] * v[j * r + k];
                    }
                }
                out[i * n + j] = s;
            }
        }
        Tensor::matrix(m, n, out).expect("shape matches data")
    }

    /// True if any entry of column `j` of `U` or `V` is unmasked.
    pub fn column_alive(&self, j: usize) -> bool {
        let r = self.rank();
        (0..self.out_dim()).any(|i| self.mask_u[i * r + j])
            || (0..self.in_dim()).any(|i| self.mask_v[i * r + j])
    }

    /// Masks column `j` of both `U` and `V`.
    pub fn prune_column(&mut self, j: usize) {
        let r = self.rank();
        for i in 0..self.out_dim() {
            self.mask_u[i * r + j] = false;
        }
        for i in 0..self.in_dim() {
            self.mask_v[i * r + j] = false;
        }
    }

    pub fn param_count(&self) -> usize {
        self.mask_u
            .iter()
            .chain(&self.mask_v)
            .filter(|&&m| m)
            .count()
    }
}

fn fill_normal(t: &mut Tensor, std: f64, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, std).expect("finite std");
    for x in t.data_mut() {
        *x = dist.sample(rng);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PetKind {
    Bias(BiasDelta),
    Lora(LoraUpdate),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PetModule {
    pub id: usize,
    pub site: SiteId,
    pub kind: PetKind,
}

impl PetModule {
    pub fn param_count(&self) -> usize {
        match &self.kind {
            PetKind::Bias(b) => b.param_count(),
            PetKind::Lora(l) => l.param_count(),
        }
    }

    /// Unpruned size.
    pub fn capacity(&self) -> usize {
        match &self.kind {
            PetKind::Bias(b) => b.len(),
            PetKind::Lora(l) => l.mask_u.len() + l.mask_v.len(),
        }
    }

    pub fn granularity(&self) -> Granularity {
        match &self.kind {
            PetKind::Bias(b) => b.granularity,
            PetKind::Lora(l) => l.granularity,
        }
    }
}

/// The PET modules attached to one model, in id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PetSet {
    modules: Vec<PetModule>,
}

impl PetSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, site: SiteId, kind: PetKind) -> usize {
        let id = self.modules.len();
        self.modules.push(PetModule { id, site, kind });
        id
    }

    pub fn modules(&self) -> &[PetModule] {
        &self.modules
    }

    pub fn modules_mut(&mut self) -> &mut [PetModule] {
        &mut self.modules
    }

    pub fn get(&self, id: usize) -> Option<&PetModule> {
        self.modules.get(id)
    }

    pub fn get_mut(&mut self, id: usize) -> Option<&mut PetModule> {
        self.modules.get_mut(id)
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    /// Builds the over-provisioned PET set for `space`, all masks open and
    /// all values zero. Modules are ordered by layer, then site.
    pub fn from_search_space(model: &Model, space: &SearchSpace) -> Result<Self> {
        space.validate(model)?;
        let mut set = PetSet::new();
        for site in &model.sites {
            let id = site.id;
            if let Some(b) = &space.bias {
                if b.covers(id) {
                    set.push(
                        id,
                        PetKind::Bias(BiasDelta::new(site.bias_len, b.granularity)),
                    );
                }
            }
            if let Some(l) = &space.lora {
                if l.covers(id) {
                    let (out_dim, in_dim) = (site.weight_shape[0], site.weight_shape[1]);
                    set.push(
                        id,
                        PetKind::Lora(LoraUpdate::new(out_dim, in_dim, l.rank, l.granularity)),
                    );
                }
            }
        }
        Ok(set)
    }

    /// Initializes every module in id order (bias deltas to zero, low-rank
    /// pairs per `scheme`), then re-applies masks.
    pub fn init(&mut self, scheme: LoraInit, rng: &mut ChaCha8Rng) {
        for m in &mut self.modules {
            match &mut m.kind {
                PetKind::Bias(b) => b.init(),
                PetKind::Lora(l) => l.init(scheme, rng),
            }
        }
        self.apply_masks();
    }

    /// Checks every module against the model's site table.
    pub fn validate(&self, model: &Model) -> Result<()> {
        let mut seen = BTreeSet::new();
        for m in &self.modules {
            let err = |message: String| Error::Attachment {
                site: m.site.to_string(),
                message,
            };
            let site = model
                .site(m.site)
                .ok_or_else(|| err("no such site in the model".into()))?;
            if m.site.name == SiteName::Classifier {
                return Err(err("the classifier head is trained directly".into()));
            }
            let family = matches!(m.kind, PetKind::Lora(_));
            if !seen.insert((m.site, family)) {
                return Err(err("more than one module of the same kind".into()));
            }
            match &m.kind {
                PetKind::Bias(b) => {
                    if b.delta.shape() != [site.bias_len] || b.mask.len() != site.bias_len {
                        return Err(err(format!(
                            "bias delta of length {} for bias of length {}",
                            b.delta.len(),
                            site.bias_len
                        )));
                    }
                }
                PetKind::Lora(l) => {
                    if !m.site.name.accepts_lora() {
                        return Err(err("site has no weight matrix".into()));
                    }
                    let shape = [l.out_dim(), l.in_dim()];
                    if site.weight_shape != shape
                        || l.v.shape()[1] != l.rank()
                        || l.mask_u.len() != l.u.len()
                        || l.mask_v.len() != l.v.len()
                    {
                        return Err(err(format!(
                            "low-rank update {:?} for weight {:?}",
                            shape, site.weight_shape
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Trainable tensors in a fixed order: per module, `Δb`, or `U` then `V`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for m in &self.modules {
            match &m.kind {
                PetKind::Bias(b) => out.push(&b.delta),
                PetKind::Lora(l) => out.extend([&l.u, &l.v]),
            }
        }
        out
    }

    /// Masks aligned with [`PetSet::tensors`].
    pub fn masks(&self) -> Vec<&[bool]> {
        let mut out: Vec<&[bool]> = Vec::new();
        for m in &self.modules {
            match &m.kind {
                PetKind::Bias(b) => out.push(&b.mask),
                PetKind::Lora(l) => out.extend([l.mask_u.as_slice(), l.mask_v.as_slice()]),
            }
        }
        out
    }

    /// Mutable tensors with their masks, aligned with [`PetSet::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(&mut Tensor, &[bool])> {
        let mut out: Vec<(&mut Tensor, &[bool])> = Vec::new();
        for m in &mut self.modules {
            match &mut m.kind {
                PetKind::Bias(b) => out.push((&mut b.delta, &b.mask)),
                PetKind::Lora(l) => {
                    out.push((&mut l.u, &l.mask_u));
                    out.push((&mut l.v, &l.mask_v));
                }
            }
        }
        out
    }

    /// Sets every masked-out value to zero.
    pub fn apply_masks(&mut self) {
        for (t, mask) in self.tensors_mut() {
            for (x, &keep) in t.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *x = 0.0;
                }
            }
        }
    }

    /// Zeroes gradients of masked-out entries; `grads` is aligned with
    /// [`PetSet::tensors`].
    pub fn mask_gradients(&self, grads: &mut [Vec<f64>]) {
        for (g, mask) in grads.iter_mut().zip(self.masks()) {
            for (x, &keep) in g.iter_mut().zip(mask) {
                if !keep {
                    *x = 0.0;
                }
            }
        }
    }

    /// Unmasked entries across every module.
    pub fn param_count(&self) -> usize {
        self.modules.iter().map(PetModule::param_count).sum()
    }

    /// Copies mask patterns from `other`, which must have the same layout.
    pub fn copy_masks_from(&mut self, other: &PetSet) -> Result<()> {
        if self.modules.len() != other.modules.len() {
            return Err(Error::Internal("PET layouts differ".into()));
        }
        for (dst, src) in self.modules.iter_mut().zip(&other.modules) {
            match (&mut dst.kind, &src.kind) {
                (PetKind::Bias(d), PetKind::Bias(s)) if d.mask.len() == s.mask.len() => {
                    d.mask.clone_from(&s.mask)
                }
                (PetKind::Lora(d), PetKind::Lora(s))
                    if d.mask_u.len() == s.mask_u.len() && d.mask_v.len() == s.mask_v.len() =>
                {
                    d.mask_u.clone_from(&s.mask_u);
                    d.mask_v.clone_from(&s.mask_v);
                }
                _ => return Err(Error::Internal(format!("PET {} layout differs", dst.id))),
            }
        }
        self.apply_masks();
        Ok(())
    }
}

fn default_rank() -> usize {
    16
}

fn default_bias_sites() -> Vec<SiteName> {
    SiteName::LAYER_SITES.to_vec()
}

fn default_lora_sites() -> Vec<SiteName> {
    vec![
        SiteName::Query,
        SiteName::Key,
        SiteName::FfnIntermediate,
        SiteName::FfnOutput,
    ]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSpace {
    #[serde(default = "default_bias_sites")]
    pub sites: Vec<SiteName>,
    pub granularity: Granularity,
    /// Restrict to these layers; all layers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
}

impl BiasSpace {
    pub fn all(granularity: Granularity) -> Self {
        Self {
            sites: default_bias_sites(),
            granularity,
            layers: None,
        }
    }

    fn covers(&self, id: SiteId) -> bool {
        self.sites.contains(&id.name) && self.layers.as_ref().is_none_or(|l| l.contains(&id.layer))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSpace {
    #[serde(default = "default_lora_sites")]
    pub sites: Vec<SiteName>,
    pub granularity: Granularity,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
}

impl LoraSpace {
    /// Rank-16 updates on query, key and both FFN matrices.
    pub fn standard(granularity: Granularity) -> Self {
        Self {
            sites: default_lora_sites(),
            granularity,
            rank: default_rank(),
            layers: None,
        }
    }

    fn covers(&self, id: SiteId) -> bool {
        self.sites.contains(&id.name) && self.layers.as_ref().is_none_or(|l| l.contains(&id.layer))
    }
}

/// Which PET families are attached, where, and at what granularity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasSpace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraSpace>,
}

impl SearchSpace {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.bias.is_none() && self.lora.is_none() {
            return Err(Error::config("search_space", "no PET family enabled"));
        }
        let layers = model.config.layers;
        let check_layers = |field: &str, l: &Option<Vec<usize>>| -> Result<()> {
            if let Some(&bad) = l.iter().flatten().find(|&&x| x >= layers) {
                return Err(Error::config(field, format!("layer {bad} >= {layers}")));
            }
            Ok(())
        };
        if let Some(b) = &self.bias {
            if b.sites.contains(&SiteName::Classifier) {
                return Err(Error::config(
                    "search_space.bias.sites",
                    "the classifier head is trained directly, not searched",
                ));
            }
            check_layers("search_space.bias.layers", &b.layers)?;
        }
        if let Some(l) = &self.lora {
            if let Some(bad) = l.sites.iter().find(|s| !s.accepts_lora()) {
                return Err(Error::config(
                    "search_space.lora.sites",
                    format!("site `{bad}` has no weight matrix for a low-rank update"),
                ));
            }
            if l.rank == 0 {
                return Err(Error::config(
                    "search_space.lora.rank",
                    "must be at least 1",
                ));
            }
            check_layers("search_space.lora.layers", &l.layers)?;
        }
        Ok(())
    }
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            bias: Some(BiasSpace::all(Granularity::Unstructured)),
            lora: Some(LoraSpace::standard(Granularity::Unstructured)),
        }
    }
}
