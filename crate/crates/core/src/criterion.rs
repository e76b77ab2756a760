//! First-order pruning criterion.
//!
//! At every optimizer step the instantaneous score of a PET parameter is
//! `-θ·∂L/∂θ`, the first-order estimate of the training-loss change from
//! setting it to zero. Scores are accumulated per parameter and averaged over
//! all observed steps, then grouped into prunable units.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SiteId;
use crate::pet::{Granularity, PetKind, PetSet};

/// Which per-parameter values feed the unit scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionMode {
    /// Mean over every observed step.
    #[default]
    Averaged,
    /// The final observed step only.
    LastStep,
}

/// How a structured low-rank column pair is scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnScore {
    /// Sum over column `j` of `U` only.
    #[default]
    UOnly,
    /// Sum over column `j` of both `U` and `V`.
    UAndV,
}

/// Prunable unit kinds. The derive order is the tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneKind {
    WholeBias,
    BiasEntry,
    LoraColumn,
    LoraEntry,
}

impl PruneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneKind::WholeBias => "whole_bias",
            PruneKind::BiasEntry => "bias_entry",
            PruneKind::LoraColumn => "lora_column",
            PruneKind::LoraEntry => "lora_entry",
        }
    }
}

/// One candidate pruning action.
///
/// `index` is the entry for `bias_entry`, the column for `lora_column`, and
/// for `lora_entry` the row-major entry of `U` (`< out·r`) or, offset by
/// `out·r`, of `V`. It is 0 for `whole_bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneOp {
    pub kind: PruneKind,
    pub pet_id: usize,
    pub site: SiteId,
    pub index: usize,
    pub param_count: usize,
    pub score: f64,
}

impl PruneOp {
    /// Deterministic tie-break key: layer, site, kind, index.
    pub fn order_key(&self) -> (SiteId, PruneKind, usize) {
        (self.site, self.kind, self.index)
    }
}

/// Running per-parameter criterion sums, laid out like [`PetSet::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct CriterionAccumulator {
    sums: Vec<Vec<f64>>,
    last: Vec<Vec<f64>>,
    steps: usize,
}

impl CriterionAccumulator {
    pub fn new(pets: &PetSet) -> Self {
        let sums: Vec<Vec<f64>> = pets.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            last: sums.clone(),
            sums,
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Adds `-θ·g` for every PET parameter. Call after backward and before the
    /// optimizer moves `θ`.
    pub fn observe_step(&mut self, pets: &PetSet, grads: &[Vec<f64>]) -> Result<()> {
        let tensors = pets.tensors();
        if tensors.len() != self.sums.len() || grads.len() != tensors.len() {
            return Err(Error::Internal(format!(
                "criterion tracks {} tensors, got {} values and {} gradients",
                self.sums.len(),
                tensors.len(),
                grads.len()
            )));
        }
        for (i, ((t, g), (sum, last))) in tensors
            .iter()
            .zip(grads)
            .zip(self.sums.iter_mut().zip(self.last.iter_mut()))
            .enumerate()
        {
            if g.len() != t.len() || sum.len() != t.len() {
                return Err(Error::Internal(format!(
                    "gradient missing for tracked tensor {i}"
                )));
            }
            for (((theta, grad), s), l) in t
                .data()
                .iter()
                .zip(g)
                .zip(sum.iter_mut())
                .zip(last.iter_mut())
            {
                let c = -theta * grad;
                *s += c;
                *l = c;
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Per-parameter criterion under `mode`.
    pub fn values(&self, mode: CriterionMode) -> Result<Vec<Vec<f64>>> {
        if self.steps == 0 {
            return Err(Error::Usage("no optimizer steps were observed".into()));
        }
        Ok(match mode {
            CriterionMode::Averaged => {
                let n = self.steps as f64;
                self.sums
                    .iter()
                    .map(|s| s.iter().map(|v| v / n).collect())
                    .collect()
            }
            CriterionMode::LastStep => self.last.clone(),
        })
    }

    pub fn score_ops(
        &self,
        pets: &PetSet,
        mode: CriterionMode,
        column: ColumnScore,
    ) -> Result<Vec<PruneOp>> {
        Ok(group_scores(&self.values(mode)?, pets, column))
    }
}

/// Groups per-parameter values into one op per prunable unit of `pets`.
/// Masked parameters contribute nothing; fully masked units yield no op.
pub fn group_scores(values: &[Vec<f64>], pets: &PetSet, column: ColumnScore) -> Vec<PruneOp> {
    let mut ops = Vec::new();
    let mut slot = 0;
    for pet in pets.modules() {
        let op = |kind, index, param_count, score| PruneOp {
            kind,
            pet_id: pet.id,
            site: pet.site,
            index,
            param_count,
            score,
        };
        match &pet.kind {
            PetKind::Bias(b) => {
                let vals = &values[slot];
                slot += 1;
                match b.granularity {
                    Granularity::Unstructured => {
                        for (i, (&keep, &v)) in b.mask.iter().zip(vals).enumerate() {
                            if keep {
                                ops.push(op(PruneKind::BiasEntry, i, 1, v));
                            }
                        }
                    }
                    Granularity::Structured => {
                        let alive = b.param_count();
                        if alive > 0 {
                            let score = b
                                .mask
                                .iter()
                                .zip(vals)
                                .filter(|(&keep, _)| keep)
                                .map(|(_, v)| v)
                                .sum();
                            ops.push(op(PruneKind::WholeBias, 0, alive, score));
                        }
                    }
                }
            }
            PetKind::Lora(l) => {
                let (vu, vv) = (&values[slot], &values[slot + 1]);
                slot += 2;
                match l.granularity {
                    Granularity::Unstructured => {
                        let offset = l.mask_u.len();
                        for (i, (&keep, &v)) in l.mask_u.iter().zip(vu).enumerate() {
                            if keep {
                                ops.push(op(PruneKind::LoraEntry, i, 1, v));
                            }
                        }
                        for (i, (&keep, &v)) in l.mask_v.iter().zip(vv).enumerate() {
                            if keep {
                                ops.push(op(PruneKind::LoraEntry, offset + i, 1, v));
                            }
                        }
                    }
                    Granularity::Structured => {
                        let r = l.rank();
                        for j in 0..r {
                            let u_idx = (0..l.out_dim()).map(|i| i * r + j);
                            let v_idx = (0..l.in_dim()).map(|i| i * r + j);
                            let alive = u_idx.clone().filter(|&k| l.mask_u[k]).count()
                                + v_idx.clone().filter(|&k| l.mask_v[k]).count();
                            if alive == 0 {
                                continue;
                            }
                            let mut score: f64 =
                                u_idx.filter(|&k| l.mask_u[k]).map(|k| vu[k]).sum();
                            if column == ColumnScore::UAndV {
                                score += v_idx.filter(|&k| l.mask_v[k]).map(|k| vv[k]).sum::<f64>();
                            }
                            ops.push(op(PruneKind::LoraColumn, j, alive, score));
                        }
                    }
                }
            }
        }
    }
    ops
}

/// Writes `pet_id,kind,index,param_count,score` rows.
pub fn write_scores_csv(path: &Path, ops: &[PruneOp]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["pet_id", "kind", "index", "param_count", "score"])?;
    for op in ops {
        w.write_record([
            op.pet_id.to_string(),
            op.kind.as_str().to_string(),
            op.index.to_string(),
            op.param_count.to_string(),
            format!("{:e}", op.score),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
