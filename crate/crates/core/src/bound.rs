//! Empirical lower bound on q-error imposed by lossy plan encoding.
//!
//! Plans that encode to the same exact form are indistinguishable to any
//! model that only sees the encoding, so one prediction per group is forced.
//! Grouping records by encoded form and picking per-group representatives
//! from the observed labels (greedy, candidate-restricted) yields an
//! approximate floor on the achievable q-error quantile.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoding::{
    encode_plan_flat, encode_plan_structural, encoded_form_key, EncodingError, EncodingSpace,
    StructuralParams,
};
use crate::eval::{nearest_rank_index, q_error, quantile};
use crate::plan::{binarize, QueryRecord};

#[derive(Debug, Error)]
pub enum BoundError {
    #[error("no groups to bound")]
    EmptyInput,
    #[error("group labels must be positive, got {0}")]
    NonPositiveLabel(f64),
    #[error("quantile q must be in (0, 1], got {0}")]
    InvalidQuantile(f64),
    #[error("group has no representative chosen")]
    RepresentativeMissing,
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

/// Which plan-level label the bound is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Latency,
    Cpu,
}

impl Target {
    pub fn label_of(&self, record: &QueryRecord) -> f64 {
        match self {
            Target::Latency => record.latency_ms,
            Target::Cpu => record.cpu_ms,
        }
    }
}

/// One equivalence group of records sharing an encoded form.
#[derive(Debug, Clone)]
pub struct Group {
    pub key: Vec<u8>,
    pub labels: Vec<f64>,
    /// Representative prediction, restricted to `labels`; filled by
    /// [`choose_representatives`].
    pub chosen: Option<f64>,
}

/// Groups records by the canonical key of their structural encoding
/// (computed on the binarized plan). Group order is first-seen.
pub fn group_by_encoded_form(
    records: &[QueryRecord],
    space: &EncodingSpace,
    params: &StructuralParams,
    target: Target,
) -> Result<Vec<Group>, BoundError> {
    group_by_key(records, target, |record| {
        let plan = binarize(&record.plan);
        let encoding = encode_plan_structural(&plan, space, params)?;
        Ok(encoded_form_key(&encoding))
    })
}

/// Variant hook: groups by the flat (boosted-tree) feature vector instead of
/// the structural encoding. The flat form is lossier, so its groups are
/// coarser.
pub fn group_by_flat_form(
    records: &[QueryRecord],
    space: &EncodingSpace,
    target: Target,
) -> Result<Vec<Group>, BoundError> {
    group_by_key(records, target, |record| {
        let flat = encode_plan_flat(&record.plan, space)?;
        let mut key = Vec::new();
        key.extend_from_slice(b"ffk1");
        for v in flat.to_vector() {
            key.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        Ok(key)
    })
}

fn group_by_key<F>(
    records: &[QueryRecord],
    target: Target,
    key_fn: F,
) -> Result<Vec<Group>, BoundError>
where
    F: Fn(&QueryRecord) -> Result<Vec<u8>, EncodingError>,
{
    let mut groups: Vec<Group> = Vec::new();
    let mut index: std::collections::HashMap<Vec<u8>, usize> = std::collections::HashMap::new();
    for record in records {
        let key = key_fn(record)?;
        let label = target.label_of(record);
        match index.get(&key) {
            Some(&i) => groups[i].labels.push(label),
            None => {
                index.insert(key.clone(), groups.len());
                groups.push(Group {
                    key,
                    labels: vec![label],
                    chosen: None,
                });
            }
        }
    }
    Ok(groups)
}

/// Picks the candidate label minimizing the group's nearest-rank quantile of
/// q-errors against all labels; ties go to the smallest candidate. Returns
/// the representative and its group quantile.
pub fn select_representative(labels: &[f64], q: f64) -> Result<(f64, f64), BoundError> {
    if labels.is_empty() {
        return Err(BoundError::EmptyInput);
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(BoundError::InvalidQuantile(q));
    }
    for &label in labels {
        if !(label > 0.0) {
            return Err(BoundError::NonPositiveLabel(label));
        }
    }
    let mut best: Option<(f64, f64)> = None;
    let mut qerrors = Vec::with_capacity(labels.len());
    for &candidate in labels {
        qerrors.clear();
        for &label in labels {
            qerrors.push(q_error(candidate, label).expect("positive by check"));
        }
        qerrors.sort_by(f64::total_cmp);
        let group_quantile = qerrors[nearest_rank_index(q, qerrors.len())];
        best = match best {
            None => Some((candidate, group_quantile)),
            Some((p, gq)) if group_quantile < gq || (group_quantile == gq && candidate < p) => {
                Some((candidate, group_quantile))
            }
            other => other,
        };
    }
    Ok(best.expect("non-empty"))
}

/// Selects a representative for every group in place.
pub fn choose_representatives(groups: &mut [Group], q: f64) -> Result<(), BoundError> {
    for group in groups.iter_mut() {
        let (chosen, _) = select_representative(&group.labels, q)?;
        group.chosen = Some(chosen);
    }
    Ok(())
}

/// Per-group summary for reporting and CSV export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSummary {
    pub key_hash: String,
    pub size: usize,
    pub min_label: f64,
    pub max_label: f64,
    /// Difference between the largest and smallest label in the group.
    pub range: f64,
    pub chosen: f64,
    pub group_quantile: f64,
}

/// The approximate lower bound and its supporting per-group detail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    /// Always true: the candidate-restricted greedy gives an approximation
    /// of the true optimum, not the optimum itself.
    pub approximate: bool,
    pub quantile: f64,
    pub overall_bound: f64,
    pub n_records: usize,
    pub n_groups: usize,
    pub n_singletons: usize,
    pub largest_group: usize,
    pub groups: Vec<GroupSummary>,
}

/// Pools every record's q-error against its group representative and takes
/// the nearest-rank quantile. Groups must have representatives chosen.
pub fn overall_bound(groups: &[Group], q: f64) -> Result<BoundReport, BoundError> {
    if groups.is_empty() {
        return Err(BoundError::EmptyInput);
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(BoundError::InvalidQuantile(q));
    }
    let mut pooled = Vec::new();
    let mut summaries = Vec::with_capacity(groups.len());
    let mut n_singletons = 0;
    let mut largest_group = 0;
    for group in groups {
        let chosen = group.chosen.ok_or(BoundError::RepresentativeMissing)?;
        let mut qerrors = Vec::with_capacity(group.labels.len());
        for &label in &group.labels {
            if !(label > 0.0) {
                return Err(BoundError::NonPositiveLabel(label));
            }
            qerrors.push(q_error(chosen, label).expect("positive by check"));
        }
        pooled.extend_from_slice(&qerrors);
        qerrors.sort_by(f64::total_cmp);
        let group_quantile = qerrors[nearest_rank_index(q, qerrors.len())];
        let min_label = group.labels.iter().copied().fold(f64::INFINITY, f64::min);
        let max_label = group
            .labels
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if group.labels.len() == 1 {
            n_singletons += 1;
        }
        largest_group = largest_group.max(group.labels.len());
        let mut hasher = Sha256::new();
        hasher.update(&group.key);
        summaries.push(GroupSummary {
            key_hash: hex::encode(hasher.finalize())[..16].to_string(),
            size: group.labels.len(),
            min_label,
            max_label,
            range: max_label - min_label,
            chosen,
            group_quantile,
        });
    }
    Ok(BoundReport {
        approximate: true,
        quantile: q,
        overall_bound: quantile(&pooled, q).expect("non-empty"),
        n_records: pooled.len(),
        n_groups: groups.len(),
        n_singletons,
        largest_group,
        groups: summaries,
    })
}

impl BoundReport {
    /// CSV of per-group summaries for downstream plotting.
    pub fn groups_to_csv(&self) -> String {
        let mut out = String::from("key_hash,size,min_label,max_label,range,chosen\n");
        for g in &self.groups {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                g.key_hash, g.size, g.min_label, g.max_label, g.range, g.chosen
            ));
        }
        out
    }
}
