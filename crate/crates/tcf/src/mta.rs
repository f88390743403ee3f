//! Multi-stage token aggregation: walk the pyramid deep to shallow, at each
//! step upsampling tokens through the recorded cluster assignment, adding the
//! shallower stage's lateral projection, and running one transformer block.
//! Every step's tokens render to a feature-map pyramid at strides 4/8/16/32.
//!
//! Blocks come in the two key-reduction flavours: spatial reduction reuses
//! each stage's ratio, clustering reduction reuses the composed cluster
//! assignments so every block sees exactly the final-stage token set.

use crate::backbone::{transformer_block, KeyReduction, TokenPyramid};
use crate::clustering::ClusterResult;
use crate::config::ModelConfig;
use crate::error::{Result, TcfError};
use crate::tensor::Tensor;
use crate::token_ops::{tokens_to_map, upsample_tokens, TokenSet};
use crate::weights::WeightStore;

/// Per-stage maps from token index to final-stage cluster index.
#[derive(Debug, Clone)]
pub struct ComposedAssignment {
    pub maps: Vec<Vec<usize>>,
    pub num_final: usize,
}

/// Feature maps at strides 4/8/16/32, uniform channel width.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtaVariant {
    Spatial,
    Clustering,
}

#[derive(Debug)]
pub struct MtaOutput {
    pub pyramid: FeaturePyramid,
    /// Aggregated token set per stage (shallow to deep; the deepest entry is
    /// the lateral-projected final stage).
    pub step_tokens: Vec<TokenSet>,
    /// Key/value token count of each aggregation block, deepest step first.
    pub kv_counts: Vec<usize>,
    pub attention_macs: u64,
}

/// Chains each merge module's assignment down to the final stage.
pub fn compose_assignments(pyramid: &TokenPyramid) -> Result<ComposedAssignment> {
    let stages = pyramid.stages.len();
    if pyramid.ctm_records.len() + 1 != stages {
        return Err(TcfError::Clustering(format!(
            "pyramid holds {} merge records for {stages} stages",
            pyramid.ctm_records.len()
        )));
    }
    let num_final = pyramid.stages[stages - 1].len();
    let mut maps = vec![Vec::new(); stages];
    maps[stages - 1] = (0..num_final).collect();
    for s in (0..stages - 1).rev() {
        let record = &pyramid.ctm_records[s];
        if record.len() != pyramid.stages[s].len() {
            return Err(TcfError::Clustering(format!(
                "merge record {s} covers {} tokens, stage has {}",
                record.len(),
                pyramid.stages[s].len()
            )));
        }
        let deeper = maps[s + 1].clone();
        maps[s] = record
            .assignment
            .iter()
            .map(|&cluster| deeper[cluster])
            .collect();
    }
    Ok(ComposedAssignment { maps, num_final })
}

/// One aggregation step: upsample the deeper tokens through the cluster
/// record, add the lateral tokens elementwise, and run a transformer block.
#[allow(clippy::too_many_arguments)]
pub fn aggregation_step(
    deep: &TokenSet,
    record: &ClusterResult,
    lateral: &TokenSet,
    heads: usize,
    mlp_ratio: usize,
    reduction: &KeyReduction,
    store: &WeightStore,
    prefix: &str,
    macs: &mut u64,
) -> Result<(TokenSet, usize)> {
    let up = upsample_tokens(deep, record, lateral)?;
    if up.len() != lateral.len() || up.channels() != lateral.channels() {
        return Err(TcfError::Shape(format!(
            "upsampled {}×{} vs lateral {}×{}",
            up.len(),
            up.channels(),
            lateral.len(),
            lateral.channels()
        )));
    }
    let mut summed = lateral.clone();
    summed.features = up.features.add(&lateral.features)?;
    transformer_block(&summed, heads, mlp_ratio, reduction, store, prefix, macs)
}

/// Full aggregation pass over a recorded pyramid.
pub fn mta_forward(
    pyramid: &TokenPyramid,
    variant: MtaVariant,
    config: &ModelConfig,
    store: &WeightStore,
) -> Result<MtaOutput> {
    let stages = pyramid.stages.len();
    if stages != config.stages.len() {
        return Err(TcfError::Config(format!(
            "pyramid has {stages} stages, config has {}",
            config.stages.len()
        )));
    }
    let composed = compose_assignments(pyramid)?;
    let d = config.mta_dim;
    let mut macs = 0u64;

    let mut laterals = Vec::with_capacity(stages);
    for (s, tokens) in pyramid.stages.iter().enumerate() {
        let c = tokens.channels();
        let w = store.require(&format!("mta.lateral{}.w", s + 1), &[c, d])?;
        let b = store.require(&format!("mta.lateral{}.b", s + 1), &[d])?;
        let mut projected = tokens.clone();
        projected.features = tokens.features.matmul(w)?.add_row_bias(b)?;
        laterals.push(projected);
    }

    let mut step_tokens: Vec<Option<TokenSet>> = (0..stages).map(|_| None).collect();
    let mut levels: Vec<Option<Tensor>> = (0..stages).map(|_| None).collect();
    let mut kv_counts = Vec::with_capacity(stages - 1);

    let mut current = laterals[stages - 1].clone();
    levels[stages - 1] = Some(tokens_to_map(&current, current.grid_h, current.grid_w)?);
    step_tokens[stages - 1] = Some(current.clone());

    for s in (0..stages - 1).rev() {
        let st = &config.stages[s];
        let reduction = match variant {
            MtaVariant::Spatial => KeyReduction::Spatial(st.sr_ratio),
            MtaVariant::Clustering => KeyReduction::Clustering {
                composed: &composed.maps[s],
                num_final: composed.num_final,
                weighted: config.cr_weighted,
            },
        };
        let (next, kv) = aggregation_step(
            &current,
            &pyramid.ctm_records[s],
            &laterals[s],
            config.mta_heads,
            st.mlp_ratio,
            &reduction,
            store,
            &format!("mta.block{}.", s + 1),
            &mut macs,
        )?;
        kv_counts.push(kv);
        current = next;
        levels[s] = Some(tokens_to_map(&current, current.grid_h, current.grid_w)?);
        step_tokens[s] = Some(current.clone());
    }

    Ok(MtaOutput {
        pyramid: FeaturePyramid {
            levels: levels.into_iter().map(Option::unwrap).collect(),
        },
        step_tokens: step_tokens.into_iter().map(Option::unwrap).collect(),
        kv_counts,
        attention_macs: macs,
    })
}
