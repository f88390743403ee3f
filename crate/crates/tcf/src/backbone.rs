//! Four-stage token pyramid: stem, transformer blocks with reduced
//! keys/values, clustering-based token merge modules between stages, and the
//! mean-token classification head.
//!
//! Weights are plain named tensors in a `WeightStore`; `required_tensors`
//! fixes the full name/shape/init list for a configuration and
//! `generate_weights` draws the normal-initialised entries from one seeded
//! stream in that exact order, so a (config, seed) pair always yields the
//! same fixture weights.

use crate::clustering::{cluster_local, ClusterResult};
use crate::config::ModelConfig;
use crate::error::{Result, TcfError};
use crate::hash::Fnv1a;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::token_ops::{
    attention_macs, biased_attention, biased_attention_with_weights, cr_reduce, map_to_tokens,
    merge_tokens, predict_importance, sr_reduce, tokens_to_map, TokenSet,
};
use crate::weights::WeightStore;

pub const LN_EPS: f32 = 1e-5;
const INIT_STDDEV: f32 = 0.02;

/// Everything recorded during one forward pass: post-stage token sets, the
/// cluster record of every merge module, the stem grid, and attention work.
#[derive(Debug, Clone)]
pub struct TokenPyramid {
    pub stages: Vec<TokenSet>,
    pub ctm_records: Vec<ClusterResult>,
    pub stem_h: usize,
    pub stem_w: usize,
    pub attention_macs: u64,
}

impl TokenPyramid {
    pub fn token_counts(&self) -> Vec<usize> {
        self.stages.iter().map(TokenSet::len).collect()
    }

    /// FNV-1a fingerprint over features, pixel maps and cluster assignments.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        for s in &self.stages {
            for &v in s.features.data() {
                h.update(&v.to_bits().to_le_bytes());
            }
            for &t in &s.pixel_map {
                h.update(&(t as u64).to_le_bytes());
            }
        }
        for r in &self.ctm_records {
            for &a in &r.assignment {
                h.update(&(a as u64).to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Attention-weight tensors captured during a traced forward pass.
#[derive(Debug, Default)]
pub struct ForwardTrace {
    pub attention: Vec<(String, Tensor)>,
}

/// How a transformer block shrinks its key/value set.
pub enum KeyReduction<'a> {
    /// Render to the nominal grid and compress with an r-strided convolution.
    Spatial(usize),
    /// Merge onto the final-stage clusters through a composed assignment.
    Clustering {
        composed: &'a [usize],
        num_final: usize,
        weighted: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(out: &mut Vec<TensorSpec>, name: String, shape: Vec<usize>, init: Init) {
    out.push(TensorSpec { name, shape, init });
}

fn block_specs(out: &mut Vec<TensorSpec>, prefix: &str, c: usize, r: usize, mlp_ratio: usize) {
    let hid = c * mlp_ratio;
    spec(out, format!("{prefix}norm1.g"), vec![c], Init::Ones);
    spec(out, format!("{prefix}norm1.b"), vec![c], Init::Zeros);
    for nm in ["wq", "wk", "wv", "wo"] {
        spec(out, format!("{prefix}attn.{nm}"), vec![c, c], Init::Normal);
    }
    for nm in ["bq", "bk", "bv", "bo"] {
        spec(out, format!("{prefix}attn.{nm}"), vec![c], Init::Zeros);
    }
    spec(out, format!("{prefix}sr.w"), vec![c, c, r, r], Init::Normal);
    spec(out, format!("{prefix}sr.b"), vec![c], Init::Zeros);
    spec(out, format!("{prefix}dw.w"), vec![c, 3, 3], Init::Normal);
    spec(out, format!("{prefix}dw.b"), vec![c], Init::Zeros);
    spec(out, format!("{prefix}norm2.g"), vec![c], Init::Ones);
    spec(out, format!("{prefix}norm2.b"), vec![c], Init::Zeros);
    spec(out, format!("{prefix}mlp.w1"), vec![c, hid], Init::Normal);
    spec(out, format!("{prefix}mlp.b1"), vec![hid], Init::Zeros);
    spec(out, format!("{prefix}mlp.w2"), vec![hid, c], Init::Normal);
    spec(out, format!("{prefix}mlp.b2"), vec![c], Init::Zeros);
}

/// Full tensor inventory for a configuration, in generation order.
pub fn required_tensors(config: &ModelConfig) -> Vec<TensorSpec> {
    let mut out = Vec::new();
    let dim0 = config.stages[0].dim;
    let mid = (dim0 / 2).max(1);
    spec(&mut out, "stem.conv1.w".into(), vec![mid, 3, 3, 3], Init::Normal);
    spec(&mut out, "stem.conv1.b".into(), vec![mid], Init::Zeros);
    spec(&mut out, "stem.conv2.w".into(), vec![dim0, mid, 3, 3], Init::Normal);
    spec(&mut out, "stem.conv2.b".into(), vec![dim0], Init::Zeros);
    spec(&mut out, "stem.norm.g".into(), vec![dim0], Init::Ones);
    spec(&mut out, "stem.norm.b".into(), vec![dim0], Init::Zeros);

    for (s, st) in config.stages.iter().enumerate() {
        for b in 0..st.blocks {
            let prefix = format!("stage{}.block{}.", s + 1, b);
            block_specs(&mut out, &prefix, st.dim, st.sr_ratio, st.mlp_ratio);
        }
        if s + 1 < config.stages.len() {
            let cin = st.dim;
            let next = &config.stages[s + 1];
            let cout = next.dim;
            let hid = cout * next.mlp_ratio;
            let p = format!("ctm{}.", s + 1);
            spec(&mut out, format!("{p}imp.w"), vec![cin, 1], Init::Normal);
            spec(&mut out, format!("{p}imp.b"), vec![1], Init::Zeros);
            spec(&mut out, format!("{p}proj.w"), vec![cin, cout], Init::Normal);
            spec(&mut out, format!("{p}proj.b"), vec![cout], Init::Zeros);
            spec(&mut out, format!("{p}normq.g"), vec![cout], Init::Ones);
            spec(&mut out, format!("{p}normq.b"), vec![cout], Init::Zeros);
            spec(&mut out, format!("{p}normkv.g"), vec![cin], Init::Ones);
            spec(&mut out, format!("{p}normkv.b"), vec![cin], Init::Zeros);
            spec(&mut out, format!("{p}attn.wq"), vec![cout, cout], Init::Normal);
            spec(&mut out, format!("{p}attn.bq"), vec![cout], Init::Zeros);
            spec(&mut out, format!("{p}attn.wk"), vec![cin, cout], Init::Normal);
            spec(&mut out, format!("{p}attn.bk"), vec![cout], Init::Zeros);
            spec(&mut out, format!("{p}attn.wv"), vec![cin, cout], Init::Normal);
            spec(&mut out, format!("{p}attn.bv"), vec![cout], Init::Zeros);
            spec(&mut out, format!("{p}attn.wo"), vec![cout, cout], Init::Normal);
            spec(&mut out, format!("{p}attn.bo"), vec![cout], Init::Zeros);
            spec(&mut out, format!("{p}norm2.g"), vec![cout], Init::Ones);
            spec(&mut out, format!("{p}norm2.b"), vec![cout], Init::Zeros);
            spec(&mut out, format!("{p}mlp.w1"), vec![cout, hid], Init::Normal);
            spec(&mut out, format!("{p}mlp.b1"), vec![hid], Init::Zeros);
            spec(&mut out, format!("{p}mlp.w2"), vec![hid, cout], Init::Normal);
            spec(&mut out, format!("{p}mlp.b2"), vec![cout], Init::Zeros);
        }
    }

    let d = config.mta_dim;
    for (s, st) in config.stages.iter().enumerate() {
        let p = format!("mta.lateral{}.", s + 1);
        spec(&mut out, format!("{p}w"), vec![st.dim, d], Init::Normal);
        spec(&mut out, format!("{p}b"), vec![d], Init::Zeros);
    }
    for target in (1..config.stages.len()).rev() {
        let st = &config.stages[target - 1];
        let prefix = format!("mta.block{}.", target);
        block_specs(&mut out, &prefix, d, st.sr_ratio, st.mlp_ratio);
    }

    let c_last = config.stages.last().unwrap().dim;
    spec(&mut out, "head.norm.g".into(), vec![c_last], Init::Ones);
    spec(&mut out, "head.norm.b".into(), vec![c_last], Init::Zeros);
    spec(&mut out, "head.w".into(), vec![c_last, config.num_classes], Init::Normal);
    spec(&mut out, "head.b".into(), vec![config.num_classes], Init::Zeros);
    out
}

/// Seeded fixture weights: normal entries drawn sequentially from one
/// splitmix64 stream in inventory order; ones/zeros entries draw nothing.
pub fn generate_weights(config: &ModelConfig) -> Result<WeightStore> {
    config.validate()?;
    let mut rng = SeededRng::new(config.seed);
    let mut store = WeightStore::new();
    for ts in required_tensors(config) {
        let tensor = match ts.init {
            Init::Normal => rng.normal_tensor(ts.shape, INIT_STDDEV),
            Init::Ones => Tensor::filled(ts.shape, 1.0),
            Init::Zeros => Tensor::zeros(ts.shape),
        };
        store.insert(&ts.name, tensor)?;
    }
    Ok(store)
}

/// Checks the store against the configuration's inventory, enumerating every
/// missing name in one error.
pub fn validate_weights(store: &WeightStore, config: &ModelConfig) -> Result<()> {
    let mut missing = Vec::new();
    for ts in required_tensors(config) {
        match store.get(&ts.name) {
            None => missing.push(ts.name),
            Some(t) if t.shape() != ts.shape => {
                return Err(TcfError::Weights(format!(
                    "tensor {:?} has shape {:?}, expected {:?}",
                    ts.name,
                    t.shape(),
                    ts.shape
                )));
            }
            Some(_) => {}
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(TcfError::MissingWeights(missing.join(", ")))
    }
}

fn linear(x: &Tensor, store: &WeightStore, w: &str, b: &str, shape: [usize; 2]) -> Result<Tensor> {
    let wt = store.require(w, &shape)?;
    let bt = store.require(b, &shape[1..])?;
    x.matmul(wt)?.add_row_bias(bt)
}

fn layer_norm(x: &Tensor, store: &WeightStore, g: &str, b: &str, c: usize) -> Result<Tensor> {
    x.layer_norm(store.require(g, &[c])?, store.require(b, &[c])?, LN_EPS)
}

/// Two overlapping stride-2 3×3 convolutions and a layer norm produce the
/// stride-4 token grid; each pixel of the final map is one token.
pub fn stem(image: &Tensor, config: &ModelConfig, store: &WeightStore) -> Result<TokenSet> {
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(TcfError::Geometry(format!(
            "stem expects a 3×H×W image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(TcfError::Geometry(format!(
            "image {h}×{w} must have sides divisible by 32"
        )));
    }
    let dim0 = config.stages[0].dim;
    let mid = (dim0 / 2).max(1);
    let c1 = image.strided_conv(
        store.require("stem.conv1.w", &[mid, 3, 3, 3])?,
        store.require("stem.conv1.b", &[mid])?,
        2,
        1,
    )?;
    let c2 = c1.strided_conv(
        store.require("stem.conv2.w", &[dim0, mid, 3, 3])?,
        store.require("stem.conv2.b", &[dim0])?,
        2,
        1,
    )?;
    let (gh, gw) = (c2.shape()[1], c2.shape()[2]);
    let mut rows = Vec::with_capacity(gh * gw * dim0);
    for y in 0..gh {
        for x in 0..gw {
            for ch in 0..dim0 {
                rows.push(c2.data()[ch * gh * gw + y * gw + x]);
            }
        }
    }
    let features = Tensor::new(vec![gh * gw, dim0], rows)?;
    let features = layer_norm(&features, store, "stem.norm.g", "stem.norm.b", dim0)?;
    Ok(TokenSet::stage1_grid(features, gh, gw))
}

/// Pre-norm attention over reduced keys/values, a depthwise-conv branch on
/// the nominal grid, and a pre-norm GELU MLP, all with residual adds.
/// Importance and pixel map pass through unchanged. Returns the output set
/// and the key/value token count.
pub fn transformer_block(
    tokens: &TokenSet,
    heads: usize,
    mlp_ratio: usize,
    reduction: &KeyReduction,
    store: &WeightStore,
    prefix: &str,
    macs: &mut u64,
) -> Result<(TokenSet, usize)> {
    let c = tokens.channels();
    let n = tokens.len();
    let hid = c * mlp_ratio;

    let normed = layer_norm(
        &tokens.features,
        store,
        &format!("{prefix}norm1.g"),
        &format!("{prefix}norm1.b"),
        c,
    )?;
    let q = linear(
        &normed,
        store,
        &format!("{prefix}attn.wq"),
        &format!("{prefix}attn.bq"),
        [c, c],
    )?;
    let mut normed_set = tokens.clone();
    normed_set.features = normed;
    let kv_source = match reduction {
        KeyReduction::Spatial(r) => sr_reduce(
            &normed_set,
            *r,
            store.require(&format!("{prefix}sr.w"), &[c, c, *r, *r])?,
            store.require(&format!("{prefix}sr.b"), &[c])?,
        )?,
        KeyReduction::Clustering {
            composed,
            num_final,
            weighted,
        } => cr_reduce(&normed_set, composed, *num_final, *weighted)?,
    };
    let kv_count = kv_source.len();
    let k = linear(
        &kv_source.features,
        store,
        &format!("{prefix}attn.wk"),
        &format!("{prefix}attn.bk"),
        [c, c],
    )?;
    let v = linear(
        &kv_source.features,
        store,
        &format!("{prefix}attn.wv"),
        &format!("{prefix}attn.bv"),
        [c, c],
    )?;
    let attn = biased_attention(&q, &k, &v, &vec![0.0; kv_count], heads)?;
    *macs += attention_macs(n, kv_count, c);
    let attn = linear(
        &attn,
        store,
        &format!("{prefix}attn.wo"),
        &format!("{prefix}attn.bo"),
        [c, c],
    )?;
    let mut x = tokens.features.add(&attn)?;

    let mut x_set = tokens.clone();
    x_set.features = x;
    let map = tokens_to_map(&x_set, tokens.grid_h, tokens.grid_w)?;
    let conv = map.depthwise_conv3x3(
        store.require(&format!("{prefix}dw.w"), &[c, 3, 3])?,
        store.require(&format!("{prefix}dw.b"), &[c])?,
    )?;
    let local = map_to_tokens(&conv, &x_set)?;
    x = x_set.features.add(&local)?;

    let normed2 = layer_norm(
        &x,
        store,
        &format!("{prefix}norm2.g"),
        &format!("{prefix}norm2.b"),
        c,
    )?;
    let h1 = linear(
        &normed2,
        store,
        &format!("{prefix}mlp.w1"),
        &format!("{prefix}mlp.b1"),
        [c, hid],
    )?
    .gelu();
    let h2 = linear(
        &h1,
        store,
        &format!("{prefix}mlp.w2"),
        &format!("{prefix}mlp.b2"),
        [hid, c],
    )?;
    x = x.add(&h2)?;

    let mut out = tokens.clone();
    out.features = x;
    Ok((out, kv_count))
}

/// Merge module between stages: predict importance, cluster within spatial
/// parts, merge each cluster, then one cross-attention block with merged
/// tokens as queries (projected to the next stage width), the originals as
/// keys/values, and the importance scores as the attention bias.
pub fn ctm_module(
    tokens: &TokenSet,
    parts: usize,
    ctm_index: usize,
    config: &ModelConfig,
    store: &WeightStore,
    macs: &mut u64,
    trace: Option<&mut ForwardTrace>,
) -> Result<(TokenSet, ClusterResult)> {
    let cin = tokens.channels();
    let next = &config.stages[ctm_index + 1];
    let cout = next.dim;
    let hid = cout * next.mlp_ratio;
    let p = format!("ctm{}.", ctm_index + 1);

    let importance = predict_importance(
        &tokens.features,
        store.require(&format!("{p}imp.w"), &[cin, 1])?,
        store.require(&format!("{p}imp.b"), &[1])?.data()[0],
    )?;
    let mut scored = tokens.clone();
    scored.importance = importance;

    let clusters = cluster_local(&scored, parts, config.cluster_ratio, config.knn_k)?;
    let merged = merge_tokens(&scored, &clusters)?;

    let q_base = linear(
        &merged.features,
        store,
        &format!("{p}proj.w"),
        &format!("{p}proj.b"),
        [cin, cout],
    )?;
    let q = linear(
        &layer_norm(&q_base, store, &format!("{p}normq.g"), &format!("{p}normq.b"), cout)?,
        store,
        &format!("{p}attn.wq"),
        &format!("{p}attn.bq"),
        [cout, cout],
    )?;
    let kv_norm = layer_norm(
        &scored.features,
        store,
        &format!("{p}normkv.g"),
        &format!("{p}normkv.b"),
        cin,
    )?;
    let k = linear(&kv_norm, store, &format!("{p}attn.wk"), &format!("{p}attn.bk"), [cin, cout])?;
    let v = linear(&kv_norm, store, &format!("{p}attn.wv"), &format!("{p}attn.bv"), [cin, cout])?;
    let (attn, attn_weights) =
        biased_attention_with_weights(&q, &k, &v, &scored.importance, next.heads)?;
    *macs += attention_macs(merged.len(), scored.len(), cout);
    if let Some(tr) = trace {
        tr.attention
            .push((format!("ctm{}.attn", ctm_index + 1), attn_weights));
    }
    let attn = linear(&attn, store, &format!("{p}attn.wo"), &format!("{p}attn.bo"), [cout, cout])?;
    let mut x = q_base.add(&attn)?;

    let normed2 = layer_norm(&x, store, &format!("{p}norm2.g"), &format!("{p}norm2.b"), cout)?;
    let h1 = linear(&normed2, store, &format!("{p}mlp.w1"), &format!("{p}mlp.b1"), [cout, hid])?
        .gelu();
    let h2 = linear(&h1, store, &format!("{p}mlp.w2"), &format!("{p}mlp.b2"), [hid, cout])?;
    x = x.add(&h2)?;

    let mut out = merged;
    out.features = x;
    Ok((out, clusters))
}

pub fn forward(image: &Tensor, config: &ModelConfig, store: &WeightStore) -> Result<TokenPyramid> {
    forward_traced(image, config, store, None)
}

/// Stem, then per stage its transformer blocks, with a merge module between
/// consecutive stages; records every post-stage token set and cluster record.
pub fn forward_traced(
    image: &Tensor,
    config: &ModelConfig,
    store: &WeightStore,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<TokenPyramid> {
    config.validate()?;
    let mut tokens = stem(image, config, store)?;
    let (stem_h, stem_w) = (tokens.map_h, tokens.map_w);
    let mut stages = Vec::with_capacity(config.stages.len());
    let mut ctm_records = Vec::with_capacity(config.stages.len() - 1);
    let mut macs = 0u64;
    for (s, st) in config.stages.iter().enumerate() {
        for b in 0..st.blocks {
            let prefix = format!("stage{}.block{}.", s + 1, b);
            let (next, _) = transformer_block(
                &tokens,
                st.heads,
                st.mlp_ratio,
                &KeyReduction::Spatial(st.sr_ratio),
                store,
                &prefix,
                &mut macs,
            )?;
            tokens = next;
        }
        stages.push(tokens.clone());
        if s + 1 < config.stages.len() {
            let (next, record) = ctm_module(
                &tokens,
                config.ctm_parts[s],
                s,
                config,
                store,
                &mut macs,
                trace.as_deref_mut(),
            )?;
            tokens = next;
            ctm_records.push(record);
        }
    }
    Ok(TokenPyramid {
        stages,
        ctm_records,
        stem_h,
        stem_w,
        attention_macs: macs,
    })
}

/// Layer norm, mean over final-stage tokens, linear head.
pub fn classify(
    pyramid: &TokenPyramid,
    config: &ModelConfig,
    store: &WeightStore,
) -> Result<Vec<f32>> {
    let last = pyramid
        .stages
        .last()
        .ok_or_else(|| TcfError::Shape("empty pyramid".into()))?;
    let c = last.channels();
    let normed = layer_norm(&last.features, store, "head.norm.g", "head.norm.b", c)?;
    let n = normed.rows();
    let mut mean = vec![0f64; c];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(normed.row(i)) {
            *m += f64::from(v);
        }
    }
    let mean: Vec<f32> = mean.iter().map(|&v| (v / n as f64) as f32).collect();
    let mean = Tensor::new(vec![1, c], mean)?;
    let logits = linear(&mean, store, "head.w", "head.b", [c, config.num_classes])?;
    Ok(logits.into_data())
}
