//! Token-level primitives: importance scoring, weighted cluster merging,
//! bias-augmented attention, cluster-recorded upsampling, the two key/value
//! reduction layers, and token↔grid conversion.
//!
//! Weighted and plain means accumulate in f64 with weights normalised before
//! accumulation, then round once to f32. This keeps merged features inside
//! the member bounds and makes "average of identical vectors" return the
//! vector exactly, which the upsample/merge roundtrip relies on.

use crate::clustering::ClusterResult;
use crate::error::{Result, TcfError};
use crate::tensor::Tensor;

/// N token feature vectors plus the pixel-ownership record for one stage.
///
/// `pixel_map` always lives on the stage-1 grid (`map_h × map_w`) and holds
/// the owning token index per pixel; `grid_h × grid_w` is the nominal grid
/// of this stage, halving per axis after each merge.
#[derive(Debug, Clone)]
pub struct TokenSet {
    pub features: Tensor,
    pub importance: Vec<f32>,
    pub pixel_map: Vec<usize>,
    pub map_h: usize,
    pub map_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub stage: usize,
}

impl TokenSet {
    /// Stage-1 layout: one token per pixel, identity map, zero importance.
    pub fn stage1_grid(features: Tensor, h: usize, w: usize) -> Self {
        let n = features.rows();
        assert_eq!(n, h * w, "token count must equal grid size");
        Self {
            features,
            importance: vec![0.0; n],
            pixel_map: (0..n).collect(),
            map_h: h,
            map_w: w,
            grid_h: h,
            grid_w: w,
            stage: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    /// Owned-pixel count per token.
    pub fn pixel_areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.len()];
        for &t in &self.pixel_map {
            areas[t] += 1;
        }
        areas
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.importance.len() != n {
            return Err(TcfError::Shape(format!(
                "importance length {} vs {n} tokens",
                self.importance.len()
            )));
        }
        if self.pixel_map.len() != self.map_h * self.map_w {
            return Err(TcfError::Shape(format!(
                "pixel map length {} vs grid {}×{}",
                self.pixel_map.len(),
                self.map_h,
                self.map_w
            )));
        }
        if let Some(&bad) = self.pixel_map.iter().find(|&&t| t >= n) {
            return Err(TcfError::Shape(format!(
                "pixel map references token {bad} of {n}"
            )));
        }
        if self.pixel_areas().contains(&0) {
            return Err(TcfError::Shape("token owns no pixels".into()));
        }
        Ok(())
    }
}

/// Linear importance head: `p_i = x_i · w + b`.
pub fn predict_importance(features: &Tensor, w: &Tensor, b: f32) -> Result<Vec<f32>> {
    if w.shape() != [features.cols(), 1] {
        return Err(TcfError::Shape(format!(
            "importance weights {:?} for {} channels",
            w.shape(),
            features.cols()
        )));
    }
    let scores = features.matmul(w)?;
    Ok(scores.data().iter().map(|&v| v + b).collect())
}

/// Importance-weighted merge of each cluster into one token.
///
/// Weights are `exp(p_j - max_p)` per cluster (f64), normalised before the
/// feature sum; members accumulate in ascending token order. The merged
/// importance is the log-sum-exp of the member importances, so a later
/// softmax over merged scores sees each cluster's aggregate weight.
pub fn merge_tokens(tokens: &TokenSet, clusters: &ClusterResult) -> Result<TokenSet> {
    let n = tokens.len();
    if clusters.len() != n {
        return Err(TcfError::Shape(format!(
            "cluster record covers {} tokens, set has {n}",
            clusters.len()
        )));
    }
    let k = clusters.num_clusters();
    let c = tokens.channels();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (tok, &cid) in clusters.assignment.iter().enumerate() {
        members[cid].push(tok);
    }

    let mut features = Vec::with_capacity(k * c);
    let mut importance = Vec::with_capacity(k);
    for m in &members {
        if m.is_empty() {
            return Err(TcfError::Clustering("empty cluster in merge".into()));
        }
        let max_p = m
            .iter()
            .map(|&j| tokens.importance[j])
            .fold(f32::NEG_INFINITY, f32::max);
        let weights: Vec<f64> = m
            .iter()
            .map(|&j| f64::from(tokens.importance[j] - max_p).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        let mut acc = vec![0f64; c];
        for (&j, &w) in m.iter().zip(&weights) {
            let u = w / total;
            for (a, &x) in acc.iter_mut().zip(tokens.features.row(j)) {
                *a += u * f64::from(x);
            }
        }
        features.extend(acc.iter().map(|&v| v as f32));
        importance.push((f64::from(max_p) + total.ln()) as f32);
    }

    let pixel_map: Vec<usize> = tokens
        .pixel_map
        .iter()
        .map(|&t| clusters.assignment[t])
        .collect();
    Ok(TokenSet {
        features: Tensor::new(vec![k, c], features)?,
        importance,
        pixel_map,
        map_h: tokens.map_h,
        map_w: tokens.map_w,
        grid_h: (tokens.grid_h / 2).max(1),
        grid_w: (tokens.grid_w / 2).max(1),
        stage: tokens.stage + 1,
    })
}

/// Multi-head scaled dot-product attention with a per-key additive bias.
///
/// The bias enters every logit column before the softmax, identically for
/// all queries and heads. Heads are concatenated; any output projection is
/// the caller's.
pub fn biased_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: &[f32],
    heads: usize,
) -> Result<Tensor> {
    Ok(biased_attention_with_weights(q, k, v, bias, heads)?.0)
}

/// As `biased_attention`, additionally returning the attention weights as a
/// `heads × M × N` tensor.
pub fn biased_attention_with_weights(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: &[f32],
    heads: usize,
) -> Result<(Tensor, Tensor)> {
    let (m, c) = (q.rows(), q.cols());
    let n = k.rows();
    if k.cols() != c || v.shape() != [n, c] {
        return Err(TcfError::Shape(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if bias.len() != n {
        return Err(TcfError::Shape(format!(
            "attention bias length {} for {n} keys",
            bias.len()
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(TcfError::Shape(format!(
            "{c} channels not divisible into {heads} heads"
        )));
    }
    let dh = c / heads;
    let scale = (dh as f32).sqrt();
    let mut out = Tensor::zeros(vec![m, c]);
    let mut all_weights = Tensor::zeros(vec![heads, m, n]);
    for h in 0..heads {
        let off = h * dh;
        let mut logits = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let qr = &q.row(i)[off..off + dh];
            let lr = logits.row_mut(i);
            for j in 0..n {
                let kr = &k.row(j)[off..off + dh];
                let mut dot = 0f32;
                for (a, b) in qr.iter().zip(kr) {
                    dot += a * b;
                }
                lr[j] = dot / scale + bias[j];
            }
        }
        let attn = logits.softmax_rows();
        for i in 0..m {
            let ar = attn.row(i);
            let mut acc = vec![0f32; dh];
            for (j, &w) in ar.iter().enumerate() {
                let vr = &v.row(j)[off..off + dh];
                for (a, &x) in acc.iter_mut().zip(vr) {
                    *a += w * x;
                }
            }
            out.row_mut(i)[off..off + dh].copy_from_slice(&acc);
        }
        all_weights.data_mut()[h * m * n..(h + 1) * m * n].copy_from_slice(attn.data());
    }
    Ok((out, all_weights))
}

/// MACs spent by one `biased_attention` call (logits plus weighted values).
pub fn attention_macs(m: usize, n: usize, c: usize) -> u64 {
    2 * (m as u64) * (n as u64) * (c as u64)
}

/// Copies each merged token's features back onto its pre-merge constituent
/// tokens; importance, pixel map and grid come from the pre-merge set.
pub fn upsample_tokens(
    merged: &TokenSet,
    clusters: &ClusterResult,
    original: &TokenSet,
) -> Result<TokenSet> {
    if clusters.len() != original.len() {
        return Err(TcfError::Shape(format!(
            "cluster record covers {} tokens, pre-merge set has {}",
            clusters.len(),
            original.len()
        )));
    }
    if merged.len() != clusters.num_clusters() {
        return Err(TcfError::Shape(format!(
            "merged set has {} tokens, record has {} clusters",
            merged.len(),
            clusters.num_clusters()
        )));
    }
    let c = merged.channels();
    let mut features = Vec::with_capacity(original.len() * c);
    for &cid in &clusters.assignment {
        features.extend_from_slice(merged.features.row(cid));
    }
    Ok(TokenSet {
        features: Tensor::new(vec![original.len(), c], features)?,
        importance: original.importance.clone(),
        pixel_map: original.pixel_map.clone(),
        map_h: original.map_h,
        map_w: original.map_w,
        grid_h: original.grid_h,
        grid_w: original.grid_w,
        stage: original.stage,
    })
}

/// Spatial reduction: render tokens onto the nominal grid, compress with an
/// r-strided r×r convolution, flatten the result back to tokens.
///
/// The reduced importance per output token is the mean importance of the
/// owner tokens over the covered r×r block of nominal cells.
pub fn sr_reduce(tokens: &TokenSet, r: usize, weights: &Tensor, bias: &Tensor) -> Result<TokenSet> {
    if r == 0 || !tokens.grid_h.is_multiple_of(r) || !tokens.grid_w.is_multiple_of(r) {
        return Err(TcfError::Geometry(format!(
            "reduction ratio {r} does not divide grid {}×{}",
            tokens.grid_h, tokens.grid_w
        )));
    }
    let map = tokens_to_map(tokens, tokens.grid_h, tokens.grid_w)?;
    let reduced = map.strided_conv(weights, bias, r, 0)?;
    let (c_out, gh, gw) = (
        reduced.shape()[0],
        reduced.shape()[1],
        reduced.shape()[2],
    );
    let n_out = gh * gw;
    let mut features = Vec::with_capacity(n_out * c_out);
    for y in 0..gh {
        for x in 0..gw {
            for ch in 0..c_out {
                features.push(reduced.data()[ch * gh * gw + y * gw + x]);
            }
        }
    }
    let mut importance = Vec::with_capacity(n_out);
    for y in 0..gh {
        for x in 0..gw {
            let mut sum = 0f64;
            for dy in 0..r {
                for dx in 0..r {
                    let owner = cell_owner(tokens, tokens.grid_h, tokens.grid_w, y * r + dy, x * r + dx);
                    sum += f64::from(tokens.importance[owner]);
                }
            }
            importance.push((sum / (r * r) as f64) as f32);
        }
    }
    let mut pixel_map = Vec::with_capacity(tokens.map_h * tokens.map_w);
    for py in 0..tokens.map_h {
        for px in 0..tokens.map_w {
            let cy = py * tokens.grid_h / tokens.map_h;
            let cx = px * tokens.grid_w / tokens.map_w;
            pixel_map.push((cy / r) * gw + cx / r);
        }
    }
    Ok(TokenSet {
        features: Tensor::new(vec![n_out, c_out], features)?,
        importance,
        pixel_map,
        map_h: tokens.map_h,
        map_w: tokens.map_w,
        grid_h: gh,
        grid_w: gw,
        stage: tokens.stage,
    })
}

/// Clustering reduction: merge tokens onto the F final-stage clusters given
/// by a composed assignment. Plain arithmetic mean by default; set
/// `weighted` to reuse the importance-weighted merge instead.
pub fn cr_reduce(
    tokens: &TokenSet,
    composed: &[usize],
    num_final: usize,
    weighted: bool,
) -> Result<TokenSet> {
    let n = tokens.len();
    if composed.len() != n {
        return Err(TcfError::Shape(format!(
            "composed assignment covers {} tokens, set has {n}",
            composed.len()
        )));
    }
    let c = tokens.channels();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_final];
    for (tok, &f) in composed.iter().enumerate() {
        if f >= num_final {
            return Err(TcfError::Shape(format!(
                "composed assignment value {f} outside [0, {num_final})"
            )));
        }
        members[f].push(tok);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        return Err(TcfError::Clustering(format!(
            "composed assignment never reaches final cluster {empty}"
        )));
    }
    let mut features = Vec::with_capacity(num_final * c);
    let mut importance = Vec::with_capacity(num_final);
    for m in &members {
        let weights: Vec<f64> = if weighted {
            let max_p = m
                .iter()
                .map(|&j| tokens.importance[j])
                .fold(f32::NEG_INFINITY, f32::max);
            m.iter()
                .map(|&j| f64::from(tokens.importance[j] - max_p).exp())
                .collect()
        } else {
            vec![1f64; m.len()]
        };
        let total: f64 = weights.iter().sum();
        let mut acc = vec![0f64; c];
        let mut imp = 0f64;
        for (&j, &w) in m.iter().zip(&weights) {
            let u = w / total;
            for (a, &x) in acc.iter_mut().zip(tokens.features.row(j)) {
                *a += u * f64::from(x);
            }
            imp += f64::from(tokens.importance[j]) / m.len() as f64;
        }
        features.extend(acc.iter().map(|&v| v as f32));
        importance.push(imp as f32);
    }
    let pixel_map: Vec<usize> = tokens.pixel_map.iter().map(|&t| composed[t]).collect();
    Ok(TokenSet {
        features: Tensor::new(vec![num_final, c], features)?,
        importance,
        pixel_map,
        map_h: tokens.map_h,
        map_w: tokens.map_w,
        grid_h: tokens.grid_h,
        grid_w: tokens.grid_w,
        stage: tokens.stage,
    })
}

/// Owning token of a nominal grid cell: the token holding the cell's centre
/// pixel on the stage-1 grid.
fn cell_owner(tokens: &TokenSet, h: usize, w: usize, i: usize, j: usize) -> usize {
    let py = ((2 * i + 1) * tokens.map_h) / (2 * h);
    let px = ((2 * j + 1) * tokens.map_w) / (2 * w);
    tokens.pixel_map[py * tokens.map_w + px]
}

/// Renders tokens to a C×h×w feature map; `h×w` must be the stage's nominal
/// grid or the stage-1 grid. Each cell takes the feature of the token owning
/// its centre pixel.
pub fn tokens_to_map(tokens: &TokenSet, h: usize, w: usize) -> Result<Tensor> {
    let nominal = (h, w) == (tokens.grid_h, tokens.grid_w);
    let full = (h, w) == (tokens.map_h, tokens.map_w);
    if !nominal && !full {
        return Err(TcfError::Geometry(format!(
            "grid {h}×{w} is neither nominal {}×{} nor stage-1 {}×{}",
            tokens.grid_h, tokens.grid_w, tokens.map_h, tokens.map_w
        )));
    }
    let c = tokens.channels();
    let mut out = Tensor::zeros(vec![c, h, w]);
    for i in 0..h {
        for j in 0..w {
            let tok = cell_owner(tokens, h, w, i, j);
            let row = tokens.features.row(tok);
            for (ch, &val) in row.iter().enumerate() {
                out.data_mut()[ch * h * w + i * w + j] = val;
            }
        }
    }
    Ok(out)
}

/// Inverse of `tokens_to_map`: every token takes the mean of the map values
/// sampled at its owned stage-1 pixels (each pixel reads the grid cell it
/// falls in), so tokens with few pixels still receive a well-defined value.
pub fn map_to_tokens(map: &Tensor, tokens: &TokenSet) -> Result<Tensor> {
    if map.shape().len() != 3 {
        return Err(TcfError::Shape("map_to_tokens expects C×h×w".into()));
    }
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let nominal = (h, w) == (tokens.grid_h, tokens.grid_w);
    let full = (h, w) == (tokens.map_h, tokens.map_w);
    if !nominal && !full {
        return Err(TcfError::Geometry(format!(
            "map {h}×{w} is neither nominal {}×{} nor stage-1 {}×{}",
            tokens.grid_h, tokens.grid_w, tokens.map_h, tokens.map_w
        )));
    }
    let n = tokens.len();
    let mut acc = vec![0f64; n * c];
    let mut count = vec![0u64; n];
    for py in 0..tokens.map_h {
        for px in 0..tokens.map_w {
            let t = tokens.pixel_map[py * tokens.map_w + px];
            let cy = py * h / tokens.map_h;
            let cx = px * w / tokens.map_w;
            for ch in 0..c {
                acc[t * c + ch] += f64::from(map.data()[ch * h * w + cy * w + cx]);
            }
            count[t] += 1;
        }
    }
    let mut out = Tensor::zeros(vec![n, c]);
    for t in 0..n {
        debug_assert!(count[t] > 0, "token {t} owns no pixels");
        for ch in 0..c {
            out.data_mut()[t * c + ch] = (acc[t * c + ch] / count[t] as f64) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::cluster_global;
    use crate::rng::SeededRng;

    fn identity_record(n: usize) -> ClusterResult {
        ClusterResult {
            rho: vec![1.0; n],
            delta: vec![0.0; n],
            score: vec![0.0; n],
            centers: (0..n).collect(),
            assignment: (0..n).collect(),
            part_label: vec![0; n],
            dist_ops: 0,
        }
    }

    fn record(assignment: Vec<usize>, centers: Vec<usize>) -> ClusterResult {
        let n = assignment.len();
        ClusterResult {
            rho: vec![1.0; n],
            delta: vec![0.0; n],
            score: vec![0.0; n],
            centers,
            assignment,
            part_label: vec![0; n],
            dist_ops: 0,
        }
    }

    #[test]
    fn importance_zero_weights() {
        let f = Tensor::filled(vec![4, 3], 2.0);
        let w = Tensor::zeros(vec![3, 1]);
        let p = predict_importance(&f, &w, 0.0).unwrap();
        assert_eq!(p, vec![0.0; 4]);
    }

    #[test]
    fn importance_arithmetic() {
        let f = Tensor::from_rows(&[vec![3.0]]);
        let w = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let p = predict_importance(&f, &w, 1.0).unwrap();
        assert_eq!(p, vec![7.0]);
    }

    #[test]
    fn importance_shape_contract() {
        let mut rng = SeededRng::new(3);
        let f = rng.normal_tensor(vec![9, 5], 1.0);
        let w = rng.normal_tensor(vec![5, 1], 1.0);
        assert_eq!(predict_importance(&f, &w, 0.5).unwrap().len(), 9);
    }

    #[test]
    fn merge_uniform_importance_is_mean() {
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0], vec![5.0, 4.0]]);
        let mut t = TokenSet::stage1_grid(f, 3, 1);
        t.importance = vec![0.7; 3];
        let r = record(vec![0, 0, 0], vec![0]);
        let m = merge_tokens(&t, &r).unwrap();
        assert!((m.features.data()[0] - 3.0).abs() < 1e-6);
        assert!((m.features.data()[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn merge_hand_weights() {
        let f = Tensor::from_rows(&[vec![1.0], vec![3.0]]);
        let mut t = TokenSet::stage1_grid(f, 2, 1);
        t.importance = vec![0.0, 3f32.ln()];
        let r = record(vec![0, 0], vec![0]);
        let m = merge_tokens(&t, &r).unwrap();
        assert!((m.features.data()[0] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn merge_importance_shift_invariant() {
        let mut rng = SeededRng::new(8);
        let f = rng.normal_tensor(vec![12, 4], 1.0);
        let mut t = TokenSet::stage1_grid(f, 4, 3);
        t.importance = (0..12).map(|i| (i as f32) * 0.3 - 1.0).collect();
        let clusters = cluster_global(&t.features, 3, 2).unwrap();
        let a = merge_tokens(&t, &clusters).unwrap();
        let mut shifted = t.clone();
        for p in shifted.importance.iter_mut() {
            *p += 11.25;
        }
        let b = merge_tokens(&shifted, &clusters).unwrap();
        for (x, y) in a.features.data().iter().zip(b.features.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn merge_is_convex_combination() {
        let mut rng = SeededRng::new(14);
        for _ in 0..50 {
            let n = 6 + (rng.next_u64() % 10) as usize;
            let f = rng.normal_tensor(vec![n, 3], 2.0);
            let mut t = TokenSet::stage1_grid(f, n, 1);
            t.importance = (0..n).map(|_| rng.normal(2.0)).collect();
            let clusters = cluster_global(&t.features, 2, 2).unwrap();
            let m = merge_tokens(&t, &clusters).unwrap();
            for cid in 0..2 {
                for ch in 0..3 {
                    let mut lo = f32::INFINITY;
                    let mut hi = f32::NEG_INFINITY;
                    for tok in 0..n {
                        if clusters.assignment[tok] == cid {
                            let v = t.features.row(tok)[ch];
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                    let v = m.features.row(cid)[ch];
                    assert!(v >= lo && v <= hi, "merged {v} outside [{lo}, {hi}]");
                }
            }
        }
    }

    #[test]
    fn merge_relabels_pixels_and_halves_grid() {
        let f = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        let t = TokenSet::stage1_grid(f, 2, 2);
        let r = record(vec![0, 0, 1, 1], vec![0, 2]);
        let m = merge_tokens(&t, &r).unwrap();
        assert_eq!(m.pixel_map, vec![0, 0, 1, 1]);
        assert_eq!((m.grid_h, m.grid_w), (1, 1));
        assert_eq!(m.stage, 1);
        assert_eq!((m.map_h, m.map_w), (2, 2));
    }

    #[test]
    fn attention_zero_bias_matches_unbiased_reference() {
        let mut rng = SeededRng::new(21);
        let q = rng.normal_tensor(vec![5, 8], 1.0);
        let k = rng.normal_tensor(vec![7, 8], 1.0);
        let v = rng.normal_tensor(vec![7, 8], 1.0);
        let out = biased_attention(&q, &k, &v, &[0.0; 7], 2).unwrap();
        // independent single-pass reference
        for h in 0..2usize {
            let off = h * 4;
            for i in 0..5 {
                let mut logits = [0f64; 7];
                for (j, logit) in logits.iter_mut().enumerate() {
                    let mut dot = 0f64;
                    for c in 0..4 {
                        dot += f64::from(q.row(i)[off + c]) * f64::from(k.row(j)[off + c]);
                    }
                    *logit = dot / 2.0;
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for c in 0..4 {
                    let mut o = 0f64;
                    for (j, e) in exps.iter().enumerate() {
                        o += e / sum * f64::from(v.row(j)[off + c]);
                    }
                    assert!((f64::from(out.row(i)[off + c]) - o).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut rng = SeededRng::new(4);
        let q = rng.normal_tensor(vec![3, 4], 1.0);
        let k = rng.normal_tensor(vec![1, 4], 1.0);
        let v = rng.normal_tensor(vec![1, 4], 1.0);
        let out = biased_attention(&q, &k, &v, &[123.0], 2).unwrap();
        for i in 0..3 {
            for c in 0..4 {
                assert!((out.row(i)[c] - v.row(0)[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_bias_dominates_logits() {
        let mut rng = SeededRng::new(6);
        let q = rng.normal_tensor(vec![4, 4], 0.5);
        let k = rng.normal_tensor(vec![3, 4], 0.5);
        let v = rng.normal_tensor(vec![3, 4], 0.5);
        let (_, w) = biased_attention_with_weights(&q, &k, &v, &[50.0, 0.0, 0.0], 1).unwrap();
        for i in 0..4 {
            let w0 = w.data()[i * 3];
            assert!(w0 >= 1.0 - 1e-9, "weight on key 0 was {w0}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = SeededRng::new(16);
        let q = rng.normal_tensor(vec![6, 6], 2.0);
        let k = rng.normal_tensor(vec![9, 6], 2.0);
        let v = rng.normal_tensor(vec![9, 6], 2.0);
        let bias: Vec<f32> = (0..9).map(|i| i as f32 * 0.5).collect();
        let (_, w) = biased_attention_with_weights(&q, &k, &v, &bias, 3).unwrap();
        for h in 0..3 {
            for i in 0..6 {
                let sum: f64 = (0..9)
                    .map(|j| f64::from(w.data()[(h * 6 + i) * 9 + j]))
                    .sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_bias_shift_invariant() {
        let mut rng = SeededRng::new(26);
        let q = rng.normal_tensor(vec![4, 6], 1.0);
        let k = rng.normal_tensor(vec![5, 6], 1.0);
        let v = rng.normal_tensor(vec![5, 6], 1.0);
        let bias: Vec<f32> = (0..5).map(|i| i as f32 - 2.0).collect();
        let shifted: Vec<f32> = bias.iter().map(|b| b + 6.5).collect();
        let a = biased_attention(&q, &k, &v, &bias, 2).unwrap();
        let b = biased_attention(&q, &k, &v, &shifted, 2).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_identity_clustering() {
        let mut rng = SeededRng::new(31);
        let f = rng.normal_tensor(vec![4, 2], 1.0);
        let t = TokenSet::stage1_grid(f, 2, 2);
        let r = identity_record(4);
        let up = upsample_tokens(&t, &r, &t).unwrap();
        assert_eq!(up.features, t.features);
        assert_eq!(up.pixel_map, t.pixel_map);
    }

    #[test]
    fn upsample_copies_cluster_feature() {
        let f = Tensor::from_rows(&[vec![0.5, -1.0]]);
        let merged = TokenSet {
            features: f,
            importance: vec![0.0],
            pixel_map: vec![0, 0, 0, 0],
            map_h: 2,
            map_w: 2,
            grid_h: 1,
            grid_w: 1,
            stage: 1,
        };
        let orig = TokenSet::stage1_grid(Tensor::zeros(vec![4, 2]), 2, 2);
        let r = record(vec![0, 0, 0, 0], vec![0]);
        let up = upsample_tokens(&merged, &r, &orig).unwrap();
        for i in 0..4 {
            assert_eq!(up.features.row(i), &[0.5, -1.0]);
        }
        assert_eq!(up.pixel_map, vec![0, 1, 2, 3]);
    }

    #[test]
    fn merge_after_upsample_is_exact() {
        let mut rng = SeededRng::new(41);
        for _ in 0..20 {
            let n = 8 + (rng.next_u64() % 8) as usize;
            let f = rng.normal_tensor(vec![n, 3], 1.5);
            let mut t = TokenSet::stage1_grid(f, n, 1);
            t.importance = (0..n).map(|_| rng.normal(1.0)).collect();
            let clusters = cluster_global(&t.features, 3, 2).unwrap();
            let merged = merge_tokens(&t, &clusters).unwrap();
            let up = upsample_tokens(&merged, &clusters, &t).unwrap();
            let again = merge_tokens(&up, &clusters).unwrap();
            for (a, b) in merged.features.data().iter().zip(again.features.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn sr_identity_at_ratio_one() {
        let mut rng = SeededRng::new(51);
        let f = rng.normal_tensor(vec![6, 2], 1.0);
        let t = TokenSet::stage1_grid(f, 2, 3);
        let mut w = Tensor::zeros(vec![2, 2, 1, 1]);
        w.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::zeros(vec![2]);
        let r = sr_reduce(&t, 1, &w, &b).unwrap();
        assert_eq!(r.features, t.features);
        assert_eq!(r.len(), 6);
    }

    #[test]
    fn sr_constant_map() {
        let t = TokenSet::stage1_grid(Tensor::filled(vec![16, 1], 3.0), 4, 4);
        let w = Tensor::filled(vec![1, 1, 2, 2], 0.25);
        let b = Tensor::zeros(vec![1]);
        let r = sr_reduce(&t, 2, &w, &b).unwrap();
        assert_eq!(r.len(), 4);
        for &v in r.features.data() {
            assert!((v - 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sr_token_counts_across_ratios() {
        for (grid, r) in [(16usize, 8usize), (16, 4), (16, 2), (16, 1)] {
            let t = TokenSet::stage1_grid(Tensor::zeros(vec![grid * grid, 2]), grid, grid);
            let w = Tensor::zeros(vec![2, 2, r, r]);
            let b = Tensor::zeros(vec![2]);
            let red = sr_reduce(&t, r, &w, &b).unwrap();
            assert_eq!(red.len(), grid * grid / (r * r));
        }
    }

    #[test]
    fn sr_rejects_nondivisible() {
        let t = TokenSet::stage1_grid(Tensor::zeros(vec![9, 1]), 3, 3);
        let w = Tensor::zeros(vec![1, 1, 2, 2]);
        let b = Tensor::zeros(vec![1]);
        assert!(sr_reduce(&t, 2, &w, &b).is_err());
    }

    #[test]
    fn cr_identity_assignment() {
        let mut rng = SeededRng::new(61);
        let f = rng.normal_tensor(vec![4, 3], 1.0);
        let t = TokenSet::stage1_grid(f, 2, 2);
        let composed: Vec<usize> = (0..4).collect();
        let r = cr_reduce(&t, &composed, 4, false).unwrap();
        assert_eq!(r.features, t.features);
        assert_eq!(r.pixel_map, t.pixel_map);
    }

    #[test]
    fn cr_two_member_mean() {
        let f = Tensor::from_rows(&[vec![1.0], vec![3.0]]);
        let t = TokenSet::stage1_grid(f, 2, 1);
        let r = cr_reduce(&t, &[0, 0], 1, false).unwrap();
        assert_eq!(r.features.data(), &[2.0]);
    }

    #[test]
    fn cr_bounds_within_input() {
        let mut rng = SeededRng::new(71);
        let f = rng.normal_tensor(vec![10, 3], 2.0);
        let t = TokenSet::stage1_grid(f, 5, 2);
        let composed: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let r = cr_reduce(&t, &composed, 3, false).unwrap();
        for ch in 0..3 {
            let lo = (0..10).map(|i| t.features.row(i)[ch]).fold(f32::INFINITY, f32::min);
            let hi = (0..10)
                .map(|i| t.features.row(i)[ch])
                .fold(f32::NEG_INFINITY, f32::max);
            for k in 0..3 {
                let v = r.features.row(k)[ch];
                assert!(v >= lo && v <= hi);
            }
        }
    }

    #[test]
    fn cr_rejects_uncovered_cluster() {
        let t = TokenSet::stage1_grid(Tensor::zeros(vec![2, 1]), 2, 1);
        assert!(cr_reduce(&t, &[0, 0], 2, false).is_err());
    }

    #[test]
    fn tokens_to_map_stage1_is_reshape() {
        let f = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0], vec![4.0], vec![5.0]]);
        let t = TokenSet::stage1_grid(f, 2, 3);
        let m = tokens_to_map(&t, 2, 3).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn tokens_to_map_single_token_constant() {
        let merged = TokenSet {
            features: Tensor::from_rows(&[vec![2.5]]),
            importance: vec![0.0],
            pixel_map: vec![0; 16],
            map_h: 4,
            map_w: 4,
            grid_h: 2,
            grid_w: 2,
            stage: 1,
        };
        let m = tokens_to_map(&merged, 2, 2).unwrap();
        for &v in m.data() {
            assert_eq!(v, 2.5);
        }
    }

    #[test]
    fn map_roundtrip_at_stage1_grid() {
        let mut rng = SeededRng::new(81);
        let f = rng.normal_tensor(vec![6, 4], 1.0);
        let t = TokenSet::stage1_grid(f, 2, 3);
        let m = tokens_to_map(&t, 2, 3).unwrap();
        let back = map_to_tokens(&m, &t).unwrap();
        for (a, b) in back.data().iter().zip(t.features.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn map_to_tokens_constant_map() {
        let t = TokenSet {
            features: Tensor::zeros(vec![3, 2]),
            importance: vec![0.0; 3],
            pixel_map: vec![0, 1, 1, 2],
            map_h: 2,
            map_w: 2,
            grid_h: 2,
            grid_w: 2,
            stage: 0,
        };
        let m = Tensor::filled(vec![2, 2, 2], 4.25);
        let back = map_to_tokens(&m, &t).unwrap();
        for &v in back.data() {
            assert_eq!(v, 4.25);
        }
    }

    #[test]
    fn map_to_tokens_linearity() {
        let mut rng = SeededRng::new(91);
        let t = TokenSet {
            features: Tensor::zeros(vec![3, 1]),
            importance: vec![0.0; 3],
            pixel_map: vec![0, 1, 1, 2, 2, 2],
            map_h: 2,
            map_w: 3,
            grid_h: 2,
            grid_w: 3,
            stage: 0,
        };
        let m1 = rng.normal_tensor(vec![1, 2, 3], 1.0);
        let m2 = rng.normal_tensor(vec![1, 2, 3], 1.0);
        let combo = m1.scale(2.0).add(&m2).unwrap();
        let lhs = map_to_tokens(&combo, &t).unwrap();
        let a = map_to_tokens(&m1, &t).unwrap();
        let b = map_to_tokens(&m2, &t).unwrap();
        let rhs = a.scale(2.0).add(&b).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
