//! Density-peaks clustering over token features, with a spatially
//! partitioned local variant and exact distance-work accounting.
//!
//! The arithmetic is pinned so results are reproducible bit-for-bit:
//! - squared distances accumulate `(a-b)²` over channels in index order, f32;
//! - local density is `exp(-(1/k)·Σ d²)` over the k nearest neighbours
//!   (self excluded, distance ties broken by lower token index), with the
//!   sum taken in f64 in ascending `(d², index)` order and the result
//!   rounded to f32;
//! - the distance indicator is the minimum distance to any denser token,
//!   where "denser" means `ρ_j > ρ_i`, or `ρ_j == ρ_i && j < i` so the
//!   density order is total; the unique maximal token takes the maximum
//!   distance to any token instead;
//! - all comparisons happen on the stored f32 values.
//!
//! `dist_ops` counts one multiply-accumulate per channel per ordered token
//! pair, i.e. N²·C for one full matrix, summed over parts for the local
//! variant.

pub mod oracle;

use crate::error::{Result, TcfError};
use crate::tensor::Tensor;
use crate::token_ops::TokenSet;

/// Outcome of one clustering pass over N tokens.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    /// Local density per token.
    pub rho: Vec<f32>,
    /// Distance indicator per token.
    pub delta: Vec<f32>,
    /// Center score `rho * delta` per token.
    pub score: Vec<f32>,
    /// Token indices chosen as centers, ascending; cluster `c` is centered
    /// on token `centers[c]`.
    pub centers: Vec<usize>,
    /// Cluster id per token, in `[0, centers.len())`.
    pub assignment: Vec<usize>,
    /// Spatial part id per token (all zero for a global pass).
    pub part_label: Vec<usize>,
    /// Multiply-accumulates spent on pairwise distance matrices.
    pub dist_ops: u64,
}

impl ClusterResult {
    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.centers.len()
    }
}

/// Full N×N squared-distance matrix (row-major), plus the MAC count N²·C.
fn squared_distance_matrix(features: &Tensor) -> (Vec<f32>, u64) {
    let (n, c) = (features.rows(), features.cols());
    let mut d2 = vec![0f32; n * n];
    for i in 0..n {
        let a = features.row(i);
        for j in 0..n {
            let b = features.row(j);
            let mut acc = 0f32;
            for (x, y) in a.iter().zip(b) {
                let d = x - y;
                acc += d * d;
            }
            d2[i * n + j] = acc;
        }
    }
    (d2, (n * n * c) as u64)
}

fn density_from_matrix(d2: &[f32], n: usize, k: usize) -> Vec<f32> {
    let mut rho = Vec::with_capacity(n);
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        let row = &d2[i * n..(i + 1) * n];
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_unstable_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let mut sum = 0f64;
        for &j in order.iter().take(k) {
            sum += f64::from(row[j]);
        }
        rho.push((-(sum / k as f64)).exp() as f32);
    }
    rho
}

/// Total density order: `j` outranks `i` on higher rho, lower index on ties.
#[inline]
fn denser(rho: &[f32], j: usize, i: usize) -> bool {
    rho[j] > rho[i] || (rho[j] == rho[i] && j < i)
}

fn indicator_from_matrix(d2: &[f32], n: usize, rho: &[f32]) -> Vec<f32> {
    let mut delta = Vec::with_capacity(n);
    for i in 0..n {
        let row = &d2[i * n..(i + 1) * n];
        let mut best: Option<f32> = None;
        for (j, &d) in row.iter().enumerate() {
            if j != i && denser(rho, j, i) {
                best = Some(match best {
                    Some(b) if b <= d => b,
                    _ => d,
                });
            }
        }
        let v = match best {
            Some(min_d2) => min_d2,
            // Unique density maximum: farthest distance to any token.
            None => row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &d)| d)
                .fold(0f32, f32::max),
        };
        delta.push(v.sqrt());
    }
    delta
}

fn scores(rho: &[f32], delta: &[f32]) -> Vec<f32> {
    rho.iter().zip(delta).map(|(&r, &d)| r * d).collect()
}

/// Indices of the K highest-score tokens, sorted by descending score
/// (ties by lower token index).
pub fn select_centers(rho: &[f32], delta: &[f32], num_clusters: usize) -> Result<Vec<usize>> {
    let n = rho.len();
    if num_clusters == 0 || num_clusters > n {
        return Err(TcfError::Clustering(format!(
            "cluster count {num_clusters} out of range for {n} tokens"
        )));
    }
    let score = scores(rho, delta);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    order.truncate(num_clusters);
    Ok(order)
}

fn assign_from_matrix(d2: &[f32], n: usize, centers: &[usize]) -> Vec<usize> {
    let mut assignment = vec![0usize; n];
    for i in 0..n {
        let row = &d2[i * n..(i + 1) * n];
        let mut best_c = 0usize;
        let mut best_d = row[centers[0]];
        for (c, &tok) in centers.iter().enumerate().skip(1) {
            let d = row[tok];
            if d < best_d {
                best_d = d;
                best_c = c;
            }
        }
        assignment[i] = best_c;
    }
    // Centers always own their cluster, even when features collide.
    for (c, &tok) in centers.iter().enumerate() {
        assignment[tok] = c;
    }
    assignment
}

/// Local density per token over an N×C feature matrix.
pub fn local_density(features: &Tensor, k: usize) -> Result<Vec<f32>> {
    let n = features.rows();
    if k == 0 || k + 1 > n {
        return Err(TcfError::Clustering(format!(
            "kNN size {k} out of range for {n} tokens"
        )));
    }
    let (d2, _) = squared_distance_matrix(features);
    Ok(density_from_matrix(&d2, n, k))
}

/// Distance indicator per token, given densities over the same token set.
pub fn distance_indicator(features: &Tensor, rho: &[f32]) -> Result<Vec<f32>> {
    let n = features.rows();
    if n < 2 {
        return Err(TcfError::Clustering(
            "distance indicator needs at least two tokens".into(),
        ));
    }
    if rho.len() != n {
        return Err(TcfError::Clustering(format!(
            "rho length {} vs {n} tokens",
            rho.len()
        )));
    }
    let (d2, _) = squared_distance_matrix(features);
    Ok(indicator_from_matrix(&d2, n, rho))
}

/// Nearest-center assignment; ties go to the lower center position, and
/// every center is assigned to itself.
pub fn assign_to_centers(features: &Tensor, centers: &[usize]) -> Vec<usize> {
    assert!(!centers.is_empty(), "assign_to_centers: empty center list");
    let (d2, _) = squared_distance_matrix(features);
    assign_from_matrix(&d2, features.rows(), centers)
}

/// One global density-peaks pass: density, indicator, top-score centers,
/// nearest-center assignment. Cluster ids follow ascending center token
/// index, so `num_clusters == N` yields the identity assignment.
pub fn cluster_global(features: &Tensor, num_clusters: usize, k: usize) -> Result<ClusterResult> {
    let n = features.rows();
    if n < 2 {
        return Err(TcfError::Clustering(format!(
            "clustering needs at least two tokens, got {n}"
        )));
    }
    if k == 0 || k + 1 > n {
        return Err(TcfError::Clustering(format!(
            "kNN size {k} out of range for {n} tokens"
        )));
    }
    let (d2, dist_ops) = squared_distance_matrix(features);
    let rho = density_from_matrix(&d2, n, k);
    let delta = indicator_from_matrix(&d2, n, &rho);
    let score = scores(&rho, &delta);
    let mut centers = select_centers(&rho, &delta, num_clusters)?;
    centers.sort_unstable();
    let assignment = assign_from_matrix(&d2, n, &centers);
    Ok(ClusterResult {
        rho,
        delta,
        score,
        centers,
        assignment,
        part_label: vec![0; n],
        dist_ops,
    })
}

/// Number of clusters one merge keeps from `n` tokens: `round(n · ratio)`,
/// at least one.
pub fn cluster_budget(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio).round() as usize).max(1)
}

/// Splits a global center budget across parts proportionally to part size
/// (largest-remainder rounding), keeping every part within `[1, size]`.
/// For balanced parts with an integral per-part quota this reduces to
/// `size · ratio` per part.
fn apportion_centers(sizes: &[usize], ratio: f64) -> Result<Vec<usize>> {
    let n: usize = sizes.iter().sum();
    let target = cluster_budget(n, ratio);
    if target > n {
        return Err(TcfError::Clustering(format!(
            "cluster ratio {ratio} asks for {target} centers from {n} tokens"
        )));
    }
    if target < sizes.len() {
        return Err(TcfError::Clustering(format!(
            "cluster budget {target} cannot cover {} non-empty parts",
            sizes.len()
        )));
    }
    let quotas: Vec<f64> = sizes
        .iter()
        .map(|&s| target as f64 * s as f64 / n as f64)
        .collect();
    let mut counts: Vec<usize> = quotas
        .iter()
        .zip(sizes)
        .map(|(&q, &s)| (q.floor() as usize).clamp(1, s))
        .collect();
    let mut assigned: usize = counts.iter().sum();
    while assigned < target {
        let mut pick = None;
        let mut best = f64::NEG_INFINITY;
        for (p, (&c, &s)) in counts.iter().zip(sizes).enumerate() {
            if c < s {
                let rem = quotas[p] - c as f64;
                if rem > best {
                    best = rem;
                    pick = Some(p);
                }
            }
        }
        counts[pick.expect("target <= total tokens")] += 1;
        assigned += 1;
    }
    while assigned > target {
        let mut pick = None;
        let mut best = f64::NEG_INFINITY;
        for (p, &c) in counts.iter().enumerate() {
            if c > 1 {
                let over = c as f64 - quotas[p];
                if over > best {
                    best = over;
                    pick = Some(p);
                }
            }
        }
        counts[pick.expect("target >= part count")] -= 1;
        assigned -= 1;
    }
    Ok(counts)
}

/// Spatially partitioned clustering: tokens are split into a √P×√P grid of
/// parts by the pixel centroid recorded in the token set, each part is
/// clustered independently, and cluster ids are renumbered part-major.
///
/// The per-part kNN size is clamped to the part population minus one.
pub fn cluster_local(
    tokens: &TokenSet,
    parts: usize,
    ratio: f64,
    k: usize,
) -> Result<ClusterResult> {
    let n = tokens.len();
    let side = (parts as f64).sqrt().round() as usize;
    if side * side != parts || parts == 0 {
        return Err(TcfError::Clustering(format!(
            "part count {parts} is not a perfect square"
        )));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(TcfError::Clustering(format!(
            "cluster ratio {ratio} outside (0, 1]"
        )));
    }
    let part_label = part_labels(tokens, side);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); parts];
    for (tok, &p) in part_label.iter().enumerate() {
        members[p].push(tok);
    }
    for (p, m) in members.iter().enumerate() {
        if m.is_empty() {
            return Err(TcfError::EmptyPart { part: p, parts });
        }
    }
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let budgets = apportion_centers(&sizes, ratio)?;

    let c = tokens.features.cols();
    let mut rho = vec![0f32; n];
    let mut delta = vec![0f32; n];
    let mut score = vec![0f32; n];
    let mut assignment = vec![0usize; n];
    let mut centers = Vec::new();
    let mut dist_ops = 0u64;
    let mut cluster_base = 0usize;
    for (p, m) in members.iter().enumerate() {
        let np = m.len();
        if np < 2 {
            return Err(TcfError::Clustering(format!(
                "part {p} holds a single token; clustering needs at least two"
            )));
        }
        let mut sub = Vec::with_capacity(np * c);
        for &tok in m {
            sub.extend_from_slice(tokens.features.row(tok));
        }
        let sub = Tensor::new(vec![np, c], sub)?;
        let kp = k.min(np - 1);
        if kp == 0 {
            return Err(TcfError::Clustering("kNN size must be positive".into()));
        }
        let local = cluster_global(&sub, budgets[p], kp)?;
        for (li, &tok) in m.iter().enumerate() {
            rho[tok] = local.rho[li];
            delta[tok] = local.delta[li];
            score[tok] = local.score[li];
            assignment[tok] = cluster_base + local.assignment[li];
        }
        // Local indices are ascending positions within `m`, which is itself
        // ascending in token index, so the global center order per part is
        // ascending too.
        centers.extend(local.centers.iter().map(|&li| m[li]));
        dist_ops += local.dist_ops;
        cluster_base += local.num_clusters();
    }
    Ok(ClusterResult {
        rho,
        delta,
        score,
        centers,
        assignment,
        part_label,
        dist_ops,
    })
}

/// Part id per token from the pixel centroid: the stage-1 pixel grid is cut
/// into `side × side` axis-aligned boxes and each token lands in the box
/// containing its centroid (pixel centers at integer + 0.5).
fn part_labels(tokens: &TokenSet, side: usize) -> Vec<usize> {
    let n = tokens.len();
    if side == 1 {
        return vec![0; n];
    }
    let (h0, w0) = (tokens.map_h, tokens.map_w);
    let mut sum_y = vec![0u64; n];
    let mut sum_x = vec![0u64; n];
    let mut count = vec![0u64; n];
    for y in 0..h0 {
        for x in 0..w0 {
            let t = tokens.pixel_map[y * w0 + x];
            sum_y[t] += y as u64;
            sum_x[t] += x as u64;
            count[t] += 1;
        }
    }
    (0..n)
        .map(|t| {
            debug_assert!(count[t] > 0, "token {t} owns no pixels");
            let cy = (sum_y[t] as f64 + 0.5 * count[t] as f64) / count[t] as f64;
            let cx = (sum_x[t] as f64 + 0.5 * count[t] as f64) / count[t] as f64;
            let py = ((cy * side as f64 / h0 as f64) as usize).min(side - 1);
            let px = ((cx * side as f64 / w0 as f64) as usize).min(side - 1);
            py * side + px
        })
        .collect()
}
