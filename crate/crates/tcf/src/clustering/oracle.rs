//! Brute-force reference clustering used to cross-check the main path.
//!
//! This re-derives density, indicator, center selection and assignment from
//! scratch: a fully materialised distance matrix held as nested vectors and
//! stable full sorts everywhere, sharing no code with `cluster_global`. It
//! follows the same pinned arithmetic (f32 channel-order squared distances,
//! f64 neighbour sums in ascending `(d², index)` order, f32 comparisons), so
//! agreement is expected to be exact.

use crate::clustering::ClusterResult;
use crate::error::{Result, TcfError};
use crate::tensor::Tensor;

pub fn oracle_cluster(features: &Tensor, num_clusters: usize, k: usize) -> Result<ClusterResult> {
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
    if num_clusters == 0 || num_clusters > n {
        return Err(TcfError::Clustering(format!(
            "cluster count {num_clusters} out of range for {n} tokens"
        )));
    }

    let c = features.cols();
    let mut matrix: Vec<Vec<f32>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            let mut acc = 0f32;
            for ch in 0..c {
                let d = features.row(i)[ch] - features.row(j)[ch];
                acc += d * d;
            }
            row.push(acc);
        }
        matrix.push(row);
    }
    let dist_ops = (n * n * c) as u64;

    let mut rho = Vec::with_capacity(n);
    for (i, row) in matrix.iter().enumerate() {
        let mut neighbours: Vec<(f32, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (row[j], j))
            .collect();
        neighbours.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut sum = 0f64;
        for &(d, _) in neighbours.iter().take(k) {
            sum += f64::from(d);
        }
        rho.push((-(sum / k as f64)).exp() as f32);
    }

    let mut delta = Vec::with_capacity(n);
    for i in 0..n {
        let higher: Vec<usize> = (0..n)
            .filter(|&j| j != i && (rho[j] > rho[i] || (rho[j] == rho[i] && j < i)))
            .collect();
        let d2 = if higher.is_empty() {
            let mut all: Vec<f32> = (0..n).filter(|&j| j != i).map(|j| matrix[i][j]).collect();
            all.sort_by(|a, b| a.total_cmp(b));
            *all.last().unwrap()
        } else {
            let mut ds: Vec<f32> = higher.iter().map(|&j| matrix[i][j]).collect();
            ds.sort_by(|a, b| a.total_cmp(b));
            ds[0]
        };
        delta.push(d2.sqrt());
    }

    let score: Vec<f32> = rho.iter().zip(&delta).map(|(&r, &d)| r * d).collect();
    let mut by_score: Vec<usize> = (0..n).collect();
    by_score.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let mut centers: Vec<usize> = by_score[..num_clusters].to_vec();
    centers.sort_unstable();

    let mut assignment = Vec::with_capacity(n);
    for row in &matrix {
        let mut options: Vec<(f32, usize)> = centers
            .iter()
            .enumerate()
            .map(|(cid, &tok)| (row[tok], cid))
            .collect();
        options.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        assignment.push(options[0].1);
    }
    for (cid, &tok) in centers.iter().enumerate() {
        assignment[tok] = cid;
    }

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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_tokens_one_cluster() {
        let f = Tensor::from_rows(&[vec![0.0], vec![5.0]]);
        let r = oracle_cluster(&f, 1, 1).unwrap();
        assert_eq!(r.assignment, vec![0, 0]);
        assert_eq!(r.centers.len(), 1);
    }

    #[test]
    fn all_singletons_identity() {
        let f = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.5], vec![7.0]]);
        let r = oracle_cluster(&f, 4, 1).unwrap();
        assert_eq!(r.centers, vec![0, 1, 2, 3]);
        assert_eq!(r.assignment, vec![0, 1, 2, 3]);
    }
}
