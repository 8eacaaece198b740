//! Pairwise similarity matrices, their fusion across arrays, and
//! average-linkage agglomerative clustering.

use ndarray::Array2;

use super::plda::PldaModel;
use crate::error::{Error, Result};
use crate::sad::Fusion;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    scores: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn new(scores: Array2<f64>) -> Result<Self> {
        let n = scores.nrows();
        if scores.ncols() != n {
            return Err(Error::shape("similarity matrix must be square"));
        }
        if scores.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("similarity matrix"));
        }
        let scale = scores.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        for i in 0..n {
            for j in i + 1..n {
                if (scores[[i, j]] - scores[[j, i]]).abs() > 1e-9 * scale {
                    return Err(Error::invalid("similarity matrix must be symmetric"));
                }
            }
        }
        Ok(Self { scores })
    }

    pub fn len(&self) -> usize {
        self.scores.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[[i, j]]
    }

    /// Applies `f` to every entry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.scores.mapv(f))
    }
}

/// PLDA log-likelihood ratios between all pairs of embeddings.
pub fn plda_score_matrix(model: &PldaModel, embeddings: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    let projected = embeddings
        .iter()
        .map(|e| model.project(e))
        .collect::<Result<Vec<_>>>()?;
    let n = projected.len();
    let mut scores = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let s = model.score_projected(&projected[i], &projected[j]);
            scores[[i, j]] = s;
            scores[[j, i]] = s;
        }
    }
    SimilarityMatrix::new(scores)
}

/// Element-wise maximum or mean of per-array similarity matrices.
pub fn fuse_plda_scores(
    per_array: &[SimilarityMatrix],
    criterion: Fusion,
) -> Result<SimilarityMatrix> {
    let first = per_array
        .first()
        .ok_or(Error::Empty("similarity matrices"))?;
    if per_array.iter().any(|m| m.len() != first.len()) {
        return Err(Error::shape("similarity matrices differ in size"));
    }
    let mut out = first.scores.clone();
    for m in &per_array[1..] {
        match criterion {
            Fusion::Max => out.zip_mut_with(&m.scores, |a, &b| *a = a.max(b)),
            Fusion::Mean => out += &m.scores,
        }
    }
    if criterion == Fusion::Mean {
        out /= per_array.len() as f64;
    }
    SimilarityMatrix::new(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AhcStop {
    /// Stop once the best linkage falls below this value.
    Threshold(f64),
    /// Stop once this many clusters remain.
    NumClusters(usize),
}

/// Average-linkage clustering that merges the most similar pair first.
///
/// Ties go to the lexicographically lowest pair of cluster indices. Labels
/// are 0-based and numbered by first appearance.
pub fn ahc_cluster(sim: &SimilarityMatrix, stop: AhcStop) -> Vec<usize> {
    let n = sim.len();
    let mut s = sim.scores.clone();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    let mut best: Vec<(f64, usize)> = vec![(f64::NEG_INFINITY, usize::MAX); n];

    let row_best = |s: &Array2<f64>, active: &[bool], i: usize| {
        let mut b = (f64::NEG_INFINITY, usize::MAX);
        for j in (0..n).filter(|&j| j != i && active[j]) {
            if s[[i, j]] > b.0 {
                b = (s[[i, j]], j);
            }
        }
        b
    };
    for i in 0..n {
        best[i] = row_best(&s, &active, i);
    }

    let mut clusters = n;
    loop {
        if let AhcStop::NumClusters(k) = stop {
            if clusters <= k.max(1) {
                break;
            }
        }
        let mut pick: Option<(usize, usize, f64)> = None;
        for i in (0..n).filter(|&i| active[i]) {
            let (v, j) = best[i];
            if j != usize::MAX && pick.is_none_or(|(_, _, pv)| v > pv) {
                pick = Some((i, j, v));
            }
        }
        let Some((i, j, value)) = pick else { break };
        if let AhcStop::Threshold(t) = stop {
            if value < t {
                break;
            }
        }
        let (keep, gone) = (i.min(j), i.max(j));
        let (nk, ng) = (size[keep] as f64, size[gone] as f64);
        for k in (0..n).filter(|&k| active[k] && k != keep && k != gone) {
            let v = (nk * s[[keep, k]] + ng * s[[gone, k]]) / (nk + ng);
            s[[keep, k]] = v;
            s[[k, keep]] = v;
        }
        size[keep] += size[gone];
        active[gone] = false;
        for o in owner.iter_mut().filter(|o| **o == gone) {
            *o = keep;
        }
        clusters -= 1;

        best[keep] = row_best(&s, &active, keep);
        for k in (0..n).filter(|&k| active[k] && k != keep) {
            let (bv, bj) = best[k];
            if bj == keep || bj == gone {
                best[k] = row_best(&s, &active, k);
            } else {
                let v = s[[k, keep]];
                if v > bv || (v == bv && keep < bj) {
                    best[k] = (v, keep);
                }
            }
        }
    }

    let mut relabel = vec![usize::MAX; n];
    let mut next = 0;
    owner
        .iter()
        .map(|&o| {
            if relabel[o] == usize::MAX {
                relabel[o] = next;
                next += 1;
            }
            relabel[o]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn block(sizes: &[usize], within: f64, across: f64) -> SimilarityMatrix {
        let n: usize = sizes.iter().sum();
        let mut group = Vec::new();
        for (g, &s) in sizes.iter().enumerate() {
            group.extend(std::iter::repeat_n(g, s));
        }
        SimilarityMatrix::new(Array2::from_shape_fn((n, n), |(i, j)| {
            if group[i] == group[j] {
                within
            } else {
                across
            }
        }))
        .unwrap()
    }

    #[test]
    fn single_item() {
        let m = SimilarityMatrix::new(array![[0.0]]).unwrap();
        assert_eq!(ahc_cluster(&m, AhcStop::Threshold(0.0)), vec![0]);
        assert_eq!(ahc_cluster(&m, AhcStop::NumClusters(3)), vec![0]);
    }

    #[test]
    fn threshold_recovers_blocks() {
        let m = block(&[3, 2, 4], 10.0, -10.0);
        assert_eq!(
            ahc_cluster(&m, AhcStop::Threshold(0.0)),
            vec![0, 0, 0, 1, 1, 2, 2, 2, 2]
        );
    }

    #[test]
    fn cluster_count_extremes() {
        let m = block(&[3, 3], 1.0, 0.0);
        assert_eq!(
            ahc_cluster(&m, AhcStop::NumClusters(6)),
            vec![0, 1, 2, 3, 4, 5]
        );
        assert_eq!(ahc_cluster(&m, AhcStop::NumClusters(1)), vec![0; 6]);
    }

    #[test]
    fn max_fusion_example() {
        let a = SimilarityMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let b = SimilarityMatrix::new(array![[0.0, 3.0], [3.0, 0.0]]).unwrap();
        let f = fuse_plda_scores(&[a.clone(), b], Fusion::Max).unwrap();
        assert_eq!(f.scores(), &array![[0.0, 3.0], [3.0, 0.0]]);
        assert_eq!(
            fuse_plda_scores(&[a.clone(), a.clone()], Fusion::Max).unwrap(),
            a
        );
        assert_eq!(
            fuse_plda_scores(&[a.clone(), a.clone()], Fusion::Mean).unwrap(),
            a
        );
    }

    #[test]
    fn fusion_errors() {
        assert!(fuse_plda_scores(&[], Fusion::Max).is_err());
        let a = SimilarityMatrix::new(array![[0.0]]).unwrap();
        let b = SimilarityMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert!(fuse_plda_scores(&[a, b], Fusion::Max).is_err());
    }

    #[test]
    fn rejects_asymmetric() {
        assert!(SimilarityMatrix::new(array![[0.0, 1.0], [2.0, 0.0]]).is_err());
    }

    fn random_sym(n: usize, values: &[f64]) -> SimilarityMatrix {
        let mut m = Array2::zeros((n, n));
        let mut it = values.iter().cycle();
        for i in 0..n {
            for j in i..n {
                let v = *it.next().unwrap();
                m[[i, j]] = v;
                m[[j, i]] = v;
            }
        }
        SimilarityMatrix::new(m).unwrap()
    }

    /// Naive average linkage recomputing every cluster pair from scratch.
    fn naive(sim: &SimilarityMatrix, k: usize) -> Vec<usize> {
        let n = sim.len();
        let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        while clusters.len() > k {
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for a in 0..clusters.len() {
                for b in a + 1..clusters.len() {
                    let mut tot = 0.0;
                    for &x in &clusters[a] {
                        for &y in &clusters[b] {
                            tot += sim.get(x, y);
                        }
                    }
                    let avg = tot / (clusters[a].len() * clusters[b].len()) as f64;
                    if avg > best.0 {
                        best = (avg, a, b);
                    }
                }
            }
            let merged = clusters.remove(best.2);
            clusters[best.1].extend(merged);
        }
        let mut labels = vec![0; n];
        for c in &clusters {
            for &x in c {
                labels[x] = *c.iter().min().unwrap();
            }
        }
        let mut relabel = std::collections::HashMap::new();
        labels
            .iter()
            .map(|l| {
                let next = relabel.len();
                *relabel.entry(*l).or_insert(next)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn fused_max_dominates(n in 1usize..6, a in prop::collection::vec(-5.0f64..5.0, 21), b in prop::collection::vec(-5.0f64..5.0, 21)) {
            let (ma, mb) = (random_sym(n, &a), random_sym(n, &b));
            let f = fuse_plda_scores(&[ma.clone(), mb.clone()], Fusion::Max).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert!(f.get(i, j) >= ma.get(i, j) && f.get(i, j) >= mb.get(i, j));
                }
            }
        }

        #[test]
        fn matches_naive_average_linkage(n in 2usize..9, k in 1usize..5, v in prop::collection::vec(-5.0f64..5.0, 45)) {
            let m = random_sym(n, &v);
            prop_assert_eq!(ahc_cluster(&m, AhcStop::NumClusters(k)), naive(&m, k));
        }

        #[test]
        fn invariant_to_positive_affine_maps(n in 2usize..9, k in 1usize..5, scale in 0.1f64..10.0, shift in -5.0f64..5.0, v in prop::collection::vec(-5.0f64..5.0, 45)) {
            let m = random_sym(n, &v);
            let t = m.map(|x| scale * x + shift).unwrap();
            prop_assert_eq!(ahc_cluster(&m, AhcStop::NumClusters(k)), ahc_cluster(&t, AhcStop::NumClusters(k)));
        }
    }
}
