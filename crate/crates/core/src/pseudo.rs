//! Pseudo-caption assignment and batch composition counts.

use crate::model::{ClassPrototypes, ProbMatrix};
use crate::numerics::Matrix;

/// Argmax pseudo-labels with the per-class counts `N_k` and the caption
/// (prototype) row of every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSummary {
    pub assigned: Vec<usize>,
    pub counts: Vec<usize>,
    pub caption_rows: Matrix,
}

impl PseudoLabelSummary {
    /// Builds the summary from explicit labels.
    pub fn from_labels(assigned: Vec<usize>, protos: &ClassPrototypes) -> Self {
        let mut counts = vec![0; protos.n_classes()];
        let mut caption_rows = Matrix::zeros(assigned.len(), protos.dim());
        for (i, &c) in assigned.iter().enumerate() {
            counts[c] += 1;
            caption_rows.row_mut(i).copy_from_slice(protos.row(c));
        }
        Self { assigned, counts, caption_rows }
    }

    pub fn len(&self) -> usize {
        self.assigned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assigned.is_empty()
    }

    /// Restricts the summary to a subset of samples, recounting.
    pub fn select(&self, idx: &[usize], protos: &ClassPrototypes) -> Self {
        Self::from_labels(idx.iter().map(|&i| self.assigned[i]).collect(), protos)
    }
}

/// Assigns each sample the caption of its most probable class. Ties go to
/// the lowest class index.
pub fn assign_pseudo_captions(q: &ProbMatrix, protos: &ClassPrototypes) -> PseudoLabelSummary {
    PseudoLabelSummary::from_labels(q.argmax(), protos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn protos(c: usize, seed: u64) -> ClassPrototypes {
        ClassPrototypes::from_raw(&Rng::new(seed).normal_matrix(c, 4)).unwrap()
    }

    fn random_q(n: usize, c: usize, seed: u64) -> ProbMatrix {
        let mut rng = Rng::new(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| rng.uniform() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        ProbMatrix::new(Matrix::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn one_hot_rows_fill_one_count() {
        let p = protos(4, 1);
        let rows = vec![vec![0.0, 0.0, 1.0, 0.0]; 6];
        let q = ProbMatrix::new(Matrix::from_rows(&rows).unwrap()).unwrap();
        let s = assign_pseudo_captions(&q, &p);
        assert_eq!(s.counts, vec![0, 0, 6, 0]);
        for i in 0..6 {
            assert_eq!(s.caption_rows.row(i), p.row(2));
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let p = protos(3, 2);
        let q = ProbMatrix::new(Matrix::from_rows(&[[0.2, 0.4, 0.4], [0.5, 0.5, 0.0]]).unwrap()).unwrap();
        assert_eq!(assign_pseudo_captions(&q, &p).assigned, vec![1, 0]);
    }

    #[test]
    fn matches_brute_force_recount() {
        let p = protos(3, 3);
        let q = random_q(5, 3, 4);
        let s = assign_pseudo_captions(&q, &p);
        let mut counts = [0usize; 3];
        for i in 0..5 {
            let row = q.row(i);
            let mut best = 0;
            for c in 0..3 {
                if row[c] > row[best] {
                    best = c;
                }
            }
            assert_eq!(s.assigned[i], best);
            counts[best] += 1;
        }
        assert_eq!(s.counts, counts.to_vec());
        assert_eq!(s.counts.iter().sum::<usize>(), 5);
    }

    proptest! {
        #[test]
        fn permutation_permutes_assignment(seed in 0u64..500, n in 2usize..12) {
            let p = protos(4, seed + 1);
            let q = random_q(n, 4, seed);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            let a = assign_pseudo_captions(&q, &p);
            let b = assign_pseudo_captions(&q.select(&perm), &p);
            prop_assert_eq!(&a.counts, &b.counts);
            for (i, &pi) in perm.iter().enumerate() {
                prop_assert_eq!(b.assigned[i], a.assigned[pi]);
            }
            let mut distinct: Vec<&[f64]> = a.caption_rows.row_iter().collect();
            distinct.sort_by(|x, y| x.partial_cmp(y).unwrap());
            distinct.dedup();
            prop_assert!(distinct.len() <= 4);
        }
    }
}
