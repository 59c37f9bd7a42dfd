//! Class-wise confident memory.
//!
//! Each class keeps its most confident past inputs. Raw inputs are stored
//! (not embeddings) so memory batches are re-encoded with the current
//! encoder parameters.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub x_raw: Vec<f64>,
    pub confidence: f64,
    /// Step counter at insertion.
    pub age: u64,
}

/// Buckets are kept sorted by descending confidence; among equal
/// confidences the newer entry comes first, so the last entry is always
/// the next eviction candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    per_class: Vec<Vec<MemoryEntry>>,
    capacity_per_class: usize,
    total_capacity: usize,
}

impl MemoryState {
    pub fn new(n_classes: usize, capacity_per_class: usize) -> Self {
        Self {
            per_class: vec![Vec::new(); n_classes],
            capacity_per_class,
            total_capacity: capacity_per_class * n_classes,
        }
    }

    /// Sized so the whole memory holds about one batch:
    /// `ceil(batch_size / C)` entries per class.
    pub fn for_batch_size(n_classes: usize, batch_size: usize) -> Self {
        Self::new(n_classes, batch_size.div_ceil(n_classes).max(1))
    }

    pub fn capacity_per_class(&self) -> usize {
        self.capacity_per_class
    }

    pub fn total_capacity(&self) -> usize {
        self.total_capacity
    }

    pub fn len(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bucket(&self, class: usize) -> &[MemoryEntry] {
        &self.per_class[class]
    }

    pub fn n_classes(&self) -> usize {
        self.per_class.len()
    }

    /// Offers a sample to its class bucket. Returns whether it was stored.
    pub fn insert(&mut self, x_raw: Vec<f64>, pseudo_class: usize, confidence: f64, step: u64) -> Result<bool> {
        if pseudo_class >= self.per_class.len() {
            return Err(Error::ClassIndex { index: pseudo_class, classes: self.per_class.len() });
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Invalid(format!("confidence {confidence} outside [0, 1]")));
        }
        let cap = self.capacity_per_class;
        let bucket = &self.per_class[pseudo_class];
        if bucket.len() >= cap {
            let min = bucket.last().map_or(f64::NEG_INFINITY, |e| e.confidence);
            if confidence <= min {
                return Ok(false);
            }
            self.per_class[pseudo_class].pop();
        }
        let bucket = &mut self.per_class[pseudo_class];
        let pos = bucket.partition_point(|e| e.confidence > confidence);
        bucket.insert(pos, MemoryEntry { x_raw, confidence, age: step });
        Ok(true)
    }

    /// Like [`insert`](Self::insert), but refuses samples the open-set
    /// filter regards as OOD (`w ≤ 0.5`).
    pub fn insert_filtered(
        &mut self,
        x_raw: Vec<f64>,
        pseudo_class: usize,
        confidence: f64,
        step: u64,
        id_weight: f64,
    ) -> Result<bool> {
        if id_weight <= 0.5 {
            return Err(Error::Invalid(format!("sample with outlierness weight {id_weight} offered to memory")));
        }
        self.insert(x_raw, pseudo_class, confidence, step)
    }

    /// All stored inputs, ordered by class then descending confidence.
    pub fn entries(&self) -> impl Iterator<Item = (usize, &MemoryEntry)> {
        self.per_class.iter().enumerate().flat_map(|(c, b)| b.iter().map(move |e| (c, e)))
    }

    /// `n` stored inputs sampled without replacement, or `None` while fewer
    /// than `n` are stored.
    pub fn batch(&self, n: usize, rng: &mut Rng) -> Option<Matrix> {
        let total = self.len();
        if n == 0 || total < n {
            return None;
        }
        let rows: Vec<&[f64]> = self.entries().map(|(_, e)| e.x_raw.as_slice()).collect();
        let mut pick = if total == n { (0..n).collect() } else { rng.sample_without_replacement(total, n) };
        pick.sort_unstable();
        let chosen: Vec<&[f64]> = pick.iter().map(|&i| rows[i]).collect();
        Matrix::from_rows(&chosen).ok()
    }

    /// Debug dump: `class,rank,confidence,age,x0..`.
    pub fn to_csv(&self) -> String {
        let d = self.entries().next().map_or(0, |(_, e)| e.x_raw.len());
        let mut out = String::from("class,rank,confidence,age");
        for j in 0..d {
            out.push_str(&format!(",x{j}"));
        }
        out.push('\n');
        for (c, bucket) in self.per_class.iter().enumerate() {
            for (rank, e) in bucket.iter().enumerate() {
                out.push_str(&format!("{c},{rank},{},{}", e.confidence, e.age));
                for v in &e.x_raw {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

pub fn memory_insert(
    state: &mut MemoryState,
    x_raw: Vec<f64>,
    pseudo_class: usize,
    confidence: f64,
    step: u64,
) -> Result<bool> {
    state.insert(x_raw, pseudo_class, confidence, step)
}

pub fn memory_batch(state: &MemoryState, n: usize, rng: &mut Rng) -> Option<Matrix> {
    state.batch(n, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    #[test]
    fn empty_bucket_stores() {
        let mut m = MemoryState::new(3, 2);
        assert!(m.insert(vec![1.0], 1, 0.4, 0).unwrap());
        assert_eq!(m.len(), 1);
        assert_eq!(m.bucket(1)[0].confidence, 0.4);
    }

    #[test]
    fn full_bucket_rejects_low_confidence() {
        let mut m = MemoryState::new(2, 2);
        m.insert(vec![1.0], 0, 0.9, 0).unwrap();
        m.insert(vec![2.0], 0, 0.8, 1).unwrap();
        let before = m.clone();
        assert!(!m.insert(vec![3.0], 0, 0.7, 2).unwrap());
        assert!(!m.insert(vec![3.0], 0, 0.8, 2).unwrap());
        assert_eq!(m, before);
    }

    #[test]
    fn eviction_prefers_older_on_ties() {
        let mut m = MemoryState::new(2, 2);
        m.insert(vec![1.0], 0, 0.5, 0).unwrap();
        m.insert(vec![2.0], 0, 0.5, 1).unwrap();
        m.insert(vec![3.0], 0, 0.9, 2).unwrap();
        let kept: Vec<u64> = m.bucket(0).iter().map(|e| e.age).collect();
        assert_eq!(kept, vec![2, 1]);
    }

    #[test]
    fn invalid_class_is_an_error() {
        let mut m = MemoryState::new(2, 2);
        assert_eq!(m.insert(vec![0.0], 2, 0.5, 0), Err(Error::ClassIndex { index: 2, classes: 2 }));
        assert!(m.insert(vec![0.0], 0, 1.5, 0).is_err());
        assert!(m.insert_filtered(vec![0.0], 0, 0.9, 0, 0.5).is_err());
        assert!(m.insert_filtered(vec![0.0], 0, 0.9, 0, 0.51).unwrap());
    }

    #[test]
    fn five_inserts_keep_top_three() {
        let mut m = MemoryState::new(2, 3);
        let conf = [0.3, 0.9, 0.1, 0.6, 0.75];
        for (i, &c) in conf.iter().enumerate() {
            m.insert(vec![i as f64], 0, c, i as u64).unwrap();
        }
        let mut expect = conf.to_vec();
        expect.sort_by(|a, b| b.partial_cmp(a).unwrap());
        expect.truncate(3);
        let got: Vec<f64> = m.bucket(0).iter().map(|e| e.confidence).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn batch_examples() {
        let mut rng = Rng::new(1);
        let mut m = MemoryState::for_batch_size(2, 4);
        assert_eq!(m.capacity_per_class(), 2);
        assert!(m.batch(2, &mut rng).is_none());
        m.insert(vec![1.0, 1.0], 1, 0.5, 0).unwrap();
        m.insert(vec![2.0, 2.0], 0, 0.6, 0).unwrap();
        let b = m.batch(2, &mut rng).unwrap();
        assert_eq!(b.row(0), &[2.0, 2.0]);
        assert_eq!(b.row(1), &[1.0, 1.0]);

        m.insert(vec![3.0, 3.0], 0, 0.7, 1).unwrap();
        m.insert(vec![4.0, 4.0], 1, 0.8, 1).unwrap();
        let a = m.batch(2, &mut Rng::new(9)).unwrap();
        let c = m.batch(2, &mut Rng::new(9)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn csv_dump_has_one_row_per_entry() {
        let mut m = MemoryState::new(2, 2);
        m.insert(vec![1.5, 2.5], 1, 0.5, 3).unwrap();
        assert_eq!(m.to_csv(), "class,rank,confidence,age,x0,x1\n1,0,0.5,3,1.5,2.5\n");
    }

    proptest! {
        #[test]
        fn retention_matches_brute_force_top_k(
            items in proptest::collection::vec((0usize..3, 0u32..1_000_000), 1..40),
            cap in 1usize..5,
            seed in 0u64..1000,
        ) {
            // distinct confidences
            let mut seen = std::collections::HashSet::new();
            let items: Vec<(usize, f64)> = items
                .into_iter()
                .filter(|(_, c)| seen.insert(*c))
                .map(|(k, c)| (k, f64::from(c) / 1e6))
                .collect();
            let mut shuffled = items.clone();
            let mut rng = Rng::new(seed);
            for i in (1..shuffled.len()).rev() {
                let j = rng.index(i + 1);
                shuffled.swap(i, j);
            }
            for order in [&items, &shuffled] {
                let mut m = MemoryState::new(3, cap);
                for (step, &(k, c)) in order.iter().enumerate() {
                    m.insert(vec![c], k, c, step as u64).unwrap();
                }
                prop_assert!(m.len() <= m.total_capacity());
                for k in 0..3 {
                    let mut expect: Vec<f64> = items.iter().filter(|(kk, _)| *kk == k).map(|(_, c)| *c).collect();
                    expect.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    expect.truncate(cap);
                    let got: Vec<f64> = m.bucket(k).iter().map(|e| e.confidence).collect();
                    prop_assert_eq!(got, expect);
                }
            }
        }
    }
}
