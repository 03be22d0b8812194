//! Inverted-file index with flat (exact) scoring of probed candidates.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::squared_distance;

/// Coarse quantizer plus inverted lists of record ids.
///
/// With no centroids the index is a single flat list. Records inserted after
/// a build are appended to the list of their nearest existing centroid.
#[derive(Clone, Debug)]
pub struct IvfIndex {
    centroids: Vec<Vec<f64>>,
    lists: Vec<Vec<u64>>,
    assignment: BTreeMap<u64, usize>,
}

impl Default for IvfIndex {
    fn default() -> Self {
        Self::flat()
    }
}

impl IvfIndex {
    pub fn flat() -> Self {
        Self {
            centroids: Vec::new(),
            lists: vec![Vec::new()],
            assignment: BTreeMap::new(),
        }
    }

    /// Seeded Lloyd k-means into `min(n, nlist)` lists.
    pub fn build<'a, I>(records: I, nlist: usize, max_iters: usize, seed: u64) -> Self
    where
        I: IntoIterator<Item = (u64, &'a [f64])>,
    {
        let (ids, vecs): (Vec<u64>, Vec<&[f64]>) = records.into_iter().unzip();
        let n = vecs.len();
        let k = nlist.max(1).min(n);
        if k == 0 {
            return Self::flat();
        }
        let dim = vecs[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids: Vec<Vec<f64>> = rand::seq::index::sample(&mut rng, n, k)
            .into_iter()
            .map(|i| vecs[i].to_vec())
            .collect();
        let mut labels = vec![usize::MAX; n];
        for _ in 0..max_iters.max(1) {
            let mut changed = false;
            for (label, v) in labels.iter_mut().zip(&vecs) {
                let best = nearest(&centroids, v);
                if *label != best {
                    *label = best;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (&label, v) in labels.iter().zip(&vecs) {
                counts[label] += 1;
                sums[label]
                    .iter_mut()
                    .zip(v.iter())
                    .for_each(|(s, x)| *s += x);
            }
            for ((c, s), &cnt) in centroids.iter_mut().zip(sums).zip(&counts) {
                // an emptied list keeps its previous centroid
                if cnt > 0 {
                    *c = s.into_iter().map(|x| x / cnt as f64).collect();
                }
            }
        }
        let mut index = Self {
            centroids,
            lists: vec![Vec::new(); k],
            assignment: BTreeMap::new(),
        };
        for (id, v) in ids.into_iter().zip(vecs) {
            index.add(id, v);
        }
        index
    }

    pub fn add(&mut self, id: u64, vec: &[f64]) {
        let list = if self.centroids.is_empty() {
            0
        } else {
            nearest(&self.centroids, vec)
        };
        self.lists[list].push(id);
        self.assignment.insert(id, list);
    }

    pub fn remove(&mut self, id: u64) {
        if let Some(list) = self.assignment.remove(&id) {
            self.lists[list].retain(|&x| x != id);
        }
    }

    /// Ids from the nearest lists, probing until at least `min_candidates`
    /// are collected or every list is exhausted.
    pub fn candidates(&self, query: &[f64], min_candidates: usize) -> Vec<u64> {
        if self.centroids.is_empty() {
            return self.lists[0].clone();
        }
        let mut order: Vec<(f64, usize)> = self
            .centroids
            .iter()
            .enumerate()
            .map(|(i, c)| (squared_distance(c, query), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut out = Vec::new();
        for (_, list) in order {
            out.extend_from_slice(&self.lists[list]);
            if out.len() >= min_candidates {
                break;
            }
        }
        out
    }

    pub fn nlist(&self) -> usize {
        self.lists.len()
    }

    pub fn list_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(Vec::len).collect()
    }

    pub fn list_of(&self, id: u64) -> Option<usize> {
        self.assignment.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(c, v);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_unit;

    fn points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| random_unit(&mut rng, dim)).collect()
    }

    #[test]
    fn single_record_single_list() {
        let p = points(1, 8, 0);
        let idx = IvfIndex::build([(7u64, p[0].as_slice())], 128, 10, 0);
        assert_eq!(idx.nlist(), 1);
        assert_eq!(idx.list_of(7), Some(0));
    }

    #[test]
    fn every_record_in_exactly_one_list() {
        let p = points(500, 16, 1);
        let idx = IvfIndex::build(
            p.iter().enumerate().map(|(i, v)| (i as u64, v.as_slice())),
            32,
            20,
            3,
        );
        assert_eq!(idx.nlist(), 32);
        assert_eq!(idx.list_sizes().iter().sum::<usize>(), 500);
        let mut seen = vec![0; 500];
        for list in &idx.lists {
            for &id in list {
                seen[id as usize] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn remove_drops_from_list() {
        let p = points(20, 8, 2);
        let mut idx = IvfIndex::build(
            p.iter().enumerate().map(|(i, v)| (i as u64, v.as_slice())),
            4,
            10,
            0,
        );
        idx.remove(3);
        assert_eq!(idx.len(), 19);
        assert_eq!(idx.list_sizes().iter().sum::<usize>(), 19);
        assert_eq!(idx.list_of(3), None);
    }

    #[test]
    fn probing_collects_minimum() {
        let p = points(1000, 16, 4);
        let idx = IvfIndex::build(
            p.iter().enumerate().map(|(i, v)| (i as u64, v.as_slice())),
            128,
            20,
            0,
        );
        for q in points(20, 16, 5) {
            assert!(idx.candidates(&q, 10).len() >= 10);
            assert_eq!(idx.candidates(&q, 5000).len(), 1000);
        }
    }
}
