//! Per-AU F1 and subject-independent splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts for one AU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// `2TP / (2TP + FP + FN)`, and 0 when the denominator vanishes.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Per-AU confusion counts over rows of binary predictions and labels.
pub fn confusion(predictions: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<Vec<Confusion>> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} prediction rows vs {} label rows",
            predictions.len(),
            labels.len()
        )));
    }
    let n = labels.first().map_or(0, Vec::len);
    let mut out = vec![Confusion::default(); n];
    for (p, l) in predictions.iter().zip(labels) {
        if p.len() != n || l.len() != n {
            return Err(Error::Shape("ragged prediction/label rows".into()));
        }
        for ((c, &pv), &lv) in out.iter_mut().zip(p).zip(l) {
            match (pv != 0, lv != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub per_au: Vec<f64>,
    pub avg: f64,
}

impl F1Scores {
    pub fn from_confusion(counts: &[Confusion]) -> F1Scores {
        let per_au: Vec<f64> = counts.iter().map(Confusion::f1).collect();
        let avg = if per_au.is_empty() {
            0.0
        } else {
            per_au.iter().sum::<f64>() / per_au.len() as f64
        };
        F1Scores { per_au, avg }
    }
}

pub fn f1_scores(predictions: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<F1Scores> {
    Ok(F1Scores::from_confusion(&confusion(predictions, labels)?))
}

/// Binarizes probabilities with the inclusive `>= threshold` rule.
pub fn binarize(probs: &[f32], threshold: f32) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= threshold)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub per_au_f1: Vec<f64>,
    pub avg_f1: f64,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Partitions subjects into `k` disjoint test folds of near-equal size.
pub fn make_folds(subjects: &[String], k: usize, seed: u64) -> Result<Vec<SubjectSplit>> {
    let mut unique = subjects.to_vec();
    unique.sort();
    unique.dedup();
    if k == 0 || unique.len() < k {
        return Err(Error::Data(format!(
            "{} subjects cannot fill {k} folds",
            unique.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let base = unique.len() / k;
    let extra = unique.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(unique[start..start + len].to_vec());
        start += len;
    }
    Ok((0..k)
        .map(|f| {
            let mut test = folds[f].clone();
            test.sort();
            let mut train: Vec<String> = folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, s)| s.iter().cloned())
                .collect();
            train.sort();
            SubjectSplit { train, test }
        })
        .collect())
}

/// Nested random subject subsets, one per requested count.
pub fn limited_label_schedule(subjects: &[String], counts: &[usize], seed: u64) -> Result<Vec<Vec<String>>> {
    let mut unique = subjects.to_vec();
    unique.sort();
    unique.dedup();
    if let Some(&c) = counts.iter().find(|&&c| c > unique.len()) {
        return Err(Error::Data(format!(
            "requested {c} labeled subjects but only {} are available",
            unique.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    Ok(counts
        .iter()
        .map(|&c| {
            let mut s = unique[..c].to_vec();
            s.sort();
            s
        })
        .collect())
}

pub const LIMITED_LABEL_COUNTS: [usize; 5] = [3, 9, 15, 21, 27];

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn subjects(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("SN{i:03}")).collect()
    }

    #[test]
    fn perfect_predictions() {
        let l = vec![vec![1, 0, 1], vec![0, 1, 1]];
        let s = f1_scores(&l, &l).unwrap();
        assert_eq!(s.per_au, vec![1.0, 1.0, 1.0]);
        assert_eq!(s.avg, 1.0);
    }

    #[test]
    fn formula_arithmetic() {
        // TP=2, FP=1, FN=1 in one AU column
        let p = vec![vec![1], vec![1], vec![1], vec![0], vec![0]];
        let l = vec![vec![1], vec![1], vec![0], vec![1], vec![0]];
        let s = f1_scores(&p, &l).unwrap();
        assert!((s.per_au[0] - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn zero_denominator_is_zero() {
        let z = vec![vec![0, 0]; 4];
        assert_eq!(f1_scores(&z, &z).unwrap().per_au, vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch() {
        assert!(f1_scores(&[vec![1]], &[vec![1], vec![0]]).is_err());
        assert!(f1_scores(&[vec![1, 0]], &[vec![1]]).is_err());
    }

    #[test]
    fn inclusive_threshold() {
        assert_eq!(binarize(&[0.7, 0.5, 0.49], 0.5), vec![1, 1, 0]);
    }

    #[test]
    fn folds_partition_subjects() {
        let s = subjects(27);
        let folds = make_folds(&s, 3, 0).unwrap();
        assert_eq!(folds.iter().map(|f| f.test.len()).collect::<Vec<_>>(), vec![9, 9, 9]);
        let mut all = BTreeSet::new();
        for f in &folds {
            assert_eq!(f.train.len(), 18);
            for t in &f.test {
                assert!(!f.train.contains(t));
                assert!(all.insert(t.clone()), "subject in two test folds");
            }
        }
        assert_eq!(all.len(), 27);
        assert_eq!(folds, make_folds(&s, 3, 0).unwrap());
        assert_ne!(folds, make_folds(&s, 3, 1).unwrap());
        let uneven = make_folds(&subjects(41), 3, 2).unwrap();
        assert_eq!(uneven.iter().map(|f| f.test.len()).sum::<usize>(), 41);
        assert!(make_folds(&subjects(2), 3, 0).is_err());
    }

    #[test]
    fn schedule_is_nested() {
        let s = subjects(27);
        let sched = limited_label_schedule(&s, &LIMITED_LABEL_COUNTS, 4).unwrap();
        for w in sched.windows(2) {
            assert!(w[0].iter().all(|x| w[1].contains(x)));
        }
        let mut full = s.clone();
        full.sort();
        assert_eq!(sched[4], full);
        assert_eq!(sched, limited_label_schedule(&s, &LIMITED_LABEL_COUNTS, 4).unwrap());
        assert!(limited_label_schedule(&subjects(20), &LIMITED_LABEL_COUNTS, 4).is_err());
    }
}
