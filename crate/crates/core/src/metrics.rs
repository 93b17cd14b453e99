//! Tie-aware per-label ROC-AUC and the AUC-based Backward-Transfer and
//! Forward-Transfer measures.
//!
//! AUC follows the Mann-Whitney convention: concordant pairs count 1, ties
//! count 0.5. Labels whose test split has no positive or no negative example
//! are undefined and excluded from averages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::LabelMask;

/// Mann-Whitney AUC with midrank tie handling, `O(n log n)`.
///
/// Returns `None` when the labels are all-positive or all-negative.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::shape("empty score vector"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::numeric("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // midranks over tie groups, then the rank-sum form of the U statistic
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                pos_rank_sum += midrank;
            }
        }
        i = j;
    }
    let u = pos_rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(Some(u / (pos as f64 * neg as f64)))
}

/// Per-label AUC over a label space, with undefined cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucTable {
    per_label: Vec<Option<f64>>,
}

impl AucTable {
    pub fn new(per_label: Vec<Option<f64>>) -> Self {
        AucTable { per_label }
    }

    /// Builds the table from score/label matrices, evaluating only labels
    /// active in `defined`; other cells stay undefined, as do degenerate
    /// labels (no positive or no negative test example).
    pub fn from_scores(scores: &Matrix, labels: &Matrix, defined: &LabelMask) -> Result<AucTable> {
        if scores.rows() != labels.rows()
            || scores.cols() != labels.cols()
            || defined.len() != scores.cols()
        {
            return Err(Error::shape("scores, labels and mask disagree in shape"));
        }
        let mut per_label = Vec::with_capacity(scores.cols());
        for l in 0..scores.cols() {
            if !defined.is_active(l) {
                per_label.push(None);
                continue;
            }
            let s: Vec<f64> = (0..scores.rows()).map(|i| scores.get(i, l)).collect();
            let y: Vec<bool> = (0..labels.rows()).map(|i| labels.get(i, l) > 0.5).collect();
            per_label.push(roc_auc(&s, &y)?);
        }
        Ok(AucTable { per_label })
    }

    pub fn per_label(&self) -> &[Option<f64>] {
        &self.per_label
    }

    pub fn len(&self) -> usize {
        self.per_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_label.is_empty()
    }

    /// Arithmetic mean over defined labels; `None` when all are undefined.
    pub fn average(&self) -> Option<f64> {
        let defined: Vec<f64> = self.per_label.iter().flatten().copied().collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }
}

/// Per-label `after - before` on the same (source-domain) label set;
/// undefined propagates.
pub fn backward_transfer(before: &AucTable, after: &AucTable) -> Result<Vec<Option<f64>>> {
    if before.len() != after.len() {
        return Err(Error::config(format!(
            "AUC tables cover different label sets: {} vs {}",
            before.len(),
            after.len()
        )));
    }
    Ok(before
        .per_label()
        .iter()
        .zip(after.per_label())
        .map(|(b, a)| match (b, a) {
            (Some(b), Some(a)) => Some(a - b),
            _ => None,
        })
        .collect())
}

/// Per-label `AUC - 0.5` of the source model on the unseen target test set.
pub fn forward_transfer(on_unseen: &AucTable) -> Vec<Option<f64>> {
    on_unseen
        .per_label()
        .iter()
        .map(|v| v.map(|a| a - 0.5))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

/// Exact order statistics and arithmetic mean over defined values.
/// Values are sorted before summing, so any permutation of the input
/// produces bit-identical output.
pub fn aggregate(values: &[Option<f64>]) -> Result<Aggregate> {
    let mut defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::config("no defined values to aggregate"));
    }
    defined.sort_by(f64::total_cmp);
    let min = defined[0];
    let max = *defined.last().unwrap();
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(Aggregate { min, mean, max })
}

/// Per-label BWT and FWT with their min/mean/max aggregations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub bwt: Vec<Option<f64>>,
    pub fwt: Vec<Option<f64>>,
    pub bwt_aggregate: Aggregate,
    pub fwt_aggregate: Aggregate,
}

impl TransferReport {
    pub fn new(bwt: Vec<Option<f64>>, fwt: Vec<Option<f64>>) -> Result<Self> {
        let bwt_aggregate = aggregate(&bwt)?;
        let fwt_aggregate = aggregate(&fwt)?;
        if bwt_aggregate.mean < bwt_aggregate.min || bwt_aggregate.mean > bwt_aggregate.max {
            return Err(Error::numeric("aggregate mean escaped [min, max]"));
        }
        Ok(TransferReport {
            bwt,
            fwt,
            bwt_aggregate,
            fwt_aggregate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(n^2) pair-counting oracle for the Mann-Whitney AUC.
    fn auc_pairwise(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l)
            .map(|(&s, _)| s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| !l)
            .map(|(&s, _)| s)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut credit = 0.0;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    credit += 1.0;
                } else if p == n {
                    credit += 0.5;
                }
            }
        }
        Some(credit / (pos.len() * neg.len()) as f64)
    }

    #[test]
    fn perfect_separation_is_one() {
        let auc = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(auc, Some(1.0));
    }

    #[test]
    fn all_ties_is_half() {
        let auc = roc_auc(&[0.3, 0.3, 0.3, 0.3], &[true, false, true, false]).unwrap();
        assert_eq!(auc, Some(0.5));
    }

    #[test]
    fn textbook_example_is_three_quarters() {
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(auc, Some(0.75));
    }

    #[test]
    fn degenerate_labels_are_undefined() {
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]).unwrap(), None);
        assert_eq!(roc_auc(&[0.1, 0.2], &[false, false]).unwrap(), None);
    }

    #[test]
    fn nan_score_is_numeric_error() {
        let err = roc_auc(&[f64::NAN, 0.2], &[true, false]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn fast_auc_equals_pairwise_oracle_with_heavy_ties() {
        let mut rng = crate::rng::sub_rng(5, "auc-oracle");
        use rand::Rng;
        for _ in 0..300 {
            let n = rng.gen_range(2..120);
            // coarse grid forces plenty of exact ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..7) as f64) / 7.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let fast = roc_auc(&scores, &labels).unwrap();
            let slow = auc_pairwise(&scores, &labels);
            match (fast, slow) {
                (Some(f), Some(s)) => assert!(
                    (f - s).abs() < 1e-12,
                    "fast {f} != pairwise {s} on n={n}"
                ),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn bwt_of_identical_tables_is_zero() {
        let t = AucTable::new(vec![Some(0.7), None, Some(0.9)]);
        let bwt = backward_transfer(&t, &t).unwrap();
        assert_eq!(bwt, vec![Some(0.0), None, Some(0.0)]);
    }

    #[test]
    fn bwt_reproduces_published_average_arithmetic() {
        // published source-domain averages before/after naive fine-tuning
        let before = AucTable::new(vec![Some(0.8106)]);
        let after = AucTable::new(vec![Some(0.7708)]);
        let bwt = backward_transfer(&before, &after).unwrap();
        assert!((bwt[0].unwrap() - (-0.0398)).abs() < 1e-12);

        let after_ewc = AucTable::new(vec![Some(0.7936)]);
        let bwt = backward_transfer(&before, &after_ewc).unwrap();
        assert!((bwt[0].unwrap() - (-0.0170)).abs() < 1e-12);
    }

    #[test]
    fn bwt_rejects_mismatched_label_sets() {
        let a = AucTable::new(vec![Some(0.5)]);
        let b = AucTable::new(vec![Some(0.5), Some(0.6)]);
        assert!(matches!(backward_transfer(&a, &b).unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn fwt_subtracts_random_baseline() {
        let t = AucTable::new(vec![Some(0.7833), Some(0.5), None]);
        let fwt = forward_transfer(&t);
        assert!((fwt[0].unwrap() - 0.2833).abs() < 1e-12);
        assert_eq!(fwt[1], Some(0.0));
        assert_eq!(fwt[2], None);
    }

    #[test]
    fn constant_scores_give_zero_fwt() {
        let scores = Matrix::from_rows(&[vec![0.5], vec![0.5], vec![0.5], vec![0.5]]).unwrap();
        let labels = Matrix::from_rows(&[vec![1.0], vec![0.0], vec![1.0], vec![0.0]]).unwrap();
        let t = AucTable::from_scores(&scores, &labels, &LabelMask::all_active(1)).unwrap();
        let fwt = forward_transfer(&t);
        assert_eq!(fwt[0], Some(0.0));
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate(&[Some(0.1)]).unwrap();
        assert_eq!((one.min, one.mean, one.max), (0.1, 0.1, 0.1));

        let a = aggregate(&[Some(-0.02), Some(0.0), Some(0.04)]).unwrap();
        assert_eq!(a.min, -0.02);
        assert_eq!(a.max, 0.04);
        assert!((a.mean - 0.02 / 3.0).abs() < 1e-15);
        assert!((a.mean - 0.00667).abs() < 5e-6);

        assert!(matches!(aggregate(&[None, None]).unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn table_average_excludes_undefined() {
        let t = AucTable::new(vec![Some(0.6), None, Some(0.8)]);
        assert!((t.average().unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(AucTable::new(vec![None]).average(), None);
    }

    #[test]
    fn from_scores_flags_degenerate_and_masked_labels() {
        let scores = Matrix::from_rows(&[vec![0.9, 0.1, 0.7], vec![0.2, 0.4, 0.6]]).unwrap();
        let labels = Matrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let defined = LabelMask::new(vec![true, true, false]);
        let t = AucTable::from_scores(&scores, &labels, &defined).unwrap();
        assert_eq!(t.per_label()[0], Some(1.0));
        assert_eq!(t.per_label()[1], None); // all-positive
        assert_eq!(t.per_label()[2], None); // masked out
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn score_label_vectors() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        prop::collection::vec((0u8..=20, any::<bool>()), 2..60).prop_map(|pairs| {
            pairs
                .into_iter()
                .map(|(s, l)| (s as f64 / 20.0, l))
                .unzip()
        })
    }

    proptest! {
        #[test]
        fn auc_invariant_under_strictly_increasing_transforms(
            (scores, labels) in score_label_vectors(),
            a in 0.1f64..5.0,
            b in -2.0f64..2.0,
        ) {
            let base = roc_auc(&scores, &labels).unwrap();
            // x -> exp(a*x) + b*x is strictly increasing for a, b > 0; use |b|
            let mapped: Vec<f64> =
                scores.iter().map(|&s| (a * s).exp() + b.abs() * s).collect();
            let transformed = roc_auc(&mapped, &labels).unwrap();
            match (base, transformed) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }

        #[test]
        fn auc_of_complement_labels_sums_to_one(
            (scores, labels) in score_label_vectors(),
        ) {
            let flipped: Vec<bool> = labels.iter().map(|&l| !l).collect();
            let a = roc_auc(&scores, &labels).unwrap();
            let b = roc_auc(&scores, &flipped).unwrap();
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn aggregate_is_permutation_invariant(
            values in prop::collection::vec(-1.0f64..1.0, 1..20),
            seed in any::<u64>(),
        ) {
            let opts: Vec<Option<f64>> = values.iter().copied().map(Some).collect();
            let base = aggregate(&opts).unwrap();
            let mut shuffled = opts.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut crate::rng::sub_rng(seed, "agg"));
            let after = aggregate(&shuffled).unwrap();
            prop_assert_eq!(base, after);
        }
    }
}
