//! The three continual-learning mechanisms: fractional joint training,
//! EWC with a binarized empirical Fisher diagonal, and LWF with
//! partial-label soft targets. Each is data preparation plus an extra-loss
//! hook for the training loop. All strategy objects are immutable after
//! construction and safe to share across concurrent runs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, BceTerm, LabelMask, MlpModel};
use crate::optim::{ExtraLoss, TrainSet};
use crate::param::{ParamLayout, ParameterVector};
use crate::rng::sub_rng;

/// Diagonal of the empirical Fisher matrix at the converged source-task
/// parameters: the per-parameter mean of squared per-sample log-likelihood
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal {
    values: ParameterVector,
    sample_count: usize,
}

impl FisherDiagonal {
    pub fn values(&self) -> &ParameterVector {
        &self.values
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }
}

/// Computes the Fisher diagonal over a source training set at the model's
/// current parameters, masked to the source-domain labels. The per-sample
/// log-likelihood gradient is the negative gradient of that sample's mean
/// BCE over active labels; the sign cancels under squaring.
pub fn fisher_diagonal(
    model: &MlpModel,
    source_train: &TrainSet,
    mask: &LabelMask,
) -> Result<FisherDiagonal> {
    if source_train.is_empty() {
        return Err(Error::config("Fisher estimation needs a non-empty dataset"));
    }
    let n = source_train.len();
    let mut acc = ParameterVector::zeros(model.layout());
    for i in 0..n {
        let x = source_train.inputs.gather_rows(&[i]);
        let y = source_train.targets.gather_rows(&[i]);
        let grad = nn::backward(model, &x, &y, mask)?;
        for (a, g) in acc.values_mut().iter_mut().zip(grad.values()) {
            *a += g * g;
        }
    }
    let mut values = acc;
    values.scale(1.0 / n as f64);
    Ok(FisherDiagonal {
        values,
        sample_count: n,
    })
}

/// How the binarization threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Fixed threshold; parameters with `F > rho` are regularized.
    Absolute { rho: f64 },
    /// `rho` is the q-quantile of the Fisher entries (nearest rank), so a
    /// fraction of roughly `1 - q` of the parameters is regularized.
    Quantile { q: f64 },
}

/// Binary precision mask `diag(F > rho)` plus the threshold that was used.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedFisher {
    pub mask: Vec<bool>,
    pub resolved_rho: f64,
}

/// Applies the threshold rule. Comparison is strict: entries equal to `rho`
/// are not selected.
pub fn binarize_fisher(fisher: &FisherDiagonal, rule: ThresholdRule) -> Result<BinarizedFisher> {
    let rho = match rule {
        ThresholdRule::Absolute { rho } => {
            if !rho.is_finite() {
                return Err(Error::config("threshold rho must be finite"));
            }
            rho
        }
        ThresholdRule::Quantile { q } => {
            if !(0.0 < q && q < 1.0) {
                return Err(Error::config("quantile q must lie strictly in (0, 1)"));
            }
            let mut sorted: Vec<f64> = fisher.values.values().to_vec();
            sorted.sort_by(f64::total_cmp);
            let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
            sorted[idx]
        }
    };
    Ok(BinarizedFisher {
        mask: fisher.values.values().iter().map(|&f| f > rho).collect(),
        resolved_rho: rho,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherWeighting {
    /// Uniform shrinkage of the parameters selected by the threshold rule.
    Binarized,
    /// Classic EWC: the penalty is weighted by the Fisher magnitudes.
    Classic,
}

/// Gaussian parameter prior `lambda * sum_p w_p (theta_p - mu_p)^2`.
///
/// For the binarized variant `w` is a 0/1 mask; for the classic variant it
/// holds the raw Fisher magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: ParameterVector,
    precision: Vec<f64>,
    lambda: f64,
    weighting: FisherWeighting,
    resolved_rho: Option<f64>,
}

impl GaussianPrior {
    /// Binarized prior: uniform shrinkage on parameters with `F > rho`.
    pub fn binarized(
        mean: ParameterVector,
        fisher: &FisherDiagonal,
        rule: ThresholdRule,
        lambda: f64,
    ) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::config("lambda must be nonnegative"));
        }
        if mean.len() != fisher.values.len() {
            return Err(Error::shape("mean and Fisher diagonal lengths differ"));
        }
        let binarized = binarize_fisher(fisher, rule)?;
        Ok(GaussianPrior {
            mean,
            precision: binarized.mask.iter().map(|&m| m as u8 as f64).collect(),
            lambda,
            weighting: FisherWeighting::Binarized,
            resolved_rho: Some(binarized.resolved_rho),
        })
    }

    /// Classic magnitude-weighted EWC prior.
    pub fn classic(mean: ParameterVector, fisher: &FisherDiagonal, lambda: f64) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::config("lambda must be nonnegative"));
        }
        if mean.len() != fisher.values.len() {
            return Err(Error::shape("mean and Fisher diagonal lengths differ"));
        }
        Ok(GaussianPrior {
            mean,
            precision: fisher.values.values().to_vec(),
            lambda,
            weighting: FisherWeighting::Classic,
            resolved_rho: None,
        })
    }

    pub fn mean(&self) -> &ParameterVector {
        &self.mean
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn resolved_rho(&self) -> Option<f64> {
        self.resolved_rho
    }

    pub fn weighting(&self) -> FisherWeighting {
        self.weighting
    }

    /// Number of regularized parameters (nonzero precision entries).
    pub fn num_active(&self) -> usize {
        self.precision.iter().filter(|&&w| w != 0.0).count()
    }
}

/// Quadratic anchoring penalty: value `lambda * sum_p w_p (theta_p - mu_p)^2`
/// and gradient `2 lambda w_p (theta_p - mu_p)`.
pub fn ewc_penalty(
    params: &ParameterVector,
    prior: &GaussianPrior,
) -> Result<(f64, ParameterVector)> {
    if params.len() != prior.mean.len() {
        return Err(Error::shape(format!(
            "parameters have {} entries, prior mean {}",
            params.len(),
            prior.mean.len()
        )));
    }
    let mut grad = ParameterVector::zeros(params.layout().clone());
    let mut value = 0.0;
    for (i, ((&theta, &mu), &w)) in params
        .values()
        .iter()
        .zip(prior.mean.values())
        .zip(&prior.precision)
        .enumerate()
    {
        if w != 0.0 {
            let diff = theta - mu;
            value += w * diff * diff;
            grad.values_mut()[i] = 2.0 * prior.lambda * w * diff;
        }
    }
    Ok((prior.lambda * value, grad))
}

impl ExtraLoss for GaussianPrior {
    fn eval(
        &self,
        model: &MlpModel,
        _batch_inputs: &Matrix,
        _batch_sample_ids: &[usize],
    ) -> Result<(f64, ParameterVector)> {
        ewc_penalty(&model.get_parameters(), self)
    }
}

/// Frozen outputs of the previous model on the adaptation set, restricted to
/// the regularized label subset, keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets {
    regularized: LabelMask,
    values: BTreeMap<usize, Vec<f64>>,
}

impl SoftTargets {
    pub fn regularized(&self) -> &LabelMask {
        &self.regularized
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, sample_id: usize) -> Option<&Vec<f64>> {
        self.values.get(&sample_id)
    }

    /// Indices of the regularized labels in union order.
    pub fn regularized_indices(&self) -> Vec<usize> {
        (0..self.regularized.len())
            .filter(|&l| self.regularized.is_active(l))
            .collect()
    }

    /// CSV keyed by sample id, one column per regularized label.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id");
        for l in self.regularized_indices() {
            out.push_str(&format!(",yhat_{l}"));
        }
        out.push('\n');
        for (id, row) in &self.values {
            out.push_str(&id.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the previous model on the adaptation inputs once and freezes the
/// clamped sigmoid outputs for the regularized labels.
pub fn record_soft_targets(
    previous_model: &MlpModel,
    adaptation_set: &TrainSet,
    regularized: &LabelMask,
) -> Result<SoftTargets> {
    if regularized.num_active() == 0 {
        return Err(Error::config("regularized label subset is empty"));
    }
    if regularized.len() != previous_model.output_dim() {
        return Err(Error::shape("regularized mask does not cover the label space"));
    }
    let probs = previous_model.forward(&adaptation_set.inputs)?;
    let indices: Vec<usize> = (0..regularized.len())
        .filter(|&l| regularized.is_active(l))
        .collect();
    let mut values = BTreeMap::new();
    for (row, &id) in adaptation_set.sample_ids.iter().enumerate() {
        let yhat: Vec<f64> = indices.iter().map(|&l| probs.get(row, l)).collect();
        values.insert(id, yhat);
    }
    Ok(SoftTargets {
        regularized: regularized.clone(),
        values,
    })
}

/// Builds the soft-target matrix and the per-cell weight matrix
/// (`lambda / (batch * regularized)` on regularized cells) for a batch.
fn soft_term_matrices(
    soft: &SoftTargets,
    lambda: f64,
    batch_sample_ids: &[usize],
    num_labels: usize,
) -> Result<(Matrix, Matrix)> {
    if soft.regularized.num_active() == 0 {
        return Err(Error::config("regularized label subset is empty"));
    }
    let batch = batch_sample_ids.len();
    let indices = soft.regularized_indices();
    let cells = (batch * indices.len()) as f64;
    let mut targets = Matrix::zeros(batch, num_labels);
    let mut weights = Matrix::zeros(batch, num_labels);
    for (row, &id) in batch_sample_ids.iter().enumerate() {
        let yhat = soft.get(id).ok_or_else(|| {
            Error::shape(format!("no soft targets recorded for sample {id}"))
        })?;
        for (k, &l) in indices.iter().enumerate() {
            targets.set(row, l, yhat[k]);
            weights.set(row, l, lambda / cells);
        }
    }
    Ok((targets, weights))
}

/// LWF objective: hard masked BCE on the current domain plus
/// `lambda * mean BCE(probabilities, yhat)` over the regularized labels.
pub fn lwf_loss(
    probabilities: &Matrix,
    hard_targets: &Matrix,
    current_mask: &LabelMask,
    soft: &SoftTargets,
    lambda: f64,
    batch_sample_ids: &[usize],
) -> Result<f64> {
    if batch_sample_ids.len() != probabilities.rows() {
        return Err(Error::shape("one sample id per batch row required"));
    }
    let hard = nn::masked_bce(probabilities, hard_targets, current_mask)?;
    let (targets, weights) =
        soft_term_matrices(soft, lambda, batch_sample_ids, probabilities.cols())?;
    let soft_value = nn::weighted_bce_value(
        probabilities,
        &[BceTerm {
            targets: &targets,
            weights: &weights,
        }],
    )?;
    Ok(hard + soft_value)
}

/// Training hook adding the LWF soft-target penalty to each step.
#[derive(Debug, Clone)]
pub struct LwfPenalty {
    soft: SoftTargets,
    lambda: f64,
}

impl LwfPenalty {
    pub fn new(soft: SoftTargets, lambda: f64) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::config("lambda must be nonnegative"));
        }
        if soft.regularized.num_active() == 0 {
            return Err(Error::config("regularized label subset is empty"));
        }
        Ok(LwfPenalty { soft, lambda })
    }

    pub fn soft(&self) -> &SoftTargets {
        &self.soft
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl ExtraLoss for LwfPenalty {
    fn eval(
        &self,
        model: &MlpModel,
        batch_inputs: &Matrix,
        batch_sample_ids: &[usize],
    ) -> Result<(f64, ParameterVector)> {
        let (targets, weights) = soft_term_matrices(
            &self.soft,
            self.lambda,
            batch_sample_ids,
            model.output_dim(),
        )?;
        nn::weighted_bce_backward(
            model,
            batch_inputs,
            &[BceTerm {
                targets: &targets,
                weights: &weights,
            }],
        )
    }
}

/// Which source groups a joint-training mixture replays.
#[derive(Debug, Clone, PartialEq)]
pub struct JtMixture {
    pub fraction: f64,
    pub selected_source_groups: Vec<u32>,
}

/// Combines the target training set with a seeded, group-sampled fraction of
/// the source training set. Groups are taken whole; every sample keeps its
/// own domain mask, so the loss masks each row to its domain.
pub fn jt_mix(
    source_train: &Dataset,
    target_train: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, JtMixture)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!(
            "joint-training fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let mut groups = source_train.group_ids();
    groups.shuffle(&mut sub_rng(seed, "jt-mix"));
    let take = ((groups.len() as f64) * fraction).round() as usize;
    let mut selected: Vec<u32> = groups[..take].to_vec();
    selected.sort_unstable();
    let selected_set: std::collections::BTreeSet<u32> = selected.iter().copied().collect();

    let mut samples = target_train.samples.clone();
    samples.extend(
        source_train
            .samples
            .iter()
            .filter(|s| selected_set.contains(&s.group_id))
            .cloned(),
    );
    let combined = Dataset {
        feature_dim: target_train.feature_dim,
        seed: target_train.seed,
        spec_hash: target_train.spec_hash.clone(),
        samples,
    };
    Ok((
        combined,
        JtMixture {
            fraction,
            selected_source_groups: selected,
        },
    ))
}

const PRIOR_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PriorFile {
    schema_version: u32,
    lambda: f64,
    weighting: FisherWeighting,
    resolved_rho: Option<f64>,
    layout: ParamLayout,
    mean: Vec<f64>,
    precision: Vec<f64>,
}

/// Writes the prior in the checkpoint format (values aligned to the
/// parameter layout, resolved threshold included).
pub fn save_prior(prior: &GaussianPrior, path: &Path) -> Result<()> {
    let file = PriorFile {
        schema_version: PRIOR_SCHEMA_VERSION,
        lambda: prior.lambda,
        weighting: prior.weighting,
        resolved_rho: prior.resolved_rho,
        layout: (**prior.mean.layout()).clone(),
        mean: prior.mean.values().to_vec(),
        precision: prior.precision.clone(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_prior(path: &Path) -> Result<GaussianPrior> {
    let file: PriorFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.schema_version != PRIOR_SCHEMA_VERSION {
        return Err(Error::integrity(format!(
            "unsupported prior schema version {}",
            file.schema_version
        )));
    }
    let layout = std::sync::Arc::new(file.layout);
    if file.precision.len() != layout.total_len() || file.mean.len() != layout.total_len() {
        return Err(Error::integrity("prior fields disagree with the layout"));
    }
    Ok(GaussianPrior {
        mean: ParameterVector::from_values(layout, file.mean)?,
        precision: file.precision,
        lambda: file.lambda,
        weighting: file.weighting,
        resolved_rho: file.resolved_rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpModel;
    use rand::Rng;

    fn single_unit(w: f64, b: f64) -> MlpModel {
        let mut m = MlpModel::new(&[1, 1], 0).unwrap();
        let layout = m.layout();
        m.set_parameters(&ParameterVector::from_values(layout, vec![w, b]).unwrap())
            .unwrap();
        m
    }

    fn set_of(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, labels: usize) -> TrainSet {
        let n = inputs.len();
        TrainSet {
            inputs: Matrix::from_rows(&inputs).unwrap(),
            targets: Matrix::from_rows(&targets).unwrap(),
            masks: vec![LabelMask::all_active(labels); n],
            sample_ids: (0..n).collect(),
        }
    }

    #[test]
    fn fisher_of_single_logistic_unit_is_quarter() {
        let m = single_unit(0.0, 0.0);
        let set = set_of(vec![vec![1.0]], vec![vec![1.0]], 1);
        let f = fisher_diagonal(&m, &set, &LabelMask::all_active(1)).unwrap();
        assert!((f.values().values()[0] - 0.25).abs() < 1e-15);
        assert_eq!(f.sample_count(), 1);
    }

    #[test]
    fn fisher_vanishes_at_confident_correct_prediction() {
        let m = single_unit(50.0, 0.0);
        let set = set_of(vec![vec![1.0]], vec![vec![1.0]], 1);
        let f = fisher_diagonal(&m, &set, &LabelMask::all_active(1)).unwrap();
        assert!(f.values().values().iter().all(|&v| v < 1e-10));
    }

    #[test]
    fn fisher_equals_mean_of_squared_per_sample_gradients() {
        let mut rng = sub_rng(3, "fisher-oracle");
        let m = MlpModel::new(&[4, 6, 3], 21).unwrap();
        let n = 16;
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let targets: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect())
            .collect();
        let set = set_of(inputs, targets, 3);
        let mask = LabelMask::new(vec![true, true, false]);
        let fisher = fisher_diagonal(&m, &set, &mask).unwrap();

        let per = nn::per_sample_gradients(&m, &set.inputs, &set.targets, &mask).unwrap();
        let mut oracle = vec![0.0; m.num_parameters()];
        for g in &per {
            for (o, v) in oracle.iter_mut().zip(g.values()) {
                *o += v * v;
            }
        }
        for o in &mut oracle {
            *o /= n as f64;
        }
        for (a, b) in fisher.values().values().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fisher_rejects_empty_dataset() {
        let m = single_unit(0.0, 0.0);
        let empty = TrainSet {
            inputs: Matrix::zeros(0, 1),
            targets: Matrix::zeros(0, 1),
            masks: vec![],
            sample_ids: vec![],
        };
        let err = fisher_diagonal(&m, &empty, &LabelMask::all_active(1)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    fn fisher_from(values: Vec<f64>) -> FisherDiagonal {
        let layout = std::sync::Arc::new(ParamLayout::new(vec![
            crate::param::LayoutEntry::new("w", vec![values.len()]),
        ]));
        FisherDiagonal {
            values: ParameterVector::from_values(layout, values).unwrap(),
            sample_count: 1,
        }
    }

    #[test]
    fn binarize_with_absolute_threshold() {
        let f = fisher_from(vec![0.0005, 0.01, 0.002]);
        let b = binarize_fisher(&f, ThresholdRule::Absolute { rho: 0.001 }).unwrap();
        assert_eq!(b.mask, vec![false, true, true]);
        assert_eq!(b.resolved_rho, 0.001);
    }

    #[test]
    fn all_entries_below_rho_gives_inert_mask() {
        let f = fisher_from(vec![1e-6, 2e-6, 3e-6]);
        let b = binarize_fisher(&f, ThresholdRule::Absolute { rho: 0.001 }).unwrap();
        assert!(b.mask.iter().all(|&m| !m));
    }

    #[test]
    fn quantile_selects_top_share_of_distinct_entries() {
        let values: Vec<f64> = (1..=20).map(|i| i as f64 / 100.0).collect();
        let f = fisher_from(values);
        let b = binarize_fisher(&f, ThresholdRule::Quantile { q: 0.95 }).unwrap();
        assert_eq!(b.mask.iter().filter(|&&m| m).count(), 1);
        assert!(b.mask[19]);
        assert_eq!(b.resolved_rho, 0.19);
    }

    #[test]
    fn ties_at_rho_are_excluded() {
        let f = fisher_from(vec![0.001, 0.001, 0.002]);
        let b = binarize_fisher(&f, ThresholdRule::Absolute { rho: 0.001 }).unwrap();
        assert_eq!(b.mask, vec![false, false, true]);
    }

    #[test]
    fn quantile_out_of_range_is_config_error() {
        let f = fisher_from(vec![0.1]);
        for q in [0.0, 1.0, -0.5, 1.5] {
            let err = binarize_fisher(&f, ThresholdRule::Quantile { q }).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
        }
    }

    fn prior_with(mean: Vec<f64>, mask: Vec<f64>, lambda: f64) -> GaussianPrior {
        let layout = std::sync::Arc::new(ParamLayout::new(vec![
            crate::param::LayoutEntry::new("w", vec![mean.len()]),
        ]));
        GaussianPrior {
            mean: ParameterVector::from_values(layout, mean).unwrap(),
            precision: mask,
            lambda,
            weighting: FisherWeighting::Binarized,
            resolved_rho: Some(0.0),
        }
    }

    fn pv(values: Vec<f64>) -> ParameterVector {
        let layout = std::sync::Arc::new(ParamLayout::new(vec![
            crate::param::LayoutEntry::new("w", vec![values.len()]),
        ]));
        ParameterVector::from_values(layout, values).unwrap()
    }

    #[test]
    fn penalty_is_zero_at_the_mean() {
        let prior = prior_with(vec![0.3, -0.7], vec![1.0, 1.0], 5.0);
        let (v, g) = ewc_penalty(&pv(vec![0.3, -0.7]), &prior).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn penalty_hand_values() {
        // lambda=0.001, theta-mu=(1,2), mask=(1,0) -> value 0.001
        let prior = prior_with(vec![0.0, 0.0], vec![1.0, 0.0], 0.001);
        let (v, _) = ewc_penalty(&pv(vec![1.0, 2.0]), &prior).unwrap();
        assert!((v - 0.001).abs() < 1e-18);

        // lambda=2, theta-mu=(0.5,-0.5), mask=(1,1) -> value 1.0, gradient (2,-2)
        let prior = prior_with(vec![0.0, 0.0], vec![1.0, 1.0], 2.0);
        let (v, g) = ewc_penalty(&pv(vec![0.5, -0.5]), &prior).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert!((g.values()[0] - 2.0).abs() < 1e-15);
        assert!((g.values()[1] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut rng = sub_rng(8, "ewc-fd");
        let mean: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask: Vec<f64> = (0..12).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
        let prior = prior_with(mean, mask, 0.7);
        let theta: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let params = pv(theta.clone());
        let (_, grad) = ewc_penalty(&params, &prior).unwrap();
        let h = 1e-6;
        for p in 0..12 {
            let mut plus = theta.clone();
            plus[p] += h;
            let (vp, _) = ewc_penalty(&pv(plus), &prior).unwrap();
            let mut minus = theta.clone();
            minus[p] -= h;
            let (vm, _) = ewc_penalty(&pv(minus), &prior).unwrap();
            let numeric = (vp - vm) / (2.0 * h);
            let analytic = grad.values()[p];
            let denom = analytic.abs().max(numeric.abs()).max(1e-10);
            assert!((analytic - numeric).abs() / denom < 1e-6);
        }
    }

    #[test]
    fn penalty_rejects_length_mismatch() {
        let prior = prior_with(vec![0.0, 0.0], vec![1.0, 1.0], 1.0);
        let err = ewc_penalty(&pv(vec![1.0]), &prior).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn prior_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.json");
        let prior = prior_with(vec![0.25, -0.5, 0.125], vec![1.0, 0.0, 1.0], 0.001);
        save_prior(&prior, &path).unwrap();
        let loaded = load_prior(&path).unwrap();
        assert_eq!(prior, loaded);
    }

    #[test]
    fn zero_weight_model_records_half_soft_targets() {
        let mut m = MlpModel::new(&[2, 3], 0).unwrap();
        let zeros = ParameterVector::zeros(m.layout());
        m.set_parameters(&zeros).unwrap();
        let set = set_of(
            vec![vec![1.0, -1.0], vec![0.5, 2.0]],
            vec![vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]],
            3,
        );
        let soft =
            record_soft_targets(&m, &set, &LabelMask::new(vec![true, false, true])).unwrap();
        assert_eq!(soft.len(), 2);
        for id in 0..2 {
            assert_eq!(soft.get(id).unwrap(), &vec![0.5, 0.5]);
        }
    }

    #[test]
    fn soft_target_width_matches_regularized_subset() {
        let m = MlpModel::new(&[3, 21], 1).unwrap();
        let set = TrainSet {
            inputs: Matrix::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap(),
            targets: Matrix::zeros(1, 21),
            masks: vec![LabelMask::all_active(21)],
            sample_ids: vec![42],
        };
        let regularized = crate::data::Domain::A.mask();
        let a_unique = LabelMask::new(
            (0..21)
                .map(|l| regularized.is_active(l) && !crate::data::shared_label_mask().is_active(l))
                .collect(),
        );
        assert_eq!(a_unique.num_active(), 7);
        let soft = record_soft_targets(&m, &set, &a_unique).unwrap();
        assert_eq!(soft.get(42).unwrap().len(), 7);
        // recording twice gives identical records
        let again = record_soft_targets(&m, &set, &a_unique).unwrap();
        assert_eq!(soft, again);
    }

    #[test]
    fn empty_regularized_subset_is_rejected() {
        let m = MlpModel::new(&[2, 3], 0).unwrap();
        let set = set_of(vec![vec![0.0, 0.0]], vec![vec![0.0, 0.0, 0.0]], 3);
        let err = record_soft_targets(&m, &set, &LabelMask::new(vec![false; 3])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let soft = record_soft_targets(&m, &set, &LabelMask::new(vec![true, false, false])).unwrap();
        let empty = SoftTargets {
            regularized: LabelMask::new(vec![false; 3]),
            values: soft.values.clone(),
        };
        let probs = Matrix::from_rows(&[vec![0.5, 0.5, 0.5]]).unwrap();
        let targets = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let err = lwf_loss(
            &probs,
            &targets,
            &LabelMask::new(vec![true, true, false]),
            &empty,
            2.0,
            &[0],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn lwf_with_zero_lambda_equals_masked_bce() {
        let m = MlpModel::new(&[2, 3], 9).unwrap();
        let set = set_of(
            vec![vec![0.2, -0.4], vec![1.0, 0.3]],
            vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]],
            3,
        );
        let soft =
            record_soft_targets(&m, &set, &LabelMask::new(vec![false, false, true])).unwrap();
        let probs = m.forward(&set.inputs).unwrap();
        let mask = LabelMask::new(vec![true, true, false]);
        let full = lwf_loss(&probs, &set.targets, &mask, &soft, 0.0, &set.sample_ids).unwrap();
        let hard = nn::masked_bce(&probs, &set.targets, &mask).unwrap();
        assert_eq!(full, hard);
    }

    #[test]
    fn lwf_soft_term_closed_form() {
        // yhat=1 (clamped), p=0.5, lambda=2, single regularized label
        let soft = SoftTargets {
            regularized: LabelMask::new(vec![false, true]),
            values: BTreeMap::from([(0usize, vec![1.0])]),
        };
        let probs = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let targets = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let mask = LabelMask::new(vec![true, false]);
        let total = lwf_loss(&probs, &targets, &mask, &soft, 2.0, &[0]).unwrap();
        let hard = std::f64::consts::LN_2;
        let soft_term = 2.0 * std::f64::consts::LN_2;
        assert!((total - (hard + soft_term)).abs() < 1e-12);
    }

    #[test]
    fn lwf_soft_gradient_vanishes_when_outputs_match_targets() {
        let m = MlpModel::new(&[2, 4, 3], 17).unwrap();
        let set = set_of(
            vec![vec![0.3, -0.9], vec![-0.2, 0.8]],
            vec![vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]],
            3,
        );
        let reg = LabelMask::new(vec![true, true, false]);
        let soft = record_soft_targets(&m, &set, &reg).unwrap();
        let hook = LwfPenalty::new(soft, 5.0).unwrap();
        // same model, so p == yhat exactly on regularized labels
        let (_, grad) = hook.eval(&m, &set.inputs, &set.sample_ids).unwrap();
        assert_eq!(grad.l2_norm(), 0.0);
    }

    #[test]
    fn lwf_rejects_misaligned_sample_ids() {
        let m = MlpModel::new(&[2, 2], 2).unwrap();
        let set = set_of(vec![vec![0.1, 0.1]], vec![vec![1.0, 0.0]], 2);
        let soft = record_soft_targets(&m, &set, &LabelMask::new(vec![false, true])).unwrap();
        let probs = m.forward(&set.inputs).unwrap();
        let err = lwf_loss(
            &probs,
            &set.targets,
            &LabelMask::new(vec![true, false]),
            &soft,
            1.0,
            &[999],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    fn two_domain_sets() -> (Dataset, Dataset) {
        let cfg = crate::data::BenchmarkConfig {
            groups_per_domain: 40,
            samples_per_group: (1, 2),
            seed: 77,
            ..crate::data::BenchmarkConfig::default()
        };
        crate::data::generate(&cfg).unwrap()
    }

    #[test]
    fn jt_zero_is_the_target_set() {
        let (a, b) = two_domain_sets();
        let (combined, mix) = jt_mix(&a, &b, 0.0, 5).unwrap();
        assert_eq!(combined.samples, b.samples);
        assert!(mix.selected_source_groups.is_empty());
    }

    #[test]
    fn jt_one_includes_every_source_group() {
        let (a, b) = two_domain_sets();
        let (combined, mix) = jt_mix(&a, &b, 1.0, 5).unwrap();
        assert_eq!(mix.selected_source_groups, a.group_ids());
        assert_eq!(combined.len(), a.len() + b.len());
    }

    #[test]
    fn jt_half_is_deterministic_and_group_whole() {
        let (a, b) = two_domain_sets();
        let (c1, m1) = jt_mix(&a, &b, 0.5, 9).unwrap();
        let (c2, m2) = jt_mix(&a, &b, 0.5, 9).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(m1, m2);

        let n = a.group_ids().len() as f64;
        assert!((m1.selected_source_groups.len() as f64 - 0.5 * n).abs() <= 1.0);

        // groups are taken whole: every sample of a selected group is present
        let sel: std::collections::BTreeSet<u32> =
            m1.selected_source_groups.iter().copied().collect();
        let expected: Vec<_> = a
            .samples
            .iter()
            .filter(|s| sel.contains(&s.group_id))
            .cloned()
            .collect();
        let replayed: Vec<_> = c1.samples[b.len()..].to_vec();
        assert_eq!(replayed, expected);
    }

    #[test]
    fn jt_rejects_fraction_outside_unit_interval() {
        let (a, b) = two_domain_sets();
        assert!(matches!(jt_mix(&a, &b, -0.1, 0).unwrap_err(), Error::Config(_)));
        assert!(matches!(jt_mix(&a, &b, 1.1, 0).unwrap_err(), Error::Config(_)));
    }
}
