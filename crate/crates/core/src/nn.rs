//! Minimal dense network: tanh hidden layers, sigmoid multi-label head,
//! masked binary cross-entropy and exact reverse-mode gradients.
//!
//! The loss is a *mean* over active cells (batch x active labels), so
//! regularizer coefficients stay comparable across mask sizes. Outputs are
//! clamped to `(CLAMP_EPS, 1 - CLAMP_EPS)` before any log; cells where the
//! raw sigmoid falls outside that interval propagate a zero gradient, which
//! keeps the analytic gradient equal to the derivative of the clamped loss.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::param::{LayoutEntry, ParamLayout, ParameterVector};
use crate::rng::sub_rng;

/// Output clamp applied before every log.
pub const CLAMP_EPS: f64 = 1e-7;

/// Which labels of the union space belong to the current domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    active: Vec<bool>,
}

impl LabelMask {
    pub fn new(active: Vec<bool>) -> Self {
        LabelMask { active }
    }

    pub fn all_active(len: usize) -> Self {
        LabelMask {
            active: vec![true; len],
        }
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Self {
        let mut active = vec![false; len];
        for &i in indices {
            active[i] = true;
        }
        LabelMask { active }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_active(&self, label: usize) -> bool {
        self.active[label]
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.num_active() == 0 {
            return Err(Error::config("label mask has no active labels"));
        }
        Ok(())
    }
}

/// Dense multi-layer perceptron with a sigmoid head.
///
/// Immutable after construction except through [`MlpModel::set_parameters`];
/// safe to send across threads, parallel callers own disjoint instances.
#[derive(Debug, Clone)]
pub struct MlpModel {
    dims: Vec<usize>,
    weights: Vec<Matrix>, // per layer, out x in
    biases: Vec<Vec<f64>>,
    layout: Arc<ParamLayout>,
    clamp: f64,
    init_seed: u64,
}

impl MlpModel {
    /// Builds a seeded model. `dims` is `[input, hidden.., labels]`; hidden
    /// layers use tanh, the head is sigmoid. Weights are uniform in
    /// `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`, biases zero.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config("model needs at least input and output dims"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::config("all layer dims must be positive"));
        }
        let mut rng = sub_rng(seed, "mlp-init");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut entries = Vec::new();
        for k in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Matrix::zeros(fan_out, fan_in);
            for v in w.as_mut_slice() {
                *v = rng.gen_range(-limit..=limit);
            }
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
            entries.push(LayoutEntry::new(format!("layer{k}.weight"), vec![fan_out, fan_in]));
            entries.push(LayoutEntry::new(format!("layer{k}.bias"), vec![fan_out]));
        }
        Ok(MlpModel {
            dims: dims.to_vec(),
            weights,
            biases,
            layout: Arc::new(ParamLayout::new(entries)),
            clamp: CLAMP_EPS,
            init_seed: seed,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn layout(&self) -> Arc<ParamLayout> {
        self.layout.clone()
    }

    pub fn num_parameters(&self) -> usize {
        self.layout.total_len()
    }

    /// Flattens all weights and biases in layout order.
    pub fn get_parameters(&self) -> ParameterVector {
        let mut values = Vec::with_capacity(self.layout.total_len());
        for k in 0..self.weights.len() {
            values.extend_from_slice(self.weights[k].as_slice());
            values.extend_from_slice(&self.biases[k]);
        }
        ParameterVector::from_values(self.layout.clone(), values)
            .expect("model layout matches its own parameters")
    }

    /// Writes a flat vector back into the layer weights.
    pub fn set_parameters(&mut self, params: &ParameterVector) -> Result<()> {
        if params.len() != self.layout.total_len() {
            return Err(Error::shape(format!(
                "model has {} parameters, got {}",
                self.layout.total_len(),
                params.len()
            )));
        }
        let mut off = 0;
        for k in 0..self.weights.len() {
            let w = self.weights[k].as_mut_slice();
            w.copy_from_slice(&params.values()[off..off + w.len()]);
            off += w.len();
            let b = &mut self.biases[k];
            let blen = b.len();
            b.copy_from_slice(&params.values()[off..off + blen]);
            off += blen;
        }
        Ok(())
    }

    /// Batch forward pass; every output lies strictly inside
    /// `(clamp, 1 - clamp)`.
    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(inputs)?.probs)
    }

    fn forward_trace(&self, inputs: &Matrix) -> Result<ForwardTrace> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "model expects input width {}, got {}",
                self.input_dim(),
                inputs.cols()
            )));
        }
        if inputs.rows() == 0 {
            return Err(Error::shape("batch must contain at least one sample"));
        }
        let batch = inputs.rows();
        let num_layers = self.weights.len();
        let mut hidden: Vec<Matrix> = Vec::with_capacity(num_layers - 1);
        for k in 0..num_layers - 1 {
            let below: &Matrix = if k == 0 { inputs } else { &hidden[k - 1] };
            let mut z = affine(&self.weights[k], &self.biases[k], below);
            for v in z.as_mut_slice() {
                *v = v.tanh();
            }
            hidden.push(z);
        }
        // sigmoid head with clamp
        let below: &Matrix = if num_layers == 1 { inputs } else { &hidden[num_layers - 2] };
        let z = affine(&self.weights[num_layers - 1], &self.biases[num_layers - 1], below);
        let mut probs = Matrix::zeros(batch, self.output_dim());
        let mut clamped = vec![false; batch * self.output_dim()];
        let lo = self.clamp;
        let hi = 1.0 - self.clamp;
        for (i, (&zv, pv)) in z.as_slice().iter().zip(probs.as_mut_slice()).enumerate() {
            let raw = sigmoid(zv);
            if raw < lo {
                *pv = lo;
                clamped[i] = true;
            } else if raw > hi {
                *pv = hi;
                clamped[i] = true;
            } else {
                *pv = raw;
            }
        }
        Ok(ForwardTrace {
            hidden,
            probs,
            clamped,
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `W x + b` for a batch (rows of `inputs`).
fn affine(w: &Matrix, b: &[f64], inputs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(inputs.rows(), w.rows());
    for i in 0..inputs.rows() {
        let x = inputs.row(i);
        let row = out.row_mut(i);
        for (o, r) in row.iter_mut().enumerate() {
            let wrow = w.row(o);
            let mut acc = b[o];
            for (wv, xv) in wrow.iter().zip(x) {
                acc += wv * xv;
            }
            *r = acc;
        }
    }
    out
}

struct ForwardTrace {
    hidden: Vec<Matrix>, // tanh outputs per hidden layer
    probs: Matrix,
    clamped: Vec<bool>,
}

/// One additive BCE term: `sum_cells weights[i][l] * bce(p[i][l], targets[i][l])`.
///
/// Cell weights carry the reduction (e.g. `1/C` for a mean over `C` active
/// cells) and any regularizer coefficient.
pub struct BceTerm<'a> {
    pub targets: &'a Matrix,
    pub weights: &'a Matrix,
}

fn bce_cell(p: f64, y: f64) -> f64 {
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("{what} contains a non-finite value")));
    }
    Ok(())
}

/// Weight matrix for a mean over `batch x active(mask)` cells.
pub(crate) fn mask_weights(batch: usize, mask: &LabelMask) -> Matrix {
    let cells = (batch * mask.num_active()) as f64;
    let mut w = Matrix::zeros(batch, mask.len());
    for i in 0..batch {
        for (l, &a) in mask.active().iter().enumerate() {
            if a {
                w.set(i, l, 1.0 / cells);
            }
        }
    }
    w
}

/// Weight matrix for a mean over all active cells under per-row masks.
pub(crate) fn row_mask_weights(masks: &[LabelMask]) -> Result<Matrix> {
    let labels = masks.first().map_or(0, LabelMask::len);
    let cells: usize = masks.iter().map(LabelMask::num_active).sum();
    if cells == 0 {
        return Err(Error::config("no active label cells in batch"));
    }
    let mut w = Matrix::zeros(masks.len(), labels);
    for (i, mask) in masks.iter().enumerate() {
        if mask.len() != labels {
            return Err(Error::shape("per-row masks differ in length"));
        }
        for (l, &a) in mask.active().iter().enumerate() {
            if a {
                w.set(i, l, 1.0 / cells as f64);
            }
        }
    }
    Ok(w)
}

/// Sum of weighted BCE terms over a probability matrix.
pub(crate) fn weighted_bce_value(probs: &Matrix, terms: &[BceTerm]) -> Result<f64> {
    check_finite(probs, "probabilities")?;
    let mut loss = 0.0;
    for term in terms {
        check_finite(term.targets, "targets")?;
        if term.targets.rows() != probs.rows()
            || term.targets.cols() != probs.cols()
            || term.weights.rows() != probs.rows()
            || term.weights.cols() != probs.cols()
        {
            return Err(Error::shape("loss term shape differs from probabilities"));
        }
        for ((p, y), w) in probs
            .iter()
            .zip(term.targets.iter())
            .zip(term.weights.iter())
        {
            if w != 0.0 {
                loss += w * bce_cell(p, y);
            }
        }
    }
    Ok(loss)
}

/// Mean masked binary cross-entropy over `batch x active-label` cells.
pub fn masked_bce(probs: &Matrix, targets: &Matrix, mask: &LabelMask) -> Result<f64> {
    mask.require_nonempty()?;
    if mask.len() != probs.cols() {
        return Err(Error::shape(format!(
            "mask covers {} labels, probabilities have {}",
            mask.len(),
            probs.cols()
        )));
    }
    let weights = mask_weights(probs.rows(), mask);
    weighted_bce_value(probs, &[BceTerm { targets, weights: &weights }])
}

/// As [`masked_bce`] but each row carries its own domain mask.
pub fn masked_bce_per_row(probs: &Matrix, targets: &Matrix, masks: &[LabelMask]) -> Result<f64> {
    if masks.len() != probs.rows() {
        return Err(Error::shape("one mask per batch row required"));
    }
    let weights = row_mask_weights(masks)?;
    weighted_bce_value(probs, &[BceTerm { targets, weights: &weights }])
}

/// Loss value and exact parameter gradient for a sum of weighted BCE terms.
pub(crate) fn weighted_bce_backward(
    model: &MlpModel,
    inputs: &Matrix,
    terms: &[BceTerm],
) -> Result<(f64, ParameterVector)> {
    check_finite(inputs, "inputs")?;
    let trace = model.forward_trace(inputs)?;
    let probs = &trace.probs;
    let loss = weighted_bce_value(probs, terms)?;

    let batch = inputs.rows();
    let labels = model.output_dim();
    // d loss / d z at the head; clamped cells are flat, so their gradient is zero
    let mut delta = Matrix::zeros(batch, labels);
    for term in terms {
        for i in 0..batch {
            for l in 0..labels {
                let w = term.weights.get(i, l);
                if w != 0.0 && !trace.clamped[i * labels + l] {
                    let d = delta.get(i, l) + w * (probs.get(i, l) - term.targets.get(i, l));
                    delta.set(i, l, d);
                }
            }
        }
    }

    let num_layers = model.weights.len();
    let mut grad = ParameterVector::zeros(model.layout());
    for k in (0..num_layers).rev() {
        let below: &Matrix = if k == 0 { inputs } else { &trace.hidden[k - 1] };
        let (out_dim, in_dim) = (model.weights[k].rows(), model.weights[k].cols());
        // layout entries: 2k = weight, 2k+1 = bias
        let wrange = model.layout.range(2 * k);
        let brange = model.layout.range(2 * k + 1);
        {
            let gv = grad.values_mut();
            for i in 0..batch {
                let drow = delta.row(i);
                let arow = below.row(i);
                for o in 0..out_dim {
                    let d = drow[o];
                    if d != 0.0 {
                        let woff = wrange.start + o * in_dim;
                        for (g, &a) in gv[woff..woff + in_dim].iter_mut().zip(arow) {
                            *g += d * a;
                        }
                        gv[brange.start + o] += d;
                    }
                }
            }
        }
        if k > 0 {
            // delta for the tanh layer below: (W^T delta) * (1 - a^2)
            let mut next = Matrix::zeros(batch, in_dim);
            let w = &model.weights[k];
            for i in 0..batch {
                let drow = delta.row(i);
                let arow = trace.hidden[k - 1].row(i);
                let nrow = next.row_mut(i);
                for o in 0..out_dim {
                    let d = drow[o];
                    if d != 0.0 {
                        let wrow = w.row(o);
                        for (n, &wv) in nrow.iter_mut().zip(wrow) {
                            *n += wv * d;
                        }
                    }
                }
                for (n, &a) in nrow.iter_mut().zip(arow) {
                    *n *= 1.0 - a * a;
                }
            }
            delta = next;
        }
    }
    Ok((loss, grad))
}

/// Exact gradient of [`masked_bce`] composed with the forward pass.
pub fn backward(
    model: &MlpModel,
    inputs: &Matrix,
    targets: &Matrix,
    mask: &LabelMask,
) -> Result<ParameterVector> {
    mask.require_nonempty()?;
    check_finite(targets, "targets")?;
    let weights = mask_weights(inputs.rows(), mask);
    let (_, grad) =
        weighted_bce_backward(model, inputs, &[BceTerm { targets, weights: &weights }])?;
    Ok(grad)
}

/// Loss and gradient under per-row masks; used by the training loop.
pub fn backward_per_row(
    model: &MlpModel,
    inputs: &Matrix,
    targets: &Matrix,
    masks: &[LabelMask],
) -> Result<(f64, ParameterVector)> {
    if masks.len() != inputs.rows() {
        return Err(Error::shape("one mask per batch row required"));
    }
    check_finite(targets, "targets")?;
    let weights = row_mask_weights(masks)?;
    weighted_bce_backward(model, inputs, &[BceTerm { targets, weights: &weights }])
}

/// Gradient of the per-sample mean BCE for each sample alone (batch size 1).
pub fn per_sample_gradients(
    model: &MlpModel,
    inputs: &Matrix,
    targets: &Matrix,
    mask: &LabelMask,
) -> Result<Vec<ParameterVector>> {
    let mut out = Vec::with_capacity(inputs.rows());
    for i in 0..inputs.rows() {
        let x = inputs.gather_rows(&[i]);
        let y = targets.gather_rows(&[i]);
        out.push(backward(model, &x, &y, mask)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_unit(w: f64, b: f64) -> MlpModel {
        let mut m = MlpModel::new(&[1, 1], 0).unwrap();
        let layout = m.layout();
        m.set_parameters(&ParameterVector::from_values(layout, vec![w, b]).unwrap())
            .unwrap();
        m
    }

    fn batch(values: &[f64]) -> Matrix {
        Matrix::from_rows(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_weight_network_outputs_half() {
        let mut m = MlpModel::new(&[3, 4, 2], 1).unwrap();
        let zeros = ParameterVector::zeros(m.layout());
        m.set_parameters(&zeros).unwrap();
        let p = m.forward(&Matrix::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap()).unwrap();
        for v in p.iter() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn single_unit_matches_sigmoid() {
        let m = single_unit(1.0, 0.0);
        let p = m.forward(&batch(&[0.0])).unwrap();
        assert_eq!(p.get(0, 0), 0.5);

        let m = single_unit(2.0, 0.0);
        let p = m.forward(&batch(&[1.0])).unwrap();
        let expect = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((p.get(0, 0) - expect).abs() < 1e-15);
        assert!((p.get(0, 0) - 0.8808).abs() < 5e-5);
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let m = MlpModel::new(&[3, 2], 0).unwrap();
        let err = m.forward(&Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let err = m.forward(&Matrix::zeros(0, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn bce_at_half_is_ln_two() {
        let probs = Matrix::from_rows(&[vec![0.5]]).unwrap();
        let targets = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let loss = masked_bce(&probs, &targets, &LabelMask::all_active(1)).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_loss_is_clamp_small() {
        let m = single_unit(50.0, 0.0); // saturates to the clamp
        let p = m.forward(&batch(&[1.0])).unwrap();
        let y = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let loss = masked_bce(&p, &y, &LabelMask::all_active(1)).unwrap();
        assert!(loss <= 2e-7);
    }

    #[test]
    fn masked_label_cannot_contribute() {
        let probs = Matrix::from_rows(&[vec![0.3, 0.9]]).unwrap();
        let t1 = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let t2 = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(); // masked target mutated
        let mask = LabelMask::new(vec![true, false]);
        let a = masked_bce(&probs, &t1, &mask).unwrap();
        let b = masked_bce(&probs, &t2, &mask).unwrap();
        assert_eq!(a, b);

        let single = Matrix::from_rows(&[vec![0.3]]).unwrap();
        let ty = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let c = masked_bce(&single, &ty, &LabelMask::all_active(1)).unwrap();
        assert!((a - c).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_is_config_error() {
        let probs = Matrix::from_rows(&[vec![0.5]]).unwrap();
        let err = masked_bce(&probs, &probs, &LabelMask::new(vec![false])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn nan_input_is_numeric_error() {
        let probs = Matrix::from_rows(&[vec![f64::NAN]]).unwrap();
        let targets = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let err = masked_bce(&probs, &targets, &LabelMask::all_active(1)).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn gradient_of_single_logistic_unit() {
        // x=1, y=1, w=0: dL/dw = p - y = -0.5
        let m = single_unit(0.0, 0.0);
        let g = backward(
            &m,
            &batch(&[1.0]),
            &Matrix::from_rows(&[vec![1.0]]).unwrap(),
            &LabelMask::all_active(1),
        )
        .unwrap();
        assert!((g.values()[0] - (-0.5)).abs() < 1e-15);
        assert!((g.values()[1] - (-0.5)).abs() < 1e-15); // bias sees the same delta
    }

    #[test]
    fn gradient_vanishes_at_perfect_prediction() {
        let m = single_unit(50.0, 0.0);
        let g = backward(
            &m,
            &batch(&[1.0]),
            &Matrix::from_rows(&[vec![1.0]]).unwrap(),
            &LabelMask::all_active(1),
        )
        .unwrap();
        assert!(g.l2_norm() < 1e-6);
    }

    /// Central finite differences of the full masked loss.
    fn fd_gradient(
        model: &MlpModel,
        inputs: &Matrix,
        targets: &Matrix,
        mask: &LabelMask,
        h: f64,
    ) -> Vec<f64> {
        let base = model.get_parameters();
        let mut grad = vec![0.0; base.len()];
        let mut probe = model.clone();
        for p in 0..base.len() {
            let mut plus = base.clone();
            plus.values_mut()[p] += h;
            probe.set_parameters(&plus).unwrap();
            let lp = masked_bce(&probe.forward(inputs).unwrap(), targets, mask).unwrap();
            let mut minus = base.clone();
            minus.values_mut()[p] -= h;
            probe.set_parameters(&minus).unwrap();
            let lm = masked_bce(&probe.forward(inputs).unwrap(), targets, mask).unwrap();
            grad[p] = (lp - lm) / (2.0 * h);
        }
        grad
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = sub_rng(42, "fd-test");
        for case in 0..10 {
            let dims: Vec<usize> = match case % 3 {
                0 => vec![4, 8, 3],
                1 => vec![3, 5, 4, 2],
                _ => vec![6, 2],
            };
            let m = MlpModel::new(&dims, 100 + case as u64).unwrap();
            let batch = 5;
            let inputs = Matrix::from_vec(
                batch,
                dims[0],
                (0..batch * dims[0]).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            )
            .unwrap();
            let labels = *dims.last().unwrap();
            let targets = Matrix::from_vec(
                batch,
                labels,
                (0..batch * labels)
                    .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                    .collect(),
            )
            .unwrap();
            let mut active = vec![true; labels];
            if labels > 1 {
                active[0] = rng.gen_bool(0.5);
                if active.iter().all(|&a| !a) {
                    active[0] = true;
                }
            }
            let mask = LabelMask::new(active);

            let analytic = backward(&m, &inputs, &targets, &mask).unwrap();
            let numeric = fd_gradient(&m, &inputs, &targets, &mask, 1e-5);
            for (a, n) in analytic.values().iter().zip(&numeric) {
                let denom = a.abs().max(n.abs()).max(1e-8);
                assert!(
                    (a - n).abs() / denom < 1e-4,
                    "gradient mismatch: analytic {a}, numeric {n}"
                );
            }
        }
    }

    #[test]
    fn per_sample_gradients_average_to_batch_gradient() {
        let m = MlpModel::new(&[4, 6, 3], 7).unwrap();
        let mut rng = sub_rng(9, "psg");
        let batch = 6;
        let inputs = Matrix::from_vec(
            batch,
            4,
            (0..batch * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let targets = Matrix::from_vec(
            batch,
            3,
            (0..batch * 3)
                .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let mask = LabelMask::new(vec![true, false, true]);

        let per = per_sample_gradients(&m, &inputs, &targets, &mask).unwrap();
        assert_eq!(per.len(), batch);
        let full = backward(&m, &inputs, &targets, &mask).unwrap();
        let mut mean = ParameterVector::zeros(m.layout());
        for g in &per {
            mean.axpy(1.0 / batch as f64, g).unwrap();
        }
        assert!(mean.max_abs_diff(&full).unwrap() < 1e-10);
    }

    #[test]
    fn per_sample_gradient_of_singleton_equals_backward() {
        let m = MlpModel::new(&[2, 3, 2], 3).unwrap();
        let inputs = Matrix::from_rows(&[vec![0.5, -0.25]]).unwrap();
        let targets = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let mask = LabelMask::all_active(2);
        let per = per_sample_gradients(&m, &inputs, &targets, &mask).unwrap();
        let full = backward(&m, &inputs, &targets, &mask).unwrap();
        assert_eq!(per.len(), 1);
        assert_eq!(per[0], full);
    }

    #[test]
    fn identical_samples_get_identical_gradients() {
        let m = MlpModel::new(&[3, 4, 2], 5).unwrap();
        let inputs = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        let targets = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let per = per_sample_gradients(&m, &inputs, &targets, &LabelMask::all_active(2)).unwrap();
        assert_eq!(per[0], per[1]);
    }

    #[test]
    fn parameter_round_trip_is_bit_identical() {
        let mut m = MlpModel::new(&[5, 8, 4], 11).unwrap();
        let inputs = Matrix::from_rows(&[vec![0.1, -0.2, 0.3, 0.7, -1.1]]).unwrap();
        let before = m.forward(&inputs).unwrap();
        let params = m.get_parameters();
        m.set_parameters(&params).unwrap();
        let after = m.forward(&inputs).unwrap();
        assert_eq!(before, after);
        assert_eq!(m.get_parameters(), params);
    }

    #[test]
    fn output_row_of_masked_label_does_not_affect_loss() {
        let mut m = MlpModel::new(&[3, 4, 2], 13).unwrap();
        let inputs = Matrix::from_rows(&[vec![0.4, -0.6, 1.2]]).unwrap();
        let targets = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let mask = LabelMask::new(vec![true, false]);
        let base = masked_bce(&m.forward(&inputs).unwrap(), &targets, &mask).unwrap();

        // perturb the masked label's output row (weights + bias)
        let mut params = m.get_parameters();
        let wrange = m.layout().range(2); // layer1.weight, 2x4
        params.values_mut()[wrange.start + 4] += 3.0; // row 1 (masked label)
        let brange = m.layout().range(3);
        params.values_mut()[brange.start + 1] -= 2.0;
        m.set_parameters(&params).unwrap();
        let perturbed = masked_bce(&m.forward(&inputs).unwrap(), &targets, &mask).unwrap();
        assert_eq!(base, perturbed);
    }

    #[test]
    fn clamp_keeps_loss_finite_for_saturated_networks() {
        let mut m = MlpModel::new(&[2, 2], 0).unwrap();
        let layout = m.layout();
        m.set_parameters(
            &ParameterVector::from_values(layout, vec![500.0, 500.0, -500.0, -500.0, 0.0, 0.0])
                .unwrap(),
        )
        .unwrap();
        let inputs = Matrix::from_rows(&[vec![10.0, 10.0]]).unwrap();
        let p = m.forward(&inputs).unwrap();
        for v in p.iter() {
            assert!(v >= CLAMP_EPS && v <= 1.0 - CLAMP_EPS);
        }
        let targets = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let loss = masked_bce(&p, &targets, &LabelMask::all_active(2)).unwrap();
        assert!(loss.is_finite());
    }
}
