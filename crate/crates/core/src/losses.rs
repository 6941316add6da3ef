//! Segmentation losses on softmax outputs. Every loss returns its value and
//! its gradient with respect to the logits that produced the probabilities.

use crate::data::Label;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// d value / d logits, same shape as the probabilities.
    pub grad: Matrix,
    /// Number of points that contributed.
    pub count: usize,
}

impl LossValue {
    pub fn zero(rows: usize, cols: usize) -> Self {
        Self {
            value: 0.0,
            grad: Matrix::zeros(rows, cols),
            count: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    fn add(mut self, other: &LossValue) -> Self {
        self.value += other.value;
        self.grad.add_assign(&other.grad);
        self.count = self.count.max(other.count);
        self
    }

    fn scaled(mut self, s: f64) -> Self {
        self.value *= s;
        self.grad.scale(s);
        self
    }
}

fn check_inputs(probs: &Matrix, targets: Option<&[Label]>, mask: &[bool]) -> Result<()> {
    Error::check_len("loss mask", probs.rows(), mask.len())?;
    if let Some(t) = targets {
        Error::check_len("loss targets", probs.rows(), t.len())?;
        let k = probs.cols();
        if let Some((_, &bad)) = t.iter().zip(mask).find(|(&l, &m)| m && usize::from(l) >= k) {
            return Err(Error::InvalidArgument(format!("target {bad} out of range for {k} classes")));
        }
    }
    Ok(())
}

/// Chains a gradient with respect to probabilities through the row softmax.
fn through_softmax(probs: &Matrix, dprobs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let (p, g) = (probs.row(i), dprobs.row(i));
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (pj, gj)) in out.row_mut(i).iter_mut().zip(p.iter().zip(g)) {
            *o = pj * (gj - dot);
        }
    }
    out
}

/// Mean negative log-likelihood over masked points.
pub fn cross_entropy(probs: &Matrix, targets: &[Label], mask: &[bool]) -> Result<LossValue> {
    check_inputs(probs, Some(targets), mask)?;
    let count = mask.iter().filter(|&&m| m).count();
    let mut out = LossValue::zero(probs.rows(), probs.cols());
    if count == 0 {
        return Ok(out);
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for i in (0..probs.rows()).filter(|&i| mask[i]) {
        let t = usize::from(targets[i]);
        total -= probs.get(i, t).max(PROB_FLOOR).ln();
        for (j, (g, &p)) in out.grad.row_mut(i).iter_mut().zip(probs.row(i)).enumerate() {
            *g = (p - if j == t { 1.0 } else { 0.0 }) * inv;
        }
    }
    out.value = total * inv;
    out.count = count;
    Ok(out)
}

/// Lovász extension of the Jaccard loss for one class.
///
/// `errors[i]` is the prediction error of point `i` and `foreground[i]` whether
/// the point belongs to the class. Returns the value and the (sub)gradient
/// with respect to the errors. Sort ties resolve by point index.
pub fn lovasz_extension(errors: &[f64], foreground: &[bool]) -> (f64, Vec<f64>) {
    let n = errors.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    let total_fg = foreground.iter().filter(|&&f| f).count() as f64;

    let mut grad = vec![0.0; n];
    let mut value = 0.0;
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev_jaccard = 0.0;
    for &i in &order {
        if foreground[i] {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jaccard = 1.0 - (total_fg - cum_fg) / (total_fg + cum_bg);
        let g = jaccard - prev_jaccard;
        prev_jaccard = jaccard;
        grad[i] = g;
        value += errors[i] * g;
    }
    (value, grad)
}

/// Lovász-softmax averaged over classes present among the masked targets.
pub fn lovasz_softmax(probs: &Matrix, targets: &[Label], mask: &[bool]) -> Result<LossValue> {
    check_inputs(probs, Some(targets), mask)?;
    let idx: Vec<usize> = (0..probs.rows()).filter(|&i| mask[i]).collect();
    let mut out = LossValue::zero(probs.rows(), probs.cols());
    if idx.is_empty() {
        return Ok(out);
    }
    let k = probs.cols();
    let mut present = vec![false; k];
    for &i in &idx {
        present[usize::from(targets[i])] = true;
    }
    let n_present = present.iter().filter(|&&p| p).count() as f64;

    let mut dprobs = Matrix::zeros(probs.rows(), k);
    let mut total = 0.0;
    for c in (0..k).filter(|&c| present[c]) {
        let fg: Vec<bool> = idx.iter().map(|&i| usize::from(targets[i]) == c).collect();
        let errors: Vec<f64> = idx
            .iter()
            .zip(&fg)
            .map(|(&i, &f)| {
                let p = probs.get(i, c);
                if f {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        let (value, grad) = lovasz_extension(&errors, &fg);
        total += value;
        for ((&i, &f), g) in idx.iter().zip(&fg).zip(grad) {
            let d = if f { -g } else { g };
            dprobs.set(i, c, dprobs.get(i, c) + d / n_present);
        }
    }
    out.value = total / n_present;
    out.grad = through_softmax(probs, &dprobs);
    out.count = idx.len();
    Ok(out)
}

/// Cross-entropy plus Lovász-softmax on the same mask.
pub fn labeled_loss(probs: &Matrix, targets: &[Label], mask: &[bool]) -> Result<LossValue> {
    let ce = cross_entropy(probs, targets, mask)?;
    let lovasz = lovasz_softmax(probs, targets, mask)?;
    Ok(ce.add(&lovasz))
}

/// Pseudo-labels from one peer, restricted to `mask`, blended with `weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSource<'a> {
    pub labels: &'a [Label],
    pub mask: &'a [bool],
    pub weight: f64,
}

/// `lambda_u · Σ_s ω_s · (CE + Lovász)(probs, pseudo-labels_s)`.
pub fn unlabeled_loss(probs: &Matrix, sources: &[PseudoSource<'_>], lambda_u: f64) -> Result<LossValue> {
    let mut out = LossValue::zero(probs.rows(), probs.cols());
    for src in sources {
        let term = labeled_loss(probs, src.labels, src.mask)?;
        if term.is_empty() {
            continue;
        }
        out = out.add(&term.scaled(lambda_u * src.weight));
    }
    Ok(out)
}

/// Cross-entropy of one distribution against the uniform prior.
pub fn uniform_cross_entropy(p: &[f64]) -> f64 {
    let k = p.len() as f64;
    -p.iter().map(|&v| v.max(PROB_FLOOR).ln()).sum::<f64>() / k
}

/// `lambda_reg` times the mean cross-entropy to the uniform distribution.
pub fn regularization_loss(probs: &Matrix, mask: &[bool], lambda_reg: f64) -> Result<LossValue> {
    check_inputs(probs, None, mask)?;
    let count = mask.iter().filter(|&&m| m).count();
    let mut out = LossValue::zero(probs.rows(), probs.cols());
    if count == 0 {
        return Ok(out);
    }
    let k = probs.cols() as f64;
    let scale = lambda_reg / count as f64;
    let mut total = 0.0;
    for i in (0..probs.rows()).filter(|&i| mask[i]) {
        total += uniform_cross_entropy(probs.row(i));
        for (g, &p) in out.grad.row_mut(i).iter_mut().zip(probs.row(i)) {
            *g = (p - 1.0 / k) * scale;
        }
    }
    out.value = total * scale;
    out.count = count;
    Ok(out)
}
