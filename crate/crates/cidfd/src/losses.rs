//! Loss kernels: instance discrimination, feature decorrelation, and the
//! background-weighted contrastive variant, each returning the scalar loss
//! and its analytic gradient with respect to the input features.
//!
//! All kernels are pure functions over matrices and are generic over `f32` /
//! `f64`: training runs them in 32-bit, the validation suites re-derive
//! everything in 64-bit against central finite differences.
//!
//! Memory-bank rows are treated as constants — no gradient flows into a bank
//! or into the weight coefficients.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::core::{check_temperature, FeatureBatch, MemoryBank, Real, TemperatureSet};
use crate::error::{Error, Result};

/// Scalar loss plus gradient with respect to the feature rows it was
/// evaluated on (same shape as the batch).
#[derive(Debug, Clone)]
pub struct LossGrad<T: Real> {
    pub loss: T,
    pub grad: Array2<T>,
}

/// A composite loss with its two components kept separately for logging.
#[derive(Debug, Clone)]
pub struct TotalLoss<T: Real> {
    pub total: T,
    pub discrimination: T,
    pub decorrelation: T,
    pub grad: Array2<T>,
}

/// The transpose view of a feature batch used by feature decorrelation:
/// `vectors` is d x n, row `l` holding the l-th feature dimension across the
/// batch, scaled to unit L2 norm. The original column norms are kept so
/// gradients can chain back to the raw batch.
#[derive(Debug, Clone)]
pub struct FeatureColumns<T: Real> {
    vectors: Array2<T>,
    norms: Array1<T>,
}

impl<T: Real> FeatureColumns<T> {
    /// Builds normalized columns from an n x d feature matrix.
    pub fn from_rows(feats: ArrayView2<'_, T>) -> Result<Self> {
        let (n, d) = feats.dim();
        if n == 0 || d == 0 {
            return Err(Error::ShapeMismatch(
                "feature matrix must be non-empty in both axes".into(),
            ));
        }
        let mut vectors = Array2::zeros((d, n));
        let mut norms = Array1::zeros(d);
        for l in 0..d {
            let col = feats.column(l);
            let norm = col.iter().map(|&x| x * x).sum::<T>().sqrt();
            if !norm.is_finite() || norm == T::zero() {
                return Err(Error::DegenerateInput(format!(
                    "feature dimension {l} is identically zero across the batch"
                )));
            }
            norms[l] = norm;
            let mut row = vectors.row_mut(l);
            for (dst, &src) in row.iter_mut().zip(col.iter()) {
                *dst = src / norm;
            }
        }
        Ok(Self { vectors, norms })
    }

    pub fn from_batch(batch: &FeatureBatch<T>) -> Result<Self> {
        Self::from_rows(batch.rows())
    }

    /// d x n matrix of unit-norm transposed feature dimensions.
    pub fn vectors(&self) -> ArrayView2<'_, T> {
        self.vectors.view()
    }

    /// Feature dimensionality d.
    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    /// Batch length n.
    pub fn batch_len(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Strictly positive pair weights `alpha[i][j] = exp(w_i . w̄_j / tau_xb)`.
#[derive(Debug, Clone)]
pub struct WeightMatrix<T: Real> {
    alpha: Array2<T>,
}

impl<T: Real> WeightMatrix<T> {
    /// Wraps an explicit weight matrix, checking positivity.
    pub fn new(alpha: Array2<T>) -> Result<Self> {
        if alpha.iter().any(|a| !(*a > T::zero()) || !a.is_finite()) {
            return Err(Error::InvalidParameter(
                "weight coefficients must be strictly positive and finite".into(),
            ));
        }
        Ok(Self { alpha })
    }

    /// The IDFD special case: every weight 1.
    pub fn ones(n: usize, k: usize) -> Self {
        Self {
            alpha: Array2::from_elem((n, k), T::one()),
        }
    }

    pub fn alpha(&self) -> ArrayView2<'_, T> {
        self.alpha.view()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.alpha.dim()
    }
}

/// Instance-discrimination loss over a memory bank:
/// `-sum_i log( exp(bank[id_i] . v_i / tau) / sum_j exp(bank[j] . v_i / tau) )`.
///
/// The denominator runs over every bank row. Returns the gradient with
/// respect to the batch rows.
pub fn id_loss<T: Real>(
    batch: &FeatureBatch<T>,
    bank: &MemoryBank<T>,
    tau: T,
) -> Result<LossGrad<T>> {
    id_loss_parts(batch.rows(), batch.ids(), bank.rows(), tau)
}

/// Matrix-level form of [`id_loss`]; `feats` rows are taken as given.
pub fn id_loss_parts<T: Real>(
    feats: ArrayView2<'_, T>,
    ids: &[usize],
    bank: ArrayView2<'_, T>,
    tau: T,
) -> Result<LossGrad<T>> {
    check_temperature("tau", tau)?;
    check_ids(feats, ids, bank)?;
    let logits = scaled_logits(feats, bank, tau);
    softmax_nll(&logits, ids, bank, tau)
}

/// Feature-decorrelation loss over the transposed batch:
/// `-sum_l log( exp(f_l . f_l / tau_2) / sum_j exp(f_j . f_l / tau_2) )`
/// with each transposed dimension scaled to unit norm first.
///
/// The gradient is with respect to the underlying n x d batch.
pub fn fd_loss<T: Real>(cols: &FeatureColumns<T>, tau_2: T) -> Result<LossGrad<T>> {
    check_temperature("tau_2", tau_2)?;
    let c = cols.vectors();
    let (d, n) = c.dim();
    // Gram matrix of the unit columns; symmetric with unit diagonal.
    let s = c.dot(&c.t());
    let mut loss = T::zero();
    let mut q = Array2::<T>::zeros((d, d));
    for l in 0..d {
        let col = s.column(l);
        let mut max = T::neg_infinity();
        for &v in col.iter() {
            let v = v / tau_2;
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for j in 0..d {
            let e = (col[j] / tau_2 - max).exp();
            q[[j, l]] = e;
            sum += e;
        }
        let lse = max + sum.ln();
        loss += lse - s[[l, l]] / tau_2;
        for j in 0..d {
            q[[j, l]] /= sum;
        }
    }
    // Gradient w.r.t. the unit columns: ((Q + Q^T) C - 2C) / tau_2,
    // then chain through the per-column normalization back to the raw batch.
    let qsym = &q + &q.t();
    let mut g_unit = qsym.dot(&c);
    g_unit
        .iter_mut()
        .zip(c.iter())
        .for_each(|(g, &f)| *g = (*g - (f + f)) / tau_2);
    let mut grad = Array2::<T>::zeros((n, d));
    for l in 0..d {
        let f = c.row(l);
        let g = g_unit.row(l);
        let dot = f.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum::<T>();
        let inv_norm = T::one() / cols.norms[l];
        for i in 0..n {
            grad[[i, l]] = (g[i] - dot * f[i]) * inv_norm;
        }
    }
    Ok(LossGrad { loss, grad })
}

/// Pair weights from background features: `alpha[i][j] = exp(w_i . w̄_j / tau_xb)`.
///
/// No gradient flows through the weights; the background branch is frozen
/// when they are used.
pub fn weight_coefficients<T: Real>(
    w_batch: &FeatureBatch<T>,
    w_bank: &MemoryBank<T>,
    tau_xb: T,
) -> Result<WeightMatrix<T>> {
    weight_coefficients_parts(w_batch.rows(), w_bank.rows(), tau_xb)
}

/// Matrix-level form of [`weight_coefficients`].
pub fn weight_coefficients_parts<T: Real>(
    w: ArrayView2<'_, T>,
    w_bank: ArrayView2<'_, T>,
    tau_xb: T,
) -> Result<WeightMatrix<T>> {
    check_temperature("tau_xb", tau_xb)?;
    if w.ncols() != w_bank.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "background feature dims differ: {} vs {}",
            w.ncols(),
            w_bank.ncols()
        )));
    }
    let alpha = w.dot(&w_bank.t()).mapv(|s| (s / tau_xb).exp());
    WeightMatrix::new(alpha)
}

/// Contrastive instance-discrimination loss:
/// `-sum_i log( alpha[i][id_i] exp(bank[id_i] . v_i / tau_x)
///            / sum_j alpha[i][j] exp(bank[j] . v_i / tau_x) )`.
///
/// Evaluated on shifted logits `bank[j] . v_i / tau_x + ln alpha[i][j]`, so
/// with all weights equal to 1 it coincides with [`id_loss`] exactly.
pub fn ci_loss<T: Real>(
    batch: &FeatureBatch<T>,
    bank: &MemoryBank<T>,
    alpha: &WeightMatrix<T>,
    tau_x: T,
) -> Result<LossGrad<T>> {
    ci_loss_parts(batch.rows(), batch.ids(), bank.rows(), alpha.alpha(), tau_x)
}

/// Matrix-level form of [`ci_loss`].
pub fn ci_loss_parts<T: Real>(
    feats: ArrayView2<'_, T>,
    ids: &[usize],
    bank: ArrayView2<'_, T>,
    alpha: ArrayView2<'_, T>,
    tau_x: T,
) -> Result<LossGrad<T>> {
    check_temperature("tau_x", tau_x)?;
    check_ids(feats, ids, bank)?;
    if alpha.dim() != (feats.nrows(), bank.nrows()) {
        return Err(Error::ShapeMismatch(format!(
            "alpha is {:?}, expected ({}, {})",
            alpha.dim(),
            feats.nrows(),
            bank.nrows()
        )));
    }
    if alpha.iter().any(|a| !(*a > T::zero()) || !a.is_finite()) {
        return Err(Error::InvalidParameter(
            "weight coefficients must be strictly positive and finite".into(),
        ));
    }
    let mut logits = scaled_logits(feats, bank, tau_x);
    logits
        .iter_mut()
        .zip(alpha.iter())
        .for_each(|(l, &a)| *l += a.ln());
    softmax_nll(&logits, ids, bank, tau_x)
}

/// Stage-1 objective: instance discrimination plus feature decorrelation on
/// the background features. The gradient sums both components.
pub fn bg_total_loss<T: Real>(
    z_batch: &FeatureBatch<T>,
    z_bank: &MemoryBank<T>,
    temps: &TemperatureSet<T>,
) -> Result<TotalLoss<T>> {
    let id = id_loss(z_batch, z_bank, temps.tau_b)?;
    let fd = fd_loss(&FeatureColumns::from_batch(z_batch)?, temps.tau_2)?;
    Ok(combine(id, fd))
}

/// Stage-2 objective: weighted contrastive instance discrimination plus
/// feature decorrelation on the target features.
pub fn tg_total_loss<T: Real>(
    v_batch: &FeatureBatch<T>,
    v_bank: &MemoryBank<T>,
    alpha: &WeightMatrix<T>,
    temps: &TemperatureSet<T>,
) -> Result<TotalLoss<T>> {
    let ci = ci_loss(v_batch, v_bank, alpha, temps.tau_x)?;
    let fd = fd_loss(&FeatureColumns::from_batch(v_batch)?, temps.tau_2)?;
    Ok(combine(ci, fd))
}

fn combine<T: Real>(discrimination: LossGrad<T>, decorrelation: LossGrad<T>) -> TotalLoss<T> {
    let grad = &discrimination.grad + &decorrelation.grad;
    TotalLoss {
        total: discrimination.loss + decorrelation.loss,
        discrimination: discrimination.loss,
        decorrelation: decorrelation.loss,
        grad,
    }
}

fn check_ids<T: Real>(
    feats: ArrayView2<'_, T>,
    ids: &[usize],
    bank: ArrayView2<'_, T>,
) -> Result<()> {
    if feats.ncols() != bank.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {} vs bank dim {}",
            feats.ncols(),
            bank.ncols()
        )));
    }
    if ids.len() != feats.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows but {} ids",
            feats.nrows(),
            ids.len()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= bank.nrows()) {
        return Err(Error::IndexOutOfRange(format!(
            "id {bad} for bank of {} rows",
            bank.nrows()
        )));
    }
    Ok(())
}

fn scaled_logits<T: Real>(feats: ArrayView2<'_, T>, bank: ArrayView2<'_, T>, tau: T) -> Array2<T> {
    let mut logits = feats.dot(&bank.t());
    logits.mapv_inplace(|v| v / tau);
    logits
}

/// Row-stabilized softmax negative log likelihood of each row's own id, with
/// gradient `(P . bank - bank[ids]) / tau` w.r.t. the feature rows.
fn softmax_nll<T: Real>(
    logits: &Array2<T>,
    ids: &[usize],
    bank: ArrayView2<'_, T>,
    tau: T,
) -> Result<LossGrad<T>> {
    let mut probs = logits.clone();
    let mut loss = T::zero();
    for (i, mut row) in probs.axis_iter_mut(Axis(0)).enumerate() {
        let mut max = T::neg_infinity();
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let lse = max + sum.ln();
        loss += lse - logits[[i, ids[i]]];
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    if !loss.is_finite() {
        return Err(Error::DegenerateInput(
            "softmax loss evaluated to a non-finite value".into(),
        ));
    }
    let mut grad = probs.dot(&bank);
    for (i, &id) in ids.iter().enumerate() {
        let own = bank.row(id);
        let mut g = grad.row_mut(i);
        for (gv, &ov) in g.iter_mut().zip(own.iter()) {
            *gv = (*gv - ov) / tau;
        }
    }
    Ok(LossGrad { loss, grad })
}
