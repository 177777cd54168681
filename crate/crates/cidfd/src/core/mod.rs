//! Shared numeric domain types: unit-norm features, memory banks,
//! temperatures, and training configuration.
//!
//! Everything downstream (losses, trainer, evaluation) is written against
//! these types. The invariants they enforce — unit rows, positive
//! temperatures, fixed bank sizes — are what make the loss kernels safe to
//! evaluate without re-checking their inputs.

pub mod checkpoint;
pub mod seed;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ScalarOperand};
use num_traits::{Float, NumAssign};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Debug;
use std::iter::Sum;

use crate::error::{Error, Result};

/// Scalar type used by the numeric kernels. Training runs in `f32`,
/// validation suites in `f64`.
pub trait Real:
    Float + NumAssign + ScalarOperand + ndarray::LinalgScalar + Sum + Send + Sync + Debug + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Tolerance on the L2 norm of anything claiming to be a unit vector.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A d-dimensional feature vector with L2 norm 1.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitFeature<T: Real> {
    values: Array1<T>,
}

impl<T: Real> UnitFeature<T> {
    /// Wraps a vector that is already unit-norm (within [`UNIT_NORM_TOL`]).
    pub fn from_unit(values: Array1<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::ShapeMismatch("unit feature must have d >= 1".into()));
        }
        let norm = l2_norm(values.view()).to_f64();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::InvalidParameter(format!(
                "vector has norm {norm}, expected 1 within {UNIT_NORM_TOL}"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> ArrayView1<'_, T> {
        self.values.view()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Array1<T> {
        self.values
    }
}

/// Scales a vector to unit L2 norm.
///
/// A zero vector has no direction; it is rejected rather than mapped to an
/// arbitrary point on the sphere.
pub fn normalize<T: Real>(values: ArrayView1<'_, T>) -> Result<UnitFeature<T>> {
    if values.is_empty() {
        return Err(Error::ShapeMismatch("cannot normalize an empty vector".into()));
    }
    let norm = l2_norm(values);
    if !norm.is_finite() || norm == T::zero() {
        return Err(Error::DegenerateInput(
            "cannot normalize a zero or non-finite vector".into(),
        ));
    }
    let values = values.mapv(|v| v / norm);
    Ok(UnitFeature { values })
}

pub(crate) fn l2_norm<T: Real>(v: ArrayView1<'_, T>) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Normalizes every row of a matrix in place. Errors on zero rows.
pub fn normalize_rows_in_place<T: Real>(rows: &mut Array2<T>) -> Result<()> {
    for mut row in rows.rows_mut() {
        let norm = l2_norm(row.view());
        if !norm.is_finite() || norm == T::zero() {
            return Err(Error::DegenerateInput(
                "cannot normalize a zero or non-finite row".into(),
            ));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(())
}

/// A batch of unit-norm feature rows together with the dataset indices they
/// were computed from.
#[derive(Debug, Clone)]
pub struct FeatureBatch<T: Real> {
    rows: Array2<T>,
    ids: Vec<usize>,
}

impl<T: Real> FeatureBatch<T> {
    /// Wraps rows that are already unit-norm. `ids` must be distinct.
    pub fn new(rows: Array2<T>, ids: Vec<usize>) -> Result<Self> {
        if rows.nrows() != ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rows but {} ids",
                rows.nrows(),
                ids.len()
            )));
        }
        if rows.ncols() == 0 {
            return Err(Error::ShapeMismatch("feature dimension must be >= 1".into()));
        }
        for (i, row) in rows.rows().into_iter().enumerate() {
            let norm = l2_norm(row).to_f64();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidParameter(format!(
                    "row {i} has norm {norm}, expected 1 within {UNIT_NORM_TOL}"
                )));
            }
        }
        let mut seen = ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("batch ids must be distinct".into()));
        }
        Ok(Self { rows, ids })
    }

    /// Normalizes each row of `raw` and attaches `ids`.
    pub fn from_raw(raw: Array2<T>, ids: Vec<usize>) -> Result<Self> {
        let mut rows = raw;
        normalize_rows_in_place(&mut rows)?;
        Self::new(rows, ids)
    }

    pub fn rows(&self) -> ArrayView2<'_, T> {
        self.rows.view()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// Per-dataset store of unit-norm feature rows, updated by moving average.
///
/// The row count is fixed at construction and equals the dataset size.
#[derive(Debug, Clone)]
pub struct MemoryBank<T: Real> {
    rows: Array2<T>,
    momentum: T,
}

impl<T: Real> MemoryBank<T> {
    /// Initializes `len` rows as independent random unit vectors (uniform on
    /// the d-sphere) drawn from `seed`.
    pub fn new_random(len: usize, dim: usize, momentum: T, seed: u64) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::InvalidParameter(
                "memory bank needs len >= 1 and dim >= 1".into(),
            ));
        }
        check_momentum(momentum)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Array2::zeros((len, dim));
        for mut row in rows.rows_mut() {
            loop {
                // Gaussian components give a direction uniform on the sphere.
                for v in row.iter_mut() {
                    *v = T::from_f64(standard_normal(&mut rng));
                }
                let norm = l2_norm(row.view());
                if norm.to_f64() > 1e-12 {
                    row.mapv_inplace(|v| v / norm);
                    break;
                }
            }
        }
        Ok(Self { rows, momentum })
    }

    /// Wraps existing unit-norm rows (used when restoring checkpoints).
    pub fn from_rows(rows: Array2<T>, momentum: T) -> Result<Self> {
        check_momentum(momentum)?;
        for (i, row) in rows.rows().into_iter().enumerate() {
            let norm = l2_norm(row).to_f64();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidParameter(format!(
                    "bank row {i} has norm {norm}, expected 1 within {UNIT_NORM_TOL}"
                )));
            }
        }
        Ok(Self { rows, momentum })
    }

    pub fn rows(&self) -> ArrayView2<'_, T> {
        self.rows.view()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn momentum(&self) -> T {
        self.momentum
    }

    /// Moving-average update: for each batch id `i`,
    /// `row_i <- normalize(beta * row_i + (1 - beta) * feature_i)`.
    /// Rows not referenced by the batch are untouched.
    pub fn update(&mut self, batch: &FeatureBatch<T>) -> Result<()> {
        if batch.dim() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "batch dim {} vs bank dim {}",
                batch.dim(),
                self.dim()
            )));
        }
        for &id in batch.ids() {
            if id >= self.len() {
                return Err(Error::IndexOutOfRange(format!(
                    "batch id {id} for bank of {} rows",
                    self.len()
                )));
            }
        }
        let beta = self.momentum;
        let one_minus = T::one() - beta;
        for (&id, feature) in batch.ids().iter().zip(batch.rows().rows()) {
            let mut row = self.rows.row_mut(id);
            for (r, &f) in row.iter_mut().zip(feature.iter()) {
                *r = beta * *r + one_minus * f;
            }
            let norm = l2_norm(row.view());
            if !norm.is_finite() || norm == T::zero() {
                return Err(Error::DegenerateInput(format!(
                    "bank row {id} collapsed to zero during moving-average update"
                )));
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(())
    }
}

fn check_momentum<T: Real>(momentum: T) -> Result<()> {
    let m = momentum.to_f64();
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidParameter(format!(
            "bank momentum {m} outside [0, 1]"
        )));
    }
    Ok(())
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one value per call keeps the stream layout simple.
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// `sims[i][j] = a_i . b_j` for unit rows; every entry lies in [-1, 1]
/// up to rounding.
pub fn similarity_matrix<T: Real>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Result<Array2<T>> {
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "feature dims differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(a.dot(&b.t()))
}

/// The four softmax temperatures: background instance discrimination,
/// feature decorrelation, target instance discrimination, and the weight
/// coefficient scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSet<T: Real> {
    pub tau_b: T,
    pub tau_2: T,
    pub tau_x: T,
    pub tau_xb: T,
}

impl<T: Real> TemperatureSet<T> {
    pub fn new(tau_b: T, tau_2: T, tau_x: T, tau_xb: T) -> Result<Self> {
        for (name, v) in [
            ("tau_b", tau_b),
            ("tau_2", tau_2),
            ("tau_x", tau_x),
            ("tau_xb", tau_xb),
        ] {
            check_temperature(name, v)?;
        }
        Ok(Self {
            tau_b,
            tau_2,
            tau_x,
            tau_xb,
        })
    }
}

impl<T: Real> Default for TemperatureSet<T> {
    fn default() -> Self {
        Self {
            tau_b: T::one(),
            tau_2: T::from_f64(2.0),
            tau_x: T::one(),
            tau_xb: T::one(),
        }
    }
}

pub(crate) fn check_temperature<T: Real>(name: &str, v: T) -> Result<()> {
    if !(v > T::zero()) || !v.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature {name} must be strictly positive and finite, got {:?}",
            v
        )));
    }
    Ok(())
}

/// Two-stage schedule and optimizer settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs for the background encoder (stage 1).
    pub epochs_bg: usize,
    /// Epochs for the target encoder (stage 2).
    pub epochs_tg: usize,
    pub batch_size: usize,
    /// Feature dimensionality d.
    pub dim: usize,
    /// Moving-average coefficient for all memory banks.
    pub bank_momentum: f64,
    /// Initial learning rate; decays to 0 on a cosine schedule per stage.
    pub learning_rate: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub weight_decay: f64,
    /// Root seed; every random stream in a run derives from it.
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 = stage boundaries only).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Clip the global L2 norm of parameter gradients per step (0 = off).
    #[serde(default)]
    pub grad_clip: f64,
    /// Linear learning-rate warmup over this many leading epochs per stage.
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Precompute the background-feature bank once instead of re-embedding
    /// every augmented view through the frozen encoder.
    #[serde(default)]
    pub cache_bg_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_bg: 30,
            epochs_tg: 60,
            batch_size: 128,
            dim: 64,
            bank_momentum: 0.5,
            learning_rate: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: 0.0,
            warmup_epochs: 0,
            cache_bg_features: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.dim == 0 {
            return Err(Error::InvalidParameter(
                "batch_size and dim must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.bank_momentum) {
            return Err(Error::InvalidParameter(format!(
                "bank_momentum {} outside [0, 1]",
                self.bank_momentum
            )));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}
