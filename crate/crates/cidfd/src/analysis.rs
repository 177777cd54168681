//! Diagnostics over learned representations: per-instance similarity
//! statistics grouped by pair type, and 2-D projection export for scatter
//! plots. Both emit CSV files consumed by external plotting tools.

use ndarray::{Array1, Array2, ArrayView2};
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// The four pair types of the similarity analysis, defined by whether two
/// instances share the background label and/or the target label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairType {
    SameBgDiffTg,
    DiffBgSameTg,
    SameBgSameTg,
    DiffBgDiffTg,
}

impl PairType {
    pub const ALL: [PairType; 4] = [
        PairType::SameBgDiffTg,
        PairType::DiffBgSameTg,
        PairType::SameBgSameTg,
        PairType::DiffBgDiffTg,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PairType::SameBgDiffTg => "same_bg_diff_tg",
            PairType::DiffBgSameTg => "diff_bg_same_tg",
            PairType::SameBgSameTg => "same_bg_same_tg",
            PairType::DiffBgDiffTg => "diff_bg_diff_tg",
        }
    }

    fn index(same_bg: bool, same_tg: bool) -> usize {
        match (same_bg, same_tg) {
            (true, false) => 0,
            (false, true) => 1,
            (true, true) => 2,
            (false, false) => 3,
        }
    }
}

/// Per-instance mean similarities and their histogram for one pair type.
#[derive(Debug, Clone)]
pub struct TypeStats {
    /// Mean cosine similarity of instance `i` to its partners of this type;
    /// `None` when the instance has no partner of this type.
    pub instance_means: Vec<Option<f64>>,
    /// Histogram bin counts over the instance means.
    pub counts: Vec<u64>,
    /// Number of instances having at least one partner of this type.
    pub with_partner: usize,
    /// Mean over `instance_means` (instances with partners only); NaN if none.
    pub mean: f64,
}

/// Similarity statistics for all four pair types over one dataset.
#[derive(Debug, Clone)]
pub struct PairTypeStats {
    /// `bins + 1` edges spanning [-1, 1].
    pub bin_edges: Vec<f64>,
    pub types: [TypeStats; 4],
}

impl PairTypeStats {
    pub fn stats(&self, t: PairType) -> &TypeStats {
        &self.types[PairType::ALL.iter().position(|&x| x == t).unwrap()]
    }
}

/// Default block size for the blocked similarity products.
const SIM_BLOCK: usize = 256;

/// Computes, for every instance, its mean cosine similarity to all other
/// instances of each pair type, plus a histogram per type.
///
/// `features` rows are assumed unit-norm (encoder output); self-pairs are
/// excluded. Instances without a partner in one type are excluded from that
/// type's histogram and counted in `with_partner` bookkeeping.
pub fn pair_similarity_stats(
    features: ArrayView2<'_, f64>,
    target_labels: &[usize],
    background_labels: &[usize],
    bins: usize,
) -> Result<PairTypeStats> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::ShapeMismatch("no instances".into()));
    }
    if target_labels.len() != n || background_labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows vs {} target / {} background labels",
            n,
            target_labels.len(),
            background_labels.len()
        )));
    }
    if bins == 0 {
        return Err(Error::InvalidParameter("bins must be positive".into()));
    }
    let mut sums = vec![[0.0f64; 4]; n];
    let mut counts = vec![[0u64; 4]; n];
    // Blocked products keep the similarity matrix out of memory.
    let mut start = 0usize;
    while start < n {
        let stop = (start + SIM_BLOCK).min(n);
        let block = features.slice(ndarray::s![start..stop, ..]);
        let sims = block.dot(&features.t()); // (stop-start) x n
        for bi in 0..(stop - start) {
            let i = start + bi;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let t = PairType::index(
                    background_labels[i] == background_labels[j],
                    target_labels[i] == target_labels[j],
                );
                sums[i][t] += sims[[bi, j]];
                counts[i][t] += 1;
            }
        }
        start = stop;
    }
    let bin_edges: Vec<f64> = (0..=bins).map(|b| -1.0 + 2.0 * b as f64 / bins as f64).collect();
    let types: Vec<TypeStats> = (0..4)
        .map(|t| {
            let mut instance_means = Vec::with_capacity(n);
            let mut hist = vec![0u64; bins];
            let mut with_partner = 0usize;
            let mut total = 0.0;
            for i in 0..n {
                if counts[i][t] == 0 {
                    instance_means.push(None);
                    continue;
                }
                let mean = sums[i][t] / counts[i][t] as f64;
                instance_means.push(Some(mean));
                with_partner += 1;
                total += mean;
                let clamped = mean.clamp(-1.0, 1.0);
                let mut b = (((clamped + 1.0) / 2.0) * bins as f64) as usize;
                if b >= bins {
                    b = bins - 1;
                }
                hist[b] += 1;
            }
            TypeStats {
                instance_means,
                counts: hist,
                with_partner,
                mean: if with_partner > 0 {
                    total / with_partner as f64
                } else {
                    f64::NAN
                },
            }
        })
        .collect();
    let types: [TypeStats; 4] = types.try_into().expect("four pair types");
    Ok(PairTypeStats { bin_edges, types })
}

/// Projection method for [`project_2d`]. Principal components is the
/// deterministic, dependency-free default; external methods can be plugged
/// in as callables over the feature matrix.
pub enum Projection2d<'a> {
    PrincipalComponents,
    External(&'a dyn Fn(ArrayView2<'_, f64>, u64) -> Result<Array2<f64>>),
}

/// Projects N x d features onto 2-D, deterministically given `seed`.
///
/// The principal-component route centers the data, eigendecomposes the
/// covariance (cyclic Jacobi), and projects onto the two leading
/// eigenvectors with a fixed sign convention.
pub fn project_2d(
    features: ArrayView2<'_, f64>,
    method: Projection2d<'_>,
    seed: u64,
) -> Result<Array2<f64>> {
    let (n, d) = features.dim();
    if n < 2 {
        return Err(Error::InvalidParameter(
            "projection needs at least 2 samples".into(),
        ));
    }
    match method {
        Projection2d::External(f) => {
            let out = f(features, seed)?;
            if out.dim() != (n, 2) {
                return Err(Error::ShapeMismatch(format!(
                    "external projection returned {:?}, expected ({n}, 2)",
                    out.dim()
                )));
            }
            Ok(out)
        }
        Projection2d::PrincipalComponents => {
            let mean = features.mean_axis(ndarray::Axis(0)).expect("n >= 2");
            let centered = &features - &mean.view().insert_axis(ndarray::Axis(0));
            let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
            let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale < 1e-24 {
                return Err(Error::DegenerateInput(
                    "all rows identical: covariance has rank 0".into(),
                ));
            }
            let (eigvals, eigvecs) = jacobi_eigen(&cov);
            // top-2 by eigenvalue, index order breaking ties
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| {
                eigvals[b]
                    .partial_cmp(&eigvals[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let mut basis = Array2::<f64>::zeros((d, 2));
            for (out_col, &src) in order.iter().take(2).enumerate() {
                let mut col = eigvecs.column(src).to_owned();
                // fix sign: largest-magnitude component positive
                let mut lead = 0usize;
                for (i, v) in col.iter().enumerate() {
                    if v.abs() > col[lead].abs() {
                        lead = i;
                    }
                }
                if col[lead] < 0.0 {
                    col.mapv_inplace(|v| -v);
                }
                basis.column_mut(out_col).assign(&col);
            }
            // d = 1 input: second axis stays zero.
            Ok(centered.dot(&basis))
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns (eigenvalues, eigenvectors as columns).
fn jacobi_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let d = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(d);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let mip = m[[i, p]];
                    let miq = m[[i, q]];
                    m[[i, p]] = c * mip - s * miq;
                    m[[i, q]] = s * mip + c * miq;
                }
                for j in 0..d {
                    let mpj = m[[p, j]];
                    let mqj = m[[q, j]];
                    m[[p, j]] = c * mpj - s * mqj;
                    m[[q, j]] = s * mpj + c * mqj;
                }
                for i in 0..d {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    let eig = Array1::from_iter((0..d).map(|i| m[[i, i]]));
    (eig, v)
}

/// Sidecar metadata written next to the histogram CSV.
#[derive(Debug, Serialize)]
struct HistogramSidecar<'a> {
    bin_edges: &'a [f64],
    with_partner: [usize; 4],
    pair_types: [&'static str; 4],
}

/// Writes the pair-type histogram CSV (`pair_type,bin_left,bin_right,count`)
/// plus a JSON sidecar recording bin edges and partner counts.
pub fn export_histograms(stats: &PairTypeStats, csv_path: &Path, sidecar_path: &Path) -> Result<()> {
    let mut out = String::from("pair_type,bin_left,bin_right,count\n");
    for (ti, t) in PairType::ALL.iter().enumerate() {
        let s = &stats.types[ti];
        for (b, &cnt) in s.counts.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                t.label(),
                stats.bin_edges[b],
                stats.bin_edges[b + 1],
                cnt
            ));
        }
    }
    write_file(csv_path, out.as_bytes())?;
    let sidecar = HistogramSidecar {
        bin_edges: &stats.bin_edges,
        with_partner: [
            stats.types[0].with_partner,
            stats.types[1].with_partner,
            stats.types[2].with_partner,
            stats.types[3].with_partner,
        ],
        pair_types: [
            PairType::ALL[0].label(),
            PairType::ALL[1].label(),
            PairType::ALL[2].label(),
            PairType::ALL[3].label(),
        ],
    };
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::format(sidecar_path, e.to_string()))?;
    write_file(sidecar_path, text.as_bytes())
}

/// Writes the 2-D projection CSV (`x,y,target_label,background_label`);
/// missing labels leave the cell empty.
pub fn export_projection(
    projection: ArrayView2<'_, f64>,
    target_labels: Option<&[usize]>,
    background_labels: Option<&[usize]>,
    path: &Path,
) -> Result<()> {
    if projection.ncols() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "projection must be N x 2, got {:?}",
            projection.dim()
        )));
    }
    for labels in [target_labels, background_labels].into_iter().flatten() {
        if labels.len() != projection.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} projected rows",
                labels.len(),
                projection.nrows()
            )));
        }
    }
    let mut out = String::from("x,y,target_label,background_label\n");
    for i in 0..projection.nrows() {
        let tl = target_labels.map_or(String::new(), |l| l[i].to_string());
        let bl = background_labels.map_or(String::new(), |l| l[i].to_string());
        out.push_str(&format!(
            "{},{},{},{}\n",
            projection[[i, 0]],
            projection[[i, 1]],
            tl,
            bl
        ));
    }
    write_file(path, out.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
