//! Label co-occurrence statistics and the positive-PMI embedding.
//!
//! Binary label vectors (image-level class indicators or spatial-pyramid tile
//! indicators) are counted into a [`CooccurrenceTable`]. From it the pointwise
//! mutual information `log p(i,j) / (p(i) p(j))` is computed, negative values
//! and undefined entries are clamped to zero, and the resulting symmetric
//! matrix is factored as `E Eᵀ` with `E = U √Σ`. The full dimension is kept so
//! that projected vectors can be mapped back with the pseudo-inverse of `E`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Maximum tolerated asymmetry of a matrix handed to [`fit_embedding`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

const FORMAT_HEADER: &str = "ppmi-embed v1";

/// Joint and marginal counts of binary labels over a set of labeled units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceTable {
    class_dim: usize,
    joint_counts: Vec<u64>,
    unit_count: u64,
}

impl CooccurrenceTable {
    pub fn class_dim(&self) -> usize {
        self.class_dim
    }

    pub fn unit_count(&self) -> u64 {
        self.unit_count
    }

    /// Number of units in which labels `i` and `j` are both present. The
    /// diagonal holds the per-label occurrence counts.
    pub fn joint(&self, i: usize, j: usize) -> u64 {
        self.joint_counts[i * self.class_dim + j]
    }

    pub fn marginal(&self, i: usize) -> u64 {
        self.joint(i, i)
    }

    /// Row-major `class_dim × class_dim` joint counts.
    pub fn joint_counts(&self) -> &[u64] {
        &self.joint_counts
    }
}

/// Counts pairwise co-occurrences over a sequence of binary label vectors.
pub fn count_cooccurrences<I, V>(label_vectors: I) -> Result<CooccurrenceTable>
where
    I: IntoIterator<Item = V>,
    V: AsRef<[bool]>,
{
    let mut iter = label_vectors.into_iter();
    let first = iter.next().ok_or(Error::NoLabeledUnits)?;
    let class_dim = first.as_ref().len();
    let mut joint_counts = vec![0u64; class_dim * class_dim];
    let mut unit_count = 0u64;
    let mut active = Vec::with_capacity(class_dim);

    for vector in std::iter::once(first).chain(iter) {
        let bits = vector.as_ref();
        if bits.len() != class_dim {
            return Err(Error::DimensionMismatch {
                expected: class_dim,
                actual: bits.len(),
            });
        }
        active.clear();
        active.extend(bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i));
        for &i in &active {
            for &j in &active {
                joint_counts[i * class_dim + j] += 1;
            }
        }
        unit_count += 1;
    }

    Ok(CooccurrenceTable {
        class_dim,
        joint_counts,
        unit_count,
    })
}

/// Pointwise mutual information with an explicit mask for entries whose
/// logarithm is undefined (labels never observed together).
#[derive(Debug, Clone, PartialEq)]
pub struct PmiMatrix {
    pub values: DMatrix<f64>,
    pub defined: DMatrix<bool>,
}

impl PmiMatrix {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.defined[(i, j)].then(|| self.values[(i, j)])
    }
}

/// Natural-log PMI from maximum-likelihood probability estimates.
pub fn compute_pmi(table: &CooccurrenceTable) -> PmiMatrix {
    let n = table.class_dim;
    let units = table.unit_count as f64;
    let mut values = DMatrix::zeros(n, n);
    let mut defined = DMatrix::from_element(n, n, false);
    for i in 0..n {
        for j in 0..n {
            let joint = table.joint(i, j);
            if joint == 0 {
                continue;
            }
            // joint > 0 implies both marginals > 0
            let ratio = (joint as f64 * units) / (table.marginal(i) as f64 * table.marginal(j) as f64);
            values[(i, j)] = ratio.ln();
            defined[(i, j)] = true;
        }
    }
    PmiMatrix { values, defined }
}

/// Elementwise `max(0, PMI)`, with undefined entries mapped to zero.
pub fn compute_ppmi(pmi: &PmiMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(pmi.dim(), pmi.dim(), |i, j| match pmi.get(i, j) {
        Some(v) if v > 0.0 => v,
        _ => 0.0,
    })
}

/// Convenience pipeline: counts → PMI → PPMI → embedding.
pub fn fit_from_labels<I, V>(label_vectors: I) -> Result<EmbeddingModel>
where
    I: IntoIterator<Item = V>,
    V: AsRef<[bool]>,
{
    let table = count_cooccurrences(label_vectors)?;
    fit_embedding(&compute_ppmi(&compute_pmi(&table)))
}

/// Fixed linear label embedding `E = U √Σ` derived from a PPMI matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    ppmi: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    transform: DMatrix<f64>,
    transform_pinv: DMatrix<f64>,
    clamped_mass: f64,
}

impl EmbeddingModel {
    pub fn class_dim(&self) -> usize {
        self.ppmi.nrows()
    }

    pub fn ppmi(&self) -> &DMatrix<f64> {
        &self.ppmi
    }

    /// Eigenvalues in descending order, negative ones clamped to zero.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn transform(&self) -> &DMatrix<f64> {
        &self.transform
    }

    pub fn transform_pinv(&self) -> &DMatrix<f64> {
        &self.transform_pinv
    }

    /// Sum of the magnitudes of the negative eigenvalues that were clamped.
    pub fn clamped_mass(&self) -> f64 {
        self.clamped_mass
    }

    pub fn identity(dim: usize) -> Self {
        let eye = DMatrix::identity(dim, dim);
        EmbeddingModel {
            ppmi: eye.clone(),
            eigenvalues: DVector::from_element(dim, 1.0),
            eigenvectors: eye.clone(),
            transform: eye.clone(),
            transform_pinv: eye,
            clamped_mass: 0.0,
        }
    }

    /// Wraps an arbitrary square transform. Used to test the loss and layer
    /// plumbing with hand-picked matrices; `ppmi` is set to `E Eᵀ`.
    pub fn from_transform(transform: DMatrix<f64>) -> Result<Self> {
        if !transform.is_square() {
            return Err(Error::Shape(format!(
                "transform must be square, got {}x{}",
                transform.nrows(),
                transform.ncols()
            )));
        }
        let n = transform.nrows();
        let transform_pinv = transform
            .clone()
            .pseudo_inverse(f64::EPSILON * n.max(1) as f64 * transform.norm().max(1.0))
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(EmbeddingModel {
            ppmi: &transform * transform.transpose(),
            eigenvalues: DVector::zeros(n),
            eigenvectors: DMatrix::identity(n, n),
            transform,
            transform_pinv,
            clamped_mass: 0.0,
        })
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.class_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.class_dim(),
                actual: len,
            });
        }
        Ok(())
    }

    /// `E·x`
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        Ok(matvec(&self.transform, x))
    }

    /// `pinv(E)·z`; recovers `x` from `E·x` when `x` lies in the row space of `E`.
    pub fn backproject(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_len(z.len())?;
        Ok(matvec(&self.transform_pinv, z))
    }

    /// Serializes to the versioned text format: a header line, the PPMI
    /// matrix, the eigenvalues and `E`, all row-major with 17 significant
    /// digits.
    pub fn to_text(&self) -> String {
        let n = self.class_dim();
        let mut out = format!("{FORMAT_HEADER} dim={n}\n");
        let mut write_row = |row: &mut dyn Iterator<Item = f64>| {
            let line: Vec<String> = row.map(fmt_exact).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        };
        for i in 0..n {
            write_row(&mut (0..n).map(|j| self.ppmi[(i, j)]));
        }
        write_row(&mut self.eigenvalues.iter().copied());
        for i in 0..n {
            write_row(&mut (0..n).map(|j| self.transform[(i, j)]));
        }
        out
    }

    /// Parses [`to_text`](Self::to_text) output. The decomposition is refit
    /// from the stored PPMI matrix and checked against the stored eigenvalues
    /// and transform.
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty embedding file"))?;
        let dim = header
            .strip_prefix(FORMAT_HEADER)
            .and_then(|rest| rest.trim().strip_prefix("dim="))
            .and_then(|d| d.parse::<usize>().ok())
            .ok_or_else(|| Error::parse(path, 1, format!("expected `{FORMAT_HEADER} dim=<n>`")))?;

        let mut read_row = |expected: usize| -> Result<Vec<f64>> {
            let (idx, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, text.lines().count() + 1, "unexpected end of file"))?;
            let values = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| Error::parse(path, idx + 1, format!("bad number `{tok}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != expected {
                return Err(Error::parse(
                    path,
                    idx + 1,
                    format!("expected {expected} values, found {}", values.len()),
                ));
            }
            Ok(values)
        };

        let mut ppmi_rows = Vec::with_capacity(dim * dim);
        for _ in 0..dim {
            ppmi_rows.extend(read_row(dim)?);
        }
        let eigenvalues = read_row(dim)?;
        let mut transform_rows = Vec::with_capacity(dim * dim);
        for _ in 0..dim {
            transform_rows.extend(read_row(dim)?);
        }

        let ppmi = DMatrix::from_row_slice(dim, dim, &ppmi_rows);
        let model = fit_embedding(&ppmi)?;
        let stored_transform = DMatrix::from_row_slice(dim, dim, &transform_rows);
        let eig_err = model
            .eigenvalues
            .iter()
            .zip(&eigenvalues)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let transform_err = (&model.transform - &stored_transform).amax();
        if eig_err > 1e-10 || transform_err > 1e-10 {
            return Err(Error::Invalid {
                path: path.to_path_buf(),
                message: format!(
                    "stored decomposition disagrees with refit (eigenvalues {eig_err:e}, transform {transform_err:e})"
                ),
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

fn fmt_exact(v: f64) -> String {
    format!("{v:.16e}")
}

fn matvec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum())
        .collect()
}

/// Largest `|A(i,j) − A(j,i)|`.
pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Symmetric eigendecomposition of a PPMI matrix into the embedding
/// transform. Eigenvalues are sorted descending; each eigenvector's
/// largest-magnitude entry is made positive; negative eigenvalues are clamped
/// to zero before taking square roots.
pub fn fit_embedding(ppmi: &DMatrix<f64>) -> Result<EmbeddingModel> {
    let n = ppmi.nrows();
    if n == 0 || !ppmi.is_square() {
        return Err(Error::Shape(format!(
            "PPMI must be square and non-empty, got {}x{}",
            ppmi.nrows(),
            ppmi.ncols()
        )));
    }
    if let Some(idx) = ppmi.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(idx));
    }
    let asym = max_asymmetry(ppmi);
    if asym > SYMMETRY_TOLERANCE {
        return Err(Error::NotSymmetric(asym));
    }

    // Symmetrize exactly so the solver sees a symmetric matrix.
    let sym = (ppmi + ppmi.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut eigenvalues = DVector::zeros(n);
    let mut eigenvectors = DMatrix::zeros(n, n);
    let mut clamped_mass = 0.0;
    for (dst, &src) in order.iter().enumerate() {
        let lambda = eig.eigenvalues[src];
        if lambda < 0.0 {
            clamped_mass -= lambda;
        }
        eigenvalues[dst] = lambda.max(0.0);

        let column = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for i in 1..n {
            if column[i].abs() > column[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if column[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            eigenvectors[(i, dst)] = sign * column[i];
        }
    }

    let lambda_max = eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let cutoff = lambda_max * n as f64 * f64::EPSILON;
    let mut transform = DMatrix::zeros(n, n);
    let mut transform_pinv = DMatrix::zeros(n, n);
    for k in 0..n {
        let root = eigenvalues[k].sqrt();
        let inv_root = if eigenvalues[k] > cutoff { 1.0 / root } else { 0.0 };
        for i in 0..n {
            transform[(i, k)] = eigenvectors[(i, k)] * root;
            transform_pinv[(k, i)] = eigenvectors[(i, k)] * inv_root;
        }
    }

    Ok(EmbeddingModel {
        ppmi: ppmi.clone(),
        eigenvalues,
        eigenvectors,
        transform,
        transform_pinv,
        clamped_mass,
    })
}

/// Human-readable dump of a matrix, one row per line.
pub fn format_matrix(m: &DMatrix<f64>, precision: usize) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{:>width$.precision$}", m[(i, j)], width = precision + 4);
        }
        out.push('\n');
    }
    out
}
