//! Observed data, instrument assignment, validation and centering.
//!
//! The structural system is `Y = Y·Γ + X·Ψ + ε` with `Y` holding `n`
//! observations of `p` endogenous variables and `X` holding `n`
//! observations of `q` exogenous variables. Each endogenous variable `k`
//! owns a nonempty set `S_k` of exogenous columns, and the sets are
//! pairwise disjoint; this is what makes every equation identifiable.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Observed endogenous (`y`, n×p) and exogenous (`x`, n×q) matrices.
///
/// Row `i` of both matrices describes the same observational unit.
/// Construction performs no checks; use [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    y: DMatrix<f64>,
    x: DMatrix<f64>,
    endo_names: Vec<String>,
    exo_names: Vec<String>,
}

impl DataSet {
    pub fn new(
        y: DMatrix<f64>,
        x: DMatrix<f64>,
        endo_names: Vec<String>,
        exo_names: Vec<String>,
    ) -> Self {
        Self {
            y,
            x,
            endo_names,
            exo_names,
        }
    }

    /// Builds a data set with generated names `Y1..Yp` and `X1..Xq`.
    pub fn unnamed(y: DMatrix<f64>, x: DMatrix<f64>) -> Self {
        let endo_names = (1..=y.ncols()).map(|j| format!("Y{j}")).collect();
        let exo_names = (1..=x.ncols()).map(|i| format!("X{i}")).collect();
        Self::new(y, x, endo_names, exo_names)
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn endo_names(&self) -> &[String] {
        &self.endo_names
    }

    pub fn exo_names(&self) -> &[String] {
        &self.exo_names
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    /// Copies the given rows (with repetition) into a new data set.
    pub fn select_rows(&self, rows: &[usize]) -> DataSet {
        DataSet {
            y: self.y.select_rows(rows),
            x: self.x.select_rows(rows),
            endo_names: self.endo_names.clone(),
            exo_names: self.exo_names.clone(),
        }
    }

    /// Returns a copy with both matrices column-centered.
    pub fn centered(&self) -> DataSet {
        DataSet {
            y: center_columns(&self.y).0,
            x: center_columns(&self.x).0,
            endo_names: self.endo_names.clone(),
            exo_names: self.exo_names.clone(),
        }
    }
}

/// The disjoint exogenous index sets `S_k`, one per endogenous variable.
/// Indices are zero-based columns of `X`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExoAssignment {
    sets: Vec<Vec<usize>>,
}

impl ExoAssignment {
    pub fn new(sets: Vec<Vec<usize>>) -> Self {
        Self { sets }
    }

    /// `count` consecutive exogenous columns per endogenous variable.
    pub fn consecutive_blocks(p: usize, count: usize) -> Self {
        Self::new(
            (0..p)
                .map(|k| (k * count..(k + 1) * count).collect())
                .collect(),
        )
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    pub fn set(&self, k: usize) -> &[usize] {
        &self.sets[k]
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Owner of each exogenous column, `None` for unassigned columns.
    pub fn owners(&self, q: usize) -> Vec<Option<usize>> {
        let mut owner = vec![None; q];
        for (k, set) in self.sets.iter().enumerate() {
            for &i in set {
                if i < q {
                    owner[i] = Some(k);
                }
            }
        }
        owner
    }
}

/// First violated rule found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationFailure {
    TooFewObservations { n: usize },
    NoEndogenous,
    NoExogenous,
    RowMismatch { y_rows: usize, x_rows: usize },
    NameCount { matrix: &'static str, names: usize, columns: usize },
    AssignmentCount { sets: usize, p: usize },
    IndexOutOfRange { equation: usize, index: usize, q: usize },
    EmptySet { equation: usize },
    Overlap { index: usize, first: usize, second: usize },
    NonFinite { matrix: &'static str, row: usize, col: usize },
}

impl fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ValidationFailure::*;
        match self {
            TooFewObservations { n } => write!(f, "need at least 2 observations, got {n}"),
            NoEndogenous => write!(f, "no endogenous variables"),
            NoExogenous => write!(f, "no exogenous variables"),
            RowMismatch { y_rows, x_rows } => {
                write!(f, "dimension mismatch: Y has {y_rows} rows, X has {x_rows}")
            }
            NameCount {
                matrix,
                names,
                columns,
            } => write!(
                f,
                "dimension mismatch: {matrix} has {columns} columns but {names} names"
            ),
            AssignmentCount { sets, p } => write!(
                f,
                "dimension mismatch: {sets} exogenous sets for {p} endogenous variables"
            ),
            IndexOutOfRange { equation, index, q } => write!(
                f,
                "S_{equation} references exogenous index {index}, but q = {q}"
            ),
            EmptySet { equation } => write!(f, "S_{equation} empty"),
            Overlap {
                index,
                first,
                second,
            } => write!(
                f,
                "overlap at exogenous index {index} (S_{first} and S_{second})"
            ),
            NonFinite { matrix, row, col } => {
                write!(f, "non-finite entry in {matrix} at row {row}, column {col}")
            }
        }
    }
}

/// Non-fatal findings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationWarning {
    /// Zero-variance exogenous column; contributes nothing after centering.
    ConstantExogenous { index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub failure: Option<ValidationFailure>,
    pub warnings: Vec<ValidationWarning>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }

    pub fn into_result(self) -> crate::Result<Vec<ValidationWarning>> {
        match self.failure {
            None => Ok(self.warnings),
            Some(f) => Err(crate::Error::Validation(f)),
        }
    }
}

/// Checks shapes, finiteness and the disjoint-nonempty rule for `ea`.
pub fn validate(ds: &DataSet, ea: &ExoAssignment) -> ValidationReport {
    let failure = first_failure(ds, ea);
    let warnings = if failure.is_none() {
        (0..ds.q())
            .filter(|&i| {
                let col = ds.x.column(i);
                let first = col[0];
                col.iter().all(|&v| v == first)
            })
            .map(|index| ValidationWarning::ConstantExogenous { index })
            .collect()
    } else {
        Vec::new()
    };
    ValidationReport { failure, warnings }
}

fn first_failure(ds: &DataSet, ea: &ExoAssignment) -> Option<ValidationFailure> {
    use ValidationFailure::*;
    let (n, p, q) = (ds.y.nrows(), ds.p(), ds.q());
    if ds.x.nrows() != n {
        return Some(RowMismatch {
            y_rows: n,
            x_rows: ds.x.nrows(),
        });
    }
    if n < 2 {
        return Some(TooFewObservations { n });
    }
    if p == 0 {
        return Some(NoEndogenous);
    }
    if q == 0 {
        return Some(NoExogenous);
    }
    if ds.endo_names.len() != p {
        return Some(NameCount {
            matrix: "Y",
            names: ds.endo_names.len(),
            columns: p,
        });
    }
    if ds.exo_names.len() != q {
        return Some(NameCount {
            matrix: "X",
            names: ds.exo_names.len(),
            columns: q,
        });
    }
    if ea.len() != p {
        return Some(AssignmentCount { sets: ea.len(), p });
    }
    let mut owner: Vec<Option<usize>> = vec![None; q];
    for (k, set) in ea.sets.iter().enumerate() {
        if set.is_empty() {
            return Some(EmptySet { equation: k });
        }
        for &i in set {
            if i >= q {
                return Some(IndexOutOfRange {
                    equation: k,
                    index: i,
                    q,
                });
            }
            match owner[i] {
                Some(first) => {
                    return Some(Overlap {
                        index: i,
                        first,
                        second: k,
                    })
                }
                None => owner[i] = Some(k),
            }
        }
    }
    for (matrix, m) in [("Y", &ds.y), ("X", &ds.x)] {
        for col in 0..m.ncols() {
            for row in 0..m.nrows() {
                if !m[(row, col)].is_finite() {
                    return Some(NonFinite { matrix, row, col });
                }
            }
        }
    }
    None
}

/// Subtracts each column's mean. Returns the centered matrix and the means.
pub fn center_columns(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = m.nrows();
    assert!(n >= 1, "center_columns needs at least one row");
    let mut out = m.clone();
    let mut means = DVector::zeros(m.ncols());
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
        // second pass removes the rounding residue of the first
        let residue = col.sum() / n as f64;
        col.add_scalar_mut(-residue);
        means[j] = mean + residue;
    }
    (out, means)
}
