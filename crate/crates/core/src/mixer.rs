//! The matrix-mixer view of a sequence transformation.
//!
//! A sequence transformation maps `X` (T×d) to `Y = M X` where `M` is a T×T
//! mixing matrix produced from the input. Attention, FAVOR+, selective SSMs,
//! Bi-Mamba and Hydra all fit this view and differ only in the structural
//! class of `M`. This module holds the shared types and the block-rank
//! machinery used to verify those classes.

use std::fmt;

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{MixError, Result};

/// Default relative tolerance for numerical rank: a singular value counts iff
/// `sigma_k > tol * sigma_max`.
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

/// A length-T, width-d real sequence. Rows are time steps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    data: Array2<f64>,
}

impl FeatureSequence {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (t, d) = data.dim();
        if t == 0 || d == 0 {
            return Err(MixError::shape("FeatureSequence", "T >= 1 and d >= 1", format!("{t}x{d}")));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(MixError::NonFinite("FeatureSequence"));
        }
        let data = if data.is_standard_layout() { data } else { data.as_standard_layout().into_owned() };
        Ok(Self { data })
    }

    /// Single-channel sequence from a vector of length T.
    pub fn from_channel(x: &[f64]) -> Result<Self> {
        let data = Array2::from_shape_vec((x.len(), 1), x.to_vec())
            .map_err(|e| MixError::InvalidArgument(e.to_string()))?;
        Self::new(data)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn channel(&self, c: usize) -> Array1<f64> {
        self.data.column(c).to_owned()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }
}

/// Structural class of a mixer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MixerClass {
    Dense,
    LowRank(usize),
    Semiseparable(usize),
    Quasiseparable(usize),
}

impl fmt::Display for MixerClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixerClass::Dense => write!(f, "dense"),
            MixerClass::LowRank(r) => write!(f, "low_rank({r})"),
            MixerClass::Semiseparable(n) => write!(f, "semiseparable({n})"),
            MixerClass::Quasiseparable(n) => write!(f, "quasiseparable({n})"),
        }
    }
}

/// An explicit T×T mixing matrix tagged with the class it was built to have.
///
/// The tag records intent; [`check_structure`] verifies it.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixMixer {
    m: Array2<f64>,
    class: MixerClass,
}

impl MatrixMixer {
    pub fn new(m: Array2<f64>, class: MixerClass) -> Result<Self> {
        let (rows, cols) = m.dim();
        if rows != cols || rows == 0 {
            return Err(MixError::shape("MatrixMixer", "non-empty square matrix", format!("{rows}x{cols}")));
        }
        if !m.iter().all(|v| v.is_finite()) {
            return Err(MixError::NonFinite("MatrixMixer"));
        }
        if let MixerClass::LowRank(0)
        | MixerClass::Semiseparable(0)
        | MixerClass::Quasiseparable(0) = class
        {
            return Err(MixError::InvalidArgument(format!("class {class} needs a positive order")));
        }
        Ok(Self { m, class })
    }

    pub fn identity(t: usize) -> Result<Self> {
        Self::new(Array2::eye(t), MixerClass::Dense)
    }

    pub fn len(&self) -> usize {
        self.m.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn class(&self) -> MixerClass {
        self.class
    }

    pub fn with_class(self, class: MixerClass) -> Result<Self> {
        Self::new(self.m, class)
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.m.view()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[[i, j]]
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.m.row(i)
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.m
    }
}

/// `Y = M X`.
pub fn apply_mixer(mixer: &MatrixMixer, x: &FeatureSequence) -> Result<FeatureSequence> {
    if mixer.len() != x.len() {
        return Err(MixError::shape("apply_mixer", format!("T = {}", mixer.len()), format!("T = {}", x.len())));
    }
    FeatureSequence::new(mixer.m.dot(&x.view()))
}

/// Single-channel convenience: `y = M x`.
pub fn apply_mixer_vec(mixer: &MatrixMixer, x: &[f64]) -> Result<Vec<f64>> {
    if mixer.len() != x.len() {
        return Err(MixError::shape("apply_mixer", format!("T = {}", mixer.len()), format!("T = {}", x.len())));
    }
    Ok(mixer.m.dot(&ArrayView1::from(x)).to_vec())
}

/// Half-open block coordinates `rows[row_start..row_end] x cols[col_start..col_end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockCoords {
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
}

impl fmt::Display for BlockCoords {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}:{}, {}:{}]",
            self.row_start, self.row_end, self.col_start, self.col_end
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub block: BlockCoords,
    pub rank: usize,
    pub allowed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructureReport {
    pub checked_class: MixerClass,
    pub max_offdiag_block_rank: usize,
    pub violations: Vec<Violation>,
}

impl StructureReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Singular values of a (possibly non-contiguous) matrix view, descending.
pub fn singular_values(m: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    let dm = DMatrix::from_fn(rows, cols, |i, j| m[[i, j]]);
    let svd = dm
        .try_svd(false, false, f64::EPSILON, 10_000)
        .ok_or(MixError::SvdNonConvergence)?;
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Number of singular values above `tol * sigma_max`. A zero matrix has rank 0.
pub fn matrix_rank(m: ArrayView2<'_, f64>, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(MixError::InvalidArgument(format!("rank tolerance must be > 0, got {tol}")));
    }
    let sv = singular_values(m)?;
    let Some(&max) = sv.first() else {
        return Ok(0);
    };
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > tol * max).count())
}

/// Verifies the block-rank structure implied by `class` on `mixer`'s matrix.
///
/// Only maximal blocks are examined; every contiguous sub-block of a maximal
/// block has rank at most the maximal block's rank.
///
/// * `semiseparable(N)`: the T diagonal-touching lower blocks `m[i.., ..=i]`
///   have rank ≤ N and the strictly-upper blocks `m[..i, i..]` are zero.
/// * `quasiseparable(N)`: the strictly-lower blocks `m[i.., ..i]` and the
///   strictly-upper blocks `m[..i, i..]` have rank ≤ N.
/// * `low_rank(r)`: the whole matrix has rank ≤ min(T, r).
/// * `dense`: nothing to violate; the report still carries the largest
///   strictly-off-diagonal block rank.
pub fn check_structure(mixer: &MatrixMixer, class: MixerClass, tol: f64) -> Result<StructureReport> {
    if !(tol > 0.0) {
        return Err(MixError::InvalidArgument(format!("structure tolerance must be > 0, got {tol}")));
    }
    let t = mixer.len();
    let m = mixer.matrix();

    let lower_strict = (1..t).map(|i| BlockCoords { row_start: i, row_end: t, col_start: 0, col_end: i });
    let upper_strict = (1..t).map(|i| BlockCoords { row_start: 0, row_end: i, col_start: i, col_end: t });
    let lower_touching = (0..t).map(|i| BlockCoords { row_start: i, row_end: t, col_start: 0, col_end: i + 1 });
    let whole = BlockCoords { row_start: 0, row_end: t, col_start: 0, col_end: t };

    // (block, allowed rank, counts toward max_offdiag_block_rank)
    let checks: Vec<(BlockCoords, usize, bool)> = match class {
        MixerClass::Dense => lower_strict
            .chain(upper_strict)
            .map(|b| (b, usize::MAX, true))
            .collect(),
        MixerClass::LowRank(r) => {
            let mut v: Vec<_> = lower_strict
                .chain(upper_strict)
                .map(|b| (b, usize::MAX, true))
                .collect();
            v.push((whole, r.min(t), false));
            v
        }
        MixerClass::Semiseparable(n) => lower_touching
            .map(|b| (b, n, true))
            .chain(upper_strict.map(|b| (b, 0, true)))
            .collect(),
        MixerClass::Quasiseparable(n) => lower_strict
            .chain(upper_strict)
            .map(|b| (b, n, true))
            .collect(),
    };

    let mut report = StructureReport {
        checked_class: class,
        max_offdiag_block_rank: 0,
        violations: Vec::new(),
    };
    for (block, allowed, offdiag) in checks {
        let view = m.slice(s![block.row_start..block.row_end, block.col_start..block.col_end]);
        let rank = matrix_rank(view, tol)?;
        if offdiag {
            report.max_offdiag_block_rank = report.max_offdiag_block_rank.max(rank);
        }
        if rank > allowed {
            report.violations.push(Violation { block, rank, allowed });
        }
    }
    Ok(report)
}
