//! Attention-map diagnostics that apply to any [`MatrixMixer`]: head averaging,
//! numerical rank, pairwise row-distance histograms and locality profiles.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Zip};

use crate::attention::{draw_orthogonal_features, favor_mixer, softmax_mixer};
use crate::error::{MixError, Result};
use crate::mixer::{matrix_rank, MatrixMixer, MixerClass};

pub const DEFAULT_HISTOGRAM_BINS: usize = 50;

/// Width of the single bin used when every distance is zero.
pub const EMPTY_RANGE_WIDTH: f64 = f64::EPSILON;

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    /// `(lo, hi, count)` per bin.
    pub fn bins(&self) -> impl Iterator<Item = (f64, f64, u64)> + '_ {
        self.bin_edges.windows(2).zip(&self.counts).map(|(e, &c)| (e[0], e[1], c))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixerReport {
    pub label: String,
    pub rank: usize,
    pub row_sum_range: (f64, f64),
    pub l2_histogram: Histogram,
    /// `(window, mass)` pairs.
    pub locality_mass: Vec<(usize, f64)>,
}

/// Elementwise mean of same-sized mixers. The result is tagged dense.
pub fn head_average(mixers: &[MatrixMixer]) -> Result<MatrixMixer> {
    let first = mixers
        .first()
        .ok_or_else(|| MixError::InvalidArgument("head_average needs at least one mixer".into()))?;
    let t = first.len();
    let mut sum = Array2::<f64>::zeros((t, t));
    for m in mixers {
        if m.len() != t {
            return Err(MixError::shape("head_average", format!("{t}x{t}"), format!("{0}x{0}", m.len())));
        }
        sum += &m.matrix();
    }
    sum /= mixers.len() as f64;
    MatrixMixer::new(sum, MixerClass::Dense)
}

pub fn numerical_rank(mixer: &MatrixMixer, tol: f64) -> Result<usize> {
    matrix_rank(mixer.matrix(), tol)
}

/// `‖row_i − row_j‖₂` for all `i < j`, in row-major pair order.
pub fn pairwise_row_distances(m: ArrayView2<'_, f64>) -> Vec<f64> {
    let t = m.nrows();
    let mut out = Vec::with_capacity(t * t.saturating_sub(1) / 2);
    for i in 0..t {
        for j in i + 1..t {
            let sq = Zip::from(m.row(i)).and(m.row(j)).fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
            out.push(sq.sqrt());
        }
    }
    out
}

/// Bins `values` into `bins` equal-width bins over `[0, max]`; the last bin is
/// closed on the right. If every value is zero (or there are none) the result
/// is one bin `[0, EMPTY_RANGE_WIDTH)`.
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(MixError::InvalidArgument("histogram needs at least one bin".into()));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(MixError::NumericRange(format!("histogram value {bad} outside [0, inf)")));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let total = values.len() as u64;
    if max == 0.0 {
        return Ok(Histogram { bin_edges: vec![0.0, EMPTY_RANGE_WIDTH], counts: vec![total], total });
    }
    let bin_edges: Vec<f64> = (0..=bins).map(|i| if i == bins { max } else { max * i as f64 / bins as f64 }).collect();
    let interior = &bin_edges[1..bins];
    let mut counts = vec![0u64; bins];
    for &v in values {
        counts[interior.partition_point(|&e| e <= v)] += 1;
    }
    Ok(Histogram { bin_edges, counts, total })
}

pub fn pairwise_l2_histogram(mixer: &MatrixMixer, bins: usize) -> Result<Histogram> {
    histogram(&pairwise_row_distances(mixer.matrix()), bins)
}

/// Mean over rows of the share of absolute row mass within `window` of the
/// diagonal. An all-zero row counts as fully local.
pub fn locality_mass(mixer: &MatrixMixer, window: usize) -> f64 {
    let t = mixer.len();
    let mut acc = 0.0;
    for i in 0..t {
        let row = mixer.row(i);
        let total: f64 = row.iter().map(|v| v.abs()).sum();
        if total == 0.0 {
            acc += 1.0;
            continue;
        }
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(t - 1);
        let near: f64 = row.slice(ndarray::s![lo..=hi]).iter().map(|v| v.abs()).sum();
        acc += (near / total).min(1.0);
    }
    acc / t as f64
}

pub fn row_sum_range(mixer: &MatrixMixer) -> (f64, f64) {
    mixer
        .matrix()
        .rows()
        .into_iter()
        .map(|r| r.sum())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)))
}

pub fn mixer_report(label: &str, mixer: &MatrixMixer, windows: &[usize], bins: usize, tol: f64) -> Result<MixerReport> {
    Ok(MixerReport {
        label: label.to_string(),
        rank: numerical_rank(mixer, tol)?,
        row_sum_range: row_sum_range(mixer),
        l2_histogram: pairwise_l2_histogram(mixer, bins)?,
        locality_mass: windows.iter().map(|&w| (w, locality_mass(mixer, w))).collect(),
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// For each `r`, the median over `seeds` of
/// `‖favor_mixer − softmax_mixer‖_F / ‖softmax_mixer‖_F`.
pub fn approximation_error_curve(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    r_values: &[usize],
    seeds: &[u64],
) -> Result<Vec<(usize, f64)>> {
    if r_values.is_empty() || seeds.is_empty() {
        return Err(MixError::InvalidArgument("approximation_error_curve needs r values and seeds".into()));
    }
    let exact = softmax_mixer(q, k)?;
    let norm = exact.matrix().iter().map(|v| v * v).sum::<f64>().sqrt();
    let d = q.ncols();
    r_values
        .iter()
        .map(|&r| {
            let mut errs = seeds
                .iter()
                .map(|&seed| {
                    let approx = favor_mixer(q, k, &draw_orthogonal_features(d, r, seed)?)?;
                    let diff = Zip::from(approx.matrix())
                        .and(exact.matrix())
                        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
                    Ok(diff.sqrt() / norm)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((r, median(&mut errs)))
        })
        .collect()
}

/// One `rank_report.csv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct RankRow {
    pub mixer_kind: String,
    pub t: usize,
    pub d_or_n: usize,
    /// Feature count for FAVOR+ rows, 0 otherwise.
    pub r: usize,
    pub rank: usize,
}

fn csv_err(e: csv::Error) -> MixError {
    MixError::Format(format!("csv: {e}"))
}

fn write_rows<W: Write, const N: usize>(out: W, header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| MixError::Format(format!("csv: {e}")))
}

pub fn write_rank_report<W: Write>(out: W, rows: &[RankRow]) -> Result<()> {
    write_rows(
        out,
        ["mixer_kind", "T", "d_or_N", "r", "rank"],
        rows.iter()
            .map(|r| [r.mixer_kind.clone(), r.t.to_string(), r.d_or_n.to_string(), r.r.to_string(), r.rank.to_string()]),
    )
}

pub fn write_l2_histogram<W: Write>(out: W, hist: &Histogram) -> Result<()> {
    write_rows(out, ["bin_lo", "bin_hi", "count"], hist.bins().map(|(lo, hi, c)| [lo.to_string(), hi.to_string(), c.to_string()]))
}

pub fn write_locality<W: Write>(out: W, profile: &[(usize, f64)]) -> Result<()> {
    write_rows(out, ["window", "mass"], profile.iter().map(|(w, m)| [w.to_string(), m.to_string()]))
}

pub fn write_approx_curve<W: Write>(out: W, curve: &[(usize, f64)]) -> Result<()> {
    write_rows(out, ["r", "median_rel_err"], curve.iter().map(|(r, e)| [r.to_string(), e.to_string()]))
}
