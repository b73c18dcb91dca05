//! Runtime scaling measurements for the operational (never materialized)
//! forms of each mixer, and log-log slope fitting over sequence length.
//!
//! Measurements run on the calling thread, one operation at a time.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use mixlab_core::attention::{draw_orthogonal_features, favor_attention, softmax_attention, QkvTriple};
use mixlab_core::ssm::{bimamba_channelwise, hydra_channelwise, ssm_channelwise, BiMambaWeights, HydraWeights, SelectiveWeights};
use mixlab_core::{FeatureSequence, MixError, MixRng, Result};

pub const DEFAULT_T_VALUES: [usize; 5] = [4096, 8192, 16384, 32768, 65536];
pub const DEFAULT_WIDTH: usize = 64;
pub const DEFAULT_NUM_FEATURES: usize = 256;
pub const DEFAULT_STATE_SIZE: usize = 16;
pub const DEFAULT_REPEATS: usize = 3;
pub const MIN_REPEATS: usize = 3;
pub const MIN_POINTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BenchOp {
    SoftmaxAttention,
    FavorAttention,
    SsmScan,
    BiMambaScan,
    HydraScan,
}

impl BenchOp {
    pub const ALL: [BenchOp; 5] =
        [BenchOp::SoftmaxAttention, BenchOp::FavorAttention, BenchOp::SsmScan, BenchOp::BiMambaScan, BenchOp::HydraScan];

    pub fn label(&self) -> &'static str {
        match self {
            BenchOp::SoftmaxAttention => "softmax_attention",
            BenchOp::FavorAttention => "favor_attention",
            BenchOp::SsmScan => "ssm_scan",
            BenchOp::BiMambaScan => "bimamba_scan",
            BenchOp::HydraScan => "hydra_scan",
        }
    }

    /// Whether `r_or_n` is a feature count (attention) or a state size (scans).
    pub fn uses_features(&self) -> bool {
        matches!(self, BenchOp::SoftmaxAttention | BenchOp::FavorAttention)
    }

    /// Analytic peak working set in bytes: inputs, outputs and the largest
    /// intermediate the implementation allocates.
    pub fn working_set_bytes(&self, t: usize, d: usize, r_or_n: usize) -> usize {
        let words = match self {
            // q, k, v, out plus one 64-row block of scores.
            BenchOp::SoftmaxAttention => 4 * t * d + 64 * t,
            // q, k, v, out, one 256-row chunk of features, φ(K)ᵀV and φ(K)ᵀ1.
            BenchOp::FavorAttention => 4 * t * d + 256 * r_or_n + r_or_n * d + r_or_n,
            // x, y, one 256-step chunk of Δ/a/b/c and the N·d running state.
            BenchOp::SsmScan | BenchOp::BiMambaScan | BenchOp::HydraScan => 2 * t * d + 256 * (2 * r_or_n + 2) + r_or_n * d,
        };
        words * std::mem::size_of::<f64>()
    }
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for BenchOp {
    type Err = MixError;

    fn from_str(s: &str) -> Result<Self> {
        BenchOp::ALL
            .into_iter()
            .find(|op| op.label() == s)
            .ok_or_else(|| MixError::InvalidArgument(format!("unknown bench op '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSample {
    pub op_label: String,
    pub t: usize,
    pub d: usize,
    pub r_or_n: usize,
    /// Median of the timed repeats, seconds.
    pub wall_time: f64,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub op_label: String,
    pub fitted_slope: f64,
    pub r_squared: f64,
    pub samples: Vec<BenchSample>,
}

enum Prepared {
    Attention(QkvTriple),
    Favor(QkvTriple, mixlab_core::OrthogonalFeatureMatrix),
    Ssm(FeatureSequence, SelectiveWeights),
    BiMamba(FeatureSequence, BiMambaWeights),
    Hydra(FeatureSequence, HydraWeights),
}

impl Prepared {
    fn run(&self) -> Result<FeatureSequence> {
        match self {
            Prepared::Attention(qkv) => softmax_attention(qkv),
            Prepared::Favor(qkv, omega) => favor_attention(qkv, omega),
            Prepared::Ssm(x, w) => ssm_channelwise(x, w),
            Prepared::BiMamba(x, w) => bimamba_channelwise(x, w),
            Prepared::Hydra(x, w) => hydra_channelwise(x, w),
        }
    }
}

/// Seeded inputs for one measurement. Queries and keys use std `d^(-1/4)` so
/// logits have unit variance.
fn prepare(op: BenchOp, t: usize, d: usize, r_or_n: usize, seed: u64) -> Result<Prepared> {
    let mut rng = MixRng::stream(seed, t as u64);
    if op.uses_features() {
        let s = (d as f64).powf(-0.25);
        let qkv = QkvTriple::new(rng.normal_matrix(t, d, s), rng.normal_matrix(t, d, s), rng.normal_matrix(t, d, 1.0))?;
        return Ok(match op {
            BenchOp::SoftmaxAttention => Prepared::Attention(qkv),
            _ => Prepared::Favor(qkv, draw_orthogonal_features(d, r_or_n, seed)?),
        });
    }
    let x = FeatureSequence::new(rng.normal_matrix(t, d, 1.0))?;
    Ok(match op {
        BenchOp::SsmScan => Prepared::Ssm(x, SelectiveWeights::random(d, r_or_n, &mut rng)),
        BenchOp::BiMambaScan => Prepared::BiMamba(x, BiMambaWeights::random(d, r_or_n, &mut rng)),
        _ => Prepared::Hydra(x, HydraWeights::random(d, r_or_n, &mut rng)),
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

/// Shortest wall time a single timed run may take. Faster operations are
/// called back to back within one run and the per-call time is reported.
pub const DEFAULT_MIN_RUN_SECONDS: f64 = 0.05;

/// For each T: build seeded inputs, run once untimed, then record the median
/// of `repeats` timed runs. Input generation is outside the timed region.
/// Timed runs are taken in rounds over all T values.
pub fn time_operation(
    op_label: &str,
    t_values: &[usize],
    d: usize,
    r_or_n: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchSample>> {
    time_operation_with(op_label, t_values, d, r_or_n, repeats, seed, DEFAULT_MIN_RUN_SECONDS)
}

/// [`time_operation`] with an explicit minimum run length. The untimed warmup
/// call also sizes how many calls one timed run needs to last
/// `min_run_seconds`.
pub fn time_operation_with(
    op_label: &str,
    t_values: &[usize],
    d: usize,
    r_or_n: usize,
    repeats: usize,
    seed: u64,
    min_run_seconds: f64,
) -> Result<Vec<BenchSample>> {
    let op: BenchOp = op_label.parse()?;
    if t_values.len() < MIN_POINTS || t_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MixError::InvalidArgument(format!(
            "need at least {MIN_POINTS} strictly ascending sequence lengths, got {t_values:?}"
        )));
    }
    if repeats < MIN_REPEATS {
        return Err(MixError::InvalidArgument(format!("need at least {MIN_REPEATS} repeats, got {repeats}")));
    }
    if !(min_run_seconds >= 0.0) {
        return Err(MixError::InvalidArgument(format!("minimum run length {min_run_seconds} must be >= 0")));
    }
    // Rounds visit every T in turn so slow phases of the machine are shared
    // across lengths instead of landing on one of them.
    let mut prepared = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let input = prepare(op, t, d, r_or_n, seed)?;
        let start = Instant::now();
        std::hint::black_box(input.run()?);
        let warm = start.elapsed().as_secs_f64().max(1e-9);
        let calls = ((min_run_seconds / warm).ceil() as usize).clamp(1, 1_000_000);
        prepared.push((input, calls, Vec::with_capacity(repeats)));
    }
    for _ in 0..repeats {
        for (input, calls, times) in prepared.iter_mut() {
            let start = Instant::now();
            for _ in 0..*calls {
                std::hint::black_box(input.run()?);
            }
            times.push(start.elapsed().as_secs_f64() / *calls as f64);
        }
    }
    Ok(t_values
        .iter()
        .zip(prepared)
        .map(|(&t, (_, _, mut times))| BenchSample {
            op_label: op.label().to_string(),
            t,
            d,
            r_or_n,
            wall_time: median(&mut times).max(f64::MIN_POSITIVE),
            repeats,
        })
        .collect())
}

/// Least-squares fit of `log(time) = slope · log(T) + c`.
pub fn fit_loglog_slope(samples: &[BenchSample]) -> Result<ScalingReport> {
    if samples.len() < MIN_POINTS {
        return Err(MixError::InvalidArgument(format!("need at least {MIN_POINTS} samples, got {}", samples.len())));
    }
    if let Some(bad) = samples.iter().find(|s| !(s.wall_time > 0.0) || s.t == 0) {
        return Err(MixError::NumericRange(format!("sample at T={} has time {}", bad.t, bad.wall_time)));
    }
    let xs: Vec<f64> = samples.iter().map(|s| (s.t as f64).ln()).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.wall_time.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(MixError::InvalidArgument("all samples share one sequence length".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(ScalingReport { op_label: samples[0].op_label.clone(), fitted_slope: slope, r_squared, samples: samples.to_vec() })
}

fn csv_err(e: impl fmt::Display) -> MixError {
    MixError::Format(format!("csv: {e}"))
}

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}

/// `bench.csv`: one row per sample.
pub fn write_bench_csv<W: Write>(out: W, reports: &[ScalingReport]) -> Result<()> {
    let mut w = writer(out);
    w.write_record(["op_label", "T", "d", "r_or_N", "median_seconds", "repeats"]).map_err(csv_err)?;
    for s in reports.iter().flat_map(|r| &r.samples) {
        w.write_record([
            s.op_label.clone(),
            s.t.to_string(),
            s.d.to_string(),
            s.r_or_n.to_string(),
            s.wall_time.to_string(),
            s.repeats.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

/// `scaling.csv`: one row per operation.
pub fn write_scaling_csv<W: Write>(out: W, reports: &[ScalingReport]) -> Result<()> {
    let mut w = writer(out);
    w.write_record(["op_label", "slope", "r_squared"]).map_err(csv_err)?;
    for r in reports {
        w.write_record([r.op_label.clone(), r.fitted_slope.to_string(), r.r_squared.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

/// `memory.csv`: analytic working-set estimates for each sample's shape.
pub fn write_memory_csv<W: Write>(out: W, reports: &[ScalingReport]) -> Result<()> {
    let mut w = writer(out);
    w.write_record(["op_label", "T", "d", "r_or_N", "working_set_bytes"]).map_err(csv_err)?;
    for s in reports.iter().flat_map(|r| &r.samples) {
        let op: BenchOp = s.op_label.parse()?;
        w.write_record([
            s.op_label.clone(),
            s.t.to_string(),
            s.d.to_string(),
            s.r_or_n.to_string(),
            op.working_set_bytes(s.t, s.d, s.r_or_n).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}
