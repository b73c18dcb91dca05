//! The four subcommands. Each writes its CSV reports into the configured
//! output directory and returns the paths it wrote.

use std::fs;
use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use mixlab_bench::{fit_loglog_slope, time_operation, write_bench_csv, write_memory_csv, write_scaling_csv, BenchOp};
use mixlab_core::attention::{draw_orthogonal_features, favor_attention, favor_mixer, softmax_attention, softmax_mixer};
use mixlab_core::blocks::{layer_norm_apply, stack_forward_trace};
use mixlab_core::diagnostics::{
    approximation_error_curve, locality_mass, numerical_rank, pairwise_l2_histogram, write_approx_curve,
    write_l2_histogram, write_locality, write_rank_report, RankRow,
};
use mixlab_core::mixer::apply_mixer_vec;
use ndarray::Array2;

use mixlab_core::ssm::{
    bimamba_apply, bimamba_channelwise, bimamba_mixer, hydra_apply, hydra_channelwise, hydra_mixer, ssm_channelwise,
    selective_parameterize, ssm_mixer, ssm_mixer_reverse, ssm_scan, ssm_scan_reverse, BiMambaWeights, HydraWeights,
};
use mixlab_core::{
    BiMambaParams, BlockStack, FeatureSequence, HydraParams, MatrixMixer, MixRng, MixerKind, QkvTriple, ScanParams,
    SelectiveWeights, TensorStore, DEFAULT_RANK_TOL,
};

use crate::config::RunConfig;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| CliError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(create_file(path)?))
}

fn csv_failed(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::io(path, source),
        other => CliError::Failed(format!("{}: {other:?}", path.display())),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_failed(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_failed(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Core writers take any `Write`; failures come back as format errors that
/// still name the file.
fn write_with(path: &Path, f: impl FnOnce(&mut fs::File) -> mixlab_core::Result<()>) -> Result<()> {
    let mut file = create_file(path)?;
    f(&mut file).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    file.flush().map_err(|e| CliError::io(path, e))
}

fn max_abs_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).fold(0.0, |m, (x, y)| {
        let d = (x - y).abs();
        if d.is_nan() || m.is_nan() {
            f64::NAN
        } else {
            m.max(d)
        }
    })
}

/// Feature-matrix seed drawn from an instance's stream.
fn draw_seed(rng: &mut MixRng) -> u64 {
    (rng.uniform(0.0, 1.0) * (1u64 << 53) as f64) as u64
}

/// One row of `equiv.csv`: the worst error of one family over all instances.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivCase {
    pub case: &'static str,
    pub max_abs_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct EquivReport {
    pub cases: Vec<EquivCase>,
    pub path: PathBuf,
}

impl EquivReport {
    pub fn all_pass(&self) -> bool {
        self.cases.iter().all(|c| c.pass)
    }
}

type Family = (&'static str, fn(&RunConfig, &mut MixRng) -> mixlab_core::Result<f64>);

fn random_vec(rng: &mut MixRng, t: usize) -> Vec<f64> {
    rng.normal_vector(t, 1.0).to_vec()
}

fn random_qkv(cfg: &RunConfig, rng: &mut MixRng) -> mixlab_core::Result<QkvTriple> {
    // Unit-variance logits.
    let s = (cfg.d_head as f64).powf(-0.25);
    QkvTriple::new(
        rng.normal_matrix(cfg.t, cfg.d_head, s),
        rng.normal_matrix(cfg.t, cfg.d_head, s),
        rng.normal_matrix(cfg.t, cfg.d_head, 1.0),
    )
}

fn columns_vs_mixer(y: &FeatureSequence, x: &FeatureSequence, mixer_for: impl Fn(usize) -> mixlab_core::Result<MatrixMixer>) -> mixlab_core::Result<f64> {
    let mut worst = 0.0f64;
    for c in 0..x.width() {
        let expected = apply_mixer_vec(&mixer_for(c)?, &x.channel(c).to_vec())?;
        let err = max_abs_diff(y.channel(c).iter().copied(), expected);
        worst = if err.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(err) };
    }
    Ok(worst)
}

const FAMILIES: [Family; 9] = [
    ("ssm_scan", |cfg, rng| {
        let p = ScanParams::random(cfg.t, cfg.n, rng)?;
        let x = random_vec(rng, cfg.t);
        Ok(max_abs_diff(ssm_scan(&p, &x)?, apply_mixer_vec(&ssm_mixer(&p)?, &x)?))
    }),
    ("ssm_scan_reverse", |cfg, rng| {
        let p = ScanParams::random(cfg.t, cfg.n, rng)?;
        let x = random_vec(rng, cfg.t);
        Ok(max_abs_diff(ssm_scan_reverse(&p, &x)?, apply_mixer_vec(&ssm_mixer_reverse(&p)?, &x)?))
    }),
    ("bimamba", |cfg, rng| {
        let p = BiMambaParams::new(ScanParams::random(cfg.t, cfg.n, rng)?, ScanParams::random(cfg.t, cfg.n, rng)?)?;
        let x = random_vec(rng, cfg.t);
        Ok(max_abs_diff(bimamba_apply(&p, &x)?, apply_mixer_vec(&bimamba_mixer(&p)?, &x)?))
    }),
    ("hydra", |cfg, rng| {
        let fwd = ScanParams::random(cfg.t, cfg.n, rng)?;
        let bwd = ScanParams::random(cfg.t, cfg.n, rng)?;
        let p = HydraParams::new(fwd, bwd, rng.normal_vector(cfg.t, 1.0))?;
        let x = random_vec(rng, cfg.t);
        Ok(max_abs_diff(hydra_apply(&p, &x)?, apply_mixer_vec(&hydra_mixer(&p)?, &x)?))
    }),
    ("ssm_channelwise", |cfg, rng| {
        let x = FeatureSequence::new(rng.normal_matrix(cfg.t, cfg.d_head, 1.0))?;
        let w = SelectiveWeights::random(cfg.d_head, cfg.n, rng);
        let m = ssm_mixer(&selective_parameterize(&x, &w)?)?;
        columns_vs_mixer(&ssm_channelwise(&x, &w)?, &x, |_| Ok(m.clone()))
    }),
    ("bimamba_channelwise", |cfg, rng| {
        let x = FeatureSequence::new(rng.normal_matrix(cfg.t, cfg.d_head, 1.0))?;
        let w = BiMambaWeights::random(cfg.d_head, cfg.n, rng);
        let m = bimamba_mixer(&w.params(&x)?)?;
        columns_vs_mixer(&bimamba_channelwise(&x, &w)?, &x, |_| Ok(m.clone()))
    }),
    ("hydra_channelwise", |cfg, rng| {
        let x = FeatureSequence::new(rng.normal_matrix(cfg.t, cfg.d_head, 1.0))?;
        let w = HydraWeights::random(cfg.d_head, cfg.n, rng);
        columns_vs_mixer(&hydra_channelwise(&x, &w)?, &x, |c| hydra_mixer(&w.channel_params(&x, c)?))
    }),
    ("favor_attention", |cfg, rng| {
        let qkv = random_qkv(cfg, rng)?;
        let omega = draw_orthogonal_features(cfg.d_head, cfg.r, draw_seed(rng))?;
        let y = favor_attention(&qkv, &omega)?;
        let m = favor_mixer(qkv.q.view(), qkv.k.view(), &omega)?;
        let expected = m.matrix().dot(&qkv.v);
        Ok(max_abs_diff(y.view().iter().copied(), expected.iter().copied()))
    }),
    ("softmax_attention", |cfg, rng| {
        let qkv = random_qkv(cfg, rng)?;
        let y = softmax_attention(&qkv)?;
        let expected = softmax_mixer(qkv.q.view(), qkv.k.view())?.matrix().dot(&qkv.v);
        Ok(max_abs_diff(y.view().iter().copied(), expected.iter().copied()))
    }),
];

/// Linear-time operators against their materialized mixers, `cases`
/// seeded instances per family. Writes `equiv.csv`; fails if any family's
/// worst error exceeds the tolerance.
pub fn cmd_equiv(cfg: &RunConfig) -> Result<EquivReport> {
    create_out_dir(&cfg.output_dir)?;
    let mut cases = Vec::with_capacity(FAMILIES.len());
    for (stream, (name, run)) in FAMILIES.iter().enumerate() {
        let mut rng = MixRng::stream(cfg.seed, stream as u64);
        let mut worst = 0.0f64;
        for _ in 0..cfg.cases {
            let err = run(cfg, &mut rng)?;
            worst = if err.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(err) };
        }
        cases.push(EquivCase { case: name, max_abs_err: worst, pass: worst <= cfg.tolerance });
    }
    let path = cfg.output_dir.join("equiv.csv");
    let rows: Vec<Vec<String>> =
        cases.iter().map(|c| vec![c.case.to_string(), format!("{:e}", c.max_abs_err), c.pass.to_string()]).collect();
    write_csv(&path, &["case", "max_abs_err", "pass"], &rows)?;
    Ok(EquivReport { cases, path })
}

/// Queries and keys either from the dump named in the config or drawn with
/// std `d_head^(-1/4)` entries.
fn load_qk(cfg: &RunConfig) -> Result<(Array2<f64>, Array2<f64>)> {
    let Some(stem_path) = &cfg.qk_dump else {
        let mut rng = MixRng::stream(cfg.seed, 0);
        let s = (cfg.d_head as f64).powf(-0.25);
        return Ok((rng.normal_matrix(cfg.t, cfg.d_head, s), rng.normal_matrix(cfg.t, cfg.d_head, s)));
    };
    let input_err = |message: String| CliError::Input { path: stem_path.clone(), message };
    let dir = match stem_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let stem = stem_path.file_name().and_then(|s| s.to_str()).ok_or_else(|| input_err("not a file stem".into()))?;
    let store = TensorStore::read(&dir, stem).map_err(|e| input_err(e.to_string()))?;
    let q = store.matrix("q").map_err(|e| input_err(e.to_string()))?;
    let k = store.matrix("k").map_err(|e| input_err(e.to_string()))?;
    if q.dim() != k.dim() || q.is_empty() {
        return Err(input_err(format!("q is {:?} and k is {:?}, need equal non-empty shapes", q.dim(), k.dim())));
    }
    Ok((q, k))
}

#[derive(Clone, Debug)]
pub struct DiagnoseReport {
    pub rank_rows: Vec<RankRow>,
    pub histogram_total: u64,
    pub locality: Vec<(usize, f64)>,
    pub approx_curve: Vec<(usize, f64)>,
    pub paths: Vec<PathBuf>,
}

/// Rank report for softmax, FAVOR+ and the three scan mixers; pairwise-row
/// histogram and locality profile of the `mixer_kind` mixer; FAVOR+
/// approximation curve on the same Q and K.
pub fn cmd_diagnose(cfg: &RunConfig) -> Result<DiagnoseReport> {
    let (q, k) = load_qk(cfg)?;
    let (t, d) = q.dim();
    create_out_dir(&cfg.output_dir)?;

    let softmax = softmax_mixer(q.view(), k.view())?;
    let omega = draw_orthogonal_features(d, cfg.r, cfg.seed)?;
    let favor = favor_mixer(q.view(), k.view(), &omega)?;
    let mut rng = MixRng::stream(cfg.seed, 1);
    let ssm = ssm_mixer(&ScanParams::random(t, cfg.n, &mut rng)?)?;
    let bimamba = bimamba_mixer(&BiMambaParams::new(
        ScanParams::random(t, cfg.n, &mut rng)?,
        ScanParams::random(t, cfg.n, &mut rng)?,
    )?)?;
    let hydra = hydra_mixer(&HydraParams::new(
        ScanParams::random(t, cfg.n, &mut rng)?,
        ScanParams::random(t, cfg.n, &mut rng)?,
        rng.normal_vector(t, 1.0),
    )?)?;

    let row = |kind: &str, m: &MatrixMixer, d_or_n: usize, r: usize| -> Result<RankRow> {
        Ok(RankRow { mixer_kind: kind.to_string(), t, d_or_n, r, rank: numerical_rank(m, DEFAULT_RANK_TOL)? })
    };
    let rank_rows = vec![
        row("softmax", &softmax, d, 0)?,
        row("favor", &favor, d, cfg.r)?,
        row("ssm", &ssm, cfg.n, 0)?,
        row("bimamba", &bimamba, cfg.n, 0)?,
        row("hydra", &hydra, cfg.n, 0)?,
    ];

    let focus = match cfg.mixer_kind {
        MixerKind::Softmax => &softmax,
        MixerKind::Favor => &favor,
        MixerKind::BiMamba => &bimamba,
        MixerKind::Hydra => &hydra,
    };
    let hist = pairwise_l2_histogram(focus, cfg.bins)?;
    let locality: Vec<(usize, f64)> = (0..t).map(|w| (w, locality_mass(focus, w))).collect();
    let seeds: Vec<u64> = (1..=cfg.approx_seeds as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let approx_curve = approximation_error_curve(q.view(), k.view(), &cfg.r_values, &seeds)?;

    let paths: Vec<PathBuf> =
        ["rank_report.csv", "l2_hist.csv", "locality.csv", "approx_curve.csv"].iter().map(|f| cfg.output_dir.join(f)).collect();
    write_with(&paths[0], |f| write_rank_report(f, &rank_rows))?;
    write_with(&paths[1], |f| write_l2_histogram(f, &hist))?;
    write_with(&paths[2], |f| write_locality(f, &locality))?;
    write_with(&paths[3], |f| write_approx_curve(f, &approx_curve))?;
    Ok(DiagnoseReport { rank_rows, histogram_total: hist.total, locality, approx_curve, paths })
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub reports: Vec<mixlab_bench::ScalingReport>,
    pub paths: Vec<PathBuf>,
}

/// Times every configured operation over `t_values` and fits the log-log
/// slope of each. Writes `bench.csv`, `scaling.csv` and `memory.csv`.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    if cfg.t_values.len() < mixlab_bench::MIN_POINTS {
        return Err(CliError::Usage(format!(
            "t_values needs at least {} lengths, got {}",
            mixlab_bench::MIN_POINTS,
            cfg.t_values.len()
        )));
    }
    if cfg.repeats < mixlab_bench::MIN_REPEATS {
        return Err(CliError::Usage(format!("repeats must be at least {}", mixlab_bench::MIN_REPEATS)));
    }
    let mut t_values = cfg.t_values.clone();
    t_values.sort_unstable();
    t_values.dedup();
    if t_values.len() != cfg.t_values.len() {
        return Err(CliError::Usage("t_values must be distinct".into()));
    }
    create_out_dir(&cfg.output_dir)?;
    let mut reports = Vec::with_capacity(cfg.bench_ops.len());
    for label in &cfg.bench_ops {
        let op: BenchOp = label.parse().map_err(|e: mixlab_core::MixError| CliError::Usage(e.to_string()))?;
        let r_or_n = match op {
            BenchOp::FavorAttention => cfg.bench_r,
            BenchOp::SoftmaxAttention => 0,
            _ => cfg.n,
        };
        let samples = time_operation(op.label(), &t_values, cfg.bench_d, r_or_n, cfg.repeats, cfg.seed)?;
        let report = fit_loglog_slope(&samples)?;
        eprintln!("{}: slope {:.3}, R^2 {:.4}", report.op_label, report.fitted_slope, report.r_squared);
        reports.push(report);
    }
    let paths: Vec<PathBuf> = ["bench.csv", "scaling.csv", "memory.csv"].iter().map(|f| cfg.output_dir.join(f)).collect();
    write_with(&paths[0], |f| write_bench_csv(f, &reports))?;
    write_with(&paths[1], |f| write_scaling_csv(f, &reports))?;
    write_with(&paths[2], |f| write_memory_csv(f, &reports))?;
    Ok(BenchReport { reports, paths })
}

fn checksum(values: impl Iterator<Item = f64>) -> u64 {
    let mut h = FnvHasher::default();
    values.for_each(|v| h.write(&v.to_le_bytes()));
    h.finish()
}

/// One `demo.csv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoRow {
    pub block: usize,
    pub dilation: usize,
    pub output_norm: f64,
    /// FNV-1a over the little-endian bytes of the output, row-major.
    pub output_checksum: u64,
    /// Largest |block output − layer_norm(block input)|. Zero when the
    /// block's projections are zeroed.
    pub residual_deviation: f64,
}

#[derive(Clone, Debug)]
pub struct DemoReport {
    pub dilations: Vec<usize>,
    pub rows: Vec<DemoRow>,
    pub checksum: u64,
    pub paths: Vec<PathBuf>,
}

/// Runs a seeded random block stack on seeded input. Writes `demo.csv` and
/// the stack's weights as `weights.bin` + `weights.manifest`.
pub fn cmd_demo(cfg: &RunConfig) -> Result<DemoReport> {
    let stack_cfg = cfg.stack_config();
    let dilations = stack_cfg.dilations()?;
    eprintln!("{} blocks, d_model {}, mixer {}, dilations {:?}", stack_cfg.num_blocks, stack_cfg.d_model, stack_cfg.mixer, dilations);
    let mut stack = BlockStack::random(stack_cfg, cfg.seed)?;
    if cfg.zero_weights {
        stack.zero_projections();
    }
    let x = FeatureSequence::new(MixRng::stream(cfg.seed, u64::MAX).normal_matrix(cfg.t, cfg.d_model, 1.0))?;
    let outputs = stack_forward_trace(&x, &stack)?;

    let mut rows = Vec::with_capacity(outputs.len());
    for (i, (block, out)) in stack.blocks().iter().zip(&outputs).enumerate() {
        let input = if i == 0 { &x } else { &outputs[i - 1] };
        let normed = layer_norm_apply(input, block.norm.scale.view(), block.norm.shift.view())?;
        let view = out.view();
        rows.push(DemoRow {
            block: i,
            dilation: block.conv.dilation(),
            output_norm: view.iter().map(|v| v * v).sum::<f64>().sqrt(),
            output_checksum: checksum(view.iter().copied()),
            residual_deviation: max_abs_diff(view.iter().copied(), normed.view().iter().copied()),
        });
    }
    let checksum = rows.last().map_or(checksum(x.view().iter().copied()), |r| r.output_checksum);

    create_out_dir(&cfg.output_dir)?;
    let csv_path = cfg.output_dir.join("demo.csv");
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.block.to_string(),
                r.dilation.to_string(),
                r.output_norm.to_string(),
                format!("{:016x}", r.output_checksum),
                format!("{:e}", r.residual_deviation),
            ]
        })
        .collect();
    write_csv(&csv_path, &["block", "dilation", "output_norm", "output_checksum", "residual_deviation"], &table)?;
    let (bin, manifest) = stack.to_store()?.write(&cfg.output_dir, "weights")?;
    Ok(DemoReport { dilations, rows, checksum, paths: vec![csv_path, bin, manifest] })
}
