//! Run configuration: a flat `key = value` file, overridden key by key from
//! the command line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mixlab_core::{BlockStackConfig, MixerKind};

use crate::error::CliError;

/// Environment variable naming the output directory when `--out` is absent.
pub const OUT_DIR_ENV: &str = "MIXLAB_OUT";
pub const DEFAULT_OUT_DIR: &str = "mixlab-out";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 8 blocks at 256 channels.
    LatentDenoiser,
    /// 12 blocks at 512 channels. The generator it models predicts K = 9
    /// codebooks of I = 1024 entries from 86 Hz frames; those constants are
    /// not used here.
    TokenGenerator,
}

impl Preset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::LatentDenoiser => "latent-denoiser",
            Preset::TokenGenerator => "token-generator",
        }
    }

    pub fn d_model(&self) -> usize {
        match self {
            Preset::LatentDenoiser => 256,
            Preset::TokenGenerator => 512,
        }
    }

    pub fn num_blocks(&self) -> usize {
        match self {
            Preset::LatentDenoiser => 8,
            Preset::TokenGenerator => 12,
        }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "latent-denoiser" => Ok(Preset::LatentDenoiser),
            "token-generator" => Ok(Preset::TokenGenerator),
            _ => Err(format!("unknown preset '{s}' (expected latent-denoiser or token-generator)")),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Sequence length for equiv, diagnose and demo.
    pub t: usize,
    pub d_model: usize,
    pub num_heads: usize,
    /// Query/key width for the attention cases of equiv and diagnose.
    pub d_head: usize,
    /// FAVOR+ feature count.
    pub r: usize,
    /// State size.
    pub n: usize,
    pub kernel_size: usize,
    pub dilation_period: usize,
    pub num_blocks: usize,
    pub mixer_kind: MixerKind,
    pub output_dir: PathBuf,
    pub preset: Option<Preset>,

    pub tolerance: f64,
    /// Seeded instances per equivalence family.
    pub cases: usize,
    pub bins: usize,
    pub r_values: Vec<usize>,
    pub approx_seeds: usize,
    /// Container stem (`<stem>.bin` + `<stem>.manifest`) holding `q` and `k`.
    pub qk_dump: Option<PathBuf>,

    pub t_values: Vec<usize>,
    pub repeats: usize,
    pub bench_d: usize,
    pub bench_r: usize,
    pub bench_ops: Vec<String>,

    pub zero_weights: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            t: 64,
            d_model: 64,
            num_heads: 4,
            d_head: 16,
            r: 16,
            n: 16,
            kernel_size: 7,
            dilation_period: 4,
            num_blocks: 8,
            mixer_kind: MixerKind::Hydra,
            output_dir: PathBuf::from(DEFAULT_OUT_DIR),
            preset: None,
            tolerance: 1e-9,
            cases: 100,
            bins: mixlab_core::diagnostics::DEFAULT_HISTOGRAM_BINS,
            r_values: vec![16, 64, 256, 1024],
            approx_seeds: 32,
            qk_dump: None,
            t_values: mixlab_bench::DEFAULT_T_VALUES.to_vec(),
            repeats: mixlab_bench::DEFAULT_REPEATS,
            bench_d: mixlab_bench::DEFAULT_WIDTH,
            bench_r: mixlab_bench::DEFAULT_NUM_FEATURES,
            bench_ops: mixlab_bench::BenchOp::ALL.iter().map(|op| op.label().to_string()).collect(),
            zero_weights: false,
        }
    }
}

/// Every recognized key, in the spelling used by config files and flags.
pub const KEYS: &[&str] = &[
    "seed",
    "T",
    "d_model",
    "num_heads",
    "d_head",
    "r",
    "N",
    "kernel_size",
    "dilation_period",
    "num_blocks",
    "mixer_kind",
    "output_dir",
    "preset",
    "tolerance",
    "cases",
    "bins",
    "r_values",
    "approx_seeds",
    "qk_dump",
    "t_values",
    "repeats",
    "bench_d",
    "bench_r",
    "bench_ops",
    "zero_weights",
];

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// later duplicates win.
pub fn parse_config_text(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected 'key = value'", i + 1)))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(CliError::Usage(format!("{origin}:{}: unknown key '{key}'", i + 1)));
        }
        out.insert(key.to_string(), value.trim().to_string());
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
    parse_config_text(&text, &path.display().to_string())
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| CliError::Usage(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::Usage(format!("{key}: expected true or false, got '{value}'"))),
    }
}

impl RunConfig {
    /// Applies `values` (already merged: file first, flags last) on top of
    /// the defaults, then the preset, then validates.
    pub fn from_pairs(values: &BTreeMap<String, String>, env_out: Option<PathBuf>) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(dir) = env_out {
            cfg.output_dir = dir;
        }
        for (key, value) in values {
            let v = value.as_str();
            match key.as_str() {
                "seed" => cfg.seed = parse(key, v)?,
                "T" => cfg.t = parse(key, v)?,
                "d_model" => cfg.d_model = parse(key, v)?,
                "num_heads" => cfg.num_heads = parse(key, v)?,
                "d_head" => cfg.d_head = parse(key, v)?,
                "r" => cfg.r = parse(key, v)?,
                "N" => cfg.n = parse(key, v)?,
                "kernel_size" => cfg.kernel_size = parse(key, v)?,
                "dilation_period" => cfg.dilation_period = parse(key, v)?,
                "num_blocks" => cfg.num_blocks = parse(key, v)?,
                "mixer_kind" => cfg.mixer_kind = parse(key, v)?,
                "output_dir" => cfg.output_dir = PathBuf::from(v),
                "preset" => cfg.preset = if v.is_empty() || v == "none" { None } else { Some(parse(key, v)?) },
                "tolerance" => cfg.tolerance = parse(key, v)?,
                "cases" => cfg.cases = parse(key, v)?,
                "bins" => cfg.bins = parse(key, v)?,
                "r_values" => cfg.r_values = parse_list(key, v)?,
                "approx_seeds" => cfg.approx_seeds = parse(key, v)?,
                "qk_dump" => cfg.qk_dump = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
                "t_values" => cfg.t_values = parse_list(key, v)?,
                "repeats" => cfg.repeats = parse(key, v)?,
                "bench_d" => cfg.bench_d = parse(key, v)?,
                "bench_r" => cfg.bench_r = parse(key, v)?,
                "bench_ops" => cfg.bench_ops = parse_list(key, v)?,
                "zero_weights" => cfg.zero_weights = parse_bool(key, v)?,
                other => return Err(CliError::Usage(format!("unknown key '{other}'"))),
            }
        }
        if let Some(p) = cfg.preset {
            cfg.d_model = p.d_model();
            cfg.num_blocks = p.num_blocks();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("T", self.t),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_head", self.d_head),
            ("r", self.r),
            ("N", self.n),
            ("kernel_size", self.kernel_size),
            ("dilation_period", self.dilation_period),
            ("num_blocks", self.num_blocks),
            ("cases", self.cases),
            ("bins", self.bins),
            ("approx_seeds", self.approx_seeds),
            ("repeats", self.repeats),
            ("bench_d", self.bench_d),
            ("bench_r", self.bench_r),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::Usage(format!("{name} must be a positive integer")));
        }
        if !(self.tolerance > 0.0) {
            return Err(CliError::Usage(format!("tolerance must be > 0, got {}", self.tolerance)));
        }
        if self.r_values.is_empty() || self.r_values.contains(&0) {
            return Err(CliError::Usage("r_values must list positive feature counts".into()));
        }
        if self.t_values.contains(&0) {
            return Err(CliError::Usage("t_values must be positive".into()));
        }
        for op in &self.bench_ops {
            op.parse::<mixlab_bench::BenchOp>().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        self.stack_config().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    pub fn stack_config(&self) -> BlockStackConfig {
        let mut s = BlockStackConfig::new(self.d_model, self.num_blocks, self.mixer_kind);
        s.num_heads = self.num_heads;
        s.state_size = self.n;
        s.num_features = self.r;
        s.kernel_size = self.kernel_size;
        s.dilation_period = self.dilation_period;
        s
    }

    /// The effective configuration in config-file syntax.
    pub fn to_config_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        put("seed", self.seed.to_string());
        put("T", self.t.to_string());
        put("d_model", self.d_model.to_string());
        put("num_heads", self.num_heads.to_string());
        put("d_head", self.d_head.to_string());
        put("r", self.r.to_string());
        put("N", self.n.to_string());
        put("kernel_size", self.kernel_size.to_string());
        put("dilation_period", self.dilation_period.to_string());
        put("num_blocks", self.num_blocks.to_string());
        put("mixer_kind", self.mixer_kind.to_string());
        put("preset", self.preset.map_or("none".to_string(), |p| p.to_string()));
        put("tolerance", self.tolerance.to_string());
        put("cases", self.cases.to_string());
        put("bins", self.bins.to_string());
        put("r_values", list(&self.r_values));
        put("approx_seeds", self.approx_seeds.to_string());
        put("qk_dump", self.qk_dump.as_ref().map_or(String::new(), |p| p.display().to_string()));
        put("t_values", list(&self.t_values));
        put("repeats", self.repeats.to_string());
        put("bench_d", self.bench_d.to_string());
        put("bench_r", self.bench_r.to_string());
        put("bench_ops", self.bench_ops.join(","));
        put("zero_weights", self.zero_weights.to_string());
        out
    }
}
