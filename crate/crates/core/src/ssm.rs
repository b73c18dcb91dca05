//! Selective state-space scans and their matrix mixers.
//!
//! Transitions use the scalar-identity convention `A_t = a_t · I`. Time is
//! 0-based here: step `t` of a length-T sequence is index `t - 1` in 1-based
//! notation. The forward recurrence is
//!
//! ```text
//! h_t = a_t h_{t-1} + b_t x_t,   y_t = c_tᵀ h_t,   h_{-1} = 0
//! ```
//!
//! and the backward one runs the same update from the end with
//! `h_t = a_t h_{t+1} + b_t x_t`. Unrolling either gives the segment-product
//! mixer entry `c_iᵀ b_j · segment_product(a, i, j)`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{MixError, Result};
use crate::mixer::{FeatureSequence, MatrixMixer, MixerClass};
use crate::rng::MixRng;

/// Default hidden state size.
pub const DEFAULT_STATE_SIZE: usize = 16;

/// Per-step parameters of one selective scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanParams {
    a: Array1<f64>,
    b: Array2<f64>,
    c: Array2<f64>,
    delta: Array1<f64>,
}

impl ScanParams {
    /// `a` has length T, `b` and `c` are T×N, `delta` has length T.
    ///
    /// Decays must lie in `[0, 1]`. `a_t = 0` is the infinite-step limit of the
    /// discretization and is accepted so the memoryless case is expressible.
    pub fn new(a: Array1<f64>, b: Array2<f64>, c: Array2<f64>, delta: Array1<f64>) -> Result<Self> {
        let t = a.len();
        if t == 0 {
            return Err(MixError::shape("ScanParams", "T >= 1", "T = 0"));
        }
        let n = b.ncols();
        if n == 0 || b.nrows() != t {
            return Err(MixError::shape("ScanParams b", format!("{t}xN with N >= 1"), format!("{:?}", b.dim())));
        }
        if c.dim() != (t, n) {
            return Err(MixError::shape("ScanParams c", format!("{t}x{n}"), format!("{:?}", c.dim())));
        }
        if delta.len() != t {
            return Err(MixError::shape("ScanParams delta", format!("length {t}"), format!("length {}", delta.len())));
        }
        if !(a.iter().chain(b.iter()).chain(c.iter()).chain(delta.iter())).all(|v| v.is_finite()) {
            return Err(MixError::NonFinite("ScanParams"));
        }
        if let Some(bad) = a.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(MixError::InvalidArgument(format!("decay {bad} outside [0, 1]")));
        }
        if let Some(bad) = delta.iter().find(|&&v| v <= 0.0) {
            return Err(MixError::InvalidArgument(format!("step size {bad} is not positive")));
        }
        Ok(Self { a, b, c, delta })
    }

    /// Parameters given directly as decays, with every step size set to 1.
    pub fn with_unit_steps(a: Array1<f64>, b: Array2<f64>, c: Array2<f64>) -> Result<Self> {
        let t = a.len();
        Self::new(a, b, c, Array1::ones(t))
    }

    /// Generic random parameters: decays uniform in `[0.3, 1)`, `b` and `c`
    /// Gaussian with a per-call magnitude drawn log-uniformly from `[0.1, 3]`.
    pub fn random(t: usize, n: usize, rng: &mut MixRng) -> Result<Self> {
        let a = rng.uniform_vector(t, 0.3, 1.0);
        let b_scale = (rng.uniform(0.1f64.ln(), 3f64.ln())).exp();
        let c_scale = (rng.uniform(0.1f64.ln(), 3f64.ln())).exp();
        let b = rng.normal_matrix(t, n, b_scale);
        let c = rng.normal_matrix(t, n, c_scale);
        let delta = rng.uniform_vector(t, 0.01, 0.5);
        Self::new(a, b, c, delta)
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn state_size(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> ArrayView1<'_, f64> {
        self.a.view()
    }

    pub fn b(&self) -> ArrayView2<'_, f64> {
        self.b.view()
    }

    pub fn c(&self) -> ArrayView2<'_, f64> {
        self.c.view()
    }

    pub fn delta(&self) -> ArrayView1<'_, f64> {
        self.delta.view()
    }

    /// Destructures into `(a, b, c, delta)`.
    pub fn into_parts(self) -> (Array1<f64>, Array2<f64>, Array2<f64>, Array1<f64>) {
        (self.a, self.b, self.c, self.delta)
    }
}

/// Weights that turn a T×d input into [`ScanParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveWeights {
    pub w_delta: Array1<f64>,
    pub delta_bias: f64,
    pub w_b: Array2<f64>,
    pub w_c: Array2<f64>,
    pub a_log: f64,
}

impl SelectiveWeights {
    /// Mamba-style initialization: step sizes near `[0.001, 0.1]`, continuous
    /// decay rate `exp(a_log)` in `[1, 16]`.
    pub fn random(d: usize, n: usize, rng: &mut MixRng) -> Self {
        let std = (d as f64).powf(-0.5);
        let dt = (rng.uniform(0.001f64.ln(), 0.1f64.ln())).exp();
        Self {
            w_delta: rng.normal_vector(d, std),
            // inverse softplus of dt
            delta_bias: dt + (-(-dt).exp_m1()).ln(),
            w_b: rng.normal_matrix(n, d, std),
            w_c: rng.normal_matrix(n, d, std),
            a_log: rng.uniform(0.0, 16f64.ln()),
        }
    }

    pub fn zeros(d: usize, n: usize) -> Self {
        Self {
            w_delta: Array1::zeros(d),
            delta_bias: 0.0,
            w_b: Array2::zeros((n, d)),
            w_c: Array2::zeros((n, d)),
            a_log: 0.0,
        }
    }

    pub fn width(&self) -> usize {
        self.w_delta.len()
    }

    pub fn state_size(&self) -> usize {
        self.w_b.nrows()
    }

    fn check(&self, d: usize) -> Result<()> {
        let n = self.w_b.nrows();
        if self.w_delta.len() != d || self.w_b.dim() != (n, d) || self.w_c.dim() != (n, d) || n == 0 {
            return Err(MixError::shape(
                "SelectiveWeights",
                format!("w_delta[{d}], w_b/w_c Nx{d}"),
                format!("w_delta[{}], w_b {:?}, w_c {:?}", self.w_delta.len(), self.w_b.dim(), self.w_c.dim()),
            ));
        }
        let finite = self.w_delta.iter().chain(self.w_b.iter()).chain(self.w_c.iter()).all(|v| v.is_finite())
            && self.delta_bias.is_finite()
            && self.a_log.is_finite();
        if finite {
            Ok(())
        } else {
            Err(MixError::NonFinite("SelectiveWeights"))
        }
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Input-dependent discretization:
///
/// ```text
/// Δ_t = softplus(w_Δ·x_t + bias)
/// a_t = exp(−Δ_t · exp(a_log))
/// b_t = Δ_t · (W_b x_t)
/// c_t = W_c x_t
/// ```
pub fn selective_parameterize(x: &FeatureSequence, weights: &SelectiveWeights) -> Result<ScanParams> {
    weights.check(x.width())?;
    let xv = x.view();
    let (t_len, n) = (x.len(), weights.state_size());
    let mut a = Array1::zeros(t_len);
    let mut delta = Array1::zeros(t_len);
    let mut b = Array2::zeros((t_len, n));
    let mut c = Array2::zeros((t_len, n));
    for (start, end) in chunks(t_len) {
        let p = parameterize_chunk(xv.slice(s![start..end, ..]), weights)?;
        a.slice_mut(s![start..end]).assign(&p.a);
        delta.slice_mut(s![start..end]).assign(&p.delta);
        b.slice_mut(s![start..end, ..]).assign(&p.b);
        c.slice_mut(s![start..end, ..]).assign(&p.c);
    }
    ScanParams::new(a, b, c, delta)
}

/// Rows per parameterization chunk in the channelwise scans. Small enough
/// that a chunk of inputs and its parameters stay in cache while scanned.
const CHUNK: usize = 256;

fn chunks(t_len: usize) -> impl DoubleEndedIterator<Item = (usize, usize)> {
    (0..t_len.div_ceil(CHUNK)).map(move |i| (i * CHUNK, ((i + 1) * CHUNK).min(t_len)))
}

/// Parameters for a contiguous run of steps. Every parameterization goes
/// through here chunk by chunk, so all callers see bit-identical values.
struct ChunkParams {
    delta: Array1<f64>,
    a: Array1<f64>,
    b: Array2<f64>,
    c: Array2<f64>,
}

fn parameterize_chunk(x: ArrayView2<'_, f64>, weights: &SelectiveWeights) -> Result<ChunkParams> {
    let rate = weights.a_log.exp();
    let delta = x.dot(&weights.w_delta).mapv(|z| softplus(z + weights.delta_bias));
    if delta.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(MixError::NumericRange("step size underflowed or overflowed".into()));
    }
    let a = delta.mapv(|d| (-d * rate).exp());
    let mut b = x.dot(&weights.w_b.t());
    for (mut row, d) in b.rows_mut().into_iter().zip(delta.iter()) {
        row *= *d;
    }
    let c = x.dot(&weights.w_c.t());
    if !a.iter().chain(b.iter()).chain(c.iter()).all(|v| v.is_finite()) {
        return Err(MixError::NonFinite("selective parameters"));
    }
    Ok(ChunkParams { delta, a, b, c })
}

fn check_len(params: &ScanParams, len: usize, context: &'static str) -> Result<()> {
    if params.len() == len {
        Ok(())
    } else {
        Err(MixError::shape(context, format!("T = {}", params.len()), format!("T = {len}")))
    }
}

/// Hidden states of the forward recurrence, T×N.
pub fn ssm_states(params: &ScanParams, x: &[f64]) -> Result<Array2<f64>> {
    check_len(params, x.len(), "ssm_states")?;
    let n = params.state_size();
    let mut h = vec![0.0; n];
    let mut states = Array2::zeros((x.len(), n));
    for (t, &xt) in x.iter().enumerate() {
        let a = params.a[t];
        let b = params.b.row(t);
        for (hn, &bn) in h.iter_mut().zip(b.iter()) {
            *hn = a * *hn + bn * xt;
        }
        states.row_mut(t).assign(&ArrayView1::from(&h[..]));
    }
    Ok(states)
}

fn scan_single(params: &ScanParams, x: &[f64], reverse: bool) -> Vec<f64> {
    let n = params.state_size();
    let t_len = x.len();
    let mut h = vec![0.0; n];
    let mut y = vec![0.0; t_len];
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let a = params.a[t];
        let b = params.b.row(t);
        let c = params.c.row(t);
        let mut acc = 0.0;
        for ((hn, &bn), &cn) in h.iter_mut().zip(b.iter()).zip(c.iter()) {
            *hn = a * *hn + bn * x[t];
            acc += cn * *hn;
        }
        y[t] = acc;
    }
    y
}

/// Forward selective scan, O(T·N) time and O(N) state.
pub fn ssm_scan(params: &ScanParams, x: &[f64]) -> Result<Vec<f64>> {
    check_len(params, x.len(), "ssm_scan")?;
    Ok(scan_single(params, x, false))
}

/// Backward selective scan: the forward scan applied to the reversed
/// sequence (with reversed parameters), read back in original order.
pub fn ssm_scan_reverse(params: &ScanParams, x: &[f64]) -> Result<Vec<f64>> {
    check_len(params, x.len(), "ssm_scan_reverse")?;
    Ok(scan_single(params, x, true))
}

/// Scalar segment product over 0-based indices:
/// `Π_{k=j+1..=i} a_k` for `i > j`, `1` for `i == j`, `Π_{k=i..j} a_k`
/// (exclusive of `j`) for `i < j`.
pub fn segment_product(a: &[f64], i: usize, j: usize) -> Result<f64> {
    let len = a.len();
    for idx in [i, j] {
        if idx >= len {
            return Err(MixError::IndexOutOfRange { index: idx, len });
        }
    }
    Ok(match i.cmp(&j) {
        std::cmp::Ordering::Greater => a[j + 1..=i].iter().product(),
        std::cmp::Ordering::Equal => 1.0,
        std::cmp::Ordering::Less => a[i..j].iter().product(),
    })
}

/// Forward semiseparable matrix: `m_ij = c_iᵀ b_j · Π_{k=j+1..=i} a_k` for
/// `i >= j`, zero above the diagonal.
fn forward_matrix(params: &ScanParams) -> Array2<f64> {
    let t = params.len();
    let mut m = Array2::zeros((t, t));
    for j in 0..t {
        let bj = params.b.row(j);
        let mut decay = 1.0;
        for i in j..t {
            if i > j {
                decay *= params.a[i];
            }
            m[[i, j]] = params.c.row(i).dot(&bj) * decay;
        }
    }
    m
}

/// Backward counterpart: `m_ij = c_iᵀ b_j · Π_{k=i..j} a_k` (exclusive of `j`)
/// for `i <= j`, zero below the diagonal.
fn backward_matrix(params: &ScanParams) -> Array2<f64> {
    let t = params.len();
    let mut m = Array2::zeros((t, t));
    for j in 0..t {
        let bj = params.b.row(j);
        let mut decay = 1.0;
        for i in (0..=j).rev() {
            if i < j {
                decay *= params.a[i];
            }
            m[[i, j]] = params.c.row(i).dot(&bj) * decay;
        }
    }
    m
}

/// Materialized mixer of [`ssm_scan`]; lower triangular, class
/// `semiseparable(N)`.
pub fn ssm_mixer(params: &ScanParams) -> Result<MatrixMixer> {
    MatrixMixer::new(forward_matrix(params), MixerClass::Semiseparable(params.state_size()))
}

/// Materialized mixer of [`ssm_scan_reverse`]; upper triangular.
pub fn ssm_mixer_reverse(params: &ScanParams) -> Result<MatrixMixer> {
    MatrixMixer::new(backward_matrix(params), MixerClass::Dense)
}

fn check_pair(fwd: &ScanParams, bwd: &ScanParams) -> Result<()> {
    if fwd.len() != bwd.len() || fwd.state_size() != bwd.state_size() {
        return Err(MixError::shape(
            "forward/backward parameters",
            format!("T = {}, N = {}", fwd.len(), fwd.state_size()),
            format!("T = {}, N = {}", bwd.len(), bwd.state_size()),
        ));
    }
    Ok(())
}

/// Addition-based bidirectional Mamba: two independent scans summed.
#[derive(Clone, Debug, PartialEq)]
pub struct BiMambaParams {
    pub fwd: ScanParams,
    pub bwd: ScanParams,
}

impl BiMambaParams {
    pub fn new(fwd: ScanParams, bwd: ScanParams) -> Result<Self> {
        check_pair(&fwd, &bwd)?;
        Ok(Self { fwd, bwd })
    }

    pub fn len(&self) -> usize {
        self.fwd.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `y = scan_fwd(x) + reverse(scan_bwd(reverse(x)))`, linear time.
pub fn bimamba_apply(p: &BiMambaParams, x: &[f64]) -> Result<Vec<f64>> {
    let mut y = ssm_scan(&p.fwd, x)?;
    let back = ssm_scan_reverse(&p.bwd, x)?;
    for (yi, bi) in y.iter_mut().zip(back) {
        *yi += bi;
    }
    Ok(y)
}

/// Bi-Mamba mixer. The diagonal `→c_iᵀ→b_i + ←c_iᵀ←b_i` is shared with the
/// off-diagonal parameters; class `quasiseparable(N)`.
pub fn bimamba_mixer(p: &BiMambaParams) -> Result<MatrixMixer> {
    let mut m = forward_matrix(&p.fwd);
    m += &backward_matrix(&p.bwd);
    MatrixMixer::new(m, MixerClass::Quasiseparable(p.fwd.state_size()))
}

/// Hydra: quasiseparable mixer with a free diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct HydraParams {
    pub fwd: ScanParams,
    pub bwd: ScanParams,
    pub diag_delta: Array1<f64>,
}

impl HydraParams {
    pub fn new(fwd: ScanParams, bwd: ScanParams, diag_delta: Array1<f64>) -> Result<Self> {
        check_pair(&fwd, &bwd)?;
        if diag_delta.len() != fwd.len() {
            return Err(MixError::shape("HydraParams diag_delta", format!("length {}", fwd.len()), format!("length {}", diag_delta.len())));
        }
        if !diag_delta.iter().all(|v| v.is_finite()) {
            return Err(MixError::NonFinite("HydraParams diag_delta"));
        }
        Ok(Self { fwd, bwd, diag_delta })
    }

    pub fn len(&self) -> usize {
        self.fwd.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn hydra_combine(fwd_out: &[f64], bwd_out: &[f64], diag: impl Fn(usize) -> f64, x: &[f64]) -> Vec<f64> {
    let t_len = x.len();
    (0..t_len)
        .map(|t| {
            let below = if t > 0 { fwd_out[t - 1] } else { 0.0 };
            let above = if t + 1 < t_len { bwd_out[t + 1] } else { 0.0 };
            below + above + diag(t) * x[t]
        })
        .collect()
}

/// Linear-time Hydra: the forward scan shifted down one step, the backward
/// scan shifted up one step (boundary positions zero-filled) and the
/// diagonal gain `δ ⊙ x`.
pub fn hydra_apply(p: &HydraParams, x: &[f64]) -> Result<Vec<f64>> {
    let fwd = ssm_scan(&p.fwd, x)?;
    let bwd = ssm_scan_reverse(&p.bwd, x)?;
    Ok(hydra_combine(&fwd, &bwd, |t| p.diag_delta[t], x))
}

/// Hydra mixer:
///
/// ```text
/// m_ij = →c_{i-1}ᵀ →A×_{i-1:j} →b_j   (i > j)
///      = δ_i                          (i = j)
///      = ←c_{i+1}ᵀ ←A×_{i+1:j} ←b_j   (i < j)
/// ```
///
/// Class `quasiseparable(N)`; the diagonal is exactly `diag_delta`.
pub fn hydra_mixer(p: &HydraParams) -> Result<MatrixMixer> {
    let t = p.len();
    let fwd = forward_matrix(&p.fwd);
    let bwd = backward_matrix(&p.bwd);
    let m = Array2::from_shape_fn((t, t), |(i, j)| match i.cmp(&j) {
        std::cmp::Ordering::Greater => fwd[[i - 1, j]],
        std::cmp::Ordering::Equal => p.diag_delta[i],
        std::cmp::Ordering::Less => bwd[[i + 1, j]],
    });
    MatrixMixer::new(m, MixerClass::Quasiseparable(p.fwd.state_size()))
}

/// Advances a scan shared by all channels over the steps of one chunk
/// starting at row `start` of `x`, in descending order when `reverse`. `h` is
/// the N×d state (state-major) carried between chunks. `emit(t, y_t)` sees
/// each step's output. Per channel the arithmetic is identical to
/// [`ssm_scan`] / [`ssm_scan_reverse`].
fn scan_chunk(
    p: &ChunkParams,
    start: usize,
    x: ArrayView2<'_, f64>,
    h: &mut [f64],
    acc: &mut [f64],
    reverse: bool,
    mut emit: impl FnMut(usize, &[f64]),
) {
    let d = x.ncols();
    let n = p.b.ncols();
    let len = p.a.len();
    for step in 0..len {
        let local = if reverse { len - 1 - step } else { step };
        let t = start + local;
        let a = p.a[local];
        let xt = x.row(t);
        let xt = xt.as_slice().expect("row-major input");
        acc.iter_mut().for_each(|v| *v = 0.0);
        for s in 0..n {
            let bs = p.b[[local, s]];
            let cs = p.c[[local, s]];
            let hs = &mut h[s * d..(s + 1) * d];
            for ((hv, &xv), av) in hs.iter_mut().zip(xt).zip(acc.iter_mut()) {
                *hv = a * *hv + bs * xv;
                *av += cs * *hv;
            }
        }
        emit(t, acc);
    }
}

/// Runs a full scan over `x`, chunk by chunk, parameterizing each chunk just
/// before it is scanned.
fn scan_streaming(
    x: ArrayView2<'_, f64>,
    weights: &SelectiveWeights,
    reverse: bool,
    mut emit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    let (t_len, d) = x.dim();
    let mut h = vec![0.0; weights.state_size() * d];
    let mut acc = vec![0.0; d];
    let mut run = |(start, end): (usize, usize)| -> Result<()> {
        let p = parameterize_chunk(x.slice(s![start..end, ..]), weights)?;
        scan_chunk(&p, start, x, &mut h, &mut acc, reverse, &mut emit);
        Ok(())
    };
    if reverse {
        chunks(t_len).rev().try_for_each(&mut run)
    } else {
        chunks(t_len).try_for_each(&mut run)
    }
}

fn row_major(x: &FeatureSequence) -> ArrayView2<'_, f64> {
    debug_assert!(x.view().is_standard_layout());
    x.view()
}

/// Channel-independent forward selective SSM with parameters shared across
/// channels, O(T·N·d).
pub fn ssm_channelwise(x: &FeatureSequence, weights: &SelectiveWeights) -> Result<FeatureSequence> {
    weights.check(x.width())?;
    let xs = row_major(x);
    let mut y = Array2::<f64>::zeros(xs.dim());
    scan_streaming(xs, weights, false, |t, out| y.row_mut(t).assign(&ArrayView1::from(out)))?;
    FeatureSequence::new(y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiMambaWeights {
    pub fwd: SelectiveWeights,
    pub bwd: SelectiveWeights,
}

impl BiMambaWeights {
    pub fn random(d: usize, n: usize, rng: &mut MixRng) -> Self {
        Self { fwd: SelectiveWeights::random(d, n, rng), bwd: SelectiveWeights::random(d, n, rng) }
    }

    pub fn params(&self, x: &FeatureSequence) -> Result<BiMambaParams> {
        BiMambaParams::new(selective_parameterize(x, &self.fwd)?, selective_parameterize(x, &self.bwd)?)
    }
}

pub fn bimamba_channelwise(x: &FeatureSequence, weights: &BiMambaWeights) -> Result<FeatureSequence> {
    weights.fwd.check(x.width())?;
    weights.bwd.check(x.width())?;
    let xs = row_major(x);
    let mut y = Array2::<f64>::zeros(xs.dim());
    scan_streaming(xs, &weights.fwd, false, |t, out| y.row_mut(t).assign(&ArrayView1::from(out)))?;
    scan_streaming(xs, &weights.bwd, true, |t, out| {
        for (yi, bi) in y.row_mut(t).iter_mut().zip(out) {
            *yi += bi;
        }
    })?;
    FeatureSequence::new(y)
}

/// Hydra weights for a width-d input: a selective parameterization per
/// direction and one diagonal gain per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct HydraWeights {
    pub fwd: SelectiveWeights,
    pub bwd: SelectiveWeights,
    pub diag_gain: Array1<f64>,
}

impl HydraWeights {
    pub fn random(d: usize, n: usize, rng: &mut MixRng) -> Self {
        Self {
            fwd: SelectiveWeights::random(d, n, rng),
            bwd: SelectiveWeights::random(d, n, rng),
            diag_gain: rng.normal_vector(d, 1.0),
        }
    }

    /// Scan parameters shared by all channels.
    pub fn shared_params(&self, x: &FeatureSequence) -> Result<(ScanParams, ScanParams)> {
        if self.diag_gain.len() != x.width() {
            return Err(MixError::shape("HydraWeights diag_gain", format!("length {}", x.width()), format!("length {}", self.diag_gain.len())));
        }
        Ok((selective_parameterize(x, &self.fwd)?, selective_parameterize(x, &self.bwd)?))
    }

    /// Full Hydra parameters seen by channel `c`.
    pub fn channel_params(&self, x: &FeatureSequence, c: usize) -> Result<HydraParams> {
        let (fwd, bwd) = self.shared_params(x)?;
        let gain = *self
            .diag_gain
            .get(c)
            .ok_or(MixError::IndexOutOfRange { index: c, len: self.diag_gain.len() })?;
        HydraParams::new(fwd, bwd, Array1::from_elem(x.len(), gain))
    }
}

/// Hydra over every channel: scan parameters are derived once from the whole
/// input, then each channel is mixed independently. O(T·N·d).
pub fn hydra_channelwise(x: &FeatureSequence, weights: &HydraWeights) -> Result<FeatureSequence> {
    let d = x.width();
    weights.fwd.check(d)?;
    weights.bwd.check(d)?;
    if weights.diag_gain.len() != d {
        return Err(MixError::shape("HydraWeights diag_gain", format!("length {d}"), format!("length {}", weights.diag_gain.len())));
    }
    let xs = row_major(x);
    let gain = weights.diag_gain.view();
    // `y` holds the forward outputs until the descending pass overwrites row
    // t, which happens after row t + 1 has read its predecessor.
    let mut y = Array2::<f64>::zeros(xs.dim());
    scan_streaming(xs, &weights.fwd, false, |t, out| y.row_mut(t).assign(&ArrayView1::from(out)))?;
    let mut above = vec![0.0; d];
    scan_streaming(xs, &weights.bwd, true, |t, out| {
        for c in 0..d {
            let below = if t > 0 { y[[t - 1, c]] } else { 0.0 };
            y[[t, c]] = below + above[c] + gain[c] * xs[[t, c]];
        }
        above.copy_from_slice(out);
    })?;
    FeatureSequence::new(y)
}
