//! Softmax attention, FAVOR+ linear attention and rotary position embedding.
//!
//! Logits are `Q Kᵀ` with no `1/sqrt(d)` factor; callers that want the usual
//! temperature fold it into the query/key projections.
//!
//! Both attention forms come in two shapes: an operational one that never
//! builds the T×T matrix (streamed row blocks for softmax, the `φ(K)ᵀV`-first
//! association for FAVOR+), and a materialized [`MatrixMixer`] used for
//! verification and diagnostics.

use nalgebra::DMatrix;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{MixError, Result};
use crate::mixer::{FeatureSequence, MatrixMixer, MixerClass};
use crate::rng::MixRng;

/// Default RoPE frequency base.
pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Rows of the score matrix materialized at once by [`softmax_attention`].
const SOFTMAX_ROW_BLOCK: usize = 64;

fn check_finite(m: ArrayView2<'_, f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MixError::NonFinite(what))
    }
}

/// Queries, keys and values for one head, each T×d_head.
#[derive(Clone, Debug)]
pub struct QkvTriple {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

impl QkvTriple {
    pub fn new(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>) -> Result<Self> {
        let (t, d) = q.dim();
        if t == 0 || d == 0 {
            return Err(MixError::shape("QkvTriple", "T >= 1, d_head >= 1", format!("{t}x{d}")));
        }
        if k.dim() != (t, d) {
            return Err(MixError::shape("QkvTriple keys", format!("{t}x{d}"), format!("{:?}", k.dim())));
        }
        if v.dim() != (t, d) {
            return Err(MixError::shape("QkvTriple values", format!("{t}x{d}"), format!("{:?}", v.dim())));
        }
        check_finite(q.view(), "queries")?;
        check_finite(k.view(), "keys")?;
        check_finite(v.view(), "values")?;
        Ok(Self { q, k, v })
    }

    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn d_head(&self) -> usize {
        self.q.ncols()
    }
}

fn check_qk(q: ArrayView2<'_, f64>, k: ArrayView2<'_, f64>) -> Result<()> {
    if q.dim() != k.dim() || q.nrows() == 0 || q.ncols() == 0 {
        return Err(MixError::shape("query/key", format!("{:?}", q.dim()), format!("{:?}", k.dim())));
    }
    check_finite(q, "queries")?;
    check_finite(k, "keys")
}

fn softmax_rows_in_place(scores: &mut ArrayViewMut2<'_, f64>) -> Array1<f64> {
    let mut sums = Array1::zeros(scores.nrows());
    for (mut row, sum) in scores.rows_mut().into_iter().zip(sums.iter_mut()) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut acc = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            acc += e;
            e
        });
        *sum = acc;
    }
    sums
}

/// `Softmax(Q Kᵀ)` as a dense mixer.
pub fn softmax_mixer(q: ArrayView2<'_, f64>, k: ArrayView2<'_, f64>) -> Result<MatrixMixer> {
    check_qk(q, k)?;
    let mut scores = q.dot(&k.t());
    let sums = softmax_rows_in_place(&mut scores.view_mut());
    for (mut row, sum) in scores.rows_mut().into_iter().zip(sums.iter()) {
        row /= *sum;
    }
    MatrixMixer::new(scores, MixerClass::Dense)
}

/// `Softmax(Q Kᵀ) V`, streamed over row blocks so memory stays O(T) per block.
pub fn softmax_attention(qkv: &QkvTriple) -> Result<FeatureSequence> {
    let t = qkv.len();
    let d = qkv.d_head();
    let block = SOFTMAX_ROW_BLOCK.min(t);
    let mut out = Array2::<f64>::zeros((t, d));
    let mut scores = Array2::<f64>::zeros((block, t));
    let kt = qkv.k.t();

    let mut start = 0;
    while start < t {
        let end = (start + block).min(t);
        let rows = end - start;
        let mut sc = scores.slice_mut(s![..rows, ..]);
        general_mat_mul(1.0, &qkv.q.slice(s![start..end, ..]), &kt, 0.0, &mut sc);
        let sums = softmax_rows_in_place(&mut sc);
        let mut y = out.slice_mut(s![start..end, ..]);
        general_mat_mul(1.0, &sc, &qkv.v, 0.0, &mut y);
        for (mut row, sum) in y.rows_mut().into_iter().zip(sums.iter()) {
            row /= *sum;
        }
        start = end;
    }
    FeatureSequence::new(out)
}

/// Random feature matrix Ω (r×d_head) with blockwise orthogonal rows.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthogonalFeatureMatrix {
    omega: Array2<f64>,
    seed: u64,
}

impl OrthogonalFeatureMatrix {
    /// Wraps an explicit Ω. Rows must be non-zero; orthogonality is not
    /// re-checked, which lets tests feed hand-built matrices.
    pub fn from_matrix(omega: Array2<f64>, seed: u64) -> Result<Self> {
        let (r, d) = omega.dim();
        if r == 0 || d == 0 {
            return Err(MixError::shape("OrthogonalFeatureMatrix", "r >= 1, d_head >= 1", format!("{r}x{d}")));
        }
        check_finite(omega.view(), "feature matrix")?;
        if omega.rows().into_iter().any(|row| row.dot(&row) <= 0.0) {
            return Err(MixError::InvalidArgument("feature rows must have positive norm".into()));
        }
        Ok(Self { omega, seed })
    }

    pub fn omega(&self) -> ArrayView2<'_, f64> {
        self.omega.view()
    }

    pub fn num_features(&self) -> usize {
        self.omega.nrows()
    }

    pub fn d_head(&self) -> usize {
        self.omega.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Draws Ω for positive orthogonal random features.
///
/// Rows come in blocks of `d_head`; each block is the orthogonal factor of a
/// Gaussian square matrix, truncated for the last partial block. Every row is
/// then rescaled to the norm of an independent `d_head`-dimensional Gaussian
/// vector, so row norms are chi(d_head) distributed as for unstructured
/// Gaussian rows.
pub fn draw_orthogonal_features(d_head: usize, r: usize, seed: u64) -> Result<OrthogonalFeatureMatrix> {
    if d_head == 0 || r == 0 {
        return Err(MixError::InvalidArgument(format!("need d_head >= 1 and r >= 1, got {d_head}, {r}")));
    }
    let mut rng = MixRng::new(seed);
    let mut omega = Array2::<f64>::zeros((r, d_head));
    let mut start = 0;
    while start < r {
        let rows = (r - start).min(d_head);
        let g = DMatrix::from_fn(d_head, d_head, |_, _| rng.normal());
        let q = g.qr().q();
        for i in 0..rows {
            for j in 0..d_head {
                omega[[start + i, j]] = q[(i, j)];
            }
        }
        start += rows;
    }
    for mut row in omega.rows_mut() {
        let norm = (0..d_head).map(|_| rng.normal().powi(2)).sum::<f64>().sqrt();
        let current = row.dot(&row).sqrt();
        row *= norm / current;
    }
    OrthogonalFeatureMatrix::from_matrix(omega, seed)
}

/// Positive random features with a factored-out scale.
///
/// The true feature values are `values * exp(log_shift)`; the shift is the
/// largest exponent seen in the call, so `values` never overflow.
#[derive(Clone, Debug)]
pub struct PositiveFeatures {
    pub values: Array2<f64>,
    pub log_shift: f64,
}

impl PositiveFeatures {
    /// Undoes the stabilizing shift. Fails if the true values overflow.
    pub fn unshifted(&self) -> Result<Array2<f64>> {
        let scale = self.log_shift.exp();
        let out = self.values.mapv(|v| v * scale);
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(MixError::NumericRange(format!(
                "feature values overflow (log shift {})",
                self.log_shift
            )))
        }
    }
}

/// `Ωx − ‖x‖²/2` for each row of `x`.
fn feature_exponents(x: ArrayView2<'_, f64>, omega: &OrthogonalFeatureMatrix) -> Result<Array2<f64>> {
    if x.ncols() != omega.d_head() {
        return Err(MixError::shape("positive_feature_map", format!("width {}", omega.d_head()), format!("width {}", x.ncols())));
    }
    let mut z = x.dot(&omega.omega.t());
    for (mut row, xr) in z.rows_mut().into_iter().zip(x.rows()) {
        let half_sq = 0.5 * xr.dot(&xr);
        row -= half_sq;
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(MixError::NumericRange("feature exponent is not finite".into()));
    }
    Ok(z)
}

fn max_entry(z: &Array2<f64>) -> f64 {
    z.fold(f64::NEG_INFINITY, |m, &v| m.max(v))
}

/// `φ(x) = r^(-1/2) exp(Ωx − ‖x‖²/2)` for each row of `x`, stabilized by
/// subtracting the maximum exponent over the whole call.
pub fn positive_feature_map(x: ArrayView2<'_, f64>, omega: &OrthogonalFeatureMatrix) -> Result<PositiveFeatures> {
    let mut z = feature_exponents(x, omega)?;
    let shift = max_entry(&z);
    let norm = (omega.num_features() as f64).sqrt().recip();
    z.mapv_inplace(|v| (v - shift).exp() * norm);
    Ok(PositiveFeatures { values: z, log_shift: shift })
}

fn check_normalizer(den: &Array1<f64>) -> Result<()> {
    if den.iter().all(|&v| v > 0.0 && v.is_finite()) {
        Ok(())
    } else {
        Err(MixError::NumericRange("FAVOR+ normalizer underflowed to zero".into()))
    }
}

/// Rows per chunk when streaming FAVOR+ features.
const FAVOR_CHUNK: usize = 256;

fn row_chunks(t: usize, size: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..t.div_ceil(size)).map(move |i| (i * size, ((i + 1) * size).min(t)))
}

/// `D⁻¹ φ(Q) (φ(K)ᵀ V)` evaluated in O(T r d) time and O(r d) extra memory.
///
/// Keys are folded into `φ(K)ᵀV` and `φ(K)ᵀ1` chunk by chunk, rescaling the
/// running sums whenever the largest exponent grows; queries are shifted per
/// chunk. Any common factor on the key side, and any per-row factor on the
/// query side, cancels in `D⁻¹`.
pub fn favor_attention(qkv: &QkvTriple, omega: &OrthogonalFeatureMatrix) -> Result<FeatureSequence> {
    let (t, dv) = qkv.v.dim();
    let r = omega.num_features();
    let norm = (r as f64).sqrt().recip();
    let mut kv = Array2::<f64>::zeros((r, dv));
    let mut k_sum = Array1::<f64>::zeros(r);
    let mut shift = f64::NEG_INFINITY;
    for (start, end) in row_chunks(t, FAVOR_CHUNK) {
        let mut z = feature_exponents(qkv.k.slice(s![start..end, ..]), omega)?;
        let m = max_entry(&z);
        if m > shift {
            if shift.is_finite() {
                let rescale = (shift - m).exp();
                kv *= rescale;
                k_sum *= rescale;
            }
            shift = m;
        }
        z.mapv_inplace(|v| (v - shift).exp() * norm);
        general_mat_mul(1.0, &z.t(), &qkv.v.slice(s![start..end, ..]), 1.0, &mut kv);
        k_sum += &z.sum_axis(Axis(0));
    }
    let mut out = Array2::<f64>::zeros((t, dv));
    for (start, end) in row_chunks(t, FAVOR_CHUNK) {
        let mut z = feature_exponents(qkv.q.slice(s![start..end, ..]), omega)?;
        let m = max_entry(&z);
        z.mapv_inplace(|v| (v - m).exp() * norm);
        let den = z.dot(&k_sum);
        check_normalizer(&den)?;
        let mut block = out.slice_mut(s![start..end, ..]);
        general_mat_mul(1.0, &z, &kv, 0.0, &mut block);
        for (mut row, d) in block.rows_mut().into_iter().zip(den.iter()) {
            row /= *d;
        }
    }
    FeatureSequence::new(out)
}

/// `D⁻¹ φ(Q) φ(K)ᵀ` as a rank-r mixer.
pub fn favor_mixer(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    omega: &OrthogonalFeatureMatrix,
) -> Result<MatrixMixer> {
    check_qk(q, k)?;
    let phi_q = positive_feature_map(q, omega)?.values;
    let phi_k = positive_feature_map(k, omega)?.values;
    let mut m = phi_q.dot(&phi_k.t());
    let den = m.sum_axis(Axis(1));
    check_normalizer(&den)?;
    for (mut row, d) in m.rows_mut().into_iter().zip(den.iter()) {
        row /= *d;
    }
    MatrixMixer::new(m, MixerClass::LowRank(omega.num_features()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeConfig {
    base: f64,
    d_head: usize,
}

impl RopeConfig {
    pub fn new(base: f64, d_head: usize) -> Result<Self> {
        if !(base > 0.0 && base.is_finite()) {
            return Err(MixError::InvalidArgument(format!("RoPE base must be positive, got {base}")));
        }
        if d_head == 0 || !d_head.is_multiple_of(2) {
            return Err(MixError::InvalidArgument(format!("RoPE needs an even positive d_head, got {d_head}")));
        }
        Ok(Self { base, d_head })
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    fn frequency(&self, pair: usize) -> f64 {
        self.base.powf(-2.0 * pair as f64 / self.d_head as f64)
    }
}

/// Rotates one row as if it sat at `position`.
pub fn rotate_at(row: &mut [f64], position: usize, cfg: &RopeConfig) {
    for (pair, chunk) in row.chunks_exact_mut(2).enumerate() {
        let angle = position as f64 * cfg.frequency(pair);
        let (sin, cos) = angle.sin_cos();
        let (x0, x1) = (chunk[0], chunk[1]);
        chunk[0] = cos * x0 - sin * x1;
        chunk[1] = sin * x0 + cos * x1;
    }
}

/// Rotary position embedding: row `t` is rotated pairwise by `t · base^(−2i/d)`.
pub fn apply_rope(x: ArrayView2<'_, f64>, cfg: &RopeConfig) -> Result<Array2<f64>> {
    if x.ncols() != cfg.d_head {
        return Err(MixError::shape("apply_rope", format!("width {}", cfg.d_head), format!("width {}", x.ncols())));
    }
    let mut out = x.to_owned();
    for (t, mut row) in out.rows_mut().into_iter().enumerate() {
        let slice = row
            .as_slice_mut()
            .expect("owned row-major rows are contiguous");
        rotate_at(slice, t, cfg);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiHeadConfig {
    num_heads: usize,
    d_model: usize,
    rope: Option<RopeConfig>,
}

impl MultiHeadConfig {
    pub fn new(num_heads: usize, d_model: usize) -> Result<Self> {
        if num_heads == 0 || d_model == 0 || !d_model.is_multiple_of(num_heads) {
            return Err(MixError::InvalidArgument(format!(
                "d_model ({d_model}) must be a positive multiple of num_heads ({num_heads})"
            )));
        }
        Ok(Self { num_heads, d_model, rope: None })
    }

    /// Enables RoPE on queries and keys.
    pub fn with_rope(mut self, base: f64) -> Result<Self> {
        self.rope = Some(RopeConfig::new(base, self.d_head())?);
        Ok(self)
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn rope(&self) -> Option<&RopeConfig> {
        self.rope.as_ref()
    }
}

/// Projections applied as `x · W`, all d_model×d_model.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

impl AttentionWeights {
    pub fn identity(d_model: usize) -> Self {
        let eye = Array2::eye(d_model);
        Self { wq: eye.clone(), wk: eye.clone(), wv: eye.clone(), wo: eye }
    }

    pub fn random(d_model: usize, rng: &mut MixRng) -> Self {
        let std = (d_model as f64).powf(-0.5);
        Self {
            wq: rng.normal_matrix(d_model, d_model, std),
            wk: rng.normal_matrix(d_model, d_model, std),
            wv: rng.normal_matrix(d_model, d_model, std),
            wo: rng.normal_matrix(d_model, d_model, std),
        }
    }

    fn check(&self, d_model: usize) -> Result<()> {
        for (name, w) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if w.dim() != (d_model, d_model) {
                return Err(MixError::shape("attention projection", format!("{name} {d_model}x{d_model}"), format!("{:?}", w.dim())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttentionKind {
    Softmax,
    Favor(OrthogonalFeatureMatrix),
}

fn head_triples(x: &FeatureSequence, w: &AttentionWeights, cfg: &MultiHeadConfig) -> Result<Vec<QkvTriple>> {
    if x.width() != cfg.d_model {
        return Err(MixError::shape("multi_head_attention", format!("width {}", cfg.d_model), format!("width {}", x.width())));
    }
    w.check(cfg.d_model)?;
    let xv = x.view();
    let q = xv.dot(&w.wq);
    let k = xv.dot(&w.wk);
    let v = xv.dot(&w.wv);
    let dh = cfg.d_head();
    (0..cfg.num_heads)
        .map(|h| {
            let cols = s![.., h * dh..(h + 1) * dh];
            let (mut qh, mut kh) = (q.slice(cols).to_owned(), k.slice(cols).to_owned());
            if let Some(rope) = &cfg.rope {
                qh = apply_rope(qh.view(), rope)?;
                kh = apply_rope(kh.view(), rope)?;
            }
            QkvTriple::new(qh, kh, v.slice(cols).to_owned())
        })
        .collect()
}

/// Projects to per-head Q/K/V, applies RoPE (when configured) to Q and K, runs
/// per-head attention, concatenates heads and applies the output projection.
pub fn multi_head_attention(
    x: &FeatureSequence,
    weights: &AttentionWeights,
    cfg: &MultiHeadConfig,
    kind: &AttentionKind,
) -> Result<FeatureSequence> {
    let heads = head_triples(x, weights, cfg)?;
    let dh = cfg.d_head();
    let mut concat = Array2::<f64>::zeros((x.len(), cfg.d_model));
    for (h, qkv) in heads.iter().enumerate() {
        let y = match kind {
            AttentionKind::Softmax => softmax_attention(qkv)?,
            AttentionKind::Favor(omega) => favor_attention(qkv, omega)?,
        };
        concat.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&y.view());
    }
    FeatureSequence::new(concat.dot(&weights.wo))
}

/// Per-head attention maps of [`multi_head_attention`].
pub fn multi_head_mixers(
    x: &FeatureSequence,
    weights: &AttentionWeights,
    cfg: &MultiHeadConfig,
    kind: &AttentionKind,
) -> Result<Vec<MatrixMixer>> {
    head_triples(x, weights, cfg)?
        .iter()
        .map(|qkv| match kind {
            AttentionKind::Softmax => softmax_mixer(qkv.q.view(), qkv.k.view()),
            AttentionKind::Favor(omega) => favor_mixer(qkv.q.view(), qkv.k.view(), omega),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::{apply_mixer, matrix_rank, DEFAULT_RANK_TOL};
    use ndarray::array;

    fn close(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, tol: f64) -> bool {
        a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn random_qkv(t: usize, d: usize, seed: u64) -> QkvTriple {
        let mut rng = MixRng::new(seed);
        QkvTriple::new(rng.normal_matrix(t, d, 1.0), rng.normal_matrix(t, d, 1.0), rng.normal_matrix(t, d, 1.0)).unwrap()
    }

    #[test]
    fn single_step_softmax_returns_value() {
        let qkv = QkvTriple::new(array![[0.3, -1.0]], array![[0.3, -1.0]], array![[3.0, 5.0]]).unwrap();
        let y = softmax_attention(&qkv).unwrap();
        assert_eq!(y.view(), array![[3.0, 5.0]].view());
    }

    #[test]
    fn zero_queries_attend_uniformly() {
        let qkv = QkvTriple::new(Array2::zeros((2, 2)), array![[1.0, 2.0], [-3.0, 0.5]], array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let y = softmax_attention(&qkv).unwrap();
        assert!(close(y.view(), array![[0.5, 0.5], [0.5, 0.5]].view(), 1e-15));
        let m = softmax_mixer(qkv.q.view(), qkv.k.view()).unwrap();
        assert!(m.matrix().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn softmax_operational_matches_materialized() {
        let qkv = random_qkv(4, 3, 11);
        let y = softmax_attention(&qkv).unwrap();
        let m = softmax_mixer(qkv.q.view(), qkv.k.view()).unwrap();
        let oracle = apply_mixer(&m, &FeatureSequence::new(qkv.v.clone()).unwrap()).unwrap();
        assert!(close(y.view(), oracle.view(), 1e-12));
    }

    #[test]
    fn softmax_blocks_cover_long_sequences() {
        // more rows than one streamed block, with a ragged tail
        let qkv = random_qkv(SOFTMAX_ROW_BLOCK * 2 + 7, 4, 21);
        let y = softmax_attention(&qkv).unwrap();
        let m = softmax_mixer(qkv.q.view(), qkv.k.view()).unwrap();
        let oracle = apply_mixer(&m, &FeatureSequence::new(qkv.v.clone()).unwrap()).unwrap();
        assert!(close(y.view(), oracle.view(), 1e-12));
    }

    #[test]
    fn softmax_saturates_on_dominant_logit() {
        let q = array![[10.0, 0.0], [0.0, 10.0], [0.0, 0.0]];
        let k = array![[10.0, 0.0], [0.0, 10.0], [0.0, 0.0]];
        let m = softmax_mixer(q.view(), k.view()).unwrap();
        assert!(m.get(0, 0) > 1.0 - 1e-12);
        assert!(m.get(1, 1) > 1.0 - 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let qkv = random_qkv(5, 3, 3);
        let m = softmax_mixer(qkv.q.view(), qkv.k.view()).unwrap();
        for row in m.matrix().rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn qkv_rejects_bad_shapes_and_values() {
        assert!(QkvTriple::new(Array2::zeros((2, 2)), Array2::zeros((3, 2)), Array2::zeros((2, 2))).is_err());
        assert!(QkvTriple::new(Array2::zeros((2, 2)), Array2::zeros((2, 2)), array![[0.0, f64::NAN], [0.0, 0.0]]).is_err());
    }

    fn assert_block_orthogonal(omega: &OrthogonalFeatureMatrix) {
        let d = omega.d_head();
        let w = omega.omega();
        for i in 0..omega.num_features() {
            for j in (i + 1)..omega.num_features() {
                if i / d != j / d {
                    continue;
                }
                let (a, b) = (w.row(i), w.row(j));
                let cos = a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
                assert!(cos.abs() < 1e-10, "rows {i},{j} not orthogonal: {cos}");
            }
        }
    }

    #[test]
    fn full_block_is_orthogonal() {
        let omega = draw_orthogonal_features(4, 4, 0).unwrap();
        assert_eq!(omega.omega().dim(), (4, 4));
        assert_block_orthogonal(&omega);
    }

    #[test]
    fn partial_blocks_are_orthogonal() {
        let omega = draw_orthogonal_features(2, 5, 1).unwrap();
        assert_eq!(omega.omega().dim(), (5, 2));
        assert_block_orthogonal(&omega);
        assert!(omega.omega().rows().into_iter().all(|r| r.dot(&r) > 0.0));
    }

    #[test]
    fn features_are_deterministic() {
        let a = draw_orthogonal_features(8, 20, 99).unwrap();
        let b = draw_orthogonal_features(8, 20, 99).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, draw_orthogonal_features(8, 20, 100).unwrap());
    }

    #[test]
    fn zero_input_features_are_flat() {
        let omega = draw_orthogonal_features(3, 16, 4).unwrap();
        let phi = positive_feature_map(Array2::zeros((2, 3)).view(), &omega).unwrap();
        assert_eq!(phi.log_shift, 0.0);
        assert!(phi.values.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn feature_map_rejects_width_mismatch() {
        let omega = draw_orthogonal_features(3, 4, 4).unwrap();
        assert!(positive_feature_map(Array2::zeros((2, 2)).view(), &omega).is_err());
    }

    #[test]
    fn unshifted_overflow_is_a_range_error() {
        let omega = draw_orthogonal_features(1, 2, 0).unwrap();
        let phi = PositiveFeatures { values: omega.omega().to_owned().mapv(f64::abs), log_shift: 1e6 };
        assert!(matches!(phi.unshifted(), Err(MixError::NumericRange(_))));
    }

    #[test]
    fn favor_single_step_returns_value() {
        let omega = draw_orthogonal_features(2, 8, 3).unwrap();
        let qkv = QkvTriple::new(array![[0.4, -0.2]], array![[1.0, 0.7]], array![[3.0, -5.0]]).unwrap();
        let y = favor_attention(&qkv, &omega).unwrap();
        assert!(close(y.view(), array![[3.0, -5.0]].view(), 1e-14));
    }

    #[test]
    fn favor_zero_queries_and_keys_average_values() {
        let omega = draw_orthogonal_features(2, 8, 3).unwrap();
        let v = array![[1.0, 2.0], [3.0, -4.0], [5.0, 0.0]];
        let qkv = QkvTriple::new(Array2::zeros((3, 2)), Array2::zeros((3, 2)), v.clone()).unwrap();
        let y = favor_attention(&qkv, &omega).unwrap();
        let mean = v.mean_axis(Axis(0)).unwrap();
        for row in y.view().rows() {
            assert!(row.iter().zip(mean.iter()).all(|(a, b)| (a - b).abs() < 1e-14));
        }
    }

    #[test]
    fn favor_operational_matches_materialized() {
        let qkv = random_qkv(4, 2, 5);
        let omega = draw_orthogonal_features(2, 8, 5).unwrap();
        let y = favor_attention(&qkv, &omega).unwrap();
        let m = favor_mixer(qkv.q.view(), qkv.k.view(), &omega).unwrap();
        let oracle = apply_mixer(&m, &FeatureSequence::new(qkv.v.clone()).unwrap()).unwrap();
        assert!(close(y.view(), oracle.view(), 1e-10));
    }

    #[test]
    fn rank_one_favor_rows_are_identical() {
        let qkv = random_qkv(6, 3, 8);
        let omega = draw_orthogonal_features(3, 1, 8).unwrap();
        let m = favor_mixer(qkv.q.view(), qkv.k.view(), &omega).unwrap();
        assert_eq!(m.class(), MixerClass::LowRank(1));
        let first = m.row(0).to_owned();
        for row in m.matrix().rows() {
            assert!(row.iter().zip(first.iter()).all(|(a, b)| (a - b).abs() < 1e-14));
        }
    }

    #[test]
    fn favor_rank_stays_below_feature_count() {
        let mut rng = MixRng::new(64);
        let q = rng.normal_matrix(64, 8, 0.5);
        let k = rng.normal_matrix(64, 8, 0.5);
        let omega = draw_orthogonal_features(8, 16, 1).unwrap();
        let favor = favor_mixer(q.view(), k.view(), &omega).unwrap();
        assert!(matrix_rank(favor.matrix(), DEFAULT_RANK_TOL).unwrap() <= 16);
    }

    #[test]
    fn favor_rows_sum_to_one() {
        let qkv = random_qkv(8, 3, 12);
        let omega = draw_orthogonal_features(3, 4, 12).unwrap();
        let m = favor_mixer(qkv.q.view(), qkv.k.view(), &omega).unwrap();
        for row in m.matrix().rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-10);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn rope_leaves_position_zero() {
        let cfg = RopeConfig::new(DEFAULT_ROPE_BASE, 4).unwrap();
        let x = array![[1.0, 2.0, 3.0, 4.0]];
        assert_eq!(apply_rope(x.view(), &cfg).unwrap(), x);
    }

    #[test]
    fn rope_rotates_first_pair_by_position() {
        let cfg = RopeConfig::new(123.0, 2).unwrap();
        let x = array![[0.0, 0.0], [0.7, -1.3]];
        let y = apply_rope(x.view(), &cfg).unwrap();
        let (x0, x1) = (0.7_f64, -1.3_f64);
        let expected = [1f64.cos() * x0 - 1f64.sin() * x1, 1f64.sin() * x0 + 1f64.cos() * x1];
        assert!((y[[1, 0]] - expected[0]).abs() < 1e-15);
        assert!((y[[1, 1]] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn rope_rejects_odd_width() {
        assert!(RopeConfig::new(DEFAULT_ROPE_BASE, 3).is_err());
        assert!(MultiHeadConfig::new(2, 6).unwrap().with_rope(DEFAULT_ROPE_BASE).is_err());
        let cfg = RopeConfig::new(DEFAULT_ROPE_BASE, 4).unwrap();
        assert!(apply_rope(Array2::zeros((2, 2)).view(), &cfg).is_err());
    }

    #[test]
    fn multi_head_config_validates_divisibility() {
        assert!(MultiHeadConfig::new(3, 8).is_err());
        assert!(MultiHeadConfig::new(0, 8).is_err());
        assert_eq!(MultiHeadConfig::new(4, 8).unwrap().d_head(), 2);
    }

    #[test]
    fn one_head_identity_projection_is_plain_softmax() {
        let x = MixRng::new(2).normal_matrix(5, 4, 1.0);
        let seq = FeatureSequence::new(x.clone()).unwrap();
        let cfg = MultiHeadConfig::new(1, 4).unwrap();
        let y = multi_head_attention(&seq, &AttentionWeights::identity(4), &cfg, &AttentionKind::Softmax).unwrap();
        let direct = softmax_attention(&QkvTriple::new(x.clone(), x.clone(), x).unwrap()).unwrap();
        assert!(close(y.view(), direct.view(), 1e-12));
    }

    #[test]
    fn zero_output_projection_gives_zero() {
        let mut rng = MixRng::new(5);
        let seq = FeatureSequence::new(rng.normal_matrix(6, 8, 1.0)).unwrap();
        let mut w = AttentionWeights::random(8, &mut rng);
        w.wo.fill(0.0);
        let cfg = MultiHeadConfig::new(2, 8).unwrap().with_rope(DEFAULT_ROPE_BASE).unwrap();
        let omega = draw_orthogonal_features(4, 8, 5).unwrap();
        for kind in [AttentionKind::Softmax, AttentionKind::Favor(omega)] {
            let y = multi_head_attention(&seq, &w, &cfg, &kind).unwrap();
            assert!(y.view().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn two_heads_match_manual_slices() {
        let mut rng = MixRng::new(9);
        let x = rng.normal_matrix(7, 8, 1.0);
        let w = AttentionWeights::random(8, &mut rng);
        let cfg = MultiHeadConfig::new(2, 8).unwrap();
        let y = multi_head_attention(&FeatureSequence::new(x.clone()).unwrap(), &w, &cfg, &AttentionKind::Softmax).unwrap();

        let (q, k, v) = (x.dot(&w.wq), x.dot(&w.wk), x.dot(&w.wv));
        let mut concat = Array2::<f64>::zeros((7, 8));
        for h in 0..2 {
            let cols = h * 4..(h + 1) * 4;
            for i in 0..7 {
                let logits: Vec<f64> = (0..7)
                    .map(|j| cols.clone().map(|c| q[[i, c]] * k[[j, c]]).sum())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                for c in cols.clone() {
                    concat[[i, c]] = (0..7).map(|j| weights[j] * v[[j, c]]).sum::<f64>() / total;
                }
            }
        }
        let oracle = concat.dot(&w.wo);
        assert!(close(y.view(), oracle.view(), 1e-12));
    }

    #[test]
    fn head_mixers_reproduce_attention() {
        let mut rng = MixRng::new(10);
        let seq = FeatureSequence::new(rng.normal_matrix(6, 4, 1.0)).unwrap();
        let w = AttentionWeights::identity(4);
        let cfg = MultiHeadConfig::new(2, 4).unwrap().with_rope(DEFAULT_ROPE_BASE).unwrap();
        let mixers = multi_head_mixers(&seq, &w, &cfg, &AttentionKind::Softmax).unwrap();
        assert_eq!(mixers.len(), 2);
        let y = multi_head_attention(&seq, &w, &cfg, &AttentionKind::Softmax).unwrap();
        for (h, m) in mixers.iter().enumerate() {
            let vh = FeatureSequence::new(seq.view().slice(s![.., h * 2..(h + 1) * 2]).to_owned()).unwrap();
            let yh = apply_mixer(m, &vh).unwrap();
            assert!(close(yh.view(), y.view().slice(s![.., h * 2..(h + 1) * 2]), 1e-12));
        }
    }
}
